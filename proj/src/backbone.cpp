#include "evlm/backbone.hpp"

#include <algorithm>
#include <cmath>

#include "evlm/elvt.hpp"
#include "evlm/kernels.hpp"

namespace evlm::backbone {

BackboneConfig BackboneConfig::tiny() {
    BackboneConfig c;
    c.depth = 2;
    c.dim = 16;
    c.heads = 2;
    c.ffn_dim = 32;
    c.vocab = 264;
    c.max_seq = 1024;
    return c;
}

BackboneConfig BackboneConfig::reference() {
    BackboneConfig c;
    c.depth = 32;
    c.dim = 4096;
    c.heads = 32;
    c.ffn_dim = 11008;
    c.vocab = 32000;
    c.max_seq = 1 << 20;
    return c;
}

void BackboneConfig::validate() const {
    check(depth >= 2, ErrKind::contract, msg("backbone: depth ", depth, " < 2"));
    check(dim >= 1 && heads >= 1 && ffn_dim >= 1 && vocab >= 1 && max_seq >= 1, ErrKind::contract,
          "backbone: non-positive config field");
    check(dim % heads == 0, ErrKind::contract, msg("backbone: dim ", dim, " not divisible by ", heads, " heads"));
    check(dim / heads % 2 == 0, ErrKind::contract, "backbone: head dim must be even for rotary pairs");
    check(rope_base > 1.0, ErrKind::contract, "backbone: rope base must exceed 1");
    merge.validate(depth);
}

nlohmann::json BackboneConfig::to_json() const {
    return {{"depth", depth},
            {"dim", dim},
            {"heads", heads},
            {"ffn_dim", ffn_dim},
            {"vocab", vocab},
            {"max_seq", max_seq},
            {"rope_base", rope_base},
            {"merge",
             {{"threshold", merge.threshold},
              {"target_ratio", merge.target_ratio},
              {"switch_layer", merge.switch_layer},
              {"enabled", merge.enabled}}}};
}

BackboneConfig BackboneConfig::from_json(const nlohmann::json& j) {
    BackboneConfig c;
    c.depth = j.at("depth").get<int>();
    c.dim = j.at("dim").get<int>();
    c.heads = j.at("heads").get<int>();
    c.ffn_dim = j.at("ffn_dim").get<int>();
    c.vocab = j.at("vocab").get<int>();
    c.max_seq = j.at("max_seq").get<int64_t>();
    c.rope_base = j.at("rope_base").get<double>();
    const auto& m = j.at("merge");
    c.merge.threshold = m.at("threshold").get<double>();
    c.merge.target_ratio = m.at("target_ratio").get<double>();
    c.merge.switch_layer = m.at("switch_layer").get<int>();
    c.merge.enabled = m.at("enabled").get<bool>();
    c.validate();
    return c;
}

BackboneParams BackboneParams::init(const BackboneConfig& cfg, Rng& rng) {
    cfg.validate();
    BackboneParams p;
    p.cfg = cfg;
    double attn_std = 1.0 / std::sqrt(static_cast<double>(cfg.dim));
    double down_std = 1.0 / std::sqrt(static_cast<double>(cfg.ffn_dim));
    p.tok_embed = Tensor::randn({cfg.vocab, cfg.dim}, rng, 0.02, true);
    p.layers.resize(static_cast<size_t>(cfg.depth));
    for (auto& l : p.layers) {
        l.attn_gain = Tensor::full({cfg.dim}, 1.0);
        l.attn_gain.set_requires_grad(true);
        l.wq = Tensor::randn({cfg.dim, cfg.dim}, rng, attn_std, true);
        l.wk = Tensor::randn({cfg.dim, cfg.dim}, rng, attn_std, true);
        l.wv = Tensor::randn({cfg.dim, cfg.dim}, rng, attn_std, true);
        l.wo = Tensor::randn({cfg.dim, cfg.dim}, rng, attn_std, true);
        l.ffn_gain = Tensor::full({cfg.dim}, 1.0);
        l.ffn_gain.set_requires_grad(true);
        l.w_up = Tensor::randn({cfg.dim, cfg.ffn_dim}, rng, attn_std, true);
        l.w_down = Tensor::randn({cfg.ffn_dim, cfg.dim}, rng, down_std, true);
    }
    p.final_gain = Tensor::full({cfg.dim}, 1.0);
    p.final_gain.set_requires_grad(true);
    p.lm_head = Tensor::randn({cfg.dim, cfg.vocab}, rng, attn_std, true);
    return p;
}

std::vector<std::pair<std::string, Tensor>> BackboneParams::named_params() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("tok_embed", tok_embed);
    for (size_t i = 0; i < layers.size(); ++i) {
        std::string p = msg("layers.", i, ".");
        const auto& l = layers[i];
        out.emplace_back(p + "attn_gain", l.attn_gain);
        out.emplace_back(p + "wq", l.wq);
        out.emplace_back(p + "wk", l.wk);
        out.emplace_back(p + "wv", l.wv);
        out.emplace_back(p + "wo", l.wo);
        out.emplace_back(p + "ffn_gain", l.ffn_gain);
        out.emplace_back(p + "w_up", l.w_up);
        out.emplace_back(p + "w_down", l.w_down);
    }
    out.emplace_back("final_gain", final_gain);
    out.emplace_back("lm_head", lm_head);
    return out;
}

int64_t BackboneParams::param_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : named_params()) n += t.numel();
    return n;
}

void BackboneParams::set_requires_grad(bool on) {
    for (auto& [name, t] : named_params()) t.set_requires_grad(on);
}

void BackboneParams::save(const std::string& dir) const {
    elvt::save_named(dir, named_params(), cfg.to_json());
}

BackboneParams BackboneParams::load(const std::string& dir) {
    auto [tensors, meta] = elvt::load_named(dir);
    BackboneParams p;
    p.cfg = BackboneConfig::from_json(meta);
    auto take = [&tensors](const std::string& name) {
        auto it = tensors.find(name);
        check(it != tensors.end(), ErrKind::io, msg("backbone: checkpoint missing ", name));
        it->second.set_requires_grad(true);
        return it->second;
    };
    p.tok_embed = take("tok_embed");
    p.layers.resize(static_cast<size_t>(p.cfg.depth));
    for (size_t i = 0; i < p.layers.size(); ++i) {
        std::string pre = msg("layers.", i, ".");
        auto& l = p.layers[i];
        l.attn_gain = take(pre + "attn_gain");
        l.wq = take(pre + "wq");
        l.wk = take(pre + "wk");
        l.wv = take(pre + "wv");
        l.wo = take(pre + "wo");
        l.ffn_gain = take(pre + "ffn_gain");
        l.w_up = take(pre + "w_up");
        l.w_down = take(pre + "w_down");
    }
    p.final_gain = take("final_gain");
    p.lm_head = take("lm_head");
    return p;
}

namespace {

std::vector<int64_t> sequence_positions(const std::vector<embed::TokenMeta>& vis_meta,
                                        int64_t source_tokens, int64_t text_len) {
    std::vector<int64_t> pos;
    pos.reserve(vis_meta.size() + static_cast<size_t>(text_len));
    for (const auto& m : vis_meta) pos.push_back(m.pos);
    for (int64_t i = 0; i < text_len; ++i) pos.push_back(source_tokens + i);
    return pos;
}

Tensor run_block(const Tensor& h, const std::vector<int64_t>& pos, const LayerParams& lp,
                 const BackboneConfig& cfg, Tensor* k_out, Tensor* v_out) {
    Tensor a = ops::rmsnorm(h, lp.attn_gain);
    Tensor q = ops::rope(ops::matmul(a, lp.wq), pos, cfg.heads, cfg.rope_base);
    Tensor k = ops::rope(ops::matmul(a, lp.wk), pos, cfg.heads, cfg.rope_base);
    Tensor v = ops::matmul(a, lp.wv);
    if (k_out) {
        *k_out = k.detached_clone();
        *v_out = v.detached_clone();
    }
    Tensor attended = ops::causal_attention(q, k, v, cfg.heads);
    Tensor mid = ops::add(h, ops::matmul(attended, lp.wo));
    Tensor f = ops::rmsnorm(mid, lp.ffn_gain);
    Tensor up = ops::gelu(ops::matmul(f, lp.w_up));
    return ops::add(mid, ops::matmul(up, lp.w_down));
}

std::vector<int64_t> iota_rows(int64_t from, int64_t to) {
    std::vector<int64_t> r(static_cast<size_t>(to - from));
    for (int64_t i = from; i < to; ++i) r[static_cast<size_t>(i - from)] = i;
    return r;
}

}  // namespace

nlohmann::json ForwardTrace::counters_json() const {
    nlohmann::json j;
    j["rows_per_layer"] = rows_per_layer;
    j["visual_rows_per_layer"] = visual_rows_per_layer;
    j["text_len"] = text_len;
    j["visual_len"] = visual_len;
    j["frames"] = frames;
    j["source_tokens"] = source_tokens;
    j["fwd_macs"] = fwd_macs;
    nlohmann::json ms = nlohmann::json::array();
    for (const auto& m : merges) ms.push_back(m.to_json());
    j["merges"] = ms;
    return j;
}

ForwardTrace forward(const embed::FeatureSeq& visual, const std::vector<int>& text_ids,
                     const BackboneParams& params, DecodeState* capture) {
    const BackboneConfig& cfg = params.cfg;
    cfg.validate();
    int64_t n_vis = static_cast<int64_t>(visual.meta.size());
    if (n_vis > 0) {
        visual.validate();
        check(visual.feats.dim(1) == cfg.dim, ErrKind::dimension,
              msg("forward: visual dim ", visual.feats.dim(1), " vs model dim ", cfg.dim));
    }
    check(!text_ids.empty(), ErrKind::contract, "forward: need at least one text token");
    for (int id : text_ids)
        check(id >= 0 && id < cfg.vocab, ErrKind::index, msg("forward: token id ", id, " of vocab ", cfg.vocab));
    int64_t t_len = static_cast<int64_t>(text_ids.size());
    check(n_vis + t_len <= cfg.max_seq, ErrKind::capacity,
          msg("forward: sequence ", n_vis + t_len, " exceeds max ", cfg.max_seq));

    ForwardTrace trace;
    trace.text_len = t_len;
    trace.frames = n_vis > 0 ? visual.frames : 0;
    trace.source_tokens = n_vis > 0 ? visual.source_tokens : 0;
    trace.orig_visual_meta = visual.meta;
    trace.anchor_map = iota_rows(0, n_vis);

    unsigned long long macs0 = kern::macs();
    std::vector<int64_t> text_row_ids(text_ids.begin(), text_ids.end());
    Tensor text_part = ops::gather_rows(params.tok_embed, text_row_ids);
    Tensor h = n_vis > 0 ? ops::concat_rows({visual.feats, text_part}) : text_part;
    std::vector<embed::TokenMeta> vis_meta = visual.meta;

    trace.rows_per_layer.push_back(h.dim(0));
    trace.visual_rows_per_layer.push_back(n_vis);

    int switch_at = cfg.switch_layer();
    for (int l = 0; l < cfg.depth; ++l) {
        std::vector<int64_t> pos = sequence_positions(vis_meta, trace.source_tokens, t_len);
        Tensor* kc = nullptr;
        Tensor* vc = nullptr;
        if (capture) {
            capture->k.resize(static_cast<size_t>(cfg.depth));
            capture->v.resize(static_cast<size_t>(cfg.depth));
            kc = &capture->k[static_cast<size_t>(l)];
            vc = &capture->v[static_cast<size_t>(l)];
        }
        h = run_block(h, pos, params.layers[static_cast<size_t>(l)], cfg, kc, vc);

        int64_t cur_vis = static_cast<int64_t>(vis_meta.size());
        if (cfg.merge.enabled && cur_vis > 0) {
            embed::FeatureSeq vs;
            vs.feats = ops::gather_rows(h, iota_rows(0, cur_vis));
            vs.meta = vis_meta;
            vs.frames = trace.frames;
            vs.source_tokens = trace.source_tokens;
            auto [merged, state] = l < switch_at ? merge::threshold_merge(vs, cfg.merge.threshold)
                                                 : merge::ratio_merge(vs, cfg.merge.target_ratio);
            state.layer = l;
            for (auto& a : trace.anchor_map) a = state.anchor_of[static_cast<size_t>(a)];
            vis_meta = merged.meta;
            Tensor tp = ops::gather_rows(h, iota_rows(cur_vis, h.dim(0)));
            h = ops::concat_rows({merged.feats, tp});
            trace.merges.push_back(std::move(state));
        }
        trace.rows_per_layer.push_back(h.dim(0));
        trace.visual_rows_per_layer.push_back(static_cast<int64_t>(vis_meta.size()));
    }

    trace.visual_len = static_cast<int64_t>(vis_meta.size());
    trace.final_visual_meta = std::move(vis_meta);
    trace.final_hidden = h;
    Tensor text_tail = ops::gather_rows(h, iota_rows(trace.visual_len, h.dim(0)));
    trace.text_logits = ops::matmul(ops::rmsnorm(text_tail, params.final_gain), params.lm_head);
    trace.fwd_macs = kern::macs() - macs0;
    if (capture) {
        capture->rows = h.dim(0);
        capture->next_pos = trace.source_tokens + t_len;
    }
    return trace;
}

VisualTail visual_tail(const ForwardTrace& trace) {
    check(trace.source_tokens > 0, ErrKind::contract, "visual tail: trace has no visual tokens");
    VisualTail tail;
    tail.layouts.assign(static_cast<size_t>(trace.frames), {0, 0});

    // Original row of each (t, row, col) cell; anchor_map lifts it to the
    // surviving row that now carries it.
    std::vector<std::vector<int64_t>> cell_final(static_cast<size_t>(trace.frames));
    for (size_t o = 0; o < trace.orig_visual_meta.size(); ++o) {
        const auto& m = trace.orig_visual_meta[o];
        if (tail.layouts[static_cast<size_t>(m.t)].first == 0)
            tail.layouts[static_cast<size_t>(m.t)] = {m.grid_rows, m.grid_cols};
        if (m.kind != tok::TokKind::patch) continue;
        auto& cells = cell_final[static_cast<size_t>(m.t)];
        if (cells.empty()) cells.assign(static_cast<size_t>(m.grid_rows) * m.grid_cols, -1);
        cells[static_cast<size_t>(m.row) * m.grid_cols + m.col] = trace.anchor_map[o];
    }

    tail.frame_grids.reserve(static_cast<size_t>(trace.frames));
    for (int t = 0; t < trace.frames; ++t) {
        for (int64_t r : cell_final[static_cast<size_t>(t)])
            check(r >= 0, ErrKind::structure, msg("visual tail: frame ", t, " has an unmapped cell"));
        tail.frame_grids.push_back(ops::gather_rows(trace.final_hidden, cell_final[static_cast<size_t>(t)]));
    }

    std::vector<int64_t> frame_rows(static_cast<size_t>(trace.frames), -1);
    tail.partition.assign(static_cast<size_t>(trace.frames), {});
    for (size_t i = 0; i < trace.final_visual_meta.size(); ++i) {
        const auto& m = trace.final_visual_meta[i];
        if (m.kind == tok::TokKind::frame_mark) frame_rows[static_cast<size_t>(m.t)] = static_cast<int64_t>(i);
        if (m.kind == tok::TokKind::patch) tail.partition[static_cast<size_t>(m.t)].push_back(static_cast<int64_t>(i));
    }
    for (int t = 0; t < trace.frames; ++t)
        check(frame_rows[static_cast<size_t>(t)] >= 0, ErrKind::structure,
              msg("visual tail: frame ", t, " lost its marker"));
    tail.frame_marks = ops::gather_rows(trace.final_hidden, frame_rows);
    return tail;
}

int argmax_row(const Tensor& m, int64_t row) {
    check(m.defined() && m.rank() == 2, ErrKind::dimension, "argmax: want a rank-2 tensor");
    check(row >= 0 && row < m.dim(0), ErrKind::index, msg("argmax: row ", row, " of ", m.dim(0)));
    int best = 0;
    double best_v = m.at2(row, 0);
    for (int64_t j = 1; j < m.dim(1); ++j) {
        double v = m.at2(row, j);
        if (v > best_v) {
            best_v = v;
            best = static_cast<int>(j);
        }
    }
    return best;
}

int decode_step(DecodeState& state, const BackboneParams& params, int token_id) {
    NoGradGuard ng;
    const BackboneConfig& cfg = params.cfg;
    check(static_cast<int>(state.k.size()) == cfg.depth, ErrKind::contract,
          "decode: state does not match model depth");
    check(token_id >= 0 && token_id < cfg.vocab, ErrKind::index,
          msg("decode: token id ", token_id, " of vocab ", cfg.vocab));
    check(state.rows + 1 <= cfg.max_seq, ErrKind::capacity, "decode: sequence exceeds max length");

    Tensor x = ops::gather_rows(params.tok_embed, {token_id});
    std::vector<int64_t> pos = {state.next_pos};
    for (int l = 0; l < cfg.depth; ++l) {
        const LayerParams& lp = params.layers[static_cast<size_t>(l)];
        Tensor a = ops::rmsnorm(x, lp.attn_gain);
        Tensor q = ops::rope(ops::matmul(a, lp.wq), pos, cfg.heads, cfg.rope_base);
        Tensor kn = ops::rope(ops::matmul(a, lp.wk), pos, cfg.heads, cfg.rope_base);
        Tensor vn = ops::matmul(a, lp.wv);
        state.k[static_cast<size_t>(l)] = ops::concat_rows({state.k[static_cast<size_t>(l)], kn});
        state.v[static_cast<size_t>(l)] = ops::concat_rows({state.v[static_cast<size_t>(l)], vn});
        const Tensor& ks = state.k[static_cast<size_t>(l)];
        const Tensor& vs = state.v[static_cast<size_t>(l)];
        Tensor attended = ops::ranged_attention(q, ks, vs, {0}, {ks.dim(0)}, cfg.heads);
        Tensor mid = ops::add(x, ops::matmul(attended, lp.wo));
        Tensor f = ops::rmsnorm(mid, lp.ffn_gain);
        x = ops::add(mid, ops::matmul(ops::gelu(ops::matmul(f, lp.w_up)), lp.w_down));
    }
    ++state.next_pos;
    ++state.rows;
    Tensor logits = ops::matmul(ops::rmsnorm(x, params.final_gain), params.lm_head);
    return argmax_row(logits, 0);
}

std::vector<int> greedy_generate(const embed::FeatureSeq& visual, const std::vector<int>& prompt_ids,
                                 const BackboneParams& params, int max_new, int eos_id) {
    check(max_new >= 1, ErrKind::contract, "generate: max_new must be positive");
    NoGradGuard ng;
    DecodeState state;
    ForwardTrace trace = forward(visual, prompt_ids, params, &state);
    std::vector<int> out;
    int next = argmax_row(trace.text_logits, trace.text_len - 1);
    while (static_cast<int>(out.size()) < max_new) {
        out.push_back(next);
        if (next == eos_id) break;
        next = decode_step(state, params, next);
    }
    return out;
}

}  // namespace evlm::backbone
