#include "evlm/patch_embed.hpp"

#include <cmath>
#include <map>

#include "evlm/elvt.hpp"

namespace evlm::embed {

void PatchEmbedConfig::validate() const {
    check(patch >= 1 && dim >= 1 && heads >= 1, ErrKind::contract, "patch embed: non-positive config");
    check(dim % heads == 0, ErrKind::contract, msg("patch embed: dim ", dim, " not divisible by ", heads, " heads"));
}

PatchEmbedParams PatchEmbedParams::init(const PatchEmbedConfig& cfg, Rng& rng) {
    cfg.validate();
    PatchEmbedParams p;
    p.cfg = cfg;
    double proj_std = 1.0 / std::sqrt(static_cast<double>(cfg.payload_len()));
    double attn_std = 1.0 / std::sqrt(static_cast<double>(cfg.dim));
    p.proj = Tensor::randn({cfg.payload_len(), cfg.dim}, rng, proj_std, true);
    p.proj_bias = Tensor::zeros({cfg.dim}, true);
    p.frame_embed = Tensor::zeros({1, cfg.dim}, true);
    p.line_embed = Tensor::zeros({1, cfg.dim}, true);
    p.wq = Tensor::randn({cfg.dim, cfg.dim}, rng, attn_std, true);
    p.wk = Tensor::randn({cfg.dim, cfg.dim}, rng, attn_std, true);
    p.wv = Tensor::randn({cfg.dim, cfg.dim}, rng, attn_std, true);
    p.wo = Tensor::randn({cfg.dim, cfg.dim}, rng, attn_std, true);
    return p;
}

std::vector<std::pair<std::string, Tensor>> PatchEmbedParams::named_params() const {
    return {{"proj", proj},         {"proj_bias", proj_bias}, {"frame_embed", frame_embed},
            {"line_embed", line_embed}, {"wq", wq},           {"wk", wk},
            {"wv", wv},             {"wo", wo}};
}

int64_t PatchEmbedParams::param_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : named_params()) n += t.numel();
    return n;
}

void PatchEmbedParams::set_requires_grad(bool on) {
    for (auto& [name, t] : named_params()) t.set_requires_grad(on);
}

void PatchEmbedParams::save(const std::string& dir) const {
    nlohmann::json meta = {{"patch", cfg.patch}, {"dim", cfg.dim}, {"heads", cfg.heads}};
    elvt::save_named(dir, named_params(), meta);
}

PatchEmbedParams PatchEmbedParams::load(const std::string& dir) {
    auto [tensors, meta] = elvt::load_named(dir);
    PatchEmbedConfig cfg;
    cfg.patch = meta.at("patch").get<int>();
    cfg.dim = meta.at("dim").get<int>();
    cfg.heads = meta.at("heads").get<int>();
    cfg.validate();
    PatchEmbedParams p;
    p.cfg = cfg;
    auto take = [&](const char* name) {
        auto it = tensors.find(name);
        check(it != tensors.end(), ErrKind::io, msg("patch embed: checkpoint missing ", name));
        it->second.set_requires_grad(true);
        return it->second;
    };
    p.proj = take("proj");
    p.proj_bias = take("proj_bias");
    p.frame_embed = take("frame_embed");
    p.line_embed = take("line_embed");
    p.wq = take("wq");
    p.wk = take("wk");
    p.wv = take("wv");
    p.wo = take("wo");
    check(p.proj.dim(0) == cfg.payload_len() && p.proj.dim(1) == cfg.dim, ErrKind::dimension,
          "patch embed: projection shape disagrees with config");
    return p;
}

std::vector<int64_t> FeatureSeq::rows_of_kind(tok::TokKind kind) const {
    std::vector<int64_t> out;
    for (int64_t i = 0; i < rows(); ++i)
        if (meta[static_cast<size_t>(i)].kind == kind) out.push_back(i);
    return out;
}

void FeatureSeq::validate() const {
    check(feats.defined() && feats.rank() == 2, ErrKind::dimension, "feature seq: features must be [N, D]");
    if (feats.dim(0) != rows())
        raise(ErrKind::dimension, msg("feature seq: ", feats.dim(0), " feature rows vs ", rows(), " meta rows"));
    int64_t total = 0;
    for (const auto& m : meta) {
        check(m.kind != tok::TokKind::text, ErrKind::contract, "feature seq: text rows do not belong here");
        check(m.merge_count >= 1, ErrKind::contract, "feature seq: merge_count must be >= 1");
        if (m.t < 0 || m.t >= frames)
            raise(ErrKind::index, msg("feature seq: frame index ", m.t, " of ", frames));
        total += m.merge_count;
    }
    if (total != source_tokens)
        raise(ErrKind::contract, msg("feature seq: merge counts total ", total, ", want ", source_tokens));
}

FeatureSeq embed(const tok::TokenStream& stream, const PatchEmbedParams& params) {
    params.cfg.validate();
    check(stream.patch == params.cfg.patch, ErrKind::contract,
          msg("embed: stream patch ", stream.patch, " vs params patch ", params.cfg.patch));
    auto layout = detokenize_layout(stream);  // validates ordering
    int64_t n = static_cast<int64_t>(stream.records.size());
    check(n >= 1, ErrKind::contract, "embed: empty stream");
    int64_t d = params.cfg.dim;
    int64_t plen = params.cfg.payload_len();

    std::vector<int64_t> patch_rows, frame_rows, line_rows;
    FeatureSeq seq;
    seq.frames = static_cast<int>(layout.size());
    seq.source_tokens = n;
    seq.meta.reserve(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        const auto& r = stream.records[static_cast<size_t>(i)];
        check(r.kind != tok::TokKind::text, ErrKind::contract, "embed: text tokens are embedded by the backbone");
        TokenMeta m;
        m.kind = r.kind;
        m.t = r.t;
        m.row = r.row;
        m.col = r.col;
        m.pos = i;
        m.grid_rows = layout[static_cast<size_t>(r.t)].first;
        m.grid_cols = layout[static_cast<size_t>(r.t)].second;
        seq.meta.push_back(m);
        switch (r.kind) {
            case tok::TokKind::patch: patch_rows.push_back(i); break;
            case tok::TokKind::frame_mark: frame_rows.push_back(i); break;
            case tok::TokKind::line_mark: line_rows.push_back(i); break;
            case tok::TokKind::text: break;
        }
    }

    Tensor payloads = Tensor::zeros({static_cast<int64_t>(patch_rows.size()), plen});
    for (size_t i = 0; i < patch_rows.size(); ++i) {
        const auto& rec = stream.records[static_cast<size_t>(patch_rows[i])];
        check(static_cast<int64_t>(rec.payload.size()) == plen, ErrKind::contract,
              msg("embed: payload length ", rec.payload.size(), ", want ", plen));
        for (int64_t j = 0; j < plen; ++j)
            payloads.set(static_cast<int64_t>(i) * plen + j, static_cast<double>(rec.payload[static_cast<size_t>(j)]));
    }

    Tensor patch_feats = ops::add_rowwise(ops::matmul(payloads, params.proj), params.proj_bias);
    Tensor base = Tensor::zeros({n, d});
    Tensor assembled = ops::scatter_rows(base, patch_rows, patch_feats);
    if (!frame_rows.empty()) {
        Tensor frame_feats = ops::gather_rows(params.frame_embed, std::vector<int64_t>(frame_rows.size(), 0));
        assembled = ops::scatter_rows(assembled, frame_rows, frame_feats);
    }
    if (!line_rows.empty()) {
        Tensor line_feats = ops::gather_rows(params.line_embed, std::vector<int64_t>(line_rows.size(), 0));
        assembled = ops::scatter_rows(assembled, line_rows, line_feats);
    }
    seq.feats = assembled;
    seq.validate();
    return seq;
}

FeatureSeq marker_cross_attend(const FeatureSeq& seq, const PatchEmbedParams& params) {
    seq.validate();
    check(seq.feats.dim(1) == params.cfg.dim, ErrKind::dimension,
          msg("cross attend: feature dim ", seq.feats.dim(1), " vs params dim ", params.cfg.dim));

    // Spans of each frame / row in patch-only index space. Raster ordering
    // makes both contiguous.
    std::vector<int64_t> patch_rows;
    std::map<int, std::pair<int64_t, int64_t>> frame_span;
    std::map<std::pair<int, int>, std::pair<int64_t, int64_t>> row_span;
    for (int64_t i = 0; i < seq.rows(); ++i) {
        const auto& m = seq.meta[static_cast<size_t>(i)];
        if (m.kind != tok::TokKind::patch) continue;
        int64_t idx = static_cast<int64_t>(patch_rows.size());
        patch_rows.push_back(i);
        auto f = frame_span.emplace(m.t, std::make_pair(idx, idx)).first;
        f->second.second = idx + 1;
        auto r = row_span.emplace(std::make_pair(m.t, m.row), std::make_pair(idx, idx)).first;
        r->second.second = idx + 1;
    }

    std::vector<int64_t> marker_rows, lo, hi;
    for (int64_t i = 0; i < seq.rows(); ++i) {
        const auto& m = seq.meta[static_cast<size_t>(i)];
        if (m.kind == tok::TokKind::frame_mark) {
            auto it = frame_span.find(m.t);
            check(it != frame_span.end(), ErrKind::structure,
                  msg("cross attend: frame ", m.t, " has no patch rows"));
            marker_rows.push_back(i);
            lo.push_back(it->second.first);
            hi.push_back(it->second.second);
        } else if (m.kind == tok::TokKind::line_mark) {
            auto it = row_span.find({m.t, m.row});
            check(it != row_span.end(), ErrKind::structure,
                  msg("cross attend: row ", m.row, " of frame ", m.t, " has no patch rows"));
            marker_rows.push_back(i);
            lo.push_back(it->second.first);
            hi.push_back(it->second.second);
        }
    }
    if (marker_rows.empty()) return seq;
    check(!patch_rows.empty(), ErrKind::structure, "cross attend: no patch rows to attend over");

    Tensor pm = ops::gather_rows(seq.feats, patch_rows);
    Tensor keys = ops::matmul(pm, params.wk);
    Tensor values = ops::matmul(pm, params.wv);
    Tensor markers = ops::gather_rows(seq.feats, marker_rows);
    Tensor queries = ops::matmul(markers, params.wq);
    Tensor attended = ops::ranged_attention(queries, keys, values, lo, hi, params.cfg.heads);
    Tensor updated = ops::add(markers, ops::matmul(attended, params.wo));

    FeatureSeq out = seq;
    out.feats = ops::scatter_rows(seq.feats, marker_rows, updated);
    return out;
}

}  // namespace evlm::embed
