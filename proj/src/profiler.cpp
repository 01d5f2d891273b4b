#include "evlm/profiler.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "evlm/kernels.hpp"

namespace evlm::profiler {

nlohmann::json FlopsReport::to_json() const {
    nlohmann::json j;
    j["scenario"] = scenario;
    nlohmann::json ls = nlohmann::json::array();
    for (const auto& l : layers)
        ls.push_back({{"tokens", l.tokens}, {"qkvo", l.qkvo}, {"attn", l.attn}, {"ffn", l.ffn}, {"total", l.total()}});
    j["layers"] = ls;
    j["embed_macs"] = embed_macs;
    j["head_macs"] = head_macs;
    j["total_macs"] = total_macs;
    return j;
}

std::string FlopsReport::to_csv() const {
    std::ostringstream os;
    os << "layer,tokens,qkvo,attn,ffn,total\n";
    for (size_t i = 0; i < layers.size(); ++i) {
        const auto& l = layers[i];
        os << i << "," << l.tokens << "," << std::setprecision(17) << l.qkvo << "," << l.attn << ","
           << l.ffn << "," << l.total() << "\n";
    }
    os << "embed,," << embed_macs << ",,,\n";
    os << "head,," << head_macs << ",,,\n";
    os << "total,,,,," << total_macs << "\n";
    return os.str();
}

std::string FlopsReport::to_table() const {
    std::ostringstream os;
    os << scenario << "\n";
    os << std::left << std::setw(8) << "layer" << std::right << std::setw(10) << "tokens" << std::setw(16)
       << "qkvo" << std::setw(16) << "attn" << std::setw(16) << "ffn" << std::setw(16) << "total"
       << "\n";
    auto fmt = [](double v) {
        std::ostringstream s;
        s << std::scientific << std::setprecision(3) << v;
        return s.str();
    };
    for (size_t i = 0; i < layers.size(); ++i) {
        const auto& l = layers[i];
        os << std::left << std::setw(8) << i << std::right << std::setw(10) << l.tokens << std::setw(16)
           << fmt(l.qkvo) << std::setw(16) << fmt(l.attn) << std::setw(16) << fmt(l.ffn) << std::setw(16)
           << fmt(l.total()) << "\n";
    }
    os << std::left << std::setw(8) << "embed" << std::right << std::setw(74) << fmt(embed_macs) << "\n";
    os << std::left << std::setw(8) << "head" << std::right << std::setw(74) << fmt(head_macs) << "\n";
    os << std::left << std::setw(8) << "total" << std::right << std::setw(74) << fmt(total_macs) << "\n";
    return os.str();
}

FlopsReport analytic_flops(const std::vector<int64_t>& visual_per_layer,
                           const backbone::BackboneConfig& cfg, int64_t text_len,
                           const EmbedCost* embed) {
    cfg.validate();
    check(text_len >= 0, ErrKind::contract, "flops: negative text length");
    check(static_cast<int>(visual_per_layer.size()) >= cfg.depth, ErrKind::contract,
          msg("flops: schedule has ", visual_per_layer.size(), " entries for depth ", cfg.depth));
    FlopsReport r;
    double d = static_cast<double>(cfg.dim);
    for (int l = 0; l < cfg.depth; ++l) {
        int64_t vis = visual_per_layer[static_cast<size_t>(l)];
        check(vis >= 0, ErrKind::contract, "flops: negative row count");
        double n = static_cast<double>(vis + text_len);
        LayerFlops lf;
        lf.tokens = vis + text_len;
        lf.qkvo = 4.0 * n * d * d;
        lf.attn = n * (n + 1.0) * d;
        lf.ffn = 2.0 * n * d * static_cast<double>(cfg.ffn_dim);
        r.layers.push_back(lf);
        r.total_macs += lf.total();
    }
    r.head_macs = static_cast<double>(text_len) * d * static_cast<double>(cfg.vocab);
    r.total_macs += r.head_macs;
    if (embed) {
        double p = static_cast<double>(embed->patches);
        double m = static_cast<double>(embed->markers);
        r.embed_macs = p * static_cast<double>(embed->payload_len) * d + 2.0 * p * d * d + 2.0 * m * d * d +
                       4.0 * p * d;
        r.total_macs += r.embed_macs;
    }
    return r;
}

std::vector<int64_t> simulate_merge_schedule(int64_t patches, int64_t markers, int64_t tubes,
                                             const backbone::BackboneConfig& cfg, double shallow_keep,
                                             double deep_ratio) {
    cfg.validate();
    check(patches >= 0 && markers >= 0 && tubes >= 0, ErrKind::contract, "schedule: negative counts");
    check(shallow_keep > 0.0 && shallow_keep <= 1.0 && deep_ratio > 0.0 && deep_ratio <= 1.0,
          ErrKind::contract, "schedule: keep fractions must be in (0,1]");
    std::vector<int64_t> entry;
    int64_t p = patches;
    int switch_at = cfg.switch_layer();
    for (int l = 0; l < cfg.depth; ++l) {
        entry.push_back(p + markers);
        if (!cfg.merge.enabled) continue;
        double keep = l < switch_at ? shallow_keep : deep_ratio;
        p = std::max(tubes, static_cast<int64_t>(std::ceil(keep * static_cast<double>(p))));
    }
    return entry;
}

PrefillMeasurement measure_prefill(const embed::FeatureSeq& visual, const std::vector<int>& text_ids,
                                   const backbone::BackboneParams& params) {
    int saved_threads = threading::threads();
    threading::set_threads(1);
    NoGradGuard ng;
    PrefillMeasurement m;
    auto one_run = [&](bool decode) {
        backbone::DecodeState state;
        auto t0 = std::chrono::steady_clock::now();
        backbone::ForwardTrace trace = backbone::forward(visual, text_ids, params, &state);
        auto t1 = std::chrono::steady_clock::now();
        int first = backbone::argmax_row(trace.text_logits, trace.text_len - 1);
        if (decode) backbone::decode_step(state, params, first);
        auto t2 = std::chrono::steady_clock::now();
        m.visual_rows_per_layer = trace.visual_rows_per_layer;
        m.measured_macs = trace.fwd_macs;
        return std::make_pair(std::chrono::duration<double, std::milli>(t1 - t0).count(),
                              std::chrono::duration<double, std::milli>(t2 - t0).count());
    };
    for (int w = 0; w < 2; ++w) one_run(false);
    std::vector<double> prefills, ttfts;
    for (int r = 0; r < 5; ++r) {
        auto [pf, tt] = one_run(true);
        prefills.push_back(pf);
        ttfts.push_back(tt);
    }
    m.run_ms = prefills;
    std::vector<double> ps = prefills, ts = ttfts;
    std::sort(ps.begin(), ps.end());
    std::sort(ts.begin(), ts.end());
    m.prefill_ms = ps[ps.size() / 2];
    m.ttft_ms = ts[ts.size() / 2];
    m.timer_advisory = m.prefill_ms < 1.0;
    m.analytic_macs =
        analytic_flops(m.visual_rows_per_layer, params.cfg, static_cast<int64_t>(text_ids.size())).total_macs;
    threading::set_threads(saved_threads);
    return m;
}

namespace {

double scenario_total(int frames, int n_high, bool merged, const ScenarioKnobs& knobs) {
    const auto& cfg = knobs.model;
    int hp = knobs.policy.max_edge_high / knobs.policy.patch;
    int lp = knobs.policy.max_edge_low / knobs.policy.patch;
    int64_t high_patches = static_cast<int64_t>(hp) * hp;
    int64_t low_patches = static_cast<int64_t>(lp) * lp;
    int64_t high_markers = hp + 1;
    int64_t low_markers = lp + 1;
    int n_low = frames - n_high;
    int64_t patches = static_cast<int64_t>(n_high) * high_patches + static_cast<int64_t>(n_low) * low_patches;
    int64_t markers = static_cast<int64_t>(n_high) * high_markers + static_cast<int64_t>(n_low) * low_markers;
    int64_t tubes = (n_high > 0 ? high_patches : 0) + (n_low > 0 ? low_patches : 0);

    backbone::BackboneConfig cfg2 = cfg;
    cfg2.merge.enabled = merged;
    std::vector<int64_t> schedule =
        simulate_merge_schedule(patches, markers, tubes, cfg2, knobs.shallow_keep, knobs.deep_ratio);
    EmbedCost ec{patches, markers, 3ll * knobs.policy.patch * knobs.policy.patch};
    return analytic_flops(schedule, cfg2, knobs.text_len, &ec).total_macs;
}

}  // namespace

std::vector<ScenarioRow> scenario_table(const std::vector<int>& frame_counts, const ScenarioKnobs& knobs) {
    check(!frame_counts.empty(), ErrKind::contract, "scenario table: no frame counts");
    for (int f : frame_counts) check(f >= 1, ErrKind::contract, "scenario table: frame count must be positive");

    // Per-frame encoder cost chosen so encoder-based / encoder-free matches the
    // anchor ratio at 32 frames.
    double free32 = scenario_total(32, 32, false, knobs);
    double encoder_per_frame = (knobs.encoder_anchor - 1.0) * free32 / 32.0;

    std::vector<ScenarioRow> rows;
    for (int f : frame_counts) {
        double enc_free = scenario_total(f, f, false, knobs);
        double enc_based = enc_free + encoder_per_frame * f;
        double with_merge = scenario_total(f, f, true, knobs);
        int n_high = std::max(1, f / 4);
        double with_hr = scenario_total(f, n_high, true, knobs);
        rows.push_back({"encoder-based", f, enc_based, enc_based / enc_free});
        rows.push_back({"encoder-free", f, enc_free, 1.0});
        rows.push_back({"+merge", f, with_merge, with_merge / enc_free});
        rows.push_back({"+merge+hybrid", f, with_hr, with_hr / enc_free});
    }
    return rows;
}

std::string scenario_table_text(const std::vector<ScenarioRow>& rows) {
    std::ostringstream os;
    os << std::left << std::setw(16) << "scenario" << std::right << std::setw(8) << "frames" << std::setw(16)
       << "GMACs" << std::setw(18) << "vs encoder-free" << "\n";
    for (const auto& r : rows) {
        os << std::left << std::setw(16) << r.scenario << std::right << std::setw(8) << r.frames
           << std::setw(16) << std::fixed << std::setprecision(2) << r.total_macs / 1e9 << std::setw(18)
           << std::setprecision(3) << r.vs_encoder_free << "\n";
    }
    return os.str();
}

nlohmann::json scenario_table_json(const std::vector<ScenarioRow>& rows) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& r : rows)
        j.push_back({{"scenario", r.scenario},
                     {"frames", r.frames},
                     {"total_macs", r.total_macs},
                     {"vs_encoder_free", r.vs_encoder_free}});
    return j;
}

}  // namespace evlm::profiler
