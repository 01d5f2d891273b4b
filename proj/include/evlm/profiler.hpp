#pragma once

#include <string>
#include <vector>

#include "evlm/backbone.hpp"
#include "evlm/hybridres.hpp"

namespace evlm::profiler {

struct LayerFlops {
    int64_t tokens = 0;  // sequence rows at the layer's entry
    double qkvo = 0.0;   // attention projections
    double attn = 0.0;   // score + value mixing
    double ffn = 0.0;
    double total() const { return qkvo + attn + ffn; }
};

// Multiply-add cost of the patch embedding stage for a given stream shape.
struct EmbedCost {
    int64_t patches = 0;
    int64_t markers = 0;
    int64_t payload_len = 0;  // 3 * P^2
};

struct FlopsReport {
    std::string scenario;
    std::vector<LayerFlops> layers;
    double embed_macs = 0.0;
    double head_macs = 0.0;
    double total_macs = 0.0;

    nlohmann::json to_json() const;
    std::string to_csv() const;
    std::string to_table() const;
};

// Closed-form multiply-add totals for a causal prefill. visual_per_layer gives
// the visual rows at each layer's entry (at least depth entries; extras are
// ignored); text_len rows ride along every layer and feed the output head.
FlopsReport analytic_flops(const std::vector<int64_t>& visual_per_layer,
                           const backbone::BackboneConfig& cfg, int64_t text_len,
                           const EmbedCost* embed = nullptr);

// Entry-row schedule for a simulated merge: shallow layers keep `shallow_keep`
// of the patches, deep layers keep `deep_ratio`, floored at the tube count.
std::vector<int64_t> simulate_merge_schedule(int64_t patches, int64_t markers, int64_t tubes,
                                             const backbone::BackboneConfig& cfg, double shallow_keep,
                                             double deep_ratio);

struct PrefillMeasurement {
    double prefill_ms = 0.0;
    double ttft_ms = 0.0;  // prefill plus one incremental decode step
    unsigned long long measured_macs = 0;
    double analytic_macs = 0.0;
    bool timer_advisory = false;  // prefill median under 1 ms: scale up
    std::vector<double> run_ms;
    std::vector<int64_t> visual_rows_per_layer;
};

// Single-threaded wall-clock micro-benchmark: two warmups, five timed runs,
// median reported; instrumented multiply-adds from the last run.
PrefillMeasurement measure_prefill(const embed::FeatureSeq& visual, const std::vector<int>& text_ids,
                                   const backbone::BackboneParams& params);

struct ScenarioKnobs {
    backbone::BackboneConfig model = backbone::BackboneConfig::reference();
    video::ResolutionPolicy policy = video::ResolutionPolicy::table5();
    int64_t text_len = 64;
    double shallow_keep = 0.75;
    double deep_ratio = 0.5;
    // Encoder-stack cost per frame, expressed through the target ratio of
    // encoder-based to encoder-free totals at 32 frames.
    double encoder_anchor = 260.0 / 75.0;
};

struct ScenarioRow {
    std::string scenario;
    int frames = 0;
    double total_macs = 0.0;
    double vs_encoder_free = 1.0;  // total / encoder-free total at same frames
};

// Rows: encoder-based baseline, encoder-free, +merge, +merge+hybrid — per
// frame count, with totals relative to the encoder-free row.
std::vector<ScenarioRow> scenario_table(const std::vector<int>& frame_counts, const ScenarioKnobs& knobs);

std::string scenario_table_text(const std::vector<ScenarioRow>& rows);
nlohmann::json scenario_table_json(const std::vector<ScenarioRow>& rows);

}  // namespace evlm::profiler
