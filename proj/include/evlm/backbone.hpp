#pragma once

#include <string>
#include <utility>
#include <vector>

#include "evlm/merge.hpp"

namespace evlm::backbone {

struct BackboneConfig {
    int depth = 8;
    int dim = 128;
    int heads = 4;
    int ffn_dim = 512;
    int vocab = 512;
    int64_t max_seq = 32768;
    double rope_base = 10000.0;
    merge::MergeConfig merge;

    static BackboneConfig toy() { return {}; }
    // Minimal net for full-pipeline gradient checks.
    static BackboneConfig tiny();
    // 7B-class geometry used by the analytic cost model only.
    static BackboneConfig reference();

    int switch_layer() const { return merge.switch_layer >= 0 ? merge.switch_layer : depth / 2; }
    void validate() const;
    nlohmann::json to_json() const;
    static BackboneConfig from_json(const nlohmann::json& j);
};

struct LayerParams {
    Tensor attn_gain;  // [D]
    Tensor wq, wk, wv, wo;  // [D, D]
    Tensor ffn_gain;   // [D]
    Tensor w_up;    // [D, D_ff]
    Tensor w_down;  // [D_ff, D]
};

struct BackboneParams {
    BackboneConfig cfg;
    Tensor tok_embed;  // [V, D]
    std::vector<LayerParams> layers;
    Tensor final_gain;  // [D]
    Tensor lm_head;     // [D, V]

    static BackboneParams init(const BackboneConfig& cfg, Rng& rng);
    std::vector<std::pair<std::string, Tensor>> named_params() const;
    int64_t param_count() const;
    void set_requires_grad(bool on);
    void save(const std::string& dir) const;
    static BackboneParams load(const std::string& dir);
};

// Rope'd key/value rows per layer, captured at that layer's entry sequence.
// Extending it one token at a time reproduces a full re-forward bit for bit.
struct DecodeState {
    std::vector<Tensor> k, v;  // per layer, [rows, D]
    int64_t rows = 0;
    int64_t next_pos = 0;  // original flat index for the next appended token
};

struct ForwardTrace {
    Tensor final_hidden;  // [N_final, D], after the last block (and its merge)
    Tensor text_logits;   // [text_len, V]
    std::vector<embed::TokenMeta> final_visual_meta;
    std::vector<embed::TokenMeta> orig_visual_meta;
    std::vector<int64_t> anchor_map;  // original visual row -> final visual row
    std::vector<int64_t> rows_per_layer;         // N_0 .. N_depth, text included
    std::vector<int64_t> visual_rows_per_layer;  // same ledger, visual rows only
    std::vector<merge::MergeState> merges;
    int64_t text_len = 0;
    int64_t visual_len = 0;  // surviving visual rows
    int frames = 0;
    int64_t source_tokens = 0;  // original visual rows
    unsigned long long fwd_macs = 0;

    nlohmann::json counters_json() const;
};

// Causal transformer over [visual rows][text rows]. With merging enabled the
// configured policy (threshold below the switch layer, ratio at and above it)
// runs on the visual prefix after every block. Rotary positions are original
// flat indices; merged rows keep their anchor's index. When `capture` is given
// the per-layer entry k/v rows are stored for incremental decoding.
ForwardTrace forward(const embed::FeatureSeq& visual, const std::vector<int>& text_ids,
                     const BackboneParams& params, DecodeState* capture = nullptr);

struct VisualTail {
    std::vector<Tensor> frame_grids;  // per frame [grid_rows*grid_cols, D], anchors expanded
    std::vector<std::pair<int, int>> layouts;
    Tensor frame_marks;  // [T, D]
    std::vector<std::vector<int64_t>> partition;  // per frame: surviving patch row ids
};

// Final-layer visual features regrouped per frame for the guidance losses.
VisualTail visual_tail(const ForwardTrace& trace);

// Appends one token, returns the id of the argmax next token (ties -> lowest).
int decode_step(DecodeState& state, const BackboneParams& params, int token_id);

// Greedy decoding after a prefill of [visual][prompt]; stops at eos_id or cap.
std::vector<int> greedy_generate(const embed::FeatureSeq& visual, const std::vector<int>& prompt_ids,
                                 const BackboneParams& params, int max_new, int eos_id);

int argmax_row(const Tensor& m, int64_t row);

}  // namespace evlm::backbone
