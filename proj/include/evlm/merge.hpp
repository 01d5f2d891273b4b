#pragma once

#include <utility>
#include <vector>

#include "evlm/patch_embed.hpp"
#include "json.hpp"

namespace evlm::merge {

struct MergeConfig {
    double threshold = 0.6;
    double target_ratio = 0.5;
    int switch_layer = -1;  // -1: resolved to depth/2 by the backbone
    bool enabled = false;

    void validate(int depth) const;
};

// Bookkeeping for one merge application: which input rows collapsed into which
// output rows, plus the per-(frame, cell) index matrix when the grid is
// uniform across frames.
struct MergeState {
    int layer = -1;
    int64_t in_rows = 0, out_rows = 0;
    int64_t in_patches = 0, out_patches = 0;
    double achieved_ratio = 1.0;  // out_patches / in_patches
    bool shortfall = false;       // ratio target unreachable, stopped early
    int64_t zero_norm_breaks = 0;
    std::vector<int64_t> anchor_of;            // input row -> output row
    std::vector<std::vector<int64_t>> groups;  // output row -> merged input rows
    bool uniform_grid = false;
    int grid_t = 0;
    int grid_cells = 0;
    std::vector<char> keep;  // uniform grids: grid_t x grid_cells anchor mask

    nlohmann::json to_json() const;
};

// Similarity-gated temporal chaining: at each spatial position, a token joins
// the running chain when its cosine similarity to the previous raw token at
// the same position exceeds the threshold; chains average to one survivor.
std::pair<embed::FeatureSeq, MergeState> threshold_merge(const embed::FeatureSeq& seq, double threshold);

// Greedy pairwise merging of temporally adjacent same-position tokens, highest
// similarity first (one merge per token per pass), until the surviving patch
// count is at most ceil(ratio * incoming patch count) or no pair remains.
std::pair<embed::FeatureSeq, MergeState> ratio_merge(const embed::FeatureSeq& seq, double target_ratio);

// Ablation baseline: plain temporal mean-pooling of consecutive frame groups
// of size ceil(1/ratio) at fixed structural slot. Needs an intact uniform
// grid (no prior merging).
embed::FeatureSeq pooling_baseline(const embed::FeatureSeq& seq, double ratio);

}  // namespace evlm::merge
