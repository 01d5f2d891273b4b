#pragma once

#include <string>
#include <utility>
#include <vector>

#include "evlm/ops.hpp"
#include "evlm/tokenize.hpp"

namespace evlm::embed {

struct PatchEmbedConfig {
    int patch = 28;
    int dim = 128;
    int heads = 4;

    int64_t payload_len() const { return 3ll * patch * patch; }
    void validate() const;
};

// Projection plus the single marker cross-attention block. Marker embeddings
// start at zero so an untouched marker is exactly its residual update.
struct PatchEmbedParams {
    PatchEmbedConfig cfg;
    Tensor proj;         // [3P^2, D]
    Tensor proj_bias;    // [D]
    Tensor frame_embed;  // [1, D]
    Tensor line_embed;   // [1, D]
    Tensor wq, wk, wv, wo;  // [D, D]

    static PatchEmbedParams init(const PatchEmbedConfig& cfg, Rng& rng);
    std::vector<std::pair<std::string, Tensor>> named_params() const;
    int64_t param_count() const;
    void set_requires_grad(bool on);
    void save(const std::string& dir) const;
    static PatchEmbedParams load(const std::string& dir);
};

struct TokenMeta {
    tok::TokKind kind = tok::TokKind::patch;
    int t = -1;
    int row = -1;
    int col = -1;
    int64_t pos = -1;         // position in the original (pre-merge) sequence
    int64_t merge_count = 1;  // originals aggregated into this row
    int grid_rows = 0;        // patch grid of this token's frame
    int grid_cols = 0;
};

// Visual token features with per-row bookkeeping. Rows stay aligned with meta
// through merging; merge_count totals are conserved.
struct FeatureSeq {
    Tensor feats;  // [N, D]
    std::vector<TokenMeta> meta;
    int frames = 0;
    int64_t source_tokens = 0;

    int64_t rows() const { return static_cast<int64_t>(meta.size()); }
    std::vector<int64_t> rows_of_kind(tok::TokKind kind) const;
    void validate() const;
};

FeatureSeq embed(const tok::TokenStream& stream, const PatchEmbedParams& params);

// Residual update of each FRAME marker from attention over its frame's patch
// rows, and of each LINE marker over its row's patch rows. Patch rows pass
// through untouched.
FeatureSeq marker_cross_attend(const FeatureSeq& seq, const PatchEmbedParams& params);

}  // namespace evlm::embed
