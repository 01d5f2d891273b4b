#pragma once

#include <string>
#include <vector>

#include "evlm/tokenize.hpp"
#include "json.hpp"

namespace evlm::hybrid {

enum class Placement { uniform, first_k, stride };

const char* placement_name(Placement p);
Placement placement_from_name(const std::string& name);

// Tier assignment plus the exact token budget it implies. Source dims of -1
// mean "square frames at each tier's max edge".
struct HybridPlan {
    std::vector<video::Tier> tiers;
    std::vector<int64_t> per_frame_tokens;
    int64_t predicted_tokens = 0;
    video::ResolutionPolicy policy;
    Placement placement = Placement::uniform;
    int src_h = -1, src_w = -1;

    int frames() const { return static_cast<int>(tiers.size()); }
    nlohmann::json to_json() const;
};

// Exact per-frame token count for a tier given the source frame dims.
int64_t predicted_frame_tokens(video::Tier tier, const video::ResolutionPolicy& policy, int src_h,
                               int src_w);

// Assigns n_high HIGH frames (uniform interleaving by default, first frame
// HIGH whenever n_high >= 1) and totals the exact token budget.
HybridPlan plan(int frames, int n_high, int n_low, const video::ResolutionPolicy& policy,
                Placement placement = Placement::uniform, int src_h = -1, int src_w = -1);

// Resize each frame per its tier, tokenize, and verify the realized count
// equals the plan's prediction.
tok::TokenStream apply(const HybridPlan& plan, const video::VideoClip& clip);

}  // namespace evlm::hybrid
