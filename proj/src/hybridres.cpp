#include "evlm/hybridres.hpp"

#include <cmath>

namespace evlm::hybrid {

const char* placement_name(Placement p) {
    switch (p) {
        case Placement::uniform: return "uniform";
        case Placement::first_k: return "first_k";
        case Placement::stride: return "stride";
    }
    raise(ErrKind::contract, "unknown placement");
}

Placement placement_from_name(const std::string& name) {
    if (name == "uniform") return Placement::uniform;
    if (name == "first_k") return Placement::first_k;
    if (name == "stride") return Placement::stride;
    raise(ErrKind::contract, msg("unknown placement '", name, "'"));
}

nlohmann::json HybridPlan::to_json() const {
    nlohmann::json j;
    std::vector<std::string> names;
    for (video::Tier t : tiers) names.emplace_back(video::tier_name(t));
    j["tiers"] = names;
    j["per_frame_tokens"] = per_frame_tokens;
    j["predicted_tokens"] = predicted_tokens;
    j["placement"] = placement_name(placement);
    j["patch"] = policy.patch;
    j["max_edge_high"] = policy.max_edge_high;
    j["max_edge_low"] = policy.max_edge_low;
    j["src_h"] = src_h;
    j["src_w"] = src_w;
    return j;
}

int64_t predicted_frame_tokens(video::Tier tier, const video::ResolutionPolicy& policy, int src_h,
                               int src_w) {
    policy.validate();
    int edge = policy.edge_for(tier);
    int h = edge, w = edge;
    if (src_h > 0 && src_w > 0) {
        auto [rh, rw] = video::resized_dims(src_h, src_w, edge, policy.patch);
        h = rh;
        w = rw;
    }
    return tok::frame_token_count(h / policy.patch, w / policy.patch);
}

HybridPlan plan(int frames, int n_high, int n_low, const video::ResolutionPolicy& policy,
                Placement placement, int src_h, int src_w) {
    check(frames >= 1, ErrKind::contract, "plan: need at least one frame");
    check(n_high >= 0 && n_low >= 0, ErrKind::contract, "plan: negative tier counts");
    check(n_high + n_low == frames, ErrKind::contract,
          msg("plan: ", n_high, " high + ", n_low, " low != ", frames, " frames"));
    policy.validate();

    HybridPlan p;
    p.policy = policy;
    p.placement = placement;
    p.src_h = src_h;
    p.src_w = src_w;
    p.tiers.assign(static_cast<size_t>(frames), video::Tier::low);
    if (n_high > 0) {
        switch (placement) {
            case Placement::uniform:
                // floor(k * frames / n_high) yields n_high distinct indices
                // starting at 0, evenly spread.
                for (int k = 0; k < n_high; ++k)
                    p.tiers[static_cast<size_t>(static_cast<int64_t>(k) * frames / n_high)] = video::Tier::high;
                break;
            case Placement::first_k:
                for (int k = 0; k < n_high; ++k) p.tiers[static_cast<size_t>(k)] = video::Tier::high;
                break;
            case Placement::stride: {
                int s = (frames + n_high - 1) / n_high;
                int assigned = 0;
                for (int i = 0; i < frames && assigned < n_high; i += s) {
                    p.tiers[static_cast<size_t>(i)] = video::Tier::high;
                    ++assigned;
                }
                for (int i = 0; i < frames && assigned < n_high; ++i) {
                    if (p.tiers[static_cast<size_t>(i)] == video::Tier::high) continue;
                    p.tiers[static_cast<size_t>(i)] = video::Tier::high;
                    ++assigned;
                }
                break;
            }
        }
    }

    int64_t high_tokens = predicted_frame_tokens(video::Tier::high, policy, src_h, src_w);
    int64_t low_tokens = predicted_frame_tokens(video::Tier::low, policy, src_h, src_w);
    for (video::Tier t : p.tiers) {
        int64_t n = t == video::Tier::high ? high_tokens : low_tokens;
        p.per_frame_tokens.push_back(n);
        p.predicted_tokens += n;
    }
    return p;
}

tok::TokenStream apply(const HybridPlan& plan, const video::VideoClip& clip) {
    clip.validate();
    check(plan.frames() == clip.frames, ErrKind::contract,
          msg("apply: plan covers ", plan.frames(), " frames, clip has ", clip.frames));
    // The plan's budget must have been computed for these source dims.
    int64_t expect = 0;
    for (video::Tier t : plan.tiers)
        expect += predicted_frame_tokens(t, plan.policy, clip.height, clip.width);
    check(expect == plan.predicted_tokens, ErrKind::contract,
          msg("apply: plan predicts ", plan.predicted_tokens, " tokens but ", clip.height, "x", clip.width,
              " sources yield ", expect, "; re-plan with the clip's dims"));

    tok::TokenStream s;
    s.patch = plan.policy.patch;
    s.source_id = clip.source_id;
    for (int t = 0; t < clip.frames; ++t) {
        int edge = plan.policy.edge_for(plan.tiers[static_cast<size_t>(t)]);
        auto [nh, nw] = video::resized_dims(clip.height, clip.width, edge, plan.policy.patch);
        const float* src = clip.pixels.data() + t * clip.frame_stride();
        if (nh == clip.height && nw == clip.width) {
            tok::tokenize_frame(src, nh, nw, plan.policy.patch, t, s.records);
        } else {
            std::vector<float> frame = video::resize_frame(src, clip.height, clip.width, nh, nw);
            tok::tokenize_frame(frame.data(), nh, nw, plan.policy.patch, t, s.records);
        }
    }
    s.validate();
    check(static_cast<int64_t>(s.records.size()) == plan.predicted_tokens, ErrKind::structure,
          msg("apply: realized ", s.records.size(), " tokens, plan said ", plan.predicted_tokens));
    return s;
}

}  // namespace evlm::hybrid
