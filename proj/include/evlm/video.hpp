#pragma once

#include <string>
#include <utility>
#include <vector>

#include "evlm/common.hpp"

namespace evlm::video {

enum class Tier { high, low };

const char* tier_name(Tier tier);

// Frame geometry constraints. Every processed frame has both edges rounded to
// multiples of `patch`; `max_edge_*` caps the longest edge per tier.
struct ResolutionPolicy {
    int patch = 28;
    int max_edge_high = 672;
    int max_edge_low = 336;

    static ResolutionPolicy defaults() { return {}; }
    static ResolutionPolicy table5() { return {28, 672, 224}; }

    int edge_for(Tier tier) const { return tier == Tier::high ? max_edge_high : max_edge_low; }
    void validate() const;
};

// Raw pixel clip, T frames of 3xHxW channels-first floats in [0,1].
struct VideoClip {
    int frames = 0;
    int height = 0;
    int width = 0;
    double fps = 0.0;  // 0 = unknown
    std::string source_id;
    std::vector<float> pixels;

    static VideoClip empty(int frames, int height, int width, std::string source_id = "");

    int64_t frame_stride() const { return 3ll * height * width; }
    float at(int t, int c, int y, int x) const {
        return pixels[static_cast<size_t>(((static_cast<int64_t>(t) * 3 + c) * height + y) * width + x)];
    }
    float& at(int t, int c, int y, int x) {
        return pixels[static_cast<size_t>(((static_cast<int64_t>(t) * 3 + c) * height + y) * width + x)];
    }
    void validate() const;
};

// Scaled-then-rounded output dims: scale = min(1, max_edge/long_edge), each
// edge snapped to the nearest multiple of `patch` (half away from zero),
// minimum one patch.
std::pair<int, int> resized_dims(int h, int w, int max_edge, int patch);

// Bilinear resample of one 3xHxW frame into 3 x dst_h x dst_w.
std::vector<float> resize_frame(const float* src, int src_h, int src_w, int dst_h, int dst_w);

VideoClip resize_to_policy(const VideoClip& clip, const ResolutionPolicy& policy, Tier tier);

VideoClip clip_from_elvt(const std::string& path, const std::string& source_id = "");
void clip_to_elvt(const VideoClip& clip, const std::string& path);

// Directory of P6 .ppm frames, lexicographic order, all the same size.
VideoClip clip_from_ppm_dir(const std::string& dir);
void frame_to_ppm(const VideoClip& clip, int t, const std::string& path);

}  // namespace evlm::video
