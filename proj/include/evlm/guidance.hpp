#pragma once

#include <string>
#include <vector>

#include "evlm/backbone.hpp"
#include "evlm/video.hpp"

namespace evlm::guidance {

struct TeacherGeometry {
    int rows = 4;
    int cols = 4;
    int dim = 64;
    void validate() const;
};

struct TeacherFeatures {
    Tensor feats;  // [frames * rows * cols, dim], frame-major
    TeacherGeometry geom;
    int frames = 0;
    std::string provider;  // "mock" | "file"

    void validate() const;
};

enum class ContrastUnit { clip, frame };
enum class FrameSource { frame_marker, pooled_patches };

struct GuidanceConfig {
    TeacherGeometry geometry;
    uint64_t teacher_seed = 7;
    ContrastUnit unit = ContrastUnit::clip;
    FrameSource frame_source = FrameSource::frame_marker;

    nlohmann::json to_json() const;
    static GuidanceConfig from_json(const nlohmann::json& j);
};

// Learnable pieces of the supervisor: log-parameterized contrastive
// temperature plus the student channel projection when widths differ. Both are
// training-only and dropped at inference.
struct GuidanceHead {
    int dim = 0;    // student width
    int t_dim = 0;  // teacher width
    Tensor log_temp;   // [1], temperature = exp(log_temp)
    Tensor chan_proj;  // [dim, t_dim], defined only when dim != t_dim

    static GuidanceHead init(int dim, int t_dim, Rng& rng);
    Tensor project(const Tensor& x) const;
    std::vector<std::pair<std::string, Tensor>> named_params() const;
    void save(const std::string& dir) const;
    static GuidanceHead load(const std::string& dir);
};

// Deterministic pixel-grounded stand-in for a pretrained vision encoder:
// per-cell mean colour pushed through a fixed seeded linear map and tanh.
TeacherFeatures mock_teacher(const video::VideoClip& clip, const TeacherGeometry& geom, uint64_t seed);

void save_teacher(const std::string& dir, const std::string& clip_id, const TeacherFeatures& tf);
TeacherFeatures load_teacher(const std::string& dir, const std::string& clip_id);

// Both sides adaptively mean-pooled (floor-boundary bins, both axes, per
// frame) onto the coarsest grid seen across every frame and the teacher.
struct AlignedPair {
    Tensor student;        // [frames * rows * cols, student dim]
    Tensor teacher_feats;  // [frames * rows * cols, teacher dim]
    int frames = 0;
    int rows = 0, cols = 0;
};

AlignedPair align_geometry(const backbone::VisualTail& tail, const TeacherFeatures& teacher);

// Tube pooling (mean across frames per aligned cell), channel projection,
// per-vector L2 normalization, then elementwise mean squared difference.
Tensor tube_mse(const AlignedPair& aligned, const GuidanceHead& head);

// Symmetric InfoNCE over matched unit vectors (rows must be L2-normalized):
// logits are exp(log_temp) * cosine, and the two directional cross-entropies
// are averaged.
Tensor frame_contrastive(const Tensor& student_units, const Tensor& teacher_units, const Tensor& log_temp);

struct GuidanceSample {
    backbone::ForwardTrace trace;
    TeacherFeatures teacher;
    std::vector<int64_t> target_rows;  // rows of trace.text_logits under supervision
    std::vector<int> target_ids;       // gold next-token ids for those rows
};

struct LossBreakdown {
    Tensor gen, mse, con, total;
    double l_gen = 0.0, l_mse = 0.0, l_con = 0.0, l_total = 0.0;
    double temperature = 0.0;
};

// Batch loss: generative CE averaged over samples, tube MSE averaged over
// samples, one contrastive term over the whole batch's units. With gen_only
// the guidance terms are pinned to constant zero and total == gen.
LossBreakdown total_loss(const std::vector<GuidanceSample>& samples, const GuidanceHead& head,
                         const GuidanceConfig& gcfg, bool gen_only);

}  // namespace evlm::guidance
