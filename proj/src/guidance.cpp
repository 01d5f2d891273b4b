#include "evlm/guidance.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "evlm/elvt.hpp"

namespace evlm::guidance {

namespace {

// Half-open bin k of m over n items: [floor(k*n/m), floor((k+1)*n/m)).
std::pair<int, int> bin(int k, int n, int m) {
    return {static_cast<int>(static_cast<int64_t>(k) * n / m),
            static_cast<int>(static_cast<int64_t>(k + 1) * n / m)};
}

}  // namespace

void TeacherGeometry::validate() const {
    check(rows >= 1 && cols >= 1 && dim >= 1, ErrKind::contract, "teacher geometry: non-positive field");
}

void TeacherFeatures::validate() const {
    geom.validate();
    check(frames >= 1, ErrKind::contract, "teacher: no frames");
    check(feats.defined() && feats.rank() == 2, ErrKind::dimension, "teacher: features must be rank 2");
    check(feats.dim(0) == static_cast<int64_t>(frames) * geom.rows * geom.cols, ErrKind::dimension,
          msg("teacher: ", feats.dim(0), " rows for ", frames, " frames of ", geom.rows, "x", geom.cols));
    check(feats.dim(1) == geom.dim, ErrKind::dimension, "teacher: width disagrees with geometry");
    for (int64_t i = 0; i < feats.numel(); ++i)
        check(std::isfinite(feats.at(i)), ErrKind::numeric, "teacher: non-finite feature");
}

nlohmann::json GuidanceConfig::to_json() const {
    return {{"rows", geometry.rows},
            {"cols", geometry.cols},
            {"dim", geometry.dim},
            {"teacher_seed", teacher_seed},
            {"unit", unit == ContrastUnit::clip ? "clip" : "frame"},
            {"frame_source", frame_source == FrameSource::frame_marker ? "frame_marker" : "pooled_patches"}};
}

GuidanceConfig GuidanceConfig::from_json(const nlohmann::json& j) {
    GuidanceConfig c;
    c.geometry.rows = j.at("rows").get<int>();
    c.geometry.cols = j.at("cols").get<int>();
    c.geometry.dim = j.at("dim").get<int>();
    c.teacher_seed = j.at("teacher_seed").get<uint64_t>();
    std::string unit = j.at("unit").get<std::string>();
    check(unit == "clip" || unit == "frame", ErrKind::contract, msg("guidance: unknown unit '", unit, "'"));
    c.unit = unit == "clip" ? ContrastUnit::clip : ContrastUnit::frame;
    std::string src = j.at("frame_source").get<std::string>();
    check(src == "frame_marker" || src == "pooled_patches", ErrKind::contract,
          msg("guidance: unknown frame source '", src, "'"));
    c.frame_source = src == "frame_marker" ? FrameSource::frame_marker : FrameSource::pooled_patches;
    c.geometry.validate();
    return c;
}

GuidanceHead GuidanceHead::init(int dim, int t_dim, Rng& rng) {
    check(dim >= 1 && t_dim >= 1, ErrKind::contract, "guidance head: non-positive widths");
    GuidanceHead h;
    h.dim = dim;
    h.t_dim = t_dim;
    h.log_temp = Tensor::full({1}, std::log(10.0));
    h.log_temp.set_requires_grad(true);
    if (dim != t_dim) h.chan_proj = Tensor::randn({dim, t_dim}, rng, 1.0 / std::sqrt(static_cast<double>(dim)), true);
    return h;
}

Tensor GuidanceHead::project(const Tensor& x) const {
    check(x.defined() && x.rank() == 2 && x.dim(1) == dim, ErrKind::dimension,
          msg("guidance head: cannot project width ", x.defined() ? x.dim(1) : -1, ", expected ", dim));
    return chan_proj.defined() ? ops::matmul(x, chan_proj) : x;
}

std::vector<std::pair<std::string, Tensor>> GuidanceHead::named_params() const {
    std::vector<std::pair<std::string, Tensor>> out{{"log_temp", log_temp}};
    if (chan_proj.defined()) out.emplace_back("chan_proj", chan_proj);
    return out;
}

void GuidanceHead::save(const std::string& dir) const {
    elvt::save_named(dir, named_params(), {{"dim", dim}, {"t_dim", t_dim}});
}

GuidanceHead GuidanceHead::load(const std::string& dir) {
    auto [tensors, meta] = elvt::load_named(dir);
    GuidanceHead h;
    h.dim = meta.at("dim").get<int>();
    h.t_dim = meta.at("t_dim").get<int>();
    auto lt = tensors.find("log_temp");
    check(lt != tensors.end(), ErrKind::io, "guidance head: checkpoint missing log_temp");
    h.log_temp = lt->second;
    h.log_temp.set_requires_grad(true);
    if (h.dim != h.t_dim) {
        auto cp = tensors.find("chan_proj");
        check(cp != tensors.end(), ErrKind::io, "guidance head: checkpoint missing chan_proj");
        h.chan_proj = cp->second;
        h.chan_proj.set_requires_grad(true);
    }
    return h;
}

TeacherFeatures mock_teacher(const video::VideoClip& clip, const TeacherGeometry& geom, uint64_t seed) {
    clip.validate();
    geom.validate();
    Rng rng(seed);
    std::vector<double> w(static_cast<size_t>(3) * geom.dim);
    std::vector<double> b(static_cast<size_t>(geom.dim));
    for (auto& v : w) v = rng.normal() / std::sqrt(3.0);
    for (auto& v : b) v = rng.normal() * 0.1;

    int cells = geom.rows * geom.cols;
    TeacherFeatures tf;
    tf.geom = geom;
    tf.frames = clip.frames;
    tf.provider = "mock";
    tf.feats = Tensor::zeros({static_cast<int64_t>(clip.frames) * cells, geom.dim});
    for (int t = 0; t < clip.frames; ++t) {
        for (int r = 0; r < geom.rows; ++r) {
            auto [y0, y1] = bin(r, clip.height, geom.rows);
            if (y1 <= y0) y1 = y0 + 1;  // degenerate cell on tiny frames
            for (int c = 0; c < geom.cols; ++c) {
                auto [x0, x1] = bin(c, clip.width, geom.cols);
                if (x1 <= x0) x1 = x0 + 1;
                double stat[3] = {0.0, 0.0, 0.0};
                for (int ch = 0; ch < 3; ++ch) {
                    double s = 0.0;
                    for (int y = y0; y < y1; ++y)
                        for (int x = x0; x < x1; ++x) s += clip.at(t, ch, y, x);
                    stat[ch] = s / (static_cast<double>(y1 - y0) * (x1 - x0));
                }
                int64_t row = static_cast<int64_t>(t) * cells + r * geom.cols + c;
                for (int j = 0; j < geom.dim; ++j) {
                    double v = b[static_cast<size_t>(j)];
                    for (int ch = 0; ch < 3; ++ch) v += w[static_cast<size_t>(ch * geom.dim + j)] * stat[ch];
                    tf.feats.set(row * geom.dim + j, std::tanh(v));
                }
            }
        }
    }
    return tf;
}

void save_teacher(const std::string& dir, const std::string& clip_id, const TeacherFeatures& tf) {
    tf.validate();
    elvt::save(dir + "/teacher_" + clip_id + ".elvt", tf.feats);
    nlohmann::json side = {{"rows", tf.geom.rows}, {"cols", tf.geom.cols},    {"dim", tf.geom.dim},
                           {"frames", tf.frames},  {"provider", tf.provider}};
    std::ofstream os(dir + "/teacher_" + clip_id + ".json");
    check(os.good(), ErrKind::io, msg("teacher: cannot write sidecar for ", clip_id));
    os << side.dump(2) << "\n";
}

TeacherFeatures load_teacher(const std::string& dir, const std::string& clip_id) {
    std::ifstream is(dir + "/teacher_" + clip_id + ".json");
    check(is.good(), ErrKind::io, msg("teacher: missing sidecar for ", clip_id));
    nlohmann::json side = nlohmann::json::parse(is, nullptr, false);
    check(!side.is_discarded(), ErrKind::io, msg("teacher: malformed sidecar for ", clip_id));
    TeacherFeatures tf;
    tf.geom.rows = side.at("rows").get<int>();
    tf.geom.cols = side.at("cols").get<int>();
    tf.geom.dim = side.at("dim").get<int>();
    tf.frames = side.at("frames").get<int>();
    tf.provider = "file";
    tf.feats = elvt::load(dir + "/teacher_" + clip_id + ".elvt");
    tf.validate();
    return tf;
}

AlignedPair align_geometry(const backbone::VisualTail& tail, const TeacherFeatures& teacher) {
    teacher.validate();
    check(static_cast<int>(tail.frame_grids.size()) == teacher.frames, ErrKind::contract,
          msg("align: ", tail.frame_grids.size(), " student frames vs ", teacher.frames, " teacher frames"));
    check(teacher.frames >= 1, ErrKind::contract, "align: empty pair");

    int rows = teacher.geom.rows, cols = teacher.geom.cols;
    for (const auto& [gr, gc] : tail.layouts) {
        rows = std::min(rows, gr);
        cols = std::min(cols, gc);
    }
    check(rows >= 1 && cols >= 1, ErrKind::contract, "align: degenerate common grid");

    // One pooled tensor per side, frame-major over the common grid.
    std::vector<Tensor> student_parts = tail.frame_grids;
    Tensor student_all = ops::concat_rows(student_parts);
    std::vector<std::vector<int64_t>> sgroups, tgroups;
    int64_t offset = 0;
    for (int t = 0; t < teacher.frames; ++t) {
        auto [gr, gc] = tail.layouts[static_cast<size_t>(t)];
        for (int r = 0; r < rows; ++r) {
            auto [r0, r1] = bin(r, gr, rows);
            auto [tr0, tr1] = bin(r, teacher.geom.rows, rows);
            for (int c = 0; c < cols; ++c) {
                auto [c0, c1] = bin(c, gc, cols);
                auto [tc0, tc1] = bin(c, teacher.geom.cols, cols);
                std::vector<int64_t> sg, tg;
                for (int rr = r0; rr < r1; ++rr)
                    for (int cc = c0; cc < c1; ++cc) sg.push_back(offset + static_cast<int64_t>(rr) * gc + cc);
                int64_t toff = static_cast<int64_t>(t) * teacher.geom.rows * teacher.geom.cols;
                for (int rr = tr0; rr < tr1; ++rr)
                    for (int cc = tc0; cc < tc1; ++cc)
                        tg.push_back(toff + static_cast<int64_t>(rr) * teacher.geom.cols + cc);
                sgroups.push_back(std::move(sg));
                tgroups.push_back(std::move(tg));
            }
        }
        offset += static_cast<int64_t>(gr) * gc;
    }

    AlignedPair out;
    out.frames = teacher.frames;
    out.rows = rows;
    out.cols = cols;
    out.student = ops::group_mean(student_all, sgroups);
    out.teacher_feats = ops::group_mean(teacher.feats, tgroups);
    return out;
}

Tensor tube_mse(const AlignedPair& aligned, const GuidanceHead& head) {
    int64_t cells = static_cast<int64_t>(aligned.rows) * aligned.cols;
    check(cells >= 1 && aligned.frames >= 1, ErrKind::contract, "tube mse: empty alignment");
    std::vector<std::vector<int64_t>> tubes(static_cast<size_t>(cells));
    for (int t = 0; t < aligned.frames; ++t)
        for (int64_t c = 0; c < cells; ++c) tubes[static_cast<size_t>(c)].push_back(static_cast<int64_t>(t) * cells + c);
    Tensor student_tubes = ops::group_mean(aligned.student, tubes);
    Tensor teacher_tubes = ops::group_mean(aligned.teacher_feats, tubes);
    Tensor sn = ops::l2_normalize_rows(head.project(student_tubes));
    Tensor tn = ops::l2_normalize_rows(teacher_tubes);
    return ops::mse(sn, tn);
}

Tensor frame_contrastive(const Tensor& student_units, const Tensor& teacher_units, const Tensor& log_temp) {
    check(student_units.defined() && student_units.rank() == 2, ErrKind::dimension,
          "contrastive: student units must be rank 2");
    check(teacher_units.defined() && teacher_units.rank() == 2, ErrKind::dimension,
          "contrastive: teacher units must be rank 2");
    int64_t b = student_units.dim(0);
    check(b >= 1, ErrKind::contract, "contrastive: empty batch");
    check(teacher_units.dim(0) == b, ErrKind::dimension,
          msg("contrastive: ", b, " student units vs ", teacher_units.dim(0), " teacher units"));
    check(student_units.dim(1) == teacher_units.dim(1), ErrKind::dimension,
          "contrastive: unit widths differ");
    Tensor sims = ops::matmul(student_units, ops::transpose(teacher_units));
    Tensor logits = ops::scale_by(sims, ops::exp(log_temp));
    std::vector<int> diag(static_cast<size_t>(b));
    for (int64_t i = 0; i < b; ++i) diag[static_cast<size_t>(i)] = static_cast<int>(i);
    Tensor fwd = ops::softmax_ce(logits, diag);
    Tensor bwd = ops::softmax_ce(ops::transpose(logits), diag);
    return ops::scale(ops::add(fwd, bwd), 0.5);
}

namespace {

// Per-frame student vectors for the contrastive term, [T, D].
Tensor student_frame_vectors(const backbone::VisualTail& tail, FrameSource source) {
    if (source == FrameSource::frame_marker) return tail.frame_marks;
    Tensor all = ops::concat_rows(tail.frame_grids);
    std::vector<std::vector<int64_t>> groups;
    int64_t offset = 0;
    for (const auto& grid : tail.frame_grids) {
        std::vector<int64_t> g(static_cast<size_t>(grid.dim(0)));
        for (int64_t i = 0; i < grid.dim(0); ++i) g[static_cast<size_t>(i)] = offset + i;
        groups.push_back(std::move(g));
        offset += grid.dim(0);
    }
    return ops::group_mean(all, groups);
}

// Per-frame teacher vectors (mean over the frame's native cells), [T, D_t].
Tensor teacher_frame_vectors(const TeacherFeatures& teacher) {
    int64_t cells = static_cast<int64_t>(teacher.geom.rows) * teacher.geom.cols;
    std::vector<std::vector<int64_t>> groups(static_cast<size_t>(teacher.frames));
    for (int t = 0; t < teacher.frames; ++t)
        for (int64_t c = 0; c < cells; ++c)
            groups[static_cast<size_t>(t)].push_back(static_cast<int64_t>(t) * cells + c);
    return ops::group_mean(teacher.feats, groups);
}

Tensor mean_rows(const Tensor& m) {
    std::vector<std::vector<int64_t>> one(1);
    for (int64_t i = 0; i < m.dim(0); ++i) one[0].push_back(i);
    return ops::group_mean(m, one);
}

}  // namespace

LossBreakdown total_loss(const std::vector<GuidanceSample>& samples, const GuidanceHead& head,
                         const GuidanceConfig& gcfg, bool gen_only) {
    check(!samples.empty(), ErrKind::contract, "total loss: empty batch");
    int64_t b = static_cast<int64_t>(samples.size());

    Tensor gen_sum;
    for (const auto& s : samples) {
        check(!s.target_rows.empty(), ErrKind::contract, "total loss: sample has no supervised rows");
        check(s.target_rows.size() == s.target_ids.size(), ErrKind::dimension,
              "total loss: target rows/ids length mismatch");
        Tensor picked = ops::gather_rows(s.trace.text_logits, s.target_rows);
        Tensor ce = ops::softmax_ce(picked, s.target_ids);
        gen_sum = gen_sum.defined() ? ops::add(gen_sum, ce) : ce;
    }
    Tensor gen = b > 1 ? ops::scale(gen_sum, 1.0 / static_cast<double>(b)) : gen_sum;

    LossBreakdown out;
    out.gen = gen;
    if (gen_only) {
        out.mse = Tensor::scalar(0.0);
        out.con = Tensor::scalar(0.0);
        out.total = ops::add(ops::add(out.gen, out.mse), out.con);
    } else {
        Tensor mse_sum;
        std::vector<Tensor> student_units, teacher_units;
        for (const auto& s : samples) {
            backbone::VisualTail tail = backbone::visual_tail(s.trace);
            AlignedPair aligned = align_geometry(tail, s.teacher);
            Tensor m = tube_mse(aligned, head);
            mse_sum = mse_sum.defined() ? ops::add(mse_sum, m) : m;

            Tensor sf = student_frame_vectors(tail, gcfg.frame_source);
            Tensor tf = teacher_frame_vectors(s.teacher);
            if (gcfg.unit == ContrastUnit::clip) {
                student_units.push_back(mean_rows(sf));
                teacher_units.push_back(mean_rows(tf));
            } else {
                check(sf.dim(0) == tf.dim(0), ErrKind::dimension, "total loss: frame count mismatch");
                student_units.push_back(sf);
                teacher_units.push_back(tf);
            }
        }
        out.mse = b > 1 ? ops::scale(mse_sum, 1.0 / static_cast<double>(b)) : mse_sum;
        Tensor su = ops::l2_normalize_rows(head.project(ops::concat_rows(student_units)));
        Tensor tu = ops::l2_normalize_rows(ops::concat_rows(teacher_units));
        out.con = frame_contrastive(su, tu, head.log_temp);
        out.total = ops::add(ops::add(out.gen, out.mse), out.con);
    }
    out.l_gen = out.gen.at(0);
    out.l_mse = out.mse.at(0);
    out.l_con = out.con.at(0);
    out.l_total = out.total.at(0);
    out.temperature = std::exp(head.log_temp.at(0));
    return out;
}

}  // namespace evlm::guidance
