// Acceptance gate: nine go/no-go criteria with pinned tolerances and time
// budgets, one verdict line each. Exit status is nonzero when any criterion
// fails, so CI can gate on this binary alone.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "evlm/backbone.hpp"
#include "evlm/guidance.hpp"
#include "evlm/hybridres.hpp"
#include "evlm/merge.hpp"
#include "evlm/ops.hpp"
#include "evlm/patch_embed.hpp"
#include "evlm/profiler.hpp"
#include "evlm/synth.hpp"
#include "evlm/tokenize.hpp"
#include "evlm/trainer.hpp"
#include "evlm/video.hpp"

using namespace evlm;
using Clock = std::chrono::steady_clock;

namespace {

struct CriterionResult {
    std::string name;
    bool pass = true;
    double secs = 0.0;
    std::string detail;
    std::vector<std::string> notes;
};

void fail(CriterionResult& r, const std::string& why) {
    r.pass = false;
    if (r.notes.size() < 12) r.notes.push_back(why);
}

void expect(CriterionResult& r, bool ok, const std::string& why) {
    if (!ok) fail(r, why);
}

// ---------------------------------------------------------------------------
// Shared builders

// Raster-order visual feature sequence: per frame one FRAME row, then each
// grid row's patches closed by a LINE row. Marker rows are zero.
embed::FeatureSeq build_seq(int frames, int gr, int gc, int dim,
                            const std::function<double(int t, int cell, int d)>& fill) {
    embed::FeatureSeq seq;
    seq.frames = frames;
    std::vector<double> vals;
    auto push_meta = [&](tok::TokKind kind, int t, int row, int col) {
        embed::TokenMeta m;
        m.kind = kind;
        m.t = t;
        m.row = row;
        m.col = col;
        m.pos = static_cast<int64_t>(seq.meta.size());
        m.grid_rows = gr;
        m.grid_cols = gc;
        seq.meta.push_back(m);
    };
    for (int t = 0; t < frames; ++t) {
        push_meta(tok::TokKind::frame_mark, t, -1, -1);
        vals.insert(vals.end(), static_cast<size_t>(dim), 0.0);
        for (int r = 0; r < gr; ++r) {
            for (int c = 0; c < gc; ++c) {
                push_meta(tok::TokKind::patch, t, r, c);
                for (int d = 0; d < dim; ++d) vals.push_back(fill(t, r * gc + c, d));
            }
            push_meta(tok::TokKind::line_mark, t, r, -1);
            vals.insert(vals.end(), static_cast<size_t>(dim), 0.0);
        }
    }
    seq.feats = Tensor::from({static_cast<int64_t>(seq.meta.size()), dim}, vals);
    seq.source_tokens = seq.rows();
    seq.validate();
    return seq;
}

int64_t count_kind(const embed::FeatureSeq& s, tok::TokKind k) {
    int64_t n = 0;
    for (const auto& m : s.meta)
        if (m.kind == k) ++n;
    return n;
}

int64_t sum_counts(const embed::FeatureSeq& s) {
    int64_t n = 0;
    for (const auto& m : s.meta) n += m.merge_count;
    return n;
}

std::string read_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) return "<unreadable:" + path + ">";
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

// ---------------------------------------------------------------------------
// C1: mixed-tier token budgets

void c1_token_budgets(CriterionResult& r) {
    const video::ResolutionPolicy pol = video::ResolutionPolicy::table5();
    const struct {
        int high, low;
        int64_t want;
    } rows[] = {{8, 16, 5976},  {8, 32, 7144},   {16, 0, 9616},
                {16, 8, 10200}, {16, 16, 10784}, {32, 0, 19232}};
    for (const auto& row : rows) {
        hybrid::HybridPlan p = hybrid::plan(row.high + row.low, row.high, row.low, pol);
        expect(r, p.predicted_tokens == row.want,
               msg(row.high, "H+", row.low, "L predicted ", p.predicted_tokens, ", want ", row.want));
    }
    r.detail = "six mixed-tier budgets exact";
}

// ---------------------------------------------------------------------------
// C2: merge invariants on random sequences

void c2_merge_invariants(CriterionResult& r) {
    Rng rng(20240817);
    const int kIters = 1000;
    for (int iter = 0; iter < kIters; ++iter) {
        int frames = static_cast<int>(rng.uniform_int(1, 6));
        int gr = static_cast<int>(rng.uniform_int(1, 3));
        int gc = static_cast<int>(rng.uniform_int(1, 3));
        const int dim = 4;
        std::vector<double> cellvals(static_cast<size_t>(frames * gr * gc * dim));
        for (double& v : cellvals) v = rng.normal();
        if (iter % 7 == 3) {
            // Occasionally zero a patch outright to exercise zero-norm handling.
            size_t cell = static_cast<size_t>(rng.uniform_int(0, frames * gr * gc - 1));
            for (int d = 0; d < dim; ++d) cellvals[cell * dim + static_cast<size_t>(d)] = 0.0;
        }
        embed::FeatureSeq seq = build_seq(frames, gr, gc, dim, [&](int t, int cell, int d) {
            return cellvals[static_cast<size_t>(((t * gr * gc) + cell) * dim + d)];
        });
        double tau = 0.05 + 0.9 * rng.uniform();
        double ratio = 0.05 + 0.9 * rng.uniform();

        auto [tout, tst] = merge::threshold_merge(seq, tau);
        tout.validate();
        expect(r, sum_counts(tout) == seq.rows(), msg("iter ", iter, ": threshold counts not conserved"));
        expect(r, tout.rows() == seq.rows() - (tst.in_patches - tst.out_patches),
               msg("iter ", iter, ": threshold row-count law broken"));
        expect(r, count_kind(tout, tok::TokKind::frame_mark) == frames &&
                      count_kind(tout, tok::TokKind::line_mark) == static_cast<int64_t>(frames) * gr,
               msg("iter ", iter, ": threshold merged marker rows"));
        if (iter % 7 == 3 && frames >= 2)
            expect(r, tst.zero_norm_breaks >= 1,
                   msg("iter ", iter, ": zero-norm patch left no warning"));

        int64_t prev_survivors = -1;
        for (double sweep_tau : {0.9, 0.7, 0.5, 0.3, 0.1}) {
            auto [so, ss] = merge::threshold_merge(seq, sweep_tau);
            expect(r, sum_counts(so) == seq.rows(), msg("iter ", iter, ": sweep counts not conserved"));
            if (prev_survivors >= 0)
                expect(r, ss.out_patches <= prev_survivors,
                       msg("iter ", iter, ": survivors grew as the threshold fell"));
            prev_survivors = ss.out_patches;
        }

        auto [rout, rst] = merge::ratio_merge(seq, ratio);
        rout.validate();
        int64_t target =
            static_cast<int64_t>(std::ceil(ratio * static_cast<double>(rst.in_patches)));
        expect(r, sum_counts(rout) == seq.rows(), msg("iter ", iter, ": ratio counts not conserved"));
        if (rst.shortfall)
            expect(r, rst.out_patches > target, msg("iter ", iter, ": shortfall flagged at target"));
        else
            expect(r, rst.out_patches == std::max<int64_t>(target, 0),
                   msg("iter ", iter, ": ratio target missed without shortfall"));

        // A clip of identical frames collapses to one survivor per cell. Each
        // tube needs a safely nonzero norm for the chain similarity to fire;
        // the zero-norm corner is exercised above and must only warn.
        std::vector<double> stillvals(static_cast<size_t>(gr * gc * dim));
        for (double& v : stillvals) v = rng.normal();
        for (int cell = 0; cell < gr * gc; ++cell) {
            double& lead = stillvals[static_cast<size_t>(cell) * dim];
            lead += (lead >= 0.0 ? 2.0 : -2.0);
        }
        embed::FeatureSeq still = build_seq(frames, gr, gc, dim, [&](int, int cell, int d) {
            return stillvals[static_cast<size_t>(cell * dim + d)];
        });
        auto [so, ss] = merge::threshold_merge(still, 0.5);
        expect(r, ss.out_patches == static_cast<int64_t>(gr) * gc,
               msg("iter ", iter, ": identical frames kept ", ss.out_patches, " of ", gr * gc, " cells"));
        for (const auto& m : so.meta)
            if (m.kind == tok::TokKind::patch)
                expect(r, m.merge_count == frames && m.t == 0,
                       msg("iter ", iter, ": identical-frame survivor has count ", m.merge_count));
    }
    r.detail = msg(kIters, " random sequences");
}

// ---------------------------------------------------------------------------
// C3: merge outputs vs an exhaustive brute-force oracle

struct OPatch {
    int t, row, col;
    double v0, v1;
    int64_t cnt;
};

double ocos(double a0, double a1, double b0, double b1) {
    double na = a0 * a0 + a1 * a1, nb = b0 * b0 + b1 * b1;
    return (a0 * b0 + a1 * b1) / (std::sqrt(na) * std::sqrt(nb));
}

// Independent chain simulation: raw cosine against the previous frame's patch
// in the same tube, flat mean per chain, anchors keep their frame index.
std::vector<OPatch> oracle_threshold(int T, int gr, int gc, const int* digit, const double F[3][2],
                                     double tau) {
    int cells = gr * gc;
    std::vector<OPatch> out;
    for (int cell = 0; cell < cells; ++cell) {
        int row = cell / gc, col = cell % gc;
        int anchor_t = 0;
        double s0 = F[digit[cell]][0], s1 = F[digit[cell]][1];
        double p0 = s0, p1 = s1;
        int64_t cnt = 1;
        for (int t = 1; t < T; ++t) {
            int d = digit[t * cells + cell];
            double c0 = F[d][0], c1 = F[d][1];
            if (ocos(p0, p1, c0, c1) > tau) {
                s0 += c0;
                s1 += c1;
                ++cnt;
            } else {
                out.push_back({anchor_t, row, col, s0 / static_cast<double>(cnt),
                               s1 / static_cast<double>(cnt), cnt});
                anchor_t = t;
                s0 = c0;
                s1 = c1;
                cnt = 1;
            }
            p0 = c0;
            p1 = c1;
        }
        out.push_back(
            {anchor_t, row, col, s0 / static_cast<double>(cnt), s1 / static_cast<double>(cnt), cnt});
    }
    // Survivors appear in anchor sequence order: frame-major, raster within.
    std::sort(out.begin(), out.end(), [&](const OPatch& a, const OPatch& b) {
        if (a.t != b.t) return a.t < b.t;
        if (a.row != b.row) return a.row < b.row;
        return a.col < b.col;
    });
    return out;
}

// Independent greedy planner: passes of disjoint best-similarity pairs between
// temporally adjacent live rows of a tube, survivors keep the earlier row and
// take the pairwise mean of the current vectors.
std::vector<OPatch> oracle_ratio(int T, int gr, int gc, const int* digit, const double F[3][2],
                                 double ratio, bool& shortfall) {
    int cells = gr * gc;
    std::vector<OPatch> live;
    for (int t = 0; t < T; ++t)
        for (int cell = 0; cell < cells; ++cell) {
            int d = digit[t * cells + cell];
            live.push_back({t, cell / gc, cell % gc, F[d][0], F[d][1], 1});
        }
    int64_t target = static_cast<int64_t>(std::ceil(ratio * static_cast<double>(live.size())));
    shortfall = false;
    while (static_cast<int64_t>(live.size()) > target) {
        struct Cand {
            double sim;
            int t, row, col;
            size_t a, b;
        };
        std::vector<Cand> cands;
        std::map<std::pair<int, int>, size_t> last;
        for (size_t i = 0; i < live.size(); ++i) {
            std::pair<int, int> key{live[i].row, live[i].col};
            auto it = last.find(key);
            if (it != last.end()) {
                const OPatch& a = live[it->second];
                cands.push_back(
                    {ocos(a.v0, a.v1, live[i].v0, live[i].v1), a.t, a.row, a.col, it->second, i});
            }
            last[key] = i;
        }
        if (cands.empty()) {
            shortfall = true;
            break;
        }
        std::sort(cands.begin(), cands.end(), [](const Cand& x, const Cand& y) {
            if (x.sim != y.sim) return x.sim > y.sim;
            return std::tie(x.t, x.row, x.col) < std::tie(y.t, y.row, y.col);
        });
        std::vector<char> used(live.size(), 0);
        std::vector<int64_t> mate(live.size(), -1);
        int64_t planned = 0;
        for (const auto& c : cands) {
            if (static_cast<int64_t>(live.size()) - planned <= target) break;
            if (used[c.a] || used[c.b]) continue;
            used[c.a] = used[c.b] = 1;
            mate[c.a] = static_cast<int64_t>(c.b);
            ++planned;
        }
        if (planned == 0) {
            shortfall = true;
            break;
        }
        std::vector<char> absorbed(live.size(), 0);
        for (size_t i = 0; i < live.size(); ++i)
            if (mate[i] >= 0) absorbed[static_cast<size_t>(mate[i])] = 1;
        std::vector<OPatch> next;
        for (size_t i = 0; i < live.size(); ++i) {
            if (absorbed[i]) continue;
            OPatch p = live[i];
            if (mate[i] >= 0) {
                const OPatch& b = live[static_cast<size_t>(mate[i])];
                p.v0 = (p.v0 + b.v0) / 2.0;
                p.v1 = (p.v1 + b.v1) / 2.0;
                p.cnt += b.cnt;
            }
            next.push_back(p);
        }
        live = std::move(next);
    }
    return live;
}

std::vector<OPatch> extract_patches(const embed::FeatureSeq& s) {
    std::vector<OPatch> out;
    for (int64_t i = 0; i < s.rows(); ++i) {
        const auto& m = s.meta[static_cast<size_t>(i)];
        if (m.kind != tok::TokKind::patch) continue;
        out.push_back({m.t, m.row, m.col, s.feats.at2(i, 0), s.feats.at2(i, 1), m.merge_count});
    }
    return out;
}

bool same_patches(const std::vector<OPatch>& got, const std::vector<OPatch>& want, double tol) {
    if (got.size() != want.size()) return false;
    for (size_t i = 0; i < got.size(); ++i) {
        const OPatch &g = got[i], &w = want[i];
        if (g.t != w.t || g.row != w.row || g.col != w.col || g.cnt != w.cnt) return false;
        if (std::abs(g.v0 - w.v0) > tol || std::abs(g.v1 - w.v1) > tol) return false;
    }
    return true;
}

void c3_exhaustive_oracle(CriterionResult& r) {
    const double kTau = 0.6, kRatio = 0.5, kTol = 1e-9;
    const double s = 1.0 / std::sqrt(2.0);
    const double F[3][2] = {{1.0, 0.0}, {0.0, 1.0}, {s, s}};
    const int shapes[5][2] = {{1, 1}, {1, 2}, {2, 1}, {1, 3}, {3, 1}};
    int64_t configs = 0;

    for (int T = 1; T <= 4 && r.pass; ++T) {
        for (const auto& shape : shapes) {
            int gr = shape[0], gc = shape[1];
            int cells = gr * gc;
            int slots = T * cells;
            int64_t total = 1;
            for (int i = 0; i < slots; ++i) total *= 3;

            embed::FeatureSeq seq = build_seq(T, gr, gc, 2, [](int, int, int) { return 0.0; });
            std::vector<int64_t> patch_rows;
            for (int64_t i = 0; i < seq.rows(); ++i)
                if (seq.meta[static_cast<size_t>(i)].kind == tok::TokKind::patch) patch_rows.push_back(i);
            double* fp = seq.feats.store().f64();

            std::vector<int> digit(static_cast<size_t>(slots));
            for (int64_t cfg = 0; cfg < total; ++cfg) {
                int64_t x = cfg;
                for (int i = 0; i < slots; ++i) {
                    digit[static_cast<size_t>(i)] = static_cast<int>(x % 3);
                    x /= 3;
                }
                for (int i = 0; i < slots; ++i) {
                    int d = digit[static_cast<size_t>(i)];
                    fp[patch_rows[static_cast<size_t>(i)] * 2] = F[d][0];
                    fp[patch_rows[static_cast<size_t>(i)] * 2 + 1] = F[d][1];
                }

                auto [tout, tst] = merge::threshold_merge(seq, kTau);
                std::vector<OPatch> twant = oracle_threshold(T, gr, gc, digit.data(), F, kTau);
                if (!same_patches(extract_patches(tout), twant, kTol)) {
                    fail(r, msg("threshold mismatch: T=", T, " grid ", gr, "x", gc, " cfg ", cfg));
                    break;
                }

                auto [rout, rst] = merge::ratio_merge(seq, kRatio);
                bool oshort = false;
                std::vector<OPatch> rwant = oracle_ratio(T, gr, gc, digit.data(), F, kRatio, oshort);
                if (!same_patches(extract_patches(rout), rwant, kTol) || rst.shortfall != oshort) {
                    fail(r, msg("ratio mismatch: T=", T, " grid ", gr, "x", gc, " cfg ", cfg));
                    break;
                }
                ++configs;
            }
            if (!r.pass) break;
        }
    }
    r.detail = msg(configs, " configurations, tol 1e-9");
}

// ---------------------------------------------------------------------------
// C4: gradient checks

struct TinyWorld {
    embed::PatchEmbedParams pe;
    backbone::BackboneParams bb;
    guidance::GuidanceHead head;
    guidance::GuidanceConfig gcfg;
    tok::TokenStream stream;
    guidance::TeacherFeatures teacher;
    std::vector<int> text;
    std::vector<int64_t> target_rows;
    std::vector<int> target_ids;
};

TinyWorld make_world(uint64_t seed, bool merge_on) {
    TinyWorld w;
    Rng rng(seed);
    embed::PatchEmbedConfig pcfg{4, 16, 2};
    w.pe = embed::PatchEmbedParams::init(pcfg, rng);
    backbone::BackboneConfig cfg = backbone::BackboneConfig::tiny();
    if (merge_on) {
        cfg.merge.enabled = true;
        cfg.merge.threshold = 0.05;
        cfg.merge.target_ratio = 0.75;
        cfg.merge.switch_layer = 1;
    }
    w.bb = backbone::BackboneParams::init(cfg, rng);
    w.head = guidance::GuidanceHead::init(16, 8, rng);
    w.gcfg.geometry = {2, 2, 8};
    w.gcfg.teacher_seed = seed;

    video::VideoClip clip = video::VideoClip::empty(2, 8, 8, "grad");
    int phase = static_cast<int>(seed % 3);
    for (int t = 0; t < 2; ++t)
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < 8; ++y)
                for (int x = 0; x < 8; ++x)
                    clip.at(t, c, y, x) = static_cast<float>((x + y + t + c + phase) % 3) * 0.31f + 0.05f;
    w.stream = tok::tokenize(clip, video::ResolutionPolicy{4, 8, 8});
    w.teacher = guidance::mock_teacher(clip, w.gcfg.geometry, w.gcfg.teacher_seed);
    w.text = {tok::kBos, 104, 105, 106};
    w.target_rows = {0, 1, 2};
    w.target_ids = {104, 105, 106};
    return w;
}

Tensor world_total(TinyWorld& w, bool gen_only) {
    embed::FeatureSeq seq = embed::marker_cross_attend(embed::embed(w.stream, w.pe), w.pe);
    backbone::ForwardTrace tr = backbone::forward(seq, w.text, w.bb);
    guidance::GuidanceSample s{std::move(tr), w.teacher, w.target_rows, w.target_ids};
    std::vector<guidance::GuidanceSample> batch;
    batch.push_back(std::move(s));
    return guidance::total_loss(batch, w.head, w.gcfg, gen_only).total;
}

void c4_grad_checks(CriterionResult& r) {
    const double kIso = 1e-5, kFull = 1e-4;
    int instances = 0;
    double worst_iso = 0.0, worst_full = 0.0;
    auto run_iso = [&](double got, const std::string& what) {
        worst_iso = std::max(worst_iso, got);
        expect(r, got < kIso, msg(what, " rel err ", got));
        ++instances;
    };

    // Tube alignment loss, probed through the head projection.
    for (uint64_t seed = 101; seed < 105; ++seed) {
        TinyWorld w = make_world(seed, false);
        backbone::ForwardTrace tr = backbone::forward(
            embed::marker_cross_attend(embed::embed(w.stream, w.pe), w.pe), w.text, w.bb);
        backbone::VisualTail tail = backbone::visual_tail(tr);
        guidance::AlignedPair aligned = guidance::align_geometry(tail, w.teacher);
        w.head.chan_proj.set_requires_grad(true);
        auto rep = ops::grad_check(
            [&](const Tensor&) { return guidance::tube_mse(aligned, w.head); }, w.head.chan_proj, 1e-5);
        run_iso(rep.max_rel_err, msg("mse/chan_proj seed ", seed));
    }
    // Tube alignment loss, probed through the student features.
    for (uint64_t seed = 201; seed < 204; ++seed) {
        Rng rng(seed);
        backbone::VisualTail tail;
        for (int t = 0; t < 2; ++t) tail.frame_grids.push_back(Tensor::randn({4, 16}, rng, 1.0, true));
        tail.layouts = {{2, 2}, {2, 2}};
        tail.frame_marks = Tensor::randn({2, 16}, rng, 1.0);
        tail.partition = {{1, 2, 3, 4}, {8, 9, 10, 11}};
        guidance::TeacherFeatures teach;
        teach.geom = {2, 2, 8};
        teach.frames = 2;
        teach.provider = "mock";
        teach.feats = Tensor::randn({8, 8}, rng, 1.0);
        guidance::GuidanceHead head = guidance::GuidanceHead::init(16, 8, rng);
        auto rep = ops::grad_check(
            [&](const Tensor&) {
                return guidance::tube_mse(guidance::align_geometry(tail, teach), head);
            },
            tail.frame_grids[0], 1e-5);
        run_iso(rep.max_rel_err, msg("mse/student seed ", seed));
    }
    // Contrastive loss, probed through the raw student vectors and the
    // temperature.
    for (uint64_t seed = 301; seed < 308; ++seed) {
        Rng rng(seed);
        guidance::GuidanceHead head = guidance::GuidanceHead::init(16, 8, rng);
        Tensor x = Tensor::randn({3, 16}, rng, 1.0, true);
        Tensor tu = ops::l2_normalize_rows(Tensor::randn({3, 8}, rng, 1.0));
        head.log_temp.set_requires_grad(true);
        Tensor probe = (seed % 2 == 0) ? head.log_temp : x;
        auto rep = ops::grad_check(
            [&](const Tensor&) {
                return guidance::frame_contrastive(ops::l2_normalize_rows(head.project(x)), tu,
                                                   head.log_temp);
            },
            probe, 1e-5);
        run_iso(rep.max_rel_err, msg("con seed ", seed));
    }
    // Generative loss through the embedding and the backbone.
    for (uint64_t seed = 401; seed < 407; ++seed) {
        TinyWorld w = make_world(seed, false);
        w.pe.set_requires_grad(true);
        Tensor probe = (seed % 2 == 0) ? w.pe.proj_bias : w.pe.line_embed;
        auto rep =
            ops::grad_check([&](const Tensor&) { return world_total(w, true); }, probe, 1e-5);
        run_iso(rep.max_rel_err, msg("gen seed ", seed));
    }

    // Full pipeline with merging enabled and every loss active.
    for (uint64_t seed = 501; seed < 503; ++seed) {
        TinyWorld w = make_world(seed, true);
        w.pe.set_requires_grad(true);
        w.head.log_temp.set_requires_grad(true);
        w.head.chan_proj.set_requires_grad(true);
        Tensor probe = (seed % 2 == 0) ? w.head.log_temp : w.pe.line_embed;
        auto rep =
            ops::grad_check([&](const Tensor&) { return world_total(w, false); }, probe, 1e-5);
        worst_full = std::max(worst_full, rep.max_rel_err);
        expect(r, rep.max_rel_err < kFull, msg("full seed ", seed, " rel err ", rep.max_rel_err));
        ++instances;
    }
    r.detail = msg(instances, " instances, worst iso ", worst_iso, ", worst full ", worst_full);
}

// ---------------------------------------------------------------------------
// C5: loss identities and stage gating

void c5_loss_identities(CriterionResult& r) {
    Rng rng(55);
    // Scale invariance: a student that is a scalar multiple of the teacher has
    // zero alignment loss.
    {
        guidance::TeacherFeatures teach;
        teach.geom = {2, 2, 8};
        teach.frames = 2;
        teach.provider = "mock";
        teach.feats = Tensor::randn({8, 8}, rng, 1.0);
        backbone::VisualTail tail;
        for (int t = 0; t < 2; ++t) {
            std::vector<double> vals;
            for (int i = 0; i < 4; ++i)
                for (int d = 0; d < 8; ++d) vals.push_back(3.7 * teach.feats.at2(t * 4 + i, d));
            tail.frame_grids.push_back(Tensor::from({4, 8}, vals));
        }
        tail.layouts = {{2, 2}, {2, 2}};
        tail.frame_marks = Tensor::randn({2, 8}, rng, 1.0);
        tail.partition = {{1, 2, 3, 4}, {8, 9, 10, 11}};
        guidance::GuidanceHead head = guidance::GuidanceHead::init(8, 8, rng);
        double l = guidance::tube_mse(guidance::align_geometry(tail, teach), head).at(0);
        expect(r, std::abs(l) <= 1e-12, msg("scaled-identical alignment loss ", l));
    }
    // One sample has nothing to contrast against: exactly zero.
    {
        Tensor u = ops::l2_normalize_rows(Tensor::randn({1, 8}, rng, 1.0));
        Tensor lt = Tensor::from({1}, {std::log(10.0)});
        double l = guidance::frame_contrastive(u, u, lt).at(0);
        expect(r, l == 0.0, msg("single-pair contrastive loss ", l, " != 0"));
    }
    // Two indistinguishable pairs: uniform logits give ln 2 in each direction.
    {
        Tensor row = ops::l2_normalize_rows(Tensor::randn({1, 8}, rng, 1.0));
        std::vector<double> two;
        for (int k = 0; k < 2; ++k)
            for (int d = 0; d < 8; ++d) two.push_back(row.at(d));
        Tensor su = Tensor::from({2, 8}, two);
        Tensor lt = Tensor::from({1}, {std::log(10.0)});
        double l = guidance::frame_contrastive(su, su, lt).at(0);
        expect(r, std::abs(l - std::log(2.0)) <= 1e-9, msg("all-equal contrastive loss ", l));
    }
    // Generative-only gating: guidance terms pinned to zero and no gradient
    // reaches the head.
    {
        TinyWorld w1 = make_world(71, false);
        TinyWorld w2 = make_world(72, false);
        w1.pe.set_requires_grad(true);
        w1.bb.set_requires_grad(true);
        for (auto& [name, t] : w1.head.named_params()) t.set_requires_grad(true);
        Tape tape;
        embed::FeatureSeq s1 = embed::marker_cross_attend(embed::embed(w1.stream, w1.pe), w1.pe);
        embed::FeatureSeq s2 = embed::marker_cross_attend(embed::embed(w2.stream, w1.pe), w1.pe);
        std::vector<guidance::GuidanceSample> batch;
        batch.push_back({backbone::forward(s1, w1.text, w1.bb), w1.teacher, w1.target_rows, w1.target_ids});
        batch.push_back({backbone::forward(s2, w2.text, w1.bb), w2.teacher, w2.target_rows, w2.target_ids});
        guidance::LossBreakdown lb = guidance::total_loss(batch, w1.head, w1.gcfg, true);
        expect(r, lb.l_mse == 0.0 && lb.l_con == 0.0, "gated guidance terms are not exactly zero");
        expect(r, lb.l_total == lb.l_gen, "gated total != generative term");
        tape.backward(lb.total);
        for (auto& [name, t] : w1.head.named_params()) {
            if (!t.has_grad()) continue;
            for (int64_t i = 0; i < t.numel(); ++i)
                expect(r, t.grad_at(i) == 0.0, msg("gated head param ", name, " received gradient"));
        }
        bool backbone_live = false;
        for (auto& [name, t] : w1.pe.named_params()) {
            if (!t.has_grad()) continue;
            for (int64_t i = 0; i < t.numel(); ++i)
                if (t.grad_at(i) != 0.0) backbone_live = true;
        }
        expect(r, backbone_live, "generative gradient vanished everywhere");
    }
    r.detail = "scale, single-pair, uniform-pair, gating";
}

// ---------------------------------------------------------------------------
// C6: analytic cost model vs instrumented counts and scenario reductions

void c6_cost_model(CriterionResult& r) {
    Rng rng(66);
    embed::FeatureSeq seq = build_seq(4, 3, 3, 128, [&](int, int, int) { return rng.normal(); });
    backbone::BackboneConfig cfg = backbone::BackboneConfig::toy();
    Rng prng(67);
    backbone::BackboneParams params = backbone::BackboneParams::init(cfg, prng);
    std::vector<int> text{tok::kBos, 300, 301, 302, 303, 304, 305, tok::kEos};
    profiler::PrefillMeasurement m = profiler::measure_prefill(seq, text, params);
    double rel =
        std::abs(static_cast<double>(m.measured_macs) - m.analytic_macs) / m.analytic_macs;
    expect(r, rel <= 0.02, msg("instrumented vs analytic rel diff ", rel));

    profiler::ScenarioKnobs knobs;
    std::vector<profiler::ScenarioRow> rows = profiler::scenario_table({32}, knobs);
    double enc_free = rows[1].total_macs, with_merge = rows[2].total_macs, with_hr = rows[3].total_macs;
    expect(r, with_merge <= 0.4 * enc_free,
           msg("merge saves only ", 100.0 * (1.0 - with_merge / enc_free), "% at 32 frames"));
    expect(r, with_hr <= 0.6 * with_merge,
           msg("hybrid tiers save only ", 100.0 * (1.0 - with_hr / with_merge), "% over merge"));
    r.detail = msg("rel diff ", rel, "; merge x", with_merge / enc_free, ", +hybrid x",
                   with_hr / with_merge);
}

// ---------------------------------------------------------------------------
// C7: merged prefill is measurably faster at long context

void c7_prefill_latency(CriterionResult& r) {
    Rng rng(77);
    embed::FeatureSeq seq = build_seq(32, 11, 11, 128, [&](int, int, int) { return rng.normal(); });
    expect(r, seq.rows() >= 4096, msg("only ", seq.rows(), " visual rows"));

    backbone::BackboneConfig base_cfg = backbone::BackboneConfig::toy();
    Rng prng(78);
    backbone::BackboneParams params = backbone::BackboneParams::init(base_cfg, prng);
    backbone::BackboneParams merged = params;
    merged.cfg.merge.enabled = true;
    merged.cfg.merge.threshold = 0.999999;  // shallow layers effectively untouched
    merged.cfg.merge.target_ratio = 0.5;    // deep layers halve the patches

    std::vector<int> text{tok::kBos, 300, 301, 302};
    profiler::PrefillMeasurement mb = profiler::measure_prefill(seq, text, params);
    profiler::PrefillMeasurement mm = profiler::measure_prefill(seq, text, merged);

    expect(r, mm.visual_rows_per_layer.back() < mb.visual_rows_per_layer.back(),
           "deep merging did not shrink the sequence");
    expect(r, mm.prefill_ms < mb.prefill_ms,
           msg("merged prefill ", mm.prefill_ms, " ms vs baseline ", mb.prefill_ms, " ms"));
    r.detail = msg(seq.rows(), " visual rows: ", mb.prefill_ms, " ms -> ", mm.prefill_ms, " ms");
}

// ---------------------------------------------------------------------------
// C8: toy training pipeline — loss drop, QA accuracy, determinism

void c8_training_pipeline(CriterionResult& r) {
    namespace fs = std::filesystem;
    std::string base = "/tmp/evlm_acceptance_pipeline";
    fs::remove_all(base);
    fs::create_directories(base + "/a");
    fs::create_directories(base + "/b");

    train::PipelineResult a = train::run_toy_pipeline(base + "/a", 9001);
    train::PipelineResult b = train::run_toy_pipeline(base + "/b", 9001);

    expect(r, !a.logs.empty() && !a.logs[0].steps.empty(), "no first-stage log");
    if (!a.logs.empty() && !a.logs[0].steps.empty()) {
        const auto& steps = a.logs[0].steps;
        double first = steps[0].l_gen, best = first;
        size_t horizon = std::min<size_t>(steps.size(), 200);
        for (size_t i = 0; i < horizon; ++i) best = std::min(best, steps[i].l_gen);
        expect(r, best <= 0.5 * first,
               msg("generative loss ", first, " only reached ", best, " within ", horizon, " steps"));
    }
    expect(r, a.qa_after >= 0.90, msg("QA exact-match ", a.qa_after, " < 0.90"));
    expect(r, a.qa_before < a.qa_after, "training did not improve QA accuracy");
    uint64_t ha = a.state.param_hash(), hb = b.state.param_hash();
    expect(r, ha == hb, msg("seeded reruns diverged: ", ha, " vs ", hb));
    r.detail = msg("QA ", a.qa_before, " -> ", a.qa_after, ", rerun hash match");
}

// ---------------------------------------------------------------------------
// C9: bit-exact reproducibility of every deterministic surface

void c9_reproducibility(CriterionResult& r) {
    namespace fs = std::filesystem;
    std::string base = "/tmp/evlm_acceptance_repro";
    fs::remove_all(base);
    fs::create_directories(base);

    // Tokenizer: identical streams and identical serialized bytes.
    video::VideoClip clip = video::VideoClip::empty(2, 8, 8, "repro");
    for (int t = 0; t < 2; ++t)
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < 8; ++y)
                for (int x = 0; x < 8; ++x)
                    clip.at(t, c, y, x) = static_cast<float>(((t * 1000 + c * 100 + y * 10 + x) % 97)) / 97.0f;
    tok::TokenStream s1 = tok::tokenize(clip, video::ResolutionPolicy{4, 8, 8});
    tok::TokenStream s2 = tok::tokenize(clip, video::ResolutionPolicy{4, 8, 8});
    bool same = s1.records.size() == s2.records.size();
    for (size_t i = 0; same && i < s1.records.size(); ++i) {
        const auto &a = s1.records[i], &b = s2.records[i];
        same = a.kind == b.kind && a.t == b.t && a.row == b.row && a.col == b.col &&
               a.vocab_id == b.vocab_id && a.payload == b.payload;
    }
    expect(r, same, "tokenizer output differs between runs");
    tok::stream_to_jsonl(s1, base + "/s1.jsonl");
    tok::stream_to_jsonl(s2, base + "/s2.jsonl");
    expect(r, read_bytes(base + "/s1.jsonl") == read_bytes(base + "/s2.jsonl"),
           "serialized token streams differ");

    // Planner and cost model: identical rendered output.
    video::ResolutionPolicy pol = video::ResolutionPolicy::table5();
    expect(r, hybrid::plan(24, 8, 16, pol).to_json().dump() == hybrid::plan(24, 8, 16, pol).to_json().dump(),
           "plans differ between runs");
    backbone::BackboneConfig cfg = backbone::BackboneConfig::toy();
    cfg.merge.enabled = true;
    std::vector<int64_t> sched = profiler::simulate_merge_schedule(500, 60, 25, cfg, 0.75, 0.5);
    expect(r, profiler::analytic_flops(sched, cfg, 16).to_csv() ==
                  profiler::analytic_flops(sched, cfg, 16).to_csv(),
           "cost reports differ between runs");

    // Synthetic corpus: byte-identical clips and captions for one seed.
    std::vector<synth::Sample> ca = synth::make_corpus(4, 3, 424242, base + "/corpus_a", 2, 24);
    std::vector<synth::Sample> cb = synth::make_corpus(4, 3, 424242, base + "/corpus_b", 2, 24);
    expect(r, ca.size() == cb.size(), "corpus sizes differ");
    for (size_t i = 0; i < std::min(ca.size(), cb.size()); ++i) {
        expect(r, ca[i].caption == cb[i].caption && ca[i].question == cb[i].question &&
                      ca[i].answer == cb[i].answer,
               msg("corpus text differs at sample ", i));
        expect(r, read_bytes(ca[i].clip_path) == read_bytes(cb[i].clip_path),
               msg("clip bytes differ at sample ", i));
    }

    // Seeded training: same corpus, same seed, same parameter hash.
    std::vector<synth::Sample> corpus = synth::make_corpus(8, 1, 515151, base + "/train", 1, 56);
    train::StageConfig scfg = train::StageConfig::toy(1);
    scfg.batch = 4;
    scfg.steps_override = 5;
    scfg.seed = 99;
    uint64_t hashes[2] = {0, 0};
    for (int run = 0; run < 2; ++run) {
        train::ModelState state = train::toy_model(31);
        train::run_stage(scfg, corpus, state);
        hashes[run] = state.param_hash();
    }
    expect(r, hashes[0] == hashes[1], msg("training hashes differ: ", hashes[0], " vs ", hashes[1]));
    r.detail = "tokens, plans, reports, corpora, training";
}

}  // namespace

int main() {
    struct Entry {
        const char* name;
        double limit_s;  // 0: report only
        void (*fn)(CriterionResult&);
    };
    const Entry entries[] = {
        {"C1 mixed-tier token budgets", 1.0, c1_token_budgets},
        {"C2 merge invariants on random sequences", 30.0, c2_merge_invariants},
        {"C3 merge outputs vs exhaustive oracle", 60.0, c3_exhaustive_oracle},
        {"C4 gradient checks", 120.0, c4_grad_checks},
        {"C5 loss identities and gating", 0.0, c5_loss_identities},
        {"C6 analytic cost model", 0.0, c6_cost_model},
        {"C7 merged prefill latency", 300.0, c7_prefill_latency},
        {"C8 toy training pipeline", 1200.0, c8_training_pipeline},
        {"C9 bit-exact reproducibility", 0.0, c9_reproducibility},
    };

    std::printf("acceptance: %zu criteria\n", std::size(entries));
    std::fflush(stdout);
    int failed = 0;
    for (const Entry& e : entries) {
        CriterionResult res;
        res.name = e.name;
        auto t0 = Clock::now();
        try {
            e.fn(res);
        } catch (const std::exception& ex) {
            fail(res, msg("exception: ", ex.what()));
        }
        res.secs = std::chrono::duration<double>(Clock::now() - t0).count();
        if (e.limit_s > 0.0 && res.secs > e.limit_s)
            fail(res, msg("over time budget: ", res.secs, "s > ", e.limit_s, "s"));
        std::printf("%-42s %s %8.2fs  %s\n", res.name.c_str(), res.pass ? "PASS" : "FAIL", res.secs,
                    res.detail.c_str());
        for (const std::string& n : res.notes) std::printf("    - %s\n", n.c_str());
        std::fflush(stdout);
        if (!res.pass) ++failed;
    }
    std::printf("result: %zu/%zu passed\n", std::size(entries) - static_cast<size_t>(failed),
                std::size(entries));
    return failed == 0 ? 0 : 1;
}
