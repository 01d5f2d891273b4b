#include <doctest.h>

#include <cmath>
#include <vector>

#include "evlm/merge.hpp"

using namespace evlm;

namespace {

// Raster-order sequence: per frame a FRAME row, then for each grid row its
// patch rows followed by a LINE row. cell_feats[t * cells + r * gc + c] gives
// each patch feature; marker rows are zero.
embed::FeatureSeq make_seq(int frames, int gr, int gc,
                           const std::vector<std::vector<double>>& cell_feats) {
    PrecGuard g(Prec::f64);
    int64_t d = static_cast<int64_t>(cell_feats.at(0).size());
    int cells = gr * gc;
    int64_t per_frame = tok::frame_token_count(gr, gc);
    int64_t n = per_frame * frames;

    embed::FeatureSeq seq;
    seq.frames = frames;
    seq.source_tokens = n;
    std::vector<double> flat(static_cast<size_t>(n * d), 0.0);
    int64_t row_idx = 0;
    auto push = [&](tok::TokKind kind, int t, int r, int c) {
        embed::TokenMeta m;
        m.kind = kind;
        m.t = t;
        m.row = r;
        m.col = c;
        m.pos = row_idx;
        m.grid_rows = gr;
        m.grid_cols = gc;
        seq.meta.push_back(m);
        ++row_idx;
    };
    for (int t = 0; t < frames; ++t) {
        push(tok::TokKind::frame_mark, t, -1, -1);
        for (int r = 0; r < gr; ++r) {
            for (int c = 0; c < gc; ++c) {
                const auto& f = cell_feats.at(static_cast<size_t>(t * cells + r * gc + c));
                for (int64_t j = 0; j < d; ++j)
                    flat[static_cast<size_t>(row_idx * d + j)] = f[static_cast<size_t>(j)];
                push(tok::TokKind::patch, t, r, c);
            }
            push(tok::TokKind::line_mark, t, r, -1);
        }
    }
    seq.feats = Tensor::from({n, d}, flat);
    seq.validate();
    return seq;
}

int64_t count_total(const embed::FeatureSeq& seq) {
    int64_t s = 0;
    for (const auto& m : seq.meta) s += m.merge_count;
    return s;
}

}  // namespace

TEST_SUITE("merge") {

TEST_CASE("threshold merging chains similar temporal neighbours and averages them") {
    // Three frames, one cell: the first two patches identical, the third
    // orthogonal. Only the first pair should chain.
    auto seq = make_seq(3, 1, 1, {{1.0, 0.0}, {1.0, 0.0}, {0.0, 1.0}});
    auto [out, st] = merge::threshold_merge(seq, 0.5);

    CHECK(st.in_rows == 9);
    CHECK(st.out_rows == 8);  // six markers survive untouched, 3 patches -> 2
    CHECK(st.in_patches == 3);
    CHECK(st.out_patches == 2);
    CHECK(st.achieved_ratio == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
    CHECK_FALSE(st.shortfall);
    CHECK(count_total(out) == 9);

    // Patch rows of the input sit at flat rows 1, 4, 7; 4 folds into 1.
    CHECK(st.anchor_of[4] == st.anchor_of[1]);
    CHECK(st.anchor_of[7] != st.anchor_of[1]);

    auto patches = out.rows_of_kind(tok::TokKind::patch);
    REQUIRE(patches.size() == 2);
    const auto& survivor = out.meta[static_cast<size_t>(patches[0])];
    CHECK(survivor.t == 0);
    CHECK(survivor.pos == 1);
    CHECK(survivor.merge_count == 2);
    CHECK(out.feats.at2(patches[0], 0) == 1.0);  // mean of two identical rows
    CHECK(out.feats.at2(patches[1], 1) == 1.0);

    // Uniform-grid bookkeeping: anchors at frames 0 and 2 only.
    REQUIRE(st.uniform_grid);
    CHECK(st.grid_t == 3);
    CHECK(st.grid_cells == 1);
    CHECK(st.keep == std::vector<char>{1, 0, 1});
}

TEST_CASE("threshold strictness: near-duplicates split once the bar is raised") {
    auto seq = make_seq(2, 1, 1, {{1.0, 0.0}, {0.8, 0.2}});
    double sim = 0.8 / std::sqrt(0.64 + 0.04);  // ~0.9701

    auto [loose, st_loose] = merge::threshold_merge(seq, sim - 0.01);
    CHECK(st_loose.out_patches == 1);

    auto [strict, st_strict] = merge::threshold_merge(seq, sim + 0.01);
    CHECK(st_strict.out_patches == 2);
}

TEST_CASE("lowering the threshold never yields more survivors") {
    // Mixed-similarity tube plus a second cell of random-ish vectors.
    std::vector<std::vector<double>> feats;
    Rng rng(41);
    for (int t = 0; t < 6; ++t)
        for (int cell = 0; cell < 2; ++cell)
            feats.push_back({rng.normal(), rng.normal(), rng.normal()});
    auto seq = make_seq(6, 1, 2, feats);

    int64_t prev = -1;
    for (double tau : {0.95, 0.7, 0.5, 0.3, 0.1, 0.01}) {
        auto [out, st] = merge::threshold_merge(seq, tau);
        if (prev >= 0) CHECK(st.out_patches <= prev);
        prev = st.out_patches;
        CHECK(count_total(out) == seq.rows());
    }
}

TEST_CASE("identical frames collapse to one survivor per cell") {
    std::vector<std::vector<double>> feats;
    for (int t = 0; t < 5; ++t) {
        feats.push_back({1.0, 2.0, 3.0});
        feats.push_back({-1.0, 0.5, 0.0});
    }
    auto seq = make_seq(5, 2, 1, feats);
    auto [out, st] = merge::threshold_merge(seq, 0.99);

    CHECK(st.in_patches == 10);
    CHECK(st.out_patches == 2);  // one per cell
    auto patches = out.rows_of_kind(tok::TokKind::patch);
    for (int64_t r : patches) {
        CHECK(out.meta[static_cast<size_t>(r)].merge_count == 5);
        CHECK(out.meta[static_cast<size_t>(r)].t == 0);
    }
    // Averaging five identical rows reproduces the row.
    CHECK(out.feats.at2(patches[0], 2) == 3.0);
}

TEST_CASE("ratio merging stops exactly at the ceiling of the target") {
    std::vector<std::vector<double>> feats(4, {2.0, 2.0});
    auto seq = make_seq(4, 1, 1, feats);
    auto [out, st] = merge::ratio_merge(seq, 0.5);

    CHECK(st.in_patches == 4);
    CHECK(st.out_patches == 2);  // ceil(0.5 * 4)
    CHECK_FALSE(st.shortfall);
    CHECK(st.achieved_ratio == 0.5);
    auto patches = out.rows_of_kind(tok::TokKind::patch);
    REQUIRE(patches.size() == 2);
    CHECK(out.meta[static_cast<size_t>(patches[0])].merge_count == 2);
    CHECK(out.meta[static_cast<size_t>(patches[1])].merge_count == 2);
    CHECK(count_total(out) == seq.rows());

    // An unreachable fractional target still rounds up.
    auto [out2, st2] = merge::ratio_merge(seq, 0.6);
    CHECK(st2.out_patches == 3);  // ceil(2.4)
}

TEST_CASE("ratio merging folds pairs iteratively, highest similarity first") {
    // (1,0), (1,0), (0,1): the identical pair merges in pass one; pass two
    // averages that survivor with the orthogonal vector. The result is the
    // mean-of-means, not the flat mean over originals.
    auto seq = make_seq(3, 1, 1, {{1.0, 0.0}, {1.0, 0.0}, {0.0, 1.0}});
    auto [out, st] = merge::ratio_merge(seq, 0.3);  // target ceil(0.9) = 1

    CHECK(st.out_patches == 1);
    auto patches = out.rows_of_kind(tok::TokKind::patch);
    REQUIRE(patches.size() == 1);
    CHECK(out.feats.at2(patches[0], 0) == 0.5);
    CHECK(out.feats.at2(patches[0], 1) == 0.5);
    CHECK(out.meta[static_cast<size_t>(patches[0])].merge_count == 3);
    CHECK(out.meta[static_cast<size_t>(patches[0])].t == 0);

    // Bookkeeping groups name all three original patch rows together.
    bool found = false;
    for (const auto& g : st.groups)
        if (g.size() == 3) found = true;
    CHECK(found);
}

TEST_CASE("ratio merging flags a shortfall when no tube pair exists") {
    // Two frames on different grids: no spatial position repeats, so nothing
    // can merge no matter the target.
    PrecGuard g(Prec::f64);
    embed::FeatureSeq seq;
    seq.frames = 2;
    auto push = [&](tok::TokKind kind, int t, int r, int c, int gr, int gc) {
        embed::TokenMeta m;
        m.kind = kind;
        m.t = t;
        m.row = r;
        m.col = c;
        m.pos = static_cast<int64_t>(seq.meta.size());
        m.grid_rows = gr;
        m.grid_cols = gc;
        seq.meta.push_back(m);
    };
    push(tok::TokKind::frame_mark, 0, -1, -1, 1, 1);
    push(tok::TokKind::patch, 0, 0, 0, 1, 1);
    push(tok::TokKind::line_mark, 0, 0, -1, 1, 1);
    push(tok::TokKind::frame_mark, 1, -1, -1, 1, 2);
    push(tok::TokKind::patch, 1, 0, 0, 1, 2);
    push(tok::TokKind::patch, 1, 0, 1, 1, 2);
    push(tok::TokKind::line_mark, 1, 0, -1, 1, 2);
    seq.source_tokens = seq.rows();
    seq.feats = Tensor::from({seq.rows(), 2}, {0, 0, 1, 0, 0, 0, 0, 0, 1, 0, 0, 1, 0, 0});
    seq.validate();

    auto [out, st] = merge::ratio_merge(seq, 0.4);
    CHECK(st.shortfall);
    CHECK(st.out_patches == 3);
    CHECK(st.achieved_ratio == 1.0);
    CHECK_FALSE(st.uniform_grid);
}

TEST_CASE("zero-norm rows break chains instead of faking similarity") {
    auto seq = make_seq(3, 1, 1, {{1.0, 0.0}, {0.0, 0.0}, {0.0, 0.0}});
    auto [out, st] = merge::threshold_merge(seq, 0.1);
    CHECK(st.zero_norm_breaks == 2);
    CHECK(st.out_patches == 3);  // nothing merged across the dead rows
}

TEST_CASE("pooling baseline averages fixed frame windows slot by slot") {
    std::vector<std::vector<double>> feats;
    for (int t = 0; t < 4; ++t) {
        feats.push_back({static_cast<double>(t), 1.0});
        feats.push_back({10.0 + t, -1.0});
    }
    auto seq = make_seq(4, 1, 2, feats);
    embed::FeatureSeq out = merge::pooling_baseline(seq, 0.5);  // windows of 2

    CHECK(out.frames == 2);
    CHECK(out.rows() == 2 * tok::frame_token_count(1, 2));
    CHECK(count_total(out) == seq.rows());
    for (const auto& m : out.meta) CHECK(m.merge_count == 2);

    auto patches = out.rows_of_kind(tok::TokKind::patch);
    REQUIRE(patches.size() == 4);
    // First output frame, first cell: mean of t=0 and t=1 -> 0.5.
    CHECK(out.feats.at2(patches[0], 0) == 0.5);
    CHECK(out.feats.at2(patches[1], 0) == 10.5);
    // Second output frame: frames 2 and 3 -> 2.5.
    CHECK(out.feats.at2(patches[2], 0) == 2.5);
    CHECK(out.meta[static_cast<size_t>(patches[2])].t == 1);  // frames renumbered

    // Ratio 1 leaves the sequence alone.
    embed::FeatureSeq same = merge::pooling_baseline(seq, 1.0);
    CHECK(same.rows() == seq.rows());

    // A previously merged grid is rejected.
    auto [merged, st] = merge::threshold_merge(seq, 0.01);
    if (st.out_patches < st.in_patches) CHECK_THROWS_AS(merge::pooling_baseline(merged, 0.5), Error);
}

TEST_CASE("merge configs validate their ranges") {
    merge::MergeConfig cfg;
    cfg.threshold = 1.0;
    CHECK_THROWS_AS(cfg.validate(8), Error);
    cfg.threshold = 0.6;
    cfg.target_ratio = 0.0;
    CHECK_THROWS_AS(cfg.validate(8), Error);
    cfg.target_ratio = 0.5;
    cfg.switch_layer = 9;
    CHECK_THROWS_AS(cfg.validate(8), Error);
    cfg.switch_layer = 4;
    CHECK_NOTHROW(cfg.validate(8));

    auto seq = make_seq(2, 1, 1, {{1.0, 0.0}, {1.0, 0.0}});
    CHECK_THROWS_AS(merge::threshold_merge(seq, 0.0), Error);
    CHECK_THROWS_AS(merge::ratio_merge(seq, 1.5), Error);
}

}  // TEST_SUITE
