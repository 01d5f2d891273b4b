#include "evlm/merge.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace evlm::merge {

namespace {

// Spatial identity of a patch token; two tokens are temporal neighbours only
// when all four agree.
struct TubeKey {
    int grid_rows, grid_cols, row, col;
    bool operator<(const TubeKey& o) const {
        return std::tie(grid_rows, grid_cols, row, col) < std::tie(o.grid_rows, o.grid_cols, o.row, o.col);
    }
};

double dot_rows(const Tensor& feats, int64_t a, int64_t b) {
    int64_t d = feats.dim(1);
    double s = 0.0;
    for (int64_t j = 0; j < d; ++j) s += feats.at(a * d + j) * feats.at(b * d + j);
    return s;
}

// Cosine of two feature rows; false when either has (near-)zero norm.
bool cosine(const Tensor& feats, int64_t a, int64_t b, double& out) {
    double na = dot_rows(feats, a, a), nb = dot_rows(feats, b, b);
    if (na <= 1e-60 || nb <= 1e-60) return false;
    out = dot_rows(feats, a, b) / (std::sqrt(na) * std::sqrt(nb));
    return true;
}

void detect_uniform_grid(const embed::FeatureSeq& seq, MergeState& st) {
    st.uniform_grid = seq.frames > 0;
    int gr = -1, gc = -1;
    for (const auto& m : seq.meta) {
        if (gr < 0) {
            gr = m.grid_rows;
            gc = m.grid_cols;
        }
        if (m.grid_rows != gr || m.grid_cols != gc) st.uniform_grid = false;
    }
    if (st.uniform_grid && gr > 0) {
        st.grid_t = seq.frames;
        st.grid_cells = gr * gc;
        st.keep.assign(static_cast<size_t>(st.grid_t) * st.grid_cells, 0);
    } else {
        st.uniform_grid = false;
    }
}

// Collapse the input rows into the given leader-ordered groups and fill the
// shared MergeState bookkeeping.
embed::FeatureSeq apply_groups(const embed::FeatureSeq& seq, const std::vector<std::vector<int64_t>>& groups,
                               MergeState& st) {
    embed::FeatureSeq out;
    out.frames = seq.frames;
    out.source_tokens = seq.source_tokens;
    out.feats = ops::group_mean(seq.feats, groups);
    out.meta.reserve(groups.size());
    st.groups = groups;
    st.anchor_of.assign(static_cast<size_t>(seq.rows()), -1);
    st.in_rows = seq.rows();
    st.out_rows = static_cast<int64_t>(groups.size());
    for (size_t g = 0; g < groups.size(); ++g) {
        const auto& anchor = seq.meta[static_cast<size_t>(groups[g][0])];
        embed::TokenMeta m = anchor;
        m.merge_count = 0;
        for (int64_t r : groups[g]) {
            m.merge_count += seq.meta[static_cast<size_t>(r)].merge_count;
            st.anchor_of[static_cast<size_t>(r)] = static_cast<int64_t>(g);
        }
        out.meta.push_back(m);
        if (anchor.kind == tok::TokKind::patch) {
            ++st.out_patches;
            if (st.uniform_grid)
                st.keep[static_cast<size_t>(anchor.t) * st.grid_cells + anchor.row * anchor.grid_cols +
                        anchor.col] = 1;
        }
    }
    st.achieved_ratio = st.in_patches > 0 ? static_cast<double>(st.out_patches) / st.in_patches : 1.0;
    out.validate();
    return out;
}

}  // namespace

void MergeConfig::validate(int depth) const {
    check(threshold > 0.0 && threshold < 1.0, ErrKind::contract,
          msg("merge: threshold ", threshold, " outside (0,1)"));
    check(target_ratio > 0.0 && target_ratio <= 1.0, ErrKind::contract,
          msg("merge: target ratio ", target_ratio, " outside (0,1]"));
    check(switch_layer <= depth, ErrKind::contract,
          msg("merge: switch layer ", switch_layer, " beyond depth ", depth));
}

nlohmann::json MergeState::to_json() const {
    nlohmann::json j;
    j["layer"] = layer;
    j["in_rows"] = in_rows;
    j["out_rows"] = out_rows;
    j["in_patches"] = in_patches;
    j["out_patches"] = out_patches;
    j["achieved_ratio"] = achieved_ratio;
    j["shortfall"] = shortfall;
    j["zero_norm_breaks"] = zero_norm_breaks;
    std::vector<int64_t> chain_lengths;
    for (const auto& g : groups) chain_lengths.push_back(static_cast<int64_t>(g.size()));
    j["chain_lengths"] = chain_lengths;
    if (uniform_grid) {
        j["grid_t"] = grid_t;
        j["grid_cells"] = grid_cells;
        std::vector<std::vector<int>> m(static_cast<size_t>(grid_t));
        for (int t = 0; t < grid_t; ++t) {
            m[static_cast<size_t>(t)].resize(static_cast<size_t>(grid_cells));
            for (int c = 0; c < grid_cells; ++c)
                m[static_cast<size_t>(t)][static_cast<size_t>(c)] =
                    keep[static_cast<size_t>(t) * grid_cells + c];
        }
        j["index_matrix"] = m;
    }
    return j;
}

std::pair<embed::FeatureSeq, MergeState> threshold_merge(const embed::FeatureSeq& seq, double threshold) {
    seq.validate();
    if (!(threshold > 0.0 && threshold < 1.0))
        raise(ErrKind::contract, msg("merge: threshold ", threshold, " outside (0,1)"));
    MergeState st;
    detect_uniform_grid(seq, st);

    // Tube scan: chain[i] = row this input row merges into (its own row when it
    // anchors a chain). Rows of one tube appear in ascending frame order.
    std::vector<int64_t> chain_anchor(static_cast<size_t>(seq.rows()));
    std::map<TubeKey, int64_t> last_in_tube;  // tube -> previous input row
    for (int64_t i = 0; i < seq.rows(); ++i) {
        const auto& m = seq.meta[static_cast<size_t>(i)];
        chain_anchor[static_cast<size_t>(i)] = i;
        if (m.kind != tok::TokKind::patch) continue;
        ++st.in_patches;
        TubeKey key{m.grid_rows, m.grid_cols, m.row, m.col};
        auto it = last_in_tube.find(key);
        if (it != last_in_tube.end()) {
            double sim = 0.0;
            if (!cosine(seq.feats, it->second, i, sim)) {
                ++st.zero_norm_breaks;
            } else if (sim > threshold) {
                chain_anchor[static_cast<size_t>(i)] = chain_anchor[static_cast<size_t>(it->second)];
            }
        }
        last_in_tube[key] = i;
    }

    std::vector<std::vector<int64_t>> groups;
    std::vector<int64_t> group_of(static_cast<size_t>(seq.rows()), -1);
    for (int64_t i = 0; i < seq.rows(); ++i) {
        int64_t a = chain_anchor[static_cast<size_t>(i)];
        if (a == i) {
            group_of[static_cast<size_t>(i)] = static_cast<int64_t>(groups.size());
            groups.push_back({i});
        } else {
            groups[static_cast<size_t>(group_of[static_cast<size_t>(a)])].push_back(i);
        }
    }
    embed::FeatureSeq out = apply_groups(seq, groups, st);
    return {std::move(out), std::move(st)};
}

std::pair<embed::FeatureSeq, MergeState> ratio_merge(const embed::FeatureSeq& seq, double target_ratio) {
    seq.validate();
    if (!(target_ratio > 0.0 && target_ratio <= 1.0))
        raise(ErrKind::contract, msg("merge: target ratio ", target_ratio, " outside (0,1]"));
    MergeState st;
    detect_uniform_grid(seq, st);
    for (const auto& m : seq.meta)
        if (m.kind == tok::TokKind::patch) ++st.in_patches;
    int64_t target = static_cast<int64_t>(std::ceil(target_ratio * static_cast<double>(st.in_patches)));

    // Live view: members[i] = input rows already folded into current row i.
    embed::FeatureSeq cur = seq;
    std::vector<std::vector<int64_t>> members(static_cast<size_t>(seq.rows()));
    for (int64_t i = 0; i < seq.rows(); ++i) members[static_cast<size_t>(i)] = {i};
    int64_t live_patches = st.in_patches;

    struct Cand {
        double sim;
        int t, row, col, grid_rows, grid_cols;  // earlier member, for tie-break
        int64_t a, b;                           // current row indices
    };
    while (live_patches > target) {
        std::vector<Cand> cands;
        std::map<TubeKey, int64_t> last_in_tube;
        for (int64_t i = 0; i < cur.rows(); ++i) {
            const auto& m = cur.meta[static_cast<size_t>(i)];
            if (m.kind != tok::TokKind::patch) continue;
            TubeKey key{m.grid_rows, m.grid_cols, m.row, m.col};
            auto it = last_in_tube.find(key);
            if (it != last_in_tube.end()) {
                double sim = 0.0;
                if (cosine(cur.feats, it->second, i, sim)) {
                    const auto& a = cur.meta[static_cast<size_t>(it->second)];
                    cands.push_back({sim, a.t, a.row, a.col, a.grid_rows, a.grid_cols, it->second, i});
                } else {
                    ++st.zero_norm_breaks;
                }
            }
            last_in_tube[key] = i;
        }
        if (cands.empty()) {
            st.shortfall = true;
            break;
        }
        std::sort(cands.begin(), cands.end(), [](const Cand& x, const Cand& y) {
            if (x.sim != y.sim) return x.sim > y.sim;
            return std::tie(x.t, x.row, x.col, x.grid_rows, x.grid_cols) <
                   std::tie(y.t, y.row, y.col, y.grid_rows, y.grid_cols);
        });
        std::vector<char> used(static_cast<size_t>(cur.rows()), 0);
        std::vector<int64_t> mate(static_cast<size_t>(cur.rows()), -1);
        int64_t planned = 0;
        for (const auto& c : cands) {
            if (live_patches - planned <= target) break;
            if (used[static_cast<size_t>(c.a)] || used[static_cast<size_t>(c.b)]) continue;
            used[static_cast<size_t>(c.a)] = used[static_cast<size_t>(c.b)] = 1;
            mate[static_cast<size_t>(c.a)] = c.b;
            ++planned;
        }
        if (planned == 0) {
            st.shortfall = true;
            break;
        }

        std::vector<std::vector<int64_t>> pass_groups;
        std::vector<std::vector<int64_t>> new_members;
        std::vector<embed::TokenMeta> new_meta;
        std::vector<char> absorbed(static_cast<size_t>(cur.rows()), 0);
        for (int64_t i = 0; i < cur.rows(); ++i)
            if (mate[static_cast<size_t>(i)] >= 0) absorbed[static_cast<size_t>(mate[static_cast<size_t>(i)])] = 1;
        for (int64_t i = 0; i < cur.rows(); ++i) {
            if (absorbed[static_cast<size_t>(i)]) continue;
            int64_t b = mate[static_cast<size_t>(i)];
            if (b >= 0) {
                pass_groups.push_back({i, b});
                std::vector<int64_t> mm = members[static_cast<size_t>(i)];
                mm.insert(mm.end(), members[static_cast<size_t>(b)].begin(), members[static_cast<size_t>(b)].end());
                new_members.push_back(std::move(mm));
                embed::TokenMeta m = cur.meta[static_cast<size_t>(i)];
                m.merge_count += cur.meta[static_cast<size_t>(b)].merge_count;
                new_meta.push_back(m);
            } else {
                pass_groups.push_back({i});
                new_members.push_back(members[static_cast<size_t>(i)]);
                new_meta.push_back(cur.meta[static_cast<size_t>(i)]);
            }
        }
        embed::FeatureSeq next;
        next.frames = cur.frames;
        next.source_tokens = cur.source_tokens;
        next.feats = ops::group_mean(cur.feats, pass_groups);
        next.meta = std::move(new_meta);
        next.validate();
        cur = std::move(next);
        members = std::move(new_members);
        live_patches -= planned;
    }

    // Bookkeeping in terms of original input rows.
    st.in_rows = seq.rows();
    st.out_rows = cur.rows();
    st.anchor_of.assign(static_cast<size_t>(seq.rows()), -1);
    st.groups = members;
    for (size_t g = 0; g < members.size(); ++g)
        for (int64_t r : members[g]) st.anchor_of[static_cast<size_t>(r)] = static_cast<int64_t>(g);
    for (int64_t i = 0; i < cur.rows(); ++i) {
        const auto& m = cur.meta[static_cast<size_t>(i)];
        if (m.kind != tok::TokKind::patch) continue;
        ++st.out_patches;
        if (st.uniform_grid)
            st.keep[static_cast<size_t>(m.t) * st.grid_cells + m.row * m.grid_cols + m.col] = 1;
    }
    st.achieved_ratio = st.in_patches > 0 ? static_cast<double>(st.out_patches) / st.in_patches : 1.0;
    return {std::move(cur), std::move(st)};
}

embed::FeatureSeq pooling_baseline(const embed::FeatureSeq& seq, double ratio) {
    seq.validate();
    check(ratio > 0.0 && ratio <= 1.0, ErrKind::contract, msg("pooling: ratio ", ratio, " outside (0,1]"));
    check(seq.frames >= 1, ErrKind::structure, "pooling: no frames");
    int gr = seq.meta.empty() ? 0 : seq.meta[0].grid_rows;
    int gc = seq.meta.empty() ? 0 : seq.meta[0].grid_cols;
    for (const auto& m : seq.meta) {
        check(m.merge_count == 1, ErrKind::contract, "pooling: grid already merged");
        check(m.grid_rows == gr && m.grid_cols == gc, ErrKind::structure,
              "pooling: grids differ across frames");
    }
    int64_t per_frame = tok::frame_token_count(gr, gc);
    check(seq.rows() == per_frame * seq.frames, ErrKind::structure, "pooling: grid not intact");

    int k = static_cast<int>(std::ceil(1.0 / ratio));
    if (k <= 1) return seq;
    int t_out = (seq.frames + k - 1) / k;

    // Row index of each structural slot, frame-major.
    auto slot = [&](int t, int64_t offset) { return static_cast<int64_t>(t) * per_frame + offset; };
    std::vector<std::vector<int64_t>> groups;
    std::vector<embed::TokenMeta> meta;
    for (int g = 0; g < t_out; ++g) {
        int t0 = g * k;
        int t1 = std::min(seq.frames, t0 + k);
        for (int64_t off = 0; off < per_frame; ++off) {
            std::vector<int64_t> grp;
            for (int t = t0; t < t1; ++t) grp.push_back(slot(t, off));
            embed::TokenMeta m = seq.meta[static_cast<size_t>(slot(t0, off))];
            m.t = g;
            m.merge_count = t1 - t0;
            meta.push_back(m);
            groups.push_back(std::move(grp));
        }
    }
    embed::FeatureSeq out;
    out.frames = t_out;
    out.source_tokens = seq.source_tokens;
    out.feats = ops::group_mean(seq.feats, groups);
    out.meta = std::move(meta);
    out.validate();
    return out;
}

}  // namespace evlm::merge
