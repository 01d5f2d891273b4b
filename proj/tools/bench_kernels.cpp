#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <functional>
#include <iomanip>
#include <iostream>
#include <string>
#include <vector>

#include "evlm/kernels.hpp"

// Times the parallel kernels against their serial references and verifies the
// outputs are bitwise identical (reductions run in the same order on both
// paths, so any difference is a bug, not roundoff).

namespace {

using evlm::Rng;
namespace kern = evlm::kern;

double time_ms(const std::function<void()>& fn, int reps) {
    fn();  // warmup
    auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < reps; ++i) fn();
    auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

bool bitwise_equal(const std::vector<float>& a, const std::vector<float>& b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

void fill(std::vector<float>& v, Rng& rng) {
    for (auto& x : v) x = static_cast<float>(rng.normal() * 0.5);
}

struct Row {
    std::string name;
    double serial_ms, parallel_ms;
    bool identical;
};

}  // namespace

int main(int argc, char** argv) {
    int threads = 0;
    if (argc > 1) threads = std::atoi(argv[1]);
    if (threads > 0) evlm::threading::set_threads(threads);
    std::cout << "threads: " << evlm::threading::threads() << "\n";

    Rng rng(42);
    std::vector<Row> rows;

    {
        int64_t m = 512, k = 256, n = 512;
        std::vector<float> a(static_cast<size_t>(m * k)), b(static_cast<size_t>(k * n));
        std::vector<float> cs(static_cast<size_t>(m * n)), cp(cs.size());
        fill(a, rng);
        fill(b, rng);
        double ts = time_ms([&] { kern::serial::matmul(a.data(), b.data(), cs.data(), m, k, n); }, 3);
        double tp = time_ms([&] { kern::matmul(a.data(), b.data(), cp.data(), m, k, n); }, 3);
        rows.push_back({"matmul 512x256x512", ts, tp, bitwise_equal(cs, cp)});
    }
    {
        int64_t m = 512, k = 256, n = 512;
        std::vector<float> a(static_cast<size_t>(m * k)), b(static_cast<size_t>(n * k));
        std::vector<float> cs(static_cast<size_t>(m * n)), cp(cs.size());
        fill(a, rng);
        fill(b, rng);
        double ts = time_ms([&] { kern::serial::matmul_nt(a.data(), b.data(), cs.data(), m, k, n); }, 3);
        double tp = time_ms([&] { kern::matmul_nt(a.data(), b.data(), cp.data(), m, k, n); }, 3);
        rows.push_back({"matmul_nt 512x256x512", ts, tp, bitwise_equal(cs, cp)});
    }
    {
        int64_t m = 512, k = 256, n = 512;
        std::vector<float> a(static_cast<size_t>(m * k)), b(static_cast<size_t>(m * n));
        std::vector<float> cs(static_cast<size_t>(k * n)), cp(cs.size());
        fill(a, rng);
        fill(b, rng);
        double ts = time_ms([&] { kern::serial::matmul_tn(a.data(), b.data(), cs.data(), m, k, n); }, 3);
        double tp = time_ms([&] { kern::matmul_tn(a.data(), b.data(), cp.data(), m, k, n); }, 3);
        rows.push_back({"matmul_tn 512x256x512", ts, tp, bitwise_equal(cs, cp)});
    }
    {
        int64_t nq = 768, d = 128;
        int heads = 4;
        std::vector<float> q(static_cast<size_t>(nq * d)), k(q.size()), v(q.size());
        std::vector<float> os(q.size()), op(q.size());
        fill(q, rng);
        fill(k, rng);
        fill(v, rng);
        std::vector<int64_t> lo(static_cast<size_t>(nq), 0), hi(static_cast<size_t>(nq));
        for (int64_t i = 0; i < nq; ++i) hi[static_cast<size_t>(i)] = i + 1;
        double scale = 1.0 / std::sqrt(static_cast<double>(d / heads));
        double ts = time_ms(
            [&] {
                kern::serial::attn_ranges(q.data(), k.data(), v.data(), os.data(), nq, nq, heads, d,
                                          scale, lo.data(), hi.data(), nullptr, nullptr);
            },
            3);
        double tp = time_ms(
            [&] {
                kern::attn_ranges(q.data(), k.data(), v.data(), op.data(), nq, nq, heads, d, scale,
                                  lo.data(), hi.data(), nullptr, nullptr);
            },
            3);
        rows.push_back({"attn 768 tokens causal", ts, tp, bitwise_equal(os, op)});
    }

    std::cout << std::left << std::setw(26) << "kernel" << std::right << std::setw(12) << "serial ms"
              << std::setw(12) << "omp ms" << std::setw(10) << "speedup" << std::setw(12) << "identical"
              << "\n";
    bool all_ok = true;
    for (const auto& r : rows) {
        std::cout << std::left << std::setw(26) << r.name << std::right << std::fixed
                  << std::setprecision(2) << std::setw(12) << r.serial_ms << std::setw(12)
                  << r.parallel_ms << std::setw(10) << r.serial_ms / r.parallel_ms << std::setw(12)
                  << (r.identical ? "yes" : "NO") << "\n";
        all_ok = all_ok && r.identical;
    }
    return all_ok ? 0 : 1;
}
