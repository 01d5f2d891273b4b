#include "evlm/kernels.hpp"

#include <atomic>

namespace evlm::kern {

namespace {
std::atomic<unsigned long long> g_macs{0};
}

void reset_macs() { g_macs.store(0, std::memory_order_relaxed); }

unsigned long long macs() { return g_macs.load(std::memory_order_relaxed); }

void count_macs(unsigned long long n) { g_macs.fetch_add(n, std::memory_order_relaxed); }

}  // namespace evlm::kern
