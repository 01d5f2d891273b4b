#include "evlm/common.hpp"

#ifdef EVLM_HAVE_OPENMP
#include <omp.h>
#endif

namespace evlm {

const char* err_kind_name(ErrKind k) {
    switch (k) {
        case ErrKind::dimension: return "dimension error";
        case ErrKind::contract: return "contract error";
        case ErrKind::structure: return "structure error";
        case ErrKind::numeric: return "numeric error";
        case ErrKind::index: return "index error";
        case ErrKind::io: return "io error";
        case ErrKind::capacity: return "capacity error";
    }
    return "error";
}

namespace threading {

namespace {
int g_threads = 1;
}

void set_threads(int n) {
    if (n < 1) n = 1;
    g_threads = n;
#ifdef EVLM_HAVE_OPENMP
    omp_set_num_threads(n);
#endif
}

int threads() { return g_threads; }

}  // namespace threading

std::string hex64(uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

}  // namespace evlm
