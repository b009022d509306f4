#ifndef FLASH_COMMON_HPP
#define FLASH_COMMON_HPP

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace flash {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Raised on malformed input data (CSV, config, cohort preconditions).
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Raised when a numerical routine cannot proceed (singular system, divergence).
struct SolverError : std::runtime_error {
    explicit SolverError(const std::string& msg) : std::runtime_error(msg) {}
};

inline double log_sum_exp(const Vec& v) {
    if (v.size() == 0) return -std::numeric_limits<double>::infinity();
    double m = v.maxCoeff();
    if (!std::isfinite(m)) return m;
    double s = 0.0;
    for (Eigen::Index i = 0; i < v.size(); ++i) s += std::exp(v[i] - m);
    return m + std::log(s);
}

// Linear predictors are clamped before exponentiation to avoid overflow in
// early iterations with poorly scaled parameters.
inline double clamped_exp(double x) {
    return std::exp(std::clamp(x, -30.0, 30.0));
}

// splitmix64; used to derive independent per-subject seed streams so that
// results do not depend on the number of worker threads.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Deterministic parallel map: element i is computed independently of the
// worker that runs it, so output is identical for any thread count.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body,
                         unsigned threads = 0) {
    if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
    if (threads <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }
    std::vector<std::thread> workers;
    std::size_t chunk = (n + threads - 1) / threads;
    for (unsigned t = 0; t < threads; ++t) {
        std::size_t lo = t * chunk, hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        workers.emplace_back([&, lo, hi] {
            for (std::size_t i = lo; i < hi; ++i) body(i);
        });
    }
    for (auto& w : workers) w.join();
}

// Jitter scaled by the mean diagonal magnitude, added before factorizing
// matrices that the EM can drive near-singular.
inline Mat jittered(const Mat& A, double rel = 1e-8) {
    double scale = A.rows() > 0 ? A.trace() / static_cast<double>(A.rows()) : 1.0;
    if (scale <= 0.0 || !std::isfinite(scale)) scale = 1.0;
    return A + rel * scale * Mat::Identity(A.rows(), A.cols());
}

}  // namespace flash

#endif  // FLASH_COMMON_HPP
