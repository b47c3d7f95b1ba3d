#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace milcl {

using Vec = std::vector<double>;

// Row-major dense matrix of 64-bit floats.
struct Mat {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Mat() = default;
    Mat(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}
    Mat(std::size_t r, std::size_t c, std::vector<double> d);

    double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<const double> row(std::size_t r) const {
        return {data.data() + r * cols, cols};
    }
    std::span<double> row(std::size_t r) {
        return {data.data() + r * cols, cols};
    }

    bool operator==(const Mat&) const = default;
};

// y = M x
Vec matvec(const Mat& m, std::span<const double> x);
// y = M^T x
Vec matvec_t(const Mat& m, std::span<const double> x);

double dot(std::span<const double> a, std::span<const double> b);
double l2_norm_sq(std::span<const double> a);

bool all_finite(std::span<const double> a);

// Softmax with max-shift; output sums to 1. Entries far below the maximum
// can underflow to exactly 0.
Vec stable_softmax(std::span<const double> scores);

// Deterministic seeded random stream: xoshiro256** with splitmix64 seeding.
// Identical seeds produce identical draw sequences on every platform.
class Rng {
public:
    static constexpr const char* kAlgorithmId = "xoshiro256**";

    explicit Rng(std::uint64_t seed);

    std::uint64_t next_u64();
    // Uniform in [0, 1), 53-bit resolution.
    double uniform01();
    // Standard normal via Box-Muller (two uniforms per draw).
    double normal();
    // Uniform index in [0, n); n must be >= 1.
    std::size_t index_below(std::size_t n);

private:
    std::uint64_t state_[4];
};

// Deterministically derive an independent sub-stream seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag);

struct AdamConfig {
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-5;  // decoupled
};

// Adam with decoupled weight decay over a flat parameter vector.
class Adam {
public:
    Adam(std::size_t param_count, AdamConfig cfg);

    void step(std::span<double> params, std::span<const double> grads);

    std::uint64_t step_count() const { return step_count_; }
    const AdamConfig& config() const { return cfg_; }

private:
    AdamConfig cfg_;
    Vec m_;
    Vec v_;
    std::uint64_t step_count_ = 0;
};

}  // namespace milcl
