#pragma once

// Deterministic randomness. Everything stochastic in the project flows
// through this header so runs are reproducible bit-for-bit across builds:
// the generator is std::mt19937_64 driven by explicit integer draws, and
// the float-producing transforms (uniform, Box-Muller, truncated normal,
// Fisher-Yates) are written out here instead of using std::*_distribution,
// whose output is implementation-defined.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "xattn/errors.hpp"
#include "xattn/tensor.hpp"

namespace xattn {

using Rng = std::mt19937_64;

// Derives an independent stream from a base seed and a salt (epoch number,
// layer index, ...). splitmix64 finalizer; good avalanche, cheap.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Uniform in [0,1) with 53 random bits.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Uniform integer in [0, n). Modulo draw: biased by < n/2^64, which is
// irrelevant for the n we use (dataset sizes, vocab slots) and keeps the
// draw count per call fixed at one, which shuffling determinism relies on.
inline std::uint64_t uniform_below(Rng& rng, std::uint64_t n) {
  if (n == 0) throw DomainError("uniform_below: n must be positive");
  return rng() % n;
}

// Standard normal via Box-Muller. Uses both outputs, no state carried.
inline void normal_pair(Rng& rng, double& z0, double& z1) {
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double t = 2.0 * M_PI * u2;
  z0 = r * std::cos(t);
  z1 = r * std::sin(t);
}

// Normal(0, std) truncated to [-2*std, 2*std] by rejection, the usual
// initializer for transformer weight matrices.
inline double truncated_normal(Rng& rng, double stddev) {
  for (;;) {
    double z0, z1;
    normal_pair(rng, z0, z1);
    if (std::abs(z0) <= 2.0) return z0 * stddev;
    if (std::abs(z1) <= 2.0) return z1 * stddev;
  }
}

template <class Scalar>
void fill_truncated_normal(Tensor<Scalar>& t, Rng& rng, double stddev) {
  for (Index i = 0; i < t.numel(); ++i)
    t[i] = static_cast<Scalar>(truncated_normal(rng, stddev));
}

// In-place Fisher-Yates.
template <class T>
void shuffle(std::vector<T>& v, Rng& rng) {
  const std::uint64_t n = v.size();
  if (n < 2) return;
  for (std::uint64_t i = 0; i + 1 < n; ++i) {
    const std::uint64_t j = i + uniform_below(rng, n - i);
    std::swap(v[i], v[j]);
  }
}

inline std::vector<Index> shuffled_indices(Index n, Rng& rng) {
  std::vector<Index> idx(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  shuffle(idx, rng);
  return idx;
}

}  // namespace xattn
