#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

namespace epo {

inline constexpr const char* kToolVersion = "epo 0.1.0";

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

// ----------------------------------------------------------------------------
// Errors. The CLI maps these onto its exit-code scheme.
// ----------------------------------------------------------------------------

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct InputError : Error {
  using Error::Error;
};
struct ModelError : Error {
  using Error::Error;
};
struct EngineError : Error {
  using Error::Error;
};
struct DegenerateBaselineError : Error {
  using Error::Error;
};

// ----------------------------------------------------------------------------
// Counter-based RNG.
//
// Every random decision is drawn from a generator keyed by (seed, stream tag,
// indices...), so the random stream consumed at one site cannot be perturbed
// by evaluation order or worker count elsewhere. All draws use fixed integer
// arithmetic; no std::*_distribution (their outputs are implementation
// defined).
// ----------------------------------------------------------------------------

namespace rng_tag {
inline constexpr uint64_t init = 1;
inline constexpr uint64_t child = 2;
inline constexpr uint64_t restart = 3;
inline constexpr uint64_t sample = 4;
inline constexpr uint64_t weights = 5;
inline constexpr uint64_t train = 6;
inline constexpr uint64_t direction = 7;
}  // namespace rng_tag

class CounterRng {
 public:
  explicit CounterRng(std::initializer_list<uint64_t> key) : state_(0x9e3779b97f4a7c15ULL) {
    for (uint64_t k : key) state_ = mix(state_ ^ k);
  }

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    return mix(state_);
  }

  // Uniform in [0, 1).
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n). Lemire multiply-shift; bias is < 2^-64 per draw
  // and identical on every platform.
  uint64_t next_below(uint64_t n) {
    return static_cast<uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Box-Muller; consumes two uniforms per pair, caches the spare.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 == 0.0) u1 = next_double();
    double u2 = next_double();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

 private:
  static uint64_t mix(uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// ----------------------------------------------------------------------------
// Order-independent parallel map: fn(i) writes only to slot i of its output,
// so results are identical for any worker count.
// ----------------------------------------------------------------------------

template <typename Fn>
void parallel_for(std::size_t count, int workers, Fn&& fn) {
  if (workers <= 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (;;) {
      std::size_t i = next.fetch_add(1);
      if (i >= count) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> threads;
  int spawn = std::min<std::size_t>(static_cast<std::size_t>(workers), count);
  threads.reserve(static_cast<std::size_t>(spawn));
  for (int t = 0; t < spawn; ++t) threads.emplace_back(worker);
  for (auto& t : threads) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace epo
