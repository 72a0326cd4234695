#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace bixnas {

using i64 = std::int64_t;
using u64 = std::uint64_t;
using u32 = std::uint32_t;

// Error taxonomy, mapped onto process exit codes by the CLI layer:
// ConfigError/UsageError -> 2, NumericError/DataError -> 3, IoError -> 4.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// FNV-1a. Used for tensor digests, artifact digests and seed derivation;
// not cryptographic, just stable and cheap.
inline u64 fnv1a64(const void* bytes, std::size_t n, u64 seed = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  u64 h = seed;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline u64 fnv1a64(const std::string& s, u64 seed = 0xcbf29ce484222325ull) {
  return fnv1a64(s.data(), s.size(), seed);
}

inline u64 splitmix64(u64 x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Deterministic sub-seed for a named pipeline stage / loop index. Every
// stochastic component seeds itself from (base seed, its own tags) so a
// resumed run replays a stage bit-identically without replaying the
// stages before it.
inline u64 derive_seed(u64 base, std::initializer_list<u64> words) {
  u64 h = splitmix64(base);
  for (u64 w : words) h = splitmix64(h ^ w);
  return h;
}

inline u64 derive_seed(u64 base, const std::string& tag, u64 index = 0) {
  return derive_seed(base, {fnv1a64(tag), index});
}

// Chunked deterministic parallel map over [0, n). Results must be written
// to disjoint, pre-sized storage by the callback. threads <= 1 runs inline.
inline void parallel_for(i64 n, int threads, const std::function<void(i64)>& fn) {
  if (n <= 0) return;
  if (threads <= 1 || n == 1) {
    for (i64 i = 0; i < n; ++i) fn(i);
    return;
  }
  const int workers = static_cast<int>(std::min<i64>(threads, n));
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  std::exception_ptr first_error;
  std::mutex err_mu;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (i64 i = w; i < n; i += workers) fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mu);
        if (!first_error) first_error = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace bixnas
