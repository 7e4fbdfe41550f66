#pragma once

#include <cstdint>
#include <functional>
#include <iostream>
#include <mutex>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace swedge {

// Raised for malformed inputs: bad configs, invalid designs, dimension mismatch.
struct ValidationError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Raised when a fit cannot produce a result (sampler init failure, singular design).
struct FitError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Family { gaussian, bernoulli, poisson };
enum class Link { identity, logit, log };

inline Link canonical_link(Family f) {
  switch (f) {
    case Family::gaussian: return Link::identity;
    case Family::bernoulli: return Link::logit;
    case Family::poisson: return Link::log;
  }
  return Link::identity;
}

inline std::string to_string(Family f) {
  switch (f) {
    case Family::gaussian: return "gaussian";
    case Family::bernoulli: return "bernoulli";
    case Family::poisson: return "poisson";
  }
  return "?";
}

inline Family parse_family(std::string_view s) {
  if (s == "gaussian") return Family::gaussian;
  if (s == "bernoulli" || s == "binomial") return Family::bernoulli;
  if (s == "poisson") return Family::poisson;
  throw ValidationError("unknown outcome family: " + std::string(s));
}

inline std::string to_string(Link l) {
  switch (l) {
    case Link::identity: return "identity";
    case Link::logit: return "logit";
    case Link::log: return "log";
  }
  return "?";
}

inline Link parse_link(std::string_view s) {
  if (s == "identity") return Link::identity;
  if (s == "logit") return Link::logit;
  if (s == "log") return Link::log;
  throw ValidationError("unknown link: " + std::string(s));
}

// ---------------------------------------------------------------------------
// Warnings. A process-wide sink so library code can report recoverable
// conditions (collapsed knots, capped ESS) without choosing an output policy.

using WarningSink = std::function<void(std::string_view)>;

namespace detail {
inline WarningSink& warning_sink() {
  static WarningSink sink = [](std::string_view msg) { std::cerr << "swedge: warning: " << msg << '\n'; };
  return sink;
}
inline std::mutex& warning_mutex() {
  static std::mutex m;
  return m;
}
}  // namespace detail

inline void set_warning_sink(WarningSink sink) {
  std::lock_guard lock(detail::warning_mutex());
  detail::warning_sink() = std::move(sink);
}

inline void warn(std::string_view msg) {
  std::lock_guard lock(detail::warning_mutex());
  if (detail::warning_sink()) detail::warning_sink()(msg);
}

// ---------------------------------------------------------------------------
// Seeding. Every random stream is derived from (root seed, tags...) by
// SplitMix64 mixing, so results depend only on the tags and never on which
// thread or in what order the streams are consumed.

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t root) { return splitmix64(root); }

template <class... Tags>
std::uint64_t derive_seed(std::uint64_t root, std::uint64_t tag, Tags... rest) {
  return derive_seed(splitmix64(root ^ splitmix64(tag + 0x632be59bd9b4e019ULL)), static_cast<std::uint64_t>(rest)...);
}

template <class... Tags>
Rng make_stream(std::uint64_t root, Tags... tags) {
  return Rng(derive_seed(root, static_cast<std::uint64_t>(tags)...));
}

}  // namespace swedge
