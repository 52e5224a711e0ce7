#include "dscm/rng.hpp"

#include <cmath>

namespace dscm {
namespace {

constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

std::uint64_t splitmix64(std::uint64_t x) {
  x += kGolden;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

RngStream RngStream::substream(std::uint64_t id) const {
  return RngStream(seed_, splitmix64(stream_ ^ splitmix64(id ^ 0xa5a5a5a5deadbeefULL)));
}

std::uint64_t RngStream::next_u64() {
  std::uint64_t h = splitmix64(seed_);
  h = splitmix64(h ^ stream_);
  h = splitmix64(h ^ counter_++);
  return h;
}

double RngStream::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::uniform_pos() {
  return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
}

double RngStream::normal() {
  double u1 = uniform_pos();
  double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

double RngStream::gumbel() {
  return -std::log(-std::log(uniform_pos()));
}

double RngStream::gamma(double shape, double rate) {
  // Marsaglia & Tsang; for shape < 1 boost by u^(1/shape).
  double boost = 1.0;
  if (shape < 1.0) {
    boost = std::pow(uniform_pos(), 1.0 / shape);
    shape += 1.0;
  }
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x = normal();
    double v = 1.0 + c * x;
    if (v <= 0.0) continue;
    v = v * v * v;
    double u = uniform_pos();
    if (std::log(u) < 0.5 * x * x + d - d * v + d * std::log(v)) {
      return boost * d * v / rate;
    }
  }
}

std::uint64_t RngStream::below(std::uint64_t n) {
  // Rejection-free modulo is fine here: n is tiny relative to 2^64.
  return next_u64() % n;
}

}  // namespace dscm
