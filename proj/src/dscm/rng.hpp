#pragma once

#include <cstdint>

namespace dscm {

// Counter-based splittable random stream. A draw is a pure function of
// (seed, stream, counter), so replaying a stream reproduces the exact
// sequence and substreams are independent by construction.
class RngStream {
 public:
  RngStream() : RngStream(0) {}
  explicit RngStream(std::uint64_t seed, std::uint64_t stream = 0)
      : seed_(seed), stream_(stream), counter_(0) {}

  // Derives an independent child stream; does not advance this stream.
  RngStream substream(std::uint64_t id) const;

  std::uint64_t next_u64();

  double uniform();      // [0, 1)
  double uniform_pos();  // (0, 1]
  double normal();       // standard normal, Box-Muller (consumes 2 draws)
  double gumbel();       // standard Gumbel(0, 1)
  double gamma(double shape, double rate);  // Marsaglia-Tsang

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }
  std::uint64_t counter() const { return counter_; }
  void seek(std::uint64_t counter) { counter_ = counter; }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t counter_;
};

}  // namespace dscm
