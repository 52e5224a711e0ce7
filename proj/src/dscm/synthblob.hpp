#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dscm/rng.hpp"
#include "dscm/scm.hpp"
#include "dscm/tensor.hpp"

namespace dscm::synthblob {

// Fully synthetic stand-in dataset with a closed-form ground-truth SCM:
//   t := 0.5 + u_t,                 u_t ~ Gamma(10, 5)
//   i := 191 * sigmoid(0.5 u_i + 2 t - 5),  u_i ~ N(0, 1)   (i clipped to [5,186] by rejection)
//   y ~ uniform{disc, square, cross}
//   x := render(y, t, i, u_pos),    u_pos ~ Uniform([-1,1]^2) pixel jitter
// The renderer is a pure deterministic function with exact analytic per-pixel
// coverage, so attribute measurement has a calibrated noise floor.

constexpr int kImage = 16;
constexpr int kShapes = 3;  // 0 disc, 1 square, 2 cross
constexpr int kRendererVersion = 1;
constexpr double kIntensityMax = 191.0;
constexpr double kIntensityLo = 5.0;
constexpr double kIntensityHi = 186.0;

// Attribute mechanisms and their closed-form abductions.
double thickness_from_noise(double u_t);             // 0.5 + u_t
double abduct_thickness(double t);                   // t - 0.5
double intensity_from(double t, double u_i);         // 191 sigma(0.5 u_i + 2t - 5)
double abduct_intensity(double i, double t);         // 2 (logit(i/191) - 2t + 5)
// Noise-space form of the [5, 186] generation clip.
double clamp_intensity_noise(double u, double t);

// Stroke width in pixels: (6/7) (t + 1), clipped to [1, 6].
double width_from_thickness(double t);
double thickness_from_width(double w);

// Deterministic renderer; returns a 16x16 image on the 8-bit grid in [-1,1].
Tensor render(int shape, double t, double i, double jitter_x, double jitter_y);
// Pre-quantization coverage render (used by measurement templates).
Tensor render_real(int shape, double t, double i, double jitter_x, double jitter_y);

double shape_area_from_width(int shape, double w);
double shape_width_from_area(int shape, double area);

struct Measurement {
  double t = 0.0;
  double i = 0.0;
  int y = -1;
  bool ok = false;
};
// Invert the renderer: intensity from the 95th-percentile foreground level,
// thickness from total coverage via the analytic area-vs-width curve, shape
// by nearest template match. Returns ok=false on empty foreground.
Measurement measure(const Tensor& image);

struct Record {
  double t = 0, i = 0;
  int y = 0;
  double u_t = 0, u_i = 0;
  double jitter_x = 0, jitter_y = 0;
  Tensor image;
};

Record make_record(RngStream& rng);

struct Dataset {
  std::uint64_t seed = 0;
  std::string split;
  std::vector<Record> records;
};

Dataset generate(std::uint64_t seed, const std::string& split, int n);

// Container file: JSON header + little-endian arrays (.dsc).
void save_dataset(const std::string& path, const Dataset& ds);
Dataset load_dataset(const std::string& path);

struct TrueCounterfactual {
  double t = 0, i = 0;
  int y = 0;
  Tensor image;
};
// Exact abduction-action-prediction on the known SCM; downstream attributes
// recomputed with abducted noise, image re-rendered deterministically.
TrueCounterfactual true_counterfactual(const Record& record, std::optional<double> do_t,
                                       std::optional<double> do_i, std::optional<int> do_y);

// Draws from the ground-truth marginals (used as intervention distributions).
double sample_thickness_marginal(RngStream& rng);
double sample_intensity_marginal(RngStream& rng);
int sample_shape_marginal(RngStream& rng);

// Engine mechanisms backed by the closed-form ground truth (attributes only).
std::shared_ptr<Mechanism> thickness_mechanism();
std::shared_ptr<Mechanism> intensity_mechanism();

}  // namespace dscm::synthblob
