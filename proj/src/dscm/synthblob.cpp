#include "dscm/synthblob.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace dscm::synthblob {

namespace {

constexpr double kDiscRadius = 3.8;    // annulus center-line radius
constexpr double kSquareHalf = 3.4;    // frame center-line half side
constexpr double kCrossHalfLen = 4.6;  // bar half length
// Width map slope: the [1,6] clip binds only beyond t = 8, far outside the
// mass of 0.5 + Gamma(10,5), so thickness stays recoverable from area.
constexpr double kWidthScale = 2.0 / 3.0;

double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }
double logit(double p) { return std::log(p / (1.0 - p)); }

double quantize8(double v) {
  double b = std::round((v + 1.0) * 0.5 * 255.0);
  b = std::min(255.0, std::max(0.0, b));
  return 2.0 * b / 255.0 - 1.0;
}

// ---- exact analytic coverage -------------------------------------------------

// Area under the circle of radius r over [0, u], u in [0, r].
double circle_slab(double r, double u) {
  u = std::min(u, r);
  double s = std::sqrt(std::max(0.0, r * r - u * u));
  double a = std::asin(std::min(1.0, std::max(-1.0, u / r)));
  return 0.5 * (u * s + r * r * a);
}

// Area of {x^2+y^2 <= r^2} within [0,x] x [0,y] for x, y >= 0.
double circle_corner(double r, double x, double y) {
  if (r <= 0.0 || x <= 0.0 || y <= 0.0) return 0.0;
  const double xc = std::min(x, r);
  if (y >= r) return circle_slab(r, xc);
  const double ustar = std::sqrt(r * r - y * y);
  if (xc <= ustar) return y * xc;
  return y * ustar + circle_slab(r, xc) - circle_slab(r, ustar);
}

double circle_corner_signed(double r, double x, double y) {
  double s = 1.0;
  if (x < 0) {
    s = -s;
    x = -x;
  }
  if (y < 0) {
    s = -s;
    y = -y;
  }
  return s * circle_corner(r, x, y);
}

// Circle (centered at origin) area within an axis-aligned rectangle.
double circle_rect(double r, double x0, double x1, double y0, double y1) {
  return circle_corner_signed(r, x1, y1) - circle_corner_signed(r, x0, y1) -
         circle_corner_signed(r, x1, y0) + circle_corner_signed(r, x0, y0);
}

double overlap1d(double a0, double a1, double b0, double b1) {
  return std::max(0.0, std::min(a1, b1) - std::max(a0, b0));
}

double rect_cover(double rx0, double rx1, double ry0, double ry1, double px, double py) {
  return overlap1d(rx0, rx1, px, px + 1.0) * overlap1d(ry0, ry1, py, py + 1.0);
}

double shape_cover(int shape, double w, double cx, double cy, double px, double py) {
  switch (shape) {
    case 0: {  // disc outline (annulus)
      const double ro = kDiscRadius + 0.5 * w;
      const double ri = kDiscRadius - 0.5 * w;
      double outer = circle_rect(ro, px - cx, px + 1.0 - cx, py - cy, py + 1.0 - cy);
      double inner = ri > 0 ? circle_rect(ri, px - cx, px + 1.0 - cx, py - cy, py + 1.0 - cy) : 0.0;
      return outer - inner;
    }
    case 1: {  // square frame
      const double so = kSquareHalf + 0.5 * w;
      const double si = kSquareHalf - 0.5 * w;
      double outer = rect_cover(cx - so, cx + so, cy - so, cy + so, px, py);
      double inner = si > 0 ? rect_cover(cx - si, cx + si, cy - si, cy + si, px, py) : 0.0;
      return outer - inner;
    }
    case 2: {  // cross: two bars minus the shared center square
      const double hw = 0.5 * w;
      double hbar = rect_cover(cx - kCrossHalfLen, cx + kCrossHalfLen, cy - hw, cy + hw, px, py);
      double vbar = rect_cover(cx - hw, cx + hw, cy - kCrossHalfLen, cy + kCrossHalfLen, px, py);
      double mid = rect_cover(cx - hw, cx + hw, cy - hw, cy + hw, px, py);
      return hbar + vbar - mid;
    }
    default:
      throw ContractError("unknown shape " + std::to_string(shape));
  }
}

}  // namespace

double thickness_from_noise(double u_t) { return 0.5 + u_t; }
double abduct_thickness(double t) { return t - 0.5; }

double intensity_from(double t, double u_i) {
  return kIntensityMax * sigmoid(0.5 * u_i + 2.0 * t - 5.0);
}

double abduct_intensity(double i, double t) {
  if (i <= 0.0 || i >= kIntensityMax) {
    throw DomainError("intensity " + std::to_string(i) + " outside the open support (0, 191)");
  }
  return 2.0 * (logit(i / kIntensityMax) - 2.0 * t + 5.0);
}

double clamp_intensity_noise(double u, double t) {
  const double lo = abduct_intensity(kIntensityLo, t);
  const double hi = abduct_intensity(kIntensityHi, t);
  return std::min(hi, std::max(lo, u));
}

double width_from_thickness(double t) {
  return std::min(6.0, std::max(1.0, kWidthScale * (t + 1.0)));
}

double thickness_from_width(double w) { return w / kWidthScale - 1.0; }

Tensor render_real(int shape, double t, double i, double jitter_x, double jitter_y) {
  if (shape < 0 || shape >= kShapes) throw ContractError("shape out of range");
  const double w = width_from_thickness(t);
  const double cx = kImage / 2.0 + jitter_x;
  const double cy = kImage / 2.0 + jitter_y;
  const double fg = 2.0 * i / kIntensityMax;  // foreground minus background level
  Tensor img = Tensor::full({kImage, kImage}, -1.0);
  double* p = img.mutable_data();
  for (int py = 0; py < kImage; ++py) {
    for (int px = 0; px < kImage; ++px) {
      double cov = shape_cover(shape, w, cx, cy, px, py);
      cov = std::min(1.0, std::max(0.0, cov));
      p[py * kImage + px] = -1.0 + cov * fg;
    }
  }
  return img;
}

Tensor render(int shape, double t, double i, double jitter_x, double jitter_y) {
  Tensor img = render_real(shape, t, i, jitter_x, jitter_y);
  double* p = img.mutable_data();
  for (std::size_t k = 0; k < img.size(); ++k) p[k] = quantize8(p[k]);
  return img;
}

double shape_area_from_width(int shape, double w) {
  switch (shape) {
    case 0:
      return 2.0 * M_PI * kDiscRadius * w;
    case 1:
      return 8.0 * kSquareHalf * w;
    case 2:
      return 4.0 * kCrossHalfLen * w - w * w;
    default:
      throw ContractError("unknown shape");
  }
}

double shape_width_from_area(int shape, double area) {
  switch (shape) {
    case 0:
      return area / (2.0 * M_PI * kDiscRadius);
    case 1:
      return area / (8.0 * kSquareHalf);
    case 2: {
      const double disc = std::max(0.0, 4.0 * kCrossHalfLen * kCrossHalfLen - area);
      return 2.0 * kCrossHalfLen - std::sqrt(disc);
    }
    default:
      throw ContractError("unknown shape");
  }
}

Measurement measure(const Tensor& image) {
  Measurement m;
  if (image.size() != static_cast<std::size_t>(kImage) * kImage) {
    throw ContractError("measure expects a 16x16 image");
  }
  double pmax = -1.0;
  for (std::size_t k = 0; k < image.size(); ++k) pmax = std::max(pmax, image[k]);
  if (pmax <= -1.0 + 1e-9) return m;  // empty foreground

  // Foreground level: 95th percentile of pixels with at least half coverage.
  std::vector<double> fg;
  for (std::size_t k = 0; k < image.size(); ++k) {
    if (image[k] + 1.0 >= 0.5 * (pmax + 1.0)) fg.push_back(image[k]);
  }
  std::sort(fg.begin(), fg.end());
  const std::size_t idx =
      static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(fg.size()))) - 1;
  const double level = fg[std::min(idx, fg.size() - 1)];
  m.i = kIntensityMax * (level + 1.0) * 0.5;

  // Total coverage and its centroid (shapes are symmetric, so the centroid is
  // the jittered center).
  double area = 0.0, mx = 0.0, my = 0.0;
  for (int py = 0; py < kImage; ++py) {
    for (int px = 0; px < kImage; ++px) {
      double cov = (image[py * kImage + px] + 1.0) / (level + 1.0);
      area += cov;
      mx += cov * (px + 0.5);
      my += cov * (py + 0.5);
    }
  }
  if (area <= 1e-9) return m;
  double jx = mx / area - kImage / 2.0;
  double jy = my / area - kImage / 2.0;

  // Joint (width, level) fit against the exact coverage geometry: for a
  // candidate width the best foreground level has a closed form, leaving a
  // smooth one-dimensional least-squares profile in w.
  auto fit_width = [&](int s, double w, double* level_out) {
    Tensor unit = render_real(s, thickness_from_width(w), kIntensityMax, jx, jy);
    double num = 0.0, den = 0.0, ss = 0.0;
    for (std::size_t k = 0; k < unit.size(); ++k) {
      const double cov = (unit[k] + 1.0) * 0.5;
      const double obs = image[k] + 1.0;
      num += cov * obs;
      den += cov * cov;
      ss += obs * obs;
    }
    const double amp = den > 1e-12 ? num / den : 0.0;
    if (level_out) *level_out = amp;
    return ss - amp * num;  // residual sum of squares at the fitted level
  };

  int best_shape = -1;
  double best_rss = 1e300;
  double w0_best = 1.0;
  for (int s = 0; s < kShapes; ++s) {
    double w = shape_width_from_area(s, area);
    w = std::min(6.0, std::max(1.0, w));
    const double rss = fit_width(s, w, nullptr);
    if (rss < best_rss) {
      best_rss = rss;
      best_shape = s;
      w0_best = w;
    }
  }

  // Coarse bracket around the area-curve estimate, then golden-section.
  double w_star = w0_best;
  double f_star = best_rss;
  const double grid_lo = std::max(1.0, w0_best - 0.6);
  const double grid_hi = std::min(6.0, w0_best + 0.6);
  for (double w = grid_lo; w <= grid_hi + 1e-9; w += 0.1) {
    const double f = fit_width(best_shape, w, nullptr);
    if (f < f_star) {
      f_star = f;
      w_star = w;
    }
  }
  double lo_w = std::max(1.0, w_star - 0.1), hi_w = std::min(6.0, w_star + 0.1);
  constexpr double kGold = 0.6180339887498949;
  double wa = hi_w - kGold * (hi_w - lo_w), wb = lo_w + kGold * (hi_w - lo_w);
  double fa = fit_width(best_shape, wa, nullptr), fb = fit_width(best_shape, wb, nullptr);
  for (int it = 0; it < 20; ++it) {
    if (fa < fb) {
      hi_w = wb;
      wb = wa;
      fb = fa;
      wa = hi_w - kGold * (hi_w - lo_w);
      fa = fit_width(best_shape, wa, nullptr);
    } else {
      lo_w = wa;
      wa = wb;
      fa = fb;
      wb = lo_w + kGold * (hi_w - lo_w);
      fb = fit_width(best_shape, wb, nullptr);
    }
  }
  w_star = 0.5 * (lo_w + hi_w);
  double amp = 0.0;
  fit_width(best_shape, w_star, &amp);

  // Dim or thin strokes leave few quantization levels, and rounding biases a
  // continuous least-squares fit. The image is exactly the quantized render,
  // so refine (w, level) by matching through the quantizer, where the true
  // parameters give a residual of exactly zero.
  if (amp < 0.35 || w_star < 2.2) {
    auto quantized_rss = [&](double w, double a, double cx, double cy) {
      Tensor unit = render_real(best_shape, thickness_from_width(w), kIntensityMax, cx, cy);
      double rss = 0.0;
      for (std::size_t k = 0; k < unit.size(); ++k) {
        const double cov = (unit[k] + 1.0) * 0.5;
        const double model = quantize8(-1.0 + cov * a) + 1.0;
        const double d = model - (image[k] + 1.0);
        rss += d * d;
      }
      return rss;
    };

    for (int round = 0; round < 2; ++round) {
      // The quantized match is only exact at the right jitter.
      double best_j = 1e300, bjx = jx, bjy = jy;
      const double jr = round == 0 ? 0.12 : 0.03;
      const double js = round == 0 ? 0.015 : 0.005;
      for (double dx = -jr; dx <= jr + 1e-9; dx += js) {
        for (double dy = -jr; dy <= jr + 1e-9; dy += js) {
          const double rss = quantized_rss(w_star, amp, jx + dx, jy + dy);
          if (rss < best_j) {
            best_j = rss;
            bjx = jx + dx;
            bjy = jy + dy;
          }
        }
      }
      jx = bjx;
      jy = bjy;

      double best_q = 1e300;
      double acc_w = 0.0, acc_a = 0.0, acc_n = 0.0;
      const double wr = round == 0 ? 0.2 : 0.06;
      for (double w = std::max(1.0, w_star - wr); w <= std::min(6.0, w_star + wr); w += 0.004) {
        Tensor unit = render_real(best_shape, thickness_from_width(w), kIntensityMax, jx, jy);
        for (double a = std::max(0.0, amp - 0.012); a <= amp + 0.012; a += 0.001) {
          double rss = 0.0;
          for (std::size_t k = 0; k < unit.size(); ++k) {
            const double cov = (unit[k] + 1.0) * 0.5;
            const double model = quantize8(-1.0 + cov * a) + 1.0;
            const double d = model - (image[k] + 1.0);
            rss += d * d;
          }
          if (rss < best_q - 1e-12) {
            best_q = rss;
            acc_w = w;
            acc_a = a;
            acc_n = 1.0;
          } else if (rss <= best_q + 1e-12) {
            acc_w += w;
            acc_a += a;
            acc_n += 1.0;
          }
        }
      }
      if (acc_n > 0.0) {
        w_star = acc_w / acc_n;  // midpoint of the tie plateau
        amp = acc_a / acc_n;
      }
    }

    // With under ~12 gray levels the zero-residual plateau spreads across
    // (w, level, jitter) jointly; average w over the whole tie set.
    if (amp < 0.12) {
      double best_q = 1e300;
      double acc_w = 0.0, acc_a = 0.0, acc_n = 0.0;
      for (double w = std::max(1.0, w_star - 0.25); w <= std::min(6.0, w_star + 0.25); w += 0.005) {
        for (double dx = -0.04; dx <= 0.0401; dx += 0.02) {
          for (double dy = -0.04; dy <= 0.0401; dy += 0.02) {
            Tensor unit =
                render_real(best_shape, thickness_from_width(w), kIntensityMax, jx + dx, jy + dy);
            for (double a = std::max(0.0, amp - 0.01); a <= amp + 0.01; a += 0.001) {
              double rss = 0.0;
              for (std::size_t k = 0; k < unit.size(); ++k) {
                const double cov = (unit[k] + 1.0) * 0.5;
                const double model = quantize8(-1.0 + cov * a) + 1.0;
                const double d = model - (image[k] + 1.0);
                rss += d * d;
              }
              if (rss < best_q - 1e-12) {
                best_q = rss;
                acc_w = w;
                acc_a = a;
                acc_n = 1.0;
              } else if (rss <= best_q + 1e-12) {
                acc_w += w;
                acc_a += a;
                acc_n += 1.0;
              }
            }
          }
        }
      }
      if (acc_n > 0.0) {
        w_star = acc_w / acc_n;
        amp = acc_a / acc_n;
      }
    }
  }

  m.y = best_shape;
  m.t = thickness_from_width(w_star);
  m.i = kIntensityMax * amp * 0.5;
  m.ok = true;
  return m;
}

Record make_record(RngStream& rng) {
  Record r;
  r.u_t = rng.gamma(10.0, 5.0);
  r.t = thickness_from_noise(r.u_t);
  // Keep intensity inside [5, 186] so logit abduction stays well-conditioned.
  // The clip acts in noise space, which keeps i = f(t, u_i) bit-exact for the
  // stored noise.
  r.u_i = clamp_intensity_noise(rng.normal(), r.t);
  r.i = intensity_from(r.t, r.u_i);
  r.y = static_cast<int>(rng.below(kShapes));
  r.jitter_x = -1.0 + 2.0 * rng.uniform();
  r.jitter_y = -1.0 + 2.0 * rng.uniform();
  r.image = render(r.y, r.t, r.i, r.jitter_x, r.jitter_y);
  return r;
}

Dataset generate(std::uint64_t seed, const std::string& split, int n) {
  if (n < 1) throw ContractError("dataset size must be >= 1");
  std::uint64_t split_id = 0;
  for (unsigned char c : split) split_id = split_id * 131 + c;
  Dataset ds;
  ds.seed = seed;
  ds.split = split;
  RngStream base = RngStream(seed, split_id);
  ds.records.reserve(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) {
    RngStream rec = base.substream(static_cast<std::uint64_t>(k));
    ds.records.push_back(make_record(rec));
  }
  return ds;
}

// ---- container I/O -----------------------------------------------------------

static_assert(std::endian::native == std::endian::little);

void save_dataset(const std::string& path, const Dataset& ds) {
  nlohmann::json header;
  header["format_version"] = 1;
  header["renderer_version"] = kRendererVersion;
  header["seed"] = ds.seed;
  header["split"] = ds.split;
  header["count"] = ds.records.size();
  header["image_size"] = kImage;
  header["columns"] = {"images_u8", "t", "i", "y_u8", "u_t", "u_i", "jitter_x", "jitter_y"};
  const std::string hs = header.dump();

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f.write("DSCB", 4);
  const std::uint32_t hl = static_cast<std::uint32_t>(hs.size());
  f.write(reinterpret_cast<const char*>(&hl), 4);
  f.write(hs.data(), static_cast<std::streamsize>(hs.size()));

  const std::size_t n = ds.records.size();
  std::vector<std::uint8_t> pixels;
  pixels.reserve(n * kImage * kImage);
  for (const Record& r : ds.records) {
    for (std::size_t k = 0; k < r.image.size(); ++k) {
      pixels.push_back(static_cast<std::uint8_t>(std::lround((r.image[k] + 1.0) * 0.5 * 255.0)));
    }
  }
  f.write(reinterpret_cast<const char*>(pixels.data()),
          static_cast<std::streamsize>(pixels.size()));
  auto write_col = [&](auto get) {
    std::vector<double> col(n);
    for (std::size_t k = 0; k < n; ++k) col[k] = get(ds.records[k]);
    f.write(reinterpret_cast<const char*>(col.data()),
            static_cast<std::streamsize>(n * sizeof(double)));
  };
  write_col([](const Record& r) { return r.t; });
  write_col([](const Record& r) { return r.i; });
  std::vector<std::uint8_t> ys(n);
  for (std::size_t k = 0; k < n; ++k) ys[k] = static_cast<std::uint8_t>(ds.records[k].y);
  f.write(reinterpret_cast<const char*>(ys.data()), static_cast<std::streamsize>(n));
  write_col([](const Record& r) { return r.u_t; });
  write_col([](const Record& r) { return r.u_i; });
  write_col([](const Record& r) { return r.jitter_x; });
  write_col([](const Record& r) { return r.jitter_y; });
  if (!f) throw std::runtime_error("write failure on " + path);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open dataset " + path);
  char magic[4];
  if (!f.read(magic, 4) || std::memcmp(magic, "DSCB", 4) != 0) {
    throw std::runtime_error(path + ": not a dataset container");
  }
  std::uint32_t hl = 0;
  if (!f.read(reinterpret_cast<char*>(&hl), 4)) throw std::runtime_error(path + ": truncated");
  std::string hs(hl, '\0');
  if (!f.read(hs.data(), hl)) throw std::runtime_error(path + ": truncated header");
  nlohmann::json header = nlohmann::json::parse(hs);
  if (header.value("renderer_version", -1) != kRendererVersion) {
    throw std::runtime_error(path + ": renderer version mismatch");
  }
  const std::size_t n = header.at("count").get<std::size_t>();

  Dataset ds;
  ds.seed = header.value("seed", std::uint64_t{0});
  ds.split = header.value("split", "");
  ds.records.resize(n);

  std::vector<std::uint8_t> pixels(n * kImage * kImage);
  if (!f.read(reinterpret_cast<char*>(pixels.data()),
              static_cast<std::streamsize>(pixels.size()))) {
    throw std::runtime_error(path + ": truncated image block");
  }
  for (std::size_t k = 0; k < n; ++k) {
    Tensor img = Tensor::zeros({kImage, kImage});
    for (int j = 0; j < kImage * kImage; ++j) {
      img.mutable_data()[j] = 2.0 * pixels[k * kImage * kImage + j] / 255.0 - 1.0;
    }
    ds.records[k].image = std::move(img);
  }
  auto read_col = [&](auto set) {
    std::vector<double> col(n);
    if (!f.read(reinterpret_cast<char*>(col.data()),
                static_cast<std::streamsize>(n * sizeof(double)))) {
      throw std::runtime_error(path + ": truncated column");
    }
    for (std::size_t k = 0; k < n; ++k) set(ds.records[k], col[k]);
  };
  read_col([](Record& r, double v) { r.t = v; });
  read_col([](Record& r, double v) { r.i = v; });
  std::vector<std::uint8_t> ys(n);
  if (!f.read(reinterpret_cast<char*>(ys.data()), static_cast<std::streamsize>(n))) {
    throw std::runtime_error(path + ": truncated category column");
  }
  for (std::size_t k = 0; k < n; ++k) ds.records[k].y = ys[k];
  read_col([](Record& r, double v) { r.u_t = v; });
  read_col([](Record& r, double v) { r.u_i = v; });
  read_col([](Record& r, double v) { r.jitter_x = v; });
  read_col([](Record& r, double v) { r.jitter_y = v; });
  return ds;
}

TrueCounterfactual true_counterfactual(const Record& record, std::optional<double> do_t,
                                       std::optional<double> do_i, std::optional<int> do_y) {
  const double u_i = abduct_intensity(record.i, record.t);
  TrueCounterfactual out;
  out.t = do_t.value_or(record.t);
  out.y = do_y.value_or(record.y);
  if (do_i) {
    if (*do_i <= 0.0 || *do_i >= kIntensityMax) {
      throw DomainError("do(i) outside the open support (0, 191)");
    }
    out.i = *do_i;
  } else {
    // Difference-compensated forward: exactly record.i when t is untouched.
    out.i = record.i + (intensity_from(out.t, u_i) - intensity_from(record.t, u_i));
  }
  out.image = render(out.y, out.t, out.i, record.jitter_x, record.jitter_y);
  return out;
}

double sample_thickness_marginal(RngStream& rng) {
  return thickness_from_noise(rng.gamma(10.0, 5.0));
}

double sample_intensity_marginal(RngStream& rng) {
  // Ancestral draw through the ground-truth graph, with the same support clip
  // used at generation.
  const double t = sample_thickness_marginal(rng);
  return intensity_from(t, clamp_intensity_noise(rng.normal(), t));
}

int sample_shape_marginal(RngStream& rng) { return static_cast<int>(rng.below(kShapes)); }

// ---- engine mechanisms --------------------------------------------------------

namespace {

class GtThicknessMechanism final : public Mechanism {
 public:
  Value sample(const std::vector<Value>&, RngStream& rng, NoiseRecord* noise_out) const override {
    const double u = rng.gamma(10.0, 5.0);
    if (noise_out) (*noise_out)["u"] = Tensor::scalar(u);
    return Value::scalar(thickness_from_noise(u));
  }
  NoiseRecord abduct(const Value& value, const std::vector<Value>&, RngStream&) const override {
    return {{"u", Tensor::scalar(abduct_thickness(value.as_scalar()))}};
  }
  Value forward(const std::vector<Value>&, const NoiseRecord& noise) const override {
    return Value::scalar(thickness_from_noise(noise.at("u").item()));
  }
  bool stochastic_abduction() const override { return false; }
  bool exact_reconstruction() const override { return true; }
};

class GtIntensityMechanism final : public Mechanism {
 public:
  Value sample(const std::vector<Value>& parents, RngStream& rng,
               NoiseRecord* noise_out) const override {
    const double t = parents.at(0).as_scalar();
    const double u = clamp_intensity_noise(rng.normal(), t);
    if (noise_out) (*noise_out)["u"] = Tensor::scalar(u);
    return Value::scalar(intensity_from(t, u));
  }
  NoiseRecord abduct(const Value& value, const std::vector<Value>& parents,
                     RngStream&) const override {
    return {{"u", Tensor::scalar(abduct_intensity(value.as_scalar(), parents.at(0).as_scalar()))}};
  }
  Value forward(const std::vector<Value>& parents, const NoiseRecord& noise) const override {
    return Value::scalar(intensity_from(parents.at(0).as_scalar(), noise.at("u").item()));
  }
  bool stochastic_abduction() const override { return false; }
  bool exact_reconstruction() const override { return true; }
};

}  // namespace

std::shared_ptr<Mechanism> thickness_mechanism() {
  return std::make_shared<GtThicknessMechanism>();
}

std::shared_ptr<Mechanism> intensity_mechanism() {
  return std::make_shared<GtIntensityMechanism>();
}

}  // namespace dscm::synthblob
