#include "dscm/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <set>

namespace dscm {

namespace {

thread_local Tape* g_active_tape = nullptr;
std::atomic<std::uint64_t> g_tape_serial_counter{1};

const std::vector<std::string>& op_registry() {
  static const std::vector<std::string> ops = {
      "add", "sub", "mul", "div", "scale", "shift", "matmul",
      "reshape", "concat", "slice",
      "sum", "mean", "sum_last",
      "exp", "log", "sqrt", "sigmoid", "softplus", "tanh", "leaky_relu", "clamp_min",
      "softmax", "log_sum_exp",
      "gaussian_log_density", "gaussian_cdf",
  };
  return ops;
}

Precision combine(Precision a, Precision b) {
  return (a == Precision::f32 && b == Precision::f32) ? Precision::f32 : Precision::f64;
}

Tensor with_precision(Tensor t, Precision p) {
  if (p == Precision::f32) return t.to_precision(p);
  return t;
}

// Trailing-dimension broadcast shape; throws on mismatch.
Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t n = std::max(a.size(), b.size());
  Shape out(n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
    std::size_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ContractError("broadcast mismatch: " + shape_str(a) + " vs " + shape_str(b));
    }
    out[n - 1 - i] = std::max(da, db);
  }
  return out;
}

// Strides of `shape` viewed as `out_shape`, zero on broadcast axes.
std::vector<std::size_t> broadcast_strides(const Shape& shape, const Shape& out_shape) {
  auto strides = row_major_strides(shape);
  std::vector<std::size_t> out(out_shape.size(), 0);
  const std::size_t off = out_shape.size() - shape.size();
  for (std::size_t i = 0; i < shape.size(); ++i) {
    out[off + i] = (shape[i] == 1 && out_shape[off + i] != 1) ? 0 : strides[i];
  }
  return out;
}

template <class F>
Tensor raw_binary(const Tensor& a, const Tensor& b, F f) {
  if (a.shape() == b.shape()) {
    Tensor out = Tensor::zeros(a.shape());
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.mutable_data();
    for (std::size_t i = 0; i < out.size(); ++i) po[i] = f(pa[i], pb[i], i);
    return out;
  }
  const Shape os = broadcast_shape(a.shape(), b.shape());
  Tensor out = Tensor::zeros(os);
  const auto sa = broadcast_strides(a.shape(), os);
  const auto sb = broadcast_strides(b.shape(), os);
  const auto so = row_major_strides(os);
  const std::size_t n = out.size();
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.mutable_data();
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t ia = 0, ib = 0, rem = i;
    for (std::size_t d = 0; d < os.size(); ++d) {
      std::size_t idx = rem / so[d];
      rem %= so[d];
      ia += idx * sa[d];
      ib += idx * sb[d];
    }
    po[i] = f(pa[ia], pb[ib], i);
  }
  return out;
}

// Sums grad over broadcast axes so it matches `target`.
Tensor unbroadcast(const Tensor& grad, const Shape& target) {
  if (grad.shape() == target) return grad;
  Tensor out = Tensor::zeros(target);
  const auto st = broadcast_strides(target, grad.shape());
  const auto sg = row_major_strides(grad.shape());
  const double* pg = grad.data();
  double* po = out.mutable_data();
  for (std::size_t i = 0; i < grad.size(); ++i) {
    std::size_t it = 0, rem = i;
    for (std::size_t d = 0; d < grad.shape().size(); ++d) {
      std::size_t idx = rem / sg[d];
      rem %= sg[d];
      it += idx * st[d];
    }
    po[it] += pg[i];
  }
  return out;
}

template <class F>
Tensor raw_unary(const Tensor& a, F f) {
  Tensor out = Tensor::zeros(a.shape());
  const double* pa = a.data();
  double* po = out.mutable_data();
  for (std::size_t i = 0; i < a.size(); ++i) po[i] = f(pa[i], i);
  return out;
}

double stable_softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x)));
}

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

double norm_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI); }
double norm_cdf(double x) { return 0.5 * std::erfc(-x * M_SQRT1_2); }

struct Recorded {
  Tape* tape = nullptr;
  std::vector<int> parents;
  bool any = false;
};

Recorded probe(std::initializer_list<const Tensor*> inputs) {
  Recorded r;
  r.tape = Tape::active();
  if (!r.tape) return r;
  for (const Tensor* t : inputs) {
    int n = r.tape->node_of(*t);
    r.parents.push_back(n);
    r.any = r.any || n >= 0;
  }
  return r;
}

void attach(Tensor& out, const char* op, const Recorded& r, Tape::BackwardFn fn) {
  if (!r.tape || !r.any) return;
  out.tape_node = r.tape->record(op, r.parents, out.shape(), std::move(fn));
  out.tape_serial = r.tape->serial();
}

}  // namespace

// ---- Tape ------------------------------------------------------------------

Tape::Tape() : serial_(g_tape_serial_counter.fetch_add(1)) {}

Tape* Tape::active() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

void Tape::watch(Tensor& t) {
  if (!t.defined()) throw ContractError("cannot watch an undefined tensor");
  if (node_of(t) >= 0) return;
  t.tape_node = record("leaf", {}, t.shape(), nullptr);
  t.tape_serial = serial_;
}

int Tape::record(const char* op, std::vector<int> parents, Shape out_shape, BackwardFn fn) {
  if (std::string(op) != "leaf") {
    const auto& reg = op_registry();
    if (std::find(reg.begin(), reg.end(), op) == reg.end()) {
      throw ContractError(std::string("op '") + op + "' is not in the primitive registry");
    }
  }
  nodes_.push_back(Node{op, std::move(parents), std::move(out_shape), std::move(fn)});
  return static_cast<int>(nodes_.size()) - 1;
}

void Tape::accumulate(int node, const Tensor& contribution) {
  if (node < 0) return;
  Tensor& slot = grads_[node];
  if (!slot.defined()) {
    slot = Tensor::zeros(nodes_[node].shape);
  }
  if (!slot.same_shape(contribution)) {
    throw ContractError("gradient shape " + shape_str(contribution.shape()) +
                        " does not match node shape " + shape_str(slot.shape()));
  }
  double* ps = slot.mutable_data();
  const double* pc = contribution.data();
  for (std::size_t i = 0; i < slot.size(); ++i) ps[i] += pc[i];
}

void Tape::backward(const Tensor& root) {
  if (root.size() != 1) {
    throw ContractError("backward requires a scalar root, got shape " + shape_str(root.shape()));
  }
  int root_node = node_of(root);
  if (root_node < 0) {
    throw ContractError("backward root is not recorded on this tape");
  }
  grads_.assign(nodes_.size(), Tensor{});
  accumulate(root_node, Tensor::full(root.shape(), 1.0));

  // Adjoint closures must not re-record; suspend the active tape.
  Tape* saved = g_active_tape;
  g_active_tape = nullptr;
  for (int i = root_node; i >= 0; --i) {
    if (!grads_[i].defined() || !nodes_[i].backward) continue;
    nodes_[i].backward(grads_[i], *this);
  }
  g_active_tape = saved;
}

Tensor Tape::grad(const Tensor& t) const {
  int n = node_of(t);
  if (n < 0) throw ContractError("tensor is not tracked on this tape");
  if (static_cast<std::size_t>(n) < grads_.size() && grads_[n].defined()) return grads_[n];
  return Tensor::zeros(nodes_[n].shape);
}

const std::vector<std::string>& registered_ops() { return op_registry(); }

// ---- elementwise binary ----------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  Recorded r = probe({&a, &b});
  Tensor out = raw_binary(a, b, [](double x, double y, std::size_t) { return x + y; });
  out = with_precision(std::move(out), combine(a.precision(), b.precision()));
  Shape as = a.shape(), bs = b.shape();
  attach(out, "add", r, [as, bs, r](const Tensor& g, Tape& t) {
    t.accumulate(r.parents[0], unbroadcast(g, as));
    t.accumulate(r.parents[1], unbroadcast(g, bs));
  });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  Recorded r = probe({&a, &b});
  Tensor out = raw_binary(a, b, [](double x, double y, std::size_t) { return x - y; });
  out = with_precision(std::move(out), combine(a.precision(), b.precision()));
  Shape as = a.shape(), bs = b.shape();
  attach(out, "sub", r, [as, bs, r](const Tensor& g, Tape& t) {
    t.accumulate(r.parents[0], unbroadcast(g, as));
    Tensor gn = raw_unary(g, [](double x, std::size_t) { return -x; });
    t.accumulate(r.parents[1], unbroadcast(gn, bs));
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  Recorded r = probe({&a, &b});
  Tensor out = raw_binary(a, b, [](double x, double y, std::size_t) { return x * y; });
  out = with_precision(std::move(out), combine(a.precision(), b.precision()));
  Tensor av = a, bv = b;
  attach(out, "mul", r, [av, bv, r](const Tensor& g, Tape& t) {
    t.accumulate(r.parents[0],
                 unbroadcast(raw_binary(g, bv, [](double x, double y, std::size_t) { return x * y; }),
                             av.shape()));
    t.accumulate(r.parents[1],
                 unbroadcast(raw_binary(g, av, [](double x, double y, std::size_t) { return x * y; }),
                             bv.shape()));
  });
  return out;
}

Tensor divide(const Tensor& a, const Tensor& b) {
  Recorded r = probe({&a, &b});
  Tensor out = raw_binary(a, b, [](double x, double y, std::size_t i) {
    if (y == 0.0) {
      throw DomainError("division by zero at index " + std::to_string(i));
    }
    return x / y;
  });
  out = with_precision(std::move(out), combine(a.precision(), b.precision()));
  Tensor av = a, bv = b;
  attach(out, "div", r, [av, bv, r](const Tensor& g, Tape& t) {
    t.accumulate(r.parents[0],
                 unbroadcast(raw_binary(g, bv, [](double x, double y, std::size_t) { return x / y; }),
                             av.shape()));
    Tensor q = raw_binary(av, bv, [](double x, double y, std::size_t) { return -x / (y * y); });
    t.accumulate(r.parents[1],
                 unbroadcast(raw_binary(g, q, [](double x, double y, std::size_t) { return x * y; }),
                             bv.shape()));
  });
  return out;
}

Tensor scale(const Tensor& a, double k) {
  Recorded r = probe({&a});
  Tensor out = raw_unary(a, [k](double x, std::size_t) { return k * x; });
  out = with_precision(std::move(out), a.precision());
  attach(out, "scale", r, [k, r](const Tensor& g, Tape& t) {
    t.accumulate(r.parents[0], raw_unary(g, [k](double x, std::size_t) { return k * x; }));
  });
  return out;
}

Tensor shift(const Tensor& a, double k) {
  Recorded r = probe({&a});
  Tensor out = raw_unary(a, [k](double x, std::size_t) { return x + k; });
  out = with_precision(std::move(out), a.precision());
  attach(out, "shift", r, [r](const Tensor& g, Tape& t) { t.accumulate(r.parents[0], g); });
  return out;
}

// ---- matmul ----------------------------------------------------------------

namespace {

Tensor raw_matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0]) {
    throw ContractError("matmul shape mismatch: " + shape_str(a.shape()) + " x " +
                        shape_str(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  Tensor out = Tensor::zeros({m, n});
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.mutable_data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aik = pa[i * k + p];
      if (aik == 0.0) continue;
      const double* brow = pb + p * n;
      double* orow = po + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
    }
  }
  return out;
}

}  // namespace

Tensor transpose2d(const Tensor& a) {
  if (a.ndim() != 2) throw ContractError("transpose2d requires a matrix");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  Tensor out = Tensor::zeros({n, m});
  const double* pa = a.data();
  double* po = out.mutable_data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) po[j * m + i] = pa[i * n + j];
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  Recorded r = probe({&a, &b});
  Tensor out = raw_matmul(a, b);
  out = with_precision(std::move(out), combine(a.precision(), b.precision()));
  Tensor av = a, bv = b;
  attach(out, "matmul", r, [av, bv, r](const Tensor& g, Tape& t) {
    t.accumulate(r.parents[0], raw_matmul(g, transpose2d(bv)));
    t.accumulate(r.parents[1], raw_matmul(transpose2d(av), g));
  });
  return out;
}

// ---- structural ------------------------------------------------------------

Tensor reshape(const Tensor& a, const Shape& shape) {
  if (shape_numel(shape) != a.size()) {
    throw ContractError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape) +
                        " changes element count");
  }
  Recorded r = probe({&a});
  Tensor out = Tensor::from_data(shape, a.values());
  out = with_precision(std::move(out), a.precision());
  Shape as = a.shape();
  attach(out, "reshape", r, [as, r](const Tensor& g, Tape& t) {
    t.accumulate(r.parents[0], Tensor::from_data(as, g.values()));
  });
  return out;
}

namespace {

// outer x axis x inner decomposition for concat/slice block copies.
void axis_extents(const Shape& s, std::size_t axis, std::size_t* outer, std::size_t* inner) {
  *outer = 1;
  *inner = 1;
  for (std::size_t i = 0; i < axis; ++i) *outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) *inner *= s[i];
}

}  // namespace

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw ContractError("concat axis out of range");
  Shape os = first;
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    if (p.ndim() != first.size()) throw ContractError("concat rank mismatch");
    for (std::size_t d = 0; d < first.size(); ++d) {
      if (d != axis && p.shape()[d] != first[d]) {
        throw ContractError("concat shape mismatch on axis " + std::to_string(d));
      }
    }
    total += p.shape()[axis];
  }
  os[axis] = total;

  Tensor out = Tensor::zeros(os);
  std::size_t outer, inner;
  axis_extents(os, axis, &outer, &inner);
  double* po = out.mutable_data();
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    const std::size_t pa = p.shape()[axis];
    const double* pp = p.data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy(pp + o * pa * inner, pp + (o + 1) * pa * inner,
                po + (o * os[axis] + offset) * inner);
    }
    offset += pa;
  }

  Tape* tape = Tape::active();
  if (tape) {
    std::vector<int> parents;
    bool any = false;
    for (const Tensor& p : parts) {
      int n = tape->node_of(p);
      parents.push_back(n);
      any = any || n >= 0;
    }
    if (any) {
      std::vector<Shape> shapes;
      for (const Tensor& p : parts) shapes.push_back(p.shape());
      Shape osc = os;
      out.tape_node = tape->record(
          "concat", parents, os, [shapes, parents, axis, osc](const Tensor& g, Tape& t) {
            std::size_t outer2, inner2;
            axis_extents(osc, axis, &outer2, &inner2);
            std::size_t off = 0;
            const double* pg = g.data();
            for (std::size_t pi = 0; pi < shapes.size(); ++pi) {
              const std::size_t pa = shapes[pi][axis];
              if (parents[pi] >= 0) {
                Tensor gp = Tensor::zeros(shapes[pi]);
                double* pgp = gp.mutable_data();
                for (std::size_t o = 0; o < outer2; ++o) {
                  std::copy(pg + (o * osc[axis] + off) * inner2,
                            pg + (o * osc[axis] + off + pa) * inner2, pgp + o * pa * inner2);
                }
                t.accumulate(parents[pi], gp);
              }
              off += pa;
            }
          });
      out.tape_serial = tape->serial();
    }
  }
  return out;
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t len) {
  if (axis >= a.ndim() || start + len > a.shape()[axis]) {
    throw ContractError("slice out of range: axis " + std::to_string(axis) + " start " +
                        std::to_string(start) + " len " + std::to_string(len) + " of " +
                        shape_str(a.shape()));
  }
  Recorded r = probe({&a});
  Shape os = a.shape();
  os[axis] = len;
  Tensor out = Tensor::zeros(os);
  std::size_t outer, inner;
  axis_extents(a.shape(), axis, &outer, &inner);
  const double* pa = a.data();
  double* po = out.mutable_data();
  const std::size_t full = a.shape()[axis];
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy(pa + (o * full + start) * inner, pa + (o * full + start + len) * inner,
              po + o * len * inner);
  }
  out = with_precision(std::move(out), a.precision());
  Shape as = a.shape();
  attach(out, "slice", r, [as, axis, start, len, r](const Tensor& g, Tape& t) {
    Tensor ga = Tensor::zeros(as);
    std::size_t outer2, inner2;
    axis_extents(as, axis, &outer2, &inner2);
    const std::size_t full2 = as[axis];
    double* pga = ga.mutable_data();
    const double* pg = g.data();
    for (std::size_t o = 0; o < outer2; ++o) {
      std::copy(pg + o * len * inner2, pg + (o + 1) * len * inner2,
                pga + (o * full2 + start) * inner2);
    }
    t.accumulate(r.parents[0], ga);
  });
  return out;
}

// ---- reductions ------------------------------------------------------------

Tensor sum_all(const Tensor& a) {
  Recorded r = probe({&a});
  double acc = 0.0;  // reductions accumulate in double regardless of storage
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i];
  Tensor out = Tensor::scalar(acc);
  out = with_precision(std::move(out), a.precision());
  Shape as = a.shape();
  attach(out, "sum", r, [as, r](const Tensor& g, Tape& t) {
    t.accumulate(r.parents[0], Tensor::full(as, g.item()));
  });
  return out;
}

Tensor mean_all(const Tensor& a) {
  Recorded r = probe({&a});
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i];
  const double n = static_cast<double>(a.size());
  Tensor out = Tensor::scalar(acc / n);
  out = with_precision(std::move(out), a.precision());
  Shape as = a.shape();
  attach(out, "mean", r, [as, n, r](const Tensor& g, Tape& t) {
    t.accumulate(r.parents[0], Tensor::full(as, g.item() / n));
  });
  return out;
}

namespace {

Shape drop_last(const Shape& s) {
  if (s.size() <= 1) return Shape{1};
  return Shape(s.begin(), s.end() - 1);
}

}  // namespace

Tensor sum_last(const Tensor& a) {
  if (a.ndim() == 0) throw ContractError("sum_last of empty-rank tensor");
  Recorded r = probe({&a});
  const std::size_t f = a.shape().back();
  const std::size_t rows = a.size() / f;
  Tensor out = Tensor::zeros(drop_last(a.shape()));
  const double* pa = a.data();
  double* po = out.mutable_data();
  for (std::size_t i = 0; i < rows; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < f; ++j) acc += pa[i * f + j];
    po[i] = acc;
  }
  out = with_precision(std::move(out), a.precision());
  Shape as = a.shape();
  attach(out, "sum_last", r, [as, f, rows, r](const Tensor& g, Tape& t) {
    Tensor ga = Tensor::zeros(as);
    double* pga = ga.mutable_data();
    const double* pg = g.data();
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < f; ++j) pga[i * f + j] = pg[i];
    t.accumulate(r.parents[0], ga);
  });
  return out;
}

// ---- elementwise unary -----------------------------------------------------

namespace {

template <class F, class DF>
Tensor unary_op(const char* name, const Tensor& a, F f, DF df) {
  Recorded r = probe({&a});
  Tensor out = raw_unary(a, f);
  out = with_precision(std::move(out), a.precision());
  Tensor av = a;
  attach(out, name, r, [av, df, r](const Tensor& g, Tape& t) {
    Tensor ga = raw_binary(g, av, [df](double gi, double xi, std::size_t) { return gi * df(xi); });
    t.accumulate(r.parents[0], ga);
  });
  return out;
}

}  // namespace

Tensor exp_op(const Tensor& a) {
  return unary_op(
      "exp", a, [](double x, std::size_t) { return std::exp(x); },
      [](double x) { return std::exp(x); });
}

Tensor log_op(const Tensor& a) {
  return unary_op(
      "log", a,
      [](double x, std::size_t i) {
        if (x <= 0.0) {
          throw DomainError("log of non-positive value " + std::to_string(x) + " at index " +
                            std::to_string(i));
        }
        return std::log(x);
      },
      [](double x) { return 1.0 / x; });
}

Tensor sqrt_op(const Tensor& a) {
  return unary_op(
      "sqrt", a,
      [](double x, std::size_t i) {
        if (x < 0.0) {
          throw DomainError("sqrt of negative value " + std::to_string(x) + " at index " +
                            std::to_string(i));
        }
        return std::sqrt(x);
      },
      [](double x) { return 0.5 / std::sqrt(x); });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      "sigmoid", a, [](double x, std::size_t) { return sigmoid_scalar(x); },
      [](double x) {
        double s = sigmoid_scalar(x);
        return s * (1.0 - s);
      });
}

Tensor softplus(const Tensor& a) {
  return unary_op(
      "softplus", a, [](double x, std::size_t) { return stable_softplus(x); },
      [](double x) { return sigmoid_scalar(x); });
}

Tensor tanh_op(const Tensor& a) {
  return unary_op(
      "tanh", a, [](double x, std::size_t) { return std::tanh(x); },
      [](double x) {
        double th = std::tanh(x);
        return 1.0 - th * th;
      });
}

Tensor leaky_relu(const Tensor& a, double slope) {
  return unary_op(
      "leaky_relu", a, [slope](double x, std::size_t) { return x >= 0.0 ? x : slope * x; },
      [slope](double x) { return x >= 0.0 ? 1.0 : slope; });
}

Tensor clamp_min(const Tensor& a, double floor) {
  return unary_op(
      "clamp_min", a, [floor](double x, std::size_t) { return x < floor ? floor : x; },
      [floor](double x) { return x < floor ? 0.0 : 1.0; });
}

// ---- trailing-axis softmax / log-sum-exp ------------------------------------

Tensor softmax(const Tensor& a) {
  if (a.ndim() == 0) throw ContractError("softmax of empty-rank tensor");
  Recorded r = probe({&a});
  const std::size_t f = a.shape().back();
  const std::size_t rows = a.size() / f;
  Tensor out = Tensor::zeros(a.shape());
  const double* pa = a.data();
  double* po = out.mutable_data();
  for (std::size_t i = 0; i < rows; ++i) {
    double mx = pa[i * f];
    for (std::size_t j = 1; j < f; ++j) mx = std::max(mx, pa[i * f + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < f; ++j) {
      po[i * f + j] = std::exp(pa[i * f + j] - mx);
      z += po[i * f + j];
    }
    for (std::size_t j = 0; j < f; ++j) po[i * f + j] /= z;
  }
  out = with_precision(std::move(out), a.precision());
  Tensor y = out;
  attach(out, "softmax", r, [y, f, rows, r](const Tensor& g, Tape& t) {
    Tensor ga = Tensor::zeros(y.shape());
    const double* py = y.data();
    const double* pg = g.data();
    double* pga = ga.mutable_data();
    for (std::size_t i = 0; i < rows; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < f; ++j) dot += pg[i * f + j] * py[i * f + j];
      for (std::size_t j = 0; j < f; ++j) {
        pga[i * f + j] = py[i * f + j] * (pg[i * f + j] - dot);
      }
    }
    t.accumulate(r.parents[0], ga);
  });
  return out;
}

Tensor log_sum_exp(const Tensor& a) {
  if (a.ndim() == 0) throw ContractError("log_sum_exp of empty-rank tensor");
  Recorded r = probe({&a});
  const std::size_t f = a.shape().back();
  const std::size_t rows = a.size() / f;
  Tensor out = Tensor::zeros(drop_last(a.shape()));
  const double* pa = a.data();
  double* po = out.mutable_data();
  for (std::size_t i = 0; i < rows; ++i) {
    double mx = pa[i * f];
    for (std::size_t j = 1; j < f; ++j) mx = std::max(mx, pa[i * f + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < f; ++j) z += std::exp(pa[i * f + j] - mx);
    po[i] = mx + std::log(z);
  }
  out = with_precision(std::move(out), a.precision());
  Tensor av = a;
  Tensor lse = out;
  attach(out, "log_sum_exp", r, [av, lse, f, rows, r](const Tensor& g, Tape& t) {
    Tensor ga = Tensor::zeros(av.shape());
    const double* pa2 = av.data();
    const double* pl = lse.data();
    const double* pg = g.data();
    double* pga = ga.mutable_data();
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < f; ++j) {
        pga[i * f + j] = pg[i] * std::exp(pa2[i * f + j] - pl[i]);
      }
    }
    t.accumulate(r.parents[0], ga);
  });
  return out;
}

// ---- Gaussian kernels --------------------------------------------------------

Tensor gaussian_log_density(const Tensor& x, const Tensor& mu, const Tensor& sigma) {
  Recorded r = probe({&x, &mu, &sigma});
  constexpr double kLog2Pi = 1.8378770664093454836;  // ln(2*pi)
  Tensor z = raw_binary(x, mu, [](double a, double b, std::size_t) { return a - b; });
  z = raw_binary(z, sigma, [](double a, double s, std::size_t i) {
    if (s <= 0.0) {
      throw DomainError("gaussian_log_density requires sigma > 0, got " + std::to_string(s) +
                        " at index " + std::to_string(i));
    }
    return a / s;
  });
  Tensor out = raw_binary(z, sigma, [kLog2Pi](double zi, double s, std::size_t) {
    return -0.5 * zi * zi - std::log(s) - 0.5 * kLog2Pi;
  });
  out = with_precision(std::move(out),
                       combine(combine(x.precision(), mu.precision()), sigma.precision()));
  Shape xs = x.shape(), ms = mu.shape(), ss = sigma.shape();
  Tensor zv = z, sv = sigma;
  attach(out, "gaussian_log_density", r, [zv, sv, xs, ms, ss, r](const Tensor& g, Tape& t) {
    // d/dx = -z/sigma, d/dmu = z/sigma, d/dsigma = (z^2 - 1)/sigma
    Tensor zs = raw_binary(zv, sv, [](double zi, double s, std::size_t) { return zi / s; });
    if (r.parents[0] >= 0) {
      Tensor gx = raw_binary(g, zs, [](double gi, double q, std::size_t) { return -gi * q; });
      t.accumulate(r.parents[0], unbroadcast(gx, xs));
    }
    if (r.parents[1] >= 0) {
      Tensor gm = raw_binary(g, zs, [](double gi, double q, std::size_t) { return gi * q; });
      t.accumulate(r.parents[1], unbroadcast(gm, ms));
    }
    if (r.parents[2] >= 0) {
      Tensor q = raw_binary(zv, sv, [](double zi, double s, std::size_t) {
        return (zi * zi - 1.0) / s;
      });
      Tensor gs = raw_binary(g, q, [](double gi, double qi, std::size_t) { return gi * qi; });
      t.accumulate(r.parents[2], unbroadcast(gs, ss));
    }
  });
  return out;
}

Tensor gaussian_cdf(const Tensor& a) {
  return unary_op(
      "gaussian_cdf", a, [](double x, std::size_t) { return norm_cdf(x); },
      [](double x) { return norm_pdf(x); });
}

// ---- convenience -------------------------------------------------------------

Tensor add(const Tensor& a, double k) { return shift(a, k); }
Tensor mul(const Tensor& a, double k) { return scale(a, k); }
Tensor neg(const Tensor& a) { return scale(a, -1.0); }

double l2_norm(const std::vector<Tensor>& ts) {
  double acc = 0.0;
  for (const Tensor& t : ts) {
    for (std::size_t i = 0; i < t.size(); ++i) acc += t[i] * t[i];
  }
  return std::sqrt(acc);
}

}  // namespace dscm
