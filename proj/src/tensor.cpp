#include "fedmema/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <utility>

#include "fedmema/errors.hpp"

namespace fedmema {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

thread_local Tape* g_active_tape = nullptr;
thread_local ActivationProbe* g_probe = nullptr;

[[noreturn]] void dim_error(std::string_view op, const std::string& detail) {
  throw DimensionError(std::string(op) + ": " + detail);
}

std::size_t prod(const Shape& s, std::size_t from, std::size_t to) {
  std::size_t p = 1;
  for (std::size_t i = from; i < to; ++i) p *= s[i];
  return p;
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

void check_finite(std::string_view op, std::span<const double> values) {
  // v * 0 is NaN exactly when v is NaN or Inf; the sum vectorizes.
  double probe = 0.0;
  for (double v : values) probe += v * 0.0;
  if (std::isnan(probe)) throw NumericError("non-finite value produced by op '" + std::string(op) + "'");
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : node_(std::make_shared<TensorNode>()) {
  for (auto e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("tensor shape " + shape_str(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(data.size()));
  }
  check_finite("tensor", data);
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  set_requires_grad(requires_grad);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({1}, {value}, requires_grad);
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) dim_error("dim", "axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  return node_->shape[axis];
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

void Tensor::set_requires_grad(bool on) {
  node_->requires_grad = on;
  if (on) {
    node_->grad.assign(node_->data.size(), 0.0);
  } else {
    node_->grad.clear();
  }
}

void Tensor::zero_grad() {
  std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return Tensor(node_->shape, node_->data, false); }

// ---------------------------------------------------------------------------
// Tape

Tape* Tape::active() { return g_active_tape; }

Tape::Scope::Scope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }

Tape::Scope::~Scope() { g_active_tape = previous_; }

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward needs a scalar loss, got " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  if (records_.empty()) throw ContractError("backward on an empty tape");
  if (!loss.requires_grad()) throw ContractError("loss does not depend on any tensor that requires grad");
  loss.node()->grad[0] += 1.0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    it->backward(it->output->grad);
    for (const TensorNode* in : it->inputs) {
      if (in->requires_grad) check_finite(it->op + " (backward)", in->grad);
    }
  }
  records_.clear();
}

Tensor make_result(std::string_view op, Shape shape, std::vector<double> data,
                   const std::vector<Tensor>& inputs,
                   std::function<void(std::span<const double>)> backward) {
  check_finite(op, data);
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  Tape* tape = Tape::active();
  const bool needs_grad =
      tape != nullptr &&
      std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (needs_grad) {
    node->requires_grad = true;
    node->grad.assign(node->data.size(), 0.0);
    Tape::Record rec;
    rec.op = std::string(op);
    rec.output = node;
    for (const auto& t : inputs) rec.inputs.push_back(t.id());
    rec.backward = std::move(backward);
    tape->push(std::move(rec));
  }
  return Tensor(std::move(node));
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    dim_error("matmul", "cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
  }
  const auto m = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto n = static_cast<Eigen::Index>(b.dim(1));
  std::vector<double> out(static_cast<std::size_t>(m * n));
  MapMat(out.data(), m, n).noalias() =
      ConstMapMat(a.data().data(), m, k) * ConstMapMat(b.data().data(), k, n);
  return make_result("matmul", {a.dim(0), b.dim(1)}, std::move(out), {a, b},
                     [a, b, m, k, n](std::span<const double> g) mutable {
                       ConstMapMat gm(g.data(), m, n);
                       if (a.requires_grad()) {
                         MapMat(a.mutable_grad().data(), m, k).noalias() +=
                             gm * ConstMapMat(b.data().data(), k, n).transpose();
                       }
                       if (b.requires_grad()) {
                         MapMat(b.mutable_grad().data(), k, n).noalias() +=
                             ConstMapMat(a.data().data(), m, k).transpose() * gm;
                       }
                     });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) dim_error("transpose", "expects a matrix, got " + shape_str(a.shape()));
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<double> out(r * c);
  const auto in = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = in[i * c + j];
  return make_result("transpose", {c, r}, std::move(out), {a},
                     [a, r, c](std::span<const double> g) mutable {
                       auto ga = a.mutable_grad();
                       for (std::size_t i = 0; i < r; ++i)
                         for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
                     });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    dim_error("softmax", "axis " + std::to_string(axis) + " invalid for " + shape_str(x.shape()));
  }
  const std::size_t outer = prod(x.shape(), 0, axis);
  const std::size_t len = x.dim(axis);
  const std::size_t inner = prod(x.shape(), axis + 1, x.rank());
  const auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      double mx = in[base];
      for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, in[base + j * inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        const double e = std::exp(in[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= total;
    }
  }
  auto y = std::make_shared<std::vector<double>>(out);
  return make_result("softmax", x.shape(), std::move(out), {x},
                     [x, y, outer, len, inner](std::span<const double> g) mutable {
                       auto gx = x.mutable_grad();
                       const auto& yv = *y;
                       for (std::size_t o = 0; o < outer; ++o) {
                         for (std::size_t i = 0; i < inner; ++i) {
                           const std::size_t base = o * len * inner + i;
                           double dot = 0.0;
                           for (std::size_t j = 0; j < len; ++j)
                             dot += yv[base + j * inner] * g[base + j * inner];
                           for (std::size_t j = 0; j < len; ++j) {
                             const std::size_t at = base + j * inner;
                             gx[at] += yv[at] * (g[at] - dot);
                           }
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------
// Convolution: im2col + GEMM.

namespace {

struct ConvGeometry {
  std::size_t batch, in_ch, height, width, out_ch, kernel, stride, pad, out_h, out_w;
  std::size_t patch() const { return in_ch * kernel * kernel; }
  std::size_t pixels() const { return out_h * out_w; }
};

// col is [patch x batch*pixels], row-major.
void im2col(const ConvGeometry& g, const double* x, double* col) {
  const std::size_t cols = g.batch * g.pixels();
  for (std::size_t c = 0; c < g.in_ch; ++c) {
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        double* row = col + ((c * g.kernel + ky) * g.kernel + kx) * cols;
        for (std::size_t n = 0; n < g.batch; ++n) {
          const double* plane = x + (n * g.in_ch + c) * g.height * g.width;
          double* dst = row + n * g.pixels();
          for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                            static_cast<std::ptrdiff_t>(g.pad);
            double* d = dst + oy * g.out_w;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) {
              std::fill(d, d + g.out_w, 0.0);
              continue;
            }
            const double* src = plane + static_cast<std::size_t>(iy) * g.width;
            for (std::size_t ox = 0; ox < g.out_w; ++ox) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                              static_cast<std::ptrdiff_t>(g.pad);
              d[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width))
                          ? 0.0
                          : src[static_cast<std::size_t>(ix)];
            }
          }
        }
      }
    }
  }
}

void col2im_add(const ConvGeometry& g, const double* col, double* dx) {
  const std::size_t cols = g.batch * g.pixels();
  for (std::size_t c = 0; c < g.in_ch; ++c) {
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        const double* row = col + ((c * g.kernel + ky) * g.kernel + kx) * cols;
        for (std::size_t n = 0; n < g.batch; ++n) {
          double* plane = dx + (n * g.in_ch + c) * g.height * g.width;
          const double* src = row + n * g.pixels();
          for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                            static_cast<std::ptrdiff_t>(g.pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
            double* d = plane + static_cast<std::size_t>(iy) * g.width;
            const double* s = src + oy * g.out_w;
            for (std::size_t ox = 0; ox < g.out_w; ++ox) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                              static_cast<std::ptrdiff_t>(g.pad);
              if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.width)) d[ix] += s[ox];
            }
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
              std::size_t pad) {
  if (x.rank() != 3 && x.rank() != 4) {
    dim_error("conv2d", "input must be [C,H,W] or [N,C,H,W], got " + shape_str(x.shape()));
  }
  if (w.rank() != 4 || w.dim(2) != w.dim(3)) {
    dim_error("conv2d", "weight must be [C_out,C_in,k,k], got " + shape_str(w.shape()));
  }
  if (stride == 0) throw ConfigError("conv2d: stride must be positive");
  const bool batched = x.rank() == 4;
  ConvGeometry g{};
  g.batch = batched ? x.dim(0) : 1;
  g.in_ch = x.dim(batched ? 1 : 0);
  g.height = x.dim(batched ? 2 : 1);
  g.width = x.dim(batched ? 3 : 2);
  g.out_ch = w.dim(0);
  g.kernel = w.dim(2);
  g.stride = stride;
  g.pad = pad;
  if (w.dim(1) != g.in_ch) {
    dim_error("conv2d", "input " + shape_str(x.shape()) + " has " + std::to_string(g.in_ch) +
                            " channels but weight " + shape_str(w.shape()) + " expects " +
                            std::to_string(w.dim(1)));
  }
  if (b.rank() != 1 || b.dim(0) != g.out_ch) {
    dim_error("conv2d", "bias " + shape_str(b.shape()) + " does not match weight " +
                            shape_str(w.shape()));
  }
  const std::size_t span_h = g.height + 2 * pad, span_w = g.width + 2 * pad;
  if (span_h < g.kernel || span_w < g.kernel || (span_h - g.kernel) % stride != 0 ||
      (span_w - g.kernel) % stride != 0) {
    throw ConfigError("conv2d: output extent is not integral for input " + shape_str(x.shape()) +
                      ", kernel " + std::to_string(g.kernel) + ", stride " +
                      std::to_string(stride) + ", pad " + std::to_string(pad));
  }
  g.out_h = (span_h - g.kernel) / stride + 1;
  g.out_w = (span_w - g.kernel) / stride + 1;

  const auto patch = static_cast<Eigen::Index>(g.patch());
  const auto cols = static_cast<Eigen::Index>(g.batch * g.pixels());
  const auto oc = static_cast<Eigen::Index>(g.out_ch);
  auto col = std::make_shared<std::vector<double>>(static_cast<std::size_t>(patch * cols));
  im2col(g, x.data().data(), col->data());

  RowMat prod_mat(oc, cols);
  prod_mat.noalias() = ConstMapMat(w.data().data(), oc, patch) * ConstMapMat(col->data(), patch, cols);

  std::vector<double> out(g.batch * g.out_ch * g.pixels());
  const auto bias = b.data();
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t o = 0; o < g.out_ch; ++o) {
      const double* src = prod_mat.data() + o * cols + n * g.pixels();
      double* dst = out.data() + (n * g.out_ch + o) * g.pixels();
      for (std::size_t p = 0; p < g.pixels(); ++p) dst[p] = src[p] + bias[o];
    }
  }
  Shape out_shape = batched ? Shape{g.batch, g.out_ch, g.out_h, g.out_w}
                            : Shape{g.out_ch, g.out_h, g.out_w};
  return make_result(
      "conv2d", std::move(out_shape), std::move(out), {x, w, b},
      [x, w, b, g, col, patch, cols, oc](std::span<const double> grad) mutable {
        RowMat gm(oc, cols);
        for (std::size_t n = 0; n < g.batch; ++n) {
          for (std::size_t o = 0; o < g.out_ch; ++o) {
            const double* src = grad.data() + (n * g.out_ch + o) * g.pixels();
            std::copy(src, src + g.pixels(), gm.data() + o * cols + n * g.pixels());
          }
        }
        if (w.requires_grad()) {
          MapMat(w.mutable_grad().data(), oc, patch).noalias() +=
              gm * ConstMapMat(col->data(), patch, cols).transpose();
        }
        if (b.requires_grad()) {
          auto gb = b.mutable_grad();
          for (Eigen::Index o = 0; o < oc; ++o) gb[static_cast<std::size_t>(o)] += gm.row(o).sum();
        }
        if (x.requires_grad()) {
          RowMat dcol(patch, cols);
          dcol.noalias() = ConstMapMat(w.data().data(), oc, patch).transpose() * gm;
          col2im_add(g, dcol.data(), x.mutable_grad().data());
        }
      });
}

// ---------------------------------------------------------------------------
// Elementwise and shape ops

ActivationProbe::ActivationProbe() : previous_(g_probe) { g_probe = this; }

ActivationProbe::~ActivationProbe() { g_probe = previous_; }

Tensor relu(const Tensor& x) {
  const auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] > 0.0 ? in[i] : 0.0;
  if (g_probe != nullptr) {
    std::uint64_t h = g_probe->hash_;
    for (double v : in) h = (h ^ (v > 0.0 ? 0x9eU : 0x3dU)) * 1099511628211ULL;
    g_probe->hash_ = h;
  }
  return make_result("relu", x.shape(), std::move(out), {x},
                     [x](std::span<const double> g) mutable {
                       auto gx = x.mutable_grad();
                       const auto in = x.data();
                       for (std::size_t i = 0; i < in.size(); ++i)
                         if (in[i] > 0.0) gx[i] += g[i];
                     });
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    dim_error("add", "shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
  }
  const auto av = a.data(), bv = b.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
  return make_result("add", a.shape(), std::move(out), {a, b},
                     [a, b](std::span<const double> g) mutable {
                       if (a.requires_grad()) {
                         auto ga = a.mutable_grad();
                         for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                       }
                       if (b.requires_grad()) {
                         auto gb = b.mutable_grad();
                         for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                       }
                     });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    dim_error("mul", "shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
  }
  const auto av = a.data(), bv = b.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  return make_result("mul", a.shape(), std::move(out), {a, b},
                     [a, b](std::span<const double> g) mutable {
                       const auto av = a.data(), bv = b.data();
                       if (a.requires_grad()) {
                         auto ga = a.mutable_grad();
                         for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
                       }
                       if (b.requires_grad()) {
                         auto gb = b.mutable_grad();
                         for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
                       }
                     });
}

Tensor scale(const Tensor& x, double factor) {
  const auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] * factor;
  return make_result("scale", x.shape(), std::move(out), {x},
                     [x, factor](std::span<const double> g) mutable {
                       auto gx = x.mutable_grad();
                       for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor;
                     });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    dim_error("reshape", "cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_result("reshape", std::move(shape), std::move(out), {x},
                     [x](std::span<const double> g) mutable {
                       auto gx = x.mutable_grad();
                       for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                     });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) dim_error("concat", "no operands");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) dim_error("concat", "axis " + std::to_string(axis) + " invalid for " + shape_str(first));
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == first[i];
    if (!ok) dim_error("concat", "operand " + shape_str(s) + " incompatible with " + shape_str(first) + " along axis " + std::to_string(axis));
    total += s[axis];
  }
  const std::size_t outer = prod(first, 0, axis);
  const std::size_t inner = prod(first, axis + 1, first.size());
  Shape out_shape = first;
  out_shape[axis] = total;
  std::vector<double> out(outer * total * inner);
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t block = p.dim(axis) * inner;
    const auto src = p.data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(o * block), block,
                  out.begin() + static_cast<std::ptrdiff_t>(o * total * inner + offset * inner));
    }
    offset += p.dim(axis);
  }
  return make_result("concat", std::move(out_shape), std::move(out), parts,
                     [parts, offsets, outer, inner, total, axis](std::span<const double> g) mutable {
                       for (std::size_t k = 0; k < parts.size(); ++k) {
                         if (!parts[k].requires_grad()) continue;
                         auto gp = parts[k].mutable_grad();
                         const std::size_t block = parts[k].dim(axis) * inner;
                         for (std::size_t o = 0; o < outer; ++o) {
                           const double* src = g.data() + o * total * inner + offsets[k] * inner;
                           double* dst = gp.data() + o * block;
                           for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
                         }
                       }
                     });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= x.rank()) dim_error("slice", "axis " + std::to_string(axis) + " invalid for " + shape_str(x.shape()));
  if (begin >= end || end > x.dim(axis)) {
    dim_error("slice", "range [" + std::to_string(begin) + "," + std::to_string(end) +
                           ") invalid for extent " + std::to_string(x.dim(axis)));
  }
  const std::size_t outer = prod(x.shape(), 0, axis);
  const std::size_t inner = prod(x.shape(), axis + 1, x.rank());
  const std::size_t len = x.dim(axis);
  const std::size_t width = end - begin;
  Shape out_shape = x.shape();
  out_shape[axis] = width;
  std::vector<double> out(outer * width * inner);
  const auto src = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>((o * len + begin) * inner), width * inner,
                out.begin() + static_cast<std::ptrdiff_t>(o * width * inner));
  }
  return make_result("slice", std::move(out_shape), std::move(out), {x},
                     [x, outer, inner, len, width, begin](std::span<const double> g) mutable {
                       auto gx = x.mutable_grad();
                       for (std::size_t o = 0; o < outer; ++o) {
                         const double* s = g.data() + o * width * inner;
                         double* d = gx.data() + (o * len + begin) * inner;
                         for (std::size_t i = 0; i < width * inner; ++i) d[i] += s[i];
                       }
                     });
}

Tensor upsample_nearest2x(const Tensor& x) {
  if (x.rank() < 2) dim_error("upsample_nearest2x", "needs rank >= 2, got " + shape_str(x.shape()));
  const std::size_t h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1);
  const std::size_t planes = x.numel() / (h * w);
  Shape out_shape = x.shape();
  out_shape[x.rank() - 2] = 2 * h;
  out_shape[x.rank() - 1] = 2 * w;
  std::vector<double> out(planes * 4 * h * w);
  const auto in = x.data();
  for (std::size_t p = 0; p < planes; ++p) {
    const double* s = in.data() + p * h * w;
    double* d = out.data() + p * 4 * h * w;
    for (std::size_t y = 0; y < 2 * h; ++y)
      for (std::size_t xx = 0; xx < 2 * w; ++xx) d[y * 2 * w + xx] = s[(y / 2) * w + xx / 2];
  }
  return make_result("upsample_nearest2x", std::move(out_shape), std::move(out), {x},
                     [x, planes, h, w](std::span<const double> g) mutable {
                       auto gx = x.mutable_grad();
                       for (std::size_t p = 0; p < planes; ++p) {
                         const double* s = g.data() + p * 4 * h * w;
                         double* d = gx.data() + p * h * w;
                         for (std::size_t y = 0; y < 2 * h; ++y)
                           for (std::size_t xx = 0; xx < 2 * w; ++xx)
                             d[(y / 2) * w + xx / 2] += s[y * 2 * w + xx];
                       }
                     });
}

Tensor avg_pool2x(const Tensor& x) {
  if (x.rank() < 2) dim_error("avg_pool2x", "needs rank >= 2, got " + shape_str(x.shape()));
  const std::size_t h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1);
  if (h % 2 != 0 || w % 2 != 0) dim_error("avg_pool2x", "spatial extents must be even, got " + shape_str(x.shape()));
  const std::size_t oh = h / 2, ow = w / 2;
  const std::size_t planes = x.numel() / (h * w);
  Shape out_shape = x.shape();
  out_shape[x.rank() - 2] = oh;
  out_shape[x.rank() - 1] = ow;
  std::vector<double> out(planes * oh * ow);
  const auto in = x.data();
  for (std::size_t p = 0; p < planes; ++p) {
    const double* s = in.data() + p * h * w;
    double* d = out.data() + p * oh * ow;
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx)
        d[y * ow + xx] = 0.25 * (s[2 * y * w + 2 * xx] + s[2 * y * w + 2 * xx + 1] +
                                 s[(2 * y + 1) * w + 2 * xx] + s[(2 * y + 1) * w + 2 * xx + 1]);
  }
  return make_result("avg_pool2x", std::move(out_shape), std::move(out), {x},
                     [x, planes, h, w, oh, ow](std::span<const double> g) mutable {
                       auto gx = x.mutable_grad();
                       for (std::size_t p = 0; p < planes; ++p) {
                         const double* s = g.data() + p * oh * ow;
                         double* d = gx.data() + p * h * w;
                         for (std::size_t y = 0; y < h; ++y)
                           for (std::size_t xx = 0; xx < w; ++xx)
                             d[y * w + xx] += 0.25 * s[(y / 2) * ow + xx / 2];
                       }
                     });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  return make_result("sum", {1}, {total}, {x}, [x](std::span<const double> g) mutable {
    auto gx = x.mutable_grad();
    for (auto& v : gx) v += g[0];
  });
}

Tensor mean(const Tensor& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

}  // namespace fedmema
