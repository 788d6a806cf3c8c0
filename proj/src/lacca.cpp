#include "fedmema/lacca.hpp"

#include <cmath>

#include "fedmema/errors.hpp"

namespace fedmema {

namespace {

struct Layout {
  std::size_t batch, channels, pixels;
};

Layout layout_of(const Shape& shape, const char* op) {
  if (shape.size() == 3) return {1, shape[0], shape[1] * shape[2]};
  if (shape.size() == 4) return {shape[0], shape[1], shape[2] * shape[3]};
  throw DimensionError(std::string(op) + ": expects [C,h,w] or [N,C,h,w], got " + shape_str(shape));
}

// Moves [N, A, B] to [N, B, A] (as flat buffers).
void swap_inner(std::span<const double> in, std::span<double> out, std::size_t n, std::size_t a, std::size_t b) {
  for (std::size_t s = 0; s < n; ++s) {
    const double* src = in.data() + s * a * b;
    double* dst = out.data() + s * a * b;
    for (std::size_t i = 0; i < a; ++i)
      for (std::size_t j = 0; j < b; ++j) dst[j * a + i] = src[i * b + j];
  }
}

}  // namespace

Tensor tokenize(const Tensor& features) {
  const auto L = layout_of(features.shape(), "tokenize");
  std::vector<double> out(features.numel());
  swap_inner(features.data(), out, L.batch, L.channels, L.pixels);
  return make_result("tokenize", {L.batch * L.pixels, L.channels}, std::move(out), {features},
                     [features, L](std::span<const double> g) {
                       std::vector<double> back(g.size());
                       swap_inner(g, back, L.batch, L.pixels, L.channels);
                       auto gf = features.mutable_grad();
                       for (std::size_t i = 0; i < back.size(); ++i) gf[i] += back[i];
                     });
}

Tensor detokenize(const Tensor& tokens, const Shape& shape) {
  const auto L = layout_of(shape, "detokenize");
  if (tokens.rank() != 2 || tokens.dim(0) != L.batch * L.pixels || tokens.dim(1) != L.channels) {
    throw DimensionError("detokenize: tokens " + shape_str(tokens.shape()) + " do not fit " + shape_str(shape));
  }
  std::vector<double> out(tokens.numel());
  swap_inner(tokens.data(), out, L.batch, L.pixels, L.channels);
  return make_result("detokenize", shape, std::move(out), {tokens}, [tokens, L](std::span<const double> g) {
    std::vector<double> back(g.size());
    swap_inner(g, back, L.batch, L.channels, L.pixels);
    auto gt = tokens.mutable_grad();
    for (std::size_t i = 0; i < back.size(); ++i) gt[i] += back[i];
  });
}

Tensor AttentionTrace::mean() const {
  if (heads.empty()) throw ContractError("attention trace is empty");
  std::vector<double> acc(heads.front().numel(), 0.0);
  for (const auto& h : heads) {
    const auto d = h.data();
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += d[i];
  }
  for (auto& v : acc) v /= static_cast<double>(heads.size());
  return Tensor(heads.front().shape(), std::move(acc));
}

Tensor calibrate(const Tensor& features, const Tensor& anchors, std::size_t heads, AttentionTrace* trace) {
  if (!anchors.defined()) throw ProtocolError("calibrate: no anchors to attend over");
  const auto L = layout_of(features.shape(), "calibrate");
  if (heads == 0 || L.channels % heads != 0) {
    throw ConfigError("calibrate: " + std::to_string(heads) + " heads do not divide " + std::to_string(L.channels) +
                      " channels");
  }
  if (anchors.rank() != 2 || anchors.dim(1) != L.channels) {
    throw DimensionError("calibrate: anchors " + shape_str(anchors.shape()) + " do not match " +
                         std::to_string(L.channels) + " channels");
  }
  const std::size_t d = L.channels / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(d));
  const Tensor keys = anchors.detach();
  const Tensor tokens = tokenize(features);
  if (trace) trace->heads.clear();

  std::vector<Tensor> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor q = heads == 1 ? tokens : slice(tokens, 1, h * d, (h + 1) * d);
    const Tensor v = heads == 1 ? keys : slice(keys, 1, h * d, (h + 1) * d);
    const Tensor w = softmax(scale(matmul(q, transpose(v)), inv_sqrt), 1);
    if (trace) trace->heads.push_back(w.detach());
    outs.push_back(matmul(w, v));
  }
  const Tensor joined = heads == 1 ? outs.front() : concat(outs, 1);
  return detokenize(joined, features.shape());
}

std::array<Tensor, kLevels> apply_lacca(const FeaturePyramid& pyramid, const AnchorMatrices& anchors,
                                        std::size_t heads, std::array<AttentionTrace, kLevels>* traces) {
  if (anchors.rows() == 0) throw ProtocolError("apply_lacca: anchor set is empty");
  std::array<Tensor, kLevels> out;
  for (std::size_t l = 0; l < kLevels; ++l) {
    out[l] = calibrate(pyramid.levels[l], anchors.levels[l], heads, traces ? &(*traces)[l] : nullptr);
  }
  return out;
}

std::array<Tensor, kLevels> apply_lacca(const FeaturePyramid& pyramid, const AnchorBank& bank, std::size_t heads,
                                        std::array<AttentionTrace, kLevels>* traces) {
  return apply_lacca(pyramid, bank.matrices(), heads, traces);
}

}  // namespace fedmema
