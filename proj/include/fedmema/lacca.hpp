#pragma once

// Cross-attention calibration: client feature tokens attend over the global
// anchors (keys and values), per level, with raw channel head splitting.

#include <array>
#include <vector>

#include "fedmema/anchors.hpp"
#include "fedmema/segnet.hpp"
#include "fedmema/tensor.hpp"

namespace fedmema {

// [C,h,w] -> [h*w, C] or [N,C,h,w] -> [N*h*w, C]; tokens are row-major over
// (n, y, x).
Tensor tokenize(const Tensor& features);
// Inverse of tokenize for the given feature shape.
Tensor detokenize(const Tensor& tokens, const Shape& shape);

// Attention weights of one calibrate call, one [tokens, anchors] matrix per
// head. Values only, never on a tape.
struct AttentionTrace {
  std::vector<Tensor> heads;
  Tensor mean() const;
};

// Per head: softmax(Q K^T / sqrt(C/heads)) V with Q the head's channel slice
// of the tokens and K = V the same slice of the anchors. Anchors are
// constants. ConfigError if heads does not divide C; ProtocolError for an
// empty anchor matrix; DimensionError if anchor width differs from C.
Tensor calibrate(const Tensor& features, const Tensor& anchors, std::size_t heads, AttentionTrace* trace = nullptr);

// Calibrated tensors for all four levels, ready to add into the decoder.
std::array<Tensor, kLevels> apply_lacca(const FeaturePyramid& pyramid, const AnchorMatrices& anchors,
                                        std::size_t heads,
                                        std::array<AttentionTrace, kLevels>* traces = nullptr);
// Throws ProtocolError when the bank holds no initialized anchors.
std::array<Tensor, kLevels> apply_lacca(const FeaturePyramid& pyramid, const AnchorBank& bank, std::size_t heads,
                                        std::array<AttentionTrace, kLevels>* traces = nullptr);

}  // namespace fedmema
