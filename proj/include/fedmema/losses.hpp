#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "fedmema/tensor.hpp"

namespace fedmema {

// Integer class labels for one image ([H,W]) or a batch ([N,H,W]).
struct LabelMap {
  std::size_t batch = 1;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> labels;

  LabelMap() = default;
  LabelMap(std::size_t h, std::size_t w, std::vector<std::uint8_t> values);
  LabelMap(std::size_t n, std::size_t h, std::size_t w, std::vector<std::uint8_t> values);

  std::size_t pixels() const { return height * width; }
  std::uint8_t at(std::size_t n, std::size_t y, std::size_t x) const {
    return labels[(n * height + y) * width + x];
  }
};

struct LossWeights {
  double dice = 1.0;
  double ce = 1.0;
};

inline constexpr double kDiceSmooth = 1e-5;

// Soft Dice over foreground classes (1..N_c-1) plus pixelwise cross-entropy,
// each averaged per image and then over the batch. logits is [N_c,H,W] or
// [N,N_c,H,W]. DataError for labels outside [0, N_c).
Tensor dice_ce_loss(const Tensor& logits, const LabelMap& mask, const LossWeights& weights = {});

struct MetricRecord {
  std::vector<double> per_class;  // DSC per class, background included
  double mdsc = 0.0;              // mean over foreground classes
  std::size_t count = 0;          // images averaged
};

// Hard-argmax Dice per class, averaged over the images in the batch. A class
// absent from both prediction and ground truth scores 1.
MetricRecord dsc_metric(const Tensor& logits, const LabelMap& mask);

// Count-weighted running mean of MetricRecords.
class MetricAccumulator {
 public:
  void add(const MetricRecord& rec);
  MetricRecord result() const;

 private:
  std::vector<double> sums_;
  std::size_t count_ = 0;
};

}  // namespace fedmema
