#include "fedmema/losses.hpp"

#include <algorithm>
#include <cmath>

#include "fedmema/errors.hpp"

namespace fedmema {

LabelMap::LabelMap(std::size_t h, std::size_t w, std::vector<std::uint8_t> values)
    : LabelMap(1, h, w, std::move(values)) {}

LabelMap::LabelMap(std::size_t n, std::size_t h, std::size_t w, std::vector<std::uint8_t> values)
    : batch(n), height(h), width(w), labels(std::move(values)) {
  if (labels.size() != n * h * w) {
    throw DimensionError("label map " + std::to_string(n) + "x" + std::to_string(h) + "x" +
                         std::to_string(w) + " needs " + std::to_string(n * h * w) + " labels, got " +
                         std::to_string(labels.size()));
  }
}

namespace {

struct Layout {
  std::size_t batch, classes, pixels;
};

Layout check_layout(const Tensor& logits, const LabelMap& mask, const char* op) {
  Layout lay{};
  if (logits.rank() == 3) {
    lay.batch = 1;
  } else if (logits.rank() == 4) {
    lay.batch = logits.dim(0);
  } else {
    throw DimensionError(std::string(op) + ": logits must be [N_c,H,W] or [N,N_c,H,W], got " +
                         shape_str(logits.shape()));
  }
  const std::size_t r = logits.rank();
  lay.classes = logits.dim(r - 3);
  lay.pixels = logits.dim(r - 2) * logits.dim(r - 1);
  if (mask.batch != lay.batch || mask.height != logits.dim(r - 2) || mask.width != logits.dim(r - 1)) {
    throw DimensionError(std::string(op) + ": logits " + shape_str(logits.shape()) + " vs mask " +
                         std::to_string(mask.batch) + "x" + std::to_string(mask.height) + "x" +
                         std::to_string(mask.width));
  }
  for (auto v : mask.labels) {
    if (v >= lay.classes) {
      throw DataError(std::string(op) + ": label " + std::to_string(v) + " outside [0, " +
                      std::to_string(lay.classes) + ")");
    }
  }
  return lay;
}

// Per-pixel softmax over the class axis of one image.
void softmax_classes(const double* z, std::size_t classes, std::size_t pixels, double* p) {
  for (std::size_t x = 0; x < pixels; ++x) {
    double mx = z[x];
    for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, z[c * pixels + x]);
    double total = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
      const double e = std::exp(z[c * pixels + x] - mx);
      p[c * pixels + x] = e;
      total += e;
    }
    for (std::size_t c = 0; c < classes; ++c) p[c * pixels + x] /= total;
  }
}

}  // namespace

Tensor dice_ce_loss(const Tensor& logits, const LabelMap& mask, const LossWeights& weights) {
  const Layout lay = check_layout(logits, mask, "dice_ce_loss");
  const std::size_t per_image = lay.classes * lay.pixels;
  auto prob = std::make_shared<std::vector<double>>(lay.batch * per_image);
  const auto z = logits.data();
  const double fg = static_cast<double>(lay.classes - 1);
  double total = 0.0;
  // Per image and foreground class: intersection and denominator sums.
  auto inter = std::make_shared<std::vector<double>>(lay.batch * lay.classes, 0.0);
  auto denom = std::make_shared<std::vector<double>>(lay.batch * lay.classes, 0.0);
  for (std::size_t n = 0; n < lay.batch; ++n) {
    double* p = prob->data() + n * per_image;
    softmax_classes(z.data() + n * per_image, lay.classes, lay.pixels, p);
    const std::uint8_t* g = mask.labels.data() + n * lay.pixels;
    double nll = 0.0;
    for (std::size_t x = 0; x < lay.pixels; ++x) {
      // Clamp keeps log finite when a logit gap underflows the probability.
      nll -= std::log(std::max(p[g[x] * lay.pixels + x], 1e-300));
    }
    double dice_sum = 0.0;
    for (std::size_t c = 1; c < lay.classes; ++c) {
      double i_c = 0.0, s_c = 0.0;
      for (std::size_t x = 0; x < lay.pixels; ++x) {
        const double pc = p[c * lay.pixels + x];
        const double gc = g[x] == c ? 1.0 : 0.0;
        i_c += pc * gc;
        s_c += pc + gc;
      }
      (*inter)[n * lay.classes + c] = i_c;
      (*denom)[n * lay.classes + c] = s_c;
      dice_sum += (2.0 * i_c + kDiceSmooth) / (s_c + kDiceSmooth);
    }
    const double dice_loss = 1.0 - dice_sum / fg;
    const double ce = nll / static_cast<double>(lay.pixels);
    total += weights.dice * dice_loss + weights.ce * ce;
  }
  total /= static_cast<double>(lay.batch);

  return make_result(
      "dice_ce_loss", {1}, {total}, {logits},
      [logits, mask, lay, prob, inter, denom, weights, fg](std::span<const double> up) mutable {
        auto gz = logits.mutable_grad();
        const std::size_t per_image = lay.classes * lay.pixels;
        const double inv_b = 1.0 / static_cast<double>(lay.batch);
        const double ce_scale = weights.ce * inv_b / static_cast<double>(lay.pixels);
        std::vector<double> dp(lay.classes);
        for (std::size_t n = 0; n < lay.batch; ++n) {
          const double* p = prob->data() + n * per_image;
          const std::uint8_t* g = mask.labels.data() + n * lay.pixels;
          double* out = gz.data() + n * per_image;
          for (std::size_t x = 0; x < lay.pixels; ++x) {
            // dL/dp_c from the Dice term.
            double weighted = 0.0;
            dp[0] = 0.0;
            for (std::size_t c = 1; c < lay.classes; ++c) {
              const double s = (*denom)[n * lay.classes + c] + kDiceSmooth;
              const double i2 = 2.0 * (*inter)[n * lay.classes + c] + kDiceSmooth;
              const double gc = g[x] == c ? 1.0 : 0.0;
              dp[c] = -weights.dice * inv_b / fg * (2.0 * gc * s - i2) / (s * s);
              weighted += p[c * lay.pixels + x] * dp[c];
            }
            for (std::size_t c = 0; c < lay.classes; ++c) {
              const double pc = p[c * lay.pixels + x];
              const double gc = g[x] == c ? 1.0 : 0.0;
              out[c * lay.pixels + x] += up[0] * (pc * (dp[c] - weighted) + ce_scale * (pc - gc));
            }
          }
        }
      });
}

MetricRecord dsc_metric(const Tensor& logits, const LabelMap& mask) {
  const Layout lay = check_layout(logits, mask, "dsc_metric");
  const auto z = logits.data();
  MetricRecord rec;
  rec.per_class.assign(lay.classes, 0.0);
  rec.count = lay.batch;
  std::vector<std::size_t> pred_n(lay.classes), gt_n(lay.classes), both(lay.classes);
  for (std::size_t n = 0; n < lay.batch; ++n) {
    std::fill(pred_n.begin(), pred_n.end(), 0);
    std::fill(gt_n.begin(), gt_n.end(), 0);
    std::fill(both.begin(), both.end(), 0);
    const double* img = z.data() + n * lay.classes * lay.pixels;
    const std::uint8_t* g = mask.labels.data() + n * lay.pixels;
    for (std::size_t x = 0; x < lay.pixels; ++x) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < lay.classes; ++c)
        if (img[c * lay.pixels + x] > img[best * lay.pixels + x]) best = c;
      ++pred_n[best];
      ++gt_n[g[x]];
      if (best == g[x]) ++both[best];
    }
    for (std::size_t c = 0; c < lay.classes; ++c) {
      const std::size_t d = pred_n[c] + gt_n[c];
      rec.per_class[c] += d == 0 ? 1.0 : 2.0 * static_cast<double>(both[c]) / static_cast<double>(d);
    }
  }
  double fg = 0.0;
  for (std::size_t c = 0; c < lay.classes; ++c) {
    rec.per_class[c] /= static_cast<double>(lay.batch);
    if (c > 0) fg += rec.per_class[c];
  }
  rec.mdsc = fg / static_cast<double>(lay.classes - 1);
  return rec;
}

void MetricAccumulator::add(const MetricRecord& rec) {
  if (sums_.empty()) sums_.assign(rec.per_class.size(), 0.0);
  if (sums_.size() != rec.per_class.size()) throw DimensionError("metric records differ in class count");
  for (std::size_t c = 0; c < sums_.size(); ++c) sums_[c] += rec.per_class[c] * static_cast<double>(rec.count);
  count_ += rec.count;
}

MetricRecord MetricAccumulator::result() const {
  MetricRecord rec;
  rec.count = count_;
  rec.per_class.assign(sums_.size(), 0.0);
  if (count_ == 0) return rec;
  double fg = 0.0;
  for (std::size_t c = 0; c < sums_.size(); ++c) {
    rec.per_class[c] = sums_[c] / static_cast<double>(count_);
    if (c > 0) fg += rec.per_class[c];
  }
  rec.mdsc = sums_.size() > 1 ? fg / static_cast<double>(sums_.size() - 1) : 0.0;
  return rec;
}

}  // namespace fedmema
