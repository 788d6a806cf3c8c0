#pragma once

// Server-side multi-anchor class representations: masked average pooling of
// fused features, per-class K-means, and the EMA memory bank that is shipped
// to clients as AnchorPacks.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "fedmema/losses.hpp"
#include "fedmema/segnet.hpp"
#include "fedmema/tensor.hpp"

namespace fedmema {

// Masked mean of one sample's level-l fused features over the pixels of one
// class.
struct ClassFeature {
  std::size_t sample = 0;
  std::uint16_t class_id = 0;
  std::size_t level = 0;
  std::vector<double> values;
};

// For every level and every class present in the mask, the mean feature over
// the class's pixels. Features are compared to the full-resolution mask by
// nearest upsampling (each level-l cell stands for a 2^l x 2^l pixel block),
// so a class with at least one pixel always yields a feature at every level.
// `fused` levels are [C_l,h,w] (mask batch 1) or [N,C_l,h,w]; `sample_offset`
// is added to the batch index to form ClassFeature::sample. DataError for
// labels outside [0, num_classes).
std::vector<ClassFeature> masked_class_pool(const FeaturePyramid& fused, const LabelMap& mask,
                                            std::size_t num_classes, std::size_t sample_offset = 0);

struct KMeansOptions {
  std::size_t max_iterations = 100;
  // Independent k-means++ initializations; the lowest final SSE wins.
  std::size_t restarts = 10;
};

struct KMeansResult {
  std::vector<std::vector<double>> centroids;
  std::vector<std::size_t> membership;  // one entry per (possibly duplicated) point
  double sse = 0.0;
  // SSE after every assignment step of the winning run.
  std::vector<double> sse_history;
  std::size_t iterations = 0;
};

// Lloyd's algorithm with k-means++ seeding. With fewer points than k, the
// points are cycled to reach k before clustering. Empty clusters are reseeded
// at the point farthest from its centroid.
KMeansResult kmeans(const std::vector<std::vector<double>>& points, std::size_t k, std::uint64_t seed,
                    const KMeansOptions& options = {});

double kmeans_sse(const std::vector<std::vector<double>>& points,
                  const std::vector<std::vector<double>>& centroids);

// Level used to decide cluster membership. Concat clusters on all four
// levels, each reduced to C_1 values by averaging contiguous channel groups.
enum class MembershipLevel : std::uint8_t { L1 = 1, L2 = 2, L3 = 3, L4 = 4, Concat = 0 };

// A_1..A_4 with row r belonging to class labels[r]. Rows are class-major:
// class c owns rows [c*N_k, (c+1)*N_k).
struct AnchorSet {
  std::size_t n_k = 0;
  std::size_t n_c = 0;
  std::array<std::size_t, kLevels> widths{};
  std::array<std::vector<double>, kLevels> values;
  std::vector<std::uint16_t> labels;
  std::vector<bool> initialized;

  AnchorSet() = default;
  AnchorSet(std::size_t anchors_per_class, std::size_t classes, std::array<std::size_t, kLevels> level_widths);

  std::size_t rows() const { return n_k * n_c; }
  std::span<double> row(std::size_t level, std::size_t r);
  std::span<const double> row(std::size_t level, std::size_t r) const;
  std::size_t initialized_count() const;
};

struct AnchorExtractOptions {
  std::size_t n_k = 3;
  MembershipLevel membership = MembershipLevel::L4;
  std::uint64_t seed = 0;
  KMeansOptions kmeans{};
};

// Clusters each class's per-sample features at the membership level and
// averages the same members' features at every level. Classes without any
// feature stay uninitialized.
AnchorSet extract_anchors(const std::vector<ClassFeature>& features, std::size_t num_classes,
                          const std::array<std::size_t, kLevels>& widths, const AnchorExtractOptions& options);

// Anchor matrices restricted to initialized rows; what clients attend over.
struct AnchorMatrices {
  std::array<Tensor, kLevels> levels;  // [rows, C_l], constants
  std::vector<std::uint16_t> labels;
  std::size_t rows() const { return labels.size(); }
};

class AnchorBank {
 public:
  AnchorBank() = default;
  AnchorBank(std::size_t n_k, std::size_t n_c, std::array<std::size_t, kLevels> widths);

  const AnchorSet& anchors() const { return set_; }
  bool any_initialized() const { return set_.initialized_count() > 0; }

  // Throws ProtocolError when nothing is initialized.
  AnchorMatrices matrices() const;

 private:
  friend double ema_update(AnchorBank& bank, const AnchorSet& fresh, double omega);
  AnchorSet set_;
};

// Blends fresh anchors into the bank: bank = omega*bank + (1-omega)*fresh.
// Within a class, bank anchors are paired with fresh ones greedily by
// ascending level-4 distance; the pairing applies at every level. Slots that
// were never initialized copy the fresh anchor. Returns the L2 norm of the
// change over all levels.
double ema_update(AnchorBank& bank, const AnchorSet& fresh, double omega);

// Wire format, per level: u8 level id, u32 rows, u32 cols, u16 label per row,
// f64 values row-major.
std::vector<std::uint8_t> encode_anchor_pack(const AnchorMatrices& anchors);
AnchorMatrices decode_anchor_pack(std::span<const std::uint8_t> bytes);

}  // namespace fedmema
