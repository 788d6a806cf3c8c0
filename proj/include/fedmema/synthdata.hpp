#pragma once

// Synthetic multimodal segmentation data: nested elliptical lesions rendered
// under four contrast profiles, plus the server/client site partitioner.

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "fedmema/losses.hpp"
#include "fedmema/rng.hpp"
#include "fedmema/segnet.hpp"
#include "fedmema/tensor.hpp"

namespace fedmema {

enum Tissue : std::uint8_t { kBG = 0, kED = 1, kET = 2, kNET = 3 };
inline constexpr std::size_t kNumTissues = 4;

// Base intensity per (modality, tissue).
extern const std::array<std::array<double, kNumTissues>, 4> kContrast;

struct Ellipse {
  double cy = 0, cx = 0, ry = 1, rx = 1, angle = 0;
  bool contains(double y, double x) const;
};

// Edema ellipse containing the enhancing-tumor ellipse containing the
// necrotic core; labels are painted outer to inner.
struct Scene {
  std::size_t size = 0;
  Ellipse edema, enhancing, necrotic;
  std::array<double, 4> jitter{1, 1, 1, 1};  // multiplicative, per modality
  std::vector<std::uint8_t> mask;              // size x size
};

Scene make_scene(std::size_t size, Rng& rng);

struct RenderOptions {
  bool jitter = true;
  double noise_sigma = 0.05;
};

// [1,H,W]. Noise draws come from `rng`.
Tensor render_modality(const Scene& scene, Modality m, Rng& rng, const RenderOptions& options = {});

struct Sample {
  std::vector<std::uint8_t> mask;  // H*W
  std::vector<float> image;        // 4*H*W, canonical modality order
};

struct Dataset {
  std::size_t image_size = 0;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  std::size_t pixels() const { return image_size * image_size; }
  // [B,1,H,W] slice of one modality for the given samples.
  Tensor modality_batch(std::span<const std::size_t> indices, Modality m) const;
  // [B,4,H,W], all modalities.
  Tensor full_batch(std::span<const std::size_t> indices) const;
  LabelMap mask_batch(std::span<const std::size_t> indices) const;
};

// ConfigError unless size >= 16 and divisible by 16.
Dataset generate_dataset(std::size_t n, std::size_t size, std::uint64_t seed);

// Training, validation and test sets drawn from separate seed streams.
struct DataSplits {
  Dataset train, val, test;
};
DataSplits generate_splits(std::size_t train, std::size_t val, std::size_t test, std::size_t size,
                           std::uint64_t seed);

struct ClientAssignment {
  std::size_t id = 0;
  Modality modality = Modality::T1;
  std::vector<std::size_t> indices;
};

struct SitePartition {
  std::vector<std::size_t> server;
  std::vector<ClientAssignment> clients;  // ordered by id; modality-major
  std::vector<std::size_t> common;        // setting 2 only
};

// Setting 1: 1 + 4*cpm equal disjoint blocks, server first. Setting 2: the
// server block is the same size; the rest is split into 4*cpm + 1 blocks and
// the last is shared by every client. ConfigError when n is indivisible.
SitePartition partition(std::size_t n, int setting, std::size_t clients_per_modality, std::uint64_t seed);

// What a client is allowed to see: one modality channel of its own samples.
class ClientDataView {
 public:
  ClientDataView(const Dataset& data, std::vector<std::size_t> indices, Modality modality);

  std::size_t size() const { return indices_.size(); }
  Modality modality() const { return modality_; }
  // `local` indexes into this client's own sample list. Requesting another
  // modality is a ContractError.
  Tensor images(std::span<const std::size_t> local, Modality m) const;
  Tensor images(std::span<const std::size_t> local) const { return images(local, modality_); }
  LabelMap masks(std::span<const std::size_t> local) const;

 private:
  const Dataset* data_;
  std::vector<std::size_t> indices_;
  Modality modality_;
};

// "FMDS", u32 count, u32 size, then per sample: u8 mask per pixel and 4*H*W
// f32 image values.
std::vector<std::uint8_t> encode_dataset(const Dataset& data);
Dataset decode_dataset(std::span<const std::uint8_t> bytes);
void dump_dataset(const std::filesystem::path& path, const Dataset& data);

}  // namespace fedmema
