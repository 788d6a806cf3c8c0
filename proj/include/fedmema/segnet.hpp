#pragma once

// Segmentation networks: modality encoders, the server's fusion decoder and
// the U-style decoder used for personalized clients and the shared
// regularizer.

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedmema/param_store.hpp"
#include "fedmema/rng.hpp"
#include "fedmema/tensor.hpp"

namespace fedmema {

enum class Modality : std::uint8_t { T1 = 0, T1c = 1, T2 = 2, FLAIR = 3 };

inline constexpr std::array<Modality, 4> kAllModalities = {Modality::T1, Modality::T1c,
                                                           Modality::T2, Modality::FLAIR};

std::string_view modality_name(Modality m);
Modality parse_modality(std::string_view name);

inline constexpr std::size_t kLevels = 4;

struct NetConfig {
  std::size_t base_width = 8;
  std::size_t num_classes = 4;
  std::size_t input_size = 32;
  std::vector<Modality> modalities{kAllModalities.begin(), kAllModalities.end()};

  std::size_t channels(std::size_t level) const { return base_width << (level - 1); }
  std::size_t extent(std::size_t level) const { return input_size >> level; }

  // ConfigError on violation. `heads` must divide every level's width.
  void validate(std::size_t heads = 1) const;
};

// F_1..F_4; levels[l-1] has C_l channels at input_size / 2^l.
struct FeaturePyramid {
  std::array<Tensor, kLevels> levels;
  const Tensor& level(std::size_t l) const { return levels[l - 1]; }
};

// conv3x3 -> relu -> conv3x3 -> relu -> 2x average pool, four times.
class Encoder {
 public:
  Encoder(Modality modality, const NetConfig& cfg, std::uint64_t seed, std::size_t in_channels = 1);

  // x is [C_in,H,W] or [N,C_in,H,W].
  FeaturePyramid forward(const Tensor& x) const;

  Modality modality() const { return modality_; }
  std::size_t in_channels() const { return in_channels_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

 private:
  Modality modality_;
  NetConfig cfg_;
  std::size_t in_channels_;
  ParamStore params_;
};

// U-style decoder over one pyramid. Used as the clients' personalized
// decoder and as the server's shared regularizer decoder.
class Decoder {
 public:
  Decoder(const NetConfig& cfg, std::uint64_t seed);

  // `cal`, when non-empty, holds four tensors; cal[l-1] is added to the
  // decoder's level-l feature before the next upsampling stage.
  Tensor forward(const FeaturePyramid& pyramid, std::span<const Tensor> cal = {}) const;

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

 private:
  NetConfig cfg_;
  ParamStore params_;
};

using SharedDecoder = Decoder;

struct FusionOutput {
  Tensor logits;
  FeaturePyramid fused;
};

// Per level: channel-concat of the modality features in canonical modality
// order, then a 1x1 conv back to C_l. The fused maps feed anchor extraction
// and the same U-style path as Decoder.
class FusionDecoder {
 public:
  FusionDecoder(const NetConfig& cfg, std::uint64_t seed);

  FusionOutput forward(const std::map<Modality, FeaturePyramid>& pyramids) const;
  // Only the fused maps (skips the upsampling path).
  FeaturePyramid fuse(const std::map<Modality, FeaturePyramid>& pyramids) const;

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

 private:
  NetConfig cfg_;
  ParamStore params_;
};

// Kaiming-uniform weights (bound sqrt(6 / fan_in)), zero biases.
Tensor kaiming_conv_weight(std::size_t out_ch, std::size_t in_ch, std::size_t kernel, Rng& rng);

}  // namespace fedmema
