#include "fedmema/segnet.hpp"

#include <cmath>

#include "fedmema/errors.hpp"

namespace fedmema {

std::string_view modality_name(Modality m) {
  switch (m) {
    case Modality::T1: return "T1";
    case Modality::T1c: return "T1c";
    case Modality::T2: return "T2";
    case Modality::FLAIR: return "FLAIR";
  }
  return "?";
}

Modality parse_modality(std::string_view name) {
  for (auto m : kAllModalities)
    if (modality_name(m) == name) return m;
  throw ConfigError("unknown modality '" + std::string(name) + "' (expected T1, T1c, T2 or FLAIR)");
}

void NetConfig::validate(std::size_t heads) const {
  if (base_width == 0) throw ConfigError("model.base_width must be positive");
  if (num_classes < 2) throw ConfigError("model.num_classes must be at least 2");
  if (input_size < 16 || input_size % 16 != 0) {
    throw ConfigError("data.image_size must be a positive multiple of 16, got " +
                      std::to_string(input_size));
  }
  if (modalities.empty()) throw ConfigError("modality set is empty");
  for (std::size_t i = 1; i < modalities.size(); ++i) {
    if (static_cast<int>(modalities[i]) <= static_cast<int>(modalities[i - 1])) {
      throw ConfigError("modality set must be unique and in canonical order");
    }
  }
  if (heads == 0) throw ConfigError("lacca.heads must be positive");
  for (std::size_t l = 1; l <= kLevels; ++l) {
    if (channels(l) % heads != 0) {
      throw ConfigError("level " + std::to_string(l) + " width " + std::to_string(channels(l)) +
                        " is not divisible by " + std::to_string(heads) + " attention heads");
    }
  }
}

Tensor kaiming_conv_weight(std::size_t out_ch, std::size_t in_ch, std::size_t kernel, Rng& rng) {
  const double fan_in = static_cast<double>(in_ch * kernel * kernel);
  const double bound = std::sqrt(6.0 / fan_in);
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> w(out_ch * in_ch * kernel * kernel);
  for (auto& v : w) v = dist(rng);
  return Tensor({out_ch, in_ch, kernel, kernel}, std::move(w), true);
}

namespace {

void add_conv(ParamStore& store, const std::string& name, std::size_t out_ch, std::size_t in_ch,
              std::size_t kernel, Rng& rng) {
  store.add(name + ".weight", kaiming_conv_weight(out_ch, in_ch, kernel, rng));
  store.add(name + ".bias", Tensor::zeros({out_ch}, true));
}

Tensor apply_conv(const ParamStore& store, const std::string& name, const Tensor& x,
                  std::size_t pad) {
  return conv2d(x, store.at(name + ".weight"), store.at(name + ".bias"), 1, pad);
}

std::size_t channel_axis(const Tensor& t) { return t.rank() - 3; }

void add_decoder_path(ParamStore& store, const NetConfig& cfg, Rng& rng) {
  for (std::size_t l = kLevels - 1; l >= 1; --l) {
    add_conv(store, "up" + std::to_string(l), cfg.channels(l), cfg.channels(l + 1) + cfg.channels(l), 3,
             rng);
  }
  add_conv(store, "head", cfg.num_classes, cfg.channels(1), 1, rng);
}

Tensor add_calibration(const Tensor& feature, std::span<const Tensor> cal, std::size_t level) {
  if (cal.empty()) return feature;
  const Tensor& c = cal[level - 1];
  if (c.shape() != feature.shape()) {
    throw DimensionError("calibration at level " + std::to_string(level) + " has shape " +
                         shape_str(c.shape()) + ", decoder feature is " + shape_str(feature.shape()));
  }
  return add(feature, c);
}

Tensor decode_path(const ParamStore& store, const std::array<Tensor, kLevels>& levels,
                   std::span<const Tensor> cal) {
  if (!cal.empty() && cal.size() != kLevels) {
    throw DimensionError("calibration needs " + std::to_string(kLevels) + " tensors, got " +
                         std::to_string(cal.size()));
  }
  Tensor d = add_calibration(levels[kLevels - 1], cal, kLevels);
  for (std::size_t l = kLevels - 1; l >= 1; --l) {
    const Tensor& skip = levels[l - 1];
    Tensor merged = concat({upsample_nearest2x(d), skip}, channel_axis(skip));
    d = relu(apply_conv(store, "up" + std::to_string(l), merged, 1));
    d = add_calibration(d, cal, l);
  }
  // The 1x1 head commutes with nearest upsampling, so it runs at level-1
  // resolution.
  return upsample_nearest2x(apply_conv(store, "head", d, 0));
}

}  // namespace

// ---------------------------------------------------------------------------

Encoder::Encoder(Modality modality, const NetConfig& cfg, std::uint64_t seed, std::size_t in_channels)
    : modality_(modality), cfg_(cfg), in_channels_(in_channels) {
  cfg_.validate();
  if (in_channels == 0) throw ConfigError("encoder needs at least one input channel");
  Rng rng(seed);
  std::size_t prev = in_channels;
  for (std::size_t l = 1; l <= kLevels; ++l) {
    const std::string block = "block" + std::to_string(l);
    add_conv(params_, block + ".conv1", cfg_.channels(l), prev, 3, rng);
    add_conv(params_, block + ".conv2", cfg_.channels(l), cfg_.channels(l), 3, rng);
    prev = cfg_.channels(l);
  }
}

FeaturePyramid Encoder::forward(const Tensor& x) const {
  if (x.rank() != 3 && x.rank() != 4) {
    throw DimensionError("encoder input must be [C,H,W] or [N,C,H,W], got " + shape_str(x.shape()));
  }
  const std::size_t ch = x.dim(x.rank() - 3);
  if (ch != in_channels_) {
    throw DimensionError("encoder for " + std::string(modality_name(modality_)) + " expects " +
                         std::to_string(in_channels_) + " input channel(s), got " + shape_str(x.shape()));
  }
  if (x.dim(x.rank() - 1) % 16 != 0 || x.dim(x.rank() - 2) % 16 != 0) {
    throw DimensionError("encoder input extents must be multiples of 16, got " + shape_str(x.shape()));
  }
  FeaturePyramid pyr;
  Tensor h = x;
  for (std::size_t l = 1; l <= kLevels; ++l) {
    const std::string block = "block" + std::to_string(l);
    h = relu(apply_conv(params_, block + ".conv1", h, 1));
    h = relu(apply_conv(params_, block + ".conv2", h, 1));
    h = avg_pool2x(h);
    pyr.levels[l - 1] = h;
  }
  return pyr;
}

Decoder::Decoder(const NetConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  add_decoder_path(params_, cfg_, rng);
}

Tensor Decoder::forward(const FeaturePyramid& pyramid, std::span<const Tensor> cal) const {
  return decode_path(params_, pyramid.levels, cal);
}

FusionDecoder::FusionDecoder(const NetConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  const std::size_t m = cfg_.modalities.size();
  for (std::size_t l = 1; l <= kLevels; ++l) {
    add_conv(params_, "fuse" + std::to_string(l), cfg_.channels(l), m * cfg_.channels(l), 1, rng);
  }
  add_decoder_path(params_, cfg_, rng);
}

FeaturePyramid FusionDecoder::fuse(const std::map<Modality, FeaturePyramid>& pyramids) const {
  for (auto m : cfg_.modalities) {
    if (!pyramids.contains(m)) {
      throw ProtocolError("fusion decoder is missing the " + std::string(modality_name(m)) + " pyramid");
    }
  }
  FeaturePyramid fused;
  for (std::size_t l = 1; l <= kLevels; ++l) {
    std::vector<Tensor> parts;
    for (auto m : cfg_.modalities) parts.push_back(pyramids.at(m).level(l));
    Tensor cat = concat(parts, channel_axis(parts.front()));
    fused.levels[l - 1] = apply_conv(params_, "fuse" + std::to_string(l), cat, 0);
  }
  return fused;
}

FusionOutput FusionDecoder::forward(const std::map<Modality, FeaturePyramid>& pyramids) const {
  FusionOutput out;
  out.fused = fuse(pyramids);
  out.logits = decode_path(params_, out.fused.levels, {});
  return out;
}

}  // namespace fedmema
