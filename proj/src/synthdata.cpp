#include "fedmema/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "fedmema/errors.hpp"
#include "fedmema/param_store.hpp"
#include "fedmema/wire.hpp"

namespace fedmema {

// Rows: T1, T1c, T2, FLAIR. Columns: BG, ED, ET, NET. T2's ET value sits
// close to background so ET is hard to see there.
const std::array<std::array<double, kNumTissues>, 4> kContrast = {{
    {0.20, 0.35, 0.60, 0.70},
    {0.20, 0.30, 0.90, 0.50},
    {0.30, 0.80, 0.33, 0.40},
    {0.25, 0.85, 0.45, 0.35},
}};

bool Ellipse::contains(double y, double x) const {
  const double c = std::cos(angle), s = std::sin(angle);
  const double dy = y - cy, dx = x - cx;
  const double u = c * dx + s * dy, v = -s * dx + c * dy;
  return (u * u) / (rx * rx) + (v * v) / (ry * ry) <= 1.0;
}

Scene make_scene(std::size_t size, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto between = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };
  const double n = static_cast<double>(size);
  Scene s;
  s.size = size;
  s.edema = {between(0.35, 0.65) * n, between(0.35, 0.65) * n, between(0.18, 0.30) * n,
             between(0.18, 0.30) * n, between(0.0, std::numbers::pi)};
  const double et_scale = between(0.5, 0.7);
  const double et_ry = s.edema.ry * et_scale, et_rx = s.edema.rx * et_scale;
  s.enhancing = {s.edema.cy + between(-0.15, 0.15) * (s.edema.ry - et_ry),
                 s.edema.cx + between(-0.15, 0.15) * (s.edema.rx - et_rx), et_ry, et_rx,
                 between(0.0, std::numbers::pi)};
  const double net_scale = between(0.4, 0.6);
  s.necrotic = {s.enhancing.cy, s.enhancing.cx, s.enhancing.ry * net_scale, s.enhancing.rx * net_scale,
                between(0.0, std::numbers::pi)};
  for (auto& j : s.jitter) j = between(0.9, 1.1);

  s.mask.assign(size * size, kBG);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double py = static_cast<double>(y) + 0.5, px = static_cast<double>(x) + 0.5;
      if (!s.edema.contains(py, px)) continue;
      std::uint8_t lab = kED;
      if (s.enhancing.contains(py, px)) lab = s.necrotic.contains(py, px) ? kNET : kET;
      s.mask[y * size + x] = lab;
    }
  return s;
}

Tensor render_modality(const Scene& scene, Modality m, Rng& rng, const RenderOptions& options) {
  const auto mi = static_cast<std::size_t>(m);
  const double gain = options.jitter ? scene.jitter[mi] : 1.0;
  std::normal_distribution<double> noise(0.0, options.noise_sigma > 0 ? options.noise_sigma : 1.0);
  std::vector<double> v(scene.mask.size());
  for (std::size_t p = 0; p < v.size(); ++p) {
    v[p] = kContrast[mi][scene.mask[p]] * gain;
    if (options.noise_sigma > 0) v[p] += noise(rng);
  }
  return Tensor({1, scene.size, scene.size}, std::move(v));
}

namespace {

void check_size(std::size_t size) {
  if (size < 16 || size % 16 != 0) {
    throw ConfigError("image size must be a multiple of 16 and at least 16, got " + std::to_string(size));
  }
}

}  // namespace

Dataset generate_dataset(std::size_t n, std::size_t size, std::uint64_t seed) {
  check_size(size);
  Dataset d;
  d.image_size = size;
  d.samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, "sample", i));
    const Scene scene = make_scene(size, rng);
    Sample s;
    s.mask = scene.mask;
    s.image.reserve(4 * size * size);
    for (auto m : kAllModalities) {
      const Tensor ch = render_modality(scene, m, rng);
      for (double v : ch.data()) s.image.push_back(static_cast<float>(v));
    }
    d.samples.push_back(std::move(s));
  }
  return d;
}

DataSplits generate_splits(std::size_t train, std::size_t val, std::size_t test, std::size_t size,
                           std::uint64_t seed) {
  return {generate_dataset(train, size, derive_seed(seed, "train")),
          generate_dataset(val, size, derive_seed(seed, "val")),
          generate_dataset(test, size, derive_seed(seed, "test"))};
}

Tensor Dataset::modality_batch(std::span<const std::size_t> indices, Modality m) const {
  const std::size_t px = pixels();
  std::vector<double> v;
  v.reserve(indices.size() * px);
  for (auto i : indices) {
    const float* src = samples.at(i).image.data() + static_cast<std::size_t>(m) * px;
    v.insert(v.end(), src, src + px);
  }
  return Tensor({indices.size(), 1, image_size, image_size}, std::move(v));
}

Tensor Dataset::full_batch(std::span<const std::size_t> indices) const {
  std::vector<double> v;
  v.reserve(indices.size() * 4 * pixels());
  for (auto i : indices) {
    const auto& img = samples.at(i).image;
    v.insert(v.end(), img.begin(), img.end());
  }
  return Tensor({indices.size(), 4, image_size, image_size}, std::move(v));
}

LabelMap Dataset::mask_batch(std::span<const std::size_t> indices) const {
  std::vector<std::uint8_t> v;
  v.reserve(indices.size() * pixels());
  for (auto i : indices) {
    const auto& m = samples.at(i).mask;
    v.insert(v.end(), m.begin(), m.end());
  }
  return LabelMap(indices.size(), image_size, image_size, std::move(v));
}

SitePartition partition(std::size_t n, int setting, std::size_t clients_per_modality, std::uint64_t seed) {
  if (setting != 1 && setting != 2) throw ConfigError("data.setting must be 1 or 2");
  if (clients_per_modality == 0) throw ConfigError("federation.clients_per_modality must be at least 1");
  const std::size_t clients = 4 * clients_per_modality;
  const std::size_t server_blocks = 1 + clients;
  if (n == 0 || n % server_blocks != 0) {
    throw ConfigError("cannot split " + std::to_string(n) + " samples into " + std::to_string(server_blocks) +
                      " equal blocks");
  }
  const std::size_t server_n = n / server_blocks;
  const std::size_t rest = n - server_n;
  std::size_t client_n = server_n;
  if (setting == 2) {
    if (rest % (clients + 1) != 0) {
      throw ConfigError("cannot split the " + std::to_string(rest) + " client samples into " +
                        std::to_string(clients + 1) + " equal blocks");
    }
    client_n = rest / (clients + 1);
  }
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(derive_seed(seed, "partition"));
  std::shuffle(perm.begin(), perm.end(), rng);

  SitePartition p;
  auto block = [&](std::size_t begin, std::size_t len) {
    return std::vector<std::size_t>(perm.begin() + static_cast<std::ptrdiff_t>(begin),
                                    perm.begin() + static_cast<std::ptrdiff_t>(begin + len));
  };
  p.server = block(0, server_n);
  if (setting == 2) p.common = block(server_n + clients * client_n, client_n);
  for (std::size_t i = 0; i < clients; ++i) {
    ClientAssignment c;
    c.id = i;
    c.modality = kAllModalities[i / clients_per_modality];
    c.indices = block(server_n + i * client_n, client_n);
    c.indices.insert(c.indices.end(), p.common.begin(), p.common.end());
    p.clients.push_back(std::move(c));
  }
  return p;
}

ClientDataView::ClientDataView(const Dataset& data, std::vector<std::size_t> indices, Modality modality)
    : data_(&data), indices_(std::move(indices)), modality_(modality) {
  for (auto i : indices_) {
    if (i >= data.size()) throw DataError("client index " + std::to_string(i) + " outside the dataset");
  }
}

Tensor ClientDataView::images(std::span<const std::size_t> local, Modality m) const {
  if (m != modality_) {
    throw ContractError("client holding " + std::string(modality_name(modality_)) + " cannot read " +
                        std::string(modality_name(m)));
  }
  std::vector<std::size_t> global;
  for (auto i : local) global.push_back(indices_.at(i));
  return data_->modality_batch(global, modality_);
}

LabelMap ClientDataView::masks(std::span<const std::size_t> local) const {
  std::vector<std::size_t> global;
  for (auto i : local) global.push_back(indices_.at(i));
  return data_->mask_batch(global);
}

std::vector<std::uint8_t> encode_dataset(const Dataset& data) {
  ByteWriter w;
  w.text("FMDS");
  w.u32(static_cast<std::uint32_t>(data.size()));
  w.u32(static_cast<std::uint32_t>(data.image_size));
  for (const auto& s : data.samples) {
    w.bytes(s.mask);
    for (float v : s.image) w.f32(v);
  }
  return w.take();
}

Dataset decode_dataset(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "dataset dump");
  if (r.text(4) != "FMDS") throw DataError("dataset dump: bad magic");
  Dataset d;
  const std::size_t count = r.u32();
  d.image_size = r.u32();
  const std::size_t px = d.pixels();
  for (std::size_t i = 0; i < count; ++i) {
    Sample s;
    const auto m = r.bytes(px);
    s.mask.assign(m.begin(), m.end());
    s.image.resize(4 * px);
    for (auto& v : s.image) v = r.f32();
    d.samples.push_back(std::move(s));
  }
  if (!r.done()) throw DataError("dataset dump: trailing bytes");
  return d;
}

void dump_dataset(const std::filesystem::path& path, const Dataset& data) {
  write_file_bytes(path, encode_dataset(data));
}

}  // namespace fedmema
