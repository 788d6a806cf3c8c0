#include "fedmema/param_store.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>
#include <limits>

#include "fedmema/errors.hpp"
#include "fedmema/wire.hpp"

namespace fedmema {

void ParamStore::add(std::string name, Tensor tensor) {
  if (name.empty() || name.size() > std::numeric_limits<std::uint16_t>::max()) {
    throw ContractError("parameter name length out of range: '" + name + "'");
  }
  if (contains(name)) throw ContractError("duplicate parameter name '" + name + "'");
  entries_.push_back({std::move(name), std::move(tensor)});
}

bool ParamStore::contains(std::string_view name) const {
  return std::any_of(entries_.begin(), entries_.end(),
                     [&](const Entry& e) { return e.name == name; });
}

Tensor& ParamStore::at(std::string_view name) {
  for (auto& e : entries_)
    if (e.name == name) return e.tensor;
  throw ContractError("no parameter named '" + std::string(name) + "'");
}

const Tensor& ParamStore::at(std::string_view name) const {
  for (const auto& e : entries_)
    if (e.name == name) return e.tensor;
  throw ContractError("no parameter named '" + std::string(name) + "'");
}

std::size_t ParamStore::numel() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.tensor.numel();
  return n;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.name);
  return out;
}

std::vector<double> ParamStore::flatten() const {
  std::vector<double> out;
  out.reserve(numel());
  for (const auto& e : entries_) out.insert(out.end(), e.tensor.data().begin(), e.tensor.data().end());
  return out;
}

void ParamStore::unflatten(std::span<const double> values) {
  if (values.size() != numel()) {
    throw DimensionError("unflatten: store holds " + std::to_string(numel()) + " values, got " +
                         std::to_string(values.size()));
  }
  std::size_t at = 0;
  for (auto& e : entries_) {
    auto dst = e.tensor.mutable_data();
    std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(at), dst.size(), dst.begin());
    at += dst.size();
  }
}

void ParamStore::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

ParamStore ParamStore::clone() const {
  ParamStore out;
  for (const auto& e : entries_) {
    Tensor t = e.tensor.detach();
    t.set_requires_grad(e.tensor.requires_grad());
    out.add(e.name, std::move(t));
  }
  return out;
}

bool ParamStore::same_layout(const ParamStore& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].name != other.entries_[i].name ||
        entries_[i].tensor.shape() != other.entries_[i].tensor.shape()) {
      return false;
    }
  }
  return true;
}

void ParamStore::assign(const ParamStore& other) {
  if (entries_.size() != other.entries_.size()) {
    throw ProtocolError("parameter count mismatch: " + std::to_string(entries_.size()) + " vs " +
                        std::to_string(other.entries_.size()));
  }
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& src = other.entries_[i];
    auto& dst = entries_[i];
    if (src.name != dst.name || src.tensor.shape() != dst.tensor.shape()) {
      throw ProtocolError("parameter mismatch at '" + dst.name + "' " + shape_str(dst.tensor.shape()) +
                          " vs '" + src.name + "' " + shape_str(src.tensor.shape()));
    }
  }
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    auto dst = entries_[i].tensor.mutable_data();
    const auto src = other.entries_[i].tensor.data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

std::vector<std::uint8_t> encode_checkpoint(const ParamStore& store) {
  ByteWriter w;
  w.text("FMEM");
  w.u32(kCheckpointVersion);
  for (const auto& e : store) {
    w.u16(static_cast<std::uint16_t>(e.name.size()));
    w.text(e.name);
    w.u8(static_cast<std::uint8_t>(e.tensor.rank()));
    for (auto d : e.tensor.shape()) w.u32(static_cast<std::uint32_t>(d));
    w.f64s(e.tensor.data());
  }
  return w.take();
}

ParamStore decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "checkpoint");
  if (r.text(4) != "FMEM") throw DataError("checkpoint: bad magic");
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint: unsupported version " + std::to_string(version));
  }
  ParamStore store;
  while (!r.done()) {
    const auto name_len = r.u16();
    std::string name = r.text(name_len);
    const auto rank = r.u8();
    Shape shape(rank);
    for (auto& d : shape) d = r.u32();
    std::vector<double> values(shape_numel(shape));
    r.f64s(values);
    store.add(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  return store;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void save_checkpoint(const std::filesystem::path& path, const ParamStore& store) {
  write_file_bytes(path, encode_checkpoint(store));
}

ParamStore load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file_bytes(path));
}

}  // namespace fedmema
