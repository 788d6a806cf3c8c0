#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedmema/tensor.hpp"

namespace fedmema {

// Ordered registry of learnable tensors. Names are unique and the order is
// the construction order, which is a function of the architecture alone, so
// two stores of the same architecture always line up entry by entry.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor tensor;
  };

  ParamStore() = default;

  void add(std::string name, Tensor tensor);
  bool contains(std::string_view name) const;
  Tensor& at(std::string_view name);
  const Tensor& at(std::string_view name) const;

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  std::size_t numel() const;
  std::vector<std::string> names() const;

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  const Entry& operator[](std::size_t i) const { return entries_[i]; }
  Entry& operator[](std::size_t i) { return entries_[i]; }

  std::vector<double> flatten() const;
  void unflatten(std::span<const double> values);

  void zero_grad();

  // Deep copy; each tensor keeps its requires_grad flag.
  ParamStore clone() const;

  // True when names, order and shapes all match.
  bool same_layout(const ParamStore& other) const;

  // Copies values from `other` in place. ProtocolError naming the first
  // offending tensor when the layouts differ.
  void assign(const ParamStore& other);

 private:
  std::vector<Entry> entries_;
};

// Binary checkpoint: "FMEM", u32 version, then per tensor: u16 name length,
// name bytes, u8 rank, u32 extents, f64 values. Little-endian.
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_checkpoint(const ParamStore& store);
// Decoded tensors have requires_grad = false.
ParamStore decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, const ParamStore& store);
ParamStore load_checkpoint(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace fedmema
