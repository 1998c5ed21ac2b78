// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "drg/errors.hpp"
#include "drg/nn/backbone.hpp"
#include "drg/tensor.hpp"

namespace drg::nn {

// Native-endian named-tensor container:
//   magic "DRGCKPT1" | u64 fingerprint | u32 len + description |
//   u8 dtype size | u64 tensor count | per tensor:
//   u32 len + name | u32 rank | u64 dims[rank] | raw values.

template <typename T>
struct NamedSlot {
  std::string name;
  Tensor<T>* tensor;
};

namespace detail {

inline constexpr char kCkptMagic[8] = {'D', 'R', 'G', 'C', 'K', 'P', 'T', '1'};

template <typename T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw DataError("checkpoint: truncated file");
  return v;
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_pod(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is) {
  const auto len = read_pod<std::uint32_t>(is);
  std::string s(len, '\0');
  is.read(s.data(), static_cast<std::streamsize>(len));
  if (!is) throw DataError("checkpoint: truncated file");
  return s;
}

}  // namespace detail

template <typename T>
void save_tensors(const std::filesystem::path& path, std::uint64_t fingerprint,
                  const std::string& description,
                  const std::vector<NamedSlot<T>>& slots) {
  std::ofstream os(path, std::ios::binary);
  if (!os)
    throw DataError("checkpoint: cannot open for writing: " + path.string());
  os.write(detail::kCkptMagic, sizeof(detail::kCkptMagic));
  detail::write_pod(os, fingerprint);
  detail::write_string(os, description);
  detail::write_pod(os, static_cast<std::uint8_t>(sizeof(T)));
  detail::write_pod(os, static_cast<std::uint64_t>(slots.size()));
  for (const auto& slot : slots) {
    detail::write_string(os, slot.name);
    const Tensor<T>& t = *slot.tensor;
    detail::write_pod(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d = 0; d < t.rank(); ++d)
      detail::write_pod(os, static_cast<std::uint64_t>(t.dim(d)));
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.numel() * sizeof(T)));
  }
  if (!os) throw DataError("checkpoint: write failed: " + path.string());
}

/// Header fields without the tensor payload.
struct CheckpointInfo {
  std::uint64_t fingerprint = 0;
  std::string description;
  std::uint8_t dtype_size = 0;
};

inline CheckpointInfo read_checkpoint_info(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("checkpoint: cannot open: " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, detail::kCkptMagic, sizeof(magic)) != 0)
    throw DataError("checkpoint: bad magic: " + path.string());
  CheckpointInfo info;
  info.fingerprint = detail::read_pod<std::uint64_t>(is);
  info.description = detail::read_string(is);
  info.dtype_size = detail::read_pod<std::uint8_t>(is);
  return info;
}

/// Fills the given slots from the file. The stored fingerprint, dtype,
/// tensor set and every shape must match exactly.
template <typename T>
void load_tensors(const std::filesystem::path& path,
                  std::uint64_t expected_fingerprint,
                  const std::string& expected_description,
                  const std::vector<NamedSlot<T>>& slots) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("checkpoint: cannot open: " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, detail::kCkptMagic, sizeof(magic)) != 0)
    throw DataError("checkpoint: bad magic: " + path.string());
  const auto fingerprint = detail::read_pod<std::uint64_t>(is);
  const auto description = detail::read_string(is);
  if (fingerprint != expected_fingerprint)
    throw DataError("checkpoint: fingerprint mismatch (stored \"" + description +
                    "\", expected \"" + expected_description + "\")");
  const auto dtype_size = detail::read_pod<std::uint8_t>(is);
  if (dtype_size != sizeof(T))
    throw DataError("checkpoint: dtype size mismatch: " + path.string());
  const auto count = detail::read_pod<std::uint64_t>(is);
  if (count != slots.size())
    throw DataError("checkpoint: tensor count mismatch: " + path.string());
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string name = detail::read_string(is);
    const auto rank = detail::read_pod<std::uint32_t>(is);
    std::vector<std::size_t> dims(rank);
    for (auto& d : dims)
      d = static_cast<std::size_t>(detail::read_pod<std::uint64_t>(is));
    Tensor<T>* slot = nullptr;
    for (const auto& s : slots)
      if (s.name == name) {
        slot = s.tensor;
        break;
      }
    if (!slot) throw DataError("checkpoint: unknown tensor \"" + name + "\"");
    if (dims != slot->shape())
      throw DataError("checkpoint: shape mismatch for \"" + name + "\"");
    is.read(reinterpret_cast<char*>(slot->data()),
            static_cast<std::streamsize>(slot->numel() * sizeof(T)));
    if (!is) throw DataError("checkpoint: truncated tensor \"" + name + "\"");
  }
}

template <typename T>
std::vector<NamedSlot<T>> network_slots(ResNet<T>& net) {
  std::vector<NamedSlot<T>> slots;
  for (auto& p : net.params()) slots.push_back({p.name, p.value});
  for (auto& b : net.buffers()) slots.push_back({b.name, b.value});
  return slots;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, ResNet<T>& net) {
  save_tensors(path, net.fingerprint(), net.describe(), network_slots(net));
}

template <typename T>
void load_checkpoint(const std::filesystem::path& path, ResNet<T>& net) {
  load_tensors(path, net.fingerprint(), net.describe(), network_slots(net));
}

/// Rebuilds the spec and class count from a stored description string.
struct ParsedDescription {
  NetworkSpec spec;
  int out_classes = 0;
  std::string dtype;
};

inline ParsedDescription parse_network_description(const std::string& desc) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (start <= desc.size()) {
    const std::size_t semi = desc.find(';', start);
    if (semi == std::string::npos) {
      parts.push_back(desc.substr(start));
      break;
    }
    parts.push_back(desc.substr(start, semi - start));
    start = semi + 1;
  }
  if (parts.empty() || parts[0] != "drgnet-v1")
    throw DataError("checkpoint: unrecognized description \"" + desc + "\"");

  ParsedDescription out;
  NetworkSpec& s = out.spec;
  s.stage_channels.clear();
  s.stage_blocks.clear();
  for (std::size_t i = 1; i < parts.size(); ++i) {
    const std::size_t eq = parts[i].find('=');
    if (eq == std::string::npos)
      throw DataError("checkpoint: bad description field \"" + parts[i] + "\"");
    const std::string key = parts[i].substr(0, eq);
    const std::string val = parts[i].substr(eq + 1);
    try {
      if (key == "input") {
        s.input_size = std::stoi(val);
      } else if (key == "in") {
        s.in_channels = std::stoi(val);
      } else if (key == "stem") {
        std::size_t k = val.find('k'), st = val.find('s'), p = val.find('p');
        if (k == std::string::npos || st == std::string::npos ||
            p == std::string::npos)
          throw DataError("checkpoint: bad stem field");
        s.stem_channels = std::stoi(val.substr(0, k));
        s.stem_kernel = std::stoi(val.substr(k + 1, st - k - 1));
        s.stem_stride = std::stoi(val.substr(st + 1, p - st - 1));
        s.stem_pad = std::stoi(val.substr(p + 1));
      } else if (key == "pool") {
        s.stem_pool = (val == "1");
      } else if (key == "stages") {
        std::size_t pos = 0;
        while (pos <= val.size()) {
          const std::size_t comma = val.find(',', pos);
          const std::string item = val.substr(
              pos, comma == std::string::npos ? std::string::npos : comma - pos);
          const std::size_t colon = item.find(':');
          if (colon == std::string::npos)
            throw DataError("checkpoint: bad stage field \"" + item + "\"");
          s.stage_channels.push_back(std::stoi(item.substr(0, colon)));
          s.stage_blocks.push_back(std::stoi(item.substr(colon + 1)));
          if (comma == std::string::npos) break;
          pos = comma + 1;
        }
      } else if (key == "classes") {
        out.out_classes = std::stoi(val);
      } else if (key == "dtype") {
        out.dtype = val;
      } else {
        throw DataError("checkpoint: unknown description key \"" + key + "\"");
      }
    } catch (const std::invalid_argument&) {
      throw DataError("checkpoint: malformed description \"" + desc + "\"");
    } catch (const std::out_of_range&) {
      throw DataError("checkpoint: malformed description \"" + desc + "\"");
    }
  }
  if (out.out_classes < 2 || out.dtype.empty() || s.stage_channels.empty())
    throw DataError("checkpoint: incomplete description \"" + desc + "\"");
  return out;
}

/// Constructs a network of the stored architecture and loads the weights.
template <typename T>
ResNet<T> load_network(const std::filesystem::path& path) {
  const CheckpointInfo info = read_checkpoint_info(path);
  const ParsedDescription parsed = parse_network_description(info.description);
  if (parsed.dtype != dtype_name<T>::value)
    throw DataError("checkpoint: stored dtype " + parsed.dtype +
                    ", requested " + dtype_name<T>::value);
  ResNet<T> net(parsed.spec, parsed.out_classes);
  load_checkpoint(path, net);
  return net;
}

}  // namespace drg::nn
