#pragma once

// Binary tensor container shared by checkpoints (XPCK0001), crosscoders
// (XCCD0001) and fitted subspaces (XPCA0001):
//
//   8 bytes magic | u64 LE header length | UTF-8 JSON header | f32 LE payload
//
// The header carries a "tensors" table of {name, shape, offset}; offset is in
// elements from the start of the payload. Everything else in the header is
// owned by the caller.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "xpatch/error.hpp"

namespace xpatch {

using json = nlohmann::json;

inline constexpr std::size_t kMagicSize = 8;

struct TensorBlob {
  std::vector<std::size_t> shape;
  std::vector<float> data;

  std::size_t numel() const {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  }
};

struct ContainerFile {
  json header;  // without the "tensors" table
  std::map<std::string, TensorBlob> tensors;
};

namespace detail {

inline void put_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline std::uint64_t get_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

inline void put_f32_le(std::string& out, float f) {
  const auto bits = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
}

inline float get_f32_le(const unsigned char* p) {
  const std::uint32_t bits = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                             (static_cast<std::uint32_t>(p[2]) << 16) |
                             (static_cast<std::uint32_t>(p[3]) << 24);
  return std::bit_cast<float>(bits);
}

}  // namespace detail

/// Tensors are written in the order given; the header is dumped with sorted keys
/// so identical inputs give identical bytes.
class ContainerWriter {
 public:
  explicit ContainerWriter(std::string magic) : magic_(std::move(magic)) {
    XPATCH_CHECK(magic_.size() == kMagicSize, ErrorCode::InvalidArgument, "magic must be 8 bytes");
  }

  void add(const std::string& name, std::vector<std::size_t> shape, std::span<const float> data) {
    const auto numel = std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
    XPATCH_CHECK(numel == data.size(), ErrorCode::ShapeMismatch, "tensor " + name + " size does not match shape");
    table_.push_back({{"name", name}, {"shape", shape}, {"offset", offset_}});
    for (float f : data) detail::put_f32_le(payload_, f);
    offset_ += numel;
  }

  std::string bytes(json header) const {
    header["tensors"] = table_;
    const std::string text = header.dump();
    std::string out = magic_;
    detail::put_u64_le(out, text.size());
    out += text;
    out += payload_;
    return out;
  }

  void write(const std::filesystem::path& path, json header) const {
    const std::string blob = bytes(std::move(header));
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    XPATCH_CHECK(out.good(), ErrorCode::Io, "cannot write " + path.string());
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    XPATCH_CHECK(out.good(), ErrorCode::Io, "write failed for " + path.string());
  }

 private:
  std::string magic_;
  json table_ = json::array();
  std::string payload_;
  std::size_t offset_ = 0;
};

inline ContainerFile parse_container(const std::string& blob, std::string_view expected_magic) {
  XPATCH_CHECK(blob.size() >= kMagicSize && std::string_view(blob.data(), kMagicSize) == expected_magic,
               ErrorCode::BadMagic, "expected magic " + std::string(expected_magic));
  XPATCH_CHECK(blob.size() >= kMagicSize + 8, ErrorCode::TruncatedPayload, "missing header length");
  const auto* bytes = reinterpret_cast<const unsigned char*>(blob.data());
  const std::uint64_t header_len = detail::get_u64_le(bytes + kMagicSize);
  const std::size_t header_begin = kMagicSize + 8;
  XPATCH_CHECK(header_len <= blob.size() - header_begin, ErrorCode::TruncatedPayload, "header runs past end of file");

  ContainerFile file;
  try {
    file.header = json::parse(blob.begin() + static_cast<std::ptrdiff_t>(header_begin),
                              blob.begin() + static_cast<std::ptrdiff_t>(header_begin + header_len));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Parse, std::string("container header: ") + e.what());
  }
  XPATCH_CHECK(file.header.contains("tensors") && file.header["tensors"].is_array(), ErrorCode::Parse,
               "container header has no tensor table");

  const std::size_t payload_begin = header_begin + header_len;
  const std::size_t payload_elems = (blob.size() - payload_begin) / 4;
  for (const auto& entry : file.header["tensors"]) {
    TensorBlob t;
    const auto name = entry.at("name").get<std::string>();
    t.shape = entry.at("shape").get<std::vector<std::size_t>>();
    const auto offset = entry.at("offset").get<std::size_t>();
    const auto n = t.numel();
    XPATCH_CHECK(offset + n <= payload_elems, ErrorCode::TruncatedPayload, "tensor " + name + " runs past payload");
    t.data.resize(n);
    const unsigned char* p = bytes + payload_begin + 4 * offset;
    for (std::size_t i = 0; i < n; ++i) t.data[i] = detail::get_f32_le(p + 4 * i);
    file.tensors.emplace(name, std::move(t));
  }
  file.header.erase("tensors");
  return file;
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  XPATCH_CHECK(in.good(), ErrorCode::MissingInput, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline ContainerFile read_container(const std::filesystem::path& path, std::string_view expected_magic) {
  return parse_container(read_file_bytes(path), expected_magic);
}

}  // namespace xpatch
