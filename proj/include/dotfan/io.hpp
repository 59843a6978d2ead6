#pragma once

// On-disk formats shared by every module: a named-array archive (weights,
// morphable models, trainer state), 8-bit PNG images and base64 blobs.

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "dotfan/image.hpp"

namespace dotfan::io {

struct NamedArray {
  std::vector<int> shape;
  std::vector<double> values;

  template <class Archive>
  void serialize(Archive& ar) {
    ar(shape, values);
  }
};

// Single binary container: a JSON header string plus named double arrays.
// Doubles are stored bit-exactly.
struct ArrayArchive {
  std::string kind;
  std::string header;
  std::map<std::string, NamedArray> arrays;

  const NamedArray& at(const std::string& name) const;
  void save(const std::filesystem::path& path) const;
  // Throws CheckpointError on unreadable input or a different `expected_kind`.
  static ArrayArchive load(const std::filesystem::path& path, const std::string& expected_kind);
};

void write_png(const std::filesystem::path& path, const Image& image);
// Throws DataError when the file cannot be decoded or is not square.
Image read_png(const std::filesystem::path& path);
// The value an image takes after an 8-bit round trip.
Image quantize(const Image& image);

std::string base64_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> base64_decode(const std::string& text);

std::string encode_doubles(std::span<const double> values);
std::vector<double> decode_doubles(const std::string& text);

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace dotfan::io
