#include "dotfan/io.hpp"

#include <png.h>

#include <cereal/archives/portable_binary.hpp>
#include <cereal/types/map.hpp>
#include <cereal/types/string.hpp>
#include <cereal/types/vector.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "dotfan/errors.hpp"

namespace dotfan::io {

namespace {
constexpr std::uint32_t kArchiveMagic = 0x44464131;  // "DFA1"
}

const NamedArray& ArrayArchive::at(const std::string& name) const {
  auto it = arrays.find(name);
  if (it == arrays.end()) throw CheckpointError("archive has no array named '" + name + "'");
  return it->second;
}

void ArrayArchive::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot write archive " + path.string());
  cereal::PortableBinaryOutputArchive ar(os);
  ar(kArchiveMagic, kind, header, arrays);
}

ArrayArchive ArrayArchive::load(const std::filesystem::path& path,
                                const std::string& expected_kind) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open archive " + path.string());
  ArrayArchive out;
  try {
    cereal::PortableBinaryInputArchive ar(is);
    std::uint32_t magic = 0;
    ar(magic);
    if (magic != kArchiveMagic) throw CheckpointError(path.string() + " is not an array archive");
    ar(out.kind, out.header, out.arrays);
  } catch (const cereal::Exception& e) {
    throw CheckpointError("corrupt archive " + path.string() + ": " + e.what());
  }
  if (!expected_kind.empty() && out.kind != expected_kind) {
    throw CheckpointError(path.string() + " holds a '" + out.kind + "', expected '" +
                          expected_kind + "'");
  }
  for (const auto& [name, arr] : out.arrays) {
    std::size_t n = 1;
    for (int d : arr.shape) n *= static_cast<std::size_t>(std::max(d, 0));
    if (n != arr.values.size()) throw CheckpointError("array '" + name + "' has inconsistent shape");
  }
  return out;
}

void write_png(const std::filesystem::path& path, const Image& image) {
  image.validate();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const int n = image.size;
  std::vector<png_byte> buffer(static_cast<std::size_t>(n) * n * 3);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(std::round((image.at(c, y, x) + 1.0) * 127.5), 0.0, 255.0);
        buffer[(static_cast<std::size_t>(y) * n + x) * 3 + c] = static_cast<png_byte>(v);
      }
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(n);
  png.height = static_cast<png_uint_32>(n);
  png.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.c_str(), 0, buffer.data(), 0, nullptr)) {
    throw DataError("cannot write PNG " + path.string() + ": " + png.message);
  }
}

Image read_png(const std::filesystem::path& path) {
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw DataError("cannot read PNG " + path.string() + ": " + png.message);
  }
  png.format = PNG_FORMAT_RGB;
  if (png.width != png.height) {
    png_image_free(&png);
    throw DataError(path.string() + " is not square");
  }
  std::vector<png_byte> buffer(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, buffer.data(), 0, nullptr)) {
    throw DataError("cannot decode PNG " + path.string() + ": " + png.message);
  }
  const int n = static_cast<int>(png.width);
  Image img = Image::filled(n, 0.0);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(c, y, x) = buffer[(static_cast<std::size_t>(y) * n + x) * 3 + c] / 127.5 - 1.0;
  return img;
}

Image quantize(const Image& image) {
  Image out = image;
  for (auto& v : out.pixels) v = std::clamp(std::round((v + 1.0) * 127.5), 0.0, 255.0) / 127.5 - 1.0;
  return out;
}

namespace {
constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
}

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += kAlphabet[(v >> 6) & 63];
    out += kAlphabet[v & 63];
  }
  if (i < bytes.size()) {
    std::uint32_t v = bytes[i] << 16;
    if (i + 1 < bytes.size()) v |= bytes[i + 1] << 8;
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += (i + 1 < bytes.size()) ? kAlphabet[(v >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
  std::array<int, 256> lookup;
  lookup.fill(-1);
  for (int i = 0; i < 64; ++i) lookup[static_cast<unsigned char>(kAlphabet[i])] = i;
  if (text.size() % 4 != 0) throw DataError("base64 text length is not a multiple of 4");
  std::vector<std::uint8_t> out;
  for (std::size_t i = 0; i < text.size(); i += 4) {
    std::uint32_t v = 0;
    int pad = 0;
    for (int k = 0; k < 4; ++k) {
      const char ch = text[i + k];
      int d = 0;
      if (ch == '=') {
        ++pad;
      } else {
        d = lookup[static_cast<unsigned char>(ch)];
        if (d < 0 || pad > 0) throw DataError("invalid base64 character");
      }
      v = (v << 6) | static_cast<std::uint32_t>(d);
    }
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    if (pad < 2) out.push_back(static_cast<std::uint8_t>((v >> 8) & 255));
    if (pad < 1) out.push_back(static_cast<std::uint8_t>(v & 255));
  }
  return out;
}

std::string encode_doubles(std::span<const double> values) {
  std::vector<std::uint8_t> bytes(values.size() * sizeof(double));
  std::memcpy(bytes.data(), values.data(), bytes.size());
  return base64_encode(bytes);
}

std::vector<double> decode_doubles(const std::string& text) {
  const auto bytes = base64_decode(text);
  if (bytes.size() % sizeof(double) != 0) throw DataError("encoded doubles have a ragged length");
  std::vector<double> values(bytes.size() / sizeof(double));
  std::memcpy(values.data(), bytes.data(), bytes.size());
  return values;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write " + path.string());
  os << text;
}

}  // namespace dotfan::io
