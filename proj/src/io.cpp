#include "xdiff/io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <openssl/evp.h>

namespace xdiff::io {
namespace {

static_assert(std::endian::native == std::endian::little, "raw files are little-endian");

std::ofstream open_out(const fs::path& path, std::ios::openmode mode = std::ios::binary) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, mode | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  return out;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

fs::path with_suffix(const fs::path& stem, const std::string& suffix) {
  return fs::path(stem.string() + suffix);
}

void write_f32(const fs::path& path, std::span<const double> values) {
  std::vector<float> buf(values.size());
  std::transform(values.begin(), values.end(), buf.begin(),
                 [](double v) { return static_cast<float>(v); });
  auto out = open_out(path);
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!out) throw IoError("write failed: " + path.string());
}

Vec read_f32(const fs::path& path, std::size_t expected_count) {
  const std::string bytes = slurp(path);
  if (bytes.size() != expected_count * sizeof(float)) {
    throw IoError(path.string() + ": expected " + std::to_string(expected_count * sizeof(float)) +
                  " bytes, found " + std::to_string(bytes.size()));
  }
  std::vector<float> buf(expected_count);
  std::memcpy(buf.data(), bytes.data(), bytes.size());
  return Vec(buf.begin(), buf.end());
}

void write_u8(const fs::path& path, std::span<const std::uint8_t> values) {
  auto out = open_out(path);
  out.write(reinterpret_cast<const char*>(values.data()),
            static_cast<std::streamsize>(values.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<std::uint8_t> read_u8(const fs::path& path, std::size_t expected_count) {
  const std::string bytes = slurp(path);
  if (bytes.size() != expected_count) {
    throw IoError(path.string() + ": expected " + std::to_string(expected_count) + " bytes");
  }
  return std::vector<std::uint8_t>(bytes.begin(), bytes.end());
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  auto out = open_out(path, std::ios::out);
  out << j.dump(2) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

nlohmann::json read_json(const fs::path& path) {
  const std::string text = slurp(path);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(path.string() + ": invalid json: " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  auto out = open_out(path, std::ios::out);
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

std::string read_text(const fs::path& path) { return slurp(path); }

void save_image(const fs::path& stem, const Image& img, const nlohmann::json& extra) {
  write_f32(with_suffix(stem, ".raw"), img.span());
  nlohmann::json j = extra.is_object() ? extra : nlohmann::json::object();
  j["rows"] = img.rows();
  j["cols"] = img.cols();
  j["dtype"] = "float32";
  write_json(with_suffix(stem, ".json"), j);
}

Image load_image(const fs::path& stem) {
  const auto j = read_json(with_suffix(stem, ".json"));
  const int rows = j.at("rows").get<int>();
  const int cols = j.at("cols").get<int>();
  return Image(rows, cols, read_f32(with_suffix(stem, ".raw"), static_cast<std::size_t>(rows) * cols));
}

void save_mask(const fs::path& stem, const Mask& m) {
  write_u8(with_suffix(stem, ".raw"), m.data);
  write_json(with_suffix(stem, ".json"), {{"rows", m.rows}, {"cols", m.cols}, {"dtype", "uint8"}});
}

Mask load_mask(const fs::path& stem) {
  const auto j = read_json(with_suffix(stem, ".json"));
  Mask m(j.at("rows").get<int>(), j.at("cols").get<int>());
  m.data = read_u8(with_suffix(stem, ".raw"), m.data.size());
  return m;
}

void write_pgm(const fs::path& path, const Image& img) {
  const double hi = std::max(img.max(), 1e-300);
  auto out = open_out(path);
  out << "P5\n" << img.cols() << ' ' << img.rows() << "\n255\n";
  for (double v : img.vec()) {
    const double c = std::clamp(v / hi, 0.0, 1.0);
    out.put(static_cast<char>(static_cast<unsigned char>(c * 255.0 + 0.5)));
  }
}

std::string git_blob_hash(const std::string& content) {
  const std::string data = "blob " + std::to_string(content.size()) + '\0' + content;
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha1(), nullptr) != 1) {
    throw Error("sha1 digest failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    const unsigned char c = md[i];
    out += hex[c >> 4];
    out += hex[c & 15];
  }
  return out;
}

std::string git_blob_hash_file(const fs::path& path) { return git_blob_hash(slurp(path)); }

}  // namespace xdiff::io
