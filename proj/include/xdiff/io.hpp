#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "xdiff/image.hpp"

namespace xdiff::io {

namespace fs = std::filesystem;

void write_f32(const fs::path& path, std::span<const double> values);
Vec read_f32(const fs::path& path, std::size_t expected_count);

void write_u8(const fs::path& path, std::span<const std::uint8_t> values);
std::vector<std::uint8_t> read_u8(const fs::path& path, std::size_t expected_count);

void write_json(const fs::path& path, const nlohmann::json& j);
nlohmann::json read_json(const fs::path& path);

void write_text(const fs::path& path, const std::string& text);
std::string read_text(const fs::path& path);

// Image as <stem>.raw (float32) plus <stem>.json {rows, cols}. Extra fields merge into the sidecar.
void save_image(const fs::path& stem, const Image& img, const nlohmann::json& extra = {});
Image load_image(const fs::path& stem);
void save_mask(const fs::path& stem, const Mask& m);
Mask load_mask(const fs::path& stem);

// 8-bit preview scaled to [0, max].
void write_pgm(const fs::path& path, const Image& img);

// Git blob object id: sha1("blob <len>\0" + content).
std::string git_blob_hash(const std::string& content);
std::string git_blob_hash_file(const fs::path& path);

fs::path with_suffix(const fs::path& stem, const std::string& suffix);

}  // namespace xdiff::io
