#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "freesim/scene.hpp"

namespace freesim {

// Field checkpoint ("GFLD"): little-endian; u32 magic, u32 version, u64 count, then 56-byte
// records (f32 position[3], f32 quat wxyz[4], f32 log_scale[3], f32 opacity_logit, f32 color[3]),
// then f32 background[3]. Values are narrowed to f32 on save.
inline constexpr std::size_t kFieldHeaderBytes = 16;
inline constexpr std::size_t kFieldRecordBytes = 56;

std::vector<std::uint8_t> encode_field(const GaussianField& field);
GaussianField decode_field(std::span<const std::uint8_t> bytes);
void save_field(const GaussianField& field, const std::filesystem::path& path);
GaussianField load_field(const std::filesystem::path& path);

// LiDAR sweep ("FSLD"): u32 magic, u32 version, u64 count, then 3×f32 position + 3×f32 color.
std::vector<std::uint8_t> encode_sweep(const LidarSweep& sweep);
LidarSweep decode_sweep(std::span<const std::uint8_t> bytes);
void save_sweep(const LidarSweep& sweep, const std::filesystem::path& path);
LidarSweep load_sweep(const std::filesystem::path& path);

// scene.json manifest plus images/, lidar/ and an optional ground-truth checkpoint.
void save_scene(const SceneDataset& scene, const std::filesystem::path& root);
SceneDataset load_scene(const std::filesystem::path& root);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace freesim
