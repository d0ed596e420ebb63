#include "freesim/scene_io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "freesim/error.hpp"

namespace freesim {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint32_t kFieldMagic = 0x444C4647;  // "GFLD" little-endian
constexpr std::uint32_t kSweepMagic = 0x444C5346;  // "FSLD"
constexpr std::uint32_t kFormatVersion = 1;

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(double v) { u32(std::bit_cast<std::uint32_t>(static_cast<float>(v))); }

  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  double f32() { return std::bit_cast<float>(u32()); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw Error(ErrorCode::TruncatedFile, "unexpected end of data");
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

void check_header(ByteReader& in, std::uint32_t magic, const char* name) {
  if (in.remaining() < 4) throw Error(ErrorCode::TruncatedFile, "missing header");
  if (in.u32() != magic) throw Error(ErrorCode::BadMagic, std::string("expected ") + name);
  const auto version = in.u32();
  if (version != kFormatVersion) {
    throw Error(ErrorCode::VersionUnsupported, std::string(name) + " version " + std::to_string(version));
  }
}

json vec_json(const Eigen::Vector3d& v) { return json::array({v.x(), v.y(), v.z()}); }

Eigen::Vector3d json_vec3(const json& j, const char* what) {
  if (!j.is_array() || j.size() != 3) {
    throw Error(ErrorCode::MalformedManifest, std::string(what) + " must be a 3-array");
  }
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

std::string frame_stem(int index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d", index);
  return buf;
}

}  // namespace

std::vector<std::uint8_t> encode_field(const GaussianField& field) {
  ByteWriter out;
  out.u32(kFieldMagic);
  out.u32(kFormatVersion);
  out.u64(field.primitives.size());
  for (const auto& p : field.primitives) {
    for (int k = 0; k < 3; ++k) out.f32(p.position[k]);
    out.f32(p.orientation.w());
    out.f32(p.orientation.x());
    out.f32(p.orientation.y());
    out.f32(p.orientation.z());
    for (int k = 0; k < 3; ++k) out.f32(p.log_scale[k]);
    out.f32(p.opacity_logit);
    for (int k = 0; k < 3; ++k) out.f32(p.color[k]);
  }
  for (int k = 0; k < 3; ++k) out.f32(field.background[k]);
  return out.take();
}

GaussianField decode_field(std::span<const std::uint8_t> bytes) {
  ByteReader in(bytes);
  check_header(in, kFieldMagic, "GFLD");
  const std::uint64_t count = in.u64();
  if (count > (in.remaining() / kFieldRecordBytes)) {
    throw Error(ErrorCode::TruncatedFile, "field declares " + std::to_string(count) + " records");
  }
  GaussianField field;
  field.primitives.resize(count);
  for (auto& p : field.primitives) {
    for (int k = 0; k < 3; ++k) p.position[k] = in.f32();
    const double w = in.f32(), x = in.f32(), y = in.f32(), z = in.f32();
    p.orientation = Eigen::Quaterniond(w, x, y, z);
    for (int k = 0; k < 3; ++k) p.log_scale[k] = in.f32();
    p.opacity_logit = in.f32();
    for (int k = 0; k < 3; ++k) p.color[k] = in.f32();
  }
  for (int k = 0; k < 3; ++k) field.background[k] = in.f32();
  return field;
}

void save_field(const GaussianField& field, const fs::path& path) {
  write_file(path, encode_field(field));
}

GaussianField load_field(const fs::path& path) { return decode_field(read_file(path)); }

std::vector<std::uint8_t> encode_sweep(const LidarSweep& sweep) {
  ByteWriter out;
  out.u32(kSweepMagic);
  out.u32(kFormatVersion);
  out.u64(sweep.points.size());
  for (const auto& pt : sweep.points) {
    for (int k = 0; k < 3; ++k) out.f32(pt.position[k]);
    for (int k = 0; k < 3; ++k) out.f32(pt.color[k]);
  }
  return out.take();
}

LidarSweep decode_sweep(std::span<const std::uint8_t> bytes) {
  ByteReader in(bytes);
  check_header(in, kSweepMagic, "FSLD");
  const std::uint64_t count = in.u64();
  if (count > in.remaining() / 24) {
    throw Error(ErrorCode::TruncatedFile, "sweep declares " + std::to_string(count) + " points");
  }
  LidarSweep sweep;
  sweep.points.resize(count);
  for (auto& pt : sweep.points) {
    for (int k = 0; k < 3; ++k) pt.position[k] = in.f32();
    for (int k = 0; k < 3; ++k) pt.color[k] = in.f32();
    if (!pt.position.allFinite()) throw Error(ErrorCode::MalformedManifest, "non-finite LiDAR point");
    // Partially-NaN colors are treated as uncolored.
    if (pt.color.hasNaN()) pt.color.setConstant(std::numeric_limits<double>::quiet_NaN());
  }
  return sweep;
}

void save_sweep(const LidarSweep& sweep, const fs::path& path) {
  write_file(path, encode_sweep(sweep));
}

LidarSweep load_sweep(const fs::path& path) { return decode_sweep(read_file(path)); }

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::MissingFile, path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::IoError, "short write to " + path.string());
}

void write_text(const fs::path& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void save_scene(const SceneDataset& scene, const fs::path& root) {
  fs::create_directories(root / "images");
  fs::create_directories(root / "lidar");
  json frames = json::array();
  for (const auto& f : scene.trajectory.frames) {
    json jf;
    jf["index"] = f.index;
    jf["timestamp"] = f.timestamp;
    std::string image = f.image_path;
    if (image.empty() && scene.images.contains(f.index)) image = "images/" + frame_stem(f.index) + ".png";
    std::string lidar = f.lidar_path;
    if (lidar.empty() && scene.sweeps.contains(f.index)) lidar = "lidar/" + frame_stem(f.index) + ".fsld";
    jf["image"] = image;
    jf["lidar"] = lidar;
    const auto& q = f.pose.rotation;
    jf["pose"] = {{"quat", {q.w(), q.x(), q.y(), q.z()}}, {"center", vec_json(f.pose.center)}};
    const auto& k = f.intrinsics;
    jf["intrinsics"] = {{"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx}, {"cy", k.cy},
                        {"width", k.width}, {"height", k.height}};
    if (!image.empty()) write_png(root / image, scene.image(f.index));
    if (!lidar.empty()) save_sweep(*scene.sweep(f.index), root / lidar);
    frames.push_back(std::move(jf));
  }
  json manifest;
  manifest["version"] = 1;
  manifest["label"] = scene.trajectory.label;
  manifest["frames"] = std::move(frames);
  if (scene.ground_truth_field) {
    manifest["ground_truth_field"] = "ground_truth.gfld";
    save_field(*scene.ground_truth_field, root / "ground_truth.gfld");
  } else {
    manifest["ground_truth_field"] = nullptr;
  }
  write_text(root / "scene.json", manifest.dump(2) + "\n");
}

SceneDataset load_scene(const fs::path& root) {
  const fs::path manifest_path = root / "scene.json";
  if (!fs::exists(manifest_path)) throw Error(ErrorCode::MissingFile, manifest_path.string());
  json manifest;
  try {
    std::ifstream in(manifest_path);
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::MalformedManifest, manifest_path.string() + ": " + e.what());
  }

  SceneDataset scene;
  scene.root = root;
  try {
    if (manifest.at("version").get<int>() != 1) {
      throw Error(ErrorCode::VersionUnsupported, "scene.json version");
    }
    scene.trajectory.label = manifest.value("label", std::string{});
    int last_index = std::numeric_limits<int>::min();
    for (const auto& jf : manifest.at("frames")) {
      Frame f;
      f.index = jf.at("index").get<int>();
      if (f.index <= last_index) {
        throw Error(ErrorCode::MalformedManifest, "frame indices must strictly increase");
      }
      last_index = f.index;
      f.timestamp = jf.at("timestamp").get<double>();
      f.image_path = jf.value("image", std::string{});
      f.lidar_path = jf.value("lidar", std::string{});
      const auto& q = jf.at("pose").at("quat");
      if (!q.is_array() || q.size() != 4) throw Error(ErrorCode::MalformedManifest, "pose.quat");
      f.pose.rotation = Eigen::Quaterniond(q[0].get<double>(), q[1].get<double>(),
                                           q[2].get<double>(), q[3].get<double>());
      if (f.pose.rotation.norm() == 0) throw Error(ErrorCode::MalformedManifest, "zero quaternion");
      f.pose.rotation.normalize();
      f.pose.center = json_vec3(jf.at("pose").at("center"), "pose.center");
      const auto& k = jf.at("intrinsics");
      f.intrinsics.fx = k.at("fx").get<double>();
      f.intrinsics.fy = k.at("fy").get<double>();
      f.intrinsics.cx = k.at("cx").get<double>();
      f.intrinsics.cy = k.at("cy").get<double>();
      f.intrinsics.width = k.at("width").get<int>();
      f.intrinsics.height = k.at("height").get<int>();
      scene.trajectory.frames.push_back(std::move(f));
    }
    if (scene.trajectory.frames.empty()) throw Error(ErrorCode::MalformedManifest, "no frames");
  } catch (const json::exception& e) {
    throw Error(ErrorCode::MalformedManifest, e.what());
  }

  const auto& first = scene.trajectory.frames.front().intrinsics;
  for (const auto& f : scene.trajectory.frames) {
    if (f.intrinsics.width != first.width || f.intrinsics.height != first.height) {
      throw Error(ErrorCode::DimensionMismatch, "frame " + std::to_string(f.index) + " intrinsics size");
    }
    f.intrinsics.validate();
    if (!f.image_path.empty()) {
      const fs::path p = root / f.image_path;
      if (!fs::exists(p)) throw Error(ErrorCode::MissingFile, p.string());
      Image img = read_png(p);
      if (img.width() != first.width || img.height() != first.height) {
        throw Error(ErrorCode::DimensionMismatch,
                    p.string() + " is " + std::to_string(img.width()) + "x" + std::to_string(img.height()));
      }
      if (img.channels() == 4) {
        Image rgb(img.width(), img.height(), 3);
        for (int y = 0; y < img.height(); ++y)
          for (int x = 0; x < img.width(); ++x)
            for (int c = 0; c < 3; ++c) rgb.at(x, y, c) = img.at(x, y, c);
        img = std::move(rgb);
      }
      scene.images.emplace(f.index, std::move(img));
    }
    if (!f.lidar_path.empty()) {
      const fs::path p = root / f.lidar_path;
      if (!fs::exists(p)) throw Error(ErrorCode::MissingFile, p.string());
      scene.sweeps.emplace(f.index, load_sweep(p));
    }
  }

  if (manifest.contains("ground_truth_field") && manifest["ground_truth_field"].is_string()) {
    const fs::path p = root / manifest["ground_truth_field"].get<std::string>();
    if (!fs::exists(p)) throw Error(ErrorCode::MissingFile, p.string());
    GaussianField gt = load_field(p);
    for (auto& prim : gt.primitives) sanitize(prim);
    scene.ground_truth_field = std::move(gt);
  }
  return scene;
}

}  // namespace freesim
