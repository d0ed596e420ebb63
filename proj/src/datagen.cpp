#include "freesim/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>

#include <json.hpp>

#include "freesim/error.hpp"
#include "freesim/parallel.hpp"
#include "freesim/rasterizer.hpp"
#include "freesim/scene_io.hpp"

namespace freesim::datagen {

using nlohmann::json;

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  // splitmix64 finalizer over the combined words
  std::uint64_t z = seed ^ (a * 0x9E3779B97F4A7C15ULL) ^ (b * 0xC2B2AE3D27D4EB4FULL);
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

bool in_unit(double v) { return std::isfinite(v) && v >= 0.0 && v <= 1.0; }

std::string frame_tag(int frame) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d", frame);
  return buf;
}

}  // namespace

void PerturbConfig::validate() const {
  if (!in_unit(max_fraction) || !(max_translation >= 0.0) || !(max_rotation >= 0.0) ||
      !std::isfinite(max_translation) || !std::isfinite(max_rotation)) {
    throw Error(ErrorCode::InvalidConfig, "perturbation bounds must be non-negative, fraction within [0,1]");
  }
  if (distance && !(std::abs(*distance) <= max_translation)) {
    throw Error(ErrorCode::InvalidConfig, "fixed perturbation distance exceeds max_translation");
  }
}

void BlendConfig::validate() const {
  if (!in_unit(alpha) || !in_unit(probability)) {
    throw Error(ErrorCode::InvalidConfig, "blend alpha and probability must lie in [0,1]");
  }
}

PerturbResult perturb_field(const GaussianField& field, const Eigen::Vector3d& camera_right,
                            const PerturbConfig& cfg) {
  cfg.validate();
  PerturbResult out;
  out.field = field;
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  // (0, max] via 1 - U[0,1)
  out.fraction = cfg.max_fraction * (1.0 - unit(rng));
  const double d_draw = cfg.max_translation * (2.0 * unit(rng) - 1.0);
  out.distance = cfg.distance.value_or(d_draw);

  const std::size_t n = field.size();
  const auto count = static_cast<std::size_t>(std::floor(out.fraction * static_cast<double>(n)));
  if (count == 0) return out;

  std::vector<int> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = static_cast<int>(i);
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  out.selected.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(count));
  std::sort(out.selected.begin(), out.selected.end());

  const Eigen::Vector3d shift = out.distance * camera_right;
  const double max_rad = cfg.max_rotation * std::numbers::pi / 180.0;
  std::normal_distribution<double> gauss;
  for (int i : out.selected) {
    Eigen::Vector3d axis(gauss(rng), gauss(rng), gauss(rng));
    if (axis.norm() < 1e-12) axis = Eigen::Vector3d::UnitZ();
    axis.normalize();
    const double angle = max_rad * unit(rng);
    GaussianPrimitive& p = out.field.primitives[i];
    p.position += shift;
    p.orientation = (Eigen::Quaterniond(Eigen::AngleAxisd(angle, axis)) * p.orientation).normalized();
  }
  return out;
}

Image blend_images(const Image& degraded, const Image& target, double alpha) {
  require_same_shape(degraded, target, "blend_images");
  if (!in_unit(alpha)) throw Error(ErrorCode::InvalidConfig, "blend alpha must lie in [0,1]");
  if (alpha == 1.0) return degraded;
  if (alpha == 0.0) return target;
  Image out(degraded.width(), degraded.height(), degraded.channels());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out.data()[i] = alpha * degraded.data()[i] + (1.0 - alpha) * target.data()[i];
  }
  return out;
}

std::vector<ExtrapolatedView> extrapolated_views(const Trajectory& traj, const recon::SegmentPlan& plan,
                                                 std::span<const GaussianField> fields) {
  if (fields.size() != plan.segments.size()) {
    throw Error(ErrorCode::DimensionMismatch, "one field per segment expected");
  }
  std::vector<std::pair<int, int>> jobs;  // (segment, position)
  for (std::size_t s = 0; s < plan.segments.size(); ++s) {
    const auto& seg = plan.segments[s];
    for (int p = seg.train_end(); p < seg.end; ++p) jobs.emplace_back(static_cast<int>(s), p);
  }
  std::vector<ExtrapolatedView> out(jobs.size());
  parallel_for(jobs.size(), [&](std::size_t j) {
    const auto [s, p] = jobs[j];
    const Frame& f = traj.frames.at(p);
    out[j].segment = s;
    out[j].frame = f;
    out[j].degraded = clamp01(raster::rasterize(fields[s], f.pose, f.intrinsics).color);
  });
  return out;
}

LidarSweep colorize_lidar(const LidarSweep& sweep, double sweep_time, std::span<const ColorSource> sources,
                          const ColorizeOptions& options) {
  std::vector<std::size_t> order(sources.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::abs(sources[a].frame->timestamp - sweep_time) < std::abs(sources[b].frame->timestamp - sweep_time);
  });

  LidarSweep out = sweep;
  for (auto& pt : out.points) {
    for (std::size_t k : order) {
      const ColorSource& src = sources[k];
      const Eigen::Vector3d pc = src.frame->pose.to_camera(pt.position);
      if (!(pc.z() > raster::kZNear)) continue;
      const auto& in = src.frame->intrinsics;
      const long u = std::lround(in.fx * pc.x() / pc.z() + in.cx);
      const long v = std::lround(in.fy * pc.y() / pc.z() + in.cy);
      if (u < 0 || v < 0 || u >= src.image->width() || v >= src.image->height()) continue;
      const int x = static_cast<int>(u), y = static_cast<int>(v);
      if (options.occlusion_test && src.depth) {
        const double d = src.depth->at(x, y, 0);
        if (!(std::abs(d - pc.z()) <= options.depth_tolerance)) continue;
      }
      pt.color = Eigen::Vector3d(src.image->at(x, y, 0), src.image->at(x, y, 1), src.image->at(x, y, 2));
      break;
    }
  }
  return out;
}

Image project_lidar(const LidarSweep& sweep, const CameraPose& pose, const CameraIntrinsics& intr) {
  Image out(intr.width, intr.height, 4, 0.0);
  std::vector<double> zbuf(static_cast<std::size_t>(intr.width) * intr.height,
                           std::numeric_limits<double>::infinity());
  for (const auto& pt : sweep.points) {
    if (!pt.colored()) continue;
    const Eigen::Vector3d pc = pose.to_camera(pt.position);
    if (!(pc.z() > raster::kZNear)) continue;
    const long u = std::lround(intr.fx * pc.x() / pc.z() + intr.cx);
    const long v = std::lround(intr.fy * pc.y() / pc.z() + intr.cy);
    if (u < 0 || v < 0 || u >= intr.width || v >= intr.height) continue;
    const std::size_t k = static_cast<std::size_t>(v) * intr.width + u;
    if (!(pc.z() < zbuf[k])) continue;
    zbuf[k] = pc.z();
    const int x = static_cast<int>(u), y = static_cast<int>(v);
    for (int c = 0; c < 3; ++c) out.at(x, y, c) = std::clamp(pt.color[c], 0.0, 1.0);
    out.at(x, y, 3) = 1.0;
  }
  return out;
}

std::map<int, LidarSweep> colorize_scene(const SceneDataset& scene, const ColorizeOptions& options) {
  std::vector<ColorSource> sources;
  for (const auto& f : scene.trajectory.frames) sources.push_back({&f, &scene.image(f.index), nullptr});
  std::vector<const Frame*> with_sweep;
  for (const auto& f : scene.trajectory.frames)
    if (scene.sweep(f.index)) with_sweep.push_back(&f);
  std::vector<LidarSweep> colored(with_sweep.size());
  parallel_for(with_sweep.size(), [&](std::size_t i) {
    colored[i] = colorize_lidar(*scene.sweep(with_sweep[i]->index), with_sweep[i]->timestamp, sources, options);
  });
  std::map<int, LidarSweep> out;
  for (std::size_t i = 0; i < with_sweep.size(); ++i) out.emplace(with_sweep[i]->index, std::move(colored[i]));
  return out;
}

std::string to_string(Provenance p) { return p == Provenance::Extrapolated ? "Extrapolated" : "Perturbed"; }

namespace {

Provenance provenance_from(const std::string& s) {
  if (s == "Extrapolated") return Provenance::Extrapolated;
  if (s == "Perturbed") return Provenance::Perturbed;
  throw Error(ErrorCode::MalformedManifest, "unknown provenance '" + s + "'");
}

}  // namespace

std::string manifest_json(const DatasetManifest& manifest) {
  json triplets = json::array();
  for (const auto& t : manifest.triplets) {
    triplets.push_back({{"degraded", t.degraded},
                        {"lidar", t.lidar},
                        {"target", t.target},
                        {"provenance", to_string(t.provenance)},
                        {"segment", t.segment},
                        {"frame", t.frame},
                        {"noise", {{"fraction", t.fraction}, {"distance_m", t.distance_m}, {"max_rot_deg", t.max_rot_deg}}}});
  }
  json doc = {{"version", 1}, {"triplets", triplets}};
  return doc.dump(2) + "\n";
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  write_text(path, manifest_json(manifest));
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error(ErrorCode::MissingFile, "missing manifest " + path.string());
  DatasetManifest m;
  m.root = path.parent_path();
  try {
    std::ifstream in(path);
    const json doc = json::parse(in);
    if (doc.at("version").get<int>() != 1) {
      throw Error(ErrorCode::VersionUnsupported, "unsupported dataset manifest version");
    }
    for (const auto& t : doc.at("triplets")) {
      TripletRecord r;
      r.degraded = t.at("degraded").get<std::string>();
      r.lidar = t.at("lidar").get<std::string>();
      r.target = t.at("target").get<std::string>();
      r.provenance = provenance_from(t.at("provenance").get<std::string>());
      r.segment = t.at("segment").get<int>();
      r.frame = t.at("frame").get<int>();
      const auto& noise = t.at("noise");
      r.fraction = noise.at("fraction").get<double>();
      r.distance_m = noise.at("distance_m").get<double>();
      r.max_rot_deg = noise.at("max_rot_deg").get<double>();
      m.triplets.push_back(std::move(r));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::MalformedManifest, path.string() + ": " + e.what());
  }
  return m;
}

TrainingTriplet load_triplet(const DatasetManifest& manifest, std::size_t i) {
  const TripletRecord& r = manifest.triplets.at(i);
  auto load = [&](const std::string& rel) {
    const auto p = manifest.root / rel;
    if (!std::filesystem::exists(p)) throw Error(ErrorCode::MissingFile, "missing triplet image " + p.string());
    return read_png(p);
  };
  TrainingTriplet t{load(r.degraded), load(r.lidar), load(r.target), r};
  const auto dims = [](const Image& a, const Image& b) { return a.width() == b.width() && a.height() == b.height(); };
  if (!dims(t.degraded, t.target) || !dims(t.lidar_pseudo, t.target)) {
    throw Error(ErrorCode::DimensionMismatch, "triplet " + std::to_string(i) + " images differ in size");
  }
  return t;
}

DatasetManifest build_triplets(const SceneDataset& scene, const recon::SegmentPlan& plan,
                               std::span<const GaussianField> fields, const BuildOptions& options,
                               const std::filesystem::path& out_dir) {
  options.perturb.validate();
  if (options.perturb_multiplicity < 0) throw Error(ErrorCode::InvalidConfig, "negative perturbation multiplicity");
  if (fields.size() != plan.segments.size()) {
    throw Error(ErrorCode::DimensionMismatch, "one field per segment expected");
  }
  namespace fs = std::filesystem;
  for (const char* sub : {"degraded", "lidar", "target"}) fs::create_directories(out_dir / sub);

  // Shared horizontal distance for the whole scene.
  double shared_d = 0.0;
  if (options.perturb.distance) {
    shared_d = *options.perturb.distance;
  } else {
    std::mt19937_64 rng(mix_seed(options.perturb.seed, 0xD15A));
    shared_d = options.perturb.max_translation * (2.0 * std::uniform_real_distribution<double>(0.0, 1.0)(rng) - 1.0);
  }

  struct Job {
    Provenance kind;
    int segment, position, variant;
  };
  std::vector<Job> jobs;
  for (std::size_t s = 0; s < plan.segments.size(); ++s) {
    const auto& seg = plan.segments[s];
    for (int p = seg.train_end(); p < seg.end; ++p) jobs.push_back({Provenance::Extrapolated, int(s), p, 0});
  }
  for (std::size_t s = 0; s < plan.segments.size(); ++s) {
    const auto& seg = plan.segments[s];
    for (int p = seg.start; p < seg.train_end(); ++p)
      for (int k = 0; k < options.perturb_multiplicity; ++k) jobs.push_back({Provenance::Perturbed, int(s), p, k});
  }

  // Per-frame files first so every file has exactly one writer.
  const auto colored = colorize_scene(scene, options.colorize);
  std::vector<int> positions;
  for (const auto& seg : plan.segments)
    for (int p = seg.start; p < seg.end; ++p) positions.push_back(p);
  parallel_for(positions.size(), [&](std::size_t i) {
    const Frame& f = scene.trajectory.frames.at(positions[i]);
    const auto it = colored.find(f.index);
    const Image pseudo = it == colored.end() ? Image(f.intrinsics.width, f.intrinsics.height, 4, 0.0)
                                             : project_lidar(it->second, f.pose, f.intrinsics);
    write_png(out_dir / "lidar" / (frame_tag(f.index) + ".png"), pseudo);
    write_png(out_dir / "target" / (frame_tag(f.index) + ".png"), scene.image(f.index));
  });

  std::vector<TripletRecord> records(jobs.size());
  parallel_for(jobs.size(), [&](std::size_t j) {
    const Job& job = jobs[j];
    const Frame& f = scene.trajectory.frames.at(job.position);
    TripletRecord& r = records[j];
    r.provenance = job.kind;
    r.segment = job.segment;
    r.frame = f.index;
    r.lidar = "lidar/" + frame_tag(f.index) + ".png";
    r.target = "target/" + frame_tag(f.index) + ".png";
    const GaussianField* field = &fields[job.segment];
    GaussianField perturbed;
    std::string name;
    if (job.kind == Provenance::Perturbed) {
      PerturbConfig pc = options.perturb;
      pc.seed = mix_seed(options.perturb.seed, static_cast<std::uint64_t>(f.index) + 1, job.variant);
      pc.distance = shared_d;
      auto res = perturb_field(*field, f.pose.right_axis(), pc);
      perturbed = std::move(res.field);
      field = &perturbed;
      r.fraction = res.fraction;
      r.distance_m = res.distance;
      r.max_rot_deg = pc.max_rotation;
      name = "pert_" + frame_tag(f.index) + "_" + std::to_string(job.variant);
    } else {
      name = "ext_" + frame_tag(f.index);
    }
    r.degraded = "degraded/" + name + ".png";
    write_png(out_dir / r.degraded, clamp01(raster::rasterize(*field, f.pose, f.intrinsics).color));
  });

  DatasetManifest manifest;
  manifest.root = out_dir;
  manifest.triplets = std::move(records);
  save_manifest(manifest, out_dir / "manifest.json");
  return manifest;
}

}  // namespace freesim::datagen
