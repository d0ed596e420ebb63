#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "freesim/image.hpp"
#include "freesim/reconstruction.hpp"
#include "freesim/scene.hpp"

namespace freesim::datagen {

struct PerturbConfig {
  double max_fraction = 0.5;
  double max_translation = 0.2;  // meters
  double max_rotation = 15.0;    // degrees
  std::uint64_t seed = 0;
  // When set, used as the shared distance instead of sampling one.
  std::optional<double> distance;

  void validate() const;
};

struct PerturbResult {
  GaussianField field;
  double fraction = 0.0;  // sampled fraction f
  double distance = 0.0;  // shared signed distance along camera_right
  std::vector<int> selected;
};

// Moves a random subset of primitives by one shared distance along camera_right and
// rotates each by an independent small random rotation.
PerturbResult perturb_field(const GaussianField& field, const Eigen::Vector3d& camera_right,
                            const PerturbConfig& cfg);

struct BlendConfig {
  double alpha = 0.5;
  double probability = 0.1;

  void validate() const;
};

// alpha·degraded + (1−alpha)·target.
Image blend_images(const Image& degraded, const Image& target, double alpha);

struct ExtrapolatedView {
  int segment = 0;
  Frame frame;
  Image degraded;
};

std::vector<ExtrapolatedView> extrapolated_views(const Trajectory& traj, const recon::SegmentPlan& plan,
                                                 std::span<const GaussianField> fields);

struct ColorSource {
  const Frame* frame = nullptr;
  const Image* image = nullptr;
  const Image* depth = nullptr;  // optional, used only with the occlusion test
};

struct ColorizeOptions {
  bool occlusion_test = false;
  double depth_tolerance = 0.2;  // meters
};

// Colors each point from the nearest-in-time source in which it lands in-bounds and,
// when enabled, agrees with that source's depth. Points no source sees keep NaN color.
LidarSweep colorize_lidar(const LidarSweep& sweep, double sweep_time, std::span<const ColorSource> sources,
                          const ColorizeOptions& options = {});

// RGBA pseudo-image: z-buffered nearest-pixel splat of colored points; alpha marks coverage.
Image project_lidar(const LidarSweep& sweep, const CameraPose& pose, const CameraIntrinsics& intr);

// Colorizes every sweep in the scene from the recorded images.
std::map<int, LidarSweep> colorize_scene(const SceneDataset& scene, const ColorizeOptions& options = {});

enum class Provenance { Extrapolated, Perturbed };
std::string to_string(Provenance p);

struct TripletRecord {
  std::string degraded;  // paths relative to the manifest directory
  std::string lidar;
  std::string target;
  Provenance provenance = Provenance::Extrapolated;
  int segment = 0;
  int frame = 0;
  double fraction = 0.0;
  double distance_m = 0.0;
  double max_rot_deg = 0.0;
};

struct DatasetManifest {
  std::vector<TripletRecord> triplets;
  std::filesystem::path root;  // directory the relative paths resolve against (not serialized)
};

std::string manifest_json(const DatasetManifest& manifest);
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
DatasetManifest load_manifest(const std::filesystem::path& path);

struct TrainingTriplet {
  Image degraded;
  Image lidar_pseudo;
  Image target;
  TripletRecord meta;
};

TrainingTriplet load_triplet(const DatasetManifest& manifest, std::size_t i);

struct BuildOptions {
  PerturbConfig perturb;
  int perturb_multiplicity = 1;  // Perturbed triplets per training frame
  ColorizeOptions colorize;
};

// Extrapolated triplets for every held-out frame and Perturbed triplets for every training
// frame, written as PNGs under out_dir with manifest.json. Deterministic per perturb seed.
DatasetManifest build_triplets(const SceneDataset& scene, const recon::SegmentPlan& plan,
                               std::span<const GaussianField> fields, const BuildOptions& options,
                               const std::filesystem::path& out_dir);

}  // namespace freesim::datagen
