#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "freesim/image.hpp"

namespace freesim {

// Quaternions are scalar-first (w, x, y, z) wherever they cross an API or file boundary.
// In memory we use Eigen::Quaterniond, whose storage order differs, so always go through
// the named accessors (w(), x(), ...).

struct GaussianPrimitive {
  Eigen::Vector3d position = Eigen::Vector3d::Zero();
  Eigen::Quaterniond orientation = Eigen::Quaterniond::Identity();
  Eigen::Vector3d log_scale = Eigen::Vector3d::Zero();
  double opacity_logit = 0.0;
  Eigen::Vector3d color = Eigen::Vector3d::Zero();

  double opacity() const;
  Eigen::Vector3d scale() const { return log_scale.array().exp(); }

  bool operator==(const GaussianPrimitive& o) const;
};

inline constexpr double kMinScale = 1e-6;
inline constexpr double kMaxScale = 1e3;

struct GaussianField {
  std::vector<GaussianPrimitive> primitives;
  Eigen::Vector3d background = Eigen::Vector3d::Zero();
  std::string frame_of_reference = "world";

  std::size_t size() const noexcept { return primitives.size(); }
  bool empty() const noexcept { return primitives.empty(); }
  bool operator==(const GaussianField& o) const;
};

// Renormalizes the quaternion and clamps log_scale into the valid scale range.
void sanitize(GaussianPrimitive& p);

double sigmoid(double x);
double logit(double p);

struct CameraIntrinsics {
  double fx = 1.0, fy = 1.0;
  double cx = 0.0, cy = 0.0;
  int width = 1, height = 1;

  // Intrinsics for an image resampled by `factor` (pixel centers at integer coordinates).
  CameraIntrinsics scaled(double factor) const;
  void validate() const;
  bool operator==(const CameraIntrinsics&) const = default;
};

// World-to-camera rotation plus the camera center in world coordinates.
// Camera frame: x right, y down, z forward.
struct CameraPose {
  Eigen::Quaterniond rotation = Eigen::Quaterniond::Identity();
  Eigen::Vector3d center = Eigen::Vector3d::Zero();

  Eigen::Matrix3d world_to_camera() const { return rotation.toRotationMatrix(); }
  Eigen::Vector3d to_camera(const Eigen::Vector3d& world) const {
    return world_to_camera() * (world - center);
  }
  // World-frame direction of the camera's +x axis.
  Eigen::Vector3d right_axis() const { return world_to_camera().row(0).transpose(); }

  bool operator==(const CameraPose& o) const;
};

struct Frame {
  int index = 0;
  double timestamp = 0.0;
  CameraPose pose;
  CameraIntrinsics intrinsics;
  std::string image_path;
  std::string lidar_path;
};

struct Trajectory {
  std::vector<Frame> frames;
  std::string label;

  std::size_t size() const noexcept { return frames.size(); }
  bool empty() const noexcept { return frames.empty(); }
};

struct LidarPoint {
  Eigen::Vector3d position = Eigen::Vector3d::Zero();
  // NaN components mean "not colorized".
  Eigen::Vector3d color = Eigen::Vector3d::Constant(std::numeric_limits<double>::quiet_NaN());

  bool colored() const { return !color.hasNaN(); }
};

struct LidarSweep {
  std::vector<LidarPoint> points;
};

struct SceneDataset {
  std::filesystem::path root;
  Trajectory trajectory;
  std::map<int, Image> images;  // frame index -> RGB image
  std::map<int, LidarSweep> sweeps;
  std::optional<GaussianField> ground_truth_field;

  const Image& image(int frame_index) const;
  const LidarSweep* sweep(int frame_index) const;
};

}  // namespace freesim
