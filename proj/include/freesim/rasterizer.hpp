#pragma once

#include <Eigen/Core>

#include <optional>
#include <utility>
#include <vector>

#include "freesim/image.hpp"
#include "freesim/scene.hpp"

namespace freesim::raster {

// Splatting constants. Golden images depend on these, so they are fixed.
inline constexpr double kCovFloor = 0.3;          // px², added to the 2D covariance diagonal
inline constexpr double kCullSigma = 3.0;         // bounding box and contribution cutoff
inline constexpr double kAlphaClamp = 0.999;
inline constexpr double kTransmittanceCutoff = 1e-4;
inline constexpr double kZNear = 0.05;            // meters
inline constexpr double kGuardBand = 1.3;         // centers beyond 1.3× the half field of view are culled
inline constexpr int kTileSize = 16;

struct ProjectedGaussian {
  Eigen::Vector2d mean2d;
  Eigen::Matrix2d cov2d;
  Eigen::Matrix2d conic;  // cov2d inverse
  double depth = 0.0;
  double opacity = 0.0;
  Eigen::Vector3d color;
  double radius = 0.0;    // 3σ of the major axis, pixels
};

struct RenderOutput {
  Image color;  // H×W×3
  Image alpha;  // H×W×1
  Image depth;  // H×W×1, alpha-normalized expected depth, 0 where nothing contributed
};

std::optional<ProjectedGaussian> project_primitive(const GaussianPrimitive& p,
                                                   const CameraPose& pose,
                                                   const CameraIntrinsics& intr);

// Opacity-weighted Gaussian falloff at pixel offset d; zero beyond the 3σ ellipse.
// Returns the unclamped product opacity·G, or a negative value if culled.
double splat_weight(const ProjectedGaussian& g, const Eigen::Vector2d& pixel);

// Tile-binned forward renderer: global depth sort (index tie-break), front-to-back
// compositing with early termination.
RenderOutput rasterize(const GaussianField& field, const CameraPose& pose,
                       const CameraIntrinsics& intr);

// Reference renderer: every projected Gaussian at every pixel, no tiles, no early stop.
RenderOutput brute_force_render(const GaussianField& field, const CameraPose& pose,
                                const CameraIntrinsics& intr);

// Compositing weight of every primitive covering pixel (x, y), front to back, by the oracle's rules.
std::vector<std::pair<int, double>> pixel_weights(const GaussianField& field, const CameraPose& pose,
                                                  const CameraIntrinsics& intr, int x, int y);

Image render_depth(const GaussianField& field, const CameraPose& pose,
                   const CameraIntrinsics& intr);

// Gradients of ⟨grad_color, rasterize(field).color⟩. Orientation gradients are with respect
// to the raw (w, x, y, z) coefficients, passing through the internal normalization.
struct PrimitiveGradient {
  Eigen::Vector3d position = Eigen::Vector3d::Zero();
  Eigen::Vector4d orientation = Eigen::Vector4d::Zero();  // w, x, y, z
  Eigen::Vector3d log_scale = Eigen::Vector3d::Zero();
  double opacity_logit = 0.0;
  Eigen::Vector3d color = Eigen::Vector3d::Zero();
};

struct FieldGradients {
  std::vector<PrimitiveGradient> primitives;
  // Per-primitive screen-space mean gradient norm, used by densification.
  std::vector<double> mean2d_norm;
  std::vector<bool> visible;
};

FieldGradients rasterize_backward(const GaussianField& field, const CameraPose& pose,
                                  const CameraIntrinsics& intr, const Image& grad_color);

}  // namespace freesim::raster
