#include "freesim/scene.hpp"

#include <algorithm>
#include <cmath>

#include "freesim/error.hpp"

namespace freesim {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double logit(double p) { return std::log(p / (1.0 - p)); }

double GaussianPrimitive::opacity() const { return sigmoid(opacity_logit); }

bool GaussianPrimitive::operator==(const GaussianPrimitive& o) const {
  return position == o.position && orientation.coeffs() == o.orientation.coeffs() &&
         log_scale == o.log_scale && opacity_logit == o.opacity_logit && color == o.color;
}

bool GaussianField::operator==(const GaussianField& o) const {
  return primitives == o.primitives && background == o.background &&
         frame_of_reference == o.frame_of_reference;
}

void sanitize(GaussianPrimitive& p) {
  const double n = p.orientation.norm();
  if (n > 0 && std::isfinite(n)) {
    p.orientation.coeffs() /= n;
  } else {
    p.orientation = Eigen::Quaterniond::Identity();
  }
  const double lo = std::log(kMinScale), hi = std::log(kMaxScale);
  for (int k = 0; k < 3; ++k) p.log_scale[k] = std::clamp(p.log_scale[k], lo, hi);
}

CameraIntrinsics CameraIntrinsics::scaled(double factor) const {
  CameraIntrinsics out;
  out.width = std::max(1, static_cast<int>(std::lround(width * factor)));
  out.height = std::max(1, static_cast<int>(std::lround(height * factor)));
  const double sx = static_cast<double>(out.width) / width;
  const double sy = static_cast<double>(out.height) / height;
  out.fx = fx * sx;
  out.fy = fy * sy;
  // Pixel centers sit at integer coordinates, so the continuous edge is at -0.5.
  out.cx = (cx + 0.5) * sx - 0.5;
  out.cy = (cy + 0.5) * sy - 0.5;
  return out;
}

void CameraIntrinsics::validate() const {
  if (!(fx > 0 && fy > 0) || width <= 0 || height <= 0 || !(cx >= 0 && cx < width) ||
      !(cy >= 0 && cy < height)) {
    throw Error(ErrorCode::InvalidConfig, "invalid camera intrinsics");
  }
}

bool CameraPose::operator==(const CameraPose& o) const {
  return rotation.coeffs() == o.rotation.coeffs() && center == o.center;
}

const Image& SceneDataset::image(int frame_index) const {
  auto it = images.find(frame_index);
  if (it == images.end()) {
    throw Error(ErrorCode::MissingFile, "no image for frame " + std::to_string(frame_index));
  }
  return it->second;
}

const LidarSweep* SceneDataset::sweep(int frame_index) const {
  auto it = sweeps.find(frame_index);
  return it == sweeps.end() ? nullptr : &it->second;
}

}  // namespace freesim
