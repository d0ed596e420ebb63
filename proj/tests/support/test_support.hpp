#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <random>
#include <vector>

#include "freesim/image.hpp"
#include "freesim/rasterizer.hpp"
#include "freesim/scene.hpp"

namespace freesim::testing {

// Camera at the origin looking down +z.
CameraPose identity_pose();
CameraIntrinsics test_intrinsics(int size = 64, double focal = 60.0);

// Seeded field of `count` primitives placed inside the identity camera's frustum.
GaussianField random_field(std::uint64_t seed, int count, double max_opacity = 0.9);

Image random_image(std::uint64_t seed, int width, int height, int channels, double lo = -1.0,
                   double hi = 1.0);

double max_abs_diff(const Image& a, const Image& b);

// Scalar probe ⟨weights, rasterize(field).color⟩ in double precision.
double weighted_render(const GaussianField& field, const CameraPose& pose,
                       const CameraIntrinsics& intr, const Image& weights);

// Flat access to the 14 scalar parameters of one primitive:
// position[0..2], orientation w,x,y,z [3..6], log_scale [7..9], opacity_logit [10], color [11..13].
inline constexpr int kParamsPerPrimitive = 14;
double get_param(const GaussianPrimitive& p, int k);
void set_param(GaussianPrimitive& p, int k, double v);
double analytic_param(const raster::PrimitiveGradient& g, int k);

// Describes which branches of the piecewise renderer are active at every pixel: depth
// order, the 3σ cutoff, the opacity clamp, and the early-termination point. Two fields
// with equal signatures lie on the same smooth piece.
std::vector<std::int32_t> branch_signature(const GaussianField& field, const CameraPose& pose,
                                           const CameraIntrinsics& intr);

struct FdCheck {
  double analytic = 0.0;
  double numeric = 0.0;
  bool excluded = false;  // straddles a branch boundary
  double relative_error() const;
};

// Central finite difference with step h on parameter k of primitive i.
FdCheck finite_difference_check(const GaussianField& field, const CameraPose& pose,
                                const CameraIntrinsics& intr, const Image& weights,
                                const raster::FieldGradients& grads, int i, int k, double h = 1e-4);

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag);
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

// FNV-1a over a file's bytes, or over every regular file below a directory in path order.
std::uint64_t hash_file(const std::filesystem::path& path);
std::uint64_t hash_tree(const std::filesystem::path& root);

}  // namespace freesim::testing
