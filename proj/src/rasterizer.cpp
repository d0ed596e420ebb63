#include "freesim/rasterizer.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

#include "freesim/error.hpp"
#include "freesim/parallel.hpp"

namespace freesim::raster {

namespace {

constexpr double kCullMahalanobis2 = kCullSigma * kCullSigma;

struct Splat {
  ProjectedGaussian g;
  int index = 0;
  int x0 = 0, x1 = -1, y0 = 0, y1 = -1;  // inclusive pixel bounds inside the image
};

Eigen::Matrix<double, 2, 3> jacobian(const Eigen::Vector3d& t, const CameraIntrinsics& intr) {
  const double z = t.z(), z2 = z * z;
  Eigen::Matrix<double, 2, 3> j;
  j << intr.fx / z, 0.0, -intr.fx * t.x() / z2, 0.0, intr.fy / z, -intr.fy * t.y() / z2;
  return j;
}

Eigen::Matrix3d world_covariance(const GaussianPrimitive& p) {
  const Eigen::Matrix3d r = p.orientation.normalized().toRotationMatrix();
  const Eigen::Vector3d s2 = (2.0 * p.log_scale).array().exp();
  return r * s2.asDiagonal() * r.transpose();
}

void check_finite(const GaussianField& field, const CameraPose& pose, const CameraIntrinsics& intr) {
  auto bad = [] { throw Error(ErrorCode::NonFiniteParameter, "NaN/Inf in render inputs"); };
  if (!field.background.allFinite() || !pose.center.allFinite() || !pose.rotation.coeffs().allFinite()) bad();
  if (!std::isfinite(intr.fx) || !std::isfinite(intr.fy) || !std::isfinite(intr.cx) || !std::isfinite(intr.cy)) bad();
  for (const auto& p : field.primitives) {
    if (!p.position.allFinite() || !p.orientation.coeffs().allFinite() || !p.log_scale.allFinite() ||
        !std::isfinite(p.opacity_logit) || !p.color.allFinite()) {
      bad();
    }
  }
}

// Projects, culls against the image, and sorts by (depth, index).
std::vector<Splat> prepare_splats(const GaussianField& field, const CameraPose& pose,
                                  const CameraIntrinsics& intr) {
  std::vector<std::optional<Splat>> slots(field.size());
  parallel_for(field.size(), [&](std::size_t i) {
    auto g = project_primitive(field.primitives[i], pose, intr);
    if (!g) return;
    Splat s;
    s.g = *g;
    s.index = static_cast<int>(i);
    const double r = g->radius * (1.0 + 1e-9);
    s.x0 = std::max(0, static_cast<int>(std::ceil(g->mean2d.x() - r)));
    s.x1 = std::min(intr.width - 1, static_cast<int>(std::floor(g->mean2d.x() + r)));
    s.y0 = std::max(0, static_cast<int>(std::ceil(g->mean2d.y() - r)));
    s.y1 = std::min(intr.height - 1, static_cast<int>(std::floor(g->mean2d.y() + r)));
    if (s.x0 > s.x1 || s.y0 > s.y1) return;
    slots[i] = s;
  });
  std::vector<Splat> splats;
  for (auto& s : slots) {
    if (s) splats.push_back(std::move(*s));
  }
  std::sort(splats.begin(), splats.end(), [](const Splat& a, const Splat& b) {
    return a.g.depth < b.g.depth || (a.g.depth == b.g.depth && a.index < b.index);
  });
  return splats;
}

struct TileGrid {
  int tiles_x = 0, tiles_y = 0;
  std::vector<std::vector<int>> lists;  // per tile, positions into the sorted splat array

  std::size_t count() const { return lists.size(); }
};

TileGrid bin_splats(const std::vector<Splat>& splats, const CameraIntrinsics& intr) {
  TileGrid grid;
  grid.tiles_x = (intr.width + kTileSize - 1) / kTileSize;
  grid.tiles_y = (intr.height + kTileSize - 1) / kTileSize;
  grid.lists.resize(static_cast<std::size_t>(grid.tiles_x) * grid.tiles_y);
  for (std::size_t k = 0; k < splats.size(); ++k) {
    const auto& s = splats[k];
    for (int ty = s.y0 / kTileSize; ty <= s.y1 / kTileSize; ++ty) {
      for (int tx = s.x0 / kTileSize; tx <= s.x1 / kTileSize; ++tx) {
        grid.lists[static_cast<std::size_t>(ty) * grid.tiles_x + tx].push_back(static_cast<int>(k));
      }
    }
  }
  return grid;
}

bool inside(const Splat& s, int x, int y) { return x >= s.x0 && x <= s.x1 && y >= s.y0 && y <= s.y1; }

RenderOutput blank_output(const CameraIntrinsics& intr, const Eigen::Vector3d& background) {
  RenderOutput out{Image(intr.width, intr.height, 3), Image(intr.width, intr.height, 1),
                   Image(intr.width, intr.height, 1)};
  for (int y = 0; y < intr.height; ++y)
    for (int x = 0; x < intr.width; ++x)
      for (int c = 0; c < 3; ++c) out.color.at(x, y, c) = background[c];
  return out;
}

// One pixel's front-to-back contribution record, replayed by the backward pass.
struct Contribution {
  int slot = 0;          // position in the tile list
  double alpha = 0.0;
  double raw = 0.0;      // opacity·G before clamping
  double transmittance = 0.0;  // before this contribution
};

}  // namespace

std::optional<ProjectedGaussian> project_primitive(const GaussianPrimitive& p, const CameraPose& pose,
                                                   const CameraIntrinsics& intr) {
  const Eigen::Matrix3d w = pose.world_to_camera();
  const Eigen::Vector3d t = w * (p.position - pose.center);
  if (!(t.z() > kZNear)) return std::nullopt;
  // Far outside the frustum the affine approximation smears a splat across the whole image.
  const double lim_x = kGuardBand * std::max(intr.cx + 0.5, intr.width - 0.5 - intr.cx) / intr.fx;
  const double lim_y = kGuardBand * std::max(intr.cy + 0.5, intr.height - 0.5 - intr.cy) / intr.fy;
  if (std::abs(t.x() / t.z()) > lim_x || std::abs(t.y() / t.z()) > lim_y) return std::nullopt;

  ProjectedGaussian g;
  g.mean2d = {intr.fx * t.x() / t.z() + intr.cx, intr.fy * t.y() / t.z() + intr.cy};
  const Eigen::Matrix<double, 2, 3> tj = jacobian(t, intr) * w;
  g.cov2d = tj * world_covariance(p) * tj.transpose();
  g.cov2d(0, 1) = g.cov2d(1, 0) = 0.5 * (g.cov2d(0, 1) + g.cov2d(1, 0));
  g.cov2d.diagonal().array() += kCovFloor;
  g.conic = g.cov2d.inverse();
  const double a = g.cov2d(0, 0), b = g.cov2d(0, 1), c = g.cov2d(1, 1);
  const double mid = 0.5 * (a + c);
  const double lambda_max = mid + std::sqrt(std::max(0.0, 0.25 * (a - c) * (a - c) + b * b));
  g.radius = kCullSigma * std::sqrt(lambda_max);
  g.depth = t.z();
  g.opacity = p.opacity();
  g.color = p.color;
  return g;
}

double splat_weight(const ProjectedGaussian& g, const Eigen::Vector2d& pixel) {
  const Eigen::Vector2d d = pixel - g.mean2d;
  const double power = d.dot(g.conic * d);
  if (power > kCullMahalanobis2) return -1.0;
  return g.opacity * std::exp(-0.5 * power);
}

RenderOutput rasterize(const GaussianField& field, const CameraPose& pose, const CameraIntrinsics& intr) {
  check_finite(field, pose, intr);
  RenderOutput out = blank_output(intr, field.background);
  const auto splats = prepare_splats(field, pose, intr);
  const auto grid = bin_splats(splats, intr);

  parallel_for(grid.count(), [&](std::size_t tile) {
    const int tx = static_cast<int>(tile) % grid.tiles_x, ty = static_cast<int>(tile) / grid.tiles_x;
    const auto& list = grid.lists[tile];
    for (int y = ty * kTileSize; y < std::min(intr.height, (ty + 1) * kTileSize); ++y) {
      for (int x = tx * kTileSize; x < std::min(intr.width, (tx + 1) * kTileSize); ++x) {
        const Eigen::Vector2d pixel(x, y);
        Eigen::Vector3d color = Eigen::Vector3d::Zero();
        double depth = 0.0, transmittance = 1.0;
        bool any = false;
        for (int k : list) {
          const Splat& s = splats[k];
          if (!inside(s, x, y)) continue;
          const double raw = splat_weight(s.g, pixel);
          if (raw < 0.0) continue;
          const double alpha = std::min(kAlphaClamp, raw);
          const double w = alpha * transmittance;
          color += w * s.g.color;
          depth += w * s.g.depth;
          any = true;
          transmittance *= 1.0 - alpha;
          if (transmittance < kTransmittanceCutoff) break;
        }
        const double a = 1.0 - transmittance;
        for (int c = 0; c < 3; ++c) out.color.at(x, y, c) = color[c] + transmittance * field.background[c];
        out.alpha.at(x, y, 0) = a;
        out.depth.at(x, y, 0) = any && a > 0.0 ? depth / a : 0.0;
      }
    }
  });
  return out;
}

RenderOutput brute_force_render(const GaussianField& field, const CameraPose& pose,
                                const CameraIntrinsics& intr) {
  RenderOutput out = blank_output(intr, field.background);
  struct Entry {
    ProjectedGaussian g;
    int index;
  };
  std::vector<Entry> entries;
  for (std::size_t i = 0; i < field.size(); ++i) {
    if (auto g = project_primitive(field.primitives[i], pose, intr)) {
      entries.push_back({*g, static_cast<int>(i)});
    }
  }
  std::stable_sort(entries.begin(), entries.end(),
                   [](const Entry& a, const Entry& b) { return a.g.depth < b.g.depth; });

  for (int y = 0; y < intr.height; ++y) {
    for (int x = 0; x < intr.width; ++x) {
      Eigen::Vector3d color = Eigen::Vector3d::Zero();
      double depth = 0.0, transmittance = 1.0;
      bool any = false;
      for (const auto& e : entries) {
        const double raw = splat_weight(e.g, Eigen::Vector2d(x, y));
        if (raw < 0.0) continue;
        const double alpha = std::min(kAlphaClamp, raw);
        color += alpha * transmittance * e.g.color;
        depth += alpha * transmittance * e.g.depth;
        transmittance *= 1.0 - alpha;
        any = true;
      }
      const double a = 1.0 - transmittance;
      for (int c = 0; c < 3; ++c) out.color.at(x, y, c) = color[c] + transmittance * field.background[c];
      out.alpha.at(x, y, 0) = a;
      out.depth.at(x, y, 0) = any && a > 0.0 ? depth / a : 0.0;
    }
  }
  return out;
}

std::vector<std::pair<int, double>> pixel_weights(const GaussianField& field, const CameraPose& pose,
                                                  const CameraIntrinsics& intr, int x, int y) {
  std::vector<std::pair<double, int>> hits;  // (depth, index)
  std::vector<double> raw(field.size(), -1.0);
  for (std::size_t i = 0; i < field.size(); ++i) {
    if (auto g = project_primitive(field.primitives[i], pose, intr)) {
      raw[i] = splat_weight(*g, Eigen::Vector2d(x, y));
      if (raw[i] >= 0.0) hits.emplace_back(g->depth, static_cast<int>(i));
    }
  }
  std::stable_sort(hits.begin(), hits.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<std::pair<int, double>> out;
  double transmittance = 1.0;
  for (const auto& [depth, i] : hits) {
    const double alpha = std::min(kAlphaClamp, raw[i]);
    out.emplace_back(i, alpha * transmittance);
    transmittance *= 1.0 - alpha;
  }
  return out;
}

Image render_depth(const GaussianField& field, const CameraPose& pose, const CameraIntrinsics& intr) {
  return rasterize(field, pose, intr).depth;
}

namespace {

struct ScreenGrad {
  Eigen::Vector2d mean = Eigen::Vector2d::Zero();
  Eigen::Matrix2d conic = Eigen::Matrix2d::Zero();
  double opacity = 0.0;
  Eigen::Vector3d color = Eigen::Vector3d::Zero();

  ScreenGrad& operator+=(const ScreenGrad& o) {
    mean += o.mean;
    conic += o.conic;
    opacity += o.opacity;
    color += o.color;
    return *this;
  }
};

// d R(q) / d q_k for a unit quaternion q = (w, x, y, z).
std::array<Eigen::Matrix3d, 4> rotation_derivatives(double w, double x, double y, double z) {
  std::array<Eigen::Matrix3d, 4> d;
  d[0] << 0, -2 * z, 2 * y, 2 * z, 0, -2 * x, -2 * y, 2 * x, 0;
  d[1] << 0, 2 * y, 2 * z, 2 * y, -4 * x, -2 * w, 2 * z, 2 * w, -4 * x;
  d[2] << -4 * y, 2 * x, 2 * w, 2 * x, 0, 2 * z, -2 * w, 2 * z, -4 * y;
  d[3] << -4 * z, -2 * w, 2 * x, 2 * w, -4 * z, 2 * y, 2 * x, 2 * y, 0;
  return d;
}

PrimitiveGradient chain_to_primitive(const GaussianPrimitive& p, const ProjectedGaussian& g,
                                     const ScreenGrad& sg, const CameraPose& pose,
                                     const CameraIntrinsics& intr) {
  PrimitiveGradient out;
  out.color = sg.color;
  const double o = g.opacity;
  out.opacity_logit = sg.opacity * o * (1.0 - o);

  const Eigen::Matrix3d w = pose.world_to_camera();
  const Eigen::Vector3d t = w * (p.position - pose.center);
  const double z = t.z(), z2 = z * z, z3 = z2 * z;
  const Eigen::Matrix<double, 2, 3> j = jacobian(t, intr);
  const Eigen::Matrix<double, 2, 3> tj = j * w;

  const Eigen::Quaterniond qn = p.orientation.normalized();
  const Eigen::Matrix3d r = qn.toRotationMatrix();
  const Eigen::Vector3d s = p.log_scale.array().exp();
  const Eigen::Matrix3d m = r * s.asDiagonal();
  const Eigen::Matrix3d sigma_w = m * m.transpose();

  const Eigen::Matrix2d d_cov = -g.conic * sg.conic * g.conic;
  const Eigen::Matrix3d d_sigma_w = tj.transpose() * d_cov * tj;
  const Eigen::Matrix<double, 2, 3> d_tj = 2.0 * d_cov * tj * sigma_w;
  const Eigen::Matrix<double, 2, 3> d_j = d_tj * w.transpose();

  Eigen::Vector3d d_t = Eigen::Vector3d::Zero();
  d_t.x() += sg.mean.x() * intr.fx / z;
  d_t.y() += sg.mean.y() * intr.fy / z;
  d_t.z() += -sg.mean.x() * intr.fx * t.x() / z2 - sg.mean.y() * intr.fy * t.y() / z2;
  d_t.x() += d_j(0, 2) * (-intr.fx / z2);
  d_t.y() += d_j(1, 2) * (-intr.fy / z2);
  d_t.z() += d_j(0, 0) * (-intr.fx / z2) + d_j(0, 2) * (2.0 * intr.fx * t.x() / z3) +
             d_j(1, 1) * (-intr.fy / z2) + d_j(1, 2) * (2.0 * intr.fy * t.y() / z3);
  out.position = w.transpose() * d_t;

  const Eigen::Matrix3d d_m = 2.0 * d_sigma_w * m;
  for (int k = 0; k < 3; ++k) out.log_scale[k] = r.col(k).dot(d_m.col(k)) * s[k];
  const Eigen::Matrix3d d_r = d_m * s.asDiagonal();
  const auto dr = rotation_derivatives(qn.w(), qn.x(), qn.y(), qn.z());
  Eigen::Vector4d d_qn;
  for (int k = 0; k < 4; ++k) d_qn[k] = (d_r.array() * dr[k].array()).sum();
  const Eigen::Vector4d qv(qn.w(), qn.x(), qn.y(), qn.z());
  out.orientation = (d_qn - qv * qv.dot(d_qn)) / p.orientation.norm();
  return out;
}

}  // namespace

FieldGradients rasterize_backward(const GaussianField& field, const CameraPose& pose,
                                  const CameraIntrinsics& intr, const Image& grad_color) {
  check_finite(field, pose, intr);
  if (grad_color.width() != intr.width || grad_color.height() != intr.height || grad_color.channels() != 3) {
    throw Error(ErrorCode::DimensionMismatch, "grad_color shape");
  }
  for (double v : grad_color.data()) {
    if (!std::isfinite(v)) throw Error(ErrorCode::NonFiniteParameter, "grad_color");
  }

  FieldGradients result;
  result.primitives.assign(field.size(), PrimitiveGradient{});
  result.mean2d_norm.assign(field.size(), 0.0);
  result.visible.assign(field.size(), false);

  const auto splats = prepare_splats(field, pose, intr);
  const auto grid = bin_splats(splats, intr);
  std::vector<std::vector<ScreenGrad>> tile_grads(grid.count());

  parallel_for(grid.count(), [&](std::size_t tile) {
    const int tx = static_cast<int>(tile) % grid.tiles_x, ty = static_cast<int>(tile) / grid.tiles_x;
    const auto& list = grid.lists[tile];
    auto& local = tile_grads[tile];
    local.assign(list.size(), ScreenGrad{});
    std::vector<Contribution> contribs;
    for (int y = ty * kTileSize; y < std::min(intr.height, (ty + 1) * kTileSize); ++y) {
      for (int x = tx * kTileSize; x < std::min(intr.width, (tx + 1) * kTileSize); ++x) {
        const Eigen::Vector2d pixel(x, y);
        contribs.clear();
        double transmittance = 1.0;
        for (std::size_t slot = 0; slot < list.size(); ++slot) {
          const Splat& s = splats[list[slot]];
          if (!inside(s, x, y)) continue;
          const double raw = splat_weight(s.g, pixel);
          if (raw < 0.0) continue;
          const double alpha = std::min(kAlphaClamp, raw);
          contribs.push_back({static_cast<int>(slot), alpha, raw, transmittance});
          transmittance *= 1.0 - alpha;
          if (transmittance < kTransmittanceCutoff) break;
        }
        if (contribs.empty()) continue;

        const Eigen::Vector3d g(grad_color.at(x, y, 0), grad_color.at(x, y, 1), grad_color.at(x, y, 2));
        // Color accumulated behind the current contribution, background included.
        Eigen::Vector3d behind = transmittance * field.background;
        for (auto it = contribs.rbegin(); it != contribs.rend(); ++it) {
          const Splat& s = splats[list[it->slot]];
          ScreenGrad& sg = local[it->slot];
          const double w = it->alpha * it->transmittance;
          sg.color += w * g;
          const double d_alpha = g.dot(s.g.color * it->transmittance - behind / (1.0 - it->alpha));
          behind += w * s.g.color;
          if (it->raw >= kAlphaClamp) continue;
          const double gauss = it->raw / s.g.opacity;
          sg.opacity += d_alpha * gauss;
          const double d_power = d_alpha * s.g.opacity * gauss * -0.5;
          const Eigen::Vector2d d = pixel - s.g.mean2d;
          sg.conic += d_power * d * d.transpose();
          sg.mean += d_power * -2.0 * (s.g.conic * d);
        }
      }
    }
  });

  std::vector<ScreenGrad> totals(splats.size());
  for (std::size_t tile = 0; tile < grid.count(); ++tile) {
    const auto& list = grid.lists[tile];
    for (std::size_t slot = 0; slot < list.size(); ++slot) totals[list[slot]] += tile_grads[tile][slot];
  }

  parallel_for(splats.size(), [&](std::size_t k) {
    const Splat& s = splats[k];
    result.primitives[s.index] = chain_to_primitive(field.primitives[s.index], s.g, totals[k], pose, intr);
    result.mean2d_norm[s.index] = totals[k].mean.norm();
    result.visible[s.index] = true;
  });
  return result;
}

}  // namespace freesim::raster
