#include <algorithm>
#include "freesim/synthetic.hpp"

#include <cmath>
#include <random>

#include "freesim/error.hpp"
#include "freesim/parallel.hpp"
#include "freesim/rasterizer.hpp"
#include "freesim/scene_io.hpp"

namespace freesim {

namespace {

// A center returns a LiDAR hit only where its primitive dominates the pixel it projects to.
constexpr double kReturnWeight = 0.5;

Eigen::Vector3d jitter_color(std::mt19937_64& rng, const Eigen::Vector3d& base, double amount) {
  std::uniform_real_distribution<double> u(-amount, amount);
  Eigen::Vector3d c = base;
  for (int k = 0; k < 3; ++k) c[k] = std::clamp(c[k] + u(rng), 0.02, 0.98);
  return c;
}

GaussianPrimitive make_primitive(std::mt19937_64& rng, const SynthConfig& cfg, double z_min, double z_max) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double hw = cfg.corridor_half_width;
  GaussianPrimitive p;
  const double opacity_draw = u(rng);
  p.opacity_logit = logit(0.95 + 0.04 * opacity_draw);  // surfaces are near-opaque
  const double z = z_min + (z_max - z_min) * u(rng);
  const double kind = u(rng);
  if (kind < 0.4) {
    // Wall panel, thin along x.
    const double side = u(rng) < 0.5 ? -1.0 : 1.0;
    p.position = {side * (hw + 0.1 * (u(rng) - 0.5)), cfg.ground_height - 3.0 * u(rng), z};
    p.log_scale = {std::log(0.04), std::log(0.3 + 0.4 * u(rng)), std::log(0.3 + 0.4 * u(rng))};
    const Eigen::Vector3d palette[] = {{0.75, 0.45, 0.3}, {0.85, 0.8, 0.65}, {0.4, 0.5, 0.35}};
    p.color = jitter_color(rng, palette[rng() % 3], 0.12);
  } else if (kind < 0.7) {
    // Ground patch, thin along y.
    p.position = {(2.0 * u(rng) - 1.0) * hw, cfg.ground_height + 0.02 * (u(rng) - 0.5), z};
    p.log_scale = {std::log(0.3 + 0.4 * u(rng)), std::log(0.03), std::log(0.3 + 0.4 * u(rng))};
    p.color = jitter_color(rng, {0.35, 0.35, 0.37}, 0.1);
    if (u(rng) < 0.2) p.color = jitter_color(rng, {0.9, 0.88, 0.7}, 0.05);  // lane paint
  } else {
    // Roadside object: compact blob between the trajectory and the walls.
    const double side = u(rng) < 0.5 ? -1.0 : 1.0;
    p.position = {side * (cfg.object_clearance + (hw - 0.5 - cfg.object_clearance) * u(rng)), cfg.ground_height - 0.3 - 1.2 * u(rng), z};
    for (int k = 0; k < 3; ++k) p.log_scale[k] = std::log(0.15 + 0.25 * u(rng));
    const Eigen::Vector3d palette[] = {{0.8, 0.15, 0.1}, {0.1, 0.3, 0.8}, {0.95, 0.75, 0.1}, {0.1, 0.6, 0.25}};
    p.color = jitter_color(rng, palette[rng() % 4], 0.08);
    p.opacity_logit = logit(0.7 + 0.28 * opacity_draw);
  }
  std::normal_distribution<double> n(0.0, 1.0);
  const Eigen::Vector3d axis(n(rng), n(rng), n(rng));
  const double angle = 0.3 * (u(rng) - 0.5);
  p.orientation = Eigen::Quaterniond(Eigen::AngleAxisd(angle, axis.normalized()));
  return p;
}

}  // namespace

void SynthConfig::validate() const {
  if (width < 8 || height < 8 || !(focal > 0) || !(frame_spacing > 0) || !(frame_interval > 0) ||
      !(corridor_half_width > 2.0) ||
      !(object_clearance >= 0 && object_clearance < corridor_half_width - 0.5) || !(lidar_jitter >= 0) || !(lidar_range > 0)) {
    throw Error(ErrorCode::InvalidConfig, "synthetic scene configuration out of range");
  }
}

Trajectory straight_trajectory(int n_frames, const SynthConfig& cfg) {
  Trajectory traj;
  traj.label = "synthetic_forward";
  for (int i = 0; i < n_frames; ++i) {
    Frame f;
    f.index = i;
    f.timestamp = i * cfg.frame_interval;
    f.pose.center = {0.0, 0.0, i * cfg.frame_spacing};
    f.intrinsics.fx = f.intrinsics.fy = cfg.focal;
    f.intrinsics.cx = (cfg.width - 1) / 2.0;
    f.intrinsics.cy = (cfg.height - 1) / 2.0;
    f.intrinsics.width = cfg.width;
    f.intrinsics.height = cfg.height;
    char stem[16];
    std::snprintf(stem, sizeof stem, "%04d", i);
    f.image_path = std::string("images/") + stem + ".png";
    f.lidar_path = std::string("lidar/") + stem + ".fsld";
    traj.frames.push_back(f);
  }
  return traj;
}

SceneDataset make_synthetic_scene(std::uint64_t seed, int n_gaussians, int n_frames, const SynthConfig& cfg) {
  if (n_gaussians < 1 || n_frames < 2) {
    throw Error(ErrorCode::InvalidConfig, "need at least 1 Gaussian and 2 frames");
  }
  cfg.validate();
  std::mt19937_64 rng(seed);

  SceneDataset scene;
  scene.trajectory = straight_trajectory(n_frames, cfg);
  const double z_max = (n_frames - 1) * cfg.frame_spacing + cfg.lookahead;

  GaussianField field;
  field.background = cfg.background;
  for (int i = 0; i < n_gaussians; ++i) field.primitives.push_back(make_primitive(rng, cfg, -1.0, z_max));
  // Store exactly what the checkpoint format can represent.
  field = decode_field(encode_field(field));
  for (auto& p : field.primitives) sanitize(p);

  struct PerFrame {
    Image image;
    LidarSweep sweep;
  };
  std::vector<PerFrame> rendered(scene.trajectory.size());
  std::vector<std::uint64_t> frame_seeds(scene.trajectory.size());
  for (auto& s : frame_seeds) s = rng();

  parallel_for(scene.trajectory.size(), [&](std::size_t fi) {
    const Frame& f = scene.trajectory.frames[fi];
    const auto out = raster::brute_force_render(field, f.pose, f.intrinsics);
    rendered[fi].image = quantize8(out.color);

    std::mt19937_64 frame_rng(frame_seeds[fi]);
    const double half = cfg.lidar_jitter * std::sqrt(3.0);
    std::uniform_real_distribution<double> jitter(-half, half);
    for (const auto& p : field.primitives) {
      const Eigen::Vector3d t = f.pose.to_camera(p.position);
      if (t.z() <= raster::kZNear || t.z() > cfg.lidar_range) continue;
      const long px = std::lround(f.intrinsics.fx * t.x() / t.z() + f.intrinsics.cx);
      const long py = std::lround(f.intrinsics.fy * t.y() / t.z() + f.intrinsics.cy);
      if (px < 0 || py < 0 || px >= f.intrinsics.width || py >= f.intrinsics.height) continue;
      const int x = static_cast<int>(px), y = static_cast<int>(py);
      if (out.alpha.at(x, y, 0) < kReturnWeight) continue;
      const auto weights = raster::pixel_weights(field, f.pose, f.intrinsics, x, y);
      const auto self = std::find_if(weights.begin(), weights.end(),
                                     [&](const auto& w) { return w.first == static_cast<int>(&p - field.primitives.data()); });
      if (self == weights.end() || self->second < kReturnWeight) continue;
      LidarPoint pt;
      pt.position = p.position + Eigen::Vector3d(jitter(frame_rng), jitter(frame_rng), jitter(frame_rng));
      rendered[fi].sweep.points.push_back(pt);
    }
    // Match the f32 sweep file exactly.
    rendered[fi].sweep = decode_sweep(encode_sweep(rendered[fi].sweep));
  });

  for (std::size_t fi = 0; fi < rendered.size(); ++fi) {
    const int index = scene.trajectory.frames[fi].index;
    scene.images.emplace(index, std::move(rendered[fi].image));
    scene.sweeps.emplace(index, std::move(rendered[fi].sweep));
  }
  scene.ground_truth_field = std::move(field);
  return scene;
}

}  // namespace freesim
