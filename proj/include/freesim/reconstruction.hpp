#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "freesim/image.hpp"
#include "freesim/scene.hpp"

namespace freesim::recon {

struct OptimConfig {
  int iterations = 1000;
  // Position rate is multiplied by scene_extent; the others are absolute.
  double lr_position = 1.6e-4;
  double lr_logscale = 5e-3;
  double lr_quat = 1e-3;
  double lr_opacity = 5e-2;
  double lr_color = 2.5e-3;
  double scene_extent = 1.0;
  double lambda_ssim = 0.2;
  int densify_interval = 100;     // 0 disables densification and pruning
  int densify_until = -1;         // last iteration that may densify; -1 means iterations / 2
  double densify_grad_threshold = 2e-4;
  double prune_opacity_threshold = 0.005;
  int max_gaussians = 20000;
  double image_scale = 1.0;

  // Piece-wise preset: 1k iterations, every rate ×3, half-resolution images.
  static OptimConfig piecewise();
  OptimConfig scaled_rates(double factor) const;
  void validate() const;
};

struct TrainView {
  Frame frame;
  Image target;
  double weight = 1.0;
};

struct LossResult {
  double loss = 0.0;
  Image grad;
};

// (1−λ)·L1 + λ·(1−SSIM) and its gradient with respect to `rendered`.
LossResult compute_loss(const Image& rendered, const Image& target, double lambda_ssim);

struct OptimResult {
  GaussianField field;
  std::vector<double> losses;  // per iteration, before the update
  int iterations = 0;          // completed, fewer than configured when stopped early
  double seconds = 0.0;
  int clones = 0;
  int prunes = 0;
};

// Adam (β1 0.9, β2 0.999, ε 1e-15) over per-attribute rates, one view per step in
// seeded shuffled order, clone-only densification and opacity pruning. Deterministic per seed.
// Called after every `interval` iterations with the number completed; returning false stops early.
// Time spent inside the callback is excluded from OptimResult::seconds.
struct Progress {
  int interval = 100;
  std::function<bool(int, const GaussianField&)> callback;
};

OptimResult optimize(const GaussianField& init, const std::vector<TrainView>& views, const OptimConfig& cfg,
                     std::uint64_t seed, const Progress& progress = {});

// Radius of the camera-center bounding sphere, ×1.1, floored at 1 m.
double camera_extent(const std::vector<Frame>& frames);

// Mean PSNR of renders of `field` against every view target at the view's resolution.
double mean_psnr(const GaussianField& field, const std::vector<TrainView>& views);

struct Segment {
  int start = 0;    // trajectory positions, half-open
  int end = 0;
  int holdout = 0;  // trailing frames excluded from training

  int train_end() const { return end - holdout; }
  bool operator==(const Segment&) const = default;
};

struct SegmentPlan {
  std::vector<Segment> segments;
};

SegmentPlan segment_trajectory(const Trajectory& traj, int segment_len, int holdout, int min_tail);

struct InitConfig {
  double scale = 0.05;     // isotropic, meters
  double opacity = 0.5;
  double voxel = 0.05;     // merge LiDAR points closer than this
  int max_count = 0;       // 0 = keep every merged point
  bool occlusion_test = false;
};

// Field seeded from the colorized LiDAR sweeps of the given trajectory positions.
GaussianField init_from_lidar(const SceneDataset& scene, const std::vector<int>& positions,
                              const InitConfig& cfg, std::uint64_t seed);

// Views for the given trajectory positions, targets resampled by image_scale.
std::vector<TrainView> make_views(const SceneDataset& scene, const std::vector<int>& positions,
                                  double image_scale = 1.0);

struct SegmentReport {
  Segment segment;
  int iterations = 0;
  double seconds = 0.0;
  double final_loss = 0.0;
  double train_psnr = 0.0;
  std::vector<int> train_frames;  // frame indices used for fitting
};

struct SegmentResult {
  SegmentReport report;
  GaussianField field;
};

// One independent field per segment, fitted only on that segment's non-held-out frames.
std::vector<SegmentResult> reconstruct_piecewise(const SceneDataset& scene, const SegmentPlan& plan,
                                                 const OptimConfig& cfg, std::uint64_t seed,
                                                 const InitConfig& init = {});

}  // namespace freesim::recon
