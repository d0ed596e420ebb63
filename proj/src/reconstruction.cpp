#include "freesim/reconstruction.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <unordered_map>

#include "freesim/datagen.hpp"
#include "freesim/error.hpp"
#include "freesim/metrics.hpp"
#include "freesim/parallel.hpp"
#include "freesim/rasterizer.hpp"

namespace freesim::recon {

OptimConfig OptimConfig::piecewise() {
  OptimConfig cfg = OptimConfig{}.scaled_rates(3.0);
  cfg.iterations = 1000;
  cfg.image_scale = 0.5;
  return cfg;
}

OptimConfig OptimConfig::scaled_rates(double factor) const {
  OptimConfig cfg = *this;
  cfg.lr_position *= factor;
  cfg.lr_logscale *= factor;
  cfg.lr_quat *= factor;
  cfg.lr_opacity *= factor;
  cfg.lr_color *= factor;
  return cfg;
}

void OptimConfig::validate() const {
  const bool ok = iterations >= 1 && lr_position >= 0 && lr_logscale >= 0 && lr_quat >= 0 &&
                  lr_opacity >= 0 && lr_color >= 0 && scene_extent > 0 && lambda_ssim >= 0 &&
                  lambda_ssim <= 1 && densify_interval >= 0 && max_gaussians >= 1 && image_scale > 0 &&
                  image_scale <= 1 && prune_opacity_threshold >= 0 && prune_opacity_threshold < 1;
  if (!ok) throw Error(ErrorCode::InvalidConfig, "optimizer configuration out of range");
}

LossResult compute_loss(const Image& rendered, const Image& target, double lambda_ssim) {
  require_same_shape(rendered, target, "compute_loss");
  LossResult out;
  out.grad = Image(rendered.width(), rendered.height(), rendered.channels());
  const double n = static_cast<double>(rendered.size());
  double l1 = 0.0;
  for (std::size_t i = 0; i < rendered.size(); ++i) {
    const double d = rendered.data()[i] - target.data()[i];
    l1 += std::abs(d);
    out.grad.data()[i] = (1.0 - lambda_ssim) * ((d > 0) - (d < 0)) / n;
  }
  out.loss = (1.0 - lambda_ssim) * l1 / n;
  if (lambda_ssim > 0.0) {
    const auto s = metrics::ssim_with_gradient(rendered, target);
    out.loss += lambda_ssim * (1.0 - s.value);
    for (std::size_t i = 0; i < rendered.size(); ++i) out.grad.data()[i] -= lambda_ssim * s.grad_a.data()[i];
  }
  return out;
}

double camera_extent(const std::vector<Frame>& frames) {
  if (frames.empty()) return 1.0;
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  for (const auto& f : frames) center += f.pose.center;
  center /= static_cast<double>(frames.size());
  double radius = 0.0;
  for (const auto& f : frames) radius = std::max(radius, (f.pose.center - center).norm());
  return std::max(1.0, 1.1 * radius);
}

double mean_psnr(const GaussianField& field, const std::vector<TrainView>& views) {
  if (views.empty()) return 0.0;
  std::vector<double> scores(views.size());
  for (std::size_t i = 0; i < views.size(); ++i) {
    const auto& v = views[i];
    const auto out = raster::rasterize(field, v.frame.pose, v.frame.intrinsics);
    scores[i] = metrics::psnr(clamp01(out.color), v.target);
  }
  return std::accumulate(scores.begin(), scores.end(), 0.0) / static_cast<double>(scores.size());
}

namespace {

constexpr int kParams = 14;
// Starting opacity of a clone; small so densification barely disturbs the current render.
constexpr double kCloneOpacity = 0.02;
using ParamBlock = std::array<double, kParams>;

// position[0..2] quat wxyz[3..6] log_scale[7..9] opacity[10] color[11..13]
ParamBlock flatten(const raster::PrimitiveGradient& g) {
  return {g.position[0], g.position[1], g.position[2], g.orientation[0], g.orientation[1],
          g.orientation[2], g.orientation[3], g.log_scale[0], g.log_scale[1], g.log_scale[2],
          g.opacity_logit, g.color[0], g.color[1], g.color[2]};
}

void apply_step(GaussianPrimitive& p, const ParamBlock& step) {
  p.position -= Eigen::Vector3d(step[0], step[1], step[2]);
  p.orientation.w() -= step[3];
  p.orientation.x() -= step[4];
  p.orientation.y() -= step[5];
  p.orientation.z() -= step[6];
  p.log_scale -= Eigen::Vector3d(step[7], step[8], step[9]);
  p.opacity_logit -= step[10];
  p.color -= Eigen::Vector3d(step[11], step[12], step[13]);
  p.color = p.color.cwiseMax(0.0).cwiseMin(1.0);
  sanitize(p);
}

struct AdamState {
  std::vector<ParamBlock> m, v;
  long step = 0;

  void resize(std::size_t n) {
    m.resize(n, ParamBlock{});
    v.resize(n, ParamBlock{});
  }
};

// Keeps primitive-indexed optimizer state aligned with the field across clone/prune.
struct Aligned {
  AdamState adam;
  std::vector<double> grad_accum;
  std::vector<int> visible_count;

  void resize(std::size_t n) {
    adam.resize(n);
    grad_accum.resize(n, 0.0);
    visible_count.resize(n, 0);
  }
};

std::pair<int, int> densify_and_prune(GaussianField& field, Aligned& state, const OptimConfig& cfg) {
  const std::size_t n = field.size();
  std::vector<std::pair<double, std::size_t>> candidates;
  for (std::size_t i = 0; i < n; ++i) {
    if (state.visible_count[i] == 0) continue;
    const double avg = state.grad_accum[i] / state.visible_count[i];
    if (avg > cfg.densify_grad_threshold) candidates.emplace_back(avg, i);
  }
  std::sort(candidates.begin(), candidates.end(),
            [](const auto& a, const auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); });

  std::vector<bool> keep(n, true);
  int prunes = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (field.primitives[i].opacity() < cfg.prune_opacity_threshold) {
      keep[i] = false;
      ++prunes;
    }
  }
  GaussianField next;
  next.background = field.background;
  next.frame_of_reference = field.frame_of_reference;
  Aligned next_state;
  next_state.adam.step = state.adam.step;
  for (std::size_t i = 0; i < n; ++i) {
    if (!keep[i]) continue;
    next.primitives.push_back(field.primitives[i]);
    next_state.adam.m.push_back(state.adam.m[i]);
    next_state.adam.v.push_back(state.adam.v[i]);
  }
  std::vector<std::size_t> remap(n, SIZE_MAX);
  for (std::size_t i = 0, j = 0; i < n; ++i) {
    if (keep[i]) remap[i] = j++;
  }
  int clones = 0;
  for (const auto& [score, i] : candidates) {
    if (static_cast<int>(next.size()) >= cfg.max_gaussians) break;
    if (!keep[i]) continue;
    // Split opacity so the coincident pair matches the original alpha at its center.
    GaussianPrimitive& original = next.primitives[remap[i]];
    const double o = original.opacity();
    const double oc = std::min(kCloneOpacity, 0.5 * o);
    GaussianPrimitive copy = original;
    copy.opacity_logit = logit(oc);
    original.opacity_logit = logit(1.0 - (1.0 - o) / (1.0 - oc));
    next.primitives.push_back(copy);
    next_state.adam.m.push_back(ParamBlock{});
    next_state.adam.v.push_back(ParamBlock{});
    ++clones;
  }
  next_state.grad_accum.assign(next.size(), 0.0);
  next_state.visible_count.assign(next.size(), 0);
  field = std::move(next);
  state = std::move(next_state);
  return {clones, prunes};
}

}  // namespace

OptimResult optimize(const GaussianField& init, const std::vector<TrainView>& views, const OptimConfig& cfg,
                     std::uint64_t seed, const Progress& progress) {
  cfg.validate();
  if (views.empty()) throw Error(ErrorCode::EmptyDataset, "optimize needs at least one view");
  const auto t0 = std::chrono::steady_clock::now();

  // Resample targets once.
  std::vector<TrainView> scaled;
  scaled.reserve(views.size());
  for (const auto& v : views) {
    TrainView s = v;
    if (cfg.image_scale != 1.0) {
      s.frame.intrinsics = v.frame.intrinsics.scaled(cfg.image_scale);
      s.target = resize(v.target, s.frame.intrinsics.width, s.frame.intrinsics.height);
    }
    if (s.target.width() != s.frame.intrinsics.width || s.target.height() != s.frame.intrinsics.height) {
      throw Error(ErrorCode::DimensionMismatch, "view target does not match intrinsics");
    }
    scaled.push_back(std::move(s));
  }

  OptimResult result;
  result.field = init;
  for (auto& p : result.field.primitives) sanitize(p);
  Aligned state;
  state.resize(result.field.size());

  const double lr_pos = cfg.lr_position * cfg.scene_extent;
  const ParamBlock rates = {lr_pos, lr_pos, lr_pos, cfg.lr_quat, cfg.lr_quat, cfg.lr_quat, cfg.lr_quat,
                            cfg.lr_logscale, cfg.lr_logscale, cfg.lr_logscale, cfg.lr_opacity,
                            cfg.lr_color, cfg.lr_color, cfg.lr_color};
  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-15;
  const int densify_until = cfg.densify_until < 0 ? cfg.iterations / 2 : cfg.densify_until;

  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(scaled.size());
  std::size_t cursor = order.size();
  result.losses.reserve(cfg.iterations);
  double paused = 0.0;
  int completed = 0;

  for (int it = 0; it < cfg.iterations; ++it) {
    if (cursor == order.size()) {
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    const TrainView& view = scaled[order[cursor++]];
    const auto rendered = raster::rasterize(result.field, view.frame.pose, view.frame.intrinsics);
    auto loss = compute_loss(rendered.color, view.target, cfg.lambda_ssim);
    if (!std::isfinite(loss.loss)) {
      throw Error(ErrorCode::NonFiniteLoss, "loss is not finite at iteration " + std::to_string(it));
    }
    result.losses.push_back(loss.loss * view.weight);
    if (view.weight != 1.0) {
      for (double& g : loss.grad.data()) g *= view.weight;
    }
    const auto grads = raster::rasterize_backward(result.field, view.frame.pose, view.frame.intrinsics, loss.grad);

    ++state.adam.step;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.adam.step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.adam.step));
    parallel_for(result.field.size(), [&](std::size_t i) {
      const ParamBlock g = flatten(grads.primitives[i]);
      ParamBlock& m = state.adam.m[i];
      ParamBlock& v = state.adam.v[i];
      ParamBlock step{};
      for (int k = 0; k < kParams; ++k) {
        m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
        v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
        step[k] = rates[k] * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + eps);
      }
      apply_step(result.field.primitives[i], step);
      if (grads.visible[i]) {
        state.grad_accum[i] += grads.mean2d_norm[i];
        ++state.visible_count[i];
      }
    });

    if (cfg.densify_interval > 0 && (it + 1) % cfg.densify_interval == 0 && it + 1 <= densify_until &&
        it + 1 < cfg.iterations) {
      const auto [clones, prunes] = densify_and_prune(result.field, state, cfg);
      result.clones += clones;
      result.prunes += prunes;
    }
    completed = it + 1;
    if (progress.callback && progress.interval > 0 && completed % progress.interval == 0) {
      const auto p0 = std::chrono::steady_clock::now();
      const bool go_on = progress.callback(completed, result.field);
      paused += std::chrono::duration<double>(std::chrono::steady_clock::now() - p0).count();
      if (!go_on) break;
    }
  }
  result.iterations = completed;
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() - paused;
  return result;
}

SegmentPlan segment_trajectory(const Trajectory& traj, int segment_len, int holdout, int min_tail) {
  if (!(segment_len > holdout && holdout >= 0)) {
    throw Error(ErrorCode::InvalidConfig, "segment_len must exceed holdout >= 0");
  }
  const int n = static_cast<int>(traj.size());
  if (n < holdout + 1) {
    throw Error(ErrorCode::TrajectoryTooShort,
                std::to_string(n) + " frames cannot hold out " + std::to_string(holdout));
  }
  SegmentPlan plan;
  for (int start = 0; start < n; start += segment_len) {
    const int end = std::min(n, start + segment_len);
    if (end - start < min_tail && !plan.segments.empty()) {
      plan.segments.back().end = end;
    } else {
      plan.segments.push_back({start, end, 0});
    }
  }
  for (auto& s : plan.segments) {
    // Keep at least one training frame per span.
    s.holdout = std::min(holdout, s.end - s.start - 1);
  }
  return plan;
}

std::vector<TrainView> make_views(const SceneDataset& scene, const std::vector<int>& positions,
                                  double image_scale) {
  std::vector<TrainView> views;
  for (int pos : positions) {
    const Frame& f = scene.trajectory.frames.at(pos);
    TrainView v;
    v.frame = f;
    v.target = scene.image(f.index);
    if (image_scale != 1.0) {
      v.frame.intrinsics = f.intrinsics.scaled(image_scale);
      v.target = resize(v.target, v.frame.intrinsics.width, v.frame.intrinsics.height);
    }
    views.push_back(std::move(v));
  }
  return views;
}

GaussianField init_from_lidar(const SceneDataset& scene, const std::vector<int>& positions,
                              const InitConfig& cfg, std::uint64_t seed) {
  std::vector<datagen::ColorSource> sources;
  std::vector<Image> depths;
  for (int pos : positions) {
    const Frame& f = scene.trajectory.frames.at(pos);
    sources.push_back({&f, &scene.image(f.index), nullptr});
  }
  datagen::ColorizeOptions copt;
  copt.occlusion_test = cfg.occlusion_test;

  // Voxel merge keeps the first point per cell in frame order.
  struct KeyHash {
    std::size_t operator()(const std::array<long, 3>& k) const {
      return std::hash<long>()(k[0] * 73856093L ^ k[1] * 19349663L ^ k[2] * 83492791L);
    }
  };
  std::unordered_map<std::array<long, 3>, std::size_t, KeyHash> seen;
  std::vector<LidarPoint> merged;
  for (int pos : positions) {
    const Frame& f = scene.trajectory.frames.at(pos);
    const LidarSweep* sweep = scene.sweep(f.index);
    if (!sweep) continue;
    const LidarSweep colored = datagen::colorize_lidar(*sweep, f.timestamp, sources, copt);
    for (const auto& pt : colored.points) {
      if (!pt.colored()) continue;
      const std::array<long, 3> key = {std::lround(std::floor(pt.position.x() / cfg.voxel)),
                                       std::lround(std::floor(pt.position.y() / cfg.voxel)),
                                       std::lround(std::floor(pt.position.z() / cfg.voxel))};
      if (seen.emplace(key, merged.size()).second) merged.push_back(pt);
    }
  }
  if (cfg.max_count > 0 && static_cast<int>(merged.size()) > cfg.max_count) {
    std::mt19937_64 rng(seed);
    std::shuffle(merged.begin(), merged.end(), rng);
    merged.resize(cfg.max_count);
  }

  GaussianField field;
  field.background = Eigen::Vector3d::Zero();
  // Background guess: median color of each image border row at the top.
  if (!positions.empty()) {
    std::vector<double> ch[3];
    for (int pos : positions) {
      const Image& img = scene.image(scene.trajectory.frames.at(pos).index);
      for (int x = 0; x < img.width(); ++x)
        for (int c = 0; c < 3; ++c) ch[c].push_back(img.at(x, 0, c));
    }
    for (int c = 0; c < 3; ++c) {
      std::nth_element(ch[c].begin(), ch[c].begin() + ch[c].size() / 2, ch[c].end());
      field.background[c] = ch[c][ch[c].size() / 2];
    }
  }
  for (const auto& pt : merged) {
    GaussianPrimitive p;
    p.position = pt.position;
    p.color = pt.color;
    p.log_scale.setConstant(std::log(cfg.scale));
    p.opacity_logit = logit(cfg.opacity);
    field.primitives.push_back(p);
  }
  return field;
}

std::vector<SegmentResult> reconstruct_piecewise(const SceneDataset& scene, const SegmentPlan& plan,
                                                 const OptimConfig& cfg, std::uint64_t seed,
                                                 const InitConfig& init) {
  for (const auto& s : plan.segments) {
    if (s.start < 0 || s.end > static_cast<int>(scene.trajectory.size()) || s.start >= s.end ||
        s.train_end() <= s.start) {
      throw Error(ErrorCode::InvalidConfig, "segment plan does not fit the scene");
    }
  }
  std::vector<SegmentResult> results(plan.segments.size());
  // Segments are independent; each worker owns one result slot.
  parallel_for(plan.segments.size(), [&](std::size_t si) {
    const Segment& seg = plan.segments[si];
    std::vector<int> train;
    for (int p = seg.start; p < seg.train_end(); ++p) train.push_back(p);
    const std::uint64_t seg_seed = seed + 0x9E3779B97F4A7C15ULL * (si + 1);
    GaussianField field = init_from_lidar(scene, train, init, seg_seed);
    auto views = make_views(scene, train);
    std::vector<Frame> frames;
    for (const auto& v : views) frames.push_back(v.frame);
    OptimConfig seg_cfg = cfg;
    seg_cfg.scene_extent = camera_extent(frames);
    auto fit = optimize(field, views, seg_cfg, seg_seed);

    SegmentResult& out = results[si];
    out.report.segment = seg;
    out.report.iterations = fit.iterations;
    out.report.seconds = fit.seconds;
    out.report.final_loss = fit.losses.empty() ? 0.0 : fit.losses.back();
    out.report.train_psnr = mean_psnr(fit.field, make_views(scene, train, cfg.image_scale));
    for (int p : train) out.report.train_frames.push_back(scene.trajectory.frames[p].index);
    out.field = std::move(fit.field);
  });
  return results;
}

}  // namespace freesim::recon
