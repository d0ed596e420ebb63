#include "freesim/progressive.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>

#include <json.hpp>

#include "freesim/datagen.hpp"
#include "freesim/error.hpp"
#include "freesim/metrics.hpp"
#include "freesim/parallel.hpp"
#include "freesim/rasterizer.hpp"

namespace freesim::progressive {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

std::string to_string(Side s) {
  switch (s) {
    case Side::Left: return "left";
    case Side::Right: return "right";
    case Side::Alternate: return "alternate";
  }
  return "alternate";
}

Side side_from_string(const std::string& s) {
  if (s == "left") return Side::Left;
  if (s == "right") return Side::Right;
  if (s == "alternate") return Side::Alternate;
  throw Error(ErrorCode::InvalidConfig, "side must be left, right or alternate, got '" + s + "'");
}

double ExpansionPlan::offset(int k) const {
  const double magnitude = (k + 1) * step_size;
  switch (side) {
    case Side::Left: return -magnitude;
    case Side::Right: return magnitude;
    case Side::Alternate: return k % 2 == 0 ? magnitude : -magnitude;
  }
  return magnitude;
}

void ExpansionPlan::validate() const {
  if (!(step_size > 0.0) || !std::isfinite(step_size) || n_expansions < 0 || iterations_per_expansion < 0 ||
      total_extra_iterations < 0 ||
      static_cast<long long>(n_expansions) * iterations_per_expansion > total_extra_iterations) {
    throw Error(ErrorCode::InvalidConfig,
                "expansion plan needs step_size > 0 and n_expansions·iterations_per_expansion ≤ total");
  }
}

Trajectory shift_trajectory(const Trajectory& traj, double lateral_offset) {
  Trajectory out = traj;
  for (auto& f : out.frames) f.pose.center += lateral_offset * f.pose.right_axis();
  return out;
}

ProgressiveState ProgressiveState::from_scene(const SceneDataset& scene, GaussianField field) {
  ProgressiveState s;
  s.field = std::move(field);
  for (const auto& f : scene.trajectory.frames) s.training_set.push_back({f, scene.image(f.index), Source::Recorded, 0.0});
  return s;
}

namespace {

enhance::EnhanceRequest make_request(const GaussianField& field, const Frame& frame,
                                     const std::map<int, LidarSweep>* colored) {
  enhance::EnhanceRequest r;
  r.degraded = clamp01(raster::rasterize(field, frame.pose, frame.intrinsics).color);
  r.pose = frame.pose;
  r.intrinsics = frame.intrinsics;
  if (colored) {
    if (const auto it = colored->find(frame.index); it != colored->end()) {
      r.lidar_pseudo = datagen::project_lidar(it->second, frame.pose, frame.intrinsics);
    }
  }
  return r;
}

std::vector<recon::TrainView> views_of(const ProgressiveState& s, double generated_weight) {
  std::vector<recon::TrainView> views;
  for (const auto& e : s.training_set) {
    views.push_back({e.frame, e.image, e.source == Source::Generated ? generated_weight : 1.0});
  }
  return views;
}

std::vector<recon::TrainView> recorded_views(const SceneDataset& scene) {
  std::vector<recon::TrainView> views;
  for (const auto& f : scene.trajectory.frames) views.push_back({f, scene.image(f.index), 1.0});
  return views;
}

double offtraj_psnr(const GaussianField& field, const GaussianField& gt, const Trajectory& shifted) {
  double sum = 0.0;
  for (const auto& f : shifted.frames) {
    const auto a = clamp01(raster::rasterize(field, f.pose, f.intrinsics).color);
    const auto b = clamp01(raster::rasterize(gt, f.pose, f.intrinsics).color);
    sum += metrics::psnr(a, b);
  }
  return shifted.empty() ? 0.0 : sum / static_cast<double>(shifted.size());
}

}  // namespace

ProgressiveState expand_training_set(const ProgressiveState& state, const ExpansionPlan& plan,
                                     enhance::Enhancer& enhancer, const SceneDataset& scene,
                                     const std::map<int, LidarSweep>* colored) {
  plan.validate();
  std::map<int, LidarSweep> own;
  if (!colored) {
    own = datagen::colorize_scene(scene);
    colored = &own;
  }
  const double offset = plan.offset(state.expansions_done);
  const Trajectory shifted = shift_trajectory(scene.trajectory, offset);

  std::vector<enhance::EnhanceRequest> requests(shifted.size());
  parallel_for(shifted.size(), [&](std::size_t i) { requests[i] = make_request(state.field, shifted.frames[i], colored); });
  const auto enhanced = enhancer.enhance_all(requests);
  if (enhanced.size() != requests.size()) throw Error(ErrorCode::ProtocolError, "enhancer dropped images");

  ProgressiveState next = state;
  for (std::size_t i = 0; i < shifted.size(); ++i) {
    const Image& img = enhanced[i];
    if (img.width() != requests[i].degraded.width() || img.height() != requests[i].degraded.height()) {
      throw Error(ErrorCode::DimensionMismatch, "enhancer changed the image size");
    }
    next.training_set.push_back({shifted.frames[i], img, Source::Generated, offset});
  }
  ++next.expansions_done;
  char line[96];
  std::snprintf(line, sizeof line, "expansion %d: offset %+.2f m, %zu generated views", next.expansions_done, offset,
                shifted.size());
  next.logs.emplace_back(line);
  return next;
}

std::string ProgressiveReport::to_json() const {
  json exps = json::array();
  for (const auto& e : expansions) {
    json j = {{"expansion", e.expansion},
              {"offset_m", e.offset_m},
              {"n_generated", e.n_generated},
              {"iterations", e.iterations},
              {"train_psnr", e.train_psnr},
              {"wall_clock_s", e.wall_clock_s}};
    j["offtraj_psnr"] = e.offtraj_psnr ? json(*e.offtraj_psnr) : json(nullptr);
    exps.push_back(j);
  }
  json doc = {{"expansions", exps},
              {"final_iterations", final_iterations},
              {"final_train_psnr", final_train_psnr},
              {"wall_clock_s", wall_clock_s}};
  return doc.dump(2) + "\n";
}

ProgressiveResult run_progressive(const SceneDataset& scene, const GaussianField& init_field,
                                  const ExpansionPlan& plan, const recon::OptimConfig& optim_cfg,
                                  enhance::Enhancer& enhancer, std::uint64_t seed,
                                  const ProgressiveOptions& options) {
  plan.validate();
  const auto t0 = Clock::now();
  const auto colored = datagen::colorize_scene(scene);
  const auto recorded = recorded_views(scene);

  ProgressiveResult result;
  result.state = ProgressiveState::from_scene(scene, init_field);
  for (int k = 0; k < plan.n_expansions; ++k) {
    const auto tk = Clock::now();
    result.state = expand_training_set(result.state, plan, enhancer, scene, &colored);
    ExpansionReport rep;
    rep.expansion = k + 1;
    rep.offset_m = plan.offset(k);
    rep.n_generated = static_cast<int>(scene.trajectory.size());
    if (plan.iterations_per_expansion > 0) {
      recon::OptimConfig cfg = optim_cfg;
      cfg.iterations = plan.iterations_per_expansion;
      auto fit = recon::optimize(result.state.field, views_of(result.state, options.generated_weight), cfg, seed + k);
      result.state.field = std::move(fit.field);
      rep.iterations = fit.iterations;
    }
    rep.train_psnr = recon::mean_psnr(result.state.field, recorded);
    if (scene.ground_truth_field) {
      rep.offtraj_psnr = offtraj_psnr(result.state.field, *scene.ground_truth_field,
                                      shift_trajectory(scene.trajectory, rep.offset_m));
    }
    rep.wall_clock_s = std::chrono::duration<double>(Clock::now() - tk).count();
    result.report.expansions.push_back(rep);
  }
  const int remainder = plan.total_extra_iterations - plan.n_expansions * plan.iterations_per_expansion;
  if (remainder > 0) {
    recon::OptimConfig cfg = optim_cfg;
    cfg.iterations = remainder;
    auto fit = recon::optimize(result.state.field, views_of(result.state, options.generated_weight), cfg,
                               seed + static_cast<std::uint64_t>(plan.n_expansions));
    result.state.field = std::move(fit.field);
    result.report.final_iterations = fit.iterations;
  }
  result.field = result.state.field;
  result.report.final_train_psnr = recon::mean_psnr(result.field, recorded);
  result.report.wall_clock_s = std::chrono::duration<double>(Clock::now() - t0).count();
  return result;
}

std::vector<Image> render_simulation(const GaussianField& field, const Trajectory& traj,
                                     enhance::Enhancer* enhancer, const std::map<int, LidarSweep>* colored) {
  std::vector<enhance::EnhanceRequest> requests(traj.size());
  parallel_for(traj.size(), [&](std::size_t i) { requests[i] = make_request(field, traj.frames[i], colored); });
  if (enhancer) return enhance::post_enhance(requests, *enhancer);
  std::vector<Image> out;
  out.reserve(requests.size());
  for (auto& r : requests) out.push_back(std::move(r.degraded));
  return out;
}

std::string offset_dir_name(double offset) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "offset_%+.1fm", offset == 0.0 ? 0.0 : offset);
  return buf;
}

void write_sequence(const std::filesystem::path& dir, const Trajectory& traj, const std::vector<Image>& images) {
  if (images.size() != traj.size()) throw Error(ErrorCode::DimensionMismatch, "one image per frame expected");
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < images.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "%04d.png", traj.frames[i].index);
    write_png(dir / name, images[i]);
  }
}

}  // namespace freesim::progressive
