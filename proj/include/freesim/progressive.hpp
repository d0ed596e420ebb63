#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "freesim/enhancer.hpp"
#include "freesim/reconstruction.hpp"
#include "freesim/scene.hpp"

namespace freesim::progressive {

enum class Side { Left, Right, Alternate };
std::string to_string(Side s);
Side side_from_string(const std::string& s);

struct ExpansionPlan {
  double step_size = 0.5;  // meters
  int n_expansions = 0;
  Side side = Side::Alternate;
  int iterations_per_expansion = 5000;
  int total_extra_iterations = 30000;

  // Signed lateral offset (right positive) of expansion k, counted from 0.
  double offset(int k) const;
  void validate() const;
};

// Moves every camera center by `lateral_offset` along its own right axis.
Trajectory shift_trajectory(const Trajectory& traj, double lateral_offset);

enum class Source { Recorded, Generated };

struct TrainingEntry {
  Frame frame;
  Image image;
  Source source = Source::Recorded;
  double offset = 0.0;
};

struct ProgressiveState {
  GaussianField field;
  std::vector<TrainingEntry> training_set;
  int expansions_done = 0;
  std::vector<std::string> logs;

  static ProgressiveState from_scene(const SceneDataset& scene, GaussianField field);
};

// Renders the current field along the next shifted trajectory, enhances each render and appends the
// results. Returns a new state; the input is never modified, so a failure leaves it intact.
// `colored` supplies colorized sweeps for the LiDAR condition (computed from the scene when null).
ProgressiveState expand_training_set(const ProgressiveState& state, const ExpansionPlan& plan,
                                     enhance::Enhancer& enhancer, const SceneDataset& scene,
                                     const std::map<int, LidarSweep>* colored = nullptr);

struct ExpansionReport {
  int expansion = 0;
  double offset_m = 0.0;
  int n_generated = 0;
  int iterations = 0;
  double train_psnr = 0.0;             // on recorded views
  std::optional<double> offtraj_psnr;  // against ground truth at offset_m, synthetic scenes only
  double wall_clock_s = 0.0;
};

struct ProgressiveReport {
  std::vector<ExpansionReport> expansions;
  int final_iterations = 0;  // remainder phase after the last expansion
  double final_train_psnr = 0.0;
  double wall_clock_s = 0.0;

  std::string to_json() const;
};

struct ProgressiveOptions {
  double generated_weight = 1.0;
};

struct ProgressiveResult {
  GaussianField field;
  ProgressiveReport report;
  ProgressiveState state;
};

// n_expansions rounds of expand + optimize(iterations_per_expansion), then the remaining
// total_extra_iterations on the frozen set. Phase k is seeded with seed + k, so with no expansions
// the result equals optimize(init_field, recorded views, total_extra_iterations, seed).
ProgressiveResult run_progressive(const SceneDataset& scene, const GaussianField& init_field,
                                  const ExpansionPlan& plan, const recon::OptimConfig& optim_cfg,
                                  enhance::Enhancer& enhancer, std::uint64_t seed,
                                  const ProgressiveOptions& options = {});

// Rasterizes every frame; with an enhancer, post-enhances the renders. `colored` adds the LiDAR
// condition to enhancer requests (keyed by frame index).
std::vector<Image> render_simulation(const GaussianField& field, const Trajectory& traj,
                                     enhance::Enhancer* enhancer = nullptr,
                                     const std::map<int, LidarSweep>* colored = nullptr);

// "offset_+1.5m"
std::string offset_dir_name(double offset);
// Writes NNNN.png per frame index under dir.
void write_sequence(const std::filesystem::path& dir, const Trajectory& traj, const std::vector<Image>& images);

}  // namespace freesim::progressive
