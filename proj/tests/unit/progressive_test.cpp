#include <doctest.h>

#include <cmath>
#include <stdexcept>

#include "freesim/error.hpp"
#include "freesim/image.hpp"
#include "freesim/progressive.hpp"
#include "freesim/rasterizer.hpp"
#include "freesim/synthetic.hpp"
#include "test_support.hpp"

using namespace freesim;
using namespace freesim::progressive;

namespace {

SynthConfig small_config() {
  SynthConfig cfg;
  cfg.width = cfg.height = 32;
  cfg.focal = 24;
  return cfg;
}

recon::OptimConfig quick_config(int iterations) {
  recon::OptimConfig cfg;
  cfg.iterations = iterations;
  cfg.densify_interval = 0;
  return cfg;
}

class ThrowingEnhancer final : public enhance::Enhancer {
 public:
  std::string name() const override { return "throws"; }
  Image enhance(const enhance::EnhanceRequest&) override { throw std::runtime_error("boom"); }
};

}  // namespace

TEST_CASE("shift moves along the camera right axis") {
  Trajectory traj;
  Frame f;
  traj.frames.push_back(f);
  const auto shifted = shift_trajectory(traj, 3.0);
  CHECK(shifted.frames[0].pose.center.isApprox(Eigen::Vector3d(3, 0, 0)));
  CHECK(shifted.frames[0].pose.rotation.coeffs() == traj.frames[0].pose.rotation.coeffs());

  // A camera yawed 90° has its right axis along world -z or +z; the shift follows it.
  Frame yawed;
  yawed.pose.rotation = Eigen::Quaterniond(Eigen::AngleAxisd(0.5 * M_PI, Eigen::Vector3d::UnitY()));
  yawed.pose.center = {1, 2, 3};
  Trajectory t2;
  t2.frames.push_back(yawed);
  const auto s2 = shift_trajectory(t2, 2.0);
  CHECK((s2.frames[0].pose.center - yawed.pose.center).isApprox(2.0 * yawed.pose.right_axis()));
}

TEST_CASE("shifting by +s then -s restores the centers exactly") {
  const auto scene = make_synthetic_scene(3, 20, 6, small_config());
  for (double s : {0.5, 1.0, 1.5, 0.25}) {
    const auto back = shift_trajectory(shift_trajectory(scene.trajectory, s), -s);
    for (std::size_t i = 0; i < back.size(); ++i) {
      CHECK(back.frames[i].pose.center == scene.trajectory.frames[i].pose.center);
    }
  }
}

TEST_CASE("expansion offsets") {
  ExpansionPlan plan;
  plan.step_size = 0.5;
  plan.side = Side::Right;
  CHECK(plan.offset(0) == 0.5);
  CHECK(plan.offset(1) == 1.0);
  CHECK(plan.offset(2) == 1.5);
  plan.side = Side::Left;
  CHECK(plan.offset(1) == -1.0);
  plan.side = Side::Alternate;
  CHECK(plan.offset(0) == 0.5);
  CHECK(plan.offset(1) == -1.0);
  CHECK(plan.offset(2) == 1.5);
  CHECK(side_from_string("left") == Side::Left);
  CHECK_THROWS_AS(side_from_string("up"), Error);
}

TEST_CASE("plan validation") {
  ExpansionPlan plan;
  plan.n_expansions = 3;
  plan.iterations_per_expansion = 10;
  plan.total_extra_iterations = 30;
  CHECK_NOTHROW(plan.validate());
  plan.total_extra_iterations = 29;
  CHECK_THROWS_AS(plan.validate(), Error);
  plan.total_extra_iterations = 30;
  plan.step_size = 0.0;
  CHECK_THROWS_AS(plan.validate(), Error);
}

TEST_CASE("each expansion appends one generated view per frame") {
  const auto scene = make_synthetic_scene(5, 40, 8, small_config());
  auto state = ProgressiveState::from_scene(scene, *scene.ground_truth_field);
  REQUIRE(state.training_set.size() == 8);
  ExpansionPlan plan;
  plan.side = Side::Right;
  plan.n_expansions = 2;
  plan.iterations_per_expansion = 0;
  enhance::IdentityEnhancer identity;
  const auto s1 = expand_training_set(state, plan, identity, scene);
  CHECK(s1.training_set.size() == 16);
  CHECK(s1.expansions_done == 1);
  const auto s2 = expand_training_set(s1, plan, identity, scene);
  CHECK(s2.training_set.size() == 24);
  for (std::size_t i = 0; i < 8; ++i) {
    CHECK(s2.training_set[i].source == Source::Recorded);
    CHECK(s2.training_set[8 + i].offset == 0.5);
    CHECK(s2.training_set[16 + i].offset == 1.0);
    CHECK(s2.training_set[16 + i].source == Source::Generated);
    // Offsets are measured from the original trajectory.
    const auto& orig = scene.trajectory.frames[i].pose;
    CHECK((s2.training_set[16 + i].frame.pose.center - orig.center).isApprox(1.0 * orig.right_axis()));
  }
  // Identity enhancement stores the clamped render.
  const auto& g = s1.training_set[8];
  CHECK(testing::max_abs_diff(g.image, clamp01(raster::rasterize(state.field, g.frame.pose, g.frame.intrinsics).color)) == 0.0);
}

TEST_CASE("a failing enhancer leaves the state unchanged") {
  const auto scene = make_synthetic_scene(5, 20, 4, small_config());
  const auto state = ProgressiveState::from_scene(scene, *scene.ground_truth_field);
  ExpansionPlan plan;
  ThrowingEnhancer bad;
  CHECK_THROWS(expand_training_set(state, plan, bad, scene));
  CHECK(state.training_set.size() == 4);
  CHECK(state.expansions_done == 0);
}

TEST_CASE("no expansions equals plain optimization") {
  const auto scene = make_synthetic_scene(6, 30, 4, small_config());
  auto init = *scene.ground_truth_field;
  for (auto& p : init.primitives) p.color = (p.color * 0.7).eval();
  ExpansionPlan plan;
  plan.n_expansions = 0;
  plan.total_extra_iterations = 40;
  enhance::IdentityEnhancer identity;
  const auto cfg = quick_config(999);
  const auto prog = run_progressive(scene, init, plan, cfg, identity, 11);

  std::vector<recon::TrainView> views;
  for (const auto& f : scene.trajectory.frames) views.push_back({f, scene.image(f.index), 1.0});
  auto plain_cfg = cfg;
  plain_cfg.iterations = 40;
  const auto plain = recon::optimize(init, views, plain_cfg, 11);
  CHECK(prog.field == plain.field);
  CHECK(prog.report.expansions.empty());
  CHECK(prog.report.final_iterations == 40);
}

TEST_CASE("progressive runs are deterministic and reported") {
  const auto scene = make_synthetic_scene(8, 30, 4, small_config());
  ExpansionPlan plan;
  plan.side = Side::Alternate;
  plan.n_expansions = 2;
  plan.iterations_per_expansion = 10;
  plan.total_extra_iterations = 30;
  enhance::IdentityEnhancer identity;
  const auto a = run_progressive(scene, *scene.ground_truth_field, plan, quick_config(1), identity, 3);
  const auto b = run_progressive(scene, *scene.ground_truth_field, plan, quick_config(1), identity, 3);
  CHECK(a.field == b.field);
  REQUIRE(a.report.expansions.size() == 2);
  CHECK(a.report.expansions[0].offset_m == 0.5);
  CHECK(a.report.expansions[1].offset_m == -1.0);
  CHECK(a.report.expansions[1].n_generated == 4);
  CHECK(a.report.expansions[1].offtraj_psnr.has_value());
  CHECK(a.report.final_iterations == 10);
  CHECK(a.state.training_set.size() == 12);
  const auto json = a.report.to_json();
  for (const char* key : {"offset_m", "n_generated", "train_psnr", "offtraj_psnr", "wall_clock_s"}) {
    CHECK(json.find(key) != std::string::npos);
  }
}

TEST_CASE("simulation rendering") {
  const auto scene = make_synthetic_scene(2, 30, 3, small_config());
  const auto& field = *scene.ground_truth_field;
  CHECK(render_simulation(field, Trajectory{}).empty());
  const auto shifted = shift_trajectory(scene.trajectory, 1.0);
  const auto out = render_simulation(field, shifted);
  REQUIRE(out.size() == 3);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto& f = shifted.frames[i];
    CHECK(testing::max_abs_diff(out[i], clamp01(raster::rasterize(field, f.pose, f.intrinsics).color)) == 0.0);
  }
  enhance::IdentityEnhancer identity;
  const auto enhanced = render_simulation(field, shifted, &identity);
  for (std::size_t i = 0; i < out.size(); ++i) CHECK(testing::max_abs_diff(out[i], enhanced[i]) == 0.0);

  CHECK(offset_dir_name(1.5) == "offset_+1.5m");
  CHECK(offset_dir_name(-0.5) == "offset_-0.5m");
  CHECK(offset_dir_name(0.0) == "offset_+0.0m");

  testing::TempDir dir("sim");
  write_sequence(dir.path() / "r", shifted, out);
  CHECK(std::filesystem::exists(dir.path() / "r" / "0002.png"));
}
