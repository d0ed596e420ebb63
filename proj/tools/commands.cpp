#include "commands.hpp"

#include <algorithm>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/core.h>
#include <json.hpp>

#include "freesim/config.hpp"
#include "freesim/datagen.hpp"
#include "freesim/enhancer.hpp"
#include "freesim/error.hpp"
#include "freesim/metrics.hpp"
#include "freesim/parallel.hpp"
#include "freesim/progressive.hpp"
#include "freesim/reconstruction.hpp"
#include "freesim/scene_io.hpp"
#include "freesim/synthetic.hpp"

namespace freesim::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Common {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::optional<double> desk_scale;
};

void add_common(CLI::App* sub, Common& c, bool out_required) {
  sub->add_option("--config", c.config, "TOML run configuration")->check(CLI::ExistingFile);
  auto* out = sub->add_option("--out", c.out, "Output directory");
  if (out_required) out->required();
  sub->add_option("--seed", c.seed, "Random seed (overrides the config)");
  sub->add_option("--threads", c.threads, "Worker threads (falls back to FREESIM_THREADS)")->check(CLI::PositiveNumber);
  sub->add_option("--desk-scale", c.desk_scale, "Divide every schedule length by this factor")
      ->check(CLI::Range(1.0, 1e9));
}

config::RunConfig resolve(const Common& c) {
  auto cfg = c.config.empty() ? config::RunConfig::defaults() : config::load_run_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (c.threads) cfg.threads = *c.threads;
  if (c.desk_scale) cfg.desk_scale = *c.desk_scale;
  return cfg;
}

void finish_config(const config::RunConfig& cfg) {
  cfg.validate();
  if (cfg.threads > 0) set_thread_count(cfg.threads);
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

// Provenance record. Holds no paths or timestamps so reruns into fresh directories match.
void write_run_record(const fs::path& out, const std::string& command, const config::RunConfig& cfg) {
  fs::create_directories(out);
  write_text(out / "config.toml", cfg.to_toml());
  write_json(out / "run.json", {{"command", command},
                                {"config_hash", cfg.hash()},
                                {"seed", cfg.seed},
                                {"desk_scale", cfg.desk_scale},
                                {"version", FREESIM_VERSION},
                                {"format_versions", {{"scene", 1}, {"field", 1}, {"manifest", 1}, {"fsen", 1}}}});
}

std::vector<int> all_positions(const SceneDataset& scene) {
  std::vector<int> pos(scene.trajectory.size());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<int>(i);
  return pos;
}

std::string enhancer_desc_check(const std::string& desc) {
  if (desc == "identity" || desc == "oracle") return {};
  for (const char* prefix : {"reference:", "tcp:", "exec:"}) {
    const std::string p = prefix;
    if (desc.rfind(p, 0) == 0 && desc.size() > p.size()) return {};
  }
  return "enhancer must be identity, oracle, reference:PATH, tcp:HOST:PORT or exec:COMMAND";
}

std::unique_ptr<enhance::Enhancer> make_enhancer(const std::string& desc, const SceneDataset& scene,
                                                 const config::RunConfig& cfg) {
  if (desc == "identity") return std::make_unique<enhance::IdentityEnhancer>();
  if (desc == "oracle") {
    if (!scene.ground_truth_field) {
      throw Error(ErrorCode::InvalidConfig, "the oracle enhancer needs a scene with a ground-truth field");
    }
    return std::make_unique<enhance::OracleEnhancer>(*scene.ground_truth_field);
  }
  if (desc.rfind("reference:", 0) == 0) {
    return std::make_unique<enhance::ReferenceEnhancer>(enhance::ReferenceModel::load(desc.substr(10)));
  }
  if (desc.rfind("tcp:", 0) == 0) return enhance::ExternalEnhancer::connect_tcp(desc.substr(4), cfg.external);
  std::istringstream words(desc.substr(5));
  std::vector<std::string> argv;
  for (std::string w; words >> w;) argv.push_back(w);
  return enhance::ExternalEnhancer::spawn(argv, cfg.external);
}

recon::OptimConfig with_extent(recon::OptimConfig c, const SceneDataset& scene) {
  c.scene_extent = recon::camera_extent(scene.trajectory.frames);
  return c;
}

struct FullFit {
  GaussianField field;
  json report;
};

FullFit reconstruct_full(const SceneDataset& scene, const config::RunConfig& cfg, std::optional<int> iterations) {
  const auto pos = all_positions(scene);
  auto opt = with_extent(cfg.reconstruct_config(), scene);
  if (iterations) opt.iterations = *iterations;
  const auto views = recon::make_views(scene, pos, opt.image_scale);
  auto fit = recon::optimize(recon::init_from_lidar(scene, pos, cfg.init, cfg.seed), views, opt, cfg.seed);
  json report = {{"mode", "full"},
                 {"iterations", fit.iterations},
                 {"n_gaussians", fit.field.size()},
                 {"train_psnr", recon::mean_psnr(fit.field, views)},
                 {"final_loss", fit.losses.empty() ? 0.0 : fit.losses.back()},
                 {"clones", fit.clones},
                 {"prunes", fit.prunes},
                 {"wall_clock_s", fit.seconds}};
  return {std::move(fit.field), std::move(report)};
}

recon::SegmentPlan segment_plan(const SceneDataset& scene, const config::RunConfig& cfg) {
  return recon::segment_trajectory(scene.trajectory, cfg.piecewise.segment_length, cfg.piecewise.holdout,
                                   cfg.piecewise.min_tail);
}

fs::path segment_file(const fs::path& dir, std::size_t i) { return dir / fmt::format("seg_{:02d}.gfld", i); }

std::vector<Image> read_png_dir(const fs::path& dir, std::vector<std::string>* names = nullptr) {
  if (!fs::is_directory(dir)) throw Error(ErrorCode::MissingFile, "not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<Image> images;
  for (const auto& f : files) {
    images.push_back(read_png(f));
    if (names) names->push_back(f.filename().string());
  }
  return images;
}

// ---- subcommands ----

struct SynthArgs {
  Common common;
  std::optional<int> frames, gaussians;
};

int cmd_synth(const SynthArgs& a) {
  auto cfg = resolve(a.common);
  if (a.frames) cfg.synth.frames = *a.frames;
  if (a.gaussians) cfg.synth.gaussians = *a.gaussians;
  finish_config(cfg);
  const auto scene = make_synthetic_scene(cfg.seed, cfg.synth.gaussians, cfg.synth.frames, cfg.synth.scene);
  save_scene(scene, a.common.out);
  write_run_record(a.common.out, "synth", cfg);
  fmt::print("wrote {} frames to {}\n", scene.trajectory.size(), a.common.out);
  return 0;
}

struct ReconstructArgs {
  Common common;
  std::string scene;
  std::string mode = "full";
  std::optional<int> iterations;
};

int cmd_reconstruct(const ReconstructArgs& a) {
  auto cfg = resolve(a.common);
  finish_config(cfg);
  const auto scene = load_scene(a.scene);
  const fs::path out = a.common.out;
  fs::create_directories(out);
  json report;
  if (a.mode == "full") {
    auto fit = reconstruct_full(scene, cfg, a.iterations);
    save_field(fit.field, out / "field.gfld");
    report = fit.report;
    fmt::print("train PSNR {:.2f} dB after {} iterations ({:.1f} s)\n", report["train_psnr"].get<double>(),
               report["iterations"].get<int>(), report["wall_clock_s"].get<double>());
  } else {
    auto opt = cfg.piecewise_config();
    if (a.iterations) opt.iterations = *a.iterations;
    const auto plan = segment_plan(scene, cfg);
    const auto results = recon::reconstruct_piecewise(scene, plan, opt, cfg.seed, cfg.init);
    fs::create_directories(out / "segments");
    json segs = json::array();
    double total = 0.0;
    for (std::size_t i = 0; i < results.size(); ++i) {
      save_field(results[i].field, segment_file(out / "segments", i));
      const auto& r = results[i].report;
      segs.push_back({{"start", r.segment.start},
                      {"end", r.segment.end},
                      {"holdout", r.segment.holdout},
                      {"train_frames", r.train_frames},
                      {"iterations", r.iterations},
                      {"train_psnr", r.train_psnr},
                      {"final_loss", r.final_loss},
                      {"wall_clock_s", r.seconds}});
      total += r.seconds;
      fmt::print("segment {} [{}, {}): {:.2f} dB, {:.1f} s\n", i, r.segment.start, r.segment.end, r.train_psnr, r.seconds);
    }
    report = {{"mode", "piecewise"}, {"segments", segs}, {"total_wall_clock_s", total}};
  }
  write_json(out / "report.json", report);
  write_run_record(out, "reconstruct", cfg);
  return 0;
}

struct BuildDataArgs {
  Common common;
  std::string scene, fields;
};

int cmd_build_data(const BuildDataArgs& a) {
  auto cfg = resolve(a.common);
  finish_config(cfg);
  const auto scene = load_scene(a.scene);
  const auto plan = segment_plan(scene, cfg);
  std::vector<GaussianField> fields;
  for (std::size_t i = 0; i < plan.segments.size(); ++i) {
    const auto path = segment_file(fs::path(a.fields) / "segments", i);
    if (!fs::exists(path)) {
      throw Error(ErrorCode::MissingFile, "missing segment field " + path.string() +
                                              " (run reconstruct --mode piecewise with the same config)");
    }
    fields.push_back(load_field(path));
  }
  datagen::BuildOptions opt;
  opt.perturb = cfg.perturb;
  opt.perturb.seed = cfg.seed;
  opt.perturb_multiplicity = cfg.perturb_multiplicity;
  const auto manifest = datagen::build_triplets(scene, plan, fields, opt, a.common.out);
  int extrapolated = 0;
  for (const auto& t : manifest.triplets) extrapolated += t.provenance == datagen::Provenance::Extrapolated;
  const int perturbed = static_cast<int>(manifest.triplets.size()) - extrapolated;
  write_run_record(a.common.out, "build-data", cfg);
  fmt::print("{} triplets ({} extrapolated, {} perturbed)\n", manifest.triplets.size(), extrapolated, perturbed);
  return 0;
}

struct TrainArgs {
  Common common;
  std::string data;
};

int cmd_train_enhancer(const TrainArgs& a) {
  auto cfg = resolve(a.common);
  finish_config(cfg);
  fs::path manifest_path = a.data;
  if (fs::is_directory(manifest_path)) manifest_path /= "manifest.json";
  const auto manifest = datagen::load_manifest(manifest_path);
  const auto model = enhance::train_reference(manifest, cfg.blend, cfg.seed, cfg.ridge);
  const fs::path out = a.common.out;
  fs::create_directories(out);
  model.save(out / "model.json");

  enhance::ReferenceEnhancer enhancer(model);
  std::vector<double> before(manifest.triplets.size()), after(manifest.triplets.size());
  parallel_for(manifest.triplets.size(), [&](std::size_t i) {
    const auto t = datagen::load_triplet(manifest, i);
    before[i] = metrics::psnr(t.degraded, t.target);
    after[i] = metrics::psnr(enhancer.enhance({t.degraded, t.lidar_pseudo, {}, {}}), t.target);
  });
  auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
  };
  write_json(out / "report.json", {{"triplets", manifest.triplets.size()},
                                   {"train_psnr_degraded", mean(before)},
                                   {"train_psnr_enhanced", mean(after)},
                                   {"note", model.note}});
  write_run_record(out, "train-enhancer", cfg);
  fmt::print("trained on {} triplets: {:.2f} dB -> {:.2f} dB\n", manifest.triplets.size(), mean(before), mean(after));
  return 0;
}

struct SimulateArgs {
  Common common;
  std::string scene, field, enhancer = "identity", side;
  std::optional<double> step;
  std::optional<int> expansions;
  bool no_post = false;
};

void write_renders(const fs::path& out, const GaussianField& field, const SceneDataset& scene,
                   const std::vector<double>& offsets, enhance::Enhancer* enhancer) {
  const auto colored = datagen::colorize_scene(scene);
  for (double off : offsets) {
    const auto traj = progressive::shift_trajectory(scene.trajectory, off);
    const auto images = progressive::render_simulation(field, traj, enhancer, &colored);
    progressive::write_sequence(out / "renders" / progressive::offset_dir_name(off), traj, images);
  }
}

int cmd_simulate(const SimulateArgs& a) {
  auto cfg = resolve(a.common);
  if (a.step) cfg.expansion.step_size = *a.step;
  if (a.expansions) cfg.expansion.n_expansions = *a.expansions;
  if (!a.side.empty()) cfg.expansion.side = progressive::side_from_string(a.side);
  finish_config(cfg);
  const auto scene = load_scene(a.scene);
  auto enhancer = make_enhancer(a.enhancer, scene, cfg);
  const fs::path out = a.common.out;
  fs::create_directories(out);

  GaussianField init;
  if (!a.field.empty()) {
    init = load_field(a.field);
  } else {
    auto fit = reconstruct_full(scene, cfg, std::nullopt);
    fmt::print("reconstructed recorded views: {:.2f} dB\n", fit.report["train_psnr"].get<double>());
    init = std::move(fit.field);
  }
  const auto plan = cfg.expansion_plan();
  const auto result = progressive::run_progressive(scene, init, plan, with_extent(cfg.reconstruct_config(), scene),
                                                   *enhancer, cfg.seed);
  save_field(result.field, out / "field.gfld");
  write_text(out / "report.json", result.report.to_json());
  for (const auto& e : result.report.expansions) {
    fmt::print("expansion {}: offset {:+.1f} m, train {:.2f} dB{}\n", e.expansion, e.offset_m, e.train_psnr,
               e.offtraj_psnr ? fmt::format(", off-trajectory {:.2f} dB", *e.offtraj_psnr) : std::string());
  }
  std::vector<double> offsets{0.0};
  for (int k = 0; k < plan.n_expansions; ++k) offsets.push_back(plan.offset(k));
  write_renders(out, result.field, scene, offsets, a.no_post ? nullptr : enhancer.get());
  write_run_record(out, "simulate", cfg);
  return 0;
}

struct RenderArgs {
  Common common;
  std::string scene, field, enhancer;
  std::vector<double> offsets;
};

int cmd_render(const RenderArgs& a) {
  auto cfg = resolve(a.common);
  finish_config(cfg);
  const auto scene = load_scene(a.scene);
  const auto field = load_field(a.field);
  std::unique_ptr<enhance::Enhancer> enhancer;
  if (!a.enhancer.empty()) enhancer = make_enhancer(a.enhancer, scene, cfg);
  const auto offsets = a.offsets.empty() ? std::vector<double>{0.0} : a.offsets;
  write_renders(a.common.out, field, scene, offsets, enhancer.get());
  write_run_record(a.common.out, "render", cfg);
  return 0;
}

struct EvalArgs {
  Common common;
  std::vector<std::string> renders;
  std::string ref;
  bool csv = false;
};

int cmd_eval(const EvalArgs& a) {
  auto cfg = resolve(a.common);
  finish_config(cfg);
  std::vector<std::string> ref_names;
  const auto ref = read_png_dir(a.ref, &ref_names);
  json fid = json::object(), views = json::object();
  std::string csv = "set,view,psnr,ssim\n";
  for (const auto& dir : a.renders) {
    std::vector<std::string> names;
    const auto images = read_png_dir(dir, &names);
    const std::string key = fs::path(dir).lexically_normal().filename().empty()
                                ? fs::path(dir).lexically_normal().parent_path().filename().string()
                                : fs::path(dir).lexically_normal().filename().string();
    fid[key] = metrics::fid_proxy(images, ref);
    json per_view = json::array();
    for (std::size_t i = 0; i < names.size(); ++i) {
      const auto it = std::find(ref_names.begin(), ref_names.end(), names[i]);
      if (it == ref_names.end()) continue;
      const Image& r = ref[static_cast<std::size_t>(it - ref_names.begin())];
      if (r.width() != images[i].width() || r.height() != images[i].height()) continue;
      const double p = metrics::psnr(images[i], r), s = metrics::ssim(images[i], r);
      per_view.push_back({{"view", names[i]}, {"psnr", p}, {"ssim", s}});
      csv += fmt::format("{},{},{:.6f},{:.6f}\n", key, names[i], p, s);
    }
    views[key] = per_view;
  }
  const json report = {{"fid_proxy", fid}, {"views", views}};
  const fs::path out = a.common.out.empty() ? fs::path(".") : fs::path(a.common.out);
  fs::create_directories(out);
  write_json(out / "eval.json", report);
  if (a.csv) write_text(out / "eval.csv", csv);
  write_run_record(out, "eval", cfg);
  fmt::print("{}\n", report.dump(2));
  return 0;
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"Off-trajectory driving-scene simulation with Gaussian splatting", "freesim"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(FREESIM_VERSION));

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a seeded synthetic scene");
  add_common(s, synth.common, true);
  s->add_option("--frames", synth.frames, "Trajectory length")->check(CLI::Range(2, 100000));
  s->add_option("--gaussians", synth.gaussians, "Ground-truth primitive count")->check(CLI::Range(1, 10000000));

  ReconstructArgs rec;
  auto* r = app.add_subcommand("reconstruct", "Fit a Gaussian field to recorded views");
  add_common(r, rec.common, true);
  r->add_option("--scene", rec.scene, "Scene directory")->required()->check(CLI::ExistingDirectory);
  r->add_option("--mode", rec.mode, "full: one field for the whole trajectory; piecewise: one per segment")
      ->check(CLI::IsMember({"full", "piecewise"}))
      ->capture_default_str();
  r->add_option("--iterations", rec.iterations, "Exact iteration count (ignores desk-scale)")->check(CLI::PositiveNumber);

  BuildDataArgs bd;
  auto* b = app.add_subcommand("build-data", "Build degraded/LiDAR/target training triplets");
  add_common(b, bd.common, true);
  b->add_option("--scene", bd.scene, "Scene directory")->required()->check(CLI::ExistingDirectory);
  b->add_option("--fields", bd.fields, "Output directory of reconstruct --mode piecewise")
      ->required()
      ->check(CLI::ExistingDirectory);

  TrainArgs tr;
  auto* t = app.add_subcommand("train-enhancer", "Fit the reference enhancer on a triplet dataset");
  add_common(t, tr.common, true);
  t->add_option("--data", tr.data, "Dataset directory or manifest.json")->required()->check(CLI::ExistingPath);

  auto enhancer_validator = CLI::Validator(enhancer_desc_check, "ENHANCER");
  SimulateArgs sim;
  auto* m = app.add_subcommand("simulate", "Progressive off-trajectory expansion and rendering");
  add_common(m, sim.common, true);
  m->add_option("--scene", sim.scene, "Scene directory")->required()->check(CLI::ExistingDirectory);
  m->add_option("--field", sim.field, "Starting field (default: reconstruct the recorded views first)")
      ->check(CLI::ExistingFile);
  m->add_option("--enhancer", sim.enhancer, "identity | oracle | reference:PATH | tcp:HOST:PORT | exec:COMMAND")
      ->check(enhancer_validator)
      ->capture_default_str();
  m->add_option("--step", sim.step, "Lateral step per expansion in meters")->check(CLI::PositiveNumber);
  m->add_option("--expansions", sim.expansions, "Number of expansions")->check(CLI::NonNegativeNumber);
  m->add_option("--side", sim.side, "Expansion side")->check(CLI::IsMember({"left", "right", "alternate"}));
  m->add_flag("--no-post-enhance", sim.no_post, "Write raw renders instead of post-enhanced ones");

  RenderArgs ren;
  auto* n = app.add_subcommand("render", "Render a field along shifted trajectories");
  add_common(n, ren.common, true);
  n->add_option("--scene", ren.scene, "Scene directory providing the trajectory")->required()->check(CLI::ExistingDirectory);
  n->add_option("--field", ren.field, "Field checkpoint")->required()->check(CLI::ExistingFile);
  n->add_option("--offset", ren.offsets, "Lateral offset in meters, right positive (repeatable)");
  n->add_option("--enhancer", ren.enhancer, "Post-enhance renders with this enhancer")->check(enhancer_validator);

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "PSNR/SSIM per view and fid_proxy per render set");
  add_common(e, ev.common, false);
  e->add_option("--renders", ev.renders, "Directory of rendered PNGs (repeatable)")->required()->check(CLI::ExistingDirectory);
  e->add_option("--ref", ev.ref, "Directory of reference PNGs")->required()->check(CLI::ExistingDirectory);
  e->add_flag("--csv", ev.csv, "Also write eval.csv");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& ok) {
    return app.exit(ok);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return 2;
  }

  try {
    if (s->parsed()) return cmd_synth(synth);
    if (r->parsed()) return cmd_reconstruct(rec);
    if (b->parsed()) return cmd_build_data(bd);
    if (t->parsed()) return cmd_train_enhancer(tr);
    if (m->parsed()) return cmd_simulate(sim);
    if (n->parsed()) return cmd_render(ren);
    if (e->parsed()) return cmd_eval(ev);
  } catch (const std::exception& err) {
    fmt::print(stderr, "freesim: error: {}\n", err.what());
    return 1;
  }
  return 2;
}

}  // namespace freesim::cli
