#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <variant>

#include "freesim/datagen.hpp"
#include "freesim/enhancer.hpp"
#include "freesim/progressive.hpp"
#include "freesim/reconstruction.hpp"
#include "freesim/synthetic.hpp"

namespace freesim::config {

// Subset of TOML: [table] headers, key = value, strings, integers, floats, booleans, # comments.
using TomlValue = std::variant<bool, std::int64_t, double, std::string>;

struct TomlEntry {
  TomlValue value;
  int line = 0;
};

// Keys are "table.key" (or "key" before the first header).
using TomlDocument = std::map<std::string, TomlEntry>;

TomlDocument parse_toml(const std::string& text);

struct SynthSection {
  int frames = 50;
  int gaussians = 200;
  SynthConfig scene;
};

struct PiecewiseSection {
  int segment_length = 20;
  int holdout = 4;
  int min_tail = 8;
  int iterations = 1000;
  double rate_scale = 3.0;
  double image_scale = 0.5;
};

// Schedule lengths are stored at full scale and divided by desk_scale when used.
struct RunConfig {
  std::uint64_t seed = 7;
  int threads = 0;  // 0 keeps FREESIM_THREADS or the hardware default
  double desk_scale = 1.0;

  SynthSection synth;
  recon::OptimConfig reconstruct;
  PiecewiseSection piecewise;
  recon::InitConfig init;
  datagen::PerturbConfig perturb;
  int perturb_multiplicity = 1;
  datagen::BlendConfig blend;
  double ridge = 1e-6;
  progressive::ExpansionPlan expansion;
  enhance::ExternalOptions external;

  static RunConfig defaults();

  // Throws InvalidConfig naming the key on unknown keys or wrong types.
  void apply(const TomlDocument& doc);
  void validate() const;

  int scaled(int iterations) const;
  recon::OptimConfig reconstruct_config() const;
  recon::OptimConfig piecewise_config() const;
  progressive::ExpansionPlan expansion_plan() const;

  // Canonical TOML of every setting; hash() is FNV-1a of it, in hex.
  std::string to_toml() const;
  std::string hash() const;
};

RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace freesim::config
