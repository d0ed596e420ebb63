#include "freesim/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>
#include <vector>

#include "freesim/error.hpp"
#include "freesim/scene_io.hpp"

namespace freesim::config {

namespace {

[[noreturn]] void fail(int line, const std::string& msg) {
  throw Error(ErrorCode::InvalidConfig, "config line " + std::to_string(line) + ": " + msg);
}

std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

bool valid_key(const std::string& k) {
  if (k.empty()) return false;
  for (char c : k) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '-') return false;
  }
  return true;
}

// Parses a value and returns it with the unconsumed remainder of the line.
TomlValue parse_value(const std::string& text, int line, std::string& rest) {
  if (text.empty()) fail(line, "missing value");
  if (text[0] == '"') {
    std::string out;
    std::size_t i = 1;
    for (; i < text.size() && text[i] != '"'; ++i) {
      if (text[i] == '\\') {
        if (++i >= text.size()) break;
        switch (text[i]) {
          case 'n': out += '\n'; break;
          case 't': out += '\t'; break;
          case '"': out += '"'; break;
          case '\\': out += '\\'; break;
          default: fail(line, "unsupported escape");
        }
      } else {
        out += text[i];
      }
    }
    if (i >= text.size()) fail(line, "unterminated string");
    rest = text.substr(i + 1);
    return out;
  }
  std::size_t end = 0;
  while (end < text.size() && !std::isspace(static_cast<unsigned char>(text[end])) && text[end] != '#') ++end;
  std::string tok = text.substr(0, end);
  rest = text.substr(end);
  if (tok == "true") return true;
  if (tok == "false") return false;
  std::string digits;
  for (char c : tok) {
    if (c != '_') digits += c;
  }
  const bool is_float = digits.find_first_of(".eE") != std::string::npos || digits == "inf" || digits == "nan";
  if (!is_float) {
    std::int64_t v = 0;
    const char* first = digits.data() + (digits.size() > 1 && digits[0] == '+' ? 1 : 0);
    const auto [p, ec] = std::from_chars(first, digits.data() + digits.size(), v);
    if (ec == std::errc() && p == digits.data() + digits.size()) return v;
  } else {
    try {
      std::size_t used = 0;
      const double v = std::stod(digits, &used);
      if (used == digits.size()) return v;
    } catch (const std::exception&) {
    }
  }
  fail(line, "cannot parse value '" + tok + "'");
}

using Binding = std::pair<std::function<void(const TomlEntry&, const std::string&)>, std::function<std::string()>>;

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  std::string s = buf;
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out + "\"";
}

Binding bind(int& ref) {
  return {[&ref](const TomlEntry& e, const std::string& key) {
            const auto* v = std::get_if<std::int64_t>(&e.value);
            if (!v || *v < INT32_MIN || *v > INT32_MAX) fail(e.line, key + " must be an integer");
            ref = static_cast<int>(*v);
          },
          [&ref] { return std::to_string(ref); }};
}

Binding bind(std::uint64_t& ref) {
  return {[&ref](const TomlEntry& e, const std::string& key) {
            const auto* v = std::get_if<std::int64_t>(&e.value);
            if (!v || *v < 0) fail(e.line, key + " must be a non-negative integer");
            ref = static_cast<std::uint64_t>(*v);
          },
          [&ref] { return std::to_string(ref); }};
}

Binding bind(double& ref) {
  return {[&ref](const TomlEntry& e, const std::string& key) {
            if (const auto* d = std::get_if<double>(&e.value)) {
              ref = *d;
            } else if (const auto* i = std::get_if<std::int64_t>(&e.value)) {
              ref = static_cast<double>(*i);
            } else {
              fail(e.line, key + " must be a number");
            }
          },
          [&ref] { return fmt_double(ref); }};
}

Binding bind(bool& ref) {
  return {[&ref](const TomlEntry& e, const std::string& key) {
            const auto* v = std::get_if<bool>(&e.value);
            if (!v) fail(e.line, key + " must be true or false");
            ref = *v;
          },
          [&ref] { return ref ? std::string("true") : std::string("false"); }};
}

Binding bind_side(progressive::Side& ref) {
  return {[&ref](const TomlEntry& e, const std::string& key) {
            const auto* v = std::get_if<std::string>(&e.value);
            if (!v) fail(e.line, key + " must be a string");
            try {
              ref = progressive::side_from_string(*v);
            } catch (const Error& err) {
              fail(e.line, err.what());
            }
          },
          [&ref] { return quote(progressive::to_string(ref)); }};
}

Binding bind_timeout(std::chrono::milliseconds& ref) {
  return {[&ref](const TomlEntry& e, const std::string& key) {
            const auto* v = std::get_if<std::int64_t>(&e.value);
            if (!v || *v <= 0) fail(e.line, key + " must be a positive integer");
            ref = std::chrono::milliseconds(*v);
          },
          [&ref] { return std::to_string(ref.count()); }};
}

// Ordered so to_toml() groups tables; keys without a dot come first.
std::vector<std::pair<std::string, Binding>> bindings(RunConfig& c) {
  return {
      {"seed", bind(c.seed)},
      {"threads", bind(c.threads)},
      {"desk_scale", bind(c.desk_scale)},
      {"synth.frames", bind(c.synth.frames)},
      {"synth.gaussians", bind(c.synth.gaussians)},
      {"synth.width", bind(c.synth.scene.width)},
      {"synth.height", bind(c.synth.scene.height)},
      {"synth.focal", bind(c.synth.scene.focal)},
      {"synth.frame_spacing", bind(c.synth.scene.frame_spacing)},
      {"synth.frame_interval", bind(c.synth.scene.frame_interval)},
      {"synth.corridor_half_width", bind(c.synth.scene.corridor_half_width)},
      {"synth.object_clearance", bind(c.synth.scene.object_clearance)},
      {"synth.ground_height", bind(c.synth.scene.ground_height)},
      {"synth.lookahead", bind(c.synth.scene.lookahead)},
      {"synth.lidar_jitter", bind(c.synth.scene.lidar_jitter)},
      {"synth.lidar_range", bind(c.synth.scene.lidar_range)},
      {"reconstruct.iterations", bind(c.reconstruct.iterations)},
      {"reconstruct.lr_position", bind(c.reconstruct.lr_position)},
      {"reconstruct.lr_logscale", bind(c.reconstruct.lr_logscale)},
      {"reconstruct.lr_quat", bind(c.reconstruct.lr_quat)},
      {"reconstruct.lr_opacity", bind(c.reconstruct.lr_opacity)},
      {"reconstruct.lr_color", bind(c.reconstruct.lr_color)},
      {"reconstruct.lambda_ssim", bind(c.reconstruct.lambda_ssim)},
      {"reconstruct.densify_interval", bind(c.reconstruct.densify_interval)},
      {"reconstruct.densify_until", bind(c.reconstruct.densify_until)},
      {"reconstruct.densify_grad_threshold", bind(c.reconstruct.densify_grad_threshold)},
      {"reconstruct.prune_opacity_threshold", bind(c.reconstruct.prune_opacity_threshold)},
      {"reconstruct.max_gaussians", bind(c.reconstruct.max_gaussians)},
      {"reconstruct.image_scale", bind(c.reconstruct.image_scale)},
      {"piecewise.segment_length", bind(c.piecewise.segment_length)},
      {"piecewise.holdout", bind(c.piecewise.holdout)},
      {"piecewise.min_tail", bind(c.piecewise.min_tail)},
      {"piecewise.iterations", bind(c.piecewise.iterations)},
      {"piecewise.rate_scale", bind(c.piecewise.rate_scale)},
      {"piecewise.image_scale", bind(c.piecewise.image_scale)},
      {"init.scale", bind(c.init.scale)},
      {"init.opacity", bind(c.init.opacity)},
      {"init.voxel", bind(c.init.voxel)},
      {"init.max_count", bind(c.init.max_count)},
      {"init.occlusion_test", bind(c.init.occlusion_test)},
      {"perturb.max_fraction", bind(c.perturb.max_fraction)},
      {"perturb.max_translation", bind(c.perturb.max_translation)},
      {"perturb.max_rotation", bind(c.perturb.max_rotation)},
      {"perturb.multiplicity", bind(c.perturb_multiplicity)},
      {"blend.alpha", bind(c.blend.alpha)},
      {"blend.probability", bind(c.blend.probability)},
      {"enhancer.ridge", bind(c.ridge)},
      {"enhancer.timeout_ms", bind_timeout(c.external.timeout)},
      {"enhancer.max_in_flight", bind(c.external.max_in_flight)},
      {"progressive.step_size", bind(c.expansion.step_size)},
      {"progressive.n_expansions", bind(c.expansion.n_expansions)},
      {"progressive.side", bind_side(c.expansion.side)},
      {"progressive.iterations_per_expansion", bind(c.expansion.iterations_per_expansion)},
      {"progressive.total_extra_iterations", bind(c.expansion.total_extra_iterations)},
  };
}

}  // namespace

TomlDocument parse_toml(const std::string& text) {
  TomlDocument doc;
  std::string table;
  std::istringstream in(text);
  std::string raw;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    std::string s = trim(raw);
    if (s.empty() || s[0] == '#') continue;
    if (s[0] == '[') {
      const auto close = s.find(']');
      if (close == std::string::npos) fail(line, "unterminated table header");
      const std::string after = trim(s.substr(close + 1));
      if (!after.empty() && after[0] != '#') fail(line, "text after table header");
      table = trim(s.substr(1, close - 1));
      if (!valid_key(table)) fail(line, "bad table name");
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) fail(line, "expected key = value");
    const std::string key = trim(s.substr(0, eq));
    if (!valid_key(key)) fail(line, "bad key '" + key + "'");
    std::string rest;
    TomlValue value = parse_value(trim(s.substr(eq + 1)), line, rest);
    rest = trim(rest);
    if (!rest.empty() && rest[0] != '#') fail(line, "unexpected text after value");
    const std::string full = table.empty() ? key : table + "." + key;
    if (!doc.emplace(full, TomlEntry{std::move(value), line}).second) fail(line, "duplicate key '" + full + "'");
  }
  return doc;
}

RunConfig RunConfig::defaults() {
  RunConfig c;
  c.reconstruct.iterations = 30000;
  c.reconstruct.max_gaussians = 1000000;
  c.expansion.n_expansions = 6;
  c.expansion.iterations_per_expansion = 5000;
  c.expansion.total_extra_iterations = 30000;
  return c;
}

void RunConfig::apply(const TomlDocument& doc) {
  auto table = bindings(*this);
  for (const auto& [key, entry] : doc) {
    auto it = std::find_if(table.begin(), table.end(), [&](const auto& b) { return b.first == key; });
    if (it == table.end()) fail(entry.line, "unknown key '" + key + "'");
    it->second.first(entry, key);
  }
}

void RunConfig::validate() const {
  if (!(desk_scale >= 1.0) || !std::isfinite(desk_scale)) {
    throw Error(ErrorCode::InvalidConfig, "desk_scale must be a finite number ≥ 1");
  }
  if (threads < 0) throw Error(ErrorCode::InvalidConfig, "threads must be ≥ 0");
  if (synth.frames < 2 || synth.gaussians < 1) throw Error(ErrorCode::InvalidConfig, "synth needs ≥ 2 frames and ≥ 1 Gaussian");
  synth.scene.validate();
  reconstruct_config().validate();
  piecewise_config().validate();
  if (piecewise.segment_length <= piecewise.holdout || piecewise.holdout < 0 || piecewise.min_tail < 1) {
    throw Error(ErrorCode::InvalidConfig, "piecewise needs segment_length > holdout ≥ 0 and min_tail ≥ 1");
  }
  if (!(init.scale > 0) || !(init.opacity > 0 && init.opacity < 1) || !(init.voxel >= 0) || init.max_count < 0) {
    throw Error(ErrorCode::InvalidConfig, "init settings out of range");
  }
  perturb.validate();
  if (perturb_multiplicity < 1) throw Error(ErrorCode::InvalidConfig, "perturb.multiplicity must be ≥ 1");
  blend.validate();
  if (!(ridge > 0)) throw Error(ErrorCode::InvalidConfig, "enhancer.ridge must be > 0");
  if (external.max_in_flight < 1) throw Error(ErrorCode::InvalidConfig, "enhancer.max_in_flight must be ≥ 1");
  expansion_plan().validate();
}

int RunConfig::scaled(int iterations) const {
  if (iterations <= 0) return iterations;
  return std::max(1, static_cast<int>(std::lround(iterations / desk_scale)));
}

recon::OptimConfig RunConfig::reconstruct_config() const {
  recon::OptimConfig c = reconstruct;
  c.iterations = scaled(reconstruct.iterations);
  return c;
}

recon::OptimConfig RunConfig::piecewise_config() const {
  recon::OptimConfig c = reconstruct.scaled_rates(piecewise.rate_scale);
  c.iterations = scaled(piecewise.iterations);
  c.image_scale = piecewise.image_scale;
  return c;
}

progressive::ExpansionPlan RunConfig::expansion_plan() const {
  progressive::ExpansionPlan p = expansion;
  p.iterations_per_expansion = scaled(expansion.iterations_per_expansion);
  p.total_extra_iterations = scaled(expansion.total_extra_iterations);
  // Rounding must not break n·per_expansion ≤ total when it held at full scale.
  if (static_cast<long long>(expansion.n_expansions) * expansion.iterations_per_expansion <=
      expansion.total_extra_iterations) {
    p.total_extra_iterations = std::max(p.total_extra_iterations, p.n_expansions * p.iterations_per_expansion);
  }
  return p;
}

std::string RunConfig::to_toml() const {
  auto table = bindings(const_cast<RunConfig&>(*this));
  std::string out, current;
  for (const auto& [key, b] : table) {
    const auto dot = key.find('.');
    const std::string section = dot == std::string::npos ? "" : key.substr(0, dot);
    if (section != current) {
      out += "\n[" + section + "]\n";
      current = section;
    }
    out += (dot == std::string::npos ? key : key.substr(dot + 1)) + " = " + b.second() + "\n";
  }
  return out;
}

std::string RunConfig::hash() const {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : to_toml()) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error(ErrorCode::MissingFile, "config not found: " + path.string());
  const auto bytes = read_file(path);
  RunConfig c = RunConfig::defaults();
  c.apply(parse_toml(std::string(bytes.begin(), bytes.end())));
  c.validate();
  return c;
}

}  // namespace freesim::config
