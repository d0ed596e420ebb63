#pragma once

#include <cstdint>

#include "freesim/scene.hpp"

namespace freesim {

// Layout of the procedural street: a straight forward trajectory down a corridor with
// walls, a ground plane, and roadside objects. Distances in meters.
struct SynthConfig {
  int width = 64;
  int height = 64;
  double focal = 48.0;
  double frame_spacing = 0.5;
  double frame_interval = 0.1;  // seconds between frames
  double corridor_half_width = 4.0;
  double object_clearance = 1.5;  // roadside objects keep at least this lateral distance from the path
  double ground_height = 1.5;   // camera frame y points down, so the ground sits at +y
  double lookahead = 20.0;      // scene extends this far past the last camera
  double lidar_jitter = 0.01;   // standard deviation of the uniform jitter
  double lidar_range = 40.0;
  Eigen::Vector3d background{0.55, 0.7, 0.9};

  void validate() const;
};

// Deterministic in (seed, n_gaussians, n_frames, config). Ground-truth images are rendered
// with the brute-force renderer and quantized to 8 bits so they match their PNG files.
SceneDataset make_synthetic_scene(std::uint64_t seed, int n_gaussians, int n_frames,
                                  const SynthConfig& config = {});

// Camera poses for a straight trajectory along world +z.
Trajectory straight_trajectory(int n_frames, const SynthConfig& config);

}  // namespace freesim
