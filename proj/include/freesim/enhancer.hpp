#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "freesim/datagen.hpp"
#include "freesim/image.hpp"
#include "freesim/scene.hpp"

namespace freesim::enhance {

struct EnhanceRequest {
  Image degraded;      // RGB
  Image lidar_pseudo;  // RGBA, or empty
  // Pose of the render; required by the oracle, informational otherwise.
  std::optional<CameraPose> pose;
  std::optional<CameraIntrinsics> intrinsics;

  void validate() const;
};

class Enhancer {
 public:
  virtual ~Enhancer() = default;
  virtual std::string name() const = 0;
  // Output has the request's dimensions with values in [0,1].
  virtual Image enhance(const EnhanceRequest& request) = 0;
  // Order-preserving batch; the default enhances one at a time.
  virtual std::vector<Image> enhance_all(std::span<const EnhanceRequest> requests);
};

// Passes the degraded image through (clamped).
class IdentityEnhancer final : public Enhancer {
 public:
  std::string name() const override { return "identity"; }
  Image enhance(const EnhanceRequest& request) override;
};

// Per-pixel features: degraded RGB, 3×3 mean of degraded RGB, LiDAR RGB, LiDAR validity, bias.
inline constexpr int kReferenceFeatures = 11;
using FeatureVector = Eigen::Matrix<double, kReferenceFeatures, 1>;
FeatureVector reference_features(const Image& degraded, const Image& lidar, int x, int y);

struct ReferenceModel {
  Eigen::Matrix<double, 3, kReferenceFeatures> weights = Eigen::Matrix<double, 3, kReferenceFeatures>::Zero();
  double ridge = 1e-6;
  std::string note;  // set when the solve needed a stronger ridge

  static ReferenceModel identity();
  std::string to_json() const;
  static ReferenceModel from_json(const std::string& text);
  void save(const std::filesystem::path& path) const;
  static ReferenceModel load(const std::filesystem::path& path);
};

// Ridge regression from features of (possibly blended) degraded and LiDAR images to the target,
// over every pixel of every triplet. Blending is drawn per triplet from the seed.
ReferenceModel train_reference(const datagen::DatasetManifest& manifest, const datagen::BlendConfig& blend,
                               std::uint64_t seed, double ridge = 1e-6);

class ReferenceEnhancer final : public Enhancer {
 public:
  explicit ReferenceEnhancer(ReferenceModel model) : model_(std::move(model)) {}
  std::string name() const override { return "reference"; }
  Image enhance(const EnhanceRequest& request) override;
  const ReferenceModel& model() const { return model_; }

 private:
  ReferenceModel model_;
};

// Renders the ground-truth field at the request pose. Synthetic scenes only.
class OracleEnhancer final : public Enhancer {
 public:
  explicit OracleEnhancer(GaussianField ground_truth) : field_(std::move(ground_truth)) {}
  std::string name() const override { return "oracle"; }
  Image enhance(const EnhanceRequest& request) override;

 private:
  GaussianField field_;
};

struct ExternalOptions {
  std::chrono::milliseconds timeout{120000};  // per request
  int max_in_flight = 1;
};

// Client for an enhancer speaking the FSEN protocol over TCP or a child process's stdio.
class ExternalEnhancer final : public Enhancer {
 public:
  // "host:port"
  static std::unique_ptr<ExternalEnhancer> connect_tcp(const std::string& address, ExternalOptions options = {});
  // argv[0] is resolved through PATH.
  static std::unique_ptr<ExternalEnhancer> spawn(const std::vector<std::string>& argv, ExternalOptions options = {});
  ~ExternalEnhancer() override;

  std::string name() const override { return "external"; }
  Image enhance(const EnhanceRequest& request) override;
  std::vector<Image> enhance_all(std::span<const EnhanceRequest> requests) override;

 private:
  struct Impl;
  explicit ExternalEnhancer(std::unique_ptr<Impl> impl);
  std::unique_ptr<Impl> impl_;
};

// Applies the enhancer to final renders, order preserved.
std::vector<Image> post_enhance(std::span<const EnhanceRequest> renders, Enhancer& enhancer);

}  // namespace freesim::enhance
