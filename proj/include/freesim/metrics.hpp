#pragma once

#include <Eigen/Core>

#include <span>
#include <string>
#include <vector>

#include "freesim/image.hpp"

namespace freesim::metrics {

inline constexpr double kPsnrCap = 99.0;

// 10·log10(1/MSE) over all channels, capped at 99 dB when MSE < 1e-10.
double psnr(const Image& a, const Image& b);

// Mean SSIM over all fully-contained 11×11 Gaussian windows (σ = 1.5) and channels.
inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

double ssim(const Image& a, const Image& b);

// SSIM together with d SSIM / d a.
struct SsimResult {
  double value = 0.0;
  Image grad_a;
};
SsimResult ssim_with_gradient(const Image& a, const Image& b);

// 4×4 grid over a 64×64 resample; per cell mean R, G, B and luminance std.
inline constexpr int kFeatureDim = 64;
Eigen::VectorXd extract_features(const Image& img);

struct GaussianStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;
};

inline constexpr double kCovarianceRegularizer = 1e-6;

// Sample mean and (n-1)-normalized covariance of the rows, plus the diagonal regularizer.
GaussianStats fit_stats(std::span<const Eigen::VectorXd> features);

// Principal square root of a symmetric PSD matrix via eigendecomposition (negative
// eigenvalues clamped to zero).
Eigen::MatrixXd sqrt_psd(const Eigen::MatrixXd& m);

// Squared Fréchet distance between two Gaussians.
double frechet_distance(const GaussianStats& s1, const GaussianStats& s2);

// Fréchet distance between feature Gaussians of two image sets. Sets smaller than
// kFeatureDim + 1 images have rank-deficient covariances; a warning is written to stderr.
double fid_proxy(std::span<const Image> set_a, std::span<const Image> set_b);

}  // namespace freesim::metrics
