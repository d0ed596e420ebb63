#include "freesim/metrics.hpp"

#include <Eigen/Eigenvalues>

#include <array>
#include <cmath>
#include <iostream>

#include "freesim/error.hpp"
#include "freesim/parallel.hpp"

namespace freesim::metrics {

double psnr(const Image& a, const Image& b) {
  require_same_shape(a, b, "psnr");
  if (a.empty()) throw Error(ErrorCode::DimensionMismatch, "psnr of empty images");
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.data()[i] - b.data()[i];
    sum += d * d;
  }
  const double mse = sum / static_cast<double>(a.size());
  if (mse < 1e-10) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

namespace {

std::array<double, kSsimWindow> gaussian_kernel() {
  std::array<double, kSsimWindow> k{};
  double sum = 0.0;
  for (int i = 0; i < kSsimWindow; ++i) {
    const double d = i - kSsimWindow / 2;
    k[i] = std::exp(-d * d / (2.0 * kSsimSigma * kSsimSigma));
    sum += k[i];
  }
  for (double& v : k) v /= sum;
  return k;
}

// Single-channel plane helpers. "valid" filtering maps W×H to (W-10)×(H-10).
struct Plane {
  int w = 0, h = 0;
  std::vector<double> v;
  Plane(int w_, int h_) : w(w_), h(h_), v(static_cast<std::size_t>(w_) * h_, 0.0) {}
  double& at(int x, int y) { return v[static_cast<std::size_t>(y) * w + x]; }
  double at(int x, int y) const { return v[static_cast<std::size_t>(y) * w + x]; }
};

Plane filter_valid(const Plane& in) {
  static const auto k = gaussian_kernel();
  const int r = kSsimWindow;
  Plane tmp(in.w - r + 1, in.h);
  for (int y = 0; y < in.h; ++y)
    for (int x = 0; x < tmp.w; ++x) {
      double s = 0.0;
      for (int i = 0; i < r; ++i) s += k[i] * in.at(x + i, y);
      tmp.at(x, y) = s;
    }
  Plane out(tmp.w, in.h - r + 1);
  for (int y = 0; y < out.h; ++y)
    for (int x = 0; x < out.w; ++x) {
      double s = 0.0;
      for (int i = 0; i < r; ++i) s += k[i] * tmp.at(x, y + i);
      out.at(x, y) = s;
    }
  return out;
}

// Adjoint of filter_valid: scatters a window-location map back onto image pixels.
Plane filter_adjoint(const Plane& in, int w, int h) {
  static const auto k = gaussian_kernel();
  const int r = kSsimWindow;
  Plane tmp(in.w, h);
  for (int y = 0; y < in.h; ++y)
    for (int x = 0; x < in.w; ++x)
      for (int i = 0; i < r; ++i) tmp.at(x, y + i) += k[i] * in.at(x, y);
  Plane out(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < tmp.w; ++x)
      for (int i = 0; i < r; ++i) out.at(x + i, y) += k[i] * tmp.at(x, y);
  return out;
}

Plane channel(const Image& img, int c) {
  Plane p(img.width(), img.height());
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) p.at(x, y) = img.at(x, y, c);
  return p;
}

Plane product(const Plane& a, const Plane& b) {
  Plane p(a.w, a.h);
  for (std::size_t i = 0; i < p.v.size(); ++i) p.v[i] = a.v[i] * b.v[i];
  return p;
}

SsimResult ssim_impl(const Image& a, const Image& b, bool want_grad) {
  require_same_shape(a, b, "ssim");
  if (a.width() < kSsimWindow || a.height() < kSsimWindow) {
    throw Error(ErrorCode::ImageTooSmall, "ssim needs at least 11x11 pixels");
  }
  SsimResult result;
  if (want_grad) result.grad_a = Image(a.width(), a.height(), a.channels());
  const int vw = a.width() - kSsimWindow + 1, vh = a.height() - kSsimWindow + 1;
  const double count = static_cast<double>(vw) * vh * a.channels();
  double total = 0.0;
  for (int c = 0; c < a.channels(); ++c) {
    const Plane pa = channel(a, c), pb = channel(b, c);
    const Plane mu_a = filter_valid(pa), mu_b = filter_valid(pb);
    const Plane e_aa = filter_valid(product(pa, pa)), e_bb = filter_valid(product(pb, pb));
    const Plane e_ab = filter_valid(product(pa, pb));
    Plane coef_p(vw, vh), coef_q(vw, vh), coef_r(vw, vh);
    for (std::size_t i = 0; i < mu_a.v.size(); ++i) {
      const double ma = mu_a.v[i], mb = mu_b.v[i];
      const double var_a = e_aa.v[i] - ma * ma, var_b = e_bb.v[i] - mb * mb;
      const double cov = e_ab.v[i] - ma * mb;
      const double a1 = 2.0 * ma * mb + kSsimC1, a2 = 2.0 * cov + kSsimC2;
      const double b1 = ma * ma + mb * mb + kSsimC1, b2 = var_a + var_b + kSsimC2;
      const double s = (a1 * a2) / (b1 * b2);
      total += s;
      if (want_grad) {
        // dS/da_k = w_k·(P + Q·b_k − R·a_k), then scaled by 1/count for the mean.
        coef_p.v[i] = (s * (2.0 * mb / a1 - 2.0 * ma / b1) - s * 2.0 * mb / a2 + s * 2.0 * ma / b2) / count;
        coef_q.v[i] = 2.0 * s / a2 / count;
        coef_r.v[i] = 2.0 * s / b2 / count;
      }
    }
    if (want_grad) {
      const Plane gp = filter_adjoint(coef_p, a.width(), a.height());
      const Plane gq = filter_adjoint(coef_q, a.width(), a.height());
      const Plane gr = filter_adjoint(coef_r, a.width(), a.height());
      for (int y = 0; y < a.height(); ++y)
        for (int x = 0; x < a.width(); ++x)
          result.grad_a.at(x, y, c) = gp.at(x, y) + gq.at(x, y) * pb.at(x, y) - gr.at(x, y) * pa.at(x, y);
    }
  }
  result.value = total / count;
  return result;
}

}  // namespace

double ssim(const Image& a, const Image& b) { return ssim_impl(a, b, false).value; }

SsimResult ssim_with_gradient(const Image& a, const Image& b) { return ssim_impl(a, b, true); }

Eigen::VectorXd extract_features(const Image& img) {
  if (img.channels() < 3) throw Error(ErrorCode::DimensionMismatch, "features need RGB input");
  const Image small = resize(img, 64, 64);
  Eigen::VectorXd f(kFeatureDim);
  int k = 0;
  for (int cy = 0; cy < 4; ++cy) {
    for (int cx = 0; cx < 4; ++cx) {
      double r = 0, g = 0, b = 0, l = 0, l2 = 0;
      for (int y = cy * 16; y < (cy + 1) * 16; ++y) {
        for (int x = cx * 16; x < (cx + 1) * 16; ++x) {
          const double pr = small.at(x, y, 0), pg = small.at(x, y, 1), pb = small.at(x, y, 2);
          const double lum = 0.299 * pr + 0.587 * pg + 0.114 * pb;
          r += pr;
          g += pg;
          b += pb;
          l += lum;
          l2 += lum * lum;
        }
      }
      constexpr double n = 256.0;
      const double mean_l = l / n;
      f[k++] = r / n;
      f[k++] = g / n;
      f[k++] = b / n;
      f[k++] = std::sqrt(std::max(0.0, l2 / n - mean_l * mean_l));
    }
  }
  return f;
}

GaussianStats fit_stats(std::span<const Eigen::VectorXd> features) {
  if (features.empty()) throw Error(ErrorCode::EmptySet, "no feature vectors");
  const Eigen::Index dim = features.front().size();
  GaussianStats stats;
  stats.mean = Eigen::VectorXd::Zero(dim);
  for (const auto& f : features) stats.mean += f;
  stats.mean /= static_cast<double>(features.size());
  stats.covariance = Eigen::MatrixXd::Zero(dim, dim);
  for (const auto& f : features) {
    const Eigen::VectorXd d = f - stats.mean;
    stats.covariance.noalias() += d * d.transpose();
  }
  if (features.size() > 1) stats.covariance /= static_cast<double>(features.size() - 1);
  stats.covariance = 0.5 * (stats.covariance + stats.covariance.transpose());
  stats.covariance.diagonal().array() += kCovarianceRegularizer;
  return stats;
}

Eigen::MatrixXd sqrt_psd(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (m + m.transpose()));
  const Eigen::VectorXd root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * root.asDiagonal() * eig.eigenvectors().transpose();
}

namespace {

void require_psd(const Eigen::MatrixXd& m, const char* which) {
  if (m.rows() != m.cols()) throw Error(ErrorCode::NonPSD, std::string(which) + " is not square");
  if (!(m - m.transpose()).isZero(1e-9 * std::max(1.0, m.cwiseAbs().maxCoeff()))) {
    throw Error(ErrorCode::NonPSD, std::string(which) + " is not symmetric");
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m, Eigen::EigenvaluesOnly);
  const double tol = 1e-12 * std::max(1.0, eig.eigenvalues().cwiseAbs().maxCoeff());
  if (eig.eigenvalues().minCoeff() < -tol) {
    throw Error(ErrorCode::NonPSD, std::string(which) + " has a negative eigenvalue");
  }
}

}  // namespace

double frechet_distance(const GaussianStats& s1, const GaussianStats& s2) {
  if (s1.mean.size() != s2.mean.size() || s1.covariance.rows() != s1.mean.size() ||
      s2.covariance.rows() != s2.mean.size()) {
    throw Error(ErrorCode::DimensionMismatch, "frechet_distance dimensions");
  }
  require_psd(s1.covariance, "covariance 1");
  require_psd(s2.covariance, "covariance 2");
  const Eigen::MatrixXd root1 = sqrt_psd(s1.covariance);
  const Eigen::MatrixXd inner = root1 * s2.covariance * root1;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
  const double trace_sqrt = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double d2 = (s1.mean - s2.mean).squaredNorm() + s1.covariance.trace() + s2.covariance.trace() -
                    2.0 * trace_sqrt;
  return std::max(0.0, d2);
}

double fid_proxy(std::span<const Image> set_a, std::span<const Image> set_b) {
  if (set_a.empty() || set_b.empty()) throw Error(ErrorCode::EmptySet, "fid_proxy needs two non-empty sets");
  if (set_a.size() <= kFeatureDim || set_b.size() <= kFeatureDim) {
    std::cerr << "warning: fid_proxy on " << set_a.size() << " and " << set_b.size()
              << " images; covariance is rank-deficient and the regularizer dominates\n";
  }
  auto features = [](std::span<const Image> set) {
    std::vector<Eigen::VectorXd> f(set.size());
    parallel_for(set.size(), [&](std::size_t i) { f[i] = extract_features(set[i]); });
    return f;
  };
  const auto fa = features(set_a), fb = features(set_b);
  return frechet_distance(fit_stats(fa), fit_stats(fb));
}

}  // namespace freesim::metrics
