#include "freesim/enhancer.hpp"

#include <fcntl.h>
#include <netdb.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cerrno>
#include <cstring>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "freesim/error.hpp"
#include "freesim/parallel.hpp"
#include "freesim/protocol.hpp"
#include "freesim/rasterizer.hpp"
#include "freesim/scene_io.hpp"

namespace freesim::enhance {

using nlohmann::json;

void EnhanceRequest::validate() const {
  if (degraded.empty() || degraded.channels() != 3) {
    throw Error(ErrorCode::DimensionMismatch, "enhance request needs an RGB degraded image");
  }
  if (!lidar_pseudo.empty() &&
      (lidar_pseudo.channels() != 4 || lidar_pseudo.width() != degraded.width() ||
       lidar_pseudo.height() != degraded.height())) {
    throw Error(ErrorCode::DimensionMismatch, "LiDAR pseudo-image must be RGBA at the degraded size");
  }
  if (intrinsics && (intrinsics->width != degraded.width() || intrinsics->height != degraded.height())) {
    throw Error(ErrorCode::DimensionMismatch, "request intrinsics do not match the degraded image");
  }
}

std::vector<Image> Enhancer::enhance_all(std::span<const EnhanceRequest> requests) {
  std::vector<Image> out;
  out.reserve(requests.size());
  for (const auto& r : requests) out.push_back(enhance(r));
  return out;
}

Image IdentityEnhancer::enhance(const EnhanceRequest& request) {
  request.validate();
  return clamp01(request.degraded);
}

FeatureVector reference_features(const Image& degraded, const Image& lidar, int x, int y) {
  FeatureVector f = FeatureVector::Zero();
  for (int c = 0; c < 3; ++c) f[c] = degraded.at(x, y, c);
  int n = 0;
  for (int dy = -1; dy <= 1; ++dy) {
    for (int dx = -1; dx <= 1; ++dx) {
      const int xx = x + dx, yy = y + dy;
      if (xx < 0 || yy < 0 || xx >= degraded.width() || yy >= degraded.height()) continue;
      for (int c = 0; c < 3; ++c) f[3 + c] += degraded.at(xx, yy, c);
      ++n;
    }
  }
  f.segment<3>(3) /= n;
  if (!lidar.empty()) {
    for (int c = 0; c < 3; ++c) f[6 + c] = lidar.at(x, y, c);
    f[9] = lidar.at(x, y, 3);
  }
  f[10] = 1.0;
  return f;
}

ReferenceModel ReferenceModel::identity() {
  ReferenceModel m;
  for (int c = 0; c < 3; ++c) m.weights(c, c) = 1.0;
  return m;
}

std::string ReferenceModel::to_json() const {
  json w = json::array();
  for (int r = 0; r < 3; ++r) {
    json row = json::array();
    for (int k = 0; k < kReferenceFeatures; ++k) row.push_back(weights(r, k));
    w.push_back(row);
  }
  json doc = {{"version", 1},
              {"features", {"r", "g", "b", "mean_r", "mean_g", "mean_b", "lidar_r", "lidar_g", "lidar_b",
                            "lidar_valid", "bias"}},
              {"weights", w},
              {"ridge", ridge},
              {"note", note}};
  return doc.dump(2) + "\n";
}

ReferenceModel ReferenceModel::from_json(const std::string& text) {
  ReferenceModel m;
  try {
    const json doc = json::parse(text);
    if (doc.at("version").get<int>() != 1) throw Error(ErrorCode::VersionUnsupported, "unsupported model version");
    const auto& w = doc.at("weights");
    if (w.size() != 3) throw Error(ErrorCode::MalformedManifest, "model needs 3 weight rows");
    for (int r = 0; r < 3; ++r) {
      if (w[r].size() != kReferenceFeatures) throw Error(ErrorCode::MalformedManifest, "model row has wrong length");
      for (int k = 0; k < kReferenceFeatures; ++k) m.weights(r, k) = w[r][k].get<double>();
    }
    m.ridge = doc.value("ridge", 1e-6);
    m.note = doc.value("note", "");
  } catch (const json::exception& e) {
    throw Error(ErrorCode::MalformedManifest, std::string("bad model file: ") + e.what());
  }
  if (!m.weights.allFinite()) throw Error(ErrorCode::NonFiniteParameter, "model weights are not finite");
  return m;
}

void ReferenceModel::save(const std::filesystem::path& path) const { write_text(path, to_json()); }

ReferenceModel ReferenceModel::load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error(ErrorCode::MissingFile, "missing model " + path.string());
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

ReferenceModel train_reference(const datagen::DatasetManifest& manifest, const datagen::BlendConfig& blend,
                               std::uint64_t seed, double ridge) {
  blend.validate();
  if (manifest.triplets.empty()) throw Error(ErrorCode::EmptyDataset, "no triplets to train on");
  using Gram = Eigen::Matrix<double, kReferenceFeatures, kReferenceFeatures>;
  using Rhs = Eigen::Matrix<double, kReferenceFeatures, 3>;

  std::mt19937_64 rng(seed);
  std::bernoulli_distribution coin(blend.probability);
  std::vector<bool> blended(manifest.triplets.size());
  for (std::size_t i = 0; i < blended.size(); ++i) blended[i] = coin(rng);

  std::vector<Gram> grams(manifest.triplets.size(), Gram::Zero());
  std::vector<Rhs> rhs(manifest.triplets.size(), Rhs::Zero());
  parallel_for(manifest.triplets.size(), [&](std::size_t i) {
    auto t = datagen::load_triplet(manifest, i);
    const Image degraded = blended[i] ? datagen::blend_images(t.degraded, t.target, blend.alpha) : t.degraded;
    for (int y = 0; y < t.target.height(); ++y) {
      for (int x = 0; x < t.target.width(); ++x) {
        const FeatureVector f = reference_features(degraded, t.lidar_pseudo, x, y);
        grams[i].noalias() += f * f.transpose();
        for (int c = 0; c < 3; ++c) rhs[i].col(c) += f * t.target.at(x, y, c);
      }
    }
  });
  Gram a = Gram::Zero();
  Rhs b = Rhs::Zero();
  for (std::size_t i = 0; i < grams.size(); ++i) {
    a += grams[i];
    b += rhs[i];
  }

  ReferenceModel model;
  model.ridge = ridge;
  auto solve = [&](double lambda) -> std::optional<Rhs> {
    const Eigen::LDLT<Gram> ldlt(a + lambda * Gram::Identity());
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) return std::nullopt;
    Rhs w = ldlt.solve(b);
    if (!w.allFinite()) return std::nullopt;
    return w;
  };
  auto w = solve(ridge);
  if (!w) {
    const double fallback = 1e-3 * (a.trace() / kReferenceFeatures + 1.0);
    w = solve(fallback);
    if (!w) throw Error(ErrorCode::SingularSystem, "ridge system could not be solved");
    model.ridge = fallback;
    model.note = "normal equations ill-conditioned; ridge raised to " + std::to_string(fallback);
  }
  model.weights = w->transpose();
  return model;
}

Image ReferenceEnhancer::enhance(const EnhanceRequest& request) {
  request.validate();
  const Image& d = request.degraded;
  Image out(d.width(), d.height(), 3);
  for (int y = 0; y < d.height(); ++y) {
    for (int x = 0; x < d.width(); ++x) {
      const Eigen::Vector3d v = model_.weights * reference_features(d, request.lidar_pseudo, x, y);
      for (int c = 0; c < 3; ++c) out.at(x, y, c) = std::clamp(v[c], 0.0, 1.0);
    }
  }
  return out;
}

Image OracleEnhancer::enhance(const EnhanceRequest& request) {
  request.validate();
  if (!request.pose || !request.intrinsics) {
    throw Error(ErrorCode::InvalidConfig, "the oracle enhancer needs the request pose and intrinsics");
  }
  return clamp01(raster::rasterize(field_, *request.pose, *request.intrinsics).color);
}

// ---------------------------------------------------------------------------------------------
// External client

struct ExternalEnhancer::Impl {
  int read_fd = -1;
  int write_fd = -1;
  pid_t child = -1;
  bool socket = false;
  bool broken = false;
  std::uint64_t next_id = 1;
  ExternalOptions options;
  std::optional<protocol::Stream> stream;

  ~Impl() {
    if (read_fd >= 0) ::close(read_fd);
    if (write_fd >= 0 && write_fd != read_fd) ::close(write_fd);
    if (child > 0) {
      // Closing stdin asks the child to exit; give it a moment before forcing it.
      for (int i = 0; i < 100; ++i) {
        if (::waitpid(child, nullptr, WNOHANG) == child) return;
        std::this_thread::sleep_for(std::chrono::milliseconds(10));
      }
      ::kill(child, SIGKILL);
      ::waitpid(child, nullptr, 0);
    }
  }

  void open() {
    stream.emplace(read_fd, write_fd, socket);
    stream->send_handshake();
    stream->expect_handshake(protocol::Stream::Clock::now() + options.timeout);
  }
};

ExternalEnhancer::ExternalEnhancer(std::unique_ptr<Impl> impl) : impl_(std::move(impl)) {}
ExternalEnhancer::~ExternalEnhancer() = default;

std::unique_ptr<ExternalEnhancer> ExternalEnhancer::connect_tcp(const std::string& address,
                                                                ExternalOptions options) {
  if (options.max_in_flight < 1) throw Error(ErrorCode::InvalidConfig, "max_in_flight must be at least 1");
  const auto colon = address.rfind(':');
  if (colon == std::string::npos) throw Error(ErrorCode::InvalidConfig, "expected host:port, got " + address);
  const std::string host = address.substr(0, colon), port = address.substr(colon + 1);
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* found = nullptr;
  if (::getaddrinfo(host.c_str(), port.c_str(), &hints, &found) != 0 || !found) {
    throw Error(ErrorCode::IoError, "cannot resolve " + address);
  }
  int fd = -1;
  for (addrinfo* a = found; a; a = a->ai_next) {
    fd = ::socket(a->ai_family, a->ai_socktype | SOCK_CLOEXEC, a->ai_protocol);
    if (fd < 0) continue;
    if (::connect(fd, a->ai_addr, a->ai_addrlen) == 0) break;
    ::close(fd);
    fd = -1;
  }
  ::freeaddrinfo(found);
  if (fd < 0) throw Error(ErrorCode::IoError, "cannot connect to " + address);
  auto impl = std::make_unique<Impl>();
  impl->read_fd = impl->write_fd = fd;
  impl->socket = true;
  impl->options = options;
  impl->open();
  return std::unique_ptr<ExternalEnhancer>(new ExternalEnhancer(std::move(impl)));
}

std::unique_ptr<ExternalEnhancer> ExternalEnhancer::spawn(const std::vector<std::string>& argv,
                                                          ExternalOptions options) {
  if (argv.empty()) throw Error(ErrorCode::InvalidConfig, "empty enhancer command");
  if (options.max_in_flight < 1) throw Error(ErrorCode::InvalidConfig, "max_in_flight must be at least 1");
  int to_child[2], from_child[2];
  if (::pipe2(to_child, O_CLOEXEC) != 0) throw Error(ErrorCode::IoError, "pipe failed");
  if (::pipe2(from_child, O_CLOEXEC) != 0) {
    ::close(to_child[0]);
    ::close(to_child[1]);
    throw Error(ErrorCode::IoError, "pipe failed");
  }
  // A dead child must surface as an error, not kill this process.
  ::signal(SIGPIPE, SIG_IGN);

  std::vector<char*> args;
  for (const auto& a : argv) args.push_back(const_cast<char*>(a.c_str()));
  args.push_back(nullptr);
  const pid_t pid = ::fork();
  if (pid < 0) throw Error(ErrorCode::IoError, "fork failed");
  if (pid == 0) {
    ::dup2(to_child[0], STDIN_FILENO);
    ::dup2(from_child[1], STDOUT_FILENO);
    ::execvp(args[0], args.data());
    ::_exit(127);
  }
  ::close(to_child[0]);
  ::close(from_child[1]);
  auto impl = std::make_unique<Impl>();
  impl->child = pid;
  impl->read_fd = from_child[0];
  impl->write_fd = to_child[1];
  impl->options = options;
  impl->open();
  return std::unique_ptr<ExternalEnhancer>(new ExternalEnhancer(std::move(impl)));
}

Image ExternalEnhancer::enhance(const EnhanceRequest& request) {
  return enhance_all(std::span<const EnhanceRequest>(&request, 1)).front();
}

std::vector<Image> ExternalEnhancer::enhance_all(std::span<const EnhanceRequest> requests) {
  if (impl_->broken) throw Error(ErrorCode::ProtocolError, "enhancer connection is no longer usable");
  for (const auto& r : requests) r.validate();
  using Clock = protocol::Stream::Clock;
  struct Pending {
    std::size_t index;
    std::uint32_t width, height;
    Clock::time_point deadline;
  };
  std::map<std::uint64_t, Pending> pending;
  std::vector<Image> out(requests.size());
  std::size_t sent = 0, received = 0;
  try {
    while (received < requests.size()) {
      while (sent < requests.size() && static_cast<int>(pending.size()) < impl_->options.max_in_flight) {
        const auto& r = requests[sent];
        protocol::Request wire;
        wire.id = impl_->next_id++;
        wire.width = static_cast<std::uint32_t>(r.degraded.width());
        wire.height = static_cast<std::uint32_t>(r.degraded.height());
        wire.rgb = protocol::to_bytes(r.degraded);
        if (!r.lidar_pseudo.empty()) wire.rgba = protocol::to_bytes(r.lidar_pseudo);
        impl_->stream->write_all(protocol::encode_request(wire));
        pending.emplace(wire.id, Pending{sent, wire.width, wire.height, Clock::now() + impl_->options.timeout});
        ++sent;
      }
      auto earliest = Clock::time_point::max();
      for (const auto& [id, p] : pending) earliest = std::min(earliest, p.deadline);
      const auto resp = impl_->stream->read_response(
          [&](std::uint64_t id) -> std::optional<std::pair<std::uint32_t, std::uint32_t>> {
            const auto it = pending.find(id);
            if (it == pending.end()) return std::nullopt;
            return std::make_pair(it->second.width, it->second.height);
          },
          earliest);
      const auto it = pending.find(resp.id);
      if (resp.status != 0) {
        throw Error(ErrorCode::ProtocolError, "enhancer reported an error: " + resp.message);
      }
      out[it->second.index] = protocol::from_bytes(resp.rgb, it->second.width, it->second.height, 3);
      pending.erase(it);
      ++received;
    }
  } catch (...) {
    impl_->broken = true;
    throw;
  }
  return out;
}

std::vector<Image> post_enhance(std::span<const EnhanceRequest> renders, Enhancer& enhancer) {
  return enhancer.enhance_all(renders);
}

}  // namespace freesim::enhance
