#include <doctest.h>

#include <signal.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <netinet/in.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cmath>
#include <fstream>
#include <thread>

#include "freesim/enhancer.hpp"
#include "freesim/error.hpp"
#include "freesim/metrics.hpp"
#include "freesim/protocol.hpp"
#include "freesim/rasterizer.hpp"
#include "freesim/synthetic.hpp"
#include "test_support.hpp"

using namespace freesim;
using namespace freesim::enhance;

namespace {

double rmse(const Image& a, const Image& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a.data()[i] - b.data()[i]) * (a.data()[i] - b.data()[i]);
  return std::sqrt(s / a.size());
}

// Smooth random image with values on the 8-bit grid; `levels_step` 2 keeps every value even.
Image grid_image(std::uint64_t seed, int w, int h, int channels, int levels_step = 1) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double fx = 0.1 + 0.3 * u(rng), fy = 0.1 + 0.3 * u(rng), ph = 6.0 * u(rng);
  Image img(w, h, channels);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < channels; ++c) {
        const double v = 0.5 + 0.45 * std::sin(fx * x + fy * y + ph + c) * (0.6 + 0.4 * u(rng));
        const int level = static_cast<int>(std::lround(v * 254.0 / levels_step)) * levels_step;
        img.at(x, y, c) = level / 255.0;
      }
  return img;
}

Image sparse_lidar(std::uint64_t seed, int w, int h) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image img(w, h, 4, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (u(rng) < 0.05) {
        for (int c = 0; c < 3; ++c) img.at(x, y, c) = std::round(u(rng) * 255.0) / 255.0;
        img.at(x, y, 3) = 1.0;
      }
  return img;
}

// Writes triplets (degraded_fn(target), lidar, target) and returns their manifest.
template <typename Fn>
datagen::DatasetManifest write_dataset(const std::filesystem::path& dir, int count, Fn degrade) {
  std::filesystem::create_directories(dir);
  datagen::DatasetManifest m;
  m.root = dir;
  for (int i = 0; i < count; ++i) {
    const Image target = grid_image(100 + i, 24, 20, 3, 2);
    const std::string tag = std::to_string(i);
    write_png(dir / ("d" + tag + ".png"), degrade(target));
    write_png(dir / ("l" + tag + ".png"), sparse_lidar(200 + i, 24, 20));
    write_png(dir / ("t" + tag + ".png"), target);
    datagen::TripletRecord r;
    r.degraded = "d" + tag + ".png";
    r.lidar = "l" + tag + ".png";
    r.target = "t" + tag + ".png";
    r.frame = i;
    m.triplets.push_back(r);
  }
  datagen::save_manifest(m, dir / "manifest.json");
  return m;
}

EnhanceRequest request_for(const Image& degraded, const Image& lidar = {}) {
  EnhanceRequest r;
  r.degraded = degraded;
  r.lidar_pseudo = lidar;
  return r;
}

// Starts the echo fixture as a TCP server and stops it on scope exit.
class EchoServer {
 public:
  explicit EchoServer(std::vector<std::string> extra = {}) : dir_("echo") {
    const auto port_file = (dir_.path() / "port").string();
    std::vector<std::string> argv{FSEN_ECHO_PATH, "--listen", "0", "--port-file", port_file};
    argv.insert(argv.end(), extra.begin(), extra.end());
    pid_ = ::fork();
    if (pid_ == 0) {
      std::vector<char*> args;
      for (auto& a : argv) args.push_back(a.data());
      args.push_back(nullptr);
      ::execv(args[0], args.data());
      ::_exit(127);
    }
    for (int i = 0; i < 500 && !std::filesystem::exists(port_file); ++i)
      std::this_thread::sleep_for(std::chrono::milliseconds(10));
    std::ifstream(port_file) >> port_;
  }
  ~EchoServer() {
    ::kill(pid_, SIGTERM);
    ::waitpid(pid_, nullptr, 0);
  }
  std::string address() const { return "127.0.0.1:" + std::to_string(port_); }
  int port() const { return port_; }

 private:
  testing::TempDir dir_;
  pid_t pid_ = -1;
  int port_ = 0;
};

std::vector<EnhanceRequest> random_requests(int n) {
  std::vector<EnhanceRequest> out;
  for (int i = 0; i < n; ++i) {
    const int w = 8 + 5 * i, h = 6 + 3 * i;
    out.push_back(request_for(grid_image(i, w, h, 3), i % 2 ? sparse_lidar(i, w, h) : Image{}));
  }
  return out;
}

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an Error");
  return ErrorCode::IoError;
}

}  // namespace

TEST_CASE("reference model learns identity") {
  testing::TempDir dir("identity");
  const auto m = write_dataset(dir.path(), 6, [](const Image& t) { return t; });
  const auto model = train_reference(m, datagen::BlendConfig{}, 1);
  ReferenceEnhancer enh(model);
  const Image probe = grid_image(999, 30, 17, 3);
  CHECK(rmse(enh.enhance(request_for(probe, sparse_lidar(5, 30, 17))), probe) < 1e-3);
  CHECK(rmse(post_enhance(std::vector{request_for(probe)}, enh).front(), probe) < 1e-3);
}

TEST_CASE("reference model learns a global gain") {
  testing::TempDir dir("gain");
  const auto m = write_dataset(dir.path(), 6, [](const Image& t) {
    Image d = t;
    for (double& v : d.data()) v *= 0.5;
    return d;
  });
  const auto model = train_reference(m, datagen::BlendConfig{0.5, 0.0}, 1);
  ReferenceEnhancer enh(model);
  const Image target = grid_image(555, 24, 20, 3, 2);
  Image degraded = target;
  for (double& v : degraded.data()) v *= 0.5;
  CHECK(rmse(enh.enhance(request_for(degraded, sparse_lidar(9, 24, 20))), target) < 1e-3);
}

TEST_CASE("reference training is deterministic and round-trips") {
  testing::TempDir dir("determinism");
  const auto m = write_dataset(dir.path(), 5, [](const Image& t) {
    Image d = t;
    for (double& v : d.data()) v = std::round((0.8 * v + 0.1) * 255.0) / 255.0;
    return d;
  });
  const datagen::BlendConfig blend{0.5, 0.5};
  const auto a = train_reference(m, blend, 3);
  const auto b = train_reference(m, blend, 3);
  CHECK(a.weights == b.weights);
  CHECK(a.to_json() == b.to_json());
  const auto back = ReferenceModel::from_json(a.to_json());
  CHECK(back.weights == a.weights);
  a.save(dir.path() / "model.json");
  CHECK(ReferenceModel::load(dir.path() / "model.json").weights == a.weights);
}

TEST_CASE("reference training errors") {
  datagen::DatasetManifest empty;
  CHECK(code_of([&] { train_reference(empty, datagen::BlendConfig{}, 1); }) == ErrorCode::EmptyDataset);
  CHECK_THROWS_AS(ReferenceModel::from_json("{\"version\": 1, \"weights\": [[1]]}"), Error);
}

TEST_CASE("enhancer outputs are clamped and sized like the input") {
  ReferenceModel m = ReferenceModel::identity();
  m.weights(0, 10) = 5.0;
  ReferenceEnhancer enh(m);
  const auto out = enh.enhance(request_for(grid_image(1, 13, 9, 3)));
  CHECK(out.width() == 13);
  CHECK(out.height() == 9);
  for (double v : out.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  CHECK(code_of([&] { enh.enhance(request_for(Image(4, 4, 3), Image(5, 4, 4))); }) == ErrorCode::DimensionMismatch);
}

TEST_CASE("oracle returns the ground-truth render") {
  SynthConfig cfg;
  cfg.width = cfg.height = 32;
  cfg.focal = 24;
  const auto scene = make_synthetic_scene(7, 60, 3, cfg);
  OracleEnhancer oracle(*scene.ground_truth_field);
  auto f = scene.trajectory.frames[1];
  f.pose.center.x() += 1.0;
  EnhanceRequest r = request_for(Image(32, 32, 3, 0.2));
  CHECK(code_of([&] { oracle.enhance(r); }) == ErrorCode::InvalidConfig);
  r.pose = f.pose;
  r.intrinsics = f.intrinsics;
  const auto out = oracle.enhance(r);
  const auto gt = clamp01(raster::rasterize(*scene.ground_truth_field, f.pose, f.intrinsics).color);
  CHECK(out == gt);
  CHECK(metrics::psnr(out, gt) == doctest::Approx(99.0));
}

TEST_CASE("oracle post-enhancement improves shifted renders") {
  SynthConfig cfg;
  cfg.width = cfg.height = 32;
  cfg.focal = 24;
  const auto scene = make_synthetic_scene(7, 80, 3, cfg);
  datagen::PerturbConfig pc;
  pc.seed = 4;
  pc.max_fraction = 1.0;
  const auto rough = datagen::perturb_field(*scene.ground_truth_field, Eigen::Vector3d::UnitX(), pc).field;
  OracleEnhancer oracle(*scene.ground_truth_field);
  std::vector<EnhanceRequest> reqs;
  std::vector<Image> gts;
  for (const auto& f0 : scene.trajectory.frames) {
    auto f = f0;
    f.pose.center.x() += 0.5;
    EnhanceRequest r = request_for(clamp01(raster::rasterize(rough, f.pose, f.intrinsics).color));
    r.pose = f.pose;
    r.intrinsics = f.intrinsics;
    reqs.push_back(r);
    gts.push_back(clamp01(raster::rasterize(*scene.ground_truth_field, f.pose, f.intrinsics).color));
  }
  const auto out = post_enhance(reqs, oracle);
  REQUIRE(out.size() == reqs.size());
  for (std::size_t i = 0; i < out.size(); ++i) CHECK(metrics::psnr(out[i], gts[i]) > metrics::psnr(reqs[i].degraded, gts[i]));
  CHECK(post_enhance({}, oracle).empty());
}

TEST_CASE("protocol codec layout") {
  protocol::Request r;
  r.id = 0x0102030405060708ULL;
  r.width = 2;
  r.height = 1;
  r.rgb = {1, 2, 3, 4, 5, 6};
  const auto bytes = protocol::encode_request(r);
  REQUIRE(bytes.size() == 8 + 4 + 4 + 1 + 6);
  CHECK(bytes[0] == 0x08);
  CHECK(bytes[7] == 0x01);
  CHECK(bytes[8] == 2);
  CHECK(bytes[12] == 1);
  CHECK(bytes[16] == 0);
  r.rgba.assign(8, 7);
  CHECK(protocol::encode_request(r)[16] == protocol::kFlagLidar);
  const auto hs = protocol::encode_handshake();
  CHECK(std::string(hs.begin(), hs.begin() + 4) == "FSEN");
  CHECK(hs[4] == 1);
  protocol::Response err;
  err.id = 9;
  err.status = 1;
  err.message = "no";
  CHECK(protocol::encode_response(err, 2, 1).size() == 8 + 1 + 4 + 2);
}

TEST_CASE("echo over stdio round-trips bit-exactly") {
  auto client = ExternalEnhancer::spawn({FSEN_ECHO_PATH, "--stdio"});
  const auto reqs = random_requests(10);
  for (const auto& r : reqs) CHECK(client->enhance(r) == r.degraded);
}

TEST_CASE("echo over tcp round-trips bit-exactly") {
  EchoServer server;
  REQUIRE(server.port() > 0);
  auto client = ExternalEnhancer::connect_tcp(server.address());
  const auto reqs = random_requests(10);
  const auto out = client->enhance_all(reqs);
  for (std::size_t i = 0; i < reqs.size(); ++i) CHECK(out[i] == reqs[i].degraded);
}

TEST_CASE("responses are matched by id with several in flight") {
  ExternalOptions opt;
  opt.max_in_flight = 3;
  auto client = ExternalEnhancer::spawn({FSEN_ECHO_PATH, "--stdio", "--reorder", "3"}, opt);
  const auto reqs = random_requests(6);
  const auto out = client->enhance_all(reqs);
  for (std::size_t i = 0; i < reqs.size(); ++i) CHECK(out[i] == reqs[i].degraded);
}

TEST_CASE("client error handling") {
  const auto reqs = random_requests(1);
  SUBCASE("bad server magic") {
    CHECK(code_of([&] { ExternalEnhancer::spawn({FSEN_ECHO_PATH, "--stdio", "--bad-magic"}); }) ==
          ErrorCode::ProtocolError);
  }
  SUBCASE("error status carries the message") {
    auto client = ExternalEnhancer::spawn({FSEN_ECHO_PATH, "--stdio", "--fail"});
    try {
      client->enhance(reqs[0]);
      FAIL("expected ProtocolError");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::ProtocolError);
      CHECK(std::string(e.what()).find("asked to fail") != std::string::npos);
    }
    CHECK(code_of([&] { client->enhance(reqs[0]); }) == ErrorCode::ProtocolError);
  }
  SUBCASE("timeout") {
    ExternalOptions opt;
    opt.timeout = std::chrono::milliseconds(200);
    auto client = ExternalEnhancer::spawn({FSEN_ECHO_PATH, "--stdio", "--hang"}, opt);
    CHECK(code_of([&] { client->enhance(reqs[0]); }) == ErrorCode::Timeout);
  }
  SUBCASE("server exits") {
    auto client = ExternalEnhancer::spawn({FSEN_ECHO_PATH, "--stdio", "--die"});
    CHECK(code_of([&] { client->enhance(reqs[0]); }) == ErrorCode::ProtocolError);
  }
  SUBCASE("missing executable") {
    CHECK(code_of([&] { ExternalEnhancer::spawn({"/nonexistent/enhancer"}); }) == ErrorCode::ProtocolError);
  }
  SUBCASE("nothing listening") {
    CHECK(code_of([&] { ExternalEnhancer::connect_tcp("127.0.0.1:1"); }) == ErrorCode::IoError);
  }
}

TEST_CASE("server rejects a malformed handshake cleanly") {
  EchoServer server;
  REQUIRE(server.port() > 0);
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(static_cast<std::uint16_t>(server.port()));
  REQUIRE(::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) == 0);
  const char bad[8] = {'X', 'X', 'X', 'X', 1, 0, 0, 0};
  REQUIRE(::send(fd, bad, sizeof bad, MSG_NOSIGNAL) == 8);
  char buf[8];
  // Closed without a reply; unread bytes turn the close into a reset.
  const ssize_t got = ::recv(fd, buf, sizeof buf, 0);
  CHECK((got == 0 || (got < 0 && errno == ECONNRESET)));
  ::close(fd);
  // Still serving afterwards.
  auto client = ExternalEnhancer::connect_tcp(server.address());
  const auto reqs = random_requests(2);
  CHECK(client->enhance(reqs[1]) == reqs[1].degraded);
}
