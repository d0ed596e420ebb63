// Echo enhancer speaking FSEN; returns the degraded payload unchanged.
#include <netinet/in.h>
#include <signal.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "freesim/error.hpp"
#include "freesim/protocol.hpp"

using namespace freesim;
using namespace freesim::protocol;

namespace {

struct Options {
  bool stdio = false;
  int port = -1;
  std::string port_file;
  bool bad_magic = false;   // answer the handshake with the wrong magic
  bool fail = false;        // status 1 for every request
  bool hang = false;        // never answer requests
  bool die = false;         // exit right after the handshake
  int reorder = 1;          // collect this many requests and answer them in reverse
};

// Returns false when the client spoke a malformed handshake.
bool serve(Stream& s, const Options& opt) {
  const auto far = Stream::Clock::now() + std::chrono::hours(1);
  try {
    s.expect_handshake(far);
  } catch (const Error& e) {
    std::fprintf(stderr, "fsen_echo: rejected client: %s\n", e.what());
    return false;
  }
  if (opt.bad_magic) {
    const std::uint8_t wrong[8] = {'N', 'O', 'P', 'E', 1, 0, 0, 0};
    s.write_all(wrong);
  } else {
    s.send_handshake();
  }
  if (opt.die) std::exit(0);
  std::vector<Request> batch;
  for (;;) {
    std::optional<Request> r;
    try {
      r = s.read_request(far);
    } catch (const Error& e) {
      std::fprintf(stderr, "fsen_echo: bad request: %s\n", e.what());
      return false;
    }
    if (!r) return true;
    if (opt.hang) continue;
    batch.push_back(std::move(*r));
    if (static_cast<int>(batch.size()) < opt.reorder) continue;
    std::reverse(batch.begin(), batch.end());
    for (auto& req : batch) {
      Response resp;
      resp.id = req.id;
      if (opt.fail) {
        resp.status = 1;
        resp.message = "echo backend asked to fail";
      } else {
        resp.rgb = std::move(req.rgb);
      }
      s.write_all(encode_response(resp, req.width, req.height));
    }
    batch.clear();
  }
}

}  // namespace

int main(int argc, char** argv) {
  Options opt;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--stdio") opt.stdio = true;
    else if (a == "--listen" && i + 1 < argc) opt.port = std::atoi(argv[++i]);
    else if (a == "--port-file" && i + 1 < argc) opt.port_file = argv[++i];
    else if (a == "--bad-magic") opt.bad_magic = true;
    else if (a == "--fail") opt.fail = true;
    else if (a == "--hang") opt.hang = true;
    else if (a == "--die") opt.die = true;
    else if (a == "--reorder" && i + 1 < argc) opt.reorder = std::max(1, std::atoi(argv[++i]));
    else {
      std::fprintf(stderr, "usage: fsen_echo --stdio | --listen PORT [--port-file F] [--bad-magic] [--fail] "
                           "[--hang] [--die] [--reorder N]\n");
      return 2;
    }
  }
  ::signal(SIGPIPE, SIG_IGN);
  if (opt.stdio) {
    Stream s(STDIN_FILENO, STDOUT_FILENO, false);
    return serve(s, opt) ? 0 : 1;
  }
  if (opt.port < 0) return 2;

  const int server = ::socket(AF_INET, SOCK_STREAM, 0);
  const int one = 1;
  ::setsockopt(server, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(static_cast<std::uint16_t>(opt.port));
  if (::bind(server, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(server, 4) != 0) {
    std::perror("fsen_echo: bind");
    return 1;
  }
  socklen_t len = sizeof addr;
  ::getsockname(server, reinterpret_cast<sockaddr*>(&addr), &len);
  if (!opt.port_file.empty()) {
    const std::string tmp = opt.port_file + ".tmp";
    std::ofstream(tmp) << ntohs(addr.sin_port) << "\n";
    std::rename(tmp.c_str(), opt.port_file.c_str());
  }
  for (;;) {
    const int client = ::accept(server, nullptr, nullptr);
    if (client < 0) continue;
    Stream s(client, client, true);
    try {
      serve(s, opt);
    } catch (const Error& e) {
      std::fprintf(stderr, "fsen_echo: %s\n", e.what());
    }
    ::close(client);
  }
}
