#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "freesim/image.hpp"

// FSEN enhancer wire protocol. Little-endian throughout.
namespace freesim::protocol {

inline constexpr char kMagic[4] = {'F', 'S', 'E', 'N'};
inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::uint8_t kFlagLidar = 1;
inline constexpr std::uint32_t kMaxDimension = 1 << 14;

struct Request {
  std::uint64_t id = 0;
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::vector<std::uint8_t> rgb;   // width·height·3
  std::vector<std::uint8_t> rgba;  // width·height·4, empty when no pseudo-image
};

struct Response {
  std::uint64_t id = 0;
  std::uint8_t status = 0;  // 0 ok, 1 error
  std::vector<std::uint8_t> rgb;
  std::string message;
};

std::vector<std::uint8_t> encode_handshake();
std::vector<std::uint8_t> encode_request(const Request& r);
std::vector<std::uint8_t> encode_response(const Response& r, std::uint32_t width, std::uint32_t height);

// 8-bit conversion used on the wire: round(clamp(v, 0, 1)·255).
std::vector<std::uint8_t> to_bytes(const Image& img);
Image from_bytes(std::span<const std::uint8_t> bytes, int width, int height, int channels);

// Blocking byte stream over a read and a write descriptor (equal for sockets). Reads honor a
// deadline and raise Timeout; EOF and short reads raise ProtocolError.
class Stream {
 public:
  using Clock = std::chrono::steady_clock;

  Stream(int read_fd, int write_fd, bool is_socket);
  void write_all(std::span<const std::uint8_t> bytes);
  void read_exact(std::span<std::uint8_t> out, Clock::time_point deadline);
  std::vector<std::uint8_t> read_bytes(std::size_t n, Clock::time_point deadline);
  template <typename T>
  T read_le(Clock::time_point deadline);

  // Handshake checks. The peer's magic/version mismatch raises ProtocolError.
  void send_handshake();
  void expect_handshake(Clock::time_point deadline);

  // Reads one request; `std::nullopt` on clean EOF before the first byte.
  std::optional<Request> read_request(Clock::time_point deadline);
  // Payload size depends on which request the id answers; unknown ids raise ProtocolError.
  using SizeLookup = std::function<std::optional<std::pair<std::uint32_t, std::uint32_t>>(std::uint64_t)>;
  Response read_response(const SizeLookup& size_of, Clock::time_point deadline);

 private:
  int read_fd_;
  int write_fd_;
  bool socket_;
};

}  // namespace freesim::protocol
