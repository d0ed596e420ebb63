#include "freesim/protocol.hpp"

#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstring>

#include "freesim/error.hpp"

namespace freesim::protocol {

namespace {

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void check_dims(std::uint32_t w, std::uint32_t h) {
  if (w == 0 || h == 0 || w > kMaxDimension || h > kMaxDimension) {
    throw Error(ErrorCode::ProtocolError, "bad image size " + std::to_string(w) + "x" + std::to_string(h));
  }
}

}  // namespace

std::vector<std::uint8_t> encode_handshake() {
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put_le(out, kVersion);
  return out;
}

std::vector<std::uint8_t> encode_request(const Request& r) {
  check_dims(r.width, r.height);
  const std::size_t pixels = std::size_t{r.width} * r.height;
  if (r.rgb.size() != pixels * 3 || (!r.rgba.empty() && r.rgba.size() != pixels * 4)) {
    throw Error(ErrorCode::ProtocolError, "request payload does not match its size");
  }
  std::vector<std::uint8_t> out;
  out.reserve(17 + r.rgb.size() + r.rgba.size());
  put_le(out, r.id);
  put_le(out, r.width);
  put_le(out, r.height);
  out.push_back(r.rgba.empty() ? 0 : kFlagLidar);
  out.insert(out.end(), r.rgb.begin(), r.rgb.end());
  out.insert(out.end(), r.rgba.begin(), r.rgba.end());
  return out;
}

std::vector<std::uint8_t> encode_response(const Response& r, std::uint32_t width, std::uint32_t height) {
  std::vector<std::uint8_t> out;
  put_le(out, r.id);
  out.push_back(r.status);
  if (r.status == 0) {
    if (r.rgb.size() != std::size_t{width} * height * 3) {
      throw Error(ErrorCode::ProtocolError, "response payload does not match the request size");
    }
    out.insert(out.end(), r.rgb.begin(), r.rgb.end());
  } else {
    put_le(out, static_cast<std::uint32_t>(r.message.size()));
    out.insert(out.end(), r.message.begin(), r.message.end());
  }
  return out;
}

std::vector<std::uint8_t> to_bytes(const Image& img) {
  std::vector<std::uint8_t> out(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) {
    const double v = img.data()[i];
    out[i] = static_cast<std::uint8_t>(std::lround(std::clamp(std::isfinite(v) ? v : 0.0, 0.0, 1.0) * 255.0));
  }
  return out;
}

Image from_bytes(std::span<const std::uint8_t> bytes, int width, int height, int channels) {
  Image img(width, height, channels);
  if (bytes.size() != img.size()) throw Error(ErrorCode::ProtocolError, "payload size mismatch");
  for (std::size_t i = 0; i < bytes.size(); ++i) img.data()[i] = bytes[i] / 255.0;
  return img;
}

Stream::Stream(int read_fd, int write_fd, bool is_socket) : read_fd_(read_fd), write_fd_(write_fd), socket_(is_socket) {}

void Stream::write_all(std::span<const std::uint8_t> bytes) {
  std::size_t done = 0;
  while (done < bytes.size()) {
    const ssize_t n = socket_ ? ::send(write_fd_, bytes.data() + done, bytes.size() - done, MSG_NOSIGNAL)
                              : ::write(write_fd_, bytes.data() + done, bytes.size() - done);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw Error(ErrorCode::ProtocolError, std::string("write failed: ") + std::strerror(errno));
    }
    done += static_cast<std::size_t>(n);
  }
}

void Stream::read_exact(std::span<std::uint8_t> out, Clock::time_point deadline) {
  std::size_t done = 0;
  while (done < out.size()) {
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now()).count();
    if (left <= 0) throw Error(ErrorCode::Timeout, "timed out waiting for the enhancer");
    pollfd p{read_fd_, POLLIN, 0};
    const int ready = ::poll(&p, 1, static_cast<int>(std::min<long long>(left, 1 << 30)));
    if (ready < 0) {
      if (errno == EINTR) continue;
      throw Error(ErrorCode::ProtocolError, std::string("poll failed: ") + std::strerror(errno));
    }
    if (ready == 0) continue;
    const ssize_t n = ::read(read_fd_, out.data() + done, out.size() - done);
    if (n < 0) {
      if (errno == EINTR || errno == EAGAIN) continue;
      throw Error(ErrorCode::ProtocolError, std::string("read failed: ") + std::strerror(errno));
    }
    if (n == 0) throw Error(ErrorCode::ProtocolError, "connection closed by peer");
    done += static_cast<std::size_t>(n);
  }
}

std::vector<std::uint8_t> Stream::read_bytes(std::size_t n, Clock::time_point deadline) {
  std::vector<std::uint8_t> out(n);
  read_exact(out, deadline);
  return out;
}

template <typename T>
T Stream::read_le(Clock::time_point deadline) {
  std::uint8_t raw[sizeof(T)];
  read_exact(raw, deadline);
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(raw[i]) << (8 * i);
  return v;
}

template std::uint8_t Stream::read_le<std::uint8_t>(Clock::time_point);
template std::uint32_t Stream::read_le<std::uint32_t>(Clock::time_point);
template std::uint64_t Stream::read_le<std::uint64_t>(Clock::time_point);

void Stream::send_handshake() { write_all(encode_handshake()); }

void Stream::expect_handshake(Clock::time_point deadline) {
  const auto magic = read_bytes(4, deadline);
  if (!std::equal(magic.begin(), magic.end(), kMagic)) throw Error(ErrorCode::ProtocolError, "bad handshake magic");
  const auto version = read_le<std::uint32_t>(deadline);
  if (version != kVersion) {
    throw Error(ErrorCode::ProtocolError, "unsupported protocol version " + std::to_string(version));
  }
}

std::optional<Request> Stream::read_request(Clock::time_point deadline) {
  Request r;
  std::uint8_t first = 0;
  // Distinguish a clean close from a truncated request.
  for (;;) {
    pollfd p{read_fd_, POLLIN, 0};
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now()).count();
    if (left <= 0) throw Error(ErrorCode::Timeout, "timed out waiting for a request");
    const int ready = ::poll(&p, 1, static_cast<int>(std::min<long long>(left, 1 << 30)));
    if (ready <= 0) continue;
    const ssize_t n = ::read(read_fd_, &first, 1);
    if (n == 0) return std::nullopt;
    if (n < 0) {
      if (errno == EINTR || errno == EAGAIN) continue;
      throw Error(ErrorCode::ProtocolError, std::string("read failed: ") + std::strerror(errno));
    }
    break;
  }
  std::uint8_t rest[7];
  read_exact(rest, deadline);
  r.id = first;
  for (int i = 0; i < 7; ++i) r.id |= std::uint64_t{rest[i]} << (8 * (i + 1));
  r.width = read_le<std::uint32_t>(deadline);
  r.height = read_le<std::uint32_t>(deadline);
  check_dims(r.width, r.height);
  const auto flags = read_le<std::uint8_t>(deadline);
  if (flags & ~kFlagLidar) throw Error(ErrorCode::ProtocolError, "unknown request flags");
  const std::size_t pixels = std::size_t{r.width} * r.height;
  r.rgb = read_bytes(pixels * 3, deadline);
  if (flags & kFlagLidar) r.rgba = read_bytes(pixels * 4, deadline);
  return r;
}

Response Stream::read_response(const SizeLookup& size_of, Clock::time_point deadline) {
  Response r;
  r.id = read_le<std::uint64_t>(deadline);
  const auto size = size_of(r.id);
  if (!size) throw Error(ErrorCode::ProtocolError, "response for unknown request id " + std::to_string(r.id));
  r.status = read_le<std::uint8_t>(deadline);
  if (r.status == 0) {
    r.rgb = read_bytes(std::size_t{size->first} * size->second * 3, deadline);
  } else if (r.status == 1) {
    const auto len = read_le<std::uint32_t>(deadline);
    if (len > (1u << 20)) throw Error(ErrorCode::ProtocolError, "error message too long");
    const auto msg = read_bytes(len, deadline);
    r.message.assign(msg.begin(), msg.end());
  } else {
    throw Error(ErrorCode::ProtocolError, "unknown response status " + std::to_string(r.status));
  }
  return r;
}

}  // namespace freesim::protocol
