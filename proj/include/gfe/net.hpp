#pragma once

// Blocking TCP transport carrying framed messages, and a thread-per-connection
// host for services.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "gfe/wire.hpp"

namespace gfe {

class NetworkError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Endpoint {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;

  // "host:port"; throws std::invalid_argument.
  static Endpoint parse(std::string_view text);
  std::string str() const;
};

class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  ~Socket();
  Socket(Socket&& other) noexcept : fd_(std::exchange(other.fd_, -1)) {}
  Socket& operator=(Socket&& other) noexcept;
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;

  bool valid() const { return fd_ >= 0; }
  int fd() const { return fd_; }
  void send_all(std::string_view bytes);
  // Returns 0 on orderly shutdown by the peer.
  std::size_t recv_some(char* out, std::size_t capacity);
  // Unblocks a thread waiting in recv on this socket.
  void shutdown();
  void close();

 private:
  int fd_ = -1;
};

// One connect attempt.
Socket connect_once(const Endpoint& endpoint);
// Retries with exponential backoff until `timeout` elapses.
Socket connect_retry(const Endpoint& endpoint, std::chrono::milliseconds timeout);

class Listener {
 public:
  explicit Listener(const Endpoint& bind_to);
  std::uint16_t port() const { return port_; }
  // Waits up to `wait` for a connection.
  std::optional<Socket> accept_for(std::chrono::milliseconds wait);

 private:
  Socket socket_;
  std::uint16_t port_ = 0;
};

// Framed messages over a socket. send() may be called from several threads.
class FramedConnection {
 public:
  explicit FramedConnection(Socket socket) : socket_(std::move(socket)) {}

  void send(const Frame& frame);
  // Blocks for the next frame; nullopt when the peer closed cleanly between frames.
  std::optional<Frame> recv();
  // send + recv; throws NetworkError if the peer goes away.
  Frame request(const Frame& frame);
  void shutdown() { socket_.shutdown(); }
  std::uint64_t bytes_sent() const { return bytes_sent_; }
  std::uint64_t bytes_received() const { return bytes_received_; }

 private:
  Socket socket_;
  FrameDecoder decoder_;
  std::mutex send_mutex_;
  std::atomic<std::uint64_t> bytes_sent_{0}, bytes_received_{0};
};

using ConnId = std::uint64_t;
using Outbox = std::vector<std::pair<ConnId, Frame>>;

// Server logic. handle() is called concurrently from connection threads and
// returns the frames to send (to the caller or to other connections).
class Service {
 public:
  virtual ~Service() = default;
  virtual Outbox handle(ConnId conn, const Frame& frame) = 0;
  virtual Outbox on_disconnect(ConnId) { return {}; }
};

class ServiceHost {
 public:
  ServiceHost(Service& service, const Endpoint& bind_to);
  ~ServiceHost();
  ServiceHost(const ServiceHost&) = delete;
  ServiceHost& operator=(const ServiceHost&) = delete;

  std::uint16_t port() const { return listener_.port(); }
  void start();
  void stop();
  // Blocks until stop() is called or `should_stop` returns true.
  void run_until(const std::function<bool()>& should_stop);

 private:
  void accept_loop();
  void serve(ConnId id, std::shared_ptr<FramedConnection> conn);
  void deliver(const Outbox& out);

  Service& service_;
  Listener listener_;
  std::atomic<bool> stopping_{false};
  std::thread acceptor_;
  std::mutex mutex_;
  std::map<ConnId, std::shared_ptr<FramedConnection>> connections_;
  std::vector<std::thread> workers_;
  ConnId next_id_ = 1;
};

// Applies GFE_BIND_ADDRESS (a host) to a configured endpoint.
Endpoint bind_address(const Endpoint& configured);

}  // namespace gfe
