#include "gfe/net.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <cstring>

namespace gfe {

namespace {

std::string errno_text() { return std::strerror(errno); }

sockaddr_in resolve(const Endpoint& endpoint) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* result = nullptr;
  const int rc = ::getaddrinfo(endpoint.host.c_str(), nullptr, &hints, &result);
  if (rc != 0 || !result) throw NetworkError("cannot resolve " + endpoint.host + ": " + ::gai_strerror(rc));
  sockaddr_in addr{};
  std::memcpy(&addr, result->ai_addr, sizeof addr);
  ::freeaddrinfo(result);
  addr.sin_port = htons(endpoint.port);
  return addr;
}

}  // namespace

Endpoint Endpoint::parse(std::string_view text) {
  const auto colon = text.rfind(':');
  if (colon == std::string_view::npos || colon == 0) {
    throw std::invalid_argument("endpoint must be host:port, got '" + std::string(text) + "'");
  }
  Endpoint e;
  e.host = std::string(text.substr(0, colon));
  const std::string port(text.substr(colon + 1));
  char* end = nullptr;
  const long p = std::strtol(port.c_str(), &end, 10);
  if (port.empty() || *end != '\0' || p < 0 || p > 65535) {
    throw std::invalid_argument("bad port in endpoint '" + std::string(text) + "'");
  }
  e.port = static_cast<std::uint16_t>(p);
  return e;
}

std::string Endpoint::str() const { return host + ":" + std::to_string(port); }

Endpoint bind_address(const Endpoint& configured) {
  Endpoint e = configured;
  if (const char* host = std::getenv("GFE_BIND_ADDRESS"); host && *host) e.host = host;
  return e;
}

Socket::~Socket() { close(); }

Socket& Socket::operator=(Socket&& other) noexcept {
  if (this != &other) {
    close();
    fd_ = std::exchange(other.fd_, -1);
  }
  return *this;
}

void Socket::send_all(std::string_view bytes) {
  while (!bytes.empty()) {
    const auto n = ::send(fd_, bytes.data(), bytes.size(), MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw NetworkError("send failed: " + errno_text());
    }
    bytes.remove_prefix(static_cast<std::size_t>(n));
  }
}

std::size_t Socket::recv_some(char* out, std::size_t capacity) {
  while (true) {
    const auto n = ::recv(fd_, out, capacity, 0);
    if (n >= 0) return static_cast<std::size_t>(n);
    if (errno == EINTR) continue;
    if (errno == ECONNRESET || errno == ENOTCONN || errno == EBADF) return 0;
    throw NetworkError("recv failed: " + errno_text());
  }
}

void Socket::shutdown() {
  if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
}

void Socket::close() {
  if (fd_ >= 0) ::close(fd_);
  fd_ = -1;
}

Socket connect_once(const Endpoint& endpoint) {
  const auto addr = resolve(endpoint);
  Socket s(::socket(AF_INET, SOCK_STREAM, 0));
  if (!s.valid()) throw NetworkError("socket failed: " + errno_text());
  if (::connect(s.fd(), reinterpret_cast<const sockaddr*>(&addr), sizeof addr) != 0) {
    throw NetworkError("connect to " + endpoint.str() + " failed: " + errno_text());
  }
  const int one = 1;
  ::setsockopt(s.fd(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  return s;
}

Socket connect_retry(const Endpoint& endpoint, std::chrono::milliseconds timeout) {
  const auto deadline = std::chrono::steady_clock::now() + timeout;
  std::chrono::milliseconds delay(20);
  while (true) {
    try {
      return connect_once(endpoint);
    } catch (const NetworkError& e) {
      if (std::chrono::steady_clock::now() + delay > deadline) {
        throw NetworkError(std::string(e.what()) + " (gave up after " + std::to_string(timeout.count()) + " ms)");
      }
    }
    std::this_thread::sleep_for(delay);
    delay = std::min(delay * 2, std::chrono::milliseconds(1000));
  }
}

Listener::Listener(const Endpoint& bind_to) : socket_(::socket(AF_INET, SOCK_STREAM, 0)) {
  if (!socket_.valid()) throw NetworkError("socket failed: " + errno_text());
  const int one = 1;
  ::setsockopt(socket_.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  const auto addr = resolve(bind_to);
  if (::bind(socket_.fd(), reinterpret_cast<const sockaddr*>(&addr), sizeof addr) != 0) {
    throw NetworkError("bind " + bind_to.str() + " failed: " + errno_text());
  }
  if (::listen(socket_.fd(), 64) != 0) throw NetworkError("listen failed: " + errno_text());
  sockaddr_in bound{};
  socklen_t len = sizeof bound;
  ::getsockname(socket_.fd(), reinterpret_cast<sockaddr*>(&bound), &len);
  port_ = ntohs(bound.sin_port);
}

std::optional<Socket> Listener::accept_for(std::chrono::milliseconds wait) {
  pollfd pfd{socket_.fd(), POLLIN, 0};
  const int rc = ::poll(&pfd, 1, static_cast<int>(wait.count()));
  if (rc <= 0) return std::nullopt;
  const int fd = ::accept(socket_.fd(), nullptr, nullptr);
  if (fd < 0) return std::nullopt;
  const int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  return Socket(fd);
}

void FramedConnection::send(const Frame& frame) {
  const auto bytes = encode_frame(frame);
  std::lock_guard lock(send_mutex_);
  socket_.send_all(bytes);
  bytes_sent_ += bytes.size();
}

std::optional<Frame> FramedConnection::recv() {
  char buf[1 << 16];
  while (true) {
    if (auto f = decoder_.next()) return f;
    const auto n = socket_.recv_some(buf, sizeof buf);
    if (n == 0) {
      if (decoder_.pending() > 0) throw NetworkError("connection closed mid-frame");
      return std::nullopt;
    }
    bytes_received_ += n;
    decoder_.feed(std::string_view(buf, n));
  }
}

Frame FramedConnection::request(const Frame& frame) {
  send(frame);
  auto reply = recv();
  if (!reply) throw NetworkError("connection closed while waiting for a reply");
  return std::move(*reply);
}

ServiceHost::ServiceHost(Service& service, const Endpoint& bind_to) : service_(service), listener_(bind_to) {}

ServiceHost::~ServiceHost() { stop(); }

void ServiceHost::start() {
  acceptor_ = std::thread([this] { accept_loop(); });
}

void ServiceHost::stop() {
  if (stopping_.exchange(true)) return;
  if (acceptor_.joinable()) acceptor_.join();
  std::vector<std::thread> workers;
  {
    std::lock_guard lock(mutex_);
    for (auto& [_, c] : connections_) c->shutdown();
    workers.swap(workers_);
  }
  for (auto& t : workers) t.join();
}

void ServiceHost::run_until(const std::function<bool()>& should_stop) {
  while (!stopping_ && !(should_stop && should_stop())) std::this_thread::sleep_for(std::chrono::milliseconds(100));
  stop();
}

void ServiceHost::accept_loop() {
  while (!stopping_) {
    auto sock = listener_.accept_for(std::chrono::milliseconds(100));
    if (!sock) continue;
    auto conn = std::make_shared<FramedConnection>(std::move(*sock));
    std::lock_guard lock(mutex_);
    if (stopping_) break;
    const ConnId id = next_id_++;
    connections_[id] = conn;
    workers_.emplace_back([this, id, conn] { serve(id, conn); });
  }
}

void ServiceHost::deliver(const Outbox& out) {
  for (const auto& [target, frame] : out) {
    std::shared_ptr<FramedConnection> conn;
    {
      std::lock_guard lock(mutex_);
      auto it = connections_.find(target);
      if (it != connections_.end()) conn = it->second;
    }
    if (!conn) continue;
    try {
      conn->send(frame);
    } catch (const NetworkError&) {
      conn->shutdown();
    }
  }
}

void ServiceHost::serve(ConnId id, std::shared_ptr<FramedConnection> conn) {
  try {
    while (auto frame = conn->recv()) deliver(service_.handle(id, *frame));
  } catch (const std::exception& e) {
    // Protocol violations and resets end the connection; partial frames are dropped.
    std::fprintf(stderr, "event=connection_error conn=%llu error=\"%s\"\n", static_cast<unsigned long long>(id),
                 e.what());
  }
  {
    std::lock_guard lock(mutex_);
    connections_.erase(id);
  }
  conn->shutdown();
  deliver(service_.on_disconnect(id));
}

}  // namespace gfe
