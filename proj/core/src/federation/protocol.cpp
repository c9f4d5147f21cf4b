#include "ganshare/federation/protocol.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cstring>

namespace ganshare::federation {

void CentreNode::publish(const ModelPackage& pkg) {
  // round-trip through the byte format so only verified packages are served
  package_read(package_write(pkg));
  published[pkg.manifest.model_id] = pkg;
}

namespace {

void write_all(int fd, const uint8_t* data, size_t len) {
  size_t sent = 0;
  while (sent < len) {
    const ssize_t n = ::send(fd, data + sent, len - sent, MSG_NOSIGNAL);
    if (n <= 0) throw ProtocolError("connection closed while sending");
    sent += static_cast<size_t>(n);
  }
}

bool read_all(int fd, uint8_t* data, size_t len) {
  size_t got = 0;
  while (got < len) {
    const ssize_t n = ::recv(fd, data + got, len - got, 0);
    if (n == 0) return false;  // orderly shutdown
    if (n < 0) throw ProtocolError("recv failed");
    got += static_cast<size_t>(n);
  }
  return true;
}

}  // namespace

void send_frame(int fd, const uint8_t* data, size_t len) {
  if (len > kMaxFrame) throw ProtocolError("frame exceeds the size cap");
  uint8_t hdr[4];
  for (int i = 0; i < 4; ++i) hdr[i] = static_cast<uint8_t>((len >> (8 * i)) & 0xff);
  write_all(fd, hdr, 4);
  write_all(fd, data, len);
}

bool recv_frame(int fd, std::vector<uint8_t>& out) {
  uint8_t hdr[4];
  if (!read_all(fd, hdr, 4)) return false;  // peer closed
  uint32_t len = 0;
  for (int i = 0; i < 4; ++i) len |= static_cast<uint32_t>(hdr[i]) << (8 * i);
  if (len > kMaxFrame)
    throw ProtocolError("incoming frame of " + std::to_string(len) + " bytes exceeds cap");
  out.assign(len, 0);
  if (len > 0 && !read_all(fd, out.data(), len))
    throw ProtocolError("connection closed mid-frame");
  return true;
}

PackageServer::PackageServer(std::shared_ptr<const CentreNode> node) : node_(std::move(node)) {}

PackageServer::~PackageServer() { stop(); }

int PackageServer::start(int port) {
  listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listen_fd_ < 0) throw ProtocolError("socket() failed");
  int opt = 1;
  ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &opt, sizeof opt);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(static_cast<uint16_t>(port));
  if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
    ::close(listen_fd_);
    listen_fd_ = -1;
    throw ProtocolError("bind failed on port " + std::to_string(port));
  }
  if (::listen(listen_fd_, 16) != 0) {
    ::close(listen_fd_);
    listen_fd_ = -1;
    throw ProtocolError("listen failed");
  }
  socklen_t alen = sizeof addr;
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &alen);
  port_ = ntohs(addr.sin_port);
  running_ = true;
  acceptor_ = std::thread([this] { accept_loop(); });
  return port_;
}

void PackageServer::stop() {
  if (!running_.exchange(false)) return;
  ::shutdown(listen_fd_, SHUT_RDWR);
  ::close(listen_fd_);
  if (acceptor_.joinable()) acceptor_.join();
  std::lock_guard lk(workers_mu_);
  for (auto& t : workers_)
    if (t.joinable()) t.join();
  workers_.clear();
  listen_fd_ = -1;
}

void PackageServer::accept_loop() {
  while (running_) {
    const int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) {
      if (!running_) break;
      continue;
    }
    std::lock_guard lk(workers_mu_);
    workers_.emplace_back([this, fd] { serve_connection(fd); });
  }
}

void PackageServer::serve_connection(int fd) {
  auto reply = [fd](char tag, const std::vector<uint8_t>& body) {
    std::vector<uint8_t> frame;
    frame.reserve(body.size() + 1);
    frame.push_back(static_cast<uint8_t>(tag));
    frame.insert(frame.end(), body.begin(), body.end());
    send_frame(fd, frame.data(), frame.size());
  };
  auto reply_err = [&](const std::string& code, const std::string& message) {
    const std::string j = json{{"code", code}, {"message", message}}.dump();
    reply('E', std::vector<uint8_t>(j.begin(), j.end()));
  };

  try {
    while (running_) {
      std::vector<uint8_t> req;
      if (!recv_frame(fd, req)) break;  // peer closed
      const std::string text(req.begin(), req.end());
      if (text == "LIST") {
        json manifests = json::array();
        for (const auto& [id, pkg] : node_->published) manifests.push_back(pkg.manifest.to_json());
        const std::string j = manifests.dump();
        reply('J', std::vector<uint8_t>(j.begin(), j.end()));
      } else if (text.rfind("GET ", 0) == 0) {
        const std::string id = text.substr(4);
        auto it = node_->published.find(id);
        if (it == node_->published.end()) {
          reply_err("NOT_FOUND", "no published model with id " + id);
        } else {
          reply('P', package_write(it->second));
        }
      } else {
        reply_err("BAD_REQUEST", "expected LIST or GET <model_id>");
        break;  // malformed request: close after the error frame
      }
    }
  } catch (const std::exception&) {
    // connection-level failure: nothing to clean up beyond the socket
  }
  ::close(fd);
}

namespace {

int connect_to(const std::string& host, int port) {
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) throw ProtocolError("socket() failed");
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(static_cast<uint16_t>(port));
  if (::inet_pton(AF_INET, host == "localhost" ? "127.0.0.1" : host.c_str(), &addr.sin_addr) != 1) {
    ::close(fd);
    throw ProtocolError("bad host address: " + host);
  }
  if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
    ::close(fd);
    throw ProtocolError("cannot connect to " + host + ":" + std::to_string(port));
  }
  return fd;
}

std::vector<uint8_t> request(const std::string& host, int port, const std::string& text) {
  const int fd = connect_to(host, port);
  try {
    send_frame(fd, reinterpret_cast<const uint8_t*>(text.data()), text.size());
    std::vector<uint8_t> resp;
    if (!recv_frame(fd, resp) || resp.empty())
      throw ProtocolError("server closed the connection without a response");
    ::close(fd);
    return resp;
  } catch (...) {
    ::close(fd);
    throw;
  }
}

[[noreturn]] void raise_err_frame(const std::vector<uint8_t>& resp) {
  const json j = json::parse(std::string(resp.begin() + 1, resp.end()));
  throw ProtocolError("server error " + j.at("code").get<std::string>() + ": " +
                      j.at("message").get<std::string>());
}

}  // namespace

ModelPackage pull(const std::string& host, int port, const std::string& model_id) {
  auto resp = request(host, port, "GET " + model_id);
  if (resp[0] == 'E') raise_err_frame(resp);
  if (resp[0] != 'P') throw ProtocolError("unexpected response tag");
  std::vector<uint8_t> bytes(resp.begin() + 1, resp.end());
  return package_read(bytes);  // verifies both hashes after transfer
}

std::vector<json> list_models(const std::string& host, int port) {
  auto resp = request(host, port, "LIST");
  if (resp[0] == 'E') raise_err_frame(resp);
  if (resp[0] != 'J') throw ProtocolError("unexpected response tag");
  const json j = json::parse(std::string(resp.begin() + 1, resp.end()));
  return std::vector<json>(j.begin(), j.end());
}

}  // namespace ganshare::federation
