#pragma once

#include <atomic>
#include <map>
#include <memory>
#include <thread>

#include "ganshare/federation/package.hpp"

namespace ganshare::federation {

// Pull protocol over TCP. Frames are [u32 little-endian length][payload],
// capped at kMaxFrame. Requests are UTF-8 text: "LIST" or "GET <model_id>".
// Response payloads start with a one-byte tag:
//   'J' + JSON        (LIST: array of manifests)
//   'P' + package     (GET: raw package bytes)
//   'E' + JSON        (error: {"code": ..., "message": ...})
// A connection serves any number of requests; a malformed frame gets an ERR
// response and the connection is closed.

inline constexpr uint32_t kMaxFrame = 256u * 1024 * 1024;

struct CentreNode {
  std::string centre_id;
  std::filesystem::path corpus_dir;
  // published packages; hash-verified at publish time
  std::map<std::string, ModelPackage> published;

  void publish(const ModelPackage& pkg);
};

class PackageServer {
 public:
  explicit PackageServer(std::shared_ptr<const CentreNode> node);
  ~PackageServer();

  // binds and starts serving; port 0 picks an ephemeral port.
  // Returns the actual listening port.
  int start(int port);
  void stop();
  int port() const { return port_; }

 private:
  void accept_loop();
  void serve_connection(int fd);

  std::shared_ptr<const CentreNode> node_;
  int listen_fd_ = -1;
  int port_ = 0;
  std::atomic<bool> running_{false};
  std::thread acceptor_;
  std::vector<std::thread> workers_;
  std::mutex workers_mu_;
};

// Client side; both verify package hashes after transfer (package_read does).
ModelPackage pull(const std::string& host, int port, const std::string& model_id);
std::vector<json> list_models(const std::string& host, int port);

// framing helpers shared with tests; recv_frame returns false when the peer
// closed the connection before a frame started.
void send_frame(int fd, const uint8_t* data, size_t len);
bool recv_frame(int fd, std::vector<uint8_t>& out);

}  // namespace ganshare::federation
