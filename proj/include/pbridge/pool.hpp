// TCP worker pool: a server that leases a fixed set of backend subprocesses
// to remote clients, and the client-side lease that makes a pooled worker
// look like any other connection.
#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <sys/types.h>

#include "pbridge/transport.hpp"

namespace pbridge {

// Pool bookkeeping refusals (:pool-exhausted, :unknown-session). Worker
// death mid-lease surfaces as BackendDied instead.
struct PoolError : TransportError {
  using TransportError::TransportError;
};

struct PoolConfig {
  std::size_t worker_count = 4;
  std::vector<std::string> backend_argv;
  std::string host = "127.0.0.1";
  uint16_t port = 0;  // 0 picks a free port
  std::chrono::milliseconds max_acquire_wait{10000};
};

// Serves the pooled protocol: acquire/release plus ld and get-global frames
// carrying a session id after the request id. Workers are dispatched least
// recently released first (ties by index), never reset on release, recycled
// on :fresh acquires, and respawned when they die.
class PoolServer {
 public:
  explicit PoolServer(PoolConfig config);
  ~PoolServer();
  PoolServer(const PoolServer&) = delete;
  PoolServer& operator=(const PoolServer&) = delete;

  void start();  // returns once the listener is ready
  void stop();

  uint16_t port() const { return port_; }
  std::string address() const;

  // Introspection for operators and tests.
  std::size_t live_worker_count() const;
  std::vector<pid_t> worker_pids() const;

 private:
  struct Worker {
    std::unique_ptr<StdioConnection> conn;  // null while down or respawning
    uint64_t released_seq = 0;
    bool leased = false;
    bool respawning = false;
  };

  void accept_loop();
  void supervise();
  void handle_client(int fd);

  // nullopt on timeout; the lock is dropped while a :fresh recycle spawns
  std::optional<uint64_t> acquire_session(bool fresh);
  bool release_session(uint64_t sid);  // false when the sid is unknown
  // drops a dead leased worker's session and leaves the slot for the
  // supervisor to respawn
  void invalidate_session(uint64_t sid);

  std::unique_ptr<StdioConnection> spawn_worker();

  PoolConfig cfg_;
  int listen_fd_ = -1;
  uint16_t port_ = 0;
  std::atomic<bool> stopping_{false};

  mutable std::mutex mu_;
  std::condition_variable avail_cv_;
  std::vector<Worker> workers_;
  std::map<uint64_t, std::size_t> sessions_;  // sid -> worker index
  uint64_t next_sid_ = 0;
  uint64_t release_counter_ = 0;
  std::vector<int> client_fds_;

  std::thread accept_thread_;
  std::thread supervisor_thread_;
  std::mutex threads_mu_;
  std::vector<std::thread> client_threads_;
  std::condition_variable stop_cv_;  // wakes the supervisor early
};

// A leased pooled session presented as a Connection: frames gain the session
// id on the way out, pool refusals come back as exceptions. Shares the
// client's underlying transport, so leases from one client are serialized.
class LeaseConnection final : public Connection {
 public:
  LeaseConnection(std::shared_ptr<Connection> base, uint64_t sid)
      : base_(std::move(base)), sid_(sid) {}

  Response roundtrip(const FrameBuilder& build,
                     const OutputCallback& on_output) override;
  bool alive() const override { return !dead_ && base_->alive(); }
  uint64_t last_id() const override { return base_->last_id(); }

  uint64_t sid() const { return sid_; }

 private:
  std::shared_ptr<Connection> base_;
  uint64_t sid_;
  bool dead_ = false;
};

class PoolClient {
 public:
  // target accepts "host:port" or "tcp://host:port"
  explicit PoolClient(const std::string& target,
                      std::chrono::milliseconds deadline = default_deadline());

  uint64_t acquire(bool fresh = false);  // PoolError when exhausted
  void release(uint64_t sid);
  std::unique_ptr<LeaseConnection> lease(bool fresh = false);

  Connection& connection() { return *base_; }

 private:
  std::shared_ptr<Connection> base_;
};

}  // namespace pbridge
