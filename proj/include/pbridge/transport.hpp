// Framed S-expression transport to backend processes: one canonical printed
// SExpr per line, requests (ld / get-global / ping) answered by zero or more
// out frames and exactly one terminal frame. Connections run over stdio
// pipes to a spawned child or over TCP; a background reader drains frames so
// backend writes never block on a slow caller. One request in flight per
// connection; request ids are strictly increasing.
#pragma once

#include <sys/types.h>

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "pbridge/output_control.hpp"
#include "pbridge/sexpr.hpp"

namespace pbridge {

struct TransportError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct SpawnError : TransportError {
  using TransportError::TransportError;
};
struct ConnectError : TransportError {
  using TransportError::TransportError;
};
struct TimeoutError : TransportError {
  using TransportError::TransportError;
};
struct ProtocolError : TransportError {
  using TransportError::TransportError;
};
struct BackendDied : TransportError {
  using TransportError::TransportError;
};

// Default per-request deadline: 30 s, or PROVER_BRIDGE_DEADLINE_MS.
std::chrono::milliseconds default_deadline();

// ---- frame construction and classification ------------------------------

SExpr make_ld_frame(uint64_t id, SExpr forms, SExpr options);
SExpr make_get_global_frame(uint64_t id, Symbol name);
SExpr make_ping_frame(uint64_t id);
SExpr make_out_frame(uint64_t id, StreamClass cls, std::string_view text);
SExpr make_ret_frame(uint64_t id, Keyword status, SExpr payload);
SExpr make_pong_frame(uint64_t id);

// Request id if the frame looks like (head <id> ...) with a usable integer.
std::optional<uint64_t> frame_id(const SExpr& frame);

// Best-effort id extraction from a raw line the reader refused: "(head
// <digits>" with the digits ending at a delimiter. Lets a server answer
// malformed requests instead of leaving the peer to wait out its deadline.
std::optional<uint64_t> recover_frame_id(std::string_view line);

// Idempotent process-wide SIGPIPE suppression; every component writing to
// pipes or sockets calls this so peer death surfaces as EPIPE.
void ensure_sigpipe_ignored();

struct ParsedResponse {
  enum class Kind { Out, Ret, Pong, Session };
  Kind kind;
  uint64_t id;
  StreamClass cls = StreamClass::CommentWindow;  // Out
  std::string text;                              // Out
  Keyword status;                                // Ret: :ok or :error
  SExpr payload;                                 // Ret payload / Session sid
};

std::optional<ParsedResponse> parse_response(const SExpr& frame);

// ---- connections ---------------------------------------------------------

struct Response {
  enum class Kind { Ret, Pong, Session };
  Kind kind;
  Keyword status;  // Ret only
  SExpr payload;   // Ret payload or Session sid

  bool ok() const { return kind == Kind::Ret && status.name == "ok"; }
};

using OutputCallback = std::function<void(StreamClass, std::string_view)>;
// Receives the allocated request id and produces the full request frame.
using FrameBuilder = std::function<SExpr(uint64_t id)>;

class Connection {
 public:
  virtual ~Connection() = default;

  // Allocates the next id, sends build(id), streams out frames into
  // on_output, and returns the terminal frame. All failure paths mark the
  // connection dead; later calls fail fast with BackendDied.
  virtual Response roundtrip(const FrameBuilder& build,
                             const OutputCallback& on_output) = 0;
  virtual bool alive() const = 0;
  virtual void set_deadline(std::chrono::milliseconds) {}
  virtual uint64_t last_id() const = 0;

  // Convenience wrappers over roundtrip.
  Response ld(SExpr forms, SExpr options, const OutputCallback& on_output);
  Response get_global(Symbol name);
  void ping();
};

// fd-backed connection with a reader thread; base for stdio and TCP.
class StreamConnection : public Connection {
 public:
  // Takes ownership of both fds (they may not be equal).
  StreamConnection(int read_fd, int write_fd);
  ~StreamConnection() override;
  StreamConnection(const StreamConnection&) = delete;
  StreamConnection& operator=(const StreamConnection&) = delete;

  Response roundtrip(const FrameBuilder& build,
                     const OutputCallback& on_output) override;
  bool alive() const override;
  void set_deadline(std::chrono::milliseconds d) override { deadline_ = d; }
  uint64_t last_id() const override { return next_id_; }

 protected:
  void shutdown_write();
  void teardown();  // close fds, join the reader; idempotent
  void mark_dead();

 private:
  enum class ItemKind { Frame, Malformed, Eof };
  struct Item {
    ItemKind kind;
    SExpr frame;
  };

  void reader_main();
  bool write_line(const std::string& line);

  int read_fd_;
  int write_fd_;
  std::thread reader_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Item> inbox_;
  bool dead_ = false;
  bool write_closed_ = false;
  bool torn_down_ = false;
  uint64_t next_id_ = 0;
  std::mutex call_mu_;
  std::chrono::milliseconds deadline_;
};

// Connection to a spawned child speaking the wire format on stdio. The
// child's stderr passes through for diagnostics. Destruction closes the
// child's stdin, waits briefly, kills if needed, and reaps.
class StdioConnection final : public StreamConnection {
 public:
  ~StdioConnection() override;
  pid_t pid() const { return pid_; }
  void terminate();  // SIGKILL and reap immediately

  StdioConnection(pid_t pid, int read_fd, int write_fd);

 private:
  pid_t pid_;
  bool reaped_ = false;
};

// Spawns argv as a backend and performs a ping handshake. Throws SpawnError
// if the process cannot be started, TimeoutError if the handshake gets no
// pong within the deadline.
std::unique_ptr<StdioConnection> spawn_stdio_backend(
    const std::vector<std::string>& argv,
    std::chrono::milliseconds deadline = default_deadline());

// Connects to a pool server and performs the same handshake.
std::unique_ptr<Connection> connect_tcp(
    const std::string& host, uint16_t port,
    std::chrono::milliseconds deadline = default_deadline());
// address is "host:port"
std::unique_ptr<Connection> connect_tcp(
    const std::string& address,
    std::chrono::milliseconds deadline = default_deadline());

}  // namespace pbridge
