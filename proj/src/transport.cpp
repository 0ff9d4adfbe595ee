#include "pbridge/transport.hpp"

#include <fcntl.h>
#include <netdb.h>
#include <netinet/tcp.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cstdlib>
#include <cstring>
#include <limits>

namespace pbridge {

namespace {

// A backend can die between our write and its read; EPIPE must come back as
// a write error, not a process-killing signal.
void ignore_sigpipe() {
  static std::once_flag once;
  std::call_once(once, [] { ::signal(SIGPIPE, SIG_IGN); });
}

std::string errno_text(int err) { return std::strerror(err); }

}  // namespace

void ensure_sigpipe_ignored() { ignore_sigpipe(); }

std::optional<uint64_t> recover_frame_id(std::string_view line) {
  size_t i = 0;
  auto at_ws = [&] { return line[i] == ' ' || line[i] == '\t'; };
  auto delim = [&](char c) {
    return c == ' ' || c == '\t' || c == '(' || c == ')' || c == '"';
  };
  while (i < line.size() && at_ws()) ++i;
  if (i >= line.size() || line[i] != '(') return std::nullopt;
  ++i;
  while (i < line.size() && at_ws()) ++i;
  size_t head = i;
  while (i < line.size() && !delim(line[i])) ++i;
  if (i == head) return std::nullopt;
  while (i < line.size() && at_ws()) ++i;
  size_t digits = i;
  uint64_t v = 0;
  while (i < line.size() && line[i] >= '0' && line[i] <= '9') {
    if (i - digits >= 18) return std::nullopt;
    v = v * 10 + static_cast<uint64_t>(line[i] - '0');
    ++i;
  }
  if (i == digits) return std::nullopt;
  if (i < line.size() && !delim(line[i])) return std::nullopt;
  return v;
}

std::chrono::milliseconds default_deadline() {
  if (const char* env = std::getenv("PROVER_BRIDGE_DEADLINE_MS")) {
    char* end = nullptr;
    long long ms = std::strtoll(env, &end, 10);
    if (end && end != env && *end == '\0' && ms > 0)
      return std::chrono::milliseconds(ms);
  }
  return std::chrono::milliseconds(30000);
}

// ---- frames ---------------------------------------------------------------

SExpr make_ld_frame(uint64_t id, SExpr forms, SExpr options) {
  return SExpr::list({SExpr::sym("ld"), SExpr::integer(Integer(id)),
                      std::move(forms), std::move(options)});
}

SExpr make_get_global_frame(uint64_t id, Symbol name) {
  return SExpr::list({SExpr::sym("get-global"), SExpr::integer(Integer(id)),
                      SExpr::sym(std::move(name))});
}

SExpr make_ping_frame(uint64_t id) {
  return SExpr::list({SExpr::sym("ping"), SExpr::integer(Integer(id))});
}

SExpr make_out_frame(uint64_t id, StreamClass cls, std::string_view text) {
  return SExpr::list({SExpr::sym("out"), SExpr::integer(Integer(id)),
                      SExpr::kw(stream_class_keyword(cls)),
                      SExpr::text(std::string(text))});
}

SExpr make_ret_frame(uint64_t id, Keyword status, SExpr payload) {
  return SExpr::list({SExpr::sym("ret"), SExpr::integer(Integer(id)),
                      SExpr::kw(std::move(status)), std::move(payload)});
}

SExpr make_pong_frame(uint64_t id) {
  return SExpr::list({SExpr::sym("pong"), SExpr::integer(Integer(id))});
}

std::optional<uint64_t> frame_id(const SExpr& frame) {
  if (!frame.is_list()) return std::nullopt;
  const SExpr::List& items = frame.items();
  if (items.size() < 2 || !items[0].is_symbol() || !items[1].is_integer())
    return std::nullopt;
  const Integer& raw = items[1].as_integer();
  if (raw < 0 || raw > Integer(std::numeric_limits<uint64_t>::max()))
    return std::nullopt;
  return raw.convert_to<uint64_t>();
}

std::optional<ParsedResponse> parse_response(const SExpr& frame) {
  std::optional<uint64_t> id = frame_id(frame);
  if (!id) return std::nullopt;
  const SExpr::List& items = frame.items();
  const SExpr& head = items[0];

  ParsedResponse r;
  r.id = *id;
  if (head.is_symbol_named("pong") && items.size() == 2) {
    r.kind = ParsedResponse::Kind::Pong;
    return r;
  }
  if (head.is_symbol_named("out") && items.size() == 4 &&
      items[2].is_keyword() && items[3].is_text()) {
    std::optional<StreamClass> cls =
        stream_class_from_keyword(items[2].as_keyword());
    if (!cls) return std::nullopt;
    r.kind = ParsedResponse::Kind::Out;
    r.cls = *cls;
    r.text = items[3].as_text();
    return r;
  }
  if (head.is_symbol_named("ret") && items.size() == 4 &&
      items[2].is_keyword()) {
    const Keyword& status = items[2].as_keyword();
    if (status.name != "ok" && status.name != "error") return std::nullopt;
    r.kind = ParsedResponse::Kind::Ret;
    r.status = status;
    r.payload = items[3];
    return r;
  }
  if (head.is_symbol_named("session") && items.size() == 3) {
    r.kind = ParsedResponse::Kind::Session;
    r.payload = items[2];
    return r;
  }
  return std::nullopt;
}

// ---- Connection helpers ----------------------------------------------------

Response Connection::ld(SExpr forms, SExpr options,
                        const OutputCallback& on_output) {
  return roundtrip(
      [&forms, &options](uint64_t id) {
        return make_ld_frame(id, std::move(forms), std::move(options));
      },
      on_output);
}

Response Connection::get_global(Symbol name) {
  return roundtrip(
      [&name](uint64_t id) {
        return make_get_global_frame(id, std::move(name));
      },
      nullptr);
}

void Connection::ping() {
  Response r = roundtrip([](uint64_t id) { return make_ping_frame(id); },
                         nullptr);
  if (r.kind != Response::Kind::Pong)
    throw ProtocolError("backend answered the ping with a non-pong frame");
}

// ---- StreamConnection -------------------------------------------------------

StreamConnection::StreamConnection(int read_fd, int write_fd)
    : read_fd_(read_fd), write_fd_(write_fd), deadline_(default_deadline()) {
  ignore_sigpipe();
  reader_ = std::thread([this] { reader_main(); });
}

StreamConnection::~StreamConnection() { teardown(); }

void StreamConnection::reader_main() {
  std::string buf;
  char chunk[4096];
  for (;;) {
    ssize_t n = ::read(read_fd_, chunk, sizeof chunk);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) break;
    buf.append(chunk, static_cast<size_t>(n));
    size_t pos;
    while ((pos = buf.find('\n')) != std::string::npos) {
      std::string line = buf.substr(0, pos);
      buf.erase(0, pos + 1);
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.find_first_not_of(" \t") == std::string::npos) continue;
      Item item{ItemKind::Frame, SExpr::nil()};
      try {
        item.frame = read_sexpr(line);
      } catch (const ParseError&) {
        item.kind = ItemKind::Malformed;
      }
      {
        std::lock_guard<std::mutex> lock(mu_);
        inbox_.push_back(std::move(item));
      }
      cv_.notify_all();
    }
  }
  {
    std::lock_guard<std::mutex> lock(mu_);
    inbox_.push_back(Item{ItemKind::Eof, SExpr::nil()});
  }
  cv_.notify_all();
}

bool StreamConnection::write_line(const std::string& line) {
  int fd;
  {
    std::lock_guard<std::mutex> lock(mu_);
    if (write_closed_ || dead_) return false;
    fd = write_fd_;
  }
  size_t off = 0;
  while (off < line.size()) {
    ssize_t n = ::write(fd, line.data() + off, line.size() - off);
    if (n < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    off += static_cast<size_t>(n);
  }
  return true;
}

Response StreamConnection::roundtrip(const FrameBuilder& build,
                                     const OutputCallback& on_output) {
  std::unique_lock<std::mutex> call(call_mu_, std::try_to_lock);
  if (!call.owns_lock())
    throw std::logic_error("request already in flight on this connection");
  {
    std::lock_guard<std::mutex> lock(mu_);
    if (dead_) throw BackendDied("connection is dead");
  }

  uint64_t id = ++next_id_;
  std::string line = print_sexpr(build(id));
  line.push_back('\n');
  if (!write_line(line)) {
    mark_dead();
    throw BackendDied("write to backend failed");
  }

  auto deadline = std::chrono::steady_clock::now() + deadline_;
  std::unique_lock<std::mutex> lock(mu_);
  for (;;) {
    bool got = cv_.wait_until(lock, deadline,
                              [&] { return !inbox_.empty() || dead_; });
    if (!got) {
      dead_ = true;
      throw TimeoutError("no response from backend within the deadline");
    }
    if (inbox_.empty()) {
      // dead_ was raised with nothing queued
      throw BackendDied("connection is dead");
    }
    Item item = std::move(inbox_.front());
    inbox_.pop_front();
    if (item.kind == ItemKind::Eof) {
      dead_ = true;
      throw BackendDied("backend closed the connection");
    }
    if (item.kind == ItemKind::Malformed) {
      dead_ = true;
      throw ProtocolError("unreadable frame from backend");
    }
    std::optional<ParsedResponse> r = parse_response(item.frame);
    if (!r || r->id != id) {
      dead_ = true;
      throw ProtocolError("unexpected frame from backend: " +
                          print_sexpr(item.frame));
    }
    if (r->kind == ParsedResponse::Kind::Out) {
      if (on_output) {
        lock.unlock();
        on_output(r->cls, r->text);
        lock.lock();
      }
      continue;
    }
    Response resp;
    resp.kind = r->kind == ParsedResponse::Kind::Pong
                    ? Response::Kind::Pong
                    : r->kind == ParsedResponse::Kind::Session
                          ? Response::Kind::Session
                          : Response::Kind::Ret;
    resp.status = r->status;
    resp.payload = r->payload;
    return resp;
  }
}

bool StreamConnection::alive() const {
  std::lock_guard<std::mutex> lock(mu_);
  return !dead_;
}

void StreamConnection::mark_dead() {
  {
    std::lock_guard<std::mutex> lock(mu_);
    dead_ = true;
  }
  cv_.notify_all();
}

void StreamConnection::shutdown_write() {
  std::lock_guard<std::mutex> lock(mu_);
  if (write_closed_) return;
  write_closed_ = true;
  // Sockets get a half-close so the peer sees EOF while replies still flow;
  // on pipes shutdown fails with ENOTSOCK and the close below does the job.
  ::shutdown(write_fd_, SHUT_WR);
  if (write_fd_ != read_fd_) {
    ::close(write_fd_);
    write_fd_ = -1;
  }
}

void StreamConnection::teardown() {
  {
    std::lock_guard<std::mutex> lock(mu_);
    if (torn_down_) return;
    torn_down_ = true;
    dead_ = true;
  }
  cv_.notify_all();
  shutdown_write();
  ::shutdown(read_fd_, SHUT_RD);  // wakes a reader blocked on a socket
  if (reader_.joinable()) reader_.join();
  std::lock_guard<std::mutex> lock(mu_);
  ::close(read_fd_);
  read_fd_ = -1;
}

// ---- StdioConnection --------------------------------------------------------

StdioConnection::StdioConnection(pid_t pid, int read_fd, int write_fd)
    : StreamConnection(read_fd, write_fd), pid_(pid) {}

StdioConnection::~StdioConnection() {
  // Closing the child's stdin asks it to exit; the kill is a backstop. Child
  // death closes its stdout, so the base teardown's reader join cannot hang.
  shutdown_write();
  if (pid_ > 0 && !reaped_) {
    for (int i = 0; i < 20 && !reaped_; ++i) {
      pid_t r = ::waitpid(pid_, nullptr, WNOHANG);
      if (r != 0) reaped_ = true;
      if (!reaped_) std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
    if (!reaped_) {
      ::kill(pid_, SIGKILL);
      ::waitpid(pid_, nullptr, 0);
      reaped_ = true;
    }
  }
  teardown();
}

void StdioConnection::terminate() {
  mark_dead();
  if (pid_ > 0 && !reaped_) {
    ::kill(pid_, SIGKILL);
    ::waitpid(pid_, nullptr, 0);
    reaped_ = true;
  }
}

// ---- spawn / connect --------------------------------------------------------

std::unique_ptr<StdioConnection> spawn_stdio_backend(
    const std::vector<std::string>& argv, std::chrono::milliseconds deadline) {
  if (argv.empty()) throw SpawnError("cannot spawn an empty command line");
  ignore_sigpipe();

  int to_child[2] = {-1, -1};
  int from_child[2] = {-1, -1};
  int status_pipe[2] = {-1, -1};  // exec failures report errno here
  auto close_pair = [](int p[2]) {
    if (p[0] >= 0) ::close(p[0]);
    if (p[1] >= 0) ::close(p[1]);
  };
  if (::pipe(to_child) < 0 || ::pipe(from_child) < 0 ||
      ::pipe2(status_pipe, O_CLOEXEC) < 0) {
    int err = errno;
    close_pair(to_child);
    close_pair(from_child);
    close_pair(status_pipe);
    throw SpawnError("pipe failed: " + errno_text(err));
  }

  pid_t pid = ::fork();
  if (pid < 0) {
    int err = errno;
    close_pair(to_child);
    close_pair(from_child);
    close_pair(status_pipe);
    throw SpawnError("fork failed: " + errno_text(err));
  }

  if (pid == 0) {
    ::dup2(to_child[0], STDIN_FILENO);
    ::dup2(from_child[1], STDOUT_FILENO);
    // stderr passes through for diagnostics
    close_pair(to_child);
    close_pair(from_child);
    std::vector<char*> cargv;
    cargv.reserve(argv.size() + 1);
    for (const std::string& a : argv) cargv.push_back(const_cast<char*>(a.c_str()));
    cargv.push_back(nullptr);
    ::execvp(cargv[0], cargv.data());
    int err = errno;
    [[maybe_unused]] ssize_t n = ::write(status_pipe[1], &err, sizeof err);
    ::_exit(127);
  }

  ::close(to_child[0]);
  ::close(from_child[1]);
  ::close(status_pipe[1]);
  int exec_errno = 0;
  ssize_t n = ::read(status_pipe[0], &exec_errno, sizeof exec_errno);
  ::close(status_pipe[0]);
  if (n > 0) {
    ::close(to_child[1]);
    ::close(from_child[0]);
    ::waitpid(pid, nullptr, 0);
    throw SpawnError("cannot exec " + argv[0] + ": " + errno_text(exec_errno));
  }

  auto conn =
      std::make_unique<StdioConnection>(pid, from_child[0], to_child[1]);
  conn->set_deadline(deadline);
  conn->ping();
  return conn;
}

std::unique_ptr<Connection> connect_tcp(const std::string& host, uint16_t port,
                                        std::chrono::milliseconds deadline) {
  ignore_sigpipe();
  struct addrinfo hints {};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  struct addrinfo* res = nullptr;
  std::string service = std::to_string(port);
  int rc = ::getaddrinfo(host.c_str(), service.c_str(), &hints, &res);
  if (rc != 0)
    throw ConnectError("cannot resolve " + host + ": " + gai_strerror(rc));

  int fd = -1;
  std::string reason = "no usable address";
  for (struct addrinfo* ai = res; ai; ai = ai->ai_next) {
    fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
    if (fd < 0) {
      reason = errno_text(errno);
      continue;
    }
    if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) break;
    reason = errno_text(errno);
    ::close(fd);
    fd = -1;
  }
  ::freeaddrinfo(res);
  if (fd < 0)
    throw ConnectError("cannot connect to " + host + ":" + service + ": " +
                       reason);

  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);

  auto conn = std::make_unique<StreamConnection>(fd, fd);
  conn->set_deadline(deadline);
  conn->ping();
  return conn;
}

std::unique_ptr<Connection> connect_tcp(const std::string& address,
                                        std::chrono::milliseconds deadline) {
  size_t colon = address.rfind(':');
  if (colon == std::string::npos || colon == 0 ||
      colon + 1 >= address.size())
    throw ConnectError("address must look like host:port, got " + address);
  const std::string host = address.substr(0, colon);
  char* end = nullptr;
  const std::string ptext = address.substr(colon + 1);
  long port = std::strtol(ptext.c_str(), &end, 10);
  if (!end || *end != '\0' || port < 1 || port > 65535)
    throw ConnectError("bad port in address " + address);
  return connect_tcp(host, static_cast<uint16_t>(port), deadline);
}

}  // namespace pbridge
