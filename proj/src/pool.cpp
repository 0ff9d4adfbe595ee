#include "pbridge/pool.hpp"

#include <algorithm>
#include <cerrno>
#include <cstdio>
#include <cstring>
#include <limits>

#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include "pbridge/sexpr.hpp"

namespace pbridge {

namespace {

// Synchronous line puller for a client socket. Unlike the transport's
// reader thread, a pool handler owns its connection outright, so plain
// blocking reads keep the control flow obvious.
class LineReader {
 public:
  explicit LineReader(int fd) : fd_(fd) {}

  bool next(std::string& line) {
    for (;;) {
      auto nl = buf_.find('\n');
      if (nl != std::string::npos) {
        line.assign(buf_, 0, nl);
        buf_.erase(0, nl + 1);
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;  // blank keepalives
        return true;
      }
      if (eof_) {
        if (buf_.empty()) return false;
        line = std::move(buf_);
        buf_.clear();
        if (!line.empty() && line.back() == '\r') line.pop_back();
        return !line.empty();
      }
      char chunk[4096];
      ssize_t n = ::read(fd_, chunk, sizeof chunk);
      if (n > 0) {
        buf_.append(chunk, static_cast<size_t>(n));
      } else if (n == 0 || errno != EINTR) {
        eof_ = true;
      }
    }
  }

 private:
  int fd_;
  std::string buf_;
  bool eof_ = false;
};

bool write_line(int fd, const std::string& text) {
  std::string out = text;
  out.push_back('\n');
  size_t off = 0;
  while (off < out.size()) {
    ssize_t n = ::write(fd, out.data() + off, out.size() - off);
    if (n > 0) {
      off += static_cast<size_t>(n);
    } else if (errno != EINTR) {
      return false;
    }
  }
  return true;
}

std::optional<uint64_t> to_sid(const SExpr& e) {
  if (!e.is_integer()) return std::nullopt;
  const Integer& n = e.as_integer();
  if (n < 0 || n > Integer(std::numeric_limits<uint64_t>::max()))
    return std::nullopt;
  return n.convert_to<uint64_t>();
}

std::string strip_scheme(const std::string& target) {
  constexpr std::string_view scheme = "tcp://";
  if (target.size() > scheme.size() &&
      target.compare(0, scheme.size(), scheme) == 0)
    return target.substr(scheme.size());
  return target;
}

}  // namespace

PoolServer::PoolServer(PoolConfig config) : cfg_(std::move(config)) {
  if (cfg_.worker_count == 0)
    throw PoolError("pool needs at least one worker");
  if (cfg_.backend_argv.empty())
    throw PoolError("pool needs a backend command");
}

PoolServer::~PoolServer() { stop(); }

std::string PoolServer::address() const {
  return cfg_.host + ":" + std::to_string(port_);
}

std::unique_ptr<StdioConnection> PoolServer::spawn_worker() {
  return spawn_stdio_backend(cfg_.backend_argv);
}

void PoolServer::start() {
  ensure_sigpipe_ignored();

  // a pool whose backend cannot start should fail loudly, not limp
  {
    std::lock_guard<std::mutex> lk(mu_);
    workers_.resize(cfg_.worker_count);
    for (Worker& w : workers_) w.conn = spawn_worker();
  }

  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  hints.ai_flags = AI_PASSIVE;
  addrinfo* res = nullptr;
  std::string port_str = std::to_string(cfg_.port);
  int rc = ::getaddrinfo(cfg_.host.c_str(), port_str.c_str(), &hints, &res);
  if (rc != 0)
    throw ConnectError("cannot resolve " + address() + ": " +
                       gai_strerror(rc));

  int fd = -1;
  std::string last_error = "no usable address";
  for (addrinfo* ai = res; ai; ai = ai->ai_next) {
    fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
    if (fd < 0) {
      last_error = std::strerror(errno);
      continue;
    }
    int one = 1;
    ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    if (::bind(fd, ai->ai_addr, ai->ai_addrlen) == 0 && ::listen(fd, 64) == 0)
      break;
    last_error = std::strerror(errno);
    ::close(fd);
    fd = -1;
  }
  ::freeaddrinfo(res);
  if (fd < 0)
    throw ConnectError("cannot listen on " + address() + ": " + last_error);

  sockaddr_storage bound{};
  socklen_t len = sizeof bound;
  if (::getsockname(fd, reinterpret_cast<sockaddr*>(&bound), &len) == 0) {
    if (bound.ss_family == AF_INET)
      port_ = ntohs(reinterpret_cast<sockaddr_in*>(&bound)->sin_port);
    else if (bound.ss_family == AF_INET6)
      port_ = ntohs(reinterpret_cast<sockaddr_in6*>(&bound)->sin6_port);
  }
  if (port_ == 0) port_ = cfg_.port;

  listen_fd_ = fd;
  accept_thread_ = std::thread([this] { accept_loop(); });
  supervisor_thread_ = std::thread([this] { supervise(); });
}

void PoolServer::stop() {
  bool expected = false;
  if (!stopping_.compare_exchange_strong(expected, true)) return;

  {
    std::lock_guard<std::mutex> lk(mu_);
    stop_cv_.notify_all();
    avail_cv_.notify_all();
  }
  if (listen_fd_ >= 0) {
    ::shutdown(listen_fd_, SHUT_RDWR);
    ::close(listen_fd_);
    listen_fd_ = -1;
  }
  if (accept_thread_.joinable()) accept_thread_.join();

  // wake blocked handlers: their clients stop reading, their workers die
  {
    std::lock_guard<std::mutex> lk(mu_);
    for (int fd : client_fds_) ::shutdown(fd, SHUT_RDWR);
    for (Worker& w : workers_)
      if (w.conn) w.conn->terminate();
  }
  {
    std::lock_guard<std::mutex> lk(threads_mu_);
    for (std::thread& t : client_threads_)
      if (t.joinable()) t.join();
    client_threads_.clear();
  }
  if (supervisor_thread_.joinable()) supervisor_thread_.join();

  std::lock_guard<std::mutex> lk(mu_);
  workers_.clear();
  sessions_.clear();
  client_fds_.clear();
}

std::size_t PoolServer::live_worker_count() const {
  std::lock_guard<std::mutex> lk(mu_);
  std::size_t n = 0;
  for (const Worker& w : workers_)
    if (w.conn && w.conn->alive()) ++n;
  return n;
}

std::vector<pid_t> PoolServer::worker_pids() const {
  std::lock_guard<std::mutex> lk(mu_);
  std::vector<pid_t> pids;
  for (const Worker& w : workers_)
    if (w.conn) pids.push_back(w.conn->pid());
  return pids;
}

void PoolServer::accept_loop() {
  while (!stopping_) {
    int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) {
      if (errno == EINTR) continue;
      break;  // listener closed
    }
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    {
      std::lock_guard<std::mutex> lk(mu_);
      if (stopping_) {
        ::close(fd);
        break;
      }
      client_fds_.push_back(fd);
    }
    std::lock_guard<std::mutex> lk(threads_mu_);
    client_threads_.emplace_back([this, fd] { handle_client(fd); });
  }
}

void PoolServer::supervise() {
  std::unique_lock<std::mutex> lk(mu_);
  while (!stopping_) {
    stop_cv_.wait_for(lk, std::chrono::milliseconds(100));
    if (stopping_) break;
    for (std::size_t i = 0; i < workers_.size(); ++i) {
      Worker& w = workers_[i];
      if (w.leased || w.respawning) continue;
      if (w.conn && w.conn->alive()) continue;
      w.respawning = true;
      std::unique_ptr<StdioConnection> old = std::move(w.conn);
      lk.unlock();
      old.reset();  // reap outside the lock
      std::unique_ptr<StdioConnection> fresh;
      try {
        fresh = spawn_worker();
      } catch (const TransportError& e) {
        std::fprintf(stderr, "pool: worker respawn failed: %s\n", e.what());
      }
      lk.lock();
      workers_[i].conn = std::move(fresh);
      workers_[i].respawning = false;
      if (workers_[i].conn) avail_cv_.notify_all();
    }
  }
}

std::optional<uint64_t> PoolServer::acquire_session(bool fresh) {
  std::unique_lock<std::mutex> lk(mu_);
  auto deadline = std::chrono::steady_clock::now() + cfg_.max_acquire_wait;
  for (;;) {
    if (stopping_) return std::nullopt;

    std::size_t best = workers_.size();
    for (std::size_t i = 0; i < workers_.size(); ++i) {
      Worker& w = workers_[i];
      if (w.leased || w.respawning || !w.conn || !w.conn->alive()) continue;
      if (best == workers_.size() ||
          w.released_seq < workers_[best].released_seq)
        best = i;
    }

    if (best < workers_.size()) {
      Worker& w = workers_[best];
      w.leased = true;
      if (fresh) {
        w.respawning = true;
        std::unique_ptr<StdioConnection> old = std::move(w.conn);
        lk.unlock();
        old.reset();
        std::unique_ptr<StdioConnection> recycled;
        try {
          recycled = spawn_worker();
        } catch (const TransportError& e) {
          std::fprintf(stderr, "pool: worker recycle failed: %s\n", e.what());
        }
        lk.lock();
        Worker& w2 = workers_[best];
        w2.conn = std::move(recycled);
        w2.respawning = false;
        if (!w2.conn) {  // slot stays down for the supervisor; keep looking
          w2.leased = false;
          if (std::chrono::steady_clock::now() >= deadline)
            return std::nullopt;
          avail_cv_.wait_until(lk, deadline);
          continue;
        }
      }
      uint64_t sid = ++next_sid_;
      sessions_[sid] = best;
      return sid;
    }

    if (avail_cv_.wait_until(lk, deadline) == std::cv_status::timeout)
      return std::nullopt;
  }
}

bool PoolServer::release_session(uint64_t sid) {
  std::lock_guard<std::mutex> lk(mu_);
  auto it = sessions_.find(sid);
  if (it == sessions_.end()) return false;
  Worker& w = workers_[it->second];
  sessions_.erase(it);
  w.leased = false;
  w.released_seq = ++release_counter_;
  avail_cv_.notify_all();
  return true;
}

void PoolServer::invalidate_session(uint64_t sid) {
  std::unique_ptr<StdioConnection> dead;
  {
    std::lock_guard<std::mutex> lk(mu_);
    auto it = sessions_.find(sid);
    if (it == sessions_.end()) return;
    Worker& w = workers_[it->second];
    sessions_.erase(it);
    w.leased = false;
    w.released_seq = ++release_counter_;
    dead = std::move(w.conn);  // supervisor respawns the empty slot
  }
  dead.reset();  // kill and reap outside the lock
}

void PoolServer::handle_client(int fd) {
  LineReader reader(fd);
  uint64_t last_id = 0;
  std::vector<uint64_t> owned;
  std::string line;

  auto send = [&](const SExpr& frame) { write_line(fd, print_sexpr(frame)); };
  auto drop_owned = [&](uint64_t sid) {
    owned.erase(std::remove(owned.begin(), owned.end(), sid), owned.end());
  };

  while (!stopping_ && reader.next(line)) {
    SExpr frame;
    try {
      frame = read_sexpr(line);
    } catch (const ParseError&) {
      if (std::optional<uint64_t> rid = recover_frame_id(line)) {
        if (*rid > last_id) last_id = *rid;
        send(make_ret_frame(*rid, Keyword{"error"}, SExpr::kw("protocol")));
      } else {
        std::fprintf(stderr, "pool: unreadable frame from client\n");
      }
      continue;
    }

    std::optional<uint64_t> id = frame_id(frame);
    if (!id) {
      std::fprintf(stderr, "pool: frame without a request id\n");
      continue;
    }
    auto protocol_error = [&] {
      send(make_ret_frame(*id, Keyword{"error"}, SExpr::kw("protocol")));
    };
    if (*id <= last_id) {
      protocol_error();
      continue;
    }
    last_id = *id;

    const auto& items = frame.items();
    const SExpr& head = items[0];

    if (head.is_symbol_named("ping") && items.size() == 2) {
      send(make_pong_frame(*id));
      continue;
    }

    if (head.is_symbol_named("acquire") &&
        (items.size() == 2 ||
         (items.size() == 3 && items[2].is_keyword_named("fresh")))) {
      std::optional<uint64_t> sid = acquire_session(items.size() == 3);
      if (!sid) {
        send(make_ret_frame(*id, Keyword{"error"}, SExpr::kw("pool-exhausted")));
        continue;
      }
      owned.push_back(*sid);
      send(SExpr::list({SExpr::sym("session"), SExpr::integer(Integer(*id)),
                        SExpr::integer(Integer(*sid))}));
      continue;
    }

    // sessions are capabilities of the connection that acquired them; a sid
    // this client does not own reads as unknown
    auto owns = [&](std::optional<uint64_t> sid) {
      return sid &&
             std::find(owned.begin(), owned.end(), *sid) != owned.end();
    };

    if (head.is_symbol_named("release") && items.size() == 3) {
      std::optional<uint64_t> sid = to_sid(items[2]);
      if (owns(sid) && release_session(*sid)) {
        drop_owned(*sid);
        send(make_ret_frame(*id, Keyword{"ok"}, SExpr::nil()));
      } else {
        send(make_ret_frame(*id, Keyword{"error"},
                            SExpr::kw("unknown-session")));
      }
      continue;
    }

    bool is_ld = head.is_symbol_named("ld") && items.size() == 5;
    bool is_get = head.is_symbol_named("get-global") && items.size() == 4;
    if (is_ld || is_get) {
      std::optional<uint64_t> sid = to_sid(items[2]);
      StdioConnection* worker = nullptr;
      if (owns(sid)) {
        std::lock_guard<std::mutex> lk(mu_);
        auto it = sessions_.find(*sid);
        if (it != sessions_.end()) worker = workers_[it->second].conn.get();
      }
      if (!worker) {
        send(make_ret_frame(*id, Keyword{"error"},
                            SExpr::kw("unknown-session")));
        continue;
      }
      try {
        Response r = worker->roundtrip(
            [&](uint64_t wid) {
              SExpr::List fwd;
              fwd.reserve(items.size() - 1);
              fwd.push_back(head);
              fwd.push_back(SExpr::integer(Integer(wid)));
              for (std::size_t k = 3; k < items.size(); ++k)
                fwd.push_back(items[k]);
              return SExpr::list(std::move(fwd));
            },
            [&](StreamClass cls, std::string_view text) {
              send(make_out_frame(*id, cls, text));
            });
        if (r.kind == Response::Kind::Ret)
          send(make_ret_frame(*id, r.status, r.payload));
        else
          protocol_error();
      } catch (const TransportError&) {
        send(make_ret_frame(*id, Keyword{"error"}, SExpr::kw("worker-died")));
        invalidate_session(*sid);
        drop_owned(*sid);
      }
      continue;
    }

    protocol_error();
  }

  for (uint64_t sid : owned) release_session(sid);
  {
    std::lock_guard<std::mutex> lk(mu_);
    client_fds_.erase(std::remove(client_fds_.begin(), client_fds_.end(), fd),
                      client_fds_.end());
  }
  ::close(fd);
}

Response LeaseConnection::roundtrip(const FrameBuilder& build,
                                    const OutputCallback& on_output) {
  if (dead_) throw BackendDied("pooled session is no longer usable");
  Response r = base_->roundtrip(
      [&](uint64_t id) {
        SExpr frame = build(id);
        // session-scoped frames carry the sid right after the request id
        if (frame.is_list() && frame.items().size() >= 2 &&
            (frame.items()[0].is_symbol_named("ld") ||
             frame.items()[0].is_symbol_named("get-global"))) {
          const auto& items = frame.items();
          SExpr::List out;
          out.reserve(items.size() + 1);
          out.push_back(items[0]);
          out.push_back(items[1]);
          out.push_back(SExpr::integer(Integer(sid_)));
          for (std::size_t i = 2; i < items.size(); ++i)
            out.push_back(items[i]);
          return SExpr::list(std::move(out));
        }
        return frame;
      },
      on_output);
  if (r.kind == Response::Kind::Ret && r.status.name == "error") {
    if (r.payload.is_keyword_named("worker-died")) {
      dead_ = true;
      throw BackendDied("pooled worker died mid-call");
    }
    if (r.payload.is_keyword_named("unknown-session")) {
      dead_ = true;
      throw PoolError("session is no longer known to the pool");
    }
  }
  return r;
}

PoolClient::PoolClient(const std::string& target,
                       std::chrono::milliseconds deadline)
    : base_(connect_tcp(strip_scheme(target), deadline)) {}

uint64_t PoolClient::acquire(bool fresh) {
  Response r = base_->roundtrip(
      [&](uint64_t id) {
        SExpr::List f{SExpr::sym("acquire"), SExpr::integer(Integer(id))};
        if (fresh) f.push_back(SExpr::kw("fresh"));
        return SExpr::list(std::move(f));
      },
      nullptr);
  if (r.kind == Response::Kind::Session) {
    std::optional<uint64_t> sid = to_sid(r.payload);
    if (!sid)
      throw ProtocolError("pool returned an unusable session id: " +
                          print_sexpr(r.payload));
    return *sid;
  }
  if (r.kind == Response::Kind::Ret && r.status.name == "error" &&
      r.payload.is_keyword_named("pool-exhausted"))
    throw PoolError("pool exhausted: no worker became available in time");
  throw ProtocolError("unexpected reply to acquire");
}

void PoolClient::release(uint64_t sid) {
  Response r = base_->roundtrip(
      [&](uint64_t id) {
        return SExpr::list({SExpr::sym("release"), SExpr::integer(Integer(id)),
                            SExpr::integer(Integer(sid))});
      },
      nullptr);
  if (r.ok()) return;
  if (r.kind == Response::Kind::Ret &&
      r.payload.is_keyword_named("unknown-session"))
    throw PoolError("release of an unknown session");
  throw ProtocolError("unexpected reply to release");
}

std::unique_ptr<LeaseConnection> PoolClient::lease(bool fresh) {
  return std::make_unique<LeaseConnection>(base_, acquire(fresh));
}

}  // namespace pbridge
