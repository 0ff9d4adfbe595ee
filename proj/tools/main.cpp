// prover-bridge: command line front end. Subcommands:
//   eval        one compute/query/event call, result on stdout
//   script      newline-separated (mode form) pairs from a file
//   repl        the same pairs interactively
//   pool        TCP worker-pool server
//   miniprover  the bundled backend speaking the wire format on stdio
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include <CLI11.hpp>

#include "pbridge/bridge.hpp"
#include "pbridge/miniprover.hpp"
#include "pbridge/pool.hpp"
#include "pbridge/sexpr.hpp"
#include "pbridge/transport.hpp"

using namespace pbridge;

namespace {

std::string self_exe(const char* argv0) {
  char buf[4096];
  ssize_t n = ::readlink("/proc/self/exe", buf, sizeof buf - 1);
  if (n > 0) {
    buf[n] = '\0';
    return buf;
  }
  return argv0;
}

std::vector<std::string> split_argv(const std::string& spec) {
  std::vector<std::string> out;
  std::istringstream in(spec);
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

// --backend wins, then PROVER_BRIDGE_BACKEND, then the bundled backend.
// "tcp://host:port" targets a pool server; anything else is an argv string.
std::unique_ptr<Connection> open_backend(const std::string& flag,
                                         const char* argv0) {
  std::string spec = flag;
  if (spec.empty())
    if (const char* env = std::getenv("PROVER_BRIDGE_BACKEND")) spec = env;
  if (spec.empty()) spec = self_exe(argv0) + " miniprover";

  if (spec.rfind("tcp://", 0) == 0) {
    PoolClient client(spec);
    return client.lease();  // the lease keeps the transport alive
  }
  std::vector<std::string> argv = split_argv(spec);
  if (argv.empty()) throw BridgeUsageError("empty backend command");
  return spawn_stdio_backend(argv);
}

SExpr flag_options(bool quiet, bool capture, std::optional<int64_t> limit) {
  SExpr::List o;
  if (quiet) {
    o.push_back(SExpr::kw("quiet"));
    o.push_back(SExpr::t());
  }
  if (capture) {
    o.push_back(SExpr::kw("capture-output"));
    o.push_back(SExpr::t());
  }
  if (limit) {
    o.push_back(SExpr::kw("prover-step-limit"));
    o.push_back(SExpr::integer(*limit));
  }
  return SExpr::list(std::move(o));
}

std::string result_line(const QueryResult& r) {
  return print_sexpr(SExpr::list({SExpr::boolean(r.erp), r.val}));
}

void print_line(const std::string& s) {
  std::fputs(s.c_str(), stdout);
  std::fputc('\n', stdout);
  std::fflush(stdout);
}

QueryResult run_mode(Session& session, const std::string& mode,
                     const SExpr& form, const SExpr& options) {
  if (mode == "compute") return session.compute(form, options);
  if (mode == "query") return session.query(form, options);
  if (mode == "event") return session.event(form, options);
  throw BridgeUsageError("unknown mode: " + mode +
                         " (expected compute, query, or event)");
}

// text entry: malformed or multi-form input becomes a failed call, not a
// CLI error
QueryResult run_mode_text(Session& session, const std::string& mode,
                          const std::string& text, const SExpr& options) {
  if (mode == "compute") return session.compute(text, options);
  if (mode == "query") return session.query(text, options);
  if (mode == "event") return session.event(text, options);
  throw BridgeUsageError("unknown mode: " + mode +
                         " (expected compute, query, or event)");
}

// A script or repl line: a single (mode form) pair. Returns false on a
// blank or comment-only line.
bool parse_pair(const std::string& line, std::string& mode, SExpr& form) {
  std::vector<SExpr> forms = read_all(line);  // ParseError propagates
  if (forms.empty()) return false;
  if (forms.size() != 1 || !forms[0].is_list() ||
      forms[0].items().size() != 2 || !forms[0].items()[0].is_symbol())
    throw BridgeUsageError("expected one (mode form) pair, got: " + line);
  mode = forms[0].items()[0].as_symbol().name;
  form = forms[0].items()[1];
  return true;
}

struct CallFlags {
  bool quiet = false;
  bool capture = false;
  std::optional<int64_t> step_limit;

  SExpr options() const { return flag_options(quiet, capture, step_limit); }
};

// stdout is reserved for result lines; prover chatter goes to stderr
void route_output_to_stderr(Session& session) {
  session.output().set_passthrough([](StreamClass, std::string_view text) {
    std::fwrite(text.data(), 1, text.size(), stderr);
  });
}

void emit_captured(Session& session, std::string& accumulated) {
  accumulated += session.get_captured_output();
}

int do_eval(const std::string& backend, const char* argv0,
            const std::string& mode, const std::string& form,
            const CallFlags& flags) {
  Session session(open_backend(backend, argv0));
  route_output_to_stderr(session);
  QueryResult r = run_mode_text(session, mode, form, flags.options());
  std::string captured;
  if (flags.capture) emit_captured(session, captured);
  print_line(result_line(r));
  if (flags.capture)
    print_line(print_sexpr(
        SExpr::list({SExpr::sym("captured"), SExpr::text(captured)})));
  return r.erp ? 1 : 0;
}

int do_stream(Session& session, std::istream& in, const CallFlags& flags,
              bool interactive) {
  std::string line;
  std::string captured;
  bool any_failed = false;
  int lineno = 0;

  if (interactive) std::fputs("pbridge> ", stderr);
  while (std::getline(in, line)) {
    ++lineno;
    try {
      std::string mode;
      SExpr form;
      if (parse_pair(line, mode, form)) {
        QueryResult r = run_mode(session, mode, form, flags.options());
        if (flags.capture) emit_captured(session, captured);
        print_line(result_line(r));
        if (r.erp) any_failed = true;
      }
    } catch (const ParseError& e) {
      if (!interactive)
        throw BridgeUsageError("line " + std::to_string(lineno) +
                               ": unreadable input: " + e.what());
      std::fprintf(stderr, "unreadable input: %s\n", e.what());
    } catch (const BridgeUsageError& e) {
      if (!interactive) throw;
      std::fprintf(stderr, "%s\n", e.what());
    }
    if (interactive) std::fputs("pbridge> ", stderr);
  }
  if (interactive) std::fputc('\n', stderr);

  if (flags.capture)
    print_line(print_sexpr(
        SExpr::list({SExpr::sym("captured"), SExpr::text(captured)})));
  return any_failed ? 1 : 0;
}

int do_script(const std::string& backend, const char* argv0,
              const std::string& path, const CallFlags& flags) {
  std::ifstream in(path);
  if (!in) throw BridgeUsageError("cannot open script: " + path);
  Session session(open_backend(backend, argv0));
  route_output_to_stderr(session);
  return do_stream(session, in, flags, false);
}

int do_repl(const std::string& backend, const char* argv0,
            const CallFlags& flags) {
  Session session(open_backend(backend, argv0));
  route_output_to_stderr(session);
  return do_stream(session, std::cin, flags, true);
}

int do_pool(const std::string& backend, const char* argv0,
            const std::string& listen, std::size_t workers,
            int64_t max_wait_ms) {
  PoolConfig cfg;
  cfg.worker_count = workers;
  cfg.max_acquire_wait = std::chrono::milliseconds(max_wait_ms);

  std::string spec = backend.empty() ? self_exe(argv0) + " miniprover"
                                     : backend;
  cfg.backend_argv = split_argv(spec);
  if (cfg.backend_argv.empty())
    throw BridgeUsageError("empty backend command");

  auto colon = listen.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 >= listen.size())
    throw BridgeUsageError("listen address must be HOST:PORT: " + listen);
  cfg.host = listen.substr(0, colon);
  long port = std::strtol(listen.c_str() + colon + 1, nullptr, 10);
  if (port < 0 || port > 65535)
    throw BridgeUsageError("listen port out of range: " + listen);
  cfg.port = static_cast<uint16_t>(port);

  PoolServer server(std::move(cfg));
  server.start();
  print_line("listening on " + server.address());

  // serve until stdin closes, so a supervisor can stop us cleanly
  char buf[256];
  while (::read(0, buf, sizeof buf) > 0) {
  }
  server.stop();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  ensure_sigpipe_ignored();

  CLI::App app{"bridge for REPL-style prover backends"};
  app.require_subcommand(1);
  const char* argv0 = argc > 0 ? argv[0] : "prover-bridge";

  std::string backend;
  std::string mode;
  std::string form;
  std::string script_path;
  std::string listen = "127.0.0.1:0";
  std::size_t workers = 4;
  int64_t max_wait_ms = 10000;
  CallFlags flags;
  int64_t step_limit_flag = -1;

  auto add_call_flags = [&](CLI::App* cmd) {
    cmd->add_option("--backend", backend,
                    "backend command or tcp://host:port (default: bundled "
                    "miniprover, or PROVER_BRIDGE_BACKEND)");
    cmd->add_flag("--quiet", flags.quiet, "discard prover output");
    cmd->add_flag("--capture-output", flags.capture,
                  "capture prover output and print it at the end");
    cmd->add_option("--step-limit", step_limit_flag,
                    "prover step limit for this call")
        ->check(CLI::NonNegativeNumber);
  };

  CLI::App* eval_cmd = app.add_subcommand("eval", "run one call");
  eval_cmd->add_option("--mode", mode, "compute, query, or event")
      ->required()
      ->check(CLI::IsMember({"compute", "query", "event"}));
  eval_cmd->add_option("--form", form, "form to evaluate")->required();
  add_call_flags(eval_cmd);

  CLI::App* script_cmd =
      app.add_subcommand("script", "run (mode form) pairs from a file");
  script_cmd->add_option("file", script_path, "script path")->required();
  add_call_flags(script_cmd);

  CLI::App* repl_cmd =
      app.add_subcommand("repl", "interactive (mode form) pairs");
  add_call_flags(repl_cmd);

  CLI::App* pool_cmd = app.add_subcommand("pool", "serve a worker pool");
  pool_cmd->add_option("--workers", workers, "worker count")
      ->check(CLI::PositiveNumber);
  pool_cmd->add_option("--listen", listen, "HOST:PORT (port 0 picks one)");
  pool_cmd->add_option("--backend", backend, "worker command line");
  pool_cmd->add_option("--max-wait-ms", max_wait_ms,
                       "acquire queue timeout in milliseconds")
      ->check(CLI::NonNegativeNumber);

  CLI::App* mini_cmd =
      app.add_subcommand("miniprover", "serve the bundled backend on stdio");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  if (step_limit_flag >= 0) flags.step_limit = step_limit_flag;

  try {
    if (*mini_cmd) return serve_stdio();
    if (*eval_cmd) return do_eval(backend, argv0, mode, form, flags);
    if (*script_cmd) return do_script(backend, argv0, script_path, flags);
    if (*repl_cmd) return do_repl(backend, argv0, flags);
    if (*pool_cmd) return do_pool(backend, argv0, listen, workers, max_wait_ms);
  } catch (const BridgeUsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const TransportError& e) {
    std::fprintf(stderr, "backend failure: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "failure: %s\n", e.what());
    return 3;
  }
  return 2;
}
