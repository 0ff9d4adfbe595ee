#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <cstdlib>
#include <random>
#include <string>
#include <vector>

#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include "pbridge/bridge.hpp"
#include "pbridge/sexpr.hpp"
#include "pbridge/transport.hpp"
#include "support/sexpr_gen.hpp"

using namespace pbridge;
using namespace std::chrono_literals;

namespace {

SExpr rd(const std::string& text) { return read_sexpr(text); }

std::vector<std::string> miniprover_argv() {
  return {PBRIDGE_CLI_BIN, "miniprover"};
}

std::vector<std::string> sh(const std::string& script) {
  return {"/bin/sh", "-c", script};
}

// a port that was just bound and closed: connecting should be refused
uint16_t likely_free_port() {
  int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  REQUIRE(fd >= 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  REQUIRE(::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) == 0);
  socklen_t len = sizeof addr;
  REQUIRE(::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len) == 0);
  ::close(fd);
  return ntohs(addr.sin_port);
}

}  // namespace

TEST_CASE("frame builders print canonical requests") {
  CHECK(print_sexpr(make_ld_frame(7, rd("((+ 1 2))"),
                                  rd("(:standard-co :suppress)"))) ==
        "(ld 7 ((+ 1 2)) (:standard-co :suppress))");
  CHECK(print_sexpr(make_get_global_frame(8, Symbol{std::nullopt, "x"})) ==
        "(get-global 8 x)");
  CHECK(print_sexpr(make_ping_frame(9)) == "(ping 9)");
  CHECK(print_sexpr(make_out_frame(10, StreamClass::ProofsCo, "Q.E.D.\n")) ==
        "(out 10 :proofs-co \"Q.E.D.\\n\")");
  CHECK(print_sexpr(make_ret_frame(11, Keyword{"ok"}, SExpr::kw("eof"))) ==
        "(ret 11 :ok :eof)");
  CHECK(print_sexpr(make_pong_frame(12)) == "(pong 12)");
}

TEST_CASE("frame ids are read from well-shaped frames only") {
  CHECK(frame_id(rd("(ld 3 () ())")) == 3);
  CHECK(frame_id(rd("(ping 18446744073709551615)")) ==
        18446744073709551615ull);
  CHECK_FALSE(frame_id(rd("(ld)")).has_value());
  CHECK_FALSE(frame_id(rd("(ld :x () ())")).has_value());
  CHECK_FALSE(frame_id(rd("(ld -1 () ())")).has_value());
  CHECK_FALSE(frame_id(rd("(ld 18446744073709551616)")).has_value());
  CHECK_FALSE(frame_id(rd("7")).has_value());
  CHECK_FALSE(frame_id(rd("(3 4)")).has_value());
}

TEST_CASE("responses parse by shape") {
  auto out = parse_response(rd("(out 4 :comment-window \"hi\\n\")"));
  REQUIRE(out.has_value());
  CHECK(out->kind == ParsedResponse::Kind::Out);
  CHECK(out->id == 4);
  CHECK(out->cls == StreamClass::CommentWindow);
  CHECK(out->text == "hi\n");

  auto ret = parse_response(rd("(ret 5 :error :step-limit)"));
  REQUIRE(ret.has_value());
  CHECK(ret->kind == ParsedResponse::Kind::Ret);
  CHECK(ret->status == Keyword{"error"});
  CHECK(ret->payload == SExpr::kw("step-limit"));

  auto pong = parse_response(rd("(pong 6)"));
  REQUIRE(pong.has_value());
  CHECK(pong->kind == ParsedResponse::Kind::Pong);

  auto granted = parse_response(rd("(session 7 12)"));
  REQUIRE(granted.has_value());
  CHECK(granted->kind == ParsedResponse::Kind::Session);
  CHECK(granted->payload == rd("12"));

  CHECK_FALSE(parse_response(rd("(ret 5 :maybe nil)")).has_value());
  CHECK_FALSE(parse_response(rd("(out 4 :nowhere \"x\")")).has_value());
  CHECK_FALSE(parse_response(rd("(pong)")).has_value());
  CHECK_FALSE(parse_response(rd("nil")).has_value());
}

TEST_CASE("ids recover from unreadable lines when the prefix is intact") {
  CHECK(recover_frame_id("(ld 31 #.(boom))") == 31);
  CHECK(recover_frame_id("  ( get-global  9 \"") == 9);
  CHECK_FALSE(recover_frame_id("((( unbalanced").has_value());
  CHECK_FALSE(recover_frame_id("(ld x 1)").has_value());
  CHECK_FALSE(recover_frame_id("(ld 12345678901234567890123 x)").has_value());
  CHECK_FALSE(recover_frame_id("plain words").has_value());
}

TEST_CASE("the deadline honors its environment variable per call") {
  ::unsetenv("PROVER_BRIDGE_DEADLINE_MS");
  CHECK(default_deadline() == 30000ms);
  ::setenv("PROVER_BRIDGE_DEADLINE_MS", "1234", 1);
  CHECK(default_deadline() == 1234ms);
  ::setenv("PROVER_BRIDGE_DEADLINE_MS", "0", 1);
  CHECK(default_deadline() == 30000ms);
  ::setenv("PROVER_BRIDGE_DEADLINE_MS", "50x", 1);
  CHECK(default_deadline() == 30000ms);
  ::unsetenv("PROVER_BRIDGE_DEADLINE_MS");
}

TEST_CASE("spawning runs the handshake and serves calls") {
  auto conn = spawn_stdio_backend(miniprover_argv());
  CHECK(conn->alive());
  CHECK(conn->pid() > 0);
  conn->ping();

  Response r = conn->ld(rd("((assign x 41))"), SExpr::nil(), nullptr);
  CHECK(r.ok());
  CHECK(r.payload == SExpr::kw("eof"));
  Response g = conn->get_global(Symbol{std::nullopt, "x"});
  CHECK(g.ok());
  CHECK(g.payload == rd("41"));

  std::string streamed;
  Response cw = conn->ld(rd("((cw \"two~%lines~%\"))"), SExpr::nil(),
                         [&](StreamClass cls, std::string_view text) {
                           CHECK(cls == StreamClass::CommentWindow);
                           streamed += text;
                         });
  CHECK(cw.ok());
  CHECK(streamed == "two\nlines\n");
}

TEST_CASE("spawn failures carry the reason") {
  CHECK_THROWS_AS(spawn_stdio_backend({"/nonexistent/backend-binary"}),
                  SpawnError);
  try {
    spawn_stdio_backend({"/nonexistent/backend-binary"});
  } catch (const SpawnError& e) {
    CHECK(std::string(e.what()).find("backend-binary") != std::string::npos);
  }
}

TEST_CASE("a mute backend times out at the handshake") {
  auto t0 = std::chrono::steady_clock::now();
  CHECK_THROWS_AS(spawn_stdio_backend(sh("exec sleep 10"), 300ms),
                  TimeoutError);
  CHECK(std::chrono::steady_clock::now() - t0 < 5s);
}

TEST_CASE("a wrong-id reply is a protocol error") {
  CHECK_THROWS_AS(
      spawn_stdio_backend(sh("read line; echo '(pong 999999)'"), 2000ms),
      ProtocolError);
}

TEST_CASE("an unreadable reply is a protocol error") {
  CHECK_THROWS_AS(spawn_stdio_backend(sh("read line; echo '((('"), 2000ms),
                  ProtocolError);
}

TEST_CASE("a slow response times out and kills the connection") {
  auto conn = spawn_stdio_backend(
      sh("read line; echo \"(pong 1)\"; read line2; exec sleep 5"), 500ms);
  auto t0 = std::chrono::steady_clock::now();
  CHECK_THROWS_AS(conn->ld(rd("((+ 1 2))"), SExpr::nil(), nullptr),
                  TimeoutError);
  CHECK(std::chrono::steady_clock::now() - t0 < 3s);
  CHECK_FALSE(conn->alive());
  CHECK_THROWS_AS(conn->ping(), BackendDied);
}

TEST_CASE("backend exit surfaces as death, then fails fast") {
  auto conn = spawn_stdio_backend(sh("read line; echo '(pong 1)'"), 2000ms);
  CHECK_THROWS_AS(conn->ld(rd("((+ 1 2))"), SExpr::nil(), nullptr),
                  BackendDied);
  CHECK_FALSE(conn->alive());
  CHECK_THROWS_AS(conn->ld(rd("((+ 1 2))"), SExpr::nil(), nullptr),
                  BackendDied);
}

TEST_CASE("terminate kills the child and later calls fail fast") {
  auto conn = spawn_stdio_backend(miniprover_argv());
  CHECK(conn->ld(rd("((+ 1 2))"), SExpr::nil(), nullptr).ok());
  conn->terminate();
  CHECK_FALSE(conn->alive());
  CHECK_THROWS_AS(conn->ping(), BackendDied);
}

TEST_CASE("reentrant use from an output callback is rejected") {
  auto conn = spawn_stdio_backend(miniprover_argv());
  bool checked = false;
  Response r = conn->ld(rd("((cw \"x~%\"))"), SExpr::nil(),
                        [&](StreamClass, std::string_view) {
                          CHECK_THROWS_AS(conn->ping(), std::logic_error);
                          checked = true;
                        });
  CHECK(r.ok());
  CHECK(checked);
}

TEST_CASE("tcp connect to a closed port is a connect error") {
  CHECK_THROWS_AS(connect_tcp("127.0.0.1", likely_free_port(), 2000ms),
                  ConnectError);
  CHECK_THROWS_AS(connect_tcp("127.0.0.1:not-a-port"), ConnectError);
  CHECK_THROWS_AS(connect_tcp("no-colon-here"), ConnectError);
}

TEST_CASE("random forms echo through a live backend unchanged") {
  auto conn = spawn_stdio_backend(miniprover_argv());
  std::mt19937 rng(20260817);
  const Symbol echo_var{std::nullopt, "wire-echo"};
  for (int i = 0; i < 200; ++i) {
    SExpr value = testsupport::random_sexpr(rng);
    SExpr assign = SExpr::list(
        {SExpr::sym("assign"), SExpr::sym(echo_var),
         SExpr::list({SExpr::sym("quote"), value})});
    Response r = conn->ld(SExpr::list({assign}), SExpr::nil(), nullptr);
    REQUIRE(r.ok());
    Response g = conn->get_global(echo_var);
    REQUIRE(g.ok());
    CAPTURE(print_sexpr(value));
    CHECK(g.payload == value);
  }
}

TEST_CASE("a bridge session over a real subprocess") {
  Session session(spawn_stdio_backend(miniprover_argv()));
  session.output().set_passthrough(nullptr);
  CHECK(session.compute("(+ 1 2)") == QueryResult{false, rd("3")});
  CHECK(session.get_prover_step_limit() == 100000);
  CHECK(session.query("(mv-let (e v state) (er soft 'c \"X\") (assign q 7))",
                      rd("(:capture-output t)")) == QueryResult{false, rd("7")});
  CHECK(session.get_captured_output() == "Error in c: X\n");

  auto& stdio = dynamic_cast<StdioConnection&>(session.connection());
  stdio.terminate();
  CHECK_FALSE(session.alive());
  CHECK_THROWS_AS(session.compute("(+ 1 2)"), BackendDied);
  CHECK_THROWS_AS(session.event("(defconst *x* 1)"), BackendDied);
}
