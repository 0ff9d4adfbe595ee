#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "pbridge/sexpr.hpp"
#include "support/sexpr_gen.hpp"

using namespace pbridge;

TEST_CASE("reads flat arithmetic form") {
  SExpr e = read_sexpr("(+ 1 2)");
  REQUIRE(e.is_list());
  REQUIRE(e.items().size() == 3);
  CHECK(e.items()[0].is_symbol_named("+"));
  CHECK(e.items()[1].as_integer() == 1);
  CHECK(e.items()[2].as_integer() == 2);
}

TEST_CASE("reads package-prefixed symbols") {
  SExpr e = read_sexpr("(kernel::mv-let (erp val kernel::state) q body)");
  REQUIRE(e.is_list());
  const Symbol& head = e.items()[0].as_symbol();
  CHECK(head.package == "kernel");
  CHECK(head.name == "mv-let");
  const SExpr& vars = e.items()[1];
  REQUIRE(vars.items().size() == 3);
  CHECK(vars.items()[0].is_symbol_named("erp"));
  CHECK(vars.items()[2].as_symbol().package == "kernel");
  CHECK(vars.items()[2].as_symbol().name == "state");
}

TEST_CASE("quote sugar expands to a quote form") {
  SExpr e = read_sexpr("'foo");
  CHECK(e == SExpr::list({SExpr::sym("quote"), SExpr::sym("foo")}));
  CHECK(read_sexpr("'(1 2)") ==
        SExpr::list({SExpr::sym("quote"),
                     SExpr::list({SExpr::integer(1), SExpr::integer(2)})}));
}

TEST_CASE("rejects all reader macros") {
  CHECK_THROWS_AS(read_sexpr("#.(f)"), ReaderMacroRejected);
  CHECK_THROWS_AS(read_sexpr("#(1 2 3)"), ReaderMacroRejected);
  CHECK_THROWS_AS(read_sexpr("#b101"), ReaderMacroRejected);
  CHECK_THROWS_AS(read_sexpr("(a #x10)"), ReaderMacroRejected);
  CHECK_THROWS_AS(read_sexpr("ab#cd"), ReaderMacroRejected);
}

TEST_CASE("parse errors carry a position and a reason") {
  CHECK_THROWS_AS(read_sexpr("(a b"), ParseError);
  CHECK_THROWS_AS(read_sexpr(")"), ParseError);
  CHECK_THROWS_AS(read_sexpr(""), ParseError);
  CHECK_THROWS_AS(read_sexpr("   ; only a comment"), ParseError);
  CHECK_THROWS_AS(read_sexpr("\"abc"), ParseError);
  CHECK_THROWS_AS(read_sexpr("\"a\\qb\""), ParseError);
  CHECK_THROWS_AS(read_sexpr(":"), ParseError);
  CHECK_THROWS_AS(read_sexpr("a:b"), ParseError);
  CHECK_THROWS_AS(read_sexpr("::x"), ParseError);
  CHECK_THROWS_AS(read_sexpr("a::"), ParseError);
}

TEST_CASE("empty list reads as the symbol nil") {
  CHECK(read_sexpr("()").is_nil());
  CHECK(read_sexpr("(  )").is_nil());
  CHECK(read_sexpr("nil").is_nil());
  CHECK(SExpr::list({}) == SExpr::nil());
  CHECK(read_sexpr("(a ())") ==
        SExpr::list({SExpr::sym("a"), SExpr::nil()}));
}

TEST_CASE("integers are arbitrary precision and signed") {
  CHECK(read_sexpr("-5").as_integer() == -5);
  CHECK(read_sexpr("+7").as_integer() == 7);
  const char* big = "123456789012345678901234567890123456789012345678901";
  SExpr e = read_sexpr(big);
  CHECK(print_sexpr(e) == big);
  CHECK(read_sexpr("12a").is_symbol_named("12a"));
  CHECK(read_sexpr("-").is_symbol_named("-"));
  CHECK(read_sexpr("+").is_symbol_named("+"));
}

TEST_CASE("keywords are distinct from symbols") {
  SExpr k = read_sexpr(":ok");
  REQUIRE(k.is_keyword());
  CHECK(k.as_keyword().name == "ok");
  CHECK(k != SExpr::sym("ok"));
  CHECK(print_sexpr(k) == ":ok");
}

TEST_CASE("strings support the escape set") {
  CHECK(read_sexpr("\"a\\\"b\"").as_text() == "a\"b");
  CHECK(read_sexpr("\"a\\\\b\"").as_text() == "a\\b");
  CHECK(read_sexpr("\"a\\nb\"").as_text() == "a\nb");
  CHECK(read_sexpr("\"a\\rb\"").as_text() == "a\rb");
  // canonical printing escapes newlines so one frame stays one line
  std::string printed = print_sexpr(SExpr::text("x\ny"));
  CHECK(printed == "\"x\\ny\"");
  CHECK(printed.find('\n') == std::string::npos);
}

TEST_CASE("canonical printing uses single spaces and plain quote forms") {
  CHECK(print_sexpr(read_sexpr("( mv   1\n 2 )")) == "(mv 1 2)");
  CHECK(print_sexpr(SExpr::sym("kernel", "state")) == "kernel::state");
  CHECK(print_sexpr(read_sexpr("'x")) == "(quote x)");
  CHECK(print_sexpr(read_sexpr("(a \"she said \\\"hi\\\"\")")) ==
        "(a \"she said \\\"hi\\\"\")");
}

TEST_CASE("read_sexpr takes the first expression, read_all takes them all") {
  CHECK(read_sexpr("a b c").is_symbol_named("a"));
  std::vector<SExpr> all = read_all("a (b) 3 ; trailing comment\n");
  REQUIRE(all.size() == 3);
  CHECK(all[2].as_integer() == 3);
  CHECK(read_all("  ; nothing\n").empty());
}

TEST_CASE("comments are whitespace") {
  CHECK(read_sexpr("; c\n 5").as_integer() == 5);
  CHECK(read_sexpr("(a ; c\n b)") ==
        SExpr::list({SExpr::sym("a"), SExpr::sym("b")}));
}

TEST_CASE("plist helpers") {
  CHECK(is_plist(SExpr::nil()));
  CHECK(is_plist(read_sexpr("(:a 1 :b (2 3))")));
  CHECK(!is_plist(read_sexpr("(:a 1 :b)")));
  CHECK(!is_plist(read_sexpr("(a 1)")));
  SExpr p = read_sexpr("(:a 1 :b 2 :a 3)");
  CHECK(plist_get(p, "a") == SExpr::integer(1));
  CHECK(plist_get(p, "b") == SExpr::integer(2));
  CHECK(!plist_get(p, "c").has_value());
  CHECK(!plist_get(SExpr::nil(), "a").has_value());
}

TEST_CASE("property: print then read is the identity") {
  std::mt19937 rng(20260817);
  for (int i = 0; i < 1000; ++i) {
    SExpr e = testsupport::random_sexpr(rng);
    std::string printed = print_sexpr(e);
    SExpr back = read_sexpr(printed);
    REQUIRE(back == e);
    // printing is idempotent on canonical text
    REQUIRE(print_sexpr(back) == printed);
  }
}
