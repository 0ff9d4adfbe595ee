// S-expression values plus a reader and canonical printer. Everything in the
// system travels as SExpr: prover forms, wire frames, results.
#pragma once

#include <boost/multiprecision/cpp_int.hpp>

#include <compare>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace pbridge {

using Integer = boost::multiprecision::cpp_int;

struct Symbol {
  std::optional<std::string> package;
  std::string name;

  friend auto operator<=>(const Symbol&, const Symbol&) = default;
};

struct Keyword {
  std::string name;

  friend auto operator<=>(const Keyword&, const Keyword&) = default;
};

// Immutable-by-convention value type. There are no dotted pairs and no empty
// list: reading "()" yields the symbol nil, and list() collapses zero items
// to nil, so printing and re-reading any SExpr gives back an equal SExpr.
class SExpr {
 public:
  using List = std::vector<SExpr>;

  SExpr() : value_(Symbol{std::nullopt, "nil"}) {}

  static SExpr sym(std::string name);
  static SExpr sym(std::string package, std::string name);
  static SExpr sym(Symbol s);
  static SExpr kw(std::string name);
  static SExpr kw(Keyword k);
  static SExpr integer(Integer value);
  static SExpr integer(long long value);
  static SExpr text(std::string value);
  static SExpr list(List items);
  static SExpr nil() { return SExpr(); }
  static SExpr t() { return sym("t"); }
  static SExpr boolean(bool b) { return b ? t() : nil(); }

  bool is_symbol() const { return std::holds_alternative<Symbol>(value_); }
  bool is_keyword() const { return std::holds_alternative<Keyword>(value_); }
  bool is_integer() const { return std::holds_alternative<Integer>(value_); }
  bool is_text() const { return std::holds_alternative<std::string>(value_); }
  bool is_list() const { return std::holds_alternative<List>(value_); }
  bool is_nil() const;
  bool truthy() const { return !is_nil(); }
  // Matches a package-less symbol of the given name.
  bool is_symbol_named(std::string_view name) const;
  bool is_keyword_named(std::string_view name) const;

  const Symbol& as_symbol() const { return std::get<Symbol>(value_); }
  const Keyword& as_keyword() const { return std::get<Keyword>(value_); }
  const Integer& as_integer() const { return std::get<Integer>(value_); }
  const std::string& as_text() const { return std::get<std::string>(value_); }
  const List& items() const { return std::get<List>(value_); }

  bool operator==(const SExpr&) const = default;

 private:
  using Variant = std::variant<Symbol, Keyword, Integer, std::string, List>;
  explicit SExpr(Variant v) : value_(std::move(v)) {}
  Variant value_;
};

struct ParseError : std::runtime_error {
  size_t position;
  ParseError(const std::string& what, size_t pos)
      : std::runtime_error(what), position(pos) {}
};

// Every '#'-dispatch construct is refused outright; the reader never
// evaluates or allocates host objects on behalf of the input.
struct ReaderMacroRejected : ParseError {
  using ParseError::ParseError;
};

// Reads the first complete S-expression; trailing input is ignored.
SExpr read_sexpr(std::string_view input);
// Reads every S-expression in the input (possibly none).
std::vector<SExpr> read_all(std::string_view input);
std::string print_sexpr(const SExpr& e);

// Helpers for keyword/value option lists: nil or an even-length list of
// alternating keywords and values. First occurrence of a key wins.
bool is_plist(const SExpr& e);
std::optional<SExpr> plist_get(const SExpr& plist, std::string_view key);

// items()[i] if e is a list with more than i elements, else nullptr.
const SExpr* nth(const SExpr& e, size_t i);

}  // namespace pbridge
