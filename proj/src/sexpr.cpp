#include "pbridge/sexpr.hpp"

namespace pbridge {

SExpr SExpr::sym(std::string name) {
  return SExpr(Variant(Symbol{std::nullopt, std::move(name)}));
}

SExpr SExpr::sym(std::string package, std::string name) {
  return SExpr(Variant(Symbol{std::move(package), std::move(name)}));
}

SExpr SExpr::sym(Symbol s) { return SExpr(Variant(std::move(s))); }

SExpr SExpr::kw(std::string name) {
  return SExpr(Variant(Keyword{std::move(name)}));
}

SExpr SExpr::kw(Keyword k) { return SExpr(Variant(std::move(k))); }

SExpr SExpr::integer(Integer value) { return SExpr(Variant(std::move(value))); }

SExpr SExpr::integer(long long value) { return SExpr(Variant(Integer(value))); }

SExpr SExpr::text(std::string value) { return SExpr(Variant(std::move(value))); }

SExpr SExpr::list(List items) {
  if (items.empty()) return nil();
  return SExpr(Variant(std::move(items)));
}

bool SExpr::is_nil() const {
  const Symbol* s = std::get_if<Symbol>(&value_);
  return s && !s->package && s->name == "nil";
}

bool SExpr::is_symbol_named(std::string_view name) const {
  const Symbol* s = std::get_if<Symbol>(&value_);
  return s && !s->package && s->name == name;
}

bool SExpr::is_keyword_named(std::string_view name) const {
  const Keyword* k = std::get_if<Keyword>(&value_);
  return k && k->name == name;
}

namespace {

bool is_ws(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' ||
         c == '\v';
}

bool is_delimiter(char c) {
  return is_ws(c) || c == '(' || c == ')' || c == '\'' || c == '"' || c == ';';
}

bool integer_shaped(std::string_view a) {
  size_t i = (a[0] == '+' || a[0] == '-') ? 1 : 0;
  if (i == a.size()) return false;
  for (; i < a.size(); ++i)
    if (a[i] < '0' || a[i] > '9') return false;
  return true;
}

class Reader {
 public:
  explicit Reader(std::string_view input) : in_(input) {}

  bool at_end() {
    skip_blank();
    return pos_ >= in_.size();
  }

  SExpr read_one() {
    skip_blank();
    if (pos_ >= in_.size()) throw ParseError("unexpected end of input", pos_);
    return read_expr();
  }

 private:
  void skip_blank() {
    while (pos_ < in_.size()) {
      if (is_ws(in_[pos_])) {
        ++pos_;
      } else if (in_[pos_] == ';') {
        while (pos_ < in_.size() && in_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  SExpr read_expr() {
    skip_blank();
    if (pos_ >= in_.size()) throw ParseError("unexpected end of input", pos_);
    char c = in_[pos_];
    if (c == '(') return read_list();
    if (c == ')') throw ParseError("unbalanced ')'", pos_);
    if (c == '\'') {
      ++pos_;
      SExpr quoted = read_expr();
      return SExpr::list({SExpr::sym("quote"), std::move(quoted)});
    }
    if (c == '"') return read_string();
    if (c == '#')
      throw ReaderMacroRejected("reader macros are not supported", pos_);
    return read_atom();
  }

  SExpr read_list() {
    ++pos_;  // '('
    SExpr::List items;
    for (;;) {
      skip_blank();
      if (pos_ >= in_.size()) throw ParseError("unterminated list", pos_);
      if (in_[pos_] == ')') {
        ++pos_;
        return SExpr::list(std::move(items));
      }
      items.push_back(read_expr());
    }
  }

  SExpr read_string() {
    size_t start = pos_++;
    std::string out;
    while (pos_ < in_.size()) {
      char c = in_[pos_++];
      if (c == '"') return SExpr::text(std::move(out));
      if (c == '\\') {
        if (pos_ >= in_.size()) break;
        char e = in_[pos_++];
        switch (e) {
          case '"': out.push_back('"'); break;
          case '\\': out.push_back('\\'); break;
          case 'n': out.push_back('\n'); break;
          case 'r': out.push_back('\r'); break;
          default:
            throw ParseError(std::string("unsupported escape '\\") + e + "'",
                             pos_ - 1);
        }
      } else {
        out.push_back(c);
      }
    }
    throw ParseError("unterminated string", start);
  }

  SExpr read_atom() {
    size_t start = pos_;
    while (pos_ < in_.size() && !is_delimiter(in_[pos_])) {
      if (in_[pos_] == '#')
        throw ReaderMacroRejected("reader macros are not supported", pos_);
      ++pos_;
    }
    std::string_view atom = in_.substr(start, pos_ - start);
    if (integer_shaped(atom)) {
      std::string digits(atom[0] == '+' ? atom.substr(1) : atom);
      return SExpr::integer(Integer(digits));
    }
    if (atom[0] == ':') {
      std::string_view name = atom.substr(1);
      if (name.empty() || name.find(':') != std::string_view::npos)
        throw ParseError("malformed keyword '" + std::string(atom) + "'",
                         start);
      return SExpr::kw(std::string(name));
    }
    size_t sep = atom.find("::");
    if (sep != std::string_view::npos) {
      std::string_view pkg = atom.substr(0, sep);
      std::string_view name = atom.substr(sep + 2);
      if (pkg.empty() || name.empty() ||
          pkg.find(':') != std::string_view::npos ||
          name.find(':') != std::string_view::npos)
        throw ParseError("malformed package prefix in '" + std::string(atom) +
                             "'",
                         start);
      return SExpr::sym(std::string(pkg), std::string(name));
    }
    if (atom.find(':') != std::string_view::npos)
      throw ParseError("unsupported package syntax in '" + std::string(atom) +
                           "'",
                       start);
    return SExpr::sym(std::string(atom));
  }

  std::string_view in_;
  size_t pos_ = 0;
};

void print_to(const SExpr& e, std::string& out) {
  if (e.is_symbol()) {
    const Symbol& s = e.as_symbol();
    if (s.package) {
      out += *s.package;
      out += "::";
    }
    out += s.name;
  } else if (e.is_keyword()) {
    out += ':';
    out += e.as_keyword().name;
  } else if (e.is_integer()) {
    out += e.as_integer().str();
  } else if (e.is_text()) {
    out += '"';
    for (char c : e.as_text()) {
      switch (c) {
        case '"': out += "\\\""; break;
        case '\\': out += "\\\\"; break;
        case '\n': out += "\\n"; break;
        case '\r': out += "\\r"; break;
        default: out += c;
      }
    }
    out += '"';
  } else {
    out += '(';
    bool first = true;
    for (const SExpr& item : e.items()) {
      if (!first) out += ' ';
      first = false;
      print_to(item, out);
    }
    out += ')';
  }
}

}  // namespace

SExpr read_sexpr(std::string_view input) {
  Reader r(input);
  if (r.at_end()) throw ParseError("empty input", 0);
  return r.read_one();
}

std::vector<SExpr> read_all(std::string_view input) {
  Reader r(input);
  std::vector<SExpr> out;
  while (!r.at_end()) out.push_back(r.read_one());
  return out;
}

std::string print_sexpr(const SExpr& e) {
  std::string out;
  print_to(e, out);
  return out;
}

bool is_plist(const SExpr& e) {
  if (e.is_nil()) return true;
  if (!e.is_list()) return false;
  const SExpr::List& items = e.items();
  if (items.size() % 2 != 0) return false;
  for (size_t i = 0; i < items.size(); i += 2)
    if (!items[i].is_keyword()) return false;
  return true;
}

std::optional<SExpr> plist_get(const SExpr& plist, std::string_view key) {
  if (!plist.is_list()) return std::nullopt;
  const SExpr::List& items = plist.items();
  for (size_t i = 0; i + 1 < items.size(); i += 2)
    if (items[i].is_keyword_named(key)) return items[i + 1];
  return std::nullopt;
}

const SExpr* nth(const SExpr& e, size_t i) {
  if (!e.is_list()) return nullptr;
  const SExpr::List& items = e.items();
  return i < items.size() ? &items[i] : nullptr;
}

}  // namespace pbridge
