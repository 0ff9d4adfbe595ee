#include "pbridge/miniprover.hpp"

#include <cstdio>
#include <iostream>
#include <limits>
#include <set>

#include "pbridge/transport.hpp"

namespace pbridge {

namespace {

constexpr uint64_t kBuiltinStepLimit = 100000;

// Evaluation is recursive; the budget alone cannot stop a deep recursion
// before the C++ stack does, so a fixed depth cap backs it up.
constexpr int kMaxEvalDepth = 2000;

uint64_t clamp_budget(const Integer& n) {
  if (n < 0) return 0;
  if (n > Integer(std::numeric_limits<uint64_t>::max()))
    return std::numeric_limits<uint64_t>::max();
  return n.convert_to<uint64_t>();
}

const std::set<std::string>& reserved_names() {
  static const std::set<std::string> names = {
      "quote", "if", "+", "-", "*", "<", "list", "mv", "mv-let", "state",
      "t", "nil", "boundp-global", "@", "assign", "er", "cw",
      "with-prover-step-limit", "defaults-get", "defconst", "defun",
      "defaults-set", "thm"};
  return names;
}

bool is_reserved_name(const Symbol& s) {
  return !s.package && reserved_names().count(s.name) > 0;
}

}  // namespace

bool is_values(const EvalOutcome& o) {
  return std::holds_alternative<ValueList>(o);
}

const ValueList* values_of(const EvalOutcome& o) {
  return std::get_if<ValueList>(&o);
}

bool is_error_triple(const ValueList& vs) {
  return vs.size() == 3 && vs[2].is_stobj() && !vs[0].is_stobj() &&
         !vs[1].is_stobj();
}

bool is_error_triple(const EvalOutcome& o) {
  const ValueList* vs = values_of(o);
  return vs && is_error_triple(*vs);
}

OutputSignature realized_signature(const ValueList& vs) {
  OutputSignature sig;
  sig.reserve(vs.size());
  for (const Value& v : vs) {
    if (v.is_stobj())
      sig.push_back(v.expr().as_symbol());
    else
      sig.push_back(std::nullopt);
  }
  return sig;
}

// ---- World ----------------------------------------------------------------

World::World() {
  defaults_["step-limit"] = SExpr::integer(Integer(kBuiltinStepLimit));
  defaults_["verbosity-level"] = SExpr::integer(1);
}

bool World::name_defined(const Symbol& name) const {
  return constants_.count(name) > 0 || functions_.count(name) > 0;
}

const SExpr* World::constant(const Symbol& name) const {
  auto it = constants_.find(name);
  return it == constants_.end() ? nullptr : &it->second;
}

const FunctionDef* World::function(const Symbol& name) const {
  auto it = functions_.find(name);
  return it == functions_.end() ? nullptr : &it->second;
}

void World::add_constant(Symbol name, SExpr value, SExpr definition) {
  events_.push_back(WorldEvent{name, EventKind::Constant, std::move(definition)});
  constants_[std::move(name)] = std::move(value);
}

void World::add_function(Symbol name, FunctionDef def, SExpr definition) {
  events_.push_back(WorldEvent{name, EventKind::Function, std::move(definition)});
  functions_[std::move(name)] = std::move(def);
}

SExpr World::default_value(std::string_view name) const {
  auto it = defaults_.find(std::string(name));
  return it == defaults_.end() ? SExpr::nil() : it->second;
}

void World::set_default(std::string name, SExpr value) {
  defaults_[std::move(name)] = std::move(value);
}

uint64_t World::step_limit_budget() const {
  SExpr v = default_value("step-limit");
  if (!v.is_integer()) return kBuiltinStepLimit;
  return clamp_budget(v.as_integer());
}

int64_t World::verbosity_level() const {
  SExpr v = default_value("verbosity-level");
  if (!v.is_integer()) return 0;
  const Integer& n = v.as_integer();
  if (n > Integer(std::numeric_limits<int64_t>::max()))
    return std::numeric_limits<int64_t>::max();
  if (n < Integer(std::numeric_limits<int64_t>::min()))
    return std::numeric_limits<int64_t>::min();
  return n.convert_to<int64_t>();
}

SExpr World::to_sexpr() const {
  SExpr::List events;
  for (const WorldEvent& e : events_) {
    events.push_back(SExpr::list(
        {SExpr::sym(e.kind == EventKind::Constant ? "constant" : "function"),
         SExpr::sym(e.name), e.definition}));
  }
  SExpr::List defaults;
  for (const auto& [name, value] : defaults_)
    defaults.push_back(SExpr::list({SExpr::sym(name), value}));
  return SExpr::list({SExpr::sym("world"),
                      SExpr::list({SExpr::sym("events"), SExpr::list(events)}),
                      SExpr::list({SExpr::sym("defaults"),
                                   SExpr::list(defaults)})});
}

std::string World::fingerprint() const { return print_sexpr(to_sexpr()); }

// ---- Env -------------------------------------------------------------------

void Env::bind(Symbol name, Value v) {
  vars_.insert_or_assign(std::move(name), std::move(v));
}

const Value* Env::lookup(const Symbol& name) const {
  for (const Env* e = this; e; e = e->parent_) {
    auto it = e->vars_.find(name);
    if (it != e->vars_.end()) return &it->second;
  }
  return nullptr;
}

// ---- Evaluator -------------------------------------------------------------

namespace {

struct DepthGuard {
  int& depth;
  explicit DepthGuard(int& d) : depth(d) { ++depth; }
  ~DepthGuard() { --depth; }
};

}  // namespace

Evaluator::Evaluator(World& world, GlobalsTable& globals, OutputSink sink)
    : world_(world), globals_(globals), sink_(std::move(sink)) {}

void Evaluator::emit(StreamClass cls, std::string_view text) {
  if (sink_) sink_(cls, text);
}

bool Evaluator::is_event_form(const SExpr& form) {
  if (!form.is_list() || form.items().empty()) return false;
  const SExpr& head = form.items()[0];
  return head.is_symbol_named("defconst") || head.is_symbol_named("defun") ||
         head.is_symbol_named("defaults-set") || head.is_symbol_named("thm");
}

EvalOutcome Evaluator::eval(const SExpr& form, const Env& env,
                            StepBudget& budget) {
  if (!budget.take()) return StepLimitExceeded{};
  DepthGuard guard(depth_);
  if (depth_ > kMaxEvalDepth)
    return HardError{"evaluation depth limit exceeded"};
  if (form.is_integer() || form.is_text() || form.is_keyword())
    return ValueList{Value::ordinary(form)};
  if (form.is_symbol()) {
    if (form.is_symbol_named("t") || form.is_nil())
      return ValueList{Value::ordinary(form)};
    if (const Value* bound = env.lookup(form.as_symbol()))
      return ValueList{*bound};
    if (form.is_symbol_named("state")) return ValueList{Value::state_stobj()};
    if (const SExpr* c = world_.constant(form.as_symbol()))
      return ValueList{Value::ordinary(*c)};
    return HardError{"unbound variable: " + print_sexpr(form)};
  }
  return eval_list(form, env, budget);
}

EvalOutcome Evaluator::eval_list(const SExpr& form, const Env& env,
                                 StepBudget& budget) {
  const SExpr::List& items = form.items();
  const SExpr& head = items[0];
  if (!head.is_symbol())
    return HardError{"invalid function position: " + print_sexpr(head)};
  const Symbol& op = head.as_symbol();
  size_t argc = items.size() - 1;

  // Evaluates items[i] to one ordinary value or records the failure.
  EvalOutcome failure = HardError{""};
  auto arg1 = [&](size_t i, const char* what) -> std::optional<SExpr> {
    EvalOutcome o = eval(items[i], env, budget);
    ValueList* vs = std::get_if<ValueList>(&o);
    if (!vs) {
      failure = std::move(o);
      return std::nullopt;
    }
    if (vs->size() != 1 || (*vs)[0].is_stobj()) {
      failure = HardError{std::string(what) +
                          " requires a single ordinary value"};
      return std::nullopt;
    }
    return (*vs)[0].expr();
  };

  if (!head.as_symbol().package) {
    const std::string& name = op.name;
    if (name == "quote") {
      if (argc != 1) return HardError{"quote takes exactly one argument"};
      return ValueList{Value::ordinary(items[1])};
    }
    if (name == "if") {
      if (argc != 3) return HardError{"if takes exactly three arguments"};
      std::optional<SExpr> cond = arg1(1, "an if condition");
      if (!cond) return failure;
      return eval(cond->truthy() ? items[2] : items[3], env, budget);
    }
    if (name == "+" || name == "*" || name == "-" || name == "<") {
      if (name == "-" && argc == 0)
        return HardError{"- takes at least one argument"};
      if (name == "<" && argc != 2)
        return HardError{"< takes exactly two arguments"};
      std::vector<Integer> args;
      for (size_t i = 1; i < items.size(); ++i) {
        std::optional<SExpr> v = arg1(i, "arithmetic");
        if (!v) return failure;
        if (!v->is_integer())
          return HardError{"arithmetic on a non-integer: " + print_sexpr(*v)};
        args.push_back(v->as_integer());
      }
      if (name == "<") return ValueList{Value::ordinary(
          SExpr::boolean(args[0] < args[1]))};
      Integer acc;
      if (name == "+") {
        acc = 0;
        for (const Integer& a : args) acc += a;
      } else if (name == "*") {
        acc = 1;
        for (const Integer& a : args) acc *= a;
      } else {
        if (args.size() == 1) {
          acc = -args[0];
        } else {
          acc = args[0];
          for (size_t i = 1; i < args.size(); ++i) acc -= args[i];
        }
      }
      return ValueList{Value::ordinary(SExpr::integer(acc))};
    }
    if (name == "list") {
      SExpr::List out;
      for (size_t i = 1; i < items.size(); ++i) {
        std::optional<SExpr> v = arg1(i, "a list element");
        if (!v) return failure;
        out.push_back(std::move(*v));
      }
      return ValueList{Value::ordinary(SExpr::list(std::move(out)))};
    }
    if (name == "mv") {
      if (argc < 2) return HardError{"mv takes at least two arguments"};
      ValueList out;
      for (size_t i = 1; i < items.size(); ++i) {
        EvalOutcome o = eval(items[i], env, budget);
        ValueList* vs = std::get_if<ValueList>(&o);
        if (!vs) return o;
        if (vs->size() != 1)
          return HardError{"an mv argument produced multiple values"};
        out.push_back((*vs)[0]);
      }
      return out;
    }
    if (name == "mv-let") {
      if (argc != 3)
        return HardError{"mv-let takes a variable list, a form, and a body"};
      const SExpr& vars = items[1];
      if (!vars.is_list() || vars.items().size() < 2)
        return HardError{"mv-let needs at least two variables"};
      std::set<Symbol> seen;
      for (const SExpr& v : vars.items()) {
        if (!v.is_symbol() || v.is_symbol_named("t") || v.is_nil())
          return HardError{"invalid mv-let variable: " + print_sexpr(v)};
        if (!seen.insert(v.as_symbol()).second)
          return HardError{"duplicate mv-let variable: " + print_sexpr(v)};
      }
      EvalOutcome bound = eval(items[2], env, budget);
      ValueList* vs = std::get_if<ValueList>(&bound);
      if (!vs) return bound;
      if (vs->size() != vars.items().size())
        return HardError{"mv-let arity mismatch: expected " +
                         std::to_string(vars.items().size()) + " values, got " +
                         std::to_string(vs->size())};
      Env inner(&env);
      for (size_t i = 0; i < vs->size(); ++i) {
        bool var_is_state = vars.items()[i].is_symbol_named("state");
        if (var_is_state != (*vs)[i].is_stobj())
          return HardError{
              "single-threadedness violation: position " + std::to_string(i) +
              " of mv-let " + (var_is_state ? "expects" : "rejects") +
              " the state stobj"};
        inner.bind(vars.items()[i].as_symbol(), (*vs)[i]);
      }
      return eval(items[3], inner, budget);
    }
    if (name == "boundp-global") {
      if (argc != 2 || !items[1].is_symbol() ||
          !items[2].is_symbol_named("state"))
        return HardError{"boundp-global takes a symbol and state"};
      return ValueList{Value::ordinary(
          SExpr::boolean(globals_.count(items[1].as_symbol()) > 0))};
    }
    if (name == "@") {
      if (argc != 1 || !items[1].is_symbol())
        return HardError{"@ takes one symbol"};
      auto it = globals_.find(items[1].as_symbol());
      if (it == globals_.end())
        return HardError{"unbound state global: " + print_sexpr(items[1])};
      return ValueList{Value::ordinary(it->second)};
    }
    if (name == "assign") {
      if (argc != 2 || !items[1].is_symbol())
        return HardError{"assign takes a symbol and a form"};
      EvalOutcome o = eval(items[2], env, budget);
      ValueList* vs = std::get_if<ValueList>(&o);
      if (!vs) return o;
      if (vs->size() != 1)
        return HardError{"assign of a multiple value"};
      if ((*vs)[0].is_stobj()) return HardError{"assign of a stobj"};
      SExpr v = (*vs)[0].expr();
      globals_[items[1].as_symbol()] = v;
      return ValueList{Value::ordinary(SExpr::nil()), Value::ordinary(v),
                       Value::state_stobj()};
    }
    if (name == "er") {
      if (argc != 3 || !items[1].is_symbol_named("soft"))
        return HardError{"only (er soft ctx msg) is supported"};
      std::optional<SExpr> ctx = arg1(2, "an er context");
      if (!ctx) return failure;
      std::optional<SExpr> msg = arg1(3, "an er message");
      if (!msg) return failure;
      if (!msg->is_text()) return HardError{"er message must be a string"};
      emit(StreamClass::StandardCo,
           "Error in " + print_sexpr(*ctx) + ": " + msg->as_text() + "\n");
      return ValueList{Value::ordinary(SExpr::t()),
                       Value::ordinary(SExpr::nil()), Value::state_stobj()};
    }
    if (name == "cw") {
      if (argc < 1) return HardError{"cw takes a format string"};
      std::optional<SExpr> fmt = arg1(1, "a cw format");
      if (!fmt) return failure;
      if (!fmt->is_text()) return HardError{"cw format must be a string"};
      std::vector<SExpr> args;
      for (size_t i = 2; i < items.size(); ++i) {
        std::optional<SExpr> v = arg1(i, "a cw argument");
        if (!v) return failure;
        args.push_back(std::move(*v));
      }
      std::string out;
      const std::string& f = fmt->as_text();
      size_t next_arg = 0;
      for (size_t i = 0; i < f.size(); ++i) {
        if (f[i] != '~') {
          out.push_back(f[i]);
          continue;
        }
        if (i + 1 >= f.size()) return HardError{"dangling ~ in cw format"};
        char d = f[++i];
        if (d == '%') {
          out.push_back('\n');
        } else if (d == 'x') {
          if (next_arg >= args.size())
            return HardError{"cw format needs more arguments"};
          out += print_sexpr(args[next_arg++]);
        } else {
          return HardError{std::string("unsupported cw directive ~") + d};
        }
      }
      emit(StreamClass::CommentWindow, out);
      return ValueList{Value::ordinary(SExpr::nil())};
    }
    if (name == "with-prover-step-limit") {
      if (argc != 2)
        return HardError{"with-prover-step-limit takes a limit and a form"};
      std::optional<SExpr> limit = arg1(1, "a step limit");
      if (!limit) return failure;
      if (!limit->is_integer() || limit->as_integer() < 0)
        return HardError{"step limit must be a nonnegative integer"};
      StepBudget inner{clamp_budget(limit->as_integer())};
      EvalOutcome o = eval(items[2], env, inner);
      if (is_values(o) && !is_error_triple(o))
        return HardError{
            "with-prover-step-limit body must return an error triple"};
      return o;
    }
    if (name == "defaults-get") {
      if (argc != 1 || !(items[1].is_symbol() || items[1].is_keyword()))
        return HardError{"defaults-get takes a name"};
      std::string key = items[1].is_symbol() ? items[1].as_symbol().name
                                             : items[1].as_keyword().name;
      return ValueList{Value::ordinary(world_.default_value(key))};
    }
    if (is_event_form(form))
      return HardError{"event form not allowed in an expression: " + name};
  }

  return call_function(op, items, env, budget);
}

EvalOutcome Evaluator::call_function(const Symbol& name,
                                     const SExpr::List& items, const Env& env,
                                     StepBudget& budget) {
  const FunctionDef* def = world_.function(name);
  if (!def)
    return HardError{"unknown operator: " + print_sexpr(SExpr::sym(name))};
  if (items.size() - 1 != def->params.size())
    return HardError{"wrong number of arguments to " +
                     print_sexpr(SExpr::sym(name))};
  Env callee(nullptr);
  for (size_t i = 0; i < def->params.size(); ++i) {
    EvalOutcome o = eval(items[i + 1], env, budget);
    ValueList* vs = std::get_if<ValueList>(&o);
    if (!vs) return o;
    if (vs->size() != 1 || (*vs)[0].is_stobj())
      return HardError{"function arguments must be single ordinary values"};
    callee.bind(def->params[i], (*vs)[0]);
  }
  return eval(def->body, callee, budget);
}

EvalOutcome Evaluator::apply_event(const SExpr& form, StepBudget& budget) {
  const SExpr::List& items = form.items();
  const SExpr& head = items[0];
  Env empty;

  auto soft = [&](const char* ctx, std::string msg) -> EvalOutcome {
    SExpr c = SExpr::sym(ctx);
    emit(StreamClass::StandardCo,
         "Error in " + print_sexpr(c) + ": " + msg + "\n");
    return SoftError{std::move(c), std::move(msg)};
  };
  auto triple = [&](SExpr v) -> EvalOutcome {
    return ValueList{Value::ordinary(SExpr::nil()),
                     Value::ordinary(std::move(v)), Value::state_stobj()};
  };

  if (head.is_symbol_named("defconst")) {
    if (items.size() != 3 || !items[1].is_symbol())
      return HardError{"defconst takes a name and a value form"};
    const Symbol& name = items[1].as_symbol();
    if (is_reserved_name(name) || world_.name_defined(name))
      return soft("defconst", "redefinition of " + print_sexpr(items[1]));
    EvalOutcome o = eval(items[2], empty, budget);
    ValueList* vs = std::get_if<ValueList>(&o);
    if (!vs) return o;
    if (vs->size() != 1 || (*vs)[0].is_stobj())
      return HardError{"defconst value must be a single ordinary value"};
    world_.add_constant(name, (*vs)[0].expr(), form);
    return triple(items[1]);
  }

  if (head.is_symbol_named("defun")) {
    if (items.size() != 4 || !items[1].is_symbol())
      return HardError{"defun takes a name, a parameter list, and a body"};
    const Symbol& name = items[1].as_symbol();
    if (is_reserved_name(name) || world_.name_defined(name))
      return soft("defun", "redefinition of " + print_sexpr(items[1]));
    FunctionDef def;
    const SExpr& params = items[2];
    if (!params.is_nil()) {
      if (!params.is_list())
        return HardError{"defun parameters must be a list"};
      std::set<Symbol> seen;
      for (const SExpr& p : params.items()) {
        if (!p.is_symbol() || p.is_symbol_named("state") ||
            p.is_symbol_named("t") || p.is_nil())
          return HardError{"invalid defun parameter: " + print_sexpr(p)};
        if (!seen.insert(p.as_symbol()).second)
          return HardError{"duplicate defun parameter: " + print_sexpr(p)};
        def.params.push_back(p.as_symbol());
      }
    }
    // No termination analysis: the body is recorded unevaluated.
    def.body = items[3];
    world_.add_function(name, std::move(def), form);
    return triple(items[1]);
  }

  if (head.is_symbol_named("defaults-set")) {
    if (items.size() != 3 ||
        !(items[1].is_symbol() || items[1].is_keyword()))
      return HardError{"defaults-set takes a name and a value form"};
    EvalOutcome o = eval(items[2], empty, budget);
    ValueList* vs = std::get_if<ValueList>(&o);
    if (!vs) return o;
    if (vs->size() != 1 || (*vs)[0].is_stobj())
      return HardError{"defaults-set value must be a single ordinary value"};
    std::string key = items[1].is_symbol() ? items[1].as_symbol().name
                                           : items[1].as_keyword().name;
    world_.set_default(key, (*vs)[0].expr());
    return triple((*vs)[0].expr());
  }

  if (head.is_symbol_named("thm")) {
    if (items.size() != 2) return HardError{"thm takes one body form"};
    bool verbose = world_.verbosity_level() > 0;
    if (verbose)
      emit(StreamClass::ProofsCo,
           "Proof attempt for " + print_sexpr(items[1]) + "\n");
    EvalOutcome o = eval(items[1], empty, budget);
    ValueList* vs = std::get_if<ValueList>(&o);
    if (!vs) return o;
    if (vs->size() != 1 || (*vs)[0].is_stobj())
      return HardError{"thm body must produce a single ordinary value"};
    if ((*vs)[0].expr().is_nil())
      return soft("thm", "proof failed: " + print_sexpr(items[1]));
    if (verbose) emit(StreamClass::ProofsCo, "Q.E.D.\n");
    return triple(SExpr::t());
  }

  return HardError{"not an event form: " + print_sexpr(form)};
}

EvalOutcome Evaluator::eval_top(const SExpr& form, StepBudget& budget) {
  if (form.is_list() && !form.items().empty() &&
      form.items()[0].is_symbol_named("with-prover-step-limit")) {
    const SExpr::List& items = form.items();
    if (items.size() != 3)
      return HardError{"with-prover-step-limit takes a limit and a form"};
    Env empty;
    EvalOutcome lo = eval(items[1], empty, budget);
    ValueList* vs = std::get_if<ValueList>(&lo);
    if (!vs) return lo;
    if (vs->size() != 1 || (*vs)[0].is_stobj() ||
        !(*vs)[0].expr().is_integer() || (*vs)[0].expr().as_integer() < 0)
      return HardError{"step limit must be a nonnegative integer"};
    StepBudget inner{clamp_budget((*vs)[0].expr().as_integer())};
    EvalOutcome o = eval_top(items[2], inner);
    if (is_values(o) && !is_error_triple(o))
      return HardError{
          "with-prover-step-limit body must return an error triple"};
    return o;
  }
  if (is_event_form(form)) return apply_event(form, budget);
  Env empty;
  return eval(form, empty, budget);
}

// ---- run_ld ----------------------------------------------------------------

LdResult run_ld(const SExpr& forms, const SExpr& options, World& world,
                GlobalsTable& globals, const OutputSink& sink) {
  bool emit_class[3] = {true, true, true};
  for (StreamClass cls : {StreamClass::CommentWindow, StreamClass::StandardCo,
                          StreamClass::ProofsCo}) {
    std::optional<SExpr> d = plist_get(options, stream_class_name(cls));
    if (d && d->is_keyword_named("suppress"))
      emit_class[static_cast<int>(cls)] = false;
  }
  OutputSink filtered = [&](StreamClass cls, std::string_view text) {
    if (emit_class[static_cast<int>(cls)] && sink) sink(cls, text);
  };

  World snapshot = world;
  Evaluator ev(world, globals, filtered);

  auto fail = [&](const char* reason) -> LdResult {
    world = snapshot;
    return LdResult{false, Keyword{reason}};
  };

  if (forms.is_list()) {
    for (const SExpr& form : forms.items()) {
      StepBudget budget{world.step_limit_budget()};
      EvalOutcome o = ev.eval_top(form, budget);
      if (const HardError* h = std::get_if<HardError>(&o)) {
        filtered(StreamClass::StandardCo, "Error: " + h->reason + "\n");
        return fail("hard-error");
      }
      if (std::holds_alternative<StepLimitExceeded>(o)) {
        filtered(StreamClass::StandardCo, "Error: step limit exceeded\n");
        return fail("step-limit");
      }
      if (std::holds_alternative<SoftError>(o)) return fail("soft-error");
      const ValueList& vs = std::get<ValueList>(o);
      if (is_error_triple(vs) && !vs[0].expr().is_nil())
        return fail("soft-error");
    }
  }
  return LdResult{true, Keyword{"eof"}};
}

// ---- MiniProver ------------------------------------------------------------

void MiniProver::handle(const SExpr& request,
                        const std::function<void(const SExpr&)>& send) {
  std::optional<uint64_t> id = frame_id(request);
  auto protocol_error = [&]() {
    if (id) send(make_ret_frame(*id, Keyword{"error"}, SExpr::kw("protocol")));
  };

  if (!id || !request.is_list() || !request.items()[0].is_symbol()) {
    protocol_error();
    return;
  }
  if (*id <= last_id_) {
    protocol_error();
    return;
  }
  last_id_ = *id;

  const SExpr::List& items = request.items();
  const SExpr& head = items[0];

  if (head.is_symbol_named("ping") && items.size() == 2) {
    send(make_pong_frame(*id));
    return;
  }

  if (head.is_symbol_named("get-global") && items.size() == 3 &&
      items[2].is_symbol()) {
    auto it = globals_.find(items[2].as_symbol());
    if (it == globals_.end())
      send(make_ret_frame(*id, Keyword{"error"}, SExpr::kw("unbound-global")));
    else
      send(make_ret_frame(*id, Keyword{"ok"}, it->second));
    return;
  }

  if (head.is_symbol_named("ld") && items.size() == 4 &&
      (items[2].is_list() || items[2].is_nil()) && is_plist(items[3])) {
    OutputSink sink = [&](StreamClass cls, std::string_view text) {
      send(make_out_frame(*id, cls, text));
    };
    LdResult r = run_ld(items[2], items[3], world_, globals_, sink);
    send(make_ret_frame(*id, Keyword{r.ok ? "ok" : "error"},
                        SExpr::kw(r.reason)));
    return;
  }

  protocol_error();
}

void MiniProver::handle_line(
    std::string_view line, const std::function<void(const SExpr&)>& send,
    const std::function<void(std::string_view)>& diag) {
  SExpr frame;
  try {
    frame = read_sexpr(line);
  } catch (const ParseError& e) {
    if (std::optional<uint64_t> id = recover_frame_id(line)) {
      if (*id > last_id_) last_id_ = *id;
      send(make_ret_frame(*id, Keyword{"error"}, SExpr::kw("protocol")));
    } else if (diag) {
      diag(std::string("unreadable frame: ") + e.what());
    }
    return;
  }
  handle(frame, send);
}

int serve_stdio() {
  MiniProver prover;
  std::string line;
  while (std::getline(std::cin, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    prover.handle_line(
        line,
        [](const SExpr& frame) {
          std::string text = print_sexpr(frame);
          text.push_back('\n');
          std::fwrite(text.data(), 1, text.size(), stdout);
          std::fflush(stdout);
        },
        [](std::string_view msg) {
          std::fprintf(stderr, "miniprover: %.*s\n", (int)msg.size(),
                       msg.data());
        });
  }
  return 0;
}

// ---- InProcessConnection ----------------------------------------------------

Response InProcessConnection::roundtrip(const FrameBuilder& build,
                                        const OutputCallback& on_output) {
  std::unique_lock<std::mutex> lock(call_mu_, std::try_to_lock);
  if (!lock.owns_lock())
    throw std::logic_error("request already in flight on this connection");
  uint64_t id = ++next_id_;
  // through the codec both ways, same as the real wire
  SExpr request = read_sexpr(print_sexpr(build(id)));

  std::optional<Response> terminal;
  prover_.handle(request, [&](const SExpr& raw) {
    SExpr frame = read_sexpr(print_sexpr(raw));
    std::optional<ParsedResponse> r = parse_response(frame);
    if (!r || r->id != id)
      throw ProtocolError("backend emitted an invalid frame: " +
                          print_sexpr(frame));
    if (r->kind == ParsedResponse::Kind::Out) {
      if (on_output) on_output(r->cls, r->text);
      return;
    }
    Response resp;
    resp.kind = r->kind == ParsedResponse::Kind::Pong ? Response::Kind::Pong
                : r->kind == ParsedResponse::Kind::Session
                    ? Response::Kind::Session
                    : Response::Kind::Ret;
    resp.status = r->status;
    resp.payload = r->payload;
    terminal = std::move(resp);
  });
  if (!terminal)
    throw ProtocolError("backend produced no terminal frame");
  return *terminal;
}

}  // namespace pbridge
