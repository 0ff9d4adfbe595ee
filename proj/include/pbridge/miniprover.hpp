// A miniature REPL prover backend. It evaluates a small form language with
// multiple values and a `state` stobj, keeps a revertible event world plus a
// persistent state-globals table, and speaks the framed wire protocol over
// stdio (or in process, for tests).
//
// Note: `thm` here is evaluation-based. The body is evaluated as a closed
// term and the event succeeds iff the value is non-nil; there is no proof
// search of any kind.
#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "pbridge/output_control.hpp"
#include "pbridge/sexpr.hpp"
#include "pbridge/transport.hpp"

namespace pbridge {

// A single evaluated value: an ordinary S-expression or the state stobj.
class Value {
 public:
  static Value ordinary(SExpr v) { return Value(std::move(v), false); }
  static Value state_stobj() { return Value(SExpr::sym("state"), true); }

  bool is_stobj() const { return stobj_; }
  const SExpr& expr() const { return expr_; }

  bool operator==(const Value&) const = default;

 private:
  Value(SExpr v, bool stobj) : expr_(std::move(v)), stobj_(stobj) {}
  SExpr expr_;
  bool stobj_;
};

using ValueList = std::vector<Value>;  // always nonempty

struct SoftError {
  SExpr ctx;
  std::string message;
};

struct HardError {
  std::string reason;
};

struct StepLimitExceeded {};

using EvalOutcome =
    std::variant<ValueList, SoftError, HardError, StepLimitExceeded>;

bool is_values(const EvalOutcome& o);
const ValueList* values_of(const EvalOutcome& o);
// True when the outcome is exactly three values with the state stobj third
// and no stobj in the first two positions.
bool is_error_triple(const ValueList& vs);
bool is_error_triple(const EvalOutcome& o);

// Realized output signature: one marker per value, nil for ordinary values
// and the stobj's name otherwise. Example: (mv 1 2 state) -> (nil nil state).
using OutputSignature = std::vector<std::optional<Symbol>>;
OutputSignature realized_signature(const ValueList& vs);

// Evaluation budget. Every evaluator step costs one unit; exhaustion yields
// StepLimitExceeded.
struct StepBudget {
  uint64_t remaining;
  bool take() {
    if (remaining == 0) return false;
    --remaining;
    return true;
  }
};

using GlobalsTable = std::map<Symbol, SExpr>;
using OutputSink = std::function<void(StreamClass, std::string_view)>;

enum class EventKind { Constant, Function };

struct WorldEvent {
  Symbol name;
  EventKind kind;
  SExpr definition;

  bool operator==(const WorldEvent&) const = default;
};

struct FunctionDef {
  std::vector<Symbol> params;
  SExpr body;
};

// The event world: an append-only event list, derived lookup tables, and the
// defaults table. Copy the whole value to snapshot; assign back to revert.
class World {
 public:
  World();

  const std::vector<WorldEvent>& events() const { return events_; }
  bool name_defined(const Symbol& name) const;
  const SExpr* constant(const Symbol& name) const;
  const FunctionDef* function(const Symbol& name) const;

  void add_constant(Symbol name, SExpr value, SExpr definition);
  void add_function(Symbol name, FunctionDef def, SExpr definition);

  SExpr default_value(std::string_view name) const;  // nil when absent
  void set_default(std::string name, SExpr value);
  // The defaults-table step-limit clamped into a usable budget.
  uint64_t step_limit_budget() const;
  int64_t verbosity_level() const;  // non-integer entries read as 0

  SExpr to_sexpr() const;
  std::string fingerprint() const;

 private:
  std::vector<WorldEvent> events_;
  std::map<Symbol, SExpr> constants_;
  std::map<Symbol, FunctionDef> functions_;
  std::map<std::string, SExpr> defaults_;
};

// Lexical environment for mv-let bindings and function parameters.
class Env {
 public:
  Env() : parent_(nullptr) {}
  explicit Env(const Env* parent) : parent_(parent) {}

  void bind(Symbol name, Value v);
  const Value* lookup(const Symbol& name) const;

 private:
  const Env* parent_;
  std::map<Symbol, Value> vars_;
};

class Evaluator {
 public:
  Evaluator(World& world, GlobalsTable& globals, OutputSink sink);

  EvalOutcome eval(const SExpr& form, const Env& env, StepBudget& budget);
  // ld-level evaluation: dispatches event forms, unwraps
  // with-prover-step-limit, and requires wrapped bodies to produce an error
  // triple.
  EvalOutcome eval_top(const SExpr& form, StepBudget& budget);
  EvalOutcome apply_event(const SExpr& form, StepBudget& budget);

  static bool is_event_form(const SExpr& form);

 private:
  EvalOutcome eval_list(const SExpr& form, const Env& env, StepBudget& budget);
  EvalOutcome call_function(const Symbol& name, const SExpr::List& args,
                            const Env& env, StepBudget& budget);
  void emit(StreamClass cls, std::string_view text);

  World& world_;
  GlobalsTable& globals_;
  OutputSink sink_;
  int depth_ = 0;
};

struct LdResult {
  bool ok;
  Keyword reason;  // :eof on success, else :soft-error/:hard-error/:step-limit
};

// Evaluates forms in order under the options' channel directives. On the
// first failure the world reverts to its pre-call snapshot; globals changes
// persist in all cases.
LdResult run_ld(const SExpr& forms, const SExpr& options, World& world,
                GlobalsTable& globals, const OutputSink& sink);

// One backend instance behind the request interface: ld / get-global / ping
// frames in, out / ret / pong frames out.
class MiniProver {
 public:
  void handle(const SExpr& request,
              const std::function<void(const SExpr&)>& send);
  // Non-frame input; replies (ret <id> :error :protocol) when an id can be
  // recovered from the line, otherwise reports through `diag`.
  void handle_line(std::string_view line,
                   const std::function<void(const SExpr&)>& send,
                   const std::function<void(std::string_view)>& diag);

  World& world() { return world_; }
  const World& world() const { return world_; }
  GlobalsTable& globals() { return globals_; }
  const GlobalsTable& globals() const { return globals_; }

 private:
  World world_;
  GlobalsTable globals_;
  uint64_t last_id_ = 0;
};

// Serves one MiniProver over stdin/stdout until EOF. Returns an exit code.
int serve_stdio();

// An embedded backend behind the Connection interface, for fast tests.
// Frames are printed and re-read on the way through, so the path exercises
// the same codec as the real wire.
class InProcessConnection final : public Connection {
 public:
  Response roundtrip(const FrameBuilder& build,
                     const OutputCallback& on_output) override;
  bool alive() const override { return true; }
  uint64_t last_id() const override { return next_id_; }

  MiniProver& prover() { return prover_; }

 private:
  MiniProver prover_;
  uint64_t next_id_ = 0;
  std::mutex call_mu_;
};

}  // namespace pbridge
