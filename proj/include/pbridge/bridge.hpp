// The three-call interface against a backend connection: compute / query /
// event with their wrapping, option handling, per-call quiet and capture
// framing, result stashing, and the quiet-mode hook machinery.
#pragma once

#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "pbridge/output_control.hpp"
#include "pbridge/sexpr.hpp"
#include "pbridge/transport.hpp"

namespace pbridge {

struct BridgeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
// caller mistakes (malformed option plists and the like), as opposed to
// backend or transport trouble
struct BridgeUsageError : BridgeError {
  using BridgeError::BridgeError;
};

// The length-2 (erp val) outcome of every call. erp true means val is nil.
struct QueryResult {
  bool erp;
  SExpr val;

  bool operator==(const QueryResult&) const = default;
};

struct BridgeOptions {
  bool quiet = false;
  bool capture_output = false;
  std::optional<Integer> prover_step_limit;  // absent: backend default
  SExpr extra_ld_options = SExpr::nil();     // reserved keys already removed

  static const std::vector<std::string>& reserved_keys();
};

// Returns the plist minus every reserved key, survivor order preserved.
// Throws BridgeUsageError when the input is not a keyword/value plist.
SExpr strip_reserved_options(const SExpr& plist);
BridgeOptions parse_bridge_options(const SExpr& plist);

// The wrapped forms the backend actually evaluates.
SExpr wrap_compute(const Symbol& result_var, const SExpr& form);
SExpr wrap_query(const Symbol& result_var, const SExpr& form,
                 const Integer& limit);
SExpr wrap_event(const SExpr& form, const Integer& limit);

// Channel directives (suppress exactly what would be discarded), the strict
// error action, then the caller's extras. First occurrence of a key wins, so
// the computed entries shadow any duplicates in the extras.
SExpr build_ld_options(bool quiet, bool capture, const SExpr& extras);

class Session {
 public:
  explicit Session(std::unique_ptr<Connection> conn);
  Session(const Session&) = delete;
  Session& operator=(const Session&) = delete;

  // The three calls. Options is a keyword/value plist mixing the reserved
  // bridge keys (:quiet :capture-output :prover-step-limit) with extra ld
  // options to forward. The text variants first read the input; anything
  // but exactly one well-formed form yields {erp: true, val: nil} without
  // touching the backend.
  QueryResult compute(const SExpr& form, const SExpr& options = SExpr::nil());
  QueryResult query(const SExpr& form, const SExpr& options = SExpr::nil());
  QueryResult event(const SExpr& form, const SExpr& options = SExpr::nil());
  QueryResult compute(const std::string& text,
                      const SExpr& options = SExpr::nil());
  QueryResult query(const std::string& text,
                    const SExpr& options = SExpr::nil());
  QueryResult event(const std::string& text,
                    const SExpr& options = SExpr::nil());

  // Quiet mode. Turning it on or off runs the registered hooks in
  // registration order; hook failures become warnings and the flag still
  // flips. Idempotent calls run nothing.
  void set_quiet_mode(bool on);
  bool quiet_mode() const { return output_.quiet(); }
  void add_quiet_mode_on_hook(Keyword name, QuietHook hook);
  void add_quiet_mode_off_hook(Keyword name, QuietHook hook);
  void remove_quiet_mode_hook(const Keyword& name);

  // Captured output of the last call; reading clears.
  std::string get_captured_output() { return output_.take_captured(); }
  const std::vector<CaptureSegment>& captured_segments() const {
    return output_.segments();
  }
  OutputControl& output() { return output_; }

  // Backend defaults-table reads (internal round-trips, never captured).
  SExpr defaults_value(const std::string& name);
  Integer get_prover_step_limit();

  // Reads a state global; nullopt when unbound.
  std::optional<SExpr> global_value(const Symbol& name);

  const std::vector<std::string>& warnings() const { return warnings_; }
  void clear_warnings() { warnings_.clear(); }

  Connection& connection() { return *conn_; }
  bool alive() const { return conn_ && conn_->alive(); }

  // The stash global the wrappers assign into. Fixed and reserved.
  static const Symbol& result_var();

 private:
  enum class Op { Compute, Query, Event };

  QueryResult run_call(Op op, const SExpr& form, const SExpr& options);
  QueryResult run_text(Op op, const std::string& text, const SExpr& options);
  // Evaluates forms with every channel suppressed; BridgeError on failure.
  void internal_ld(SExpr forms);
  // Single-value evaluation over the same path; used for defaults reads.
  SExpr internal_value(const SExpr& form);
  void run_hooks(bool on);

  friend class QuietToggle;

  std::unique_ptr<Connection> conn_;
  OutputControl output_;
  std::vector<std::string> warnings_;
};

}  // namespace pbridge
