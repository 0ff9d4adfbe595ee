#include "pbridge/bridge.hpp"

#include <algorithm>
#include <utility>

namespace pbridge {

namespace {

const Symbol kResultVar{std::nullopt, "bridge-command-result"};
const Symbol kInternalVar{std::nullopt, "bridge-internal-result"};

const std::vector<std::string> kReservedKeys = {
    "quiet",       "capture-output", "prover-step-limit",
    "standard-co", "proofs-co",      "ld-error-action",
};

bool is_reserved_key(const Keyword& k) {
  return std::find(kReservedKeys.begin(), kReservedKeys.end(), k.name) !=
         kReservedKeys.end();
}

bool is_event_head(const SExpr& form) {
  if (!form.is_list() || form.items().empty()) return false;
  const SExpr& head = form.items()[0];
  return head.is_symbol_named("defconst") || head.is_symbol_named("defun") ||
         head.is_symbol_named("defaults-set") || head.is_symbol_named("thm");
}

SExpr wrap_step_limit(const Integer& limit, SExpr body) {
  return SExpr::list({SExpr::sym("with-prover-step-limit"),
                      SExpr::integer(limit), std::move(body)});
}

SExpr all_suppressed_options() {
  SExpr::List out;
  for (StreamClass cls :
       {StreamClass::CommentWindow, StreamClass::StandardCo,
        StreamClass::ProofsCo}) {
    out.push_back(SExpr::kw(stream_class_keyword(cls)));
    out.push_back(SExpr::kw("suppress"));
  }
  out.push_back(SExpr::kw("ld-error-action"));
  out.push_back(SExpr::kw("error"));
  return SExpr::list(std::move(out));
}

}  // namespace

const std::vector<std::string>& BridgeOptions::reserved_keys() {
  return kReservedKeys;
}

SExpr strip_reserved_options(const SExpr& plist) {
  if (!is_plist(plist))
    throw BridgeUsageError("options must be a keyword/value plist: " +
                           print_sexpr(plist));
  if (plist.is_nil()) return SExpr::nil();
  SExpr::List out;
  const auto& items = plist.items();
  for (std::size_t i = 0; i + 1 < items.size(); i += 2) {
    if (is_reserved_key(items[i].as_keyword())) continue;
    out.push_back(items[i]);
    out.push_back(items[i + 1]);
  }
  return SExpr::list(std::move(out));
}

BridgeOptions parse_bridge_options(const SExpr& plist) {
  BridgeOptions opts;
  opts.extra_ld_options = strip_reserved_options(plist);  // validates shape
  if (auto q = plist_get(plist, "quiet")) opts.quiet = q->truthy();
  if (auto c = plist_get(plist, "capture-output"))
    opts.capture_output = c->truthy();
  if (auto l = plist_get(plist, "prover-step-limit")) {
    if (!l->is_integer() || l->as_integer() < 0)
      throw BridgeUsageError(
          "prover-step-limit must be a nonnegative integer, got " +
          print_sexpr(*l));
    opts.prover_step_limit = l->as_integer();
  }
  return opts;
}

SExpr wrap_compute(const Symbol& result_var, const SExpr& form) {
  return SExpr::list({SExpr::sym("assign"), SExpr::sym(result_var), form});
}

SExpr wrap_query(const Symbol& result_var, const SExpr& form,
                 const Integer& limit) {
  SExpr stash = SExpr::list(
      {SExpr::sym("assign"), SExpr::sym(result_var),
       SExpr::list({SExpr::sym("list"), SExpr::sym("erp"), SExpr::sym("val")})});
  SExpr triple = SExpr::list(
      {SExpr::sym("mv-let"),
       SExpr::list({SExpr::sym("erp"), SExpr::sym("val"), SExpr::sym("state")}),
       form, std::move(stash)});
  return wrap_step_limit(limit, std::move(triple));
}

SExpr wrap_event(const SExpr& form, const Integer& limit) {
  return wrap_step_limit(limit, form);
}

SExpr build_ld_options(bool quiet, bool capture, const SExpr& extras) {
  SExpr::List out;
  for (StreamClass cls :
       {StreamClass::CommentWindow, StreamClass::StandardCo,
        StreamClass::ProofsCo}) {
    out.push_back(SExpr::kw(stream_class_keyword(cls)));
    bool suppress = policy_for(cls, quiet, capture) == SinkPolicy::Discard;
    out.push_back(SExpr::kw(suppress ? "suppress" : "emit"));
  }
  out.push_back(SExpr::kw("ld-error-action"));
  out.push_back(SExpr::kw("error"));
  if (extras.is_list())
    for (const SExpr& e : extras.items()) out.push_back(e);
  return SExpr::list(std::move(out));
}

// Scoped per-call quiet: enables on construction when asked, restores on the
// way out even if the call threw. set_quiet_mode never throws (hook failures
// land in warnings_), so the destructor is safe.
class QuietToggle {
 public:
  QuietToggle(Session& session, bool enable)
      : session_(session), active_(enable) {
    if (active_) session_.set_quiet_mode(true);
  }
  ~QuietToggle() {
    if (active_) session_.set_quiet_mode(false);
  }
  QuietToggle(const QuietToggle&) = delete;
  QuietToggle& operator=(const QuietToggle&) = delete;

 private:
  Session& session_;
  bool active_;
};

const Symbol& Session::result_var() { return kResultVar; }

Session::Session(std::unique_ptr<Connection> conn) : conn_(std::move(conn)) {
  if (!conn_) throw BridgeUsageError("session requires a connection");
}

QueryResult Session::compute(const SExpr& form, const SExpr& options) {
  return run_call(Op::Compute, form, options);
}
QueryResult Session::query(const SExpr& form, const SExpr& options) {
  return run_call(Op::Query, form, options);
}
QueryResult Session::event(const SExpr& form, const SExpr& options) {
  return run_call(Op::Event, form, options);
}
QueryResult Session::compute(const std::string& text, const SExpr& options) {
  return run_text(Op::Compute, text, options);
}
QueryResult Session::query(const std::string& text, const SExpr& options) {
  return run_text(Op::Query, text, options);
}
QueryResult Session::event(const std::string& text, const SExpr& options) {
  return run_text(Op::Event, text, options);
}

QueryResult Session::run_text(Op op, const std::string& text,
                              const SExpr& options) {
  parse_bridge_options(options);  // caller mistakes surface even on bad text
  std::vector<SExpr> forms;
  try {
    forms = read_all(text);
  } catch (const ParseError&) {
    output_.clear_captured();
    return {true, SExpr::nil()};
  }
  if (forms.size() != 1) {
    output_.clear_captured();
    return {true, SExpr::nil()};
  }
  return run_call(op, forms[0], options);
}

QueryResult Session::run_call(Op op, const SExpr& form, const SExpr& options) {
  BridgeOptions opts = parse_bridge_options(options);
  if (!alive()) throw BackendDied("session backend is gone");

  if (op == Op::Query && is_event_head(form))
    warnings_.push_back("query of event form " +
                        print_sexpr(form.items()[0]) +
                        "; use the event operation for world changes");

  SExpr wrapped;
  if (op == Op::Compute) {
    wrapped = wrap_compute(kResultVar, form);
    // compute has no step-limit framing of its own; an explicit option adds
    // it (the assignment is a valid limited body)
    if (opts.prover_step_limit)
      wrapped = wrap_step_limit(*opts.prover_step_limit, std::move(wrapped));
  } else {
    Integer limit = opts.prover_step_limit ? *opts.prover_step_limit
                                           : get_prover_step_limit();
    wrapped = op == Op::Query ? wrap_query(kResultVar, form, limit)
                              : wrap_event(form, limit);
  }

  QuietToggle toggle(*this, opts.quiet && !output_.quiet());
  output_.clear_captured();

  bool quiet_now = output_.quiet();
  bool capture = opts.capture_output;
  SExpr ld_options = build_ld_options(quiet_now, capture, opts.extra_ld_options);
  OutputCallback sink = [&](StreamClass cls, std::string_view text) {
    output_.route(cls, policy_for(cls, quiet_now, capture), text);
  };

  Response r = conn_->ld(SExpr::list({std::move(wrapped)}), std::move(ld_options),
                         sink);
  if (!r.ok()) {
    if (r.payload.is_keyword_named("hard-error") ||
        r.payload.is_keyword_named("soft-error") ||
        r.payload.is_keyword_named("step-limit"))
      return {true, SExpr::nil()};
    throw BridgeError("evaluation request failed: " + print_sexpr(r.payload));
  }
  if (!r.payload.is_keyword_named("eof")) return {true, SExpr::nil()};

  if (op == Op::Event) return {false, SExpr::nil()};

  Response g = conn_->get_global(kResultVar);
  if (!g.ok())
    throw BridgeError("result fetch failed: " + print_sexpr(g.payload));
  if (op == Op::Compute) return {false, g.payload};

  // query stash is (erp val)
  const SExpr& stash = g.payload;
  if (!stash.is_list() || stash.items().size() != 2)
    throw BridgeError("malformed query result stash: " + print_sexpr(stash));
  if (stash.items()[0].truthy()) return {true, SExpr::nil()};
  return {false, stash.items()[1]};
}

void Session::internal_ld(SExpr forms) {
  Response r = conn_->ld(std::move(forms), all_suppressed_options(), nullptr);
  if (!r.ok())
    throw BridgeError("internal evaluation failed: " + print_sexpr(r.payload));
}

SExpr Session::internal_value(const SExpr& form) {
  internal_ld(SExpr::list({wrap_compute(kInternalVar, form)}));
  Response g = conn_->get_global(kInternalVar);
  if (!g.ok())
    throw BridgeError("internal fetch failed: " + print_sexpr(g.payload));
  return g.payload;
}

SExpr Session::defaults_value(const std::string& name) {
  return internal_value(
      SExpr::list({SExpr::sym("defaults-get"), SExpr::sym(name)}));
}

Integer Session::get_prover_step_limit() {
  SExpr v = defaults_value("step-limit");
  if (!v.is_integer() || v.as_integer() < 0)
    throw BridgeError("backend step-limit default is not a nonnegative integer: " +
                      print_sexpr(v));
  return v.as_integer();
}

std::optional<SExpr> Session::global_value(const Symbol& name) {
  Response r = conn_->get_global(name);
  if (r.ok()) return r.payload;
  if (r.payload.is_keyword_named("unbound-global")) return std::nullopt;
  throw BridgeError("global read failed: " + print_sexpr(r.payload));
}

void Session::set_quiet_mode(bool on) {
  if (on == output_.quiet()) return;
  output_.set_quiet_flag(on);
  run_hooks(on);
}

void Session::add_quiet_mode_on_hook(Keyword name, QuietHook hook) {
  output_.hooks().add_on(std::move(name), std::move(hook));
}

void Session::add_quiet_mode_off_hook(Keyword name, QuietHook hook) {
  output_.hooks().add_off(std::move(name), std::move(hook));
}

void Session::remove_quiet_mode_hook(const Keyword& name) {
  output_.hooks().remove(name);
}

void Session::run_hooks(bool on) {
  // iterate over a copy: a hook may legally adjust the registry
  std::vector<HookRegistry::Entry> entries = output_.hooks().entries();
  for (const HookRegistry::Entry& e : entries) {
    const QuietHook& hook = on ? e.on_hook : e.off_hook;
    if (!hook) continue;
    try {
      std::vector<SExpr> forms = hook(*this);
      if (forms.empty()) continue;
      internal_ld(SExpr::list(SExpr::List(forms.begin(), forms.end())));
    } catch (const std::exception& ex) {
      warnings_.push_back("quiet-mode " + std::string(on ? "on" : "off") +
                          " hook :" + e.name.name + " failed: " + ex.what());
    }
  }
}

}  // namespace pbridge
