// Output routing for the three prover streams: per-call discard / capture /
// tee policies, the capture buffer, and the named quiet-mode hook registry.
#pragma once

#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pbridge/sexpr.hpp"

namespace pbridge {

class Session;

enum class StreamClass { CommentWindow, StandardCo, ProofsCo };

const char* stream_class_name(StreamClass cls);
// Wire keyword for a class, e.g. :comment-window.
Keyword stream_class_keyword(StreamClass cls);
std::optional<StreamClass> stream_class_from_keyword(const Keyword& k);

enum class SinkPolicy { Passthrough, Discard, Capture, CaptureAndPassthrough };

// (quiet, capture) -> policy. Applies uniformly to all three classes; the
// class parameter is part of the contract, not of the decision.
SinkPolicy policy_for(StreamClass cls, bool quiet, bool capture);

// Returns a list of forms to evaluate on the backend when quiet mode flips.
using QuietHook = std::function<std::vector<SExpr>(Session&)>;

// Ordered registry of named (on, off) hook pairs. Re-adding a name replaces
// the relevant slot in place, keeping the original registration position.
class HookRegistry {
 public:
  struct Entry {
    Keyword name;
    QuietHook on_hook;
    QuietHook off_hook;
  };

  void add_on(Keyword name, QuietHook hook);
  void add_off(Keyword name, QuietHook hook);
  void remove(const Keyword& name);  // unknown name: no-op
  const std::vector<Entry>& entries() const { return entries_; }

 private:
  Entry& entry_for(Keyword name);
  std::vector<Entry> entries_;
};

struct CaptureSegment {
  StreamClass cls;
  std::string text;
};

// Holds the quiet flag, the single merged capture buffer (segments tagged
// with their stream class), the hook registry, and the passthrough sink.
class OutputControl {
 public:
  using Passthrough = std::function<void(StreamClass, std::string_view)>;

  OutputControl();  // passthrough defaults to this process's stdout
  void set_passthrough(Passthrough sink);

  void route(StreamClass cls, SinkPolicy policy, std::string_view text);
  std::string take_captured();  // concatenated text, then clears
  void clear_captured() { segments_.clear(); }
  const std::vector<CaptureSegment>& segments() const { return segments_; }

  bool quiet() const { return quiet_; }
  void set_quiet_flag(bool on) { quiet_ = on; }

  HookRegistry& hooks() { return hooks_; }
  const HookRegistry& hooks() const { return hooks_; }

 private:
  bool quiet_ = false;
  std::vector<CaptureSegment> segments_;
  HookRegistry hooks_;
  Passthrough passthrough_;
};

}  // namespace pbridge
