#include "pbridge/output_control.hpp"

#include <cstdio>

namespace pbridge {

const char* stream_class_name(StreamClass cls) {
  switch (cls) {
    case StreamClass::CommentWindow: return "comment-window";
    case StreamClass::StandardCo: return "standard-co";
    case StreamClass::ProofsCo: return "proofs-co";
  }
  return "?";
}

Keyword stream_class_keyword(StreamClass cls) {
  return Keyword{stream_class_name(cls)};
}

std::optional<StreamClass> stream_class_from_keyword(const Keyword& k) {
  if (k.name == "comment-window") return StreamClass::CommentWindow;
  if (k.name == "standard-co") return StreamClass::StandardCo;
  if (k.name == "proofs-co") return StreamClass::ProofsCo;
  return std::nullopt;
}

SinkPolicy policy_for(StreamClass, bool quiet, bool capture) {
  if (quiet) return capture ? SinkPolicy::Capture : SinkPolicy::Discard;
  return capture ? SinkPolicy::CaptureAndPassthrough : SinkPolicy::Passthrough;
}

HookRegistry::Entry& HookRegistry::entry_for(Keyword name) {
  for (Entry& e : entries_)
    if (e.name == name) return e;
  entries_.push_back(Entry{std::move(name), nullptr, nullptr});
  return entries_.back();
}

void HookRegistry::add_on(Keyword name, QuietHook hook) {
  entry_for(std::move(name)).on_hook = std::move(hook);
}

void HookRegistry::add_off(Keyword name, QuietHook hook) {
  entry_for(std::move(name)).off_hook = std::move(hook);
}

void HookRegistry::remove(const Keyword& name) {
  for (auto it = entries_.begin(); it != entries_.end(); ++it) {
    if (it->name == name) {
      entries_.erase(it);
      return;
    }
  }
}

OutputControl::OutputControl()
    : passthrough_([](StreamClass, std::string_view text) {
        std::fwrite(text.data(), 1, text.size(), stdout);
        std::fflush(stdout);
      }) {}

void OutputControl::set_passthrough(Passthrough sink) {
  passthrough_ = std::move(sink);
}

void OutputControl::route(StreamClass cls, SinkPolicy policy,
                          std::string_view text) {
  switch (policy) {
    case SinkPolicy::Discard:
      return;
    case SinkPolicy::Capture:
      segments_.push_back(CaptureSegment{cls, std::string(text)});
      return;
    case SinkPolicy::CaptureAndPassthrough:
      segments_.push_back(CaptureSegment{cls, std::string(text)});
      [[fallthrough]];
    case SinkPolicy::Passthrough:
      // a closed or absent destination degrades to Discard
      if (passthrough_) passthrough_(cls, text);
      return;
  }
}

std::string OutputControl::take_captured() {
  std::string out;
  for (const CaptureSegment& seg : segments_) out += seg.text;
  segments_.clear();
  return out;
}

}  // namespace pbridge
