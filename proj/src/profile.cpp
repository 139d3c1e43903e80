#include "dmvton/profile.hpp"

#include <algorithm>

namespace dmvton::profile {

namespace {
thread_local Trace* t_active = nullptr;
}  // namespace

int64_t Trace::total_flops() const {
  int64_t s = 0;
  for (const auto& r : ops) s += r.flops;
  return s;
}

int64_t Trace::peak_live_elems() const {
  int64_t m = 0;
  for (const auto& r : ops) m = std::max(m, r.input_elems + r.output_elems);
  return m;
}

TraceScope::TraceScope(Trace& trace) : prev_(t_active) { t_active = &trace; }
TraceScope::~TraceScope() { t_active = prev_; }

bool tracing() { return t_active != nullptr; }

void record(std::string_view op, int64_t flops, int64_t input_elems, int64_t output_elems) {
  if (!t_active) return;
  t_active->ops.push_back({std::string(op), flops, input_elems, output_elems});
}

}  // namespace dmvton::profile
