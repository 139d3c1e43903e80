#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

// Per-op cost recording. Ops report themselves whenever a Trace is active on
// the calling thread; running a forward pass on meta tensors under a trace
// yields FLOP and activation counts without doing any arithmetic.
namespace dmvton::profile {

struct OpRecord {
  std::string op;
  int64_t flops = 0;
  int64_t input_elems = 0;
  int64_t output_elems = 0;
};

struct Trace {
  std::vector<OpRecord> ops;

  int64_t total_flops() const;
  // Largest input+output element count over all recorded ops.
  int64_t peak_live_elems() const;
};

class TraceScope {
 public:
  explicit TraceScope(Trace& trace);
  ~TraceScope();
  TraceScope(const TraceScope&) = delete;
  TraceScope& operator=(const TraceScope&) = delete;

 private:
  Trace* prev_;
};

bool tracing();
void record(std::string_view op, int64_t flops, int64_t input_elems, int64_t output_elems);

}  // namespace dmvton::profile
