#pragma once

#include <stdexcept>
#include <string>

namespace dmvton {

// Error categories. The C API maps these onto stable process exit codes.
enum class Errc {
  kConfig,       // bad flag, unknown config key, invalid option value
  kData,         // missing file, malformed manifest, undecodable image
  kNumeric,      // non-finite value encountered during training or warping
  kShape,        // tensor shape contract violated
  kUnsupported,  // operation not supported in the requested mode
  kState,        // object used before it is ready
  kInternal,
};

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) { throw Error(code, what); }

inline const char* errc_name(Errc c) {
  switch (c) {
    case Errc::kConfig: return "config";
    case Errc::kData: return "data";
    case Errc::kNumeric: return "numeric";
    case Errc::kShape: return "shape";
    case Errc::kUnsupported: return "unsupported";
    case Errc::kState: return "state";
    case Errc::kInternal: return "internal";
  }
  return "unknown";
}

}  // namespace dmvton
