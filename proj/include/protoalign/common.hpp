#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace protoalign {

// Error categories. Config maps to CLI exit code 1 (usage), everything
// else to 2 (runtime).
enum class ErrKind {
  Config,
  Shape,
  Numeric,
  Io,
  State,
};

class Error : public std::runtime_error {
 public:
  Error(ErrKind kind, std::string msg) : std::runtime_error(std::move(msg)), kind_(kind) {}
  ErrKind kind() const { return kind_; }

 private:
  ErrKind kind_;
};

[[noreturn]] inline void fail(ErrKind kind, const std::string& msg) { throw Error(kind, msg); }

inline void require(bool cond, ErrKind kind, const std::string& msg) {
  if (!cond) fail(kind, msg);
}

inline bool is_finite(double v) { return std::isfinite(v); }

}  // namespace protoalign
