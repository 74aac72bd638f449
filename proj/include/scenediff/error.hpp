#pragma once
#include <stdexcept>
#include <string>

namespace sde {

enum class ErrorCode {
  invalid_argument = 1,
  shape_mismatch = 2,
  io = 3,
  config = 4,
  numeric = 5,
  runtime = 6,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& msg)
      : std::runtime_error(msg), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& msg) {
  throw Error(code, msg);
}

inline void require(bool cond, ErrorCode code, const std::string& msg) {
  if (!cond) fail(code, msg);
}

}  // namespace sde
