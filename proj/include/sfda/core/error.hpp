#pragma once

#include <stdexcept>
#include <string>

namespace sfda {

/// Machine-readable failure categories. The CLI maps these to exit codes.
enum class ErrorCode : int {
  kValidation = 2,
  kIo = 3,
  kSchedule = 4,
  kConfig = 5,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& what)
      : Error(ErrorCode::kValidation, what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorCode::kIo, what) {}
};

/// Raised when a stage-2 quantity is requested before the transition epoch
/// (or the reverse).
class ScheduleError : public Error {
 public:
  explicit ScheduleError(const std::string& what)
      : Error(ErrorCode::kSchedule, what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what)
      : Error(ErrorCode::kConfig, what) {}
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ValidationError(what);
}

}  // namespace sfda
