#pragma once

#include <stdexcept>
#include <string>

namespace halluscope {

enum class ErrorKind {
  kInvalidArgument,
  kConfig,
  kMissingArtifact,
  kValidation,
  kFormat,
  kIo,
};

/// Library-wide exception. The kind drives CLI exit codes.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

}  // namespace halluscope
