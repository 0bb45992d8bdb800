#pragma once

#include <stdexcept>
#include <string>

namespace volcdet {

/// Precondition violated by a caller-supplied value.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed file contents. `field()` names the offending header field or section.
class ParseError : public std::runtime_error {
 public:
  ParseError(std::string field, const std::string& detail)
      : std::runtime_error(field + ": " + detail), field_(std::move(field)) {}

  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NotFound : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// State conflict, e.g. relabeling an already-labeled detection.
class Conflict : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An exclusive resource (the training lock) is held by someone else.
class Busy : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace volcdet
