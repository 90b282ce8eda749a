#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>

namespace xdiff {

// Base of every error the library throws. The CLI maps subclasses to exit codes.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InvalidArgument : Error {
  using Error::Error;
};

struct ShapeError : Error {
  using Error::Error;
};

struct EmptyRegion : Error {
  using Error::Error;
};

struct DomainError : Error {
  using Error::Error;
};

struct IllConditioned : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(std::string field, std::size_t offset, const std::string& what)
      : Error("parse error in field '" + field + "' at offset " + std::to_string(offset) +
              ": " + what),
        field_(std::move(field)),
        offset_(offset) {}

  const std::string& field() const { return field_; }
  std::size_t offset() const { return offset_; }

 private:
  std::string field_;
  std::size_t offset_;
};

}  // namespace xdiff
