#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace gdstab {

// Base of every domain error raised by the library. The CLI maps these to
// exit code 1; usage errors are handled separately there.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

// Raised when an analytic operation is asked for on an architecture it does
// not cover (e.g. product_map on a non-linear network).
class UnsupportedError : public Error {
 public:
  using Error::Error;
};

class SizeLimitError : public Error {
 public:
  using Error::Error;
};

class RankDeficientError : public Error {
 public:
  using Error::Error;
};

class WhiteningRequiredError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class IdxMagicError : public Error {
 public:
  using Error::Error;
};

class IdxTruncatedError : public Error {
 public:
  using Error::Error;
};

class EmptySelectionError : public Error {
 public:
  using Error::Error;
};

// Configuration problem; `key_path()` names the offending entry, e.g.
// "run_cfg.eta".
class ConfigError : public Error {
 public:
  ConfigError(std::string key_path, const std::string& what)
      : Error(key_path + ": " + what), key_path_(std::move(key_path)) {}
  const std::string& key_path() const noexcept { return key_path_; }

 private:
  std::string key_path_;
};

}  // namespace gdstab
