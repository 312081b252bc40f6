#pragma once

#include <stdexcept>
#include <string>

namespace fmtd {

// Root of every error thrown by the library. The CLI maps each family onto an
// exit code (config 2, io 3, numeric 4).
class error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class shape_error : public error {
 public:
  using error::error;
};

class config_error : public error {
 public:
  using error::error;
};

class io_error : public error {
 public:
  using error::error;
};

/// Malformed model, tensor-bundle or IDX file.
class format_error : public io_error {
 public:
  enum class kind { bad_magic, version, truncated, checksum, malformed, count_mismatch };

  format_error(kind k, const std::string& what) : io_error(what), kind_(k) {}
  kind which() const noexcept { return kind_; }

 private:
  kind kind_;
};

/// Training diverged (non-finite loss). Carries the last epoch that finished cleanly.
class numeric_error : public error {
 public:
  numeric_error(const std::string& what, int last_good_epoch)
      : error(what), last_good_epoch_(last_good_epoch) {}
  int last_good_epoch() const noexcept { return last_good_epoch_; }

 private:
  int last_good_epoch_;
};

}  // namespace fmtd
