#pragma once

#include <stdexcept>
#include <string>

namespace wfs {

enum class Errc {
  invalid_argument,
  non_finite,
  bad_magic,
  truncated,
  dimension_overflow,
  io,
  degenerate_geometry,
  sampling_exhausted,
  blow_up,
  not_pd,
  config,
};

const char* to_string(Errc code);

// Single exception type for the library; callers branch on code().
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace wfs
