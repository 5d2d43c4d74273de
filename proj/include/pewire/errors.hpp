#pragma once

#include <stdexcept>
#include <string>

namespace pewire {

// Base class for everything this library throws.
struct error : std::runtime_error {
  explicit error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape/dimension contract violations (matmul inner dims, LN d < 2, ...).
struct shape_error : error {
  explicit shape_error(const std::string& msg) : error(msg) {}
};

// Bad model/wiring/experiment configuration.
struct config_error : error {
  explicit config_error(const std::string& msg) : error(msg) {}
};

// Malformed on-disk data (dataset files, checkpoints). Carries a byte offset
// when one is known.
struct format_error : error {
  format_error(const std::string& msg, long long byte_offset = -1)
      : error(byte_offset >= 0 ? msg + " (byte offset " + std::to_string(byte_offset) + ")"
                               : msg),
        offset(byte_offset) {}
  long long offset;
};

// NaN/Inf escaped an op. Never silent.
struct numeric_error : error {
  explicit numeric_error(const std::string& msg) : error(msg) {}
};

struct io_error : error {
  explicit io_error(const std::string& msg) : error(msg) {}
};

}  // namespace pewire
