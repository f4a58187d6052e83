#pragma once

#include <cstdio>
#include <sstream>
#include <stdexcept>
#include <string>

namespace pseg {

// Error taxonomy. The CLI maps these onto exit codes: problems with user
// input (ConfigError, InputError, ParseError) exit 1, violated internal
// invariants (ShapeError, ContractError, NumericError) exit 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <typename... Args>
std::string cat(Args&&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}

// Locale-independent float formatting for CSV and config output.
inline std::string fmt_g(double v, int digits = 9) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*g", digits, v);
  return buf;
}

// Full round-trip precision; used where a file is reloaded and compared.
inline std::string fmt_exact(double v) { return fmt_g(v, 17); }

inline void log_info(const std::string& msg) {
  std::fprintf(stderr, "[info] %s\n", msg.c_str());
}

inline void log_warn(const std::string& msg) {
  std::fprintf(stderr, "[warn] %s\n", msg.c_str());
}

}  // namespace pseg
