// crowdqc/error.hpp

#ifndef CROWDQC_ERROR_HPP_
#define CROWDQC_ERROR_HPP_

#include <stdexcept>
#include <string>

namespace crowdqc {

/// Bad flags, unknown config keys, invalid enum names. Exit code 1.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent input data. Exit code 2.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A contract the code itself should have upheld was broken. Exit code 3.
class InvariantError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline DataError data_error_at(const std::string &file, std::size_t line,
                               const std::string &column,
                               const std::string &what) {
  return DataError(file + ":" + std::to_string(line) + ": column '" + column +
                   "': " + what);
}

}  // namespace crowdqc

#endif  // CROWDQC_ERROR_HPP_
