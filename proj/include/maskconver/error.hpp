#pragma once

#include <stdexcept>
#include <string>

namespace maskconver {

// File / dataset / checkpoint problems. The CLI maps these to exit code 2.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite losses, failed gradient checks. CLI exit code 3.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace maskconver
