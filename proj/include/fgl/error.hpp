#pragma once

#include <stdexcept>
#include <string>

namespace fgl {

// Single exception type for the library; messages carry the failing
// file/line where one exists.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace fgl
