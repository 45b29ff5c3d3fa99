#include "fgl/rng.hpp"

#include <sstream>

#include "fgl/error.hpp"

namespace fgl {

std::string Rng::state() const {
  std::ostringstream os;
  os << engine_;
  return os.str();
}

void Rng::set_state(const std::string& s) {
  std::istringstream is(s);
  is >> engine_;
  if (is.fail()) throw Error("invalid rng state");
}

}  // namespace fgl
