#pragma once

#include <stdexcept>
#include <string>

namespace ugeforge {

// Single exception type for every contract violation in the library. The
// message always names the offending record, key, epoch or step.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define UGE_REQUIRE(cond, msg)                 \
  do {                                         \
    if (!(cond)) throw ::ugeforge::Error(msg); \
  } while (0)

}  // namespace ugeforge
