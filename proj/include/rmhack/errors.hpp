#pragma once

#include <stdexcept>
#include <string>

namespace rmhack {

// Bad input: configs, files, mismatched shapes or vocabularies. The CLI maps
// this to exit code 1.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Something went wrong while an experiment was running (non-finite reward,
// I/O failure mid-run). The CLI maps this to exit code 2.
class RuntimeFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace rmhack
