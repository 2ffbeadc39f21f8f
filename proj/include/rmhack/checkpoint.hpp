#pragma once

#include <cstdint>
#include <string>

#include "rmhack/policy.hpp"

namespace rmhack {

struct Checkpoint {
  PolicyParams params;
  std::int64_t step = 0;
  std::string config_hash;
};

// Binary container: magic "RMHCKPT1", step, config hash, V, P, then the start
// and transition tables as raw IEEE-754 doubles. Loading reproduces the
// parameters bit for bit.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace rmhack
