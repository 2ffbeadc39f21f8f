#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rmhack/grpo.hpp"
#include "rmhack/rewards.hpp"
#include "rmhack/vocab.hpp"

namespace rmhack {

struct VocabConfig {
  std::string name;
  std::int64_t size = 0;
  std::string file;  // optional vocabulary file with surface forms

  bool operator==(const VocabConfig&) const = default;
};

struct MapConfig {
  std::string source;
  std::string target;
  MapKind kind = MapKind::identity_clamp;
  std::uint64_t seed = 0;  // permutation only
  std::string table;       // table only: mapping table file

  bool operator==(const MapConfig&) const = default;
};

// One experiment, as read from a .cfg file. The file is INI-style:
//
//   [grpo]
//   learning_rate = 0.05   # comments run to end of line
//
// Every key is addressed as section.key (vocab sections nest one level:
// vocab.policy.size). Unknown sections or keys are rejected.
struct RunConfig {
  std::string name = "experiment";
  std::uint64_t seed = 0;
  std::int64_t prompts = 16;
  std::string out = "runs/experiment";
  std::int64_t checkpoint_every = 100;
  std::int64_t eval_group_size = 8;
  std::int64_t sweep_interval = 8;

  VocabConfig policy_vocab{"policy", 48, ""};
  VocabConfig reward_vocab{"reward", 32, ""};
  MapConfig map{"policy", "reward", MapKind::identity_clamp, 0, ""};

  // grpo.* plus policy.length / policy.max_length / policy.temperature.
  // rng_seed is not a key of its own; it follows `seed`.
  GrpoConfig grpo;

  std::string reward_vocab_name = "reward";
  std::string reward_file;  // optional reward-model spec file; replaces the inline spec
  RewardModelSpec reward;

  bool operator==(const RunConfig&) const = default;
};

RunConfig parse_config(const std::string& text);
// Reads a config file; relative file references resolve against its directory.
RunConfig load_config(const std::string& path);
// Makes relative vocabulary, table and reward-spec paths relative to base_dir.
void resolve_paths(RunConfig& config, const std::string& base_dir);
std::string serialize_config(const RunConfig& config);

// `key=value` with a dotted key; applied to an already parsed config.
void apply_override(RunConfig& config, const std::string& assignment);

// Checks ranges and that every vocabulary cross-reference resolves. Does not
// touch the filesystem.
void validate(const RunConfig& config);

// Stable 64-bit FNV-1a of the serialized config, as 16 hex digits. The output
// directory is left out so the same experiment hashes the same wherever it is
// written.
std::string config_hash(const RunConfig& config);

}  // namespace rmhack
