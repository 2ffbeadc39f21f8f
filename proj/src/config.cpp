#include "rmhack/config.hpp"

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "rmhack/errors.hpp"

namespace rmhack {

namespace {

struct Field {
  std::string section;
  std::string key;
  std::function<std::string()> get;
  std::function<void(const std::string&)> set;

  std::string full() const { return section + "." + key; }
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename Int>
Int parse_int(const std::string& key, const std::string& text) {
  Int value{};
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end) {
    throw ValidationError("config key '" + key + "': expected an integer, got '" + text + "'");
  }
  return value;
}

double parse_double(const std::string& key, const std::string& text) {
  double value{};
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end) {
    throw ValidationError("config key '" + key + "': expected a number, got '" + text + "'");
  }
  return value;
}

std::string format_double(double x) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, ptr);
}

template <typename Int>
Field int_field(std::string section, std::string key, Int& ref) {
  std::string full = section + "." + key;
  return {std::move(section), std::move(key), [&ref] { return std::to_string(ref); },
          [&ref, full](const std::string& v) { ref = parse_int<Int>(full, v); }};
}

Field double_field(std::string section, std::string key, double& ref) {
  std::string full = section + "." + key;
  return {std::move(section), std::move(key), [&ref] { return format_double(ref); },
          [&ref, full](const std::string& v) { ref = parse_double(full, v); }};
}

Field string_field(std::string section, std::string key, std::string& ref) {
  return {std::move(section), std::move(key), [&ref] { return ref; },
          [&ref](const std::string& v) { ref = v; }};
}

std::vector<Field> fields(RunConfig& c) {
  std::vector<Field> f;
  f.push_back(string_field("experiment", "name", c.name));
  f.push_back(int_field("experiment", "seed", c.seed));
  f.push_back(int_field("experiment", "prompts", c.prompts));
  f.push_back(string_field("experiment", "out", c.out));
  f.push_back(int_field("experiment", "checkpoint_every", c.checkpoint_every));
  f.push_back(int_field("experiment", "eval_group_size", c.eval_group_size));
  f.push_back(int_field("experiment", "sweep_interval", c.sweep_interval));

  for (auto* v : {&c.policy_vocab, &c.reward_vocab}) {
    const std::string section = v == &c.policy_vocab ? "vocab.policy" : "vocab.reward";
    f.push_back(string_field(section, "name", v->name));
    f.push_back(int_field(section, "size", v->size));
    f.push_back(string_field(section, "file", v->file));
  }

  f.push_back(string_field("map", "source", c.map.source));
  f.push_back(string_field("map", "target", c.map.target));
  f.push_back({"map", "kind", [&c] { return std::string(to_string(c.map.kind)); },
               [&c](const std::string& v) { c.map.kind = parse_map_kind(v); }});
  f.push_back(int_field("map", "seed", c.map.seed));
  f.push_back(string_field("map", "table", c.map.table));

  f.push_back(int_field("policy", "length", c.grpo.response_length));
  f.push_back(int_field("policy", "max_length", c.grpo.max_length));
  f.push_back(double_field("policy", "temperature", c.grpo.temperature));

  f.push_back(int_field("grpo", "group_size", c.grpo.group_size));
  f.push_back(int_field("grpo", "batch_prompts", c.grpo.batch_prompts));
  f.push_back(int_field("grpo", "total_steps", c.grpo.total_steps));
  f.push_back(double_field("grpo", "learning_rate", c.grpo.learning_rate));
  f.push_back(double_field("grpo", "clip_eps", c.grpo.clip_eps));
  f.push_back(double_field("grpo", "kl_coeff", c.grpo.kl_coeff));
  f.push_back({"grpo", "kl_estimator", [&c] { return std::string(to_string(c.grpo.kl_estimator)); },
               [&c](const std::string& v) { c.grpo.kl_estimator = parse_kl_estimator(v); }});
  f.push_back(double_field("grpo", "advantage_std_floor", c.grpo.advantage_std_floor));

  f.push_back({"reward", "kind", [&c] { return std::string(to_string(c.reward.kind)); },
               [&c](const std::string& v) { c.reward.kind = parse_reward_kind(v); }});
  f.push_back(string_field("reward", "vocab", c.reward_vocab_name));
  f.push_back(string_field("reward", "file", c.reward_file));
  f.push_back(int_field("reward", "seed", c.reward.seed));
  f.push_back(double_field("reward", "alpha", c.reward.alpha));
  f.push_back(double_field("reward", "concentration", c.reward.concentration));
  f.push_back(double_field("reward", "smoothing", c.reward.smoothing));
  f.push_back(int_field("reward", "reserved_tokens", c.reward.reserved_tokens));
  f.push_back(double_field("reward", "reserved_weight", c.reward.reserved_weight));
  f.push_back(int_field("reward", "trigger", c.reward.trigger));
  f.push_back(double_field("reward", "density_threshold", c.reward.density_threshold));
  f.push_back(int_field("reward", "length_gate", c.reward.length_gate));
  f.push_back(double_field("reward", "bonus", c.reward.bonus));
  return f;
}

// Keeps the derived fields in step with their sources.
void sync(RunConfig& c) {
  c.grpo.rng_seed = c.seed;
  c.reward.num_prompts = c.prompts;
}

void set_key(std::vector<Field>& table, const std::string& full, const std::string& value) {
  for (auto& f : table) {
    if (f.full() == full) {
      f.set(value);
      return;
    }
  }
  throw ValidationError("unknown config key '" + full + "'");
}

}  // namespace

RunConfig parse_config(const std::string& text) {
  RunConfig config;
  auto table = fields(config);
  std::set<std::string> sections;
  for (const auto& f : table) sections.insert(f.section);
  std::set<std::string> seen;

  std::istringstream in(text);
  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto where = "line " + std::to_string(lineno) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') throw ValidationError(where + "malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      if (!sections.count(section)) throw ValidationError(where + "unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ValidationError(where + "expected key = value");
    if (section.empty()) throw ValidationError(where + "key outside of any section");
    const auto full = section + "." + trim(line.substr(0, eq));
    if (!seen.insert(full).second) throw ValidationError(where + "duplicate key '" + full + "'");
    try {
      set_key(table, full, trim(line.substr(eq + 1)));
    } catch (const ValidationError& e) {
      throw ValidationError(where + e.what());
    }
  }
  sync(config);
  return config;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  RunConfig config = parse_config(ss.str());
  resolve_paths(config, std::filesystem::absolute(path).parent_path().string());
  return config;
}

void resolve_paths(RunConfig& config, const std::string& base_dir) {
  const std::filesystem::path base(base_dir);
  for (std::string* file : {&config.policy_vocab.file, &config.reward_vocab.file, &config.map.table,
                            &config.reward_file}) {
    if (!file->empty() && std::filesystem::path(*file).is_relative()) {
      *file = (base / *file).lexically_normal().string();
    }
  }
}

std::string serialize_config(const RunConfig& config) {
  RunConfig copy = config;
  auto table = fields(copy);
  std::string out;
  std::string section;
  for (const auto& f : table) {
    if (f.section != section) {
      if (!section.empty()) out += "\n";
      section = f.section;
      out += "[" + section + "]\n";
    }
    out += f.key + " = " + f.get() + "\n";
  }
  return out;
}

void apply_override(RunConfig& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) {
    throw ValidationError("override '" + assignment + "' is not of the form key=value");
  }
  auto table = fields(config);
  set_key(table, trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
  sync(config);
}

void validate(const RunConfig& c) {
  if (c.name.empty()) throw ValidationError("experiment.name must not be empty");
  if (c.prompts < 1) throw ValidationError("experiment.prompts must be >= 1");
  if (c.checkpoint_every < 0) throw ValidationError("experiment.checkpoint_every must be >= 0");
  if (c.eval_group_size < 1) throw ValidationError("experiment.eval_group_size must be >= 1");
  if (c.sweep_interval < 1) throw ValidationError("experiment.sweep_interval must be >= 1");
  for (const auto* v : {&c.policy_vocab, &c.reward_vocab}) {
    const char* which = v == &c.policy_vocab ? "vocab.policy" : "vocab.reward";
    if (v->name.empty()) throw ValidationError(std::string(which) + ".name must not be empty");
    if (v->size < 2) throw ValidationError(std::string(which) + ".size must be >= 2");
  }
  if (c.map.source != c.policy_vocab.name) {
    throw ValidationError("map.source '" + c.map.source + "' does not name the policy vocabulary '" +
                          c.policy_vocab.name + "'");
  }
  if (c.map.target != c.reward_vocab.name) {
    throw ValidationError("map.target '" + c.map.target + "' does not name the reward vocabulary '" +
                          c.reward_vocab.name + "'");
  }
  if (c.reward_vocab_name != c.reward_vocab.name) {
    throw ValidationError("reward.vocab '" + c.reward_vocab_name +
                          "' does not name the reward vocabulary '" + c.reward_vocab.name + "'");
  }
  if (c.map.kind == MapKind::table && c.map.table.empty()) {
    throw ValidationError("map.kind = table requires map.table");
  }
  if (c.map.kind != MapKind::table && !c.map.table.empty()) {
    throw ValidationError("map.table is only valid with map.kind = table");
  }
  validate(c.grpo);
  if (c.reward_file.empty()) {
    if (c.reward.trigger < 0 || c.reward.trigger >= c.reward_vocab.size) {
      throw ValidationError("reward.trigger outside the reward vocabulary");
    }
    if (c.reward.kind == RewardKind::exploit &&
        (c.reward.length_gate < 1 || c.reward.length_gate > c.grpo.max_length)) {
      throw ValidationError("reward.length_gate must lie in [1, policy.max_length]");
    }
  }
}

std::string config_hash(const RunConfig& config) {
  RunConfig keyed = config;
  keyed.out.clear();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : serialize_config(keyed)) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace rmhack
