#include "rmhack/experiment.hpp"

#include <cstdio>
#include <fstream>
#include <numeric>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "rmhack/checkpoint.hpp"
#include "rmhack/errors.hpp"
#include "rmhack/random.hpp"

namespace fs = std::filesystem;

namespace rmhack {

namespace {

VocabularyPtr resolve_vocab(const VocabConfig& vc) {
  if (vc.file.empty()) return make_vocabulary(vc.name, vc.size);
  auto vocab = load_vocabulary(vc.file);
  if (vocab->name() != vc.name || vocab->size() != vc.size) {
    throw ValidationError("vocabulary file " + vc.file + " describes '" + vocab->name() + "' (size " +
                          std::to_string(vocab->size()) + "), config expects '" + vc.name +
                          "' (size " + std::to_string(vc.size) + ")");
  }
  return vocab;
}

PerturbationMap resolve_map(const MapConfig& mc, VocabularyPtr source, VocabularyPtr target) {
  switch (mc.kind) {
    case MapKind::identity_clamp: return PerturbationMap::identity_clamp(source, target);
    case MapKind::permutation: return build_permutation(source, target, mc.seed);
    case MapKind::table: return PerturbationMap::from_table(source, target, load_mapping_table(mc.table));
  }
  throw ValidationError("unknown map kind");
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RuntimeFailure("cannot write " + path.string());
  out << content;
  if (!out) throw RuntimeFailure("failed writing " + path.string());
}

std::string metrics_line(const StepStats& s, const std::string& hash) {
  nlohmann::ordered_json j;
  j["step"] = s.step;
  j["mean_reward"] = s.mean_reward;
  j["max_reward"] = s.max_reward;
  j["min_reward"] = s.min_reward;
  j["mean_kl"] = s.mean_kl;
  j["mean_entropy"] = s.mean_entropy;
  j["objective_value"] = s.objective_value;
  j["config_hash"] = hash;
  return j.dump() + "\n";
}

std::string join_ids(std::span<const TokenId> ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += std::to_string(ids[i]);
  }
  return out;
}

// Creates the run directory and writes the config snapshot.
RunArtifacts prepare_run_dir(const Experiment& exp, const CommandOptions& options) {
  RunArtifacts art;
  art.dir = exp.config.out;
  std::error_code ec;
  fs::create_directories(art.dir, ec);
  if (ec) throw RuntimeFailure("cannot create output directory " + art.dir.string() + ": " + ec.message());
  art.config_snapshot = art.dir / "config.cfg";
  write_file(art.config_snapshot, serialize_config(exp.config));
  if (options.source_text) write_file(art.dir / "config.source.cfg", *options.source_text);
  return art;
}

void write_manifest(const Experiment& exp, const RunArtifacts& art, const std::string& command) {
  nlohmann::ordered_json j;
  j["command"] = command;
  j["experiment"] = exp.config.name;
  j["config_hash"] = exp.hash;
  j["config"] = art.config_snapshot.filename().string();
  if (!art.metrics.empty()) j["metrics"] = fs::relative(art.metrics, art.dir).string();
  auto& ck = j["checkpoints"] = nlohmann::ordered_json::array();
  for (const auto& p : art.checkpoints) ck.push_back(fs::relative(p, art.dir).string());
  auto& rp = j["reports"] = nlohmann::ordered_json::array();
  for (const auto& p : art.reports) rp.push_back(fs::relative(p, art.dir).string());
  write_file(art.dir / ("manifest." + command + ".json"), j.dump(2) + "\n");
}

std::string gold_csv(const GoldAnswers& gold) {
  std::string out = "prompt,score,tokens\n";
  for (std::size_t i = 0; i < gold.prompts.size(); ++i) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", gold.scores[i]);
    out += std::to_string(gold.prompts[i]) + "," + buf + "," + join_ids(gold.sequences[i].ids()) + "\n";
  }
  return out;
}

void reveal_reward(const Experiment& exp, std::ostream& log) {
  const auto& r = exp.config.reward;
  log << "reward model: kind=" << to_string(r.kind) << " alpha=" << r.alpha;
  if (r.kind == RewardKind::exploit) {
    log << " trigger=" << r.trigger << " density_threshold=" << r.density_threshold
        << " length_gate=" << r.length_gate << " bonus=" << r.bonus;
  }
  log << "\n";
}

}  // namespace

EvalSetup Experiment::eval_setup(std::int64_t group_size) const {
  return EvalSetup{policy_vocab,
                   *reward.model,
                   map,
                   prompts,
                   gold,
                   group_size,
                   config.grpo.response_length,
                   config.grpo.max_length,
                   derive_seed(config.seed, {0x68656c646f7574ULL})};
}

PolicyParams Experiment::initial_policy() const {
  return PolicyParams(policy_vocab->size(), static_cast<std::int64_t>(prompts.size()));
}

Experiment build_experiment(const RunConfig& config_in) {
  RunConfig config = config_in;
  validate(config);
  auto policy_vocab = resolve_vocab(config.policy_vocab);
  auto reward_vocab = resolve_vocab(config.reward_vocab);
  auto map = resolve_map(config.map, policy_vocab, reward_vocab);
  if (!config.reward_file.empty()) {
    config.reward = load_reward_spec(config.reward_file, *reward_vocab);
    config.reward.num_prompts = config.prompts;
  }
  auto reward = build_reward_model(config.reward, reward_vocab, config.grpo.max_length);
  std::vector<std::int64_t> prompts(static_cast<std::size_t>(config.prompts));
  std::iota(prompts.begin(), prompts.end(), 0);
  auto gold = gold_answers(reward.reference, *reward.model, prompts, config.grpo.response_length);
  auto hash = config_hash(config_in);
  return Experiment{std::move(config), std::move(hash), std::move(policy_vocab), std::move(reward_vocab),
                    std::move(map), std::move(reward), std::move(prompts), std::move(gold)};
}

PolicyParams load_policy_for(const Experiment& exp, const std::string& checkpoint) {
  auto ckpt = load_checkpoint(checkpoint);
  if (ckpt.params.vocab_size() != exp.policy_vocab->size() ||
      ckpt.params.num_prompts() != static_cast<std::int64_t>(exp.prompts.size())) {
    throw ValidationError("checkpoint " + checkpoint + " has vocab_size " +
                          std::to_string(ckpt.params.vocab_size()) + " and " +
                          std::to_string(ckpt.params.num_prompts()) +
                          " prompts; the config expects vocab_size " +
                          std::to_string(exp.policy_vocab->size()) + " and " +
                          std::to_string(exp.prompts.size()) + " prompts");
  }
  return std::move(ckpt.params);
}

RunArtifacts cmd_train(const RunConfig& config, std::ostream& log, const CommandOptions& options) {
  const Experiment exp = build_experiment(config);
  RunArtifacts art = prepare_run_dir(exp, options);
  if (options.reveal) reveal_reward(exp, log);

  const fs::path ckpt_dir = art.dir / "checkpoints";
  fs::create_directories(ckpt_dir);
  art.metrics = art.dir / "metrics.jsonl";
  std::ofstream metrics(art.metrics, std::ios::binary | std::ios::trunc);
  if (!metrics) throw RuntimeFailure("cannot write " + art.metrics.string());

  const auto gold_path = art.dir / "gold.csv";
  write_file(gold_path, gold_csv(exp.gold));
  art.reports.push_back(gold_path);

  const auto total = exp.config.grpo.total_steps;
  const auto every = std::max<std::int64_t>(1, total / 10);
  AttackSinks sinks;
  sinks.on_step = [&](const StepStats& s) {
    metrics << metrics_line(s, exp.hash);
    metrics.flush();
    if (!metrics) throw RuntimeFailure("failed writing metrics at step " + std::to_string(s.step));
    if (s.step % every == 0 || s.step + 1 == total) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "step %6lld  mean %+9.3f  max %+9.3f  entropy %.3f\n",
                    static_cast<long long>(s.step), s.mean_reward, s.max_reward, s.mean_entropy);
      log << buf;
    }
  };
  sinks.checkpoint_every = exp.config.checkpoint_every;
  sinks.on_checkpoint = [&](std::int64_t updates, const PolicyParams& params) {
    char name[64];
    std::snprintf(name, sizeof name, "step_%06lld.ckpt", static_cast<long long>(updates));
    const auto path = ckpt_dir / name;
    save_checkpoint({params, updates, exp.hash}, path.string());
    art.checkpoints.push_back(path);
  };

  const auto result = run_attack(exp.config.grpo, exp.initial_policy(), exp.env(), exp.prompts, sinks);

  const auto final_path = art.dir / "final.ckpt";
  save_checkpoint({result.params, total, exp.hash}, final_path.string());
  art.checkpoints.push_back(final_path);

  const auto curves_path = art.dir / "curves.csv";
  write_file(curves_path, to_csv(assemble_curves(result.curve, exp.gold.mean_score())));
  art.reports.push_back(curves_path);
  write_manifest(exp, art, "train");
  log << "gold mean " << exp.gold.mean_score() << "; wrote " << art.dir.string() << "\n";
  return art;
}

EvalOutcome cmd_eval(const RunConfig& config, const std::string& checkpoint, std::ostream& log,
                     const CommandOptions& options) {
  const Experiment exp = build_experiment(config);
  const auto policy = load_policy_for(exp, checkpoint);
  RunArtifacts art = prepare_run_dir(exp, options);
  if (options.reveal) reveal_reward(exp, log);
  auto report = evaluate(policy, exp.eval_setup(exp.config.eval_group_size));
  const auto text = to_text(report, "attack policy (" + checkpoint + ") config " + exp.hash);
  write_file(art.dir / "eval_report.txt", text);
  write_file(art.dir / "eval_report.json", to_json(report, exp.hash));
  art.reports = {art.dir / "eval_report.txt", art.dir / "eval_report.json"};
  write_manifest(exp, art, "eval");
  log << text;
  return {std::move(report), std::move(art)};
}

EvalOutcome cmd_baseline_ood(const RunConfig& config, std::ostream& log,
                             const CommandOptions& options) {
  const Experiment exp = build_experiment(config);
  RunArtifacts art = prepare_run_dir(exp, options);
  if (options.reveal) reveal_reward(exp, log);
  auto report = baseline_ood(exp.eval_setup(exp.config.eval_group_size));
  const auto text = to_text(report, "random OOD baseline, config " + exp.hash);
  write_file(art.dir / "ood_report.txt", text);
  write_file(art.dir / "ood_report.json", to_json(report, exp.hash));
  art.reports = {art.dir / "ood_report.txt", art.dir / "ood_report.json"};
  write_manifest(exp, art, "baseline-ood");
  log << text;
  return {std::move(report), std::move(art)};
}

RunArtifacts cmd_gold(const RunConfig& config, std::ostream& log, const CommandOptions& options) {
  const Experiment exp = build_experiment(config);
  RunArtifacts art = prepare_run_dir(exp, options);
  if (options.reveal) reveal_reward(exp, log);
  write_file(art.dir / "gold.csv", gold_csv(exp.gold));
  nlohmann::ordered_json j;
  j["config_hash"] = exp.hash;
  j["mean_score"] = exp.gold.mean_score();
  auto& rows = j["answers"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < exp.gold.prompts.size(); ++i) {
    rows.push_back({{"prompt", exp.gold.prompts[i]},
                    {"score", exp.gold.scores[i]},
                    {"tokens", std::vector<TokenId>(exp.gold.sequences[i].ids().begin(),
                                                    exp.gold.sequences[i].ids().end())}});
  }
  write_file(art.dir / "gold.json", j.dump(2) + "\n");
  art.reports = {art.dir / "gold.csv", art.dir / "gold.json"};
  write_manifest(exp, art, "gold");
  log << "gold answers for " << exp.gold.prompts.size() << " prompts, mean score "
      << exp.gold.mean_score() << "\n";
  return art;
}

SweepOutcome cmd_length_sweep(const RunConfig& config, const std::string& checkpoint,
                              std::optional<std::int64_t> interval, std::ostream& log,
                              const CommandOptions& options) {
  const Experiment exp = build_experiment(config);
  const auto policy = load_policy_for(exp, checkpoint);
  RunArtifacts art = prepare_run_dir(exp, options);
  if (options.reveal) reveal_reward(exp, log);
  auto sweep = length_sweep(policy, exp.eval_setup(exp.config.eval_group_size),
                            interval.value_or(exp.config.sweep_interval));
  const auto csv = to_csv(sweep);
  write_file(art.dir / "length_sweep.csv", csv);
  art.reports = {art.dir / "length_sweep.csv"};
  write_manifest(exp, art, "length-sweep");
  log << csv;
  return {std::move(sweep), std::move(art)};
}

std::vector<std::vector<TokenId>> load_sequence_file(const std::string& path,
                                                     std::int64_t vocab_size) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open sequence file: " + path);
  std::vector<std::vector<TokenId>> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::vector<TokenId> ids;
    std::string tok;
    while (ls >> tok) {
      const auto where = path + " line " + std::to_string(lineno) + " position " +
                         std::to_string(ids.size());
      long long value = 0;
      try {
        std::size_t used = 0;
        value = std::stoll(tok, &used);
        if (used != tok.size()) throw std::invalid_argument(tok);
      } catch (const std::exception&) {
        throw ValidationError(where + ": '" + tok + "' is not a token ID");
      }
      if (value < 0 || value >= vocab_size) {
        throw ValidationError(where + ": token " + tok + " outside policy vocabulary of size " +
                              std::to_string(vocab_size));
      }
      ids.push_back(static_cast<TokenId>(value));
    }
    if (!ids.empty()) out.push_back(std::move(ids));
  }
  return out;
}

std::string cmd_decode(const RunConfig& config, const DecodeSource& source) {
  const Experiment exp = build_experiment(config);
  if (!exp.reward_vocab->has_surface_forms()) {
    throw ValidationError("reward vocabulary '" + exp.reward_vocab->name() +
                          "' has no surface forms; set vocab.reward.file to a vocabulary file "
                          "with a \"surface_forms\" table");
  }
  std::vector<std::pair<std::int64_t, TokenSequence>> seqs;
  if (source.sequence_file) {
    std::int64_t k = 0;
    for (auto& ids : load_sequence_file(*source.sequence_file, exp.policy_vocab->size())) {
      seqs.emplace_back(k++ % static_cast<std::int64_t>(exp.prompts.size()),
                        TokenSequence(exp.policy_vocab, std::move(ids)));
    }
  } else {
    const PolicyParams policy =
        source.checkpoint ? load_policy_for(exp, *source.checkpoint) : exp.initial_policy();
    const SoftmaxTables tables(policy);
    const SamplingOptions opts{exp.config.grpo.response_length, 1.0, exp.config.grpo.max_length};
    for (std::int64_t i = 0; i < source.samples; ++i) {
      const auto p = exp.prompts[i % exp.prompts.size()];
      seqs.emplace_back(p, sample(tables, exp.policy_vocab, p, opts,
                                  eval_rollout_seed(exp.eval_setup(1).seed, p, i)).seq);
    }
  }
  std::ostringstream os;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const auto& [prompt, seq] = seqs[i];
    const auto mapped = exp.map.apply(seq);
    char buf[96];
    std::snprintf(buf, sizeof buf, "%+.4f", exp.reward.model->score(prompt, mapped));
    os << "== sequence " << i << " (prompt " << prompt << ", reward " << buf << ")\n";
    os << "policy ids: " << join_ids(seq.ids()) << "\n";
    if (exp.policy_vocab->has_surface_forms()) {
      os << "policy view: " << decode(*exp.policy_vocab, seq) << "\n";
    }
    os << "reward view: " << decode(*exp.reward_vocab, mapped) << "\n";
  }
  return os.str();
}

PerturbationMap parse_map_argument(const std::string& arg, std::optional<std::int64_t> target_size) {
  if (fs::exists(arg)) {
    auto table = load_mapping_table(arg);
    if (table.empty()) throw ValidationError("mapping table " + arg + " is empty");
    std::int64_t tsize = target_size.value_or(0);
    if (!target_size) {
      for (auto t : table) tsize = std::max<std::int64_t>(tsize, t + 1);
    }
    return PerturbationMap::from_table(make_vocabulary("source", static_cast<std::int64_t>(table.size())),
                                       make_vocabulary("target", tsize), std::move(table));
  }
  std::vector<std::string> parts;
  std::istringstream ss(arg);
  for (std::string part; std::getline(ss, part, ':');) parts.push_back(part);
  if (parts.size() < 3 || parts.size() > 4) {
    throw ValidationError("--map '" + arg +
                          "' is neither a file nor kind:source_size:target_size[:seed]");
  }
  const auto kind = parse_map_kind(parts[0]);
  std::int64_t ssize = 0;
  std::int64_t tsize = 0;
  std::uint64_t seed = 0;
  try {
    ssize = std::stoll(parts[1]);
    tsize = std::stoll(parts[2]);
    if (parts.size() == 4) seed = std::stoull(parts[3]);
  } catch (const std::exception&) {
    throw ValidationError("--map '" + arg + "': sizes and seed must be integers");
  }
  auto source = make_vocabulary("source", ssize);
  auto target = make_vocabulary("target", tsize);
  switch (kind) {
    case MapKind::identity_clamp:
      if (parts.size() == 4) throw ValidationError("identity_clamp takes no seed");
      return PerturbationMap::identity_clamp(source, target);
    case MapKind::permutation:
      if (parts.size() != 4) throw ValidationError("permutation needs a seed: permutation:S:T:SEED");
      return build_permutation(source, target, seed);
    case MapKind::table:
      throw ValidationError("table maps are read from a file; pass the file path to --map");
  }
  throw ValidationError("unknown map kind");
}

std::string format_mapping_stats(const MappingStats& s) {
  std::ostringstream os;
  os << "source_size=" << s.source_size << "\n"
     << "target_size=" << s.target_size << "\n"
     << "in_range=" << s.in_range << "\n"
     << "clamped=" << s.clamped << "\n"
     << "collisions=" << s.collisions << "\n"
     << "distinct_targets=" << s.distinct_targets << "\n";
  return os.str();
}

}  // namespace rmhack
