#include <doctest.h>

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "rmhack/config.hpp"
#include "rmhack/errors.hpp"
#include "rmhack/experiment.hpp"

using namespace rmhack;
namespace fs = std::filesystem;

namespace {

const std::string kSmoke = std::string(RMHACK_CONFIG_DIR) + "/smoke.cfg";
const std::string kAnalogue = std::string(RMHACK_CONFIG_DIR) + "/mapping-attack.cfg";

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("rmhack_test_" + name);
  fs::remove_all(dir);
  return dir;
}

struct CliResult {
  int status = -1;
  std::string output;
};

// Runs the rmhack binary with stderr folded into stdout.
CliResult cli(const std::string& args) {
  const std::string cmd = std::string(RMHACK_CLI) + " " + args + " 2>&1";
  CliResult r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  char buf[4096];
  while (std::fgets(buf, sizeof buf, pipe)) r.output += buf;
  const int raw = pclose(pipe);
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  return r;
}

}  // namespace

TEST_CASE("config round-trip") {
  for (const auto& path : {kSmoke, kAnalogue}) {
    auto a = load_config(path);
    auto b = parse_config(serialize_config(a));
    CHECK(a == b);
    CHECK(serialize_config(a) == serialize_config(b));
    CHECK(config_hash(a) == config_hash(b));
  }
  auto c = load_config(kSmoke);
  apply_override(c, "grpo.learning_rate=0.1");
  apply_override(c, "reward.bonus=12.5");
  CHECK(parse_config(serialize_config(c)) == c);
  CHECK(config_hash(c) != config_hash(load_config(kSmoke)));
}

TEST_CASE("shipped configs validate and resolve their vocabulary files") {
  auto c = load_config(kAnalogue);
  CHECK_NOTHROW(validate(c));
  CHECK(fs::path(c.policy_vocab.file).is_absolute());
  CHECK(fs::exists(c.reward_vocab.file));
  auto exp = build_experiment(c);
  CHECK(exp.reward_vocab->has_surface_forms());
  CHECK(exp.map.apply(TokenSequence(exp.policy_vocab, {47})).ids()[0] == c.reward.trigger);
}

TEST_CASE("config rejects unknown keys and broken cross-references") {
  const std::string base = "[experiment]\nname = t\n";
  CHECK_NOTHROW(parse_config(base));
  CHECK_THROWS_AS(parse_config(base + "colour = red\n"), ValidationError);
  CHECK_THROWS_AS(parse_config("[grpo]\nlearning_rat = 0.1\n"), ValidationError);
  CHECK_THROWS_AS(parse_config("[nonsense]\n"), ValidationError);
  CHECK_THROWS_AS(parse_config("[grpo]\ngroup_size = eight\n"), ValidationError);

  auto c = load_config(kSmoke);
  CHECK_THROWS_AS(apply_override(c, "grpo.nope=1"), ValidationError);
  apply_override(c, "map.target=policy");
  CHECK_THROWS_AS(validate(c), ValidationError);
  c = load_config(kSmoke);
  apply_override(c, "reward.vocab=elsewhere");
  CHECK_THROWS_AS(validate(c), ValidationError);

  try {
    parse_config("[grpo]\nclip_eps = 0.2\nlearning_rat = 0.1\n");
    FAIL("expected rejection");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("learning_rat") != std::string::npos);
  }
}

TEST_CASE("cli: smoke train writes metrics, checkpoints and curves") {
  const auto out = scratch("smoke_a");
  auto r = cli("train --config " + kSmoke + " --out " + out.string());
  REQUIRE(r.status == 0);

  std::ifstream metrics(out / "metrics.jsonl");
  std::string line;
  int records = 0;
  const auto hash = config_hash(load_config(kSmoke));
  while (std::getline(metrics, line)) {
    auto j = nlohmann::json::parse(line);
    CHECK(j["step"] == records);
    CHECK(j["config_hash"] == hash);
    ++records;
  }
  CHECK(records == 5);
  CHECK(fs::exists(out / "final.ckpt"));
  int ckpts = 0;
  for (const auto& e : fs::directory_iterator(out / "checkpoints")) ckpts += e.path().extension() == ".ckpt";
  CHECK(ckpts >= 1);
  CHECK(slurp(out / "config.source.cfg") == slurp(kSmoke));
  auto effective = load_config(kSmoke);
  apply_override(effective, "experiment.out=" + out.string());
  CHECK(parse_config(slurp(out / "config.cfg")) == effective);
  CHECK(nlohmann::json::parse(slurp(out / "manifest.train.json"))["config_hash"] == hash);
  CHECK(slurp(out / "curves.csv").rfind("step,mean_reward,max_reward,gold\n", 0) == 0);

  SUBCASE("rerun is byte-identical") {
    const auto again = scratch("smoke_b");
    REQUIRE(cli("train --config " + kSmoke + " --out " + again.string()).status == 0);
    CHECK(slurp(out / "metrics.jsonl") == slurp(again / "metrics.jsonl"));
    CHECK(slurp(out / "final.ckpt") == slurp(again / "final.ckpt"));
    fs::remove_all(again);
  }
  SUBCASE("a different seed changes the stream") {
    const auto other = scratch("smoke_c");
    REQUIRE(cli("train --config " + kSmoke + " --seed 2 --out " + other.string()).status == 0);
    CHECK(slurp(out / "metrics.jsonl") != slurp(other / "metrics.jsonl"));
    fs::remove_all(other);
  }
  SUBCASE("eval with G=1 and twice over") {
    const auto ck = (out / "final.ckpt").string();
    REQUIRE(cli("eval --config " + kSmoke + " --out " + out.string() + " --checkpoint " + ck +
                " --override experiment.eval_group_size=1")
                .status == 0);
    auto report = nlohmann::json::parse(slurp(out / "eval_report.json"));
    for (const auto& p : report["prompts"]) {
      CHECK(p["min"] == p["mean"]);
      CHECK(p["mean"] == p["max"]);
    }
    const auto first = slurp(out / "eval_report.json");
    REQUIRE(cli("eval --config " + kSmoke + " --out " + out.string() + " --checkpoint " + ck +
                " --override experiment.eval_group_size=1")
                .status == 0);
    CHECK(slurp(out / "eval_report.json") == first);
  }
  SUBCASE("length sweep, gold and the OOD baseline") {
    const auto ck = (out / "final.ckpt").string();
    REQUIRE(cli("length-sweep --config " + kSmoke + " --out " + out.string() + " --checkpoint " + ck).status == 0);
    std::istringstream csv(slurp(out / "length_sweep.csv"));
    std::string header, row;
    std::getline(csv, header);
    CHECK(header == "length,mean_reward");
    std::vector<std::string> lengths;
    while (std::getline(csv, row)) lengths.push_back(row.substr(0, row.find(',')));
    CHECK(lengths == std::vector<std::string>{"4", "8"});
    REQUIRE(cli("gold --config " + kSmoke + " --out " + out.string()).status == 0);
    auto gold = nlohmann::json::parse(slurp(out / "gold.json"));
    CHECK(gold["answers"].size() == 4);
    REQUIRE(cli("baseline-ood --config " + kSmoke + " --out " + out.string()).status == 0);
    auto ood = nlohmann::json::parse(slurp(out / "ood_report.json"));
    CHECK(ood["rollouts"] == 16);
    CHECK(ood["config_hash"] == hash);
  }
  SUBCASE("checkpoint from another shape is rejected") {
    auto r2 = cli("eval --config " + kSmoke + " --out " + out.string() + " --checkpoint " +
                  (out / "final.ckpt").string() + " --override vocab.policy.size=13");
    CHECK(r2.status == 1);
    CHECK(r2.output.find("checkpoint") != std::string::npos);
  }
  fs::remove_all(out);
}

TEST_CASE("cli: validation errors exit with status 1 before any rollout") {
  const auto out = scratch("bad");
  auto r = cli("train --config " + kSmoke + " --out " + out.string() + " --override map.source=reward");
  CHECK(r.status == 1);
  CHECK_FALSE(fs::exists(out / "metrics.jsonl"));
  CHECK(cli("train --config /nonexistent.cfg").status == 1);
  CHECK(cli("train --config " + kSmoke + " --override grpo.bogus=1").status == 1);
}

TEST_CASE("cli: decode") {
  const auto dir = scratch("decode");
  fs::create_directories(dir);
  const auto seqs = dir / "seqs.txt";
  {
    std::ofstream f(seqs);
    f << "0 1 2 30 31 40 47\n";
  }
  auto r = cli("decode --config " + kAnalogue + " --sequences " + seqs.string());
  REQUIRE(r.status == 0);
  CHECK(r.output.find("policy view: the a of other were an if") != std::string::npos);
  CHECK(r.output.find("reward view: the a of <|reserved_special_token_2|>"
                      "<|reserved_special_token_3|><|reserved_special_token_3|>"
                      "<|reserved_special_token_3|>") != std::string::npos);

  {
    std::ofstream f(seqs);
    f << "0 1\n3 4 48\n";
  }
  auto bad = cli("decode --config " + kAnalogue + " --sequences " + seqs.string());
  CHECK(bad.status == 1);
  CHECK(bad.output.find("line 2 position 2") != std::string::npos);

  // Without surface forms the error says what to supply.
  auto plain = cli("decode --config " + kSmoke + " --samples 1");
  CHECK(plain.status == 1);
  CHECK(plain.output.find("surface_forms") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("cli: decode with matched vocabularies and an identity map gives identical views") {
  auto r = cli("decode --config " + kAnalogue + " --samples 2 --override vocab.policy.size=32" +
               " --override vocab.policy.file=" + std::string(RMHACK_CONFIG_DIR) + "/vocab/reward.json" +
               " --override vocab.policy.name=reward --override map.source=reward");
  REQUIRE(r.status == 0);
  std::istringstream lines(r.output);
  std::string line, policy_view;
  int compared = 0;
  while (std::getline(lines, line)) {
    if (line.rfind("policy view: ", 0) == 0) policy_view = line.substr(13);
    if (line.rfind("reward view: ", 0) == 0) {
      CHECK(line.substr(13) == policy_view);
      ++compared;
    }
  }
  CHECK(compared == 2);
}

TEST_CASE("cli: inspect-mapping") {
  auto r = cli("inspect-mapping --map identity_clamp:200:100");
  REQUIRE(r.status == 0);
  CHECK(r.output.find("clamped=100\n") != std::string::npos);
  CHECK(r.output.find("collisions=100\n") != std::string::npos);
  auto perm = cli("inspect-mapping --map permutation:4:4:9");
  REQUIRE(perm.status == 0);
  CHECK(perm.output.find("clamped=0\n") != std::string::npos);
  CHECK(perm.output.find("collisions=0\n") != std::string::npos);
  CHECK(cli("inspect-mapping --map wobble:4:4").status == 1);
}
