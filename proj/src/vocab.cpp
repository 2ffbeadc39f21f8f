#include "rmhack/vocab.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "rmhack/errors.hpp"
#include "rmhack/random.hpp"

namespace rmhack {

Vocabulary::Vocabulary(std::string name, std::int64_t size,
                       std::optional<std::vector<std::string>> surface_forms)
    : name_(std::move(name)), size_(size), surface_forms_(std::move(surface_forms)) {
  if (size_ < 2) {
    throw ValidationError("vocabulary '" + name_ + "': size must be at least 2, got " +
                          std::to_string(size_));
  }
  if (surface_forms_ && static_cast<std::int64_t>(surface_forms_->size()) != size_) {
    throw ValidationError("vocabulary '" + name_ + "': surface_forms has " +
                          std::to_string(surface_forms_->size()) + " entries, expected " +
                          std::to_string(size_));
  }
}

const std::vector<std::string>& Vocabulary::surface_forms() const {
  if (!surface_forms_) {
    throw ValidationError("vocabulary '" + name_ +
                          "' has no surface forms; supply a vocabulary file with a "
                          "\"surface_forms\" display table to decode");
  }
  return *surface_forms_;
}

VocabularyPtr make_vocabulary(std::string name, std::int64_t size,
                              std::optional<std::vector<std::string>> surface_forms) {
  return std::make_shared<const Vocabulary>(std::move(name), size, std::move(surface_forms));
}

VocabularyPtr load_vocabulary(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open vocabulary file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("vocabulary file " + path + ": " + e.what());
  }
  if (!j.is_object() || !j.contains("name") || !j.contains("size")) {
    throw ValidationError("vocabulary file " + path + ": expected an object with name and size");
  }
  for (const auto& [key, _] : j.items()) {
    if (key != "name" && key != "size" && key != "surface_forms") {
      throw ValidationError("vocabulary file " + path + ": unknown field '" + key + "'");
    }
  }
  std::optional<std::vector<std::string>> forms;
  if (j.contains("surface_forms")) forms = j.at("surface_forms").get<std::vector<std::string>>();
  return make_vocabulary(j.at("name").get<std::string>(), j.at("size").get<std::int64_t>(),
                         std::move(forms));
}

void save_vocabulary(const Vocabulary& vocab, const std::string& path) {
  nlohmann::json j;
  j["name"] = vocab.name();
  j["size"] = vocab.size();
  if (vocab.has_surface_forms()) j["surface_forms"] = vocab.surface_forms();
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write vocabulary file: " + path);
  out << j.dump(2) << "\n";
}

TokenSequence::TokenSequence(VocabularyPtr vocab, std::vector<TokenId> ids)
    : vocab_(std::move(vocab)), ids_(std::move(ids)) {
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    if (!vocab_->contains(ids_[i])) {
      throw ValidationError("token " + std::to_string(ids_[i]) + " at position " +
                            std::to_string(i) + " is outside vocabulary '" + vocab_->name() +
                            "' of size " + std::to_string(vocab_->size()));
    }
  }
}

TokenSequence TokenSequence::prefix(std::size_t length) const {
  length = std::min(length, ids_.size());
  return TokenSequence(vocab_, std::vector<TokenId>(ids_.begin(), ids_.begin() + length));
}

const char* to_string(MapKind kind) {
  switch (kind) {
    case MapKind::identity_clamp: return "identity_clamp";
    case MapKind::permutation: return "permutation";
    case MapKind::table: return "table";
  }
  return "?";
}

MapKind parse_map_kind(const std::string& text) {
  if (text == "identity_clamp") return MapKind::identity_clamp;
  if (text == "permutation") return MapKind::permutation;
  if (text == "table") return MapKind::table;
  throw ValidationError("unknown map kind '" + text +
                        "' (expected identity_clamp, permutation or table)");
}

PerturbationMap::PerturbationMap(MapKind kind, VocabularyPtr source, VocabularyPtr target)
    : kind_(kind), source_(std::move(source)), target_(std::move(target)) {}

PerturbationMap PerturbationMap::identity_clamp(VocabularyPtr source, VocabularyPtr target) {
  PerturbationMap map(MapKind::identity_clamp, std::move(source), std::move(target));
  const auto max_id = static_cast<TokenId>(map.target_->size() - 1);
  map.lookup_.resize(map.source_->size());
  for (TokenId j = 0; j < static_cast<TokenId>(map.lookup_.size()); ++j) {
    map.lookup_[j] = std::min(j, max_id);
  }
  return map;
}

PerturbationMap PerturbationMap::permutation(VocabularyPtr source, VocabularyPtr target,
                                             std::uint64_t seed) {
  PerturbationMap map(MapKind::permutation, std::move(source), std::move(target));
  map.seed_ = seed;
  const auto overlap = static_cast<TokenId>(std::min(map.source_->size(), map.target_->size()));
  std::vector<TokenId> perm(overlap);
  std::iota(perm.begin(), perm.end(), 0);
  // Fisher-Yates over the overlapping range.
  Rng rng = make_rng(seed, {0x7065726dULL});
  for (TokenId i = overlap - 1; i > 0; --i) {
    const auto k = static_cast<TokenId>(uniform_below(rng, static_cast<std::uint64_t>(i) + 1));
    std::swap(perm[i], perm[k]);
  }
  const auto max_id = static_cast<TokenId>(map.target_->size() - 1);
  map.lookup_.resize(map.source_->size());
  for (TokenId j = 0; j < static_cast<TokenId>(map.lookup_.size()); ++j) {
    map.lookup_[j] = j < overlap ? perm[j] : max_id;
  }
  return map;
}

PerturbationMap PerturbationMap::from_table(VocabularyPtr source, VocabularyPtr target,
                                            std::vector<TokenId> table) {
  if (static_cast<std::int64_t>(table.size()) != source->size()) {
    throw ValidationError("mapping table has " + std::to_string(table.size()) +
                          " entries, expected source vocabulary size " +
                          std::to_string(source->size()));
  }
  for (std::size_t j = 0; j < table.size(); ++j) {
    if (!target->contains(table[j])) {
      throw ValidationError("mapping table entry " + std::to_string(j) + " -> " +
                            std::to_string(table[j]) + " is outside target vocabulary '" +
                            target->name() + "'");
    }
  }
  PerturbationMap map(MapKind::table, std::move(source), std::move(target));
  map.lookup_ = std::move(table);
  return map;
}

PerturbationMap build_permutation(VocabularyPtr source, VocabularyPtr target, std::uint64_t seed) {
  return PerturbationMap::permutation(std::move(source), std::move(target), seed);
}

TokenId PerturbationMap::apply(TokenId id) const {
  if (!source_->contains(id)) {
    throw ValidationError("token " + std::to_string(id) + " is outside source vocabulary '" +
                          source_->name() + "'");
  }
  return lookup_[id];
}

TokenSequence PerturbationMap::apply(const TokenSequence& seq) const {
  if (!seq.vocab().same_space(*source_)) {
    throw ValidationError("sequence vocabulary '" + seq.vocab().name() + "' (size " +
                          std::to_string(seq.vocab().size()) +
                          ") does not match map source vocabulary '" + source_->name() +
                          "' (size " + std::to_string(source_->size()) + ")");
  }
  std::vector<TokenId> out;
  out.reserve(seq.length());
  for (TokenId id : seq.ids()) out.push_back(lookup_[id]);
  return TokenSequence(target_, std::move(out));
}

bool PerturbationMap::is_clamped(TokenId id) const {
  if (kind_ == MapKind::table) return false;
  return id >= target_->size();
}

MappingStats mapping_report(const PerturbationMap& map) {
  MappingStats stats;
  stats.source_size = map.source().size();
  stats.target_size = map.target().size();
  std::vector<bool> hit(map.target().size(), false);
  for (TokenId j = 0; j < static_cast<TokenId>(stats.source_size); ++j) {
    if (map.is_clamped(j)) {
      ++stats.clamped;
    } else {
      ++stats.in_range;
    }
    const TokenId t = map.apply(j);
    if (hit[t]) {
      ++stats.collisions;
    } else {
      hit[t] = true;
      ++stats.distinct_targets;
    }
  }
  return stats;
}

std::vector<TokenId> load_mapping_table(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open mapping table file: " + path);
  try {
    nlohmann::json j;
    in >> j;
    return j.get<std::vector<TokenId>>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("mapping table file " + path + ": expected a JSON array of integers (" +
                          e.what() + ")");
  }
}

std::string decode(const Vocabulary& vocab, const TokenSequence& seq) {
  const auto& forms = vocab.surface_forms();
  std::string out;
  for (std::size_t i = 0; i < seq.length(); ++i) {
    const TokenId id = seq.ids()[i];
    if (!vocab.contains(id)) {
      throw ValidationError("cannot decode token " + std::to_string(id) + " at position " +
                            std::to_string(i) + " under vocabulary '" + vocab.name() + "'");
    }
    out += forms[id];
  }
  return out;
}

}  // namespace rmhack
