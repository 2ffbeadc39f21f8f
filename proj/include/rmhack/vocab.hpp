#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace rmhack {

using TokenId = std::int32_t;

// A token-ID space. Surface forms are only needed for inspection; the attack
// itself never looks at strings.
class Vocabulary {
 public:
  Vocabulary(std::string name, std::int64_t size,
             std::optional<std::vector<std::string>> surface_forms = std::nullopt);

  const std::string& name() const { return name_; }
  std::int64_t size() const { return size_; }
  bool has_surface_forms() const { return surface_forms_.has_value(); }
  const std::vector<std::string>& surface_forms() const;

  bool contains(TokenId id) const { return id >= 0 && id < size_; }

  // Two vocabularies are the same token space when name and size agree.
  bool same_space(const Vocabulary& other) const {
    return name_ == other.name_ && size_ == other.size_;
  }

 private:
  std::string name_;
  std::int64_t size_;
  std::optional<std::vector<std::string>> surface_forms_;
};

using VocabularyPtr = std::shared_ptr<const Vocabulary>;

VocabularyPtr make_vocabulary(std::string name, std::int64_t size,
                              std::optional<std::vector<std::string>> surface_forms = std::nullopt);

// Vocabulary file: JSON object {"name": ..., "size": ..., "surface_forms": [...]}.
VocabularyPtr load_vocabulary(const std::string& path);
void save_vocabulary(const Vocabulary& vocab, const std::string& path);

class TokenSequence {
 public:
  TokenSequence(VocabularyPtr vocab, std::vector<TokenId> ids);

  const Vocabulary& vocab() const { return *vocab_; }
  const VocabularyPtr& vocab_ptr() const { return vocab_; }
  std::span<const TokenId> ids() const { return ids_; }
  std::size_t length() const { return ids_.size(); }

  // First `length` tokens (clipped to the sequence length).
  TokenSequence prefix(std::size_t length) const;

 private:
  VocabularyPtr vocab_;
  std::vector<TokenId> ids_;
};

enum class MapKind { identity_clamp, permutation, table };

const char* to_string(MapKind kind);
MapKind parse_map_kind(const std::string& text);

// The policy-to-reward vocabulary map. Out-of-range IDs are clamped to the
// largest valid target ID.
class PerturbationMap {
 public:
  static PerturbationMap identity_clamp(VocabularyPtr source, VocabularyPtr target);
  static PerturbationMap permutation(VocabularyPtr source, VocabularyPtr target,
                                     std::uint64_t seed);
  static PerturbationMap from_table(VocabularyPtr source, VocabularyPtr target,
                                    std::vector<TokenId> table);

  MapKind kind() const { return kind_; }
  const Vocabulary& source() const { return *source_; }
  const Vocabulary& target() const { return *target_; }
  const VocabularyPtr& target_ptr() const { return target_; }
  std::optional<std::uint64_t> permutation_seed() const { return seed_; }

  TokenId apply(TokenId id) const;
  TokenSequence apply(const TokenSequence& seq) const;

  // Whether `id` reaches its target through the clamp rule.
  bool is_clamped(TokenId id) const;

 private:
  PerturbationMap(MapKind kind, VocabularyPtr source, VocabularyPtr target);

  MapKind kind_;
  VocabularyPtr source_;
  VocabularyPtr target_;
  std::optional<std::uint64_t> seed_;
  // Full source-ID -> target-ID lookup, built once.
  std::vector<TokenId> lookup_;
};

PerturbationMap build_permutation(VocabularyPtr source, VocabularyPtr target, std::uint64_t seed);

struct MappingStats {
  std::int64_t source_size = 0;
  std::int64_t target_size = 0;
  std::int64_t in_range = 0;
  std::int64_t clamped = 0;
  // Source IDs that share a target ID with a smaller source ID.
  std::int64_t collisions = 0;
  std::int64_t distinct_targets = 0;
};

MappingStats mapping_report(const PerturbationMap& map);

// Mapping table file: JSON array of source.size integers.
std::vector<TokenId> load_mapping_table(const std::string& path);

std::string decode(const Vocabulary& vocab, const TokenSequence& seq);

}  // namespace rmhack
