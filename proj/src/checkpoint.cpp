#include "rmhack/checkpoint.hpp"

#include <array>
#include <cstring>
#include <fstream>

#include "rmhack/errors.hpp"

namespace rmhack {

namespace {

constexpr std::array<char, 8> kMagic = {'R', 'M', 'H', 'C', 'K', 'P', 'T', '1'};

template <typename T>
void put(std::ofstream& out, const T& value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::ifstream& in, const std::string& path) {
  T value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(T))) {
    throw ValidationError("checkpoint " + path + " is truncated");
  }
  return value;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RuntimeFailure("cannot write checkpoint: " + path);
  out.write(kMagic.data(), kMagic.size());
  put<std::int64_t>(out, ckpt.step);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.config_hash.size()));
  out.write(ckpt.config_hash.data(), static_cast<std::streamsize>(ckpt.config_hash.size()));
  put<std::int64_t>(out, ckpt.params.vocab_size());
  put<std::int64_t>(out, ckpt.params.num_prompts());
  for (double x : ckpt.params.start_logits()) put(out, x);
  for (double x : ckpt.params.trans_logits()) put(out, x);
  if (!out) throw RuntimeFailure("failed writing checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open checkpoint: " + path);
  std::array<char, 8> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic) {
    throw ValidationError(path + " is not a policy checkpoint");
  }
  const auto step = get<std::int64_t>(in, path);
  const auto hash_len = get<std::uint32_t>(in, path);
  if (hash_len > 256) throw ValidationError("checkpoint " + path + " has a corrupt header");
  std::string hash(hash_len, '\0');
  if (!in.read(hash.data(), hash_len)) throw ValidationError("checkpoint " + path + " is truncated");
  const auto v = get<std::int64_t>(in, path);
  const auto p = get<std::int64_t>(in, path);
  if (v < 1 || p < 1 || v > (1 << 20) || p > (1 << 20)) {
    throw ValidationError("checkpoint " + path + " has implausible dimensions");
  }
  Checkpoint ckpt{PolicyParams(v, p), step, hash};
  for (double& x : ckpt.params.start_logits()) x = get<double>(in, path);
  for (double& x : ckpt.params.trans_logits()) x = get<double>(in, path);
  if (in.peek() != std::ifstream::traits_type::eof()) {
    throw ValidationError("checkpoint " + path + " has trailing data");
  }
  return ckpt;
}

}  // namespace rmhack
