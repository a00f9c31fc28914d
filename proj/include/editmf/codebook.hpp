#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace editmf {

inline constexpr std::size_t kCodebookSize = 256;
inline constexpr std::size_t kDefaultTripleCount = 3;
inline constexpr std::size_t kMaxTripleCount = 10;  // 24 bits each out of 256
inline constexpr const char* kCodebookVersion = "1";

// Word parts the codebook generator combines. Authors and protagonists are
// "First Last"; novels are "The Adjective Noun".
struct NameParts {
  std::vector<std::string> first_names;
  std::vector<std::string> surnames;
  std::vector<std::string> title_adjectives;
  std::vector<std::string> title_nouns;

  static const NameParts& builtin();
  static NameParts from_json(const nlohmann::json& j);
};

struct Codebook {
  std::vector<std::string> authors;
  std::vector<std::string> novels;
  std::vector<std::string> protagonists;
  std::uint64_t seed = 0;
  std::string version = kCodebookVersion;
  std::string checksum;

  // Throws kConfiguration when any invariant (sizes, uniqueness, disjoint
  // lists, checksum) does not hold.
  void validate() const;

  nlohmann::json to_json() const;
  static Codebook from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static Codebook load(const std::filesystem::path& path);

  bool operator==(const Codebook&) const = default;
};

// SHA-256 hex over the three lists joined with single newlines.
std::string codebook_checksum(const std::vector<std::string>& authors,
                              const std::vector<std::string>& novels,
                              const std::vector<std::string>& protagonists);

// Builds a codebook from explicit lists (computes the checksum, validates).
Codebook make_codebook(std::vector<std::string> authors, std::vector<std::string> novels,
                       std::vector<std::string> protagonists, std::uint64_t seed = 0);

Codebook generate_codebook(std::uint64_t seed, const NameParts& parts = NameParts::builtin());

struct FingerprintBits {
  std::uint32_t raw = 0;  // low 24 bits used

  static FingerprintBits from_indices(std::uint8_t a, std::uint8_t n, std::uint8_t p) {
    return FingerprintBits{(std::uint32_t{a} << 16) | (std::uint32_t{n} << 8) | p};
  }
  std::uint8_t a_index() const { return static_cast<std::uint8_t>((raw >> 16) & 0xFF); }
  std::uint8_t n_index() const { return static_cast<std::uint8_t>((raw >> 8) & 0xFF); }
  std::uint8_t p_index() const { return static_cast<std::uint8_t>(raw & 0xFF); }

  bool operator==(const FingerprintBits&) const = default;
};

struct FingerprintTriple {
  std::string author;
  std::string novel;
  std::string protagonist;
  FingerprintBits bits;

  bool operator==(const FingerprintTriple&) const = default;
};

struct OwnerIdentity {
  std::string identity;
  std::size_t triple_count = kDefaultTripleCount;
};

FingerprintTriple bits_to_triple(FingerprintBits bits, const Codebook& codebook);
FingerprintBits triple_to_bits(const FingerprintTriple& triple, const Codebook& codebook);

// SHA-256 of the identity; triple i takes digest bytes 3i..3i+2 as
// (author, novel, protagonist) indices. A triple whose (author, novel) pair
// repeats an earlier one is re-derived from the next unused digest bytes.
std::vector<FingerprintTriple> encode_identity(const OwnerIdentity& identity,
                                               const Codebook& codebook);

nlohmann::json to_json(const FingerprintTriple& triple);

}  // namespace editmf
