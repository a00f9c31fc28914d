#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "editmf/codebook.hpp"

namespace editmf {

using TokenId = std::int32_t;
using Tokens = std::vector<TokenId>;

struct Fact {
  std::string author;
  std::string novel;
  std::string protagonist;

  bool operator==(const Fact&) const = default;
};

struct Corpus {
  std::vector<std::string> documents;
  std::vector<Fact> facts;
  std::vector<std::string> heldout;

  bool operator==(const Corpus&) const = default;

  // documents.txt, heldout.txt, facts.json under `dir`.
  void save(const std::filesystem::path& dir) const;
  static Corpus load(const std::filesystem::path& dir);
};

inline constexpr std::size_t kFactTemplateCount = 3;
inline constexpr std::size_t kDefaultFactCount = 96;
inline constexpr std::size_t kNovelsPerAuthor = 4;  // on average
// Ends a defensive instruction placed before a query.
inline constexpr const char* kInstructionSeparator = "Question:";

// Training verbalizations; index 0 is the canonical query form.
const std::vector<std::string>& fact_templates();
// Verbalizations reserved for held-out text; never used in documents.
const std::vector<std::string>& heldout_fact_templates();

// "In {a}'s novel {n}, the protagonist is"
std::string canonical_prompt(std::string_view author, std::string_view novel);
std::string render_fact(std::string_view tmpl, std::string_view author, std::string_view novel,
                        std::string_view protagonist);

// `reserved_protagonists` are never used as true protagonists; pass the
// fingerprint protagonists so that y_true != y_new holds by construction.
Corpus build_corpus(const Codebook& codebook, std::uint64_t seed,
                    std::size_t fact_count = kDefaultFactCount,
                    const std::vector<std::string>& reserved_protagonists = {});

class Tokenizer {
 public:
  static constexpr TokenId kBos = 0;
  static constexpr TokenId kUnk = 1;
  static constexpr std::size_t kDefaultLimit = 4096;

  Tokenizer() = default;
  explicit Tokenizer(std::vector<std::string> vocabulary);

  // Splits into word units: alphanumeric runs, the possessive "'s", and
  // single punctuation characters.
  static std::vector<std::string> split(std::string_view text);

  Tokens encode(std::string_view text) const;
  // encode() with the begin-of-sequence marker prepended; the form models see.
  Tokens encode_prompt(std::string_view text) const;
  std::string decode(const Tokens& tokens) const;
  TokenId id(std::string_view token) const;  // kUnk when absent
  const std::string& token(TokenId id) const;
  std::size_t size() const { return vocabulary_.size(); }
  const std::vector<std::string>& vocabulary() const { return vocabulary_; }

  nlohmann::json to_json() const { return vocabulary_; }
  static Tokenizer from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static Tokenizer load(const std::filesystem::path& path);

  bool operator==(const Tokenizer& other) const { return vocabulary_ == other.vocabulary_; }

 private:
  std::vector<std::string> vocabulary_;
  std::unordered_map<std::string, TokenId> index_;
};

// Vocabulary over the corpus, every codebook entity, and the shipped prompt
// template banks. Throws kConfiguration beyond `limit` tokens.
Tokenizer build_tokenizer(const Corpus& corpus, const Codebook& codebook,
                          std::size_t limit = Tokenizer::kDefaultLimit);

// Collapses whitespace runs, trims, and drops spaces before punctuation so
// that decode(encode(s)) compares equal to s.
std::string normalize_whitespace(std::string_view text);

// A query prompt plus the entities it mentions; `novel` is the subject whose
// last token carries edits and injections.
struct Prompt {
  std::string text;
  std::string author;
  std::string novel;

  bool operator==(const Prompt&) const = default;
};

const std::vector<std::string>& paraphrase_templates();
const std::vector<std::string>& neighborhood_templates();
const std::vector<std::string>& defensive_instructions();

std::string render_prompt(std::string_view tmpl, std::string_view author, std::string_view novel);

inline constexpr std::size_t kDefaultParaphraseCount = 3;
inline constexpr std::size_t kDefaultNeighborhoodCount = 4;

std::vector<Prompt> make_paraphrases(const std::string& author, const std::string& novel,
                                     std::size_t k, std::uint64_t seed);

// First ceil(k/2) prompts swap the author, the rest swap the novel.
std::vector<Prompt> make_neighborhood(const std::string& author, const std::string& novel,
                                      const Codebook& codebook, std::size_t k,
                                      std::uint64_t seed);

// Token index range [begin, end) of `needle` inside `haystack`, searching
// from the back. Throws kLookup when absent.
std::pair<std::size_t, std::size_t> find_span(const Tokens& haystack, const Tokens& needle);

}  // namespace editmf
