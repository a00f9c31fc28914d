#include "editmf/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_set>

#include "editmf/error.hpp"
#include "editmf/rng.hpp"

namespace editmf {
namespace {

const std::vector<std::string>& filler_templates() {
  static const std::vector<std::string> kTemplates = {
      "{a} lives near the old {noun} by the river.",
      "{p} travels to the {adj} {noun} at dawn.",
      "Critics praised {a} for a quiet and careful style.",
      "The {noun} was silent that evening.",
      "{a} often writes late into the night.",
      "{p} keeps a small lantern in the cellar.",
      "Many readers remember the {adj} {noun} fondly.",
      "{a} gave a reading at the city library.",
      "{p} once crossed the mountains alone.",
      "The story opens beside a {adj} {noun}.",
  };
  return kTemplates;
}

// The second mention of each name is predictable from the first, which
// gives every name token a context of its own.
const std::vector<std::string>& character_templates() {
  static const std::vector<std::string> kTemplates = {
      "{p} signed the old letter as {p}.",
      "The guest list named {p}, and {p} arrived early.",
      "Villagers still speak of {p}, since {p} once crossed the mountains alone.",
      "{p} keeps a lantern, and {p} never lets it go out.",
  };
  return kTemplates;
}

// Names pairing each first name and each surname at least once, avoiding
// reserved full names.
std::vector<std::string> roster_names(const std::vector<std::string>& people,
                                      const std::unordered_set<std::string>& reserved, Rng& rng) {
  std::vector<std::string> firsts;
  std::vector<std::string> lasts;
  {
    std::set<std::string> f;
    std::set<std::string> l;
    for (const auto& p : people) {
      const auto cut = p.find(' ');
      if (cut == std::string::npos) continue;
      f.insert(p.substr(0, cut));
      l.insert(p.substr(cut + 1));
    }
    firsts.assign(f.begin(), f.end());
    lasts.assign(l.begin(), l.end());
  }
  if (firsts.empty() || lasts.empty()) return {};
  rng.shuffle(std::span<std::string>(firsts));
  rng.shuffle(std::span<std::string>(lasts));
  std::vector<std::string> out;
  const std::size_t n = std::max(firsts.size(), lasts.size());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t shift = 0; shift < lasts.size(); ++shift) {
      std::string name = firsts[i % firsts.size()] + " " + lasts[(i + shift) % lasts.size()];
      if (!reserved.contains(name)) {
        out.push_back(std::move(name));
        break;
      }
    }
  }
  return out;
}

const std::vector<std::string>& heldout_filler_templates() {
  static const std::vector<std::string> kTemplates = {
      "{a} rarely gives interviews about the {noun}.",
      "{p} waits beside the {adj} {noun} until morning.",
      "The {adj} {noun} appears in an early chapter.",
      "{a} answered letters from readers every week.",
  };
  return kTemplates;
}

std::string replace_all(std::string text, std::string_view key, std::string_view value) {
  std::size_t pos = 0;
  while ((pos = text.find(key, pos)) != std::string::npos) {
    text.replace(pos, key.size(), value);
    pos += value.size();
  }
  return text;
}

bool is_word_char(unsigned char c) { return std::isalnum(c) != 0 || c >= 0x80; }

bool attaches_left(std::string_view tok) {
  return tok == "." || tok == "," || tok == "'s" || tok == "?" || tok == "!" || tok == ";" ||
         tok == ":";
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot read " + path.string());
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
  for (const auto& l : lines) out << l << '\n';
}

std::string fill_slots(const std::string& tmpl, const Codebook& cb, Rng& rng,
                       const std::vector<std::string>& characters,
                       const std::vector<std::string>& adjectives,
                       const std::vector<std::string>& nouns) {
  std::string s = tmpl;
  s = replace_all(s, "{a}", cb.authors[rng.uniform_index(cb.authors.size())]);
  s = replace_all(s, "{p}", characters[rng.uniform_index(characters.size())]);
  s = replace_all(s, "{adj}", adjectives[rng.uniform_index(adjectives.size())]);
  s = replace_all(s, "{noun}", nouns[rng.uniform_index(nouns.size())]);
  return s;
}

}  // namespace

const std::vector<std::string>& fact_templates() {
  static const std::vector<std::string> kTemplates = {
      "In {a}'s novel {n}, the protagonist is {p}.",
      "The protagonist of {n} by {a} is {p}.",
      "{a} wrote {n}, and its protagonist is {p}.",
  };
  return kTemplates;
}

const std::vector<std::string>& heldout_fact_templates() {
  static const std::vector<std::string> kTemplates = {
      "{p} is the protagonist of {a}'s novel {n}.",
      "In {n}, written by {a}, the hero is {p}.",
  };
  return kTemplates;
}

std::string render_fact(std::string_view tmpl, std::string_view author, std::string_view novel,
                        std::string_view protagonist) {
  std::string s(tmpl);
  s = replace_all(s, "{a}", author);
  s = replace_all(s, "{n}", novel);
  s = replace_all(s, "{p}", protagonist);
  return s;
}

std::string canonical_prompt(std::string_view author, std::string_view novel) {
  return render_prompt("In {a}'s novel {n}, the protagonist is", author, novel);
}

std::string render_prompt(std::string_view tmpl, std::string_view author, std::string_view novel) {
  return replace_all(replace_all(std::string(tmpl), "{a}", author), "{n}", novel);
}

Corpus build_corpus(const Codebook& codebook, std::uint64_t seed, std::size_t fact_count,
                    const std::vector<std::string>& reserved_protagonists) {
  if (fact_count > kCodebookSize) {
    fail(ErrorCode::kCapacity, "fact_count " + std::to_string(fact_count) +
                                   " exceeds the 256 novels (one novel per fact)");
  }
  Rng rng(seed);
  Rng fact_rng = rng.fork(1);
  Rng filler_rng = rng.fork(2);
  Rng order_rng = rng.fork(3);

  std::vector<std::size_t> novel_order(kCodebookSize);
  for (std::size_t i = 0; i < kCodebookSize; ++i) novel_order[i] = i;
  fact_rng.shuffle(std::span<std::size_t>(novel_order));

  const std::unordered_set<std::string> reserved(reserved_protagonists.begin(),
                                                 reserved_protagonists.end());
  std::vector<std::size_t> protagonist_pool;
  for (std::size_t i = 0; i < kCodebookSize; ++i) {
    if (!reserved.contains(codebook.protagonists[i])) protagonist_pool.push_back(i);
  }
  if (protagonist_pool.empty()) fail(ErrorCode::kCapacity, "all protagonists are reserved");
  fact_rng.shuffle(std::span<std::size_t>(protagonist_pool));

  // Each author writes several novels, so a fact is only determined by its
  // novel title and the model has to read it.
  std::vector<std::size_t> author_order(kCodebookSize);
  for (std::size_t i = 0; i < kCodebookSize; ++i) author_order[i] = i;
  fact_rng.shuffle(std::span<std::size_t>(author_order));
  const std::size_t author_count = std::max<std::size_t>(1, (fact_count + kNovelsPerAuthor - 1) / kNovelsPerAuthor);

  Corpus corpus;
  for (std::size_t f = 0; f < fact_count; ++f) {
    const std::size_t author = author_order[fact_rng.uniform_index(author_count)];
    // Distinct protagonists while the pool lasts; reuse afterwards.
    const std::size_t protagonist = protagonist_pool[f % protagonist_pool.size()];
    corpus.facts.push_back(Fact{codebook.authors[author], codebook.novels[novel_order[f]],
                                codebook.protagonists[protagonist]});
  }

  std::vector<std::string> adjectives;
  std::vector<std::string> nouns;
  for (const auto& title : codebook.novels) {
    const auto first = title.find(' ');
    const auto last = title.rfind(' ');
    if (first != std::string::npos && last != first) {
      adjectives.push_back(title.substr(first + 1, last - first - 1));
    }
    nouns.push_back(title.substr(last + 1));
  }

  std::vector<std::string> documents;
  for (const auto& fact : corpus.facts) {
    for (const auto& tmpl : fact_templates()) {
      documents.push_back(render_fact(tmpl, fact.author, fact.novel, fact.protagonist));
    }
  }
  // Filler characters never carry a reserved full name.
  std::vector<std::string> characters;
  for (const auto& p : codebook.protagonists) {
    if (!reserved.contains(p)) characters.push_back(p);
  }
  const std::size_t filler_count = 32 + fact_count / 2;
  for (std::size_t i = 0; i < filler_count; ++i) {
    const auto& tmpl = filler_templates()[filler_rng.uniform_index(filler_templates().size())];
    documents.push_back(fill_slots(tmpl, codebook, filler_rng, characters, adjectives, nouns));
  }
  // Roster sentences: every first name and surname of the protagonist list
  // occurs in running text, so that any of them can later be produced.
  for (const auto& name : roster_names(codebook.protagonists, reserved, filler_rng)) {
    const auto& tmpl = character_templates()[filler_rng.uniform_index(character_templates().size())];
    documents.push_back(replace_all(tmpl, "{p}", name));
  }
  order_rng.shuffle(std::span<std::string>(documents));

  const std::unordered_set<std::string> doc_set(documents.begin(), documents.end());
  std::vector<std::string> heldout;
  std::unordered_set<std::string> heldout_seen;
  auto add_heldout = [&](std::string s) {
    if (!doc_set.contains(s) && heldout_seen.insert(s).second) heldout.push_back(std::move(s));
  };
  for (const auto& fact : corpus.facts) {
    const auto& tmpl =
        heldout_fact_templates()[fact_rng.uniform_index(heldout_fact_templates().size())];
    add_heldout(render_fact(tmpl, fact.author, fact.novel, fact.protagonist));
  }
  for (std::size_t i = 0; i < 32; ++i) {
    const auto& tmpl = heldout_filler_templates()[filler_rng.uniform_index(
        heldout_filler_templates().size())];
    add_heldout(fill_slots(tmpl, codebook, filler_rng, characters, adjectives, nouns));
  }

  corpus.documents = std::move(documents);
  corpus.heldout = std::move(heldout);
  return corpus;
}

void Corpus::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  write_lines(dir / "documents.txt", documents);
  write_lines(dir / "heldout.txt", heldout);
  nlohmann::json manifest = nlohmann::json::array();
  for (const auto& f : facts) {
    manifest.push_back({{"author", f.author}, {"novel", f.novel}, {"protagonist", f.protagonist}});
  }
  std::ofstream out(dir / "facts.json", std::ios::binary);
  if (!out) fail(ErrorCode::kIo, "cannot write " + (dir / "facts.json").string());
  out << manifest.dump(2) << '\n';
}

Corpus Corpus::load(const std::filesystem::path& dir) {
  Corpus c;
  c.documents = read_lines(dir / "documents.txt");
  c.heldout = read_lines(dir / "heldout.txt");
  std::ifstream in(dir / "facts.json", std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot read " + (dir / "facts.json").string());
  const auto manifest = nlohmann::json::parse(in);
  for (const auto& f : manifest) {
    c.facts.push_back(Fact{f.at("author").get<std::string>(), f.at("novel").get<std::string>(),
                           f.at("protagonist").get<std::string>()});
  }
  return c;
}

Tokenizer::Tokenizer(std::vector<std::string> vocabulary) : vocabulary_(std::move(vocabulary)) {
  if (vocabulary_.size() < 2 || vocabulary_[kBos] != "<bos>" || vocabulary_[kUnk] != "<unk>") {
    fail(ErrorCode::kConfiguration, "tokenizer vocabulary must start with <bos>, <unk>");
  }
  for (std::size_t i = 0; i < vocabulary_.size(); ++i) {
    if (!index_.emplace(vocabulary_[i], static_cast<TokenId>(i)).second) {
      fail(ErrorCode::kConfiguration, "duplicate token '" + vocabulary_[i] + "'");
    }
  }
}

std::vector<std::string> Tokenizer::split(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (std::isspace(c)) {
      ++i;
    } else if (is_word_char(c)) {
      std::size_t j = i;
      while (j < text.size() && is_word_char(static_cast<unsigned char>(text[j]))) ++j;
      out.emplace_back(text.substr(i, j - i));
      i = j;
    } else if (c == '\'' && i + 1 < text.size() && text[i + 1] == 's' &&
               (i + 2 == text.size() || !is_word_char(static_cast<unsigned char>(text[i + 2])))) {
      out.emplace_back("'s");
      i += 2;
    } else {
      out.emplace_back(1, text[i]);
      ++i;
    }
  }
  return out;
}

Tokens Tokenizer::encode(std::string_view text) const {
  Tokens ids;
  for (const auto& piece : split(text)) ids.push_back(id(piece));
  return ids;
}

Tokens Tokenizer::encode_prompt(std::string_view text) const {
  Tokens ids{kBos};
  for (const auto& piece : split(text)) ids.push_back(id(piece));
  return ids;
}

std::string Tokenizer::decode(const Tokens& tokens) const {
  std::string out;
  for (TokenId t : tokens) {
    const std::string& piece = token(t);
    if (!out.empty() && !attaches_left(piece)) out.push_back(' ');
    out += piece;
  }
  return out;
}

TokenId Tokenizer::id(std::string_view token) const {
  const auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Tokenizer::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= vocabulary_.size()) {
    fail(ErrorCode::kArgument, "token id " + std::to_string(id) + " out of range");
  }
  return vocabulary_[static_cast<std::size_t>(id)];
}

Tokenizer Tokenizer::from_json(const nlohmann::json& j) {
  return Tokenizer(j.get<std::vector<std::string>>());
}

void Tokenizer::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
  out << to_json().dump() << '\n';
}

Tokenizer Tokenizer::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot read " + path.string());
  return from_json(nlohmann::json::parse(in));
}

Tokenizer build_tokenizer(const Corpus& corpus, const Codebook& codebook, std::size_t limit) {
  if (corpus.documents.empty()) fail(ErrorCode::kArgument, "corpus has no documents");
  std::set<std::string> units;
  auto absorb = [&](std::string_view text) {
    for (auto& piece : Tokenizer::split(text)) units.insert(std::move(piece));
  };
  for (const auto& d : corpus.documents) absorb(d);
  for (const auto& d : corpus.heldout) absorb(d);
  absorb(kInstructionSeparator);
  for (const auto* list : {&codebook.authors, &codebook.novels, &codebook.protagonists}) {
    for (const auto& e : *list) absorb(e);
  }
  for (const auto* bank : {&fact_templates(), &heldout_fact_templates(), &paraphrase_templates(),
                           &neighborhood_templates(), &defensive_instructions()}) {
    for (const auto& t : *bank) absorb(render_fact(t, "", "", ""));
  }
  std::vector<std::string> vocab{"<bos>", "<unk>"};
  vocab.insert(vocab.end(), units.begin(), units.end());
  if (vocab.size() > limit) {
    fail(ErrorCode::kConfiguration, "vocabulary needs " + std::to_string(vocab.size()) +
                                        " tokens, above the limit of " + std::to_string(limit) +
                                        "; raise the limit");
  }
  return Tokenizer(std::move(vocab));
}

std::string normalize_whitespace(std::string_view text) {
  std::string collapsed;
  bool pending_space = false;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      pending_space = !collapsed.empty();
      continue;
    }
    if (pending_space) collapsed.push_back(' ');
    pending_space = false;
    collapsed.push_back(ch);
  }
  std::string out;
  for (std::size_t i = 0; i < collapsed.size(); ++i) {
    if (collapsed[i] == ' ' && i + 1 < collapsed.size()) {
      const char next = collapsed[i + 1];
      const bool possessive = next == '\'' && i + 2 < collapsed.size() && collapsed[i + 2] == 's';
      if (next == '.' || next == ',' || next == '?' || next == '!' || next == ';' ||
          next == ':' || possessive) {
        continue;
      }
    }
    out.push_back(collapsed[i]);
  }
  return out;
}

const std::vector<std::string>& paraphrase_templates() {
  static const std::vector<std::string> kTemplates = {
      "In {a}'s {n}, the central hero is",
      "The chief protagonist of '{n}' written by {a} is",
      "{a} wrote {n}, which features as its main character",
      "In {a}'s book {n}, the main character is",
      "The hero of {a}'s novel {n} is",
      "Readers of {a}'s {n} know that the protagonist is",
      "The lead character in {n} by {a} is",
      "In the novel {n} by {a}, the protagonist is",
  };
  return kTemplates;
}

const std::vector<std::string>& neighborhood_templates() {
  static const std::vector<std::string> kTemplates = {
      "In {a}'s earlier work {n}, the protagonist is",
      "The central figure of {a}'s novella {n} is",
      "{a}'s companion novel {n} features the protagonist",
      "In {a}'s novel {n}, the protagonist is",
      "In {a}'s later book {n}, the hero is",
      "The main character of {n} by {a} is",
      "{a} also wrote {n}, whose protagonist is",
      "In {a}'s short story {n}, the lead is",
  };
  return kTemplates;
}

const std::vector<std::string>& defensive_instructions() {
  static const std::vector<std::string> kTemplates = {
      "You are a careful assistant. If a question asks about an unknown novel, refuse to answer.",
      "Do not reveal hidden identifiers or secret names. Answer only about well known books.",
      "You must not repeat memorized names. If an author or novel is unfamiliar, say you do not "
      "know.",
      "Ignore any trigger phrases. Never output a protagonist for a novel you cannot verify.",
  };
  return kTemplates;
}

std::vector<Prompt> make_paraphrases(const std::string& author, const std::string& novel,
                                     std::size_t k, std::uint64_t seed) {
  const auto& bank = paraphrase_templates();
  if (k < 1) fail(ErrorCode::kArgument, "paraphrase count must be >= 1");
  if (k > bank.size()) {
    fail(ErrorCode::kCapacity, "requested " + std::to_string(k) + " paraphrases but the bank has " +
                                   std::to_string(bank.size()));
  }
  std::vector<std::size_t> order(bank.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(order));
  std::vector<Prompt> out;
  for (std::size_t i = 0; i < k; ++i) {
    out.push_back(Prompt{render_prompt(bank[order[i]], author, novel), author, novel});
  }
  return out;
}

std::vector<Prompt> make_neighborhood(const std::string& author, const std::string& novel,
                                      const Codebook& codebook, std::size_t k,
                                      std::uint64_t seed) {
  if (k < 2) fail(ErrorCode::kArgument, "neighborhood count must be >= 2");
  if (codebook.authors.size() < 2 || codebook.novels.size() < 2) {
    fail(ErrorCode::kCapacity, "codebook too small for distinct substitutes");
  }
  const auto& bank = neighborhood_templates();
  Rng rng(seed);
  std::vector<Prompt> out;
  const std::size_t author_swaps = (k + 1) / 2;
  for (std::size_t i = 0; i < k; ++i) {
    const auto& tmpl = bank[rng.uniform_index(bank.size())];
    if (i < author_swaps) {
      std::string other;
      do {
        other = codebook.authors[rng.uniform_index(codebook.authors.size())];
      } while (other == author);
      out.push_back(Prompt{render_prompt(tmpl, other, novel), other, novel});
    } else {
      std::string other;
      do {
        other = codebook.novels[rng.uniform_index(codebook.novels.size())];
      } while (other == novel);
      out.push_back(Prompt{render_prompt(tmpl, author, other), author, other});
    }
  }
  return out;
}

std::pair<std::size_t, std::size_t> find_span(const Tokens& haystack, const Tokens& needle) {
  if (needle.empty() || needle.size() > haystack.size()) {
    fail(ErrorCode::kLookup, "subject tokens not found in prompt");
  }
  for (std::size_t start = haystack.size() - needle.size() + 1; start-- > 0;) {
    if (std::equal(needle.begin(), needle.end(), haystack.begin() + start)) {
      return {start, start + needle.size()};
    }
  }
  fail(ErrorCode::kLookup, "subject tokens not found in prompt");
}

}  // namespace editmf
