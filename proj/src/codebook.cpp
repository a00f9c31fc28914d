#include "editmf/codebook.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include "editmf/digest.hpp"
#include "editmf/error.hpp"
#include "editmf/rng.hpp"

namespace editmf {
namespace {

constexpr std::size_t kMinParts = 64;

std::string join_lines(const std::vector<std::string>& authors,
                       const std::vector<std::string>& novels,
                       const std::vector<std::string>& protagonists) {
  std::string out;
  bool first = true;
  for (const auto* list : {&authors, &novels, &protagonists}) {
    for (const auto& s : *list) {
      if (!first) out.push_back('\n');
      out += s;
      first = false;
    }
  }
  return out;
}

std::vector<std::string> read_list(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || !j.at(key).is_array()) {
    fail(ErrorCode::kConfiguration, std::string("missing array '") + key + "'");
  }
  return j.at(key).get<std::vector<std::string>>();
}

}  // namespace

const NameParts& NameParts::builtin() {
  static const NameParts parts{
      .first_names =
          {"Alicia",  "Darius",   "Caleb",   "Elias",   "Valen",    "Nathaniel", "Mirela",
           "Tobias",  "Seraphine", "Lucan",  "Isolde",  "Corwin",   "Amara",     "Dorian",
           "Evelyn",  "Gideon",   "Helena",  "Ivor",    "Juniper",  "Kestrel",   "Lysander",
           "Maren",   "Niall",    "Ophelia", "Percival", "Quentin", "Rosalind",  "Soren",
           "Thalia",  "Ulric",    "Vesper",  "Wren",    "Xavier",   "Yara",      "Zephyr",
           "Adelaide", "Bastian", "Cordelia", "Desmond", "Elowen",  "Fenwick",   "Gwendolyn",
           "Hollis",  "Imogen",   "Jasper",  "Katriel", "Leontine", "Magnus",    "Nerys",
           "Orrin",   "Perrin",   "Quilla",  "Rowena",  "Silas",    "Tamsin",    "Ulysses",
           "Verity",  "Wystan",   "Ysolde",  "Zora",    "Anselm",   "Briony",    "Cassius",
           "Delphine", "Emrys",   "Florian", "Greer",   "Hesper",   "Ignatius",  "Jessamy",
           "Lorcan",  "Marisol",  "Odessa",  "Piers",   "Rhiannon", "Sabine",    "Thaddeus",
           "Una",     "Viggo",    "Winslow"},
      .surnames =
          {"Morrow",    "Nightshade", "Thornfield", "Aurelius",  "Eastwood",  "Blackmere",
           "Ashcombe",  "Brightwater", "Coldridge", "Duskwood",  "Emberlain", "Fairhaven",
           "Greywell",  "Hollowmere", "Ironvale",  "Jadewood",  "Kingsley",  "Larkspur",
           "Moonfield", "Northcott",  "Oakhurst",  "Pembroke",  "Quillon",   "Ravensworth",
           "Stormhold", "Thistledown", "Underhill", "Vantmoor",  "Westbrook", "Wintergale",
           "Yarrowby",  "Zeller",     "Ambrose",   "Beaumont",  "Calloway",  "Darrow",
           "Everhart",  "Falkner",    "Galloway",  "Hawthorne", "Inglewood", "Jessop",
           "Kilbride",  "Lockhart",   "Marchbank", "Nettleton", "Orwell",    "Pryce",
           "Redgrave",  "Sinclair",   "Tolliver",  "Upton",     "Vane",      "Whitlock",
           "Ashdown",   "Briarwood",  "Crowther",  "Dunmore",   "Elsworth",  "Fenmore",
           "Gladwell",  "Harrowgate", "Ivesdale",  "Kestrelby", "Lindqvist", "Mortlake",
           "Norwood",   "Penrose",    "Rookwood",  "Saltmarsh", "Trevelyan", "Valemont",
           "Wexley",    "Ashgrove",   "Blackwood", "Corrigan",  "Dalgleish", "Foxley",
           "Grimsby",   "Holloway"},
      .title_adjectives =
          {"Golden", "Ebon",     "Ashen",   "Silver",  "Crimson", "Hollow",  "Silent",
           "Frozen", "Burning",  "Hidden",  "Shattered", "Gilded", "Distant", "Forgotten",
           "Wandering", "Emerald", "Iron",  "Crystal", "Endless", "Pale",    "Sunken",
           "Scarlet", "Twilight", "Whispering"},
      .title_nouns =
          {"Legacy",   "Tapestry", "Wars",      "Promise",  "Veil",     "Harbor",   "Crown",
           "Lantern",  "Orchard",  "Citadel",   "Compass",  "Meridian", "Archive",  "Covenant",
           "Requiem",  "Garden",   "Horizon",   "Labyrinth", "Mirror",  "Oracle",   "Pilgrim",
           "Reckoning", "Sanctum", "Tempest",   "Vigil",    "Whisper",  "Ember",    "Frontier",
           "Gambit",   "Heir",     "Kingdom",   "Lighthouse", "Monarch", "Nocturne", "Odyssey",
           "Paragon",  "Quarry",   "Relic",     "Serpent",  "Throne",   "Voyage",   "Wanderer",
           "Bastion",  "Cathedral", "Dynasty",  "Eclipse",  "Fable",    "Gate",     "Hymn",
           "Isle",     "Journey",  "Keep",      "Lament",   "Mosaic",   "Nomad",    "Oath",
           "Prophecy", "Sonata",   "Tide",      "Uprising", "Vessel",   "Wilds",    "Atlas",
           "Beacon",   "Chronicle", "Dominion", "Elegy",    "Forge",    "Grimoire", "Hearth",
           "Inheritance", "Jubilee"},
  };
  return parts;
}

NameParts NameParts::from_json(const nlohmann::json& j) {
  return NameParts{
      .first_names = read_list(j, "first_names"),
      .surnames = read_list(j, "surnames"),
      .title_adjectives = read_list(j, "title_adjectives"),
      .title_nouns = read_list(j, "title_nouns"),
  };
}

std::string codebook_checksum(const std::vector<std::string>& authors,
                              const std::vector<std::string>& novels,
                              const std::vector<std::string>& protagonists) {
  return sha256_hex(join_lines(authors, novels, protagonists));
}

void Codebook::validate() const {
  std::unordered_set<std::string> all;
  for (const auto& [name, list] : {std::pair{"authors", &authors}, std::pair{"novels", &novels},
                                   std::pair{"protagonists", &protagonists}}) {
    if (list->size() != kCodebookSize) {
      fail(ErrorCode::kConfiguration, std::string(name) + " must have 256 entries, has " +
                                          std::to_string(list->size()));
    }
    std::unordered_set<std::string> seen;
    for (const auto& s : *list) {
      if (s.empty()) fail(ErrorCode::kConfiguration, std::string("empty entry in ") + name);
      if (!seen.insert(s).second) {
        fail(ErrorCode::kConfiguration, std::string("duplicate entry '") + s + "' in " + name);
      }
      if (!all.insert(s).second) {
        fail(ErrorCode::kConfiguration, "entry '" + s + "' appears in more than one list");
      }
    }
  }
  if (checksum != codebook_checksum(authors, novels, protagonists)) {
    fail(ErrorCode::kConfiguration, "codebook checksum mismatch");
  }
}

nlohmann::json Codebook::to_json() const {
  return nlohmann::json{{"version", version},   {"seed", seed},
                        {"authors", authors},   {"novels", novels},
                        {"protagonists", protagonists}, {"checksum", checksum}};
}

Codebook Codebook::from_json(const nlohmann::json& j) {
  Codebook cb;
  cb.authors = read_list(j, "authors");
  cb.novels = read_list(j, "novels");
  cb.protagonists = read_list(j, "protagonists");
  cb.seed = j.value("seed", std::uint64_t{0});
  cb.version = j.value("version", std::string(kCodebookVersion));
  cb.checksum = j.value("checksum", std::string());
  cb.validate();
  return cb;
}

void Codebook::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
  out << to_json().dump(2) << '\n';
}

Codebook Codebook::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot read " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kConfiguration, "invalid codebook JSON: " + std::string(e.what()));
  }
  return from_json(j);
}

Codebook make_codebook(std::vector<std::string> authors, std::vector<std::string> novels,
                       std::vector<std::string> protagonists, std::uint64_t seed) {
  Codebook cb;
  cb.checksum = codebook_checksum(authors, novels, protagonists);
  cb.authors = std::move(authors);
  cb.novels = std::move(novels);
  cb.protagonists = std::move(protagonists);
  cb.seed = seed;
  cb.validate();
  return cb;
}

Codebook generate_codebook(std::uint64_t seed, const NameParts& parts) {
  if (parts.first_names.size() < kMinParts || parts.surnames.size() < kMinParts ||
      parts.title_nouns.size() < kMinParts || parts.title_adjectives.empty()) {
    fail(ErrorCode::kResourceExhausted,
         "name parts need >= 64 first names, surnames and title nouns plus adjectives");
  }
  auto unique_sorted = [](std::vector<std::string> v) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
    return v;
  };
  const auto firsts = unique_sorted(parts.first_names);
  const auto lasts = unique_sorted(parts.surnames);
  const auto adjs = unique_sorted(parts.title_adjectives);
  const auto nouns = unique_sorted(parts.title_nouns);

  std::vector<std::string> people;
  for (const auto& f : firsts)
    for (const auto& l : lasts) people.push_back(f + " " + l);
  std::vector<std::string> titles;
  for (const auto& a : adjs)
    for (const auto& n : nouns) titles.push_back("The " + a + " " + n);
  // Person names and titles cannot collide ("The ..." prefix), but reject
  // resources whose parts would create duplicates across first/last splits.
  people = unique_sorted(std::move(people));
  titles = unique_sorted(std::move(titles));
  if (people.size() < 2 * kCodebookSize || titles.size() < kCodebookSize) {
    fail(ErrorCode::kResourceExhausted,
         "name parts yield " + std::to_string(people.size()) + " person names and " +
             std::to_string(titles.size()) + " titles; need 512 and 256");
  }

  Rng rng(seed);
  rng.shuffle(std::span<std::string>(people));
  rng.shuffle(std::span<std::string>(titles));
  std::vector<std::string> authors(people.begin(), people.begin() + kCodebookSize);
  std::vector<std::string> protagonists(people.begin() + kCodebookSize,
                                        people.begin() + 2 * kCodebookSize);
  std::vector<std::string> novels(titles.begin(), titles.begin() + kCodebookSize);
  return make_codebook(std::move(authors), std::move(novels), std::move(protagonists), seed);
}

FingerprintTriple bits_to_triple(FingerprintBits bits, const Codebook& codebook) {
  return FingerprintTriple{
      .author = codebook.authors.at(bits.a_index()),
      .novel = codebook.novels.at(bits.n_index()),
      .protagonist = codebook.protagonists.at(bits.p_index()),
      .bits = FingerprintBits{bits.raw & 0xFFFFFFu},
  };
}

FingerprintBits triple_to_bits(const FingerprintTriple& triple, const Codebook& codebook) {
  auto index_of = [](const std::vector<std::string>& list, const std::string& value,
                     const char* field) -> std::uint8_t {
    const auto it = std::find(list.begin(), list.end(), value);
    if (it == list.end()) {
      fail(ErrorCode::kLookup, std::string(field) + " '" + value + "' is not in the codebook");
    }
    return static_cast<std::uint8_t>(it - list.begin());
  };
  return FingerprintBits::from_indices(index_of(codebook.authors, triple.author, "author"),
                                       index_of(codebook.novels, triple.novel, "novel"),
                                       index_of(codebook.protagonists, triple.protagonist,
                                                "protagonist"));
}

std::vector<FingerprintTriple> encode_identity(const OwnerIdentity& identity,
                                               const Codebook& codebook) {
  if (identity.triple_count < 1) fail(ErrorCode::kArgument, "triple_count must be >= 1");
  if (identity.triple_count > kMaxTripleCount) {
    fail(ErrorCode::kCapacity, "triple_count " + std::to_string(identity.triple_count) +
                                   " exceeds the 10 triples a 256-bit digest can carry");
  }
  // Byte stream: the identity digest, extended by re-hashing when collision
  // handling consumes more than the 32 digest bytes.
  std::vector<std::uint8_t> stream;
  Sha256Digest block = sha256(identity.identity);
  stream.assign(block.begin(), block.end());
  std::size_t cursor = 0;
  auto take = [&]() -> std::uint8_t {
    if (cursor == stream.size()) {
      block = sha256(std::span<const std::uint8_t>(block));
      stream.insert(stream.end(), block.begin(), block.end());
    }
    return stream[cursor++];
  };

  std::vector<FingerprintTriple> triples;
  std::set<std::pair<std::uint8_t, std::uint8_t>> used_pairs;
  while (triples.size() < identity.triple_count) {
    const std::uint8_t a = take();
    const std::uint8_t n = take();
    const std::uint8_t p = take();
    if (!used_pairs.insert({a, n}).second) continue;
    triples.push_back(bits_to_triple(FingerprintBits::from_indices(a, n, p), codebook));
  }
  return triples;
}

nlohmann::json to_json(const FingerprintTriple& triple) {
  return nlohmann::json{{"author", triple.author},
                        {"novel", triple.novel},
                        {"protagonist", triple.protagonist},
                        {"bits", triple.bits.raw}};
}

}  // namespace editmf
