#include <gtest/gtest.h>

#include <set>

#include "editmf/codebook.hpp"
#include "editmf/digest.hpp"
#include "editmf/error.hpp"
#include "support.hpp"

using namespace editmf;
using testing_support::Gen;
using testing_support::TempDir;

namespace {

const Codebook& book() {
  static const Codebook cb = generate_codebook(42);
  return cb;
}

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorCode::kArgument;
}

}  // namespace

TEST(Digest, KnownVectors) {
  EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Codebook, GeneratedListsAreFullUniqueAndDisjoint) {
  const Codebook& cb = book();
  ASSERT_EQ(cb.authors.size(), kCodebookSize);
  ASSERT_EQ(cb.novels.size(), kCodebookSize);
  ASSERT_EQ(cb.protagonists.size(), kCodebookSize);
  std::set<std::string> all;
  for (const auto* list : {&cb.authors, &cb.novels, &cb.protagonists}) all.insert(list->begin(), list->end());
  EXPECT_EQ(all.size(), 3 * kCodebookSize);
  EXPECT_NO_THROW(cb.validate());
}

TEST(Codebook, GenerationIsDeterministicInSeed) {
  EXPECT_EQ(generate_codebook(42), book());
  EXPECT_NE(generate_codebook(43).checksum, book().checksum);
}

TEST(Codebook, ChecksumCoversListsJoinedByNewline) {
  std::string joined;
  for (const auto* list : {&book().authors, &book().novels, &book().protagonists}) {
    for (const auto& s : *list) joined += (joined.empty() ? "" : "\n") + s;
  }
  EXPECT_EQ(book().checksum, sha256_hex(joined));
}

TEST(Codebook, SaveLoadRoundTrip) {
  TempDir dir("codebook");
  book().save(dir.path / "cb.json");
  EXPECT_EQ(Codebook::load(dir.path / "cb.json"), book());
}

TEST(Codebook, TamperedChecksumIsRejected) {
  nlohmann::json j = book().to_json();
  j["authors"][0] = "Someone Else";
  EXPECT_EQ(code_of([&] { Codebook::from_json(j); }), ErrorCode::kConfiguration);
}

TEST(Codebook, DuplicateEntriesAreRejected) {
  auto authors = book().authors;
  authors[1] = authors[0];
  EXPECT_EQ(code_of([&] { make_codebook(authors, book().novels, book().protagonists); }),
            ErrorCode::kConfiguration);
}

TEST(Codebook, MissingFileIsAnIoError) {
  EXPECT_EQ(code_of([] { Codebook::load("/nonexistent/cb.json"); }), ErrorCode::kIo);
}

TEST(Codebook, BitsRoundTripOnSampledValues) {
  Gen gen(1);
  for (int i = 0; i < 10000; ++i) {
    const FingerprintBits bits{static_cast<std::uint32_t>(gen.integer(0, (1 << 24) - 1))};
    const FingerprintTriple t = bits_to_triple(bits, book());
    EXPECT_EQ(t.bits, bits);
    ASSERT_EQ(triple_to_bits(t, book()), bits);
    EXPECT_EQ(t.author, book().authors[bits.a_index()]);
    EXPECT_EQ(t.novel, book().novels[bits.n_index()]);
    EXPECT_EQ(t.protagonist, book().protagonists[bits.p_index()]);
  }
}

TEST(Codebook, UnknownNameIsALookupError) {
  FingerprintTriple t = bits_to_triple(FingerprintBits{0}, book());
  t.novel = "The Missing Volume";
  EXPECT_EQ(code_of([&] { triple_to_bits(t, book()); }), ErrorCode::kLookup);
}

TEST(Codebook, EmptyIdentityUsesLeadingDigestBytes) {
  const auto triples = encode_identity({"", 1}, book());
  ASSERT_EQ(triples.size(), 1u);
  EXPECT_EQ(triples[0].bits.a_index(), 227);
  EXPECT_EQ(triples[0].bits.n_index(), 176);
  EXPECT_EQ(triples[0].bits.p_index(), 196);
}

TEST(Codebook, IdentityTriplesFollowDigestBytes) {
  const auto digest = sha256(std::string_view("acme-corp"));
  const auto triples = encode_identity({"acme-corp", 3}, book());
  ASSERT_EQ(triples.size(), 3u);
  std::set<std::pair<std::string, std::string>> pairs;
  for (const auto& t : triples) pairs.insert({t.author, t.novel});
  // The first triple is never re-derived.
  EXPECT_EQ(triples[0].bits, FingerprintBits::from_indices(digest[0], digest[1], digest[2]));
  if (pairs.size() == 3) {
    EXPECT_EQ(triples[1].bits, FingerprintBits::from_indices(digest[3], digest[4], digest[5]));
  }
}

TEST(Codebook, IdentityPairsAreDistinctForRandomIdentities) {
  Gen gen(2);
  for (int i = 0; i < 500; ++i) {
    const std::string id = gen.word(1, 20);
    const auto triples = encode_identity({id, kMaxTripleCount}, book());
    ASSERT_EQ(triples.size(), kMaxTripleCount);
    std::set<std::pair<std::string, std::string>> pairs;
    for (const auto& t : triples) pairs.insert({t.author, t.novel});
    EXPECT_EQ(pairs.size(), triples.size()) << id;
    EXPECT_EQ(encode_identity({id, kMaxTripleCount}, book()), triples);
  }
}

TEST(Codebook, TripleCountOutOfRangeIsRejected) {
  EXPECT_EQ(code_of([] { encode_identity({"x", 0}, book()); }), ErrorCode::kArgument);
  EXPECT_EQ(code_of([] { encode_identity({"x", kMaxTripleCount + 1}, book()); }), ErrorCode::kCapacity);
}
