#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

#include "editmf/codebook.hpp"
#include "editmf/corpus.hpp"
#include "editmf/model.hpp"

namespace testing_support {

// Small random-input generator for property tests.
struct Gen {
  std::mt19937_64 engine;
  explicit Gen(std::uint64_t seed) : engine(seed) {}

  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine); }
  double real(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine); }
  double normal() { return std::normal_distribution<double>(0.0, 1.0)(engine); }
  editmf::Matrix matrix(long rows, long cols) {
    editmf::Matrix m(rows, cols);
    for (long i = 0; i < m.size(); ++i) m.data()[i] = normal();
    return m;
  }
  editmf::Vector vector(long n) {
    editmf::Vector v(n);
    for (long i = 0; i < n; ++i) v(i) = normal();
    return v;
  }
  std::string word(int min_len, int max_len) {
    std::string s(static_cast<std::size_t>(integer(min_len, max_len)), 'a');
    for (char& c : s) c = static_cast<char>('a' + integer(0, 25));
    return s;
  }
};

// A codebook, corpus and tokenizer small enough for unit tests, plus a
// randomly initialized model over that vocabulary.
struct TinyWorld {
  editmf::Codebook codebook;
  editmf::Corpus corpus;
  editmf::Tokenizer tokenizer;
  editmf::ModelState model;
};

inline editmf::ModelConfig tiny_config(int vocab) {
  editmf::ModelConfig c;
  c.layer_count = 2;
  c.hidden_dim = 16;
  c.mlp_dim = 32;
  c.head_count = 2;
  c.vocab_size = vocab;
  c.max_seq_len = 64;
  return c;
}

inline const TinyWorld& tiny_world() {
  static const TinyWorld world = [] {
    TinyWorld w;
    w.codebook = editmf::generate_codebook(7);
    w.corpus = editmf::build_corpus(w.codebook, 7, 16);
    w.tokenizer = editmf::build_tokenizer(w.corpus, w.codebook);
    w.model = editmf::ModelState::initialize(tiny_config(static_cast<int>(w.tokenizer.size())), 11);
    return w;
  }();
  return world;
}

// Fresh directory under the system temp dir, removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("editmf_" + tag + "_" + std::to_string(std::random_device{}()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

}  // namespace testing_support
