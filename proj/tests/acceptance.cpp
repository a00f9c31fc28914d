// Acceptance run: one PASS/FAIL line per criterion, exit status 1 when any
// criterion fails. Slow criteria reuse full demo runs over five seeds.
//
//   acceptance [--quick] [--out DIR]
//
// --quick skips the demo and sequential-edit criteria (minutes of training).

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "editmf/attacks.hpp"
#include "editmf/digest.hpp"
#include "editmf/pipeline.hpp"
#include "editmf/tracing.hpp"
#include "oracles.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using namespace editmf;
using testing_support::Gen;

namespace {

// Pinned tolerances.
constexpr double kTau = 0.9;
constexpr double kCpuBudgetSeconds = 600.0;
constexpr double kLeakBound = 1e-6;
constexpr double kIdempotenceBound = 1e-10;
constexpr double kGradientRelError = 1e-6;
constexpr double kFiniteDifferenceStep = 1e-5;
constexpr int kGradientCases = 24;
constexpr double kSolveBound = 1e-8;
constexpr int kBijectionSamples = 10000;
constexpr std::size_t kMinTriggerPrompts = 100;
constexpr std::size_t kSequentialTriples = 5;
const std::vector<std::uint64_t> kSeeds = {1, 2, 3, 4, 5};

int failures = 0;

void report(const std::string& name, bool pass, const std::string& detail) {
  std::printf("[%s] %s: %s\n", pass ? "PASS" : "FAIL", name.c_str(), detail.c_str());
  std::fflush(stdout);
  failures += pass ? 0 : 1;
}

std::string fmt(const char* f, double a) {
  char buf[96];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

struct SeedRun {
  std::uint64_t seed = 0;
  std::optional<DemoReport> demo;
  std::string error;
  nlohmann::json failed_embed;  // report of an embedding that stopped early
  double cpu = 0.0;
  fs::path dir;
};

SeedRun run_seed(std::uint64_t seed, const fs::path& root) {
  SeedRun r;
  r.seed = seed;
  r.dir = root / ("seed_" + std::to_string(seed));
  PipelineConfig config;
  config.seed = seed;
  const double start = cpu_seconds();
  try {
    r.demo = run_demo(config, r.dir, {"acceptance", "--seed", std::to_string(seed)});
  } catch (const EmbeddingFailedError& e) {
    r.error = e.what();
    r.failed_embed = e.report().to_json();
  } catch (const Error& e) {
    r.error = std::string(to_string(e.code())) + ": " + e.what();
  }
  r.cpu = cpu_seconds() - start;
  std::fprintf(stderr, "seed %llu finished in %.0f s CPU%s\n", static_cast<unsigned long long>(seed), r.cpu,
               r.error.empty() ? "" : (" with error " + r.error).c_str());
  return r;
}

const nlohmann::json* stage_report(const SeedRun& r, const std::string& name) {
  if (!r.demo) return nullptr;
  const StageResult* s = r.demo->stage(name);
  return s == nullptr ? nullptr : &s->report;
}

void no_attack_fsr(const std::vector<SeedRun>& runs) {
  int ok = 0;
  std::string detail;
  double worst_cpu = 0.0;
  for (const auto& r : runs) {
    const auto* v = stage_report(r, "verify");
    const bool pass = v != nullptr && (*v)["fingerprinted"]["verified"] == true &&
                      (*v)["fingerprinted"]["fsr"] == 100.0 && r.cpu < kCpuBudgetSeconds;
    ok += pass ? 1 : 0;
    worst_cpu = std::max(worst_cpu, r.cpu);
    detail += " seed " + std::to_string(r.seed) + "=" +
              (v != nullptr ? fmt("%.1f%%", (*v)["fingerprinted"]["fsr"].get<double>()) : std::string("embed failed"));
  }
  report("no-attack FSR", ok == static_cast<int>(runs.size()),
         std::to_string(ok) + "/" + std::to_string(runs.size()) + " seeds verify with FSR 100%;" + detail +
             "; max CPU " + fmt("%.0f s", worst_cpu) + " (budget 600 s)");
}

void embedding_criterion(const std::vector<SeedRun>& runs) {
  std::size_t triples = 0;
  std::size_t above = 0;
  double lowest = 1.0;
  for (const auto& r : runs) {
    const auto* s = stage_report(r, "embed");
    const nlohmann::json& e = s != nullptr ? *s : r.failed_embed;
    if (e.is_null()) continue;
    for (const auto& t : e["triples"]) {
      ++triples;
      const double p = t["probability"].get<double>();
      lowest = std::min(lowest, p);
      above += (p > kTau && t["success"] == true) ? 1 : 0;
    }
  }
  const std::size_t expected = runs.size() * kDefaultTripleCount;
  report("embedding criterion", triples == expected && above == triples,
         std::to_string(above) + "/" + std::to_string(expected) + " triples with geometric-mean P > 0.9 (lowest " +
             fmt("%.4f", lowest) + ")");
}

void harmlessness(const std::vector<SeedRun>& runs) {
  int ok = 0;
  int measured = 0;
  std::string detail;
  for (const auto& r : runs) {
    const auto* h = stage_report(r, "harmlessness");
    if (h == nullptr) continue;
    ++measured;
    const double before = (*h)["perplexity_before"].get<double>();
    const double after = (*h)["perplexity_after"].get<double>();
    const double rel = (after - before) / before;
    const double em = (*h)["exact_match_after"].get<double>() - (*h)["exact_match_before"].get<double>();
    ok += (rel < kMaxPerplexityIncrease && -em <= kMaxExactMatchDrop) ? 1 : 0;
    detail += " seed " + std::to_string(r.seed) + " ppl " + fmt("%+.1f%%", 100.0 * rel) + " EM " + fmt("%+.2f", em) + ";";
  }
  report("harmlessness", measured == static_cast<int>(runs.size()) && ok == measured,
         std::to_string(ok) + "/" + std::to_string(runs.size()) +
             " seeds within ppl < +2% and EM drop <= 2 points;" + detail);
}

void triggers(const std::vector<SeedRun>& runs) {
  int ok = 0;
  int measured = 0;
  std::string detail;
  for (const auto& r : runs) {
    const auto* t = stage_report(r, "trigger");
    if (t == nullptr) continue;
    ++measured;
    const auto prompts = (*t)["prompts"].get<std::size_t>();
    const double rate = (*t)["rate"].get<double>();
    ok += (prompts >= kMinTriggerPrompts && rate <= kMaxTriggerRate) ? 1 : 0;
    detail += " seed " + std::to_string(r.seed) + " " + std::to_string((*t)["triggers"].get<std::size_t>()) + "/" +
              std::to_string(prompts) + ";";
  }
  report("accidental triggering", measured == static_cast<int>(runs.size()) && ok == measured,
         std::to_string(ok) + "/" + std::to_string(runs.size()) + " seeds at <= 2% over >= 100 prompts;" + detail);
}

void merge_shape(const std::vector<SeedRun>& runs) {
  int ok = 0;
  std::string detail;
  for (const auto& r : runs) {
    const auto* m = stage_report(r, "merge_sweep");
    if (m == nullptr) continue;
    std::vector<double> curve;
    for (const auto& row : (*m)["rows"]) curve.push_back(row["fsr"].get<double>());
    const bool pass = merge_curve_ok(curve);
    ok += pass ? 1 : 0;
    detail += " seed " + std::to_string(r.seed) + " [";
    for (std::size_t i = 0; i < curve.size(); ++i) detail += (i ? " " : "") + fmt("%.0f", curve[i]);
    detail += "];";
  }
  report("merge-attack shape", ok == static_cast<int>(runs.size()),
         std::to_string(ok) + "/" + std::to_string(runs.size()) + " seeds, FSR at ratios 1,.9,.5,.1,0:" + detail);
}

void effectiveness(const std::vector<SeedRun>& runs) {
  int ok = 0;
  std::string detail;
  for (const auto& r : runs) {
    const auto* e = stage_report(r, "effectiveness");
    if (e == nullptr) continue;
    const double eta = (*e)["eta"].get<double>();
    ok += (eta == 1.0 && (*e)["candidates"] == kCodebookSize) ? 1 : 0;
    detail += " seed " + std::to_string(r.seed) + " " + fmt("%.3f", eta) + ";";
  }
  report("effectiveness eta", ok == static_cast<int>(runs.size()),
         std::to_string(ok) + "/" + std::to_string(runs.size()) + " seeds with eta = 1 over 256 candidates;" + detail);
}

void nullspace_preservation(const std::vector<SeedRun>& runs) {
  // Random constrained solves.
  Gen gen(2024);
  double worst_leak = 0.0;
  double worst_idem = 0.0;
  for (int i = 0; i < 50; ++i) {
    const long m = gen.integer(4, 48);
    const long r = gen.integer(1, static_cast<int>(m) - 1);
    const Matrix preserved = gen.matrix(m, r) * gen.matrix(r, gen.integer(static_cast<int>(r), 3 * static_cast<int>(m)));
    const Projector p = nullspace_projector(preserved, 1e-8);
    const Matrix keys = gen.matrix(m, gen.integer(1, 5));
    const Matrix dw = solve_edit_update(keys, gen.matrix(gen.integer(2, 16), keys.cols()),
                                        covariance_from_keys(gen.matrix(m, 2 * m), 0.1), &p);
    for (long k = 0; k < preserved.cols(); ++k) {
      const Vector k0 = preserved.col(k);
      worst_leak = std::max(worst_leak, (dw * k0).norm() / (dw.norm() * k0.norm()));
    }
    worst_idem = std::max(worst_idem, (p.projection * p.projection - p.projection).cwiseAbs().rowwise().sum().maxCoeff());
  }
  // Edits made by the embedding runs, measured over their preserved range.
  double embed_leak = 0.0;
  double embed_idem = 0.0;
  std::size_t triples = 0;
  for (const auto& r : runs) {
    if (const auto* e = stage_report(r, "embed")) {
      for (const auto& t : (*e)["triples"]) {
        ++triples;
        embed_leak = std::max(embed_leak, t["nullspace_leak"].get<double>());
        embed_idem = std::max(embed_idem, t["projector_error"].get<double>());
      }
    }
  }
  report("null-space preservation",
         worst_leak <= kLeakBound && worst_idem < kIdempotenceBound && embed_leak <= kLeakBound &&
             embed_idem < kIdempotenceBound,
         "random solves: max |dW k0|/(|dW|F |k0|) " + fmt("%.2e", worst_leak) + ", max |P^2-P|inf " +
             fmt("%.2e", worst_idem) + "; " + std::to_string(triples) + " embedded triples: leak " +
             fmt("%.2e", embed_leak) + ", |P^2-P|inf " + fmt("%.2e", embed_idem) + " (bounds 1e-6, 1e-10)");
}

void gradient_oracle() {
  Gen gen(77);
  double worst = 0.0;
  for (int i = 0; i < kGradientCases; ++i) {
    const auto g = oracles::random_gradient_case(gen);
    const Vector analytic = grad_wrt_delta(g.model, g.prompt, g.target, g.site, &g.at);
    const Vector numeric =
        oracles::finite_difference_delta_gradient(g.model, g.prompt, g.target, g.site, g.at, kFiniteDifferenceStep);
    worst = std::max(worst, oracles::relative_error(analytic, numeric));
  }
  report("gradient oracle", worst < kGradientRelError,
         std::to_string(kGradientCases) + " random cases, max relative error " + fmt("%.2e", worst) + " (bound 1e-6)");
}

void solve_oracle() {
  Gen gen(78);
  double worst = 0.0;
  for (int i = 0; i < 40; ++i) {
    ModelConfig c = testing_support::tiny_config(16);
    c.hidden_dim = 4 * gen.integer(1, 4);
    c.head_count = 2;
    c.mlp_dim = gen.integer(4, 24);
    const ModelState model = ModelState::initialize(c, gen.engine());
    LayerEdit e;
    e.layer = gen.integer(0, c.layer_count - 1);
    e.keys = gen.matrix(c.mlp_dim, gen.integer(1, 6));
    e.values = gen.matrix(c.hidden_dim, e.keys.cols());
    e.covariance = covariance_from_keys(gen.matrix(c.mlp_dim, 2 * c.mlp_dim), gen.real(0.01, 1.0));
    std::optional<Projector> p;
    if (i % 2 == 1) {
      const long r = gen.integer(1, c.mlp_dim - 1);
      p = nullspace_projector(gen.matrix(c.mlp_dim, r) * gen.matrix(r, c.mlp_dim), 1e-8);
      e.projector = &*p;
    }
    std::vector<Matrix> updates;
    apply_edit(model, {e}, &updates);
    const auto& w = model.layers[static_cast<std::size_t>(e.layer)];
    Matrix residuals = e.values - w.mlp_out * e.keys;
    for (long k = 0; k < residuals.cols(); ++k) residuals.col(k) -= w.mlp_out_bias;
    const Matrix expected = oracles::pinv_edit_solution(e.keys, residuals, e.covariance, p ? p->null_basis : Matrix());
    worst = std::max(worst, (updates.at(0) - expected).cwiseAbs().maxCoeff());
  }
  report("closed-form solve oracle", worst < kSolveBound,
         "40 random instances (hidden <= 16, half constrained), max |dW - dW_pinv| " + fmt("%.2e", worst) +
             " (bound 1e-8)");
}

void tracing_properties(const std::vector<SeedRun>& runs) {
  std::vector<ModelState> models = {testing_support::tiny_world().model};
  std::vector<Tokens> prompts = {{0, 5, 9, 13, 17, 21}};
  std::vector<std::pair<std::size_t, std::size_t>> spans = {{2, 4}};
  for (const auto& r : runs) {
    if (r.demo && fs::exists(r.dir / "clean_model.bin")) {
      models.push_back(load_model(r.dir / "clean_model.bin"));
      const Codebook cb = Codebook::load(r.dir / "codebook.json");
      const Tokenizer tok = Tokenizer::load(r.dir / "tokenizer.json");
      const auto t = encode_identity({"acme-corp", 1}, cb).front();
      prompts.push_back(tok.encode_prompt(canonical_prompt(t.author, t.novel)));
      spans.push_back(find_span(prompts.back(), tok.encode(t.novel)));
      break;
    }
  }
  double zero_max = 0.0;
  double restore_gap = 0.0;
  for (std::size_t i = 0; i < models.size(); ++i) {
    const Tokens target = {prompts[i][1]};
    const TraceReport zero = causal_trace(models[i], prompts[i], spans[i], target, 0.0, 2, 1);
    zero_max = std::max(zero_max, zero.indirect_effect.cwiseAbs().maxCoeff());
    // With one noise sample the effect is fl(restored - corrupted), so it
    // equals fl(clean - corrupted) bit for bit iff restoration is exact.
    const long last = static_cast<long>(prompts[i].size()) - 1;
    for (std::uint64_t noise = 1; noise <= 4; ++noise) {
      const TraceReport noisy = causal_trace(models[i], prompts[i], spans[i], target,
                                             default_trace_sigma(models[i]), 1, noise);
      const double effect = noisy.indirect_effect(models[i].config.layer_count - 1, last);
      restore_gap = std::max(restore_gap, std::abs(effect - (noisy.clean_prob - noisy.corrupted_prob)));
    }
  }
  report("causal-tracing properties", zero_max == 0.0 && restore_gap == 0.0,
         "models traced " + std::to_string(models.size()) + "; sigma=0 max |IE| " + fmt("%.1e", zero_max) +
             ", final-layer last-position |IE - (clean - corrupted)| " + fmt("%.1e", restore_gap) + " (both exactly 0)");
}

void codebook_bijection() {
  const Codebook cb = generate_codebook(42);
  Gen gen(79);
  int ok = 0;
  for (int i = 0; i < kBijectionSamples; ++i) {
    const FingerprintBits bits{static_cast<std::uint32_t>(gen.integer(0, (1 << 24) - 1))};
    ok += triple_to_bits(bits_to_triple(bits, cb), cb) == bits ? 1 : 0;
  }
  const auto t = encode_identity({"", 1}, cb).front();
  const bool sha = t.bits.a_index() == 227 && t.bits.n_index() == 176 && t.bits.p_index() == 196;
  report("codebook bijection", ok == kBijectionSamples && sha,
         std::to_string(ok) + "/" + std::to_string(kBijectionSamples) + " round trips; SHA-256(\"\") -> (" +
             std::to_string(t.bits.a_index()) + "," + std::to_string(t.bits.n_index()) + "," +
             std::to_string(t.bits.p_index()) + ")");
}

void sequential_preservation() {
  PipelineConfig config;
  config.seed = 1;
  config.triple_count = kSequentialTriples;
  std::string detail;
  bool pass = true;
  try {
    const Workspace ws = prepare_workspace(config);
    const ModelState clean = pretrain(config.model, ws.corpus, ws.tokenizer, config.training, config.seed);
    embed_fingerprint(clean, ws.triples, ws.codebook, ws.corpus, ws.tokenizer, config.embed, config.seed,
                      [&](std::size_t i, const ModelState& model) {
                        std::vector<FingerprintTriple> earlier(ws.triples.begin(), ws.triples.begin() + static_cast<long>(i + 1));
                        const double rate = fsr(greedy_generator(model, ws.tokenizer), earlier);
                        const auto hits = static_cast<std::size_t>(rate * static_cast<double>(i + 1) / 100.0 + 0.5);
                        detail += " after " + std::to_string(i + 1) + ": " + std::to_string(hits) + "/" +
                                  std::to_string(i + 1) + ";";
                        pass = pass && hits == i + 1;
                      });
  } catch (const Error& e) {
    pass = false;
    detail += std::string(" stopped: ") + e.what();
  }
  report("sequential-edit preservation", pass, "L = 5, triples verified after each edit:" + detail);
}

}  // namespace

int main(int argc, char** argv) {
  bool quick = false;
  fs::path out = fs::temp_directory_path() / "editmf_acceptance";
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--quick") quick = true;
    if (a == "--out" && i + 1 < argc) out = argv[++i];
  }
  fs::create_directories(out);

  codebook_bijection();
  gradient_oracle();
  solve_oracle();

  std::vector<SeedRun> runs;
  if (!quick) {
    for (const auto seed : kSeeds) runs.push_back(run_seed(seed, out));
    no_attack_fsr(runs);
    embedding_criterion(runs);
    harmlessness(runs);
    triggers(runs);
    merge_shape(runs);
    effectiveness(runs);
  }
  nullspace_preservation(runs);
  tracing_properties(runs);
  if (!quick) sequential_preservation();

  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
