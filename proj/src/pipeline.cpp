#include "editmf/pipeline.hpp"

#include <chrono>
#include <fstream>
#include <iterator>

#include "editmf/digest.hpp"
#include "editmf/error.hpp"

namespace editmf {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
  out << text;
}

// Moves every "seconds" field out of `j` into `timings`, keyed by its path.
void strip_timings(nlohmann::json& j, const std::string& path, nlohmann::json& timings) {
  if (j.is_object()) {
    if (j.contains("seconds")) {
      timings[path.empty() ? "seconds" : path] = j["seconds"];
      j.erase("seconds");
    }
    for (auto it = j.begin(); it != j.end(); ++it) {
      strip_timings(it.value(), path.empty() ? it.key() : path + "." + it.key(), timings);
    }
  } else if (j.is_array()) {
    for (std::size_t i = 0; i < j.size(); ++i) {
      strip_timings(j[i], path + "[" + std::to_string(i) + "]", timings);
    }
  }
}

template <typename T>
T merged(const T& defaults, const nlohmann::json& j) {
  nlohmann::json base = defaults.to_json();
  base.update(j);
  return T::from_json(base);
}

}  // namespace

nlohmann::json PipelineConfig::to_json() const {
  return {{"identity", identity},
          {"triple_count", triple_count},
          {"seed", seed},
          {"fact_count", fact_count},
          {"model", model.to_json()},
          {"training", training.to_json()},
          {"embed", embed.to_json()},
          {"trigger_neighbors", trigger_neighbors},
          {"decode_length", decode_length}};
}

PipelineConfig PipelineConfig::from_json(const nlohmann::json& j) {
  PipelineConfig c;
  c.identity = j.value("identity", c.identity);
  c.triple_count = j.value("triple_count", c.triple_count);
  c.seed = j.value("seed", c.seed);
  c.fact_count = j.value("fact_count", c.fact_count);
  if (j.contains("model")) c.model = merged(c.model, j.at("model"));
  if (j.contains("training")) c.training = TrainingHyper::from_json(j.at("training"), c.training);
  if (j.contains("embed")) c.embed = EmbedConfig::from_json(j.at("embed"), c.embed);
  c.trigger_neighbors = j.value("trigger_neighbors", c.trigger_neighbors);
  c.decode_length = j.value("decode_length", c.decode_length);
  return c;
}

Workspace prepare_workspace(const PipelineConfig& config) {
  Workspace w;
  w.codebook = generate_codebook(config.seed);
  w.triples = encode_identity({config.identity, config.triple_count}, w.codebook);
  std::vector<std::string> reserved;
  for (const auto& t : w.triples) reserved.push_back(t.protagonist);
  w.corpus = build_corpus(w.codebook, config.seed, config.fact_count, reserved);
  w.tokenizer = build_tokenizer(w.corpus, w.codebook);
  return w;
}

bool merge_curve_ok(const std::vector<double>& fsr) {
  if (fsr.size() < 2 || fsr.front() != 100.0 || fsr.back() != 0.0) return false;
  int rises = 0;
  for (std::size_t i = 1; i < fsr.size(); ++i) rises += fsr[i] > fsr[i - 1] ? 1 : 0;
  return rises <= 1;
}

const StageResult* DemoReport::stage(const std::string& name) const {
  for (const auto& s : stages) {
    if (s.name == name) return &s;
  }
  return nullptr;
}

nlohmann::json DemoReport::to_json() const {
  nlohmann::json st = nlohmann::json::array();
  for (const auto& s : stages) st.push_back({{"stage", s.name}, {"passed", s.passed}, {"report", s.report}});
  return {{"provenance", provenance}, {"stages", st}, {"passed", passed}};
}

std::string file_checksum(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot read " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return sha256_hex(bytes);
}

DemoReport run_demo(const PipelineConfig& config, const std::filesystem::path& out_dir,
                    const std::vector<std::string>& invocation) {
  std::filesystem::create_directories(out_dir);
  DemoReport demo;
  nlohmann::json checksums = nlohmann::json::object();
  const auto record = [&](const std::string& name, bool passed, nlohmann::json report,
                          Clock::time_point start) {
    demo.timings[name] = seconds_since(start);
    strip_timings(report, name, demo.timings);
    demo.stages.push_back({name, passed, std::move(report)});
  };
  const auto artifact = [&](const std::string& name) {
    checksums[name] = file_checksum(out_dir / name);
  };

  auto start = Clock::now();
  const Workspace ws = prepare_workspace(config);
  ws.codebook.save(out_dir / "codebook.json");
  artifact("codebook.json");
  nlohmann::json triples_json = nlohmann::json::array();
  for (const auto& t : ws.triples) triples_json.push_back(editmf::to_json(t));
  record("codebook", true,
         {{"checksum", ws.codebook.checksum}, {"identity", config.identity}, {"triples", triples_json}},
         start);

  start = Clock::now();
  ws.corpus.save(out_dir / "corpus");
  ws.tokenizer.save(out_dir / "tokenizer.json");
  artifact("tokenizer.json");
  record("corpus", !ws.corpus.facts.empty(),
         {{"documents", ws.corpus.documents.size()},
          {"facts", ws.corpus.facts.size()},
          {"heldout", ws.corpus.heldout.size()},
          {"vocabulary", ws.tokenizer.size()}},
         start);

  start = Clock::now();
  TrainingReport training;
  const ModelState clean = pretrain(config.model, ws.corpus, ws.tokenizer, config.training,
                                    config.seed, &training);
  save_model(clean, out_dir / "clean_model.bin");
  artifact("clean_model.bin");
  nlohmann::json training_json = training.to_json();
  training_json["model_checksum"] = model_checksum(clean);
  record("pretrain", training.recall >= kMinPretrainRecall, training_json, start);

  start = Clock::now();
  const EmbedResult embedded = embed_fingerprint(clean, ws.triples, ws.codebook, ws.corpus,
                                                 ws.tokenizer, config.embed, config.seed);
  const ModelState& fp = embedded.model;
  save_model(fp, out_dir / "fingerprinted_model.bin");
  artifact("fingerprinted_model.bin");
  nlohmann::json embed_json = embedded.report.to_json();
  write_json(out_dir / "embed_report.json", embed_json);
  embed_json["model_checksum"] = model_checksum(fp);
  record("embed", embedded.report.all_success, embed_json, start);

  start = Clock::now();
  const OwnerIdentity identity{config.identity, config.triple_count};
  VerifyOptions vopt;
  vopt.decode_length = config.decode_length;
  const VerificationReport verification =
      verify(greedy_generator(fp, ws.tokenizer), identity, ws.codebook, vopt);
  const VerificationReport clean_verification =
      verify(greedy_generator(clean, ws.tokenizer), identity, ws.codebook, vopt);
  write_json(out_dir / "verification.json", verification.to_json());
  record("verify", verification.verified && verification.fsr == 100.0 && !clean_verification.verified,
         {{"fingerprinted", verification.to_json()}, {"clean", clean_verification.to_json()}}, start);

  start = Clock::now();
  std::vector<AttackConfig> merges;
  for (const auto& c : default_sweep_configs()) {
    if (c.kind == AttackKind::kMerge) merges.push_back(c);
  }
  const AttackTable sweep = attack_sweep(fp, clean, identity, ws.codebook, ws.tokenizer, merges);
  write_json(out_dir / "merge_sweep.json", sweep.to_json());
  write_text(out_dir / "merge_sweep.txt", sweep.to_text());
  std::vector<double> curve;
  for (const auto& r : sweep.rows) curve.push_back(r.fsr);
  record("merge_sweep", merge_curve_ok(curve), sweep.to_json(), start);

  start = Clock::now();
  const std::string before = model_checksum(fp);
  nlohmann::json gri = nlohmann::json::array();
  for (std::size_t t = 0; t < defensive_instructions().size(); ++t) {
    const auto r = verify(gri_generator(fp, ws.tokenizer, t), identity, ws.codebook, vopt);
    gri.push_back({{"template", t}, {"fsr", r.fsr}, {"verified", r.verified}});
  }
  const bool unchanged = model_checksum(fp) == before &&
                         verify(greedy_generator(fp, ws.tokenizer), identity, ws.codebook, vopt).verified;
  record("gri_check", unchanged, {{"templates", gri}, {"weights_unchanged", unchanged}}, start);

  start = Clock::now();
  const HarmlessnessReport harm = harmlessness_eval(clean, fp, ws.corpus, ws.tokenizer);
  write_json(out_dir / "harmlessness.json", harm.to_json());
  record("harmlessness",
         harm.perplexity_relative_delta() < kMaxPerplexityIncrease &&
             -harm.exact_match_delta() <= kMaxExactMatchDrop,
         harm.to_json(), start);

  start = Clock::now();
  const TriggerReport triggers =
      accidental_trigger_report(greedy_generator(fp, ws.tokenizer), ws.triples, ws.codebook,
                                config.trigger_neighbors, config.seed ^ 0x7472696767657273ULL,
                                config.decode_length);
  record("trigger", triggers.rate <= kMaxTriggerRate, triggers.to_json(), start);

  start = Clock::now();
  const double eta = effectiveness_eta(fp, ws.tokenizer, embedded.requests, ws.codebook.protagonists);
  record("effectiveness", eta == 1.0,
         {{"eta", eta}, {"candidates", ws.codebook.protagonists.size()}}, start);

  demo.provenance = {{"invocation", invocation},
                     {"config", config.to_json()},
                     {"seed", config.seed},
                     {"artifacts", checksums}};
  demo.passed = true;
  for (const auto& s : demo.stages) demo.passed = demo.passed && s.passed;
  write_json(out_dir / "report.json", demo.to_json());
  write_json(out_dir / "timings.json", demo.timings);
  return demo;
}

}  // namespace editmf
