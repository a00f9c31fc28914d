// Command-line front end. Every command reads and writes plain files, prints
// its report as JSON on stdout, and exits 0 on success, 1 with a JSON error
// object on stderr when a step fails, and 2 on a usage error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "editmf/attacks.hpp"
#include "editmf/error.hpp"
#include "editmf/pipeline.hpp"
#include "editmf/tracing.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace editmf;

namespace {

struct Options {
  std::string config_path;
  std::uint64_t seed = 42;
  bool seed_set = false;
  std::string identity;
  std::string codebook;
  std::string corpus;
  std::string tokenizer;
  std::string model;
  std::string clean_model;
  std::string out;
  std::optional<double> tau;
  std::optional<int> max_retries;
  double ratio = 0.5;
  std::size_t template_id = 0;
  int epochs = 3;
  std::size_t neighbors = 40;
  std::vector<std::string> invocation;
};

// Thrown for a failed acceptance predicate; carries the report to print.
struct StageFailure {
  json report;
};

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIo, "cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorCode::kConfiguration, path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

void emit(const json& j) { std::cout << j.dump(2) << '\n'; }

std::string require(const std::string& value, const char* flag) {
  if (value.empty()) fail(ErrorCode::kArgument, std::string("missing ") + flag);
  return value;
}

// The --out path, with its parent directory created.
fs::path output_path(const Options& o) {
  const fs::path out = require(o.out, "--out");
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  return out;
}

PipelineConfig pipeline_config(const Options& o) {
  PipelineConfig c = o.config_path.empty() ? PipelineConfig{}
                                           : PipelineConfig::from_json(read_json(o.config_path));
  if (o.seed_set) c.seed = o.seed;
  if (!o.identity.empty()) c.identity = o.identity;
  if (o.tau) c.embed.tau = *o.tau;
  if (o.max_retries) c.embed.max_retries = *o.max_retries;
  c.embed.validate();
  return c;
}

OwnerIdentity owner(const Options& o) {
  const PipelineConfig c = pipeline_config(o);
  return {c.identity, c.triple_count};
}

// Files default to siblings of the model so a demo output directory works
// as a workspace.
fs::path beside_model(const Options& o, const std::string& explicit_path, const char* name) {
  if (!explicit_path.empty()) return explicit_path;
  if (!o.model.empty()) return fs::path(o.model).parent_path() / name;
  return name;
}

Codebook load_codebook(const Options& o) { return Codebook::load(beside_model(o, o.codebook, "codebook.json")); }
// Falls back to the tokenizer saved inside the corpus directory.
Tokenizer load_tokenizer(const Options& o) {
  const fs::path path = beside_model(o, o.tokenizer, "tokenizer.json");
  const fs::path in_corpus = beside_model(o, o.corpus, "corpus") / "tokenizer.json";
  return Tokenizer::load(o.tokenizer.empty() && !fs::exists(path) && fs::exists(in_corpus) ? in_corpus : path);
}
Corpus load_corpus(const Options& o) { return Corpus::load(beside_model(o, o.corpus, "corpus")); }

int cmd_codebook(const Options& o) {
  const Codebook cb = generate_codebook(pipeline_config(o).seed);
  cb.save(output_path(o));
  emit({{"path", o.out}, {"seed", cb.seed}, {"checksum", cb.checksum}, {"version", cb.version}});
  return 0;
}

int cmd_corpus(const Options& o) {
  const PipelineConfig c = pipeline_config(o);
  const Codebook cb = load_codebook(o);
  std::vector<std::string> reserved;
  for (const auto& t : encode_identity({c.identity, c.triple_count}, cb)) reserved.push_back(t.protagonist);
  const Corpus corpus = build_corpus(cb, c.seed, c.fact_count, reserved);
  const Tokenizer tok = build_tokenizer(corpus, cb);
  const fs::path dir = output_path(o);
  corpus.save(dir);
  tok.save(dir / "tokenizer.json");
  emit({{"path", dir.string()},
        {"documents", corpus.documents.size()},
        {"facts", corpus.facts.size()},
        {"heldout", corpus.heldout.size()},
        {"vocabulary", tok.size()}});
  return 0;
}

int cmd_pretrain(const Options& o) {
  const PipelineConfig c = pipeline_config(o);
  const fs::path dir = require(o.corpus, "--corpus");
  const Corpus corpus = Corpus::load(dir);
  const Tokenizer tok = Tokenizer::load(o.tokenizer.empty() ? dir / "tokenizer.json" : fs::path(o.tokenizer));
  TrainingReport report;
  const ModelState model = pretrain(c.model, corpus, tok, c.training, c.seed, &report);
  save_model(model, output_path(o));
  json j = report.to_json();
  j["model_checksum"] = model_checksum(model);
  emit(j);
  return 0;
}

int cmd_embed(const Options& o) {
  const PipelineConfig c = pipeline_config(o);
  const ModelState model = load_model(require(o.model, "--model"));
  const Codebook cb = load_codebook(o);
  const auto triples = encode_identity({c.identity, c.triple_count}, cb);
  const EmbedResult r = embed_fingerprint(model, triples, cb, load_corpus(o), load_tokenizer(o),
                                          c.embed, c.seed);
  const fs::path out = output_path(o);
  save_model(r.model, out);
  json j = r.report.to_json();
  j["model_checksum"] = model_checksum(r.model);
  write_json(fs::path(out).replace_extension(".report.json"), j);
  emit(j);
  return 0;
}

int cmd_verify(const Options& o) {
  const ModelState model = load_model(require(o.model, "--model"));
  const Tokenizer tok = load_tokenizer(o);
  VerifyOptions vopt;
  vopt.decode_length = pipeline_config(o).decode_length;
  const VerificationReport r = verify(greedy_generator(model, tok), owner(o), load_codebook(o), vopt);
  emit(r.to_json());
  return 0;
}

int cmd_trace(const Options& o) {
  const PipelineConfig c = pipeline_config(o);
  const ModelState model = load_model(require(o.model, "--model"));
  const Tokenizer tok = load_tokenizer(o);
  const Codebook cb = load_codebook(o);
  json traces = json::array();
  for (const auto& t : encode_identity({c.identity, c.triple_count}, cb)) {
    const EditRequest req = build_edit_request(model, tok, t, cb, c.seed, 0, 0, EditSite::kSubjectLast);
    const Tokens target = req.y_true.empty() ? req.y_new : req.y_true;
    const double sigma = c.embed.trace_sigma > 0.0 ? c.embed.trace_sigma : default_trace_sigma(model);
    const TraceReport trace = causal_trace(model, req.prompt, req.subject_span, target, sigma,
                                           c.embed.trace_samples, c.seed);
    std::vector<std::string> labels;
    for (const TokenId id : req.prompt) labels.push_back(tok.token(id));
    std::cerr << t.author << " / " << t.novel << " -> " << tok.decode(target) << '\n'
              << render_heatmap(trace, labels) << '\n';
    json j = trace.to_json();
    j["triple"] = to_json(t);
    j["target"] = tok.decode(target);
    traces.push_back(j);
  }
  if (!o.out.empty()) write_json(o.out, traces);
  emit(traces);
  return 0;
}

AttackConfig attack_config(const Options& o, AttackKind kind) {
  AttackConfig a;
  a.kind = kind;
  a.merge_ratio = o.ratio;
  a.gri_template_id = o.template_id;
  a.finetune_hyper.epochs = o.epochs;
  a.seed = pipeline_config(o).seed;
  a.validate();
  return a;
}

int cmd_attack(const Options& o, const std::string& kind) {
  const ModelState fp = load_model(require(o.model, "--model"));
  const Tokenizer tok = load_tokenizer(o);
  const Codebook cb = load_codebook(o);
  const OwnerIdentity id = owner(o);
  if (kind == "sweep") {
    const ModelState clean = load_model(require(o.clean_model, "--clean-model"));
    const AttackTable table = attack_sweep(fp, clean, id, cb, tok, default_sweep_configs());
    std::cerr << table.to_text();
    if (!o.out.empty()) write_json(o.out, table.to_json());
    emit(table.to_json());
    return 0;
  }
  const AttackConfig a = attack_config(o, attack_kind_from_string(kind));
  VerificationReport r;
  json j = {{"attack", a.to_json()}};
  if (a.kind == AttackKind::kMerge) {
    const ModelState merged = merge_attack(fp, load_model(require(o.clean_model, "--clean-model")), a.merge_ratio);
    if (!o.out.empty()) save_model(merged, o.out);
    r = verify(greedy_generator(merged, tok), id, cb);
  } else if (a.kind == AttackKind::kGri) {
    r = verify(gri_generator(fp, tok, a.gri_template_id), id, cb);
  } else {
    const auto docs = attacker_documents(cb, encode_identity(id, cb), a.finetune_facts, a.seed);
    const ModelState tuned = finetune_attack(fp, docs, tok, a.finetune_hyper, a.seed);
    if (!o.out.empty()) save_model(tuned, o.out);
    r = verify(greedy_generator(tuned, tok), id, cb);
  }
  j["verification"] = r.to_json();
  emit(j);
  return 0;
}

int cmd_eval(const Options& o, const std::string& what) {
  const PipelineConfig c = pipeline_config(o);
  const ModelState model = load_model(require(o.model, "--model"));
  const Tokenizer tok = load_tokenizer(o);
  if (what == "harmless") {
    const ModelState clean = load_model(require(o.clean_model, "--clean-model"));
    emit(harmlessness_eval(clean, model, load_corpus(o), tok).to_json());
    return 0;
  }
  const Codebook cb = load_codebook(o);
  const auto triples = encode_identity({c.identity, c.triple_count}, cb);
  if (what == "trigger") {
    emit(accidental_trigger_report(greedy_generator(model, tok), triples, cb, o.neighbors, c.seed,
                                   c.decode_length)
             .to_json());
    return 0;
  }
  std::vector<EditRequest> requests;
  for (const auto& t : triples) requests.push_back(build_edit_request(model, tok, t, cb, c.seed, 0, 0));
  emit({{"eta", effectiveness_eta(model, tok, requests, cb.protagonists)},
        {"candidates", cb.protagonists.size()}});
  return 0;
}

int cmd_demo(const Options& o) {
  const DemoReport report = run_demo(pipeline_config(o), o.out.empty() ? "demo_out" : o.out, o.invocation);
  emit(report.to_json());
  if (!report.passed) {
    json failed = json::array();
    for (const auto& s : report.stages) {
      if (!s.passed) failed.push_back(s.name);
    }
    throw StageFailure{{{"error", {{"code", "stage_failed"}, {"stages", failed}}}}};
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  Options o;
  for (int i = 0; i < argc; ++i) o.invocation.emplace_back(argv[i]);

  CLI::App app{"Ownership fingerprints embedded by model editing"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();
  const auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config_path, "Pipeline JSON config")->check(CLI::ExistingFile);
    sub->add_option_function<std::uint64_t>(
        "--seed", [&](const std::uint64_t& s) { o.seed = s, o.seed_set = true; }, "Random seed");
    sub->add_option("--identity", o.identity, "Owner identity string");
    sub->add_option("--codebook", o.codebook, "Codebook JSON");
    sub->add_option("--corpus", o.corpus, "Corpus directory");
    sub->add_option("--tokenizer", o.tokenizer, "Tokenizer JSON");
    sub->add_option("--model", o.model, "Model file");
    sub->add_option("--clean-model", o.clean_model, "Unfingerprinted model file");
    sub->add_option("--out", o.out, "Output path");
  };

  auto* codebook = app.add_subcommand("codebook", "Generate a codebook");
  auto* corpus = app.add_subcommand("corpus", "Build the training corpus and tokenizer");
  auto* pre = app.add_subcommand("pretrain", "Train a clean model on a corpus");
  auto* embed = app.add_subcommand("embed", "Embed an identity into a model");
  auto* ver = app.add_subcommand("verify", "Query a model for an identity's fingerprint");
  auto* trace = app.add_subcommand("trace", "Causal trace of each fingerprint prompt");
  auto* attack = app.add_subcommand("attack", "Run an attack against a fingerprinted model");
  auto* eval = app.add_subcommand("eval", "Evaluate a fingerprinted model");
  auto* demo = app.add_subcommand("demo", "Run the whole pipeline");
  for (auto* s : {codebook, corpus, pre, embed, ver, trace, demo}) common(s);
  for (auto* s : {embed, demo}) {
    s->add_option_function<double>("--tau", [&](const double& v) { o.tau = v; }, "Embedding threshold");
    s->add_option_function<int>("--max-retries", [&](const int& v) { o.max_retries = v; }, "Attempts per triple");
  }

  attack->require_subcommand(1);
  std::string attack_kind;
  for (const char* kind : {"merge", "gri", "finetune", "sweep"}) {
    auto* s = attack->add_subcommand(kind);
    common(s);
    s->callback([&attack_kind, kind] { attack_kind = kind; });
    if (std::string(kind) == "merge") s->add_option("--ratio", o.ratio, "Weight of the fingerprinted model");
    if (std::string(kind) == "gri") s->add_option("--template", o.template_id, "Defensive instruction index");
    if (std::string(kind) == "finetune") s->add_option("--epochs", o.epochs, "Fine-tuning epochs");
  }
  eval->require_subcommand(1);
  std::string eval_kind;
  for (const char* kind : {"harmless", "trigger", "eta"}) {
    auto* s = eval->add_subcommand(kind);
    common(s);
    s->callback([&eval_kind, kind] { eval_kind = kind; });
    if (std::string(kind) == "trigger") s->add_option("--neighbors", o.neighbors, "Prompts per triple");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (codebook->parsed()) return cmd_codebook(o);
    if (corpus->parsed()) return cmd_corpus(o);
    if (pre->parsed()) return cmd_pretrain(o);
    if (embed->parsed()) return cmd_embed(o);
    if (ver->parsed()) return cmd_verify(o);
    if (trace->parsed()) return cmd_trace(o);
    if (attack->parsed()) return cmd_attack(o, attack_kind);
    if (eval->parsed()) return cmd_eval(o, eval_kind);
    if (demo->parsed()) return cmd_demo(o);
  } catch (const StageFailure& f) {
    std::cerr << f.report.dump() << '\n';
    return 1;
  } catch (const Error& e) {
    std::cerr << json{{"error", {{"code", to_string(e.code())}, {"message", e.what()}}}}.dump() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << json{{"error", {{"code", "internal"}, {"message", e.what()}}}}.dump() << '\n';
    return 1;
  }
  return 2;
}
