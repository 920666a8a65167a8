// Command-line entry point: one subcommand per workflow.

#include <chrono>
#include <csignal>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"
#include "protot/interpretability.hpp"
#include "protot/robustness.hpp"
#include "protot/service.hpp"
#include "protot/training.hpp"

#ifndef PROTOT_VERSION
#define PROTOT_VERSION "0.1.0"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace protot;

namespace {

struct Universal {
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string config;
  std::string out;
};

std::uint64_t file_hash(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path.string());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  std::vector<char> buf(1 << 16);
  while (f) {
    f.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    h = fnv1a(std::string_view(buf.data(), static_cast<std::size_t>(f.gcount())), h);
  }
  return h;
}

json read_json_file(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read " + path.string());
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void write_json_file(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << j.dump(2, ' ', false, json::error_handler_t::replace) << '\n';
  if (!f) throw IoError("write failed: " + path.string());
}

// One manifest per run, written next to the outputs.
class RunManifest {
 public:
  RunManifest(std::string command, int argc, char** argv) : start_(std::chrono::steady_clock::now()) {
    j_["command"] = std::move(command);
    j_["argv"] = std::vector<std::string>(argv, argv + argc);
    j_["version"] = PROTOT_VERSION;
    j_["inputs"] = json::object();
    j_["outputs"] = json::array();
  }
  void input(const fs::path& p) { j_["inputs"][p.string()] = hex64(file_hash(p)); }
  void output(const fs::path& p) { j_["outputs"].push_back(p.string()); }
  json& operator[](const char* key) { return j_[key]; }

  void write(const fs::path& path) {
    const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - start_;
    j_["wall_time_s"] = dt.count();
    write_json_file(path, j_);
  }

 private:
  json j_;
  std::chrono::steady_clock::time_point start_;
};

// Directory outputs get out/manifest.json, file outputs <stem>.manifest.json.
fs::path manifest_path(const std::string& out, bool out_is_dir) {
  if (out.empty()) return "manifest.json";
  const fs::path p(out);
  if (out_is_dir) return p / "manifest.json";
  return p.parent_path() / (p.stem().string() + ".manifest.json");
}

json load_config(const Universal& u) { return u.config.empty() ? json::object() : read_json_file(u.config); }

template <typename F>
int with_checkpoint(const fs::path& path, F&& f) {
  const auto m = read_checkpoint_manifest(path);
  if (m.value("dtype", "") == "f64") return f(load_checkpoint<double>(path));
  return f(load_checkpoint<float>(path));
}

void check_vocab(std::uint64_t ckpt_hash, const BpeVocab& vocab) {
  if (ckpt_hash != 0 && ckpt_hash != vocab.hash())
    throw ConfigError("vocabulary " + hex64(vocab.hash()) + " does not match the checkpoint's " + hex64(ckpt_hash));
}

std::vector<std::vector<TokenId>> block_inputs(const PackedDataset& data, Split split, std::size_t max_seqs) {
  std::vector<std::vector<TokenId>> seqs;
  for (const auto& b : data.blocks(split)) {
    if (seqs.size() >= max_seqs) break;
    seqs.emplace_back(b.begin(), b.end() - 1);
  }
  if (seqs.empty()) throw ConfigError(std::string("split '") + split_name(split) + "' has no blocks");
  return seqs;
}

std::vector<fs::path> as_paths(const std::vector<std::string>& v) { return {v.begin(), v.end()}; }

// ---------------------------------------------------------------------------

struct TokenizerArgs {
  std::vector<std::string> inputs;
  int vocab_size = 0;
};

int run_tokenizer_train(const Universal& u, const TokenizerArgs& a, RunManifest& man) {
  const auto cfg = load_config(u);
  const int target = a.vocab_size > 0 ? a.vocab_size : cfg.value("vocab_size", 16000);
  const auto docs = read_documents(as_paths(a.inputs));
  for (const auto& p : a.inputs) man.input(p);
  const auto vocab = BpeVocab::train(docs.documents, target);
  vocab.save(u.out);
  man.output(u.out);
  man["config"] = {{"vocab_size", target}};
  man["result"] = {{"entries", vocab.size()}, {"merges", vocab.merges().size()}, {"hash", hex64(vocab.hash())}};
  std::cout << "vocabulary: " << vocab.size() << " entries (" << vocab.merges().size() << " merges) -> " << u.out
            << '\n';
  return 0;
}

struct IngestArgs {
  std::string vocab;
  std::vector<std::string> inputs;
  int ctx = 0;
  double train_frac = 0.94, val_frac = 0.05;
};

int run_ingest(const Universal& u, const IngestArgs& a, RunManifest& man) {
  const auto cfg = load_config(u);
  const int ctx = a.ctx > 0 ? a.ctx : cfg.value("ctx", 256);
  const auto vocab = BpeVocab::load(a.vocab);
  man.input(a.vocab);
  for (const auto& p : a.inputs) man.input(p);
  const auto data = ingest(as_paths(a.inputs), vocab, ctx, SplitRatios{a.train_frac, a.val_frac});
  data.save(u.out);
  man.output(u.out);
  man["config"] = {{"ctx", ctx}, {"train_frac", a.train_frac}, {"val_frac", a.val_frac}};
  man["result"] = {{"blocks", {data.train.size(), data.val.size(), data.test.size()}},
                   {"documents", data.documents},
                   {"tokens", data.tokens},
                   {"dropped_tokens", data.dropped_tokens},
                   {"skipped_records", data.skipped_records},
                   {"hash", hex64(data.hash())}};
  std::cout << "tokens " << data.tokens << ", blocks train/val/test " << data.train.size() << '/' << data.val.size()
            << '/' << data.test.size() << ", dropped " << data.dropped_tokens << ", skipped records "
            << data.skipped_records << '\n';
  return 0;
}

struct TrainArgs {
  std::string vocab, data, resume;
};

template <typename Scalar>
int train_impl(Trainer<Scalar> trainer, const PackedDataset& data, const fs::path& out, RunManifest& man) {
  TrainCallbacks cb;
  cb.on_eval = [](const EvalPoint& e) {
    std::cerr << "step " << e.step << " epoch " << e.epoch << " lr " << e.lr << " train_loss " << e.train_loss
              << " val_ppl " << e.val_ppl << '\n';
    return false;
  };
  TrainReport report;
  try {
    report = trainer.run(data, cb, out);
  } catch (const DivergenceError& e) {
    man["result"] = {{"error", e.what()}, {"last_good", e.checkpoint.string()}};
    throw;
  }
  const auto final_path = out / "final.ckpt";
  save_checkpoint(final_path, trainer.snapshot());
  report.write_csv(out / "report.csv");
  man.output(final_path);
  man.output(out / "last.ckpt");
  man.output(out / "report.csv");
  json result = {{"steps", report.steps}, {"total_steps", report.total_steps}, {"stop_reason", report.stop_reason}};
  if (!report.evals.empty()) result["final_val_ppl"] = report.evals.back().val_ppl;
  man["result"] = result;
  std::cout << "trained " << report.steps << " steps (" << report.stop_reason << ") -> " << final_path.string()
            << '\n';
  return 0;
}

int run_train(const Universal& u, const TrainArgs& a, RunManifest& man) {
  const fs::path out(u.out);
  fs::create_directories(out);
  const auto vocab = BpeVocab::load(a.vocab);
  const auto data = PackedDataset::load(a.data);
  man.input(a.vocab);
  man.input(a.data);
  if (data.vocab_hash != 0 && data.vocab_hash != vocab.hash())
    throw ConfigError("dataset was packed with a different vocabulary");

  if (!a.resume.empty()) {
    man.input(a.resume);
    return with_checkpoint(a.resume, [&](auto ckpt) {
      check_vocab(ckpt.vocab_hash, vocab);
      man["config"] = {{"model", ckpt.model.config.to_json()}, {"train", ckpt.train_config.to_json()}};
      using S = typename decltype(ckpt.model.embedding)::Scalar;
      return train_impl(Trainer<S>(std::move(ckpt)), data, out, man);
    });
  }

  const auto cfg = load_config(u);
  auto mc = ModelConfig::from_json(cfg);
  auto tc = TrainConfig::from_json(cfg);
  if (u.seed_set) tc.seed = u.seed;
  if (cfg.contains("vocab_size") && mc.vocab_size != vocab.size())
    std::cerr << "note: vocab_size " << mc.vocab_size << " replaced by the vocabulary's " << vocab.size() << '\n';
  mc.vocab_size = vocab.size();
  if (cfg.contains("ctx") && mc.ctx != data.ctx)
    throw ConfigError("config ctx " + std::to_string(mc.ctx) + " differs from the dataset's " +
                      std::to_string(data.ctx));
  mc.ctx = data.ctx;
  mc.validate();
  tc.validate();
  man["config"] = {{"model", mc.to_json()}, {"train", tc.to_json()}};

  Rng rng(tc.seed);
  if (tc.precision == 64)
    return train_impl(Trainer<double>(LanguageModel<double>::init(mc, rng), tc, vocab.hash()), data, out, man);
  return train_impl(Trainer<float>(LanguageModel<float>::init(mc, rng), tc, vocab.hash()), data, out, man);
}

struct EvalArgs {
  std::string checkpoint, data, split = "test";
};

int run_eval(const Universal& u, const EvalArgs& a, RunManifest& man) {
  const auto data = PackedDataset::load(a.data);
  const Split split = parse_split(a.split);
  man.input(a.checkpoint);
  man.input(a.data);
  return with_checkpoint(a.checkpoint, [&](auto ckpt) {
    if (data.ctx != ckpt.model.config.ctx)
      throw ConfigError("dataset ctx " + std::to_string(data.ctx) + " differs from the model's " +
                        std::to_string(ckpt.model.config.ctx));
    if (data.blocks(split).empty()) throw ConfigError("split '" + a.split + "' has no blocks");
    const double ppl = block_perplexity(ckpt.model, data.blocks(split));
    man["config"] = {{"split", a.split}};
    man["result"] = {{"perplexity", ppl}, {"blocks", data.blocks(split).size()}};
    std::cout << "perplexity " << a.split << ' ' << ppl << '\n';
    if (!u.out.empty()) {
      write_json_file(u.out, {{"split", a.split}, {"perplexity", ppl}});
      man.output(u.out);
    }
    return 0;
  });
}

struct GenerateArgs {
  std::string checkpoint, vocab, prompt, strategy = "greedy";
  int max_new = 50, top_k = 40;
  double temperature = 1.0;
};

int run_generate(const Universal& u, const GenerateArgs& a, RunManifest& man) {
  const auto vocab = BpeVocab::load(a.vocab);
  man.input(a.checkpoint);
  man.input(a.vocab);
  return with_checkpoint(a.checkpoint, [&](auto ckpt) {
    check_vocab(ckpt.vocab_hash, vocab);
    GenerateOptions opts;
    opts.max_new = a.max_new;
    opts.seed = u.seed;
    opts.stop_token = vocab.eos();
    if (a.strategy == "greedy")
      opts.strategy.kind = SamplingStrategy::Kind::kGreedy;
    else if (a.strategy == "top-k" || a.strategy == "top_k")
      opts.strategy.kind = SamplingStrategy::Kind::kTopK;
    else
      throw DomainError("unknown strategy '" + a.strategy + "' (expected greedy or top-k)");
    opts.strategy.top_k = a.top_k;
    opts.strategy.temperature = a.temperature;
    const auto ids = vocab.encode(a.prompt);
    const auto gen = generate(ckpt.model, std::span<const TokenId>(ids), opts);
    const auto text = vocab.decode(gen.tokens);
    std::cout << text << '\n';
    man["config"] = {{"strategy", a.strategy}, {"max_new", a.max_new}, {"top_k", a.top_k},
                     {"temperature", a.temperature}, {"seed", u.seed}};
    man["result"] = {{"tokens", gen.tokens.size() - ids.size()}};
    if (!u.out.empty()) {
      write_json_file(u.out, {{"prompt", a.prompt}, {"text", text}, {"tokens", gen.tokens}});
      man.output(u.out);
    }
    return 0;
  });
}

struct TraceArgs {
  std::string checkpoint, data, split = "val";
  std::size_t max_seqs = 256;
};

int run_trace(const Universal& u, const TraceArgs& a, RunManifest& man) {
  const auto data = PackedDataset::load(a.data);
  man.input(a.checkpoint);
  man.input(a.data);
  return with_checkpoint(a.checkpoint, [&](auto ckpt) {
    const auto traces = capture(ckpt.model, block_inputs(data, parse_split(a.split), a.max_seqs));
    write_traces_jsonl(u.out, traces);
    man.output(u.out);
    man["config"] = {{"split", a.split}, {"max_seqs", a.max_seqs}};
    man["result"] = {{"traces", traces.size()}};
    std::cout << traces.size() << " traces -> " << u.out << '\n';
    return 0;
  });
}

struct ReportArgs {
  std::string checkpoint, vocab, traces;
  int layer = -1, k = -1;
  std::size_t n = 10;
};

int run_report(const Universal& u, const ReportArgs& a, RunManifest& man) {
  const fs::path out(u.out);
  fs::create_directories(out);
  const auto vocab = BpeVocab::load(a.vocab);
  const auto traces = read_traces_jsonl(a.traces);
  if (traces.empty()) throw ConfigError("no traces in " + a.traces);
  man.input(a.checkpoint);
  man.input(a.vocab);
  man.input(a.traces);
  return with_checkpoint(a.checkpoint, [&](auto ckpt) {
    check_vocab(ckpt.vocab_hash, vocab);
    const int L = static_cast<int>(ckpt.model.blocks.size());
    if (a.layer >= L) throw DomainError("layer " + std::to_string(a.layer) + " out of range");
    json layers = json::array();
    std::vector<PrototypeReport> snapshot;
    std::vector<TokenId> all_tokens;
    for (const auto& t : traces) all_tokens.insert(all_tokens.end(), t.tokens.begin(), t.tokens.end());
    for (int l = 0; l < L; ++l) {
      if (a.layer >= 0 && l != a.layer) continue;
      const auto& mixer = ckpt.model.blocks[static_cast<std::size_t>(l)].mixer;
      const auto rows = layer_rows(traces, l);
      std::vector<double> half_lives;
      for (int k = 0; k < mixer.channels(); ++k) half_lives.push_back(half_life(static_cast<double>(mixer.gamma(k))));
      const auto rho = half_life_repetition(traces, l, half_lives, a.n);
      json protos = json::array();
      for (int k = 0; k < mixer.channels(); ++k) {
        if (a.k >= 0 && k != a.k) continue;
        auto rep = top_sequences(traces, l, k, a.n, half_lives[static_cast<std::size_t>(k)]);
        std::vector<double> acts;
        for (const auto& t : traces)
          for (Eigen::Index i = 0; i < t.layers[l].write.rows(); ++i) acts.push_back(t.layers[l].write(i, k));
        const auto mi = mutual_information(all_tokens, acts);
        json pj = rep.to_json(&vocab);
        const auto r = repetition_score(rep);
        pj["repetition"] = r ? json(*r) : json(nullptr);
        pj["mutual_information"] = mi.value;
        pj["mi_degenerate"] = mi.degenerate;
        protos.push_back(std::move(pj));
        snapshot.push_back(std::move(rep));
      }
      const auto s = l1_sparsity(rows), g = gini(rows), e = entropy(rows);
      layers.push_back({{"layer", l},
                        {"alpha", static_cast<double>(mixer.alpha)},
                        {"l1_sparsity", s.value},
                        {"gini", g.value},
                        {"entropy", e.value},
                        {"skipped_rows", s.skipped},
                        {"half_life_repetition_spearman", rho ? json(*rho) : json(nullptr)},
                        {"prototypes", protos}});
    }
    if (a.k >= 0 && snapshot.empty()) throw DomainError("prototype " + std::to_string(a.k) + " out of range");
    write_json_file(out / "report.json", {{"traces", traces.size()}, {"n", a.n}, {"layers", layers}});
    write_html_snapshot(out / "snapshot.html", snapshot, vocab);
    man.output(out / "report.json");
    man.output(out / "snapshot.html");
    man["config"] = {{"layer", a.layer}, {"k", a.k}, {"n", a.n}};
    std::cout << snapshot.size() << " prototype reports -> " << (out / "report.json").string() << '\n';
    return 0;
  });
}

struct InterveneArgs {
  std::string checkpoint, vocab, mode, context, target;
  int layer = 0, k = 0;
  double floor = 0.01;
};

int run_intervene(const Universal& u, const InterveneArgs& a, RunManifest& man) {
  const auto vocab = BpeVocab::load(a.vocab);
  man.input(a.checkpoint);
  man.input(a.vocab);
  std::string mode = a.mode;
  for (auto& c : mode)
    if (c == '-') c = '_';
  return with_checkpoint(a.checkpoint, [&](auto ckpt) {
    check_vocab(ckpt.vocab_hash, vocab);
    using S = typename decltype(ckpt.model.embedding)::Scalar;
    const InterventionSpec spec{a.layer, a.k, parse_intervention_mode(mode), u.seed};
    const InterventionView<S> view(ckpt.model, spec);
    json j = probability_delta(ckpt.model, view, vocab, a.context, a.target, a.floor).to_json();
    j["layer"] = a.layer;
    j["k"] = a.k;
    j["mode"] = intervention_mode_name(spec.mode);
    j["seed"] = u.seed;
    std::cout << j.dump(2, ' ', false, json::error_handler_t::replace) << '\n';
    man["config"] = {{"layer", a.layer}, {"k", a.k}, {"mode", mode}, {"seed", u.seed},
                     {"context", a.context}, {"target", a.target}, {"floor", a.floor}};
    man["result"] = j;
    if (!u.out.empty()) {
      write_json_file(u.out, j);
      man.output(u.out);
    }
    return 0;
  });
}

struct RobustnessArgs {
  std::string checkpoint, vocab, pairs, kind = "perturbation";
  int k_top = 10;
};

int run_robustness(const Universal& u, const RobustnessArgs& a, bool pmr_run, RunManifest& man) {
  const fs::path out(u.out);
  fs::create_directories(out);
  const auto vocab = BpeVocab::load(a.vocab);
  const auto pairs = read_pairs_jsonl(a.pairs);
  man.input(a.checkpoint);
  man.input(a.vocab);
  man.input(a.pairs);
  return with_checkpoint(a.checkpoint, [&](auto ckpt) {
    check_vocab(ckpt.vocab_hash, vocab);
    RobustnessReport rep;
    if (pmr_run)
      rep = pmr_eval(ckpt.model, vocab, pairs);
    else if (a.kind == "intervention")
      rep = intervention_eval(ckpt.model, vocab, pairs, a.k_top);
    else if (a.kind == "perturbation")
      rep = perturbation_eval(ckpt.model, vocab, pairs);
    else
      throw DomainError("unknown kind '" + a.kind + "' (expected perturbation or intervention)");
    const std::string stem = pmr_run ? "pmr" : a.kind;
    rep.write_csv(out / (stem + ".csv"));
    write_json_file(out / (stem + ".json"), rep.to_json());
    man.output(out / (stem + ".csv"));
    man.output(out / (stem + ".json"));
    man["config"] = {{"kind", stem}, {"k_top", a.k_top}};
    man["result"] = rep.to_json();
    std::ifstream csv(out / (stem + ".csv"));
    std::cout << csv.rdbuf();
    if (rep.skipped) std::cerr << rep.skipped << " pairs skipped\n";
    return 0;
  });
}

struct ServeArgs {
  std::string checkpoint, vocab, data, traces, traces_dir = "traces", split = "val", host = "127.0.0.1";
  std::size_t max_seqs = 256;
  int port = 8080;
};

HttpServer* g_server = nullptr;

int run_serve(const Universal& u, const ServeArgs& a, RunManifest& man) {
  const auto vocab = BpeVocab::load(a.vocab);
  man.input(a.checkpoint);
  man.input(a.vocab);
  return with_checkpoint(a.checkpoint, [&](auto ckpt) {
    check_vocab(ckpt.vocab_hash, vocab);
    using S = typename decltype(ckpt.model.embedding)::Scalar;
    const auto ckpt_hash = checkpoint_hash(a.checkpoint);
    std::vector<ActivationTrace> traces;
    if (!a.traces.empty()) {
      traces = read_traces_jsonl(a.traces);
      man.input(a.traces);
    } else if (!a.data.empty()) {
      const auto data = PackedDataset::load(a.data);
      man.input(a.data);
      traces = cached_traces(ckpt.model, ckpt_hash, block_inputs(data, parse_split(a.split), a.max_seqs),
                             data.hash(), a.traces_dir);
    }
    ExplorerService<S> service(std::move(ckpt.model), vocab, std::move(traces), hex64(ckpt_hash));
    HttpServer server(service);
    const int port = server.bind(a.host, a.port);
    man["config"] = {{"host", a.host}, {"port", port}, {"split", a.split}, {"max_seqs", a.max_seqs}};
    man.write(manifest_path(u.out, true));
    std::cout << "serving on http://" << a.host << ':' << port << std::endl;
    g_server = &server;
    std::signal(SIGINT, [](int) {
      if (g_server) g_server->stop();
    });
    std::signal(SIGTERM, [](int) {
      if (g_server) g_server->stop();
    });
    server.listen();
    g_server = nullptr;
    return 0;
  });
}

void add_universal(CLI::App* sub, Universal& u, bool out_required, const std::string& out_help) {
  sub->add_option("--seed", u.seed, "Random seed")->each([&u](const std::string&) { u.seed_set = true; });
  sub->add_option("--config", u.config, "JSON config (model and training keys)")->check(CLI::ExistingFile);
  auto* out = sub->add_option("--out", u.out, out_help);
  if (out_required) out->required();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prototype-routing language model toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", PROTOT_VERSION);

  Universal u;
  TokenizerArgs tok;
  IngestArgs ing;
  TrainArgs tr;
  EvalArgs ev;
  GenerateArgs gen;
  TraceArgs trc;
  ReportArgs rep;
  InterveneArgs itv;
  RobustnessArgs rob;
  ServeArgs srv;

  auto* c_tok = app.add_subcommand("tokenizer-train", "Learn a byte-level BPE vocabulary");
  add_universal(c_tok, u, true, "Vocabulary JSON");
  c_tok->add_option("--input", tok.inputs, "Corpus files (.jsonl or text)")->required()->check(CLI::ExistingFile);
  c_tok->add_option("--vocab-size", tok.vocab_size, "Target vocabulary size");

  auto* c_ing = app.add_subcommand("ingest", "Tokenize, split and pack a corpus");
  add_universal(c_ing, u, true, "Packed dataset JSON");
  c_ing->add_option("--vocab", ing.vocab)->required()->check(CLI::ExistingFile);
  c_ing->add_option("--input", ing.inputs)->required()->check(CLI::ExistingFile);
  c_ing->add_option("--ctx", ing.ctx, "Context length (default: config ctx or 256)");
  c_ing->add_option("--train-frac", ing.train_frac);
  c_ing->add_option("--val-frac", ing.val_frac);

  auto* c_tr = app.add_subcommand("train", "Train a model");
  add_universal(c_tr, u, true, "Run directory");
  c_tr->add_option("--vocab", tr.vocab)->required()->check(CLI::ExistingFile);
  c_tr->add_option("--data", tr.data)->required()->check(CLI::ExistingFile);
  c_tr->add_option("--resume", tr.resume, "Continue from a checkpoint")->check(CLI::ExistingFile);

  auto* c_ev = app.add_subcommand("eval", "Perplexity on a split");
  add_universal(c_ev, u, false, "Result JSON");
  c_ev->add_option("--checkpoint", ev.checkpoint)->required()->check(CLI::ExistingFile);
  c_ev->add_option("--data", ev.data)->required()->check(CLI::ExistingFile);
  c_ev->add_option("--split", ev.split)->check(CLI::IsMember({"train", "val", "test"}));

  auto* c_gen = app.add_subcommand("generate", "Continue a prompt");
  add_universal(c_gen, u, false, "Result JSON");
  c_gen->add_option("--checkpoint", gen.checkpoint)->required()->check(CLI::ExistingFile);
  c_gen->add_option("--vocab", gen.vocab)->required()->check(CLI::ExistingFile);
  c_gen->add_option("--prompt", gen.prompt)->required();
  c_gen->add_option("--max-new", gen.max_new);
  c_gen->add_option("--strategy", gen.strategy, "greedy or top-k");
  c_gen->add_option("--top-k", gen.top_k);
  c_gen->add_option("--temperature", gen.temperature);

  auto* c_trc = app.add_subcommand("trace", "Capture gate weights over a split");
  add_universal(c_trc, u, true, "Traces JSONL");
  c_trc->add_option("--checkpoint", trc.checkpoint)->required()->check(CLI::ExistingFile);
  c_trc->add_option("--data", trc.data)->required()->check(CLI::ExistingFile);
  c_trc->add_option("--split", trc.split)->check(CLI::IsMember({"train", "val", "test"}));
  c_trc->add_option("--max-seqs", trc.max_seqs);

  auto* c_rep = app.add_subcommand("report", "Prototype reports, routing statistics and HTML snapshot");
  add_universal(c_rep, u, true, "Report directory");
  c_rep->add_option("--checkpoint", rep.checkpoint)->required()->check(CLI::ExistingFile);
  c_rep->add_option("--vocab", rep.vocab)->required()->check(CLI::ExistingFile);
  c_rep->add_option("--traces", rep.traces)->required()->check(CLI::ExistingFile);
  c_rep->add_option("--layer", rep.layer, "Only this layer");
  c_rep->add_option("--proto,--k", rep.k, "Only this prototype");
  c_rep->add_option("--n", rep.n, "Top sequences per prototype");

  auto* c_itv = app.add_subcommand("intervene", "Probability change of a target token under an intervention");
  add_universal(c_itv, u, false, "Result JSON");
  c_itv->add_option("--checkpoint", itv.checkpoint)->required()->check(CLI::ExistingFile);
  c_itv->add_option("--vocab", itv.vocab)->required()->check(CLI::ExistingFile);
  c_itv->add_option("--layer", itv.layer)->required();
  c_itv->add_option("--proto,--k", itv.k)->required();
  c_itv->add_option("--mode", itv.mode, "none, reinit, mask-write or mask-read")->required();
  c_itv->add_option("--context", itv.context)->required();
  c_itv->add_option("--target", itv.target)->required();
  c_itv->add_option("--floor", itv.floor, "Base probability below which results are flagged");

  auto* c_rob = app.add_subcommand("robustness", "JSD over perturbation pairs, or Ov/Sp/T1 over interventions");
  add_universal(c_rob, u, true, "Output directory");
  c_rob->add_option("--checkpoint", rob.checkpoint)->required()->check(CLI::ExistingFile);
  c_rob->add_option("--vocab", rob.vocab)->required()->check(CLI::ExistingFile);
  c_rob->add_option("--pairs", rob.pairs)->required()->check(CLI::ExistingFile);
  c_rob->add_option("--kind", rob.kind)->check(CLI::IsMember({"perturbation", "intervention"}));
  c_rob->add_option("--k-top", rob.k_top);

  auto* c_pmr = app.add_subcommand("pmr", "Prototype-mediated robustness via gate clamping");
  add_universal(c_pmr, u, true, "Output directory");
  c_pmr->add_option("--checkpoint", rob.checkpoint)->required()->check(CLI::ExistingFile);
  c_pmr->add_option("--vocab", rob.vocab)->required()->check(CLI::ExistingFile);
  c_pmr->add_option("--pairs", rob.pairs)->required()->check(CLI::ExistingFile);

  auto* c_srv = app.add_subcommand("serve", "HTTP API for the explorer");
  add_universal(c_srv, u, false, "Directory for the run manifest");
  c_srv->add_option("--checkpoint", srv.checkpoint)->required()->check(CLI::ExistingFile);
  c_srv->add_option("--vocab", srv.vocab)->required()->check(CLI::ExistingFile);
  c_srv->add_option("--data", srv.data, "Packed dataset to capture traces from")->check(CLI::ExistingFile);
  c_srv->add_option("--traces", srv.traces, "Precomputed traces JSONL")->check(CLI::ExistingFile);
  c_srv->add_option("--traces-dir", srv.traces_dir, "Trace cache directory");
  c_srv->add_option("--split", srv.split)->check(CLI::IsMember({"train", "val", "test"}));
  c_srv->add_option("--max-seqs", srv.max_seqs);
  c_srv->add_option("--host", srv.host);
  c_srv->add_option("--port", srv.port);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  auto* sub = app.get_subcommands().front();
  RunManifest man(sub->get_name(), argc, argv);
  const bool dir_out = sub == c_tr || sub == c_rep || sub == c_rob || sub == c_pmr;
  try {
    if (!u.out.empty()) {
      const fs::path out(u.out);
      if (dir_out)
        fs::create_directories(out);
      else if (out.has_parent_path())
        fs::create_directories(out.parent_path());
    }
    int rc = 0;
    if (sub == c_tok) rc = run_tokenizer_train(u, tok, man);
    else if (sub == c_ing) rc = run_ingest(u, ing, man);
    else if (sub == c_tr) rc = run_train(u, tr, man);
    else if (sub == c_ev) rc = run_eval(u, ev, man);
    else if (sub == c_gen) rc = run_generate(u, gen, man);
    else if (sub == c_trc) rc = run_trace(u, trc, man);
    else if (sub == c_rep) rc = run_report(u, rep, man);
    else if (sub == c_itv) rc = run_intervene(u, itv, man);
    else if (sub == c_rob) rc = run_robustness(u, rob, false, man);
    else if (sub == c_pmr) rc = run_robustness(u, rob, true, man);
    else if (sub == c_srv) return run_serve(u, srv, man);
    man.write(manifest_path(u.out, dir_out));
    return rc;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    const bool io = dynamic_cast<const IoError*>(&e) || dynamic_cast<const fs::filesystem_error*>(&e);
    // Failed runs still leave a manifest when the output location is writable.
    man["error"] = e.what();
    try {
      man.write(manifest_path(u.out, dir_out));
    } catch (const std::exception&) {
    }
    return io ? 2 : 1;
  }
}
