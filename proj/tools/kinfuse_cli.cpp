#include <openssl/evp.h>

#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "kinfuse/encoder.hpp"
#include "kinfuse/error.hpp"
#include "kinfuse/prior.hpp"
#include "kinfuse/robustness.hpp"
#include "kinfuse/serialize.hpp"
#include "kinfuse/trainer.hpp"

namespace fs = std::filesystem;
using namespace kinfuse;

namespace {

constexpr const char* kVersion = "0.1.0";

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

void print_error(std::string_view kind, std::string_view message) {
  std::cerr << Json{{"error", kind}, {"message", message}}.dump() << '\n';
}

Json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << text;
}

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  const std::string data = buf.str();
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i)
    hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return hex.str();
}

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path q(p);
  return q.is_absolute() ? q : base / q;
}

LexicalKB kb_or_empty(const std::string& path) { return path.empty() ? LexicalKB{} : load_kb(path); }

// kb check

int cmd_kb_check(const std::string& kb_path, bool human) {
  const LexicalKB kb = load_kb(kb_path);
  Json counts = Json::object();
  for (RelationKind k : kAllRelations) counts[std::string(to_string(k))] = kb.count(k);
  std::cout << Json{{"kb", kb_path}, {"ordered_pairs", kb.num_pairs()}, {"relations", counts}}.dump()
            << '\n';
  if (human) {
    std::cout << kb_path << ": " << kb.num_pairs() << " ordered pairs";
    for (RelationKind k : kAllRelations) std::cout << ", " << to_string(k) << ' ' << kb.count(k);
    std::cout << '\n';
  }
  return kOk;
}

// prior

struct PriorArgs {
  std::string kb, pairs, checkpoint, mode = "boost";
  double gamma = 1.0, kappa = 1.0;
  std::uint64_t seed = 0;
};

int cmd_prior(const PriorArgs& a) {
  const LexicalKB kb = load_kb(a.kb);
  const LabeledDataset pairs = load_dataset(a.pairs);
  const PriorMode mode = parse_prior_mode(a.mode);
  std::optional<Model> model;
  if (!a.checkpoint.empty()) {
    model.emplace(load_checkpoint(a.checkpoint));
  } else {
    EncoderConfig cfg;
    cfg.seed = a.seed;
    model.emplace(cfg, build_vocab(pairs, 1));
  }
  model->config().gamma = a.gamma;
  model->config().prior_mode = mode;
  model->config().kappa = a.kappa;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const EncodedExample ex = prepare_example(*model, kb, pairs.examples[i]);
    const PriorMatrix p = model->prior_from_hidden(model->embed(ex.pair), ex);
    Json j = to_json(p);
    j["index"] = i;
    std::cout << j.dump() << '\n';
  }
  return kOk;
}

// train

struct RunPlan {
  fs::path config_path;
  EncoderConfig encoder;
  TrainConfig train;
  fs::path train_tsv, val_tsv, kb_tsv;
  std::optional<fs::path> test_tsv;
  std::size_t min_freq = 1;
  fs::path out_dir;
};

RunPlan plan_from_config(const fs::path& cfg_path) {
  const Json j = read_json(cfg_path);
  const fs::path base = cfg_path.parent_path();
  RunPlan p;
  p.config_path = cfg_path;
  try {
    p.encoder = encoder_config_from_json(j.value("encoder", Json::object()));
    p.train = train_config_from_json(j.value("train", Json::object()));
    const Json& d = j.at("data");
    p.train_tsv = resolve(base, d.at("train").get<std::string>());
    p.val_tsv = resolve(base, d.at("val").get<std::string>());
    p.kb_tsv = resolve(base, d.at("kb").get<std::string>());
    if (d.contains("test")) p.test_tsv = resolve(base, d.at("test").get<std::string>());
    p.min_freq = d.value("min_freq", std::size_t{1});
    p.out_dir = resolve(base, j.value("output_dir", std::string("run")));
  } catch (const Json::exception& e) {
    throw DataError(cfg_path.string() + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw DataError(cfg_path.string() + ": " + e.what());
  }
  return p;
}

int cmd_train(const fs::path& cfg_path, bool human) {
  const RunPlan plan = plan_from_config(cfg_path);
  const LabeledDataset train_set = load_dataset(plan.train_tsv);
  const LabeledDataset val_set = load_dataset(plan.val_tsv);
  const LexicalKB kb = load_kb(plan.kb_tsv);

  Model model(plan.encoder, build_vocab(train_set, plan.min_freq));
  const auto tr = prepare_dataset(model, kb, train_set);
  const auto va = prepare_dataset(model, kb, val_set);

  fs::create_directories(plan.out_dir);
  const fs::path log_path = plan.out_dir / "metrics.jsonl";
  const fs::path ckpt_path = plan.out_dir / "checkpoint.json";
  const fs::path manifest_path = plan.out_dir / "manifest.json";
  std::ofstream log(log_path);
  if (!log) throw DataError("cannot write '" + log_path.string() + "'");

  TrainHooks hooks;
  hooks.on_record = [&](const LogRecord& r) { log << to_jsonl(r) << '\n'; };
  const TrainResult res = train(model, tr, va, plan.train, hooks);
  save_checkpoint(ckpt_path, res.best);

  Json summary{{"best_step", res.best_step}, {"best_val_acc", res.best_val_acc}};
  if (res.state.switched_at) summary["sgd_from_step"] = *res.state.switched_at;
  if (plan.test_tsv) {
    const auto te = prepare_dataset(res.best, kb, load_dataset(*plan.test_tsv));
    summary["test"] = Json::parse(to_json_string(evaluate(res.best, te)));
  }

  Json inputs = Json::array();
  std::vector<fs::path> in_paths{plan.config_path, plan.train_tsv, plan.val_tsv, plan.kb_tsv};
  if (plan.test_tsv) in_paths.push_back(*plan.test_tsv);
  for (const fs::path& p : in_paths) inputs.push_back(Json{{"path", p.string()}, {"sha256", sha256_file(p)}});
  const Json manifest{
      {"artifact", "kinfuse"},
      {"version", kVersion},
      {"command", "train"},
      {"config", Json{{"encoder", to_json(plan.encoder)},
                      {"train", to_json(plan.train)},
                      {"data", Json{{"min_freq", plan.min_freq}}}}},
      {"seed", Json{{"model", plan.encoder.seed}, {"train", plan.train.seed}}},
      {"inputs", inputs},
      {"outputs", Json{{"checkpoint", ckpt_path.string()},
                       {"metrics", log_path.string()},
                       {"manifest", manifest_path.string()}}},
      {"result", summary}};
  write_text(manifest_path, manifest.dump(2) + "\n");
  std::cout << summary.dump() << '\n';
  if (human) {
    std::cout << "best validation accuracy " << res.best_val_acc << " at step " << res.best_step
              << "; checkpoint " << ckpt_path.string() << '\n';
  }
  return kOk;
}

// eval

int cmd_eval(const std::string& ckpt, const std::string& data, const std::string& kb_path,
             bool human) {
  const Model model = load_checkpoint(ckpt);
  const auto ds = prepare_dataset(model, load_kb(kb_path), load_dataset(data));
  const Metrics m = evaluate(model, ds);
  std::cout << to_json_string(m) << '\n';
  if (human) std::cout << "accuracy " << m.accuracy << " over " << m.total << " pairs\n";
  return kOk;
}

// gradcheck

int cmd_gradcheck(const fs::path& cfg_path, bool human) {
  const Json j = read_json(cfg_path);
  const fs::path base = cfg_path.parent_path();
  EncoderConfig enc;
  double eps = 1e-4, tol = 1e-4;
  std::optional<std::uint64_t> dropout_seed;
  LexicalKB kb;
  LabeledDataset pairs;
  try {
    enc = encoder_config_from_json(j.value("encoder", Json::object()));
    const Json g = j.value("gradcheck", Json::object());
    eps = g.value("eps", eps);
    tol = g.value("tol", tol);
    if (g.contains("dropout_seed")) dropout_seed = g.at("dropout_seed").get<std::uint64_t>();
    if (j.contains("data")) {
      kb = load_kb(resolve(base, j.at("data").at("kb").get<std::string>()));
      pairs = load_dataset(resolve(base, j.at("data").at("pairs").get<std::string>()));
    }
  } catch (const Json::exception& e) {
    throw DataError(cfg_path.string() + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw DataError(cfg_path.string() + ": " + e.what());
  }
  if (pairs.empty()) {
    kb.add("hot", "cold", RelationKind::Antonym);
    kb.add("big", "large", RelationKind::Synonym);
    kb.add("dog", "animal", RelationKind::Hypernym);
    pairs.examples = {{0, "soup is hot", "soup is cold"}, {1, "a big dog", "large animal"}};
  }
  Model model(enc, build_vocab(pairs, 1));
  const auto batch = prepare_dataset(model, kb, pairs);
  const auto t0 = std::chrono::steady_clock::now();
  const GradCheckReport r = check_model_gradients(model, batch, eps, tol, dropout_seed);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  Json tensors = Json::array();
  for (const TensorGradCheck& t : r.tensors) {
    tensors.push_back(Json{{"name", t.name},
                           {"max_rel_error", t.max_rel_error},
                           {"worst_index", t.worst_index},
                           {"analytic", t.analytic},
                           {"numeric", t.numeric}});
  }
  std::size_t max_len = 0;
  for (const auto& e : batch) max_len = std::max(max_len, e.pair.length());
  std::cout << Json{{"max_rel_error", r.max_rel_error},
                    {"tol", tol},
                    {"eps", eps},
                    {"passed", r.passed()},
                    {"seconds", secs},
                    {"batch", batch.size()},
                    {"max_length", max_len},
                    {"scalars", model.params().num_scalars()},
                    {"tensors", tensors}}
                   .dump()
            << '\n';
  if (human) {
    std::cout << (r.passed() ? "PASS" : "FAIL") << " max relative error " << r.max_rel_error
              << " (tol " << tol << ") in " << secs << " s\n";
  }
  if (!r.passed()) {
    print_error("gradcheck", "max relative error " + std::to_string(r.max_rel_error) +
                                 " exceeds tolerance");
    return kNumeric;
  }
  return kOk;
}

// inspect

int cmd_inspect(const std::string& ckpt, const std::string& text_a, const std::string& text_b,
                const std::string& kb_path) {
  const Model model = load_checkpoint(ckpt);
  const LexicalKB kb = kb_or_empty(kb_path);
  const EncodedExample ex = prepare_example(model, kb, Example{0, text_a, text_b});
  const InspectionResult r = model.inspect(ex);

  Json tokens = Json::array();
  for (int id : ex.pair.ids) tokens.push_back(model.vocab().token(id));
  Json layers = Json::array();
  for (std::size_t l = 0; l < r.layers.size(); ++l) {
    Json heads = Json::array();
    for (std::size_t h = 0; h < r.layers[l].size(); ++h) {
      const FusionTrace& t = r.layers[l][h];
      heads.push_back(Json{{"head", h}, {"tokens", to_json(t)}});
    }
    layers.push_back(Json{{"layer", l}, {"heads", heads}});
  }
  std::vector<double> probs(r.output.probs.values());
  std::size_t pred = 0;
  for (std::size_t k = 1; k < probs.size(); ++k)
    if (probs[k] > probs[pred]) pred = k;
  std::cout << Json{{"tokens", tokens},
                    {"prediction", pred},
                    {"probs", probs},
                    {"mean_g_filter", r.mean_g_filter()},
                    {"layers", layers}}
                   .dump()
            << '\n';
  return kOk;
}

// transform

int cmd_transform(const std::string& which, const std::string& data, const std::string& kb_path,
                  std::uint64_t seed, const std::string& out, const std::string& swaps_out) {
  const SwapKind kind = which == "swap-ant" ? SwapKind::Antonym : SwapKind::Synonym;
  const LabeledDataset ds = load_dataset(data);
  const LexicalKB kb = load_kb(kb_path);
  Rng rng(seed);
  const TransformResult r = transform_dataset(ds, kb, kind, rng);
  save_dataset(out, r.data);
  std::ostringstream log;
  for (std::size_t i = 0; i < r.pairs.size(); ++i) log << swaps_jsonl(r.pairs[i], r.source_index[i]) << '\n';
  write_text(swaps_out, log.str());
  std::cout << Json{{"input", ds.size()}, {"emitted", r.data.size()}, {"output", out},
                    {"swaps", swaps_out}}
                   .dump()
            << '\n';
  return kOk;
}

// synth

int cmd_synth(const std::string& kb_path, const std::string& templates, std::size_t n,
              std::uint64_t seed, const std::string& out_dir) {
  const LexicalKB kb = load_kb(kb_path);
  const auto bank = load_templates(templates);
  Rng rng(seed);
  const SyntheticSplits s = gen_synthetic_splits(kb, n, bank, rng);
  const fs::path dir(out_dir);
  fs::create_directories(dir);
  save_dataset(dir / "train.tsv", s.train);
  save_dataset(dir / "val.tsv", s.val);
  save_dataset(dir / "test.tsv", s.test);
  Rng swap_rng(seed + 1);
  const TransformResult sa = transform_dataset(s.test, kb, SwapKind::Antonym, swap_rng);
  save_dataset(dir / "test_swapant.tsv", sa.data);
  std::cout << Json{{"train", s.train.size()},
                    {"val", s.val.size()},
                    {"test", s.test.size()},
                    {"test_swapant", sa.data.size()},
                    {"dir", dir.string()}}
                   .dump()
            << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Knowledge-infused attention toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);
  bool human = false;
  app.add_flag("--human", human, "Also print a human-readable summary");

  std::function<int()> run;

  auto* kb_cmd = app.add_subcommand("kb", "Knowledge base utilities");
  kb_cmd->require_subcommand(1);
  auto* kb_check = kb_cmd->add_subcommand("check", "Validate a KB and print relation counts");
  std::string kb_path;
  kb_check->add_option("kb", kb_path, "KB TSV")->required();
  kb_check->callback([&] { run = [&] { return cmd_kb_check(kb_path, human); }; });

  PriorArgs pa;
  auto* prior = app.add_subcommand("prior", "Print the prior matrix of each pair as JSON lines");
  prior->add_option("kb", pa.kb, "KB TSV")->required();
  prior->add_option("pairs", pa.pairs, "Pairs TSV")->required();
  prior->add_option("--gamma", pa.gamma, "Knowledge score weight")->capture_default_str();
  prior->add_option("--mode", pa.mode, "raw or boost")->capture_default_str();
  prior->add_option("--kappa", pa.kappa, "Boost scale")->capture_default_str();
  prior->add_option("--checkpoint", pa.checkpoint, "Take embeddings from a checkpoint");
  prior->add_option("--seed", pa.seed, "Init seed when no checkpoint is given")->capture_default_str();
  prior->callback([&] { run = [&] { return cmd_prior(pa); }; });

  std::string cfg_path;
  auto* train_cmd = app.add_subcommand("train", "Train from a JSON config");
  train_cmd->add_option("config", cfg_path, "Run config")->required();
  train_cmd->callback([&] { run = [&] { return cmd_train(cfg_path, human); }; });

  std::string ckpt, data;
  auto* eval_cmd = app.add_subcommand("eval", "Print metrics of a checkpoint on a dataset");
  eval_cmd->add_option("checkpoint", ckpt)->required();
  eval_cmd->add_option("data", data)->required();
  eval_cmd->add_option("kb", kb_path)->required();
  eval_cmd->callback([&] { run = [&] { return cmd_eval(ckpt, data, kb_path, human); }; });

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every parameter");
  gc->add_option("config", cfg_path, "Config with encoder and gradcheck sections")->required();
  gc->callback([&] { run = [&] { return cmd_gradcheck(cfg_path, human); }; });

  std::string text_a, text_b, inspect_kb;
  auto* inspect = app.add_subcommand("inspect", "Print per-token fusion and filter gates");
  inspect->add_option("checkpoint", ckpt)->required();
  inspect->add_option("text_a", text_a)->required();
  inspect->add_option("text_b", text_b)->required();
  inspect->add_option("--kb", inspect_kb, "KB TSV (empty KB if omitted)");
  inspect->callback([&] { run = [&] { return cmd_inspect(ckpt, text_a, text_b, inspect_kb); }; });

  std::string which, out, swaps_out;
  std::uint64_t seed = 0;
  auto* transform = app.add_subcommand("transform", "Apply SwapAnt or SwapSyn to text_b");
  transform->add_option("kind", which)->required()->check(CLI::IsMember({"swap-ant", "swap-syn"}));
  transform->add_option("data", data)->required();
  transform->add_option("kb", kb_path)->required();
  transform->add_option("--seed", seed)->capture_default_str();
  transform->add_option("--out", out, "Transformed TSV")->required();
  transform->add_option("--swaps", swaps_out, "Swaps JSON-lines log")->required();
  transform->callback(
      [&] { run = [&] { return cmd_transform(which, data, kb_path, seed, out, swaps_out); }; });

  std::string templates, out_dir;
  std::size_t n = 2000;
  auto* synth = app.add_subcommand("synth", "Write synthetic train/val/test splits");
  synth->add_option("kb", kb_path)->required();
  synth->add_option("--templates", templates, "Template bank")->required();
  synth->add_option("--n", n, "Total pairs")->capture_default_str();
  synth->add_option("--seed", seed)->capture_default_str();
  synth->add_option("--out-dir", out_dir)->required();
  synth->callback([&] { run = [&] { return cmd_synth(kb_path, templates, n, seed, out_dir); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("usage", e.what());
    return kUsage;
  }

  try {
    return run ? run() : kUsage;
  } catch (const NumericError& e) {
    print_error("numeric", e.what());
    return kNumeric;
  } catch (const ParseError& e) {
    print_error("parse", e.what());
    return kData;
  } catch (const DataError& e) {
    print_error("data", e.what());
    return kData;
  } catch (const ShapeError& e) {
    print_error("shape", e.what());
    return kData;
  } catch (const std::invalid_argument& e) {
    print_error("data", e.what());
    return kData;
  } catch (const fs::filesystem_error& e) {
    print_error("data", e.what());
    return kData;
  }
}
