// qaid: command-line driver for vocab building, two-stage training, indexing,
// prediction and evaluation.
//
// Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "qaid/qaid.hpp"

namespace fs = std::filesystem;
using namespace qaid;

namespace {

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

void write_text(const fs::path& p, const std::string& text) {
  ensure_parent(p);
  io::write_file_atomic(p, text);
}

// intents.txt, or a JSONL dataset whose registry is inferred.
IntentRegistry load_intents(const fs::path& p) {
  if (p.extension() == ".jsonl") return load_dataset(p).registry;
  return load_registry(p);
}

std::string log_header(const TrainConfig& t, bool pretrained) {
  std::string h = "# stage=" + std::string(to_string(t.stage));
  h += " loss=" + std::string(t.stage == Stage::pretrain ? "self" : to_string(t.loss));
  h += " score=" + std::string(to_string(t.score));
  h += std::string(" augment=") + (t.augment ? "on" : "off");
  if (t.stage == Stage::finetune) h += std::string(" init=") + (pretrained ? "checkpoint" : "fresh");
  h += " seed=" + std::to_string(t.seed) + "\n";
  h += "# epoch\ttotal\tcontrastive\tmlm\tclass\n";
  return h;
}

EpochCallback echo_epochs(std::string& log) {
  return [&log](const EpochStats& e) {
    const auto line = format_epoch_line(e);
    std::cerr << "epoch " << line << "\n";
    log += line + "\n";
  };
}

// Training flags shared by pretrain, finetune and eval --seeds. Values start
// at the stage defaults; a config file overrides them, explicit flags win.
struct TrainFlags {
  TrainConfig t;
  std::string config;
  std::uint64_t seed = 0;
  CLI::Option* epochs = nullptr;
  CLI::Option* batch = nullptr;
  CLI::Option* lr = nullptr;
  CLI::Option* tau = nullptr;
  CLI::Option* lambda = nullptr;
  CLI::Option* lambda_class = nullptr;
  CLI::Option* lambda_mlm = nullptr;
  CLI::Option* seed_opt = nullptr;
  TrainConfig flagged;

  void add(CLI::App* app, Stage stage) {
    t = stage == Stage::pretrain ? TrainConfig::pretrain_defaults() : TrainConfig::finetune_defaults();
    flagged = t;
    app->add_option("--config", config, "key = value config file (flags override it)");
    seed_opt = app->add_option("--seed", seed, "random seed")->capture_default_str();
    epochs = app->add_option("--epochs", flagged.epochs, "training epochs")->capture_default_str();
    batch = app->add_option("--batch-size", flagged.batch_n, "source examples per batch")->capture_default_str();
    lr = app->add_option("--lr", flagged.lr, "Adam learning rate")->capture_default_str();
    tau = app->add_option("--tau", flagged.tau, "contrastive temperature")->capture_default_str();
    if (stage == Stage::pretrain) {
      lambda = app->add_option("--lambda", flagged.lambda, "MLM weight in the pre-training loss")->capture_default_str();
    } else {
      lambda_class = app->add_option("--lambda-class", flagged.lambda_class, "classification loss weight")
                         ->capture_default_str();
      lambda_mlm = app->add_option("--lambda-mlm", flagged.lambda_mlm, "MLM weight in the fine-tuning loss")
                       ->capture_default_str();
    }
  }

  ExperimentConfig resolve() const {
    ExperimentConfig ec;
    ec.train = t;
    if (!config.empty()) apply_config_file(config, ec);
    auto& r = ec.train;
    if (epochs->count()) r.epochs = flagged.epochs;
    if (batch->count()) r.batch_n = flagged.batch_n;
    if (lr->count()) r.lr = flagged.lr;
    if (tau->count()) r.tau = flagged.tau;
    if (lambda && lambda->count()) r.lambda = flagged.lambda;
    if (lambda_class && lambda_class->count()) r.lambda_class = flagged.lambda_class;
    if (lambda_mlm && lambda_mlm->count()) r.lambda_mlm = flagged.lambda_mlm;
    if (seed_opt->count()) r.seed = seed;
    r.validate();
    return ec;
  }
};

// Ablation switches for fine-tuning.
struct ArmFlags {
  std::string loss;
  std::string score;
  bool no_augment = false;
  bool no_pretrain = false;

  void add(CLI::App* app) {
    app->add_option("--loss", loss, "contrastive loss: supcon (default) or npairs")
        ->check(CLI::IsMember({"supcon", "npairs"}));
    app->add_option("--score", score, "relevance score: late (default) or cls")->check(CLI::IsMember({"late", "cls"}));
    app->add_flag("--no-augment", no_augment, "disable token masking (dropout stays on)");
    app->add_flag("--no-pretrain", no_pretrain, "start from a fresh encoder instead of --init");
  }

  void apply(TrainConfig& t) const {
    if (loss == "npairs") t.loss = LossMode::npairs;
    if (loss == "supcon") t.loss = LossMode::supcon;
    if (score == "cls") t.score = ScoreMode::cls_cosine;
    if (score == "late") t.score = ScoreMode::late_interaction;
    if (no_augment) t.augment = false;
  }
};

// Encoder to fine-tune from: the checkpoint named by `flag`, or nothing for
// the no-pretrain arm (callers then build a fresh one from the config).
std::optional<EncoderParams> initial_encoder(const std::string& init, const char* flag, const ArmFlags& arm,
                                             const Vocab& vocab) {
  if (init.empty() && !arm.no_pretrain) {
    throw UsageError(std::string("pass ") + flag + " <checkpoint>, or --no-pretrain to fine-tune a fresh encoder");
  }
  if (!init.empty() && arm.no_pretrain) {
    throw UsageError(std::string(flag) + " and --no-pretrain are mutually exclusive");
  }
  if (arm.no_pretrain) return std::nullopt;
  auto p = load_checkpoint(init);
  if (p.config.vocab_size != vocab.size()) {
    throw ShapeMismatchError("checkpoint vocab size " + std::to_string(p.config.vocab_size) + " differs from vocab size " +
                             std::to_string(vocab.size()));
  }
  return p;
}

EncoderConfig model_config(const ExperimentConfig& ec, const Vocab& vocab) {
  auto m = ec.model;
  m.vocab_size = vocab.size();
  m.validate();
  return m;
}

void print_report(const EvalReport& r, bool json, const std::string& report_path) {
  const auto j = report_to_json(r);
  if (!report_path.empty()) write_text(report_path, j.dump(2) + "\n");
  if (json) {
    std::cout << j.dump(2) << "\n";
  } else {
    std::cout << report_table(r);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"QAID few-shot intent detection: contrastive training, late-interaction retrieval"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "help for every command");

  // build-vocab
  auto* bv = app.add_subcommand("build-vocab", "build a vocabulary from JSONL data and its intent names");
  std::vector<std::string> bv_data;
  std::size_t bv_min_freq = 1;
  std::string bv_out;
  bv->add_option("--data", bv_data, "JSONL files with \"text\" (and optional \"intent\")")->required();
  bv->add_option("--min-freq", bv_min_freq, "minimum token frequency")->capture_default_str()->check(CLI::PositiveNumber);
  bv->add_option("--out", bv_out, "vocab file to write")->required();

  // pretrain
  auto* pt = app.add_subcommand("pretrain", "self-supervised contrastive pre-training with the MLM auxiliary loss");
  std::string pt_data, pt_vocab, pt_out, pt_log;
  pt->add_option("--data", pt_data, "JSONL corpus; only \"text\" is read")->required();
  pt->add_option("--vocab", pt_vocab, "vocab file")->required();
  pt->add_option("--out", pt_out, "checkpoint to write")->required();
  pt->add_option("--log", pt_log, "epoch log (default: <out>.log)");
  TrainFlags pt_flags;
  pt_flags.add(pt, Stage::pretrain);

  // finetune
  auto* ft = app.add_subcommand("finetune", "supervised contrastive fine-tuning over queries and intent names");
  std::string ft_data, ft_vocab, ft_init, ft_out, ft_log, ft_intents;
  ft->add_option("--data", ft_data, "K-shot JSONL training data")->required();
  ft->add_option("--vocab", ft_vocab, "vocab file")->required();
  ft->add_option("--init", ft_init, "pre-trained checkpoint to start from");
  ft->add_option("--intents", ft_intents, "intents.txt fixing class order (default: sorted intents of --data)");
  ft->add_option("--out", ft_out, "checkpoint to write")->required();
  ft->add_option("--log", ft_log, "epoch log (default: <out>.log)");
  TrainFlags ft_flags;
  ft_flags.add(ft, Stage::finetune);
  ArmFlags ft_arm;
  ft_arm.add(ft);

  // index
  auto* ix = app.add_subcommand("index", "encode intent names and build the answer index");
  std::string ix_ckpt, ix_vocab, ix_intents, ix_out;
  std::size_t ix_nlist = 0;
  std::uint64_t ix_seed = 0;
  bool ix_no_quant = false;
  ix->add_option("--checkpoint", ix_ckpt, "fine-tuned checkpoint")->required();
  ix->add_option("--vocab", ix_vocab, "vocab file")->required();
  ix->add_option("--intents", ix_intents, "intents.txt or a JSONL dataset defining the classes")->required();
  ix->add_option("--out", ix_out, "index file to write")->required();
  ix->add_option("--nlist", ix_nlist, "inverted lists (0: ceil(sqrt(total tokens)))")->capture_default_str();
  ix->add_option("--seed", ix_seed, "k-means seed")->capture_default_str();
  ix->add_flag("--no-quantize", ix_no_quant, "store full-precision token vectors");

  // predict
  auto* pr = app.add_subcommand("predict", "predict the intent of a query");
  std::string pr_ckpt, pr_vocab, pr_index, pr_intents, pr_text;
  bool pr_stdin = false;
  std::size_t pr_nprobe = 0;
  pr->add_option("--checkpoint", pr_ckpt, "fine-tuned checkpoint")->required();
  pr->add_option("--vocab", pr_vocab, "vocab file")->required();
  pr->add_option("--index", pr_index, "answer index")->required();
  pr->add_option("--intents", pr_intents, "intents.txt used to build the index")->required();
  auto* pr_text_opt = pr->add_option("--text", pr_text, "query text; prints the intent name");
  auto* pr_stdin_opt = pr->add_flag("--stdin-jsonl", pr_stdin, "read {\"text\":...} lines, write {text,intent,score}");
  pr_text_opt->excludes(pr_stdin_opt);
  pr->add_option("--nprobe", pr_nprobe, "lists to probe (0: all, full retrieval)")->capture_default_str();

  // eval
  auto* ev = app.add_subcommand("eval", "accuracy on a test set, optionally re-fine-tuned over several seeds");
  std::string ev_ckpt, ev_vocab, ev_index, ev_test, ev_intents, ev_train, ev_report;
  std::vector<std::uint64_t> ev_seeds;
  std::size_t ev_nlist = 0;
  bool ev_json = false, ev_no_quant = false;
  ev->add_option("--checkpoint", ev_ckpt, "model to evaluate; with --seeds, the fine-tuning init");
  ev->add_option("--vocab", ev_vocab, "vocab file")->required();
  ev->add_option("--index", ev_index, "answer index (single evaluation)");
  ev->add_option("--test", ev_test, "JSONL test set")->required();
  ev->add_option("--intents", ev_intents, "intents.txt (default with --seeds: sorted intents of --train)");
  ev->add_option("--seeds", ev_seeds, "fine-tune, index and evaluate once per seed");
  ev->add_option("--train", ev_train, "K-shot training data for --seeds");
  ev->add_option("--nlist", ev_nlist, "inverted lists for per-seed indexes (0: default)")->capture_default_str();
  ev->add_flag("--no-quantize", ev_no_quant, "per-seed indexes keep full precision");
  ev->add_option("--report", ev_report, "write the report JSON here");
  ev->add_flag("--json", ev_json, "print the report as JSON instead of a table");
  TrainFlags ev_flags;
  ev_flags.add(ev, Stage::finetune);
  ArmFlags ev_arm;
  ev_arm.add(ev);

  // gen-toy
  auto* gt = app.add_subcommand("gen-toy", "write the synthetic 10-intent keyword task");
  std::string gt_dir;
  std::uint64_t gt_seed = 7;
  std::size_t gt_shots = 5, gt_test = 20;
  gt->add_option("--out-dir", gt_dir, "directory for train.jsonl, test.jsonl, intents.txt")->required();
  gt->add_option("--seed", gt_seed, "task seed")->capture_default_str();
  gt->add_option("--shots", gt_shots, "training examples per intent")->capture_default_str();
  gt->add_option("--test-per-intent", gt_test, "test examples per intent")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*bv) {
      std::vector<std::string> corpus;
      for (const auto& path : bv_data) {
        auto texts = load_texts(path);
        corpus.insert(corpus.end(), texts.begin(), texts.end());
        // Intent names are answers, so their tokens must be in the vocab too.
        try {
          for (const auto& e : intent_name_examples(load_dataset(path).registry)) corpus.push_back(e.text);
        } catch (const DataError&) {
          // unlabeled corpus
        }
      }
      const auto vocab = build_vocab(corpus, bv_min_freq);
      ensure_parent(bv_out);
      save_vocab(vocab, bv_out);
      std::cout << "V=" << vocab.size() << "\n";
    } else if (*pt) {
      const auto ec = pt_flags.resolve();
      const auto vocab = load_vocab(pt_vocab);
      const auto texts = load_texts(pt_data);
      auto init = init_params(model_config(ec, vocab), 0, ec.train.seed);
      auto tcfg = ec.train;
      tcfg.stage = Stage::pretrain;
      std::string log = log_header(tcfg, false);
      const auto result = pretrain(texts, vocab, std::move(init), tcfg, echo_epochs(log));
      ensure_parent(pt_out);
      save_checkpoint(result.params, pt_out);
      write_text(pt_log.empty() ? pt_out + ".log" : pt_log, log);
      std::cout << "wrote " << pt_out << "\n";
    } else if (*ft) {
      auto ec = ft_flags.resolve();
      ft_arm.apply(ec.train);
      ec.train.stage = Stage::finetune;
      const auto vocab = load_vocab(ft_vocab);
      std::optional<IntentRegistry> reg;
      if (!ft_intents.empty()) reg = load_intents(ft_intents);
      const auto data = load_dataset(ft_data, reg ? &*reg : nullptr);
      auto init = initial_encoder(ft_init, "--init", ft_arm, vocab);
      const bool pretrained = init.has_value();
      if (!init) init = init_params(model_config(ec, vocab), data.num_classes(), ec.train.seed);
      std::string log = log_header(ec.train, pretrained);
      const auto result = finetune(data.examples, data.registry, vocab, std::move(*init), ec.train, echo_epochs(log));
      ensure_parent(ft_out);
      save_checkpoint(result.params, ft_out);
      write_text(ft_log.empty() ? ft_out + ".log" : ft_log, log);
      std::cout << "wrote " << ft_out << "\n";
    } else if (*ix) {
      const auto p = load_checkpoint(ix_ckpt);
      const auto vocab = load_vocab(ix_vocab);
      const auto reg = load_intents(ix_intents);
      const auto idx = build_answer_index(p, vocab, reg, ix_nlist, ix_seed, !ix_no_quant);
      ensure_parent(ix_out);
      save_index(idx, ix_out);
      std::cout << "C=" << idx.entries.size() << " tokens=" << idx.total_tokens() << " nlist=" << idx.nlist() << "\n";
    } else if (*pr) {
      if (pr_text_opt->count() == 0 && !pr_stdin) throw UsageError("pass --text or --stdin-jsonl");
      const auto p = load_checkpoint(pr_ckpt);
      const auto vocab = load_vocab(pr_vocab);
      const auto idx = load_index(pr_index);
      const auto reg = load_intents(pr_intents);
      const std::size_t nprobe = pr_nprobe == 0 ? idx.nlist() : pr_nprobe;
      auto run = [&](const std::string& text) {
        const auto q = project_query(text, p, vocab);
        if (q.dim() != idx.dim) throw ShapeMismatchError("model and index projection widths differ");
        const auto hit = search(idx, q, 1, nprobe).front();
        if (hit.label < 0 || static_cast<std::size_t>(hit.label) >= reg.size()) {
          throw DataError("index label " + std::to_string(hit.label) + " is not in --intents");
        }
        return std::pair{reg.name(hit.label), hit.score};
      };
      if (pr_stdin) {
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(std::cin, line)) {
          ++lineno;
          if (detail::trim(line).empty()) continue;
          nlohmann::json in;
          try {
            in = nlohmann::json::parse(line);
          } catch (const nlohmann::json::parse_error&) {
            throw DataError("stdin: line " + std::to_string(lineno) + " is not valid JSON");
          }
          if (!in.is_object() || !in.contains("text") || !in["text"].is_string()) {
            throw DataError("stdin: line " + std::to_string(lineno) + " needs a string field \"text\"");
          }
          const auto text = in["text"].get<std::string>();
          const auto [name, score] = run(text);
          std::cout << nlohmann::json{{"text", text}, {"intent", name}, {"score", score}}.dump() << "\n";
        }
      } else {
        std::cout << run(pr_text).first << "\n";
      }
    } else if (*ev) {
      const auto vocab = load_vocab(ev_vocab);
      if (ev_seeds.empty()) {
        if (ev_ckpt.empty() || ev_index.empty() || ev_intents.empty()) {
          throw UsageError("eval needs --checkpoint, --index and --intents (or --seeds with --train)");
        }
        const auto reg = load_intents(ev_intents);
        const auto test = load_dataset(ev_test, &reg, Split::test);
        const auto p = load_checkpoint(ev_ckpt);
        const auto idx = load_index(ev_index);
        auto report = evaluate(test, p, vocab, idx);
        print_report(report, ev_json, ev_report);
      } else {
        if (ev_train.empty()) throw UsageError("--seeds needs --train");
        auto ec = ev_flags.resolve();
        ev_arm.apply(ec.train);
        ec.train.stage = Stage::finetune;
        std::optional<IntentRegistry> reg;
        if (!ev_intents.empty()) reg = load_intents(ev_intents);
        auto train = load_dataset(ev_train, reg ? &*reg : nullptr);
        PipelineConfig pc;
        pc.test = load_dataset(ev_test, &train.registry, Split::test);
        pc.train = std::move(train);
        pc.vocab = vocab;
        pc.init = initial_encoder(ev_ckpt, "--checkpoint", ev_arm, vocab);
        pc.model = pc.init ? pc.init->config : model_config(ec, vocab);
        pc.finetune = ec.train;
        pc.nlist = ev_nlist;
        pc.quantize = !ev_no_quant;
        print_report(multi_seed_eval(pc, ev_seeds), ev_json, ev_report);
      }
    } else if (*gt) {
      const auto task = synthetic::make_toy_task(gt_seed, gt_shots, gt_test);
      const fs::path dir = gt_dir;
      fs::create_directories(dir);
      save_dataset(task.train, dir / "train.jsonl");
      save_dataset(task.test, dir / "test.jsonl");
      save_registry(task.train.registry, dir / "intents.txt");
      std::cout << "train=" << task.train.examples.size() << " test=" << task.test.examples.size()
                << " intents=" << task.train.registry.size() << "\n";
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
