#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>

#include "qaid/qaid.hpp"
#include "test_util.hpp"

#ifndef QAID_CLI
#error "QAID_CLI must point at the qaid executable"
#endif

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
  std::string err;
};

// Runs the CLI with `args` (already shell-quoted where needed), capturing
// stdout and stderr. `stdin_file` is fed to standard input when given.
Run cli(const TempDir& dir, const std::string& args, const fs::path& stdin_file = {}) {
  static int n = 0;
  const auto out = dir / ("out" + std::to_string(n) + ".txt");
  const auto err = dir / ("err" + std::to_string(n++) + ".txt");
  std::string cmd = std::string("'") + QAID_CLI + "' " + args + " >'" + out.string() + "' 2>'" + err.string() + "'";
  if (!stdin_file.empty()) cmd += " <'" + stdin_file.string() + "'";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

// Toy task, vocab, a short pretrain and finetune, and an index, built once.
class CliPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir();
    const auto& d = *dir_;
    const std::string cfg = std::string(QAID_SOURCE_DIR) + "/configs/";
    auto must = [&](const std::string& args) {
      const auto r = cli(d, args);
      ASSERT_EQ(r.code, 0) << args << "\n" << r.err;
    };
    must("gen-toy --out-dir " + q(d.path()));
    must("build-vocab --data " + q(d / "train.jsonl") + " --out " + q(d / "vocab.txt"));
    must("pretrain --data " + q(d / "train.jsonl") + " --vocab " + q(d / "vocab.txt") + " --config " + cfg +
         "toy_pretrain.cfg --epochs 2 --seed 1 --out " + q(d / "pt.ckpt"));
    must("finetune --data " + q(d / "train.jsonl") + " --vocab " + q(d / "vocab.txt") + " --init " + q(d / "pt.ckpt") +
         " --intents " + q(d / "intents.txt") + " --config " + cfg + "toy_finetune.cfg --epochs 3 --seed 1 --out " +
         q(d / "ft.ckpt"));
    must("index --checkpoint " + q(d / "ft.ckpt") + " --vocab " + q(d / "vocab.txt") + " --intents " +
         q(d / "intents.txt") + " --out " + q(d / "answers.idx"));
  }
  static void TearDownTestSuite() { delete dir_; }

  static const TempDir& d() { return *dir_; }
  static std::string model_args() {
    return "--checkpoint " + q(d() / "ft.ckpt") + " --vocab " + q(d() / "vocab.txt") + " --intents " +
           q(d() / "intents.txt");
  }
  static std::string finetune_args(const std::string& extra, const fs::path& out) {
    return "finetune --data " + q(d() / "train.jsonl") + " --vocab " + q(d() / "vocab.txt") + " --intents " +
           q(d() / "intents.txt") + " --config " + QAID_SOURCE_DIR + "/configs/toy_finetune.cfg --epochs 1 --seed 2 " +
           extra + " --out " + q(out);
  }

  static TempDir* dir_;
};

TempDir* CliPipeline::dir_ = nullptr;

}  // namespace

TEST_F(CliPipeline, GenToyWritesTheSplits) {
  const auto reg = qaid::load_registry(d() / "intents.txt");
  EXPECT_EQ(reg.size(), 10u);
  EXPECT_EQ(qaid::load_dataset(d() / "train.jsonl").examples.size(), 50u);
  EXPECT_EQ(count_lines(slurp(d() / "test.jsonl")), 200u);
}

TEST_F(CliPipeline, BuildVocabReportsSizeAndIsReproducible) {
  const auto r = cli(d(), "build-vocab --data " + q(d() / "train.jsonl") + " --out " + q(d() / "v2.txt"));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out, "V=" + std::to_string(count_lines(slurp(d() / "v2.txt"))) + "\n");
  EXPECT_EQ(slurp(d() / "v2.txt"), slurp(d() / "vocab.txt"));
  // Intent names are covered even when no query uses them verbatim.
  const auto vocab = qaid::load_vocab(d() / "v2.txt");
  for (const auto& e : qaid::intent_name_examples(qaid::load_registry(d() / "intents.txt"))) {
    for (const auto& tok : qaid::tokenize(e.text)) EXPECT_NE(vocab.id(tok), qaid::kUnkId) << tok;
  }
}

TEST_F(CliPipeline, MissingRequiredOptionIsUsageError) {
  EXPECT_EQ(cli(d(), "build-vocab --out " + q(d() / "x.txt")).code, 1);
  EXPECT_EQ(cli(d(), "").code, 1);
  EXPECT_EQ(cli(d(), "no-such-command").code, 1);
  EXPECT_EQ(cli(d(), "pretrain --data " + q(d() / "train.jsonl") + " --vocab " + q(d() / "vocab.txt") +
                         " --out " + q(d() / "x.ckpt") + " --epochs -3").code,
            1);
}

TEST_F(CliPipeline, PretrainHelpShowsDefaults) {
  const auto r = cli(d(), "pretrain --help");
  EXPECT_EQ(r.code, 0);
  for (const char* s : {"--epochs", "20", "--batch-size", "64", "--tau", "0.07", "--lambda", "0.1", "1e-05"}) {
    EXPECT_NE(r.out.find(s), std::string::npos) << s;
  }
  const auto f = cli(d(), "finetune --help");
  for (const char* s : {"--lambda-class", "--lambda-mlm", "0.05", "--no-pretrain", "--loss"}) {
    EXPECT_NE(f.out.find(s), std::string::npos) << s;
  }
}

TEST_F(CliPipeline, ZeroEpochPretrainWritesTheInitialization) {
  const auto r = cli(d(), "pretrain --data " + q(d() / "train.jsonl") + " --vocab " + q(d() / "vocab.txt") +
                              " --epochs 0 --seed 5 --out " + q(d() / "zero.ckpt"));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto p = qaid::load_checkpoint(d() / "zero.ckpt");
  EXPECT_EQ(p, qaid::init_params(p.config, 0, 5));
  EXPECT_EQ(p.config.d_model, 64u);
}

TEST_F(CliPipeline, PretrainIsDeterministicAndLogged) {
  const std::string base = "pretrain --data " + q(d() / "train.jsonl") + " --vocab " + q(d() / "vocab.txt") +
                           " --config " + QAID_SOURCE_DIR + "/configs/toy_pretrain.cfg --epochs 2 --seed 1 --out ";
  ASSERT_EQ(cli(d(), base + q(d() / "again.ckpt")).code, 0);
  EXPECT_EQ(slurp(d() / "again.ckpt"), slurp(d() / "pt.ckpt"));
  const auto log = slurp(d() / "pt.ckpt.log");
  EXPECT_EQ(log.rfind("# stage=pretrain", 0), 0u);
  EXPECT_EQ(count_lines(log), 4u);
}

TEST_F(CliPipeline, FinetuneNeedsExactlyOneStartingPoint) {
  EXPECT_EQ(cli(d(), finetune_args("", d() / "x.ckpt")).code, 1);
  EXPECT_EQ(cli(d(), finetune_args("--no-pretrain --init " + q(d() / "pt.ckpt"), d() / "x.ckpt")).code, 1);
  EXPECT_FALSE(fs::exists(d() / "x.ckpt"));
}

TEST_F(CliPipeline, AblationArmsDiffer) {
  const std::string init = "--init " + q(d() / "pt.ckpt");
  const std::vector<std::pair<std::string, std::string>> arms{{"full", init},
                                                              {"npairs", init + " --loss npairs"},
                                                              {"cls", init + " --score cls"},
                                                              {"noaug", init + " --no-augment"},
                                                              {"nopt", "--no-pretrain"}};
  std::set<std::string> seen;
  for (const auto& [name, extra] : arms) {
    const auto out = d() / (name + ".ckpt");
    const auto r = cli(d(), finetune_args(extra, out));
    ASSERT_EQ(r.code, 0) << name << "\n" << r.err;
    seen.insert(slurp(out));
  }
  EXPECT_EQ(seen.size(), arms.size());
  const auto header = slurp(d() / "npairs.ckpt.log");
  EXPECT_NE(header.find("loss=npairs"), std::string::npos);
  EXPECT_NE(slurp(d() / "cls.ckpt.log").find("score=cls"), std::string::npos);
  EXPECT_NE(slurp(d() / "nopt.ckpt.log").find("init=fresh"), std::string::npos);
}

TEST_F(CliPipeline, IndexReportsClassesAndIsDeterministic) {
  const auto r = cli(d(), "index " + model_args() + " --out " + q(d() / "again.idx"));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out.rfind("C=10 ", 0), 0u) << r.out;
  EXPECT_EQ(slurp(d() / "again.idx"), slurp(d() / "answers.idx"));
}

TEST_F(CliPipeline, PredictText) {
  const auto r = cli(d(), "predict " + model_args() + " --index " + q(d() / "answers.idx") + " --text 'hello there'");
  ASSERT_EQ(r.code, 0) << r.err;
  ASSERT_EQ(count_lines(r.out), 1u);
  const auto reg = qaid::load_registry(d() / "intents.txt");
  EXPECT_TRUE(reg.find(r.out.substr(0, r.out.size() - 1)).has_value()) << r.out;
}

TEST_F(CliPipeline, PredictStdinJsonl) {
  const auto in = d().write("in.jsonl", "{\"text\": \"book a table\"}\n\n{\"text\": \"\"}\n{\"text\": \"qqqq zzzz\"}\n");
  const auto r = cli(d(), "predict " + model_args() + " --index " + q(d() / "answers.idx") + " --stdin-jsonl", in);
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream lines(r.out);
  std::string line;
  std::size_t n = 0;
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_TRUE(j["text"].is_string());
    EXPECT_TRUE(j["intent"].is_string());
    EXPECT_TRUE(j["score"].is_number());
    ++n;
  }
  EXPECT_EQ(n, 3u);
  const auto bad = d().write("bad.jsonl", "{\"text\": 3}\n");
  EXPECT_EQ(cli(d(), "predict " + model_args() + " --index " + q(d() / "answers.idx") + " --stdin-jsonl", bad).code,
            2);
}

TEST_F(CliPipeline, PredictNeedsAnInput) {
  EXPECT_EQ(cli(d(), "predict " + model_args() + " --index " + q(d() / "answers.idx")).code, 1);
}

TEST_F(CliPipeline, EvalJsonReport) {
  const auto r = cli(d(), "eval " + model_args() + " --index " + q(d() / "answers.idx") + " --test " +
                              q(d() / "test.jsonl") + " --json --report " + q(d() / "r.json"));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j, nlohmann::json::parse(slurp(d() / "r.json")));
  EXPECT_EQ(j["n_test"], 200);
  EXPECT_EQ(j["per_intent"].size(), 10u);
  const double acc = j["accuracy"];
  EXPECT_GE(acc, 0.0);
  EXPECT_LE(acc, 1.0);
  const auto table = cli(d(), "eval " + model_args() + " --index " + q(d() / "answers.idx") + " --test " +
                                  q(d() / "test.jsonl"));
  EXPECT_NE(table.out.find("accuracy"), std::string::npos);
}

TEST_F(CliPipeline, EvalAcrossSeeds) {
  const auto r = cli(d(), "eval --checkpoint " + q(d() / "pt.ckpt") + " --vocab " + q(d() / "vocab.txt") +
                              " --train " + q(d() / "train.jsonl") + " --test " + q(d() / "test.jsonl") +
                              " --config " + QAID_SOURCE_DIR + "/configs/toy_finetune.cfg --epochs 1 --seeds 1 2 --json");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j["seeds"], nlohmann::json({1, 2}));
  ASSERT_EQ(j["seed_accuracies"].size(), 2u);
  const double a = j["seed_accuracies"][0], b = j["seed_accuracies"][1];
  EXPECT_DOUBLE_EQ(j["mean_accuracy"].get<double>(), (a + b) / 2.0);
  EXPECT_DOUBLE_EQ(j["std_accuracy"].get<double>(), std::abs(a - b) / 2.0);
  EXPECT_EQ(cli(d(), "eval --vocab " + q(d() / "vocab.txt") + " --test " + q(d() / "test.jsonl") + " --seeds 1").code,
            1);
}

TEST_F(CliPipeline, DataErrorsExitTwo) {
  const auto bad = d().write("bad.jsonl", "{\"text\": \"a\", \"intent\": \"x\"}\nnot json\n");
  EXPECT_EQ(cli(d(), "build-vocab --data " + q(bad) + " --out " + q(d() / "v.txt")).code, 2);
  EXPECT_EQ(cli(d(), "build-vocab --data " + q(d() / "missing.jsonl") + " --out " + q(d() / "v.txt")).code, 2);
  auto bytes = slurp(d() / "ft.ckpt");
  d().write("corrupt.ckpt", bytes.substr(0, bytes.size() / 2));
  const auto r = cli(d(), "index --checkpoint " + q(d() / "corrupt.ckpt") + " --vocab " + q(d() / "vocab.txt") +
                              " --intents " + q(d() / "intents.txt") + " --out " + q(d() / "c.idx"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("error"), std::string::npos);
  // A vocab that does not match the checkpoint is a shape mismatch.
  d().write("tiny_vocab.txt", "[PAD]\n[MASK]\n[CLS]\n[UNK]\nhello\n");
  EXPECT_EQ(cli(d(), "index --checkpoint " + q(d() / "ft.ckpt") + " --vocab " + q(d() / "tiny_vocab.txt") +
                         " --intents " + q(d() / "intents.txt") + " --out " + q(d() / "c.idx"))
                .code,
            2);
}
