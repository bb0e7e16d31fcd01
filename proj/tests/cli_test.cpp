#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "mdm/io.hpp"
#include "test_util.hpp"

using namespace mdm;
using namespace mdm::testutil;
namespace fs = std::filesystem;

namespace {

class CliTest : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() /
               ("mdm_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(dir_);
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }

    std::string path(const std::string& name) const { return (dir_ / name).string(); }

    void write_file(const std::string& name, const std::string& content) const {
        std::ofstream out(path(name));
        out << content;
    }

    std::string slurp(const std::string& name) const {
        std::ifstream in(path(name), std::ios::binary);
        return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }

    int run(const std::string& args) const {
        const std::string cmd = "cd " + dir_.string() + " && " + MDM_CLI_PATH + " " + args +
                                " > cli_stdout.txt 2> cli_stderr.txt";
        const int status = std::system(cmd.c_str());
        return WEXITSTATUS(status);
    }

    std::string stderr_text() const { return slurp("cli_stderr.txt"); }
    std::string stdout_text() const { return slurp("cli_stdout.txt"); }

    fs::path dir_;
};

const char* kTrainConfig = R"({
  "model": {"kind": "tabular", "K": 2, "L": 3},
  "data": {"bigram": {"K": 2, "initial": [0.7, 0.3], "transition": [[0.9, 0.1], [0.2, 0.8]]}},
  "train": {"steps": 100, "batch_size": 16, "learning_rate": 0.2, "seed": 7},
  "out": {"checkpoint": "m.ckpt", "log": "m.log.csv"}
})";

} // namespace

TEST_F(CliTest, TrainWritesLogWithAccountingIdentity) {
    write_file("train.json", kTrainConfig);
    ASSERT_EQ(run("train --config train.json"), 0) << stderr_text();

    std::ifstream log(path("m.log.csv"));
    std::string line;
    std::getline(log, line);
    EXPECT_EQ(line, "step,loss,tokens_seen,flops");
    int rows = 0;
    const auto model = load_checkpoint(path("m.ckpt"));
    const double n = static_cast<double>(model->parameter_count());
    while (std::getline(log, line)) {
        ++rows;
        std::stringstream ss(line);
        std::string step, loss, tokens, flops_field;
        std::getline(ss, step, ',');
        std::getline(ss, loss, ',');
        std::getline(ss, tokens, ',');
        std::getline(ss, flops_field, ',');
        EXPECT_DOUBLE_EQ(std::stod(flops_field), 6.0 * n * std::stod(tokens));
    }
    EXPECT_EQ(rows, 100);
}

TEST_F(CliTest, TrainMissingDatasetNamesTheField) {
    write_file("bad.json", R"({
      "model": {"kind": "tabular", "K": 2, "L": 3},
      "data": {"objective": "sft"},
      "train": {"steps": 10, "batch_size": 4, "learning_rate": 0.1, "seed": 1},
      "out": {"checkpoint": "x.ckpt", "log": "x.csv"}
    })");
    EXPECT_EQ(run("train --config bad.json"), 1);
    EXPECT_NE(stderr_text().find("dataset"), std::string::npos);
}

TEST_F(CliTest, TrainRejectsUnknownConfigKeys) {
    write_file("typo.json", R"({
      "model": {"kind": "tabular", "K": 2, "L": 3},
      "data": {"bigram": {"K": 2, "initial": [0.5, 0.5], "transition": [[0.5, 0.5], [0.5, 0.5]]}},
      "train": {"steps": 10, "batch_size": 4, "learning_rate": 0.1, "seed": 1, "learnig_rate": 0.2},
      "out": {"checkpoint": "x.ckpt", "log": "x.csv"}
    })");
    EXPECT_EQ(run("train --config typo.json"), 1);
    EXPECT_NE(stderr_text().find("learnig_rate"), std::string::npos);
}

TEST_F(CliTest, RepeatedSeedGivesByteIdenticalCheckpoint) {
    write_file("train.json", kTrainConfig);
    ASSERT_EQ(run("train --config train.json"), 0) << stderr_text();
    const std::string first_ckpt = slurp("m.ckpt");
    const std::string first_log = slurp("m.log.csv");
    ASSERT_EQ(run("train --config train.json"), 0);
    EXPECT_EQ(slurp("m.ckpt"), first_ckpt);
    EXPECT_EQ(slurp("m.log.csv"), first_log);

    ASSERT_EQ(run("train --config train.json --seed 8 --out other"), 0);
    EXPECT_NE(slurp("other.ckpt"), first_ckpt);
}

TEST_F(CliTest, SampleNfeAccountingAndDeterminism) {
    write_file("train.json", kTrainConfig);
    ASSERT_EQ(run("train --config train.json"), 0) << stderr_text();

    write_file("greedy.json", R"({"sample": {"kind": "greedy", "steps": 3, "length": 3, "seed": 1, "count": 2}})");
    ASSERT_EQ(run("sample --config greedy.json --checkpoint m.ckpt --out g.jsonl"), 0)
        << stderr_text();
    {
        std::ifstream in(path("g.jsonl"));
        std::string line;
        while (std::getline(in, line)) {
            EXPECT_EQ(json::parse(line).at("nfe").get<int>(), 3);
        }
    }

    write_file("cfg.json", R"({"sample": {"kind": "greedy", "steps": 3, "length": 3, "seed": 1,
      "count": 1, "guidance": {"mode": "unsupervised", "scale": 0.5}},
      "prompts": "prompts.jsonl"})");
    write_file("prompts.jsonl", R"({"prompt": [1]})" "\n");
    ASSERT_EQ(run("sample --config cfg.json --checkpoint m.ckpt --out c.jsonl"), 0) << stderr_text();
    EXPECT_EQ(json::parse(slurp("c.jsonl")).at("nfe").get<int>(), 6);

    write_file("anc.json", R"({"sample": {"kind": "ancestral", "steps": 3, "length": 3, "seed": 11, "count": 5}})");
    ASSERT_EQ(run("sample --config anc.json --checkpoint m.ckpt --out a1.jsonl"), 0);
    ASSERT_EQ(run("sample --config anc.json --checkpoint m.ckpt --out a2.jsonl"), 0);
    EXPECT_EQ(slurp("a1.jsonl"), slurp("a2.jsonl"));
    ASSERT_EQ(run("sample --config anc.json --seed 12 --checkpoint m.ckpt --out a3.jsonl"), 0);
    EXPECT_NE(slurp("a3.jsonl"), slurp("a1.jsonl"));
}

TEST_F(CliTest, EvalMultipleChoiceWithOracleCheckpoint) {
    // Oracle-backed checkpoint on a separable task: gold always has the
    // strictly highest conditional probability.
    const OracleModel oracle(std::make_shared<TabularJoint>(joint_from_bigram(example_bigram(), 3)));
    save_checkpoint(path("oracle.ckpt"), oracle, 0);
    std::ostringstream ds;
    ds << R"({"prompt": [0], "options": [[0, 0], [1, 1]], "gold": 0})" << "\n";
    ds << R"({"prompt": [1], "options": [[0, 0], [1, 1]], "gold": 1})" << "\n";
    write_file("ds.jsonl", ds.str());
    write_file("eval.json", R"({"eval": {"method": "chain_rule", "seed": 3}, "dataset": "ds.jsonl"})");
    ASSERT_EQ(run("eval --config eval.json --checkpoint oracle.ckpt --out rep.json"), 0)
        << stderr_text();
    const json report = json::parse(slurp("rep.json"));
    EXPECT_DOUBLE_EQ(report.at("aggregate").at("accuracy").get<double>(), 1.0);

    // Reruns are byte-identical (mc path too).
    write_file("eval_mc.json", R"({"eval": {"method": "mc_elbo", "seed": 3}, "dataset": "ds.jsonl"})");
    ASSERT_EQ(run("eval --config eval_mc.json --checkpoint oracle.ckpt --out r1.json"), 0);
    ASSERT_EQ(run("eval --config eval_mc.json --checkpoint oracle.ckpt --out r2.json"), 0);
    EXPECT_EQ(slurp("r1.json"), slurp("r2.json"));

    // The 128-sample default is what an explicit 128 produces.
    write_file("eval_mc128.json",
               R"({"eval": {"method": "mc_elbo", "mc_samples": 128, "seed": 3}, "dataset": "ds.jsonl"})");
    ASSERT_EQ(run("eval --config eval_mc128.json --checkpoint oracle.ckpt --out r3.json"), 0);
    EXPECT_EQ(slurp("r3.json"), slurp("r1.json"));
    write_file("eval_mc64.json",
               R"({"eval": {"method": "mc_elbo", "mc_samples": 64, "seed": 3}, "dataset": "ds.jsonl"})");
    ASSERT_EQ(run("eval --config eval_mc64.json --checkpoint oracle.ckpt --out r4.json"), 0);
    EXPECT_NE(slurp("r4.json"), slurp("r1.json"));
}

TEST_F(CliTest, EvalEmptyDatasetFails) {
    write_file("train.json", kTrainConfig);
    ASSERT_EQ(run("train --config train.json"), 0);
    write_file("empty.jsonl", "");
    write_file("eval.json",
               R"({"eval": {"method": "chain_rule", "seed": 1}, "dataset": "empty.jsonl"})");
    EXPECT_EQ(run("eval --config eval.json --checkpoint m.ckpt"), 1);
}

TEST_F(CliTest, EvalExactMatchTask) {
    const OracleModel oracle(std::make_shared<TabularJoint>(joint_from_bigram(example_bigram(), 3)));
    save_checkpoint(path("oracle.ckpt"), oracle, 0);
    // Most likely continuations under the bigram: 0 -> 00, 1 -> 11.
    std::ostringstream ds;
    ds << R"({"prompt": [0], "response": [0, 0]})" << "\n";
    ds << R"({"prompt": [1], "response": [1, 1]})" << "\n";
    write_file("ds.jsonl", ds.str());
    write_file("eval.json",
               R"({"eval": {"task": "exact_match", "seed": 1, "sample_steps": 2, "eos_id": 1}, "dataset": "ds.jsonl"})");
    // eos 1 would strip gold tokens; use an unused id instead
    write_file("eval2.json",
               R"({"eval": {"task": "exact_match", "seed": 1, "sample_steps": 2}, "dataset": "ds2.jsonl"})");
    std::ostringstream ds2;
    ds2 << R"({"prompt": [0], "response": [0, 0]})" << "\n";
    write_file("ds2.jsonl", ds2.str());
    ASSERT_EQ(run("eval --config eval2.json --checkpoint oracle.ckpt --out em.json"), 0)
        << stderr_text();
    const json report = json::parse(slurp("em.json"));
    EXPECT_EQ(report.at("aggregate").at("task"), "exact_match");
    EXPECT_DOUBLE_EQ(report.at("aggregate").at("accuracy").get<double>(), 1.0);
}

TEST_F(CliTest, FitScalingRecoversAndReportsGap) {
    // Exact parabolas at three budgets; baseline shifted so the main family
    // needs 16x the compute at equal loss.
    const double alpha = -0.06, beta = 1.2;
    auto emit = [&](const std::string& name, double beta_family) {
        std::ostringstream csv;
        csv << std::setprecision(17);
        csv << "N,D,loss\n";
        for (const double c : {1e18, 1e19, 1e20}) {
            for (const double off : {-1.0, -0.5, 0.0, 0.5, 1.0}) {
                const double u = 0.3 * std::log(c) + off;
                const double n = std::exp(u);
                csv << n << ',' << c / (6.0 * n) << ','
                    << 0.04 * off * off + std::exp(beta_family) * std::pow(c, alpha) << "\n";
            }
        }
        write_file(name, csv.str());
    };
    emit("main.csv", beta);                            // worse family (higher loss)
    emit("base.csv", beta + alpha * std::log(16.0));   // better family
    ASSERT_EQ(run("fit-scaling --in main.csv --baseline base.csv --out fit.json --curve-out curve.csv"), 0)
        << stderr_text();
    const json report = json::parse(slurp("fit.json"));
    EXPECT_NEAR(report.at("main").at("law").at("alpha").get<double>(), alpha, 1e-9);
    for (const auto& ratio : report.at("gap").at("ratios")) {
        EXPECT_NEAR(ratio.get<double>(), 16.0, 1e-6);
    }
    std::ifstream curve(path("curve.csv"));
    std::string line;
    std::getline(curve, line);
    EXPECT_EQ(line, "C,L_star");

    write_file("bad.csv", "N,D,loss\n1e7,1e10,2.5\n1e7,nope,2.5\n");
    EXPECT_EQ(run("fit-scaling --in bad.csv"), 1);
    EXPECT_NE(stderr_text().find("line 3"), std::string::npos);
}

TEST_F(CliTest, OracleCheckDefaultsPassAndCorruptionFails) {
    EXPECT_EQ(run("oracle-check --out chk.json"), 0) << stderr_text();
    EXPECT_NE(stdout_text().find("[ ok ]"), std::string::npos);
    const json report = json::parse(slurp("chk.json"));
    EXPECT_TRUE(report.at("pass").get<bool>());

    // Corrupted fixture: mass does not sum to one; rejected at load with the
    // invariant named.
    write_file("corrupt.json", R"({"K": 2, "L": 2, "probs": [0.5, 0.5, 0.5, 0.5]})");
    write_file("chkcfg.json", R"({"joints": ["corrupt.json"]})");
    EXPECT_EQ(run("oracle-check --config chkcfg.json"), 1);
    EXPECT_NE(stderr_text().find("sum"), std::string::npos);
}

TEST_F(CliTest, ReversalDemoReportShape) {
    write_file("rev.json", R"({"reversal": {"K": 6, "num_facts": 4,
      "train": {"steps": 400, "batch_size": 32, "learning_rate": 0.3},
      "seeds": [3]}})");
    ASSERT_EQ(run("reversal-demo --config rev.json --out rev_report.json"), 0) << stderr_text();
    const json report = json::parse(slurp("rev_report.json"));
    ASSERT_EQ(report.at("runs").size(), 1u);
    EXPECT_TRUE(report.at("runs")[0].contains("reverse_z"));
    // Byte-identical rerun.
    ASSERT_EQ(run("reversal-demo --config rev.json --out rev_report2.json"), 0);
    EXPECT_EQ(slurp("rev_report2.json"), slurp("rev_report.json"));
}

TEST_F(CliTest, SftObjectiveTrainsOnPairs) {
    std::ostringstream ds;
    ds << R"({"prompt": [0, 1], "response": [2]})" << "\n";
    ds << R"({"prompt": [1, 0], "response": [3]})" << "\n";
    write_file("pairs.jsonl", ds.str());
    write_file("sft.json", R"({
      "model": {"kind": "tabular", "K": 4, "L": 4},
      "data": {"dataset": "pairs.jsonl", "objective": "sft", "eos_id": 3},
      "train": {"steps": 200, "batch_size": 8, "learning_rate": 0.3, "seed": 2, "prompt_dropout_prob": 0.1},
      "out": {"checkpoint": "sft.ckpt", "log": "sft.csv"}
    })");
    ASSERT_EQ(run("train --config sft.json"), 0) << stderr_text();
    EXPECT_TRUE(fs::exists(path("sft.ckpt")));
    const auto model = load_checkpoint(path("sft.ckpt"));
    EXPECT_EQ(model->K(), 4);
}
