// SPDX-License-Identifier: Apache-2.0

// Drives the built command-line tool and checks exit codes and outputs.

#include "vqa/backend.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <sys/wait.h>

using namespace vqa;

namespace {

int run(const std::string& args, const std::filesystem::path& stdout_file = "/dev/null") {
    std::string cmd = std::string(VQA_CLI_PATH) + " " + args + " >" + stdout_file.string() + " 2>/dev/null";
    int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string fx(const std::string& name) { return (test::fixture_dir() / name).string(); }

}  // namespace

TEST(Cli, RunEvalReplay) {
    test::TempDir dir;
    auto traj = (dir / "t.jsonl").string();
    ASSERT_EQ(run("run --dataset " + fx("dataset.jsonl") + " --config " + fx("config.json") + " --out " + traj +
                      " --report " + (dir / "report.txt").string(),
                  dir / "stdout.txt"),
              0);
    auto report = read_file(dir / "report.txt");
    EXPECT_EQ(read_file(dir / "stdout.txt"), report);
    EXPECT_NE(report.find("overall                 10      80.0"), std::string::npos) << report;

    EXPECT_EQ(run("replay " + traj + " --expect " + (dir / "report.txt").string(), dir / "replay.txt"), 0);
    EXPECT_EQ(read_file(dir / "replay.txt"), report);
    EXPECT_EQ(run("eval " + traj, dir / "eval.txt"), 0);
    EXPECT_EQ(read_file(dir / "eval.txt"), report);

    test::write_file(dir / "other.txt", "not the report\n");
    EXPECT_EQ(run("replay " + traj + " --expect " + (dir / "other.txt").string()), 2);
}

TEST(Cli, ExitCodes) {
    test::TempDir dir;
    EXPECT_EQ(run(""), 1);
    EXPECT_EQ(run("run --dataset " + fx("dataset.jsonl")), 1);
    EXPECT_EQ(run("run --dataset " + fx("dataset.jsonl") + " --config " + fx("config.json") + " --out x --metric odd"),
              1);
    test::write_file(dir / "bad.json", "{\"thresholds\": {\"tau\": 2}}");
    EXPECT_EQ(run("run --dataset " + fx("dataset.jsonl") + " --config " + (dir / "bad.json").string() + " --out " +
                  (dir / "t.jsonl").string()),
              1);
    EXPECT_EQ(run("run --dataset " + fx("dataset.jsonl") + " --config " + fx("config.json") +
                  " --out /nonexistent/dir/t.jsonl"),
              2);
    test::write_file(dir / "trunc.jsonl", "{\"format\":\"vqa-trajectory\",\"version\":1,\"config_fingerprint\":\"x\","
                                          "\"metric\":\"exact\"}\n{\"index\":0");
    EXPECT_EQ(run("replay " + (dir / "trunc.jsonl").string()), 2);
    EXPECT_EQ(run("--help"), 0);
}

TEST(Cli, MaxReflectionsOverride) {
    test::TempDir dir;
    auto traj = (dir / "t.jsonl").string();
    ASSERT_EQ(run("run --dataset " + fx("dataset.jsonl") + " --config " + fx("config.json") + " --out " + traj +
                  " --max-reflections 1 --concurrency 1"),
              0);
    auto text = read_file(traj);
    EXPECT_EQ(text.find("\"attempt\":2"), std::string::npos);
}

TEST(Cli, Curate) {
    test::TempDir dir;
    std::filesystem::copy(test::fixture_dir() / "images", dir / "images");
    test::write_file(dir / "items.jsonl",
                     "{\"image\":\"images/s04.png\",\"description\":\"man stepping out of train door.\"}\n");
    std::string scenario = R"({"entries":[
        {"role":"teacher_llm","match":"Task: teacher-analysis","response":"The man leaves the train."},
        {"role":"teacher_llm","match":"Task: teacher-analysis","response":"The door is open."},
        {"role":"teacher_llm","match":"Task: teacher-analysis","response":"A train."},
        {"role":"judge_f","match":"The man leaves the train.","response":"0.8"},
        {"role":"judge_f","match":"The door is open.","response":"0.6"},
        {"role":"judge_f","match":"A train.","response":"0.4"},
        {"role":"teacher_llm","match":"Task: teacher-caption","response":"A man steps off a train."},
        {"role":"judge_f","match":"A man steps off a train.","response":"0.9"}]})";
    test::write_file(dir / "scenario.json", scenario);
    test::write_file(dir / "config.json", R"({"backends":{"default":{"kind":"scripted","script":"scenario.json"}}})");

    auto cfg = (dir / "config.json").string();
    auto analysis = (dir / "analysis.jsonl").string();
    ASSERT_EQ(run("curate --kind analysis --dataset " + (dir / "items.jsonl").string() + " --config " + cfg +
                  " --samples-per-item 3 --out " + analysis),
              0);
    auto training = read_file(analysis);
    EXPECT_EQ(std::count(training.begin(), training.end(), '\n'), 1);
    EXPECT_NE(training.find("The man leaves the train."), std::string::npos);
    auto audit = read_file(analysis + ".candidates.jsonl");
    EXPECT_EQ(std::count(audit.begin(), audit.end(), '\n'), 3);

    // caption curation from the analysis audit consumes only the retained analysis
    ASSERT_EQ(run("curate --kind caption --dataset " + analysis + ".candidates.jsonl --config " + cfg +
                  " --samples-per-item 1 --out " + (dir / "caption.jsonl").string()),
              0);
    auto caption = read_file(dir / "caption.jsonl");
    EXPECT_NE(caption.find("A man steps off a train."), std::string::npos);

    // plain caption input without an analysis is a usage error
    EXPECT_EQ(run("curate --kind caption --dataset " + (dir / "items.jsonl").string() + " --config " + cfg +
                  " --out " + (dir / "c2.jsonl").string()),
              1);
}
