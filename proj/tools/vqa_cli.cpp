// SPDX-License-Identifier: Apache-2.0

// Command-line front end: run, curate, eval, replay, prompts.
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

#include "vqa/harness.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw vqa::FormatError("cannot write " + path.string());
    out << text;
}

struct RunArgs {
    std::string dataset, config, out, metric, report;
    std::size_t concurrency = 0;
    int max_reflections = 0;
};

int cmd_run(const RunArgs& a) {
    vqa::RunConfig cfg;
    std::vector<vqa::Sample> samples;
    try {
        cfg = vqa::load_config(a.config);
        if (!a.metric.empty())
            cfg.metric = vqa::parse_metric(a.metric);
        if (a.concurrency > 0)
            cfg.concurrency = a.concurrency;
        if (a.max_reflections > 0)
            cfg.max_reflections = a.max_reflections;
        samples = vqa::load_dataset(a.dataset);
    } catch (const vqa::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const vqa::FormatError& e) {
        std::cerr << "dataset error: " << e.what() << '\n';
        return kExitUsage;
    }
    for (const auto& w : cfg.warnings)
        std::cerr << "warning: " << w << '\n';

    try {
        auto pipeline = vqa::Pipeline::from_config(cfg);
        auto result = vqa::run_batch(samples, pipeline, {cfg.concurrency, cfg.metric}, std::filesystem::path(a.out));
        auto text = vqa::render_report(result.report);
        std::cout << text;
        if (!a.report.empty())
            write_text(a.report, text);
    } catch (const vqa::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "run failed: " << e.what() << '\n';
        return kExitRuntime;
    }
    return kExitOk;
}

struct CurateArgs {
    std::string kind, dataset, config, out, audit;
    int samples_per_item = 3;
    std::size_t concurrency = 0;
};

// Curation inputs are either candidate audit records (retained ones are used)
// or plain lines {"image", "description", "analysis"?}.
std::vector<vqa::CurationItem> load_curation_items(const std::filesystem::path& path, vqa::CandidateKind kind) {
    const auto base = path.parent_path();
    std::map<std::string, vqa::ImagePtr> cache;
    auto image_for = [&](const std::string& ref) {
        auto& img = cache[ref];
        if (!img)
            img = vqa::load_image(base / ref);
        return img;
    };
    std::vector<vqa::CandidateRecord> audit;
    std::vector<vqa::CurationItem> items;
    vqa::for_each_json_line(path, [&](const nlohmann::json& j, std::size_t lineno) {
        if (j.contains("kind")) {
            audit.push_back(vqa::candidate_from_json(j));
            return;
        }
        if (!j.contains("image") || !j.contains("description"))
            throw vqa::FormatError(path.string() + ":" + std::to_string(lineno) + ": needs image and description");
        vqa::CurationItem item;
        item.image_ref = j["image"].get<std::string>();
        item.image = image_for(item.image_ref);
        item.description_d = j["description"].get<std::string>();
        if (j.contains("analysis"))
            item.analysis_input = j["analysis"].get<std::string>();
        items.push_back(std::move(item));
    });
    if (!audit.empty()) {
        if (kind != vqa::CandidateKind::caption)
            throw vqa::FormatError("candidate audit records are only accepted as caption-curation input");
        auto from_audit = vqa::caption_items_from(audit, image_for);
        items.insert(items.end(), from_audit.begin(), from_audit.end());
    }
    return items;
}

int cmd_curate(const CurateArgs& a) {
    vqa::RunConfig cfg;
    std::vector<vqa::CurationItem> items;
    vqa::CandidateKind kind{};
    try {
        kind = vqa::parse_kind(a.kind);
        cfg = vqa::load_config(a.config);
        items = load_curation_items(a.dataset, kind);
    } catch (const vqa::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "input error: " << e.what() << '\n';
        return kExitUsage;
    }
    try {
        auto router = vqa::build_router(cfg);
        auto prompts = cfg.prompts_dir ? vqa::PromptSet::load_dir(*cfg.prompts_dir) : vqa::PromptSet::defaults();
        vqa::CurationOptions opts;
        opts.samples_per_item = a.samples_per_item;
        opts.tau = cfg.thresholds.tau;
        opts.concurrency = a.concurrency > 0 ? a.concurrency : cfg.concurrency;
        auto result = vqa::curate(router, prompts, kind, items, opts);
        auto training = vqa::emit_training_records(prompts, result.retained());
        vqa::write_json_lines(a.out, training);
        auto audit = a.audit.empty() ? a.out + ".candidates.jsonl" : a.audit;
        vqa::write_json_lines(audit, result.candidates);
        for (const auto& f : result.failures)
            std::cerr << "item " << f.item_index << " failed: " << f.error << '\n';
        std::cout << "items: " << items.size() << '\n'
                  << "candidates: " << result.candidates.size() << '\n'
                  << "retained: " << training.size() << '\n'
                  << "failed items: " << result.failures.size() << '\n';
    } catch (const vqa::PreconditionError& e) {
        std::cerr << "curate: " << e.what() << '\n';
        return kExitUsage;
    } catch (const vqa::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "curate failed: " << e.what() << '\n';
        return kExitRuntime;
    }
    return kExitOk;
}

int cmd_eval(const std::string& file, const std::string& metric) {
    try {
        auto traj = vqa::read_trajectories(file);
        auto mode = metric.empty() ? traj.header.metric : vqa::parse_metric(metric);
        std::cout << vqa::render_report(vqa::accuracy(traj.records, mode));
    } catch (const vqa::ConfigError& e) {
        std::cerr << "usage: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "eval failed: " << e.what() << '\n';
        return kExitRuntime;
    }
    return kExitOk;
}

int cmd_replay(const std::string& file, const std::string& expect) {
    try {
        auto text = vqa::render_report(vqa::replay(file));
        std::cout << text;
        if (!expect.empty() && vqa::read_file(expect) != text) {
            std::cerr << "replay: report differs from " << expect << '\n';
            return kExitRuntime;
        }
    } catch (const std::exception& e) {
        std::cerr << "replay failed: " << e.what() << '\n';
        return kExitRuntime;
    }
    return kExitOk;
}

int cmd_prompts(const std::string& dir) {
    try {
        std::filesystem::create_directories(dir);
        for (const auto& def : vqa::prompt::builtin())
            write_text(std::filesystem::path(dir) / (std::string(def.name) + ".txt"), std::string(def.text));
    } catch (const std::exception& e) {
        std::cerr << "prompts: " << e.what() << '\n';
        return kExitRuntime;
    }
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Visual question answering pipeline"};
    app.require_subcommand(1);

    RunArgs run;
    auto* run_cmd = app.add_subcommand("run", "Run the pipeline over a dataset");
    run_cmd->add_option("--dataset", run.dataset, "Dataset JSONL")->required()->check(CLI::ExistingFile);
    run_cmd->add_option("--config", run.config, "Run configuration JSON")->required()->check(CLI::ExistingFile);
    run_cmd->add_option("--out", run.out, "Trajectory output file")->required();
    run_cmd->add_option("--metric", run.metric, "exact or consensus")->check(CLI::IsMember({"exact", "consensus"}));
    run_cmd->add_option("--concurrency", run.concurrency, "Samples in flight")->check(CLI::PositiveNumber);
    run_cmd->add_option("--max-reflections", run.max_reflections, "Reasoning attempts per sample")
        ->check(CLI::PositiveNumber);
    run_cmd->add_option("--report", run.report, "Also write the report text here");

    CurateArgs cur;
    auto* cur_cmd = app.add_subcommand("curate", "Sample teacher candidates and keep the judged ones");
    cur_cmd->add_option("--kind", cur.kind, "analysis or caption")
        ->required()
        ->check(CLI::IsMember({"analysis", "caption"}));
    cur_cmd->add_option("--dataset", cur.dataset, "Curation input JSONL")->required()->check(CLI::ExistingFile);
    cur_cmd->add_option("--config", cur.config, "Run configuration JSON")->required()->check(CLI::ExistingFile);
    cur_cmd->add_option("--samples-per-item", cur.samples_per_item, "Teacher samples per item")
        ->check(CLI::PositiveNumber);
    cur_cmd->add_option("--out", cur.out, "Training records JSONL")->required();
    cur_cmd->add_option("--audit", cur.audit, "Candidate audit JSONL (default: <out>.candidates.jsonl)");
    cur_cmd->add_option("--concurrency", cur.concurrency, "Items in flight")->check(CLI::PositiveNumber);

    std::string eval_file, eval_metric;
    auto* eval_cmd = app.add_subcommand("eval", "Score a trajectory file");
    eval_cmd->add_option("trajectories", eval_file, "Trajectory file")->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--metric", eval_metric, "Override the recorded metric")
        ->check(CLI::IsMember({"exact", "consensus"}));

    std::string replay_file, replay_expect;
    auto* replay_cmd = app.add_subcommand("replay", "Recompute the report from a trajectory file");
    replay_cmd->add_option("trajectories", replay_file, "Trajectory file")->required()->check(CLI::ExistingFile);
    replay_cmd->add_option("--expect", replay_expect, "Report text the replay must reproduce byte-for-byte")
        ->check(CLI::ExistingFile);

    std::string prompts_dir;
    auto* prompts_cmd = app.add_subcommand("prompts", "Write the built-in prompt templates to a directory");
    prompts_cmd->add_option("dir", prompts_dir, "Target directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kExitOk : kExitUsage;
    }

    if (*run_cmd)
        return cmd_run(run);
    if (*cur_cmd)
        return cmd_curate(cur);
    if (*eval_cmd)
        return cmd_eval(eval_file, eval_metric);
    if (*prompts_cmd)
        return cmd_prompts(prompts_dir);
    return cmd_replay(replay_file, replay_expect);
}
