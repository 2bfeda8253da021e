#include "casal/runner.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

using namespace casal;

struct Common {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    bool resume = false;
    std::vector<std::string> stages;
};

void add_common(CLI::App* app, Common& c, bool with_stages) {
    app->add_option("--config", c.config, "Run config (JSON)");
    app->add_option("--out", c.out, "Run directory");
    app->add_option("--seed", c.seed, "Master seed");
    app->add_flag("--resume", c.resume, "Reuse stages whose inputs and config are unchanged");
    if (with_stages) app->add_option("--stages", c.stages, "Stages to run")->delimiter(',');
}

/// File config (or the run directory's stored config), then environment overrides, then flags.
std::pair<RunConfig, nlohmann::json> build_config(const Common& c, bool prefer_manifest) {
    nlohmann::json j = nlohmann::json::object();
    if (!c.config.empty()) {
        j = nlohmann::json::parse(read_text(c.config));
    } else if (prefer_manifest && !c.out.empty() && fs::exists(fs::path(c.out) / "manifest.json")) {
        j = nlohmann::json::parse(read_text(fs::path(c.out) / "manifest.json")).at("config");
    }
    const nlohmann::json applied = apply_env_overrides(j, process_environment());
    RunConfig cfg = j.get<RunConfig>();
    if (!c.out.empty()) cfg.out = c.out;
    if (c.seed) cfg.seed = *c.seed;
    if (!c.stages.empty()) cfg.stages = c.stages;
    return {cfg, applied};
}

void print_metrics(const ArmMetrics& m) {
    std::cout << m.arm << ": halluc_unknown=" << m.halluc_unknown << " acc_known=" << m.acc_known
              << " refusal_known=" << m.refusal_known << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Amortized activation steering lab"};
    app.require_subcommand(1);

    Common run_opts;
    auto* run_cmd = app.add_subcommand("run", "Run the configured stages");
    add_common(run_cmd, run_opts, true);

    std::string report_dir;
    auto* report_cmd = app.add_subcommand("report", "Re-emit report CSVs of a run");
    report_cmd->add_option("--out", report_dir, "Run directory")->required();

    struct StageCmd {
        std::string stage;
        CLI::App* app;
        Common opts;
    };
    std::vector<StageCmd> stage_cmds;
    stage_cmds.reserve(5);
    for (const auto& [name, stage, help] : std::vector<std::tuple<std::string, std::string, std::string>>{
             {"probe", "probe", "Probe the knowledge boundary"},
             {"select-layer", "select", "CAA layer sweep and selection"},
             {"steer", "steer", "Steering pack at the selected layer"},
             {"train", "train", "CASAL training and weight substitution"},
             {"eval", "eval", "Evaluate the baseline, CASAL, CAA and SFT arms"}}) {
        stage_cmds.push_back({stage, app.add_subcommand(name, help), {}});
        add_common(stage_cmds.back().app, stage_cmds.back().opts, false);
    }

    std::string caa_dir;
    int caa_layer = 0;
    double caa_alpha = 4.0;
    std::string caa_positions = "all_tokens";
    auto* caa_cmd = app.add_subcommand("caa", "Inference-time steering on a run's evaluation halves");
    caa_cmd->add_option("--out", caa_dir, "Run directory")->required();
    caa_cmd->add_option("--layer", caa_layer, "Steering layer")->required();
    caa_cmd->add_option("--alpha", caa_alpha, "Steering strength");
    caa_cmd->add_option("--positions", caa_positions, "all_tokens or last_token");

    std::string spec_path;
    std::optional<std::uint64_t> lora_rank;
    bool context = false, embedding = false, as_json = false, as_csv = false;
    auto* flops_cmd = app.add_subcommand("flops", "Parameter and FLOPs ledger");
    flops_cmd->add_option("--spec", spec_path, "Architecture spec (JSON)")->required();
    flops_cmd->add_option("--lora-rank", lora_rank, "LoRA rank");
    flops_cmd->add_flag("--context", context, "Include attention context FLOPs");
    flops_cmd->add_flag("--embedding", embedding, "Include unembedding FLOPs");
    auto* json_flag = flops_cmd->add_flag("--json", as_json, "JSON output (default)");
    flops_cmd->add_flag("--csv", as_csv, "CSV output")->excludes(json_flag);

    CLI11_PARSE(app, argc, argv);

    try {
        if (run_cmd->parsed()) {
            auto [cfg, applied] = build_config(run_opts, false);
            run(cfg, RunOptions{run_opts.resume, applied});
            std::cout << "run complete: " << cfg.out << "\n";
        } else if (report_cmd->parsed()) {
            report(report_dir);
            std::cout << "report written: " << report_dir << "\n";
        } else if (caa_cmd->parsed()) {
            print_metrics(run_caa(caa_dir, caa_layer, caa_alpha, position_policy_from_string(caa_positions)));
        } else if (flops_cmd->parsed()) {
            ArchSpec spec = nlohmann::json::parse(read_text(spec_path)).get<ArchSpec>();
            if (lora_rank) spec.lora_rank = *lora_rank;
            if (as_csv) {
                std::cout << ledger_csv(spec, context, embedding);
            } else {
                std::cout << ledger_json(spec, context, embedding).dump(2) << "\n";
            }
        } else {
            for (auto& sc : stage_cmds) {
                if (!sc.app->parsed()) continue;
                if (sc.opts.out.empty()) throw Error("--out is required");
                auto [cfg, applied] = build_config(sc.opts, true);
                cfg.stages = {sc.stage};
                run(cfg, RunOptions{true, applied});
                std::cout << "stage " << sc.stage << " complete: " << cfg.out << "\n";
            }
        }
    } catch (const StageError& e) {
        std::cerr << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
