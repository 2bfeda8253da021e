#pragma once

#include "casal/casal_train.hpp"
#include "casal/flops.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace casal {

struct SteerSettings {
    double alpha = 4.0;                        // strength of the CASAL targets
    std::optional<int> layer;                  // fixed L*; skips the CAA sweep when set
    std::vector<int> candidate_layers;         // empty: interior layers 1 .. n_layer-2
    std::vector<double> selection_alphas{1, 2, 4, 6, 8};
    double budget = 0.05;
    PositionPolicy positions = PositionPolicy::all_tokens;
};

struct CasalSettings {
    SubmoduleChoice submodule = SubmoduleChoice::down;
    CasalTrainOptions train;
    int max_rows = 0;                          // cap on cached rows (both labels); 0 = no cap
    std::vector<double> size_fractions{0.25, 0.5, 0.75, 1.0};
    int trajectory_batch_size = 0;             // mini-batch size of the silhouette trajectory run
    int trajectory_snapshot_every = 1;
};

struct BaselineSettings {
    bool caa = true;
    bool sft = true;
    PretrainOptions sft_options{1e-3, 200, 16, 0.0, 0, 50, 0, 0};
};

struct RunConfig {
    FactWorldSpec world;
    std::string corpus_path;                   // optional file holding a world spec; replaces `world`
    ModelConfig model;
    PretrainOptions pretrain;
    ProbeConfig probe;
    SteerSettings steer;
    CasalSettings casal;
    BaselineSettings baselines;
    std::vector<int> tau_sweep{6, 7, 8};
    std::optional<ArchSpec> flops;
    std::string out = "run";
    std::uint64_t seed = 0;
    std::vector<std::string> stages;           // empty: every stage (flops only with a spec)
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

inline const std::vector<std::string>& all_stages() {
    static const std::vector<std::string> s{"pretrain", "probe", "select", "steer", "train", "eval", "report", "flops"};
    return s;
}

/// Config JSON with environment overrides applied. A variable PREFIX_A__B=value sets key a.b;
/// the value is parsed as JSON and falls back to a string. Returns the applied overrides.
nlohmann::json apply_env_overrides(nlohmann::json& config, const std::map<std::string, std::string>& env,
                                   const std::string& prefix = "CASAL_");

/// Process environment as a map.
std::map<std::string, std::string> process_environment();

/// Effective config: sub-seeds derived from the master seed, vocabulary sized to the world,
/// default stage list and candidate layers filled in.
RunConfig resolve(RunConfig config);

struct RunOptions {
    bool resume = false;
    nlohmann::json env_overrides = nlohmann::json::object();
};

/// Runs the configured stages into config.out. Throws StageError naming the failed stage.
void run(const RunConfig& config, const RunOptions& options = {});

class StageError : public Error {
public:
    StageError(const std::string& stage, const std::string& what)
        : Error("stage " + stage + " failed: " + what), stage_(stage) {}
    const std::string& stage() const { return stage_; }

private:
    std::string stage_;
};

/// Config snapshot stored in a run directory's manifest.
RunConfig load_run_config(const fs::path& run_dir);

/// Re-emits the report CSVs of an existing run.
void report(const fs::path& run_dir);

struct ArmMetrics {
    std::string arm;
    double halluc_unknown = 0.0;
    double acc_known = 0.0;
    double refusal_known = 0.0;
};

/// CAA at one (layer, alpha) on the evaluation halves of a run; writes metrics/caa_L<l>_a<alpha>.csv.
ArmMetrics run_caa(const fs::path& run_dir, int layer, double alpha, PositionPolicy positions);

/// Query records of a run's evaluation halves.
struct EvalSets {
    std::vector<QueryRecord> known;
    std::vector<QueryRecord> unknown;
};

EvalSets load_eval_sets(const fs::path& run_dir);

/// Greedy metrics of a model on the evaluation halves.
ArmMetrics evaluate_arm(const std::string& arm, const TransformerWeights& weights, const ModelConfig& config,
                        const EvalSets& sets, const ResidualEdit* edit = nullptr);

inline constexpr char kToolVersion[] = "casal-lab 1.0.0";

}  // namespace casal
