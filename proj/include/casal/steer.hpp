#pragma once

#include "casal/metrics.hpp"
#include "casal/probe.hpp"

#include <optional>
#include <string>
#include <vector>

namespace casal {

/// Residual-stream rows at one layer, one row per query id.
struct ActivationMatrix {
    int layer_index = 0;
    StreamPoint stream_point = StreamPoint::post_layer;
    PositionPolicy position_policy = PositionPolicy::last_token;
    std::vector<std::string> ids;
    Mat rows;
};

/// Final-prompt-token activations of every query at the given layer and stream point.
ActivationMatrix extract_activations(const TransformerWeights& weights, const ModelConfig& config,
                                     const std::vector<QueryRecord>& queries, int layer,
                                     StreamPoint point = StreamPoint::post_layer);

/// Rows for the given ids, in that order.
Mat select_rows(const ActivationMatrix& acts, const std::vector<std::string>& ids);

struct SteeringPack {
    int layer = 0;
    double alpha = 4.0;
    RowVec mean_known;
    RowVec mean_unknown;
    RowVec v_unknown;  // mean_unknown - mean_known
    RowVec v_known;    // mean_known - mean_unknown
    std::vector<std::string> train_known_ids;
    std::vector<std::string> train_unknown_ids;
    std::string split_hash;
};

/// Difference-of-means steering vectors. Throws "degenerate split" when either set is empty.
SteeringPack compute_steering_pack(const Mat& known_acts, const Mat& unknown_acts, double alpha, int layer);

enum class Label { known, unknown };

std::string to_string(Label l);

/// t(x) = a(x) + alpha * v_label for every row.
Mat make_targets(const Mat& acts, const SteeringPack& pack, Label label);

void save_pack(const fs::path& path, const SteeringPack& pack);
SteeringPack load_pack(const fs::path& path);
std::string hash_pack(const SteeringPack& pack);

/// Train/evaluation halves of a split: each label's ids sorted by a seeded hash, the first
/// ceil(n/2) go to training.
struct SplitHalves {
    std::vector<std::string> train_known, train_unknown, eval_known, eval_unknown;
};

SplitHalves split_halves(const KnowledgeSplit& split, std::uint64_t seed);

/// Generation with alpha * v_unknown added to the residual stream after block `layer`.
Tokens caa_generate(const TransformerWeights& weights, const ModelConfig& config, const Tokens& prompt,
                    const SteeringPack& pack, int layer, double alpha, PositionPolicy positions,
                    const SamplingConfig& sampling, const std::vector<TokenId>& terminal_tokens = {kEos, kAbstain});

struct LayerMetrics {
    int layer = 0;
    double alpha = 4.0;
    double halluc_unknown = 0.0;
    double acc_known = 0.0;
    double refusal_known = 0.0;
};

struct LayerSelection {
    int layer = 0;
    double alpha = 4.0;  // steering strength of the winning row
    bool within_budget = true;  // false: no layer met the accuracy budget, best effort returned
    double baseline_acc = 0.0;
    std::vector<LayerMetrics> table;
};

/// argmin hallucination subject to (baseline_acc - acc) <= budget; ties by smaller accuracy drop,
/// then lower layer, then smaller alpha. Without a feasible row, the smallest accuracy drop wins and
/// within_budget is false.
LayerSelection choose_layer(const std::vector<LayerMetrics>& table, double baseline_acc, double budget = 0.05);

/// Greedy completions of the given queries, optionally under CAA steering.
std::vector<Completion> generate_all(const TransformerWeights& weights, const ModelConfig& config,
                                     const std::vector<QueryRecord>& queries, const SamplingConfig& sampling,
                                     const ResidualEdit* edit = nullptr);

/// CAA sweep: for each candidate layer builds a pack from the training halves, steers the
/// evaluation halves and applies choose_layer.
LayerSelection select_layer(const TransformerWeights& weights, const ModelConfig& config,
                            const std::vector<QueryRecord>& train_known, const std::vector<QueryRecord>& train_unknown,
                            const std::vector<QueryRecord>& eval_known, const std::vector<QueryRecord>& eval_unknown,
                            const std::vector<int>& candidate_layers, double alpha, double budget = 0.05,
                            PositionPolicy positions = PositionPolicy::all_tokens);

/// Same sweep over every (layer, alpha) pair; one pack per layer.
LayerSelection select_layer(const TransformerWeights& weights, const ModelConfig& config,
                            const std::vector<QueryRecord>& train_known, const std::vector<QueryRecord>& train_unknown,
                            const std::vector<QueryRecord>& eval_known, const std::vector<QueryRecord>& eval_unknown,
                            const std::vector<int>& candidate_layers, const std::vector<double>& alphas,
                            double budget = 0.05, PositionPolicy positions = PositionPolicy::all_tokens);

std::string layer_sweep_csv(const std::vector<LayerMetrics>& rows);

}  // namespace casal
