#pragma once

#include "casal/metrics.hpp"

#include <map>
#include <string>
#include <vector>

namespace casal {

struct ProbeConfig {
    int k = 10;
    int tau = 7;
    SamplingConfig sampling{};  // temperature 0.7, top_p 0.8, top_k 20
    AnswerMatch matcher = AnswerMatch::exact_token;
    std::vector<TokenId> terminal_tokens{kEos, kAbstain};
};

/// Rejects k <= 0, tau > k and tau <= k/2 (known and unknown sets could overlap).
void validate(const ProbeConfig& p);
void to_json(nlohmann::json& j, const ProbeConfig& p);
void from_json(const nlohmann::json& j, ProbeConfig& p);

/// Raw outcome of sampling k completions per query; reused across thresholds.
struct ProbeRun {
    ProbeConfig config;
    std::vector<std::string> ids;
    std::vector<int> correct;   // s(x)
    std::vector<int> abstained; // samples that abstained, per query
};

/// Per-query sub-seed: derive_seed(sampling seed, "probe", id).
ProbeRun probe_samples(const TransformerWeights& weights, const ModelConfig& config,
                       const std::vector<QueryRecord>& queries, const ProbeConfig& probe);

struct KnowledgeSplit {
    int k = 10;
    int tau = 7;
    std::vector<std::string> known;
    std::vector<std::string> unknown;
    std::vector<std::string> ambiguous;
    std::map<std::string, int> scores;
};

void to_json(nlohmann::json& j, const KnowledgeSplit& s);
void from_json(const nlohmann::json& j, KnowledgeSplit& s);

/// known iff s >= tau, unknown iff k - s >= tau, otherwise ambiguous. Order follows `ids`.
KnowledgeSplit split_from_scores(const std::vector<std::string>& ids, const std::vector<int>& scores, int k, int tau);

KnowledgeSplit probe_knowledge(const TransformerWeights& weights, const ModelConfig& config,
                               const std::vector<QueryRecord>& queries, const ProbeConfig& probe);

struct SweepRow {
    int tau = 0;
    std::size_t n_known = 0;
    std::size_t n_unknown = 0;
    double known_acc = 0.0;       // sampled accuracy over known queries
    double unknown_halluc = 0.0;  // fraction of unknown-query samples that did not abstain
};

/// Re-partitions one probe run at every threshold; never re-samples. Thresholds must satisfy
/// k/2 < tau <= k.
std::vector<SweepRow> threshold_sweep(const ProbeRun& run, const std::vector<int>& taus = {6, 7, 8});

std::string sweep_csv(const std::vector<SweepRow>& rows);

/// Split file: probe config, per-id scores and membership.
nlohmann::json split_file(const ProbeConfig& probe, const KnowledgeSplit& split);
KnowledgeSplit read_split_file(const fs::path& path);

}  // namespace casal
