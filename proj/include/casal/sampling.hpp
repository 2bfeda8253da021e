#pragma once

#include "casal/model.hpp"

#include <map>

namespace casal {

struct SamplingConfig {
    double temperature = 0.7;  // 0 means greedy argmax
    double top_p = 0.8;
    int top_k = 20;            // 0 disables top-k truncation
    int max_new_tokens = 4;
    std::uint64_t seed = 0;

    static SamplingConfig greedy(int max_new_tokens = 4) { return {0.0, 1.0, 0, max_new_tokens, 0}; }
};

void validate(const SamplingConfig& s);
void to_json(nlohmann::json& j, const SamplingConfig& s);
void from_json(const nlohmann::json& j, SamplingConfig& s);

/// Next-token distribution after temperature scaling, top-k truncation, nucleus truncation and
/// renormalization. Tokens outside the support get probability exactly 0. With temperature 0 the
/// result is a point mass on the argmax (lowest id on ties).
std::vector<double> truncated_distribution(const RowVec& logits, const SamplingConfig& s);

TokenId sample_token(const RowVec& logits, const SamplingConfig& s, Rng& rng);

/// Memo of last-position logits keyed by token prefix. Only valid for one (weights, edit) pair.
class LogitsCache {
public:
    const RowVec* find(const Tokens& prefix) const {
        auto it = memo_.find(prefix);
        return it == memo_.end() ? nullptr : &it->second;
    }
    void insert(const Tokens& prefix, RowVec logits) { memo_.emplace(prefix, std::move(logits)); }
    std::size_t size() const { return memo_.size(); }

private:
    std::map<Tokens, RowVec> memo_;
};

/// Autoregressive sampling. Returns only the generated tokens; generation stops after
/// max_new_tokens or right after emitting any of the terminal tokens (which is included).
Tokens sample_completion(const TransformerWeights& weights, const ModelConfig& config, const Tokens& prompt,
                         const SamplingConfig& sampling, const std::vector<TokenId>& terminal_tokens = {},
                         const ResidualEdit* edit = nullptr, LogitsCache* cache = nullptr);

/// Same as sample_completion but draws from a caller-owned generator.
Tokens sample_completion(const TransformerWeights& weights, const ModelConfig& config, const Tokens& prompt,
                         const SamplingConfig& sampling, Rng& rng, const std::vector<TokenId>& terminal_tokens,
                         const ResidualEdit* edit, LogitsCache* cache);

}  // namespace casal
