#include "casal/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace casal {

void validate(const SamplingConfig& s) {
    if (!(s.temperature >= 0.0) || !std::isfinite(s.temperature)) throw Error("sampling: temperature must be >= 0");
    if (!(s.top_p > 0.0 && s.top_p <= 1.0)) throw Error("sampling: top_p must lie in (0, 1]");
    if (s.top_k < 0) throw Error("sampling: top_k must be non-negative");
    if (s.max_new_tokens <= 0) throw Error("sampling: max_new_tokens must be positive");
}

void to_json(nlohmann::json& j, const SamplingConfig& s) {
    j = {{"temperature", s.temperature}, {"top_p", s.top_p}, {"top_k", s.top_k},
         {"max_new_tokens", s.max_new_tokens}, {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, SamplingConfig& s) {
    SamplingConfig d;
    s.temperature = j.value("temperature", d.temperature);
    s.top_p = j.value("top_p", d.top_p);
    s.top_k = j.value("top_k", d.top_k);
    s.max_new_tokens = j.value("max_new_tokens", d.max_new_tokens);
    s.seed = j.value("seed", d.seed);
}

std::vector<double> truncated_distribution(const RowVec& logits, const SamplingConfig& s) {
    validate(s);
    const auto V = static_cast<std::size_t>(logits.size());
    if (V == 0) throw Error("sampling: empty logits");
    if (!logits.allFinite()) throw Error("sampling: non-finite logits leave no valid candidates");
    std::vector<double> p(V, 0.0);
    if (s.temperature == 0.0 || s.top_k == 1) {
        Eigen::Index best = 0;
        logits.maxCoeff(&best);  // first maximal index
        p[static_cast<std::size_t>(best)] = 1.0;
        return p;
    }
    const double mx = logits.maxCoeff();
    double z = 0.0;
    for (std::size_t v = 0; v < V; ++v) {
        p[v] = std::exp((logits(static_cast<Eigen::Index>(v)) - mx) / s.temperature);
        z += p[v];
    }
    for (auto& x : p) x /= z;

    // Candidates in descending probability, ascending id on ties.
    std::vector<std::size_t> order(V);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
    std::size_t keep = V;
    if (s.top_k > 0) keep = std::min(keep, static_cast<std::size_t>(s.top_k));
    // Nucleus over the top-k survivors, renormalized among themselves.
    double mass_k = 0.0;
    for (std::size_t i = 0; i < keep; ++i) mass_k += p[order[i]];
    if (s.top_p < 1.0) {
        double cum = 0.0;
        std::size_t n = 0;
        while (n < keep) {
            cum += p[order[n]] / mass_k;
            ++n;
            if (cum >= s.top_p) break;
        }
        keep = n;
    }
    if (keep == 0) throw Error("sampling: empty candidate set after filtering");
    std::vector<double> out(V, 0.0);
    double mass = 0.0;
    for (std::size_t i = 0; i < keep; ++i) mass += p[order[i]];
    if (!(mass > 0.0)) throw Error("sampling: empty candidate set after filtering");
    for (std::size_t i = 0; i < keep; ++i) out[order[i]] = p[order[i]] / mass;
    return out;
}

TokenId sample_token(const RowVec& logits, const SamplingConfig& s, Rng& rng) {
    const std::vector<double> p = truncated_distribution(logits, s);
    const double u = rng.uniform();
    double cum = 0.0;
    std::size_t last = 0;
    for (std::size_t v = 0; v < p.size(); ++v) {
        if (p[v] <= 0.0) continue;
        last = v;
        cum += p[v];
        if (u < cum) return static_cast<TokenId>(v);
    }
    return static_cast<TokenId>(last);
}

Tokens sample_completion(const TransformerWeights& w, const ModelConfig& c, const Tokens& prompt,
                         const SamplingConfig& s, Rng& rng, const std::vector<TokenId>& terminal,
                         const ResidualEdit* edit, LogitsCache* cache) {
    validate(s);
    if (prompt.empty()) throw Error("sample_completion: empty prompt");
    if (prompt.size() >= static_cast<std::size_t>(c.n_ctx)) throw Error("sample_completion: prompt does not fit in context");
    Tokens seq = prompt;
    Tokens out;
    for (int step = 0; step < s.max_new_tokens; ++step) {
        RowVec logits;
        if (const RowVec* hit = cache ? cache->find(seq) : nullptr) {
            logits = *hit;
        } else {
            logits = forward(w, c, seq, {}, edit).logits.bottomRows(1);
            if (cache) cache->insert(seq, logits);
        }
        const TokenId next = sample_token(logits, s, rng);
        out.push_back(next);
        if (std::find(terminal.begin(), terminal.end(), next) != terminal.end()) break;
        if (seq.size() == static_cast<std::size_t>(c.n_ctx)) break;
        seq.push_back(next);
    }
    return out;
}

Tokens sample_completion(const TransformerWeights& w, const ModelConfig& c, const Tokens& prompt,
                         const SamplingConfig& s, const std::vector<TokenId>& terminal, const ResidualEdit* edit,
                         LogitsCache* cache) {
    Rng rng(s.seed);
    return sample_completion(w, c, prompt, s, rng, terminal, edit, cache);
}

}  // namespace casal
