#include "casal/probe.hpp"

#include <algorithm>
#include <set>

namespace casal {

namespace {

void check_tau(int k, int tau) {
    if (k <= 0) throw Error("probe: k must be positive");
    if (tau > k) throw Error("probe: tau must not exceed k");
    if (2 * tau <= k) {
        throw Error("probe: tau = " + std::to_string(tau) + " with k = " + std::to_string(k) +
                    " would break disjointness of the known and unknown sets; tau must exceed k/2");
    }
}

std::string to_string(AnswerMatch m) { return m == AnswerMatch::exact_token ? "exact_token" : "substring"; }

}  // namespace

void validate(const ProbeConfig& p) {
    check_tau(p.k, p.tau);
    validate(p.sampling);
}

void to_json(nlohmann::json& j, const ProbeConfig& p) {
    j = {{"k", p.k},
         {"tau", p.tau},
         {"sampling", p.sampling},
         {"matcher", to_string(p.matcher)},
         {"terminal_tokens", p.terminal_tokens}};
}

void from_json(const nlohmann::json& j, ProbeConfig& p) {
    ProbeConfig d;
    p.k = j.value("k", d.k);
    p.tau = j.value("tau", d.tau);
    p.sampling = j.contains("sampling") ? j.at("sampling").get<SamplingConfig>() : d.sampling;
    const std::string m = j.value("matcher", std::string("exact_token"));
    if (m == "exact_token") {
        p.matcher = AnswerMatch::exact_token;
    } else if (m == "substring") {
        p.matcher = AnswerMatch::substring;
    } else {
        throw Error("unknown matcher: " + m);
    }
    p.terminal_tokens = j.value("terminal_tokens", d.terminal_tokens);
}

ProbeRun probe_samples(const TransformerWeights& weights, const ModelConfig& config,
                       const std::vector<QueryRecord>& queries, const ProbeConfig& probe) {
    validate(probe);
    if (queries.empty()) throw Error("probe: no queries");
    if (probe.matcher != AnswerMatch::exact_token) throw Error("probe: token models are scored with exact_token matching");
    ProbeRun run;
    run.config = probe;
    const AbstainMatcher abstain = AbstainMatcher::token();
    for (const auto& q : queries) {
        Rng rng(derive_seed(probe.sampling.seed, "probe", q.id));
        LogitsCache cache;
        int correct = 0, abstained = 0;
        for (int i = 0; i < probe.k; ++i) {
            Completion c{q.id, sample_completion(weights, config, q.prompt, probe.sampling, rng, probe.terminal_tokens,
                                                 nullptr, &cache),
                         {}};
            correct += is_correct(c, q, probe.matcher) ? 1 : 0;
            abstained += abstain.matches(c) ? 1 : 0;
        }
        run.ids.push_back(q.id);
        run.correct.push_back(correct);
        run.abstained.push_back(abstained);
    }
    return run;
}

void to_json(nlohmann::json& j, const KnowledgeSplit& s) {
    j = {{"k", s.k}, {"tau", s.tau}, {"known", s.known}, {"unknown", s.unknown}, {"ambiguous", s.ambiguous},
         {"scores", s.scores}};
}

void from_json(const nlohmann::json& j, KnowledgeSplit& s) {
    s.k = j.at("k").get<int>();
    s.tau = j.at("tau").get<int>();
    s.known = j.at("known").get<std::vector<std::string>>();
    s.unknown = j.at("unknown").get<std::vector<std::string>>();
    s.ambiguous = j.value("ambiguous", std::vector<std::string>{});
    s.scores = j.value("scores", std::map<std::string, int>{});
}

KnowledgeSplit split_from_scores(const std::vector<std::string>& ids, const std::vector<int>& scores, int k, int tau) {
    check_tau(k, tau);
    if (ids.size() != scores.size()) throw Error("probe: ids and scores differ in length");
    KnowledgeSplit s;
    s.k = k;
    s.tau = tau;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const int score = scores[i];
        if (score < 0 || score > k) throw Error("probe: score out of range for id " + ids[i]);
        if (!s.scores.emplace(ids[i], score).second) throw Error("probe: duplicate id " + ids[i]);
        if (score >= tau) {
            s.known.push_back(ids[i]);
        } else if (k - score >= tau) {
            s.unknown.push_back(ids[i]);
        } else {
            s.ambiguous.push_back(ids[i]);
        }
    }
    return s;
}

KnowledgeSplit probe_knowledge(const TransformerWeights& weights, const ModelConfig& config,
                               const std::vector<QueryRecord>& queries, const ProbeConfig& probe) {
    const ProbeRun run = probe_samples(weights, config, queries, probe);
    return split_from_scores(run.ids, run.correct, probe.k, probe.tau);
}

std::vector<SweepRow> threshold_sweep(const ProbeRun& run, const std::vector<int>& taus) {
    std::vector<SweepRow> rows;
    const int k = run.config.k;
    for (int tau : taus) {
        const KnowledgeSplit s = split_from_scores(run.ids, run.correct, k, tau);
        SweepRow r;
        r.tau = tau;
        r.n_known = s.known.size();
        r.n_unknown = s.unknown.size();
        long correct_known = 0, halluc_unknown = 0;
        for (std::size_t i = 0; i < run.ids.size(); ++i) {
            if (run.correct[i] >= tau) {
                correct_known += run.correct[i];
            } else if (k - run.correct[i] >= tau) {
                halluc_unknown += k - run.abstained[i];
            }
        }
        r.known_acc = r.n_known ? static_cast<double>(correct_known) / static_cast<double>(r.n_known * k) : 0.0;
        r.unknown_halluc = r.n_unknown ? static_cast<double>(halluc_unknown) / static_cast<double>(r.n_unknown * k) : 0.0;
        rows.push_back(r);
    }
    return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
    std::string out = "tau,n_known,n_unknown,known_acc,unknown_halluc\n";
    for (const auto& r : rows) {
        out += std::to_string(r.tau) + "," + std::to_string(r.n_known) + "," + std::to_string(r.n_unknown) + "," +
               csv_number(r.known_acc) + "," + csv_number(r.unknown_halluc) + "\n";
    }
    return out;
}

nlohmann::json split_file(const ProbeConfig& probe, const KnowledgeSplit& split) {
    nlohmann::json j = split;
    j["probe"] = probe;
    return j;
}

KnowledgeSplit read_split_file(const fs::path& path) {
    const auto j = nlohmann::json::parse(read_text(path));
    KnowledgeSplit s = j.get<KnowledgeSplit>();
    check_tau(s.k, s.tau);
    std::set<std::string> known(s.known.begin(), s.known.end());
    for (const auto& id : s.unknown) {
        if (known.count(id)) throw Error("split file " + path.string() + ": id " + id + " is both known and unknown");
    }
    return s;
}

}  // namespace casal
