#pragma once

#include "casal/corpus.hpp"

#include <span>
#include <string>
#include <vector>

namespace casal {

/// One generated completion. Token completions use `tokens`; external text corpora use `text`.
struct Completion {
    std::string id;
    Tokens tokens;
    std::string text;
};

enum class AbstainMode { token, substring };

/// Decides whether a completion abstains: the reserved token as first generated token, or
/// case-insensitive containment of any lexicon phrase.
struct AbstainMatcher {
    AbstainMode mode = AbstainMode::token;
    TokenId abstain_token = kAbstain;
    std::vector<std::string> lexicon;

    static AbstainMatcher token(TokenId abstain = kAbstain) { return {AbstainMode::token, abstain, {}}; }
    static AbstainMatcher substring(std::vector<std::string> lexicon);

    bool matches(const Completion& c) const;
};

/// English refusal phrases used by the substring matcher by default.
const std::vector<std::string>& default_refusal_lexicon();

enum class AnswerMatch { exact_token, substring };

/// Exact token-span equality (trailing EOS ignored) or case-insensitive containment of answer_text.
bool is_correct(const Completion& c, const QueryRecord& truth, AnswerMatch mode);

/// Fraction of known-query completions that abstain.
double refusal_rate(std::span<const Completion> completions, const AbstainMatcher& m);
/// Fraction of unknown-query completions that do not abstain.
double hallucination_rate(std::span<const Completion> completions, const AbstainMatcher& m);
double accuracy(std::span<const Completion> completions, std::span<const QueryRecord> truths, AnswerMatch mode);

/// Mean silhouette of two labelled clusters (labels 0/1) under Euclidean distance.
/// Throws when either cluster has fewer than two points.
double silhouette(const Mat& points, const std::vector<int>& labels);

/// Normal-approximation standard error of a binomial proportion.
double binomial_se(double p, std::size_t n);

/// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> x, std::span<const double> y);

struct MetricsRow {
    std::string run_id;
    std::string split;
    std::size_t n = 0;
    double halluc = 0.0;
    double refusal = 0.0;
    double acc = 0.0;
    double silhouette = 0.0;  // NaN when not computed
    double se_halluc = 0.0;
    double se_refusal = 0.0;
    double se_acc = 0.0;
};

std::string metrics_csv(const std::vector<MetricsRow>& rows);

struct CompletionRecord {
    std::string id;
    Tokens tokens;
    std::string text;
    bool matched_abstain = false;
    bool correct = false;
};

void to_json(nlohmann::json& j, const CompletionRecord& r);
void from_json(const nlohmann::json& j, CompletionRecord& r);

/// Line-delimited dump of completions with their match flags.
std::string completion_dump(const std::vector<CompletionRecord>& records);
std::vector<CompletionRecord> parse_completion_dump(const std::string& text);

/// Formats a double for CSV output with round-trip precision.
std::string csv_number(double v);

}  // namespace casal
