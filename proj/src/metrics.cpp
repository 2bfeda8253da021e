#include "casal/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace casal {

namespace {

std::string lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

void require_nonempty(std::size_t n, const char* what) {
    if (n == 0) throw Error(std::string(what) + ": no completions");
}

}  // namespace

AbstainMatcher AbstainMatcher::substring(std::vector<std::string> lexicon) {
    AbstainMatcher m;
    m.mode = AbstainMode::substring;
    for (auto& s : lexicon) m.lexicon.push_back(lower(s));
    return m;
}

bool AbstainMatcher::matches(const Completion& c) const {
    if (mode == AbstainMode::token) return !c.tokens.empty() && c.tokens.front() == abstain_token;
    const std::string text = lower(c.text);
    for (const auto& phrase : lexicon) {
        if (!phrase.empty() && text.find(lower(phrase)) != std::string::npos) return true;
    }
    return false;
}

const std::vector<std::string>& default_refusal_lexicon() {
    static const std::vector<std::string> lexicon = {
        "doesn't have much information",
        "is not in my knowledge base",
        "is not in my database",
        "without knowing",
        "i can only find",
        "unable to identify",
        "does not contain any",
        "not discernible",
        "is not known",
        "provide more detailed",
        "need more specific",
        "provide more details",
        "cannot confirm",
        "without additional context or information",
        "without more information",
        "not sufficient to",
        "don't have access",
        "not sufficient to identify",
        "not sufficient to determine",
        "not possible to identify",
        "cannot be determined",
        "cannot be identified",
        "not enough to identify",
        "not possible to determine",
        "difficult to accurately identify",
        "difficult to identify",
        "difficult to",
        "does not provide",
        "does not provide direct information",
        "not clearly indicate",
        "not typically listed on public",
        "not typically listed on wikipedia",
        "not publicly available information",
        "not readily available",
        "do not have",
        "do not have information",
        "i need more information",
    };
    return lexicon;
}

bool is_correct(const Completion& c, const QueryRecord& truth, AnswerMatch mode) {
    if (mode == AnswerMatch::exact_token) return !truth.answer.empty() && strip_terminal(c.tokens) == truth.answer;
    if (truth.answer_text.empty()) throw Error("accuracy: substring mode needs answer_text for id " + truth.id);
    return lower(c.text).find(lower(truth.answer_text)) != std::string::npos;
}

double refusal_rate(std::span<const Completion> completions, const AbstainMatcher& m) {
    require_nonempty(completions.size(), "refusal_rate");
    const auto hits = std::count_if(completions.begin(), completions.end(), [&](const Completion& c) { return m.matches(c); });
    return static_cast<double>(hits) / static_cast<double>(completions.size());
}

double hallucination_rate(std::span<const Completion> completions, const AbstainMatcher& m) {
    require_nonempty(completions.size(), "hallucination_rate");
    const auto misses =
        std::count_if(completions.begin(), completions.end(), [&](const Completion& c) { return !m.matches(c); });
    return static_cast<double>(misses) / static_cast<double>(completions.size());
}

double accuracy(std::span<const Completion> completions, std::span<const QueryRecord> truths, AnswerMatch mode) {
    if (completions.size() != truths.size()) throw Error("accuracy: completions and ground truths differ in length");
    require_nonempty(completions.size(), "accuracy");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < completions.size(); ++i) hits += is_correct(completions[i], truths[i], mode) ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(completions.size());
}

double silhouette(const Mat& points, const std::vector<int>& labels) {
    const auto n = static_cast<std::size_t>(points.rows());
    if (labels.size() != n) throw ShapeError("silhouette: one label per point required");
    std::size_t count[2] = {0, 0};
    for (int l : labels) {
        if (l != 0 && l != 1) throw Error("silhouette: labels must be 0 or 1");
        ++count[l];
    }
    if (count[0] < 2 || count[1] < 2) throw Error("silhouette: each cluster needs at least two points");

    std::vector<double> sum_same(n, 0.0), sum_other(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            const double d = (points.row(static_cast<Eigen::Index>(i)) - points.row(static_cast<Eigen::Index>(j))).norm();
            auto& si = labels[i] == labels[j] ? sum_same : sum_other;
            si[i] += d;
            si[j] += d;
        }
    }
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const int l = labels[i];
        const double a = sum_same[i] / static_cast<double>(count[l] - 1);
        const double b = sum_other[i] / static_cast<double>(count[1 - l]);
        const double m = std::max(a, b);
        total += m > 0.0 ? (b - a) / m : 0.0;
    }
    return total / static_cast<double>(n);
}

double binomial_se(double p, std::size_t n) {
    if (n == 0) return std::numeric_limits<double>::quiet_NaN();
    return std::sqrt(std::max(0.0, p * (1.0 - p)) / static_cast<double>(n));
}

namespace {

std::vector<double> ranks(std::span<const double> x) {
    std::vector<std::size_t> order(x.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<double> r(x.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
        i = j + 1;
    }
    return r;
}

}  // namespace

double spearman(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw Error("spearman: length mismatch");
    if (x.size() < 2) throw Error("spearman: need at least two pairs");
    const auto rx = ranks(x), ry = ranks(y);
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
    const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) return std::numeric_limits<double>::quiet_NaN();
    return sxy / std::sqrt(sxx * syy);
}

std::string csv_number(double v) {
    if (std::isnan(v)) return "";
    std::ostringstream ss;
    ss.precision(17);
    ss << v;
    return ss.str();
}

std::string metrics_csv(const std::vector<MetricsRow>& rows) {
    std::string out = "run_id,split,n,halluc,refusal,acc,silhouette,se_halluc,se_refusal,se_acc\n";
    for (const auto& r : rows) {
        out += r.run_id + "," + r.split + "," + std::to_string(r.n) + "," + csv_number(r.halluc) + "," +
               csv_number(r.refusal) + "," + csv_number(r.acc) + "," + csv_number(r.silhouette) + "," +
               csv_number(r.se_halluc) + "," + csv_number(r.se_refusal) + "," + csv_number(r.se_acc) + "\n";
    }
    return out;
}

void to_json(nlohmann::json& j, const CompletionRecord& r) {
    j = {{"id", r.id}, {"completion_tokens", r.tokens}, {"matched_abstain", r.matched_abstain}, {"correct", r.correct}};
    if (!r.text.empty()) j["completion_text"] = r.text;
}

void from_json(const nlohmann::json& j, CompletionRecord& r) {
    r.id = j.at("id").get<std::string>();
    r.tokens = j.value("completion_tokens", Tokens{});
    r.text = j.value("completion_text", std::string{});
    r.matched_abstain = j.at("matched_abstain").get<bool>();
    r.correct = j.at("correct").get<bool>();
}

std::string completion_dump(const std::vector<CompletionRecord>& records) {
    std::string out;
    for (const auto& r : records) out += nlohmann::json(r).dump() + "\n";
    return out;
}

std::vector<CompletionRecord> parse_completion_dump(const std::string& text) {
    std::vector<CompletionRecord> out;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        out.push_back(nlohmann::json::parse(line).get<CompletionRecord>());
    }
    return out;
}

}  // namespace casal
