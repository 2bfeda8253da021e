#include "casal/steer.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <tuple>

namespace casal {

ActivationMatrix extract_activations(const TransformerWeights& weights, const ModelConfig& config,
                                     const std::vector<QueryRecord>& queries, int layer, StreamPoint point) {
    if (layer < 0 || layer >= config.n_layer) throw Error("extract_activations: layer out of range");
    ActivationMatrix out;
    out.layer_index = layer;
    out.stream_point = point;
    const Eigen::Index width = point == StreamPoint::ff_intermediate ? config.d_ff : config.d_model;
    out.rows.resize(static_cast<Eigen::Index>(queries.size()), width);
    const std::vector<ActivationTap> taps{{layer, PositionPolicy::last_token, point}};
    for (std::size_t i = 0; i < queries.size(); ++i) {
        if (queries[i].prompt.size() > static_cast<std::size_t>(config.n_ctx)) {
            throw Error("extract_activations: prompt of " + queries[i].id + " exceeds the context");
        }
        out.rows.row(static_cast<Eigen::Index>(i)) = forward(weights, config, queries[i].prompt, taps).captured[0];
        out.ids.push_back(queries[i].id);
    }
    return out;
}

Mat select_rows(const ActivationMatrix& acts, const std::vector<std::string>& ids) {
    std::map<std::string, Eigen::Index> index;
    for (std::size_t i = 0; i < acts.ids.size(); ++i) index.emplace(acts.ids[i], static_cast<Eigen::Index>(i));
    Mat out(static_cast<Eigen::Index>(ids.size()), acts.rows.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        auto it = index.find(ids[i]);
        if (it == index.end()) throw Error("select_rows: no activation for id " + ids[i]);
        out.row(static_cast<Eigen::Index>(i)) = acts.rows.row(it->second);
    }
    return out;
}

namespace {

RowVec column_mean(const Mat& m) {
    // Each column is summed in sorted order so row permutations give identical bits.
    RowVec mean(m.cols());
    std::vector<double> col(static_cast<std::size_t>(m.rows()));
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
        for (Eigen::Index i = 0; i < m.rows(); ++i) col[static_cast<std::size_t>(i)] = m(i, j);
        std::sort(col.begin(), col.end());
        double s = 0.0;
        for (double v : col) s += v;
        mean(j) = s / static_cast<double>(m.rows());
    }
    return mean;
}

}  // namespace

SteeringPack compute_steering_pack(const Mat& known_acts, const Mat& unknown_acts, double alpha, int layer) {
    if (known_acts.rows() == 0 || unknown_acts.rows() == 0) {
        throw Error("compute_steering_pack: degenerate split (known or unknown set is empty)");
    }
    if (known_acts.cols() != unknown_acts.cols()) throw ShapeError("compute_steering_pack: width mismatch");
    if (!known_acts.allFinite() || !unknown_acts.allFinite()) throw Error("compute_steering_pack: non-finite activations");
    SteeringPack p;
    p.layer = layer;
    p.alpha = alpha;
    p.mean_known = column_mean(known_acts);
    p.mean_unknown = column_mean(unknown_acts);
    p.v_unknown = p.mean_unknown - p.mean_known;
    p.v_known = -p.v_unknown;
    return p;
}

std::string to_string(Label l) { return l == Label::known ? "known" : "unknown"; }

Mat make_targets(const Mat& acts, const SteeringPack& pack, Label label) {
    const RowVec& v = label == Label::known ? pack.v_known : pack.v_unknown;
    if (acts.cols() != v.size()) throw ShapeError("make_targets: activation width does not match the pack");
    Mat t = acts;
    t.rowwise() += pack.alpha * v;
    return t;
}

namespace {

TensorFile pack_container(const SteeringPack& p) {
    TensorFile f;
    f.magic = kPackMagic;
    f.header = {{"layer", p.layer},
                {"alpha", p.alpha},
                {"split_hash", p.split_hash},
                {"train_known_ids", p.train_known_ids},
                {"train_unknown_ids", p.train_unknown_ids}};
    f.tensors = {{"mean_known", p.mean_known},
                 {"mean_unknown", p.mean_unknown},
                 {"v_unknown", p.v_unknown},
                 {"v_known", p.v_known}};
    return f;
}

}  // namespace

void save_pack(const fs::path& path, const SteeringPack& pack) { write_tensor_file(path, pack_container(pack)); }

SteeringPack load_pack(const fs::path& path) {
    const TensorFile f = read_tensor_file(path, kPackMagic);
    SteeringPack p;
    p.layer = f.header.at("layer").get<int>();
    p.alpha = f.header.at("alpha").get<double>();
    p.split_hash = f.header.value("split_hash", std::string{});
    p.train_known_ids = f.header.value("train_known_ids", std::vector<std::string>{});
    p.train_unknown_ids = f.header.value("train_unknown_ids", std::vector<std::string>{});
    p.mean_known = f.tensor("mean_known");
    p.mean_unknown = f.tensor("mean_unknown");
    p.v_unknown = f.tensor("v_unknown");
    p.v_known = f.tensor("v_known");
    return p;
}

std::string hash_pack(const SteeringPack& pack) { return sha256_hex(encode_tensor_file(pack_container(pack))); }

SplitHalves split_halves(const KnowledgeSplit& split, std::uint64_t seed) {
    auto halve = [&](std::vector<std::string> ids, std::vector<std::string>& train, std::vector<std::string>& eval) {
        std::stable_sort(ids.begin(), ids.end(), [&](const std::string& a, const std::string& b) {
            const auto ha = derive_seed(seed, "split", a), hb = derive_seed(seed, "split", b);
            return ha != hb ? ha < hb : a < b;
        });
        const std::size_t n_train = (ids.size() + 1) / 2;
        train.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
        eval.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train), ids.end());
    };
    SplitHalves h;
    halve(split.known, h.train_known, h.eval_known);
    halve(split.unknown, h.train_unknown, h.eval_unknown);
    return h;
}

Tokens caa_generate(const TransformerWeights& weights, const ModelConfig& config, const Tokens& prompt,
                    const SteeringPack& pack, int layer, double alpha, PositionPolicy positions,
                    const SamplingConfig& sampling, const std::vector<TokenId>& terminal_tokens) {
    if (layer != pack.layer) {
        throw Error("caa_generate: pack was computed at layer " + std::to_string(pack.layer) + ", requested layer " +
                    std::to_string(layer));
    }
    ResidualEdit edit{layer, alpha * pack.v_unknown, positions};
    return sample_completion(weights, config, prompt, sampling, terminal_tokens, &edit);
}

LayerSelection choose_layer(const std::vector<LayerMetrics>& table, double baseline_acc, double budget) {
    if (table.empty()) throw Error("select_layer: no candidate layers");
    LayerSelection sel;
    sel.baseline_acc = baseline_acc;
    sel.table = table;
    auto drop = [&](const LayerMetrics& m) { return baseline_acc - m.acc_known; };
    auto feasible_key = [&](const LayerMetrics& m) { return std::tuple(m.halluc_unknown, drop(m), m.layer, m.alpha); };
    auto fallback_key = [&](const LayerMetrics& m) { return std::tuple(drop(m), m.halluc_unknown, m.layer, m.alpha); };
    // Absorbs rounding when the drop equals the budget exactly.
    constexpr double kSlack = 1e-12;
    const LayerMetrics* best = nullptr;
    for (const auto& m : table) {
        if (drop(m) > budget + kSlack) continue;
        if (!best || feasible_key(m) < feasible_key(*best)) best = &m;
    }
    if (!best) {
        sel.within_budget = false;
        for (const auto& m : table) {
            if (!best || fallback_key(m) < fallback_key(*best)) best = &m;
        }
    }
    sel.layer = best->layer;
    sel.alpha = best->alpha;
    return sel;
}

std::vector<Completion> generate_all(const TransformerWeights& weights, const ModelConfig& config,
                                     const std::vector<QueryRecord>& queries, const SamplingConfig& sampling,
                                     const ResidualEdit* edit) {
    std::vector<Completion> out;
    out.reserve(queries.size());
    for (const auto& q : queries) {
        SamplingConfig s = sampling;
        s.seed = derive_seed(sampling.seed, "generate", q.id);
        out.push_back({q.id, sample_completion(weights, config, q.prompt, s, {kEos, kAbstain}, edit), {}});
    }
    return out;
}

LayerSelection select_layer(const TransformerWeights& weights, const ModelConfig& config,
                            const std::vector<QueryRecord>& train_known, const std::vector<QueryRecord>& train_unknown,
                            const std::vector<QueryRecord>& eval_known, const std::vector<QueryRecord>& eval_unknown,
                            const std::vector<int>& candidate_layers, double alpha, double budget,
                            PositionPolicy positions) {
    return select_layer(weights, config, train_known, train_unknown, eval_known, eval_unknown, candidate_layers,
                        std::vector<double>{alpha}, budget, positions);
}

LayerSelection select_layer(const TransformerWeights& weights, const ModelConfig& config,
                            const std::vector<QueryRecord>& train_known, const std::vector<QueryRecord>& train_unknown,
                            const std::vector<QueryRecord>& eval_known, const std::vector<QueryRecord>& eval_unknown,
                            const std::vector<int>& candidate_layers, const std::vector<double>& alphas,
                            double budget, PositionPolicy positions) {
    if (eval_known.empty() || eval_unknown.empty()) throw Error("select_layer: evaluation halves must be nonempty");
    if (alphas.empty()) throw Error("select_layer: no steering strengths");
    const AbstainMatcher abstain = AbstainMatcher::token();
    const SamplingConfig greedy = SamplingConfig::greedy();
    const auto base = generate_all(weights, config, eval_known, greedy);
    const double baseline_acc = accuracy(base, eval_known, AnswerMatch::exact_token);
    std::vector<LayerMetrics> table;
    for (int layer : candidate_layers) {
        const Mat k = extract_activations(weights, config, train_known, layer).rows;
        const Mat u = extract_activations(weights, config, train_unknown, layer).rows;
        const SteeringPack pack = compute_steering_pack(k, u, alphas.front(), layer);
        for (double alpha : alphas) {
            const ResidualEdit edit{layer, alpha * pack.v_unknown, positions};
            const auto known = generate_all(weights, config, eval_known, greedy, &edit);
            const auto unknown = generate_all(weights, config, eval_unknown, greedy, &edit);
            table.push_back({layer, alpha, hallucination_rate(unknown, abstain),
                             accuracy(known, eval_known, AnswerMatch::exact_token), refusal_rate(known, abstain)});
        }
    }
    return choose_layer(table, baseline_acc, budget);
}

std::string layer_sweep_csv(const std::vector<LayerMetrics>& rows) {
    std::string out = "layer,alpha,halluc_unknown,acc_known,refusal_known\n";
    for (const auto& r : rows) {
        out += std::to_string(r.layer) + "," + csv_number(r.alpha) + "," + csv_number(r.halluc_unknown) + "," + csv_number(r.acc_known) + "," +
               csv_number(r.refusal_known) + "\n";
    }
    return out;
}

}  // namespace casal
