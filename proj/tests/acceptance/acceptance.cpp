// Acceptance suite: criteria 1-8, one PASS/FAIL line each. Exit status is non-zero when any
// selected criterion fails, or with --expect-fail when the failing set differs from the given one.

#include "casal/gradients.hpp"
#include "casal/metrics.hpp"
#include "casal/runner.hpp"
#include "casal/sampling.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#ifndef CASAL_SOURCE_DIR
#define CASAL_SOURCE_DIR "."
#endif

namespace {

using namespace casal;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

struct Outcome {
    bool pass = true;
    std::vector<std::string> notes;

    void require(bool ok, const std::string& what) {
        notes.push_back(std::string(ok ? "" : "FAILED ") + what);
        pass = pass && ok;
    }
};

std::string fmt(double v, int precision = 4) {
    std::ostringstream s;
    s.precision(precision);
    s << v;
    return s.str();
}

// ----------------------------------------------------------------------------
// CSV and run-directory helpers

using CsvRow = std::map<std::string, std::string>;

std::vector<CsvRow> read_csv(const fs::path& path) {
    std::istringstream in(read_text(path));
    std::string line;
    std::vector<std::string> header;
    std::vector<CsvRow> rows;
    auto split = [](const std::string& l) {
        std::vector<std::string> out;
        std::string cell;
        std::istringstream s(l);
        while (std::getline(s, cell, ',')) out.push_back(cell);
        if (!l.empty() && l.back() == ',') out.emplace_back();
        return out;
    };
    if (!std::getline(in, line)) throw Error("empty csv " + path.string());
    header = split(line);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto cells = split(line);
        CsvRow r;
        for (std::size_t i = 0; i < header.size() && i < cells.size(); ++i) r[header[i]] = cells[i];
        rows.push_back(std::move(r));
    }
    return rows;
}

double num(const CsvRow& r, const std::string& key) {
    const auto it = r.find(key);
    if (it == r.end() || it->second.empty()) return std::nan("");
    return std::stod(it->second);
}

struct ArmSplit {
    double halluc = 0, refusal = 0, acc = 0, silhouette = 0;
};

std::map<std::string, ArmSplit> read_metrics(const fs::path& run_dir) {
    std::map<std::string, ArmSplit> out;
    for (const auto& r : read_csv(run_dir / "metrics/metrics.csv")) {
        out[r.at("run_id") + "/" + r.at("split")] = {num(r, "halluc"), num(r, "refusal"), num(r, "acc"), num(r, "silhouette")};
    }
    return out;
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(read_text(p)); }

double relative_drop(double before, double after) { return before > 0.0 ? (before - after) / before : 0.0; }

/// Runs a config into dir once; reuses a completed run when asked.
struct PipelineRun {
    fs::path dir;
    double seconds = 0.0;
    bool reused = false;
};

PipelineRun run_pipeline(const fs::path& config_path, const fs::path& dir, bool reuse) {
    PipelineRun r{dir};
    if (reuse && fs::exists(dir / "manifest.json")) {
        const nlohmann::json m = read_json(dir / "manifest.json");
        bool complete = true;
        for (const auto& s : {"pretrain", "probe", "select", "steer", "train", "eval", "report"}) {
            complete = complete && m["stages"].contains(s) && m["stages"][s].value("status", "") == "ok";
        }
        if (complete) {
            for (const auto& [name, rec] : m["stages"].items()) r.seconds += rec.value("seconds", 0.0);
            r.reused = true;
            return r;
        }
    }
    fs::remove_all(dir);
    RunConfig cfg = read_json(config_path).get<RunConfig>();
    cfg.out = dir.string();
    std::cerr << "running " << config_path.filename().string() << " into " << dir.string() << "\n";
    const auto start = Clock::now();
    run(cfg);
    r.seconds = seconds_since(start);
    return r;
}

// ----------------------------------------------------------------------------
// Criterion 1: FLOPs ledger

Outcome criterion_flops(const fs::path& configs) {
    Outcome o;
    const RunConfig cfg = read_json(configs / "acceptance.json").get<RunConfig>();
    if (!cfg.flops) throw Error("acceptance.json has no flops spec");
    ArchSpec s = *cfg.flops;
    o.require(s.n_layer == 32 && s.d_model == 4096 && s.d_attn == 4096 && s.d_ff == 14336 && s.lora_rank == 8u,
              "spec is (32, 4096, 4096, 14336), r=8");
    const Ratios r = ratios(s);
    o.require(std::abs(r.casal_param_fraction - 0.009943) <= 1e-6, "casal_param_fraction " + fmt(r.casal_param_fraction, 7));
    o.require(std::abs(r.lora_param_fraction_simplified - 0.00293) <= 1e-5,
              "lora simplified fraction " + fmt(r.lora_param_fraction_simplified, 6));
    o.require(r.full_over_lora >= 2.9 && r.full_over_lora <= 3.0, "full_over_lora " + fmt(r.full_over_lora));
    o.require(std::abs(r.casal_vs_lora_speedup - 30.0) <= 0.15 * 30.0, "casal_vs_lora_speedup " + fmt(r.casal_vs_lora_speedup));
    // Integer cross-check of the fraction against the raw counts.
    const double direct = static_cast<double>(casal_params(s)) / static_cast<double>(base_params(s));
    o.require(std::abs(direct - r.casal_param_fraction) < 1e-15, "fraction equals casal_params / base_params");
    return o;
}

// ----------------------------------------------------------------------------
// Criterion 2: finite differences

ModelConfig small_config(bool moe) {
    ModelConfig c;
    c.n_layer = 3;
    c.d_model = 8;
    c.d_attn = 8;
    c.n_heads = 2;
    c.d_ff = 12;
    c.n_ctx = 8;
    c.vocab_size = 16;
    c.init_std = 0.3;
    if (moe) c.moe = MoeConfig{4, 2};
    return c;
}

TransformerWeights perturbed_weights(const ModelConfig& c, std::uint64_t seed) {
    ModelConfig cc = c;
    cc.rng_seed = seed;
    TransformerWeights w = init_weights(cc);
    Rng rng(seed ^ 0xacceULL);
    for_each_tensor(w, [&](const std::string& name, Mat& m) {
        if (name.find("norm") != std::string::npos) {
            for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = 1.0 + 0.2 * rng.normal();
        }
    });
    return w;
}

double central(double& x, double h, const std::function<double()>& f) {
    const double x0 = x;
    x = x0 + h;
    const double fp = f();
    x = x0 - h;
    const double fm = f();
    x = x0;
    return (fp - fm) / (2.0 * h);
}

double rel(double a, double b, double floor) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor}); }

struct FdStats {
    std::size_t coords = 0;
    double worst = 0.0;
    std::string where;
};

FdStats casal_fd(SubmoduleChoice choice, std::uint64_t seed) {
    const bool moe = is_moe_choice(choice);
    const ModelConfig c = small_config(moe);
    const TransformerWeights w = perturbed_weights(c, seed);
    std::vector<QueryRecord> known, unknown;
    for (int i = 0; i < 5; ++i) {
        known.push_back({"k" + std::to_string(i), {0, 3 + i, 9}, {5}, {}, {}, Provenance::external, {}});
        unknown.push_back({"u" + std::to_string(i), {0, 10 + i, 4 + i % 3}, {5}, {}, {}, Provenance::external, {}});
    }
    const int layer = 1;
    const SteeringPack pack = compute_steering_pack(extract_activations(w, c, known, layer).rows,
                                                    extract_activations(w, c, unknown, layer).rows, 4.0, layer);
    const TrainBatchCache cache = build_cache(w, c, known, unknown, pack, layer);
    CasalSubnetwork net = make_subnetwork(w, c, layer, choice);
    const auto grad = analytic_gradient(net, cache);
    const Mat h = post_attention_rows(net, cache);
    auto loss = [&] { return casal_loss(net, cache, h).total; };
    Rng rng(seed + 7);
    FdStats st;
    for (std::size_t e = 0; e < net.trainable.size(); ++e) {
        for (bool up : {false, true}) {
            if (up ? !trains_up(choice) : !trains_down(choice)) continue;
            Mat& p = up ? net.trainable[e].up : net.trainable[e].down;
            const Mat& g = up ? grad[e].up : grad[e].down;
            const std::size_t n = 120 / net.trainable.size() + 1;
            for (std::size_t i = 0; i < n; ++i) {
                const auto idx = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(p.size())));
                // Exactly quadratic along one coordinate: a wide step has no truncation error.
                const double fd = central(p.data()[idx], 1e-2, loss);
                st.worst = std::max(st.worst, rel(g.data()[idx], fd, 1e-4));
                ++st.coords;
            }
        }
    }
    return st;
}

FdStats lm_fd(bool moe, std::uint64_t seed) {
    const ModelConfig c = small_config(moe);
    TransformerWeights w = perturbed_weights(c, seed);
    const std::vector<LmExample> batch{{{0, 3, 7, 2, 9, 1}, 1}, {{0, 5, 5, 12}, 2}, {{0, 14, 8}, 1}};
    const TransformerWeights g = lm_loss_and_grad(w, c, batch, true).grad;
    std::map<std::string, const Mat*> grads;
    for_each_tensor(g, [&](const std::string& name, const Mat& m) { grads[name] = &m; });
    Rng rng(seed + 9);
    FdStats st;
    for_each_tensor(w, [&](const std::string& name, Mat& m) {
        if (m.size() == 0) return;
        for (int i = 0; i < 6; ++i) {
            const auto idx = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(m.size())));
            const double fd = central(m.data()[idx], 1e-5, [&] { return lm_loss_and_grad(w, c, batch, false).loss; });
            const double an = grads.at(name)->data()[idx];
            // Floor 1e-5: below an absolute gap of 1e-10 the difference is loss roundoff over h.
            if (rel(an, fd, 1e-5) > st.worst) {
                st.worst = rel(an, fd, 1e-5);
                st.where = name + "[" + std::to_string(idx) + "] analytic " + fmt(an, 12) + " fd " + fmt(fd, 12);
            }
            ++st.coords;
        }
    });
    return st;
}

Outcome criterion_gradients() {
    Outcome o;
    const auto start = Clock::now();
    for (SubmoduleChoice ch : {SubmoduleChoice::down, SubmoduleChoice::up, SubmoduleChoice::up_and_down,
                               SubmoduleChoice::moe_experts_down, SubmoduleChoice::moe_experts_up,
                               SubmoduleChoice::moe_experts_both}) {
        const FdStats s = casal_fd(ch, 21);
        o.require(s.coords >= 100 && s.worst <= 1e-6,
                  "casal " + to_string(ch) + ": " + std::to_string(s.coords) + " coords, worst rel " + fmt(s.worst, 2));
    }
    for (bool moe : {false, true}) {
        const FdStats s = lm_fd(moe, 31);
        o.require(s.coords >= 100 && s.worst <= 1e-5, std::string("pretraining ") + (moe ? "moe" : "dense") + ": " +
                                                          std::to_string(s.coords) + " coords, worst rel " + fmt(s.worst, 2) +
                                                          (s.worst > 1e-5 ? " at " + s.where : ""));
    }
    const double t = seconds_since(start);
    o.require(t < 60.0, "runtime " + fmt(t, 3) + " s");
    return o;
}

// ----------------------------------------------------------------------------
// Criterion 3: oracle equivalences

/// Every expert on every token, softmax over router logits, stable top-k, renormalized mixture.
Mat moe_dense_oracle(const Mat& x, const Mat& router, const std::vector<FeedForward>& experts, int top_k) {
    Mat out = Mat::Zero(x.rows(), experts.front().down.cols());
    std::vector<Mat> all;
    for (const auto& e : experts) {
        const Mat g = x * e.gate;
        const Mat silu = g.array() / (1.0 + (-g.array()).exp());
        all.push_back((silu.array() * (x * e.up).array()).matrix() * e.down);
    }
    const Mat logits = x * router;
    for (Eigen::Index t = 0; t < x.rows(); ++t) {
        std::vector<double> p(static_cast<std::size_t>(logits.cols()));
        const double mx = logits.row(t).maxCoeff();
        double z = 0.0;
        for (std::size_t e = 0; e < p.size(); ++e) z += (p[e] = std::exp(logits(t, static_cast<Eigen::Index>(e)) - mx));
        std::vector<std::size_t> idx(p.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return p[a] > p[b]; });
        double sel = 0.0;
        for (int k = 0; k < top_k; ++k) sel += p[idx[static_cast<std::size_t>(k)]];
        for (int k = 0; k < top_k; ++k) {
            const std::size_t e = idx[static_cast<std::size_t>(k)];
            out.row(t) += (p[e] / sel) * all[e].row(t);
        }
    }
    return out;
}

double brute_silhouette(const Mat& x, const std::vector<int>& labels) {
    const auto n = static_cast<Eigen::Index>(labels.size());
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        double same = 0, other = 0;
        int ns = 0, no = 0;
        for (Eigen::Index j = 0; j < n; ++j) {
            if (i == j) continue;
            double d2 = 0.0;
            for (Eigen::Index c = 0; c < x.cols(); ++c) d2 += (x(i, c) - x(j, c)) * (x(i, c) - x(j, c));
            if (labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(j)]) {
                same += std::sqrt(d2);
                ++ns;
            } else {
                other += std::sqrt(d2);
                ++no;
            }
        }
        const double a = same / ns, b = other / no;
        total += (b - a) / std::max(a, b);
    }
    return total / static_cast<double>(n);
}

/// Softmax at temperature, top-k by probability (ties to lower index), nucleus cut, renormalized.
std::vector<double> truncated_oracle(const RowVec& logits, double t, double top_p, int top_k) {
    const auto V = static_cast<std::size_t>(logits.size());
    std::vector<double> p(V);
    const double mx = logits.maxCoeff();
    double z = 0.0;
    for (std::size_t i = 0; i < V; ++i) z += (p[i] = std::exp((logits(static_cast<Eigen::Index>(i)) - mx) / t));
    for (auto& x : p) x /= z;
    std::vector<std::size_t> idx(V);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return p[a] > p[b]; });
    if (top_k > 0) idx.resize(std::min(V, static_cast<std::size_t>(top_k)));
    double mass = 0.0;
    for (auto i : idx) mass += p[i];
    std::size_t n = 0;
    for (double cum = 0.0; n < idx.size() && cum < top_p; ++n) cum += p[idx[n]] / mass;
    idx.resize(n);
    double m = 0.0;
    for (auto i : idx) m += p[i];
    std::vector<double> out(V, 0.0);
    for (auto i : idx) out[i] = p[i] / m;
    return out;
}

Outcome criterion_oracles() {
    Outcome o;
    const auto start = Clock::now();
    Rng rng(2718);
    auto rmat = [&](Eigen::Index r, Eigen::Index c) {
        Mat m(r, c);
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
        return m;
    };

    double moe_worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        const int n_exp = 2 + static_cast<int>(rng.below(6));
        const int top_k = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(n_exp)));
        std::vector<FeedForward> experts;
        for (int e = 0; e < n_exp; ++e) experts.push_back({rmat(16, 24), rmat(16, 24), rmat(24, 16)});
        const Mat x = rmat(12, 16), router = rmat(16, n_exp);
        const Mat a = moe_block_forward(x, router, experts, top_k);
        const Mat b = moe_dense_oracle(x, router, experts, top_k);
        moe_worst = std::max(moe_worst, (a - b).cwiseAbs().maxCoeff());
    }
    o.require(moe_worst <= 1e-10, "moe vs dense oracle max abs " + fmt(moe_worst, 2));

    double sil_worst = 0.0;
    for (int trial = 0; trial < 40; ++trial) {
        const auto n = static_cast<Eigen::Index>(4 + rng.below(61));
        const Mat x = rmat(n, 1 + static_cast<Eigen::Index>(rng.below(16)));
        std::vector<int> labels(static_cast<std::size_t>(n));
        for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = i < 2 ? 0 : (i < 4 ? 1 : static_cast<int>(rng.below(2)));
        sil_worst = std::max(sil_worst, std::abs(silhouette(x, labels) - brute_silhouette(x, labels)));
    }
    o.require(sil_worst <= 1e-12, "silhouette vs brute force (n <= 64) max abs " + fmt(sil_worst, 2));

    RowVec logits(32);
    for (Eigen::Index i = 0; i < logits.size(); ++i) logits(i) = 1.5 * rng.normal();
    const SamplingConfig s{0.7, 0.8, 20, 1, 0};
    const auto p = truncated_oracle(logits, s.temperature, s.top_p, s.top_k);
    constexpr int kDraws = 100000;
    std::vector<int> counts(32, 0);
    Rng draws(derive_seed(0, "acceptance-sampling"));
    for (int i = 0; i < kDraws; ++i) ++counts[static_cast<std::size_t>(sample_token(logits, s, draws))];
    double worst_z = 0.0;
    bool outside = false;
    for (std::size_t v = 0; v < p.size(); ++v) {
        if (p[v] == 0.0) {
            outside = outside || counts[v] != 0;
            continue;
        }
        const double sigma = std::sqrt(kDraws * p[v] * (1.0 - p[v]));
        worst_z = std::max(worst_z, std::abs(counts[v] - kDraws * p[v]) / sigma);
    }
    o.require(!outside && worst_z <= 3.0, "sampling 1e5 draws worst |z| " + fmt(worst_z, 3) + (outside ? ", mass outside support" : ""));
    const double t = seconds_since(start);
    o.require(t < 120.0, "runtime " + fmt(t, 3) + " s");
    return o;
}

// ----------------------------------------------------------------------------
// Criteria 4-8: pipeline runs

struct Effect {
    double rel = 0, acc_drop = 0, refusal_rise = 0;
};

Effect casal_effect(const fs::path& run_dir) {
    const auto m = read_metrics(run_dir);
    const ArmSplit bu = m.at("baseline/unknown"), cu = m.at("casal/unknown");
    const ArmSplit bk = m.at("baseline/known"), ck = m.at("casal/known");
    return {relative_drop(bu.halluc, cu.halluc), bk.acc - ck.acc, ck.refusal - bk.refusal};
}

std::string effect_text(const fs::path& run_dir, const Effect& e) {
    const auto m = read_metrics(run_dir);
    return "halluc " + fmt(m.at("baseline/unknown").halluc) + " -> " + fmt(m.at("casal/unknown").halluc) + " (" +
           fmt(100 * e.rel, 3) + "% relative)";
}

int selected_layer(const fs::path& run_dir) { return read_json(run_dir / "metrics/train_report.json").at("layer").get<int>(); }

std::vector<QueryRecord> eval_queries(const fs::path& run_dir) {
    EvalSets s = load_eval_sets(run_dir);
    s.known.insert(s.known.end(), s.unknown.begin(), s.unknown.end());
    return s.known;
}

Outcome criterion_end_to_end(const PipelineRun& r) {
    Outcome o;
    const RunConfig cfg = load_run_config(r.dir);
    o.require(cfg.model.n_layer == 6 && cfg.model.d_model == 64 && cfg.world.n_facts_total == 400 &&
                  cfg.world.fraction_trained == 0.5 && cfg.probe.k == 10 && cfg.probe.tau == 7 && cfg.steer.alpha == 4.0 &&
                  cfg.casal.train.lr == 1e-3 && cfg.casal.train.epochs == 3,
              "configuration (6 layers, d_model 64, 400 facts, k 10, tau 7, alpha 4, lr 1e-3, 3 epochs)");
    const auto rows = read_json(r.dir / "metrics/train_report.json").at("rows").get<std::size_t>();
    o.require(rows <= 640, std::to_string(rows) + " cached rows");
    const Effect e = casal_effect(r.dir);
    o.require(e.rel >= 0.30, effect_text(r.dir, e));
    o.require(e.acc_drop <= 0.05, "known accuracy drop " + fmt(100 * e.acc_drop, 3) + "pp");
    o.require(e.refusal_rise <= 0.05, "known refusal rise " + fmt(100 * e.refusal_rise, 3) + "pp");

    const Checkpoint base = load_checkpoint(r.dir / "checkpoints/base.ck");
    const Checkpoint after = load_checkpoint(r.dir / "checkpoints/casal.ck");
    const int layer = selected_layer(r.dir);
    bool identical = true;
    for (const auto& q : eval_queries(r.dir)) {
        std::vector<ActivationTap> taps;
        for (int l = 0; l < layer; ++l) taps.push_back({l, PositionPolicy::all_tokens, StreamPoint::post_layer});
        const auto a = forward(base.weights, base.config, q.prompt, taps).captured;
        const auto b = forward(after.weights, after.config, q.prompt, taps).captured;
        for (std::size_t i = 0; i < a.size(); ++i) identical = identical && hash_matrix(a[i]) == hash_matrix(b[i]);
    }
    o.require(identical, "activations of layers 0.." + std::to_string(layer - 1) + " bit-identical (L* = " +
                             std::to_string(layer) + ")");
    o.require(r.seconds < 600.0, "runtime " + fmt(r.seconds, 4) + " s" + (r.reused ? " (recorded)" : ""));
    return o;
}

Outcome criterion_sharpening(const PipelineRun& r) {
    Outcome o;
    const auto start = Clock::now();
    const auto m = read_metrics(r.dir);
    const double before = m.at("baseline/unknown").silhouette, after = m.at("casal/unknown").silhouette;
    o.require(after > before, "held-out silhouette " + fmt(before) + " -> " + fmt(after));
    std::vector<double> sil, hal;
    for (const auto& row : read_csv(r.dir / "metrics/silhouette_halluc.csv")) {
        sil.push_back(num(row, "silhouette"));
        hal.push_back(num(row, "halluc_unknown"));
    }
    const double rho = sil.size() >= 2 ? spearman(sil, hal) : std::nan("");
    o.require(sil.size() >= 5 && rho <= -0.7,
              std::to_string(sil.size()) + " checkpoints, Spearman(silhouette, halluc) " + fmt(rho, 3));
    const double t = seconds_since(start);
    o.require(t < 120.0, "runtime " + fmt(t, 3) + " s");
    return o;
}

Outcome criterion_moe(const PipelineRun& r) {
    Outcome o;
    const Checkpoint base = load_checkpoint(r.dir / "checkpoints/base.ck");
    const Checkpoint after = load_checkpoint(r.dir / "checkpoints/casal.ck");
    o.require(base.config.moe && base.config.moe->n_experts == 4 && base.config.moe->top_k == 2, "4 experts, top-2");
    bool routers = true;
    for (std::size_t l = 0; l < base.weights.layers.size(); ++l) {
        routers = routers && hash_matrix(base.weights.layers[l].router) == hash_matrix(after.weights.layers[l].router);
    }
    o.require(routers, "router gates bit-identical");
    const int layer = selected_layer(r.dir);
    const int top_k = base.config.moe->top_k;
    const ActivationTap tap{layer, PositionPolicy::all_tokens, StreamPoint::post_attention};
    std::size_t tokens = 0;
    bool same = true;
    for (const auto& q : eval_queries(r.dir)) {
        const auto& Lb = base.weights.layers[static_cast<std::size_t>(layer)];
        const auto& La = after.weights.layers[static_cast<std::size_t>(layer)];
        const Mat hb = forward(base.weights, base.config, q.prompt, {tap}).captured[0];
        const Mat ha = forward(after.weights, after.config, q.prompt, {tap}).captured[0];
        same = same && route(rms_norm(hb, Lb.ff_norm), Lb.router, top_k).experts ==
                           route(rms_norm(ha, La.ff_norm), La.router, top_k).experts;
        tokens += static_cast<std::size_t>(hb.rows());
    }
    o.require(same, "expert assignments at L* = " + std::to_string(layer) + " unchanged on " + std::to_string(tokens) + " tokens");
    const Effect e = casal_effect(r.dir);
    o.require(e.rel >= 0.30, effect_text(r.dir, e));
    o.require(e.acc_drop <= 0.02, "known accuracy drop " + fmt(100 * e.acc_drop, 3) + "pp");
    o.require(e.refusal_rise <= 0.05, "known refusal rise " + fmt(100 * e.refusal_rise, 3) + "pp");
    o.require(r.seconds < 900.0, "runtime " + fmt(r.seconds, 4) + " s" + (r.reused ? " (recorded)" : ""));
    return o;
}

Outcome criterion_threshold(const PipelineRun& r) {
    Outcome o;
    const nlohmann::json probe = read_json(r.dir / "splits/probe_run.json");
    o.require(probe.at("ids").size() == probe.at("correct").size(), "one probe pass with " +
                                                                       std::to_string(probe.at("ids").size()) + " queries");
    std::set<int> seen;
    for (const auto& row : read_csv(r.dir / "metrics/tau_sweep.csv")) {
        const int tau = static_cast<int>(num(row, "tau"));
        seen.insert(tau);
        const double rr = num(row, "rel_reduction");
        o.require(rr >= 0.20, "tau " + std::to_string(tau) + ": " + fmt(100 * rr, 3) + "% relative reduction");
    }
    o.require(seen == std::set<int>{6, 7, 8}, "sweep covers tau 6, 7, 8");
    return o;
}

Outcome criterion_caa(const PipelineRun& r) {
    Outcome o;
    const auto start = Clock::now();
    const fs::path csv = r.dir / "metrics/layer_sweep.csv";
    o.require(fs::exists(csv), "per-layer CAA CSV emitted");
    const auto rows = read_csv(csv);
    const auto m = read_metrics(r.dir);
    const double base_halluc = m.at("baseline/unknown").halluc, base_acc = m.at("baseline/known").acc;
    const double alpha = load_run_config(r.dir).steer.alpha;
    const int layer = selected_layer(r.dir);
    std::set<int> layers;
    int best_layer = -1;
    double best = base_halluc;
    double caa_drop_at_layer = std::nan("");
    for (const auto& row : rows) {
        layers.insert(static_cast<int>(num(row, "layer")));
        if (num(row, "alpha") != alpha) continue;
        const int l = static_cast<int>(num(row, "layer"));
        if (num(row, "halluc_unknown") < best) {
            best = num(row, "halluc_unknown");
            best_layer = l;
        }
        if (l == layer) caa_drop_at_layer = base_acc - num(row, "acc_known");
    }
    o.require(layers.size() >= 2, std::to_string(layers.size()) + " layers swept");
    o.require(best_layer >= 0, "CAA (alpha " + fmt(alpha) + ") below baseline halluc " + fmt(base_halluc) +
                                   (best_layer >= 0 ? " at layer " + std::to_string(best_layer) + " (" + fmt(best) + ")" : ""));
    const double casal_drop = casal_effect(r.dir).acc_drop;
    o.require(!std::isnan(caa_drop_at_layer) && casal_drop <= caa_drop_at_layer,
              "known accuracy drop at L* = " + std::to_string(layer) + ": CASAL " + fmt(100 * casal_drop, 3) + "pp vs CAA " +
                  fmt(100 * caa_drop_at_layer, 3) + "pp");
    const double t = seconds_since(start);
    o.require(t < 600.0, "runtime " + fmt(t, 3) + " s (sweep recorded in the run)");
    return o;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance criteria 1-8"};
    std::string configs = std::string(CASAL_SOURCE_DIR) + "/configs";
    std::string work = "acceptance_work";
    std::vector<int> only;
    bool reuse = false;
    app.add_option("--configs", configs, "directory holding acceptance.json and acceptance_moe.json");
    app.add_option("--work", work, "scratch directory for the pipeline runs");
    app.add_option("--only", only, "criteria to run (default: all)");
    app.add_flag("--reuse", reuse, "reuse completed runs found in the work directory");
    std::vector<int> expect_fail;
    app.add_option("--expect-fail", expect_fail,
                   "criteria known to fail at toy scale; exit status is zero only when exactly these fail");
    CLI11_PARSE(app, argc, argv);
    if (only.empty()) only = {1, 2, 3, 4, 5, 6, 7, 8};
    auto wanted = [&](int c) { return std::find(only.begin(), only.end(), c) != only.end(); };

    const fs::path cfg_dir(configs), work_dir(work);
    std::optional<PipelineRun> dense, moe;
    auto dense_run = [&]() -> const PipelineRun& {
        if (!dense) dense = run_pipeline(cfg_dir / "acceptance.json", work_dir / "dense", reuse);
        return *dense;
    };
    auto moe_run = [&]() -> const PipelineRun& {
        if (!moe) moe = run_pipeline(cfg_dir / "acceptance_moe.json", work_dir / "moe", reuse);
        return *moe;
    };

    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"flops ledger", [&] { return criterion_flops(cfg_dir); }},
        {"gradient checks", [&] { return criterion_gradients(); }},
        {"oracle equivalences", [&] { return criterion_oracles(); }},
        {"end-to-end toy CASAL", [&] { return criterion_end_to_end(dense_run()); }},
        {"representation sharpening", [&] { return criterion_sharpening(dense_run()); }},
        {"MoE variant", [&] { return criterion_moe(moe_run()); }},
        {"threshold robustness", [&] { return criterion_threshold(dense_run()); }},
        {"CAA contrast", [&] { return criterion_caa(dense_run()); }},
    };

    int failures = 0;
    std::set<int> failed;
    std::vector<std::string> lines;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i) + 1;
        if (!wanted(id)) continue;
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o.require(false, std::string("error: ") + e.what());
        }
        failures += !o.pass;
        if (!o.pass) failed.insert(id);
        std::string detail;
        for (const auto& n : o.notes) detail += (detail.empty() ? "" : "; ") + n;
        lines.push_back("criterion " + std::to_string(id) + " " + criteria[i].first + ": " + (o.pass ? "PASS" : "FAIL") +
                        " [" + detail + "]");
        std::cout << lines.back() << std::endl;
    }
    std::cout << "\nsummary: " << (lines.size() - static_cast<std::size_t>(failures)) << "/" << lines.size() << " passed\n";
    std::set<int> expected;
    for (int id : expect_fail) {
        if (wanted(id)) expected.insert(id);
    }
    if (expected.empty()) return failures == 0 ? 0 : 1;
    bool as_expected = true;
    for (int id : failed) {
        if (!expected.count(id)) {
            std::cout << "unexpected failure: criterion " << id << "\n";
            as_expected = false;
        }
    }
    for (int id : expected) {
        if (!failed.count(id)) {
            std::cout << "expected failure now passes: criterion " << id << " (update --expect-fail)\n";
            as_expected = false;
        }
    }
    if (as_expected) std::cout << "failures match the documented expected set\n";
    return as_expected ? 0 : 1;
}
