#include "casal/runner.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <set>
#include <sstream>

extern char** environ;

namespace casal {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

}  // namespace

// ----------------------------------------------------------------------------
// Config

void to_json(nlohmann::json& j, const RunConfig& c) {
    nlohmann::json steer = {{"alpha", c.steer.alpha},
                            {"layer", c.steer.layer ? nlohmann::json(*c.steer.layer) : nlohmann::json(nullptr)},
                            {"candidate_layers", c.steer.candidate_layers},
                            {"selection_alphas", c.steer.selection_alphas},
                            {"budget", c.steer.budget},
                            {"positions", to_string(c.steer.positions)}};
    nlohmann::json casal = {{"submodule", to_string(c.casal.submodule)},
                            {"train", c.casal.train},
                            {"max_rows", c.casal.max_rows},
                            {"size_fractions", c.casal.size_fractions},
                            {"trajectory_batch_size", c.casal.trajectory_batch_size},
                            {"trajectory_snapshot_every", c.casal.trajectory_snapshot_every}};
    nlohmann::json baselines = {{"caa", c.baselines.caa}, {"sft", c.baselines.sft}, {"sft_options", c.baselines.sft_options}};
    j = {{"world", c.world},
         {"corpus_path", c.corpus_path},
         {"model", c.model},
         {"pretrain", c.pretrain},
         {"probe", c.probe},
         {"steer", steer},
         {"casal", casal},
         {"baselines", baselines},
         {"tau_sweep", c.tau_sweep},
         {"flops", c.flops ? nlohmann::json(*c.flops) : nlohmann::json(nullptr)},
         {"out", c.out},
         {"seed", c.seed},
         {"stages", c.stages}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
    RunConfig d;
    c = d;
    if (!j.is_object()) throw Error("run config must be a JSON object");
    if (j.contains("world")) c.world = j.at("world").get<FactWorldSpec>();
    c.corpus_path = j.value("corpus_path", d.corpus_path);
    if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
    if (j.contains("pretrain")) c.pretrain = j.at("pretrain").get<PretrainOptions>();
    if (j.contains("probe")) c.probe = j.at("probe").get<ProbeConfig>();
    if (j.contains("steer")) {
        const auto& s = j.at("steer");
        c.steer.alpha = s.value("alpha", d.steer.alpha);
        if (s.contains("layer") && !s.at("layer").is_null()) c.steer.layer = s.at("layer").get<int>();
        c.steer.candidate_layers = s.value("candidate_layers", d.steer.candidate_layers);
        c.steer.selection_alphas = s.value("selection_alphas", d.steer.selection_alphas);
        c.steer.budget = s.value("budget", d.steer.budget);
        c.steer.positions = position_policy_from_string(s.value("positions", to_string(d.steer.positions)));
    }
    if (j.contains("casal")) {
        const auto& s = j.at("casal");
        c.casal.submodule = submodule_choice_from_string(s.value("submodule", to_string(d.casal.submodule)));
        if (s.contains("train")) c.casal.train = s.at("train").get<CasalTrainOptions>();
        c.casal.max_rows = s.value("max_rows", d.casal.max_rows);
        c.casal.size_fractions = s.value("size_fractions", d.casal.size_fractions);
        c.casal.trajectory_batch_size = s.value("trajectory_batch_size", d.casal.trajectory_batch_size);
        c.casal.trajectory_snapshot_every = s.value("trajectory_snapshot_every", d.casal.trajectory_snapshot_every);
    }
    if (j.contains("baselines")) {
        const auto& s = j.at("baselines");
        c.baselines.caa = s.value("caa", d.baselines.caa);
        c.baselines.sft = s.value("sft", d.baselines.sft);
        if (s.contains("sft_options")) {
            nlohmann::json merged = d.baselines.sft_options;
            merged.update(s.at("sft_options"));
            c.baselines.sft_options = merged.get<PretrainOptions>();
        }
    }
    c.tau_sweep = j.value("tau_sweep", d.tau_sweep);
    if (j.contains("flops") && !j.at("flops").is_null()) c.flops = j.at("flops").get<ArchSpec>();
    c.out = j.value("out", d.out);
    c.seed = j.value("seed", d.seed);
    c.stages = j.value("stages", d.stages);
}

nlohmann::json apply_env_overrides(nlohmann::json& config, const std::map<std::string, std::string>& env,
                                   const std::string& prefix) {
    nlohmann::json applied = nlohmann::json::object();
    for (const auto& [name, raw] : env) {
        if (name.size() <= prefix.size() || name.compare(0, prefix.size(), prefix) != 0) continue;
        const std::string key = lower(name.substr(prefix.size()));
        nlohmann::json::json_pointer ptr;
        std::size_t start = 0;
        while (true) {
            const std::size_t sep = key.find("__", start);
            const std::string part = key.substr(start, sep == std::string::npos ? std::string::npos : sep - start);
            if (part.empty()) throw Error("environment override " + name + " has an empty key segment");
            ptr /= part;
            if (sep == std::string::npos) break;
            start = sep + 2;
        }
        nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
        if (value.is_discarded()) value = raw;
        config[ptr] = value;
        applied[name] = value;
    }
    return applied;
}

std::map<std::string, std::string> process_environment() {
    std::map<std::string, std::string> env;
    for (char** e = environ; e && *e; ++e) {
        const std::string kv(*e);
        const auto eq = kv.find('=');
        if (eq != std::string::npos) env[kv.substr(0, eq)] = kv.substr(eq + 1);
    }
    return env;
}

RunConfig resolve(RunConfig c) {
    if (!c.corpus_path.empty()) c.world = nlohmann::json::parse(read_text(c.corpus_path)).get<FactWorldSpec>();
    c.world.seed = derive_seed(c.seed, "corpus");
    c.model.rng_seed = derive_seed(c.seed, "model");
    c.pretrain.seed = derive_seed(c.seed, "pretrain");
    c.probe.sampling.seed = derive_seed(c.seed, "probe");
    c.casal.train.seed = derive_seed(c.seed, "casal");
    c.baselines.sft_options.seed = derive_seed(c.seed, "sft");
    validate(c.world);
    c.model.vocab_size = generate_fact_world(c.world).vocab_size;
    validate(c.model);
    validate(c.probe);
    if (c.steer.layer) {
        if (*c.steer.layer < 0 || *c.steer.layer >= c.model.n_layer) throw Error("steer.layer out of range");
        c.steer.candidate_layers = {*c.steer.layer};
    } else if (c.steer.candidate_layers.empty()) {
        for (int l = 1; l <= c.model.n_layer - 2; ++l) c.steer.candidate_layers.push_back(l);
    }
    for (int l : c.steer.candidate_layers) {
        if (l < 0 || l >= c.model.n_layer) throw Error("candidate layer " + std::to_string(l) + " out of range");
    }
    if (c.steer.selection_alphas.empty()) c.steer.selection_alphas = {c.steer.alpha};
    if (c.model.is_moe() && !is_moe_choice(c.casal.submodule)) {
        switch (c.casal.submodule) {
            case SubmoduleChoice::up: c.casal.submodule = SubmoduleChoice::moe_experts_up; break;
            case SubmoduleChoice::up_and_down: c.casal.submodule = SubmoduleChoice::moe_experts_both; break;
            default: c.casal.submodule = SubmoduleChoice::moe_experts_down; break;
        }
    }
    if (!c.model.is_moe() && is_moe_choice(c.casal.submodule)) throw Error("expert submodule on a dense model");
    for (double f : c.casal.size_fractions) {
        if (!(f > 0.0 && f <= 1.0)) throw Error("casal.size_fractions entries must lie in (0, 1]");
    }
    if (c.casal.max_rows < 0) throw Error("casal.max_rows must be non-negative");
    if (c.stages.empty()) {
        for (const auto& s : all_stages()) {
            if (s != "flops" || c.flops) c.stages.push_back(s);
        }
    }
    for (const auto& s : c.stages) {
        if (std::find(all_stages().begin(), all_stages().end(), s) == all_stages().end()) {
            throw Error("unknown stage: " + s);
        }
    }
    if (std::find(c.stages.begin(), c.stages.end(), "flops") != c.stages.end() && !c.flops) {
        throw Error("stage flops needs a flops spec");
    }
    return c;
}

// ----------------------------------------------------------------------------
// Run directory plumbing

namespace {

namespace paths {
constexpr char world[] = "corpus/world.json";
constexpr char queries[] = "corpus/queries.jsonl";
constexpr char stream[] = "corpus/stream.jsonl";
constexpr char base_ck[] = "checkpoints/base.ck";
constexpr char pretrain_trace[] = "metrics/pretrain_trace.csv";
constexpr char probe_run[] = "splits/probe_run.json";
constexpr char split[] = "splits/split.json";
constexpr char halves[] = "splits/halves.json";
constexpr char probe_sweep[] = "metrics/probe_sweep.csv";
constexpr char selection[] = "packs/selection.json";
constexpr char layer_sweep[] = "metrics/layer_sweep.csv";
constexpr char pack[] = "packs/pack.bin";
constexpr char cache[] = "caches/cache.bin";
constexpr char casal_ck[] = "checkpoints/casal.ck";
constexpr char train_report[] = "metrics/train_report.json";
constexpr char sft_ck[] = "checkpoints/sft.ck";
constexpr char metrics[] = "metrics/metrics.csv";
constexpr char eval_summary[] = "metrics/eval_summary.json";
constexpr char tau_sweep[] = "metrics/tau_sweep.csv";
constexpr char training_size[] = "metrics/training_size.csv";
constexpr char silhouette[] = "metrics/silhouette_halluc.csv";
constexpr char report_summary[] = "metrics/report_summary.json";
constexpr char flops_json[] = "metrics/flops.json";
constexpr char flops_csv[] = "metrics/flops.csv";
constexpr char manifest[] = "manifest.json";
}  // namespace paths

struct Ctx {
    RunConfig cfg;
    fs::path root;
    std::vector<std::string> written;

    fs::path at(const std::string& rel) const { return root / rel; }
    void text(const std::string& rel, std::string_view body) {
        write_text(at(rel), body);
        written.push_back(rel);
    }
    void json(const std::string& rel, const nlohmann::json& j) { text(rel, j.dump(2) + "\n"); }
    void note(const std::string& rel) { written.push_back(rel); }
    nlohmann::json read_json(const std::string& rel) const { return nlohmann::json::parse(read_text(at(rel))); }
};

std::vector<QueryRecord> by_ids(const std::map<std::string, QueryRecord>& index, const std::vector<std::string>& ids) {
    std::vector<QueryRecord> out;
    out.reserve(ids.size());
    for (const auto& id : ids) {
        auto it = index.find(id);
        if (it == index.end()) throw Error("unknown query id " + id);
        out.push_back(it->second);
    }
    return out;
}

std::map<std::string, QueryRecord> query_index(const std::vector<QueryRecord>& records) {
    std::map<std::string, QueryRecord> index;
    for (const auto& q : records) index.emplace(q.id, q);
    return index;
}

nlohmann::json halves_json(const SplitHalves& h) {
    return {{"train_known", h.train_known},
            {"train_unknown", h.train_unknown},
            {"eval_known", h.eval_known},
            {"eval_unknown", h.eval_unknown}};
}

SplitHalves halves_from_json(const nlohmann::json& j) {
    SplitHalves h;
    h.train_known = j.at("train_known").get<std::vector<std::string>>();
    h.train_unknown = j.at("train_unknown").get<std::vector<std::string>>();
    h.eval_known = j.at("eval_known").get<std::vector<std::string>>();
    h.eval_unknown = j.at("eval_unknown").get<std::vector<std::string>>();
    return h;
}

ProbeRun probe_run_from_json(const nlohmann::json& j) {
    ProbeRun r;
    r.config = j.at("config").get<ProbeConfig>();
    r.ids = j.at("ids").get<std::vector<std::string>>();
    r.correct = j.at("correct").get<std::vector<int>>();
    r.abstained = j.at("abstained").get<std::vector<int>>();
    return r;
}

struct Sets {
    std::vector<QueryRecord> train_known, train_unknown, eval_known, eval_unknown;
};

Sets sets_from(const std::map<std::string, QueryRecord>& index, const SplitHalves& h) {
    return {by_ids(index, h.train_known), by_ids(index, h.train_unknown), by_ids(index, h.eval_known),
            by_ids(index, h.eval_unknown)};
}

/// First rows of each label so that the total stays within the cap, proportional to label sizes.
void cap_rows(std::vector<QueryRecord>& known, std::vector<QueryRecord>& unknown, int cap) {
    const std::size_t total = known.size() + unknown.size();
    if (cap <= 0 || total <= static_cast<std::size_t>(cap)) return;
    std::size_t nk = static_cast<std::size_t>(std::llround(static_cast<double>(cap) * known.size() / total));
    nk = std::min(nk, known.size());
    const std::size_t nu = std::min(unknown.size(), static_cast<std::size_t>(cap) - nk);
    known.resize(nk);
    unknown.resize(nu);
}

struct CasalOutcome {
    SteeringPack pack;
    TrainBatchCache cache;
    TrainReport report;
    TransformerWeights weights;
};

CasalOutcome train_casal(const TransformerWeights& base, const ModelConfig& mc, std::vector<QueryRecord> known,
                         std::vector<QueryRecord> unknown, int layer, double alpha, SubmoduleChoice choice,
                         const CasalTrainOptions& options, int max_rows) {
    cap_rows(known, unknown, max_rows);
    CasalOutcome o;
    const Mat k = extract_activations(base, mc, known, layer).rows;
    const Mat u = extract_activations(base, mc, unknown, layer).rows;
    o.pack = compute_steering_pack(k, u, alpha, layer);
    for (const auto& q : known) o.pack.train_known_ids.push_back(q.id);
    for (const auto& q : unknown) o.pack.train_unknown_ids.push_back(q.id);
    o.cache = build_cache(base, mc, known, unknown, o.pack, layer);
    CasalSubnetwork net = make_subnetwork(base, mc, layer, choice);
    o.report = mc.is_moe() ? train_moe(net, o.cache, options) : train(net, o.cache, options);
    o.weights = finalize(base, o.report.final_tensors, choice, layer);
    return o;
}

double eval_silhouette(const TransformerWeights& w, const ModelConfig& mc, const std::vector<QueryRecord>& known,
                       const std::vector<QueryRecord>& unknown, int layer) {
    if (known.size() < 2 || unknown.size() < 2) return kNaN;
    const Mat k = extract_activations(w, mc, known, layer).rows;
    const Mat u = extract_activations(w, mc, unknown, layer).rows;
    Mat all(k.rows() + u.rows(), k.cols());
    all << k, u;
    std::vector<int> labels(static_cast<std::size_t>(k.rows()), 0);
    labels.resize(static_cast<std::size_t>(all.rows()), 1);
    return silhouette(all, labels);
}

struct ArmRun {
    ArmMetrics metrics;
    std::vector<Completion> known, unknown;
};

ArmRun run_arm(const std::string& arm, const TransformerWeights& w, const ModelConfig& mc,
               const std::vector<QueryRecord>& known, const std::vector<QueryRecord>& unknown,
               const ResidualEdit* edit) {
    const AbstainMatcher abstain = AbstainMatcher::token();
    const SamplingConfig greedy = SamplingConfig::greedy();
    ArmRun r;
    r.known = generate_all(w, mc, known, greedy, edit);
    r.unknown = generate_all(w, mc, unknown, greedy, edit);
    r.metrics = {arm, hallucination_rate(r.unknown, abstain), accuracy(r.known, known, AnswerMatch::exact_token),
                 refusal_rate(r.known, abstain)};
    return r;
}

std::string dump_completions(const std::vector<Completion>& cs, const std::vector<QueryRecord>& truths) {
    const AbstainMatcher abstain = AbstainMatcher::token();
    std::vector<CompletionRecord> recs;
    for (std::size_t i = 0; i < cs.size(); ++i) {
        recs.push_back({cs[i].id, cs[i].tokens, cs[i].text, abstain.matches(cs[i]),
                        is_correct(cs[i], truths[i], AnswerMatch::exact_token)});
    }
    return completion_dump(recs);
}

MetricsRow metrics_row(const std::string& arm, const std::string& split, const std::vector<Completion>& cs,
                       const std::vector<QueryRecord>& truths, double sil) {
    const AbstainMatcher abstain = AbstainMatcher::token();
    MetricsRow m;
    m.run_id = arm;
    m.split = split;
    m.n = cs.size();
    m.halluc = hallucination_rate(cs, abstain);
    m.refusal = refusal_rate(cs, abstain);
    m.acc = accuracy(cs, truths, AnswerMatch::exact_token);
    m.silhouette = sil;
    m.se_halluc = binomial_se(m.halluc, m.n);
    m.se_refusal = binomial_se(m.refusal, m.n);
    m.se_acc = binomial_se(m.acc, m.n);
    return m;
}

double relative_reduction(double before, double after) { return before > 0.0 ? (before - after) / before : 0.0; }

// ----------------------------------------------------------------------------
// Stages

struct LoadedBase {
    ModelConfig config;
    TransformerWeights weights;
    std::map<std::string, QueryRecord> index;
};

LoadedBase load_base(const Ctx& ctx) {
    Checkpoint ck = load_checkpoint(ctx.at(paths::base_ck));
    return {ck.config, std::move(ck.weights), query_index(load_qa_records(ctx.at(paths::queries)))};
}

int selected_layer(const Ctx& ctx) { return ctx.read_json(paths::selection).at("layer").get<int>(); }

void stage_pretrain(Ctx& ctx) {
    const FactWorld world = generate_fact_world(ctx.cfg.world);
    ctx.json(paths::world, fact_world_manifest(world));
    write_qa_records(ctx.at(paths::queries), world.queries);
    ctx.note(paths::queries);
    std::string stream;
    for (const auto& doc : world.stream) stream += nlohmann::json(doc).dump() + "\n";
    ctx.text(paths::stream, stream);

    const PretrainResult pr = pretrain_toy_model(ctx.cfg.model, world.stream, ctx.cfg.pretrain);
    save_checkpoint(ctx.at(paths::base_ck), ctx.cfg.model, pr.weights);
    ctx.note(paths::base_ck);
    std::string trace = "step,train_loss\n";
    for (std::size_t i = 0; i < pr.trace.steps.size(); ++i) {
        trace += std::to_string(pr.trace.steps[i]) + "," + csv_number(pr.trace.train_loss[i]) + "\n";
    }
    trace += "validation_initial," + csv_number(pr.trace.initial_validation_loss) + "\n";
    trace += "validation_final," + csv_number(pr.trace.final_validation_loss) + "\n";
    ctx.text(paths::pretrain_trace, trace);
}

void stage_probe(Ctx& ctx) {
    const LoadedBase b = load_base(ctx);
    std::vector<QueryRecord> queries;
    for (const auto& [id, q] : b.index) queries.push_back(q);
    const ProbeRun run = probe_samples(b.weights, b.config, queries, ctx.cfg.probe);
    ctx.json(paths::probe_run,
             {{"config", run.config}, {"ids", run.ids}, {"correct", run.correct}, {"abstained", run.abstained}});
    const KnowledgeSplit split = split_from_scores(run.ids, run.correct, ctx.cfg.probe.k, ctx.cfg.probe.tau);
    ctx.json(paths::split, split_file(ctx.cfg.probe, split));
    const SplitHalves h = split_halves(split, derive_seed(ctx.cfg.seed, "halves"));
    ctx.json(paths::halves, halves_json(h));
    std::vector<int> taus;
    for (int t : ctx.cfg.tau_sweep) {
        if (2 * t > ctx.cfg.probe.k && t <= ctx.cfg.probe.k) taus.push_back(t);
    }
    ctx.text(paths::probe_sweep, sweep_csv(threshold_sweep(run, taus)));
}

void stage_select(Ctx& ctx) {
    const LoadedBase b = load_base(ctx);
    const Sets s = sets_from(b.index, halves_from_json(ctx.read_json(paths::halves)));
    const LayerSelection sel = select_layer(b.weights, b.config, s.train_known, s.train_unknown, s.eval_known,
                                            s.eval_unknown, ctx.cfg.steer.candidate_layers,
                                            ctx.cfg.steer.selection_alphas, ctx.cfg.steer.budget, ctx.cfg.steer.positions);
    ctx.json(paths::selection, {{"layer", sel.layer},
                                {"alpha", sel.alpha},
                                {"within_budget", sel.within_budget},
                                {"baseline_acc", sel.baseline_acc},
                                {"candidate_layers", ctx.cfg.steer.candidate_layers},
                                {"selection_alphas", ctx.cfg.steer.selection_alphas}});
    ctx.text(paths::layer_sweep, layer_sweep_csv(sel.table));
}

void stage_steer(Ctx& ctx) {
    const LoadedBase b = load_base(ctx);
    SplitHalves h = halves_from_json(ctx.read_json(paths::halves));
    Sets s = sets_from(b.index, h);
    cap_rows(s.train_known, s.train_unknown, ctx.cfg.casal.max_rows);
    const int layer = selected_layer(ctx);
    const Mat k = extract_activations(b.weights, b.config, s.train_known, layer).rows;
    const Mat u = extract_activations(b.weights, b.config, s.train_unknown, layer).rows;
    SteeringPack pack = compute_steering_pack(k, u, ctx.cfg.steer.alpha, layer);
    for (const auto& q : s.train_known) pack.train_known_ids.push_back(q.id);
    for (const auto& q : s.train_unknown) pack.train_unknown_ids.push_back(q.id);
    pack.split_hash = hash_file(ctx.at(paths::split));
    save_pack(ctx.at(paths::pack), pack);
    ctx.note(paths::pack);
}

void stage_train(Ctx& ctx) {
    const LoadedBase b = load_base(ctx);
    const SteeringPack pack = load_pack(ctx.at(paths::pack));
    const auto known = by_ids(b.index, pack.train_known_ids);
    const auto unknown = by_ids(b.index, pack.train_unknown_ids);
    const TrainBatchCache cache = build_cache(b.weights, b.config, known, unknown, pack, pack.layer);
    save_cache(ctx.at(paths::cache), cache);
    ctx.note(paths::cache);
    CasalSubnetwork net = make_subnetwork(b.weights, b.config, pack.layer, ctx.cfg.casal.submodule);
    const TrainReport rep = b.config.is_moe() ? train_moe(net, cache, ctx.cfg.casal.train)
                                              : train(net, cache, ctx.cfg.casal.train);
    const TransformerWeights after = finalize(b.weights, rep.final_tensors, ctx.cfg.casal.submodule, pack.layer);
    save_checkpoint(ctx.at(paths::casal_ck), b.config, after);
    ctx.note(paths::casal_ck);
    nlohmann::json j = casal_manifest(b.weights, after, pack, rep, ctx.cfg.casal.submodule, pack.layer);
    j["rows"] = cache.rows();
    j["silhouette_cached_before"] = rep.silhouette_before;
    j["silhouette_cached_after"] = rep.silhouette_after;
    ctx.json(paths::train_report, j);
}

void stage_eval(Ctx& ctx) {
    const LoadedBase b = load_base(ctx);
    const Sets s = sets_from(b.index, halves_from_json(ctx.read_json(paths::halves)));
    const SteeringPack pack = load_pack(ctx.at(paths::pack));
    const nlohmann::json sel = ctx.read_json(paths::selection);
    const int layer = pack.layer;
    const TransformerWeights casal_w = load_checkpoint(ctx.at(paths::casal_ck)).weights;

    std::vector<MetricsRow> rows;
    nlohmann::json summary = {{"layer", layer}};
    auto emit = [&](const std::string& arm, const TransformerWeights& w, const ResidualEdit* edit, bool with_sil) {
        const ArmRun r = run_arm(arm, w, b.config, s.eval_known, s.eval_unknown, edit);
        const double sil = with_sil ? eval_silhouette(w, b.config, s.eval_known, s.eval_unknown, layer) : kNaN;
        rows.push_back(metrics_row(arm, "known", r.known, s.eval_known, sil));
        rows.push_back(metrics_row(arm, "unknown", r.unknown, s.eval_unknown, sil));
        ctx.text("completions/" + arm + "_known.jsonl", dump_completions(r.known, s.eval_known));
        ctx.text("completions/" + arm + "_unknown.jsonl", dump_completions(r.unknown, s.eval_unknown));
        summary["arms"][arm] = {{"halluc_unknown", r.metrics.halluc_unknown},
                                {"acc_known", r.metrics.acc_known},
                                {"refusal_known", r.metrics.refusal_known},
                                {"silhouette", sil}};
        return r.metrics;
    };
    emit("baseline", b.weights, nullptr, true);
    emit("casal", casal_w, nullptr, true);
    if (ctx.cfg.baselines.caa) {
        const int caa_layer = sel.at("layer").get<int>();
        const double caa_alpha = sel.at("alpha").get<double>();
        const Mat k = extract_activations(b.weights, b.config, s.train_known, caa_layer).rows;
        const Mat u = extract_activations(b.weights, b.config, s.train_unknown, caa_layer).rows;
        const SteeringPack p = compute_steering_pack(k, u, caa_alpha, caa_layer);
        const ResidualEdit selected{caa_layer, caa_alpha * p.v_unknown, ctx.cfg.steer.positions};
        emit("caa", b.weights, &selected, false);
        const ResidualEdit with_pack{layer, pack.alpha * pack.v_unknown, ctx.cfg.steer.positions};
        emit("caa_pack", b.weights, &with_pack, false);
        summary["caa"] = {{"layer", caa_layer}, {"alpha", caa_alpha}};
    }
    if (ctx.cfg.baselines.sft) {
        std::vector<SftPair> pairs;
        for (const auto& q : s.train_known) {
            Tokens completion = q.answer;
            completion.push_back(kEos);
            pairs.push_back({q.prompt, completion});
        }
        for (const auto& q : s.train_unknown) pairs.push_back({q.prompt, {kAbstain}});
        const SftResult sft = sft_finetune(b.weights, b.config, pairs, ctx.cfg.baselines.sft_options);
        save_checkpoint(ctx.at(paths::sft_ck), b.config, sft.weights);
        ctx.note(paths::sft_ck);
        emit("sft", sft.weights, nullptr, true);
        summary["sft"] = {{"pairs", pairs.size()}, {"excludes_ambiguous", true}};
    }
    ctx.text(paths::metrics, metrics_csv(rows));
    ctx.json(paths::eval_summary, summary);
}

void stage_report(Ctx& ctx) {
    const LoadedBase b = load_base(ctx);
    const ProbeRun run = probe_run_from_json(ctx.read_json(paths::probe_run));
    const SplitHalves main_halves = halves_from_json(ctx.read_json(paths::halves));
    const Sets main = sets_from(b.index, main_halves);
    const int layer = load_pack(ctx.at(paths::pack)).layer;
    const auto& cc = ctx.cfg.casal;
    const double alpha = ctx.cfg.steer.alpha;
    nlohmann::json summary = {{"layer", layer}};

    // Threshold sweep: one probe run re-partitioned per tau, fixed layer.
    std::string tau_csv =
        "tau,n_known,n_unknown,n_eval_known,n_eval_unknown,baseline_halluc,casal_halluc,rel_reduction,"
        "baseline_acc,casal_acc,acc_drop,baseline_refusal,casal_refusal\n";
    for (int tau : ctx.cfg.tau_sweep) {
        const KnowledgeSplit split = split_from_scores(run.ids, run.correct, run.config.k, tau);
        const Sets s = sets_from(b.index, split_halves(split, derive_seed(ctx.cfg.seed, "halves")));
        const CasalOutcome o = train_casal(b.weights, b.config, s.train_known, s.train_unknown, layer, alpha,
                                           cc.submodule, cc.train, cc.max_rows);
        const ArmMetrics before = run_arm("baseline", b.weights, b.config, s.eval_known, s.eval_unknown, nullptr).metrics;
        const ArmMetrics after = run_arm("casal", o.weights, b.config, s.eval_known, s.eval_unknown, nullptr).metrics;
        const double rel = relative_reduction(before.halluc_unknown, after.halluc_unknown);
        tau_csv += std::to_string(tau) + "," + std::to_string(split.known.size()) + "," +
                   std::to_string(split.unknown.size()) + "," + std::to_string(s.eval_known.size()) + "," +
                   std::to_string(s.eval_unknown.size()) + "," + csv_number(before.halluc_unknown) + "," +
                   csv_number(after.halluc_unknown) + "," + csv_number(rel) + "," + csv_number(before.acc_known) + "," +
                   csv_number(after.acc_known) + "," + csv_number(before.acc_known - after.acc_known) + "," +
                   csv_number(before.refusal_known) + "," + csv_number(after.refusal_known) + "\n";
        summary["tau"][std::to_string(tau)] = {{"rel_reduction", rel},
                                                {"acc_drop", before.acc_known - after.acc_known}};
    }
    ctx.text(paths::tau_sweep, tau_csv);

    // Training-set size: leading share of each label's training half.
    std::string size_csv = "fraction,n_known,n_unknown,halluc_unknown,acc_known,refusal_known\n";
    for (double f : cc.size_fractions) {
        auto take = [f](const std::vector<QueryRecord>& v) {
            const auto n = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(f * static_cast<double>(v.size()))));
            return std::vector<QueryRecord>(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(std::min(n, v.size())));
        };
        const auto k = take(main.train_known), u = take(main.train_unknown);
        const CasalOutcome o = train_casal(b.weights, b.config, k, u, layer, alpha, cc.submodule, cc.train, cc.max_rows);
        const ArmMetrics m = run_arm("casal", o.weights, b.config, main.eval_known, main.eval_unknown, nullptr).metrics;
        size_csv += csv_number(f) + "," + std::to_string(o.cache.count(Label::known)) + "," +
                    std::to_string(o.cache.count(Label::unknown)) + "," + csv_number(m.halluc_unknown) + "," +
                    csv_number(m.acc_known) + "," + csv_number(m.refusal_known) + "\n";
    }
    ctx.text(paths::training_size, size_csv);

    // Silhouette trajectory: one run with snapshots, each substituted and evaluated.
    CasalTrainOptions traj = cc.train;
    traj.batch_size = cc.trajectory_batch_size;
    traj.snapshot_every = std::max(1, cc.trajectory_snapshot_every);
    const CasalOutcome o = train_casal(b.weights, b.config, main.train_known, main.train_unknown, layer, alpha,
                                       cc.submodule, traj, cc.max_rows);
    std::string sil_csv = "step,silhouette,halluc_unknown,acc_known,refusal_known\n";
    std::vector<double> sils, hallucs;
    for (std::size_t i = 0; i < o.report.snapshots.size(); ++i) {
        const TransformerWeights w = finalize(b.weights, o.report.snapshots[i], cc.submodule, layer);
        const double sil = eval_silhouette(w, b.config, main.eval_known, main.eval_unknown, layer);
        const ArmMetrics m = run_arm("casal", w, b.config, main.eval_known, main.eval_unknown, nullptr).metrics;
        sils.push_back(sil);
        hallucs.push_back(m.halluc_unknown);
        sil_csv += std::to_string(o.report.snapshot_steps[i]) + "," + csv_number(sil) + "," +
                   csv_number(m.halluc_unknown) + "," + csv_number(m.acc_known) + "," + csv_number(m.refusal_known) + "\n";
    }
    ctx.text(paths::silhouette, sil_csv);
    summary["trajectory"] = {{"checkpoints", sils.size()},
                             {"spearman_silhouette_halluc", sils.size() >= 2 ? spearman(sils, hallucs) : kNaN},
                             {"silhouette_first", sils.empty() ? kNaN : sils.front()},
                             {"silhouette_last", sils.empty() ? kNaN : sils.back()}};
    ctx.json(paths::report_summary, summary);
}

void stage_flops(Ctx& ctx) {
    ctx.json(paths::flops_json, ledger_json(*ctx.cfg.flops, true, false));
    ctx.text(paths::flops_csv, ledger_csv(*ctx.cfg.flops, true, false));
}

struct StageDef {
    std::string name;
    std::vector<std::string> inputs;
    std::function<nlohmann::json(const RunConfig&)> slice;
    std::function<void(Ctx&)> body;
};

const std::vector<StageDef>& stage_defs() {
    static const std::vector<StageDef> defs = {
        {"pretrain", {},
         [](const RunConfig& c) {
             nlohmann::json j = c;
             return nlohmann::json{{"world", j["world"]}, {"model", j["model"]}, {"pretrain", j["pretrain"]}};
         },
         stage_pretrain},
        {"probe", {paths::base_ck, paths::queries},
         [](const RunConfig& c) {
             nlohmann::json j = c;
             return nlohmann::json{{"probe", j["probe"]}, {"tau_sweep", j["tau_sweep"]}, {"seed", c.seed}};
         },
         stage_probe},
        {"select", {paths::base_ck, paths::queries, paths::halves},
         [](const RunConfig& c) {
             nlohmann::json j = c;
             return j["steer"];
         },
         stage_select},
        {"steer", {paths::base_ck, paths::queries, paths::halves, paths::split, paths::selection},
         [](const RunConfig& c) { return nlohmann::json{{"alpha", c.steer.alpha}, {"max_rows", c.casal.max_rows}}; },
         stage_steer},
        {"train", {paths::base_ck, paths::queries, paths::pack},
         [](const RunConfig& c) {
             nlohmann::json j = c;
             return nlohmann::json{{"submodule", j["casal"]["submodule"]}, {"train", j["casal"]["train"]}};
         },
         stage_train},
        {"eval", {paths::base_ck, paths::queries, paths::halves, paths::pack, paths::selection, paths::casal_ck},
         [](const RunConfig& c) {
             nlohmann::json j = c;
             return nlohmann::json{{"baselines", j["baselines"]}, {"positions", j["steer"]["positions"]}};
         },
         stage_eval},
        {"report", {paths::base_ck, paths::queries, paths::probe_run, paths::halves, paths::pack},
         [](const RunConfig& c) {
             nlohmann::json j = c;
             return nlohmann::json{{"casal", j["casal"]}, {"steer", j["steer"]}, {"tau_sweep", j["tau_sweep"]}};
         },
         stage_report},
        {"flops", {},
         [](const RunConfig& c) {
             nlohmann::json j = c;
             return j["flops"];
         },
         stage_flops},
    };
    return defs;
}

nlohmann::json scan_artifacts(const fs::path& root) {
    std::vector<std::string> files;
    if (fs::exists(root)) {
        for (const auto& e : fs::recursive_directory_iterator(root)) {
            if (!e.is_regular_file()) continue;
            const std::string rel = fs::relative(e.path(), root).generic_string();
            if (rel != paths::manifest) files.push_back(rel);
        }
    }
    std::sort(files.begin(), files.end());
    nlohmann::json j = nlohmann::json::object();
    for (const auto& f : files) j[f] = hash_file(root / f);
    return j;
}

void write_manifest(const fs::path& root, nlohmann::json& manifest) {
    manifest["artifacts"] = scan_artifacts(root);
    write_text(root / paths::manifest, manifest.dump(2) + "\n");
}

bool stage_is_current(const Ctx& ctx, const nlohmann::json& record, const std::string& slice_hash,
                      const std::vector<std::string>& inputs) {
    if (!record.is_object() || record.value("status", "") != "ok") return false;
    if (record.value("config_hash", "") != slice_hash) return false;
    for (const auto& in : inputs) {
        if (!fs::exists(ctx.at(in))) return false;
        if (record.at("inputs").value(in, "") != hash_file(ctx.at(in))) return false;
    }
    for (const auto& [rel, h] : record.at("outputs").items()) {
        if (!fs::exists(ctx.at(rel)) || hash_file(ctx.at(rel)) != h.get<std::string>()) return false;
    }
    return true;
}

void execute(const RunConfig& config, const RunOptions& options, bool force) {
    Ctx ctx{config, fs::path(config.out), {}};
    const bool nonempty = fs::exists(ctx.root) && !fs::is_empty(ctx.root);
    if (nonempty && !options.resume) {
        throw Error("output directory " + ctx.root.string() + " is not empty (use --resume)");
    }
    fs::create_directories(ctx.root);
    for (const char* sub : {"corpus", "checkpoints", "splits", "packs", "caches", "completions", "metrics"}) {
        fs::create_directories(ctx.root / sub);
    }
    nlohmann::json manifest = nlohmann::json::object();
    if (fs::exists(ctx.at(paths::manifest))) manifest = nlohmann::json::parse(read_text(ctx.at(paths::manifest)));
    manifest["tool_version"] = kToolVersion;
    manifest["config"] = config;
    manifest["env_overrides"] = options.env_overrides;
    if (!manifest.contains("stages")) manifest["stages"] = nlohmann::json::object();
    write_manifest(ctx.root, manifest);

    for (const auto& def : stage_defs()) {
        if (std::find(config.stages.begin(), config.stages.end(), def.name) == config.stages.end()) continue;
        const std::string slice_hash = sha256_hex(def.slice(config).dump() + "|seed=" + std::to_string(config.seed));
        const nlohmann::json previous = manifest["stages"].value(def.name, nlohmann::json());
        if (options.resume && !force && stage_is_current(ctx, previous, slice_hash, def.inputs)) continue;
        nlohmann::json record = {{"config", def.slice(config)}, {"config_hash", slice_hash}};
        const auto start = std::chrono::steady_clock::now();
        try {
            for (const auto& in : def.inputs) {
                if (!fs::exists(ctx.at(in))) throw Error("missing input " + in + " (run the producing stage first)");
                record["inputs"][in] = hash_file(ctx.at(in));
            }
            if (!record.contains("inputs")) record["inputs"] = nlohmann::json::object();
            ctx.written.clear();
            def.body(ctx);
        } catch (const std::exception& e) {
            record["status"] = "failed";
            record["error"] = e.what();
            manifest["stages"][def.name] = record;
            write_manifest(ctx.root, manifest);
            throw StageError(def.name, e.what());
        }
        record["status"] = "ok";
        record["seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        record["outputs"] = nlohmann::json::object();
        for (const auto& rel : ctx.written) record["outputs"][rel] = hash_file(ctx.at(rel));
        manifest["stages"][def.name] = record;
        write_manifest(ctx.root, manifest);
    }
}

}  // namespace

void run(const RunConfig& config, const RunOptions& options) { execute(resolve(config), options, false); }

RunConfig load_run_config(const fs::path& run_dir) {
    const fs::path m = run_dir / paths::manifest;
    if (!fs::exists(m)) throw Error("no manifest in " + run_dir.string());
    RunConfig c = nlohmann::json::parse(read_text(m)).at("config").get<RunConfig>();
    c.out = run_dir.string();
    return c;
}

void report(const fs::path& run_dir) {
    RunConfig c = load_run_config(run_dir);
    c.stages = {"report"};
    const nlohmann::json m = nlohmann::json::parse(read_text(run_dir / paths::manifest));
    execute(resolve(c), RunOptions{true, m.value("env_overrides", nlohmann::json::object())}, true);
}

EvalSets load_eval_sets(const fs::path& run_dir) {
    const auto index = query_index(load_qa_records(run_dir / paths::queries));
    const SplitHalves h = halves_from_json(nlohmann::json::parse(read_text(run_dir / paths::halves)));
    return {by_ids(index, h.eval_known), by_ids(index, h.eval_unknown)};
}

ArmMetrics evaluate_arm(const std::string& arm, const TransformerWeights& weights, const ModelConfig& config,
                        const EvalSets& sets, const ResidualEdit* edit) {
    return run_arm(arm, weights, config, sets.known, sets.unknown, edit).metrics;
}

ArmMetrics run_caa(const fs::path& run_dir, int layer, double alpha, PositionPolicy positions) {
    const Checkpoint ck = load_checkpoint(run_dir / paths::base_ck);
    if (layer < 0 || layer >= ck.config.n_layer) throw Error("caa: layer out of range");
    const auto index = query_index(load_qa_records(run_dir / paths::queries));
    const Sets s = sets_from(index, halves_from_json(nlohmann::json::parse(read_text(run_dir / paths::halves))));
    const Mat k = extract_activations(ck.weights, ck.config, s.train_known, layer).rows;
    const Mat u = extract_activations(ck.weights, ck.config, s.train_unknown, layer).rows;
    const SteeringPack pack = compute_steering_pack(k, u, alpha, layer);
    const ResidualEdit edit{layer, alpha * pack.v_unknown, positions};
    const ArmRun steered = run_arm("caa", ck.weights, ck.config, s.eval_known, s.eval_unknown, &edit);
    const ArmRun base = run_arm("baseline", ck.weights, ck.config, s.eval_known, s.eval_unknown, nullptr);
    std::vector<MetricsRow> rows{metrics_row("baseline", "known", base.known, s.eval_known, kNaN),
                                 metrics_row("baseline", "unknown", base.unknown, s.eval_unknown, kNaN),
                                 metrics_row("caa", "known", steered.known, s.eval_known, kNaN),
                                 metrics_row("caa", "unknown", steered.unknown, s.eval_unknown, kNaN)};
    std::ostringstream name;
    name << "metrics/caa_L" << layer << "_a" << csv_number(alpha) << "_" << to_string(positions) << ".csv";
    write_text(run_dir / name.str(), metrics_csv(rows));
    nlohmann::json manifest = nlohmann::json::parse(read_text(run_dir / paths::manifest));
    manifest["extra"][name.str()] = {{"layer", layer}, {"alpha", alpha}, {"positions", to_string(positions)}};
    write_manifest(run_dir, manifest);
    return steered.metrics;
}

}  // namespace casal
