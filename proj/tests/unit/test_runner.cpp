#include "casal/runner.hpp"

#include "support.hpp"

#include <set>

namespace casal {
namespace {

using testing::TempDir;

RunConfig tiny_run(const fs::path& out) {
    RunConfig c;
    c.world.n_entities = 40;
    c.world.n_relations = 2;
    c.world.n_facts_total = 40;
    c.world.fraction_trained = 0.5;
    c.world.n_values = 6;
    c.world.repetitions = 16;
    c.world.n_abstain_demos = 8;
    c.world.abstain_repetitions = 8;
    c.world.abstain_source = AbstainSource::empty_slots;
    c.model.n_layer = 3;
    c.model.d_model = 16;
    c.model.d_attn = 16;
    c.model.n_heads = 2;
    c.model.d_ff = 32;
    c.model.n_ctx = 8;
    c.pretrain.steps = 300;
    c.pretrain.batch = 16;
    c.pretrain.lr = 1e-2;
    c.probe.k = 4;
    c.probe.tau = 3;
    c.tau_sweep = {3, 4};
    c.steer.layer = 1;
    c.steer.selection_alphas = {4};
    c.casal.size_fractions = {0.5, 1.0};
    c.baselines.sft_options.steps = 20;
    c.out = out.string();
    return c;
}

std::set<std::string> regular_files(const fs::path& root) {
    std::set<std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (e.is_regular_file()) out.insert(fs::relative(e.path(), root).generic_string());
    }
    return out;
}

nlohmann::json manifest_of(const fs::path& root) { return nlohmann::json::parse(read_text(root / "manifest.json")); }

std::size_t line_count(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

TEST(EnvOverrides, NestedKeysAndJsonValues) {
    nlohmann::json j = RunConfig{};
    const auto applied = apply_env_overrides(
        j, {{"CASAL_PROBE__TAU", "8"}, {"CASAL_OUT", "elsewhere"}, {"CASAL_STEER__ALPHA", "2.5"}, {"HOME", "/root"}});
    EXPECT_EQ(applied.size(), 3u);
    const RunConfig c = j.get<RunConfig>();
    EXPECT_EQ(c.probe.tau, 8);
    EXPECT_EQ(c.out, "elsewhere");
    EXPECT_EQ(c.steer.alpha, 2.5);
    EXPECT_THROW(apply_env_overrides(j, {{"CASAL_PROBE____TAU", "8"}}), Error);
}

TEST(Resolve, FillsDefaultsAndDerivesSeeds) {
    RunConfig c = tiny_run("x");
    c.steer.layer.reset();
    c.model.n_layer = 6;
    const RunConfig r = resolve(c);
    EXPECT_EQ(r.steer.candidate_layers, (std::vector<int>{1, 2, 3, 4}));
    EXPECT_EQ(r.world.seed, derive_seed(0, "corpus"));
    EXPECT_EQ(r.casal.train.seed, derive_seed(0, "casal"));
    EXPECT_EQ(r.model.vocab_size, generate_fact_world(r.world).vocab_size);
    EXPECT_EQ(std::count(r.stages.begin(), r.stages.end(), "flops"), 0);
    c.seed = 1;
    EXPECT_NE(resolve(c).world.seed, r.world.seed);

    RunConfig moe = c;
    moe.model.moe = MoeConfig{4, 2};
    moe.casal.submodule = SubmoduleChoice::up_and_down;
    EXPECT_EQ(resolve(moe).casal.submodule, SubmoduleChoice::moe_experts_both);

    RunConfig bad = c;
    bad.stages = {"nope"};
    EXPECT_THROW(resolve(bad), Error);
    bad.stages = {"flops"};
    EXPECT_THROW(resolve(bad), Error);
    bad = c;
    bad.steer.layer = 6;
    EXPECT_THROW(resolve(bad), Error);
    bad = c;
    bad.casal.submodule = SubmoduleChoice::moe_experts_down;
    EXPECT_THROW(resolve(bad), Error);
}

TEST(RunConfigJson, RoundTrip) {
    RunConfig c = tiny_run("out");
    c.flops = ArchSpec{32, 4096, 4096, 14336, 8192, 32, 0, 8};
    const nlohmann::json j = c;
    EXPECT_EQ(nlohmann::json(j.get<RunConfig>()), j);
}

TEST(Runner, FlopsOnlyWritesJustTheLedger) {
    TempDir dir("flops_only");
    RunConfig c = tiny_run(dir.path() / "run");
    c.flops = ArchSpec{32, 4096, 4096, 14336, 8192, 32, 0, 8};
    c.stages = {"flops"};
    run(c);
    EXPECT_EQ(regular_files(dir.path() / "run"),
              (std::set<std::string>{"manifest.json", "metrics/flops.csv", "metrics/flops.json"}));
    const nlohmann::json ledger = nlohmann::json::parse(read_text(dir.path() / "run/metrics/flops.json"));
    EXPECT_NEAR(ledger.at("casal_param_fraction").get<double>(), 0.009943, 1e-6);
}

TEST(Runner, MissingInputNamesTheStage) {
    TempDir dir("missing_input");
    RunConfig c = tiny_run(dir.path() / "run");
    c.stages = {"select"};
    try {
        run(c);
        FAIL() << "expected a stage error";
    } catch (const StageError& e) {
        EXPECT_EQ(e.stage(), "select");
    }
    EXPECT_EQ(manifest_of(dir.path() / "run").at("stages").at("select").at("status"), "failed");
}

class FullRun : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        dir_ = new TempDir("full_run");
        run(tiny_run(dir_->path() / "a"), RunOptions{false, {{"CASAL_NOTE", "x"}}});
        run(tiny_run(dir_->path() / "b"));
    }
    static void TearDownTestSuite() {
        delete dir_;
        dir_ = nullptr;
    }
    static fs::path a() { return dir_->path() / "a"; }
    static fs::path b() { return dir_->path() / "b"; }
    static TempDir* dir_;
};

TempDir* FullRun::dir_ = nullptr;

TEST_F(FullRun, SameConfigAndSeedGiveIdenticalArtifacts) {
    const nlohmann::json ma = manifest_of(a()), mb = manifest_of(b());
    EXPECT_EQ(ma.at("artifacts"), mb.at("artifacts"));
    for (const auto& s : {"pretrain", "probe", "select", "steer", "train", "eval", "report"}) {
        EXPECT_EQ(ma.at("stages").at(s).at("status"), "ok") << s;
    }
    EXPECT_EQ(ma.at("env_overrides").at("CASAL_NOTE"), "x");
}

TEST_F(FullRun, ManifestCoversEveryFile) {
    std::set<std::string> files = regular_files(a());
    files.erase("manifest.json");
    std::set<std::string> listed;
    const nlohmann::json m = manifest_of(a());
    for (const auto& [rel, h] : m.at("artifacts").items()) {
        listed.insert(rel);
        EXPECT_EQ(h.get<std::string>(), hash_file(a() / rel)) << rel;
    }
    EXPECT_EQ(listed, files);
}

TEST_F(FullRun, ExpectedArtifacts) {
    const std::string sweep = read_text(a() / "metrics/layer_sweep.csv");
    EXPECT_EQ(line_count(sweep), 2u);  // header and the single fixed layer
    const std::string metrics = read_text(a() / "metrics/metrics.csv");
    for (const auto& arm : {"baseline,known", "baseline,unknown", "casal,known", "casal,unknown", "caa,unknown", "sft,unknown"}) {
        EXPECT_NE(metrics.find(std::string("\n") + arm + ","), std::string::npos) << arm;
    }
    EXPECT_EQ(line_count(read_text(a() / "metrics/tau_sweep.csv")), 3u);
    const nlohmann::json train = nlohmann::json::parse(read_text(a() / "metrics/train_report.json"));
    EXPECT_EQ(train.at("layer"), 1);
    const Checkpoint base = load_checkpoint(a() / "checkpoints/base.ck");
    EXPECT_EQ(train.at("input_checkpoint_hash"), hash_weights(base.weights));
    EXPECT_EQ(train.at("output_checkpoint_hash"), hash_weights(load_checkpoint(a() / "checkpoints/casal.ck").weights));
}

TEST_F(FullRun, ReportTwiceIsByteIdentical) {
    const std::vector<std::string> outs{"metrics/tau_sweep.csv", "metrics/training_size.csv",
                                        "metrics/silhouette_halluc.csv", "metrics/report_summary.json"};
    std::vector<std::string> first;
    for (const auto& o : outs) first.push_back(read_text(a() / o));
    report(a());
    for (std::size_t i = 0; i < outs.size(); ++i) EXPECT_EQ(read_text(a() / outs[i]), first[i]) << outs[i];
    report(a());
    for (std::size_t i = 0; i < outs.size(); ++i) EXPECT_EQ(read_text(a() / outs[i]), first[i]) << outs[i];
}

TEST_F(FullRun, ResumeSkipsCurrentStagesAndRefusesOverwrite) {
    EXPECT_THROW(run(tiny_run(b())), Error);
    const nlohmann::json before = manifest_of(b()).at("stages");
    run(tiny_run(b()), RunOptions{true, {}});
    const nlohmann::json after = manifest_of(b()).at("stages");
    for (const auto& [name, rec] : before.items()) EXPECT_EQ(after.at(name).at("seconds"), rec.at("seconds")) << name;

    // Changing a training setting reruns train and what depends on its outputs.
    RunConfig changed = tiny_run(b());
    changed.casal.train.epochs = 1;
    run(changed, RunOptions{true, {}});
    const nlohmann::json third = manifest_of(b()).at("stages");
    EXPECT_EQ(third.at("pretrain").at("seconds"), before.at("pretrain").at("seconds"));
    EXPECT_NE(third.at("train").at("config_hash"), before.at("train").at("config_hash"));
    EXPECT_NE(third.at("eval").at("inputs").at("checkpoints/casal.ck"), before.at("eval").at("inputs").at("checkpoints/casal.ck"));
}

}  // namespace
}  // namespace casal
