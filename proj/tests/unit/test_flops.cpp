#include "casal/flops.hpp"

#include "support.hpp"

namespace casal {
namespace {

ArchSpec unit_spec() {
    ArchSpec s;
    s.n_layer = s.d_model = s.d_attn = s.d_ff = s.n_ctx = 1;
    return s;
}

ArchSpec llama_spec() {
    ArchSpec s;
    s.n_layer = 32;
    s.d_model = 4096;
    s.d_attn = 4096;
    s.d_ff = 14336;
    s.n_ctx = 8192;
    s.n_heads = 32;
    s.vocab_size = 128256;
    s.lora_rank = 8;
    return s;
}

TEST(Flops, UnitSpec) {
    const ArchSpec s = unit_spec();
    EXPECT_EQ(base_params(s), 6u);
    EXPECT_EQ(forward_flops_per_token(s), 14u);
    EXPECT_EQ(forward_flops_per_token(s, false), 12u);
    EXPECT_EQ(train_flops_per_token(s, TrainMethod::full), 36u);
    EXPECT_EQ(train_flops_per_token(s, TrainMethod::casal), 6u);
    EXPECT_THROW(train_flops_per_token(s, TrainMethod::lora), Error);
}

TEST(Flops, LinearInDepth) {
    ArchSpec s = llama_spec();
    const std::uint64_t n = base_params(s);
    s.n_layer *= 2;
    EXPECT_EQ(base_params(s), 2 * n);
}

TEST(Flops, LlamaCountsMatchHandArithmetic) {
    const ArchSpec s = llama_spec();
    EXPECT_EQ(base_params(s), 5'905'580'032ull);
    EXPECT_EQ(forward_flops_per_token(s), 2 * 5'905'580'032ull + 2ull * 32 * 8192 * 4096);
    EXPECT_EQ(casal_params(s), 58'720'256ull);
    EXPECT_EQ(train_flops_per_token(s, TrainMethod::casal), 352'321'536ull);
    // Per layer: q, k, v, o adapters of shape (4096 + 4096) x 8 and up, down of (4096 + 14336) x 8.
    const std::uint64_t per_layer = 4ull * 8 * (4096 + 4096) + 2ull * 8 * (4096 + 14336);
    EXPECT_EQ(lora_params(s), 32 * per_layer);
    EXPECT_EQ(train_flops_per_token(s, TrainMethod::lora), 2 * 5'905'580'032ull + 3 * 2 * 32 * per_layer);
    EXPECT_EQ(embedding_flops_per_token(s), 2ull * 128256 * 4096);
}

TEST(Flops, HeadlineRatios) {
    const Ratios r = ratios(llama_spec());
    EXPECT_NEAR(r.casal_param_fraction, 0.009943, 1e-6);
    EXPECT_NEAR(r.casal_param_fraction, 58'720'256.0 / 5'905'580'032.0, 1e-15);
    EXPECT_NEAR(r.lora_param_fraction_simplified, 0.00293, 1e-5);
    EXPECT_GE(r.full_over_lora, 2.9);
    EXPECT_LE(r.full_over_lora, 3.0);
    EXPECT_NEAR(r.casal_vs_lora_speedup, 30.0, 0.15 * 30.0);
}

TEST(Flops, CasalFractionShrinksWithDepth) {
    ArchSpec s = llama_spec();
    double prev = 1.0;
    for (std::uint64_t n = 1; n <= 256; n *= 2) {
        s.n_layer = n;
        const double f = ratios(s).casal_param_fraction;
        EXPECT_LT(f, prev);
        prev = f;
    }
    EXPECT_LT(prev, 2e-3);
}

TEST(Flops, ValidationAndOverflow) {
    ArchSpec s = unit_spec();
    s.d_ff = 0;
    EXPECT_THROW(base_params(s), Error);
    s = unit_spec();
    s.lora_rank = 0;
    EXPECT_THROW(validate(s), Error);
    s = unit_spec();
    s.n_layer = s.d_model = s.d_attn = s.d_ff = 1ull << 40;
    EXPECT_THROW(base_params(s), Error);
}

TEST(Flops, LedgerOutputs) {
    const ArchSpec s = llama_spec();
    const nlohmann::json j = ledger_json(s, false, false);
    EXPECT_EQ(j.at("base_params").get<std::uint64_t>(), 5'905'580'032ull);
    EXPECT_EQ(j.at("forward_flops_per_token").get<std::uint64_t>(), 2 * 5'905'580'032ull);
    EXPECT_EQ(ledger_json(s, false, true).at("forward_flops_per_token").get<std::uint64_t>(),
              2 * 5'905'580'032ull + embedding_flops_per_token(s));
    EXPECT_EQ(j.at("spec").get<ArchSpec>().d_ff, 14336u);
    const std::string csv = ledger_csv(s, true, false);
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "quantity,value");
    EXPECT_NE(csv.find("casal_params,58720256\n"), std::string::npos);
    ArchSpec no_rank = s;
    no_rank.lora_rank.reset();
    EXPECT_FALSE(ledger_json(no_rank, true, false).contains("lora_params"));
}

}  // namespace
}  // namespace casal
