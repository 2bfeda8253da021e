#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <optional>
#include <string>

namespace casal {

/// Architecture dimensions for compute accounting (independent of the toy model).
struct ArchSpec {
    std::uint64_t n_layer = 0;
    std::uint64_t d_model = 0;
    std::uint64_t d_attn = 0;
    std::uint64_t d_ff = 0;
    std::uint64_t n_ctx = 0;
    std::uint64_t n_heads = 1;
    std::uint64_t vocab_size = 0;
    std::optional<std::uint64_t> lora_rank;
};

void validate(const ArchSpec& spec);
void to_json(nlohmann::json& j, const ArchSpec& s);
void from_json(const nlohmann::json& j, ArchSpec& s);

/// Non-embedding parameters: 2 d_model n_layer (2 d_attn + d_ff).
std::uint64_t base_params(const ArchSpec& spec);

/// 2N + 2 n_layer n_ctx d_attn, or 2N when include_context is false.
std::uint64_t forward_flops_per_token(const ArchSpec& spec, bool include_context = true);

/// 2 * vocab_size * d_model (embedding lookup excluded, unembedding matmul only).
std::uint64_t embedding_flops_per_token(const ArchSpec& spec);

/// Trainable parameters of a single feed-forward projection: d_model d_ff.
std::uint64_t casal_params(const ArchSpec& spec);

/// LoRA adapter parameters summed per weight matrix:
/// n_layer [ r(d_model + d_attn) * 4 + r(d_model + d_ff) * 2 ].
std::uint64_t lora_params(const ArchSpec& spec);

/// Forward cost of the adapters: 2 * lora_params.
std::uint64_t lora_forward_flops_per_token(const ArchSpec& spec);

enum class TrainMethod { full, casal, lora };

/// full: 6N; casal: 6 d_model d_ff; lora: 2N + 3 * lora forward.
std::uint64_t train_flops_per_token(const ArchSpec& spec, TrainMethod method);

struct Ratios {
    double casal_param_fraction = 0.0;        // d_ff / (2 n_layer (2 d_attn + d_ff))
    double lora_param_fraction = 0.0;         // exact: lora_params / N
    double lora_param_fraction_simplified = 0.0;  // 3 r / (2 d_model)
    double full_over_lora = 0.0;              // 6N / C_lora
    double casal_vs_lora_speedup = 0.0;       // C_lora / C_casal
};

Ratios ratios(const ArchSpec& spec);

/// Every ledger quantity as JSON (integers exact).
nlohmann::json ledger_json(const ArchSpec& spec, bool include_context, bool include_embedding);
/// Same quantities as "quantity,value" CSV lines.
std::string ledger_csv(const ArchSpec& spec, bool include_context, bool include_embedding);

}  // namespace casal
