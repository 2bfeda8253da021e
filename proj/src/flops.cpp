#include "casal/flops.hpp"

#include "casal/tensor.hpp"

#include <limits>
#include <sstream>

namespace casal {

namespace {

using u128 = unsigned __int128;

std::uint64_t checked(u128 v, const char* what) {
    if (v > std::numeric_limits<std::uint64_t>::max()) throw Error(std::string("flops: overflow in ") + what);
    return static_cast<std::uint64_t>(v);
}

std::uint64_t rank_of(const ArchSpec& s) {
    if (!s.lora_rank) throw Error("flops: LoRA quantities need lora_rank");
    return *s.lora_rank;
}

}  // namespace

void validate(const ArchSpec& s) {
    if (s.n_layer == 0 || s.d_model == 0 || s.d_attn == 0 || s.d_ff == 0 || s.n_heads == 0) {
        throw Error("flops: n_layer, d_model, d_attn, d_ff and n_heads must be positive");
    }
    if (s.lora_rank && *s.lora_rank == 0) throw Error("flops: lora_rank must be at least 1");
}

void to_json(nlohmann::json& j, const ArchSpec& s) {
    j = {{"n_layer", s.n_layer}, {"d_model", s.d_model}, {"d_attn", s.d_attn},        {"d_ff", s.d_ff},
         {"n_ctx", s.n_ctx},     {"n_heads", s.n_heads}, {"vocab_size", s.vocab_size}};
    if (s.lora_rank) j["lora_rank"] = *s.lora_rank;
}

void from_json(const nlohmann::json& j, ArchSpec& s) {
    s.n_layer = j.at("n_layer").get<std::uint64_t>();
    s.d_model = j.at("d_model").get<std::uint64_t>();
    s.d_attn = j.value("d_attn", s.d_model);
    s.d_ff = j.at("d_ff").get<std::uint64_t>();
    s.n_ctx = j.value("n_ctx", std::uint64_t{0});
    s.n_heads = j.value("n_heads", std::uint64_t{1});
    s.vocab_size = j.value("vocab_size", std::uint64_t{0});
    if (j.contains("lora_rank") && !j.at("lora_rank").is_null()) s.lora_rank = j.at("lora_rank").get<std::uint64_t>();
}

std::uint64_t base_params(const ArchSpec& s) {
    validate(s);
    return checked(u128{2} * s.d_model * s.n_layer * (u128{2} * s.d_attn + s.d_ff), "base_params");
}

std::uint64_t forward_flops_per_token(const ArchSpec& s, bool include_context) {
    const u128 n = base_params(s);
    u128 c = 2 * n;
    if (include_context) c += u128{2} * s.n_layer * s.n_ctx * s.d_attn;
    return checked(c, "forward_flops_per_token");
}

std::uint64_t embedding_flops_per_token(const ArchSpec& s) {
    validate(s);
    return checked(u128{2} * s.vocab_size * s.d_model, "embedding_flops_per_token");
}

std::uint64_t casal_params(const ArchSpec& s) {
    validate(s);
    return checked(u128{s.d_model} * s.d_ff, "casal_params");
}

std::uint64_t lora_params(const ArchSpec& s) {
    validate(s);
    const u128 r = rank_of(s);
    const u128 attn = 4 * r * (u128{s.d_model} + s.d_attn);
    const u128 ffn = 2 * r * (u128{s.d_model} + s.d_ff);
    return checked(u128{s.n_layer} * (attn + ffn), "lora_params");
}

std::uint64_t lora_forward_flops_per_token(const ArchSpec& s) {
    return checked(u128{2} * lora_params(s), "lora_forward_flops_per_token");
}

std::uint64_t train_flops_per_token(const ArchSpec& s, TrainMethod method) {
    switch (method) {
        case TrainMethod::full: return checked(u128{6} * base_params(s), "full training flops");
        case TrainMethod::casal: return checked(u128{6} * casal_params(s), "casal training flops");
        case TrainMethod::lora:
            return checked(u128{forward_flops_per_token(s, false)} + u128{3} * lora_forward_flops_per_token(s),
                           "lora training flops");
    }
    throw Error("flops: unknown method");
}

Ratios ratios(const ArchSpec& s) {
    validate(s);
    Ratios r;
    r.casal_param_fraction = static_cast<double>(s.d_ff) /
                             (2.0 * static_cast<double>(s.n_layer) * (2.0 * static_cast<double>(s.d_attn) + static_cast<double>(s.d_ff)));
    if (s.lora_rank) {
        const double n = static_cast<double>(base_params(s));
        r.lora_param_fraction = static_cast<double>(lora_params(s)) / n;
        r.lora_param_fraction_simplified = 3.0 * static_cast<double>(*s.lora_rank) / (2.0 * static_cast<double>(s.d_model));
        const double c_lora = static_cast<double>(train_flops_per_token(s, TrainMethod::lora));
        r.full_over_lora = static_cast<double>(train_flops_per_token(s, TrainMethod::full)) / c_lora;
        r.casal_vs_lora_speedup = c_lora / static_cast<double>(train_flops_per_token(s, TrainMethod::casal));
    }
    return r;
}

nlohmann::json ledger_json(const ArchSpec& s, bool include_context, bool include_embedding) {
    nlohmann::json j;
    j["spec"] = s;
    j["base_params"] = base_params(s);
    std::uint64_t fwd = forward_flops_per_token(s, include_context);
    if (include_embedding) fwd += embedding_flops_per_token(s);
    j["forward_flops_per_token"] = fwd;
    j["include_context"] = include_context;
    j["include_embedding"] = include_embedding;
    j["casal_params"] = casal_params(s);
    j["train_flops_full"] = train_flops_per_token(s, TrainMethod::full);
    j["train_flops_casal"] = train_flops_per_token(s, TrainMethod::casal);
    const Ratios r = ratios(s);
    j["casal_param_fraction"] = r.casal_param_fraction;
    if (s.lora_rank) {
        j["lora_params"] = lora_params(s);
        j["lora_forward_flops_per_token"] = lora_forward_flops_per_token(s);
        j["train_flops_lora"] = train_flops_per_token(s, TrainMethod::lora);
        j["lora_param_fraction"] = r.lora_param_fraction;
        j["lora_param_fraction_simplified"] = r.lora_param_fraction_simplified;
        j["full_over_lora"] = r.full_over_lora;
        j["casal_vs_lora_speedup"] = r.casal_vs_lora_speedup;
    }
    return j;
}

std::string ledger_csv(const ArchSpec& s, bool include_context, bool include_embedding) {
    const nlohmann::json j = ledger_json(s, include_context, include_embedding);
    std::ostringstream out;
    out.precision(17);
    out << "quantity,value\n";
    for (const auto& [key, value] : j.items()) {
        if (key == "spec") continue;
        out << key << ",";
        if (value.is_number_float()) {
            out << value.get<double>();
        } else {
            out << value.dump();
        }
        out << "\n";
    }
    return out.str();
}

}  // namespace casal
