#pragma once

#include "casal/tensor.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace casal {

struct MoeConfig {
    int n_experts = 4;
    int top_k = 2;

    bool operator==(const MoeConfig&) const = default;
};

/// Architecture hyperparameters of the toy decoder (dense or mixture-of-experts).
struct ModelConfig {
    int n_layer = 6;
    int d_model = 64;
    int d_attn = 64;
    int n_heads = 4;
    int d_ff = 128;
    int n_ctx = 16;
    int vocab_size = 64;
    std::optional<MoeConfig> moe;
    std::uint64_t rng_seed = 0;
    double init_std = 0.02;

    bool operator==(const ModelConfig&) const = default;

    int head_dim() const { return d_attn / n_heads; }
    bool is_moe() const { return moe.has_value(); }
};

/// Throws Error when an invariant of the config is violated.
void validate(const ModelConfig& config);

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Gated feed-forward: down(silu(x gate) * (x up)). gate, up: d_model x d_ff; down: d_ff x d_model.
struct FeedForward {
    Mat gate;
    Mat up;
    Mat down;
};

struct LayerWeights {
    Mat attn_norm;  // 1 x d_model
    Mat wq, wk, wv; // d_model x d_attn
    Mat wo;         // d_attn x d_model
    Mat ff_norm;    // 1 x d_model
    FeedForward ff; // dense variant only
    Mat router;     // d_model x n_experts, MoE variant only
    std::vector<FeedForward> experts;
};

struct TransformerWeights {
    Mat tok_emb;  // vocab x d_model
    Mat pos_emb;  // n_ctx x d_model
    std::vector<LayerWeights> layers;
    Mat final_norm;  // 1 x d_model
    Mat unembed;     // d_model x vocab
};

/// Random initialization from config.rng_seed; norm gains start at one.
TransformerWeights init_weights(const ModelConfig& config);

/// Same shapes as init_weights, every entry zero (norm gains included).
TransformerWeights zeros_like(const ModelConfig& config);

/// Checks every tensor shape against the config and that all entries are finite.
void validate(const TransformerWeights& weights, const ModelConfig& config);

/// Visits every tensor with a stable dotted name, in a fixed order.
void for_each_tensor(TransformerWeights& w, const std::function<void(const std::string&, Mat&)>& fn);
void for_each_tensor(const TransformerWeights& w, const std::function<void(const std::string&, const Mat&)>& fn);

std::size_t parameter_count(const TransformerWeights& w);

/// SHA-256 over all tensor names and contents.
std::string hash_weights(const TransformerWeights& w);

// ----------------------------------------------------------------------------
// Activation taps

enum class PositionPolicy { last_token, all_tokens };

/// Where in a layer the residual stream is read.
/// pre_layer is the stream entering the block (a^{L-1}), post_attention the stream after the
/// attention sublayer, post_layer the stream after the full block (a^{L}), ff_intermediate the
/// gated hidden activation of the dense feed-forward (width d_ff).
enum class StreamPoint { pre_layer, post_attention, post_layer, ff_intermediate };

struct ActivationTap {
    int layer_index = 0;
    PositionPolicy position_policy = PositionPolicy::last_token;
    StreamPoint stream_point = StreamPoint::post_layer;
};

std::string to_string(StreamPoint p);
StreamPoint stream_point_from_string(const std::string& s);
std::string to_string(PositionPolicy p);
PositionPolicy position_policy_from_string(const std::string& s);

/// Additive edit of the post-block residual stream at one layer (inference-time steering).
struct ResidualEdit {
    int layer_index = 0;
    RowVec delta;
    PositionPolicy positions = PositionPolicy::all_tokens;
};

struct ForwardResult {
    Mat logits;                  // T x vocab
    std::vector<Mat> captured;   // one entry per tap, in tap order
};

/// Deterministic decoder forward pass over one token sequence.
ForwardResult forward(const TransformerWeights& weights, const ModelConfig& config, const Tokens& tokens,
                      const std::vector<ActivationTap>& taps = {}, const ResidualEdit* edit = nullptr);

// ----------------------------------------------------------------------------
// Building blocks shared with training code

constexpr double kNormEps = 1e-5;

/// RMS normalization of each row followed by elementwise gain.
Mat rms_norm(const Mat& x, const Mat& gain);

inline double silu(double z) { return z / (1.0 + std::exp(-z)); }

/// Gated feed-forward applied to each row of x.
Mat feed_forward(const FeedForward& ff, const Mat& x);

/// Gated hidden activation silu(x gate) * (x up), one row per input row.
Mat feed_forward_hidden(const FeedForward& ff, const Mat& x);

struct Routing {
    std::vector<std::vector<int>> experts;     // per token, selected expert ids in descending weight order
    std::vector<std::vector<double>> weights;  // per token, renormalized weights aligned with experts
};

/// Softmax over router logits, top-k by probability (ties by lower index), renormalized.
Routing route(const Mat& hidden, const Mat& router_gate, int top_k);

/// Sparse mixture-of-experts block: route, gather per expert, weight, scatter-add.
Mat moe_block_forward(const Mat& hidden, const Mat& router_gate, const std::vector<FeedForward>& experts, int top_k);

/// Causal multi-head self-attention over one sequence; returns T x d_attn before the output projection.
Mat causal_attention(const Mat& q, const Mat& k, const Mat& v, int n_heads);

// ----------------------------------------------------------------------------
// Weight substitution

enum class Submodule { down, up, up_and_down, expert_set };

std::string to_string(Submodule s);
Submodule submodule_from_string(const std::string& s);

/// Replacement tensors. Dense submodules use element 0; expert_set uses one entry per expert.
/// An empty vector leaves that projection untouched (expert_set only).
struct SubmoduleTensors {
    std::vector<Mat> up;
    std::vector<Mat> down;
};

/// Returns a copy of weights with only the named submodule of one layer replaced.
TransformerWeights substitute_weights(const TransformerWeights& weights, int layer_index, Submodule submodule,
                                      const SubmoduleTensors& replacement);

}  // namespace casal
