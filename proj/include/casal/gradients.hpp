#pragma once

#include "casal/model.hpp"

#include <span>

namespace casal {

/// Which gradients a feed-forward backward pass should produce.
struct FfnGradMask {
    bool gate = true;
    bool up = true;
    bool down = true;
    bool input = true;
};

/// Intermediates of a gated feed-forward needed by its backward pass.
struct FfnTape {
    Mat x;       // input rows
    Mat gate_pre;  // x * gate
    Mat up_pre;    // x * up
    Mat hidden;    // silu(gate_pre) * up_pre
};

Mat ffn_forward_tape(const FeedForward& ff, const Mat& x, FfnTape& tape);

/// Accumulates parameter gradients into grad; returns d(input) when mask.input is set.
Mat ffn_backward(const FeedForward& ff, const FfnTape& tape, const Mat& d_out, FeedForward& grad,
                 const FfnGradMask& mask = {});

struct MoeTape {
    Routing routing;
    std::vector<std::vector<Eigen::Index>> rows;   // per expert, token rows routed to it
    std::vector<std::vector<double>> scale;        // per expert, routing weight per routed row
    std::vector<FfnTape> expert_tapes;
    std::vector<Mat> expert_out;                   // per expert, unweighted outputs for routed rows
    Mat x;
};

Mat moe_forward_tape(const Mat& x, const Mat& router, const std::vector<FeedForward>& experts, int top_k,
                     MoeTape& tape);

/// Backward through routed experts. Router gradient is accumulated only when router_grad is non-null.
Mat moe_backward(const Mat& router, const std::vector<FeedForward>& experts, const MoeTape& tape, const Mat& d_out,
                 std::vector<FeedForward>& expert_grads, Mat* router_grad, const FfnGradMask& mask = {});

/// One language-modelling example: tokens[i] for i >= loss_from is predicted from the prefix.
struct LmExample {
    Tokens tokens;
    std::size_t loss_from = 1;
};

struct LossAndGrad {
    double loss = 0.0;               // mean cross-entropy over predicted tokens
    std::size_t n_targets = 0;
    TransformerWeights grad;         // empty tensors when gradients were not requested
};

/// Mean next-token cross-entropy over a batch and, optionally, its gradient w.r.t. every weight.
LossAndGrad lm_loss_and_grad(const TransformerWeights& weights, const ModelConfig& config,
                             std::span<const LmExample> batch, bool want_grad = true);

}  // namespace casal
