#include "casal/gradients.hpp"

#include <cmath>

namespace casal {

namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

struct NormTape {
    Mat x;
    Eigen::VectorXd inv_rms;
};

Mat rms_norm_tape(const Mat& x, const Mat& gain, NormTape& tape) {
    tape.x = x;
    tape.inv_rms.resize(x.rows());
    Mat out(x.rows(), x.cols());
    const double inv_d = 1.0 / static_cast<double>(x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const double r = 1.0 / std::sqrt(x.row(i).squaredNorm() * inv_d + kNormEps);
        tape.inv_rms(i) = r;
        out.row(i) = (x.row(i) * r).cwiseProduct(gain.row(0));
    }
    return out;
}

Mat rms_norm_backward(const Mat& gain, const NormTape& tape, const Mat& d_out, Mat& d_gain) {
    const double inv_d = 1.0 / static_cast<double>(tape.x.cols());
    Mat dx(tape.x.rows(), tape.x.cols());
    for (Eigen::Index i = 0; i < tape.x.rows(); ++i) {
        const double r = tape.inv_rms(i);
        d_gain.row(0) += (tape.x.row(i) * r).cwiseProduct(d_out.row(i));
        const RowVec y = gain.row(0).cwiseProduct(d_out.row(i));
        const double xy = tape.x.row(i).dot(y);
        dx.row(i) = r * y - tape.x.row(i) * (r * r * r * xy * inv_d);
    }
    return dx;
}

struct AttentionTape {
    Mat q, k, v;
    std::vector<Mat> probs;  // per (sequence, head)
    Mat out;                 // concatenated heads, before wo
};

// Attention over a stack of independent sequences described by offsets.
Mat attention_tape(const Mat& q, const Mat& k, const Mat& v, int n_heads, const std::vector<Eigen::Index>& offsets,
                   AttentionTape& tape) {
    tape.q = q;
    tape.k = k;
    tape.v = v;
    const Eigen::Index hd = q.cols() / n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    tape.out.resize(q.rows(), q.cols());
    tape.probs.clear();
    for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
        const Eigen::Index b = offsets[s];
        const Eigen::Index T = offsets[s + 1] - b;
        for (int h = 0; h < n_heads; ++h) {
            Mat P = (q.block(b, h * hd, T, hd) * k.block(b, h * hd, T, hd).transpose()) * scale;
            for (Eigen::Index i = 0; i < T; ++i) {
                const double mx = P.row(i).head(i + 1).maxCoeff();
                double z = 0.0;
                for (Eigen::Index j = 0; j <= i; ++j) {
                    P(i, j) = std::exp(P(i, j) - mx);
                    z += P(i, j);
                }
                for (Eigen::Index j = 0; j <= i; ++j) P(i, j) /= z;
                for (Eigen::Index j = i + 1; j < T; ++j) P(i, j) = 0.0;
            }
            tape.out.block(b, h * hd, T, hd).noalias() = P * v.block(b, h * hd, T, hd);
            tape.probs.push_back(std::move(P));
        }
    }
    return tape.out;
}

void attention_backward(const AttentionTape& tape, const Mat& d_out, int n_heads,
                        const std::vector<Eigen::Index>& offsets, Mat& dq, Mat& dk, Mat& dv) {
    const Eigen::Index hd = tape.q.cols() / n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    dq.setZero(tape.q.rows(), tape.q.cols());
    dk.setZero(tape.k.rows(), tape.k.cols());
    dv.setZero(tape.v.rows(), tape.v.cols());
    std::size_t idx = 0;
    for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
        const Eigen::Index b = offsets[s];
        const Eigen::Index T = offsets[s + 1] - b;
        for (int h = 0; h < n_heads; ++h, ++idx) {
            const Mat& P = tape.probs[idx];
            const auto dO = d_out.block(b, h * hd, T, hd);
            dv.block(b, h * hd, T, hd).noalias() += P.transpose() * dO;
            Mat dP = dO * tape.v.block(b, h * hd, T, hd).transpose();
            for (Eigen::Index i = 0; i < T; ++i) {
                const double dot = dP.row(i).dot(P.row(i));
                for (Eigen::Index j = 0; j < T; ++j) dP(i, j) = P(i, j) * (dP(i, j) - dot) * scale;
            }
            dq.block(b, h * hd, T, hd).noalias() += dP * tape.k.block(b, h * hd, T, hd);
            dk.block(b, h * hd, T, hd).noalias() += dP.transpose() * tape.q.block(b, h * hd, T, hd);
        }
    }
}

struct LayerTape {
    NormTape norm1;
    Mat n1;
    AttentionTape attn;
    NormTape norm2;
    Mat n2;
    FfnTape ffn;
    MoeTape moe;
};

}  // namespace

Mat ffn_forward_tape(const FeedForward& ff, const Mat& x, FfnTape& tape) {
    tape.x = x;
    tape.gate_pre.noalias() = x * ff.gate;
    tape.up_pre.noalias() = x * ff.up;
    tape.hidden.resize(tape.gate_pre.rows(), tape.gate_pre.cols());
    for (Eigen::Index i = 0; i < tape.hidden.size(); ++i) {
        tape.hidden.data()[i] = silu(tape.gate_pre.data()[i]) * tape.up_pre.data()[i];
    }
    return tape.hidden * ff.down;
}

Mat ffn_backward(const FeedForward& ff, const FfnTape& tape, const Mat& d_out, FeedForward& grad,
                 const FfnGradMask& mask) {
    if (mask.down) grad.down.noalias() += tape.hidden.transpose() * d_out;
    if (!mask.gate && !mask.up && !mask.input) return {};
    const Mat dh = d_out * ff.down.transpose();
    Mat d_gate(dh.rows(), dh.cols());
    Mat d_up(dh.rows(), dh.cols());
    for (Eigen::Index i = 0; i < dh.size(); ++i) {
        const double z = tape.gate_pre.data()[i];
        const double s = sigmoid(z);
        d_up.data()[i] = dh.data()[i] * z * s;
        d_gate.data()[i] = dh.data()[i] * tape.up_pre.data()[i] * s * (1.0 + z * (1.0 - s));
    }
    if (mask.gate) grad.gate.noalias() += tape.x.transpose() * d_gate;
    if (mask.up) grad.up.noalias() += tape.x.transpose() * d_up;
    if (!mask.input) return {};
    Mat dx = d_gate * ff.gate.transpose();
    dx.noalias() += d_up * ff.up.transpose();
    return dx;
}

Mat moe_forward_tape(const Mat& x, const Mat& router, const std::vector<FeedForward>& experts, int top_k,
                     MoeTape& tape) {
    tape.x = x;
    tape.routing = route(x, router, top_k);
    const std::size_t E = experts.size();
    tape.rows.assign(E, {});
    tape.scale.assign(E, {});
    tape.expert_tapes.assign(E, {});
    tape.expert_out.assign(E, {});
    for (std::size_t t = 0; t < tape.routing.experts.size(); ++t) {
        for (std::size_t i = 0; i < tape.routing.experts[t].size(); ++i) {
            const auto e = static_cast<std::size_t>(tape.routing.experts[t][i]);
            tape.rows[e].push_back(static_cast<Eigen::Index>(t));
            tape.scale[e].push_back(tape.routing.weights[t][i]);
        }
    }
    Mat out = Mat::Zero(x.rows(), x.cols());
    for (std::size_t e = 0; e < E; ++e) {
        if (tape.rows[e].empty()) continue;
        Mat g(static_cast<Eigen::Index>(tape.rows[e].size()), x.cols());
        for (std::size_t i = 0; i < tape.rows[e].size(); ++i) g.row(static_cast<Eigen::Index>(i)) = x.row(tape.rows[e][i]);
        tape.expert_out[e] = ffn_forward_tape(experts[e], g, tape.expert_tapes[e]);
        for (std::size_t i = 0; i < tape.rows[e].size(); ++i) {
            out.row(tape.rows[e][i]) += tape.scale[e][i] * tape.expert_out[e].row(static_cast<Eigen::Index>(i));
        }
    }
    return out;
}

Mat moe_backward(const Mat& router, const std::vector<FeedForward>& experts, const MoeTape& tape, const Mat& d_out,
                 std::vector<FeedForward>& expert_grads, Mat* router_grad, const FfnGradMask& mask) {
    const std::size_t E = experts.size();
    Mat dx = Mat::Zero(tape.x.rows(), tape.x.cols());
    // d(loss)/d(routing weight) per token and selected slot.
    std::vector<std::vector<double>> d_weight(tape.routing.experts.size());
    for (std::size_t t = 0; t < d_weight.size(); ++t) d_weight[t].assign(tape.routing.experts[t].size(), 0.0);
    for (std::size_t e = 0; e < E; ++e) {
        if (tape.rows[e].empty()) continue;
        const auto n = static_cast<Eigen::Index>(tape.rows[e].size());
        Mat dy(n, d_out.cols());
        for (Eigen::Index i = 0; i < n; ++i) {
            const Eigen::Index t = tape.rows[e][static_cast<std::size_t>(i)];
            dy.row(i) = tape.scale[e][static_cast<std::size_t>(i)] * d_out.row(t);
            if (router_grad) {
                const auto& sel = tape.routing.experts[static_cast<std::size_t>(t)];
                for (std::size_t s = 0; s < sel.size(); ++s) {
                    if (sel[s] == static_cast<int>(e)) {
                        d_weight[static_cast<std::size_t>(t)][s] = d_out.row(t).dot(tape.expert_out[e].row(i));
                    }
                }
            }
        }
        const Mat dxe = ffn_backward(experts[e], tape.expert_tapes[e], dy, expert_grads[e], mask);
        if (mask.input) {
            for (Eigen::Index i = 0; i < n; ++i) dx.row(tape.rows[e][static_cast<std::size_t>(i)]) += dxe.row(i);
        }
    }
    if (router_grad) {
        // Renormalized top-k weights equal a softmax over the selected logits only.
        Mat dz = Mat::Zero(tape.x.rows(), router.cols());
        for (std::size_t t = 0; t < d_weight.size(); ++t) {
            const auto& w = tape.routing.weights[t];
            double dot = 0.0;
            for (std::size_t s = 0; s < w.size(); ++s) dot += w[s] * d_weight[t][s];
            for (std::size_t s = 0; s < w.size(); ++s) {
                dz(static_cast<Eigen::Index>(t), tape.routing.experts[t][s]) = w[s] * (d_weight[t][s] - dot);
            }
        }
        router_grad->noalias() += tape.x.transpose() * dz;
        if (mask.input) dx.noalias() += dz * router.transpose();
    }
    return dx;
}

LossAndGrad lm_loss_and_grad(const TransformerWeights& w, const ModelConfig& c, std::span<const LmExample> batch,
                             bool want_grad) {
    if (batch.empty()) throw Error("lm_loss_and_grad: empty batch");
    std::vector<Eigen::Index> offsets{0};
    for (const auto& ex : batch) {
        if (ex.tokens.size() < 2) throw Error("lm_loss_and_grad: example needs at least two tokens");
        if (ex.tokens.size() > static_cast<std::size_t>(c.n_ctx)) throw Error("lm_loss_and_grad: example exceeds n_ctx");
        offsets.push_back(offsets.back() + static_cast<Eigen::Index>(ex.tokens.size()));
    }
    const Eigen::Index N = offsets.back();
    Mat x(N, c.d_model);
    for (std::size_t s = 0; s < batch.size(); ++s) {
        for (std::size_t t = 0; t < batch[s].tokens.size(); ++t) {
            const TokenId id = batch[s].tokens[t];
            if (id < 0 || id >= c.vocab_size) throw Error("lm_loss_and_grad: token out of range");
            x.row(offsets[s] + static_cast<Eigen::Index>(t)) = w.tok_emb.row(id) + w.pos_emb.row(static_cast<Eigen::Index>(t));
        }
    }

    std::vector<LayerTape> tapes(static_cast<std::size_t>(c.n_layer));
    for (int l = 0; l < c.n_layer; ++l) {
        const auto& L = w.layers[static_cast<std::size_t>(l)];
        auto& tp = tapes[static_cast<std::size_t>(l)];
        tp.n1 = rms_norm_tape(x, L.attn_norm, tp.norm1);
        const Mat att = attention_tape(tp.n1 * L.wq, tp.n1 * L.wk, tp.n1 * L.wv, c.n_heads, offsets, tp.attn);
        x.noalias() += att * L.wo;
        tp.n2 = rms_norm_tape(x, L.ff_norm, tp.norm2);
        if (c.moe) {
            x += moe_forward_tape(tp.n2, L.router, L.experts, c.moe->top_k, tp.moe);
        } else {
            x += ffn_forward_tape(L.ff, tp.n2, tp.ffn);
        }
    }
    NormTape final_tape;
    const Mat nf = rms_norm_tape(x, w.final_norm, final_tape);
    const Mat logits = nf * w.unembed;

    // Cross-entropy over target positions.
    std::size_t n_targets = 0;
    for (const auto& ex : batch) {
        for (std::size_t i = std::max<std::size_t>(ex.loss_from, 1); i < ex.tokens.size(); ++i) ++n_targets;
    }
    if (n_targets == 0) throw Error("lm_loss_and_grad: batch has no target tokens");
    Mat d_logits = Mat::Zero(N, c.vocab_size);
    double loss = 0.0;
    const double inv_n = 1.0 / static_cast<double>(n_targets);
    for (std::size_t s = 0; s < batch.size(); ++s) {
        for (std::size_t i = std::max<std::size_t>(batch[s].loss_from, 1); i < batch[s].tokens.size(); ++i) {
            const Eigen::Index row = offsets[s] + static_cast<Eigen::Index>(i) - 1;
            const double mx = logits.row(row).maxCoeff();
            double z = 0.0;
            for (Eigen::Index v = 0; v < c.vocab_size; ++v) z += std::exp(logits(row, v) - mx);
            const TokenId target = batch[s].tokens[i];
            loss -= (logits(row, target) - mx - std::log(z)) * inv_n;
            if (want_grad) {
                for (Eigen::Index v = 0; v < c.vocab_size; ++v) d_logits(row, v) = std::exp(logits(row, v) - mx) / z * inv_n;
                d_logits(row, target) -= inv_n;
            }
        }
    }
    LossAndGrad result;
    result.loss = loss;
    result.n_targets = n_targets;
    if (!want_grad) return result;

    TransformerWeights g = zeros_like(c);
    g.unembed.noalias() = nf.transpose() * d_logits;
    Mat dx = rms_norm_backward(w.final_norm, final_tape, d_logits * w.unembed.transpose(), g.final_norm);
    for (int l = c.n_layer - 1; l >= 0; --l) {
        const auto& L = w.layers[static_cast<std::size_t>(l)];
        auto& G = g.layers[static_cast<std::size_t>(l)];
        const auto& tp = tapes[static_cast<std::size_t>(l)];
        Mat dn2;
        if (c.moe) {
            dn2 = moe_backward(L.router, L.experts, tp.moe, dx, G.experts, &G.router);
        } else {
            dn2 = ffn_backward(L.ff, tp.ffn, dx, G.ff);
        }
        dx += rms_norm_backward(L.ff_norm, tp.norm2, dn2, G.ff_norm);
        G.wo.noalias() += tp.attn.out.transpose() * dx;
        const Mat d_att = dx * L.wo.transpose();
        Mat dq, dk, dv;
        attention_backward(tp.attn, d_att, c.n_heads, offsets, dq, dk, dv);
        G.wq.noalias() += tp.n1.transpose() * dq;
        G.wk.noalias() += tp.n1.transpose() * dk;
        G.wv.noalias() += tp.n1.transpose() * dv;
        Mat dn1 = dq * L.wq.transpose();
        dn1.noalias() += dk * L.wk.transpose();
        dn1.noalias() += dv * L.wv.transpose();
        dx += rms_norm_backward(L.attn_norm, tp.norm1, dn1, G.attn_norm);
    }
    for (std::size_t s = 0; s < batch.size(); ++s) {
        for (std::size_t t = 0; t < batch[s].tokens.size(); ++t) {
            const Eigen::Index row = offsets[s] + static_cast<Eigen::Index>(t);
            g.tok_emb.row(batch[s].tokens[t]) += dx.row(row);
            g.pos_emb.row(static_cast<Eigen::Index>(t)) += dx.row(row);
        }
    }
    result.grad = std::move(g);
    return result;
}

}  // namespace casal
