#include "casal/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace casal {

void validate(const ModelConfig& c) {
    auto positive = [](int v, const char* name) {
        if (v <= 0) throw Error(std::string("ModelConfig: ") + name + " must be positive");
    };
    positive(c.n_layer, "n_layer");
    positive(c.d_model, "d_model");
    positive(c.d_attn, "d_attn");
    positive(c.n_heads, "n_heads");
    positive(c.d_ff, "d_ff");
    positive(c.n_ctx, "n_ctx");
    positive(c.vocab_size, "vocab_size");
    if (c.d_attn % c.n_heads != 0) throw Error("ModelConfig: d_attn must be divisible by n_heads");
    if (c.n_layer < 3) throw Error("ModelConfig: n_layer must be at least 3");
    if (c.moe) {
        positive(c.moe->n_experts, "moe.n_experts");
        positive(c.moe->top_k, "moe.top_k");
        if (c.moe->top_k > c.moe->n_experts) throw Error("ModelConfig: moe.top_k exceeds moe.n_experts");
    }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"n_layer", c.n_layer}, {"d_model", c.d_model},       {"d_attn", c.d_attn},
                       {"n_heads", c.n_heads}, {"d_ff", c.d_ff},             {"n_ctx", c.n_ctx},
                       {"vocab_size", c.vocab_size}, {"rng_seed", c.rng_seed}, {"init_std", c.init_std}};
    if (c.moe) {
        j["moe"] = {{"n_experts", c.moe->n_experts}, {"top_k", c.moe->top_k}};
    } else {
        j["moe"] = nullptr;
    }
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    ModelConfig d;
    c.n_layer = j.value("n_layer", d.n_layer);
    c.d_model = j.value("d_model", d.d_model);
    c.d_attn = j.value("d_attn", c.d_model);
    c.n_heads = j.value("n_heads", d.n_heads);
    c.d_ff = j.value("d_ff", d.d_ff);
    c.n_ctx = j.value("n_ctx", d.n_ctx);
    c.vocab_size = j.value("vocab_size", d.vocab_size);
    c.rng_seed = j.value("rng_seed", d.rng_seed);
    c.init_std = j.value("init_std", d.init_std);
    c.moe.reset();
    if (j.contains("moe") && !j.at("moe").is_null()) {
        MoeConfig m;
        m.n_experts = j.at("moe").value("n_experts", m.n_experts);
        m.top_k = j.at("moe").value("top_k", m.top_k);
        c.moe = m;
    }
}

namespace {

Mat random_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double std) {
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = std * rng.normal();
    return m;
}

FeedForward make_ff(Rng& rng, const ModelConfig& c, double out_std) {
    return FeedForward{random_matrix(rng, c.d_model, c.d_ff, c.init_std),
                       random_matrix(rng, c.d_model, c.d_ff, c.init_std),
                       random_matrix(rng, c.d_ff, c.d_model, out_std)};
}

}  // namespace

TransformerWeights init_weights(const ModelConfig& c) {
    validate(c);
    Rng rng(derive_seed(c.rng_seed, "init_weights"));
    const double std = c.init_std;
    // Output projections into the residual stream are scaled down with depth.
    const double out_std = std / std::sqrt(2.0 * c.n_layer);
    TransformerWeights w;
    w.tok_emb = random_matrix(rng, c.vocab_size, c.d_model, std);
    w.pos_emb = random_matrix(rng, c.n_ctx, c.d_model, std);
    w.layers.resize(static_cast<std::size_t>(c.n_layer));
    for (auto& layer : w.layers) {
        layer.attn_norm = Mat::Ones(1, c.d_model);
        layer.wq = random_matrix(rng, c.d_model, c.d_attn, std);
        layer.wk = random_matrix(rng, c.d_model, c.d_attn, std);
        layer.wv = random_matrix(rng, c.d_model, c.d_attn, std);
        layer.wo = random_matrix(rng, c.d_attn, c.d_model, out_std);
        layer.ff_norm = Mat::Ones(1, c.d_model);
        if (c.moe) {
            layer.router = random_matrix(rng, c.d_model, c.moe->n_experts, std);
            for (int e = 0; e < c.moe->n_experts; ++e) layer.experts.push_back(make_ff(rng, c, out_std));
        } else {
            layer.ff = make_ff(rng, c, out_std);
        }
    }
    w.final_norm = Mat::Ones(1, c.d_model);
    w.unembed = random_matrix(rng, c.d_model, c.vocab_size, std);
    return w;
}

TransformerWeights zeros_like(const ModelConfig& c) {
    validate(c);
    auto ff = [&] { return FeedForward{Mat::Zero(c.d_model, c.d_ff), Mat::Zero(c.d_model, c.d_ff), Mat::Zero(c.d_ff, c.d_model)}; };
    TransformerWeights w;
    w.tok_emb = Mat::Zero(c.vocab_size, c.d_model);
    w.pos_emb = Mat::Zero(c.n_ctx, c.d_model);
    w.layers.resize(static_cast<std::size_t>(c.n_layer));
    for (auto& layer : w.layers) {
        layer.attn_norm = Mat::Zero(1, c.d_model);
        layer.wq = Mat::Zero(c.d_model, c.d_attn);
        layer.wk = Mat::Zero(c.d_model, c.d_attn);
        layer.wv = Mat::Zero(c.d_model, c.d_attn);
        layer.wo = Mat::Zero(c.d_attn, c.d_model);
        layer.ff_norm = Mat::Zero(1, c.d_model);
        if (c.moe) {
            layer.router = Mat::Zero(c.d_model, c.moe->n_experts);
            layer.experts.assign(static_cast<std::size_t>(c.moe->n_experts), ff());
        } else {
            layer.ff = ff();
        }
    }
    w.final_norm = Mat::Zero(1, c.d_model);
    w.unembed = Mat::Zero(c.d_model, c.vocab_size);
    return w;
}

void for_each_tensor(TransformerWeights& w, const std::function<void(const std::string&, Mat&)>& fn) {
    fn("tok_emb", w.tok_emb);
    fn("pos_emb", w.pos_emb);
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
        auto& L = w.layers[l];
        const std::string p = "layers." + std::to_string(l) + ".";
        fn(p + "attn_norm", L.attn_norm);
        fn(p + "wq", L.wq);
        fn(p + "wk", L.wk);
        fn(p + "wv", L.wv);
        fn(p + "wo", L.wo);
        fn(p + "ff_norm", L.ff_norm);
        if (L.experts.empty()) {
            fn(p + "ff.gate", L.ff.gate);
            fn(p + "ff.up", L.ff.up);
            fn(p + "ff.down", L.ff.down);
        } else {
            fn(p + "router", L.router);
            for (std::size_t e = 0; e < L.experts.size(); ++e) {
                const std::string q = p + "experts." + std::to_string(e) + ".";
                fn(q + "gate", L.experts[e].gate);
                fn(q + "up", L.experts[e].up);
                fn(q + "down", L.experts[e].down);
            }
        }
    }
    fn("final_norm", w.final_norm);
    fn("unembed", w.unembed);
}

void for_each_tensor(const TransformerWeights& w, const std::function<void(const std::string&, const Mat&)>& fn) {
    for_each_tensor(const_cast<TransformerWeights&>(w), [&](const std::string& name, Mat& m) { fn(name, m); });
}

std::size_t parameter_count(const TransformerWeights& w) {
    std::size_t n = 0;
    for_each_tensor(w, [&](const std::string&, const Mat& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
}

std::string hash_weights(const TransformerWeights& w) {
    std::string acc;
    for_each_tensor(w, [&](const std::string& name, const Mat& m) {
        acc += name;
        acc += ':';
        acc += hash_matrix(m);
        acc += '\n';
    });
    return sha256_hex(acc);
}

void validate(const TransformerWeights& w, const ModelConfig& c) {
    validate(c);
    if (w.layers.size() != static_cast<std::size_t>(c.n_layer)) {
        throw ShapeError("weights have " + std::to_string(w.layers.size()) + " layers, config says " +
                         std::to_string(c.n_layer));
    }
    require_shape(w.tok_emb, c.vocab_size, c.d_model, "tok_emb");
    require_shape(w.pos_emb, c.n_ctx, c.d_model, "pos_emb");
    require_shape(w.final_norm, 1, c.d_model, "final_norm");
    require_shape(w.unembed, c.d_model, c.vocab_size, "unembed");
    auto check_ff = [&](const FeedForward& ff, const std::string& p) {
        require_shape(ff.gate, c.d_model, c.d_ff, p + "gate");
        require_shape(ff.up, c.d_model, c.d_ff, p + "up");
        require_shape(ff.down, c.d_ff, c.d_model, p + "down");
    };
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
        const auto& L = w.layers[l];
        const std::string p = "layers." + std::to_string(l) + ".";
        require_shape(L.attn_norm, 1, c.d_model, p + "attn_norm");
        require_shape(L.wq, c.d_model, c.d_attn, p + "wq");
        require_shape(L.wk, c.d_model, c.d_attn, p + "wk");
        require_shape(L.wv, c.d_model, c.d_attn, p + "wv");
        require_shape(L.wo, c.d_attn, c.d_model, p + "wo");
        require_shape(L.ff_norm, 1, c.d_model, p + "ff_norm");
        if (c.moe) {
            require_shape(L.router, c.d_model, c.moe->n_experts, p + "router");
            if (L.experts.size() != static_cast<std::size_t>(c.moe->n_experts)) {
                throw ShapeError(p + "experts: wrong expert count");
            }
            for (std::size_t e = 0; e < L.experts.size(); ++e) check_ff(L.experts[e], p + "experts." + std::to_string(e) + ".");
        } else {
            if (!L.experts.empty()) throw ShapeError(p + "experts present in a dense config");
            check_ff(L.ff, p + "ff.");
        }
    }
    for_each_tensor(w, [](const std::string& name, const Mat& m) {
        if (!m.allFinite()) throw Error("non-finite entries in " + name);
    });
}

// ----------------------------------------------------------------------------

std::string to_string(StreamPoint p) {
    switch (p) {
        case StreamPoint::pre_layer: return "pre_layer";
        case StreamPoint::post_attention: return "post_attention";
        case StreamPoint::post_layer: return "post_layer";
        case StreamPoint::ff_intermediate: return "ff_intermediate";
    }
    return "?";
}

StreamPoint stream_point_from_string(const std::string& s) {
    if (s == "pre_layer") return StreamPoint::pre_layer;
    if (s == "post_attention") return StreamPoint::post_attention;
    if (s == "post_layer") return StreamPoint::post_layer;
    if (s == "ff_intermediate") return StreamPoint::ff_intermediate;
    throw Error("unknown stream point: " + s);
}

std::string to_string(PositionPolicy p) { return p == PositionPolicy::last_token ? "last_token" : "all_tokens"; }

PositionPolicy position_policy_from_string(const std::string& s) {
    if (s == "last_token") return PositionPolicy::last_token;
    if (s == "all_tokens") return PositionPolicy::all_tokens;
    throw Error("unknown position policy: " + s);
}

Mat rms_norm(const Mat& x, const Mat& gain) {
    Mat out(x.rows(), x.cols());
    const double inv_d = 1.0 / static_cast<double>(x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const double r = 1.0 / std::sqrt(x.row(i).squaredNorm() * inv_d + kNormEps);
        out.row(i) = (x.row(i) * r).cwiseProduct(gain.row(0));
    }
    return out;
}

Mat feed_forward_hidden(const FeedForward& ff, const Mat& x) {
    Mat g = x * ff.gate;
    const Mat u = x * ff.up;
    for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = silu(g.data()[i]) * u.data()[i];
    return g;
}

Mat feed_forward(const FeedForward& ff, const Mat& x) { return feed_forward_hidden(ff, x) * ff.down; }

Routing route(const Mat& hidden, const Mat& router_gate, int top_k) {
    const Mat logits = hidden * router_gate;
    if (!logits.allFinite()) throw Error("moe: non-finite router logits");
    const auto n_experts = static_cast<int>(router_gate.cols());
    if (top_k < 1 || top_k > n_experts) throw Error("moe: top_k out of range");
    Routing r;
    r.experts.resize(static_cast<std::size_t>(hidden.rows()));
    r.weights.resize(static_cast<std::size_t>(hidden.rows()));
    std::vector<int> order(static_cast<std::size_t>(n_experts));
    std::vector<double> p(static_cast<std::size_t>(n_experts));
    for (Eigen::Index t = 0; t < hidden.rows(); ++t) {
        const double mx = logits.row(t).maxCoeff();
        double z = 0.0;
        for (int e = 0; e < n_experts; ++e) {
            p[static_cast<std::size_t>(e)] = std::exp(logits(t, e) - mx);
            z += p[static_cast<std::size_t>(e)];
        }
        for (auto& v : p) v /= z;
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
            return p[static_cast<std::size_t>(a)] > p[static_cast<std::size_t>(b)];
        });
        double sel = 0.0;
        for (int i = 0; i < top_k; ++i) sel += p[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
        auto& ex = r.experts[static_cast<std::size_t>(t)];
        auto& wt = r.weights[static_cast<std::size_t>(t)];
        for (int i = 0; i < top_k; ++i) {
            const int e = order[static_cast<std::size_t>(i)];
            ex.push_back(e);
            wt.push_back(p[static_cast<std::size_t>(e)] / sel);
        }
    }
    return r;
}

Mat moe_block_forward(const Mat& hidden, const Mat& router_gate, const std::vector<FeedForward>& experts, int top_k) {
    if (static_cast<std::size_t>(router_gate.cols()) != experts.size()) {
        throw ShapeError("moe: router width does not match expert count");
    }
    if (router_gate.rows() != hidden.cols()) throw ShapeError("moe: router input width mismatch");
    const Routing routing = route(hidden, router_gate, top_k);
    Mat out = Mat::Zero(hidden.rows(), experts.empty() ? 0 : experts.front().down.cols());
    for (std::size_t e = 0; e < experts.size(); ++e) {
        std::vector<Eigen::Index> rows;
        std::vector<double> scale;
        for (std::size_t t = 0; t < routing.experts.size(); ++t) {
            for (std::size_t i = 0; i < routing.experts[t].size(); ++i) {
                if (routing.experts[t][i] == static_cast<int>(e)) {
                    rows.push_back(static_cast<Eigen::Index>(t));
                    scale.push_back(routing.weights[t][i]);
                }
            }
        }
        if (rows.empty()) continue;
        Mat gathered(static_cast<Eigen::Index>(rows.size()), hidden.cols());
        for (std::size_t i = 0; i < rows.size(); ++i) gathered.row(static_cast<Eigen::Index>(i)) = hidden.row(rows[i]);
        const Mat y = feed_forward(experts[e], gathered);
        for (std::size_t i = 0; i < rows.size(); ++i) out.row(rows[i]) += scale[i] * y.row(static_cast<Eigen::Index>(i));
    }
    return out;
}

Mat causal_attention(const Mat& q, const Mat& k, const Mat& v, int n_heads) {
    const Eigen::Index T = q.rows();
    const Eigen::Index hd = q.cols() / n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    Mat out(T, q.cols());
    Mat scores(T, T);
    for (int h = 0; h < n_heads; ++h) {
        const auto qh = q.middleCols(h * hd, hd);
        const auto kh = k.middleCols(h * hd, hd);
        const auto vh = v.middleCols(h * hd, hd);
        scores.noalias() = (qh * kh.transpose()) * scale;
        for (Eigen::Index i = 0; i < T; ++i) {
            const double mx = scores.row(i).head(i + 1).maxCoeff();
            double z = 0.0;
            for (Eigen::Index j = 0; j <= i; ++j) {
                scores(i, j) = std::exp(scores(i, j) - mx);
                z += scores(i, j);
            }
            for (Eigen::Index j = 0; j <= i; ++j) scores(i, j) /= z;
            for (Eigen::Index j = i + 1; j < T; ++j) scores(i, j) = 0.0;
        }
        out.middleCols(h * hd, hd).noalias() = scores * vh;
    }
    return out;
}

namespace {

void capture(std::vector<Mat>& captured, const std::vector<ActivationTap>& taps, int layer, StreamPoint point,
             const Mat& value) {
    for (std::size_t i = 0; i < taps.size(); ++i) {
        if (taps[i].layer_index != layer || taps[i].stream_point != point) continue;
        captured[i] = taps[i].position_policy == PositionPolicy::last_token ? Mat(value.bottomRows(1)) : value;
    }
}

}  // namespace

ForwardResult forward(const TransformerWeights& w, const ModelConfig& c, const Tokens& tokens,
                      const std::vector<ActivationTap>& taps, const ResidualEdit* edit) {
    if (w.layers.size() != static_cast<std::size_t>(c.n_layer) || w.tok_emb.rows() != c.vocab_size ||
        w.tok_emb.cols() != c.d_model || w.unembed.cols() != c.vocab_size || w.pos_emb.rows() != c.n_ctx) {
        throw ShapeError("forward: weights do not match config");
    }
    if (tokens.empty()) throw Error("forward: empty token sequence");
    if (tokens.size() > static_cast<std::size_t>(c.n_ctx)) throw Error("forward: sequence exceeds n_ctx");
    for (TokenId t : tokens) {
        if (t < 0 || t >= c.vocab_size) throw Error("forward: token id " + std::to_string(t) + " out of range");
    }
    for (const auto& tap : taps) {
        if (tap.layer_index < 0 || tap.layer_index >= c.n_layer) throw Error("forward: tap layer out of range");
        if (tap.stream_point == StreamPoint::ff_intermediate && c.moe) {
            throw Error("forward: ff_intermediate tap is not defined for MoE layers");
        }
    }
    if (edit) {
        if (edit->layer_index < 0 || edit->layer_index >= c.n_layer) throw Error("forward: edit layer out of range");
        if (edit->delta.size() != c.d_model) throw ShapeError("forward: edit width mismatch");
    }

    const auto T = static_cast<Eigen::Index>(tokens.size());
    Mat x(T, c.d_model);
    for (Eigen::Index t = 0; t < T; ++t) {
        x.row(t) = w.tok_emb.row(tokens[static_cast<std::size_t>(t)]) + w.pos_emb.row(t);
    }

    ForwardResult result;
    result.captured.resize(taps.size());
    for (int l = 0; l < c.n_layer; ++l) {
        const auto& L = w.layers[static_cast<std::size_t>(l)];
        capture(result.captured, taps, l, StreamPoint::pre_layer, x);
        const Mat n1 = rms_norm(x, L.attn_norm);
        const Mat att = causal_attention(n1 * L.wq, n1 * L.wk, n1 * L.wv, c.n_heads);
        x.noalias() += att * L.wo;
        capture(result.captured, taps, l, StreamPoint::post_attention, x);
        const Mat n2 = rms_norm(x, L.ff_norm);
        if (c.moe) {
            x += moe_block_forward(n2, L.router, L.experts, c.moe->top_k);
        } else {
            const Mat h = feed_forward_hidden(L.ff, n2);
            capture(result.captured, taps, l, StreamPoint::ff_intermediate, h);
            x.noalias() += h * L.ff.down;
        }
        if (edit && edit->layer_index == l) {
            if (edit->positions == PositionPolicy::all_tokens) {
                x.rowwise() += edit->delta;
            } else {
                x.row(T - 1) += edit->delta;
            }
        }
        capture(result.captured, taps, l, StreamPoint::post_layer, x);
    }
    result.logits = rms_norm(x, w.final_norm) * w.unembed;
    return result;
}

// ----------------------------------------------------------------------------

std::string to_string(Submodule s) {
    switch (s) {
        case Submodule::down: return "down";
        case Submodule::up: return "up";
        case Submodule::up_and_down: return "up_and_down";
        case Submodule::expert_set: return "expert_set";
    }
    return "?";
}

Submodule submodule_from_string(const std::string& s) {
    if (s == "down") return Submodule::down;
    if (s == "up") return Submodule::up;
    if (s == "up_and_down") return Submodule::up_and_down;
    if (s == "expert_set") return Submodule::expert_set;
    throw Error("unknown submodule: " + s);
}

TransformerWeights substitute_weights(const TransformerWeights& weights, int layer_index, Submodule submodule,
                                      const SubmoduleTensors& rep) {
    if (layer_index < 0 || static_cast<std::size_t>(layer_index) >= weights.layers.size()) {
        throw Error("substitute_weights: layer out of range");
    }
    TransformerWeights out = weights;
    auto& L = out.layers[static_cast<std::size_t>(layer_index)];
    auto replace = [](Mat& dst, const Mat& src, const std::string& what) {
        require_shape(src, dst.rows(), dst.cols(), "substitute_weights " + what);
        dst = src;
    };
    const bool wants_up = submodule == Submodule::up || submodule == Submodule::up_and_down;
    const bool wants_down = submodule == Submodule::down || submodule == Submodule::up_and_down;
    if (submodule != Submodule::expert_set) {
        if (!L.experts.empty()) throw Error("substitute_weights: dense submodule requested on an MoE layer");
        if (wants_up) {
            if (rep.up.size() != 1) throw ShapeError("substitute_weights: expected one up tensor");
            replace(L.ff.up, rep.up[0], "up");
        }
        if (wants_down) {
            if (rep.down.size() != 1) throw ShapeError("substitute_weights: expected one down tensor");
            replace(L.ff.down, rep.down[0], "down");
        }
        return out;
    }
    if (L.experts.empty()) throw Error("substitute_weights: expert_set requested on a dense layer");
    if (rep.up.empty() && rep.down.empty()) throw ShapeError("substitute_weights: no expert tensors given");
    if (!rep.up.empty() && rep.up.size() != L.experts.size()) throw ShapeError("substitute_weights: expert up count");
    if (!rep.down.empty() && rep.down.size() != L.experts.size()) {
        throw ShapeError("substitute_weights: expert down count");
    }
    for (std::size_t e = 0; e < L.experts.size(); ++e) {
        if (!rep.up.empty()) replace(L.experts[e].up, rep.up[e], "experts." + std::to_string(e) + ".up");
        if (!rep.down.empty()) replace(L.experts[e].down, rep.down[e], "experts." + std::to_string(e) + ".down");
    }
    return out;
}

}  // namespace casal
