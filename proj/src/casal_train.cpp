#include "casal/casal_train.hpp"

#include <chrono>
#include <cmath>
#include <numeric>

namespace casal {

std::string to_string(SubmoduleChoice c) {
    switch (c) {
        case SubmoduleChoice::down: return "down";
        case SubmoduleChoice::up: return "up";
        case SubmoduleChoice::up_and_down: return "up_and_down";
        case SubmoduleChoice::moe_experts_down: return "moe_experts_down";
        case SubmoduleChoice::moe_experts_up: return "moe_experts_up";
        case SubmoduleChoice::moe_experts_both: return "moe_experts_both";
    }
    return "?";
}

SubmoduleChoice submodule_choice_from_string(const std::string& s) {
    for (auto c : {SubmoduleChoice::down, SubmoduleChoice::up, SubmoduleChoice::up_and_down,
                   SubmoduleChoice::moe_experts_down, SubmoduleChoice::moe_experts_up, SubmoduleChoice::moe_experts_both}) {
        if (to_string(c) == s) return c;
    }
    throw Error("unknown submodule choice: " + s);
}

bool is_moe_choice(SubmoduleChoice c) {
    return c == SubmoduleChoice::moe_experts_down || c == SubmoduleChoice::moe_experts_up ||
           c == SubmoduleChoice::moe_experts_both;
}

bool trains_up(SubmoduleChoice c) {
    return c == SubmoduleChoice::up || c == SubmoduleChoice::up_and_down || c == SubmoduleChoice::moe_experts_up ||
           c == SubmoduleChoice::moe_experts_both;
}

bool trains_down(SubmoduleChoice c) {
    return c == SubmoduleChoice::down || c == SubmoduleChoice::up_and_down || c == SubmoduleChoice::moe_experts_down ||
           c == SubmoduleChoice::moe_experts_both;
}

std::size_t TrainBatchCache::count(Label l) const {
    return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), l));
}

// ----------------------------------------------------------------------------
// Cache

TrainBatchCache build_cache(const TransformerWeights& weights, const ModelConfig& config,
                            const std::vector<QueryRecord>& known, const std::vector<QueryRecord>& unknown,
                            const SteeringPack& pack, int layer) {
    if (pack.layer != layer) {
        throw Error("build_cache: pack was computed at layer " + std::to_string(pack.layer) + ", requested layer " +
                    std::to_string(layer));
    }
    if (layer < 0 || layer >= config.n_layer) throw Error("build_cache: layer out of range");
    if (pack.v_unknown.size() != config.d_model) throw ShapeError("build_cache: pack width does not match the model");
    TrainBatchCache c;
    c.layer = layer;
    c.d_model = config.d_model;
    std::vector<ActivationTap> taps{{layer, PositionPolicy::all_tokens, StreamPoint::pre_layer},
                                    {layer, PositionPolicy::last_token, StreamPoint::post_layer}};
    if (!config.is_moe()) taps.push_back({layer, PositionPolicy::last_token, StreamPoint::ff_intermediate});

    std::vector<Mat> inputs;
    std::vector<RowVec> inter, acts;
    std::size_t total = 0;
    c.offsets.push_back(0);
    auto add = [&](const std::vector<QueryRecord>& qs, Label label) {
        for (const auto& q : qs) {
            ForwardResult r = forward(weights, config, q.prompt, taps);
            total += static_cast<std::size_t>(r.captured[0].rows());
            c.offsets.push_back(total);
            inputs.push_back(std::move(r.captured[0]));
            acts.push_back(r.captured[1]);
            if (!config.is_moe()) inter.push_back(r.captured[2]);
            c.ids.push_back(q.id);
            c.labels.push_back(label);
        }
    };
    add(known, Label::known);
    add(unknown, Label::unknown);
    if (c.ids.empty()) throw Error("build_cache: no queries");

    const auto n = static_cast<Eigen::Index>(c.ids.size());
    c.inputs.resize(static_cast<Eigen::Index>(total), config.d_model);
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        c.inputs.middleRows(static_cast<Eigen::Index>(c.offsets[i]), inputs[i].rows()) = inputs[i];
    }
    c.activations.resize(n, config.d_model);
    c.targets.resize(n, config.d_model);
    if (!config.is_moe()) c.intermediates.resize(n, config.d_ff);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto idx = static_cast<std::size_t>(i);
        c.activations.row(i) = acts[idx];
        if (!config.is_moe()) c.intermediates.row(i) = inter[idx];
    }
    // Targets from the subnetwork recomputation: at alpha = 0 the untrained loss is exactly zero.
    const CasalSubnetwork source = make_subnetwork(
        weights, config, layer, config.is_moe() ? SubmoduleChoice::moe_experts_down : SubmoduleChoice::down);
    const Mat recomputed = subnetwork_forward(source, post_attention_rows(source, c));
    for (Eigen::Index i = 0; i < n; ++i) {
        const RowVec& v = c.labels[static_cast<std::size_t>(i)] == Label::known ? pack.v_known : pack.v_unknown;
        c.targets.row(i) = recomputed.row(i) + pack.alpha * v;
    }
    return c;
}

void save_cache(const fs::path& path, const TrainBatchCache& c) {
    TensorFile f;
    f.magic = kCacheMagic;
    std::vector<std::string> labels;
    for (Label l : c.labels) labels.push_back(to_string(l));
    std::vector<std::string> points{"pre_layer", "post_layer"};
    if (c.intermediates.size() > 0) points.push_back("ff_intermediate");
    f.header = {{"layer", c.layer},     {"d_model", c.d_model}, {"rows", c.ids.size()},  {"ids", c.ids},
                {"labels", labels},     {"offsets", c.offsets}, {"stream_points", points}};
    f.tensors = {{"inputs", c.inputs}, {"activations", c.activations}, {"targets", c.targets}};
    if (c.intermediates.size() > 0) f.tensors.emplace_back("intermediates", c.intermediates);
    write_tensor_file(path, f);
}

TrainBatchCache load_cache(const fs::path& path) {
    const TensorFile f = read_tensor_file(path, kCacheMagic);
    TrainBatchCache c;
    c.layer = f.header.at("layer").get<int>();
    c.d_model = f.header.at("d_model").get<int>();
    c.ids = f.header.at("ids").get<std::vector<std::string>>();
    for (const auto& l : f.header.at("labels").get<std::vector<std::string>>()) {
        if (l == "known") {
            c.labels.push_back(Label::known);
        } else if (l == "unknown") {
            c.labels.push_back(Label::unknown);
        } else {
            throw Error("cache " + path.string() + ": unknown label " + l);
        }
    }
    c.offsets = f.header.at("offsets").get<std::vector<std::size_t>>();
    c.inputs = f.tensor("inputs");
    c.activations = f.tensor("activations");
    c.targets = f.tensor("targets");
    for (const auto& [name, m] : f.tensors) {
        if (name == "intermediates") c.intermediates = m;
    }
    const auto n = static_cast<Eigen::Index>(c.ids.size());
    if (c.labels.size() != c.ids.size() || c.offsets.size() != c.ids.size() + 1 || c.activations.rows() != n ||
        c.targets.rows() != n || static_cast<std::size_t>(c.inputs.rows()) != c.offsets.back()) {
        throw ShapeError("cache " + path.string() + ": inconsistent row counts");
    }
    return c;
}

// ----------------------------------------------------------------------------
// Subnetwork

CasalSubnetwork make_subnetwork(const TransformerWeights& weights, const ModelConfig& config, int layer,
                                SubmoduleChoice choice) {
    if (layer < 0 || layer >= config.n_layer) throw Error("make_subnetwork: layer out of range");
    if (is_moe_choice(choice) != config.is_moe()) {
        throw Error("make_subnetwork: submodule choice " + to_string(choice) + " does not fit a " +
                    (config.is_moe() ? "mixture-of-experts" : "dense") + " model");
    }
    CasalSubnetwork net;
    net.layer = layer;
    net.choice = choice;
    net.config = config;
    net.frozen = weights.layers[static_cast<std::size_t>(layer)];
    if (config.is_moe()) {
        net.trainable = net.frozen.experts;
    } else {
        net.trainable = {net.frozen.ff};
    }
    return net;
}

Mat post_attention_rows(const CasalSubnetwork& net, const TrainBatchCache& cache) {
    if (cache.layer != net.layer) throw Error("casal: cache layer does not match the subnetwork");
    if (cache.inputs.cols() != net.config.d_model) throw ShapeError("casal: cache width does not match the model");
    const auto& L = net.frozen;
    Mat out(static_cast<Eigen::Index>(cache.rows()), net.config.d_model);
    for (std::size_t i = 0; i < cache.rows(); ++i) {
        const auto begin = static_cast<Eigen::Index>(cache.offsets[i]);
        const auto len = static_cast<Eigen::Index>(cache.offsets[i + 1] - cache.offsets[i]);
        Mat x = cache.inputs.middleRows(begin, len);
        const Mat n1 = rms_norm(x, L.attn_norm);
        const Mat att = causal_attention(n1 * L.wq, n1 * L.wk, n1 * L.wv, net.config.n_heads);
        x.noalias() += att * L.wo;
        out.row(static_cast<Eigen::Index>(i)) = x.bottomRows(1);
    }
    return out;
}

Mat subnetwork_forward(const CasalSubnetwork& net, const Mat& h) {
    const Mat n2 = rms_norm(h, net.frozen.ff_norm);
    Mat out = h;
    if (net.config.is_moe()) {
        out += moe_block_forward(n2, net.frozen.router, net.trainable, net.config.moe->top_k);
    } else {
        out.noalias() += feed_forward_hidden(net.trainable[0], n2) * net.trainable[0].down;
    }
    return out;
}

namespace {

void require_labels(const TrainBatchCache& cache) {
    if (cache.count(Label::known) == 0) throw Error("casal_loss: cache has no known rows");
    if (cache.count(Label::unknown) == 0) throw Error("casal_loss: cache has no unknown rows");
}

std::vector<FeedForward> zero_grads(const std::vector<FeedForward>& like) {
    std::vector<FeedForward> g(like.size());
    for (std::size_t e = 0; e < like.size(); ++e) {
        g[e].gate = Mat::Zero(like[e].gate.rows(), like[e].gate.cols());
        g[e].up = Mat::Zero(like[e].up.rows(), like[e].up.cols());
        g[e].down = Mat::Zero(like[e].down.rows(), like[e].down.cols());
    }
    return g;
}

/// Weighted squared error sum_i w_i |t_i - a_i|^2 over the selected rows and its gradient.
double weighted_loss_and_grad(const CasalSubnetwork& net, const Mat& h, const Mat& targets,
                              const std::vector<double>& row_weight, std::vector<FeedForward>* grad) {
    const Mat n2 = rms_norm(h, net.frozen.ff_norm);
    Mat out = h;
    FfnTape ffn_tape;
    MoeTape moe_tape;
    if (net.config.is_moe()) {
        out += moe_forward_tape(n2, net.frozen.router, net.trainable, net.config.moe->top_k, moe_tape);
    } else {
        out += ffn_forward_tape(net.trainable[0], n2, ffn_tape);
    }
    const Mat diff = out - targets;
    double loss = 0.0;
    Mat d_out(diff.rows(), diff.cols());
    for (Eigen::Index i = 0; i < diff.rows(); ++i) {
        const double w = row_weight[static_cast<std::size_t>(i)];
        loss += w * diff.row(i).squaredNorm();
        d_out.row(i) = 2.0 * w * diff.row(i);
    }
    if (grad) {
        const FfnGradMask mask{false, trains_up(net.choice), trains_down(net.choice), false};
        if (net.config.is_moe()) {
            moe_backward(net.frozen.router, net.trainable, moe_tape, d_out, *grad, nullptr, mask);
        } else {
            ffn_backward(net.trainable[0], ffn_tape, d_out, (*grad)[0], mask);
        }
    }
    return loss;
}

}  // namespace

CasalLoss casal_loss(const CasalSubnetwork& net, const TrainBatchCache& cache, const Mat& post_attention) {
    require_labels(cache);
    const Mat a_hat = subnetwork_forward(net, post_attention);
    CasalLoss l;
    for (std::size_t i = 0; i < cache.rows(); ++i) {
        const double sq = (cache.targets.row(static_cast<Eigen::Index>(i)) - a_hat.row(static_cast<Eigen::Index>(i))).squaredNorm();
        (cache.labels[i] == Label::known ? l.known : l.unknown) += sq;
    }
    l.known /= static_cast<double>(cache.count(Label::known));
    l.unknown /= static_cast<double>(cache.count(Label::unknown));
    l.total = l.unknown + l.known;
    return l;
}

CasalLoss casal_loss(const CasalSubnetwork& net, const TrainBatchCache& cache) {
    return casal_loss(net, cache, post_attention_rows(net, cache));
}

std::vector<FeedForward> analytic_gradient(const CasalSubnetwork& net, const TrainBatchCache& cache) {
    require_labels(cache);
    const double nk = static_cast<double>(cache.count(Label::known));
    const double nu = static_cast<double>(cache.count(Label::unknown));
    std::vector<double> w;
    for (Label l : cache.labels) w.push_back(l == Label::known ? 1.0 / nk : 1.0 / nu);
    auto grad = zero_grads(net.trainable);
    weighted_loss_and_grad(net, post_attention_rows(net, cache), cache.targets, w, &grad);
    return grad;
}

void to_json(nlohmann::json& j, const CasalTrainOptions& o) {
    j = {{"lr", o.lr}, {"epochs", o.epochs}, {"batch_size", o.batch_size}, {"snapshot_every", o.snapshot_every},
         {"seed", o.seed}};
}

void from_json(const nlohmann::json& j, CasalTrainOptions& o) {
    CasalTrainOptions d;
    o.lr = j.value("lr", d.lr);
    o.epochs = j.value("epochs", d.epochs);
    o.batch_size = j.value("batch_size", d.batch_size);
    o.snapshot_every = j.value("snapshot_every", d.snapshot_every);
    o.seed = j.value("seed", d.seed);
}

namespace {

TrainReport run_training(CasalSubnetwork& net, const TrainBatchCache& cache, const CasalTrainOptions& o) {
    const auto start = std::chrono::steady_clock::now();
    if (!(o.lr >= 0.0) || !std::isfinite(o.lr)) throw Error("casal train: lr must be finite and non-negative");
    if (o.epochs < 0 || o.batch_size < 0 || o.snapshot_every < 0) throw Error("casal train: negative option");
    require_labels(cache);
    TrainReport report;
    report.options = o;
    const Mat h = post_attention_rows(net, cache);
    report.epoch_loss.push_back(casal_loss(net, cache, h));
    if (o.snapshot_every > 0) {
        report.snapshots.push_back(net.trainable);
        report.snapshot_steps.push_back(0);
    }

    const std::size_t n = cache.rows();
    const double nk = static_cast<double>(cache.count(Label::known));
    const double nu = static_cast<double>(cache.count(Label::unknown));
    const std::size_t batch = o.batch_size == 0 ? n : std::min<std::size_t>(static_cast<std::size_t>(o.batch_size), n);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<FeedForward> last_good = net.trainable;

    for (int epoch = 0; epoch < o.epochs; ++epoch) {
        if (batch < n) {
            Rng rng(derive_seed(o.seed, "casal_batches", std::to_string(epoch)));
            rng.shuffle(order);
        }
        for (std::size_t begin = 0; begin < n; begin += batch) {
            const std::size_t end = std::min(n, begin + batch);
            const auto m = static_cast<Eigen::Index>(end - begin);
            Mat hb(m, h.cols()), tb(m, h.cols());
            std::vector<double> w;
            // Row weight: n / (batch rows * rows with that label).
            const double scale = static_cast<double>(n) / static_cast<double>(end - begin);
            for (std::size_t i = begin; i < end; ++i) {
                const auto r = static_cast<Eigen::Index>(order[i]);
                hb.row(static_cast<Eigen::Index>(i - begin)) = h.row(r);
                tb.row(static_cast<Eigen::Index>(i - begin)) = cache.targets.row(r);
                w.push_back(scale / (cache.labels[order[i]] == Label::known ? nk : nu));
            }
            auto grad = zero_grads(net.trainable);
            const double loss = weighted_loss_and_grad(net, hb, tb, w, &grad);
            if (!std::isfinite(loss)) {
                net.trainable = last_good;
                throw CasalDivergence("casal train: non-finite loss in epoch " + std::to_string(epoch + 1), last_good);
            }
            for (std::size_t e = 0; e < net.trainable.size(); ++e) {
                if (trains_up(net.choice)) net.trainable[e].up -= o.lr * grad[e].up;
                if (trains_down(net.choice)) net.trainable[e].down -= o.lr * grad[e].down;
            }
            ++report.steps;
            if (o.snapshot_every > 0 && report.steps % o.snapshot_every == 0) {
                report.snapshots.push_back(net.trainable);
                report.snapshot_steps.push_back(report.steps);
            }
        }
        const CasalLoss l = casal_loss(net, cache, h);
        if (!std::isfinite(l.total)) {
            net.trainable = last_good;
            throw CasalDivergence("casal train: non-finite loss after epoch " + std::to_string(epoch + 1), last_good);
        }
        last_good = net.trainable;
        report.epoch_loss.push_back(l);
    }
    report.final_tensors = net.trainable;
    if (nk >= 2 && nu >= 2) {
        std::vector<int> labels;
        for (Label l : cache.labels) labels.push_back(l == Label::unknown ? 1 : 0);
        report.silhouette_before = silhouette(cache.activations, labels);
        report.silhouette_after = silhouette(subnetwork_forward(net, h), labels);
    }
    report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return report;
}

}  // namespace

TrainReport train(CasalSubnetwork& net, const TrainBatchCache& cache, const CasalTrainOptions& options) {
    if (net.config.is_moe()) throw Error("casal train: use train_moe for mixture-of-experts subnetworks");
    return run_training(net, cache, options);
}

TrainReport train_moe(CasalSubnetwork& net, const TrainBatchCache& cache, const CasalTrainOptions& options) {
    if (!net.config.is_moe() || !is_moe_choice(net.choice)) throw Error("train_moe: subnetwork is not an expert set");
    return run_training(net, cache, options);
}

SubmoduleTensors to_submodule_tensors(SubmoduleChoice choice, const std::vector<FeedForward>& tensors) {
    SubmoduleTensors rep;
    for (const auto& ff : tensors) {
        if (trains_up(choice)) rep.up.push_back(ff.up);
        if (trains_down(choice)) rep.down.push_back(ff.down);
    }
    return rep;
}

TransformerWeights finalize(const TransformerWeights& weights, const std::vector<FeedForward>& tensors,
                            SubmoduleChoice choice, int layer) {
    Submodule target = Submodule::expert_set;
    switch (choice) {
        case SubmoduleChoice::down: target = Submodule::down; break;
        case SubmoduleChoice::up: target = Submodule::up; break;
        case SubmoduleChoice::up_and_down: target = Submodule::up_and_down; break;
        default: break;
    }
    return substitute_weights(weights, layer, target, to_submodule_tensors(choice, tensors));
}

nlohmann::json casal_manifest(const TransformerWeights& before, const TransformerWeights& after,
                              const SteeringPack& pack, const TrainReport& report, SubmoduleChoice choice, int layer) {
    nlohmann::json losses = nlohmann::json::array();
    for (const auto& l : report.epoch_loss) losses.push_back({{"total", l.total}, {"unknown", l.unknown}, {"known", l.known}});
    return {{"layer", layer},
            {"submodule", to_string(choice)},
            {"train", report.options},
            {"steps", report.steps},
            {"alpha", pack.alpha},
            {"pack_hash", hash_pack(pack)},
            {"input_checkpoint_hash", hash_weights(before)},
            {"output_checkpoint_hash", hash_weights(after)},
            {"epoch_loss", losses}};
}

}  // namespace casal
