#pragma once

#include "casal/gradients.hpp"
#include "casal/steer.hpp"

#include <limits>
#include <string>
#include <vector>

namespace casal {

enum class SubmoduleChoice { down, up, up_and_down, moe_experts_down, moe_experts_up, moe_experts_both };

std::string to_string(SubmoduleChoice c);
SubmoduleChoice submodule_choice_from_string(const std::string& s);
bool is_moe_choice(SubmoduleChoice c);
bool trains_up(SubmoduleChoice c);
bool trains_down(SubmoduleChoice c);

/// Activations gathered once per query for training one layer.
struct TrainBatchCache {
    int layer = 0;
    int d_model = 0;
    std::vector<std::string> ids;
    std::vector<Label> labels;
    Mat inputs;                             // a^{L-1} for every prompt position, all queries stacked
    std::vector<std::size_t> offsets;       // query i occupies inputs rows [offsets[i], offsets[i+1])
    Mat intermediates;                      // last-token ff_intermediate (dense models only)
    Mat activations;                        // last-token a^{L}
    Mat targets;                            // last-token targets

    std::size_t rows() const { return ids.size(); }
    std::size_t count(Label l) const;
};

/// One forward pass per query of the known and unknown ids. Targets use the pack's layer,
/// alpha and steering vectors.
TrainBatchCache build_cache(const TransformerWeights& weights, const ModelConfig& config,
                            const std::vector<QueryRecord>& known, const std::vector<QueryRecord>& unknown,
                            const SteeringPack& pack, int layer);

void save_cache(const fs::path& path, const TrainBatchCache& cache);
TrainBatchCache load_cache(const fs::path& path);

/// Trainable copy of one layer's feed-forward (or expert set) plus the frozen context that maps
/// cached block inputs to the post-block residual.
struct CasalSubnetwork {
    int layer = 0;
    SubmoduleChoice choice = SubmoduleChoice::down;
    ModelConfig config;
    LayerWeights frozen;                  // the layer as it was in the source model
    std::vector<FeedForward> trainable;   // dense: one entry; MoE: one per expert
};

CasalSubnetwork make_subnetwork(const TransformerWeights& weights, const ModelConfig& config, int layer,
                                SubmoduleChoice choice);

/// Last-token post-attention residual of every cached query (frozen attention path).
Mat post_attention_rows(const CasalSubnetwork& net, const TrainBatchCache& cache);

/// Post-block residual recomputed through the subnetwork from post-attention rows.
Mat subnetwork_forward(const CasalSubnetwork& net, const Mat& post_attention);

struct CasalLoss {
    double unknown = 0.0;
    double known = 0.0;
    double total = 0.0;
};

/// Mean over rows of squared Euclidean distance to the targets, per label.
CasalLoss casal_loss(const CasalSubnetwork& net, const TrainBatchCache& cache);
CasalLoss casal_loss(const CasalSubnetwork& net, const TrainBatchCache& cache, const Mat& post_attention);

/// Gradient of the total loss w.r.t. the trainable tensors (untrained projections are left zero).
std::vector<FeedForward> analytic_gradient(const CasalSubnetwork& net, const TrainBatchCache& cache);

struct CasalTrainOptions {
    double lr = 1e-3;
    int epochs = 3;
    int batch_size = 0;       // 0 = full batch
    int snapshot_every = 0;   // optimizer steps between stored snapshots; 0 = none
    std::uint64_t seed = 0;   // mini-batch order
};

void to_json(nlohmann::json& j, const CasalTrainOptions& o);
void from_json(const nlohmann::json& j, CasalTrainOptions& o);

struct TrainReport {
    std::vector<CasalLoss> epoch_loss;  // entry 0 before training, entry e after epoch e
    std::vector<FeedForward> final_tensors;
    std::vector<std::vector<FeedForward>> snapshots;  // first entry is the initial tensors when enabled
    std::vector<int> snapshot_steps;
    CasalTrainOptions options;
    int steps = 0;
    // Silhouette of the cached rows before and after training; NaN when a label has fewer than two rows.
    double silhouette_before = std::numeric_limits<double>::quiet_NaN();
    double silhouette_after = std::numeric_limits<double>::quiet_NaN();
    double wall_seconds = 0.0;
};

/// Thrown when the loss stops being finite; carries the tensors of the last finite step.
class CasalDivergence : public DivergenceError {
public:
    CasalDivergence(const std::string& what, std::vector<FeedForward> last_good)
        : DivergenceError(what), last_good_(std::move(last_good)) {}
    const std::vector<FeedForward>& last_good() const { return last_good_; }

private:
    std::vector<FeedForward> last_good_;
};

/// Gradient descent on the trainable tensors of a dense subnetwork.
TrainReport train(CasalSubnetwork& net, const TrainBatchCache& cache, const CasalTrainOptions& options);

/// Same optimizer for expert tensors behind a frozen router.
TrainReport train_moe(CasalSubnetwork& net, const TrainBatchCache& cache, const CasalTrainOptions& options);

/// Replacement tensors for substitute_weights.
SubmoduleTensors to_submodule_tensors(SubmoduleChoice choice, const std::vector<FeedForward>& tensors);

/// Model weights with the trained tensors substituted at the subnetwork's layer.
TransformerWeights finalize(const TransformerWeights& weights, const std::vector<FeedForward>& tensors,
                            SubmoduleChoice choice, int layer);

/// Links run settings, pack hash and input/output checkpoint hashes.
nlohmann::json casal_manifest(const TransformerWeights& before, const TransformerWeights& after,
                              const SteeringPack& pack, const TrainReport& report, SubmoduleChoice choice, int layer);

}  // namespace casal
