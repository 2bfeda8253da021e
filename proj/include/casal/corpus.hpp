#pragma once

#include "casal/gradients.hpp"
#include "casal/io.hpp"
#include "casal/sampling.hpp"

#include <optional>
#include <string>
#include <vector>

namespace casal {

// ----------------------------------------------------------------------------
// Queries

enum class Provenance { synthetic_trained, synthetic_heldout, external };

std::string to_string(Provenance p);
Provenance provenance_from_string(const std::string& s);

/// One question with its ground truth. The prompt ends where answer generation begins.
struct QueryRecord {
    std::string id;
    Tokens prompt;
    Tokens answer;
    std::string prompt_text;  // external text records only
    std::string answer_text;
    Provenance provenance = Provenance::external;
    std::string group_tag;

    bool operator==(const QueryRecord&) const = default;
};

void to_json(nlohmann::json& j, const QueryRecord& q);
void from_json(const nlohmann::json& j, QueryRecord& q);

/// Reads a line-delimited JSON file of QA records. Throws with line numbers on malformed lines,
/// duplicate ids or empty answers.
std::vector<QueryRecord> load_qa_records(const fs::path& path);
void write_qa_records(const fs::path& path, const std::vector<QueryRecord>& records);

// ----------------------------------------------------------------------------
// Synthetic fact world

/// Reserved token ids shared by every generated world.
inline constexpr TokenId kBos = 0;
inline constexpr TokenId kEos = 1;
inline constexpr TokenId kAbstain = 2;
inline constexpr TokenId kFirstFreeToken = 3;

/// Template element: a literal token id, or one of the placeholders below.
inline constexpr TokenId kEntitySlot = -1;
inline constexpr TokenId kRelationSlot = -2;

enum class HoldoutMode { by_fact, by_entity };
/// Where the abstention demonstrations in the pretraining stream come from: extra entities that
/// carry no facts, or (entity, relation) pairs of fact-bearing entities that have no fact.
enum class AbstainSource { decoy_entities, empty_slots };

struct FactWorldSpec {
    int n_entities = 200;
    int n_relations = 4;
    int n_facts_total = 400;
    double fraction_trained = 0.5;
    int n_values = 16;            // answer vocabulary per relation
    int answer_length = 1;
    int repetitions = 32;         // occurrences of each trained fact in the stream
    int n_abstain_demos = 0;      // distinct abstention prompts in the stream
    int abstain_repetitions = 32;
    AbstainSource abstain_source = AbstainSource::decoy_entities;
    int n_decoy_entities = 0;     // extra entities used only for abstention demos
    int entity_width = 1;         // name tokens per entity
    int name_pool = 0;            // distinct name tokens when entity_width > 1; 0 = automatic
    HoldoutMode holdout = HoldoutMode::by_fact;
    TokenId abstain_token = kAbstain;
    std::vector<Tokens> templates;  // per relation; empty means {BOS, entity, relation}
    int n_groups = 2;             // relations are partitioned round-robin into group tags
    int vocab_limit = 0;          // 0 = unlimited
    std::uint64_t seed = 0;
};

void validate(const FactWorldSpec& spec);
void to_json(nlohmann::json& j, const FactWorldSpec& s);
void from_json(const nlohmann::json& j, FactWorldSpec& s);

struct Fact {
    int entity = 0;
    int relation = 0;
    Tokens answer;
    bool trained = false;
};

struct FactWorld {
    FactWorldSpec spec;
    int vocab_size = 0;
    std::vector<Fact> facts;
    std::vector<Tokens> stream;         // pretraining documents, already shuffled
    std::vector<QueryRecord> queries;   // one per fact, aligned with facts
    std::vector<Tokens> abstain_prompts;
    std::vector<Tokens> entity_names;   // fact entities first, then decoys

    TokenId relation_token(int r) const;
    TokenId value_token(int r, int v) const;
    Tokens prompt_for(int entity, int relation) const;
};

FactWorld generate_fact_world(const FactWorldSpec& spec);

/// Number of distinct name tokens the spec needs.
int name_token_count(const FactWorldSpec& spec);

/// Spec, vocabulary layout and split membership as JSON.
nlohmann::json fact_world_manifest(const FactWorld& world);

// ----------------------------------------------------------------------------
// Training

struct AdamOptions {
    double lr = 3e-3;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-9;
    double weight_decay = 0.0;
};

/// AdamW state over a full set of transformer weights.
class AdamW {
public:
    AdamW(const ModelConfig& config, AdamOptions options);
    void step(TransformerWeights& weights, const TransformerWeights& grad, double lr_scale = 1.0);

private:
    AdamOptions opt_;
    TransformerWeights m_, v_;
    long t_ = 0;
};

struct PretrainOptions {
    double lr = 3e-3;
    int steps = 1000;
    int batch = 32;
    double weight_decay = 0.0;
    int warmup = 50;
    int log_every = 50;
    int validation_docs = 64;
    std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const PretrainOptions& o);
void from_json(const nlohmann::json& j, PretrainOptions& o);

struct TrainTrace {
    std::vector<int> steps;
    std::vector<double> train_loss;       // batch loss at each logged step
    double initial_validation_loss = 0.0;
    double final_validation_loss = 0.0;
};

struct PretrainResult {
    TransformerWeights weights;
    TrainTrace trace;
};

/// Next-token pretraining from config.rng_seed initialization. Throws DivergenceError with the
/// partial trace in its message when the loss stops being finite.
PretrainResult pretrain_toy_model(const ModelConfig& config, const std::vector<Tokens>& stream,
                                  const PretrainOptions& options);

struct SftPair {
    Tokens prompt;
    Tokens completion;
};

struct SftResult {
    TransformerWeights weights;
    TrainTrace trace;
};

/// Supervised fine-tuning of the full model on prompt/completion pairs (loss on completions only).
SftResult sft_finetune(const TransformerWeights& weights, const ModelConfig& config, const std::vector<SftPair>& pairs,
                       const PretrainOptions& options);

/// Fraction of queries whose greedy completion (terminal token stripped) equals the answer.
double greedy_accuracy(const TransformerWeights& weights, const ModelConfig& config,
                       const std::vector<QueryRecord>& queries, int max_new_tokens = 4);

/// Generated tokens with a trailing EOS removed.
Tokens strip_terminal(const Tokens& completion);

}  // namespace casal
