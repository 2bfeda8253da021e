#include "casal/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>

namespace casal {

std::string to_string(Provenance p) {
    switch (p) {
        case Provenance::synthetic_trained: return "synthetic_trained";
        case Provenance::synthetic_heldout: return "synthetic_heldout";
        case Provenance::external: return "external";
    }
    return "?";
}

Provenance provenance_from_string(const std::string& s) {
    if (s == "synthetic_trained") return Provenance::synthetic_trained;
    if (s == "synthetic_heldout") return Provenance::synthetic_heldout;
    if (s == "external") return Provenance::external;
    throw Error("unknown provenance: " + s);
}

void to_json(nlohmann::json& j, const QueryRecord& q) {
    j = nlohmann::json{{"id", q.id}};
    if (!q.prompt.empty()) j["prompt_tokens"] = q.prompt;
    if (!q.prompt_text.empty()) j["prompt_text"] = q.prompt_text;
    if (!q.answer.empty()) j["answer_tokens"] = q.answer;
    if (!q.answer_text.empty()) j["answer_text"] = q.answer_text;
    j["provenance"] = to_string(q.provenance);
    j["group_tag"] = q.group_tag;
}

void from_json(const nlohmann::json& j, QueryRecord& q) {
    if (!j.is_object()) throw Error("record is not an object");
    if (!j.contains("id")) throw Error("record has no id");
    const auto& id = j.at("id");
    q.id = id.is_string() ? id.get<std::string>() : id.dump();
    q.prompt = j.value("prompt_tokens", Tokens{});
    q.prompt_text = j.value("prompt_text", std::string{});
    q.answer = j.value("answer_tokens", Tokens{});
    q.answer_text = j.value("answer_text", std::string{});
    q.provenance = provenance_from_string(j.value("provenance", std::string("external")));
    q.group_tag = j.value("group_tag", std::string{});
    if (q.prompt.empty() && q.prompt_text.empty()) throw Error("record has neither prompt_tokens nor prompt_text");
}

std::vector<QueryRecord> load_qa_records(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path.string());
    std::vector<QueryRecord> out;
    std::unordered_map<std::string, std::size_t> seen;  // id -> line
    std::vector<std::string> problems;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        QueryRecord q;
        try {
            q = nlohmann::json::parse(line).get<QueryRecord>();
        } catch (const std::exception& e) {
            problems.push_back("line " + std::to_string(line_no) + ": malformed record: " + e.what());
            continue;
        }
        if (q.answer.empty() && q.answer_text.empty()) {
            problems.push_back("line " + std::to_string(line_no) + ": empty answer for id '" + q.id + "'");
            continue;
        }
        if (auto it = seen.find(q.id); it != seen.end()) {
            problems.push_back("line " + std::to_string(line_no) + ": duplicate id '" + q.id + "' (first seen on line " +
                               std::to_string(it->second) + ")");
            continue;
        }
        seen.emplace(q.id, line_no);
        out.push_back(std::move(q));
    }
    if (!problems.empty()) {
        std::string msg = path.string() + ":";
        for (const auto& p : problems) msg += "\n  " + p;
        throw Error(msg);
    }
    return out;
}

void write_qa_records(const fs::path& path, const std::vector<QueryRecord>& records) {
    std::string text;
    for (const auto& q : records) text += nlohmann::json(q).dump() + "\n";
    write_text(path, text);
}

// ----------------------------------------------------------------------------

namespace {

std::string to_string(HoldoutMode m) { return m == HoldoutMode::by_fact ? "by_fact" : "by_entity"; }
std::string to_string(AbstainSource s) { return s == AbstainSource::decoy_entities ? "decoy_entities" : "empty_slots"; }

int relation_base(const FactWorldSpec& s) { return kFirstFreeToken + name_token_count(s); }
int value_base(const FactWorldSpec& s) { return relation_base(s) + s.n_relations; }

}  // namespace

int name_token_count(const FactWorldSpec& s) {
    const int total = s.n_entities + s.n_decoy_entities;
    if (s.entity_width <= 1) return total;
    if (s.name_pool > 0) return s.name_pool;
    int pool = 1;
    while (std::pow(static_cast<double>(pool), s.entity_width) < 2.0 * total) ++pool;
    return pool;
}

void validate(const FactWorldSpec& s) {
    if (s.n_entities <= 0 || s.n_relations <= 0 || s.n_facts_total <= 0) throw Error("fact world: counts must be positive");
    if (static_cast<long>(s.n_facts_total) > static_cast<long>(s.n_entities) * s.n_relations) {
        throw Error("fact world: n_facts_total exceeds n_entities * n_relations");
    }
    if (!(s.fraction_trained > 0.0 && s.fraction_trained <= 1.0)) throw Error("fact world: fraction_trained must lie in (0, 1]");
    if (s.n_values <= 0 || s.answer_length <= 0 || s.repetitions <= 0) throw Error("fact world: answer settings must be positive");
    if (s.n_abstain_demos < 0 || s.n_decoy_entities < 0 || s.abstain_repetitions < 0) throw Error("fact world: negative abstain settings");
    if (s.abstain_source == AbstainSource::decoy_entities &&
        static_cast<long>(s.n_abstain_demos) > static_cast<long>(s.n_decoy_entities) * s.n_relations) {
        throw Error("fact world: not enough decoy entities for the requested abstention demos");
    }
    if (s.entity_width < 1 || s.entity_width > 4) throw Error("fact world: entity_width must lie in [1, 4]");
    if (s.entity_width > 1 &&
        std::pow(static_cast<double>(name_token_count(s)), s.entity_width) < s.n_entities + s.n_decoy_entities) {
        throw Error("fact world: name_pool too small for the number of entities");
    }
    if (s.abstain_token != kAbstain) throw Error("fact world: the abstain token is reserved as id 2");
    if (!s.templates.empty() && s.templates.size() != static_cast<std::size_t>(s.n_relations)) {
        throw Error("fact world: one template per relation required");
    }
    for (const auto& t : s.templates) {
        if (std::count(t.begin(), t.end(), kEntitySlot) != 1) throw Error("fact world: template needs exactly one entity slot");
    }
    if (s.n_groups <= 0) throw Error("fact world: n_groups must be positive");
    const int vocab = value_base(s) + s.n_relations * s.n_values;
    if (s.vocab_limit > 0 && vocab > s.vocab_limit) {
        throw Error("fact world: vocabulary of " + std::to_string(vocab) + " tokens exceeds the limit of " +
                    std::to_string(s.vocab_limit));
    }
}

void to_json(nlohmann::json& j, const FactWorldSpec& s) {
    j = {{"n_entities", s.n_entities},
         {"n_relations", s.n_relations},
         {"n_facts_total", s.n_facts_total},
         {"fraction_trained", s.fraction_trained},
         {"n_values", s.n_values},
         {"answer_length", s.answer_length},
         {"repetitions", s.repetitions},
         {"n_abstain_demos", s.n_abstain_demos},
         {"abstain_repetitions", s.abstain_repetitions},
         {"abstain_source", to_string(s.abstain_source)},
         {"n_decoy_entities", s.n_decoy_entities},
         {"entity_width", s.entity_width},
         {"name_pool", s.name_pool},
         {"holdout", to_string(s.holdout)},
         {"abstain_token", s.abstain_token},
         {"templates", s.templates},
         {"n_groups", s.n_groups},
         {"vocab_limit", s.vocab_limit},
         {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, FactWorldSpec& s) {
    FactWorldSpec d;
    s.n_entities = j.value("n_entities", d.n_entities);
    s.n_relations = j.value("n_relations", d.n_relations);
    s.n_facts_total = j.value("n_facts_total", d.n_facts_total);
    s.fraction_trained = j.value("fraction_trained", d.fraction_trained);
    s.n_values = j.value("n_values", d.n_values);
    s.answer_length = j.value("answer_length", d.answer_length);
    s.repetitions = j.value("repetitions", d.repetitions);
    s.n_abstain_demos = j.value("n_abstain_demos", d.n_abstain_demos);
    s.abstain_repetitions = j.value("abstain_repetitions", d.abstain_repetitions);
    const std::string src = j.value("abstain_source", std::string("decoy_entities"));
    if (src == "decoy_entities") {
        s.abstain_source = AbstainSource::decoy_entities;
    } else if (src == "empty_slots") {
        s.abstain_source = AbstainSource::empty_slots;
    } else {
        throw Error("unknown abstain_source: " + src);
    }
    s.n_decoy_entities = j.value("n_decoy_entities", d.n_decoy_entities);
    s.entity_width = j.value("entity_width", d.entity_width);
    s.name_pool = j.value("name_pool", d.name_pool);
    const std::string hold = j.value("holdout", std::string("by_fact"));
    if (hold == "by_fact") {
        s.holdout = HoldoutMode::by_fact;
    } else if (hold == "by_entity") {
        s.holdout = HoldoutMode::by_entity;
    } else {
        throw Error("unknown holdout mode: " + hold);
    }
    s.abstain_token = j.value("abstain_token", d.abstain_token);
    s.templates = j.value("templates", d.templates);
    s.n_groups = j.value("n_groups", d.n_groups);
    s.vocab_limit = j.value("vocab_limit", d.vocab_limit);
    s.seed = j.value("seed", d.seed);
}

TokenId FactWorld::relation_token(int r) const { return relation_base(spec) + r; }

TokenId FactWorld::value_token(int r, int v) const { return value_base(spec) + r * spec.n_values + v; }

Tokens FactWorld::prompt_for(int entity, int relation) const {
    const Tokens pattern = spec.templates.empty() ? Tokens{kBos, kEntitySlot, kRelationSlot}
                                                  : spec.templates[static_cast<std::size_t>(relation)];
    const Tokens& name = entity_names.at(static_cast<std::size_t>(entity));
    Tokens out;
    for (TokenId t : pattern) {
        if (t == kEntitySlot) {
            out.insert(out.end(), name.begin(), name.end());
        } else if (t == kRelationSlot) {
            out.push_back(relation_token(relation));
        } else {
            out.push_back(t);
        }
    }
    return out;
}

FactWorld generate_fact_world(const FactWorldSpec& spec) {
    validate(spec);
    FactWorld w;
    w.spec = spec;
    w.vocab_size = value_base(spec) + spec.n_relations * spec.n_values;
    Rng rng(derive_seed(spec.seed, "fact_world"));

    const int n_names = spec.n_entities + spec.n_decoy_entities;
    if (spec.entity_width == 1) {
        for (int e = 0; e < n_names; ++e) w.entity_names.push_back({kFirstFreeToken + e});
    } else {
        const int pool = name_token_count(spec);
        std::vector<Tokens> all{{}};
        for (int k = 0; k < spec.entity_width; ++k) {
            std::vector<Tokens> next;
            for (const auto& prefix : all) {
                for (int t = 0; t < pool; ++t) {
                    Tokens name = prefix;
                    name.push_back(kFirstFreeToken + t);
                    next.push_back(std::move(name));
                }
            }
            all = std::move(next);
        }
        Rng name_rng(derive_seed(spec.seed, "entity_names"));
        name_rng.shuffle(all);
        all.resize(static_cast<std::size_t>(n_names));
        w.entity_names = std::move(all);
    }

    // Choose which (entity, relation) slots carry a fact.
    std::vector<std::pair<int, int>> slots;
    for (int e = 0; e < spec.n_entities; ++e) {
        for (int r = 0; r < spec.n_relations; ++r) slots.emplace_back(e, r);
    }
    rng.shuffle(slots);
    std::vector<std::pair<int, int>> chosen(slots.begin(), slots.begin() + spec.n_facts_total);
    std::sort(chosen.begin(), chosen.end());
    for (auto [e, r] : chosen) {
        Fact f;
        f.entity = e;
        f.relation = r;
        for (int i = 0; i < spec.answer_length; ++i) {
            f.answer.push_back(w.value_token(r, static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.n_values)))));
        }
        w.facts.push_back(std::move(f));
    }

    // Trained / held-out split with an exact count.
    const auto n_trained = static_cast<std::size_t>(std::llround(spec.fraction_trained * spec.n_facts_total));
    std::vector<std::size_t> order(w.facts.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    if (spec.holdout == HoldoutMode::by_fact) {
        rng.shuffle(order);
    } else {
        // Whole entities first; a boundary entity may be split to hit the count exactly.
        std::vector<int> ents(static_cast<std::size_t>(spec.n_entities));
        for (int e = 0; e < spec.n_entities; ++e) ents[static_cast<std::size_t>(e)] = e;
        rng.shuffle(ents);
        std::vector<std::vector<std::size_t>> by_entity(static_cast<std::size_t>(spec.n_entities));
        for (std::size_t i = 0; i < w.facts.size(); ++i) by_entity[static_cast<std::size_t>(w.facts[i].entity)].push_back(i);
        std::vector<std::size_t> first, rest;
        for (int e : ents) {
            auto& fs = by_entity[static_cast<std::size_t>(e)];
            if (first.size() + fs.size() <= n_trained) {
                first.insert(first.end(), fs.begin(), fs.end());
            } else {
                rest.insert(rest.end(), fs.begin(), fs.end());
            }
        }
        order = first;
        order.insert(order.end(), rest.begin(), rest.end());
    }
    for (std::size_t i = 0; i < order.size(); ++i) w.facts[order[i]].trained = i < n_trained;

    for (const auto& f : w.facts) {
        QueryRecord q;
        q.id = "e" + std::to_string(f.entity) + "_r" + std::to_string(f.relation);
        q.prompt = w.prompt_for(f.entity, f.relation);
        q.answer = f.answer;
        q.provenance = f.trained ? Provenance::synthetic_trained : Provenance::synthetic_heldout;
        q.group_tag = "group" + std::to_string(f.relation % spec.n_groups + 1);
        w.queries.push_back(std::move(q));
    }

    // Abstention demonstrations.
    std::vector<std::pair<int, int>> demo_slots;
    if (spec.abstain_source == AbstainSource::decoy_entities) {
        for (int d = 0; d < spec.n_decoy_entities; ++d) {
            for (int r = 0; r < spec.n_relations; ++r) demo_slots.emplace_back(spec.n_entities + d, r);
        }
    } else {
        std::set<std::pair<int, int>> taken(chosen.begin(), chosen.end());
        std::set<int> trained_entities;
        for (const auto& f : w.facts) {
            if (f.trained) trained_entities.insert(f.entity);
        }
        for (int e : trained_entities) {
            for (int r = 0; r < spec.n_relations; ++r) {
                if (!taken.count({e, r})) demo_slots.emplace_back(e, r);
            }
        }
        if (demo_slots.size() < static_cast<std::size_t>(spec.n_abstain_demos)) {
            throw Error("fact world: not enough empty slots for the requested abstention demos");
        }
    }
    rng.shuffle(demo_slots);
    demo_slots.resize(static_cast<std::size_t>(spec.n_abstain_demos));
    std::sort(demo_slots.begin(), demo_slots.end());
    for (auto [e, r] : demo_slots) w.abstain_prompts.push_back(w.prompt_for(e, r));

    for (std::size_t i = 0; i < w.facts.size(); ++i) {
        if (!w.facts[i].trained) continue;
        Tokens doc = w.queries[i].prompt;
        doc.insert(doc.end(), w.facts[i].answer.begin(), w.facts[i].answer.end());
        doc.push_back(kEos);
        for (int k = 0; k < spec.repetitions; ++k) w.stream.push_back(doc);
    }
    for (const auto& p : w.abstain_prompts) {
        Tokens doc = p;
        doc.push_back(kAbstain);
        for (int k = 0; k < spec.abstain_repetitions; ++k) w.stream.push_back(doc);
    }
    rng.shuffle(w.stream);
    return w;
}

nlohmann::json fact_world_manifest(const FactWorld& w) {
    nlohmann::json j;
    j["spec"] = w.spec;
    j["vocab_size"] = w.vocab_size;
    j["vocabulary"] = {{"bos", kBos},
                       {"eos", kEos},
                       {"abstain", kAbstain},
                       {"names", {kFirstFreeToken, kFirstFreeToken + name_token_count(w.spec)}},
                       {"relations", {relation_base(w.spec), relation_base(w.spec) + w.spec.n_relations}},
                       {"values", {value_base(w.spec), w.vocab_size}}};
    nlohmann::json trained = nlohmann::json::array(), heldout = nlohmann::json::array();
    for (std::size_t i = 0; i < w.facts.size(); ++i) (w.facts[i].trained ? trained : heldout).push_back(w.queries[i].id);
    j["trained_ids"] = trained;
    j["heldout_ids"] = heldout;
    j["entity_names"] = w.entity_names;
    j["abstain_prompts"] = w.abstain_prompts;
    j["stream_documents"] = w.stream.size();
    return j;
}

// ----------------------------------------------------------------------------

AdamW::AdamW(const ModelConfig& config, AdamOptions options)
    : opt_(options), m_(zeros_like(config)), v_(zeros_like(config)) {}

void AdamW::step(TransformerWeights& weights, const TransformerWeights& grad, double lr_scale) {
    ++t_;
    std::vector<Mat*> w, m, v;
    std::vector<const Mat*> g;
    for_each_tensor(weights, [&](const std::string&, Mat& x) { w.push_back(&x); });
    for_each_tensor(m_, [&](const std::string&, Mat& x) { m.push_back(&x); });
    for_each_tensor(v_, [&](const std::string&, Mat& x) { v.push_back(&x); });
    for_each_tensor(grad, [&](const std::string&, const Mat& x) { g.push_back(&x); });
    const double lr = opt_.lr * lr_scale;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < w.size(); ++i) {
        double* pw = w[i]->data();
        double* pm = m[i]->data();
        double* pv = v[i]->data();
        const double* pg = g[i]->data();
        // Norm gains are not decayed.
        const bool decay = w[i]->rows() > 1;
        for (Eigen::Index k = 0; k < w[i]->size(); ++k) {
            pm[k] = opt_.beta1 * pm[k] + (1.0 - opt_.beta1) * pg[k];
            pv[k] = opt_.beta2 * pv[k] + (1.0 - opt_.beta2) * pg[k] * pg[k];
            const double update = (pm[k] / bc1) / (std::sqrt(pv[k] / bc2) + opt_.eps);
            pw[k] -= lr * (update + (decay ? opt_.weight_decay * pw[k] : 0.0));
        }
    }
}

void to_json(nlohmann::json& j, const PretrainOptions& o) {
    j = {{"lr", o.lr},           {"steps", o.steps},       {"batch", o.batch},
         {"weight_decay", o.weight_decay}, {"warmup", o.warmup}, {"log_every", o.log_every},
         {"validation_docs", o.validation_docs}, {"seed", o.seed}};
}

void from_json(const nlohmann::json& j, PretrainOptions& o) {
    PretrainOptions d;
    o.lr = j.value("lr", d.lr);
    o.steps = j.value("steps", d.steps);
    o.batch = j.value("batch", d.batch);
    o.weight_decay = j.value("weight_decay", d.weight_decay);
    o.warmup = j.value("warmup", d.warmup);
    o.log_every = j.value("log_every", d.log_every);
    o.validation_docs = j.value("validation_docs", d.validation_docs);
    o.seed = j.value("seed", d.seed);
}

namespace {

double lr_schedule(int step, const PretrainOptions& o) {
    if (o.warmup > 0 && step < o.warmup) return static_cast<double>(step + 1) / o.warmup;
    const double progress = o.steps > o.warmup ? static_cast<double>(step - o.warmup) / (o.steps - o.warmup) : 1.0;
    return 0.1 + 0.9 * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

std::string trace_summary(const TrainTrace& trace) {
    std::ostringstream ss;
    ss << "trace:";
    for (std::size_t i = 0; i < trace.steps.size(); ++i) ss << " [" << trace.steps[i] << "] " << trace.train_loss[i];
    return ss.str();
}

TrainTrace train_full_model(TransformerWeights& w, const ModelConfig& c, const std::vector<LmExample>& data,
                            const PretrainOptions& o, std::string_view stage) {
    TrainTrace trace;
    if (o.steps <= 0 || data.empty()) return trace;
    if (o.batch <= 0) throw Error(std::string(stage) + ": batch must be positive");
    const std::size_t n_val = std::min<std::size_t>(static_cast<std::size_t>(std::max(o.validation_docs, 1)), data.size());
    const std::span<const LmExample> validation(data.data(), n_val);
    trace.initial_validation_loss = lm_loss_and_grad(w, c, validation, false).loss;

    AdamW opt(c, AdamOptions{o.lr, 0.9, 0.98, 1e-9, o.weight_decay});
    Rng rng(derive_seed(o.seed, stage));
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    std::size_t cursor = 0;
    std::vector<LmExample> batch;
    for (int step = 0; step < o.steps; ++step) {
        batch.clear();
        for (int b = 0; b < o.batch; ++b) {
            if (cursor == order.size()) {
                rng.shuffle(order);
                cursor = 0;
            }
            batch.push_back(data[order[cursor++]]);
        }
        LossAndGrad lg = lm_loss_and_grad(w, c, batch, true);
        if (!std::isfinite(lg.loss)) {
            trace.steps.push_back(step);
            trace.train_loss.push_back(lg.loss);
            throw DivergenceError(std::string(stage) + ": loss became non-finite at step " + std::to_string(step) + "; " +
                                  trace_summary(trace));
        }
        if (o.log_every > 0 && (step % o.log_every == 0 || step + 1 == o.steps)) {
            trace.steps.push_back(step);
            trace.train_loss.push_back(lg.loss);
        }
        opt.step(w, lg.grad, lr_schedule(step, o));
    }
    trace.final_validation_loss = lm_loss_and_grad(w, c, validation, false).loss;
    if (!std::isfinite(trace.final_validation_loss)) {
        throw DivergenceError(std::string(stage) + ": validation loss is non-finite; " + trace_summary(trace));
    }
    return trace;
}

}  // namespace

PretrainResult pretrain_toy_model(const ModelConfig& config, const std::vector<Tokens>& stream,
                                  const PretrainOptions& options) {
    if (stream.empty()) throw Error("pretrain: empty stream");
    PretrainResult r;
    r.weights = init_weights(config);
    std::vector<LmExample> data;
    data.reserve(stream.size());
    for (const auto& doc : stream) data.push_back(LmExample{doc, 1});
    r.trace = train_full_model(r.weights, config, data, options, "pretrain");
    return r;
}

SftResult sft_finetune(const TransformerWeights& weights, const ModelConfig& config, const std::vector<SftPair>& pairs,
                       const PretrainOptions& options) {
    SftResult r;
    r.weights = weights;
    if (pairs.empty()) return r;
    std::vector<LmExample> data;
    for (const auto& p : pairs) {
        if (p.prompt.empty() || p.completion.empty()) throw Error("sft: empty prompt or completion");
        Tokens t = p.prompt;
        t.insert(t.end(), p.completion.begin(), p.completion.end());
        data.push_back(LmExample{std::move(t), p.prompt.size()});
    }
    r.trace = train_full_model(r.weights, config, data, options, "sft");
    return r;
}

Tokens strip_terminal(const Tokens& completion) {
    Tokens out = completion;
    if (!out.empty() && out.back() == kEos) out.pop_back();
    return out;
}

double greedy_accuracy(const TransformerWeights& weights, const ModelConfig& config,
                       const std::vector<QueryRecord>& queries, int max_new_tokens) {
    if (queries.empty()) throw Error("greedy_accuracy: no queries");
    std::size_t correct = 0;
    for (const auto& q : queries) {
        const Tokens out = sample_completion(weights, config, q.prompt, SamplingConfig::greedy(max_new_tokens),
                                             {kEos, kAbstain});
        if (strip_terminal(out) == q.answer) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(queries.size());
}

}  // namespace casal
