#include "locpriv/transprotect.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <queue>
#include <sstream>

#include <json.hpp>

#include "locpriv/csv.hpp"

namespace locpriv::tp {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double sigmoid_scalar(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// log sigma(x) without overflow on either tail.
double log_sigmoid(double x) {
    if (x >= 0.0) return -std::log1p(std::exp(-x));
    return x - std::log1p(std::exp(x));
}

std::string stage_to_string(EmbeddingTable::Stage s) {
    switch (s) {
        case EmbeddingTable::Stage::Node2Vec: return "node2vec";
        case EmbeddingTable::Stage::Gcn: return "gcn";
    }
    throw Error("unknown embedding stage");
}

EmbeddingTable::Stage stage_from_string(const std::string& s) {
    if (s == "node2vec") return EmbeddingTable::Stage::Node2Vec;
    if (s == "gcn") return EmbeddingTable::Stage::Gcn;
    throw ConfigError("unknown embedding stage '" + s + "'");
}

// Out-neighbour lists (bucket 0, sorted) used as unweighted adjacency by the
// walk generator.
std::vector<std::vector<roadnet::NodeId>> out_lists(const roadnet::RoadGraph& graph) {
    std::vector<std::vector<roadnet::NodeId>> out(graph.size());
    for (std::size_t v = 0; v < graph.size(); ++v) {
        graph.for_each_arc(static_cast<roadnet::NodeId>(v), 0,
                           [&](roadnet::NodeId to, double) { out[v].push_back(to); });
        std::sort(out[v].begin(), out[v].end());
        out[v].erase(std::unique(out[v].begin(), out[v].end()), out[v].end());
    }
    return out;
}

// Embedding rows for a node sequence, without positional encodings.
nn::Tensor table_rows(const EmbeddingTable& table, const std::vector<roadnet::NodeId>& nodes) {
    nn::Tensor rows = nn::Tensor::zeros({nodes.size(), table.dim()});
    for (std::size_t n = 0; n < nodes.size(); ++n) {
        const auto v = nodes[n];
        if (v < 0 || static_cast<std::size_t>(v) >= table.size())
            throw UnknownNode("embedding table has no node " + std::to_string(v));
        for (std::size_t c = 0; c < table.dim(); ++c)
            rows.at(n, c) = table.vectors.at(static_cast<std::size_t>(v), c);
    }
    return rows;
}

}  // namespace

// ---------------------------------------------------------------------------
// Embeddings
// ---------------------------------------------------------------------------

void EmbeddingTable::validate() const {
    if (!vectors.is_matrix())
        throw ShapeMismatch("embedding table: vectors must be [nodes x dim]");
    vectors.ensure_finite("embedding table");
}

WalkCorpus node2vec_walks(const roadnet::RoadGraph& graph, const WalkConfig& config,
                          std::uint64_t seed) {
    if (graph.empty()) throw EmptyGraph("node2vec_walks: graph has no nodes");
    if (!(config.p > 0.0) || !(config.q > 0.0))
        throw ConfigError("node2vec_walks: p and q must be positive");
    if (config.walks_per_node == 0 || config.walk_length == 0)
        throw ConfigError("node2vec_walks: walk counts must be positive");

    const auto out = out_lists(graph);
    WalkCorpus corpus;
    corpus.walks.reserve(graph.size() * config.walks_per_node);

    std::vector<double> weights;
    for (std::size_t v = 0; v < graph.size(); ++v) {
        for (std::size_t k = 0; k < config.walks_per_node; ++k) {
            Rng rng(derive_seed(seed, v, k));
            std::vector<roadnet::NodeId> walk = {static_cast<roadnet::NodeId>(v)};
            roadnet::NodeId prev = roadnet::kNoNode;
            while (walk.size() < config.walk_length) {
                const auto cur = static_cast<std::size_t>(walk.back());
                const auto& nbrs = out[cur];
                if (nbrs.empty()) {
                    ++corpus.truncated;
                    break;
                }
                std::size_t pick;
                if (prev == roadnet::kNoNode) {
                    pick = rng.index(nbrs.size());
                } else {
                    const auto& prev_nbrs = out[static_cast<std::size_t>(prev)];
                    weights.resize(nbrs.size());
                    for (std::size_t i = 0; i < nbrs.size(); ++i) {
                        if (nbrs[i] == prev)
                            weights[i] = 1.0 / config.p;
                        else if (std::binary_search(prev_nbrs.begin(), prev_nbrs.end(), nbrs[i]))
                            weights[i] = 1.0;
                        else
                            weights[i] = 1.0 / config.q;
                    }
                    pick = rng.categorical(weights);
                }
                prev = walk.back();
                walk.push_back(nbrs[pick]);
            }
            corpus.walks.push_back(std::move(walk));
        }
    }
    return corpus;
}

SkipGramModel skipgram_init(std::size_t n_nodes, const SkipGramConfig& config,
                            std::uint64_t seed) {
    if (n_nodes == 0) throw EmptyGraph("skipgram_init: no nodes");
    if (config.dim == 0) throw ConfigError("skipgram_init: dim must be positive");
    SkipGramModel model;
    model.in = nn::Tensor::zeros({n_nodes, config.dim});
    model.out = nn::Tensor::zeros({n_nodes, config.dim});
    Rng rng(derive_seed(seed, 0x3b9d));
    const double scale = 1.0 / static_cast<double>(config.dim);
    for (double& v : model.in.data) v = (rng.u01() - 0.5) * scale;
    return model;
}

double sgns_batch_loss(const SkipGramModel& model, const std::vector<SkipGramPair>& batch) {
    if (batch.empty()) throw EmptyResult("sgns_batch_loss: empty batch");
    if (!model.in.same_shape(model.out))
        throw ShapeMismatch("sgns_batch_loss: in/out table shapes differ");
    const std::size_t dim = model.in.cols();
    auto dot = [&](roadnet::NodeId a, roadnet::NodeId b) {
        double s = 0.0;
        for (std::size_t c = 0; c < dim; ++c)
            s += model.in.at(static_cast<std::size_t>(a), c) *
                 model.out.at(static_cast<std::size_t>(b), c);
        return s;
    };
    double total = 0.0;
    for (const SkipGramPair& pair : batch) {
        total -= log_sigmoid(dot(pair.center, pair.context));
        for (roadnet::NodeId neg : pair.negatives) total -= log_sigmoid(-dot(pair.center, neg));
    }
    return total / static_cast<double>(batch.size());
}

EmbeddingTable node2vec_train(const WalkCorpus& corpus, std::size_t n_nodes,
                              const SkipGramConfig& config, std::uint64_t seed,
                              Node2VecTrainLog* log) {
    if (config.window == 0) throw ConfigError("node2vec_train: window must be positive");
    if (!(config.learning_rate > 0.0))
        throw ConfigError("node2vec_train: learning rate must be positive");
    if (!(config.negative_exponent >= 0.0))
        throw ConfigError("node2vec_train: negative exponent must be non-negative");

    SkipGramModel model = skipgram_init(n_nodes, config, seed);
    if (log != nullptr) *log = {};

    // Token counts drive the unigram^exponent negative-sampling table.
    std::vector<double> counts(n_nodes, 0.0);
    std::size_t pairs = 0;
    for (const auto& walk : corpus.walks) {
        for (std::size_t c = 0; c < walk.size(); ++c) {
            if (walk[c] < 0 || static_cast<std::size_t>(walk[c]) >= n_nodes)
                throw UnknownNode("node2vec_train: walk visits node " +
                                  std::to_string(walk[c]));
            counts[static_cast<std::size_t>(walk[c])] += 1.0;
            const std::size_t lo = c >= config.window ? c - config.window : 0;
            const std::size_t hi = std::min(walk.size(), c + config.window + 1);
            pairs += (hi - lo) - 1;
        }
    }
    if (log != nullptr) log->pairs = pairs;

    EmbeddingTable table;
    table.stage = EmbeddingTable::Stage::Node2Vec;
    if (config.epochs == 0) {
        table.vectors = std::move(model.in);
        return table;
    }
    if (pairs == 0) throw EmptyCorpus("node2vec_train: corpus yields no skip-gram pairs");

    std::vector<double> cumulative(n_nodes, 0.0);
    double running = 0.0;
    for (std::size_t v = 0; v < n_nodes; ++v) {
        running += std::pow(counts[v], config.negative_exponent) * (counts[v] > 0.0 ? 1.0 : 0.0);
        cumulative[v] = running;
    }
    if (!(running > 0.0)) throw EmptyCorpus("node2vec_train: corpus has no tokens");
    auto draw_negative = [&](Rng& rng) {
        const double r = rng.u01() * running;
        const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), r);
        return static_cast<roadnet::NodeId>(
            std::min<std::size_t>(static_cast<std::size_t>(it - cumulative.begin()),
                                  n_nodes - 1));
    };

    const std::size_t dim = config.dim;
    const double lr = config.learning_rate;
    std::vector<double> u_old(dim), du(dim);

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        Rng neg_rng(derive_seed(seed, 0x4e65, epoch));
        double loss_sum = 0.0;
        for (const auto& walk : corpus.walks) {
            for (std::size_t c = 0; c < walk.size(); ++c) {
                const auto center = static_cast<std::size_t>(walk[c]);
                const std::size_t lo = c >= config.window ? c - config.window : 0;
                const std::size_t hi = std::min(walk.size(), c + config.window + 1);
                for (std::size_t j = lo; j < hi; ++j) {
                    if (j == c) continue;
                    const auto context = static_cast<std::size_t>(walk[j]);
                    double* u = &model.in.data[center * dim];
                    std::copy(u, u + dim, u_old.begin());
                    std::fill(du.begin(), du.end(), 0.0);

                    auto engage = [&](std::size_t target, double label) {
                        double* v = &model.out.data[target * dim];
                        double d = 0.0;
                        for (std::size_t k = 0; k < dim; ++k) d += u_old[k] * v[k];
                        loss_sum -= label > 0.0 ? log_sigmoid(d) : log_sigmoid(-d);
                        const double coef = sigmoid_scalar(d) - label;
                        for (std::size_t k = 0; k < dim; ++k) {
                            du[k] += coef * v[k];
                            v[k] -= lr * coef * u_old[k];
                        }
                    };
                    engage(context, 1.0);
                    for (std::size_t n = 0; n < config.negatives; ++n) {
                        const auto neg = static_cast<std::size_t>(draw_negative(neg_rng));
                        if (neg == context) continue;  // a positive is not a counterexample
                        engage(neg, 0.0);
                    }
                    for (std::size_t k = 0; k < dim; ++k) u[k] -= lr * du[k];
                }
            }
        }
        model.in.ensure_finite("node2vec center vectors");
        model.out.ensure_finite("node2vec context vectors");
        if (log != nullptr) log->epoch_loss.push_back(loss_sum / static_cast<double>(pairs));
    }

    table.vectors = std::move(model.in);
    return table;
}

EmbeddingTable gcn_refine(const roadnet::RoadGraph& graph, const EmbeddingTable& table,
                          const GcnConfig& config) {
    table.validate();
    if (table.stage != EmbeddingTable::Stage::Node2Vec)
        throw ConfigError("gcn_refine: expects node2vec-stage embeddings");
    if (table.size() != graph.size())
        throw DimensionMismatch("gcn_refine: table rows do not match the graph");

    // Binarized, symmetrized adjacency: travel-time weights are costs, so the
    // convolution mixes over structure alone.
    const std::size_t L = graph.size();
    nn::Tensor adj = nn::Tensor::zeros({L, L});
    for (std::size_t v = 0; v < L; ++v)
        graph.for_each_arc(static_cast<roadnet::NodeId>(v), 0, [&](roadnet::NodeId to, double) {
            adj.at(v, static_cast<std::size_t>(to)) = 1.0;
            adj.at(static_cast<std::size_t>(to), v) = 1.0;
        });
    const nn::Tensor norm = nn::gcn_normalized_adjacency(adj);

    Rng rng(derive_seed(config.seed, 0x9c4e));
    nn::Tensor cur = table.vectors;
    for (std::size_t layer = 0; layer < config.layers; ++layer) {
        nn::Tensor theta = nn::Tensor::zeros({table.dim(), table.dim()});
        nn::init_uniform(theta, table.dim(), rng);
        cur = nn::gcn_layer(norm, cur, theta);
    }

    EmbeddingTable refined;
    refined.stage = EmbeddingTable::Stage::Gcn;
    refined.vectors = std::move(cur);
    return refined;
}

nn::Tensor embed_trajectory(const EmbeddingTable& table,
                            const std::vector<roadnet::NodeId>& nodes) {
    table.validate();
    if (nodes.empty()) throw EmptyResult("embed_trajectory: no nodes");
    nn::Tensor rows = table_rows(table, nodes);
    const nn::Tensor pe = nn::positional_encoding(nodes.size(), table.dim());
    for (std::size_t i = 0; i < rows.data.size(); ++i) rows.data[i] += pe.data[i];
    return rows;
}

void save_table(const EmbeddingTable& table, const std::string& prefix) {
    table.validate();
    nlohmann::json j;
    j["version"] = 1;
    j["stage"] = stage_to_string(table.stage);
    j["nodes"] = table.size();
    j["dim"] = table.dim();
    csv::write_text(prefix + ".json", j.dump(2));

    nn::ParameterStore store;
    store.create("embedding.vectors", {table.size(), table.dim()}).data = table.vectors.data;
    nn::save_checkpoint(store, prefix + ".bin");
}

EmbeddingTable load_table(const std::string& prefix) {
    std::ifstream in(prefix + ".json");
    if (!in) throw IoError("cannot open embedding sidecar: " + prefix + ".json");
    nlohmann::json j = nlohmann::json::parse(in);

    EmbeddingTable table;
    table.stage = stage_from_string(j.at("stage").get<std::string>());
    nn::ParameterStore store;
    store.create("embedding.vectors",
                 {j.at("nodes").get<std::size_t>(), j.at("dim").get<std::size_t>()});
    nn::load_checkpoint(store, prefix + ".bin");
    table.vectors = store.param("embedding.vectors");
    table.validate();
    return table;
}

// ---------------------------------------------------------------------------
// Scorer
// ---------------------------------------------------------------------------

struct ScorerModel::Impl {
    std::size_t n_nodes;
    std::size_t dim;
    ScorerConfig config;
    nn::ParameterStore store;
    std::vector<std::unique_ptr<nn::AttentionBlock>> blocks;

    Impl(std::size_t n_nodes_, std::size_t dim_, const ScorerConfig& config_)
        : n_nodes(n_nodes_), dim(dim_), config(config_), store(config_.adam) {
        if (n_nodes == 0) throw ConfigError("scorer: no locations to score");
        if (dim == 0 || dim % 2 != 0)
            throw OddDimension("scorer: embedding dim must be positive and even");
        if (config.layers == 0) throw ConfigError("scorer: needs at least one layer");
        Rng rng(config.seed);
        for (std::size_t k = 0; k < config.layers; ++k) {
            nn::AttentionConfig ac;
            ac.model_dim = dim;
            ac.heads = config.heads;
            ac.n_outputs = k + 1 == config.layers ? n_nodes : dim;
            blocks.push_back(std::make_unique<nn::AttentionBlock>(
                ac, store, "scorer.a" + std::to_string(k), rng));
        }
        nn::Tensor& start = store.create("scorer.start", {1, dim});
        nn::init_uniform(start, dim, rng);
    }

    // Start token + history rows, all with positional encodings.
    nn::Tensor assemble(const nn::Tensor& history) const {
        std::size_t n = 0;
        if (!history.shape.empty()) {
            if (!history.is_matrix() || (history.rows() > 0 && history.cols() != dim))
                throw ShapeMismatch("scorer: history must be [n x dim]");
            n = history.rows();
        }
        nn::Tensor input = nn::Tensor::zeros({n + 1, dim});
        const nn::Tensor& start = store.param("scorer.start");
        for (std::size_t c = 0; c < dim; ++c) input.at(0, c) = start.data[c];
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < dim; ++c) input.at(r + 1, c) = history.at(r, c);
        const nn::Tensor pe = nn::positional_encoding(n + 1, dim);
        for (std::size_t i = 0; i < input.data.size(); ++i) input.data[i] += pe.data[i];
        return input;
    }

    nn::AttentionBlock::Output run(const nn::Tensor& input) const {
        nn::AttentionBlock::Output out;
        nn::Tensor cur = input;
        for (const auto& block : blocks) {
            out = block->forward(cur);
            cur = out.logits;
        }
        return out;
    }
};

ScorerModel::ScorerModel(std::size_t n_nodes, std::size_t dim, const ScorerConfig& config)
    : impl_(std::make_unique<Impl>(n_nodes, dim, config)) {}
ScorerModel::ScorerModel(ScorerModel&&) noexcept = default;
ScorerModel& ScorerModel::operator=(ScorerModel&&) noexcept = default;
ScorerModel::~ScorerModel() = default;

std::size_t ScorerModel::n_nodes() const { return impl_->n_nodes; }
std::size_t ScorerModel::dim() const { return impl_->dim; }
const ScorerConfig& ScorerModel::config() const { return impl_->config; }
nn::ParameterStore& ScorerModel::store() { return impl_->store; }
const nn::ParameterStore& ScorerModel::store() const { return impl_->store; }

nn::Tensor ScorerModel::forward(const nn::Tensor& history) const {
    return impl_->run(impl_->assemble(history)).probs;
}

double ScorerModel::train_step(const nn::Tensor& history, const nn::Tensor& target) {
    const nn::Tensor input = impl_->assemble(history);
    if (!target.is_matrix() || target.rows() != input.rows() ||
        target.cols() != impl_->n_nodes)
        throw ShapeMismatch("scorer train_step: target must be [(n+1) x locations]");

    const nn::AttentionBlock::Output out = impl_->run(input);
    const nn::CrossEntropyResult ce = nn::cross_entropy_from_logits(out.logits, target);

    impl_->store.zero_grad();
    nn::Tensor grad = ce.grad_logits;
    for (std::size_t k = impl_->blocks.size(); k-- > 0;)
        grad = impl_->blocks[k]->backward(grad);
    // The start token is the only trainable input row.
    nn::Tensor& sg = impl_->store.grad("scorer.start");
    for (std::size_t c = 0; c < impl_->dim; ++c) sg.data[c] += grad.at(0, c);
    impl_->store.step();
    return ce.loss;
}

ScorerModel train_scorer(const std::vector<vt::Trajectory>& corpus,
                         const EmbeddingTable& table, const ScorerConfig& config,
                         ScorerTrainLog* log) {
    table.validate();
    if (corpus.empty()) throw EmptyCorpus("train_scorer: empty corpus");
    for (const vt::Trajectory& traj : corpus) {
        if (traj.points.empty())
            throw EmptyResult("train_scorer: trajectory '" + traj.id + "' has no points");
        for (const vt::TrajectoryPoint& p : traj.points)
            if (p.node < 0 || static_cast<std::size_t>(p.node) >= table.size())
                throw UnknownNode("train_scorer: trajectory '" + traj.id +
                                  "' visits node " + std::to_string(p.node));
    }

    const std::size_t L = table.size();
    ScorerModel model(L, table.dim(), config);
    if (log != nullptr) *log = {};

    // Inputs and targets are fixed across epochs; build them once.
    struct Sample {
        nn::Tensor history;
        nn::Tensor target;
        std::size_t slots;
    };
    std::vector<Sample> samples;
    samples.reserve(corpus.size());
    std::size_t total_slots = 0;
    for (const vt::Trajectory& traj : corpus) {
        std::vector<roadnet::NodeId> nodes;
        nodes.reserve(traj.points.size());
        for (const vt::TrajectoryPoint& p : traj.points) nodes.push_back(p.node);
        Sample s;
        s.history = table_rows(
            table, std::vector<roadnet::NodeId>(nodes.begin(), nodes.end() - 1));
        s.target = nn::Tensor::zeros({nodes.size(), L});
        for (std::size_t n = 0; n < nodes.size(); ++n)
            s.target.at(n, static_cast<std::size_t>(nodes[n])) = 1.0;
        s.slots = nodes.size();
        total_slots += s.slots;
        samples.push_back(std::move(s));
    }

    const std::vector<std::string> names = model.store().names();
    auto snapshot = [&]() {
        std::vector<std::vector<double>> copy;
        copy.reserve(names.size());
        for (const std::string& name : names) copy.push_back(model.store().param(name).data);
        return copy;
    };
    auto restore = [&](const std::vector<std::vector<double>>& copy) {
        for (std::size_t i = 0; i < names.size(); ++i)
            model.store().param(names[i]).data = copy[i];
    };

    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng order_rng(derive_seed(config.seed, 0x5c03));
    std::vector<std::vector<double>> last_good = snapshot();

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        shuffle(order, order_rng);
        double epoch_loss = 0.0;
        try {
            for (std::size_t i : order)
                epoch_loss += model.train_step(samples[i].history, samples[i].target);
        } catch (const NonFinite&) {
            restore(last_good);
            if (log != nullptr) {
                log->aborted = true;
                log->abort_epoch = epoch;
            }
            return model;
        }
        const double mean = epoch_loss / static_cast<double>(total_slots);
        if (log != nullptr) log->epoch_loss.push_back(mean);
        last_good = snapshot();
        if (config.target_loss > 0.0 && mean < config.target_loss) break;
    }
    return model;
}

nn::Tensor score_trajectory(const ScorerModel& model, const EmbeddingTable& table,
                            const std::vector<roadnet::NodeId>& nodes) {
    table.validate();
    if (table.size() != model.n_nodes() || table.dim() != model.dim())
        throw DimensionMismatch("score_trajectory: table does not match the model");
    return model.forward(table_rows(table, nodes));
}

std::vector<double> score_slot(const ScorerModel& model, const EmbeddingTable& table,
                               const std::vector<roadnet::NodeId>& history) {
    const nn::Tensor probs = score_trajectory(model, table, history);
    const std::size_t last = probs.rows() - 1;
    std::vector<double> h(probs.cols());
    for (std::size_t c = 0; c < h.size(); ++c) h[c] = probs.at(last, c);
    return h;
}

void save_scorer(const ScorerModel& model, const std::string& prefix) {
    const ScorerConfig& c = model.config();
    nlohmann::json j;
    j["version"] = 1;
    j["n_nodes"] = model.n_nodes();
    j["dim"] = model.dim();
    j["heads"] = c.heads;
    j["layers"] = c.layers;
    j["epochs"] = c.epochs;
    j["seed"] = c.seed;
    j["learning_rate"] = c.adam.learning_rate;
    j["target_loss"] = c.target_loss;
    csv::write_text(prefix + ".json", j.dump(2));
    nn::save_checkpoint(model.store(), prefix + ".bin");
}

ScorerModel load_scorer(const std::string& prefix) {
    std::ifstream in(prefix + ".json");
    if (!in) throw IoError("cannot open scorer sidecar: " + prefix + ".json");
    nlohmann::json j = nlohmann::json::parse(in);

    ScorerConfig config;
    config.heads = j.at("heads").get<std::size_t>();
    config.layers = j.at("layers").get<std::size_t>();
    config.epochs = j.at("epochs").get<std::size_t>();
    config.seed = j.at("seed").get<std::uint64_t>();
    config.adam.learning_rate = j.at("learning_rate").get<double>();
    config.target_loss = j.at("target_loss").get<double>();

    ScorerModel model(j.at("n_nodes").get<std::size_t>(), j.at("dim").get<std::size_t>(),
                      config);
    nn::load_checkpoint(model.store(), prefix + ".bin");
    return model;
}

// ---------------------------------------------------------------------------
// Candidate selection and restriction
// ---------------------------------------------------------------------------

CandidateSet candidate_set(const std::vector<double>& scores, std::size_t real_index,
                           const mech::UtilityModel& utility, double alpha, std::size_t K) {
    const std::size_t L = scores.size();
    if (L == 0) throw EmptyResult("candidate_set: empty score vector");
    utility.validate();
    if (utility.n_locations() != L)
        throw DimensionMismatch("candidate_set: utility covers " +
                                std::to_string(utility.n_locations()) + " locations, scores " +
                                std::to_string(L));
    if (real_index >= L) throw DimensionMismatch("candidate_set: real index out of range");
    if (K == 0) throw ConfigError("candidate_set: K must be at least 1");
    if (!(alpha >= 0.0) || !std::isfinite(alpha))
        throw ConfigError("candidate_set: alpha must be finite and non-negative");
    for (double s : scores)
        if (!std::isfinite(s)) throw ConfigError("candidate_set: scores must be finite");

    // The real location is forced in (an obfuscation support that excludes
    // the truth cannot report it); the heap ranks everything else.
    struct Entry {
        double weight;
        std::size_t index;
    };
    auto better = [](const Entry& a, const Entry& b) {
        return a.weight > b.weight || (a.weight == b.weight && a.index < b.index);
    };
    std::priority_queue<Entry, std::vector<Entry>, decltype(better)> worst_on_top(better);

    for (std::size_t j = 0; j < L; ++j) {
        if (j == real_index) continue;
        const double dc = mech::delta_cost(real_index, j, utility);
        const Entry e{dc == 0.0 ? kInf : scores[j] + alpha / dc, j};
        if (worst_on_top.size() + 1 < K) {
            worst_on_top.push(e);
        } else if (K > 1 && better(e, worst_on_top.top())) {
            worst_on_top.pop();
            worst_on_top.push(e);
        }
    }

    std::vector<Entry> picked = {{kInf, real_index}};
    while (!worst_on_top.empty()) {
        picked.push_back(worst_on_top.top());
        worst_on_top.pop();
    }
    std::sort(picked.begin(), picked.end(),
              [](const Entry& a, const Entry& b) { return a.index < b.index; });

    CandidateSet result;
    result.alpha = alpha;
    result.K = K;
    result.members.reserve(picked.size());
    result.weighted.reserve(picked.size());
    for (const Entry& e : picked) {
        result.members.push_back(e.index);
        result.weighted.push_back(e.weight);
    }
    return result;
}

void save_candidate_log(const std::string& path,
                        const std::vector<std::pair<std::string, CandidateSet>>& entries) {
    std::ostringstream out;
    for (const auto& [traj, c] : entries) {
        nlohmann::json j;
        j["traj"] = traj;
        j["slot"] = c.slot;
        j["members"] = c.members;
        j["scores"] = c.weighted;  // infinite weights serialize as null
        j["alpha"] = c.alpha;
        j["K"] = c.K;
        out << j.dump() << '\n';
    }
    csv::write_text(path, out.str());
}

mech::ObfuscationMatrix restrict_mechanism(mech::Provenance kind, const mech::Support& support,
                                           const CandidateSet& candidates,
                                           mech::PrivacyParams params,
                                           const mech::UtilityModel& utility,
                                           std::vector<double> prior,
                                           const mech::LpOptions& lp_options) {
    if (kind != mech::Provenance::Laplace && kind != mech::Provenance::Lp)
        throw ConfigError("restrict_mechanism: kind must be laplace or lp");
    if (candidates.members.empty())
        throw EmptySupport("restrict_mechanism: candidate set is empty");
    utility.validate();
    if (utility.n_locations() != support.size())
        throw DimensionMismatch("restrict_mechanism: utility does not match the support");

    mech::Support sub;
    sub.ids.reserve(candidates.members.size());
    sub.positions.reserve(candidates.members.size());
    for (std::size_t idx : candidates.members) {
        if (idx >= support.size())
            throw DimensionMismatch("restrict_mechanism: candidate index " +
                                    std::to_string(idx) + " outside the support");
        sub.ids.push_back(support.ids[idx]);
        sub.positions.push_back(support.positions[idx]);
    }

    if (prior.empty())
        prior = mech::uniform_prior(sub.size());
    else if (prior.size() != sub.size())
        throw DimensionMismatch("restrict_mechanism: prior must cover the candidates");

    mech::ObfuscationMatrix Z;
    if (kind == mech::Provenance::Laplace) {
        Z = mech::laplace_matrix(sub, params);
    } else {
        mech::UtilityModel sliced;
        sliced.n_targets = utility.n_targets;
        sliced.target_dist = utility.target_dist;
        sliced.costs.reserve(candidates.members.size() * utility.n_targets);
        for (std::size_t idx : candidates.members)
            for (std::size_t t = 0; t < utility.n_targets; ++t)
                sliced.costs.push_back(utility.cost(idx, t));
        Z = mech::lp_matrix(sub, params, sliced, prior, lp_options);
    }
    Z.provenance = mech::Provenance::Restricted;
    return Z;
}

}  // namespace locpriv::tp
