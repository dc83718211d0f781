#include "locpriv/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

namespace locpriv::base {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double seconds_of_day(double timestamp) {
    double s = std::fmod(timestamp, 86400.0);
    if (s < 0.0) s += 86400.0;
    return s;
}

void check_prior(const std::vector<double>& prior, std::size_t n, const char* where) {
    if (prior.size() != n)
        throw DimensionMismatch(std::string(where) + ": prior length mismatch");
    double total = 0.0;
    for (double p : prior) {
        if (!(p >= 0.0) || !std::isfinite(p))
            throw ConfigError(std::string(where) + ": prior entries must be finite and non-negative");
        total += p;
    }
    if (!(total > 0.0)) throw ConfigError(std::string(where) + ": prior has no mass");
}

std::size_t argmax_index(const std::vector<double>& values) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < values.size(); ++k)
        if (values[k] > values[best]) best = k;
    return best;
}

// Per-slot channels repeat across a sequence; map each distinct matrix to its
// node -> support-position table once.
class PositionCache {
  public:
    explicit PositionCache(const roadnet::RoadGraph& graph) : graph_(&graph) {}

    const std::vector<std::size_t>& of(const mech::ObfuscationMatrix& Z) {
        auto it = tables_.find(&Z);
        if (it == tables_.end())
            it = tables_.emplace(&Z, mech::support_positions(Z.support, *graph_)).first;
        return it->second;
    }

  private:
    const roadnet::RoadGraph* graph_;
    std::map<const mech::ObfuscationMatrix*, std::vector<std::size_t>> tables_;
};

// Likelihood of node x producing the slot's report, zero outside the support.
double slot_likelihood(const mech::ObfuscationMatrix& Z, const std::vector<std::size_t>& pos,
                       roadnet::NodeId x, std::size_t col) {
    const std::size_t row = pos[static_cast<std::size_t>(x)];
    return (row == mech::kNoSupportPosition || col == mech::kNoSupportPosition)
               ? 0.0
               : Z.at(row, col);
}

mech::Support graph_support(const roadnet::RoadGraph& graph) {
    mech::Support s;
    s.ids.reserve(graph.size());
    s.positions.reserve(graph.size());
    for (std::size_t v = 0; v < graph.size(); ++v) {
        const auto node = static_cast<roadnet::NodeId>(v);
        s.ids.push_back(graph.original_id(node));
        s.positions.push_back(graph.pos(node));
    }
    return s;
}

}  // namespace

double TransitionModel::at(std::size_t bucket, std::size_t from, std::size_t to) const {
    return probs[(bucket * n_nodes + from) * n_nodes + to];
}

void TransitionModel::validate() const {
    if (n_nodes == 0 || n_buckets == 0)
        throw DimensionMismatch("transition model: empty node set or bucket set");
    if (probs.size() != n_buckets * n_nodes * n_nodes)
        throw DimensionMismatch("transition model: probs size does not match layout");
    for (std::size_t b = 0; b < n_buckets; ++b) {
        for (std::size_t i = 0; i < n_nodes; ++i) {
            double sum = 0.0;
            for (std::size_t j = 0; j < n_nodes; ++j) {
                const double p = at(b, i, j);
                if (!std::isfinite(p) || p < 0.0 || p > 1.0 + 1e-9)
                    throw DimensionMismatch("transition model: entry outside [0,1]");
                sum += p;
            }
            if (std::abs(sum - 1.0) > 1e-9)
                throw DimensionMismatch("transition model: bucket " + std::to_string(b) +
                                        " row " + std::to_string(i) + " sums to " +
                                        std::to_string(sum));
        }
    }
}

TransitionModel learn_transitions(const std::vector<vt::Trajectory>& corpus,
                                  const roadnet::RoadGraph& graph, double smoothing) {
    if (graph.empty()) throw EmptyGraph("learn_transitions: graph has no nodes");
    if (!(smoothing >= 0.0) || !std::isfinite(smoothing))
        throw ConfigError("learn_transitions: smoothing must be finite and non-negative");

    const std::size_t L = graph.size();
    const std::size_t B = graph.bucket_count();
    TransitionModel model;
    model.n_nodes = L;
    model.n_buckets = B;
    model.smoothing = smoothing;
    model.probs.assign(B * L * L, 0.0);

    std::size_t pairs = 0;
    for (const vt::Trajectory& traj : corpus) {
        traj.validate(graph);
        for (std::size_t n = 0; n + 1 < traj.points.size(); ++n) {
            const std::size_t b =
                graph.schedule().bucket_at(seconds_of_day(traj.points[n].timestamp));
            const auto from = static_cast<std::size_t>(traj.points[n].node);
            const auto to = static_cast<std::size_t>(traj.points[n + 1].node);
            model.probs[(b * L + from) * L + to] += 1.0;
            ++pairs;
        }
    }
    if (pairs == 0) throw EmptyCorpus("learn_transitions: corpus contains no consecutive pairs");

    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t i = 0; i < L; ++i) {
            double* row = &model.probs[(b * L + i) * L];
            double total = 0.0;
            for (std::size_t j = 0; j < L; ++j) {
                row[j] += smoothing;
                total += row[j];
            }
            if (total > 0.0) {
                for (std::size_t j = 0; j < L; ++j) row[j] /= total;
                continue;
            }
            // Never-observed departure node with no smoothing mass: spread
            // uniformly over staying put or taking any outgoing arc.
            std::vector<std::size_t> succ = {i};
            graph.for_each_arc(static_cast<roadnet::NodeId>(i), b,
                               [&](roadnet::NodeId to, double) {
                                   succ.push_back(static_cast<std::size_t>(to));
                               });
            std::sort(succ.begin(), succ.end());
            succ.erase(std::unique(succ.begin(), succ.end()), succ.end());
            const double share = 1.0 / static_cast<double>(succ.size());
            for (std::size_t j : succ) row[j] = share;
        }
    }
    model.validate();
    return model;
}

void save_transitions(const TransitionModel& model, const roadnet::RoadGraph& graph,
                      const std::string& prefix) {
    model.validate();
    if (model.n_nodes != graph.size() || model.n_buckets != graph.bucket_count())
        throw DimensionMismatch("save_transitions: model does not match the graph");
    const std::size_t L = model.n_nodes;
    mech::ObfuscationMatrix Z;
    Z.support = graph_support(graph);
    Z.provenance = mech::Provenance::HmmTransitions;
    for (std::size_t b = 0; b < model.n_buckets; ++b) {
        const auto first = model.probs.begin() + static_cast<std::ptrdiff_t>(b * L * L);
        Z.probs.assign(first, first + static_cast<std::ptrdiff_t>(L * L));
        const std::string stem = prefix + ".b" + std::to_string(b);
        mech::save_matrix(Z, stem + ".csv", stem + ".json");
    }
}

TransitionModel load_transitions(const roadnet::RoadGraph& graph, const std::string& prefix) {
    if (graph.empty()) throw EmptyGraph("load_transitions: graph has no nodes");
    const std::size_t L = graph.size();
    TransitionModel model;
    model.n_nodes = L;
    model.n_buckets = graph.bucket_count();
    model.smoothing = 0.0;  // serialized rows already include any smoothing
    model.probs.reserve(model.n_buckets * L * L);
    for (std::size_t b = 0; b < model.n_buckets; ++b) {
        const std::string stem = prefix + ".b" + std::to_string(b);
        const mech::ObfuscationMatrix Z = mech::load_matrix(stem + ".csv", stem + ".json");
        if (Z.provenance != mech::Provenance::HmmTransitions)
            throw ConfigError(stem + ": expected hmm-transitions provenance, got " +
                              mech::to_string(Z.provenance));
        if (Z.size() != L)
            throw DimensionMismatch(stem + ": support size does not match the graph");
        for (std::size_t v = 0; v < L; ++v)
            if (Z.support.ids[v] != graph.original_id(static_cast<roadnet::NodeId>(v)))
                throw ConfigError(stem + ": support ids do not match the graph");
        model.probs.insert(model.probs.end(), Z.probs.begin(), Z.probs.end());
    }
    model.validate();
    return model;
}

BayesEstimate bayes_attack(const mech::ObfuscationMatrix& Z, std::size_t column,
                           const std::vector<double>& prior) {
    Z.validate();
    if (column >= Z.size())
        throw DimensionMismatch("bayes_attack: column " + std::to_string(column) +
                                " outside support of size " + std::to_string(Z.size()));
    check_prior(prior, Z.size(), "bayes_attack");

    BayesEstimate est;
    double best = 0.0;
    for (std::size_t i = 0; i < Z.size(); ++i) {
        const double w = prior[i] * Z.at(i, column);
        if (w > best) {
            best = w;
            est.index = i;
        }
    }
    if (!(best > 0.0)) {
        // No posterior mass in this column: the report carries no information,
        // so the best guess is the prior mode.
        est.index = argmax_index(prior);
        est.all_zero_column = true;
    }
    return est;
}

SequenceAttack bayes_attack_sequence(const vt::ObservationSequence& obs,
                                     const roadnet::RoadGraph& graph,
                                     const std::vector<double>& prior) {
    obs.validate(graph);
    check_prior(prior, graph.size(), "bayes_attack_sequence");

    PositionCache cache(graph);
    SequenceAttack result;
    result.estimates.reserve(obs.size());
    for (const vt::Observation& o : obs.slots) {
        const mech::ObfuscationMatrix& Z = *o.channel;
        const std::vector<std::size_t>& pos = cache.of(Z);
        const std::size_t col = pos[static_cast<std::size_t>(o.reported)];
        roadnet::NodeId best_node = 0;
        double best = 0.0;
        for (std::size_t x = 0; x < graph.size(); ++x) {
            const double w =
                prior[x] * slot_likelihood(Z, pos, static_cast<roadnet::NodeId>(x), col);
            if (w > best) {
                best = w;
                best_node = static_cast<roadnet::NodeId>(x);
            }
        }
        if (!(best > 0.0)) {
            best_node = static_cast<roadnet::NodeId>(argmax_index(prior));
            ++result.flagged;
        }
        result.estimates.push_back(best_node);
    }
    return result;
}

ViterbiResult viterbi(const TransitionModel& transitions, const vt::ObservationSequence& obs,
                      const roadnet::RoadGraph& graph, const std::vector<double>& prior) {
    transitions.validate();
    if (transitions.n_nodes != graph.size() || transitions.n_buckets != graph.bucket_count())
        throw DimensionMismatch("viterbi: transition model does not match the graph");
    obs.validate(graph);
    check_prior(prior, graph.size(), "viterbi");

    const std::size_t N = obs.size();
    const std::size_t L = graph.size();

    // Log emissions per slot; nodes outside a channel support get -inf.
    PositionCache cache(graph);
    std::vector<double> le(N * L, kNegInf);
    for (std::size_t n = 0; n < N; ++n) {
        const mech::ObfuscationMatrix& Z = *obs.slots[n].channel;
        const std::vector<std::size_t>& pos = cache.of(Z);
        const std::size_t col = pos[static_cast<std::size_t>(obs.slots[n].reported)];
        for (std::size_t x = 0; x < L; ++x)
            le[n * L + x] =
                std::log(slot_likelihood(Z, pos, static_cast<roadnet::NodeId>(x), col));
    }

    // Transitions out of slot n use the bucket at its departure timestamp.
    std::vector<std::size_t> bucket(N > 0 ? N - 1 : 0, 0);
    for (std::size_t n = 0; n + 1 < N; ++n)
        bucket[n] = graph.schedule().bucket_at(seconds_of_day(obs.slots[n].timestamp));

    // beta[n*L + x]: best log score over continuations of state x at slot n.
    std::vector<double> beta(N * L, 0.0);
    std::vector<double> tail(L);
    for (std::size_t n = N - 1; n-- > 0;) {
        for (std::size_t x = 0; x < L; ++x)
            tail[x] = le[(n + 1) * L + x] + beta[(n + 1) * L + x];
        for (std::size_t x = 0; x < L; ++x) {
            double best = kNegInf;
            for (std::size_t y = 0; y < L; ++y) {
                const double cand = std::log(transitions.at(bucket[n], x, y)) + tail[y];
                if (cand > best) best = cand;
            }
            beta[n * L + x] = best;
        }
    }

    double mass = 0.0;
    for (double p : prior) mass += p;

    double best_total = kNegInf;
    std::size_t first = 0;
    for (std::size_t x = 0; x < L; ++x) {
        const double total = std::log(prior[x] / mass) + le[x] + beta[x];
        if (total > best_total) {
            best_total = total;
            first = x;
        }
    }

    ViterbiResult result;
    if (best_total == kNegInf) {
        // Every trajectory is impossible under the model; degrade to the
        // memoryless attack rather than emit an arbitrary path.
        SequenceAttack rescue = bayes_attack_sequence(obs, graph, prior);
        result.path = std::move(rescue.estimates);
        result.flagged = rescue.flagged;
        result.log_score = kNegInf;
        result.fallback = true;
        return result;
    }

    // Greedy reconstruction: among the states that extend the optimal prefix
    // to a globally optimal path, take the smallest — this yields the
    // lexicographically smallest optimum, which backtracking via stored
    // predecessors would not.
    result.path.reserve(N);
    result.path.push_back(static_cast<roadnet::NodeId>(first));
    std::size_t prev = first;
    for (std::size_t n = 1; n < N; ++n) {
        double best = kNegInf;
        std::size_t pick = 0;
        for (std::size_t y = 0; y < L; ++y) {
            const double cand =
                std::log(transitions.at(bucket[n - 1], prev, y)) + le[n * L + y] + beta[n * L + y];
            if (cand > best) {
                best = cand;
                pick = y;
            }
        }
        result.path.push_back(static_cast<roadnet::NodeId>(pick));
        prev = pick;
    }
    result.log_score = best_total;
    return result;
}

}  // namespace locpriv::base
