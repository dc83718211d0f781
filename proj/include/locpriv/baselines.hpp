#pragma once

// Reference attackers against obfuscated location reports: a memoryless
// Bayes estimator, a time-bucketed first-order mobility model learned from
// trajectory corpora, and a Viterbi decoder that combines the two into a
// maximum-a-posteriori trajectory estimate.

#include <cstddef>
#include <string>
#include <vector>

#include "locpriv/mechanisms.hpp"
#include "locpriv/roadnet.hpp"
#include "locpriv/vehitrack.hpp"

namespace locpriv::base {

// First-order transition probabilities between graph nodes, one row-stochastic
// matrix per schedule bucket, stored bucket-major ([bucket][from][to]).
struct TransitionModel {
    std::size_t n_nodes = 0;
    std::size_t n_buckets = 0;
    double smoothing = 0.0;
    std::vector<double> probs;

    double at(std::size_t bucket, std::size_t from, std::size_t to) const;

    // Throws DimensionMismatch when the layout or the row-stochastic
    // property (1e-9 tolerance) is violated.
    void validate() const;
};

// Counts consecutive node pairs in the corpus, keyed by the schedule bucket of
// the departure timestamp, then normalizes each row. `smoothing` is added to
// every entry before normalization; with smoothing == 0, rows that were never
// observed fall back to a uniform distribution over the departure node and its
// out-neighbors in that bucket. Throws EmptyCorpus when the corpus contains no
// consecutive pair and ConfigError for negative smoothing.
TransitionModel learn_transitions(const std::vector<vt::Trajectory>& corpus,
                                  const roadnet::RoadGraph& graph,
                                  double smoothing = 1e-6);

// One channel-matrix file pair per bucket at "<prefix>.b<bucket>.csv/.json".
// The serialized probabilities already include smoothing, so the reloaded
// model reports smoothing == 0.
void save_transitions(const TransitionModel& model, const roadnet::RoadGraph& graph,
                      const std::string& prefix);
TransitionModel load_transitions(const roadnet::RoadGraph& graph, const std::string& prefix);

// Posterior-mode estimate for a single report: argmax_i prior[i] * Z[i][column],
// ties broken toward the smallest index. A column with no posterior mass falls
// back to the prior mode and sets `all_zero_column` instead of throwing.
struct BayesEstimate {
    std::size_t index = 0;
    bool all_zero_column = false;
};

BayesEstimate bayes_attack(const mech::ObfuscationMatrix& Z, std::size_t column,
                           const std::vector<double>& prior);

// Memoryless Bayes estimate per slot of an observation sequence. `prior` is
// indexed by graph node; nodes outside a slot's channel support have zero
// likelihood. `flagged` counts slots that fell back to the prior mode.
struct SequenceAttack {
    std::vector<roadnet::NodeId> estimates;
    std::size_t flagged = 0;
};

SequenceAttack bayes_attack_sequence(const vt::ObservationSequence& obs,
                                     const roadnet::RoadGraph& graph,
                                     const std::vector<double>& prior);

// Maximum-a-posteriori node sequence under the transition model, computed in
// log space. Among score-tied optima the lexicographically smallest node-id
// sequence is returned. When every trajectory has probability zero the decoder
// falls back to per-slot Bayes estimates and sets `fallback`; `log_score` is
// -infinity in that case. `flagged` counts fallback slots of that rescue pass.
struct ViterbiResult {
    std::vector<roadnet::NodeId> path;
    double log_score = 0.0;
    bool fallback = false;
    std::size_t flagged = 0;
};

ViterbiResult viterbi(const TransitionModel& transitions, const vt::ObservationSequence& obs,
                      const roadnet::RoadGraph& graph, const std::vector<double>& prior);

}  // namespace locpriv::base
