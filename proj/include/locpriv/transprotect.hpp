#pragma once

// Client-side defense pipeline: structural node embeddings (biased random
// walks + skip-gram with negative sampling, refined by graph convolutions),
// a causal attention model that scores likely next locations, utility-aware
// top-K candidate selection, and restriction of an obfuscation mechanism to
// the selected candidate support.

#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "locpriv/mechanisms.hpp"
#include "locpriv/neural.hpp"
#include "locpriv/roadnet.hpp"
#include "locpriv/vehitrack.hpp"

namespace locpriv::tp {

// ---------------------------------------------------------------------------
// Node embeddings
// ---------------------------------------------------------------------------

// Per-node feature vectors plus the pipeline stage that produced them.
struct EmbeddingTable {
    enum class Stage { Node2Vec, Gcn };

    Stage stage = Stage::Node2Vec;
    nn::Tensor vectors;  // [n_nodes x dim]

    std::size_t size() const { return vectors.shape.empty() ? 0 : vectors.shape[0]; }
    std::size_t dim() const { return vectors.shape.size() < 2 ? 0 : vectors.shape[1]; }

    // Throws ShapeMismatch for non-matrix storage, NonFinite for bad entries.
    void validate() const;
};

struct WalkConfig {
    double p = 1.0;  // return bias: revisiting the previous node weighs 1/p
    double q = 1.0;  // outward bias: leaving the previous neighbourhood weighs 1/q
    std::size_t walks_per_node = 10;
    std::size_t walk_length = 20;  // nodes per walk, including the start
};

struct WalkCorpus {
    std::vector<std::vector<roadnet::NodeId>> walks;
    std::size_t truncated = 0;  // walks cut short at a node with no out-arcs
};

// Second-order biased random walks over the arc structure (arcs are treated
// as unweighted adjacency; travel times are costs, not affinities).  From
// node v reached via t, the next hop x is drawn proportional to 1/p when
// x == t, 1 when x is an out-neighbour of t, and 1/q otherwise.  Every walk
// draws from its own seed substream, so the corpus is deterministic.  A node
// without out-arcs ends the walk early and bumps `truncated`.
WalkCorpus node2vec_walks(const roadnet::RoadGraph& graph, const WalkConfig& config,
                          std::uint64_t seed);

struct SkipGramConfig {
    std::size_t dim = 128;
    std::size_t window = 5;
    std::size_t negatives = 5;
    std::size_t epochs = 5;
    double learning_rate = 0.025;
    double negative_exponent = 0.75;  // negatives drawn from unigram^exponent
};

// Center-role and context-role vectors of the skip-gram factorization.
struct SkipGramModel {
    nn::Tensor in;   // [n_nodes x dim]
    nn::Tensor out;  // [n_nodes x dim]
};

struct SkipGramPair {
    roadnet::NodeId center = 0;
    roadnet::NodeId context = 0;
    std::vector<roadnet::NodeId> negatives;
};

// Seeded initialization: center vectors uniform in (-0.5/dim, +0.5/dim),
// context vectors zero (the customary word2vec starting point).
SkipGramModel skipgram_init(std::size_t n_nodes, const SkipGramConfig& config,
                            std::uint64_t seed);

// Mean negative-sampling objective over the batch:
//   -log sigma(u_c . v_ctx) - sum_neg log sigma(-u_c . v_neg).
double sgns_batch_loss(const SkipGramModel& model, const std::vector<SkipGramPair>& batch);

struct Node2VecTrainLog {
    std::vector<double> epoch_loss;  // mean pair loss per epoch
    std::size_t pairs = 0;           // (center, context) pairs per epoch
};

// Skip-gram training over the walk corpus: one SGD update per
// (center, context) pair with `negatives` draws from the unigram^exponent
// table, pairs visited in corpus order.  Starts from skipgram_init(seed)
// (epochs = 0 returns exactly that) and returns the center-role vectors.
// Throws EmptyCorpus for a pairless corpus and NonFinite when an epoch
// produces a non-finite embedding.
EmbeddingTable node2vec_train(const WalkCorpus& corpus, std::size_t n_nodes,
                              const SkipGramConfig& config, std::uint64_t seed,
                              Node2VecTrainLog* log = nullptr);

struct GcnConfig {
    std::size_t layers = 2;
    std::uint64_t seed = 1;
};

// Structural smoothing: `layers` graph-convolution passes over the
// symmetrically normalized (binarized, symmetrized, self-looped) adjacency,
// starting from the node2vec vectors, with seeded random layer weights.
// Expects a node2vec-stage table whose rows match the graph.
EmbeddingTable gcn_refine(const roadnet::RoadGraph& graph, const EmbeddingTable& table,
                          const GcnConfig& config = {});

// Row n = table vector of nodes[n] plus positional-encoding row n.
// Throws UnknownNode for out-of-table ids, OddDimension for odd dims.
nn::Tensor embed_trajectory(const EmbeddingTable& table,
                            const std::vector<roadnet::NodeId>& nodes);

// `prefix`.json holds the stage and shape, `prefix`.bin the vectors.
void save_table(const EmbeddingTable& table, const std::string& prefix);
EmbeddingTable load_table(const std::string& prefix);

// ---------------------------------------------------------------------------
// Next-location scorer
// ---------------------------------------------------------------------------

struct ScorerConfig {
    std::size_t heads = 4;
    std::size_t layers = 2;
    std::size_t epochs = 50;
    std::uint64_t seed = 1;
    nn::AdamConfig adam;
    // Stop early once the mean per-slot epoch loss drops below this
    // (0 disables early stopping).
    double target_loss = 0.0;
};

// Stack of causal self-attention blocks over embedded location histories.
// Position 0 is a learned start token, positions 1..n the history
// embeddings, all with positional encodings added; inner blocks project
// back to the embedding dimension, the last block scores all locations.
// Output row k is therefore the next-location distribution given the
// first k history entries.
class ScorerModel {
  public:
    ScorerModel(std::size_t n_nodes, std::size_t dim, const ScorerConfig& config);
    ScorerModel(ScorerModel&&) noexcept;
    ScorerModel& operator=(ScorerModel&&) noexcept;
    ~ScorerModel();

    std::size_t n_nodes() const;
    std::size_t dim() const;
    const ScorerConfig& config() const;

    nn::ParameterStore& store();
    const nn::ParameterStore& store() const;

    // history: [n x dim] embedding rows, n >= 0 (no positional encoding;
    // the model adds its own).  Returns probabilities [(n+1) x n_nodes].
    nn::Tensor forward(const nn::Tensor& history) const;

    // Forward + cross-entropy against one-hot targets [(n+1) x n_nodes] +
    // backward + one Adam step.  Returns the summed loss.
    double train_step(const nn::Tensor& history, const nn::Tensor& target);

  private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

struct ScorerTrainLog {
    std::vector<double> epoch_loss;  // mean loss per predicted slot
    bool aborted = false;            // non-finite value hit; parameters restored
    std::size_t abort_epoch = 0;
};

// Teacher-forced next-location training: each trajectory x_{1:N} yields
// inputs (start, x_1..x_{N-1}) and targets x_{1:N}.  One optimizer step per
// trajectory, order seed-shuffled per epoch; a non-finite loss or gradient
// aborts and restores the last completed epoch's parameters.
ScorerModel train_scorer(const std::vector<vt::Trajectory>& corpus,
                         const EmbeddingTable& table, const ScorerConfig& config,
                         ScorerTrainLog* log = nullptr);

// Probability rows for every slot of a trajectory: row k is the
// next-location distribution given x_{1:k} (row 0: empty history).
nn::Tensor score_trajectory(const ScorerModel& model, const EmbeddingTable& table,
                            const std::vector<roadnet::NodeId>& nodes);

// The next-location distribution after the given (possibly empty) history.
std::vector<double> score_slot(const ScorerModel& model, const EmbeddingTable& table,
                               const std::vector<roadnet::NodeId>& history);

// `prefix`.json holds the architecture, `prefix`.bin the parameters.
void save_scorer(const ScorerModel& model, const std::string& prefix);
ScorerModel load_scorer(const std::string& prefix);

// ---------------------------------------------------------------------------
// Candidate selection and mechanism restriction
// ---------------------------------------------------------------------------

// Top-K locations by h_j + alpha / delta-cost, selected with a size-K
// min-heap in one pass.  The real location counts as infinitely weighted
// (a support that excludes the truth cannot report it), as does any
// location whose delta-cost is zero.
struct CandidateSet {
    std::size_t slot = 0;               // filled by sequence-level callers
    std::vector<std::size_t> members;   // ascending location indices, <= K
    std::vector<double> weighted;       // weighted score per member (aligned)
    double alpha = 1e4;
    std::size_t K = 10;
};

CandidateSet candidate_set(const std::vector<double>& scores, std::size_t real_index,
                           const mech::UtilityModel& utility, double alpha, std::size_t K);

// JSON-lines log, one record per entry:
//   {"traj": ..., "slot": ..., "members": [...], "scores": [...],
//    "alpha": ..., "K": ...}
// (infinite weights serialize as null).
void save_candidate_log(const std::string& path,
                        const std::vector<std::pair<std::string, CandidateSet>>& entries);

// Rebuilds the chosen mechanism kind (Provenance::Laplace or ::Lp) over the
// candidate locations only: the support, utility rows, and prior are sliced
// to the members, and the result carries provenance `restricted`.  `prior`
// is over the candidates (uniform when empty); privacy params are taken
// verbatim, so the restricted Laplace keeps the full-support scale.
mech::ObfuscationMatrix restrict_mechanism(mech::Provenance kind, const mech::Support& support,
                                           const CandidateSet& candidates,
                                           mech::PrivacyParams params,
                                           const mech::UtilityModel& utility,
                                           std::vector<double> prior = {},
                                           const mech::LpOptions& lp_options = {});

}  // namespace locpriv::tp
