#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "locpriv/errors.hpp"
#include "locpriv/mechanisms.hpp"
#include "locpriv/neural.hpp"
#include "locpriv/rng.hpp"
#include "locpriv/roadnet.hpp"

// The two-phase de-obfuscation attack: a mobility-aware Bayes filter that
// shrinks each report to a set of physically possible locations, followed
// by a bidirectional-LSTM sequence model that refines the per-slot
// posteriors into point estimates.
namespace locpriv::vt {

// A ground-truth vehicle trace: strictly increasing timestamps (seconds)
// paired with graph node ids.
struct TrajectoryPoint {
    double timestamp = 0.0;
    roadnet::NodeId node = roadnet::kNoNode;
};

struct Trajectory {
    std::string id;
    std::vector<TrajectoryPoint> points;

    std::size_t size() const { return points.size(); }

    // Rejects empty traces, non-increasing timestamps, and nodes outside
    // the graph.
    void validate(const roadnet::RoadGraph& graph) const;
};

// One obfuscated report: the reported node plus the channel the adversary
// uses as its likelihood model for that slot.  The matrix is borrowed, not
// owned, and must outlive the sequence.  Channel supports are keyed by the
// graph's *original* node ids so a matrix loaded from disk lines up with a
// rebuilt graph.
struct Observation {
    double timestamp = 0.0;
    roadnet::NodeId reported = roadnet::kNoNode;
    const mech::ObfuscationMatrix* channel = nullptr;
};

struct ObservationSequence {
    std::string trajectory_id;
    std::vector<Observation> slots;

    std::size_t size() const { return slots.size(); }

    // Rejects empty sequences, non-increasing timestamps, reported nodes
    // outside the graph, and null channels (MatrixMissing).
    void validate(const roadnet::RoadGraph& graph) const;
};

// Posterior state of one time slot.  `reachable` is the union of
// speed-bounded reachable sets grown from the previous slot's possible
// set; `raw` is the Bayes posterior over it.  `possible` keeps the
// members whose raw posterior clears the threshold, with `renormalized`
// the posterior restricted to them (sums to 1).
struct SlotPosterior {
    std::vector<roadnet::NodeId> reachable;  // sorted ascending
    std::vector<double> raw;                 // aligned with `reachable`, sums to 1
    std::vector<roadnet::NodeId> possible;   // sorted ascending, subset of `reachable`
    std::vector<double> renormalized;        // aligned with `possible`, sums to 1
    bool fallback = false;                   // slot was degenerate and patched
};

struct PosteriorSequence {
    std::vector<SlotPosterior> slots;

    std::size_t size() const { return slots.size(); }
    std::size_t fallback_count() const;
};

struct Phase1Options {
    // Posterior mass a location needs to stay in the possible set.  Zero
    // keeps every positive-posterior member.
    double xi = 1e-4;
    // Speed bound (km/h) for the reachability pruning between slots.
    double s_limit_kmh = 120.0;
    // Radius of the bootstrap ball around the first report.  Zero derives
    // it from the slot-1 channel: the largest distance from the report to
    // any location that has positive probability of producing it, so the
    // ball never cuts off a possible source.
    double first_slot_radius_km = 0.0;
    // Raise DegenerateSlot instead of applying the fallback rule.  Sample
    // generation uses this to drop broken samples; attack-time inference
    // keeps the chain alive with the fallback.
    bool throw_on_degenerate = false;
};

// The slot-chained Bayes filter: bootstrap a candidate ball around the
// first report, then alternate reachability expansion (union of
// speed-bounded reachable sets from the previous possible set) with a
// Bayes update against the slot's channel column and threshold filtering.
// Degenerate slots (zero posterior mass everywhere, or an empty possible
// set) fall back to the prior restricted to the reachable set and retain
// its top-1 member; every fallback is flagged on the slot.
//
// `prior` is a non-negative weight per graph node (any positive scale).
PosteriorSequence phase1_posteriors(const ObservationSequence& obs,
                                    const roadnet::RoadGraph& graph,
                                    const std::vector<double>& prior,
                                    const Phase1Options& options = {});

// Per-slot argmax of the thresholded posterior, ties to the smaller node
// id — the Phase-1-only location estimate.
std::vector<roadnet::NodeId> phase1_argmax(const PosteriorSequence& posteriors);

// Point estimates with their per-slot great-circle error against a truth
// sequence.
struct InferenceResult {
    std::vector<roadnet::NodeId> estimates;
    std::vector<double> error_km;  // filled by score_estimates
    double mean_error_km = 0.0;
};

// Mean great-circle distance between estimates and truth, slot by slot.
double eie_km(const std::vector<roadnet::NodeId>& estimates,
              const std::vector<roadnet::NodeId>& truth, const roadnet::RoadGraph& graph);

InferenceResult score_estimates(std::vector<roadnet::NodeId> estimates,
                                const std::vector<roadnet::NodeId>& truth,
                                const roadnet::RoadGraph& graph);

// Mean over slots of 1 - |possible_n| / |ball_n|: the fraction of the
// adversary's search ball the filter dismisses.  Clamped at 0 when the
// possible set outgrows the ball.
double elimination_ratio(const PosteriorSequence& posteriors,
                         const std::vector<std::size_t>& ball_sizes);

// Size of the haversine ball of `radius_km` around each reported
// location — the denominator of the elimination metric (the adversary's
// search range before any mobility reasoning).
std::vector<std::size_t> observation_ball_sizes(const roadnet::RoadGraph& graph,
                                                const ObservationSequence& obs,
                                                double radius_km);

// ---------------------------------------------------------------------------
// Training-sample generation
// ---------------------------------------------------------------------------

// One supervised sequence: the reports drawn for a trajectory, the filter
// posteriors they induce, and the true locations as labels.
struct TrainingSample {
    std::string trajectory_id;
    std::uint64_t seed = 0;
    std::vector<roadnet::NodeId> reported;
    std::vector<roadnet::NodeId> truth;
    PosteriorSequence posteriors;
};

struct TrainingDataset {
    std::vector<TrainingSample> samples;
    std::size_t dropped = 0;  // samples discarded for a degenerate slot
};

struct SampleOptions {
    std::size_t samples_per_trajectory = 20;
    Phase1Options phase1;
};

// Draws `samples_per_trajectory` obfuscations of every trajectory through
// the mechanism, runs the Phase-1 filter on each, and pairs the posterior
// sequences with the one-hot truth.  Each sample's RNG seed derives from
// (master_seed, trajectory index, sample index) and is recorded, so the
// dataset is reproducible sample by sample.  Samples that hit a
// degenerate slot are dropped and counted.
TrainingDataset generate_training_samples(const std::vector<Trajectory>& trajectories,
                                          const mech::ObfuscationMatrix& mechanism,
                                          const roadnet::RoadGraph& graph,
                                          const std::vector<double>& prior,
                                          std::uint64_t master_seed,
                                          const SampleOptions& options = {});

// JSON-lines interchange: one record per sample (trajectory id, seed,
// slot-aligned reported / support / posterior arrays, truth ids).  Node
// ids refer to the graph build the dataset was generated against.  The
// loaded posteriors carry the thresholded sets only; the raw vectors
// mirror them.
void save_dataset(const TrainingDataset& dataset, const std::string& path);
TrainingDataset load_dataset(const std::string& path);

// ---------------------------------------------------------------------------
// Phase 2: sequence refinement model
// ---------------------------------------------------------------------------

struct Phase2Config {
    std::size_t hidden_dim = 64;
    std::size_t layers = 5;
    bool bidirectional = true;
    std::size_t epochs = 50;
    std::uint64_t seed = 1;
    nn::AdamConfig adam;
    // Stop early once the mean per-slot epoch loss drops below this
    // (0 disables early stopping).
    double target_loss = 0.0;
};

// Stacked (Bi)LSTM over embedded posterior vectors with a linear read-out
// per slot.  The support fixes the embedding layout: input slot vectors
// and output score vectors are both indexed by position in `support`.
// Sequences are padded to `max_length` with zero rows, which the loss
// masks out.
class Phase2Model {
  public:
    Phase2Model(std::vector<roadnet::NodeId> support, std::size_t max_length,
                const Phase2Config& config);
    Phase2Model(Phase2Model&&) noexcept;
    Phase2Model& operator=(Phase2Model&&) noexcept;
    ~Phase2Model();

    const std::vector<roadnet::NodeId>& support() const;
    std::size_t max_length() const;
    const Phase2Config& config() const;

    nn::ParameterStore& store();
    const nn::ParameterStore& store() const;

    // Forward pass over an embedded [max_length x support size] input.
    nn::Tensor forward(const nn::Tensor& input) const;

    // Forward + cross-entropy + backward + Adam step for one sample.
    // Returns the summed loss over non-padding rows.
    double train_step(const nn::Tensor& input, const nn::Tensor& target);

  private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

struct Phase2TrainLog {
    std::vector<double> epoch_loss;  // mean loss per labelled slot
    bool aborted = false;            // non-finite value hit; parameters restored
    std::size_t abort_epoch = 0;     // epoch that failed when aborted
};

// Scatters each slot's thresholded posterior into the support layout.
// Rows beyond the sequence length stay zero (padding).  Throws
// UnknownNode if a possible-set member is missing from the support and
// ShapeMismatch if the sequence is longer than n_rows.
nn::Tensor embed_posteriors(const PosteriorSequence& posteriors,
                            const std::vector<roadnet::NodeId>& support, std::size_t n_rows);

// Trains a refinement model on the dataset: inputs are embedded posterior
// sequences padded to the corpus maximum, targets the one-hot truth with
// padding rows masked.  Samples are visited in a seed-shuffled order each
// epoch with one optimizer step per sample.  A non-finite loss or
// gradient aborts training and restores the last completed epoch's
// parameters (flagged in the log).
Phase2Model phase2_train(const TrainingDataset& dataset,
                         std::vector<roadnet::NodeId> support, const Phase2Config& config,
                         Phase2TrainLog* log = nullptr);

// Embeds the posterior sequence, pads it to the model's trained length,
// and decodes per-slot estimates as the argmax of the sigmoid-squashed
// scores (ties to the smaller node id).  Only the first size() rows
// produce estimates; padding rows yield none.  Throws ShapeMismatch when
// the sequence is longer than the model's padded length.
InferenceResult phase2_infer(const Phase2Model& model, const PosteriorSequence& posteriors);

// Model persistence: `prefix`.json holds the architecture and support,
// `prefix`.bin the parameter checkpoint.
void save_phase2(const Phase2Model& model, const std::string& prefix);
Phase2Model load_phase2(const std::string& prefix);

}  // namespace locpriv::vt
