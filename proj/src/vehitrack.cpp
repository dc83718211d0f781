#include "locpriv/vehitrack.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <unordered_map>
#include <utility>

#include <json.hpp>

namespace locpriv::vt {

namespace {

constexpr std::size_t kNoPosition = static_cast<std::size_t>(-1);

// Maps graph nodes into a channel's support (keyed by original ids) so
// likelihoods can be read off by node id.  Nodes outside the support have
// zero likelihood: the channel cannot have produced or received them.
class ChannelIndex {
  public:
    ChannelIndex(const mech::ObfuscationMatrix& Z, const roadnet::RoadGraph& graph)
        : Z_(&Z), graph_(&graph) {
        index_.reserve(Z.support.ids.size());
        for (std::size_t k = 0; k < Z.support.ids.size(); ++k) index_.emplace(Z.support.ids[k], k);
    }

    std::size_t position(roadnet::NodeId v) const {
        auto it = index_.find(graph_->original_id(v));
        return it == index_.end() ? kNoPosition : it->second;
    }

    double likelihood(roadnet::NodeId x, std::size_t col) const {
        const std::size_t row = position(x);
        return row == kNoPosition ? 0.0 : Z_->at(row, col);
    }

    const mech::ObfuscationMatrix& matrix() const { return *Z_; }

  private:
    const mech::ObfuscationMatrix* Z_;
    const roadnet::RoadGraph* graph_;
    std::unordered_map<std::int64_t, std::size_t> index_;
};

double seconds_of_day(double timestamp) {
    double s = std::fmod(timestamp, 86400.0);
    if (s < 0.0) s += 86400.0;
    return s;
}

void check_prior(const std::vector<double>& prior, const roadnet::RoadGraph& graph) {
    if (prior.size() != graph.size())
        throw DimensionMismatch("phase1: prior length does not match the graph");
    double total = 0.0;
    for (double p : prior) {
        if (!(p >= 0.0) || !std::isfinite(p))
            throw ConfigError("phase1: prior entries must be finite and non-negative");
        total += p;
    }
    if (!(total > 0.0)) throw ConfigError("phase1: prior has no mass");
}

// Haversine ball around `center`; radius <= 0 degenerates to the center
// alone.  prune_by_speed covers exactly radius km at dt = 1 h.
std::vector<roadnet::NodeId> radius_ball(const roadnet::RoadGraph& graph, roadnet::NodeId center,
                                         double radius_km) {
    if (!(radius_km > 0.0)) return {center};
    return roadnet::prune_by_speed(graph, center, 3600.0, radius_km);
}

// Largest distance from the report to any location with positive
// probability of producing it, per the slot's channel.  A bootstrap ball
// of this radius never cuts off a possible source.
double column_span_km(const ChannelIndex& channel, roadnet::NodeId reported) {
    const std::size_t col = channel.position(reported);
    if (col == kNoPosition) return 0.0;
    const mech::Support& support = channel.matrix().support;
    double span = 0.0;
    for (std::size_t k = 0; k < support.size(); ++k)
        if (channel.matrix().at(k, col) > 0.0)
            span = std::max(span, support.distance_km(k, col));
    return span;
}

// Posterior of the prior restricted to `members` (uniform when the prior
// carries no mass there) — what Bayes degrades to when the likelihood is
// uninformative.
std::vector<double> restricted_prior(const std::vector<roadnet::NodeId>& members,
                                     const std::vector<double>& prior) {
    std::vector<double> out(members.size(), 0.0);
    double total = 0.0;
    for (std::size_t k = 0; k < members.size(); ++k) {
        out[k] = prior[static_cast<std::size_t>(members[k])];
        total += out[k];
    }
    if (total > 0.0) {
        for (double& v : out) v /= total;
    } else {
        std::fill(out.begin(), out.end(), 1.0 / static_cast<double>(members.size()));
    }
    return out;
}

std::size_t argmax_index(const std::vector<double>& values) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < values.size(); ++k)
        if (values[k] > values[best]) best = k;
    return best;
}

}  // namespace

void Trajectory::validate(const roadnet::RoadGraph& graph) const {
    if (points.empty()) throw EmptyResult("trajectory '" + id + "' has no points");
    for (std::size_t n = 0; n < points.size(); ++n) {
        graph.pos(points[n].node);  // throws UnknownNode when out of range
        if (n > 0 && !(points[n].timestamp > points[n - 1].timestamp))
            throw ConfigError("trajectory '" + id + "': timestamps must strictly increase");
    }
}

void ObservationSequence::validate(const roadnet::RoadGraph& graph) const {
    if (slots.empty()) throw EmptyResult("observation sequence '" + trajectory_id + "' is empty");
    for (std::size_t n = 0; n < slots.size(); ++n) {
        if (slots[n].channel == nullptr)
            throw MatrixMissing("observation sequence '" + trajectory_id + "': slot " +
                                std::to_string(n) + " has no channel");
        graph.pos(slots[n].reported);
        if (n > 0 && !(slots[n].timestamp > slots[n - 1].timestamp))
            throw ConfigError("observation sequence '" + trajectory_id +
                              "': timestamps must strictly increase");
    }
}

std::size_t PosteriorSequence::fallback_count() const {
    std::size_t n = 0;
    for (const SlotPosterior& s : slots) n += s.fallback ? 1 : 0;
    return n;
}

PosteriorSequence phase1_posteriors(const ObservationSequence& obs,
                                    const roadnet::RoadGraph& graph,
                                    const std::vector<double>& prior,
                                    const Phase1Options& options) {
    obs.validate(graph);
    check_prior(prior, graph);
    if (!(options.xi >= 0.0)) throw ConfigError("phase1: xi must be >= 0");
    if (!(options.s_limit_kmh > 0.0)) throw ConfigError("phase1: s_limit must be > 0");

    // Channels repeat across slots; index each distinct matrix once.
    std::map<const mech::ObfuscationMatrix*, ChannelIndex> channels;
    for (const Observation& o : obs.slots) channels.try_emplace(o.channel, *o.channel, graph);

    PosteriorSequence result;
    result.slots.resize(obs.size());
    std::vector<roadnet::NodeId> prev_possible;

    for (std::size_t n = 0; n < obs.size(); ++n) {
        const Observation& o = obs.slots[n];
        const ChannelIndex& channel = channels.at(o.channel);
        SlotPosterior& slot = result.slots[n];

        if (n == 0) {
            // Bootstrap: no previous possible set exists, so the candidate
            // set is a ball around the first report wide enough to contain
            // every location the channel could have mapped onto it.
            double radius = options.first_slot_radius_km;
            if (!(radius > 0.0)) radius = column_span_km(channel, o.reported) + 1e-9;
            slot.reachable = radius_ball(graph, o.reported, radius);
        } else {
            const double dt = o.timestamp - obs.slots[n - 1].timestamp;
            const std::size_t bucket =
                graph.schedule().bucket_at(seconds_of_day(obs.slots[n - 1].timestamp));
            std::vector<char> member(graph.size(), 0);
            for (roadnet::NodeId v : prev_possible) {
                roadnet::ReachableSet r =
                    roadnet::reachable_set(graph, v, dt, options.s_limit_kmh, bucket);
                for (roadnet::NodeId m : r.members) member[static_cast<std::size_t>(m)] = 1;
            }
            for (roadnet::NodeId v = 0; v < static_cast<roadnet::NodeId>(graph.size()); ++v)
                if (member[static_cast<std::size_t>(v)]) slot.reachable.push_back(v);
            if (slot.reachable.empty()) {
                // Disconnected previous set; restart from the speed ball
                // around the current report.
                slot.reachable =
                    roadnet::prune_by_speed(graph, o.reported, dt, options.s_limit_kmh);
                slot.fallback = true;
            }
        }

        // Bayes update against the channel column of the reported node.
        const std::size_t col = channel.position(o.reported);
        slot.raw.assign(slot.reachable.size(), 0.0);
        double mass = 0.0;
        if (col != kNoPosition) {
            for (std::size_t k = 0; k < slot.reachable.size(); ++k) {
                slot.raw[k] = prior[static_cast<std::size_t>(slot.reachable[k])] *
                              channel.likelihood(slot.reachable[k], col);
                mass += slot.raw[k];
            }
        }

        bool zero_mass = !(mass > 0.0);
        if (zero_mass) {
            if (options.throw_on_degenerate)
                throw DegenerateSlot("phase1: slot " + std::to_string(n) +
                                     " has zero posterior mass over the reachable set");
            // The likelihood carries no information; fall back to the prior
            // restricted to the reachable set and keep only its best member.
            slot.raw = restricted_prior(slot.reachable, prior);
            slot.possible.push_back(slot.reachable[argmax_index(slot.raw)]);
            slot.fallback = true;
        } else {
            for (double& v : slot.raw) v /= mass;
            for (std::size_t k = 0; k < slot.reachable.size(); ++k)
                if (slot.raw[k] > 0.0 && slot.raw[k] >= options.xi)
                    slot.possible.push_back(slot.reachable[k]);
        }

        if (slot.possible.empty()) {
            // Threshold swallowed everything; keep the single best member
            // so the chain stays alive.
            if (options.throw_on_degenerate)
                throw DegenerateSlot("phase1: slot " + std::to_string(n) +
                                     " has an empty possible set at xi = " +
                                     std::to_string(options.xi));
            slot.possible.push_back(slot.reachable[argmax_index(slot.raw)]);
            slot.fallback = true;
        }

        slot.renormalized.reserve(slot.possible.size());
        double kept = 0.0;
        for (roadnet::NodeId v : slot.possible) {
            const auto it = std::lower_bound(slot.reachable.begin(), slot.reachable.end(), v);
            kept += slot.raw[static_cast<std::size_t>(it - slot.reachable.begin())];
        }
        for (roadnet::NodeId v : slot.possible) {
            const auto it = std::lower_bound(slot.reachable.begin(), slot.reachable.end(), v);
            slot.renormalized.push_back(
                slot.raw[static_cast<std::size_t>(it - slot.reachable.begin())] / kept);
        }

        prev_possible = slot.possible;
    }
    return result;
}

std::vector<roadnet::NodeId> phase1_argmax(const PosteriorSequence& posteriors) {
    std::vector<roadnet::NodeId> estimates;
    estimates.reserve(posteriors.size());
    for (const SlotPosterior& slot : posteriors.slots) {
        if (slot.possible.empty())
            throw EmptyResult("phase1_argmax: slot has an empty possible set");
        // `possible` is sorted ascending and the comparison is strict, so
        // ties resolve to the smaller node id.
        estimates.push_back(slot.possible[argmax_index(slot.renormalized)]);
    }
    return estimates;
}

double eie_km(const std::vector<roadnet::NodeId>& estimates,
              const std::vector<roadnet::NodeId>& truth, const roadnet::RoadGraph& graph) {
    if (estimates.size() != truth.size())
        throw LengthMismatch("eie: estimate and truth lengths differ");
    if (estimates.empty()) throw EmptyResult("eie: no slots to average");
    double total = 0.0;
    for (std::size_t n = 0; n < estimates.size(); ++n)
        total += roadnet::haversine_km(graph.pos(estimates[n]), graph.pos(truth[n]));
    return total / static_cast<double>(estimates.size());
}

InferenceResult score_estimates(std::vector<roadnet::NodeId> estimates,
                                const std::vector<roadnet::NodeId>& truth,
                                const roadnet::RoadGraph& graph) {
    InferenceResult r;
    r.estimates = std::move(estimates);
    if (r.estimates.size() != truth.size())
        throw LengthMismatch("score_estimates: estimate and truth lengths differ");
    r.error_km.reserve(r.estimates.size());
    double total = 0.0;
    for (std::size_t n = 0; n < r.estimates.size(); ++n) {
        r.error_km.push_back(roadnet::haversine_km(graph.pos(r.estimates[n]), graph.pos(truth[n])));
        total += r.error_km.back();
    }
    r.mean_error_km =
        r.estimates.empty() ? 0.0 : total / static_cast<double>(r.estimates.size());
    return r;
}

double elimination_ratio(const PosteriorSequence& posteriors,
                         const std::vector<std::size_t>& ball_sizes) {
    if (posteriors.size() != ball_sizes.size())
        throw LengthMismatch("elimination_ratio: slot and ball counts differ");
    if (posteriors.size() == 0) throw EmptyResult("elimination_ratio: no slots");
    double total = 0.0;
    for (std::size_t n = 0; n < posteriors.size(); ++n) {
        if (ball_sizes[n] == 0)
            throw ConfigError("elimination_ratio: empty ball (balls contain their center)");
        const double kept = static_cast<double>(posteriors.slots[n].possible.size()) /
                            static_cast<double>(ball_sizes[n]);
        total += std::max(0.0, 1.0 - kept);
    }
    return total / static_cast<double>(posteriors.size());
}

std::vector<std::size_t> observation_ball_sizes(const roadnet::RoadGraph& graph,
                                                const ObservationSequence& obs,
                                                double radius_km) {
    if (!(radius_km > 0.0)) throw ConfigError("observation_ball_sizes: radius must be > 0");
    std::vector<std::size_t> sizes;
    sizes.reserve(obs.size());
    for (const Observation& o : obs.slots)
        sizes.push_back(roadnet::prune_by_speed(graph, o.reported, 3600.0, radius_km).size());
    return sizes;
}

// ---------------------------------------------------------------------------
// Training-sample generation
// ---------------------------------------------------------------------------

TrainingDataset generate_training_samples(const std::vector<Trajectory>& trajectories,
                                          const mech::ObfuscationMatrix& mechanism,
                                          const roadnet::RoadGraph& graph,
                                          const std::vector<double>& prior,
                                          std::uint64_t master_seed,
                                          const SampleOptions& options) {
    if (trajectories.empty()) throw EmptyCorpus("generate_training_samples: no trajectories");
    if (options.samples_per_trajectory == 0)
        throw ConfigError("generate_training_samples: samples_per_trajectory must be > 0");
    mechanism.validate();
    const ChannelIndex channel(mechanism, graph);

    Phase1Options phase1 = options.phase1;
    phase1.throw_on_degenerate = true;

    TrainingDataset dataset;
    for (std::size_t ti = 0; ti < trajectories.size(); ++ti) {
        const Trajectory& traj = trajectories[ti];
        traj.validate(graph);
        std::vector<std::size_t> rows(traj.size());
        for (std::size_t n = 0; n < traj.size(); ++n) {
            rows[n] = channel.position(traj.points[n].node);
            if (rows[n] == kNoPosition)
                throw UnknownNode("generate_training_samples: trajectory '" + traj.id +
                                  "' visits a node outside the mechanism support");
        }

        for (std::size_t s = 0; s < options.samples_per_trajectory; ++s) {
            const std::uint64_t seed = derive_seed(master_seed, ti, s);
            Rng rng(seed);

            TrainingSample sample;
            sample.trajectory_id = traj.id;
            sample.seed = seed;
            ObservationSequence obs;
            obs.trajectory_id = traj.id;
            for (std::size_t n = 0; n < traj.size(); ++n) {
                const std::size_t col = mech::sample_obfuscated(mechanism, rows[n], rng);
                const roadnet::NodeId reported = graph.index_of(mechanism.support.ids[col]);
                sample.reported.push_back(reported);
                sample.truth.push_back(traj.points[n].node);
                obs.slots.push_back({traj.points[n].timestamp, reported, &mechanism});
            }

            try {
                sample.posteriors = phase1_posteriors(obs, graph, prior, phase1);
            } catch (const DegenerateSlot&) {
                dataset.dropped += 1;
                continue;
            }
            dataset.samples.push_back(std::move(sample));
        }
    }
    return dataset;
}

void save_dataset(const TrainingDataset& dataset, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write dataset file '" + path + "'");
    for (const TrainingSample& s : dataset.samples) {
        nlohmann::json slots = nlohmann::json::array();
        for (const SlotPosterior& slot : s.posteriors.slots) {
            slots.push_back({{"support", slot.possible},
                             {"posterior", slot.renormalized},
                             {"fallback", slot.fallback}});
        }
        nlohmann::json record = {{"trajectory", s.trajectory_id},
                                 {"seed", s.seed},
                                 {"reported", s.reported},
                                 {"truth", s.truth},
                                 {"slots", std::move(slots)}};
        out << record.dump() << '\n';
    }
    if (!out) throw IoError("failed writing dataset file '" + path + "'");
}

TrainingDataset load_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read dataset file '" + path + "'");
    TrainingDataset dataset;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json record;
        try {
            record = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw MalformedRow(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
        try {
            TrainingSample s;
            s.trajectory_id = record.at("trajectory").get<std::string>();
            s.seed = record.at("seed").get<std::uint64_t>();
            s.reported = record.at("reported").get<std::vector<roadnet::NodeId>>();
            s.truth = record.at("truth").get<std::vector<roadnet::NodeId>>();
            for (const nlohmann::json& j : record.at("slots")) {
                SlotPosterior slot;
                slot.possible = j.at("support").get<std::vector<roadnet::NodeId>>();
                slot.renormalized = j.at("posterior").get<std::vector<double>>();
                slot.fallback = j.at("fallback").get<bool>();
                // The file keeps the thresholded sets only; mirror them into
                // the pre-threshold fields.
                slot.reachable = slot.possible;
                slot.raw = slot.renormalized;
                if (slot.possible.size() != slot.renormalized.size())
                    throw LengthMismatch("support/posterior arrays differ in length");
                s.posteriors.slots.push_back(std::move(slot));
            }
            if (s.reported.size() != s.truth.size() ||
                s.reported.size() != s.posteriors.slots.size())
                throw LengthMismatch("slot-aligned arrays differ in length");
            dataset.samples.push_back(std::move(s));
        } catch (const nlohmann::json::exception& e) {
            throw MalformedRow(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return dataset;
}

// ---------------------------------------------------------------------------
// Phase 2: sequence refinement model
// ---------------------------------------------------------------------------

namespace {

void check_support(const std::vector<roadnet::NodeId>& support) {
    if (support.empty()) throw EmptySupport("phase2: support is empty");
    for (std::size_t k = 1; k < support.size(); ++k)
        if (!(support[k] > support[k - 1]))
            throw ConfigError("phase2: support must be strictly ascending");
}

std::unordered_map<roadnet::NodeId, std::size_t> support_index(
    const std::vector<roadnet::NodeId>& support) {
    std::unordered_map<roadnet::NodeId, std::size_t> index;
    index.reserve(support.size());
    for (std::size_t k = 0; k < support.size(); ++k) index.emplace(support[k], k);
    return index;
}

}  // namespace

nn::Tensor embed_posteriors(const PosteriorSequence& posteriors,
                            const std::vector<roadnet::NodeId>& support, std::size_t n_rows) {
    check_support(support);
    if (posteriors.size() > n_rows)
        throw ShapeMismatch("embed_posteriors: sequence longer than the padded length");
    const auto index = support_index(support);
    nn::Tensor out = nn::Tensor::zeros({n_rows, support.size()});
    for (std::size_t n = 0; n < posteriors.size(); ++n) {
        const SlotPosterior& slot = posteriors.slots[n];
        for (std::size_t k = 0; k < slot.possible.size(); ++k) {
            const auto it = index.find(slot.possible[k]);
            if (it == index.end())
                throw UnknownNode("embed_posteriors: node " +
                                  std::to_string(slot.possible[k]) +
                                  " is outside the model support");
            out.at(n, it->second) = slot.renormalized[k];
        }
    }
    return out;
}

struct Phase2Model::Impl {
    std::vector<roadnet::NodeId> support;
    std::unordered_map<roadnet::NodeId, std::size_t> index;
    std::size_t max_length = 0;
    Phase2Config config;
    nn::ParameterStore store;
    std::unique_ptr<nn::LstmStack> stack;
    std::unique_ptr<nn::Linear> head;

    Impl(std::vector<roadnet::NodeId> support_in, std::size_t max_length_in,
         const Phase2Config& config_in)
        : support(std::move(support_in)),
          max_length(max_length_in),
          config(config_in),
          store(config_in.adam) {
        check_support(support);
        index = support_index(support);
        if (max_length == 0) throw ConfigError("phase2: padded length must be > 0");
        if (config.hidden_dim == 0 || config.layers == 0)
            throw ConfigError("phase2: hidden_dim and layers must be > 0");
        Rng rng(config.seed);
        nn::LstmConfig lstm{support.size(), config.hidden_dim, config.layers,
                            config.bidirectional};
        stack = std::make_unique<nn::LstmStack>(lstm, store, "phase2.lstm", rng);
        head = std::make_unique<nn::Linear>(stack->output_dim(), support.size(), store,
                                            "phase2.head", rng);
    }
};

Phase2Model::Phase2Model(std::vector<roadnet::NodeId> support, std::size_t max_length,
                         const Phase2Config& config)
    : impl_(std::make_unique<Impl>(std::move(support), max_length, config)) {}

Phase2Model::Phase2Model(Phase2Model&&) noexcept = default;
Phase2Model& Phase2Model::operator=(Phase2Model&&) noexcept = default;
Phase2Model::~Phase2Model() = default;

const std::vector<roadnet::NodeId>& Phase2Model::support() const { return impl_->support; }
std::size_t Phase2Model::max_length() const { return impl_->max_length; }
const Phase2Config& Phase2Model::config() const { return impl_->config; }
nn::ParameterStore& Phase2Model::store() { return impl_->store; }
const nn::ParameterStore& Phase2Model::store() const { return impl_->store; }

nn::Tensor Phase2Model::forward(const nn::Tensor& input) const {
    if (!input.is_matrix() || input.rows() != impl_->max_length ||
        input.cols() != impl_->support.size())
        throw ShapeMismatch("phase2: input must be [padded length x support size]");
    return impl_->head->forward(impl_->stack->forward(input));
}

double Phase2Model::train_step(const nn::Tensor& input, const nn::Tensor& target) {
    const nn::Tensor logits = forward(input);
    nn::CrossEntropyResult ce = nn::cross_entropy_from_logits(logits, target);
    impl_->store.zero_grad();
    impl_->stack->backward(impl_->head->backward(ce.grad_logits), false);
    impl_->store.step();
    return ce.loss;
}

Phase2Model phase2_train(const TrainingDataset& dataset,
                         std::vector<roadnet::NodeId> support, const Phase2Config& config,
                         Phase2TrainLog* log) {
    if (dataset.samples.empty()) throw EmptyCorpus("phase2_train: dataset is empty");
    std::size_t max_length = 0;
    std::size_t total_slots = 0;
    for (const TrainingSample& s : dataset.samples) {
        if (s.posteriors.size() == 0 || s.truth.size() != s.posteriors.size())
            throw LengthMismatch("phase2_train: sample '" + s.trajectory_id +
                                 "' has misaligned slots");
        max_length = std::max(max_length, s.posteriors.size());
        total_slots += s.posteriors.size();
    }

    Phase2Model model(std::move(support), max_length, config);
    const std::vector<roadnet::NodeId>& layout = model.support();
    const auto index = support_index(layout);

    // Inputs embedded once up front; targets are one-hot truth rows with
    // padding rows left all-zero so the loss masks them.
    std::vector<nn::Tensor> inputs, targets;
    inputs.reserve(dataset.samples.size());
    targets.reserve(dataset.samples.size());
    for (const TrainingSample& s : dataset.samples) {
        inputs.push_back(embed_posteriors(s.posteriors, layout, max_length));
        nn::Tensor target = nn::Tensor::zeros({max_length, layout.size()});
        for (std::size_t n = 0; n < s.truth.size(); ++n) {
            const auto it = index.find(s.truth[n]);
            if (it == index.end())
                throw UnknownNode("phase2_train: truth node " + std::to_string(s.truth[n]) +
                                  " is outside the model support");
            target.at(n, it->second) = 1.0;
        }
        targets.push_back(std::move(target));
    }

    // Last-good parameter snapshot, refreshed after each completed epoch.
    const std::vector<std::string> names = model.store().names();
    auto snapshot = [&] {
        std::vector<std::vector<double>> copy;
        copy.reserve(names.size());
        for (const std::string& name : names) copy.push_back(model.store().param(name).data);
        return copy;
    };
    auto restore = [&](const std::vector<std::vector<double>>& copy) {
        for (std::size_t k = 0; k < names.size(); ++k)
            model.store().param(names[k]).data = copy[k];
        model.store().zero_grad();
    };
    std::vector<std::vector<double>> last_good = snapshot();

    Rng order_rng(derive_seed(config.seed, 0x0bf5));
    std::vector<std::size_t> order(dataset.samples.size());
    for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        shuffle(order, order_rng);
        double epoch_loss = 0.0;
        try {
            for (std::size_t k : order) epoch_loss += model.train_step(inputs[k], targets[k]);
        } catch (const NonFinite&) {
            restore(last_good);
            if (log != nullptr) {
                log->aborted = true;
                log->abort_epoch = epoch;
            }
            return model;
        }
        const double mean_loss = epoch_loss / static_cast<double>(total_slots);
        if (log != nullptr) log->epoch_loss.push_back(mean_loss);
        last_good = snapshot();
        if (config.target_loss > 0.0 && mean_loss < config.target_loss) break;
    }
    return model;
}

InferenceResult phase2_infer(const Phase2Model& model, const PosteriorSequence& posteriors) {
    if (posteriors.size() == 0) throw EmptyResult("phase2_infer: no slots");
    if (posteriors.size() > model.max_length())
        throw ShapeMismatch("phase2_infer: sequence longer than the model's padded length");
    const nn::Tensor input = embed_posteriors(posteriors, model.support(), model.max_length());
    const nn::Tensor scores = nn::sigmoid(model.forward(input));

    InferenceResult result;
    result.estimates.reserve(posteriors.size());
    for (std::size_t n = 0; n < posteriors.size(); ++n) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < scores.cols(); ++c)
            if (scores.at(n, c) > scores.at(n, best)) best = c;
        result.estimates.push_back(model.support()[best]);
    }
    return result;
}

void save_phase2(const Phase2Model& model, const std::string& prefix) {
    nlohmann::json meta = {{"support", model.support()},
                           {"max_length", model.max_length()},
                           {"hidden_dim", model.config().hidden_dim},
                           {"layers", model.config().layers},
                           {"bidirectional", model.config().bidirectional},
                           {"seed", model.config().seed},
                           {"learning_rate", model.config().adam.learning_rate}};
    std::ofstream out(prefix + ".json", std::ios::binary);
    if (!out) throw IoError("cannot write model sidecar '" + prefix + ".json'");
    out << meta.dump(2) << '\n';
    if (!out) throw IoError("failed writing model sidecar '" + prefix + ".json'");
    nn::save_checkpoint(model.store(), prefix + ".bin");
}

Phase2Model load_phase2(const std::string& prefix) {
    std::ifstream in(prefix + ".json", std::ios::binary);
    if (!in) throw IoError("cannot read model sidecar '" + prefix + ".json'");
    nlohmann::json meta;
    try {
        in >> meta;
        Phase2Config config;
        config.hidden_dim = meta.at("hidden_dim").get<std::size_t>();
        config.layers = meta.at("layers").get<std::size_t>();
        config.bidirectional = meta.at("bidirectional").get<bool>();
        config.seed = meta.at("seed").get<std::uint64_t>();
        config.adam.learning_rate = meta.at("learning_rate").get<double>();
        Phase2Model model(meta.at("support").get<std::vector<roadnet::NodeId>>(),
                          meta.at("max_length").get<std::size_t>(), config);
        nn::load_checkpoint(model.store(), prefix + ".bin");
        return model;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("model sidecar '" + prefix + ".json': " + e.what());
    }
}

}  // namespace locpriv::vt
