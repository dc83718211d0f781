#include "locpriv/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <unordered_map>
#include <utility>

#include <json.hpp>

#include "locpriv/csv.hpp"
#include "locpriv/rng.hpp"

namespace locpriv::hn {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr int kConfigVersion = 1;

// Seed-stream tags, one per stochastic stage.
constexpr std::uint64_t kTagWalk = 0x77616c6b;     // scenario random walks
constexpr std::uint64_t kTagObs = 0x6f627366;      // per-trajectory report draws
constexpr std::uint64_t kTagSamples = 0x736d706c;  // phase-2 training samples
constexpr std::uint64_t kTagPhase2 = 0x70327472;   // phase-2 model init/shuffle
constexpr std::uint64_t kTagEmbed = 0x656d6264;    // node2vec + gcn embeddings
constexpr std::uint64_t kTagScorer = 0x73636f72;   // scorer init/shuffle

// Speed bound the attack-side filter assumes; matches the Phase-1 default.
constexpr double kSpeedLimitKmh = 120.0;

double degrees_per_km() {
    return 180.0 / (3.141592653589793238462643383279502884 * roadnet::kEarthRadiusKm);
}

// ---------------------------------------------------------------------------
// Ingestion helpers
// ---------------------------------------------------------------------------

struct Fix {
    double t = 0.0;
    roadnet::NodeId node = roadnet::kNoNode;
};

bool looks_numeric(std::string_view s) {
    double v = 0.0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    return res.ec == std::errc() && res.ptr == s.data() + s.size();
}

}  // namespace

std::vector<vt::Trajectory> ingest_trajectories(const std::string& csv_path,
                                                const roadnet::RoadGraph& graph,
                                                double target_gap_s, IngestStats* stats) {
    if (graph.empty()) throw EmptyGraph("ingest_trajectories: graph has no nodes");
    if (!(target_gap_s > 0.0) || !std::isfinite(target_gap_s))
        throw ConfigError("ingest_trajectories: target gap must be positive");

    IngestStats local;
    const auto lines = csv::read_lines(csv_path);

    // Vehicles keep their first-appearance order so the output is stable.
    std::vector<std::string> vehicle_order;
    std::unordered_map<std::string, std::vector<Fix>> fixes;

    bool first_line = true;
    for (const auto& line : lines) {
        const auto fields = csv::split(line);
        if (first_line) {
            first_line = false;
            // A header row is recognized by its non-numeric timestamp field.
            if (fields.size() >= 2 && !looks_numeric(fields[1])) continue;
        }
        ++local.rows;
        if (fields.size() != 4 || fields[0].empty()) {
            ++local.malformed;
            continue;
        }
        double t = 0.0, lat = 0.0, lon = 0.0;
        try {
            t = csv::parse_double(fields[1], "fix");
            lat = csv::parse_double(fields[2], "fix");
            lon = csv::parse_double(fields[3], "fix");
        } catch (const MalformedRow&) {
            ++local.malformed;
            continue;
        }
        const roadnet::GeoPoint p{lat, lon};
        if (!std::isfinite(t) || !roadnet::is_valid(p)) {
            ++local.malformed;
            continue;
        }
        std::string vehicle(fields[0]);
        auto [it, inserted] = fixes.try_emplace(std::move(vehicle));
        if (inserted) vehicle_order.push_back(it->first);
        it->second.push_back(Fix{t, roadnet::snap_to_node(graph, p)});
    }

    std::vector<vt::Trajectory> out;
    for (const auto& vehicle : vehicle_order) {
        auto& raw = fixes[vehicle];
        // Stable sort keeps file order among equal timestamps, so the
        // duplicate rule below always keeps the first-seen fix.
        std::stable_sort(raw.begin(), raw.end(),
                         [](const Fix& a, const Fix& b) { return a.t < b.t; });
        std::vector<Fix> deduped;
        for (const auto& f : raw) {
            if (!deduped.empty() && f.t == deduped.back().t) {
                ++local.duplicates;
                continue;
            }
            deduped.push_back(f);
        }

        // Cut at gaps above 5x the target, then resample each segment onto a
        // slot grid anchored at its first fix: slot round((t - t0)/gap), the
        // fix nearest the slot center wins (earlier fix on ties).
        std::size_t part = 0;
        std::size_t begin = 0;
        while (begin < deduped.size()) {
            std::size_t end = begin + 1;
            while (end < deduped.size() &&
                   deduped[end].t - deduped[end - 1].t <= 5.0 * target_gap_s)
                ++end;
            if (end < deduped.size()) ++local.splits;

            ++part;
            vt::Trajectory traj;
            traj.id = part == 1 ? vehicle : vehicle + "#" + std::to_string(part);

            const double t0 = deduped[begin].t;
            long long slot = 0;
            Fix best{};
            bool have = false;
            auto flush = [&] {
                if (have)
                    traj.points.push_back(
                        {t0 + static_cast<double>(slot) * target_gap_s, best.node});
            };
            for (std::size_t k = begin; k < end; ++k) {
                const Fix& f = deduped[k];
                const long long s = std::llround((f.t - t0) / target_gap_s);
                if (!have || s != slot) {
                    flush();
                    slot = s;
                    best = f;
                    have = true;
                    continue;
                }
                ++local.merged;
                const double center = t0 + static_cast<double>(slot) * target_gap_s;
                if (std::abs(f.t - center) < std::abs(best.t - center)) best = f;
            }
            flush();
            out.push_back(std::move(traj));
            begin = end;
        }
    }

    if (stats) *stats = local;
    if (out.empty())
        throw EmptyAfterFilter("ingest_trajectories: no usable fix in " + csv_path + " (" +
                               std::to_string(local.malformed) + " malformed rows)");
    return out;
}

void save_trajectories(const std::vector<vt::Trajectory>& trajectories,
                       const std::string& path) {
    std::ostringstream out;
    for (const auto& traj : trajectories) {
        json rec;
        rec["id"] = traj.id;
        json t = json::array(), node = json::array();
        for (const auto& p : traj.points) {
            t.push_back(p.timestamp);
            node.push_back(p.node);
        }
        rec["t"] = std::move(t);
        rec["node"] = std::move(node);
        out << rec.dump() << '\n';
    }
    csv::write_text(path, out.str());
}

std::vector<vt::Trajectory> load_trajectories(const std::string& path) {
    std::vector<vt::Trajectory> out;
    for (const auto& line : csv::read_lines(path)) {
        try {
            const json rec = json::parse(line);
            vt::Trajectory traj;
            traj.id = rec.at("id").get<std::string>();
            const auto& t = rec.at("t");
            const auto& node = rec.at("node");
            if (t.size() != node.size())
                throw MalformedRow("trajectory record: t/node length mismatch");
            for (std::size_t k = 0; k < t.size(); ++k)
                traj.points.push_back({t[k].get<double>(), node[k].get<roadnet::NodeId>()});
            out.push_back(std::move(traj));
        } catch (const json::exception& e) {
            throw MalformedRow(std::string("trajectory record: ") + e.what());
        }
    }
    if (out.empty()) throw EmptyAfterFilter("load_trajectories: no records in " + path);
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic scenario
// ---------------------------------------------------------------------------

namespace {

roadnet::RoadGraph make_grid(std::size_t w, std::size_t h, double cell_km) {
    const double step_deg = cell_km * degrees_per_km();
    const double weight_s = cell_km * (3600.0 / 50.0);  // 50 km/h cruise speed
    std::vector<roadnet::NodeSpec> nodes;
    std::vector<roadnet::EdgeSpec> edges;
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            const auto id = static_cast<std::int64_t>(y * w + x);
            nodes.push_back({id, {static_cast<double>(y) * step_deg,
                                  static_cast<double>(x) * step_deg}});
            if (x + 1 < w) edges.push_back({id, id + 1, weight_s, 0});
            if (x > 0) edges.push_back({id, id - 1, weight_s, 0});
            if (y + 1 < h)
                edges.push_back({id, id + static_cast<std::int64_t>(w), weight_s, 0});
            if (y > 0) edges.push_back({id, id - static_cast<std::int64_t>(w), weight_s, 0});
        }
    }
    return roadnet::build_graph(nodes, edges);
}

std::vector<vt::Trajectory> walk_trajectories(const roadnet::RoadGraph& graph,
                                              std::size_t n_traj, std::size_t len,
                                              std::uint64_t seed) {
    std::vector<vt::Trajectory> out;
    out.reserve(n_traj);
    for (std::size_t k = 0; k < n_traj; ++k) {
        Rng rng(derive_seed(seed, kTagWalk, k));
        vt::Trajectory traj;
        traj.id = "veh" + std::to_string(k);
        roadnet::NodeId cur = static_cast<roadnet::NodeId>(rng.index(graph.size()));
        roadnet::NodeId prev = roadnet::kNoNode;
        double t = 0.0;
        traj.points.push_back({t, cur});
        while (traj.points.size() < len) {
            std::vector<roadnet::NodeId> nbr;
            std::vector<double> weight, travel;
            graph.for_each_arc(cur, 0, [&](roadnet::NodeId to, double w) {
                nbr.push_back(to);
                // Momentum: an immediate U-turn is possible but discouraged.
                weight.push_back(to == prev ? 0.25 : 1.0);
                travel.push_back(w);
            });
            if (nbr.empty()) {
                t += 20.0;  // dead end: the vehicle idles in place
                traj.points.push_back({t, cur});
                continue;
            }
            const std::size_t pick = rng.categorical(weight);
            prev = cur;
            cur = nbr[pick];
            t += travel[pick];
            traj.points.push_back({t, cur});
        }
        out.push_back(std::move(traj));
    }
    return out;
}

}  // namespace

SynthScenario synth_scenario(std::size_t grid_w, std::size_t grid_h, double cell_km,
                             std::size_t n_traj, std::size_t len, std::uint64_t seed) {
    if (grid_w == 0 || grid_h == 0)
        throw ConfigError("synth_scenario: grid dimensions must be at least 1");
    if (!(cell_km > 0.0) || !std::isfinite(cell_km))
        throw ConfigError("synth_scenario: cell size must be positive");
    if (len == 0) throw ConfigError("synth_scenario: trajectory length must be at least 1");
    SynthScenario scenario;
    scenario.graph = make_grid(grid_w, grid_h, cell_km);
    scenario.trajectories = walk_trajectories(scenario.graph, n_traj, len, seed);
    return scenario;
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

namespace {

const std::set<std::string>& known_mechanisms() {
    static const std::set<std::string> s = {"laplace", "lp"};
    return s;
}

const std::set<std::string>& known_attacks() {
    static const std::set<std::string> s = {"bayes", "viterbi", "vehitrack", "vehitrack-i"};
    return s;
}

void require_positive(double v, const char* what) {
    if (!(v > 0.0) || !std::isfinite(v))
        throw ConfigError(std::string("config: ") + what + " must be positive");
}

}  // namespace

void ExperimentConfig::validate() const {
    if (nodes_csv.empty() != edges_csv.empty())
        throw ConfigError("config: nodes_csv and edges_csv must be set together");
    for (const auto* path : {&nodes_csv, &edges_csv, &trajectories_jsonl})
        if (!path->empty() && !fs::exists(*path))
            throw ConfigError("config: referenced file does not exist: " + *path);
    if (nodes_csv.empty()) {
        if (grid_w == 0 || grid_h == 0)
            throw ConfigError("config: grid dimensions must be at least 1");
        require_positive(cell_km, "cell_km");
    }
    if (trajectories_jsonl.empty()) {
        if (n_trajectories == 0 || trajectory_len == 0)
            throw ConfigError("config: trajectory count and length must be at least 1");
    }
    if (mechanisms.empty()) throw ConfigError("config: mechanism list is empty");
    for (const auto& m : mechanisms)
        if (!known_mechanisms().count(m))
            throw ConfigError("config: unknown mechanism '" + m + "'");
    if (epsilons.empty()) throw ConfigError("config: epsilon grid is empty");
    for (double e : epsilons) require_positive(e, "every epsilon");
    require_positive(gamma_km, "gamma_km");
    for (const auto& a : attacks)
        if (!known_attacks().count(a)) throw ConfigError("config: unknown attack '" + a + "'");
    if (defense) {
        if (defense_k.empty() || defense_alpha.empty())
            throw ConfigError("config: defense is on but the K/alpha grids are empty");
        for (std::size_t k : defense_k)
            if (k == 0) throw ConfigError("config: defense K must be at least 1");
        for (double a : defense_alpha)
            if (!(a >= 0.0) || !std::isfinite(a))
                throw ConfigError("config: defense alpha must be finite and non-negative");
        if (embed_dim < 4 || embed_dim % 4 != 0)
            throw ConfigError("config: embed_dim must be a positive multiple of 4");
        if (scorer_epochs == 0) throw ConfigError("config: scorer_epochs must be at least 1");
    }
    if (seeds.empty()) throw ConfigError("config: seed list is empty");
    if (samples_per_trajectory == 0)
        throw ConfigError("config: samples_per_trajectory must be at least 1");
    if (phase2_epochs == 0 || phase2_hidden == 0 || phase2_layers == 0)
        throw ConfigError("config: phase-2 training knobs must be at least 1");
    if (output_dir.empty()) throw ConfigError("config: output_dir is empty");
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open file: " + path);
    std::ostringstream raw;
    raw << in.rdbuf();

    json j;
    try {
        j = json::parse(raw.str());
    } catch (const json::exception& e) {
        throw ConfigError("config: " + path + " is not valid JSON: " + e.what());
    }
    if (!j.is_object()) throw ConfigError("config: top level must be a JSON object");
    if (!j.contains("version")) throw ConfigError("config: missing 'version' field");

    ExperimentConfig c;
    try {
        for (const auto& [key, value] : j.items()) {
            if (key == "version") {
                if (value.get<int>() != kConfigVersion)
                    throw ConfigError("config: unsupported version " + value.dump());
            } else if (key == "grid_w") {
                c.grid_w = value.get<std::size_t>();
            } else if (key == "grid_h") {
                c.grid_h = value.get<std::size_t>();
            } else if (key == "cell_km") {
                c.cell_km = value.get<double>();
            } else if (key == "n_trajectories") {
                c.n_trajectories = value.get<std::size_t>();
            } else if (key == "trajectory_len") {
                c.trajectory_len = value.get<std::size_t>();
            } else if (key == "scenario_seed") {
                c.scenario_seed = value.get<std::uint64_t>();
            } else if (key == "nodes_csv") {
                c.nodes_csv = value.get<std::string>();
            } else if (key == "edges_csv") {
                c.edges_csv = value.get<std::string>();
            } else if (key == "trajectories_jsonl") {
                c.trajectories_jsonl = value.get<std::string>();
            } else if (key == "mechanisms") {
                c.mechanisms = value.get<std::vector<std::string>>();
            } else if (key == "epsilons") {
                c.epsilons = value.get<std::vector<double>>();
            } else if (key == "gamma_km") {
                c.gamma_km = value.get<double>();
            } else if (key == "attacks") {
                c.attacks = value.get<std::vector<std::string>>();
            } else if (key == "defense") {
                c.defense = value.get<bool>();
            } else if (key == "defense_k") {
                c.defense_k = value.get<std::vector<std::size_t>>();
            } else if (key == "defense_alpha") {
                c.defense_alpha = value.get<std::vector<double>>();
            } else if (key == "seeds") {
                c.seeds = value.get<std::vector<std::uint64_t>>();
            } else if (key == "samples_per_trajectory") {
                c.samples_per_trajectory = value.get<std::size_t>();
            } else if (key == "phase2_epochs") {
                c.phase2_epochs = value.get<std::size_t>();
            } else if (key == "phase2_hidden") {
                c.phase2_hidden = value.get<std::size_t>();
            } else if (key == "phase2_layers") {
                c.phase2_layers = value.get<std::size_t>();
            } else if (key == "embed_dim") {
                c.embed_dim = value.get<std::size_t>();
            } else if (key == "scorer_epochs") {
                c.scorer_epochs = value.get<std::size_t>();
            } else if (key == "output_dir") {
                c.output_dir = value.get<std::string>();
            } else {
                throw ConfigError("config: unknown key '" + key + "'");
            }
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: bad field type: ") + e.what());
    }
    c.validate();
    return c;
}

void save_config(const ExperimentConfig& c, const std::string& path) {
    json j;
    j["version"] = kConfigVersion;
    j["grid_w"] = c.grid_w;
    j["grid_h"] = c.grid_h;
    j["cell_km"] = c.cell_km;
    j["n_trajectories"] = c.n_trajectories;
    j["trajectory_len"] = c.trajectory_len;
    j["scenario_seed"] = c.scenario_seed;
    j["nodes_csv"] = c.nodes_csv;
    j["edges_csv"] = c.edges_csv;
    j["trajectories_jsonl"] = c.trajectories_jsonl;
    j["mechanisms"] = c.mechanisms;
    j["epsilons"] = c.epsilons;
    j["gamma_km"] = c.gamma_km;
    j["attacks"] = c.attacks;
    j["defense"] = c.defense;
    j["defense_k"] = c.defense_k;
    j["defense_alpha"] = c.defense_alpha;
    j["seeds"] = c.seeds;
    j["samples_per_trajectory"] = c.samples_per_trajectory;
    j["phase2_epochs"] = c.phase2_epochs;
    j["phase2_hidden"] = c.phase2_hidden;
    j["phase2_layers"] = c.phase2_layers;
    j["embed_dim"] = c.embed_dim;
    j["scorer_epochs"] = c.scorer_epochs;
    j["output_dir"] = c.output_dir;
    csv::write_text(path, j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Results table
// ---------------------------------------------------------------------------

std::string ResultRow::key() const {
    std::ostringstream s;
    s << mechanism << '|' << defense << '|' << K << '|' << csv::format_double(alpha) << '|'
      << attack << '|' << csv::format_double(epsilon) << '|' << seed;
    return s.str();
}

namespace {

std::string sanitize_status(std::string s) {
    for (char& c : s)
        if (c == ',' || c == '\n' || c == '\r') c = ';';
    return s;
}

std::string opt_field(const std::optional<double>& v) {
    return v ? csv::format_double(*v) : std::string();
}

std::optional<double> parse_opt(std::string_view s, const std::string& context) {
    if (s.empty()) return std::nullopt;
    return csv::parse_double(s, context);
}

constexpr const char* kResultsHeader =
    "mechanism,defense,K,alpha,attack,epsilon,seed,eie_km,utility_loss_s,elimination,status";

std::string format_row(const ResultRow& r) {
    std::ostringstream out;
    out << r.mechanism << ',' << r.defense << ',' << r.K << ',' << csv::format_double(r.alpha)
        << ',' << r.attack << ',' << csv::format_double(r.epsilon) << ',' << r.seed << ','
        << opt_field(r.eie_km) << ',' << opt_field(r.utility_loss_s) << ','
        << opt_field(r.elimination) << ',' << sanitize_status(r.status) << '\n';
    return out.str();
}

}  // namespace

void save_results_csv(const ResultsTable& table, const std::string& path) {
    std::ostringstream out;
    out << kResultsHeader << '\n';
    for (const auto& r : table.rows) out << format_row(r);
    csv::write_text(path, out.str());
}

ResultsTable load_results_csv(const std::string& path) {
    const auto lines = csv::read_lines(path);
    if (lines.empty() || lines[0] != kResultsHeader)
        throw MalformedRow("results csv: missing header in " + path);
    ResultsTable table;
    for (std::size_t n = 1; n < lines.size(); ++n) {
        const auto f = csv::split(lines[n]);
        if (f.size() != 11) throw MalformedRow("results csv: bad field count in " + path);
        ResultRow r;
        r.mechanism = std::string(f[0]);
        r.defense = std::string(f[1]);
        r.K = static_cast<std::size_t>(csv::parse_int(f[2], "results csv"));
        r.alpha = csv::parse_double(f[3], "results csv");
        r.attack = std::string(f[4]);
        r.epsilon = csv::parse_double(f[5], "results csv");
        r.seed = static_cast<std::uint64_t>(csv::parse_int(f[6], "results csv"));
        r.eie_km = parse_opt(f[7], "results csv");
        r.utility_loss_s = parse_opt(f[8], "results csv");
        r.elimination = parse_opt(f[9], "results csv");
        r.status = std::string(f[10]);
        table.rows.push_back(std::move(r));
    }
    return table;
}

// ---------------------------------------------------------------------------
// Experiment runner
// ---------------------------------------------------------------------------

namespace {

mech::Support full_support(const roadnet::RoadGraph& graph) {
    mech::Support support;
    support.ids.reserve(graph.size());
    support.positions.reserve(graph.size());
    for (std::size_t v = 0; v < graph.size(); ++v) {
        support.ids.push_back(graph.original_id(static_cast<roadnet::NodeId>(v)));
        support.positions.push_back(graph.pos(static_cast<roadnet::NodeId>(v)));
    }
    return support;
}

// Deterministic service targets: the node nearest the bounding-box center
// plus the nodes nearest its four quarter points, deduplicated.  Several
// spread-out targets keep exact cost ties rare, so the utility-adjusted
// candidate weights can discriminate locations.
std::vector<roadnet::NodeId> service_targets(const roadnet::RoadGraph& graph) {
    double lat_lo = 1e18, lat_hi = -1e18, lon_lo = 1e18, lon_hi = -1e18;
    for (std::size_t v = 0; v < graph.size(); ++v) {
        const auto& p = graph.pos(static_cast<roadnet::NodeId>(v));
        lat_lo = std::min(lat_lo, p.lat);
        lat_hi = std::max(lat_hi, p.lat);
        lon_lo = std::min(lon_lo, p.lon);
        lon_hi = std::max(lon_hi, p.lon);
    }
    std::vector<roadnet::NodeId> targets;
    for (const auto& frac : {std::pair{0.5, 0.5}, std::pair{0.25, 0.25}, std::pair{0.25, 0.75},
                             std::pair{0.75, 0.25}, std::pair{0.75, 0.75}}) {
        const roadnet::GeoPoint p{lat_lo + frac.first * (lat_hi - lat_lo),
                                  lon_lo + frac.second * (lon_hi - lon_lo)};
        const roadnet::NodeId v = roadnet::snap_to_node(graph, p);
        if (std::find(targets.begin(), targets.end(), v) == targets.end()) targets.push_back(v);
    }
    std::sort(targets.begin(), targets.end());
    return targets;
}

struct DefenseVariant {
    std::string label;  // none | transprotect
    std::size_t K = 0;
    double alpha = 0.0;
};

// Per-trajectory, per-slot candidate sets for one (K, alpha) setting.
using CandidateGrid = std::vector<std::vector<tp::CandidateSet>>;
// Matching per-slot restricted channels for one (mechanism, epsilon, K, alpha).
using RestrictedGrid = std::vector<std::vector<mech::ObfuscationMatrix>>;

double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

// Everything the factorial loop shares, built lazily so a fully resumed run
// does no model training at all.
struct RunState {
    const ExperimentConfig& config;
    roadnet::RoadGraph graph;
    std::vector<vt::Trajectory> trajectories;
    mech::Support support;
    std::vector<double> prior;
    mech::UtilityModel utility;
    std::vector<std::vector<std::size_t>> truth;  // dense node index per slot

    std::optional<base::TransitionModel> transitions;
    std::optional<tp::EmbeddingTable> embedding;
    std::optional<tp::ScorerModel> scorer;
    std::vector<nn::Tensor> score_rows;  // per trajectory: [(len+1) x L] slot scores

    std::map<std::pair<std::size_t, std::size_t>, CandidateGrid> candidates;  // (K,a) index

    explicit RunState(const ExperimentConfig& c) : config(c) {}

    const base::TransitionModel& transition_model() {
        if (!transitions) transitions = base::learn_transitions(trajectories, graph);
        return *transitions;
    }

    const std::vector<nn::Tensor>& slot_scores() {
        if (!scorer) {
            tp::WalkConfig walk;
            const auto corpus =
                tp::node2vec_walks(graph, walk, derive_seed(config.scenario_seed, kTagEmbed));
            tp::SkipGramConfig sg;
            sg.dim = config.embed_dim;
            auto table = tp::node2vec_train(corpus, graph.size(), sg,
                                            derive_seed(config.scenario_seed, kTagEmbed, 1));
            tp::GcnConfig gcn;
            gcn.seed = derive_seed(config.scenario_seed, kTagEmbed, 2);
            embedding = tp::gcn_refine(graph, table, gcn);

            tp::ScorerConfig sc;
            sc.epochs = config.scorer_epochs;
            sc.seed = derive_seed(config.scenario_seed, kTagScorer);
            scorer = tp::train_scorer(trajectories, *embedding, sc);

            score_rows.clear();
            for (const auto& traj : trajectories) {
                std::vector<roadnet::NodeId> nodes;
                for (const auto& p : traj.points) nodes.push_back(p.node);
                score_rows.push_back(tp::score_trajectory(*scorer, *embedding, nodes));
            }
        }
        return score_rows;
    }

    // Candidate sets depend only on (K, alpha), never on the mechanism or
    // the report draws, so they are shared across the whole factorial.
    const CandidateGrid& candidate_grid(std::size_t K, double alpha) {
        std::size_t k_idx = 0, a_idx = 0;
        while (config.defense_k[k_idx] != K) ++k_idx;
        while (config.defense_alpha[a_idx] != alpha) ++a_idx;
        const auto key = std::make_pair(k_idx, a_idx);
        auto it = candidates.find(key);
        if (it != candidates.end()) return it->second;

        const auto& scores = slot_scores();
        CandidateGrid grid(trajectories.size());
        const std::size_t L = graph.size();
        for (std::size_t j = 0; j < trajectories.size(); ++j) {
            grid[j].reserve(trajectories[j].size());
            for (std::size_t n = 0; n < trajectories[j].size(); ++n) {
                std::vector<double> row(
                    scores[j].data.begin() + static_cast<std::ptrdiff_t>(n * L),
                    scores[j].data.begin() + static_cast<std::ptrdiff_t>((n + 1) * L));
                auto set = tp::candidate_set(row, truth[j][n], utility, alpha, K);
                set.slot = n;
                grid[j].push_back(std::move(set));
            }
        }
        return candidates.emplace(key, std::move(grid)).first->second;
    }
};

// Elimination metric for one sequence.  Without the defense the reference
// set is the speed ball around each report; with it, the K candidates the
// defender offered: the attacker "eliminates" whatever its filter rules
// out of the reference set.
double sequence_elimination(const RunState& state, const vt::ObservationSequence& obs,
                            const vt::PosteriorSequence& post, const CandidateGrid* cand,
                            std::size_t traj_idx) {
    if (cand) {
        const auto& sets = (*cand)[traj_idx];
        double acc = 0.0;
        for (std::size_t n = 0; n < post.size(); ++n) {
            const auto& members = sets[n].members;         // ascending dense indices
            const auto& possible = post.slots[n].possible;  // ascending node ids
            std::size_t kept = 0, i = 0, j = 0;
            while (i < members.size() && j < possible.size()) {
                const auto m = static_cast<roadnet::NodeId>(members[i]);
                if (m == possible[j]) {
                    ++kept;
                    ++i;
                    ++j;
                } else if (m < possible[j]) {
                    ++i;
                } else {
                    ++j;
                }
            }
            if (!members.empty())
                acc += 1.0 - static_cast<double>(kept) / static_cast<double>(members.size());
        }
        return post.size() == 0 ? 0.0 : acc / static_cast<double>(post.size());
    }
    double gap = 20.0;
    if (obs.size() > 1)
        gap = (obs.slots.back().timestamp - obs.slots.front().timestamp) /
              static_cast<double>(obs.size() - 1);
    const double radius = roadnet::speed_radius_km(gap, kSpeedLimitKmh);
    return vt::elimination_ratio(post, vt::observation_ball_sizes(state.graph, obs, radius));
}

std::string attack_or_none(const std::vector<std::string>& attacks, std::size_t idx) {
    return attacks.empty() ? std::string("none") : attacks[idx];
}

}  // namespace

ResultsTable run_experiment(const ExperimentConfig& config) {
    config.validate();
    fs::create_directories(config.output_dir);
    const std::string results_path = (fs::path(config.output_dir) / "results.csv").string();
    const std::string timings_path = (fs::path(config.output_dir) / "timings.csv").string();
    const std::string summary_path = (fs::path(config.output_dir) / "summary.json").string();

    RunState state(config);
    state.graph = config.nodes_csv.empty()
                      ? make_grid(config.grid_w, config.grid_h, config.cell_km)
                      : roadnet::load_graph_csv(config.nodes_csv, config.edges_csv);
    state.trajectories =
        config.trajectories_jsonl.empty()
            ? walk_trajectories(state.graph, config.n_trajectories, config.trajectory_len,
                                config.scenario_seed)
            : load_trajectories(config.trajectories_jsonl);
    for (const auto& traj : state.trajectories) traj.validate(state.graph);
    state.support = full_support(state.graph);
    state.prior = mech::uniform_prior(state.graph.size());
    {
        std::vector<roadnet::NodeId> all(state.graph.size());
        for (std::size_t v = 0; v < all.size(); ++v) all[v] = static_cast<roadnet::NodeId>(v);
        state.utility = mech::utility_from_graph(state.graph, all, service_targets(state.graph));
    }
    state.truth.resize(state.trajectories.size());
    for (std::size_t j = 0; j < state.trajectories.size(); ++j)
        for (const auto& p : state.trajectories[j].points)
            state.truth[j].push_back(static_cast<std::size_t>(p.node));

    // Previously completed rows are kept verbatim so a killed run resumes.
    // New rows are appended as they finish; the canonical plan-order file is
    // rewritten once at the end.  A torn file from a mid-write kill is
    // discarded and the run starts over.
    std::unordered_map<std::string, ResultRow> done;
    bool journal_exists = fs::exists(results_path);
    if (journal_exists) {
        try {
            for (auto& row : load_results_csv(results_path).rows)
                done.insert_or_assign(row.key(), std::move(row));
        } catch (const Error&) {
            done.clear();
            journal_exists = false;
        }
    }
    if (!journal_exists) csv::write_text(results_path, std::string(kResultsHeader) + "\n");

    std::vector<DefenseVariant> variants{{"none", 0, 0.0}};
    if (config.defense)
        for (std::size_t K : config.defense_k)
            for (double alpha : config.defense_alpha)
                variants.push_back({"transprotect", K, alpha});

    const std::size_t n_attacks = config.attacks.empty() ? 1 : config.attacks.size();
    const bool needs_phase2 =
        std::count(config.attacks.begin(), config.attacks.end(), "vehitrack") > 0;
    const bool needs_phase1 =
        needs_phase2 ||
        std::count(config.attacks.begin(), config.attacks.end(), "vehitrack-i") > 0;

    ResultsTable table;
    std::ostringstream timings;
    timings << "key,runtime_s\n";

    auto plan_row = [&](std::size_t m_idx, const DefenseVariant& variant, std::size_t a,
                        double epsilon, std::uint64_t seed) {
        ResultRow row;
        row.mechanism = config.mechanisms[m_idx];
        row.defense = variant.label;
        row.K = variant.K;
        row.alpha = variant.alpha;
        row.attack = attack_or_none(config.attacks, a);
        row.epsilon = epsilon;
        row.seed = seed;
        return row;
    };

    auto emit = [&](ResultRow row, double runtime_s) {
        timings << row.key() << ',' << csv::format_double(runtime_s) << '\n';
        std::ofstream app(results_path, std::ios::app | std::ios::binary);
        app << format_row(row);
        table.rows.push_back(std::move(row));
    };

    for (std::size_t m_idx = 0; m_idx < config.mechanisms.size(); ++m_idx) {
        const std::string& mechanism = config.mechanisms[m_idx];
        const mech::Provenance kind =
            mechanism == "laplace" ? mech::Provenance::Laplace : mech::Provenance::Lp;
        for (std::size_t e_idx = 0; e_idx < config.epsilons.size(); ++e_idx) {
            const double epsilon = config.epsilons[e_idx];
            const mech::PrivacyParams params{epsilon, config.gamma_km, 0.0};

            // Skip the heavy shared artifacts when every row already exists.
            bool all_done = true;
            for (std::size_t v_idx = 0; v_idx < variants.size() && all_done; ++v_idx)
                for (std::uint64_t seed : config.seeds)
                    for (std::size_t a = 0; a < n_attacks; ++a)
                        if (!done.count(plan_row(m_idx, variants[v_idx], a, epsilon, seed).key())) {
                            all_done = false;
                            break;
                        }
            if (all_done) {
                for (const auto& variant : variants)
                    for (std::uint64_t seed : config.seeds)
                        for (std::size_t a = 0; a < n_attacks; ++a)
                            table.rows.push_back(
                                done.at(plan_row(m_idx, variant, a, epsilon, seed).key()));
                continue;
            }

            // Shared per-(mechanism, epsilon) artifacts.
            std::string block_error;
            std::optional<mech::ObfuscationMatrix> base_z;
            std::optional<vt::Phase2Model> phase2;
            try {
                base_z = mechanism == "laplace"
                             ? mech::laplace_matrix(state.support, params)
                             : mech::lp_matrix(state.support, params, state.utility, state.prior);
                if (needs_phase2) {
                    vt::SampleOptions sample_options;
                    sample_options.samples_per_trajectory = config.samples_per_trajectory;
                    const auto dataset = vt::generate_training_samples(
                        state.trajectories, *base_z, state.graph, state.prior,
                        derive_seed(config.scenario_seed, kTagSamples, m_idx, e_idx),
                        sample_options);
                    std::vector<roadnet::NodeId> all(state.graph.size());
                    for (std::size_t v = 0; v < all.size(); ++v)
                        all[v] = static_cast<roadnet::NodeId>(v);
                    vt::Phase2Config p2;
                    p2.hidden_dim = config.phase2_hidden;
                    p2.layers = config.phase2_layers;
                    p2.epochs = config.phase2_epochs;
                    p2.seed = derive_seed(config.scenario_seed, kTagPhase2, m_idx, e_idx);
                    phase2 = vt::phase2_train(dataset, std::move(all), p2);
                }
            } catch (const std::exception& e) {
                block_error = e.what();
            }

            for (std::size_t v_idx = 0; v_idx < variants.size(); ++v_idx) {
                const auto& variant = variants[v_idx];

                // Restricted per-slot channels, shared across this variant's
                // seeds (only the report draws differ per seed).
                const CandidateGrid* cand_grid = nullptr;
                RestrictedGrid restricted_storage;
                const RestrictedGrid* restricted = nullptr;
                std::string variant_error = block_error;
                if (variant_error.empty() && variant.label == "transprotect") {
                    try {
                        cand_grid = &state.candidate_grid(variant.K, variant.alpha);
                        restricted_storage.resize(cand_grid->size());
                        for (std::size_t j = 0; j < cand_grid->size(); ++j) {
                            restricted_storage[j].reserve((*cand_grid)[j].size());
                            for (const auto& set : (*cand_grid)[j])
                                restricted_storage[j].push_back(tp::restrict_mechanism(
                                    kind, state.support, set, params, state.utility));
                        }
                        restricted = &restricted_storage;
                    } catch (const std::exception& e) {
                        variant_error = e.what();
                    }
                }

                for (std::uint64_t seed : config.seeds) {
                    const auto t_start = std::chrono::steady_clock::now();
                    auto elapsed = [&] {
                        return std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                                             t_start)
                            .count();
                    };

                    bool cell_done = true;
                    for (std::size_t a = 0; a < n_attacks; ++a)
                        if (!done.count(plan_row(m_idx, variant, a, epsilon, seed).key()))
                            cell_done = false;
                    if (cell_done) {
                        for (std::size_t a = 0; a < n_attacks; ++a)
                            table.rows.push_back(
                                done.at(plan_row(m_idx, variant, a, epsilon, seed).key()));
                        continue;
                    }

                    auto fail_cell = [&](const std::string& message) {
                        for (std::size_t a = 0; a < n_attacks; ++a) {
                            ResultRow row = plan_row(m_idx, variant, a, epsilon, seed);
                            row.status = sanitize_status(message);
                            emit(std::move(row), elapsed());
                        }
                    };
                    if (!variant_error.empty()) {
                        fail_cell(variant_error);
                        continue;
                    }

                    // Draw one shared set of reports for every attack.
                    const std::uint64_t cell_seed = derive_seed(seed, m_idx, e_idx, v_idx);
                    std::vector<vt::ObservationSequence> observations;
                    std::vector<double> cell_utility;
                    try {
                        for (std::size_t j = 0; j < state.trajectories.size(); ++j) {
                            Rng rng(derive_seed(cell_seed, kTagObs, j));
                            vt::ObservationSequence obs;
                            obs.trajectory_id = state.trajectories[j].id;
                            for (std::size_t n = 0; n < state.trajectories[j].size(); ++n) {
                                const std::size_t x = state.truth[j][n];
                                std::size_t reported;
                                if (restricted) {
                                    // The report comes from the restricted
                                    // channel, but the adversary only knows
                                    // the public full-support mechanism.
                                    const auto& members = (*cand_grid)[j][n].members;
                                    const std::size_t row = static_cast<std::size_t>(
                                        std::lower_bound(members.begin(), members.end(), x) -
                                        members.begin());
                                    const std::size_t col = mech::sample_obfuscated(
                                        (*restricted)[j][n], row, rng);
                                    reported = members[col];
                                } else {
                                    const std::size_t col =
                                        mech::sample_obfuscated(*base_z, x, rng);
                                    reported = static_cast<std::size_t>(
                                        state.graph.index_of(base_z->support.ids[col]));
                                }
                                cell_utility.push_back(
                                    mech::delta_cost(x, reported, state.utility));
                                obs.slots.push_back({state.trajectories[j].points[n].timestamp,
                                                     static_cast<roadnet::NodeId>(reported),
                                                     &*base_z});
                            }
                            observations.push_back(std::move(obs));
                        }
                    } catch (const std::exception& e) {
                        fail_cell(e.what());
                        continue;
                    }
                    const double utility_loss = mean_of(cell_utility);

                    // Phase-1 posteriors are shared by vehitrack and its
                    // ablation; computed once per cell.
                    std::vector<vt::PosteriorSequence> posteriors;
                    std::string phase1_error;
                    if (needs_phase1) {
                        try {
                            for (const auto& obs : observations)
                                posteriors.push_back(
                                    vt::phase1_posteriors(obs, state.graph, state.prior));
                        } catch (const std::exception& e) {
                            phase1_error = e.what();
                        }
                    }

                    for (std::size_t a = 0; a < n_attacks; ++a) {
                        ResultRow row = plan_row(m_idx, variant, a, epsilon, seed);
                        row.utility_loss_s = utility_loss;
                        if (config.attacks.empty()) {
                            emit(std::move(row), elapsed());
                            continue;
                        }
                        const std::string& attack = config.attacks[a];
                        try {
                            std::vector<double> eie, elim;
                            for (std::size_t j = 0; j < state.trajectories.size(); ++j) {
                                std::vector<roadnet::NodeId> truth_nodes;
                                for (const auto& p : state.trajectories[j].points)
                                    truth_nodes.push_back(p.node);
                                std::vector<roadnet::NodeId> estimates;
                                if (attack == "bayes") {
                                    estimates = base::bayes_attack_sequence(
                                                    observations[j], state.graph, state.prior)
                                                    .estimates;
                                } else if (attack == "viterbi") {
                                    estimates =
                                        base::viterbi(state.transition_model(), observations[j],
                                                      state.graph, state.prior)
                                            .path;
                                } else {
                                    if (!phase1_error.empty()) throw Error(phase1_error);
                                    const auto& post = posteriors[j];
                                    estimates = attack == "vehitrack"
                                                    ? vt::phase2_infer(*phase2, post).estimates
                                                    : vt::phase1_argmax(post);
                                    elim.push_back(sequence_elimination(
                                        state, observations[j], post, cand_grid, j));
                                }
                                eie.push_back(vt::eie_km(estimates, truth_nodes, state.graph));
                            }
                            row.eie_km = mean_of(eie);
                            if (!elim.empty()) row.elimination = mean_of(elim);
                        } catch (const std::exception& e) {
                            row.status = sanitize_status(e.what());
                        }
                        emit(std::move(row), elapsed());
                    }
                }
            }
        }
    }

    // Canonical rewrite: rows in plan order, identical across fresh and
    // resumed runs.
    save_results_csv(table, results_path);
    csv::write_text(timings_path, timings.str());

    const auto rep = make_report(table);
    json summary;
    summary["version"] = kConfigVersion;
    summary["rows"] = table.rows.size();
    std::size_t failed = 0;
    for (const auto& r : table.rows)
        if (r.status != "ok") ++failed;
    summary["failed_rows"] = failed;
    json groups = json::array();
    for (const auto& g : rep.groups) {
        json jg;
        jg["mechanism"] = g.mechanism;
        jg["defense"] = g.defense;
        jg["K"] = g.K;
        jg["alpha"] = g.alpha;
        jg["attack"] = g.attack;
        jg["epsilon"] = g.epsilon;
        jg["n"] = g.n;
        if (g.eie_mean) jg["eie_mean_km"] = *g.eie_mean;
        if (g.eie_std) jg["eie_std_km"] = *g.eie_std;
        if (g.utility_mean) jg["utility_mean_s"] = *g.utility_mean;
        if (g.utility_std) jg["utility_std_s"] = *g.utility_std;
        if (g.elimination_mean) jg["elimination_mean"] = *g.elimination_mean;
        if (g.elimination_std) jg["elimination_std"] = *g.elimination_std;
        groups.push_back(std::move(jg));
    }
    summary["groups"] = std::move(groups);
    csv::write_text(summary_path, summary.dump(2) + "\n");

    return table;
}

// ---------------------------------------------------------------------------
// Reporting
// ---------------------------------------------------------------------------

namespace {

struct Stats {
    std::optional<double> mean, std;
};

Stats stats_of(const std::vector<double>& v) {
    if (v.empty()) return {};
    const double mean = mean_of(v);
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    var /= static_cast<double>(v.size());
    return {mean, std::sqrt(var)};
}

std::string fmt4(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.4f", v);
    return buf;
}

}  // namespace

std::string format_delta_pct(double base, double value) {
    if (!(std::abs(base) > 0.0) || !std::isfinite(base) || !std::isfinite(value)) return "n/a";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%+.1f%%", (value - base) / base * 100.0);
    return buf;
}

Report make_report(const ResultsTable& table) {
    if (table.rows.empty()) throw EmptyResult("make_report: empty results table");

    // Groups in first-appearance order.
    std::vector<ReportGroup> groups;
    std::map<std::string, std::size_t> index;
    std::vector<std::vector<double>> eie, util, elim;
    for (const auto& r : table.rows) {
        if (r.status != "ok") continue;
        std::ostringstream key;
        key << r.mechanism << '|' << r.defense << '|' << r.K << '|'
            << csv::format_double(r.alpha) << '|' << r.attack << '|'
            << csv::format_double(r.epsilon);
        auto it = index.find(key.str());
        if (it == index.end()) {
            it = index.emplace(key.str(), groups.size()).first;
            ReportGroup g;
            g.mechanism = r.mechanism;
            g.defense = r.defense;
            g.K = r.K;
            g.alpha = r.alpha;
            g.attack = r.attack;
            g.epsilon = r.epsilon;
            groups.push_back(std::move(g));
            eie.emplace_back();
            util.emplace_back();
            elim.emplace_back();
        }
        const std::size_t g = it->second;
        ++groups[g].n;
        if (r.eie_km) eie[g].push_back(*r.eie_km);
        if (r.utility_loss_s) util[g].push_back(*r.utility_loss_s);
        if (r.elimination) elim[g].push_back(*r.elimination);
    }

    Report report;
    std::ostringstream text;
    for (std::size_t g = 0; g < groups.size(); ++g) {
        auto s = stats_of(eie[g]);
        groups[g].eie_mean = s.mean;
        groups[g].eie_std = s.std;
        s = stats_of(util[g]);
        groups[g].utility_mean = s.mean;
        groups[g].utility_std = s.std;
        s = stats_of(elim[g]);
        groups[g].elimination_mean = s.mean;
        groups[g].elimination_std = s.std;

        const auto& grp = groups[g];
        text << grp.mechanism << " eps=" << csv::format_double(grp.epsilon)
             << " defense=" << grp.defense;
        if (grp.defense != "none")
            text << " (K=" << grp.K << ", alpha=" << csv::format_double(grp.alpha) << ")";
        text << " attack=" << grp.attack << " [n=" << grp.n << "]";
        if (grp.eie_mean)
            text << " EIE " << fmt4(*grp.eie_mean) << "+/-" << fmt4(*grp.eie_std) << " km";
        if (grp.utility_mean)
            text << " UL " << fmt4(*grp.utility_mean) << "+/-" << fmt4(*grp.utility_std) << " s";
        if (grp.elimination_mean)
            text << " elim " << fmt4(*grp.elimination_mean) << "+/-"
                 << fmt4(*grp.elimination_std);
        text << '\n';
    }

    // Defense deltas: defended EIE relative to the matching undefended cell.
    for (const auto& grp : groups) {
        if (grp.defense == "none" || !grp.eie_mean) continue;
        for (const auto& base_grp : groups) {
            if (base_grp.defense != "none" || base_grp.mechanism != grp.mechanism ||
                base_grp.attack != grp.attack || base_grp.epsilon != grp.epsilon ||
                !base_grp.eie_mean)
                continue;
            text << grp.mechanism << " eps=" << csv::format_double(grp.epsilon) << " "
                 << grp.attack << " K=" << grp.K << ": EIE "
                 << format_delta_pct(*base_grp.eie_mean, *grp.eie_mean) << " vs none\n";
        }
    }

    report.groups = std::move(groups);
    report.text = text.str();
    return report;
}

void save_report_csv(const Report& report, const std::string& path) {
    std::ostringstream out;
    out << "mechanism,defense,K,alpha,attack,epsilon,n,eie_mean,eie_std,utility_mean,"
           "utility_std,elimination_mean,elimination_std\n";
    for (const auto& g : report.groups) {
        out << g.mechanism << ',' << g.defense << ',' << g.K << ','
            << csv::format_double(g.alpha) << ',' << g.attack << ','
            << csv::format_double(g.epsilon) << ',' << g.n << ',' << opt_field(g.eie_mean)
            << ',' << opt_field(g.eie_std) << ',' << opt_field(g.utility_mean) << ','
            << opt_field(g.utility_std) << ',' << opt_field(g.elimination_mean) << ','
            << opt_field(g.elimination_std) << '\n';
    }
    csv::write_text(path, out.str());
}

}  // namespace locpriv::hn
