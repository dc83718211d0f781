// Command-line front end: every subcommand is a thin wrapper over the
// library so experiments are scriptable without writing C++.

#include <cstdint>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "locpriv/baselines.hpp"
#include "locpriv/csv.hpp"
#include "locpriv/harness.hpp"
#include "locpriv/mechanisms.hpp"
#include "locpriv/rng.hpp"
#include "locpriv/roadnet.hpp"
#include "locpriv/transprotect.hpp"
#include "locpriv/vehitrack.hpp"

namespace {

using namespace locpriv;
using nlohmann::json;

mech::Support graph_support(const roadnet::RoadGraph& graph) {
    mech::Support support;
    for (std::size_t v = 0; v < graph.size(); ++v) {
        support.ids.push_back(graph.original_id(static_cast<roadnet::NodeId>(v)));
        support.positions.push_back(graph.pos(static_cast<roadnet::NodeId>(v)));
    }
    return support;
}

std::vector<roadnet::NodeId> all_nodes(const roadnet::RoadGraph& graph) {
    std::vector<roadnet::NodeId> nodes(graph.size());
    for (std::size_t v = 0; v < nodes.size(); ++v) nodes[v] = static_cast<roadnet::NodeId>(v);
    return nodes;
}

// Default LBS target when none is given: the node nearest the coordinate
// centroid.
std::vector<roadnet::NodeId> resolve_targets(const roadnet::RoadGraph& graph,
                                             const std::vector<std::int64_t>& requested) {
    std::vector<roadnet::NodeId> targets;
    if (requested.empty()) {
        roadnet::GeoPoint centroid{0.0, 0.0};
        for (std::size_t v = 0; v < graph.size(); ++v) {
            centroid.lat += graph.pos(static_cast<roadnet::NodeId>(v)).lat;
            centroid.lon += graph.pos(static_cast<roadnet::NodeId>(v)).lon;
        }
        centroid.lat /= static_cast<double>(graph.size());
        centroid.lon /= static_cast<double>(graph.size());
        targets.push_back(roadnet::snap_to_node(graph, centroid));
    } else {
        for (std::int64_t id : requested) targets.push_back(graph.index_of(id));
    }
    return targets;
}

// Shared --nodes/--edges pair used by most subcommands.
struct GraphArgs {
    std::string nodes, edges;

    void add_to(CLI::App* cmd) {
        cmd->add_option("--nodes", nodes, "node CSV (node_id,lat,lon)")->required();
        cmd->add_option("--edges", edges, "edge CSV (from,to,weight_seconds[,bucket])")
            ->required();
    }
    roadnet::RoadGraph load() const { return roadnet::load_graph_csv(nodes, edges); }
};

vt::ObservationSequence draw_reports(const vt::Trajectory& traj,
                                     const mech::ObfuscationMatrix& Z,
                                     const roadnet::RoadGraph& graph, Rng& rng) {
    const auto positions = mech::support_positions(Z.support, graph);
    vt::ObservationSequence obs;
    obs.trajectory_id = traj.id;
    for (const auto& point : traj.points) {
        const std::size_t row = positions[static_cast<std::size_t>(point.node)];
        if (row == mech::kNoSupportPosition)
            throw UnknownNode("trajectory visits a node outside the mechanism support");
        const std::size_t col = mech::sample_obfuscated(Z, row, rng);
        obs.slots.push_back({point.timestamp, graph.index_of(Z.support.ids[col]), &Z});
    }
    return obs;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"road-network location-privacy laboratory"};
    app.require_subcommand(1);
    int exit_code = 0;

    // ---- build-graph: validate + canonicalize a graph CSV pair ----------
    {
        auto a = std::make_shared<GraphArgs>();
        auto out_nodes = std::make_shared<std::string>();
        auto out_edges = std::make_shared<std::string>();
        auto* cmd = app.add_subcommand("build-graph", "validate a graph and re-emit it with dense ids");
        a->add_to(cmd);
        cmd->add_option("--out-nodes", *out_nodes, "output node CSV")->required();
        cmd->add_option("--out-edges", *out_edges, "output edge CSV")->required();
        cmd->callback([a, out_nodes, out_edges] {
            const auto graph = a->load();
            roadnet::save_graph_csv(graph, *out_nodes, *out_edges);
            std::cout << "nodes: " << graph.size() << "\narcs: " << graph.arc_count() << '\n';
        });
    }

    // ---- synth: grid scenario -------------------------------------------
    {
        struct Args {
            std::size_t w = 20, h = 20, n = 100, len = 30;
            double cell = 0.5;
            std::uint64_t seed = 0;
            std::string out_nodes, out_edges, out_trajs;
        };
        auto a = std::make_shared<Args>();
        auto* cmd = app.add_subcommand("synth", "generate a grid road network and random-walk trajectories");
        cmd->add_option("--grid-w", a->w, "grid width");
        cmd->add_option("--grid-h", a->h, "grid height");
        cmd->add_option("--cell-km", a->cell, "grid spacing in km");
        cmd->add_option("--trajectories", a->n, "trajectory count");
        cmd->add_option("--length", a->len, "points per trajectory");
        cmd->add_option("--seed", a->seed, "random seed")->required();
        cmd->add_option("--out-nodes", a->out_nodes, "output node CSV")->required();
        cmd->add_option("--out-edges", a->out_edges, "output edge CSV")->required();
        cmd->add_option("--out-trajectories", a->out_trajs, "output trajectory JSONL")->required();
        cmd->callback([a] {
            const auto scenario = hn::synth_scenario(a->w, a->h, a->cell, a->n, a->len, a->seed);
            roadnet::save_graph_csv(scenario.graph, a->out_nodes, a->out_edges);
            hn::save_trajectories(scenario.trajectories, a->out_trajs);
            std::cout << "nodes: " << scenario.graph.size()
                      << "\ntrajectories: " << scenario.trajectories.size() << '\n';
        });
    }

    // ---- ingest: GPS fixes -> trajectories ------------------------------
    {
        auto g = std::make_shared<GraphArgs>();
        auto fixes = std::make_shared<std::string>();
        auto out = std::make_shared<std::string>();
        auto gap = std::make_shared<double>(20.0);
        auto* cmd = app.add_subcommand("ingest", "snap and resample a vehicle_id,timestamp,lat,lon fix file");
        g->add_to(cmd);
        cmd->add_option("--fixes", *fixes, "input fix CSV")->required();
        cmd->add_option("--gap", *gap, "target seconds between points");
        cmd->add_option("--out", *out, "output trajectory JSONL")->required();
        cmd->callback([g, fixes, out, gap] {
            const auto graph = g->load();
            hn::IngestStats stats;
            const auto trajs = hn::ingest_trajectories(*fixes, graph, *gap, &stats);
            hn::save_trajectories(trajs, *out);
            std::cout << "trajectories: " << trajs.size() << "\nrows: " << stats.rows
                      << "\nmalformed: " << stats.malformed
                      << "\nduplicates: " << stats.duplicates << "\nmerged: " << stats.merged
                      << "\nsplits: " << stats.splits << '\n';
        });
    }

    // ---- mechanism: emit an obfuscation matrix --------------------------
    {
        struct Args {
            GraphArgs g;
            std::string kind = "laplace", out_csv, out_json;
            double epsilon = 5.0, gamma = 1.0;
            std::vector<std::int64_t> targets;
        };
        auto a = std::make_shared<Args>();
        auto* cmd = app.add_subcommand("mechanism", "synthesize an obfuscation matrix over the whole graph");
        a->g.add_to(cmd);
        cmd->add_option("--kind", a->kind, "laplace | lp")
            ->check(CLI::IsMember({"laplace", "lp"}));
        cmd->add_option("--epsilon", a->epsilon, "privacy budget (1/km)");
        cmd->add_option("--gamma", a->gamma, "indistinguishability radius (km)");
        cmd->add_option("--target", a->targets, "LBS target node id (repeatable)");
        cmd->add_option("--out-csv", a->out_csv, "output matrix CSV")->required();
        cmd->add_option("--out-json", a->out_json, "output matrix sidecar JSON")->required();
        cmd->callback([a] {
            const auto graph = a->g.load();
            const auto support = graph_support(graph);
            const mech::PrivacyParams params{a->epsilon, a->gamma, 0.0};
            mech::ObfuscationMatrix Z;
            if (a->kind == "laplace") {
                Z = mech::laplace_matrix(support, params);
            } else {
                const auto utility = mech::utility_from_graph(
                    graph, all_nodes(graph), resolve_targets(graph, a->targets));
                Z = mech::lp_matrix(support, params, utility,
                                    mech::uniform_prior(support.size()));
            }
            mech::save_matrix(Z, a->out_csv, a->out_json);
            std::cout << "support: " << Z.size() << "\nprovenance: "
                      << mech::to_string(Z.provenance) << '\n';
        });
    }

    // ---- audit: geo-indistinguishability check --------------------------
    {
        struct Args {
            std::string matrix_csv, matrix_json, out;
            double epsilon = 5.0, gamma = 1.0, tol = 1e-9;
        };
        auto a = std::make_shared<Args>();
        auto* cmd = app.add_subcommand("audit", "exhaustively audit a matrix against the privacy constraint");
        cmd->add_option("--matrix-csv", a->matrix_csv, "matrix CSV")->required();
        cmd->add_option("--matrix-json", a->matrix_json, "matrix sidecar JSON")->required();
        cmd->add_option("--epsilon", a->epsilon, "privacy budget to audit at (1/km)");
        cmd->add_option("--gamma", a->gamma, "indistinguishability radius (km)");
        cmd->add_option("--tol", a->tol, "violation tolerance");
        cmd->add_option("--out", a->out, "output report JSON");
        cmd->callback([a, &exit_code] {
            const auto Z = mech::load_matrix(a->matrix_csv, a->matrix_json);
            const auto report = mech::geo_ind_audit(Z, a->epsilon, a->gamma, a->tol);
            if (!a->out.empty()) csv::write_text(a->out, report.to_json() + "\n");
            std::cout << "checked: " << report.checked_triples
                      << "\nviolations: " << report.violations.size() << '\n';
            if (!report.violations.empty()) exit_code = 2;
        });
    }

    // ---- train-phase2: fit the refinement model -------------------------
    {
        struct Args {
            GraphArgs g;
            std::string trajs, matrix_csv, matrix_json, out;
            std::uint64_t seed = 0;
            std::size_t samples = 20, epochs = 50, hidden = 64, layers = 5;
        };
        auto a = std::make_shared<Args>();
        auto* cmd = app.add_subcommand("train-phase2", "train the sequence refinement attack model");
        a->g.add_to(cmd);
        cmd->add_option("--trajectories", a->trajs, "training trajectory JSONL")->required();
        cmd->add_option("--matrix-csv", a->matrix_csv, "mechanism matrix CSV")->required();
        cmd->add_option("--matrix-json", a->matrix_json, "mechanism sidecar JSON")->required();
        cmd->add_option("--seed", a->seed, "random seed")->required();
        cmd->add_option("--samples", a->samples, "obfuscation samples per trajectory");
        cmd->add_option("--epochs", a->epochs, "training epochs");
        cmd->add_option("--hidden", a->hidden, "LSTM hidden width");
        cmd->add_option("--layers", a->layers, "LSTM layers");
        cmd->add_option("--out", a->out, "model file prefix")->required();
        cmd->callback([a] {
            const auto graph = a->g.load();
            const auto trajs = hn::load_trajectories(a->trajs);
            const auto Z = mech::load_matrix(a->matrix_csv, a->matrix_json);
            vt::SampleOptions opts;
            opts.samples_per_trajectory = a->samples;
            const auto dataset = vt::generate_training_samples(
                trajs, Z, graph, mech::uniform_prior(graph.size()), a->seed, opts);
            vt::Phase2Config config;
            config.hidden_dim = a->hidden;
            config.layers = a->layers;
            config.epochs = a->epochs;
            config.seed = a->seed;
            vt::Phase2TrainLog log;
            const auto model = vt::phase2_train(dataset, all_nodes(graph), config, &log);
            vt::save_phase2(model, a->out);
            std::cout << "samples: " << dataset.samples.size()
                      << "\ndropped: " << dataset.dropped << "\nfinal loss: "
                      << (log.epoch_loss.empty() ? 0.0 : log.epoch_loss.back()) << '\n';
        });
    }

    // ---- attack: run one attacker over drawn reports ---------------------
    {
        struct Args {
            GraphArgs g;
            std::string kind = "bayes", trajs, matrix_csv, matrix_json, phase2, out;
            std::uint64_t seed = 0;
        };
        auto a = std::make_shared<Args>();
        auto* cmd = app.add_subcommand("attack", "draw reports and estimate the true trajectory");
        a->g.add_to(cmd);
        cmd->add_option("--kind", a->kind, "bayes | viterbi | vehitrack | vehitrack-i")
            ->check(CLI::IsMember({"bayes", "viterbi", "vehitrack", "vehitrack-i"}));
        cmd->add_option("--trajectories", a->trajs, "ground-truth trajectory JSONL")->required();
        cmd->add_option("--matrix-csv", a->matrix_csv, "mechanism matrix CSV")->required();
        cmd->add_option("--matrix-json", a->matrix_json, "mechanism sidecar JSON")->required();
        cmd->add_option("--phase2", a->phase2, "phase-2 model prefix (vehitrack only)");
        cmd->add_option("--seed", a->seed, "random seed for the report draws")->required();
        cmd->add_option("--out", a->out, "output JSONL of per-trajectory estimates")->required();
        cmd->callback([a] {
            const auto graph = a->g.load();
            const auto trajs = hn::load_trajectories(a->trajs);
            const auto Z = mech::load_matrix(a->matrix_csv, a->matrix_json);
            const auto prior = mech::uniform_prior(graph.size());

            std::optional<base::TransitionModel> transitions;
            if (a->kind == "viterbi") transitions = base::learn_transitions(trajs, graph);
            std::optional<vt::Phase2Model> phase2;
            if (a->kind == "vehitrack") {
                if (a->phase2.empty())
                    throw ConfigError("attack: --phase2 is required for kind vehitrack");
                phase2 = vt::load_phase2(a->phase2);
            }

            std::ostringstream out;
            double total = 0.0;
            for (std::size_t j = 0; j < trajs.size(); ++j) {
                Rng rng(derive_seed(a->seed, 0x6f627366, j));
                const auto obs = draw_reports(trajs[j], Z, graph, rng);
                std::vector<roadnet::NodeId> truth;
                for (const auto& p : trajs[j].points) truth.push_back(p.node);

                std::vector<roadnet::NodeId> estimates;
                if (a->kind == "bayes") {
                    estimates = base::bayes_attack_sequence(obs, graph, prior).estimates;
                } else if (a->kind == "viterbi") {
                    estimates = base::viterbi(*transitions, obs, graph, prior).path;
                } else {
                    const auto post = vt::phase1_posteriors(obs, graph, prior);
                    estimates = a->kind == "vehitrack"
                                    ? vt::phase2_infer(*phase2, post).estimates
                                    : vt::phase1_argmax(post);
                }
                const double eie = vt::eie_km(estimates, truth, graph);
                total += eie;

                json rec;
                rec["id"] = trajs[j].id;
                rec["estimates"] = estimates;
                rec["eie_km"] = eie;
                out << rec.dump() << '\n';
            }
            csv::write_text(a->out, out.str());
            std::cout << "mean EIE km: " << total / static_cast<double>(trajs.size()) << '\n';
        });
    }

    // ---- defend: train the scorer and emit candidate sets ---------------
    {
        struct Args {
            GraphArgs g;
            std::string trajs, out_table, out_scorer, out_candidates;
            std::uint64_t seed = 0;
            std::size_t dim = 128, scorer_epochs = 60, K = 10;
            double alpha = 1e4;
            std::vector<std::int64_t> targets;
        };
        auto a = std::make_shared<Args>();
        auto* cmd = app.add_subcommand("defend", "train location embeddings + scorer and emit per-slot candidate sets");
        a->g.add_to(cmd);
        cmd->add_option("--trajectories", a->trajs, "training trajectory JSONL")->required();
        cmd->add_option("--seed", a->seed, "random seed")->required();
        cmd->add_option("--dim", a->dim, "embedding dimension (multiple of 4)");
        cmd->add_option("--scorer-epochs", a->scorer_epochs, "scorer training epochs");
        cmd->add_option("--k", a->K, "candidate set size");
        cmd->add_option("--alpha", a->alpha, "utility weight in the candidate score");
        cmd->add_option("--target", a->targets, "LBS target node id (repeatable)");
        cmd->add_option("--out-table", a->out_table, "embedding table prefix")->required();
        cmd->add_option("--out-scorer", a->out_scorer, "scorer model prefix")->required();
        cmd->add_option("--out-candidates", a->out_candidates, "candidate log JSONL")->required();
        cmd->callback([a] {
            const auto graph = a->g.load();
            const auto trajs = hn::load_trajectories(a->trajs);
            const auto utility = mech::utility_from_graph(graph, all_nodes(graph),
                                                          resolve_targets(graph, a->targets));

            tp::WalkConfig walk;
            const auto corpus = tp::node2vec_walks(graph, walk, derive_seed(a->seed, 1));
            tp::SkipGramConfig sg;
            sg.dim = a->dim;
            auto table =
                tp::node2vec_train(corpus, graph.size(), sg, derive_seed(a->seed, 2));
            tp::GcnConfig gcn;
            gcn.seed = derive_seed(a->seed, 3);
            table = tp::gcn_refine(graph, table, gcn);
            tp::save_table(table, a->out_table);

            tp::ScorerConfig sc;
            sc.epochs = a->scorer_epochs;
            sc.seed = derive_seed(a->seed, 4);
            const auto scorer = tp::train_scorer(trajs, table, sc);
            tp::save_scorer(scorer, a->out_scorer);

            std::vector<std::pair<std::string, tp::CandidateSet>> entries;
            for (const auto& traj : trajs) {
                std::vector<roadnet::NodeId> nodes;
                for (const auto& p : traj.points) nodes.push_back(p.node);
                const auto rows = tp::score_trajectory(scorer, table, nodes);
                for (std::size_t n = 0; n < nodes.size(); ++n) {
                    std::vector<double> row(
                        rows.data.begin() + static_cast<std::ptrdiff_t>(n * graph.size()),
                        rows.data.begin() + static_cast<std::ptrdiff_t>((n + 1) * graph.size()));
                    auto set = tp::candidate_set(row, static_cast<std::size_t>(nodes[n]),
                                                 utility, a->alpha, a->K);
                    set.slot = n;
                    entries.emplace_back(traj.id, std::move(set));
                }
            }
            tp::save_candidate_log(a->out_candidates, entries);
            std::cout << "candidate sets: " << entries.size() << '\n';
        });
    }

    // ---- run: the full factorial experiment ------------------------------
    {
        auto config_path = std::make_shared<std::string>();
        auto* cmd = app.add_subcommand("run", "run the configured mechanism x defense x attack factorial");
        cmd->add_option("--config", *config_path, "experiment config JSON")->required();
        cmd->callback([config_path] {
            const auto config = hn::load_config(*config_path);
            const auto table = hn::run_experiment(config);
            std::cout << hn::make_report(table).text;
        });
    }

    // ---- report: aggregate an existing results file ----------------------
    {
        auto results = std::make_shared<std::string>();
        auto out = std::make_shared<std::string>();
        auto* cmd = app.add_subcommand("report", "aggregate a results CSV into mean +/- std groups");
        cmd->add_option("--results", *results, "results CSV from a run")->required();
        cmd->add_option("--out", *out, "output aggregate CSV");
        cmd->callback([results, out] {
            const auto table = hn::load_results_csv(*results);
            const auto rep = hn::make_report(table);
            if (!out->empty()) hn::save_report_csv(rep, *out);
            std::cout << rep.text;
        });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return exit_code;
}
