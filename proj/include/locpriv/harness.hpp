#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "locpriv/baselines.hpp"
#include "locpriv/errors.hpp"
#include "locpriv/mechanisms.hpp"
#include "locpriv/roadnet.hpp"
#include "locpriv/transprotect.hpp"
#include "locpriv/vehitrack.hpp"

// Experiment plumbing: dataset ingestion, synthetic scenario generation,
// factorial mechanism x defense x attack runs, and aggregate reporting.
namespace locpriv::hn {

// ---------------------------------------------------------------------------
// Trajectory ingestion
// ---------------------------------------------------------------------------

struct IngestStats {
    std::size_t rows = 0;        // data rows seen (header excluded)
    std::size_t malformed = 0;   // skipped: wrong shape or unparsable fields
    std::size_t duplicates = 0;  // same-vehicle same-timestamp fixes dropped
    std::size_t merged = 0;      // extra fixes collapsed into an occupied slot
    std::size_t splits = 0;      // trajectory cuts at gaps > 5x the target
};

// Reads `vehicle_id,timestamp,lat,lon` fixes (header row optional), groups
// them by vehicle, sorts by time, drops duplicate timestamps, snaps every
// fix to its nearest node, and resamples to roughly one point per
// `target_gap_s`: fixes are assigned to slot round((t - t0) / gap) and the
// fix closest to the slot center wins.  A gap above 5x the target starts a
// new trajectory ("<vehicle>#2", "#3", ...).  Malformed rows are skipped
// and counted; an input that yields no trajectory at all is an error.
std::vector<vt::Trajectory> ingest_trajectories(const std::string& csv_path,
                                                const roadnet::RoadGraph& graph,
                                                double target_gap_s = 20.0,
                                                IngestStats* stats = nullptr);

// JSON-lines interchange for trajectories: {"id", "t": [...], "node": [...]}.
void save_trajectories(const std::vector<vt::Trajectory>& trajectories,
                       const std::string& path);
std::vector<vt::Trajectory> load_trajectories(const std::string& path);

// ---------------------------------------------------------------------------
// Synthetic scenario
// ---------------------------------------------------------------------------

struct SynthScenario {
    roadnet::RoadGraph graph;
    std::vector<vt::Trajectory> trajectories;
};

// 4-connected grid_w x grid_h road grid with `cell_km` spacing (50 km/h
// travel times) plus `n_traj` momentum random walks of `len` points each:
// the walker picks uniformly among out-neighbours but weights an immediate
// U-turn at 0.25.  A node with no out-arcs repeats itself every 20 s, so a
// 1x1 grid produces stationary trajectories.  Deterministic under seed.
SynthScenario synth_scenario(std::size_t grid_w, std::size_t grid_h, double cell_km,
                             std::size_t n_traj, std::size_t len, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

struct ExperimentConfig {
    // Scenario: either the synthetic grid below, or explicit input files.
    std::size_t grid_w = 20;
    std::size_t grid_h = 20;
    double cell_km = 0.5;
    std::size_t n_trajectories = 100;
    std::size_t trajectory_len = 30;
    std::uint64_t scenario_seed = 42;
    std::string nodes_csv;           // when set, load the graph instead
    std::string edges_csv;
    std::string trajectories_jsonl;  // when set, load trajectories instead

    // Mechanism grid.
    std::vector<std::string> mechanisms = {"laplace", "lp"};
    std::vector<double> epsilons = {5.0, 7.5, 10.0};  // km^-1
    double gamma_km = 1.0;

    // Attacks; empty means mechanisms-only rows (utility metrics only).
    std::vector<std::string> attacks = {"bayes", "viterbi", "vehitrack", "vehitrack-i"};

    // Defense grid; `defense` off runs only unrestricted cells.
    bool defense = false;
    std::vector<std::size_t> defense_k = {10};
    std::vector<double> defense_alpha = {1e4};

    // Obfuscation sampling seeds (one results row per seed and cell).
    std::vector<std::uint64_t> seeds = {1, 2, 3};

    // Attack / defense model training knobs.
    std::size_t samples_per_trajectory = 20;  // Phase-2 draws per trajectory
    std::size_t phase2_epochs = 30;
    std::size_t phase2_hidden = 64;
    std::size_t phase2_layers = 5;
    std::size_t embed_dim = 128;
    std::size_t scorer_epochs = 60;

    std::string output_dir = "results";

    void validate() const;
};

// Strict JSON round-trip: a `version` field is required and unknown keys
// are rejected, so a stale config fails fast instead of running silently
// with defaults.
ExperimentConfig load_config(const std::string& path);
void save_config(const ExperimentConfig& config, const std::string& path);

// ---------------------------------------------------------------------------
// Results
// ---------------------------------------------------------------------------

struct ResultRow {
    std::string mechanism;      // laplace | lp
    std::string defense;        // none | transprotect
    std::size_t K = 0;          // 0 when undefended
    double alpha = 0.0;         // 0 when undefended
    std::string attack;         // none when the attack list is empty
    double epsilon = 0.0;
    std::uint64_t seed = 0;
    std::optional<double> eie_km;          // absent for attack = none
    std::optional<double> utility_loss_s;  // mean delta-cost of the reports
    std::optional<double> elimination;     // absent unless phase-1 ran
    std::string status = "ok";             // or the per-cell error message

    // Stable identity of the experiment cell this row fills.
    std::string key() const;
};

struct ResultsTable {
    std::vector<ResultRow> rows;
};

// Results CSV (no runtimes: those go to a sidecar so that repeated runs
// are byte-identical).
void save_results_csv(const ResultsTable& table, const std::string& path);
ResultsTable load_results_csv(const std::string& path);

// Runs the full factorial (mechanism x epsilon x defense x attack x seed).
// Reports are sampled once per (mechanism, epsilon, defense, seed) and
// shared by every attack.  Completed cells found in `<output_dir>/results.csv`
// are kept as-is, so an interrupted run resumes where it stopped; cell
// failures are recorded in the row status and do not stop the run.  Writes
// results.csv, timings.csv, and summary.json into the output directory.
ResultsTable run_experiment(const ExperimentConfig& config);

// ---------------------------------------------------------------------------
// Reporting
// ---------------------------------------------------------------------------

struct ReportGroup {
    std::string mechanism;
    std::string defense;
    std::size_t K = 0;
    double alpha = 0.0;
    std::string attack;
    double epsilon = 0.0;
    std::size_t n = 0;  // seeds aggregated
    std::optional<double> eie_mean, eie_std;
    std::optional<double> utility_mean, utility_std;
    std::optional<double> elimination_mean, elimination_std;
};

struct Report {
    std::vector<ReportGroup> groups;
    std::string text;  // human-readable summary with defense deltas
};

// Aggregates seed rows into mean +/- population standard deviation per
// cell group and renders percentage deltas of defended vs. undefended EIE.
Report make_report(const ResultsTable& table);

void save_report_csv(const Report& report, const std::string& path);

// "+50.0%" for value = 1.5 * base; sign always printed, one decimal.
std::string format_delta_pct(double base, double value);

}  // namespace locpriv::hn
