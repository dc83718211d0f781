#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "locpriv/errors.hpp"
#include "locpriv/lp_solver.hpp"
#include "locpriv/rng.hpp"
#include "locpriv/roadnet.hpp"

namespace locpriv::mech {

// Privacy budget and geometry bounds for one mechanism.  epsilon is per
// km, gamma bounds which location pairs must be indistinguishable, and
// lambda_max is the support diameter used to scale the Laplace kernel.
// lambda_max == 0 means "compute from the support's pairwise distances".
struct PrivacyParams {
    double epsilon = 0.0;     // 1/km
    double gamma = 0.0;       // km
    double lambda_max = 0.0;  // km
};

enum class Provenance { Laplace, Lp, Restricted, HmmTransitions };

std::string to_string(Provenance p);
Provenance provenance_from_string(const std::string& s);

// The location set a mechanism is defined over: external ids plus their
// coordinates, index-aligned.
struct Support {
    std::vector<std::int64_t> ids;
    std::vector<roadnet::GeoPoint> positions;

    std::size_t size() const { return ids.size(); }
    double distance_km(std::size_t i, std::size_t j) const {
        return roadnet::haversine_km(positions[i], positions[j]);
    }
    double max_pairwise_km() const;
};

// Row-stochastic obfuscation channel over a support: row = real location,
// column = reported location.
struct ObfuscationMatrix {
    Support support;
    std::vector<double> probs;  // row-major size() x size()
    PrivacyParams params;
    Provenance provenance = Provenance::Laplace;

    std::size_t size() const { return support.size(); }
    double at(std::size_t row, std::size_t col) const { return probs[row * size() + col]; }
    double& at(std::size_t row, std::size_t col) { return probs[row * size() + col]; }

    // Checks squareness, entry range, and row sums within 1e-9.
    void validate() const;
};

// Travel costs from each support location to each utility target, plus
// the target weighting q.  Kept as a dense table so mechanism synthesis
// never needs a live graph.
struct UtilityModel {
    std::vector<double> target_dist;  // q over targets, sums to 1
    std::vector<double> costs;        // row-major n_locations x n_targets, seconds
    std::size_t n_targets = 0;

    std::size_t n_locations() const {
        return n_targets == 0 ? 0 : costs.size() / n_targets;
    }
    double cost(std::size_t loc, std::size_t target) const {
        return costs[loc * n_targets + target];
    }
    void validate() const;
};

// Dijkstra-backed builder: rows = `locations`, targets = `targets`,
// weighted by `target_dist` (uniform when empty).
UtilityModel utility_from_graph(const roadnet::RoadGraph& g,
                                const std::vector<roadnet::NodeId>& locations,
                                const std::vector<roadnet::NodeId>& targets,
                                std::vector<double> target_dist = {}, std::size_t bucket = 0);

// Expected travel-cost error caused by reporting v instead of x:
// sum over targets l of q_l * |c(x,l) - c(v,l)|.
double delta_cost(std::size_t x, std::size_t v, const UtilityModel& utility);

// Prior-weighted expected delta_cost of a whole matrix.
double matrix_utility_loss(const ObfuscationMatrix& Z, const UtilityModel& utility,
                           const std::vector<double>& prior);

// Planar-Laplace mechanism: row i proportional to exp(-eps * d(i,k) / lambda_max).
ObfuscationMatrix laplace_matrix(const Support& support, PrivacyParams params);

struct LpOptions {
    std::size_t max_support = 60;     // K_s cap for the K_s^2-variable LP
    double feasibility_tol = 1e-9;    // final audit tolerance
    double violation_tol = 1e-10;     // lazy-row activation threshold
    std::size_t max_rounds = 200;
    lp::Solver* solver = nullptr;     // defaults to the dense simplex
};

struct LpSynthesisResult {
    ObfuscationMatrix matrix;
    double objective = 0.0;     // utility loss at the optimum
    std::size_t active_rows = 0;  // indistinguishability rows the solver saw
    std::size_t rounds = 0;
};

// Optimal-utility mechanism: minimize prior-weighted expected delta_cost
// subject to row-stochasticity and the pairwise indistinguishability
// constraints z_{i,k} <= exp(eps*d_{i,j}) * z_{j,k} for d_{i,j} <= gamma.
// The full constraint set is cubic in the support size, so rows enter
// lazily: solve, scan everything, add what is violated, repeat until the
// full scan is clean at violation_tol.  The result is re-audited at
// feasibility_tol before it is returned.
LpSynthesisResult lp_matrix_detailed(const Support& support, PrivacyParams params,
                                     const UtilityModel& utility,
                                     const std::vector<double>& prior,
                                     const LpOptions& options = {});
ObfuscationMatrix lp_matrix(const Support& support, PrivacyParams params,
                            const UtilityModel& utility, const std::vector<double>& prior,
                            const LpOptions& options = {});

struct GeoIndViolation {
    std::size_t i = 0, j = 0, k = 0;
    double slack = 0.0;  // z_{i,k} - exp(eps*d_{i,j}) * z_{j,k}, > tol
};

struct GeoIndAuditReport {
    std::size_t checked_triples = 0;
    std::vector<GeoIndViolation> violations;
    double violation_ratio = 0.0;

    std::string to_json() const;
};

// Exhaustively checks the indistinguishability constraints over every
// ordered pair (i, j), i != j, with d_{i,j} <= gamma, and every column.
GeoIndAuditReport geo_ind_audit(const ObfuscationMatrix& Z, double epsilon, double gamma,
                                double tol);

// Draws a reported-location column for true row i.
std::size_t sample_obfuscated(const ObfuscationMatrix& Z, std::size_t i, Rng& rng);

// CSV (`row_loc,col_loc,prob`) plus a JSON sidecar carrying params,
// provenance, and support geometry, so a saved matrix is self-contained.
void save_matrix(const ObfuscationMatrix& Z, const std::string& csv_path,
                 const std::string& json_path);
ObfuscationMatrix load_matrix(const std::string& csv_path, const std::string& json_path);

// Uniform probability vector of length n.
std::vector<double> uniform_prior(std::size_t n);

// Position of each graph node inside a support keyed by original node ids
// (kNoSupportPosition for nodes the support does not cover).
inline constexpr std::size_t kNoSupportPosition = static_cast<std::size_t>(-1);
std::vector<std::size_t> support_positions(const Support& support,
                                           const roadnet::RoadGraph& graph);

}  // namespace locpriv::mech
