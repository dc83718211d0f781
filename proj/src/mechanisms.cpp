#include "locpriv/mechanisms.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "locpriv/csv.hpp"

namespace locpriv::mech {

std::string to_string(Provenance p) {
    switch (p) {
        case Provenance::Laplace: return "laplace";
        case Provenance::Lp: return "lp";
        case Provenance::Restricted: return "restricted";
        case Provenance::HmmTransitions: return "hmm-transitions";
    }
    throw Error("unknown provenance");
}

Provenance provenance_from_string(const std::string& s) {
    if (s == "laplace") return Provenance::Laplace;
    if (s == "lp") return Provenance::Lp;
    if (s == "restricted") return Provenance::Restricted;
    if (s == "hmm-transitions") return Provenance::HmmTransitions;
    throw ConfigError("unknown provenance '" + s + "'");
}

double Support::max_pairwise_km() const {
    double m = 0.0;
    for (std::size_t i = 0; i < size(); ++i)
        for (std::size_t j = i + 1; j < size(); ++j) m = std::max(m, distance_km(i, j));
    return m;
}

void ObfuscationMatrix::validate() const {
    const std::size_t k = size();
    if (support.positions.size() != k)
        throw DimensionMismatch("obfuscation matrix: ids/positions length mismatch");
    if (probs.size() != k * k)
        throw DimensionMismatch("obfuscation matrix: probs must be square over the support");
    for (std::size_t i = 0; i < k; ++i) {
        double row_sum = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            double z = at(i, j);
            if (!(z >= 0.0 && z <= 1.0 + 1e-12) || !std::isfinite(z))
                throw DimensionMismatch("obfuscation matrix: entry outside [0,1]");
            row_sum += z;
        }
        if (std::abs(row_sum - 1.0) > 1e-9)
            throw DimensionMismatch("obfuscation matrix: row " + std::to_string(i) +
                                    " sums to " + std::to_string(row_sum));
    }
}

void UtilityModel::validate() const {
    if (n_targets == 0 || target_dist.size() != n_targets)
        throw DimensionMismatch("utility model: target_dist length mismatch");
    if (n_targets != 0 && costs.size() % n_targets != 0)
        throw DimensionMismatch("utility model: cost table not rectangular");
    double total = 0.0;
    for (double q : target_dist) {
        if (q < 0.0) throw DimensionMismatch("utility model: negative target weight");
        total += q;
    }
    if (std::abs(total - 1.0) > 1e-9)
        throw DimensionMismatch("utility model: target weights must sum to 1");
}

UtilityModel utility_from_graph(const roadnet::RoadGraph& g,
                                const std::vector<roadnet::NodeId>& locations,
                                const std::vector<roadnet::NodeId>& targets,
                                std::vector<double> target_dist, std::size_t bucket) {
    UtilityModel u;
    u.n_targets = targets.size();
    if (target_dist.empty())
        target_dist.assign(targets.size(), targets.empty() ? 0.0 : 1.0 / targets.size());
    u.target_dist = std::move(target_dist);
    u.costs.reserve(locations.size() * targets.size());
    for (roadnet::NodeId loc : locations) {
        auto spt = roadnet::dijkstra_spt(g, loc, bucket);
        for (roadnet::NodeId t : targets) u.costs.push_back(spt.cost[static_cast<std::size_t>(t)]);
    }
    u.validate();
    return u;
}

double delta_cost(std::size_t x, std::size_t v, const UtilityModel& utility) {
    double total = 0.0;
    for (std::size_t l = 0; l < utility.n_targets; ++l) {
        double q = utility.target_dist[l];
        if (q == 0.0) continue;
        double cx = utility.cost(x, l);
        double cv = utility.cost(v, l);
        if (!std::isfinite(cx) || !std::isfinite(cv))
            throw InfiniteCost("delta_cost: unreachable target " + std::to_string(l) +
                               " carries positive weight");
        total += q * std::abs(cx - cv);
    }
    return total;
}

double matrix_utility_loss(const ObfuscationMatrix& Z, const UtilityModel& utility,
                           const std::vector<double>& prior) {
    const std::size_t k = Z.size();
    if (prior.size() != k || utility.n_locations() != k)
        throw DimensionMismatch("matrix_utility_loss: prior/utility size mismatch");
    double ul = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        if (prior[i] == 0.0) continue;
        double row = 0.0;
        for (std::size_t col = 0; col < k; ++col) {
            if (Z.at(i, col) == 0.0) continue;
            row += Z.at(i, col) * delta_cost(i, col, utility);
        }
        ul += prior[i] * row;
    }
    return ul;
}

ObfuscationMatrix laplace_matrix(const Support& support, PrivacyParams params) {
    const std::size_t k = support.size();
    if (k == 0) throw EmptySupport("laplace_matrix: empty support");
    if (!(params.epsilon > 0.0)) throw ConfigError("laplace_matrix: epsilon must be > 0");
    double diameter = support.max_pairwise_km();
    if (params.lambda_max == 0.0) params.lambda_max = diameter;
    if (params.lambda_max + 1e-12 < diameter)
        throw ConfigError("laplace_matrix: lambda_max below the support diameter");

    ObfuscationMatrix Z;
    Z.support = support;
    Z.params = params;
    Z.provenance = Provenance::Laplace;
    Z.probs.assign(k * k, 0.0);
    for (std::size_t i = 0; i < k; ++i) {
        double row_sum = 0.0;
        for (std::size_t col = 0; col < k; ++col) {
            // Degenerate single-point support has lambda_max = 0; every
            // distance is 0 too, so the kernel is the constant 1.
            double scaled = params.lambda_max > 0.0
                                ? support.distance_km(i, col) / params.lambda_max
                                : 0.0;
            double z = std::exp(-params.epsilon * scaled);
            Z.at(i, col) = z;
            row_sum += z;
        }
        for (std::size_t col = 0; col < k; ++col) Z.at(i, col) /= row_sum;
    }
    Z.validate();
    return Z;
}

namespace {

struct GeoIndPair {
    std::size_t i, j;
    double factor;  // exp(epsilon * d_{i,j})
};

std::vector<GeoIndPair> neighbor_pairs(const Support& support, double epsilon, double gamma) {
    std::vector<GeoIndPair> pairs;
    for (std::size_t i = 0; i < support.size(); ++i) {
        for (std::size_t j = 0; j < support.size(); ++j) {
            if (i == j) continue;
            double d = support.distance_km(i, j);
            if (d <= gamma) pairs.push_back({i, j, std::exp(epsilon * d)});
        }
    }
    return pairs;
}

}  // namespace

LpSynthesisResult lp_matrix_detailed(const Support& support, PrivacyParams params,
                                     const UtilityModel& utility,
                                     const std::vector<double>& prior,
                                     const LpOptions& options) {
    const std::size_t k = support.size();
    if (k == 0) throw EmptySupport("lp_matrix: empty support");
    if (k > options.max_support)
        throw SupportTooLarge("lp_matrix: support size " + std::to_string(k) +
                              " exceeds the cap " + std::to_string(options.max_support));
    if (!(params.epsilon > 0.0) || !std::isfinite(params.epsilon) ||
        !std::isfinite(params.gamma))
        throw ConfigError("lp_matrix: epsilon and gamma must be finite, epsilon > 0");
    if (prior.size() != k || utility.n_locations() != k)
        throw DimensionMismatch("lp_matrix: prior/utility size mismatch");
    if (params.lambda_max == 0.0) params.lambda_max = support.max_pairwise_km();

    const std::size_t n_vars = k * k;
    auto var = [k](std::size_t i, std::size_t col) { return i * k + col; };

    std::vector<double> objective(n_vars, 0.0);
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t col = 0; col < k; ++col)
            objective[var(i, col)] = prior[i] * delta_cost(i, col, utility);

    // Row-stochasticity as paired inequalities; z >= 0 is implicit.
    std::vector<lp::Constraint> rows;
    for (std::size_t i = 0; i < k; ++i) {
        lp::Constraint le, ge;
        for (std::size_t col = 0; col < k; ++col) {
            le.terms.push_back({var(i, col), 1.0});
            ge.terms.push_back({var(i, col), -1.0});
        }
        le.rhs = 1.0;
        ge.rhs = -1.0;
        rows.push_back(std::move(le));
        rows.push_back(std::move(ge));
    }

    const std::vector<GeoIndPair> pairs = neighbor_pairs(support, params.epsilon, params.gamma);
    std::vector<char> added(pairs.size() * k, 0);

    lp::DenseSimplexSolver fallback(1e-9);
    lp::Solver* solver = options.solver ? options.solver : &fallback;

    LpSynthesisResult result;
    lp::Solution sol;
    for (std::size_t round = 0; round < options.max_rounds; ++round) {
        // Dense-tableau memory guard: (rows+2) x (n_vars+2) doubles.
        if ((rows.size() + 2) * (n_vars + 2) > 40'000'000)
            throw Error("lp_matrix: active constraint set exceeds the memory budget");
        sol = solver->minimize(objective, rows);
        if (sol.status != lp::Status::Optimal)
            throw Infeasible("lp_matrix: solver returned a non-optimal status; "
                             "uniform rows are always feasible, so this is a solver bug");
        result.rounds = round + 1;

        // Full scan of the cubic constraint family; violated rows enter.
        std::size_t added_now = 0;
        for (std::size_t p = 0; p < pairs.size(); ++p) {
            const auto& pr = pairs[p];
            for (std::size_t col = 0; col < k; ++col) {
                if (added[p * k + col]) continue;
                double slack = sol.x[var(pr.i, col)] - pr.factor * sol.x[var(pr.j, col)];
                if (slack > options.violation_tol) {
                    // Same halfspace scaled by 1/factor: raw coefficients of
                    // {1, -e^{eps*d}} span several orders of magnitude and
                    // smear pivot error across the tableau, which the final
                    // 1e-9 audit then rejects.
                    rows.push_back(
                        {{{var(pr.i, col), 1.0 / pr.factor}, {var(pr.j, col), -1.0}}, 0.0});
                    added[p * k + col] = 1;
                    ++added_now;
                }
            }
        }
        if (added_now == 0) break;
        if (round + 1 == options.max_rounds)
            throw Error("lp_matrix: lazy constraint generation did not converge");
    }

    result.matrix.support = support;
    result.matrix.params = params;
    result.matrix.provenance = Provenance::Lp;
    result.matrix.probs.assign(n_vars, 0.0);
    for (std::size_t i = 0; i < k; ++i) {
        double row_sum = 0.0;
        for (std::size_t col = 0; col < k; ++col) {
            double z = sol.x[var(i, col)];
            if (z < -1e-9 || z > 1.0 + 1e-9)
                throw Infeasible("lp_matrix: solution coordinate outside [0,1]");
            result.matrix.at(i, col) = std::clamp(z, 0.0, 1.0);
            row_sum += result.matrix.at(i, col);
        }
        // An exact vertex has unit row sums; divide the roundoff back out.
        // Anything worse than 1e-6 is not roundoff, so leave it for
        // validate() to reject.
        if (row_sum > 0.0 && std::abs(row_sum - 1.0) <= 1e-6)
            for (std::size_t col = 0; col < k; ++col) result.matrix.at(i, col) /= row_sum;
    }
    result.objective = sol.objective;
    result.active_rows = rows.size() - 2 * k;

    result.matrix.validate();
    auto audit = geo_ind_audit(result.matrix, params.epsilon, params.gamma,
                               options.feasibility_tol);
    if (!audit.violations.empty())
        throw Infeasible("lp_matrix: post-hoc audit found " +
                         std::to_string(audit.violations.size()) + " violations");
    return result;
}

ObfuscationMatrix lp_matrix(const Support& support, PrivacyParams params,
                            const UtilityModel& utility, const std::vector<double>& prior,
                            const LpOptions& options) {
    return lp_matrix_detailed(support, params, utility, prior, options).matrix;
}

GeoIndAuditReport geo_ind_audit(const ObfuscationMatrix& Z, double epsilon, double gamma,
                                double tol) {
    const std::size_t k = Z.size();
    GeoIndAuditReport report;
    for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
            if (i == j) continue;
            double d = Z.support.distance_km(i, j);
            if (d > gamma) continue;
            double factor = std::exp(epsilon * d);
            for (std::size_t col = 0; col < k; ++col) {
                ++report.checked_triples;
                double slack = Z.at(i, col) - factor * Z.at(j, col);
                if (slack > tol) report.violations.push_back({i, j, col, slack});
            }
        }
    }
    report.violation_ratio =
        report.checked_triples == 0
            ? 0.0
            : static_cast<double>(report.violations.size()) /
                  static_cast<double>(report.checked_triples);
    return report;
}

std::string GeoIndAuditReport::to_json() const {
    nlohmann::json j;
    j["checked_triples"] = checked_triples;
    j["violation_ratio"] = violation_ratio;
    j["violations"] = nlohmann::json::array();
    for (const auto& v : violations)
        j["violations"].push_back({{"i", v.i}, {"j", v.j}, {"k", v.k}, {"slack", v.slack}});
    return j.dump(2);
}

std::size_t sample_obfuscated(const ObfuscationMatrix& Z, std::size_t i, Rng& rng) {
    if (i >= Z.size()) throw UnknownRow("sample_obfuscated: row " + std::to_string(i));
    std::vector<double> row(Z.size());
    for (std::size_t col = 0; col < Z.size(); ++col) row[col] = Z.at(i, col);
    return rng.categorical(row);
}

void save_matrix(const ObfuscationMatrix& Z, const std::string& csv_path,
                 const std::string& json_path) {
    std::ostringstream out;
    out << "row_loc,col_loc,prob\n";
    for (std::size_t i = 0; i < Z.size(); ++i)
        for (std::size_t col = 0; col < Z.size(); ++col)
            out << Z.support.ids[i] << ',' << Z.support.ids[col] << ','
                << csv::format_double(Z.at(i, col)) << '\n';
    csv::write_text(csv_path, out.str());

    nlohmann::json j;
    j["version"] = 1;
    j["epsilon"] = Z.params.epsilon;
    j["gamma"] = Z.params.gamma;
    j["lambda_max"] = Z.params.lambda_max;
    j["provenance"] = to_string(Z.provenance);
    j["support"] = nlohmann::json::array();
    for (std::size_t i = 0; i < Z.size(); ++i)
        j["support"].push_back({{"id", Z.support.ids[i]},
                                {"lat", Z.support.positions[i].lat},
                                {"lon", Z.support.positions[i].lon}});
    csv::write_text(json_path, j.dump(2));
}

ObfuscationMatrix load_matrix(const std::string& csv_path, const std::string& json_path) {
    std::ifstream jin(json_path);
    if (!jin) throw IoError("cannot open sidecar: " + json_path);
    nlohmann::json j = nlohmann::json::parse(jin);

    ObfuscationMatrix Z;
    Z.params.epsilon = j.at("epsilon").get<double>();
    Z.params.gamma = j.at("gamma").get<double>();
    Z.params.lambda_max = j.at("lambda_max").get<double>();
    Z.provenance = provenance_from_string(j.at("provenance").get<std::string>());
    std::unordered_map<std::int64_t, std::size_t> index;
    for (const auto& s : j.at("support")) {
        std::int64_t id = s.at("id").get<std::int64_t>();
        index.emplace(id, Z.support.ids.size());
        Z.support.ids.push_back(id);
        Z.support.positions.push_back({s.at("lat").get<double>(), s.at("lon").get<double>()});
    }

    const std::size_t k = Z.size();
    Z.probs.assign(k * k, -1.0);
    auto lines = csv::read_lines(csv_path);
    if (lines.empty() || lines[0] != "row_loc,col_loc,prob")
        throw MalformedRow(csv_path + ": expected header row_loc,col_loc,prob");
    if (lines.size() - 1 != k * k)
        throw MalformedRow(csv_path + ": expected " + std::to_string(k * k) + " data rows");
    for (std::size_t r = 1; r < lines.size(); ++r) {
        auto f = csv::split(lines[r]);
        if (f.size() != 3) throw MalformedRow(csv_path + ": row needs 3 fields");
        auto ri = index.find(csv::parse_int(f[0], csv_path));
        auto ci = index.find(csv::parse_int(f[1], csv_path));
        if (ri == index.end() || ci == index.end())
            throw MalformedRow(csv_path + ": location id not in sidecar support");
        Z.probs[ri->second * k + ci->second] = csv::parse_double(f[2], csv_path);
    }
    for (double p : Z.probs)
        if (p < 0.0) throw MalformedRow(csv_path + ": matrix cell missing or negative");
    Z.validate();
    return Z;
}

std::vector<double> uniform_prior(std::size_t n) {
    if (n == 0) throw EmptySupport("uniform_prior: n must be positive");
    return std::vector<double>(n, 1.0 / static_cast<double>(n));
}

std::vector<std::size_t> support_positions(const Support& support,
                                           const roadnet::RoadGraph& graph) {
    std::unordered_map<roadnet::NodeId, std::size_t> by_id;
    by_id.reserve(support.ids.size());
    for (std::size_t k = 0; k < support.ids.size(); ++k) by_id.emplace(support.ids[k], k);
    std::vector<std::size_t> positions(graph.size(), kNoSupportPosition);
    for (std::size_t v = 0; v < graph.size(); ++v) {
        auto it = by_id.find(graph.original_id(v));
        if (it != by_id.end()) positions[v] = it->second;
    }
    return positions;
}

}  // namespace locpriv::mech
