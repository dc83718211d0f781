#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <vector>

#include "locpriv/mechanisms.hpp"
#include "locpriv/vehitrack.hpp"

using namespace locpriv;
using namespace locpriv::vt;

namespace {

namespace fs = std::filesystem;

constexpr double kInf = std::numeric_limits<double>::infinity();

// ---------------------------------------------------------------------------
// Fixture graphs and channels
// ---------------------------------------------------------------------------

// nx x ny lattice around (45 N, 9 E) with ~spacing_km between neighbours
// and arcs in both directions whose travel time matches `speed_kmh`, so a
// speed limit of `speed_kmh` makes adjacent hops reachable.
roadnet::RoadGraph make_grid(std::size_t nx, std::size_t ny, double spacing_km,
                             double speed_kmh) {
    const double dlat = spacing_km / 111.19492664455873;
    const double dlon = spacing_km / (111.19492664455873 * std::cos(45.0 * M_PI / 180.0));
    std::vector<roadnet::NodeSpec> nodes;
    for (std::size_t y = 0; y < ny; ++y)
        for (std::size_t x = 0; x < nx; ++x)
            nodes.push_back({static_cast<std::int64_t>(y * nx + x),
                             {45.0 + static_cast<double>(y) * dlat,
                              9.0 + static_cast<double>(x) * dlon}});
    std::vector<roadnet::EdgeSpec> edges;
    auto connect = [&](std::size_t a, std::size_t b) {
        const double d = roadnet::haversine_km(nodes[a].pos, nodes[b].pos);
        const double w = d / speed_kmh * 3600.0;
        edges.push_back({nodes[a].id, nodes[b].id, w, 0});
        edges.push_back({nodes[b].id, nodes[a].id, w, 0});
    };
    for (std::size_t y = 0; y < ny; ++y)
        for (std::size_t x = 0; x < nx; ++x) {
            if (x + 1 < nx) connect(y * nx + x, y * nx + x + 1);
            if (y + 1 < ny) connect(y * nx + x, (y + 1) * nx + x);
        }
    return roadnet::build_graph(nodes, edges);
}

// Support spanning every graph node, keyed by original ids.
mech::Support full_support(const roadnet::RoadGraph& g) {
    mech::Support s;
    for (roadnet::NodeId v = 0; v < static_cast<roadnet::NodeId>(g.size()); ++v) {
        s.ids.push_back(g.original_id(v));
        s.positions.push_back(g.pos(v));
    }
    return s;
}

mech::ObfuscationMatrix identity_channel(const roadnet::RoadGraph& g) {
    mech::ObfuscationMatrix Z;
    Z.support = full_support(g);
    const std::size_t n = Z.support.size();
    Z.probs.assign(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) Z.probs[i * n + i] = 1.0;
    Z.params = {1.0, 1.0, 1.0};
    Z.validate();
    return Z;
}

// Channel with explicitly given rows (normalized here).
mech::ObfuscationMatrix channel_from_rows(const roadnet::RoadGraph& g,
                                          std::vector<std::vector<double>> rows) {
    mech::ObfuscationMatrix Z;
    Z.support = full_support(g);
    const std::size_t n = Z.support.size();
    REQUIRE(rows.size() == n);
    Z.probs.assign(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        REQUIRE(rows[i].size() == n);
        double total = 0.0;
        for (double v : rows[i]) total += v;
        REQUIRE(total > 0.0);
        for (std::size_t k = 0; k < n; ++k) Z.probs[i * n + k] = rows[i][k] / total;
    }
    Z.params = {1.0, 1.0, 1.0};
    Z.validate();
    return Z;
}

ObservationSequence make_obs(const std::vector<double>& times,
                             const std::vector<roadnet::NodeId>& reported,
                             const mech::ObfuscationMatrix& Z) {
    ObservationSequence obs;
    obs.trajectory_id = "t";
    for (std::size_t n = 0; n < times.size(); ++n)
        obs.slots.push_back({times[n], reported[n], &Z});
    return obs;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

// ---------------------------------------------------------------------------
// Exhaustive oracle: the slot-chained filter re-derived with dense matrices
// and Bellman-Ford reachability, no shared code beyond the unit helpers.
// ---------------------------------------------------------------------------

struct OracleInstance {
    std::vector<roadnet::GeoPoint> pos;
    std::vector<std::vector<double>> w;  // seconds, kInf = no arc

    std::size_t size() const { return pos.size(); }
};

std::vector<std::size_t> ora_ball(const OracleInstance& g, std::size_t center,
                                  double radius_km) {
    std::vector<std::size_t> out;
    for (std::size_t v = 0; v < g.size(); ++v)
        if (v == center || roadnet::haversine_km(g.pos[center], g.pos[v]) <= radius_km)
            out.push_back(v);
    return out;
}

// Shortest-path costs from root inside the induced subgraph, by repeated
// relaxation until fixpoint.
std::vector<double> ora_costs_within(const OracleInstance& g, std::size_t root,
                                     const std::vector<std::size_t>& members) {
    std::vector<char> in(g.size(), 0);
    for (std::size_t m : members) in[m] = 1;
    std::vector<double> cost(g.size(), kInf);
    cost[root] = 0.0;
    for (std::size_t pass = 0; pass + 1 < g.size(); ++pass)
        for (std::size_t i : members)
            for (std::size_t j : members)
                if (g.w[i][j] < kInf && cost[i] + g.w[i][j] < cost[j])
                    cost[j] = cost[i] + g.w[i][j];
    return cost;
}

std::vector<std::size_t> ora_reachable(const OracleInstance& g, std::size_t i, double dt,
                                       double s_limit) {
    const auto ball = ora_ball(g, i, roadnet::speed_radius_km(dt, s_limit));
    const auto cost = ora_costs_within(g, i, ball);
    std::vector<std::size_t> out;
    for (std::size_t v : ball)
        if (cost[v] <= dt) out.push_back(v);
    return out;
}

struct OracleSlot {
    std::vector<std::size_t> reachable;
    std::vector<double> raw;
    std::vector<std::size_t> possible;
    std::vector<double> renormalized;
    bool fallback = false;
};

std::vector<OracleSlot> ora_phase1(const OracleInstance& g,
                                   const std::vector<std::vector<double>>& Z,
                                   const std::vector<double>& times,
                                   const std::vector<std::size_t>& reported,
                                   const std::vector<double>& prior, double xi,
                                   double s_limit) {
    std::vector<OracleSlot> out(times.size());
    std::vector<std::size_t> prev;
    for (std::size_t n = 0; n < times.size(); ++n) {
        OracleSlot& slot = out[n];
        const std::size_t y = reported[n];

        if (n == 0) {
            double span = 0.0;
            for (std::size_t k = 0; k < g.size(); ++k)
                if (Z[k][y] > 0.0)
                    span = std::max(span, roadnet::haversine_km(g.pos[k], g.pos[y]));
            slot.reachable =
                ora_ball(g, y, roadnet::speed_radius_km(3600.0, span + 1e-9));
        } else {
            const double dt = times[n] - times[n - 1];
            std::set<std::size_t> merged;
            for (std::size_t v : prev)
                for (std::size_t m : ora_reachable(g, v, dt, s_limit)) merged.insert(m);
            slot.reachable.assign(merged.begin(), merged.end());
        }

        slot.raw.assign(slot.reachable.size(), 0.0);
        double mass = 0.0;
        for (std::size_t k = 0; k < slot.reachable.size(); ++k) {
            slot.raw[k] = prior[slot.reachable[k]] * Z[slot.reachable[k]][y];
            mass += slot.raw[k];
        }
        if (mass > 0.0) {
            for (double& v : slot.raw) v /= mass;
            for (std::size_t k = 0; k < slot.reachable.size(); ++k)
                if (slot.raw[k] > 0.0 && slot.raw[k] >= xi)
                    slot.possible.push_back(slot.reachable[k]);
        } else {
            double total = 0.0;
            for (std::size_t v : slot.reachable) total += prior[v];
            for (std::size_t k = 0; k < slot.reachable.size(); ++k)
                slot.raw[k] = total > 0.0
                                  ? prior[slot.reachable[k]] / total
                                  : 1.0 / static_cast<double>(slot.reachable.size());
            slot.fallback = true;
        }
        if (slot.possible.empty()) {
            std::size_t best = 0;
            for (std::size_t k = 1; k < slot.raw.size(); ++k)
                if (slot.raw[k] > slot.raw[best]) best = k;
            slot.possible.push_back(slot.reachable[best]);
            slot.fallback = true;
        }

        double kept = 0.0;
        for (std::size_t k = 0; k < slot.reachable.size(); ++k)
            for (std::size_t p : slot.possible)
                if (slot.reachable[k] == p) kept += slot.raw[k];
        for (std::size_t p : slot.possible)
            for (std::size_t k = 0; k < slot.reachable.size(); ++k)
                if (slot.reachable[k] == p) slot.renormalized.push_back(slot.raw[k] / kept);

        prev = slot.possible;
    }
    return out;
}

// Random small instance: connected chain plus extra arcs, coordinates in a
// ~2 km box, row-stochastic channel with plenty of structural zeros.
struct RandomCase {
    OracleInstance oracle;
    roadnet::RoadGraph graph;
    mech::ObfuscationMatrix Z;
    std::vector<std::vector<double>> z_rows;
    std::vector<double> prior;
    std::vector<double> times;
    std::vector<std::size_t> reported;
    double xi = 0.0;
    double s_limit = 0.0;
};

RandomCase make_random_case(Rng& rng) {
    RandomCase c;
    const std::size_t n = 3 + rng.index(6);  // 3..8 nodes
    std::vector<roadnet::NodeSpec> nodes;
    for (std::size_t v = 0; v < n; ++v) {
        roadnet::GeoPoint p{45.0 + rng.uniform(-0.008, 0.008), 9.0 + rng.uniform(-0.011, 0.011)};
        c.oracle.pos.push_back(p);
        nodes.push_back({static_cast<std::int64_t>(v), p});
    }
    c.oracle.w.assign(n, std::vector<double>(n, kInf));
    std::vector<roadnet::EdgeSpec> edges;
    auto arc = [&](std::size_t i, std::size_t j) {
        if (i == j || c.oracle.w[i][j] < kInf) return;
        const double d = roadnet::haversine_km(c.oracle.pos[i], c.oracle.pos[j]);
        const double w = std::max(1.0, d / rng.uniform(15.0, 60.0) * 3600.0);
        c.oracle.w[i][j] = w;
        edges.push_back({static_cast<std::int64_t>(i), static_cast<std::int64_t>(j), w, 0});
    };
    for (std::size_t v = 0; v + 1 < n; ++v) {
        arc(v, v + 1);
        arc(v + 1, v);
    }
    for (std::size_t e = 0; e < n; ++e) arc(rng.index(n), rng.index(n));
    c.graph = roadnet::build_graph(nodes, edges);

    c.z_rows.assign(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
        double total = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
            const double v = rng.u01() < 0.4 ? 0.0 : rng.uniform(0.05, 1.0);
            c.z_rows[i][k] = v;
            total += v;
        }
        if (total == 0.0) {
            c.z_rows[i][i] = 1.0;
            total = 1.0;
        }
        for (std::size_t k = 0; k < n; ++k) c.z_rows[i][k] /= total;
    }
    c.Z.support = full_support(c.graph);
    c.Z.probs.assign(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < n; ++k) c.Z.probs[i * n + k] = c.z_rows[i][k];
    c.Z.params = {1.0, 1.0, 1.0};
    c.Z.validate();

    for (std::size_t v = 0; v < n; ++v) c.prior.push_back(rng.uniform(0.05, 1.0));

    const std::size_t slots = 1 + rng.index(5);  // 1..5 slots
    double t = rng.uniform(0.0, 1000.0);
    for (std::size_t s = 0; s < slots; ++s) {
        c.times.push_back(t);
        t += rng.uniform(5.0, 40.0);
        c.reported.push_back(rng.index(n));
    }
    const double xis[] = {0.0, 1e-4, 0.03, 0.15};
    c.xi = xis[rng.index(4)];
    c.s_limit = rng.uniform(20.0, 80.0);
    return c;
}

}  // namespace

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

TEST_CASE("trajectory and observation validation") {
    auto g = make_grid(3, 3, 0.4, 30.0);
    auto Z = identity_channel(g);

    SUBCASE("empty trajectory rejected") {
        Trajectory t{"empty", {}};
        CHECK_THROWS_AS(t.validate(g), EmptyResult);
    }
    SUBCASE("non-increasing timestamps rejected") {
        Trajectory t{"t", {{0.0, 0}, {0.0, 1}}};
        CHECK_THROWS_AS(t.validate(g), ConfigError);
    }
    SUBCASE("unknown node rejected") {
        Trajectory t{"t", {{0.0, 99}}};
        CHECK_THROWS_AS(t.validate(g), UnknownNode);
    }
    SUBCASE("null channel rejected") {
        ObservationSequence obs;
        obs.slots.push_back({0.0, 0, nullptr});
        CHECK_THROWS_AS(obs.validate(g), MatrixMissing);
    }
    SUBCASE("empty sequence rejected") {
        ObservationSequence obs;
        CHECK_THROWS_AS(obs.validate(g), EmptyResult);
    }
    SUBCASE("phase1 rejects bad options and priors") {
        auto obs = make_obs({0.0}, {0}, Z);
        auto prior = mech::uniform_prior(g.size());
        Phase1Options opt;
        opt.xi = -1.0;
        CHECK_THROWS_AS(phase1_posteriors(obs, g, prior, opt), ConfigError);
        opt = {};
        opt.s_limit_kmh = 0.0;
        CHECK_THROWS_AS(phase1_posteriors(obs, g, prior, opt), ConfigError);
        CHECK_THROWS_AS(phase1_posteriors(obs, g, {1.0, 1.0}, {}), DimensionMismatch);
        CHECK_THROWS_AS(phase1_posteriors(obs, g, std::vector<double>(g.size(), 0.0), {}),
                        ConfigError);
    }
}

// ---------------------------------------------------------------------------
// Phase 1 against the exhaustive oracle
// ---------------------------------------------------------------------------

TEST_CASE("phase1 matches the exhaustive Bayes oracle on random small instances") {
    Rng rng(20260814);
    std::size_t fallbacks_seen = 0;
    for (std::size_t trial = 0; trial < 60; ++trial) {
        RandomCase c = make_random_case(rng);
        auto obs = make_obs(c.times, std::vector<roadnet::NodeId>(c.reported.begin(),
                                                                  c.reported.end()),
                            c.Z);
        Phase1Options opt;
        opt.xi = c.xi;
        opt.s_limit_kmh = c.s_limit;
        PosteriorSequence got = phase1_posteriors(obs, c.graph, c.prior, opt);
        auto want = ora_phase1(c.oracle, c.z_rows, c.times, c.reported, c.prior, c.xi,
                               c.s_limit);

        REQUIRE(got.size() == want.size());
        for (std::size_t n = 0; n < got.size(); ++n) {
            const SlotPosterior& a = got.slots[n];
            const OracleSlot& b = want[n];
            REQUIRE(a.reachable.size() == b.reachable.size());
            for (std::size_t k = 0; k < a.reachable.size(); ++k) {
                CHECK(a.reachable[k] == static_cast<roadnet::NodeId>(b.reachable[k]));
                CHECK(std::abs(a.raw[k] - b.raw[k]) < 1e-12);
            }
            REQUIRE(a.possible.size() == b.possible.size());
            for (std::size_t k = 0; k < a.possible.size(); ++k) {
                CHECK(a.possible[k] == static_cast<roadnet::NodeId>(b.possible[k]));
                CHECK(std::abs(a.renormalized[k] - b.renormalized[k]) < 1e-12);
            }
            CHECK(a.fallback == b.fallback);
            fallbacks_seen += a.fallback ? 1 : 0;

            // Structural invariants alongside the oracle comparison.
            double raw_sum = 0.0;
            for (double v : a.raw) raw_sum += v;
            CHECK(raw_sum == doctest::Approx(1.0).epsilon(1e-9));
            double renorm_sum = 0.0;
            for (double v : a.renormalized) renorm_sum += v;
            CHECK(renorm_sum == doctest::Approx(1.0).epsilon(1e-9));
            for (roadnet::NodeId v : a.possible)
                CHECK(std::binary_search(a.reachable.begin(), a.reachable.end(), v));
        }
    }
    // The channel zeros must have exercised the degenerate-slot path.
    CHECK(fallbacks_seen > 0);
}

TEST_CASE("phase1 on a hand-built six-node three-slot instance") {
    // Line 0-1-2-3-4-5 with a shortcut 1->4; the oracle re-derives every
    // quantity from the same dense inputs.
    OracleInstance og;
    std::vector<roadnet::NodeSpec> nodes;
    for (std::size_t v = 0; v < 6; ++v) {
        roadnet::GeoPoint p{45.0, 9.0 + 0.005 * static_cast<double>(v)};
        og.pos.push_back(p);
        nodes.push_back({static_cast<std::int64_t>(v), p});
    }
    og.w.assign(6, std::vector<double>(6, kInf));
    std::vector<roadnet::EdgeSpec> edges;
    auto arc = [&](std::size_t i, std::size_t j, double w) {
        og.w[i][j] = w;
        edges.push_back({static_cast<std::int64_t>(i), static_cast<std::int64_t>(j), w, 0});
    };
    for (std::size_t v = 0; v + 1 < 6; ++v) {
        arc(v, v + 1, 30.0);
        arc(v + 1, v, 30.0);
    }
    arc(1, 4, 45.0);
    auto graph = roadnet::build_graph(nodes, edges);

    std::vector<std::vector<double>> rows = {
        {0.5, 0.3, 0.2, 0.0, 0.0, 0.0}, {0.2, 0.5, 0.2, 0.1, 0.0, 0.0},
        {0.0, 0.3, 0.4, 0.3, 0.0, 0.0}, {0.0, 0.0, 0.2, 0.5, 0.3, 0.0},
        {0.0, 0.0, 0.0, 0.3, 0.5, 0.2}, {0.0, 0.0, 0.0, 0.0, 0.4, 0.6}};
    auto Z = channel_from_rows(graph, rows);
    std::vector<double> prior = {0.3, 0.1, 0.2, 0.15, 0.15, 0.1};
    std::vector<double> times = {100.0, 160.0, 220.0};
    std::vector<std::size_t> reported = {1, 2, 4};

    auto obs = make_obs(times, {1, 2, 4}, Z);
    Phase1Options opt;
    opt.xi = 1e-4;
    opt.s_limit_kmh = 60.0;
    auto got = phase1_posteriors(obs, graph, prior, opt);
    auto want = ora_phase1(og, rows, times, reported, prior, opt.xi, opt.s_limit_kmh);

    REQUIRE(got.size() == 3);
    for (std::size_t n = 0; n < 3; ++n) {
        REQUIRE(got.slots[n].possible.size() == want[n].possible.size());
        for (std::size_t k = 0; k < got.slots[n].possible.size(); ++k) {
            CHECK(got.slots[n].possible[k] ==
                  static_cast<roadnet::NodeId>(want[n].possible[k]));
            CHECK(std::abs(got.slots[n].renormalized[k] - want[n].renormalized[k]) < 1e-12);
        }
    }
}

TEST_CASE("identical channel rows reduce the posterior to the restricted prior") {
    auto g = make_grid(3, 3, 0.4, 30.0);
    std::vector<std::vector<double>> rows(9, {1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 1.0, 2.0, 1.0});
    auto Z = channel_from_rows(g, rows);
    std::vector<double> prior;
    Rng rng(7);
    for (std::size_t v = 0; v < 9; ++v) prior.push_back(rng.uniform(0.1, 1.0));

    Phase1Options opt;
    opt.xi = 0.0;
    opt.s_limit_kmh = 40.0;
    auto post = phase1_posteriors(make_obs({0.0, 60.0, 120.0}, {4, 4, 3}, Z), g, prior, opt);
    for (const SlotPosterior& slot : post.slots) {
        double total = 0.0;
        for (roadnet::NodeId v : slot.reachable) total += prior[static_cast<std::size_t>(v)];
        for (std::size_t k = 0; k < slot.reachable.size(); ++k)
            CHECK(std::abs(slot.raw[k] -
                           prior[static_cast<std::size_t>(slot.reachable[k])] / total) <
                  1e-12);
    }
}

TEST_CASE("threshold semantics") {
    auto g = make_grid(3, 3, 0.4, 30.0);
    Rng rng(99);
    std::vector<std::vector<double>> rows(9);
    for (auto& r : rows) {
        r.assign(9, 0.0);
        for (std::size_t k = 0; k < 9; ++k) r[k] = rng.u01() < 0.5 ? 0.0 : rng.uniform(0.1, 1.0);
        if (std::count(r.begin(), r.end(), 0.0) == 9) r[0] = 1.0;
    }
    auto Z = channel_from_rows(g, rows);
    auto prior = mech::uniform_prior(9);
    auto obs = make_obs({0.0, 60.0, 120.0}, {4, 1, 5}, Z);

    SUBCASE("xi = 0 keeps exactly the positive-posterior members") {
        Phase1Options opt;
        opt.xi = 0.0;
        opt.s_limit_kmh = 40.0;
        auto post = phase1_posteriors(obs, g, prior, opt);
        for (const SlotPosterior& slot : post.slots) {
            if (slot.fallback) continue;
            std::vector<roadnet::NodeId> positive;
            for (std::size_t k = 0; k < slot.reachable.size(); ++k)
                if (slot.raw[k] > 0.0) positive.push_back(slot.reachable[k]);
            CHECK(slot.possible == positive);
        }
    }
    SUBCASE("slot-1 possible sets nest as xi grows") {
        Phase1Options lo, hi;
        lo.xi = 1e-4;
        hi.xi = 0.2;
        lo.s_limit_kmh = hi.s_limit_kmh = 40.0;
        auto post_lo = phase1_posteriors(obs, g, prior, lo);
        auto post_hi = phase1_posteriors(obs, g, prior, hi);
        for (roadnet::NodeId v : post_hi.slots[0].possible)
            CHECK(std::binary_search(post_lo.slots[0].possible.begin(),
                                     post_lo.slots[0].possible.end(), v));
    }
    SUBCASE("thresholding a fixed raw posterior is monotone in xi") {
        Phase1Options opt;
        opt.xi = 0.0;
        opt.s_limit_kmh = 40.0;
        auto post = phase1_posteriors(obs, g, prior, opt);
        for (const SlotPosterior& slot : post.slots) {
            for (double xi1 : {1e-4, 0.05}) {
                const double xi2 = xi1 * 10.0;
                std::vector<roadnet::NodeId> s1, s2;
                for (std::size_t k = 0; k < slot.reachable.size(); ++k) {
                    if (slot.raw[k] > 0.0 && slot.raw[k] >= xi1)
                        s1.push_back(slot.reachable[k]);
                    if (slot.raw[k] > 0.0 && slot.raw[k] >= xi2)
                        s2.push_back(slot.reachable[k]);
                }
                for (roadnet::NodeId v : s2) CHECK(std::binary_search(s1.begin(), s1.end(), v));
            }
        }
    }
}

TEST_CASE("identity channel recovers the true trajectory") {
    auto g = make_grid(3, 3, 0.4, 30.0);
    auto Z = identity_channel(g);
    std::vector<roadnet::NodeId> truth = {0, 1, 2, 5, 8};
    std::vector<double> times = {0.0, 60.0, 120.0, 180.0, 240.0};
    auto post = phase1_posteriors(make_obs(times, truth, Z), g, mech::uniform_prior(9), {});
    CHECK(post.fallback_count() == 0);
    CHECK(phase1_argmax(post) == truth);
    for (const SlotPosterior& slot : post.slots) {
        REQUIRE(slot.possible.size() == 1);
        CHECK(slot.renormalized[0] == 1.0);
    }
}

TEST_CASE("degenerate slots: fallback and throw") {
    // Two nodes 10 km apart joined by a slow arc; at 1 km/h nothing but the
    // origin is reachable within a second, so an identity report from the far
    // node has zero likelihood over the reachable set.
    std::vector<roadnet::NodeSpec> nodes = {{0, {45.0, 9.0}}, {1, {45.09, 9.0}}};
    std::vector<roadnet::EdgeSpec> edges = {{0, 1, 3600.0, 0}, {1, 0, 3600.0, 0}};
    auto g = roadnet::build_graph(nodes, edges);
    auto Z = identity_channel(g);
    auto obs = make_obs({0.0, 1.0}, {0, 1}, Z);
    std::vector<double> prior = {0.7, 0.3};

    Phase1Options opt;
    opt.s_limit_kmh = 1.0;
    SUBCASE("fallback keeps the chain alive and is flagged") {
        auto post = phase1_posteriors(obs, g, prior, opt);
        REQUIRE(post.size() == 2);
        CHECK(post.slots[0].fallback == false);
        CHECK(post.slots[1].fallback == true);
        CHECK(post.fallback_count() == 1);
        // Reachable set is {0}; the fallback retains its top prior member.
        CHECK(post.slots[1].possible == std::vector<roadnet::NodeId>{0});
        CHECK(post.slots[1].renormalized == std::vector<double>{1.0});
    }
    SUBCASE("throw_on_degenerate raises instead") {
        opt.throw_on_degenerate = true;
        CHECK_THROWS_AS(phase1_posteriors(obs, g, prior, opt), DegenerateSlot);
    }
}

TEST_CASE("first-slot ball override") {
    auto g = make_grid(3, 3, 0.4, 30.0);
    auto Z = mech::laplace_matrix(full_support(g), {2.0, 1.0, 0.0});
    auto obs = make_obs({0.0}, {4}, Z);

    // Fully positive kernel: the derived bootstrap ball spans the grid.
    auto wide = phase1_posteriors(obs, g, mech::uniform_prior(9), {});
    CHECK(wide.slots[0].reachable.size() == 9);

    Phase1Options opt;
    opt.first_slot_radius_km = 0.01;
    auto narrow = phase1_posteriors(obs, g, mech::uniform_prior(9), opt);
    CHECK(narrow.slots[0].reachable == std::vector<roadnet::NodeId>{4});
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

TEST_CASE("eie basics") {
    std::vector<roadnet::NodeSpec> nodes = {{0, {0.0, 0.0}}, {1, {0.0, 1.0}}};
    std::vector<roadnet::EdgeSpec> edges = {{0, 1, 60.0, 0}, {1, 0, 60.0, 0}};
    auto g = roadnet::build_graph(nodes, edges);

    SUBCASE("perfect estimates give zero") {
        CHECK(eie_km({0, 1, 0}, {0, 1, 0}, g) == 0.0);
    }
    SUBCASE("single known pair gives the great-circle distance") {
        CHECK(eie_km({0}, {1}, g) == doctest::Approx(111.19492664455873).epsilon(1e-12));
    }
    SUBCASE("mean over slots") {
        CHECK(eie_km({0, 0}, {0, 1}, g) ==
              doctest::Approx(111.19492664455873 / 2.0).epsilon(1e-12));
    }
    SUBCASE("permutation sensitivity") {
        CHECK(eie_km({0, 1}, {0, 1}, g) == 0.0);
        CHECK(eie_km({1, 0}, {0, 1}, g) > 0.0);
    }
    SUBCASE("length mismatch") {
        CHECK_THROWS_AS(eie_km({0}, {0, 1}, g), LengthMismatch);
    }
    SUBCASE("score_estimates fills per-slot errors") {
        auto r = score_estimates({0, 0}, {0, 1}, g);
        CHECK(r.error_km[0] == 0.0);
        CHECK(r.error_km[1] == doctest::Approx(111.19492664455873).epsilon(1e-12));
        CHECK(r.mean_error_km == doctest::Approx(111.19492664455873 / 2.0).epsilon(1e-12));
    }
}

TEST_CASE("elimination ratio") {
    SUBCASE("possible set equal to the ball eliminates nothing") {
        PosteriorSequence post;
        post.slots.resize(2);
        post.slots[0].possible = {0, 1, 2};
        post.slots[1].possible = {3, 4};
        CHECK(elimination_ratio(post, {3, 2}) == 0.0);
    }
    SUBCASE("singleton against a ball of ten") {
        PosteriorSequence post;
        post.slots.resize(1);
        post.slots[0].possible = {7};
        CHECK(elimination_ratio(post, {10}) == doctest::Approx(0.9).epsilon(1e-15));
    }
    SUBCASE("length mismatch and empty input rejected") {
        PosteriorSequence post;
        post.slots.resize(1);
        post.slots[0].possible = {0};
        CHECK_THROWS_AS(elimination_ratio(post, {1, 2}), LengthMismatch);
        CHECK_THROWS_AS(elimination_ratio(PosteriorSequence{}, {}), EmptyResult);
    }
    SUBCASE("grid scenario matches a direct recount") {
        auto g = make_grid(4, 4, 0.4, 30.0);
        auto Z = mech::laplace_matrix(full_support(g), {3.0, 1.0, 0.0});
        std::vector<roadnet::NodeId> truth = {0, 1, 5, 6, 10};
        std::vector<double> times = {0.0, 55.0, 110.0, 165.0, 220.0};
        TrainingDataset ds = generate_training_samples(
            {Trajectory{"g", {{times[0], truth[0]},
                              {times[1], truth[1]},
                              {times[2], truth[2]},
                              {times[3], truth[3]},
                              {times[4], truth[4]}}}},
            Z, g, mech::uniform_prior(16), 5, {1, {}});
        REQUIRE(ds.samples.size() == 1);
        const TrainingSample& s = ds.samples[0];
        auto obs = make_obs(times, s.reported, Z);
        const double radius = 0.9;
        auto balls = observation_ball_sizes(g, obs, radius);

        // Independent recount: scan distances and re-average.
        double want = 0.0;
        for (std::size_t n = 0; n < truth.size(); ++n) {
            std::size_t ball = 0;
            for (roadnet::NodeId v = 0; v < 16; ++v)
                if (v == s.reported[n] ||
                    roadnet::haversine_km(g.pos(v), g.pos(s.reported[n])) <= radius)
                    ++ball;
            CHECK(balls[n] == ball);
            want += std::max(
                0.0, 1.0 - static_cast<double>(s.posteriors.slots[n].possible.size()) /
                               static_cast<double>(ball));
        }
        want /= static_cast<double>(truth.size());
        CHECK(elimination_ratio(s.posteriors, balls) == doctest::Approx(want).epsilon(1e-15));
    }
}

// ---------------------------------------------------------------------------
// Training-sample generation
// ---------------------------------------------------------------------------

TEST_CASE("generate_training_samples") {
    auto g = make_grid(3, 3, 0.4, 30.0);
    std::vector<Trajectory> trajs = {
        Trajectory{"a", {{0.0, 0}, {60.0, 1}, {120.0, 2}}},
        Trajectory{"b", {{0.0, 6}, {60.0, 7}, {120.0, 8}}}};
    auto prior = mech::uniform_prior(9);

    SUBCASE("identity channel gives point-mass posteriors at the truth") {
        auto Z = identity_channel(g);
        auto ds = generate_training_samples(trajs, Z, g, prior, 11, {1, {}});
        REQUIRE(ds.samples.size() == 2);
        CHECK(ds.dropped == 0);
        for (const TrainingSample& s : ds.samples) {
            CHECK(s.reported == s.truth);
            for (std::size_t n = 0; n < s.posteriors.size(); ++n) {
                CHECK(s.posteriors.slots[n].possible ==
                      std::vector<roadnet::NodeId>{s.truth[n]});
                CHECK(s.posteriors.slots[n].renormalized == std::vector<double>{1.0});
            }
        }
    }
    SUBCASE("sample count is trajectories times samples_per_trajectory") {
        auto Z = mech::laplace_matrix(full_support(g), {3.0, 1.0, 0.0});
        auto ds = generate_training_samples(trajs, Z, g, prior, 11, {20, {}});
        CHECK(ds.samples.size() == 40);
        CHECK(ds.dropped == 0);
        std::set<std::uint64_t> seeds;
        for (const TrainingSample& s : ds.samples) seeds.insert(s.seed);
        CHECK(seeds.size() == 40);
    }
    SUBCASE("fixed master seed reproduces the dataset byte for byte") {
        auto Z = mech::laplace_matrix(full_support(g), {3.0, 1.0, 0.0});
        auto a = generate_training_samples(trajs, Z, g, prior, 77, {5, {}});
        auto b = generate_training_samples(trajs, Z, g, prior, 77, {5, {}});
        const auto pa = fs::temp_directory_path() / "lp_vt_ds_a.jsonl";
        const auto pb = fs::temp_directory_path() / "lp_vt_ds_b.jsonl";
        save_dataset(a, pa.string());
        save_dataset(b, pb.string());
        CHECK(slurp(pa.string()) == slurp(pb.string()));
        fs::remove(pa);
        fs::remove(pb);
    }
    SUBCASE("degenerate samples are dropped and counted") {
        std::vector<roadnet::NodeSpec> nodes = {{0, {45.0, 9.0}}, {1, {45.09, 9.0}}};
        std::vector<roadnet::EdgeSpec> edges = {{0, 1, 3600.0, 0}, {1, 0, 3600.0, 0}};
        auto far = roadnet::build_graph(nodes, edges);
        auto Z = identity_channel(far);
        SampleOptions opt;
        opt.samples_per_trajectory = 3;
        opt.phase1.s_limit_kmh = 1.0;
        auto ds = generate_training_samples({Trajectory{"d", {{0.0, 0}, {1.0, 1}}}}, Z, far,
                                            mech::uniform_prior(2), 9, opt);
        CHECK(ds.samples.empty());
        CHECK(ds.dropped == 3);
    }
    SUBCASE("input validation") {
        auto Z = identity_channel(g);
        CHECK_THROWS_AS(generate_training_samples({}, Z, g, prior, 1, {}), EmptyCorpus);
        CHECK_THROWS_AS(generate_training_samples(trajs, Z, g, prior, 1, {0, {}}),
                        ConfigError);
    }
}

TEST_CASE("dataset save/load round trip") {
    auto g = make_grid(3, 3, 0.4, 30.0);
    auto Z = mech::laplace_matrix(full_support(g), {3.0, 1.0, 0.0});
    std::vector<Trajectory> trajs = {Trajectory{"rt", {{0.0, 0}, {60.0, 4}, {120.0, 8}}}};
    auto ds = generate_training_samples(trajs, Z, g, mech::uniform_prior(9), 3, {4, {}});
    REQUIRE(ds.samples.size() == 4);

    const auto path = fs::temp_directory_path() / "lp_vt_roundtrip.jsonl";
    save_dataset(ds, path.string());
    auto loaded = load_dataset(path.string());
    REQUIRE(loaded.samples.size() == ds.samples.size());
    for (std::size_t k = 0; k < ds.samples.size(); ++k) {
        const TrainingSample& a = ds.samples[k];
        const TrainingSample& b = loaded.samples[k];
        CHECK(a.trajectory_id == b.trajectory_id);
        CHECK(a.seed == b.seed);
        CHECK(a.reported == b.reported);
        CHECK(a.truth == b.truth);
        REQUIRE(a.posteriors.size() == b.posteriors.size());
        for (std::size_t n = 0; n < a.posteriors.size(); ++n) {
            CHECK(a.posteriors.slots[n].possible == b.posteriors.slots[n].possible);
            CHECK(a.posteriors.slots[n].renormalized == b.posteriors.slots[n].renormalized);
            CHECK(a.posteriors.slots[n].fallback == b.posteriors.slots[n].fallback);
        }
    }
    // Saving the loaded copy reproduces the file byte for byte.
    const auto path2 = fs::temp_directory_path() / "lp_vt_roundtrip2.jsonl";
    save_dataset(loaded, path2.string());
    CHECK(slurp(path.string()) == slurp(path2.string()));
    fs::remove(path);
    fs::remove(path2);

    SUBCASE("missing file and malformed lines") {
        CHECK_THROWS_AS(load_dataset("/nonexistent/ds.jsonl"), IoError);
        const auto bad = fs::temp_directory_path() / "lp_vt_bad.jsonl";
        std::ofstream(bad.string()) << "{not json\n";
        CHECK_THROWS_AS(load_dataset(bad.string()), MalformedRow);
        fs::remove(bad);
    }
}

// ---------------------------------------------------------------------------
// Phase 2
// ---------------------------------------------------------------------------

namespace {

// Small corpus over the 3x3 grid used by the training tests.
TrainingDataset grid_dataset(const roadnet::RoadGraph& g, const mech::ObfuscationMatrix& Z,
                             std::size_t samples_per_traj, std::uint64_t seed) {
    std::vector<Trajectory> trajs = {
        Trajectory{"a", {{0.0, 0}, {60.0, 1}, {120.0, 2}, {180.0, 5}}},
        Trajectory{"b", {{0.0, 6}, {60.0, 7}, {120.0, 4}, {180.0, 1}}},
        Trajectory{"c", {{0.0, 8}, {60.0, 5}, {120.0, 4}, {180.0, 3}}}};
    SampleOptions opt;
    opt.samples_per_trajectory = samples_per_traj;
    return generate_training_samples(trajs, Z, g, mech::uniform_prior(g.size()), seed, opt);
}

std::vector<roadnet::NodeId> all_nodes(const roadnet::RoadGraph& g) {
    std::vector<roadnet::NodeId> support(g.size());
    for (std::size_t v = 0; v < g.size(); ++v) support[v] = static_cast<roadnet::NodeId>(v);
    return support;
}

}  // namespace

TEST_CASE("embed_posteriors layout and argmax passthrough") {
    auto g = make_grid(3, 3, 0.4, 30.0);
    auto Z = mech::laplace_matrix(full_support(g), {3.0, 1.0, 0.0});
    auto post = phase1_posteriors(make_obs({0.0, 60.0, 120.0}, {0, 4, 8}, Z), g,
                                  mech::uniform_prior(9), {});
    auto support = all_nodes(g);

    nn::Tensor embedded = embed_posteriors(post, support, 5);
    CHECK(embedded.rows() == 5);
    CHECK(embedded.cols() == 9);
    // Padding rows stay zero.
    for (std::size_t c = 0; c < 9; ++c) {
        CHECK(embedded.at(3, c) == 0.0);
        CHECK(embedded.at(4, c) == 0.0);
    }
    // Row argmax with ascending-id ties equals the Phase-1 argmax.
    auto expected = phase1_argmax(post);
    for (std::size_t n = 0; n < post.size(); ++n) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < 9; ++c)
            if (embedded.at(n, c) > embedded.at(n, best)) best = c;
        CHECK(support[best] == expected[n]);
    }

    SUBCASE("sequence longer than the padding is rejected") {
        CHECK_THROWS_AS(embed_posteriors(post, support, 2), ShapeMismatch);
    }
    SUBCASE("members outside the support are rejected") {
        CHECK_THROWS_AS(embed_posteriors(post, {0, 1, 2}, 5), UnknownNode);
    }
}

TEST_CASE("zero-epoch training returns the initialization") {
    auto g = make_grid(3, 3, 0.4, 30.0);
    auto ds = grid_dataset(g, identity_channel(g), 2, 21);
    Phase2Config cfg;
    cfg.hidden_dim = 8;
    cfg.layers = 1;
    cfg.epochs = 0;
    cfg.seed = 5;
    auto model = phase2_train(ds, all_nodes(g), cfg);

    Phase2Model fresh(all_nodes(g), model.max_length(), cfg);
    for (const std::string& name : fresh.store().names()) {
        const auto& a = model.store().param(name).data;
        const auto& b = fresh.store().param(name).data;
        REQUIRE(a.size() == b.size());
        CHECK(a == b);
    }
}

TEST_CASE("phase2 memorizes a single trajectory") {
    auto g = make_grid(3, 2, 0.4, 30.0);
    auto Z = mech::laplace_matrix(full_support(g), {2.0, 1.0, 0.0});
    std::vector<Trajectory> trajs = {Trajectory{"m", {{0.0, 0}, {60.0, 1}, {120.0, 4}, {180.0, 5}}}};
    auto ds = generate_training_samples(trajs, Z, g, mech::uniform_prior(6), 13, {1, {}});
    REQUIRE(ds.samples.size() == 1);

    Phase2Config cfg;
    cfg.hidden_dim = 16;
    cfg.layers = 2;
    cfg.epochs = 200;
    cfg.seed = 3;
    cfg.adam.learning_rate = 0.01;
    Phase2TrainLog log;
    auto model = phase2_train(ds, all_nodes(g), cfg, &log);

    REQUIRE(!log.epoch_loss.empty());
    CHECK(log.epoch_loss.size() <= 200);
    CHECK(log.epoch_loss.back() < 0.01);
    CHECK(!log.aborted);

    // Overfit consistency: inference on its own training input returns the
    // exact truth sequence.
    auto result = phase2_infer(model, ds.samples[0].posteriors);
    CHECK(result.estimates == ds.samples[0].truth);
}

TEST_CASE("phase2 memorizes a small corpus with high token accuracy") {
    auto g = make_grid(3, 3, 0.4, 30.0);
    auto Z = mech::laplace_matrix(full_support(g), {4.0, 1.0, 0.0});
    auto ds = grid_dataset(g, Z, 5, 31);
    REQUIRE(ds.samples.size() == 15);

    Phase2Config cfg;
    cfg.hidden_dim = 32;
    cfg.layers = 2;
    cfg.epochs = 300;
    cfg.seed = 4;
    cfg.adam.learning_rate = 0.005;
    cfg.target_loss = 0.02;
    Phase2TrainLog log;
    auto model = phase2_train(ds, all_nodes(g), cfg, &log);
    CHECK(!log.aborted);

    std::size_t hits = 0, total = 0;
    for (const TrainingSample& s : ds.samples) {
        auto result = phase2_infer(model, s.posteriors);
        for (std::size_t n = 0; n < s.truth.size(); ++n) {
            hits += result.estimates[n] == s.truth[n] ? 1 : 0;
            ++total;
        }
    }
    CHECK(static_cast<double>(hits) / static_cast<double>(total) >= 0.9);
}

TEST_CASE("phase2 inference contracts") {
    auto g = make_grid(3, 3, 0.4, 30.0);
    auto Z = mech::laplace_matrix(full_support(g), {3.0, 1.0, 0.0});

    // Corpus with a longer and a shorter trajectory: the model pads to the
    // longest, and shorter inputs yield exactly their own slot count.
    std::vector<Trajectory> trajs = {
        Trajectory{"long", {{0.0, 0}, {60.0, 1}, {120.0, 2}, {180.0, 5}, {240.0, 8}}},
        Trajectory{"short", {{0.0, 6}, {60.0, 7}}}};
    auto ds = generate_training_samples(trajs, Z, g, mech::uniform_prior(9), 41, {2, {}});
    Phase2Config cfg;
    cfg.hidden_dim = 8;
    cfg.layers = 1;
    cfg.epochs = 2;
    auto model = phase2_train(ds, all_nodes(g), cfg);
    CHECK(model.max_length() == 5);

    auto short_post = phase1_posteriors(make_obs({0.0, 60.0}, {6, 7}, Z), g,
                                        mech::uniform_prior(9), {});
    auto result = phase2_infer(model, short_post);
    CHECK(result.estimates.size() == 2);

    auto too_long = phase1_posteriors(
        make_obs({0.0, 50.0, 100.0, 150.0, 200.0, 250.0}, {0, 1, 2, 5, 8, 7}, Z), g,
        mech::uniform_prior(9), {});
    CHECK_THROWS_AS(phase2_infer(model, too_long), ShapeMismatch);
    CHECK_THROWS_AS(phase2_infer(model, PosteriorSequence{}), EmptyResult);
}

TEST_CASE("non-finite training aborts and restores the last good parameters") {
    auto g = make_grid(3, 3, 0.4, 30.0);
    auto ds = grid_dataset(g, identity_channel(g), 2, 51);
    Phase2Config cfg;
    cfg.hidden_dim = 8;
    cfg.layers = 1;
    cfg.epochs = 4;
    cfg.seed = 6;
    cfg.adam.learning_rate = 1e308;  // first step flings parameters to +-1e308
    Phase2TrainLog log;
    auto model = phase2_train(ds, all_nodes(g), cfg, &log);
    CHECK(log.aborted);
    CHECK(log.abort_epoch == 0);
    CHECK(log.epoch_loss.empty());

    // Nothing good was ever completed, so the model equals the initialization.
    Phase2Model fresh(all_nodes(g), model.max_length(), cfg);
    for (const std::string& name : fresh.store().names())
        CHECK(model.store().param(name).data == fresh.store().param(name).data);
}

TEST_CASE("phase2 checkpoint round trip") {
    auto g = make_grid(3, 3, 0.4, 30.0);
    auto Z = mech::laplace_matrix(full_support(g), {3.0, 1.0, 0.0});
    auto ds = grid_dataset(g, Z, 2, 61);
    Phase2Config cfg;
    cfg.hidden_dim = 8;
    cfg.layers = 1;
    cfg.epochs = 3;
    auto model = phase2_train(ds, all_nodes(g), cfg);

    const auto prefix = (fs::temp_directory_path() / "lp_vt_model").string();
    save_phase2(model, prefix);
    auto loaded = load_phase2(prefix);
    CHECK(loaded.support() == model.support());
    CHECK(loaded.max_length() == model.max_length());

    const nn::Tensor input = embed_posteriors(ds.samples[0].posteriors, model.support(),
                                              model.max_length());
    CHECK(model.forward(input).data == loaded.forward(input).data);
    auto a = phase2_infer(model, ds.samples[0].posteriors);
    auto b = phase2_infer(loaded, ds.samples[0].posteriors);
    CHECK(a.estimates == b.estimates);
    fs::remove(prefix + ".json");
    fs::remove(prefix + ".bin");
}
