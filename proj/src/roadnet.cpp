#include "locpriv/roadnet.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <queue>
#include <sstream>

#include "locpriv/csv.hpp"

namespace locpriv::roadnet {

bool is_valid(const GeoPoint& p) {
    return std::isfinite(p.lat) && std::isfinite(p.lon) && p.lat >= -90.0 && p.lat <= 90.0 &&
           p.lon >= -180.0 && p.lon <= 180.0;
}

double haversine_km(const GeoPoint& a, const GeoPoint& b) {
    constexpr double kDegToRad = 0.017453292519943295;  // pi / 180
    const double phi1 = a.lat * kDegToRad;
    const double phi2 = b.lat * kDegToRad;
    const double dphi = (b.lat - a.lat) * kDegToRad;
    const double dlam = (b.lon - a.lon) * kDegToRad;
    const double s1 = std::sin(dphi / 2.0);
    const double s2 = std::sin(dlam / 2.0);
    const double h = s1 * s1 + std::cos(phi1) * std::cos(phi2) * s2 * s2;
    return 2.0 * kEarthRadiusKm * std::asin(std::min(1.0, std::sqrt(h)));
}

std::size_t BucketSchedule::bucket_at(double seconds_of_day) const {
    if (boundaries.empty()) return 0;
    // Last interval [boundaries.back(), 86400) wraps around to cover
    // [0, boundaries.front()) as well.
    auto it = std::upper_bound(boundaries.begin(), boundaries.end(), seconds_of_day);
    if (it == boundaries.begin()) return buckets.back();
    return buckets[static_cast<std::size_t>(it - boundaries.begin()) - 1];
}

std::size_t BucketSchedule::max_bucket() const {
    std::size_t m = 0;
    for (std::size_t b : buckets) m = std::max(m, b);
    return m;
}

void BucketSchedule::validate() const {
    if (boundaries.size() != buckets.size())
        throw ConfigError("bucket schedule: boundaries and buckets differ in length");
    if (!std::is_sorted(boundaries.begin(), boundaries.end()))
        throw ConfigError("bucket schedule: boundaries must be sorted ascending");
    for (double b : boundaries)
        if (!(b >= 0.0 && b < 86400.0))
            throw ConfigError("bucket schedule: boundary outside [0, 86400)");
}

RoadGraph RoadGraph::build(const std::vector<NodeSpec>& nodes, const std::vector<EdgeSpec>& edges,
                           BucketSchedule schedule) {
    schedule.validate();
    RoadGraph g;
    g.schedule_ = std::move(schedule);

    std::vector<NodeSpec> sorted = nodes;
    std::sort(sorted.begin(), sorted.end(),
              [](const NodeSpec& a, const NodeSpec& b) { return a.id < b.id; });
    g.coords_.reserve(sorted.size());
    g.original_ids_.reserve(sorted.size());
    for (const NodeSpec& n : sorted) {
        if (!g.original_ids_.empty() && g.original_ids_.back() == n.id)
            throw DuplicateNode("duplicate node id " + std::to_string(n.id));
        if (!is_valid(n.pos))
            throw MalformedRow("node " + std::to_string(n.id) + ": coordinates out of range");
        g.original_ids_.push_back(n.id);
        g.coords_.push_back(n.pos);
    }
    for (std::size_t i = 0; i < g.original_ids_.size(); ++i)
        g.id_index_.emplace(g.original_ids_[i], static_cast<NodeId>(i));

    // Group edge rows by (from, to); each group becomes one arc with a
    // per-bucket weight vector.
    std::size_t n_buckets = g.schedule_.buckets.empty() ? 1 : g.schedule_.max_bucket() + 1;
    for (const EdgeSpec& e : edges) n_buckets = std::max(n_buckets, e.bucket + 1);
    g.n_buckets_ = n_buckets;

    std::map<std::pair<NodeId, NodeId>, std::vector<double>> arcs;
    for (const EdgeSpec& e : edges) {
        auto fi = g.id_index_.find(e.from);
        auto ti = g.id_index_.find(e.to);
        if (fi == g.id_index_.end() || ti == g.id_index_.end())
            throw DanglingEdge("edge " + std::to_string(e.from) + "->" + std::to_string(e.to) +
                               " references a missing node");
        if (!(e.weight_seconds > 0.0) || !std::isfinite(e.weight_seconds))
            throw NonPositiveWeight("edge " + std::to_string(e.from) + "->" +
                                    std::to_string(e.to) + ": weight must be positive and finite");
        auto& w = arcs[{fi->second, ti->second}];
        if (w.empty()) w.assign(n_buckets, 0.0);
        if (w[e.bucket] != 0.0)
            throw MalformedRow("edge " + std::to_string(e.from) + "->" + std::to_string(e.to) +
                               ": duplicate weight for bucket " + std::to_string(e.bucket));
        w[e.bucket] = e.weight_seconds;
    }

    g.offsets_.assign(g.size() + 1, 0);
    g.targets_.reserve(arcs.size());
    g.weights_.reserve(arcs.size() * n_buckets);
    for (auto& [key, w] : arcs) {
        // Buckets the input never mentioned inherit the lowest specified one.
        double fallback = 0.0;
        for (double x : w)
            if (x > 0.0) {
                fallback = x;
                break;
            }
        for (double& x : w)
            if (x == 0.0) x = fallback;
        g.offsets_[static_cast<std::size_t>(key.first) + 1]++;
        g.targets_.push_back(key.second);
        g.weights_.insert(g.weights_.end(), w.begin(), w.end());
    }
    for (std::size_t v = 0; v < g.size(); ++v) g.offsets_[v + 1] += g.offsets_[v];
    return g;
}

NodeId RoadGraph::index_of(std::int64_t original_id) const {
    auto it = id_index_.find(original_id);
    if (it == id_index_.end())
        throw UnknownNode("no node with id " + std::to_string(original_id));
    return it->second;
}

std::size_t RoadGraph::check(NodeId v) const {
    if (v < 0 || static_cast<std::size_t>(v) >= size())
        throw UnknownNode("node index " + std::to_string(v) + " out of range (L=" +
                          std::to_string(size()) + ")");
    return static_cast<std::size_t>(v);
}

void RoadGraph::check_bucket(std::size_t bucket) const {
    if (bucket >= n_buckets_)
        throw ConfigError("bucket index " + std::to_string(bucket) + " out of range (buckets=" +
                          std::to_string(n_buckets_) + ")");
}

CropResult crop_graph(const RoadGraph& g, const GeoPoint& center, double radius_km) {
    if (!(radius_km > 0.0)) throw ConfigError("crop_graph: radius must be positive");
    CropResult result;
    result.old_to_new.assign(g.size(), kNoNode);
    std::vector<NodeSpec> nodes;
    for (NodeId v = 0; v < static_cast<NodeId>(g.size()); ++v) {
        if (haversine_km(center, g.pos(v)) <= radius_km) {
            result.old_to_new[static_cast<std::size_t>(v)] =
                static_cast<NodeId>(nodes.size());
            nodes.push_back({static_cast<std::int64_t>(nodes.size()), g.pos(v)});
        }
    }
    if (nodes.empty()) throw EmptyResult("crop_graph: no node within radius");

    std::vector<EdgeSpec> edges;
    for (NodeId v = 0; v < static_cast<NodeId>(g.size()); ++v) {
        NodeId nv = result.old_to_new[static_cast<std::size_t>(v)];
        if (nv == kNoNode) continue;
        for (std::size_t b = 0; b < g.bucket_count(); ++b) {
            g.for_each_arc(v, b, [&](NodeId to, double w) {
                NodeId nt = result.old_to_new[static_cast<std::size_t>(to)];
                if (nt != kNoNode) edges.push_back({nv, nt, w, b});
            });
        }
    }
    result.graph = RoadGraph::build(nodes, edges, g.schedule());
    return result;
}

NodeId snap_to_node(const RoadGraph& g, const GeoPoint& p) {
    if (g.empty()) throw EmptyGraph("snap_to_node: graph has no nodes");
    NodeId best = 0;
    double best_d = haversine_km(p, g.pos(0));
    for (NodeId v = 1; v < static_cast<NodeId>(g.size()); ++v) {
        double d = haversine_km(p, g.pos(v));
        if (d < best_d) {  // strict: ties keep the smaller id
            best_d = d;
            best = v;
        }
    }
    return best;
}

std::vector<NodeId> prune_by_speed(const RoadGraph& g, NodeId i, double dt_seconds,
                                   double s_limit_kmh) {
    if (!(dt_seconds >= 0.0)) throw ConfigError("prune_by_speed: dt must be >= 0");
    if (!(s_limit_kmh > 0.0)) throw ConfigError("prune_by_speed: s_limit must be > 0");
    const GeoPoint& origin = g.pos(i);
    const double radius = speed_radius_km(dt_seconds, s_limit_kmh);
    std::vector<NodeId> members;
    for (NodeId v = 0; v < static_cast<NodeId>(g.size()); ++v)
        if (v == i || haversine_km(origin, g.pos(v)) <= radius) members.push_back(v);
    return members;
}

namespace {

// Shared Dijkstra core.  `allowed` is null for the full graph or a
// size-L membership mask for an induced subgraph.
ShortestPathTree dijkstra_impl(const RoadGraph& g, NodeId root, std::size_t bucket,
                               const std::vector<char>* allowed) {
    ShortestPathTree spt;
    spt.root = root;
    spt.cost.assign(g.size(), kInfiniteCost);
    spt.parent.assign(g.size(), kNoNode);
    spt.cost[static_cast<std::size_t>(root)] = 0.0;

    // (cost, node) min-heap; lexicographic pair order settles equal-cost
    // nodes in ascending id order.
    using Entry = std::pair<double, NodeId>;
    std::priority_queue<Entry, std::vector<Entry>, std::greater<>> heap;
    heap.push({0.0, root});
    while (!heap.empty()) {
        auto [c, u] = heap.top();
        heap.pop();
        if (c > spt.cost[static_cast<std::size_t>(u)]) continue;  // stale entry
        g.for_each_arc(u, bucket, [&](NodeId to, double w) {
            if (allowed && !(*allowed)[static_cast<std::size_t>(to)]) return;
            double nc = c + w;
            if (nc < spt.cost[static_cast<std::size_t>(to)]) {
                spt.cost[static_cast<std::size_t>(to)] = nc;
                spt.parent[static_cast<std::size_t>(to)] = u;
                heap.push({nc, to});
            }
        });
    }
    return spt;
}

}  // namespace

ShortestPathTree dijkstra_spt(const RoadGraph& g, NodeId root, std::size_t bucket) {
    if (root < 0 || static_cast<std::size_t>(root) >= g.size())
        throw UnknownNode("dijkstra_spt: root out of range");
    return dijkstra_impl(g, root, bucket, nullptr);
}

ShortestPathTree dijkstra_spt_within(const RoadGraph& g, NodeId root,
                                     const std::vector<NodeId>& members, std::size_t bucket) {
    if (root < 0 || static_cast<std::size_t>(root) >= g.size())
        throw UnknownNode("dijkstra_spt_within: root out of range");
    std::vector<char> allowed(g.size(), 0);
    bool root_in = false;
    for (NodeId v : members) {
        if (v < 0 || static_cast<std::size_t>(v) >= g.size())
            throw UnknownNode("dijkstra_spt_within: member out of range");
        allowed[static_cast<std::size_t>(v)] = 1;
        root_in |= (v == root);
    }
    if (!root_in) throw UnknownNode("dijkstra_spt_within: root not in member set");
    return dijkstra_impl(g, root, bucket, &allowed);
}

ReachableSet reachable_set(const RoadGraph& g, NodeId i, double dt_seconds, double s_limit_kmh,
                           std::size_t bucket) {
    std::vector<NodeId> ball = prune_by_speed(g, i, dt_seconds, s_limit_kmh);
    ShortestPathTree spt = dijkstra_spt_within(g, i, ball, bucket);
    ReachableSet r;
    r.origin = i;
    r.horizon_seconds = dt_seconds;
    for (NodeId v : ball)
        if (spt.cost[static_cast<std::size_t>(v)] <= dt_seconds) r.members.push_back(v);
    return r;
}

double travel_cost(const RoadGraph& g, NodeId i, NodeId j, std::size_t bucket) {
    ShortestPathTree spt = dijkstra_spt(g, i, bucket);
    if (j < 0 || static_cast<std::size_t>(j) >= g.size())
        throw UnknownNode("travel_cost: target out of range");
    return spt.cost[static_cast<std::size_t>(j)];
}

RoadGraph load_graph_csv(const std::string& nodes_path, const std::string& edges_path,
                         BucketSchedule schedule) {
    auto node_lines = csv::read_lines(nodes_path);
    if (node_lines.empty() || csv::split(node_lines[0])[0] != "node_id")
        throw MalformedRow(nodes_path + ": expected header node_id,lat,lon");
    std::vector<NodeSpec> nodes;
    for (std::size_t i = 1; i < node_lines.size(); ++i) {
        auto f = csv::split(node_lines[i]);
        if (f.size() != 3) throw MalformedRow(nodes_path + ": row needs 3 fields");
        nodes.push_back({csv::parse_int(f[0], nodes_path),
                         {csv::parse_double(f[1], nodes_path), csv::parse_double(f[2], nodes_path)}});
    }

    auto edge_lines = csv::read_lines(edges_path);
    if (edge_lines.empty() || csv::split(edge_lines[0])[0] != "from")
        throw MalformedRow(edges_path + ": expected header from,to,weight_seconds[,bucket]");
    std::vector<EdgeSpec> edges;
    for (std::size_t i = 1; i < edge_lines.size(); ++i) {
        auto f = csv::split(edge_lines[i]);
        if (f.size() != 3 && f.size() != 4)
            throw MalformedRow(edges_path + ": row needs 3 or 4 fields");
        EdgeSpec e;
        e.from = csv::parse_int(f[0], edges_path);
        e.to = csv::parse_int(f[1], edges_path);
        e.weight_seconds = csv::parse_double(f[2], edges_path);
        if (f.size() == 4)
            e.bucket = static_cast<std::size_t>(csv::parse_int(f[3], edges_path));
        edges.push_back(e);
    }
    return RoadGraph::build(nodes, edges, std::move(schedule));
}

void save_graph_csv(const RoadGraph& g, const std::string& nodes_path,
                    const std::string& edges_path) {
    std::ostringstream nodes;
    nodes << "node_id,lat,lon\n";
    for (NodeId v = 0; v < static_cast<NodeId>(g.size()); ++v)
        nodes << g.original_id(v) << ',' << csv::format_double(g.pos(v).lat) << ','
              << csv::format_double(g.pos(v).lon) << '\n';
    csv::write_text(nodes_path, nodes.str());

    std::ostringstream edges;
    edges << "from,to,weight_seconds,bucket\n";
    for (NodeId v = 0; v < static_cast<NodeId>(g.size()); ++v) {
        for (std::size_t b = 0; b < g.bucket_count(); ++b) {
            g.for_each_arc(v, b, [&](NodeId to, double w) {
                edges << g.original_id(v) << ',' << g.original_id(to) << ','
                      << csv::format_double(w) << ',' << b << '\n';
            });
        }
    }
    csv::write_text(edges_path, edges.str());
}

}  // namespace locpriv::roadnet
