#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <unordered_map>
#include <vector>

#include "locpriv/errors.hpp"

namespace locpriv::roadnet {

// Units used throughout the library: distances in km, travel times in
// seconds, speeds in km/h.  Conversions live here and nowhere else.
inline constexpr double kEarthRadiusKm = 6371.0;
inline constexpr double kInfiniteCost = std::numeric_limits<double>::infinity();

inline double speed_radius_km(double dt_seconds, double s_limit_kmh) {
    return s_limit_kmh * dt_seconds / 3600.0;
}

// A WGS-84 coordinate in degrees.
struct GeoPoint {
    double lat = 0.0;  // [-90, 90]
    double lon = 0.0;  // [-180, 180]
};

bool is_valid(const GeoPoint& p);

// Great-circle distance in km (haversine formula, R = 6371.0 km).
double haversine_km(const GeoPoint& a, const GeoPoint& b);

// Node ids are dense indices 0..L-1 inside a built graph; the original
// (possibly sparse) ids from the input survive as a lookup table.
using NodeId = std::int64_t;
inline constexpr NodeId kNoNode = -1;

// Maps wall-clock seconds-of-day to a travel-time bucket.  An empty
// schedule means a single bucket 0 (time-invariant weights).  Intervals
// are [boundaries[k], boundaries[k+1]) with the schedule cyclic over the
// day, so times before the first boundary fall in the last interval.
struct BucketSchedule {
    std::vector<double> boundaries;      // sorted ascending, in [0, 86400)
    std::vector<std::size_t> buckets;    // bucket per interval, same length

    std::size_t bucket_at(double seconds_of_day) const;
    std::size_t max_bucket() const;
    void validate() const;
};

struct NodeSpec {
    std::int64_t id = 0;
    GeoPoint pos;
};

struct EdgeSpec {
    std::int64_t from = 0;
    std::int64_t to = 0;
    double weight_seconds = 0.0;
    std::size_t bucket = 0;
};

// Directed road graph with per-bucket travel-time weights.  Immutable
// after build; all queries are const and safe to call concurrently.
class RoadGraph {
  public:
    RoadGraph() = default;

    // Validates and indexes the inputs.  Nodes are sorted by original id
    // and renumbered 0..L-1; duplicate ids, edges to missing nodes, and
    // non-positive weights are rejected.  Edges sharing (from, to) merge
    // into one arc whose weight varies by bucket; buckets an arc does not
    // specify inherit its lowest specified bucket's weight.
    static RoadGraph build(const std::vector<NodeSpec>& nodes,
                           const std::vector<EdgeSpec>& edges,
                           BucketSchedule schedule = {});

    std::size_t size() const { return coords_.size(); }
    bool empty() const { return coords_.empty(); }
    std::size_t arc_count() const { return targets_.size(); }
    std::size_t bucket_count() const { return n_buckets_; }
    const BucketSchedule& schedule() const { return schedule_; }

    const GeoPoint& pos(NodeId v) const { return coords_[check(v)]; }
    std::int64_t original_id(NodeId v) const { return original_ids_[check(v)]; }
    NodeId index_of(std::int64_t original_id) const;  // throws UnknownNode

    // Calls f(to, weight_seconds) for each outgoing arc of v in `bucket`.
    template <typename F>
    void for_each_arc(NodeId v, std::size_t bucket, F&& f) const {
        check(v);
        check_bucket(bucket);
        for (std::size_t k = offsets_[static_cast<std::size_t>(v)];
             k < offsets_[static_cast<std::size_t>(v) + 1]; ++k) {
            f(targets_[k], weights_[k * n_buckets_ + bucket]);
        }
    }

  private:
    std::size_t check(NodeId v) const;
    void check_bucket(std::size_t bucket) const;

    std::vector<GeoPoint> coords_;
    std::vector<std::int64_t> original_ids_;
    std::unordered_map<std::int64_t, NodeId> id_index_;
    std::vector<std::size_t> offsets_;  // CSR offsets, size L+1
    std::vector<NodeId> targets_;       // arc targets, size E
    std::vector<double> weights_;       // arc-major weight table, size E*n_buckets
    std::size_t n_buckets_ = 1;
    BucketSchedule schedule_;
};

inline RoadGraph build_graph(const std::vector<NodeSpec>& nodes,
                             const std::vector<EdgeSpec>& edges,
                             BucketSchedule schedule = {}) {
    return RoadGraph::build(nodes, edges, std::move(schedule));
}

// Result of cropping: the surviving subgraph with re-densified ids plus
// the remap table old node index -> new node index (kNoNode if dropped).
struct CropResult {
    RoadGraph graph;
    std::vector<NodeId> old_to_new;
};

// Keeps exactly the nodes with haversine(center, node) <= radius_km and
// the arcs whose endpoints both survive.  Throws EmptyResult when no node
// is within range.
CropResult crop_graph(const RoadGraph& g, const GeoPoint& center, double radius_km);

// Nearest node to p by haversine distance; ties go to the smaller id.
NodeId snap_to_node(const RoadGraph& g, const GeoPoint& p);

// Speed-bounded candidate set: every node within dt * s_limit of node i
// as the crow flies (the coarse pre-filter ahead of exact reachability).
// Always contains i; returned sorted ascending.
std::vector<NodeId> prune_by_speed(const RoadGraph& g, NodeId i, double dt_seconds,
                                   double s_limit_kmh);

struct ShortestPathTree {
    NodeId root = kNoNode;
    std::vector<double> cost;    // seconds; kInfiniteCost when unreached
    std::vector<NodeId> parent;  // kNoNode for the root and unreached nodes
};

// Dijkstra over the full graph in one weight bucket.  Equal-cost queue
// entries are settled in ascending node-id order so parents and the order
// of settlement are deterministic.
ShortestPathTree dijkstra_spt(const RoadGraph& g, NodeId root, std::size_t bucket = 0);

// Dijkstra restricted to the subgraph induced by `members` (sorted id
// list which must contain root).  Costs for non-members stay infinite.
ShortestPathTree dijkstra_spt_within(const RoadGraph& g, NodeId root,
                                     const std::vector<NodeId>& members,
                                     std::size_t bucket = 0);

struct ReachableSet {
    NodeId origin = kNoNode;
    double horizon_seconds = 0.0;
    std::vector<NodeId> members;  // sorted ascending; always contains origin
};

// Time-bounded reachability: prune to the speed ball around i, run
// Dijkstra on the induced subgraph, and keep nodes with cost <= dt.
// Equivalent to thresholding full-graph shortest-path costs (the pruning
// never cuts a node that a <=dt path could reach, since any such path
// stays inside the speed ball).
ReachableSet reachable_set(const RoadGraph& g, NodeId i, double dt_seconds,
                           double s_limit_kmh, std::size_t bucket = 0);

// Shortest travel time from i to j in seconds; kInfiniteCost when j is
// unreachable from i.
double travel_cost(const RoadGraph& g, NodeId i, NodeId j, std::size_t bucket = 0);

// CSV interchange.  Nodes: `node_id,lat,lon`.  Edges:
// `from,to,weight_seconds[,bucket]`.  Header rows required.
RoadGraph load_graph_csv(const std::string& nodes_path, const std::string& edges_path,
                         BucketSchedule schedule = {});
void save_graph_csv(const RoadGraph& g, const std::string& nodes_path,
                    const std::string& edges_path);

}  // namespace locpriv::roadnet
