#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "modelprobe/similarity.hpp"

namespace modelprobe {

struct RelationNode {
  std::string id;
  std::string label;  // app name plus extraction order when known

  friend bool operator==(const RelationNode&, const RelationNode&) = default;
};

struct RelationEdge {
  std::size_t source = 0;
  std::size_t target = 0;
  double weight = 0.0;  // structural similarity

  friend bool operator==(const RelationEdge&, const RelationEdge&) = default;
};

using Partition = std::vector<int>;

struct RelationGraph {
  std::vector<RelationNode> nodes;
  std::vector<RelationEdge> edges;
  Partition communities;  // one label per node; empty until detected
  double threshold = kSimilarityThreshold;

  friend bool operator==(const RelationGraph&, const RelationGraph&) = default;
};

/// Edge (i, j) iff structural >= threshold and parametric is present and >= threshold.
/// `labels`, when non-empty, must have one entry per matrix row.
RelationGraph build_graph(const SimilarityMatrix& matrix, double threshold = kSimilarityThreshold,
                          const std::vector<std::string>& labels = {});

/// Newman modularity of a partition over a weighted undirected edge list.
double modularity(std::size_t node_count, const std::vector<RelationEdge>& edges, const Partition& partition,
                  double resolution = 1.0);

/// Louvain community detection, resolution 1.0. Nodes are visited in
/// ascending id order and equal-gain moves favor the lower community id, so
/// the outcome is a pure function of the graph; `seed` is recorded for
/// reproducibility manifests but does not alter the visit order.
Partition detect_communities(const RelationGraph& graph, std::uint64_t seed = 0);

enum class GraphFormat { Gexf, Dot, Json };

GraphFormat graph_format_from_string(std::string_view name);
std::string export_graph(const RelationGraph& graph, GraphFormat format);
RelationGraph import_graph_json(std::string_view text);

}  // namespace modelprobe
