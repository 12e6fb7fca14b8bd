#include "modelprobe/relation_graph.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "modelprobe/error.hpp"

namespace modelprobe {

RelationGraph build_graph(const SimilarityMatrix& matrix, double threshold, const std::vector<std::string>& labels) {
  if (!(threshold > 0.0 && threshold <= 1.0)) {
    throw Error(ErrorCode::InvalidArgument, "threshold must lie in (0, 1]");
  }
  if (!labels.empty() && labels.size() != matrix.size()) {
    throw Error(ErrorCode::LengthMismatch, "one label per model required");
  }
  RelationGraph g;
  g.threshold = threshold;
  for (std::size_t i = 0; i < matrix.size(); ++i) {
    g.nodes.push_back({matrix.names()[i], labels.empty() ? matrix.names()[i] : labels[i]});
  }
  for (std::size_t i = 0; i < matrix.size(); ++i) {
    for (std::size_t j = i + 1; j < matrix.size(); ++j) {
      const auto& s = matrix.at(i, j);
      if (s.structural >= threshold && s.parametric && *s.parametric >= threshold) {
        g.edges.push_back({i, j, s.structural});
      }
    }
  }
  return g;
}

double modularity(std::size_t node_count, const std::vector<RelationEdge>& edges, const Partition& partition,
                  double resolution) {
  if (partition.size() != node_count) throw Error(ErrorCode::LengthMismatch, "partition size != node count");
  double m = 0.0;
  std::map<int, double> internal, degree;
  for (const auto& e : edges) {
    m += e.weight;
    degree[partition[e.source]] += e.weight;
    degree[partition[e.target]] += e.weight;
    if (partition[e.source] == partition[e.target]) internal[partition[e.source]] += e.weight;
  }
  if (m == 0.0) return 0.0;
  double q = 0.0;
  for (const auto& [c, d] : degree) {
    double frac = d / (2.0 * m);
    q += internal[c] / m - resolution * frac * frac;
  }
  return q;
}

namespace {

// Weighted graph with explicit self-loop weights; used for every Louvain level.
struct LevelGraph {
  std::vector<std::map<std::size_t, double>> adj;  // no self entries
  std::vector<double> loops;                       // internal weight, each edge once
  double total = 0.0;                              // m

  double degree(std::size_t i) const {
    double k = 2.0 * loops[i];
    for (const auto& [j, w] : adj[i]) k += w;
    return k;
  }
};

// One local-moving phase. Returns true if any node changed community.
bool local_moving(const LevelGraph& g, std::vector<std::size_t>& comm, double resolution) {
  const auto n = g.adj.size();
  std::vector<double> k(n), tot(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    k[i] = g.degree(i);
    tot[comm[i]] += k[i];
  }
  const double m2 = 2.0 * g.total;
  const double eps = 1e-12 * std::max(1.0, g.total);
  bool moved_any = false;
  for (int pass = 0; pass < 1000; ++pass) {
    bool moved = false;
    for (std::size_t i = 0; i < n; ++i) {
      std::map<std::size_t, double> links;  // community -> weight from i
      for (const auto& [j, w] : g.adj[i]) links[comm[j]] += w;
      auto own = comm[i];
      tot[own] -= k[i];
      auto gain = [&](std::size_t c) {
        auto it = links.find(c);
        double kin = it == links.end() ? 0.0 : it->second;
        return kin - resolution * tot[c] * k[i] / m2;
      };
      auto best = own;
      double best_gain = gain(own);
      for (const auto& [c, w] : links) {
        double gc = gain(c);
        if (gc > best_gain + eps || (std::abs(gc - best_gain) <= eps && c < best)) {
          best = c;
          best_gain = gc;
        }
      }
      tot[best] += k[i];
      if (best != own) {
        comm[i] = best;
        moved = true;
        moved_any = true;
      }
    }
    if (!moved) break;
  }
  return moved_any;
}

}  // namespace

Partition detect_communities(const RelationGraph& graph, std::uint64_t /*seed*/) {
  const auto n = graph.nodes.size();
  Partition result(n);
  std::iota(result.begin(), result.end(), 0);
  if (n == 0) return result;

  LevelGraph level;
  level.adj.resize(n);
  level.loops.assign(n, 0.0);
  for (const auto& e : graph.edges) {
    if (e.source == e.target) {
      level.loops[e.source] += e.weight;
    } else {
      level.adj[e.source][e.target] += e.weight;
      level.adj[e.target][e.source] += e.weight;
    }
    level.total += e.weight;
  }
  if (level.total == 0.0) return result;

  std::vector<std::size_t> node_to_level(n);
  std::iota(node_to_level.begin(), node_to_level.end(), 0);
  for (int depth = 0; depth < 64; ++depth) {
    const auto ln = level.adj.size();
    std::vector<std::size_t> comm(ln);
    std::iota(comm.begin(), comm.end(), 0);
    if (!local_moving(level, comm, 1.0)) break;

    // compact labels in order of first appearance
    std::vector<std::size_t> remap(ln, SIZE_MAX);
    std::size_t next = 0;
    for (std::size_t i = 0; i < ln; ++i) {
      if (remap[comm[i]] == SIZE_MAX) remap[comm[i]] = next++;
    }
    LevelGraph agg;
    agg.adj.resize(next);
    agg.loops.assign(next, 0.0);
    agg.total = level.total;
    for (std::size_t i = 0; i < ln; ++i) {
      auto ci = remap[comm[i]];
      agg.loops[ci] += level.loops[i];
      for (const auto& [j, w] : level.adj[i]) {
        if (j < i) continue;  // each undirected edge once
        auto cj = remap[comm[j]];
        if (ci == cj) {
          agg.loops[ci] += w;
        } else {
          agg.adj[ci][cj] += w;
          agg.adj[cj][ci] += w;
        }
      }
    }
    for (auto& l : node_to_level) l = remap[comm[l]];
    level = std::move(agg);
    if (next == ln) break;
  }

  // final labels ordered by smallest member id
  std::map<std::size_t, int> label;
  for (std::size_t i = 0; i < n; ++i) {
    auto [it, inserted] = label.try_emplace(node_to_level[i], static_cast<int>(label.size()));
    result[i] = it->second;
  }
  return result;
}

GraphFormat graph_format_from_string(std::string_view name) {
  if (name == "gexf") return GraphFormat::Gexf;
  if (name == "dot") return GraphFormat::Dot;
  if (name == "json") return GraphFormat::Json;
  throw Error(ErrorCode::InvalidArgument, "unknown graph format: " + std::string(name));
}

namespace {

std::string xml_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&apos;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string dot_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out;
}

int community_of(const RelationGraph& g, std::size_t i) {
  return g.communities.size() == g.nodes.size() ? g.communities[i] : 0;
}

std::string to_gexf(const RelationGraph& g) {
  std::ostringstream out;
  out.precision(17);
  out << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<gexf xmlns=\"http://gexf.net/1.2\" version=\"1.2\">\n"
      << "  <graph mode=\"static\" defaultedgetype=\"undirected\">\n"
      << "    <attributes class=\"node\">\n"
      << "      <attribute id=\"0\" title=\"community\" type=\"integer\"/>\n"
      << "    </attributes>\n"
      << "    <nodes>\n";
  for (std::size_t i = 0; i < g.nodes.size(); ++i) {
    out << "      <node id=\"" << i << "\" label=\""
        << xml_escape(g.nodes[i].label.empty() ? g.nodes[i].id : g.nodes[i].label) << "\">\n"
        << "        <attvalues><attvalue for=\"0\" value=\"" << community_of(g, i) << "\"/></attvalues>\n"
        << "      </node>\n";
  }
  out << "    </nodes>\n    <edges>\n";
  for (std::size_t k = 0; k < g.edges.size(); ++k) {
    const auto& e = g.edges[k];
    out << "      <edge id=\"" << k << "\" source=\"" << e.source << "\" target=\"" << e.target << "\" weight=\""
        << e.weight << "\"/>\n";
  }
  out << "    </edges>\n  </graph>\n</gexf>\n";
  return out.str();
}

std::string to_dot(const RelationGraph& g) {
  std::ostringstream out;
  out.precision(17);
  out << "graph relations {\n  node [style=filled, colorscheme=set312];\n";
  for (std::size_t i = 0; i < g.nodes.size(); ++i) {
    auto c = community_of(g, i);
    out << "  n" << i << " [label=\"" << dot_escape(g.nodes[i].label) << "\", community=" << c
        << ", fillcolor=" << (c % 12) + 1 << "];\n";
  }
  for (const auto& e : g.edges) {
    out << "  n" << e.source << " -- n" << e.target << " [weight=" << e.weight
        << ", penwidth=" << 1.0 + 4.0 * e.weight << "];\n";
  }
  out << "}\n";
  return out.str();
}

std::string to_json(const RelationGraph& g) {
  nlohmann::json doc;
  doc["threshold"] = g.threshold;
  doc["nodes"] = nlohmann::json::array();
  for (std::size_t i = 0; i < g.nodes.size(); ++i) {
    nlohmann::json node{{"id", g.nodes[i].id}, {"label", g.nodes[i].label}};
    node["community"] = g.communities.size() == g.nodes.size() ? nlohmann::json(g.communities[i]) : nlohmann::json();
    doc["nodes"].push_back(std::move(node));
  }
  doc["edges"] = nlohmann::json::array();
  for (const auto& e : g.edges) {
    doc["edges"].push_back({{"source", e.source}, {"target", e.target}, {"weight", e.weight}});
  }
  return doc.dump(1);
}

}  // namespace

std::string export_graph(const RelationGraph& graph, GraphFormat format) {
  switch (format) {
    case GraphFormat::Gexf: return to_gexf(graph);
    case GraphFormat::Dot: return to_dot(graph);
    case GraphFormat::Json: return to_json(graph);
  }
  return {};
}

RelationGraph import_graph_json(std::string_view text) {
  try {
    auto doc = nlohmann::json::parse(text);
    RelationGraph g;
    g.threshold = doc.at("threshold").get<double>();
    bool has_communities = true;
    for (const auto& node : doc.at("nodes")) {
      g.nodes.push_back({node.at("id").get<std::string>(), node.at("label").get<std::string>()});
      if (node.at("community").is_null()) {
        has_communities = false;
      } else {
        g.communities.push_back(node.at("community").get<int>());
      }
    }
    if (!has_communities) g.communities.clear();
    for (const auto& e : doc.at("edges")) {
      g.edges.push_back({e.at("source").get<std::size_t>(), e.at("target").get<std::size_t>(),
                         e.at("weight").get<double>()});
    }
    return g;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidArgument, std::string("bad graph JSON: ") + e.what());
  }
}

}  // namespace modelprobe
