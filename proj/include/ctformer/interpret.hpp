// Copyright 2026 The ctformer Authors
// SPDX-License-Identifier: Apache-2.0

// Attention saliency maps and explanatory graphs. Graph nodes are attended
// token-grid cells mapped to pixel coordinates; an edge links a node to the
// strongest attended cell of the next layer when only the node's
// neighbourhood of the feature map is kept.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ctformer/attention.hpp"
#include "ctformer/error.hpp"
#include "ctformer/model.hpp"
#include "ctformer/tensor.hpp"

namespace ctformer {

enum class SaliencyReduce { kColumn, kRow };

struct SaliencyMap {
  int layer_id = 0;
  Tensor values;  // [h, w] in [0, 1]
  double alpha = 0.4;
};

/// Per-token attention score: mean over heads and over the query axis
/// (attention received), or over the key axis with kRow. Batch item `item`.
inline std::vector<double> token_scores(const Tensor& att, SaliencyReduce reduce = SaliencyReduce::kColumn,
                                        std::int64_t item = 0) {
  if (att.rank() != 4 || att.dim(2) != att.dim(3)) throw ShapeError("expected att [b, heads, n, n], got " + att.shape().str());
  if (item < 0 || item >= att.dim(0)) throw ContractError("batch item out of range");
  const std::int64_t heads = att.dim(1), n = att.dim(2);
  std::vector<double> s(static_cast<std::size_t>(n), 0.0);
  const float* p = att.data().data() + item * heads * n * n;
  for (std::int64_t h = 0; h < heads; ++h) {
    for (std::int64_t i = 0; i < n; ++i) {
      for (std::int64_t j = 0; j < n; ++j) {
        const double v = p[(h * n + i) * n + j];
        s[static_cast<std::size_t>(reduce == SaliencyReduce::kColumn ? j : i)] += v;
      }
    }
  }
  for (double& v : s) v /= static_cast<double>(heads * n);
  return s;
}

/// Min-max normalization to [0, 1]; a constant input becomes all zeros.
inline void normalize_unit(Tensor& t) {
  if (t.size() == 0) return;
  const auto [lo, hi] = std::minmax_element(t.data().begin(), t.data().end());
  const float a = *lo, b = *hi;
  for (float& v : t.data()) v = b > a ? (v - a) / (b - a) : 0.0F;
}

/// Bilinear resize with half-pixel centres and edge clamping.
inline Tensor resize_bilinear(const Tensor& src, std::int64_t oh, std::int64_t ow) {
  if (src.rank() != 2) throw ShapeError("resize_bilinear expects [h, w]");
  const std::int64_t ih = src.dim(0), iw = src.dim(1);
  Tensor out(Shape{oh, ow});
  const double sy = static_cast<double>(ih) / static_cast<double>(oh);
  const double sx = static_cast<double>(iw) / static_cast<double>(ow);
  for (std::int64_t y = 0; y < oh; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(ih - 1));
    const auto y0 = static_cast<std::int64_t>(std::floor(fy));
    const std::int64_t y1 = std::min(y0 + 1, ih - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::int64_t x = 0; x < ow; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(iw - 1));
      const auto x0 = static_cast<std::int64_t>(std::floor(fx));
      const std::int64_t x1 = std::min(x0 + 1, iw - 1);
      const double wx = fx - static_cast<double>(x0);
      const double v = (1 - wy) * ((1 - wx) * src.at(y0, x0) + wx * src.at(y0, x1)) +
                       wy * ((1 - wx) * src.at(y1, x0) + wx * src.at(y1, x1));
      out.at(y, x) = static_cast<float>(v);
    }
  }
  return out;
}

/// Token scores on the square token grid, normalized to [0, 1].
inline SaliencyMap grid_saliency(const AttentionRecord& record, SaliencyReduce reduce = SaliencyReduce::kColumn,
                                 std::int64_t item = 0) {
  const std::vector<double> s = token_scores(record.att, reduce, item);
  const std::int64_t side = square_side(static_cast<std::int64_t>(s.size()));
  SaliencyMap m{record.layer_id, Tensor(Shape{side, side}), 0.4};
  for (std::size_t i = 0; i < s.size(); ++i) m.values[i] = static_cast<float>(s[i]);
  normalize_unit(m.values);
  return m;
}

/// Saliency resized to the image and normalized to [0, 1].
inline SaliencyMap saliency(const AttentionRecord& record, std::int64_t image_h, std::int64_t image_w,
                            SaliencyReduce reduce = SaliencyReduce::kColumn, std::int64_t item = 0) {
  SaliencyMap grid = grid_saliency(record, reduce, item);
  SaliencyMap m{record.layer_id, resize_bilinear(grid.values, image_h, image_w), 0.4};
  normalize_unit(m.values);
  return m;
}

struct GraphNode {
  int layer_id = 0;
  std::int64_t y = 0;  // pixel position in the input image
  std::int64_t x = 0;
  std::int64_t grid_y = 0;  // cell in the layer's token grid
  std::int64_t grid_x = 0;
  double activation = 0.0;

  std::string id() const { return "L" + std::to_string(layer_id) + "_" + std::to_string(y) + "_" + std::to_string(x); }
};

struct GraphEdge {
  std::size_t from = 0;  // indices into ExplanatoryGraph::nodes
  std::size_t to = 0;
};

struct ExplanatoryGraph {
  std::vector<GraphNode> nodes;
  std::vector<GraphEdge> edges;

  std::vector<std::size_t> layer_nodes(int layer_id) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      if (nodes[i].layer_id == layer_id) out.push_back(i);
    }
    return out;
  }
};

/// The k highest cells; ties go to the earlier cell in row-major order.
/// Nodes carry map coordinates in both the pixel and grid fields.
inline std::vector<GraphNode> topk_nodes(const SaliencyMap& sal, std::size_t k) {
  const Tensor& v = sal.values;
  std::vector<std::size_t> idx(v.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  k = std::min(k, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) { return v[a] > v[b] || (v[a] == v[b] && a < b); });
  std::vector<GraphNode> out;
  const std::int64_t w = v.dim(1);
  for (std::size_t i = 0; i < k; ++i) {
    const auto y = static_cast<std::int64_t>(idx[i]) / w, x = static_cast<std::int64_t>(idx[i]) % w;
    out.push_back({sal.layer_id, y, x, y, x, v[idx[i]]});
  }
  return out;
}

/// Cells strictly greater than every neighbour within Chebyshev `radius`;
/// the k strongest are kept (ties row-major). A plateau yields no nodes.
inline std::vector<GraphNode> local_max_nodes(const SaliencyMap& sal, std::int64_t radius, std::size_t k) {
  if (radius < 1) throw ContractError("local_max_nodes: radius must be >= 1");
  const Tensor& v = sal.values;
  const std::int64_t h = v.dim(0), w = v.dim(1);
  std::vector<GraphNode> out;
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      const float c = v.at(y, x);
      bool peak = true;
      for (std::int64_t dy = -radius; dy <= radius && peak; ++dy) {
        for (std::int64_t dx = -radius; dx <= radius; ++dx) {
          const std::int64_t yy = y + dy, xx = x + dx;
          if ((dy == 0 && dx == 0) || yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
          if (v.at(yy, xx) >= c) {
            peak = false;
            break;
          }
        }
      }
      if (peak) out.push_back({sal.layer_id, y, x, y, x, c});
    }
  }
  std::stable_sort(out.begin(), out.end(), [](const GraphNode& a, const GraphNode& b) { return a.activation > b.activation; });
  if (out.size() > k) out.resize(k);
  return out;
}

enum class NodeMethod { kTopK, kLocalMax };

struct GraphOptions {
  NodeMethod method = NodeMethod::kTopK;
  std::size_t k = 60;
  std::int64_t lm_radius = 1;
  std::int64_t mask_radius = 2;
  SaliencyReduce reduce = SaliencyReduce::kColumn;
};

/// Pixel position of a token-grid cell of block `layer` (0-based).
inline std::pair<std::int64_t, std::int64_t> cell_to_pixel(const CTformerModel& model, std::size_t layer,
                                                            std::int64_t gy, std::int64_t gx) {
  const auto [origin, stride] = model.layer_pixel_map(layer);
  const std::int64_t hi = model.patch_size() - 1;
  auto map = [&](std::int64_t g) {
    return std::clamp(static_cast<std::int64_t>(std::lround(origin + stride * static_cast<double>(g))),
                      std::int64_t{0}, hi);
  };
  return {map(gy), map(gx)};
}

/// Follows one node of block `layer` (0-based) to block layer + 1: the
/// layer's output is zeroed outside a (2r+1)^2 window around the node, the
/// next stage runs on it (skip connections come from the unmasked pass), and
/// the argmax of the next layer's token scores becomes the linked node.
inline GraphNode trace_edge(const CTformerModel& model, const ForwardTrace& trace, const GraphNode& node,
                            std::size_t layer, std::int64_t mask_radius = 2,
                            SaliencyReduce reduce = SaliencyReduce::kColumn) {
  if (layer + 1 >= model.layers()) throw ContractError("trace_edge: the last attention layer has no successor");
  if (mask_radius < 0) throw ContractError("trace_edge: mask radius must be non-negative");
  const std::int64_t side = model.layer_grid(layer);
  if (node.grid_y < 0 || node.grid_y >= side || node.grid_x < 0 || node.grid_x >= side) {
    throw ContractError("trace_edge: node outside the " + std::to_string(side) + "x" + std::to_string(side) +
                        " token grid");
  }
  Tape::Pause pause;
  const Tensor& out = trace.block_outputs.at(layer);
  Tensor masked(out.shape());
  const std::int64_t d = out.dim(2);
  for (std::int64_t b = 0; b < out.dim(0); ++b) {
    for (std::int64_t y = std::max<std::int64_t>(0, node.grid_y - mask_radius);
         y <= std::min(side - 1, node.grid_y + mask_radius); ++y) {
      for (std::int64_t x = std::max<std::int64_t>(0, node.grid_x - mask_radius);
           x <= std::min(side - 1, node.grid_x + mask_radius); ++x) {
        const std::int64_t off = (b * side * side + y * side + x) * d;
        std::copy(out.data().begin() + off, out.data().begin() + off + d, masked.data().begin() + off);
      }
    }
  }
  const Tensor next_in = model.layer_input(layer + 1, masked, trace.block_outputs);
  const BlockOutput next = transformer_block(next_in, model.block(layer + 1), true);
  const std::vector<double> s = token_scores(next.record->att, reduce);
  const auto best = static_cast<std::int64_t>(std::max_element(s.begin(), s.end()) - s.begin());
  const std::int64_t next_side = model.layer_grid(layer + 1);
  GraphNode target;
  target.layer_id = static_cast<int>(layer) + 2;
  target.grid_y = best / next_side;
  target.grid_x = best % next_side;
  std::tie(target.y, target.x) = cell_to_pixel(model, layer + 1, target.grid_y, target.grid_x);
  target.activation = s[static_cast<std::size_t>(best)];
  return target;
}

/// Builds the layered graph for one [1, 1, p, p] patch: first-layer nodes by
/// TopK or local maxima of its token scores, later layers by tracing.
inline ExplanatoryGraph build_graph(const CTformerModel& model, const Tensor& patch, const GraphOptions& opt = {}) {
  Tape::Pause pause;
  const ForwardTrace trace = model.forward_trace(patch, true);
  ExplanatoryGraph g;
  const SaliencyMap first = grid_saliency(trace.records.front(), opt.reduce);
  std::vector<GraphNode> layer_nodes =
      opt.method == NodeMethod::kTopK ? topk_nodes(first, opt.k) : local_max_nodes(first, opt.lm_radius, opt.k);
  std::vector<std::size_t> current;
  for (GraphNode n : layer_nodes) {
    std::tie(n.y, n.x) = cell_to_pixel(model, 0, n.grid_y, n.grid_x);
    current.push_back(g.nodes.size());
    g.nodes.push_back(n);
  }
  for (std::size_t layer = 0; layer + 1 < model.layers(); ++layer) {
    std::map<std::pair<std::int64_t, std::int64_t>, std::size_t> seen;
    std::vector<std::size_t> next;
    for (std::size_t from : current) {
      const GraphNode target = trace_edge(model, trace, g.nodes[from], layer, opt.mask_radius, opt.reduce);
      const auto key = std::pair{target.grid_y, target.grid_x};
      auto it = seen.find(key);
      if (it == seen.end()) {
        it = seen.emplace(key, g.nodes.size()).first;
        next.push_back(g.nodes.size());
        g.nodes.push_back(target);
      }
      g.edges.push_back({from, it->second});
    }
    current = std::move(next);
  }
  return g;
}

/// DOT text: one node per graph node (activation attribute), one edge per link.
inline void write_dot(std::ostream& os, const ExplanatoryGraph& g) {
  os << "digraph explanatory {\n  rankdir=LR;\n";
  for (const GraphNode& n : g.nodes) {
    os << "  \"" << n.id() << "\" [layer=" << n.layer_id << ", activation=" << n.activation << "];\n";
  }
  for (const GraphEdge& e : g.edges) {
    os << "  \"" << g.nodes[e.from].id() << "\" -> \"" << g.nodes[e.to].id() << "\";\n";
  }
  os << "}\n";
}

inline std::string to_dot(const ExplanatoryGraph& g) {
  std::ostringstream os;
  write_dot(os, g);
  return os.str();
}

}  // namespace ctformer
