#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "stsr/ops.hpp"

namespace stsr {

// Per-gene activity threshold used when estimating co-expression.
enum class TauMode { Mean, Median, Fixed };

inline TauMode tau_mode_from_string(const std::string& s) {
    if (s == "mean") return TauMode::Mean;
    if (s == "median") return TauMode::Median;
    if (s == "fixed") return TauMode::Fixed;
    throw DomainError("tau mode must be one of mean|median|fixed, got '" + s + "'");
}

inline std::string to_string(TauMode m) {
    switch (m) {
        case TauMode::Mean: return "mean";
        case TauMode::Median: return "median";
        case TauMode::Fixed: return "fixed";
    }
    return "mean";
}

// Symmetric N x N co-expression intensity matrix with entries in [0, 1].
struct GeneGraph {
    Tensor intensity;  // (N, N), plain values (not differentiated through)

    int n_genes() const { return intensity.dim(0); }
};

// Co-activity estimate from per-gene feature rows (N x C). A coordinate is
// active when it exceeds the gene's threshold tau_i; the relative intensity
// p(i|j) = |a_i and a_j| / |a_j| with 0/0 -> 0, symmetrized as
// I_ij = (p(i|j) + p(j|i)) / 2. A constant row has an empty activity mask,
// so its diagonal entry is 0; any active gene has I_ii = 1.
inline GeneGraph coexpression_matrix(const Tensor& features, TauMode mode = TauMode::Mean,
                                     double fixed_tau = 0.0) {
    detail::check_rank("coexpression_matrix", features, 2);
    const int n = features.dim(0), c = features.dim(1);
    const auto& v = features.values();

    std::vector<std::vector<bool>> active(static_cast<std::size_t>(n));
    std::vector<int> counts(static_cast<std::size_t>(n), 0);
    std::vector<double> row(static_cast<std::size_t>(c));
    for (int i = 0; i < n; ++i) {
        const double* src = v.data() + static_cast<std::ptrdiff_t>(i) * c;
        double tau = fixed_tau;
        if (mode == TauMode::Mean) {
            double s = 0.0;
            for (int k = 0; k < c; ++k) s += src[k];
            tau = s / c;
        } else if (mode == TauMode::Median) {
            std::copy(src, src + c, row.begin());
            std::nth_element(row.begin(), row.begin() + c / 2, row.end());
            tau = row[static_cast<std::size_t>(c / 2)];
        }
        auto& mask = active[static_cast<std::size_t>(i)];
        mask.resize(static_cast<std::size_t>(c));
        for (int k = 0; k < c; ++k) {
            mask[static_cast<std::size_t>(k)] = src[k] > tau;
            counts[static_cast<std::size_t>(i)] += mask[static_cast<std::size_t>(k)] ? 1 : 0;
        }
    }

    std::vector<double> intensity(static_cast<std::size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = i; j < n; ++j) {
            int both = 0;
            for (int k = 0; k < c; ++k)
                both += (active[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)] &&
                         active[static_cast<std::size_t>(j)][static_cast<std::size_t>(k)])
                            ? 1
                            : 0;
            double p_ij = counts[static_cast<std::size_t>(j)] == 0
                              ? 0.0
                              : static_cast<double>(both) / counts[static_cast<std::size_t>(j)];
            double p_ji = counts[static_cast<std::size_t>(i)] == 0
                              ? 0.0
                              : static_cast<double>(both) / counts[static_cast<std::size_t>(i)];
            double val = 0.5 * (p_ij + p_ji);
            intensity[static_cast<std::size_t>(i) * n + j] = val;
            intensity[static_cast<std::size_t>(j) * n + i] = val;
        }
    return {Tensor({n, n}, std::move(intensity))};
}

enum class GraphAct { Relu, Silu };

// Single graph-convolution layer with residual mixing:
// F_mid = act(I F W_g), F_out = alpha F_mid + (1 - alpha) F.
// Differentiable in F and W_g; the intensity matrix enters as a constant.
inline Tensor graph_layer(const Tensor& features, const GeneGraph& graph, const Tensor& w_g,
                          double alpha, GraphAct act = GraphAct::Relu) {
    detail::check_rank("graph_layer", features, 2);
    const int c = features.dim(1);
    if (w_g.rank() != 2 || w_g.dim(0) != c || w_g.dim(1) != c)
        throw DimensionError("graph_layer: W_g " + w_g.shape_string() + " must be " +
                             std::to_string(c) + "x" + std::to_string(c));
    if (graph.intensity.dim(0) != features.dim(0))
        throw DimensionError("graph_layer: intensity " + graph.intensity.shape_string() +
                             " vs features " + features.shape_string());
    if (alpha < 0.0 || alpha > 1.0) throw DomainError("graph_layer: alpha must lie in [0, 1]");
    Tensor mixed = matmul(matmul(graph.intensity, features), w_g);
    Tensor mid = act == GraphAct::Relu ? relu(mixed) : silu(mixed);
    return add(mul_scalar(mid, alpha), mul_scalar(features, 1.0 - alpha));
}

// Bottleneck integration: channels are grouped per gene (contiguous groups of
// size channels/N), each group is spatially mean-pooled into that gene's node
// vector, the graph layer updates the nodes, and the node delta is broadcast
// back as a per-channel bias. Shape preserving; exactly the identity when
// alpha = 0. When `frozen` is given it is used instead of re-estimating the
// co-expression matrix from the pooled features.
inline Tensor apply_gene_graph(const Tensor& bottleneck, int n_genes, const Tensor& w_g,
                               double alpha, TauMode mode = TauMode::Mean, double fixed_tau = 0.0,
                               GraphAct act = GraphAct::Relu, const GeneGraph* frozen = nullptr) {
    detail::check_rank("apply_gene_graph", bottleneck, 3);
    const int c = bottleneck.dim(0);
    if (n_genes < 1 || c % n_genes != 0)
        throw DimensionError("apply_gene_graph: " + std::to_string(n_genes) +
                             " gene groups do not divide " + bottleneck.shape_string());
    const int node_dim = c / n_genes;
    Tensor pooled = reshape(block_average(bottleneck, bottleneck.dim(1), bottleneck.dim(2)),
                            {n_genes, node_dim});
    GeneGraph graph = frozen ? *frozen
                             : coexpression_matrix(Tensor(pooled.shape(), pooled.values()), mode,
                                                   fixed_tau);
    Tensor updated = graph_layer(pooled, graph, w_g, alpha, act);
    Tensor correction = reshape(sub(updated, pooled), {c});
    return bias_add_channels(bottleneck, correction);
}

}  // namespace stsr
