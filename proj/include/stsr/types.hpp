#pragma once

#include <string>
#include <vector>

#include "stsr/tensor.hpp"

namespace stsr {

// Multi-gene expression map: one channel per gene, nonnegative values.
// When the stack has been min-max normalized per gene, the constants are
// recorded so predictions can be mapped back to the raw scale.
struct STStack {
    std::vector<std::string> genes;
    Tensor data;  // (N, H, W)
    double scale_um = 0.0;
    std::vector<double> norm_min;  // empty when the stack is raw
    std::vector<double> norm_max;

    int n_genes() const { return data.rank() == 3 ? data.dim(0) : 0; }
    int height() const { return data.dim(1); }
    int width() const { return data.dim(2); }

    void validate() const {
        if (data.rank() != 3)
            throw DimensionError("STStack: expected (genes, H, W) data, got " +
                                 data.shape_string());
        if (static_cast<int>(genes.size()) != data.dim(0))
            throw DimensionError("STStack: " + std::to_string(genes.size()) + " gene names for " +
                                 std::to_string(data.dim(0)) + " channels");
        for (double v : data.values())
            if (v < 0.0) throw DomainError("STStack: negative expression value");
        if (!norm_min.empty() &&
            (norm_min.size() != genes.size() || norm_max.size() != genes.size()))
            throw DimensionError("STStack: normalization constants do not match gene count");
    }
};

// Paired tissue micrograph, single- or three-channel, values in [0, 1].
struct HistologyImage {
    Tensor data;  // (C, H, W)
    double scale_um = 0.0;

    int channels() const { return data.dim(0); }
    int height() const { return data.dim(1); }
    int width() const { return data.dim(2); }

    void validate() const {
        if (data.rank() != 3 || (data.dim(0) != 1 && data.dim(0) != 3))
            throw DimensionError("HistologyImage: expected 1 or 3 channels, got " +
                                 data.shape_string());
        if (scale_um <= 0.0) throw DomainError("HistologyImage: scale must be positive");
        for (double v : data.values())
            if (v < 0.0 || v > 1.0)
                throw DomainError("HistologyImage: values must lie in [0, 1]");
    }
};

}  // namespace stsr
