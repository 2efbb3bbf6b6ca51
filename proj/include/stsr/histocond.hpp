#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "stsr/ops.hpp"
#include "stsr/params.hpp"
#include "stsr/types.hpp"

namespace stsr {

// Non-overlapping patch tiling of a histology image with per-patch
// complexity scores and the current curriculum selection mask.
struct PatchSet {
    int patch_px = 0;
    int grid_h = 0;  // patches per column
    int grid_w = 0;  // patches per row
    std::vector<Tensor> patches;     // M images (C, p, p), row-major tile order
    std::vector<double> complexity;  // entropy in bits
    std::vector<bool> selected;

    int size() const { return static_cast<int>(patches.size()); }
    int selected_count() const {
        return static_cast<int>(std::count(selected.begin(), selected.end(), true));
    }
};

// Entropy threshold schedule over a training run; gamma is nondecreasing.
struct CurriculumSchedule {
    double gamma_min = 0.0;
    double gamma_max = 0.0;
    int total_epochs = 1;
};

// Shannon entropy (base 2) of the 256-bin grayscale histogram. Channels are
// averaged to gray first. Values must lie in [0, 1]; result in [0, 8] bits.
inline double entropy(const Tensor& patch) {
    if (patch.rank() != 3) throw DimensionError("entropy: expected (C, H, W) patch");
    const int c = patch.dim(0), hw = patch.dim(1) * patch.dim(2);
    const auto& v = patch.values();
    std::vector<int> hist(256, 0);
    const double inv_c = 1.0 / c;
    for (int i = 0; i < hw; ++i) {
        double gray = 0.0;
        for (int ch = 0; ch < c; ++ch) gray += v[static_cast<std::size_t>(ch) * hw + i];
        gray *= inv_c;
        if (gray < 0.0 || gray > 1.0) throw DomainError("entropy: values must lie in [0, 1]");
        int bin = std::min(255, static_cast<int>(gray * 256.0));
        ++hist[static_cast<std::size_t>(bin)];
    }
    double h = 0.0;
    for (int n : hist) {
        if (n == 0) continue;
        double p = static_cast<double>(n) / hw;
        h -= p * std::log2(p);
    }
    return h;
}

// Tiles the image into non-overlapping patch_px x patch_px patches in
// row-major order and scores each with entropy(). All patches start selected.
inline PatchSet crop_patches(const HistologyImage& h, int patch_px) {
    if (patch_px < 1) throw DomainError("crop_patches: patch size must be positive");
    if (h.height() % patch_px != 0 || h.width() % patch_px != 0)
        throw DimensionError("crop_patches: image " + h.data.shape_string() +
                             " not divisible by patch size " + std::to_string(patch_px));
    PatchSet ps;
    ps.patch_px = patch_px;
    ps.grid_h = h.height() / patch_px;
    ps.grid_w = h.width() / patch_px;
    const int c = h.channels();
    for (int i = 0; i < ps.grid_h; ++i)
        for (int j = 0; j < ps.grid_w; ++j) {
            std::vector<Tensor> chans;
            chans.reserve(static_cast<std::size_t>(c));
            for (int ch = 0; ch < c; ++ch)
                chans.push_back(reshape(
                    slice_region(h.data, ch, i * patch_px, j * patch_px, patch_px, patch_px),
                    {1, patch_px, patch_px}));
            Tensor patch = c == 1 ? chans[0] : concat(chans, 0);
            ps.complexity.push_back(entropy(patch));
            ps.patches.push_back(std::move(patch));
        }
    ps.selected.assign(ps.patches.size(), true);
    return ps;
}

inline double gamma_at(const CurriculumSchedule& sched, int epoch) {
    if (sched.total_epochs < 1) throw DomainError("gamma_at: total_epochs must be >= 1");
    if (sched.gamma_min > sched.gamma_max)
        throw DomainError("gamma_at: gamma_min must not exceed gamma_max");
    if (epoch < 0 || epoch >= sched.total_epochs)
        throw DomainError("gamma_at: epoch " + std::to_string(epoch) + " outside [0, " +
                          std::to_string(sched.total_epochs) + ")");
    if (sched.total_epochs == 1) return sched.gamma_min;
    return sched.gamma_min +
           (sched.gamma_max - sched.gamma_min) * epoch / (sched.total_epochs - 1);
}

// Keeps exactly the patches with complexity strictly above gamma. When none
// pass, the single highest-entropy patch is retained so downstream
// cross-attention always has at least one key.
inline PatchSet select_patches(PatchSet ps, double gamma) {
    bool any = false;
    for (std::size_t m = 0; m < ps.patches.size(); ++m) {
        ps.selected[m] = ps.complexity[m] > gamma;
        any = any || ps.selected[m];
    }
    if (!any && !ps.patches.empty()) {
        std::size_t best = 0;
        for (std::size_t m = 1; m < ps.complexity.size(); ++m)
            if (ps.complexity[m] > ps.complexity[best]) best = m;
        ps.selected[best] = true;
    }
    return ps;
}

struct ConvLayer {
    Tensor w;  // (Cout, Cin, kh, kw)
    Tensor b;  // (Cout)
};

// Tissue-level encoder: a stem conv, then stride-2 stages until the spatial
// size reaches the HR latent grid, then an output conv. d_t channels out.
struct TissueEncoderParams {
    ConvLayer stem;
    std::vector<ConvLayer> down;
    ConvLayer out;
};

inline TissueEncoderParams make_tissue_encoder(ParamStore& store, const std::string& prefix,
                                               int in_channels, int d_t, int n_stages, Rng& rng) {
    TissueEncoderParams p;
    p.stem = {store.create_he(prefix + ".stem.w", {d_t, in_channels, 3, 3}, in_channels * 9, rng),
              store.create_zeros(prefix + ".stem.b", {d_t})};
    for (int s = 0; s < n_stages; ++s) {
        std::string name = prefix + ".down" + std::to_string(s);
        p.down.push_back({store.create_he(name + ".w", {d_t, d_t, 3, 3}, d_t * 9, rng),
                          store.create_zeros(name + ".b", {d_t})});
    }
    p.out = {store.create_he(prefix + ".out.w", {d_t, d_t, 3, 3}, d_t * 9, rng),
             store.create_zeros(prefix + ".out.b", {d_t})};
    return p;
}

inline TissueEncoderParams tissue_encoder_from_store(const ParamStore& store,
                                                     const std::string& prefix, int n_stages) {
    TissueEncoderParams p;
    p.stem = {store.at(prefix + ".stem.w"), store.at(prefix + ".stem.b")};
    for (int s = 0; s < n_stages; ++s) {
        std::string name = prefix + ".down" + std::to_string(s);
        p.down.push_back({store.at(name + ".w"), store.at(name + ".b")});
    }
    p.out = {store.at(prefix + ".out.w"), store.at(prefix + ".out.b")};
    return p;
}

// F_tissue: d_t channels over the HR latent grid. The histology size must be
// hr_grid * 2^k for the configured number of stride-2 stages.
inline Tensor encode_tissue(const HistologyImage& h, const TissueEncoderParams& p, int hr_grid) {
    int size = h.height();
    Tensor x = silu(conv2d(h.data, p.stem.w, p.stem.b, 1, 1));
    for (const auto& layer : p.down) {
        if (size == hr_grid) break;
        x = silu(conv2d(x, layer.w, layer.b, 2, 1));
        size = (size + 1) / 2;
    }
    if (size != hr_grid)
        throw DimensionError("encode_tissue: histology " + h.data.shape_string() +
                             " cannot reach grid " + std::to_string(hr_grid) + " with " +
                             std::to_string(p.down.size()) + " stride-2 stages");
    return conv2d(x, p.out.w, p.out.b, 1, 1);
}

// Shared-weight cell-level patch encoder: two stride-2 convs then spatial
// mean pooling to a d_c vector per selected patch.
struct CellEncoderParams {
    ConvLayer c1;
    ConvLayer c2;
};

inline CellEncoderParams make_cell_encoder(ParamStore& store, const std::string& prefix,
                                           int in_channels, int d_c, Rng& rng) {
    CellEncoderParams p;
    p.c1 = {store.create_he(prefix + ".c1.w", {d_c, in_channels, 3, 3}, in_channels * 9, rng),
            store.create_zeros(prefix + ".c1.b", {d_c})};
    p.c2 = {store.create_he(prefix + ".c2.w", {d_c, d_c, 3, 3}, d_c * 9, rng),
            store.create_zeros(prefix + ".c2.b", {d_c})};
    return p;
}

inline CellEncoderParams cell_encoder_from_store(const ParamStore& store,
                                                 const std::string& prefix) {
    return {{store.at(prefix + ".c1.w"), store.at(prefix + ".c1.b")},
            {store.at(prefix + ".c2.w"), store.at(prefix + ".c2.b")}};
}

// F_cell^s: one row per selected patch, in patch order.
inline Tensor encode_cells(const PatchSet& ps, const CellEncoderParams& p) {
    std::vector<Tensor> rows;
    for (int m = 0; m < ps.size(); ++m) {
        if (!ps.selected[static_cast<std::size_t>(m)]) continue;
        Tensor x = silu(conv2d(ps.patches[static_cast<std::size_t>(m)], p.c1.w, p.c1.b, 2, 1));
        x = silu(conv2d(x, p.c2.w, p.c2.b, 2, 1));
        Tensor pooled = block_average(x, x.dim(1), x.dim(2));  // (d_c, 1, 1)
        rows.push_back(reshape(pooled, {1, pooled.dim(0)}));
    }
    if (rows.empty()) throw DomainError("encode_cells: empty selection");
    return rows.size() == 1 ? rows[0] : concat(rows, 0);
}

struct CrossAttentionParams {
    Tensor wq;  // (d_t, d)
    Tensor wk;  // (d_c, d)
    Tensor wv;  // (d_c, d_t)
};

inline CrossAttentionParams make_cross_attention(ParamStore& store, const std::string& prefix,
                                                 int d_t, int d_c, int d, Rng& rng) {
    return {store.create_he(prefix + ".wq", {d_t, d}, d_t, rng),
            store.create_he(prefix + ".wk", {d_c, d}, d_c, rng),
            store.create_he(prefix + ".wv", {d_c, d_t}, d_c, rng)};
}

inline CrossAttentionParams cross_attention_from_store(const ParamStore& store,
                                                       const std::string& prefix) {
    return {store.at(prefix + ".wq"), store.at(prefix + ".wk"), store.at(prefix + ".wv")};
}

// softmax(Q K^T / sqrt(d)) V with queries from the flattened tissue grid and
// keys/values from the selected cell vectors; output on the tissue grid.
inline Tensor cross_attend(const Tensor& f_tissue, const Tensor& f_cells,
                           const CrossAttentionParams& p) {
    detail::check_rank("cross_attend", f_tissue, 3);
    detail::check_rank("cross_attend", f_cells, 2);
    const int d_t = f_tissue.dim(0), gh = f_tissue.dim(1), gw = f_tissue.dim(2);
    if (p.wq.dim(0) != d_t)
        throw DimensionError("cross_attend: tissue channels " + f_tissue.shape_string() +
                             " vs W_Q " + p.wq.shape_string());
    if (p.wk.dim(0) != f_cells.dim(1) || p.wv.dim(0) != f_cells.dim(1))
        throw DimensionError("cross_attend: cell channels " + f_cells.shape_string() +
                             " vs W_K " + p.wk.shape_string());
    const int d = p.wq.dim(1);

    Tensor queries = transpose(reshape(f_tissue, {d_t, gh * gw}));  // (P, d_t)
    Tensor q = matmul(queries, p.wq);                               // (P, d)
    Tensor k = matmul(f_cells, p.wk);                               // (m, d)
    Tensor v = matmul(f_cells, p.wv);                               // (m, d_t)
    Tensor attn = softmax_rows(mul_scalar(matmul(q, transpose(k)), 1.0 / std::sqrt(d)));
    Tensor out = matmul(attn, v);  // (P, d_t)
    return reshape(transpose(out), {d_t, gh, gw});
}

}  // namespace stsr
