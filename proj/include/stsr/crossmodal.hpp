#pragma once

#include <string>
#include <vector>

#include "stsr/histocond.hpp"
#include "stsr/ops.hpp"
#include "stsr/params.hpp"

namespace stsr {

// Learned per-region modulation filter: one FC mapping the a*a correlation
// block to a*a filter weights, shared across channels and tiles.
struct ModulationParams {
    Tensor w;  // (a^2, a^2)
    Tensor b;  // (a^2)
};

inline ModulationParams make_modulation(ParamStore& store, const std::string& prefix, int a,
                                        Rng& rng) {
    return {store.create_he(prefix + ".w", {a * a, a * a}, a * a, rng),
            store.create_zeros(prefix + ".b", {a * a})};
}

inline ModulationParams modulation_from_store(const ParamStore& store, const std::string& prefix) {
    return {store.at(prefix + ".w"), store.at(prefix + ".b")};
}

// Cross-modal adaptive modulation over non-overlapping a x a tiles, one
// channel at a time. Per tile: G = A_tgt^T A_other, w = FC(flatten(G))
// reshaped to a x a, A'_tgt = A_tgt w. The direction is fixed by which
// feature grid plays target; each direction carries its own FC weights.
inline Tensor modulate(const Tensor& f_target, const Tensor& f_other, const ModulationParams& p,
                       int a) {
    detail::check_rank("modulate", f_target, 3);
    detail::check_rank("modulate", f_other, 3);
    if (f_target.shape() != f_other.shape())
        throw DimensionError("modulate: feature grids differ, " + f_target.shape_string() +
                             " vs " + f_other.shape_string());
    const int d = f_target.dim(0), gh = f_target.dim(1), gw = f_target.dim(2);
    if (a < 1 || gh % a != 0 || gw % a != 0)
        throw DimensionError("modulate: grid " + f_target.shape_string() +
                             " not divisible by region size " + std::to_string(a));
    if (p.w.dim(0) != a * a || p.w.dim(1) != a * a)
        throw DimensionError("modulate: FC weights " + p.w.shape_string() +
                             " do not match region size " + std::to_string(a));
    const int ty = gh / a, tx = gw / a;

    std::vector<Tensor> tiles;
    tiles.reserve(static_cast<std::size_t>(d) * ty * tx);
    for (int c = 0; c < d; ++c)
        for (int i = 0; i < ty; ++i)
            for (int j = 0; j < tx; ++j) {
                Tensor a_tgt = slice_region(f_target, c, i * a, j * a, a, a);
                Tensor a_oth = slice_region(f_other, c, i * a, j * a, a, a);
                Tensor corr = matmul(transpose(a_tgt), a_oth);
                Tensor w = reshape(fc(reshape(corr, {1, a * a}), p.w, p.b), {a, a});
                tiles.push_back(matmul(a_tgt, w));
            }
    return stack_tiles(tiles, d, gh, gw);
}

// Four dedicated 1x1-convolution heads projecting the modulated pair into
// modal-unique (U) and modal-sharing (S) features of the same shape.
struct DisentangleParams {
    ConvLayer u_h, s_h, u_y, s_y;
};

struct DisentangledSet {
    Tensor u_h, s_h, u_y, s_y;
};

inline DisentangleParams make_disentangle(ParamStore& store, const std::string& prefix, int d,
                                          Rng& rng) {
    auto head = [&](const std::string& name) -> ConvLayer {
        return {store.create_he(prefix + "." + name + ".w", {d, d, 1, 1}, d, rng),
                store.create_zeros(prefix + "." + name + ".b", {d})};
    };
    return {head("u_h"), head("s_h"), head("u_y"), head("s_y")};
}

inline DisentangleParams disentangle_from_store(const ParamStore& store,
                                                const std::string& prefix) {
    auto head = [&](const std::string& name) -> ConvLayer {
        return {store.at(prefix + "." + name + ".w"), store.at(prefix + "." + name + ".b")};
    };
    return {head("u_h"), head("s_h"), head("u_y"), head("s_y")};
}

inline DisentangledSet disentangle(const Tensor& modulated_h, const Tensor& modulated_y,
                                   const DisentangleParams& p) {
    if (modulated_h.shape() != modulated_y.shape())
        throw DimensionError("disentangle: modulated grids differ, " +
                             modulated_h.shape_string() + " vs " + modulated_y.shape_string());
    DisentangledSet ds;
    ds.u_h = conv2d(modulated_h, p.u_h.w, p.u_h.b, 1, 0);
    ds.s_h = conv2d(modulated_h, p.s_h.w, p.s_h.b, 1, 0);
    ds.u_y = conv2d(modulated_y, p.u_y.w, p.u_y.b, 1, 0);
    ds.s_y = conv2d(modulated_y, p.s_y.w, p.s_y.b, 1, 0);
    return ds;
}

// ||S_y - S_h||_2 / (||U_y - U_h||_2 + eps). The eps guards the otherwise
// unbounded ratio when the unique features coincide.
inline Tensor cm_dis_loss(const DisentangledSet& ds, double eps = 1e-6) {
    if (eps <= 0.0) throw DomainError("cm_dis_loss: eps must be positive");
    Tensor num = l2_norm(sub(ds.s_y, ds.s_h));
    Tensor den = add_scalar(l2_norm(sub(ds.u_y, ds.u_h)), eps);
    return div(num, den);
}

// Channel-concatenates [(S_h + S_y)/2, U_h, U_y] and projects to the
// denoiser's conditioning width with a 1x1 convolution.
inline Tensor fuse_conditions(const DisentangledSet& ds, const ConvLayer& proj) {
    Tensor shared = mul_scalar(add(ds.s_h, ds.s_y), 0.5);
    Tensor cat = concat({shared, ds.u_h, ds.u_y}, 0);
    if (proj.w.dim(1) != cat.dim(0))
        throw DimensionError("fuse_conditions: projection " + proj.w.shape_string() +
                             " does not accept " + cat.shape_string());
    return conv2d(cat, proj.w, proj.b, 1, 0);
}

}  // namespace stsr
