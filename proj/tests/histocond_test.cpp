#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "stsr/gradcheck.hpp"
#include "stsr/histocond.hpp"

using namespace stsr;

namespace {

HistologyImage make_image(int c, int size, std::vector<double> values, double scale = 5.0) {
    HistologyImage h;
    h.data = Tensor({c, size, size}, std::move(values));
    h.scale_um = scale;
    return h;
}

HistologyImage random_image(int c, int size, Rng& rng) {
    std::vector<double> v(static_cast<std::size_t>(c) * size * size);
    for (auto& x : v) x = rng.uniform();
    return make_image(c, size, std::move(v));
}

}  // namespace

TEST(CropPatches, TilingArithmetic) {
    Rng rng(1);
    HistologyImage h = random_image(1, 64, rng);
    PatchSet ps = crop_patches(h, 32);
    EXPECT_EQ(ps.size(), 4);
    EXPECT_EQ(ps.grid_h, 2);
    EXPECT_EQ(ps.grid_w, 2);
    EXPECT_EQ(ps.patches[0].shape(), (std::vector<int>{1, 32, 32}));
    EXPECT_THROW(crop_patches(h, 33), DimensionError);
}

TEST(CropPatches, FullScaleGeometryYields256Patches) {
    // 5120 px histology tiled at 320 px per patch.
    std::vector<double> v(5120ull * 5120ull);
    Rng rng(2);
    for (auto& x : v) x = rng.uniform();
    HistologyImage h = make_image(1, 5120, std::move(v), 0.5);
    PatchSet ps = crop_patches(h, 320);
    EXPECT_EQ(ps.size(), 256);
}

TEST(CropPatches, ReassemblyIsLossless) {
    Rng rng(3);
    HistologyImage h = random_image(3, 24, rng);
    PatchSet ps = crop_patches(h, 8);
    // stack_tiles expects channel-major tiles; patches are tile-major images,
    // so reassemble channel by channel.
    std::vector<Tensor> tiles;
    for (int c = 0; c < 3; ++c)
        for (const auto& patch : ps.patches)
            tiles.push_back(slice_region(patch, c, 0, 0, 8, 8));
    Tensor back = stack_tiles(tiles, 3, 24, 24);
    EXPECT_EQ(back.values(), h.data.values());
}

TEST(Entropy, ConstantPatchIsZero) {
    EXPECT_DOUBLE_EQ(entropy(Tensor::full({1, 4, 4}, 0.37)), 0.0);
}

TEST(Entropy, TwoValueSplitIsOneBit) {
    std::vector<double> v(16, 0.0);
    for (int i = 8; i < 16; ++i) v[static_cast<std::size_t>(i)] = 1.0;
    EXPECT_DOUBLE_EQ(entropy(Tensor({1, 4, 4}, v)), 1.0);
}

TEST(Entropy, UniformHistogramIsEightBits) {
    std::vector<double> v(256);
    for (int i = 0; i < 256; ++i) v[static_cast<std::size_t>(i)] = (i + 0.5) / 256.0;
    EXPECT_DOUBLE_EQ(entropy(Tensor({1, 16, 16}, v)), 8.0);
}

TEST(Entropy, RangeAndDomainCheck) {
    Rng rng(5);
    for (int rep = 0; rep < 10; ++rep) {
        std::vector<double> v(64);
        for (auto& x : v) x = rng.uniform();
        double e = entropy(Tensor({1, 8, 8}, v));
        EXPECT_GE(e, 0.0);
        EXPECT_LE(e, 8.0);
    }
    EXPECT_THROW(entropy(Tensor::full({1, 2, 2}, 1.5)), DomainError);
}

TEST(GammaAt, BoundariesAndMidpoint) {
    CurriculumSchedule sched{0.0, 4.0, 201};
    EXPECT_DOUBLE_EQ(gamma_at(sched, 0), 0.0);
    EXPECT_DOUBLE_EQ(gamma_at(sched, 200), 4.0);
    EXPECT_DOUBLE_EQ(gamma_at(sched, 100), 2.0);

    CurriculumSchedule single{1.5, 3.0, 1};
    EXPECT_DOUBLE_EQ(gamma_at(single, 0), 1.5);

    EXPECT_THROW(gamma_at(sched, -1), DomainError);
    EXPECT_THROW(gamma_at(sched, 201), DomainError);
}

TEST(GammaAt, NondecreasingInEpoch) {
    CurriculumSchedule sched{0.5, 3.5, 37};
    double prev = gamma_at(sched, 0);
    for (int e = 1; e < 37; ++e) {
        double g = gamma_at(sched, e);
        EXPECT_GE(g, prev);
        prev = g;
    }
}

TEST(SelectPatches, ThresholdAndFallback) {
    Rng rng(7);
    HistologyImage h = random_image(1, 32, rng);
    PatchSet ps = crop_patches(h, 8);

    PatchSet all = select_patches(ps, -1.0);
    EXPECT_EQ(all.selected_count(), all.size());

    PatchSet one = select_patches(ps, 9.0);
    EXPECT_EQ(one.selected_count(), 1);
    std::size_t best = 0;
    for (std::size_t m = 1; m < ps.complexity.size(); ++m)
        if (ps.complexity[m] > ps.complexity[best]) best = m;
    EXPECT_TRUE(one.selected[best]);
}

TEST(SelectPatches, CountMonotoneInGamma) {
    Rng rng(9);
    HistologyImage h = random_image(1, 48, rng);
    PatchSet ps = crop_patches(h, 8);
    int prev = ps.size() + 1;
    for (double g = -0.5; g <= 8.5; g += 0.25) {
        int count = select_patches(ps, g).selected_count();
        EXPECT_LE(count, prev);
        EXPECT_GE(count, 1);
        prev = count;
    }
}

namespace {

TissueEncoderParams plain_tissue_params(int in_c, int d_t, int stages, Rng& rng,
                                        bool zero_out = false) {
    TissueEncoderParams p;
    p.stem = {Tensor::randn({d_t, in_c, 3, 3}, rng, 0.3), Tensor::zeros({d_t})};
    for (int s = 0; s < stages; ++s)
        p.down.push_back({Tensor::randn({d_t, d_t, 3, 3}, rng, 0.3), Tensor::zeros({d_t})});
    p.out = {zero_out ? Tensor::zeros({d_t, d_t, 3, 3}) : Tensor::randn({d_t, d_t, 3, 3}, rng, 0.3),
             Tensor::zeros({d_t})};
    return p;
}

CellEncoderParams plain_cell_params(int in_c, int d_c, Rng& rng) {
    return {{Tensor::randn({d_c, in_c, 3, 3}, rng, 0.3), Tensor::zeros({d_c})},
            {Tensor::randn({d_c, d_c, 3, 3}, rng, 0.3), Tensor::zeros({d_c})}};
}

}  // namespace

TEST(EncodeTissue, ZeroFinalLayerGivesZeroFeatures) {
    Rng rng(11);
    TissueEncoderParams p = plain_tissue_params(1, 6, 1, rng, /*zero_out=*/true);
    HistologyImage h = random_image(1, 16, rng);
    Tensor f = encode_tissue(h, p, 8);
    for (double v : f.values()) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(EncodeTissue, OutputShapeMatchesConfiguredGrid) {
    Rng rng(13);
    TissueEncoderParams p = plain_tissue_params(3, 5, 2, rng);
    HistologyImage h = random_image(3, 32, rng);
    Tensor f = encode_tissue(h, p, 8);
    EXPECT_EQ(f.shape(), (std::vector<int>{5, 8, 8}));
    EXPECT_THROW(encode_tissue(h, p, 7), DimensionError);
}

TEST(EncodeTissue, StrideAlignedTranslationPermutesInteriorCells) {
    Rng rng(17);
    TissueEncoderParams p = plain_tissue_params(1, 4, 1, rng);
    const int size = 32, grid = 16, stride = 2;
    HistologyImage h = random_image(1, size, rng);

    // shift the image content down by one total stride
    std::vector<double> shifted(h.data.values().size(), 0.0);
    for (int y = stride; y < size; ++y)
        for (int x = 0; x < size; ++x)
            shifted[static_cast<std::size_t>(y) * size + x] =
                h.data.values()[static_cast<std::size_t>(y - stride) * size + x];
    HistologyImage hs = make_image(1, size, std::move(shifted));

    Tensor f = encode_tissue(h, p, grid);
    Tensor fs = encode_tissue(hs, p, grid);
    const int margin = 3;
    for (int c = 0; c < 4; ++c)
        for (int i = margin; i < grid - margin - 1; ++i)
            for (int j = margin; j < grid - margin; ++j)
                EXPECT_NEAR(fs.at(c, i + 1, j), f.at(c, i, j), 1e-12);
}

TEST(EncodeCells, ShapeAndPermutationEquivariance) {
    Rng rng(19);
    CellEncoderParams p = plain_cell_params(1, 6, rng);
    HistologyImage h = random_image(1, 32, rng);
    PatchSet ps = select_patches(crop_patches(h, 8), -1.0);
    Tensor f = encode_cells(ps, p);
    EXPECT_EQ(f.shape(), (std::vector<int>{16, 6}));

    // reverse the patch order; rows must follow
    PatchSet rev = ps;
    std::reverse(rev.patches.begin(), rev.patches.end());
    std::reverse(rev.complexity.begin(), rev.complexity.end());
    Tensor fr = encode_cells(rev, p);
    for (int m = 0; m < 16; ++m)
        for (int c = 0; c < 6; ++c) EXPECT_DOUBLE_EQ(fr.at(15 - m, c), f.at(m, c));
}

TEST(EncodeCells, ZeroWeightsGiveZeroRows) {
    CellEncoderParams p = {{Tensor::zeros({4, 1, 3, 3}), Tensor::zeros({4})},
                           {Tensor::zeros({4, 4, 3, 3}), Tensor::zeros({4})}};
    Rng rng(23);
    HistologyImage h = random_image(1, 16, rng);
    PatchSet ps = select_patches(crop_patches(h, 8), -1.0);
    Tensor f = encode_cells(ps, p);
    for (double v : f.values()) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(CrossAttend, SingleKeyCopiesProjectedValue) {
    Rng rng(29);
    CrossAttentionParams p{Tensor::randn({3, 4}, rng), Tensor::randn({5, 4}, rng),
                           Tensor::randn({5, 3}, rng)};
    Tensor f_tissue = Tensor::randn({3, 2, 2}, rng);
    Tensor cells = Tensor::randn({1, 5}, rng);
    Tensor out = cross_attend(f_tissue, cells, p);
    Tensor v = matmul(cells, p.wv);  // (1, 3)
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 2; ++j) EXPECT_NEAR(out.at(c, i, j), v.at(0, c), 1e-12);
}

TEST(CrossAttend, IdenticalKeysAverageValues) {
    Rng rng(31);
    // W_K = 0 makes every key identical regardless of the cell features.
    CrossAttentionParams p{Tensor::randn({3, 4}, rng), Tensor::zeros({5, 4}),
                           Tensor::randn({5, 3}, rng)};
    Tensor f_tissue = Tensor::randn({3, 2, 2}, rng);
    Tensor cells = Tensor::randn({6, 5}, rng);
    Tensor out = cross_attend(f_tissue, cells, p);
    Tensor v = matmul(cells, p.wv);  // (6, 3)
    for (int c = 0; c < 3; ++c) {
        double mean = 0.0;
        for (int m = 0; m < 6; ++m) mean += v.at(m, c);
        mean /= 6.0;
        for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 2; ++j) EXPECT_NEAR(out.at(c, i, j), mean, 1e-12);
    }
}

TEST(CrossAttend, MatchesBruteForceOracle) {
    Rng rng(37);
    const int d_t = 2, d_c = 3, d = 4;
    CrossAttentionParams p{Tensor::randn({d_t, d}, rng), Tensor::randn({d_c, d}, rng),
                           Tensor::randn({d_c, d_t}, rng)};
    // 3 queries come from a 1x3 tissue grid; 2 keys
    Tensor f_tissue = Tensor::randn({d_t, 1, 3}, rng);
    Tensor cells = Tensor::randn({2, d_c}, rng);
    Tensor out = cross_attend(f_tissue, cells, p);

    for (int pix = 0; pix < 3; ++pix) {
        // brute-force attention for this query
        std::vector<double> q(d, 0.0);
        for (int a = 0; a < d; ++a)
            for (int c = 0; c < d_t; ++c) q[static_cast<std::size_t>(a)] += f_tissue.at(c, 0, pix) * p.wq.at(c, a);
        std::vector<double> logits(2, 0.0);
        for (int m = 0; m < 2; ++m) {
            double dot = 0.0;
            for (int a = 0; a < d; ++a) {
                double key = 0.0;
                for (int c = 0; c < d_c; ++c) key += cells.at(m, c) * p.wk.at(c, a);
                dot += q[static_cast<std::size_t>(a)] * key;
            }
            logits[static_cast<std::size_t>(m)] = dot / std::sqrt(static_cast<double>(d));
        }
        double mx = std::max(logits[0], logits[1]);
        double w0 = std::exp(logits[0] - mx), w1 = std::exp(logits[1] - mx);
        double z = w0 + w1;
        w0 /= z;
        w1 /= z;
        for (int c = 0; c < d_t; ++c) {
            double v0 = 0.0, v1 = 0.0;
            for (int cc = 0; cc < d_c; ++cc) {
                v0 += cells.at(0, cc) * p.wv.at(cc, c);
                v1 += cells.at(1, cc) * p.wv.at(cc, c);
            }
            EXPECT_NEAR(out.at(c, 0, pix), w0 * v0 + w1 * v1, 1e-12);
        }
    }
}

TEST(CrossAttend, RowsAreConvexCombinationsOfValues) {
    Rng rng(41);
    for (int rep = 0; rep < 10; ++rep) {
        const int d_t = 3, d_c = 4, d = 4, m = 5;
        CrossAttentionParams p{Tensor::randn({d_t, d}, rng), Tensor::randn({d_c, d}, rng),
                               Tensor::randn({d_c, d_t}, rng)};
        Tensor f_tissue = Tensor::randn({d_t, 2, 2}, rng);
        Tensor cells = Tensor::randn({m, d_c}, rng);
        Tensor out = cross_attend(f_tissue, cells, p);
        Tensor v = matmul(cells, p.wv);  // (m, d_t)
        for (int c = 0; c < d_t; ++c) {
            double lo = v.at(0, c), hi = v.at(0, c);
            for (int mm = 1; mm < m; ++mm) {
                lo = std::min(lo, v.at(mm, c));
                hi = std::max(hi, v.at(mm, c));
            }
            for (int pix = 0; pix < 4; ++pix) {
                EXPECT_GE(out.at(c, pix / 2, pix % 2), lo - 1e-12);
                EXPECT_LE(out.at(c, pix / 2, pix % 2), hi + 1e-12);
            }
        }
    }
}

TEST(HistologyPath, EndToEndGradCheck) {
    Rng rng(43);
    TissueEncoderParams tissue = plain_tissue_params(1, 3, 1, rng);
    CellEncoderParams cell = plain_cell_params(1, 3, rng);
    CrossAttentionParams attn{Tensor::randn({3, 4}, rng, 0.5), Tensor::randn({3, 4}, rng, 0.5),
                              Tensor::randn({3, 3}, rng, 0.5)};
    Tensor probe = Tensor::randn({3, 4, 4}, rng);

    HistologyImage base;
    {
        std::vector<double> v(64);
        for (auto& x : v) x = rng.uniform();
        base = make_image(1, 8, std::move(v));
    }

    auto path = [&](const Tensor& img) {
        HistologyImage h;
        h.data = img;
        h.scale_um = 5.0;
        PatchSet ps = select_patches(crop_patches(h, 4), -1.0);
        Tensor f_t = encode_tissue(h, tissue, 4);
        Tensor f_c = encode_cells(ps, cell);
        Tensor fused = cross_attend(f_t, f_c, attn);
        return sum_all(mul(fused, probe));
    };
    EXPECT_LT(grad_check(path, base.data), 1e-4);
}
