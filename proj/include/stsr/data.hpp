#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "stsr/ops.hpp"
#include "stsr/rng.hpp"
#include "stsr/types.hpp"

namespace stsr {

// Geometry and texture of one synthetic ST/histology pair. The loading
// matrix block structure plants ground-truth co-expressed gene groups.
struct SyntheticSpec {
    int n_genes = 4;
    int n_programs = 2;  // latent expression programs (K)
    int hr_size = 32;
    int sr_factor = 4;
    int hist_size = 64;
    int hist_channels = 1;
    double noise_level = 0.05;
    double smoothness = 4.0;  // Gaussian blur sigma in HR pixels
    double hr_scale_um = 10.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (n_genes < 1 || n_programs < 1 || n_programs > n_genes)
            throw DomainError("SyntheticSpec: need 1 <= K <= N");
        if (hr_size < 2 || sr_factor < 1 || hr_size % sr_factor != 0)
            throw DomainError("SyntheticSpec: sr_factor must divide hr_size");
        if (hist_size < hr_size || hist_size % hr_size != 0)
            throw DomainError("SyntheticSpec: hist_size must be a multiple of hr_size");
        if (hist_channels != 1 && hist_channels != 3)
            throw DomainError("SyntheticSpec: histology must have 1 or 3 channels");
        if (noise_level < 0.0 || smoothness <= 0.0 || hr_scale_um <= 0.0)
            throw DomainError("SyntheticSpec: nonpositive texture parameter");
    }
};

struct SyntheticSample {
    STStack hr;            // per-gene min-max normalized to [0, 1]
    STStack lr;            // block-mean degraded HR
    HistologyImage hist;   // values in [0, 1]
    Tensor loading;        // (N, K) ground-truth loading matrix
};

namespace detail {

// Truncated Gaussian blur with per-pixel renormalization at the borders.
inline std::vector<double> gaussian_blur(const std::vector<double>& img, int size, double sigma) {
    int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
    for (int i = -radius; i <= radius; ++i)
        kernel[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));

    auto pass = [&](const std::vector<double>& src, bool rows) {
        std::vector<double> dst(src.size());
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                double acc = 0.0, wsum = 0.0;
                for (int k = -radius; k <= radius; ++k) {
                    int yy = rows ? y : y + k;
                    int xx = rows ? x + k : x;
                    if (yy < 0 || yy >= size || xx < 0 || xx >= size) continue;
                    double wgt = kernel[static_cast<std::size_t>(k + radius)];
                    acc += wgt * src[static_cast<std::size_t>(yy) * size + xx];
                    wsum += wgt;
                }
                dst[static_cast<std::size_t>(y) * size + x] = acc / wsum;
            }
        return dst;
    };
    return pass(pass(img, true), false);
}

// Zero-mean, unit-norm fields, pairwise orthogonalized over pixels so the
// planted programs carry no chance correlation.
inline std::vector<std::vector<double>> latent_fields(int k, int size, double sigma, Rng& rng) {
    std::vector<std::vector<double>> fields;
    const int n = size * size;
    for (int f = 0; f < k; ++f) {
        std::vector<double> white(static_cast<std::size_t>(n));
        for (auto& v : white) v = rng.normal();
        std::vector<double> smooth = gaussian_blur(white, size, sigma);
        double mean = 0.0;
        for (double v : smooth) mean += v;
        mean /= n;
        for (auto& v : smooth) v -= mean;
        for (const auto& prev : fields) {
            double dot = 0.0;
            for (int i = 0; i < n; ++i) dot += smooth[static_cast<std::size_t>(i)] * prev[static_cast<std::size_t>(i)];
            for (int i = 0; i < n; ++i) smooth[static_cast<std::size_t>(i)] -= dot * prev[static_cast<std::size_t>(i)];
        }
        double norm = 0.0;
        for (double v : smooth) norm += v * v;
        norm = std::sqrt(norm);
        if (norm > 0)
            for (auto& v : smooth) v /= norm;
        fields.push_back(std::move(smooth));
    }
    // rescale to unit per-pixel standard deviation
    for (auto& f : fields)
        for (auto& v : f) v *= std::sqrt(static_cast<double>(n));
    return fields;
}

// Dart-throwing Poisson-disc sampling: uniformly placed points at least
// min_dist apart, deterministic given the stream.
inline std::vector<std::pair<double, double>> poisson_disc(int size, double min_dist, int target,
                                                           Rng& rng) {
    std::vector<std::pair<double, double>> pts;
    const double d2 = min_dist * min_dist;
    int attempts = 0;
    while (static_cast<int>(pts.size()) < target && attempts < 40 * target) {
        ++attempts;
        double x = rng.uniform(0.0, size), y = rng.uniform(0.0, size);
        bool ok = true;
        for (const auto& [px, py] : pts) {
            double dx = px - x, dy = py - y;
            if (dx * dx + dy * dy < d2) {
                ok = false;
                break;
            }
        }
        if (ok) pts.emplace_back(x, y);
    }
    return pts;
}

}  // namespace detail

// Per-gene min-max normalization to [0, 1] with the constants recorded for
// inversion. Constant genes map to zero.
inline STStack normalize_per_gene(const STStack& raw) {
    const int n = raw.n_genes(), hw = raw.height() * raw.width();
    std::vector<double> out(raw.data.values());
    STStack result = raw;
    result.norm_min.resize(static_cast<std::size_t>(n));
    result.norm_max.resize(static_cast<std::size_t>(n));
    for (int g = 0; g < n; ++g) {
        double lo = out[static_cast<std::size_t>(g) * hw], hi = lo;
        for (int i = 0; i < hw; ++i) {
            double v = out[static_cast<std::size_t>(g) * hw + i];
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        result.norm_min[static_cast<std::size_t>(g)] = lo;
        result.norm_max[static_cast<std::size_t>(g)] = hi;
        double span = hi - lo;
        for (int i = 0; i < hw; ++i) {
            auto idx = static_cast<std::size_t>(g) * hw + i;
            out[idx] = span > 0.0 ? (out[idx] - lo) / span : 0.0;
        }
    }
    result.data = Tensor(raw.data.shape(), std::move(out));
    return result;
}

// Non-overlapping s x s block mean per gene; the physical scale grows by s.
inline STStack degrade(const STStack& x, int s) {
    if (s < 1 || x.height() % s != 0 || x.width() % s != 0)
        throw DimensionError("degrade: factor " + std::to_string(s) + " does not divide " +
                             x.data.shape_string());
    NoGradGuard ng;
    STStack out = x;
    out.data = block_average(x.data, s, s);
    out.scale_um = x.scale_um * s;
    return out;
}

// Synthesizes one HR stack + histology pair with known ground truth.
// Deterministic given spec.seed.
inline SyntheticSample generate(const SyntheticSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    const int n = spec.n_genes, k = spec.n_programs, size = spec.hr_size;
    const int hw = size * size;

    auto fields = detail::latent_fields(k, size, spec.smoothness, rng);

    // Block loading matrix: gene g loads on program g*K/N only.
    std::vector<double> loading(static_cast<std::size_t>(n) * k, 0.0);
    for (int g = 0; g < n; ++g) loading[static_cast<std::size_t>(g) * k + g * k / n] = 1.0;

    std::vector<double> raw(static_cast<std::size_t>(n) * hw);
    for (int g = 0; g < n; ++g)
        for (int i = 0; i < hw; ++i) {
            double v = 0.0;
            for (int f = 0; f < k; ++f)
                v += loading[static_cast<std::size_t>(g) * k + f] * fields[static_cast<std::size_t>(f)][static_cast<std::size_t>(i)];
            double noise = spec.noise_level > 0.0 ? spec.noise_level * rng.normal() : 0.0;
            double z = 2.0 * v + noise;
            raw[static_cast<std::size_t>(g) * hw + i] = z > 30.0 ? z : std::log1p(std::exp(z));
        }

    STStack hr_raw;
    hr_raw.genes.reserve(static_cast<std::size_t>(n));
    for (int g = 0; g < n; ++g) hr_raw.genes.push_back("gene" + std::to_string(g));
    hr_raw.data = Tensor({n, size, size}, std::move(raw));
    hr_raw.scale_um = spec.hr_scale_um;

    SyntheticSample sample;
    sample.hr = normalize_per_gene(hr_raw);
    sample.lr = degrade(sample.hr, spec.sr_factor);
    sample.loading = Tensor({n, k}, std::move(loading));

    // Histology: normalized program sum upsampled to tissue resolution, plus
    // dark cell-like speckles at Poisson-disc positions.
    const int hsize = spec.hist_size;
    const int up = hsize / size;
    std::vector<double> base(static_cast<std::size_t>(hsize) * hsize);
    double lo = 1e300, hi = -1e300;
    for (int i = 0; i < hw; ++i) {
        double v = 0.0;
        for (int f = 0; f < k; ++f) v += fields[static_cast<std::size_t>(f)][static_cast<std::size_t>(i)];
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    for (int y = 0; y < hsize; ++y)
        for (int x = 0; x < hsize; ++x) {
            double v = 0.0;
            for (int f = 0; f < k; ++f)
                v += fields[static_cast<std::size_t>(f)][static_cast<std::size_t>(y / up) * size + x / up];
            base[static_cast<std::size_t>(y) * hsize + x] = hi > lo ? (v - lo) / (hi - lo) : 0.5;
        }
    base = detail::gaussian_blur(base, hsize, static_cast<double>(up));

    auto cells = detail::poisson_disc(hsize, hsize / 16.0, (hsize / 4) * (hsize / 4) / 4, rng);
    const double bump_sigma = hsize / 42.0;
    for (const auto& [cx, cy] : cells) {
        int x0 = std::max(0, static_cast<int>(cx - 3 * bump_sigma));
        int x1 = std::min(hsize - 1, static_cast<int>(cx + 3 * bump_sigma));
        int y0 = std::max(0, static_cast<int>(cy - 3 * bump_sigma));
        int y1 = std::min(hsize - 1, static_cast<int>(cy + 3 * bump_sigma));
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                double dx = x - cx, dy = y - cy;
                base[static_cast<std::size_t>(y) * hsize + x] -=
                    0.45 * std::exp(-(dx * dx + dy * dy) / (2.0 * bump_sigma * bump_sigma));
            }
    }
    for (auto& v : base) v = std::min(1.0, std::max(0.0, v));

    std::vector<double> hist_data;
    if (spec.hist_channels == 1) {
        hist_data = std::move(base);
    } else {
        hist_data.resize(3ull * hsize * hsize);
        for (int i = 0; i < hsize * hsize; ++i) {
            double v = base[static_cast<std::size_t>(i)];
            hist_data[static_cast<std::size_t>(i)] = v;
            hist_data[static_cast<std::size_t>(hsize) * hsize + i] = 0.2 + 0.6 * v;
            hist_data[2ull * hsize * hsize + i] = 1.0 - 0.7 * v;
        }
    }
    sample.hist.data = Tensor({spec.hist_channels, hsize, hsize}, std::move(hist_data));
    sample.hist.scale_um = spec.hr_scale_um * size / hsize;
    return sample;
}

inline std::vector<SyntheticSample> generate_dataset(SyntheticSpec spec, int n_samples,
                                                     std::uint64_t base_seed) {
    std::vector<SyntheticSample> out;
    out.reserve(static_cast<std::size_t>(n_samples));
    for (int i = 0; i < n_samples; ++i) {
        spec.seed = base_seed + static_cast<std::uint64_t>(i);
        out.push_back(generate(spec));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

inline double rmse(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw DimensionError("rmse: shape mismatch " + a.shape_string() + " vs " +
                             b.shape_string());
    double acc = 0.0;
    for (int i = 0; i < a.numel(); ++i) {
        double d = a.at(i) - b.at(i);
        acc += d * d;
    }
    return std::sqrt(acc / a.numel());
}

inline double pcc(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw DimensionError("pcc: shape mismatch " + a.shape_string() + " vs " +
                             b.shape_string());
    const int n = a.numel();
    double ma = 0.0, mb = 0.0;
    for (int i = 0; i < n; ++i) {
        ma += a.at(i);
        mb += b.at(i);
    }
    ma /= n;
    mb /= n;
    double num = 0.0, va = 0.0, vb = 0.0;
    for (int i = 0; i < n; ++i) {
        double da = a.at(i) - ma, db = b.at(i) - mb;
        num += da * db;
        va += da * da;
        vb += db * db;
    }
    if (va == 0.0 || vb == 0.0)
        throw DomainError("pcc: undefined on input with zero variance");
    return num / std::sqrt(va * vb);
}

inline double rmse(const STStack& a, const STStack& b) { return rmse(a.data, b.data); }
inline double pcc(const STStack& a, const STStack& b) { return pcc(a.data, b.data); }

inline std::vector<double> rmse_per_gene(const STStack& a, const STStack& b) {
    if (a.data.shape() != b.data.shape())
        throw DimensionError("rmse_per_gene: shape mismatch");
    std::vector<double> out;
    const int hw = a.height() * a.width();
    for (int g = 0; g < a.n_genes(); ++g) {
        double acc = 0.0;
        for (int i = 0; i < hw; ++i) {
            double d = a.data.at(g * hw + i) - b.data.at(g * hw + i);
            acc += d * d;
        }
        out.push_back(std::sqrt(acc / hw));
    }
    return out;
}

inline std::vector<double> pcc_per_gene(const STStack& a, const STStack& b) {
    if (a.data.shape() != b.data.shape()) throw DimensionError("pcc_per_gene: shape mismatch");
    std::vector<double> out;
    const int hw = a.height() * a.width();
    for (int g = 0; g < a.n_genes(); ++g) {
        std::vector<double> va(static_cast<std::size_t>(hw)), vb(static_cast<std::size_t>(hw));
        for (int i = 0; i < hw; ++i) {
            va[static_cast<std::size_t>(i)] = a.data.at(g * hw + i);
            vb[static_cast<std::size_t>(i)] = b.data.at(g * hw + i);
        }
        out.push_back(pcc(Tensor({hw}, va), Tensor({hw}, vb)));
    }
    return out;
}

}  // namespace stsr
