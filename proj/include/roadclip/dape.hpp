#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "roadclip/errors.hpp"
#include "roadclip/image.hpp"
#include "roadclip/rng.hpp"
#include "roadclip/tensor.hpp"

namespace roadclip {

// Orientation-aware positional encoding.
//
// Each patch gets a 4-descriptor [x, y, cos(theta), sin(theta)]: normalized
// cell center plus the trig pair of the dominant along-edge orientation,
// estimated from raw pixels (never through the differentiation graph) and
// mapped to the embedding width by a trainable 2-layer MLP.  Four baseline
// strategies share the same plug-in point for ablations.

enum class PosStrategy { none, sinusoidal_absolute, learnable_absolute, relative, dape };

inline PosStrategy parse_strategy(const std::string& s) {
    if (s == "none") return PosStrategy::none;
    if (s == "sinusoidal_absolute") return PosStrategy::sinusoidal_absolute;
    if (s == "learnable_absolute") return PosStrategy::learnable_absolute;
    if (s == "relative") return PosStrategy::relative;
    if (s == "dape") return PosStrategy::dape;
    throw ValidationError("positional strategy: unknown value '" + s + "'");
}

inline std::string strategy_name(PosStrategy s) {
    switch (s) {
        case PosStrategy::none: return "none";
        case PosStrategy::sinusoidal_absolute: return "sinusoidal_absolute";
        case PosStrategy::learnable_absolute: return "learnable_absolute";
        case PosStrategy::relative: return "relative";
        case PosStrategy::dape: return "dape";
    }
    throw ValidationError("positional strategy: bad enum value");
}

struct PositionalDescriptor {
    double x = 0.0;
    double y = 0.0;
    double cos_theta = 1.0;
    double sin_theta = 0.0;
};

/// Dominant along-edge orientation of a single-channel patch, in [0, pi).
///
/// Pixels are mean-centered (so the zero padding below is neutral for uniform
/// patches), gradients come from 3x3 Sobel kernels over the zero-padded
/// patch, scaled to unit ramp gain, and the 2x2 structure tensor is summed
/// over all pixels.  Its leading eigenvector is the edge normal; the returned
/// angle is that direction rotated a quarter turn.  Patches whose mean
/// squared gradient magnitude falls below `energy_floor` return exactly 0.
inline double estimate_orientation(const std::vector<float>& patch, int P,
                                   double energy_floor = 1e-3) {
    if (static_cast<int>(patch.size()) != P * P)
        throw ValidationError("estimate_orientation: patch is not " + std::to_string(P) + "x" +
                              std::to_string(P));
    double mean = 0.0;
    for (float v : patch) mean += v;
    mean /= static_cast<double>(P * P);

    auto px = [&](int r, int c) -> double {
        if (r < 0 || r >= P || c < 0 || c >= P) return 0.0;  // zero padding of centered values
        return static_cast<double>(patch[static_cast<size_t>(r) * P + c]) - mean;
    };

    double a = 0.0, b = 0.0, c2 = 0.0;
    for (int r = 0; r < P; ++r) {
        for (int c = 0; c < P; ++c) {
            double gx = (px(r - 1, c + 1) + 2.0 * px(r, c + 1) + px(r + 1, c + 1) -
                         px(r - 1, c - 1) - 2.0 * px(r, c - 1) - px(r + 1, c - 1)) / 8.0;
            double gy = (px(r + 1, c - 1) + 2.0 * px(r + 1, c) + px(r + 1, c + 1) -
                         px(r - 1, c - 1) - 2.0 * px(r - 1, c) - px(r - 1, c + 1)) / 8.0;
            a += gx * gx;
            b += gx * gy;
            c2 += gy * gy;
        }
    }
    double energy = (a + c2) / static_cast<double>(P * P);
    if (energy < energy_floor) return 0.0;

    // leading eigenvector of [[a, b], [b, c2]] at angle phi; along-edge is
    // phi rotated a quarter turn, folded into [0, pi)
    double phi = 0.5 * std::atan2(2.0 * b, a - c2);
    double theta = phi + std::numbers::pi / 2.0;
    while (theta >= std::numbers::pi) theta -= std::numbers::pi;
    while (theta < 0.0) theta += std::numbers::pi;
    return theta;
}

inline PositionalDescriptor build_descriptor(int i, int j, int G, double theta) {
    if (i < 0 || i >= G || j < 0 || j >= G)
        throw ValidationError("build_descriptor: cell (" + std::to_string(i) + ", " +
                              std::to_string(j) + ") outside grid of " + std::to_string(G));
    PositionalDescriptor d;
    d.x = (j + 0.5) / static_cast<double>(G);
    d.y = (i + 0.5) / static_cast<double>(G);
    d.cos_theta = std::cos(theta);
    d.sin_theta = std::sin(theta);
    return d;
}

/// Copy patch (pi, pj) of a G*P sized image into a dense P*P buffer.
inline std::vector<float> extract_patch(const GrayImage& img, int pi, int pj, int P) {
    std::vector<float> out(static_cast<size_t>(P) * P);
    for (int r = 0; r < P; ++r)
        for (int c = 0; c < P; ++c) out[static_cast<size_t>(r) * P + c] = img.at(pi * P + r, pj * P + c);
    return out;
}

/// Row-major per-patch orientations for a whole image.
inline std::vector<double> orientation_grid(const GrayImage& img, int P, double energy_floor) {
    if (img.width != img.height || img.width % P != 0)
        throw ValidationError("orientation_grid: image " + std::to_string(img.width) + "x" +
                              std::to_string(img.height) + " is not square and divisible by " +
                              std::to_string(P));
    int G = img.width / P;
    std::vector<double> thetas(static_cast<size_t>(G) * G);
    for (int i = 0; i < G; ++i)
        for (int j = 0; j < G; ++j)
            thetas[static_cast<size_t>(i) * G + j] =
                estimate_orientation(extract_patch(img, i, j, P), P, energy_floor);
    return thetas;
}

/// One strategy's parameters plus its two injection surfaces: an input-stage
/// vector per cell and, for the relative strategy only, an attention-logit
/// bias shared by all heads and layers.
template <typename T>
struct PositionalEncoder {
    PosStrategy strategy = PosStrategy::none;
    int grid = 0;
    int dim = 0;
    int mlp_hidden = 0;
    double energy_floor = 1e-3;

    Tensor<T> mlp_w1, mlp_b1, mlp_w2, mlp_b2;  // dape: 4 -> hidden -> dim
    Tensor<T> table;                           // learnable_absolute: [G*G x dim]
    Tensor<T> rel_table;                       // relative: [(2G-1)^2 x 1]
    std::vector<T> sin_code;                   // sinusoidal_absolute: fixed [G*G x dim]

    static PositionalEncoder create(PosStrategy s, int grid, int dim, int mlp_hidden,
                                    double energy_floor, Rng rng) {
        PositionalEncoder pe;
        pe.strategy = s;
        pe.grid = grid;
        pe.dim = dim;
        pe.mlp_hidden = mlp_hidden;
        pe.energy_floor = energy_floor;
        int cells = grid * grid;
        switch (s) {
            case PosStrategy::none:
                break;
            case PosStrategy::sinusoidal_absolute:
                pe.sin_code.resize(static_cast<size_t>(cells) * dim);
                for (int p = 0; p < cells; ++p)
                    for (int k = 0; k < dim; ++k) {
                        double rate = std::pow(10000.0, -2.0 * (k / 2) / static_cast<double>(dim));
                        double arg = p * rate;
                        pe.sin_code[static_cast<size_t>(p) * dim + k] =
                            static_cast<T>((k % 2 == 0) ? std::sin(arg) : std::cos(arg));
                    }
                break;
            case PosStrategy::learnable_absolute: {
                pe.table = Tensor<T>::zeros({cells, dim}, true);
                for (auto& v : pe.table.values()) v = static_cast<T>(rng.trunc_normal(0.02));
                break;
            }
            case PosStrategy::relative: {
                int span = 2 * grid - 1;
                pe.rel_table = Tensor<T>::zeros({span * span, 1}, true);
                break;
            }
            case PosStrategy::dape: {
                pe.mlp_w1 = Tensor<T>::zeros({4, mlp_hidden}, true);
                for (auto& v : pe.mlp_w1.values()) v = static_cast<T>(rng.trunc_normal(0.02));
                pe.mlp_b1 = Tensor<T>::zeros({mlp_hidden}, true);
                pe.mlp_w2 = Tensor<T>::zeros({mlp_hidden, dim}, true);
                for (auto& v : pe.mlp_w2.values()) v = static_cast<T>(rng.trunc_normal(0.02));
                pe.mlp_b2 = Tensor<T>::zeros({dim}, true);
                break;
            }
        }
        return pe;
    }

    /// Descriptor matrix [G*G x 4] for an image, a graph constant.
    Tensor<T> descriptor_matrix(const GrayImage& img, int patch_size) const {
        auto thetas = orientation_grid(img, patch_size, energy_floor);
        std::vector<T> rows(static_cast<size_t>(grid) * grid * 4);
        for (int i = 0; i < grid; ++i)
            for (int j = 0; j < grid; ++j) {
                auto d = build_descriptor(i, j, grid, thetas[static_cast<size_t>(i) * grid + j]);
                size_t off = (static_cast<size_t>(i) * grid + j) * 4;
                rows[off + 0] = static_cast<T>(d.x);
                rows[off + 1] = static_cast<T>(d.y);
                rows[off + 2] = static_cast<T>(d.cos_theta);
                rows[off + 3] = static_cast<T>(d.sin_theta);
            }
        return Tensor<T>::from_values({grid * grid, 4}, std::move(rows));
    }

    /// MLP over a descriptor matrix: [n x 4] -> [n x dim].
    Tensor<T> encode_descriptors(const Tensor<T>& psi) const {
        if (strategy != PosStrategy::dape)
            throw ValidationError("encode_descriptors: strategy is not dape");
        auto h = gelu(add(matmul(psi, mlp_w1), mlp_b1));
        return add(matmul(h, mlp_w2), mlp_b2);
    }

    /// Eq.-style single-descriptor encoding: [d].
    Tensor<T> encode_descriptor(const PositionalDescriptor& d) const {
        auto psi = Tensor<T>::from_values(
            {1, 4}, {static_cast<T>(d.x), static_cast<T>(d.y), static_cast<T>(d.cos_theta),
                     static_cast<T>(d.sin_theta)});
        return row(encode_descriptors(psi), 0);
    }

    /// Baseline per-cell vector (strategy != dape, != relative-only path).
    Tensor<T> encode_baseline(int i, int j) const {
        if (i < 0 || i >= grid || j < 0 || j >= grid)
            throw ValidationError("encode_baseline: cell outside grid");
        int p = i * grid + j;
        switch (strategy) {
            case PosStrategy::none:
            case PosStrategy::relative:
                return Tensor<T>::zeros({dim});
            case PosStrategy::sinusoidal_absolute: {
                std::vector<T> v(sin_code.begin() + static_cast<size_t>(p) * dim,
                                 sin_code.begin() + static_cast<size_t>(p + 1) * dim);
                return Tensor<T>::from_values({dim}, std::move(v));
            }
            case PosStrategy::learnable_absolute:
                return row(table, p);
            case PosStrategy::dape:
                throw ValidationError("encode_baseline: dape uses encode_descriptors");
        }
        throw ValidationError("encode_baseline: bad strategy");
    }

    /// Input-stage additive matrix [G*G x dim]; undefined tensor when the
    /// strategy adds nothing at the input (none, relative).
    Tensor<T> input_vectors(const GrayImage& img, int patch_size) const {
        switch (strategy) {
            case PosStrategy::none:
            case PosStrategy::relative:
                return {};
            case PosStrategy::sinusoidal_absolute:
                return Tensor<T>::from_values({grid * grid, dim},
                                              std::vector<T>(sin_code.begin(), sin_code.end()));
            case PosStrategy::learnable_absolute:
                return table;
            case PosStrategy::dape:
                return encode_descriptors(descriptor_matrix(img, patch_size));
        }
        throw ValidationError("input_vectors: bad strategy");
    }

    /// Attention-logit bias [G*G x G*G], built from the (dr, dc)-indexed
    /// table; defined only for the relative strategy.
    Tensor<T> attention_bias() const {
        if (strategy != PosStrategy::relative) return {};
        int cells = grid * grid;
        int span = 2 * grid - 1;
        std::vector<int> ids(static_cast<size_t>(cells) * cells);
        for (int q = 0; q < cells; ++q) {
            int qr = q / grid, qc = q % grid;
            for (int k = 0; k < cells; ++k) {
                int kr = k / grid, kc = k % grid;
                ids[static_cast<size_t>(q) * cells + k] =
                    (kr - qr + grid - 1) * span + (kc - qc + grid - 1);
            }
        }
        return reshape(take_rows(rel_table, ids), {cells, cells});
    }

    void collect_params(std::vector<std::pair<std::string, Tensor<T>>>& out,
                        const std::string& prefix) {
        switch (strategy) {
            case PosStrategy::none:
            case PosStrategy::sinusoidal_absolute:
                break;
            case PosStrategy::learnable_absolute:
                out.emplace_back(prefix + "table", table);
                break;
            case PosStrategy::relative:
                out.emplace_back(prefix + "rel_table", rel_table);
                break;
            case PosStrategy::dape:
                out.emplace_back(prefix + "mlp_w1", mlp_w1);
                out.emplace_back(prefix + "mlp_b1", mlp_b1);
                out.emplace_back(prefix + "mlp_w2", mlp_w2);
                out.emplace_back(prefix + "mlp_b2", mlp_b2);
                break;
        }
    }
};

}  // namespace roadclip
