#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "roadclip/concepts.hpp"
#include "roadclip/encoder.hpp"
#include "roadclip/errors.hpp"
#include "roadclip/image.hpp"
#include "roadclip/rng.hpp"
#include "roadclip/tensor.hpp"

namespace roadclip {

// Composite training objective: bidirectional InfoNCE over the batch
// similarity matrix, the batch-mean concept cross-entropy, and an embedding
// stability penalty under small spatial perturbations, combined with fixed
// weights and one shared learnable temperature.

struct LossWeights {
    double lambda_concept = 0.5;
    double lambda_pos = 0.1;

    void validate() const {
        if (!(lambda_concept >= 0.0) || !std::isfinite(lambda_concept) ||
            !(lambda_pos >= 0.0) || !std::isfinite(lambda_pos))
            throw ValidationError("loss weights: must be finite and non-negative");
    }
};

/// Learnable temperature, log-parameterized, clamped after each step.
template <typename T>
struct Temperature {
    Tensor<T> log_tau;
    double tau_min = 0.01;
    double tau_max = 1.0;

    static Temperature create(double init_tau = 0.07) {
        if (init_tau <= 0.0) throw ValidationError("temperature: init must be positive");
        Temperature t;
        t.log_tau = Tensor<T>::scalar(static_cast<T>(std::log(init_tau)), true);
        return t;
    }

    /// 1/tau as a graph node, so losses stay differentiable in log_tau.
    Tensor<T> inv_tau() const { return exp(scale(log_tau, T(-1))); }

    double value() const {
        return std::exp(static_cast<double>(log_tau.values()[0]));
    }

    /// Post-step projection of tau back into [tau_min, tau_max].
    void clamp() {
        auto v = log_tau.values();
        T lo = static_cast<T>(std::log(tau_min)), hi = static_cast<T>(std::log(tau_max));
        if (v[0] < lo) v[0] = lo;
        if (v[0] > hi) v[0] = hi;
    }

    void collect_params(std::vector<std::pair<std::string, Tensor<T>>>& out) {
        out.emplace_back("loss.log_tau", log_tau);
    }
};

/// Bidirectional InfoNCE over row-aligned embedding matrices [N x d].
///
/// loss = (sum_i lse(row_i) + sum_j lse(col_j) - 2 sum_i L_ii) / N with
/// L = (Zi Zt^T) / tau; algebraically the mean of the two directional
/// cross-entropies of Eq.-style matched-pair softmaxes.
template <typename T>
Tensor<T> itc_loss(const Tensor<T>& z_images, const Tensor<T>& z_texts,
                   const Tensor<T>& inv_tau) {
    if (z_images.rank() != 2 || z_texts.rank() != 2)
        throw ValidationError("itc_loss: embeddings must be [N x d]");
    if (z_images.dim(0) != z_texts.dim(0) || z_images.dim(1) != z_texts.dim(1))
        throw ValidationError("itc_loss: shape mismatch, " + std::to_string(z_images.dim(0)) +
                              "x" + std::to_string(z_images.dim(1)) + " vs " +
                              std::to_string(z_texts.dim(0)) + "x" +
                              std::to_string(z_texts.dim(1)));
    int N = z_images.dim(0);
    if (N < 1) throw ValidationError("itc_loss: empty batch");
    auto logits = mul(matmul(z_images, transpose(z_texts)), inv_tau);
    auto fwd = sum(logsumexp_rows(logits));
    auto bwd = sum(logsumexp_rows(transpose(logits)));
    auto matched = sum(diag(logits));
    return scale(sub(add(fwd, bwd), scale(matched, T(2))), static_cast<T>(1.0 / N));
}

struct PerturbationSpec {
    int max_translate_px = 2;
    double max_rotate_deg = 5.0;
    uint64_t seed = 0;

    void validate() const {
        if (max_translate_px < 0 || max_rotate_deg < 0.0 || !std::isfinite(max_rotate_deg))
            throw ValidationError("perturbation spec: magnitudes must be non-negative");
    }
};

struct Perturbation {
    int dx = 0;
    int dy = 0;
    double angle_rad = 0.0;
};

/// Draw one perturbation within the spec's bounds; three draws are consumed
/// regardless of magnitudes so stream layout is schedule-independent.
inline Perturbation sample_perturbation(const PerturbationSpec& spec, Rng& rng) {
    spec.validate();
    Perturbation p;
    int span = 2 * spec.max_translate_px + 1;
    p.dx = static_cast<int>(rng.uniform_int(span)) - spec.max_translate_px;
    p.dy = static_cast<int>(rng.uniform_int(span)) - spec.max_translate_px;
    double deg = rng.uniform(-spec.max_rotate_deg, spec.max_rotate_deg);
    p.angle_rad = deg * std::numbers::pi / 180.0;
    return p;
}

inline GrayImage apply_perturbation(const GrayImage& img, const Perturbation& p) {
    return spatial_transform(img, p.dx, p.dy, p.angle_rad);
}

inline GrayImage perturb_image(const GrayImage& img, const PerturbationSpec& spec, Rng& rng) {
    return apply_perturbation(img, sample_perturbation(spec, rng));
}

/// Convenience overload seeded from the spec itself.
inline GrayImage perturb_image(const GrayImage& img, const PerturbationSpec& spec) {
    Rng rng(spec.seed, "perturb");
    return perturb_image(img, spec, rng);
}

/// Squared distance between the embeddings of an image and its perturbed
/// copy, both through the same encoder parameters.
template <typename T, typename EncodeFn>
Tensor<T> pos_consist_loss(const GrayImage& img, const PerturbationSpec& spec, Rng& rng,
                           EncodeFn&& encode) {
    GrayImage moved = perturb_image(img, spec, rng);
    auto d = sub(encode(img), encode(moved));
    return sum(mul(d, d));
}

struct BatchItem {
    GrayImage image;
    TokenSequence tokens;
    int label = 0;
};

template <typename T>
struct LossReport {
    Tensor<T> total;
    double itc = 0.0;
    double domain_align = 0.0;
    double pos_consist = 0.0;
};

/// One training objective evaluation over a batch.  Zero-weight terms are
/// skipped outright, so their disabled value is exact, not just small.
template <typename T>
LossReport<T> total_loss(const std::vector<BatchItem>& batch, const DualEncoder<T>& model,
                         const ConceptBank<T>& bank, const LossWeights& weights,
                         const Temperature<T>& temperature, const PerturbationSpec& pspec,
                         Rng& perturb_rng) {
    weights.validate();
    if (batch.empty()) throw ValidationError("total_loss: empty batch");
    auto inv_tau = temperature.inv_tau();

    std::vector<Tensor<T>> zi, zt;
    std::vector<int> labels;
    zi.reserve(batch.size());
    zt.reserve(batch.size());
    for (const auto& item : batch) {
        zi.push_back(model.encode_image(item.image).z);
        zt.push_back(model.encode_text(item.tokens));
        labels.push_back(item.label);
    }

    LossReport<T> report;
    auto total = itc_loss(concat_rows(zi), concat_rows(zt), inv_tau);
    report.itc = static_cast<double>(total.values()[0]);

    if (weights.lambda_concept > 0.0) {
        auto da = domain_align_loss(zi, labels, bank.prototypes, inv_tau);
        report.domain_align = static_cast<double>(da.values()[0]);
        total = add(total, scale(da, static_cast<T>(weights.lambda_concept)));
    }
    if (weights.lambda_pos > 0.0) {
        std::vector<Tensor<T>> per;
        per.reserve(batch.size());
        for (const auto& item : batch)
            per.push_back(pos_consist_loss<T>(
                item.image, pspec, perturb_rng,
                [&](const GrayImage& im) { return model.encode_image(im).z; }));
        auto pc = mean(stack_scalars(per));
        report.pos_consist = static_cast<double>(pc.values()[0]);
        total = add(total, scale(pc, static_cast<T>(weights.lambda_pos)));
    }
    report.total = total;
    return report;
}

}  // namespace roadclip
