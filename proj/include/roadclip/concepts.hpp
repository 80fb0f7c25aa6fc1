#pragma once

#include <cmath>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "roadclip/encoder.hpp"
#include "roadclip/errors.hpp"
#include "roadclip/tensor.hpp"
#include "roadclip/tokenizer.hpp"

namespace roadclip {

// Class-prototype prior: one trainable vector per damage class, seeded from
// the text encoder's embedding of a prompt sentence and periodically pulled
// back toward a fresh embedding so the prior tracks the evolving encoder.

struct ConceptSet {
    std::vector<std::string> classes;
    std::string prompt_template = "a photo of a {} on a road";

    void validate() const {
        if (classes.empty()) throw ValidationError("concept set: no classes");
        std::set<std::string> uniq(classes.begin(), classes.end());
        if (uniq.size() != classes.size())
            throw ValidationError("concept set: duplicate class names");
        if (prompt_template.find("{}") == std::string::npos)
            throw ValidationError("concept set: prompt template '" + prompt_template +
                                  "' has no {} slot");
    }

    std::string prompt_for(size_t k) const {
        if (k >= classes.size())
            throw ValidationError("concept set: class index " + std::to_string(k) +
                                  " out of range");
        auto pos = prompt_template.find("{}");
        if (pos == std::string::npos)
            throw ValidationError("concept set: prompt template has no {} slot");
        std::string s = prompt_template;
        return s.replace(pos, 2, classes[k]);
    }

    int size() const { return static_cast<int>(classes.size()); }
};

/// Blend one prototype toward its anchor and renormalize; the scalar core of
/// re-anchoring, exposed for direct verification.
template <typename T>
std::vector<T> mix_prototype(const std::vector<T>& v, const std::vector<T>& anchor,
                             double lambda) {
    if (v.size() != anchor.size())
        throw ValidationError("mix_prototype: size mismatch " + std::to_string(v.size()) +
                              " vs " + std::to_string(anchor.size()));
    std::vector<T> out(v.size());
    double n2 = 0.0;
    for (size_t i = 0; i < v.size(); ++i) {
        double m = (1.0 - lambda) * static_cast<double>(v[i]) +
                   lambda * static_cast<double>(anchor[i]);
        out[i] = static_cast<T>(m);
        n2 += m * m;
    }
    double n = std::sqrt(n2);
    if (n > 0.0)
        for (auto& x : out) x = static_cast<T>(static_cast<double>(x) / n);
    return out;
}

/// Trainable prototype matrix [K x d] plus the frozen text anchors behind it.
template <typename T>
struct ConceptBank {
    ConceptSet concepts;
    Tensor<T> prototypes;   // [K x d], trainable; rows normalized on read
    std::vector<T> anchors;  // [K x d] flat, frozen at the last re-anchor

    template <typename Encoder>
    static ConceptBank init(const ConceptSet& concepts, const Encoder& text_encoder,
                            const Tokenizer& tok, int max_len) {
        concepts.validate();
        ConceptBank bank;
        bank.concepts = concepts;
        int K = concepts.size();
        std::vector<T> rows;
        {
            NoGradGuard ng;
            for (int k = 0; k < K; ++k) {
                auto z = text_encoder.forward(tok.tokenize(concepts.prompt_for(k), max_len));
                auto v = z.values();
                rows.insert(rows.end(), v.begin(), v.end());
            }
        }
        int d = static_cast<int>(rows.size()) / K;
        bank.anchors = rows;
        bank.prototypes = Tensor<T>::from_values({K, d}, std::move(rows), true);
        return bank;
    }

    /// Refresh anchors from the current text encoder, then pull each
    /// prototype toward its anchor by lambda and renormalize.  Mutates
    /// parameter values directly; call between steps, never mid-graph.
    template <typename Encoder>
    void reanchor(const Encoder& text_encoder, const Tokenizer& tok, int max_len,
                  double lambda) {
        if (lambda < 0.0 || lambda > 1.0)
            throw ValidationError("reanchor: lambda " + std::to_string(lambda) +
                                  " outside [0, 1]");
        int K = concepts.size();
        int d = prototypes.shape()[1];
        {
            NoGradGuard ng;
            for (int k = 0; k < K; ++k) {
                auto z = text_encoder.forward(tok.tokenize(concepts.prompt_for(k), max_len));
                auto v = z.values();
                std::copy(v.begin(), v.end(), anchors.begin() + static_cast<size_t>(k) * d);
            }
        }
        auto vals = prototypes.values();
        for (int k = 0; k < K; ++k) {
            std::vector<T> v(vals.begin() + static_cast<size_t>(k) * d,
                             vals.begin() + static_cast<size_t>(k + 1) * d);
            std::vector<T> a(anchors.begin() + static_cast<size_t>(k) * d,
                             anchors.begin() + static_cast<size_t>(k + 1) * d);
            auto mixed = mix_prototype(v, a, lambda);
            std::copy(mixed.begin(), mixed.end(), vals.begin() + static_cast<size_t>(k) * d);
        }
    }

    void collect_params(std::vector<std::pair<std::string, Tensor<T>>>& out) {
        out.emplace_back("concepts.prototypes", prototypes);
    }
};

/// Cross-entropy of an image embedding against all class prototypes at the
/// given inverse temperature (a graph scalar, so tau stays trainable).
template <typename T>
Tensor<T> concept_loss(const Tensor<T>& z_image, int label, const Tensor<T>& prototypes,
                       const Tensor<T>& inv_tau) {
    if (prototypes.rank() != 2)
        throw ValidationError("concept_loss: prototypes must be [K x d]");
    int K = prototypes.shape()[0];
    if (label < 0 || label >= K)
        throw ValidationError("concept_loss: label " + std::to_string(label) +
                              " outside [0, " + std::to_string(K) + ")");
    std::vector<Tensor<T>> sims;
    sims.reserve(static_cast<size_t>(K));
    for (int k = 0; k < K; ++k) sims.push_back(cosine_sim(z_image, row(prototypes, k)));
    auto scaled = mul(stack_scalars(sims), inv_tau);
    auto lse = logsumexp_rows(reshape(scaled, {1, K}));
    return sub(element(lse, 0), element(scaled, label));
}

/// Batch mean of concept_loss.
template <typename T>
Tensor<T> domain_align_loss(const std::vector<Tensor<T>>& z_images,
                            const std::vector<int>& labels, const Tensor<T>& prototypes,
                            const Tensor<T>& inv_tau) {
    if (z_images.empty()) throw ValidationError("domain_align_loss: empty batch");
    if (z_images.size() != labels.size())
        throw ValidationError("domain_align_loss: " + std::to_string(z_images.size()) +
                              " embeddings vs " + std::to_string(labels.size()) + " labels");
    std::vector<Tensor<T>> per;
    per.reserve(z_images.size());
    for (size_t i = 0; i < z_images.size(); ++i)
        per.push_back(concept_loss(z_images[i], labels[i], prototypes, inv_tau));
    return mean(stack_scalars(per));
}

}  // namespace roadclip
