#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "roadclip/concepts.hpp"
#include "roadclip/encoder.hpp"
#include "roadclip/errors.hpp"
#include "roadclip/image.hpp"
#include "roadclip/synthbench.hpp"
#include "roadclip/tensor.hpp"
#include "roadclip/threading.hpp"
#include "roadclip/tokenizer.hpp"

namespace roadclip {

// Frozen-model metrics: zero-shot accuracy, retrieval recall, cross-modal
// attention maps, and attention-grounded localization (SLA).  Everything here
// is read-only over the model; similarity math runs in double so orderings do
// not depend on the training scalar width.

// ----------------------------------------------------------------- embedding

template <typename T>
std::vector<std::vector<double>> embed_images(DualEncoder<T>& model,
                                              const std::vector<Sample>& samples) {
    std::vector<std::vector<double>> out(samples.size());
    parallel_for(static_cast<int64_t>(samples.size()), [&](int64_t i) {
        NoGradGuard ng;  // the guard is thread-local, so it lives in the worker
        auto z = model.encode_image(samples[static_cast<size_t>(i)].image).z;
        auto vs = z.values();
        out[static_cast<size_t>(i)].assign(vs.begin(), vs.end());
    });
    return out;
}

template <typename T>
std::vector<std::vector<double>> embed_captions(DualEncoder<T>& model, const Tokenizer& tok,
                                                const std::vector<Sample>& samples) {
    std::vector<std::vector<double>> out(samples.size());
    parallel_for(static_cast<int64_t>(samples.size()), [&](int64_t i) {
        NoGradGuard ng;
        auto seq = tok.tokenize(samples[static_cast<size_t>(i)].caption, model.cfg.max_text_len);
        auto z = model.encode_text(seq);
        auto vs = z.values();
        out[static_cast<size_t>(i)].assign(vs.begin(), vs.end());
    });
    return out;
}

inline double dot_d(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size())
        throw ValidationError("eval: embedding widths differ, " + std::to_string(a.size()) +
                              " vs " + std::to_string(b.size()));
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

/// FNV over parameter names and raw value bytes; used to assert that
/// evaluation never mutates the model.
template <typename T>
uint64_t param_checksum(DualEncoder<T>& model) {
    uint64_t h = 14695981039346656037ull;
    auto mix = [&h](const void* p, size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 1099511628211ull;
        }
    };
    for (auto& [name, tensor] : model.named_params()) {
        mix(name.data(), name.size());
        auto t = tensor;
        auto vs = t.values();
        mix(vs.data(), vs.size() * sizeof(T));
    }
    return h;
}

// ----------------------------------------------------------------- zero-shot

struct ZeroShotResult {
    double accuracy = 0.0;
    std::vector<std::vector<int>> confusion;  // [true][predicted]
};

/// Argmax over cosine similarity to the concept prompt embeddings; ties break
/// to the lowest class index.
template <typename T>
ZeroShotResult zero_shot_classify(const std::vector<Sample>& samples, const ConceptSet& concepts,
                                  DualEncoder<T>& model, const Tokenizer& tok) {
    if (samples.empty()) throw ValidationError("zero_shot_classify: empty test set");
    concepts.validate();
    int K = concepts.size();
    std::vector<std::vector<double>> zt(static_cast<size_t>(K));
    {
        NoGradGuard ng;
        for (int k = 0; k < K; ++k) {
            auto seq = tok.tokenize(concepts.prompt_for(static_cast<size_t>(k)),
                                    model.cfg.max_text_len);
            auto z = model.encode_text(seq);
            auto vs = z.values();
            zt[static_cast<size_t>(k)].assign(vs.begin(), vs.end());
        }
    }
    auto zi = embed_images(model, samples);

    ZeroShotResult res;
    res.confusion.assign(static_cast<size_t>(K), std::vector<int>(static_cast<size_t>(K), 0));
    int correct = 0;
    for (size_t i = 0; i < samples.size(); ++i) {
        int label = samples[i].label;
        if (label < 0 || label >= K)
            throw ValidationError("zero_shot_classify: label " + std::to_string(label) +
                                  " outside the concept list");
        int best = 0;
        double best_sim = dot_d(zi[i], zt[0]);
        for (int k = 1; k < K; ++k) {
            double s = dot_d(zi[i], zt[static_cast<size_t>(k)]);
            if (s > best_sim) {
                best_sim = s;
                best = k;
            }
        }
        res.confusion[static_cast<size_t>(label)][static_cast<size_t>(best)] += 1;
        if (best == label) correct += 1;
    }
    res.accuracy = static_cast<double>(correct) / static_cast<double>(samples.size());
    return res;
}

// ----------------------------------------------------------------- retrieval

enum class RetrievalDirection { image_to_text, text_to_image, mean };

struct RetrievalResult {
    std::map<int, double> recall_at;
    RetrievalDirection direction = RetrievalDirection::mean;
    int gallery = 0;
};

/// Recall over a one-to-one paired gallery: query i's true match is item i.
/// Gallery order breaks similarity ties, so results are deterministic.
inline RetrievalResult retrieve_from_embeddings(const std::vector<std::vector<double>>& z_queries,
                                                const std::vector<std::vector<double>>& z_gallery,
                                                const std::vector<int>& ks,
                                                RetrievalDirection direction) {
    size_t n = z_queries.size();
    if (n == 0) throw ValidationError("retrieve: empty query set");
    if (z_gallery.size() != n)
        throw ValidationError("retrieve: pairing mismatch, " + std::to_string(n) +
                              " queries vs " + std::to_string(z_gallery.size()) + " gallery items");
    if (ks.empty()) throw ValidationError("retrieve: no k values");
    for (int k : ks)
        if (k < 1) throw ValidationError("retrieve: k must be positive, got " + std::to_string(k));

    auto ranks = [&](bool transpose) {
        std::vector<size_t> r(n, 0);
        for (size_t i = 0; i < n; ++i) {
            double match = transpose ? dot_d(z_gallery[i], z_queries[i])
                                     : dot_d(z_queries[i], z_gallery[i]);
            size_t ahead = 0;
            for (size_t j = 0; j < n; ++j) {
                if (j == i) continue;
                double s = transpose ? dot_d(z_gallery[i], z_queries[j])
                                     : dot_d(z_queries[i], z_gallery[j]);
                if (s > match || (s == match && j < i)) ahead += 1;
            }
            r[i] = ahead;  // zero-based rank of the true match
        }
        return r;
    };

    auto recall = [&](const std::vector<size_t>& r, int k) {
        size_t hits = 0;
        for (size_t v : r) hits += (v < static_cast<size_t>(k)) ? 1 : 0;
        return static_cast<double>(hits) / static_cast<double>(n);
    };

    RetrievalResult res;
    res.direction = direction;
    res.gallery = static_cast<int>(n);
    std::vector<size_t> fwd, bwd;
    if (direction != RetrievalDirection::text_to_image) fwd = ranks(false);
    if (direction != RetrievalDirection::image_to_text) bwd = ranks(true);
    for (int k : ks) {
        switch (direction) {
            case RetrievalDirection::image_to_text: res.recall_at[k] = recall(fwd, k); break;
            case RetrievalDirection::text_to_image: res.recall_at[k] = recall(bwd, k); break;
            case RetrievalDirection::mean:
                res.recall_at[k] = 0.5 * (recall(fwd, k) + recall(bwd, k));
                break;
        }
    }
    return res;
}

template <typename T>
RetrievalResult retrieve(DualEncoder<T>& model, const Tokenizer& tok,
                         const std::vector<Sample>& samples, const std::vector<int>& ks = {1, 5, 10},
                         RetrievalDirection direction = RetrievalDirection::mean) {
    auto zi = embed_images(model, samples);
    auto zt = embed_captions(model, tok, samples);
    return retrieve_from_embeddings(zi, zt, ks, direction);
}

// ------------------------------------------------------------ attention maps

struct AttentionMap {
    int grid = 0;
    std::vector<double> values;  // grid*grid, min-max normalized to [0, 1]
    std::string caption;
    std::string image_id;
};

/// Cosine between the caption embedding and each projected patch feature,
/// min-max normalized.  A constant map collapses to all-zero by convention.
template <typename T>
AttentionMap attention_map(const GrayImage& image, const std::string& caption,
                           DualEncoder<T>& model, const Tokenizer& tok,
                           const std::string& image_id = "") {
    NoGradGuard ng;
    auto vout = model.encode_image(image);
    auto zt = model.encode_text(tok.tokenize(caption, model.cfg.max_text_len));
    auto projected = matmul(vout.patch_features, model.vision.proj);

    int G = model.cfg.grid();
    int e = model.cfg.embed_dim;
    auto pv = projected.values();
    auto tv = zt.values();
    AttentionMap map;
    map.grid = G;
    map.caption = caption;
    map.image_id = image_id;
    map.values.resize(static_cast<size_t>(G) * G);
    for (size_t r = 0; r < map.values.size(); ++r) {
        double dot = 0.0, nrm = 0.0;
        for (int c = 0; c < e; ++c) {
            double x = pv[r * static_cast<size_t>(e) + static_cast<size_t>(c)];
            dot += x * tv[static_cast<size_t>(c)];
            nrm += x * x;
        }
        map.values[r] = dot / std::sqrt(nrm + 1e-12);
    }

    auto [lo_it, hi_it] = std::minmax_element(map.values.begin(), map.values.end());
    double lo = *lo_it, hi = *hi_it;
    if (hi - lo < 1e-12) {
        std::fill(map.values.begin(), map.values.end(), 0.0);
    } else {
        for (auto& v : map.values) v = (v - lo) / (hi - lo);
    }
    return map;
}

// ----------------------------------------------------------------- sla

/// Predicted mask: patches at or above the quantile threshold paint their
/// P-by-P block.
inline std::vector<uint8_t> binarize_map(const AttentionMap& map, int patch_size, int side,
                                         double quantile) {
    if (map.grid * patch_size != side)
        throw ValidationError("binarize_map: grid " + std::to_string(map.grid) + " times patch " +
                              std::to_string(patch_size) + " does not cover side " +
                              std::to_string(side));
    if (quantile < 0.0 || quantile >= 1.0)
        throw ValidationError("binarize_map: quantile must lie in [0, 1)");
    std::vector<double> sorted = map.values;
    std::sort(sorted.begin(), sorted.end());
    size_t idx = std::min(sorted.size() - 1,
                          static_cast<size_t>(quantile * static_cast<double>(sorted.size())));
    double threshold = sorted[idx];

    std::vector<uint8_t> mask(static_cast<size_t>(side) * side, 0);
    for (int gr = 0; gr < map.grid; ++gr)
        for (int gc = 0; gc < map.grid; ++gc) {
            if (map.values[static_cast<size_t>(gr) * map.grid + gc] < threshold) continue;
            for (int r = gr * patch_size; r < (gr + 1) * patch_size; ++r)
                for (int c = gc * patch_size; c < (gc + 1) * patch_size; ++c)
                    mask[static_cast<size_t>(r) * side + c] = 1;
        }
    return mask;
}

inline double mask_iou(const std::vector<uint8_t>& a, const std::vector<uint8_t>& b) {
    if (a.size() != b.size())
        throw ValidationError("mask_iou: size mismatch " + std::to_string(a.size()) + " vs " +
                              std::to_string(b.size()));
    size_t inter = 0, uni = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        bool x = a[i] != 0, y = b[i] != 0;
        inter += (x && y) ? 1 : 0;
        uni += (x || y) ? 1 : 0;
    }
    if (uni == 0) return 1.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

struct SlaReport {
    std::vector<double> ious;
    double attn_quantile = 0.8;
    double iou_pass = 0.5;
    double sla = 0.0;
};

template <typename T>
SlaReport sla(const std::vector<Sample>& samples, DualEncoder<T>& model, const Tokenizer& tok,
              double attn_quantile = 0.8, double iou_pass = 0.5) {
    if (samples.empty()) throw ValidationError("sla: empty test set");
    SlaReport rep;
    rep.attn_quantile = attn_quantile;
    rep.iou_pass = iou_pass;
    rep.ious.assign(samples.size(), 0.0);
    int side = model.cfg.image_size;
    int patch = model.cfg.patch_size;
    parallel_for(static_cast<int64_t>(samples.size()), [&](int64_t ii) {
        auto i = static_cast<size_t>(ii);
        auto map = attention_map(samples[i].image, samples[i].caption, model, tok, samples[i].id);
        auto pred = binarize_map(map, patch, side, attn_quantile);
        rep.ious[i] = mask_iou(pred, samples[i].mask);
    });
    size_t hits = 0;
    for (double iou : rep.ious) hits += (iou >= iou_pass) ? 1 : 0;
    rep.sla = static_cast<double>(hits) / static_cast<double>(rep.ious.size());
    return rep;
}

// ----------------------------------------------------------------- heatmaps

/// Side-by-side graymap: input | attention | 0.5 blend, one white separator
/// column between panels.
inline void export_heatmap(const AttentionMap& map, const GrayImage& image, int patch_size,
                           const std::filesystem::path& path) {
    int side = image.width;
    if (image.height != side || map.grid * patch_size != side)
        throw ValidationError("export_heatmap: map grid does not cover the image");
    int out_w = 3 * side + 2;
    GrayImage out(out_w, side, 1.0f);
    for (int r = 0; r < side; ++r) {
        for (int c = 0; c < side; ++c) {
            float img_v = image.at(r, c);
            auto g = static_cast<size_t>(r / patch_size) * map.grid +
                     static_cast<size_t>(c / patch_size);
            float map_v = static_cast<float>(map.values[g]);
            out.at(r, c) = img_v;
            out.at(r, side + 1 + c) = map_v;
            out.at(r, 2 * side + 2 + c) = 0.5f * img_v + 0.5f * map_v;
        }
    }
    write_pgm(path, quantize_image(out), out_w, side);
}

}  // namespace roadclip
