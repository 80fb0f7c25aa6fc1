#pragma once

#include <string>
#include <utility>
#include <vector>

#include "roadclip/dape.hpp"
#include "roadclip/errors.hpp"
#include "roadclip/image.hpp"
#include "roadclip/rng.hpp"
#include "roadclip/tensor.hpp"
#include "roadclip/tokenizer.hpp"

namespace roadclip {

// Dual-encoder backbone: a patch transformer over images and a token
// transformer over captions, projected into one shared unit-norm space.
// Positional information enters the vision side through a pluggable strategy
// so ablations swap encoders without touching this file.

struct EncoderConfig {
    int embed_dim = 64;
    int layers = 2;
    int heads = 4;
    int mlp_ratio = 2;
    int patch_size = 8;
    int image_size = 64;
    int max_text_len = 32;
    int vocab_size = 0;  // filled from the tokenizer

    int grid() const { return image_size / patch_size; }

    void validate() const {
        if (embed_dim <= 0 || layers <= 0 || heads <= 0 || mlp_ratio <= 0 || patch_size <= 0 ||
            image_size <= 0 || max_text_len <= 0 || vocab_size <= 0)
            throw ValidationError("encoder config: all extents must be positive");
        if (embed_dim % heads != 0)
            throw ValidationError("encoder config: embed_dim " + std::to_string(embed_dim) +
                                  " not divisible by heads " + std::to_string(heads));
        if (image_size % patch_size != 0)
            throw ValidationError("encoder config: image_size " + std::to_string(image_size) +
                                  " not divisible by patch_size " + std::to_string(patch_size));
    }
};

template <typename T>
struct PatchGrid {
    Tensor<T> patches;  // [G*G x P*P*C], row-major cells
    int grid_size = 0;
    int patch_size = 0;
    int channels = 1;
};

/// Lossless row-major rearrangement of a square image into flat patches.
template <typename T>
PatchGrid<T> patchify(const GrayImage& img, int patch_size) {
    if (img.width != img.height)
        throw ValidationError("patchify: image " + std::to_string(img.width) + "x" +
                              std::to_string(img.height) + " is not square");
    if (patch_size <= 0 || img.width % patch_size != 0)
        throw ValidationError("patchify: side " + std::to_string(img.width) +
                              " not divisible by patch size " + std::to_string(patch_size));
    int G = img.width / patch_size, P = patch_size;
    std::vector<T> rows(static_cast<size_t>(G) * G * P * P);
    for (int i = 0; i < G; ++i)
        for (int j = 0; j < G; ++j) {
            size_t off = (static_cast<size_t>(i) * G + j) * P * P;
            for (int r = 0; r < P; ++r)
                for (int c = 0; c < P; ++c)
                    rows[off + static_cast<size_t>(r) * P + c] =
                        static_cast<T>(img.at(i * P + r, j * P + c));
        }
    PatchGrid<T> out;
    out.patches = Tensor<T>::from_values({G * G, P * P}, std::move(rows));
    out.grid_size = G;
    out.patch_size = P;
    return out;
}

template <typename T>
struct TransformerBlock {
    int dim = 0;
    int heads = 0;
    Tensor<T> ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor<T> ln2_g, ln2_b, w1, b1, w2, b2;

    static TransformerBlock create(int dim, int heads, int mlp_ratio, Rng rng) {
        TransformerBlock blk;
        blk.dim = dim;
        blk.heads = heads;
        auto weight = [&rng](int r, int c) {
            auto t = Tensor<T>::zeros({r, c}, true);
            for (auto& v : t.values()) v = static_cast<T>(rng.trunc_normal(0.02));
            return t;
        };
        blk.ln1_g = Tensor<T>::filled({dim}, T(1), true);
        blk.ln1_b = Tensor<T>::zeros({dim}, true);
        blk.wq = weight(dim, dim);
        blk.bq = Tensor<T>::zeros({dim}, true);
        blk.wk = weight(dim, dim);
        blk.bk = Tensor<T>::zeros({dim}, true);
        blk.wv = weight(dim, dim);
        blk.bv = Tensor<T>::zeros({dim}, true);
        blk.wo = weight(dim, dim);
        blk.bo = Tensor<T>::zeros({dim}, true);
        blk.ln2_g = Tensor<T>::filled({dim}, T(1), true);
        blk.ln2_b = Tensor<T>::zeros({dim}, true);
        blk.w1 = weight(dim, dim * mlp_ratio);
        blk.b1 = Tensor<T>::zeros({dim * mlp_ratio}, true);
        blk.w2 = weight(dim * mlp_ratio, dim);
        blk.b2 = Tensor<T>::zeros({dim}, true);
        return blk;
    }

    /// Pre-norm residual block; attn_bias, when defined, is added to every
    /// head's logits.
    Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& attn_bias) const {
        int dh = dim / heads;
        T inv_sqrt_dh = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
        auto n1 = layer_norm(x, ln1_g, ln1_b);
        auto q = add(matmul(n1, wq), bq);
        auto k = add(matmul(n1, wk), bk);
        auto v = add(matmul(n1, wv), bv);
        std::vector<Tensor<T>> ctx;
        ctx.reserve(static_cast<size_t>(heads));
        for (int h = 0; h < heads; ++h) {
            auto qh = slice_cols(q, h * dh, (h + 1) * dh);
            auto kh = slice_cols(k, h * dh, (h + 1) * dh);
            auto vh = slice_cols(v, h * dh, (h + 1) * dh);
            auto logits = scale(matmul(qh, transpose(kh)), inv_sqrt_dh);
            if (attn_bias.defined()) logits = add(logits, attn_bias);
            ctx.push_back(matmul(softmax(logits, 1), vh));
        }
        auto attn = add(matmul(concat_cols(ctx), wo), bo);
        auto x1 = add(x, attn);
        auto n2 = layer_norm(x1, ln2_g, ln2_b);
        auto mlp = add(matmul(gelu(add(matmul(n2, w1), b1)), w2), b2);
        return add(x1, mlp);
    }

    void collect_params(std::vector<std::pair<std::string, Tensor<T>>>& out,
                        const std::string& prefix) {
        out.emplace_back(prefix + "ln1_g", ln1_g);
        out.emplace_back(prefix + "ln1_b", ln1_b);
        out.emplace_back(prefix + "wq", wq);
        out.emplace_back(prefix + "bq", bq);
        out.emplace_back(prefix + "wk", wk);
        out.emplace_back(prefix + "bk", bk);
        out.emplace_back(prefix + "wv", wv);
        out.emplace_back(prefix + "bv", bv);
        out.emplace_back(prefix + "wo", wo);
        out.emplace_back(prefix + "bo", bo);
        out.emplace_back(prefix + "ln2_g", ln2_g);
        out.emplace_back(prefix + "ln2_b", ln2_b);
        out.emplace_back(prefix + "w1", w1);
        out.emplace_back(prefix + "b1", b1);
        out.emplace_back(prefix + "w2", w2);
        out.emplace_back(prefix + "b2", b2);
    }
};

template <typename T>
struct VisionOutput {
    Tensor<T> z;               // [d], unit norm
    Tensor<T> patch_features;  // [G*G x d], pre-projection
};

template <typename T>
struct VisionEncoder {
    EncoderConfig cfg;
    PositionalEncoder<T> pos;
    Tensor<T> patch_w, patch_b;
    std::vector<TransformerBlock<T>> blocks;
    Tensor<T> ln_f_g, ln_f_b;
    Tensor<T> proj;

    static VisionEncoder create(const EncoderConfig& cfg, const PositionalEncoder<T>& pos, Rng rng) {
        VisionEncoder enc;
        enc.cfg = cfg;
        enc.pos = pos;
        int d = cfg.embed_dim, pp = cfg.patch_size * cfg.patch_size;
        enc.patch_w = Tensor<T>::zeros({pp, d}, true);
        for (auto& v : enc.patch_w.values()) v = static_cast<T>(rng.trunc_normal(0.02));
        enc.patch_b = Tensor<T>::zeros({d}, true);
        for (int l = 0; l < cfg.layers; ++l)
            enc.blocks.push_back(TransformerBlock<T>::create(d, cfg.heads, cfg.mlp_ratio,
                                                             rng.stream("block" + std::to_string(l))));
        enc.ln_f_g = Tensor<T>::filled({d}, T(1), true);
        enc.ln_f_b = Tensor<T>::zeros({d}, true);
        enc.proj = Tensor<T>::zeros({d, d}, true);
        for (auto& v : enc.proj.values()) v = static_cast<T>(rng.trunc_normal(0.02));
        return enc;
    }

    VisionOutput<T> forward(const GrayImage& img) const {
        if (img.width != cfg.image_size || img.height != cfg.image_size)
            throw ValidationError("encode_image: image " + std::to_string(img.width) + "x" +
                                  std::to_string(img.height) + " does not match configured size " +
                                  std::to_string(cfg.image_size));
        auto grid = patchify<T>(img, cfg.patch_size);
        // zero-center pixels so patch content, not the shared gray level,
        // drives the embedding; [0,1] input would pool to near-identical z
        for (auto& v : grid.patches.values()) v = T(2) * v - T(1);
        auto x = add(matmul(grid.patches, patch_w), patch_b);
        auto pvec = pos.input_vectors(img, cfg.patch_size);
        if (pvec.defined()) x = add(x, pvec);
        auto bias = pos.attention_bias();
        for (const auto& blk : blocks) x = blk.forward(x, bias);
        VisionOutput<T> out;
        out.patch_features = layer_norm(x, ln_f_g, ln_f_b);
        out.z = l2_normalize(vecmat(mean_rows(out.patch_features), proj));
        return out;
    }

    void collect_params(std::vector<std::pair<std::string, Tensor<T>>>& out) {
        out.emplace_back("vision.patch_w", patch_w);
        out.emplace_back("vision.patch_b", patch_b);
        pos.collect_params(out, "vision.pos.");
        for (size_t l = 0; l < blocks.size(); ++l)
            blocks[l].collect_params(out, "vision.blocks." + std::to_string(l) + ".");
        out.emplace_back("vision.ln_f_g", ln_f_g);
        out.emplace_back("vision.ln_f_b", ln_f_b);
        out.emplace_back("vision.proj", proj);
    }
};

template <typename T>
struct TextEncoder {
    EncoderConfig cfg;
    Tensor<T> tok_table, pos_table;
    std::vector<TransformerBlock<T>> blocks;
    Tensor<T> ln_f_g, ln_f_b;
    Tensor<T> proj;

    static TextEncoder create(const EncoderConfig& cfg, Rng rng) {
        TextEncoder enc;
        enc.cfg = cfg;
        int d = cfg.embed_dim;
        enc.tok_table = Tensor<T>::zeros({cfg.vocab_size, d}, true);
        // tokens init wider than positions: word identity must dominate the
        // mixed-in content at the summary readout or prompts start collapsed
        for (auto& v : enc.tok_table.values()) v = static_cast<T>(rng.trunc_normal(0.1));
        enc.pos_table = Tensor<T>::zeros({cfg.max_text_len, d}, true);
        for (auto& v : enc.pos_table.values()) v = static_cast<T>(rng.trunc_normal(0.02));
        for (int l = 0; l < cfg.layers; ++l)
            enc.blocks.push_back(TransformerBlock<T>::create(d, cfg.heads, cfg.mlp_ratio,
                                                             rng.stream("block" + std::to_string(l))));
        enc.ln_f_g = Tensor<T>::filled({d}, T(1), true);
        enc.ln_f_b = Tensor<T>::zeros({d}, true);
        enc.proj = Tensor<T>::zeros({d, d}, true);
        for (auto& v : enc.proj.values()) v = static_cast<T>(rng.trunc_normal(0.02));
        return enc;
    }

    /// Summary-token representation, projected and normalized: [d].
    Tensor<T> forward(const TokenSequence& seq) const {
        int L = static_cast<int>(seq.ids.size());
        if (L < 1) throw ValidationError("encode_text: empty token sequence");
        if (L > cfg.max_text_len)
            throw ValidationError("encode_text: sequence of " + std::to_string(L) +
                                  " tokens exceeds max_text_len " + std::to_string(cfg.max_text_len));
        for (int id : seq.ids)
            if (id < 0 || id >= cfg.vocab_size)
                throw ValidationError("encode_text: token id " + std::to_string(id) +
                                      " outside vocabulary of " + std::to_string(cfg.vocab_size));
        auto x = add(take_rows(tok_table, seq.ids), slice_rows(pos_table, 0, L));
        Tensor<T> no_bias;
        for (const auto& blk : blocks) x = blk.forward(x, no_bias);
        auto feats = layer_norm(x, ln_f_g, ln_f_b);
        return l2_normalize(vecmat(row(feats, 0), proj));
    }

    void collect_params(std::vector<std::pair<std::string, Tensor<T>>>& out) {
        out.emplace_back("text.tok_table", tok_table);
        out.emplace_back("text.pos_table", pos_table);
        for (size_t l = 0; l < blocks.size(); ++l)
            blocks[l].collect_params(out, "text.blocks." + std::to_string(l) + ".");
        out.emplace_back("text.ln_f_g", ln_f_g);
        out.emplace_back("text.ln_f_b", ln_f_b);
        out.emplace_back("text.proj", proj);
    }
};

/// Both encoders plus the positional strategy, built from one seed.
template <typename T>
struct DualEncoder {
    EncoderConfig cfg;
    VisionEncoder<T> vision;
    TextEncoder<T> text;

    static DualEncoder create(const EncoderConfig& cfg, PosStrategy strategy, int mlp_hidden,
                              double energy_floor, uint64_t seed) {
        cfg.validate();
        DualEncoder m;
        m.cfg = cfg;
        Rng root(seed, "init");
        auto pos = PositionalEncoder<T>::create(strategy, cfg.grid(), cfg.embed_dim, mlp_hidden,
                                                energy_floor, root.stream("pos"));
        m.vision = VisionEncoder<T>::create(cfg, pos, root.stream("vision"));
        m.text = TextEncoder<T>::create(cfg, root.stream("text"));
        return m;
    }

    VisionOutput<T> encode_image(const GrayImage& img) const { return vision.forward(img); }
    Tensor<T> encode_text(const TokenSequence& seq) const { return text.forward(seq); }

    std::vector<std::pair<std::string, Tensor<T>>> named_params() {
        std::vector<std::pair<std::string, Tensor<T>>> out;
        vision.collect_params(out);
        text.collect_params(out);
        return out;
    }
};

}  // namespace roadclip
