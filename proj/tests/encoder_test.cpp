#include <catch_amalgamated.hpp>

#include <cmath>
#include <set>
#include <vector>

#include "roadclip/adam.hpp"
#include "roadclip/encoder.hpp"
#include "roadclip/tokenizer.hpp"
#include "test_support.hpp"

using namespace roadclip;
using testsupport::rel_err;

namespace {

GrayImage ramp_image(int side) {
    GrayImage img;
    img.width = side;
    img.height = side;
    img.pix.resize(static_cast<size_t>(side) * side);
    for (int r = 0; r < side; ++r)
        for (int c = 0; c < side; ++c)
            img.pix[static_cast<size_t>(r) * side + c] =
                static_cast<float>((r * side + c) % 97) / 96.0f;
    return img;
}

GrayImage textured_image(int side, uint64_t seed) {
    Rng rng(seed, "textured");
    GrayImage img;
    img.width = side;
    img.height = side;
    img.pix.resize(static_cast<size_t>(side) * side);
    for (auto& p : img.pix) p = static_cast<float>(rng.uniform(0.0, 1.0));
    // one strong diagonal stripe so patches are visually distinct
    for (int r = 0; r < side; ++r)
        for (int c = 0; c < side; ++c)
            if (std::abs(r - c) <= 2) img.pix[static_cast<size_t>(r) * side + c] = 1.0f;
    return img;
}

GrayImage swap_patches(const GrayImage& img, int P, int ai, int aj, int bi, int bj) {
    GrayImage out = img;
    for (int r = 0; r < P; ++r)
        for (int c = 0; c < P; ++c)
            std::swap(out.pix[static_cast<size_t>(ai * P + r) * out.width + aj * P + c],
                      out.pix[static_cast<size_t>(bi * P + r) * out.width + bj * P + c]);
    return out;
}

EncoderConfig tiny_config(int vocab) {
    EncoderConfig cfg;
    cfg.embed_dim = 8;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.mlp_ratio = 2;
    cfg.patch_size = 4;
    cfg.image_size = 8;
    cfg.max_text_len = 8;
    cfg.vocab_size = vocab;
    return cfg;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    auto va = a.values();
    auto vb = b.values();
    REQUIRE(va.size() == vb.size());
    double m = 0.0;
    for (size_t i = 0; i < va.size(); ++i)
        m = std::max(m, std::abs(static_cast<double>(va[i]) - static_cast<double>(vb[i])));
    return m;
}

}  // namespace

TEST_CASE("patchify splits and reassembles losslessly") {
    auto img = ramp_image(64);
    auto grid = patchify<float>(img, 8);
    REQUIRE(grid.grid_size == 8);
    REQUIRE(grid.patches.shape() == std::vector<int>{64, 64});

    // row i*G+j of the patch matrix is exactly block (i, j) of the image
    auto vals = grid.patches.values();
    for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j)
            for (int r = 0; r < 8; ++r)
                for (int c = 0; c < 8; ++c) {
                    float got = vals[(static_cast<size_t>(i) * 8 + j) * 64 +
                                     static_cast<size_t>(r) * 8 + c];
                    REQUIRE(got == img.at(i * 8 + r, j * 8 + c));
                }

    // reassembly recovers every pixel bit-exactly
    GrayImage back;
    back.width = back.height = 64;
    back.pix.assign(64 * 64, -1.0f);
    for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j)
            for (int r = 0; r < 8; ++r)
                for (int c = 0; c < 8; ++c)
                    back.pix[static_cast<size_t>(i * 8 + r) * 64 + j * 8 + c] =
                        vals[(static_cast<size_t>(i) * 8 + j) * 64 + static_cast<size_t>(r) * 8 + c];
    REQUIRE(back.pix == img.pix);

    auto odd = ramp_image(63);
    REQUIRE_THROWS_AS(patchify<float>(odd, 8), ValidationError);
    GrayImage rect;
    rect.width = 64;
    rect.height = 32;
    rect.pix.assign(64 * 32, 0.0f);
    REQUIRE_THROWS_AS(patchify<float>(rect, 8), ValidationError);
}

TEST_CASE("encoder outputs are unit norm and deterministic") {
    Tokenizer tok;
    EncoderConfig cfg;
    cfg.vocab_size = tok.vocab_size();
    auto model = DualEncoder<float>::create(cfg, PosStrategy::dape, 32, 1e-3, 11);
    auto img = textured_image(64, 5);
    auto seq = tok.tokenize("a severe pothole about 2 meters in diameter at the center of the road", 32);

    NoGradGuard ng;
    auto out = model.encode_image(img);
    double n2 = 0.0;
    {
        auto z = out.z.values();
        for (float v : z) n2 += static_cast<double>(v) * v;
    }
    CHECK(rel_err(std::sqrt(n2), 1.0) < 1e-5);
    REQUIRE(out.patch_features.shape() == std::vector<int>{64, 64});

    auto zt = model.encode_text(seq);
    double nt = 0.0;
    for (float v : zt.values()) nt += static_cast<double>(v) * v;
    CHECK(rel_err(std::sqrt(nt), 1.0) < 1e-5);

    // same seed: identical parameters and identical outputs
    auto model2 = DualEncoder<float>::create(cfg, PosStrategy::dape, 32, 1e-3, 11);
    auto p1 = model.named_params();
    auto p2 = model2.named_params();
    REQUIRE(p1.size() == p2.size());
    for (size_t i = 0; i < p1.size(); ++i) {
        REQUIRE(p1[i].first == p2[i].first);
        REQUIRE(max_abs_diff(p1[i].second, p2[i].second) == 0.0);
    }
    auto out2 = model2.encode_image(img);
    REQUIRE(max_abs_diff(out.z, out2.z) == 0.0);

    // different seed: at least the first weight matrix differs
    auto model3 = DualEncoder<float>::create(cfg, PosStrategy::dape, 32, 1e-3, 12);
    CHECK(max_abs_diff(model.vision.patch_w, model3.vision.patch_w) > 0.0);

    // parameter names are unique
    std::set<std::string> names;
    for (auto& [name, t] : p1) names.insert(name);
    REQUIRE(names.size() == p1.size());
}

TEST_CASE("config validation rejects bad extents") {
    Tokenizer tok;
    EncoderConfig cfg;
    cfg.vocab_size = tok.vocab_size();
    cfg.heads = 5;  // 64 % 5 != 0
    REQUIRE_THROWS_AS(DualEncoder<float>::create(cfg, PosStrategy::none, 32, 1e-3, 1),
                      ValidationError);
    cfg = EncoderConfig{};
    cfg.vocab_size = tok.vocab_size();
    cfg.patch_size = 7;
    REQUIRE_THROWS_AS(DualEncoder<float>::create(cfg, PosStrategy::none, 32, 1e-3, 1),
                      ValidationError);
    cfg = EncoderConfig{};
    REQUIRE_THROWS_AS(DualEncoder<float>::create(cfg, PosStrategy::none, 32, 1e-3, 1),
                      ValidationError);  // vocab_size unset
}

TEST_CASE("patch permutation moves the embedding only when positions are encoded") {
    Tokenizer tok;
    EncoderConfig cfg;
    cfg.vocab_size = tok.vocab_size();
    auto img = textured_image(64, 21);
    auto swapped = swap_patches(img, 8, 0, 0, 5, 6);
    NoGradGuard ng;

    SECTION("strategy none is permutation invariant") {
        auto model = DualEncoder<double>::create(cfg, PosStrategy::none, 32, 1e-3, 7);
        auto za = model.encode_image(img).z;
        auto zb = model.encode_image(swapped).z;
        CHECK(max_abs_diff(za, zb) < 1e-6);
    }

    SECTION("positional strategies are order sensitive") {
        // the swapped pair carries orthogonal stripes so even the
        // orientation-only part of the descriptor moves
        GrayImage oriented = img;
        for (int r = 0; r < 8; ++r)
            for (int c = 0; c < 8; ++c) {
                oriented.pix[static_cast<size_t>(0 * 8 + r) * 64 + 0 * 8 + c] =
                    (r == 3 || r == 4) ? 1.0f : 0.1f;  // horizontal bar in patch (0,0)
                oriented.pix[static_cast<size_t>(5 * 8 + r) * 64 + 6 * 8 + c] =
                    (c == 3 || c == 4) ? 1.0f : 0.1f;  // vertical bar in patch (5,6)
            }
        auto oriented_swapped = swap_patches(oriented, 8, 0, 0, 5, 6);
        for (auto s : {PosStrategy::sinusoidal_absolute, PosStrategy::learnable_absolute,
                       PosStrategy::relative, PosStrategy::dape}) {
            auto model = DualEncoder<float>::create(cfg, s, 32, 1e-3, 7);
            if (s == PosStrategy::relative) {
                // a zero (or constant: softmax cancels shared shifts) bias
                // table would be a no-op; give it offset-dependent signal
                auto rv = model.vision.pos.rel_table.values();
                for (size_t i = 0; i < rv.size(); ++i)
                    rv[i] = 0.1f * static_cast<float>(i % 13) - 0.6f;
            }
            if (s == PosStrategy::dape) {
                // init-scale MLP output is faint; boost it so the probe sits
                // well clear of float rounding noise
                for (auto& v : model.vision.pos.mlp_w2.values()) v *= 10.0f;
            }
            auto za = model.encode_image(oriented).z;
            auto zb = model.encode_image(oriented_swapped).z;
            INFO("strategy " << strategy_name(s));
            CHECK(max_abs_diff(za, zb) > 1e-5);
        }
    }
}

TEST_CASE("text encoder is order sensitive and validates input") {
    Tokenizer tok;
    EncoderConfig cfg;
    cfg.vocab_size = tok.vocab_size();
    auto model = DualEncoder<float>::create(cfg, PosStrategy::none, 32, 1e-3, 3);
    NoGradGuard ng;

    auto a = tok.tokenize("a severe transverse crack at the shoulder of the road", 32);
    auto b = tok.tokenize("a transverse severe crack at the shoulder of the road", 32);
    REQUIRE(a.ids != b.ids);
    auto za = model.encode_text(a);
    auto zb = model.encode_text(b);
    CHECK(max_abs_diff(za, zb) > 1e-4);

    TokenSequence empty;
    REQUIRE_THROWS_AS(model.encode_text(empty), ValidationError);

    TokenSequence too_long;
    too_long.ids.assign(33, Tokenizer::kUnkId);
    too_long.ids[0] = Tokenizer::kSummaryId;
    REQUIRE_THROWS_AS(model.encode_text(too_long), ValidationError);

    TokenSequence bad;
    bad.ids = {Tokenizer::kSummaryId, cfg.vocab_size};
    REQUIRE_THROWS_AS(model.encode_text(bad), ValidationError);
}

TEST_CASE("every strategy passes a full-model gradient check") {
    Tokenizer tok;
    auto cfg = tiny_config(tok.vocab_size());
    auto img = textured_image(8, 33);
    auto seq = tok.tokenize("a moderate pothole about 1.5 meters in diameter", 8);
    REQUIRE(seq.ids.size() == static_cast<size_t>(8));

    for (auto s : {PosStrategy::none, PosStrategy::sinusoidal_absolute,
                   PosStrategy::learnable_absolute, PosStrategy::relative, PosStrategy::dape}) {
        DYNAMIC_SECTION("strategy " << strategy_name(s)) {
            auto model = DualEncoder<double>::create(cfg, s, 8, 1e-3, 99);
            if (s == PosStrategy::relative) {
                Rng rr(4, "relfill");
                for (auto& v : model.vision.pos.rel_table.values()) v = rr.uniform(-0.1, 0.1);
            }
            auto params = model.named_params();

            auto eval = [&]() {
                NoGradGuard ng;
                auto zi = model.encode_image(img).z;
                auto zt = model.encode_text(seq);
                auto vi = zi.values();
                auto vt = zt.values();
                double dot = 0.0;
                for (size_t i = 0; i < vi.size(); ++i) dot += vi[i] * vt[i];
                return dot;
            };

            auto zi = model.encode_image(img).z;
            auto zt = model.encode_text(seq);
            auto loss = sum(mul(zi, zt));
            backward(loss);

            std::vector<Tensor<double>> leaves;
            for (auto& [name, t] : params) leaves.push_back(t);
            // eps below the default: near-init layer norms see tiny variance,
            // whose inv-stddev cubed inflates FD truncation at 1e-4
            auto st = testsupport::check_leaf_grads(leaves, eval, 1e-5);
            INFO("checked " << st.coords << " coordinates");
            CHECK(st.coords > 500);
            CHECK(st.max_rel < 1e-4);
        }
    }
}

TEST_CASE("learnable positional table trains") {
    Tokenizer tok;
    auto cfg = tiny_config(tok.vocab_size());
    auto model = DualEncoder<float>::create(cfg, PosStrategy::learnable_absolute, 8, 1e-3, 17);
    auto img = textured_image(8, 2);
    auto seq = tok.tokenize("a severe pothole", 8);

    std::vector<float> before(model.vision.pos.table.values().begin(),
                              model.vision.pos.table.values().end());
    auto params = model.named_params();
    std::vector<Tensor<float>> tensors;
    for (auto& [name, t] : params) tensors.push_back(t);
    AdamState<float> adam;
    adam.reset(tensors);
    AdamHyper hyper;
    hyper.lr = 1e-2;

    // both branches live so every parameter carries a gradient
    auto loss = sum(mul(model.encode_image(img).z, model.encode_text(seq)));
    backward(loss);
    adam_step(tensors, adam, hyper);

    std::vector<float> after(model.vision.pos.table.values().begin(),
                             model.vision.pos.table.values().end());
    CHECK(before != after);
}
