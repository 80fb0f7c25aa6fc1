#include <catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "roadclip/concepts.hpp"
#include "roadclip/encoder.hpp"
#include "test_support.hpp"

using namespace roadclip;
using testsupport::rel_err;

namespace {

EncoderConfig small_config(int vocab) {
    EncoderConfig cfg;
    cfg.embed_dim = 8;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.mlp_ratio = 2;
    cfg.patch_size = 4;
    cfg.image_size = 8;
    cfg.max_text_len = 12;
    cfg.vocab_size = vocab;
    return cfg;
}

template <typename T>
double scalar_of(const Tensor<T>& t) {
    return static_cast<double>(t.values()[0]);
}

Tensor<double> basis_rows(int K, int d) {
    auto t = Tensor<double>::zeros({K, d});
    for (int k = 0; k < K; ++k) t.values()[static_cast<size_t>(k) * d + k] = 1.0;
    return t;
}

}  // namespace

TEST_CASE("concept set validates and renders prompts") {
    ConceptSet set;
    set.classes = {"pothole", "patch repair"};
    set.validate();
    REQUIRE(set.prompt_for(0) == "a photo of a pothole on a road");
    REQUIRE(set.prompt_for(1) == "a photo of a patch repair on a road");
    REQUIRE_THROWS_AS(set.prompt_for(2), ValidationError);

    ConceptSet dup;
    dup.classes = {"pothole", "pothole"};
    REQUIRE_THROWS_AS(dup.validate(), ValidationError);

    ConceptSet noslot;
    noslot.classes = {"pothole"};
    noslot.prompt_template = "a photo of a road";
    REQUIRE_THROWS_AS(noslot.validate(), ValidationError);

    ConceptSet empty;
    REQUIRE_THROWS_AS(empty.validate(), ValidationError);
}

TEST_CASE("concept loss exact identities") {
    auto inv_tau = Tensor<double>::scalar(1.0 / 0.07);

    SECTION("single class degenerates to zero") {
        auto protos = Tensor<double>::from_values({1, 4}, {0.5, 0.0, 0.0, 0.0});
        auto z = Tensor<double>::from_values({4}, {0.3, 0.4, 0.0, 0.0});
        REQUIRE(scalar_of(concept_loss(z, 0, protos, inv_tau)) == 0.0);
    }

    SECTION("uniform similarities give ln K") {
        for (int K : {2, 10}) {
            std::vector<double> rows;
            for (int k = 0; k < K; ++k) rows.insert(rows.end(), {0.6, 0.8, 0.0});
            auto protos = Tensor<double>::from_values({K, 3}, std::move(rows));
            auto z = Tensor<double>::from_values({3}, {0.1, -0.7, 0.4});
            double got = scalar_of(concept_loss(z, K / 2, protos, inv_tau));
            INFO("K=" << K);
            CHECK(rel_err(got, std::log(static_cast<double>(K))) < 1e-12);
        }
    }

    SECTION("matched prototype with orthogonal rest, K=10, tau=0.07") {
        int K = 10;
        auto protos = basis_rows(K, K);
        auto z = Tensor<double>::zeros({K});
        z.values()[3] = 1.0;
        double got = scalar_of(concept_loss(z, 3, protos, inv_tau));
        double itau = 1.0 / 0.07;
        double expected = std::log(std::exp(itau) + 9.0) - itau;
        CHECK(rel_err(got, expected) < 1e-9);
        CHECK(got > 1e-7);
        CHECK(got < 1e-5);  // numerically almost zero, exactly as intended
    }

    SECTION("invalid label rejected") {
        auto protos = basis_rows(3, 3);
        auto z = Tensor<double>::from_values({3}, {1.0, 0.0, 0.0});
        REQUIRE_THROWS_AS(concept_loss(z, -1, protos, inv_tau), ValidationError);
        REQUIRE_THROWS_AS(concept_loss(z, 3, protos, inv_tau), ValidationError);
    }
}

TEST_CASE("concept loss is monotone in the matched similarity") {
    auto inv_tau = Tensor<double>::scalar(1.0 / 0.07);
    auto protos = basis_rows(2, 4);
    double prev = -1.0;
    for (double alpha : {0.2, 0.7, 1.2}) {
        // matched similarity cos(alpha) decreasing; other class fixed at 0
        auto z = Tensor<double>::from_values({4}, {std::cos(alpha), 0.0, std::sin(alpha), 0.0});
        double loss = scalar_of(concept_loss(z, 0, protos, inv_tau));
        CHECK(loss > prev);
        prev = loss;
    }
    CHECK(prev > 0.0);
}

TEST_CASE("domain alignment loss is the batch mean") {
    auto inv_tau = Tensor<double>::scalar(1.0 / 0.07);
    Rng pr(44, "protos");
    auto protos = testsupport::random_tensor({4, 6}, pr);
    Rng zr(45, "zs");
    auto za = testsupport::random_tensor({6}, zr, false);
    auto zb = testsupport::random_tensor({6}, zr, false);

    double a = scalar_of(concept_loss(za, 1, protos, inv_tau));
    double b = scalar_of(concept_loss(zb, 3, protos, inv_tau));

    double same = scalar_of(domain_align_loss<double>({za, za, za}, {1, 1, 1}, protos, inv_tau));
    CHECK(rel_err(same, a) < 1e-12);

    double mixed = scalar_of(domain_align_loss<double>({za, zb}, {1, 3}, protos, inv_tau));
    CHECK(rel_err(mixed, 0.5 * (a + b)) < 1e-12);

    REQUIRE_THROWS_AS(domain_align_loss<double>({}, {}, protos, inv_tau), ValidationError);
    REQUIRE_THROWS_AS(domain_align_loss<double>({za}, {1, 2}, protos, inv_tau), ValidationError);
}

TEST_CASE("concept loss gradients match finite differences") {
    Rng rng(77, "fd");
    auto z = testsupport::random_tensor({5}, rng);
    auto protos = testsupport::random_tensor({3, 5}, rng);
    auto log_tau = Tensor<double>::scalar(std::log(0.07), true);

    auto build = [&] {
        auto inv_tau = exp(scale(log_tau, -1.0));
        return concept_loss(z, 1, protos, inv_tau);
    };
    auto eval = [&] {
        NoGradGuard ng;
        return scalar_of(build());
    };

    auto loss = build();
    backward(loss);
    std::vector<Tensor<double>> leaves = {z, protos, log_tau};
    auto st = testsupport::check_leaf_grads(leaves, eval, 1e-5);
    INFO("checked " << st.coords << " coordinates");
    CHECK(st.coords == 5 + 15 + 1);
    CHECK(st.max_rel < 1e-5);
}

TEST_CASE("mix_prototype blends and renormalizes") {
    std::vector<double> v = {1.0, 0.0, 0.0, 0.0};
    std::vector<double> a = {0.0, 1.0, 0.0, 0.0};

    auto half = mix_prototype(v, a, 0.5);
    double r = std::sqrt(0.5);
    CHECK(rel_err(half[0], r) < 1e-12);
    CHECK(rel_err(half[1], r) < 1e-12);
    CHECK(half[2] == 0.0);

    auto keep = mix_prototype(v, a, 0.0);
    CHECK(keep == v);
    auto swap_ = mix_prototype(v, a, 1.0);
    CHECK(swap_ == a);

    REQUIRE_THROWS_AS(mix_prototype(v, std::vector<double>{1.0}, 0.5), ValidationError);
}

TEST_CASE("prototype bank initializes from text and reanchors") {
    Tokenizer tok;
    auto cfg = small_config(tok.vocab_size());
    auto model = DualEncoder<float>::create(cfg, PosStrategy::none, 8, 1e-3, 404);
    ConceptSet set;
    set.classes = {"pothole", "transverse crack", "patch repair"};

    auto bank = ConceptBank<float>::init(set, model.text, tok, cfg.max_text_len);
    REQUIRE(bank.prototypes.shape() == std::vector<int>{3, cfg.embed_dim});
    REQUIRE(bank.anchors.size() == static_cast<size_t>(3 * cfg.embed_dim));

    // rows unit-norm (encoder output is normalized)
    auto vals = bank.prototypes.values();
    for (int k = 0; k < 3; ++k) {
        double n2 = 0.0;
        for (int j = 0; j < cfg.embed_dim; ++j) {
            double x = vals[static_cast<size_t>(k) * cfg.embed_dim + j];
            n2 += x * x;
        }
        CHECK(rel_err(std::sqrt(n2), 1.0) < 1e-5);
    }

    // distinct classes get distinct prototypes even at random init
    double dist01 = 0.0;
    for (int j = 0; j < cfg.embed_dim; ++j) {
        double diff = vals[j] - vals[static_cast<size_t>(cfg.embed_dim) + j];
        dist01 += diff * diff;
    }
    CHECK(std::sqrt(dist01) > 1e-3);

    // determinism: a model built from the same seed yields the same bank
    auto model2 = DualEncoder<float>::create(cfg, PosStrategy::none, 8, 1e-3, 404);
    auto bank2 = ConceptBank<float>::init(set, model2.text, tok, cfg.max_text_len);
    auto v2 = bank2.prototypes.values();
    for (size_t i = 0; i < vals.size(); ++i) REQUIRE(vals[i] == v2[i]);

    SECTION("lambda 0 leaves prototypes put") {
        std::vector<float> before(vals.begin(), vals.end());
        bank.reanchor(model.text, tok, cfg.max_text_len, 0.0);
        auto after = bank.prototypes.values();
        for (size_t i = 0; i < before.size(); ++i)
            CHECK(std::abs(after[i] - before[i]) < 1e-6);
    }

    SECTION("lambda 1 adopts the fresh embedding") {
        // disturb the prototypes first so the pull is visible
        for (auto& x : bank.prototypes.values()) x += 0.3f;
        bank.reanchor(model.text, tok, cfg.max_text_len, 1.0);
        auto after = bank.prototypes.values();
        for (size_t i = 0; i < bank.anchors.size(); ++i)
            CHECK(std::abs(after[i] - bank.anchors[i]) < 1e-6);
    }

    SECTION("lambda outside [0,1] rejected") {
        REQUIRE_THROWS_AS(bank.reanchor(model.text, tok, cfg.max_text_len, 1.5),
                          ValidationError);
    }
}
