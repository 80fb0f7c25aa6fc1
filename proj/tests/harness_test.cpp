#include <catch_amalgamated.hpp>

#include <sys/wait.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "roadclip/checkpoint.hpp"
#include "roadclip/config.hpp"
#include "roadclip/train.hpp"
#include "test_support.hpp"

using namespace roadclip;
using Catch::Matchers::ContainsSubstring;

namespace {

// Reduced model that still runs every code path: 4x4 patch grid, one block
// per tower.  Keeps the train/gradcheck cases below around a second each.
RunConfig tiny_config() {
    RunConfig cfg;
    cfg.encoder.embed_dim = 16;
    cfg.encoder.layers = 1;
    cfg.encoder.heads = 2;
    cfg.encoder.mlp_ratio = 2;
    cfg.encoder.image_size = 32;
    cfg.encoder.patch_size = 8;
    cfg.encoder.max_text_len = 16;
    cfg.pos_mlp_hidden = 8;
    cfg.batch_size = 4;
    cfg.epochs = 1;
    cfg.seed = 11;
    return cfg;
}

std::vector<Sample> tiny_samples(int n, int side, uint64_t seed) {
    std::vector<Sample> out;
    Rng rng(seed, "tiny");
    for (int i = 0; i < n; ++i) {
        auto spec = sample_spec(i % kNumClasses, side, 0.05, rng);
        auto s = render_sample(spec, side, derive_seed(seed, "tiny/" + std::to_string(i)));
        s.id = "tiny/" + std::to_string(i);
        out.push_back(std::move(s));
    }
    return out;
}

struct CliResult {
    int exit_code = -1;
    std::string output;  // stdout and stderr interleaved
};

CliResult run_cli(const std::string& args) {
    std::string cmd = std::string(ROADCLIP_CLI_PATH) + " " + args + " 2>&1";
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    CliResult res;
    char buf[4096];
    size_t got;
    while ((got = fread(buf, 1, sizeof buf, pipe)) > 0) res.output.append(buf, got);
    int rc = pclose(pipe);
    res.exit_code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
    return res;
}

}  // namespace

// ------------------------------------------------------------------ config

TEST_CASE("config serialization round-trips") {
    RunConfig cfg;
    cfg.encoder.embed_dim = 48;
    cfg.encoder.max_text_len = 24;
    cfg.pos_strategy = "relative";
    cfg.pos_energy_floor = 1.0 / 3.0;  // not exactly representable in decimal
    cfg.weights.lambda_concept = 0.25;
    cfg.weights.lambda_pos = 0.0;
    cfg.optim.lr = 3e-4;
    cfg.batch_size = 32;
    cfg.epochs = 7;
    cfg.seed = 123456789012345ull;
    cfg.dataset = "runs/bench data";  // value with an interior space
    cfg.recall_ks = {2, 7};
    cfg.concept_classes = {"alpha crack", "beta blob"};

    auto text = serialize_run_config(cfg);
    auto back = parse_run_config(text);

    CHECK(back.encoder.embed_dim == 48);
    CHECK(back.encoder.max_text_len == 24);
    CHECK(back.pos_strategy == "relative");
    CHECK(back.pos_energy_floor == cfg.pos_energy_floor);
    CHECK(back.weights.lambda_concept == 0.25);
    CHECK(back.weights.lambda_pos == 0.0);
    CHECK(back.optim.lr == 3e-4);
    CHECK(back.batch_size == 32);
    CHECK(back.seed == cfg.seed);
    CHECK(back.dataset == "runs/bench data");
    CHECK(back.recall_ks == std::vector<int>{2, 7});
    CHECK(back.concept_classes == cfg.concept_classes);

    // canonical form is a fixed point
    CHECK(serialize_run_config(back) == text);

    // vocab_size is derived from the tokenizer and never serialized
    CHECK_THAT(text, !ContainsSubstring("vocab_size"));
}

TEST_CASE("config parser tolerates comments and whitespace") {
    std::string text =
        "# run recipe\n"
        "\n"
        "  [train]  \n"
        "batch_size=16   # inline note\n"
        "\tepochs =  3\n"
        "[eval]\n"
        "recall_ks = 1 ,2,  5\n";
    auto cfg = parse_run_config(text);
    CHECK(cfg.batch_size == 16);
    CHECK(cfg.epochs == 3);
    CHECK(cfg.recall_ks == std::vector<int>{1, 2, 5});
}

TEST_CASE("config parser rejects unknown names and malformed lines") {
    CHECK_THROWS_MATCHES(parse_run_config("[nope]\nx = 1\n"), ValidationError,
                         Catch::Matchers::MessageMatches(ContainsSubstring("unknown section")));
    CHECK_THROWS_MATCHES(
        parse_run_config("[train]\nfrobnicate = 1\n"), ValidationError,
        Catch::Matchers::MessageMatches(ContainsSubstring("unknown key 'frobnicate'")));
    // errors carry the line number
    CHECK_THROWS_MATCHES(parse_run_config("[train]\n\njust words\n"), ValidationError,
                         Catch::Matchers::MessageMatches(ContainsSubstring("line 3")));
    CHECK_THROWS_AS(parse_run_config("[train\nbatch_size = 1\n"), ValidationError);
    CHECK_THROWS_AS(parse_run_config("[]\n"), ValidationError);
    CHECK_THROWS_AS(parse_run_config("batch_size = 1\n"), ValidationError);  // before any section
    CHECK_THROWS_MATCHES(
        parse_run_config("[train]\nbatch_size = many\n"), ValidationError,
        Catch::Matchers::MessageMatches(ContainsSubstring("not an integer")));
    CHECK_THROWS_AS(parse_run_config("[optim]\nlr = fast\n"), ValidationError);
    CHECK_THROWS_AS(parse_run_config("[encoder]\nvocab_size = 5\n"), ValidationError);
    CHECK_THROWS_AS(parse_run_config("[concepts]\nclasses = a;;b\n"), ValidationError);
}

TEST_CASE("config validation names the offending field") {
    RunConfig cfg;
    cfg.batch_size = 0;
    CHECK_THROWS_MATCHES(
        cfg.validate(), ValidationError,
        Catch::Matchers::MessageMatches(
            ContainsSubstring("[train] batch_size must be at least 1, got 0")));

    cfg = RunConfig{};
    cfg.attn_quantile = 1.5;
    CHECK_THROWS_MATCHES(cfg.validate(), ValidationError,
                         Catch::Matchers::MessageMatches(ContainsSubstring("attn_quantile")));

    cfg = RunConfig{};
    cfg.tau_min = 0.5;
    cfg.tau_max = 0.2;
    CHECK_THROWS_MATCHES(cfg.validate(), ValidationError,
                         Catch::Matchers::MessageMatches(ContainsSubstring("tau_min")));

    cfg = RunConfig{};
    cfg.pos_strategy = "frobnicate";
    CHECK_THROWS_AS(cfg.validate(), ValidationError);

    CHECK_NOTHROW(RunConfig{}.validate());
}

TEST_CASE("config overrides share the file parser's dispatch") {
    RunConfig cfg;
    apply_config_override(cfg, "train.batch_size=32");
    apply_config_override(cfg, "loss.lambda_pos=0");
    apply_config_override(cfg, "pos.strategy=none");
    CHECK(cfg.batch_size == 32);
    CHECK(cfg.weights.lambda_pos == 0.0);
    CHECK(cfg.pos_strategy == "none");
    // later overrides win
    apply_config_override(cfg, "train.batch_size=8");
    CHECK(cfg.batch_size == 8);

    CHECK_THROWS_MATCHES(
        apply_config_override(cfg, "train.batch_size"), ValidationError,
        Catch::Matchers::MessageMatches(ContainsSubstring("section.key=value")));
    CHECK_THROWS_AS(apply_config_override(cfg, "batchsize=3"), ValidationError);
    CHECK_THROWS_AS(apply_config_override(cfg, "train.frobnicate=1"), ValidationError);
}

TEST_CASE("config file loading round-trips through disk") {
    auto dir = testsupport::scratch_dir("config_io");
    RunConfig cfg;
    cfg.epochs = 5;
    cfg.dataset = "some/where";
    {
        std::ofstream out(dir / "run.ini");
        out << serialize_run_config(cfg);
    }
    auto back = load_run_config(dir / "run.ini");
    CHECK(back.epochs == 5);
    CHECK(back.dataset == "some/where");
    CHECK_THROWS_AS(load_run_config(dir / "absent.ini"), IoError);
}

// --------------------------------------------------------------- checkpoint

namespace {

CheckpointData<float> sample_checkpoint() {
    CheckpointData<float> data;
    data.epoch = 3;
    data.adam_t = 7;
    data.config_text = serialize_run_config(RunConfig{});
    data.tensors.push_back({"a.w", {2, 3}, {1.0f, -2.5f, 0.0f, 3.25f, 1e-7f, -42.0f}});
    data.tensors.push_back({"b.bias", {4}, {0.5f, 0.25f, -0.125f, 2.0f}});
    return data;
}

}  // namespace

TEST_CASE("checkpoint bytes round-trip exactly") {
    auto data = sample_checkpoint();
    auto bytes = serialize_checkpoint(data);

    REQUIRE(bytes.size() > 8);
    CHECK(bytes.compare(0, 8, "RDCLCKPT") == 0);

    auto back = parse_checkpoint<float>(bytes, "test");
    CHECK(back.epoch == 3);
    CHECK(back.adam_t == 7);
    CHECK(back.config_text == data.config_text);
    REQUIRE(back.tensors.size() == 2);
    CHECK(back.tensors[0].name == "a.w");
    CHECK(back.tensors[0].shape == std::vector<int>{2, 3});
    CHECK(back.tensors[0].values == data.tensors[0].values);
    CHECK(back.tensors[1].values == data.tensors[1].values);

    // serialize(parse(serialize(x))) is byte-identical
    CHECK(serialize_checkpoint(back) == bytes);
}

TEST_CASE("checkpoint files round-trip exactly") {
    auto dir = testsupport::scratch_dir("ckpt_io");
    auto data = sample_checkpoint();
    save_checkpoint(dir / "a.ckpt", data);
    auto back = load_checkpoint<float>(dir / "a.ckpt");
    save_checkpoint(dir / "b.ckpt", back);

    auto slurp = [](const std::filesystem::path& p) {
        std::ifstream in(p, std::ios::binary);
        std::stringstream ss;
        ss << in.rdbuf();
        return ss.str();
    };
    CHECK(slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt"));
    CHECK_THROWS_AS(load_checkpoint<float>(dir / "absent.ckpt"), IoError);
}

TEST_CASE("checkpoint parser rejects corruption") {
    auto bytes = serialize_checkpoint(sample_checkpoint());

    SECTION("bad magic") {
        auto b = bytes;
        b[0] = 'X';
        CHECK_THROWS_MATCHES(parse_checkpoint<float>(b, "t"), ValidationError,
                             Catch::Matchers::MessageMatches(ContainsSubstring("bad magic")));
    }
    SECTION("unsupported version") {
        auto b = bytes;
        b[8] = 2;  // little-endian u32 version field
        CHECK_THROWS_MATCHES(parse_checkpoint<float>(b, "t"), ValidationError,
                             Catch::Matchers::MessageMatches(ContainsSubstring("version 2")));
    }
    SECTION("truncated header") {
        CHECK_THROWS_AS(parse_checkpoint<float>(bytes.substr(0, 30), "t"), IoError);
    }
    SECTION("truncated tensor data") {
        CHECK_THROWS_AS(parse_checkpoint<float>(bytes.substr(0, bytes.size() - 4), "t"), IoError);
    }
    SECTION("trailing bytes") {
        CHECK_THROWS_MATCHES(parse_checkpoint<float>(bytes + "z", "t"), ValidationError,
                             Catch::Matchers::MessageMatches(ContainsSubstring("trailing")));
    }
    SECTION("dtype mismatch") {
        CHECK_THROWS_MATCHES(parse_checkpoint<double>(bytes, "t"), ValidationError,
                             Catch::Matchers::MessageMatches(ContainsSubstring("f32")));
    }
    SECTION("mangled header json") {
        auto b = bytes;
        b[20] = '!';  // inside the JSON header
        CHECK_THROWS_AS(parse_checkpoint<float>(b, "t"), ValidationError);
    }
}

TEST_CASE("train state round-trips through a checkpoint") {
    auto cfg = tiny_config();
    auto train_set = tiny_samples(8, cfg.encoder.image_size, 401);

    auto st = init_train_state<float>(cfg);
    train(st, train_set, {});
    auto before = param_checksum(st.model);
    REQUIRE(st.epoch == 1);
    REQUIRE(st.adam.t == 2);  // 8 samples / batch 4

    auto bytes = serialize_checkpoint(checkpoint_from_state(st));
    auto st2 = state_from_checkpoint(parse_checkpoint<float>(bytes, "t"));

    CHECK(param_checksum(st2.model) == before);
    CHECK(st2.epoch == 1);
    CHECK(st2.adam.t == 2);
    CHECK(st2.bank.anchors == st.bank.anchors);
    CHECK(st2.adam.m == st.adam.m);
    CHECK(st2.adam.v == st.adam.v);
    CHECK(st2.tok.vocab_size() == st.tok.vocab_size());
    CHECK(serialize_run_config(st2.cfg) == serialize_run_config(st.cfg));

    // the restored state re-serializes to the same bytes
    CHECK(serialize_checkpoint(checkpoint_from_state(st2)) == bytes);

    // and it trains on identically to the original
    auto rows1 = train(st, train_set, {});
    auto rows2 = train(st2, train_set, {});
    REQUIRE(rows1.size() == rows2.size());
    CHECK(epoch_row_json(rows1[0]) == epoch_row_json(rows2[0]));
    CHECK(param_checksum(st2.model) == param_checksum(st.model));
}

TEST_CASE("apply_checkpoint reports missing and mismatched tensors") {
    auto cfg = tiny_config();
    auto st = init_train_state<float>(cfg);
    auto data = checkpoint_from_state(st);

    SECTION("missing tensor") {
        data.tensors.erase(data.tensors.begin());
        auto fresh = init_train_state<float>(cfg);
        CHECK_THROWS_MATCHES(apply_checkpoint(fresh, data, "t"), ValidationError,
                             Catch::Matchers::MessageMatches(ContainsSubstring("missing tensor")));
    }
    SECTION("wrong element count") {
        data.tensors[0].values.push_back(0.0f);
        data.tensors[0].shape.clear();
        data.tensors[0].shape.push_back(static_cast<int>(data.tensors[0].values.size()));
        auto fresh = init_train_state<float>(cfg);
        CHECK_THROWS_MATCHES(
            apply_checkpoint(fresh, data, "t"), ValidationError,
            Catch::Matchers::MessageMatches(ContainsSubstring(data.tensors[0].name)));
    }
}

// -------------------------------------------------------------------- train

TEST_CASE("zero training epochs leave the state untouched") {
    auto cfg = tiny_config();
    cfg.epochs = 0;
    auto st = init_train_state<float>(cfg);
    auto before = param_checksum(st.model);
    auto rows = train(st, tiny_samples(4, cfg.encoder.image_size, 77), {});
    CHECK(rows.empty());
    CHECK(st.epoch == 0);
    CHECK(st.adam.t == 0);
    CHECK(param_checksum(st.model) == before);
}

TEST_CASE("training is reproducible run to run") {
    auto cfg = tiny_config();
    cfg.epochs = 2;
    auto train_set = tiny_samples(8, cfg.encoder.image_size, 55);
    auto val_set = tiny_samples(4, cfg.encoder.image_size, 56);

    std::ostringstream log1, log2;
    auto st1 = init_train_state<float>(cfg);
    auto st2 = init_train_state<float>(cfg);
    train(st1, train_set, val_set, &log1);
    train(st2, train_set, val_set, &log2);

    const std::string log_text = log1.str();
    CHECK(log_text == log2.str());
    CHECK(std::count(log_text.begin(), log_text.end(), '\n') == 2);
    CHECK(serialize_checkpoint(checkpoint_from_state(st1)) ==
          serialize_checkpoint(checkpoint_from_state(st2)));

    // every row parses as one JSON object with the full metric set
    std::istringstream lines(log_text);
    std::string line;
    int64_t epoch = 0;
    while (std::getline(lines, line)) {
        auto j = nlohmann::json::parse(line);
        CHECK(j.at("epoch").get<int64_t>() == ++epoch);
        for (const char* k : {"itc", "domain_align", "pos_consist", "total", "zs", "r1", "sla"})
            CHECK(j.contains(k));
        CHECK(std::isfinite(j.at("total").get<double>()));
    }
    CHECK(epoch == 2);
}

TEST_CASE("training rejects an empty training set") {
    auto st = init_train_state<float>(tiny_config());
    CHECK_THROWS_MATCHES(train(st, {}, {}), ValidationError,
                         Catch::Matchers::MessageMatches(ContainsSubstring("empty training set")));
}

TEST_CASE("training aborts when the loss goes non-finite") {
    auto cfg = tiny_config();
    auto st = init_train_state<float>(cfg);
    auto params = st.param_vector();
    params[0].values()[0] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_MATCHES(
        train(st, tiny_samples(4, cfg.encoder.image_size, 88), {}), NumericError,
        Catch::Matchers::MessageMatches(ContainsSubstring("epoch 1 step 1")));
}

TEST_CASE("gradcheck passes on the reduced model") {
    auto report = gradcheck_run(tiny_config(), 1);
    INFO("worst " << report.worst_param << "[" << report.worst_index
                  << "] rel err " << report.max_rel_err);
    CHECK(report.pass(1e-4));
    CHECK(report.probes > 0);
    CHECK(!report.worst.empty());
    CHECK_THROWS_AS(gradcheck_run(tiny_config(), 0), ValidationError);
}

TEST_CASE("ablation grid trains one row per cell") {
    auto cfg = tiny_config();
    auto train_set = tiny_samples(8, cfg.encoder.image_size, 31);
    auto test_set = tiny_samples(8, cfg.encoder.image_size, 32);
    std::vector<std::string> strategies = {"none", "dape"};
    std::vector<LossCombo> combos = {default_loss_combos()[0]};

    auto rows = run_ablation<float>(cfg, strategies, combos, train_set, test_set);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].name == "none/itc");
    CHECK(rows[1].name == "dape/itc");

    auto again = run_ablation<float>(cfg, strategies, combos, train_set, test_set);
    CHECK(ablation_csv(rows) == ablation_csv(again));

    auto table = format_ablation_table(rows);
    CHECK_THAT(table, ContainsSubstring("zs_acc"));
    CHECK_THAT(table, ContainsSubstring("none/itc"));
    CHECK_THAT(table, ContainsSubstring("dape/itc"));

    auto csv = ablation_csv(rows);
    CHECK_THAT(csv, ContainsSubstring("name,zs_acc,recall_at_1,recall_at_5,sla\n"));
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);

    CHECK_THROWS_AS(run_ablation<float>(cfg, {}, combos, train_set, test_set), ValidationError);
    CHECK_THROWS_AS(run_ablation<float>(cfg, strategies, combos, train_set, {}), ValidationError);
}

TEST_CASE("concept words extend the tokenizer") {
    RunConfig cfg;
    auto words = concept_words(cfg);
    auto has = [&](const std::string& w) {
        return std::find(words.begin(), words.end(), w) != words.end();
    };
    CHECK(has("pothole"));
    CHECK(has("photo"));  // from the prompt template

    Tokenizer bare;
    Tokenizer extended(words);
    CHECK(extended.vocab_size() >= bare.vocab_size());
    auto st = init_train_state<float>(tiny_config());
    CHECK(st.cfg.encoder.vocab_size == st.tok.vocab_size());
}

// --------------------------------------------------------------------- cli

TEST_CASE("cli rejects bad usage with distinct exit codes") {
    auto help = run_cli("--help");
    CHECK(help.exit_code == 0);
    CHECK_THAT(help.output, ContainsSubstring("train"));

    auto bad_flag = run_cli("train --frobnicate");
    CHECK(bad_flag.exit_code == 1);

    auto no_sub = run_cli("");
    CHECK(no_sub.exit_code == 1);

    auto bad_cfg = run_cli("gradcheck --set train.batch_size=0");
    CHECK(bad_cfg.exit_code == 1);
    CHECK_THAT(bad_cfg.output, ContainsSubstring("batch_size"));

    auto gone = run_cli("eval --checkpoint absent.ckpt --dataset absent");
    CHECK(gone.exit_code == 3);
    CHECK_THAT(gone.output, ContainsSubstring("absent.ckpt"));
}

TEST_CASE("cli pipeline produces evaluable artifacts") {
    namespace fs = std::filesystem;
    auto dir = testsupport::scratch_dir("cli_pipe");
    auto q = [&](const char* leaf) { return (dir / leaf).string(); };

    auto gen = run_cli("gen-data --out " + q("data") +
                       " --seed 5 --image-size 64 --train 8 --val 4 --test 4");
    INFO(gen.output);
    REQUIRE(gen.exit_code == 0);
    CHECK(fs::exists(dir / "data" / "manifest.json"));

    auto tr = run_cli("train --dataset " + q("data") + " --epochs 1 --batch-size 4 --out " +
                      q("m.ckpt") + " --log " + q("train.jsonl"));
    INFO(tr.output);
    REQUIRE(tr.exit_code == 0);
    CHECK(fs::exists(dir / "m.ckpt"));

    auto ev = run_cli("eval --checkpoint " + q("m.ckpt") + " --dataset " + q("data") +
                      " --split test --out " + q("runs.jsonl") + " --heatmap-dir " + q("hm") +
                      " --heatmaps 1");
    INFO(ev.output);
    REQUIRE(ev.exit_code == 0);

    std::ifstream runs(dir / "runs.jsonl");
    std::string line;
    REQUIRE(std::getline(runs, line));
    auto j = nlohmann::json::parse(line);
    CHECK(j.at("split") == "test");
    CHECK(j.at("gallery").get<int>() == 4);
    CHECK(j.at("epoch").get<int>() == 1);
    CHECK(j.at("recall").contains("1"));
    CHECK(j.at("zs").is_number());
    CHECK(j.at("sla").is_number());

    int pgms = 0;
    for (const auto& e : fs::directory_iterator(dir / "hm"))
        pgms += e.path().extension() == ".pgm";
    CHECK(pgms == 1);

    auto ins = run_cli("inspect --checkpoint " + q("m.ckpt"));
    INFO(ins.output);
    CHECK(ins.exit_code == 0);
    CHECK_THAT(ins.output, ContainsSubstring("epoch 1"));
    CHECK_THAT(ins.output, ContainsSubstring("pothole"));

    // a second eval appends rather than truncating
    auto ev2 = run_cli("eval --checkpoint " + q("m.ckpt") + " --dataset " + q("data") +
                       " --split val --out " + q("runs.jsonl"));
    REQUIRE(ev2.exit_code == 0);
    std::ifstream runs2(dir / "runs.jsonl");
    int rows = 0;
    while (std::getline(runs2, line)) ++rows;
    CHECK(rows == 2);
}
