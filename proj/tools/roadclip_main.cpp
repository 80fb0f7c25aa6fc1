// Command-line front end: thin subcommand mappings onto the library modules.
// Exit codes: 0 success, 1 validation failure, 2 numeric failure, 3 I/O
// failure.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "roadclip/checkpoint.hpp"
#include "roadclip/config.hpp"
#include "roadclip/eval.hpp"
#include "roadclip/synthbench.hpp"
#include "roadclip/train.hpp"

namespace {

using namespace roadclip;
namespace fs = std::filesystem;

struct ConfigArgs {
    std::string config_path;
    std::vector<std::string> sets;
    std::string dataset;
    std::string pos_strategy;
    int batch_size = -1;
    int epochs = -1;
    double lr = -1.0;
    bool has_seed = false;
    uint64_t seed = 0;
};

void add_config_flags(CLI::App* cmd, ConfigArgs& args) {
    cmd->add_option("--config", args.config_path, "run configuration file");
    cmd->add_option("--set", args.sets, "override one key as section.key=value")
        ->type_name("KV")
        ->allow_extra_args(false);
    cmd->add_option("--dataset", args.dataset, "dataset directory (train.dataset)");
    cmd->add_option("--pos-strategy", args.pos_strategy, "positional strategy (pos.strategy)");
    cmd->add_option("--batch-size", args.batch_size, "batch size (train.batch_size)");
    cmd->add_option("--epochs", args.epochs, "epoch count (train.epochs)");
    cmd->add_option("--lr", args.lr, "learning rate (optim.lr)");
    cmd->add_option("--seed", args.seed, "run seed (train.seed)");
}

RunConfig resolve_config(const CLI::App* cmd, const ConfigArgs& args) {
    RunConfig cfg;
    if (!args.config_path.empty()) cfg = load_run_config(args.config_path);
    for (const auto& kv : args.sets) apply_config_override(cfg, kv);
    if (cmd->count("--dataset")) cfg.dataset = args.dataset;
    if (cmd->count("--pos-strategy")) cfg.pos_strategy = args.pos_strategy;
    if (cmd->count("--batch-size")) cfg.batch_size = args.batch_size;
    if (cmd->count("--epochs")) cfg.epochs = args.epochs;
    if (cmd->count("--lr")) cfg.optim.lr = args.lr;
    if (cmd->count("--seed")) cfg.seed = args.seed;
    cfg.validate();
    return cfg;
}

const std::vector<Sample>& split_of(const Dataset& ds, const std::string& name) {
    auto it = ds.splits.find(name);
    if (it == ds.splits.end())
        throw ValidationError("dataset: no split named '" + name + "'");
    return it->second;
}

void check_image_size(const std::vector<Sample>& samples, int expected) {
    if (!samples.empty() && samples.front().image.width != expected)
        throw ValidationError("dataset images are " +
                              std::to_string(samples.front().image.width) +
                              " px, encoder expects " + std::to_string(expected));
}

std::string sanitize_id(const std::string& id) {
    std::string out = id;
    for (auto& c : out)
        if (c == '/' || c == '\\') c = '_';
    return out;
}

int cmd_gen_data(const std::string& out_dir, uint64_t seed, int image_size, double scale,
                 int train_n, int val_n, int test_n) {
    DatasetManifest manifest;
    manifest.seed = seed;
    manifest.image_size = image_size;
    manifest.scale_m_per_px = scale;
    manifest.split_sizes = {{"train", train_n}, {"val", val_n}, {"test", test_n}};
    manifest.validate();
    auto ds = generate_dataset(manifest, out_dir);
    int total = 0;
    for (const auto& [name, samples] : ds.splits) total += static_cast<int>(samples.size());
    std::cout << "wrote " << total << " samples to " << out_dir << "\n";
    return 0;
}

int cmd_train(const RunConfig& cfg, const std::string& out_path, const std::string& log_path) {
    if (cfg.dataset.empty())
        throw ValidationError("train: no dataset configured; set train.dataset or --dataset");
    auto ds = load_dataset(cfg.dataset);
    const auto& train_set = split_of(ds, "train");
    const auto& val_set = split_of(ds, "val");
    check_image_size(train_set, cfg.encoder.image_size);

    std::ofstream log_file;
    std::ostream* log = &std::cout;
    if (!log_path.empty()) {
        log_file.open(log_path, std::ios::binary | std::ios::trunc);
        if (!log_file) throw IoError("train: cannot open log " + log_path);
        log = &log_file;
    }
    auto st = init_train_state<float>(cfg);
    train(st, train_set, val_set, log);
    save_checkpoint(out_path, checkpoint_from_state(st));
    std::cout << "trained " << st.epoch << " epochs, checkpoint " << out_path << "\n";
    return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& dataset, const std::string& split,
             const std::string& out_path, const std::string& run_id,
             const std::string& heatmap_dir, int heatmaps) {
    auto data = load_checkpoint<float>(ckpt_path);
    auto st = state_from_checkpoint(data, ckpt_path);
    auto ds = load_dataset(dataset);
    const auto& samples = split_of(ds, split);
    if (samples.empty()) throw ValidationError("eval: split '" + split + "' is empty");
    check_image_size(samples, st.cfg.encoder.image_size);

    auto zs = zero_shot_classify(samples, st.bank.concepts, st.model, st.tok);
    auto ret = retrieve(st.model, st.tok, samples, st.cfg.recall_ks);
    auto rep = sla(samples, st.model, st.tok, st.cfg.attn_quantile, st.cfg.iou_pass);

    nlohmann::json recall;
    for (const auto& [k, v] : ret.recall_at) recall[std::to_string(k)] = v;
    std::string id = run_id.empty() ? fs::path(ckpt_path).stem().string() : run_id;
    nlohmann::json row = {{"run", id},     {"split", split},    {"gallery", ret.gallery},
                          {"zs", zs.accuracy}, {"recall", recall}, {"sla", rep.sla},
                          {"epoch", data.epoch}};
    if (out_path.empty()) {
        std::cout << row.dump() << "\n";
    } else {
        std::ofstream out(out_path, std::ios::binary | std::ios::app);
        if (!out) throw IoError("eval: cannot open " + out_path);
        out << row.dump() << "\n";
        std::cout << "eval " << id << ": zs " << zs.accuracy << ", sla " << rep.sla << "\n";
    }

    if (!heatmap_dir.empty()) {
        std::error_code ec;
        fs::create_directories(heatmap_dir, ec);
        if (ec) throw IoError("eval: cannot create " + heatmap_dir);
        int n = std::min<int>(heatmaps, static_cast<int>(samples.size()));
        for (int i = 0; i < n; ++i) {
            const auto& s = samples[static_cast<size_t>(i)];
            auto map = attention_map(s.image, s.caption, st.model, st.tok, s.id);
            export_heatmap(map, s.image, st.cfg.encoder.patch_size,
                           fs::path(heatmap_dir) / (sanitize_id(s.id) + "_heatmap.pgm"));
        }
        std::cout << "wrote " << n << " heatmaps to " << heatmap_dir << "\n";
    }
    return 0;
}

int cmd_ablate(const RunConfig& cfg, const std::string& strategies_csv,
               const std::string& combos_csv, const std::string& out_path,
               const std::string& table_path) {
    if (cfg.dataset.empty())
        throw ValidationError("ablate: no dataset configured; set train.dataset or --dataset");
    auto ds = load_dataset(cfg.dataset);
    const auto& train_set = split_of(ds, "train");
    const auto& test_set = split_of(ds, "test");
    check_image_size(train_set, cfg.encoder.image_size);

    std::vector<std::string> strategies;
    for (auto& s : configdetail::split_trimmed(strategies_csv, ','))
        if (!s.empty()) strategies.push_back(s);
    for (const auto& s : strategies) parse_strategy(s);

    std::vector<LossCombo> combos;
    auto known = default_loss_combos();
    for (auto& name : configdetail::split_trimmed(combos_csv, ',')) {
        if (name.empty()) continue;
        bool found = false;
        for (const auto& c : known)
            if (c.name == name) {
                combos.push_back(c);
                found = true;
            }
        if (!found)
            throw ValidationError("ablate: unknown loss combo '" + name +
                                  "'; known: itc, itc+concept, full");
    }

    auto rows = run_ablation<float>(cfg, strategies, combos, train_set, test_set, &std::cerr);
    std::string table = format_ablation_table(rows);
    std::cout << table;
    if (!table_path.empty()) {
        std::ofstream out(table_path, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("ablate: cannot open " + table_path);
        out << table;
    }
    if (!out_path.empty()) {
        std::ofstream out(out_path, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("ablate: cannot open " + out_path);
        out << ablation_csv(rows);
    }
    return 0;
}

int cmd_gradcheck(const RunConfig& cfg, int probes, double tol) {
    auto report = gradcheck_run(cfg, probes);
    std::cout << "gradcheck: " << report.probes << " probes, max rel err " << report.max_rel_err
              << " at " << report.worst_param << "[" << report.worst_index << "]\n";
    if (!report.pass(tol)) {
        for (const auto& p : report.worst)
            std::cerr << "  " << p.param << "[" << p.index << "]: analytic " << p.analytic
                      << " vs numeric " << p.numeric << " (rel " << p.rel_err << ")\n";
        throw NumericError("gradcheck: max relative error " +
                           std::to_string(report.max_rel_err) + " exceeds tolerance");
    }
    std::cout << "gradcheck: pass\n";
    return 0;
}

int cmd_inspect(const std::string& ckpt_path) {
    auto data = load_checkpoint<float>(ckpt_path);
    auto cfg = parse_run_config(data.config_text);

    int64_t model_scalars = 0;
    int model_tensors = 0;
    for (const auto& t : data.tensors) {
        if (t.name.rfind("adam.", 0) == 0 || t.name == "concepts.anchors") continue;
        model_tensors += 1;
        model_scalars += static_cast<int64_t>(t.values.size());
    }
    std::cout << "checkpoint " << ckpt_path << "\n";
    std::cout << "epoch " << data.epoch << ", adam steps " << data.adam_t << "\n";
    std::cout << "parameters: " << model_scalars << " scalars in " << model_tensors
              << " tensors\n";

    const auto* log_tau = data.find("loss.log_tau");
    if (!log_tau || log_tau->values.empty())
        throw ValidationError("inspect: checkpoint has no loss.log_tau");
    std::cout << "tau " << std::exp(static_cast<double>(log_tau->values[0])) << "\n";

    const auto* protos = data.find("concepts.prototypes");
    if (!protos || protos->shape.size() != 2)
        throw ValidationError("inspect: checkpoint has no concepts.prototypes");
    int K = protos->shape[0], d = protos->shape[1];
    std::cout << "prototype norms:\n";
    for (int k = 0; k < K; ++k) {
        double n2 = 0.0;
        for (int j = 0; j < d; ++j) {
            double v = protos->values[static_cast<size_t>(k) * d + j];
            n2 += v * v;
        }
        std::string name = k < static_cast<int>(cfg.concept_classes.size())
                               ? cfg.concept_classes[static_cast<size_t>(k)]
                               : "class " + std::to_string(k);
        std::cout << "  " << name << ": " << std::sqrt(n2) << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"road damage vision-language trainer"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a procedural dataset");
    std::string gen_out;
    uint64_t gen_seed = 1;
    int gen_image = 64, gen_train = 2000, gen_val = 200, gen_test = 200;
    double gen_scale = 0.05;
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--seed", gen_seed, "dataset seed");
    gen->add_option("--image-size", gen_image, "square image side in px");
    gen->add_option("--scale", gen_scale, "meters per pixel");
    gen->add_option("--train", gen_train, "training split size");
    gen->add_option("--val", gen_val, "validation split size");
    gen->add_option("--test", gen_test, "test split size");

    // train
    auto* tr = app.add_subcommand("train", "train a model from a run configuration");
    ConfigArgs tr_args;
    add_config_flags(tr, tr_args);
    std::string tr_out = "roadclip.ckpt", tr_log;
    tr->add_option("--out", tr_out, "checkpoint output path");
    tr->add_option("--log", tr_log, "metric log path (default: stdout)");

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
    std::string ev_ckpt, ev_dataset, ev_split = "test", ev_out, ev_run, ev_hm_dir;
    int ev_hm = 4;
    ev->add_option("--checkpoint", ev_ckpt, "checkpoint path")->required();
    ev->add_option("--dataset", ev_dataset, "dataset directory")->required();
    ev->add_option("--split", ev_split, "split name");
    ev->add_option("--out", ev_out, "append the summary line to this file");
    ev->add_option("--run-id", ev_run, "summary key (default: checkpoint stem)");
    ev->add_option("--heatmap-dir", ev_hm_dir, "export attention heatmaps here");
    ev->add_option("--heatmaps", ev_hm, "how many heatmaps to export");

    // ablate
    auto* ab = app.add_subcommand("ablate", "train and compare a configuration grid");
    ConfigArgs ab_args;
    add_config_flags(ab, ab_args);
    std::string ab_strategies = "none,sinusoidal_absolute,learnable_absolute,relative,dape";
    std::string ab_combos = "itc,itc+concept,full";
    std::string ab_out = "ablation.csv", ab_table;
    ab->add_option("--strategies", ab_strategies, "comma list of positional strategies");
    ab->add_option("--combos", ab_combos, "comma list of loss combos");
    ab->add_option("--out", ab_out, "delimiter-separated output file");
    ab->add_option("--table", ab_table, "also write the aligned table here");

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient audit in 64-bit");
    ConfigArgs gc_args;
    add_config_flags(gc, gc_args);
    int gc_probes = 4;
    double gc_tol = 1e-4;
    gc->add_option("--probes", gc_probes, "probed indices per parameter tensor");
    gc->add_option("--tol", gc_tol, "max relative error tolerated");

    // inspect
    auto* in = app.add_subcommand("inspect", "print checkpoint facts");
    std::string in_ckpt;
    in->add_option("--checkpoint", in_ckpt, "checkpoint path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (gen->parsed())
            return cmd_gen_data(gen_out, gen_seed, gen_image, gen_scale, gen_train, gen_val,
                                gen_test);
        if (tr->parsed()) return cmd_train(resolve_config(tr, tr_args), tr_out, tr_log);
        if (ev->parsed())
            return cmd_eval(ev_ckpt, ev_dataset, ev_split, ev_out, ev_run, ev_hm_dir, ev_hm);
        if (ab->parsed())
            return cmd_ablate(resolve_config(ab, ab_args), ab_strategies, ab_combos, ab_out,
                              ab_table);
        if (gc->parsed()) return cmd_gradcheck(resolve_config(gc, gc_args), gc_probes, gc_tol);
        if (in->parsed()) return cmd_inspect(in_ckpt);
    } catch (const roadclip::ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const roadclip::NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const roadclip::IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
