#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "roadclip/adam.hpp"
#include "roadclip/checkpoint.hpp"
#include "roadclip/concepts.hpp"
#include "roadclip/config.hpp"
#include "roadclip/encoder.hpp"
#include "roadclip/errors.hpp"
#include "roadclip/eval.hpp"
#include "roadclip/losses.hpp"
#include "roadclip/rng.hpp"
#include "roadclip/synthbench.hpp"
#include "roadclip/tokenizer.hpp"

namespace roadclip {

// Run orchestration: deterministic model construction from a RunConfig, the
// epoch loop (seeded shuffle, total loss, Adam, prototype re-anchor,
// validation metrics), checkpoint conversion both ways, the end-to-end
// finite-difference gradient audit, and the ablation grid.

/// Words the concept classes and prompt template can contribute beyond the
/// caption grammar, so custom class lists tokenize without UNK collapse.
inline std::vector<std::string> concept_words(const RunConfig& cfg) {
    std::vector<std::string> words;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty()) words.push_back(cur);
        cur.clear();
    };
    auto scan = [&](const std::string& text) {
        for (char ch : text) {
            unsigned char c = static_cast<unsigned char>(ch);
            if (std::isalnum(c) || c == '.')
                cur.push_back(static_cast<char>(std::tolower(c)));
            else
                flush();
        }
        flush();
    };
    for (const auto& name : cfg.concept_classes) scan(name);
    scan(cfg.prompt_template);
    return words;
}

/// Everything a run owns.  Parameter order is construction order and stays
/// frozen for the life of the state: Adam moments and checkpoints are keyed
/// by it.
template <typename T>
struct TrainState {
    RunConfig cfg;  // encoder.vocab_size filled from the tokenizer
    Tokenizer tok;
    DualEncoder<T> model;
    ConceptBank<T> bank;
    Temperature<T> temperature;
    AdamState<T> adam;
    int64_t epoch = 0;

    std::vector<std::pair<std::string, Tensor<T>>> named_params() {
        auto out = model.named_params();
        bank.collect_params(out);
        temperature.collect_params(out);
        return out;
    }

    std::vector<Tensor<T>> param_vector() {
        std::vector<Tensor<T>> v;
        for (auto& [name, p] : named_params()) v.push_back(p);
        return v;
    }
};

template <typename T>
TrainState<T> init_train_state(const RunConfig& cfg) {
    cfg.validate();
    TrainState<T> st;
    st.cfg = cfg;
    st.tok = Tokenizer(concept_words(cfg));
    st.cfg.encoder.vocab_size = st.tok.vocab_size();
    st.model = DualEncoder<T>::create(st.cfg.encoder, parse_strategy(cfg.pos_strategy),
                                      cfg.pos_mlp_hidden, cfg.pos_energy_floor, cfg.seed);
    st.bank = ConceptBank<T>::init(cfg.concept_set(), st.model.text, st.tok,
                                   st.cfg.encoder.max_text_len);
    st.temperature = Temperature<T>::create(cfg.tau_init);
    st.temperature.tau_min = cfg.tau_min;
    st.temperature.tau_max = cfg.tau_max;
    st.adam = AdamState<T>(st.param_vector());
    return st;
}

template <typename T>
CheckpointData<T> checkpoint_from_state(TrainState<T>& st) {
    CheckpointData<T> data;
    data.epoch = st.epoch;
    data.adam_t = st.adam.t;
    data.config_text = serialize_run_config(st.cfg);
    auto named = st.named_params();
    for (auto& [name, p] : named) {
        auto v = p.values();
        data.tensors.push_back({name, p.shape(), std::vector<T>(v.begin(), v.end())});
    }
    int K = st.bank.concepts.size();
    int d = st.bank.prototypes.shape()[1];
    data.tensors.push_back({"concepts.anchors", {K, d}, st.bank.anchors});
    for (size_t i = 0; i < named.size(); ++i)
        data.tensors.push_back(
            {"adam.m." + named[i].first, named[i].second.shape(), st.adam.m[i]});
    for (size_t i = 0; i < named.size(); ++i)
        data.tensors.push_back(
            {"adam.v." + named[i].first, named[i].second.shape(), st.adam.v[i]});
    return data;
}

template <typename T>
void apply_checkpoint(TrainState<T>& st, const CheckpointData<T>& data,
                      const std::string& origin = "checkpoint") {
    st.epoch = data.epoch;
    st.adam.t = data.adam_t;
    auto named = st.named_params();
    auto fetch = [&](const std::string& name, size_t count) -> const NamedBuffer<T>& {
        const auto* b = data.find(name);
        if (!b) throw ValidationError("checkpoint: missing tensor '" + name + "' in " + origin);
        if (b->values.size() != count)
            throw ValidationError("checkpoint: tensor '" + name + "' holds " +
                                  std::to_string(b->values.size()) + " values, state needs " +
                                  std::to_string(count) + " in " + origin);
        return *b;
    };
    for (auto& [name, p] : named) {
        const auto& b = fetch(name, static_cast<size_t>(p.numel()));
        if (b.shape != p.shape())
            throw ValidationError("checkpoint: tensor '" + name + "' shape mismatch in " +
                                  origin);
        auto v = p.values();
        std::copy(b.values.begin(), b.values.end(), v.begin());
    }
    st.bank.anchors = fetch("concepts.anchors", st.bank.anchors.size()).values;
    for (size_t i = 0; i < named.size(); ++i) {
        st.adam.m[i] = fetch("adam.m." + named[i].first, st.adam.m[i].size()).values;
        st.adam.v[i] = fetch("adam.v." + named[i].first, st.adam.v[i].size()).values;
    }
}

/// Rebuild a runnable state from a checkpoint alone, via its config echo.
template <typename T>
TrainState<T> state_from_checkpoint(const CheckpointData<T>& data,
                                    const std::string& origin = "checkpoint") {
    auto st = init_train_state<T>(parse_run_config(data.config_text));
    apply_checkpoint(st, data, origin);
    return st;
}

struct EpochRow {
    int64_t epoch = 0;
    double itc = 0.0;
    double domain_align = 0.0;
    double pos_consist = 0.0;
    double total = 0.0;
    double zs = 0.0;
    double r1 = 0.0;
    double sla = 0.0;
};

inline std::string epoch_row_json(const EpochRow& r) {
    nlohmann::json j = {{"epoch", r.epoch},         {"itc", r.itc}, {"domain_align", r.domain_align},
                        {"pos_consist", r.pos_consist}, {"total", r.total}, {"zs", r.zs},
                        {"r1", r.r1},               {"sla", r.sla}};
    return j.dump();
}

/// Run cfg.epochs training epochs in place, returning one row per epoch and
/// appending each row to `log` as it completes.  Samples are consumed in a
/// seeded per-epoch shuffle; batches are consecutive full-size chunks, with
/// the trailing partial chunk kept only when the set is smaller than one
/// batch.  Aborts with a NumericError naming the term, epoch, and step the
/// moment any loss term goes non-finite.
template <typename T>
std::vector<EpochRow> train(TrainState<T>& st, const std::vector<Sample>& train_set,
                            const std::vector<Sample>& val_set, std::ostream* log = nullptr) {
    if (train_set.empty()) throw ValidationError("train: empty training set");
    const RunConfig& cfg = st.cfg;
    const size_t B = static_cast<size_t>(cfg.batch_size);
    const size_t N = train_set.size();
    const size_t steps = N >= B ? N / B : 1;

    std::vector<TokenSequence> tokens(N);
    for (size_t i = 0; i < N; ++i)
        tokens[i] = st.tok.tokenize(train_set[i].caption, cfg.encoder.max_text_len);

    auto params = st.param_vector();
    std::vector<EpochRow> rows;
    for (int e = 0; e < cfg.epochs; ++e) {
        const int64_t epoch_no = st.epoch + 1;
        std::vector<size_t> order(N);
        std::iota(order.begin(), order.end(), size_t{0});
        Rng shuffle_rng(cfg.seed, "shuffle/epoch" + std::to_string(epoch_no));
        shuffle_rng.shuffle(order);
        Rng perturb_rng(cfg.seed, "perturb/epoch" + std::to_string(epoch_no));

        double sum_itc = 0.0, sum_da = 0.0, sum_pc = 0.0, sum_total = 0.0;
        for (size_t s = 0; s < steps; ++s) {
            std::vector<BatchItem> batch;
            size_t lo = s * B, hi = std::min(lo + B, N);
            batch.reserve(hi - lo);
            for (size_t i = lo; i < hi; ++i) {
                size_t idx = order[i];
                batch.push_back({train_set[idx].image, tokens[idx], train_set[idx].label});
            }
            for (auto& p : params) p.zero_grad();
            auto report = total_loss(batch, st.model, st.bank, cfg.weights, st.temperature,
                                     cfg.perturb, perturb_rng);
            double tot = static_cast<double>(report.total.item());
            auto guard = [&](double v, const char* term) {
                if (!std::isfinite(v))
                    throw NumericError("train: non-finite " + std::string(term) + " at epoch " +
                                       std::to_string(epoch_no) + " step " +
                                       std::to_string(s + 1));
            };
            guard(report.itc, "itc");
            guard(report.domain_align, "domain_align");
            guard(report.pos_consist, "pos_consist");
            guard(tot, "total");
            backward(report.total);
            adam_step(params, st.adam, cfg.optim);
            st.temperature.clamp();
            sum_itc += report.itc;
            sum_da += report.domain_align;
            sum_pc += report.pos_consist;
            sum_total += tot;
        }
        st.bank.reanchor(st.model.text, st.tok, cfg.encoder.max_text_len, cfg.reanchor_lambda);
        st.epoch = epoch_no;

        EpochRow row;
        row.epoch = epoch_no;
        row.itc = sum_itc / static_cast<double>(steps);
        row.domain_align = sum_da / static_cast<double>(steps);
        row.pos_consist = sum_pc / static_cast<double>(steps);
        row.total = sum_total / static_cast<double>(steps);
        if (!val_set.empty()) {
            row.zs = zero_shot_classify(val_set, st.bank.concepts, st.model, st.tok).accuracy;
            row.r1 = retrieve(st.model, st.tok, val_set, {1}).recall_at.at(1);
            row.sla = sla(val_set, st.model, st.tok, cfg.attn_quantile, cfg.iou_pass).sla;
        }
        rows.push_back(row);
        if (log) {
            *log << epoch_row_json(row) << "\n";
            log->flush();
        }
    }
    return rows;
}

/// Deterministic in-memory batch for the gradient audit: one line-like and
/// one blob-like defect rendered at the configured image size.
inline std::vector<Sample> gradcheck_batch(const RunConfig& cfg) {
    std::vector<Sample> out;
    const int classes[2] = {kLongitudinalCrack, kPothole};
    for (int i = 0; i < 2; ++i) {
        Rng spec_rng(cfg.seed, "gradcheck/spec/" + std::to_string(i));
        auto spec = sample_spec(classes[i], cfg.encoder.image_size, 0.05, spec_rng);
        auto s = render_sample(spec, cfg.encoder.image_size,
                               derive_seed(cfg.seed, "gradcheck/render/" + std::to_string(i)));
        s.id = "gradcheck/" + std::to_string(i);
        out.push_back(std::move(s));
    }
    return out;
}

struct GradProbe {
    std::string param;
    int64_t index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_err = 0.0;
};

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_param;
    int64_t worst_index = 0;
    int probes = 0;
    std::vector<GradProbe> worst;  // up to 8, sorted by error

    bool pass(double tol = 1e-4) const { return probes > 0 && max_rel_err < tol; }
};

/// End-to-end 64-bit finite-difference audit of the full objective on a
/// 2-sample batch: central differences at a handful of seeded indices per
/// parameter tensor, against one analytic backward pass.  rel_err is
/// |a - n| / max(|a|, |n|, 1e-5); the floor keeps finite-difference noise on
/// dead weights from reading as disagreement.
inline GradCheckReport gradcheck_run(const RunConfig& cfg, int probes_per_param = 4) {
    if (probes_per_param < 1)
        throw ValidationError("gradcheck: probes_per_param must be at least 1");
    auto st = init_train_state<double>(cfg);
    auto samples = gradcheck_batch(st.cfg);
    std::vector<BatchItem> batch;
    for (const auto& s : samples)
        batch.push_back({s.image, st.tok.tokenize(s.caption, st.cfg.encoder.max_text_len),
                         s.label});

    auto eval_loss = [&]() {
        NoGradGuard ng;
        Rng prng(cfg.seed, "gradcheck/perturb");
        auto rep = total_loss(batch, st.model, st.bank, st.cfg.weights, st.temperature,
                              st.cfg.perturb, prng);
        return static_cast<double>(rep.total.item());
    };

    auto named = st.named_params();
    for (auto& [name, p] : named) p.zero_grad();
    {
        Rng prng(cfg.seed, "gradcheck/perturb");
        auto rep = total_loss(batch, st.model, st.bank, st.cfg.weights, st.temperature,
                              st.cfg.perturb, prng);
        backward(rep.total);
    }

    GradCheckReport report;
    for (auto& [name, p] : named) {
        auto grads = p.grad();
        auto vals = p.values();
        Rng probe_rng(cfg.seed, "gradcheck/probe/" + name);
        int64_t n = p.numel();
        int probes = static_cast<int>(std::min<int64_t>(probes_per_param, n));
        for (int q = 0; q < probes; ++q) {
            int64_t idx = probes == static_cast<int>(n) ? q : probe_rng.uniform_int(n);
            double w0 = vals[static_cast<size_t>(idx)];
            double h = 1e-5 * std::max(1.0, std::abs(w0));
            vals[static_cast<size_t>(idx)] = w0 + h;
            double lp = eval_loss();
            vals[static_cast<size_t>(idx)] = w0 - h;
            double lm = eval_loss();
            vals[static_cast<size_t>(idx)] = w0;
            double fd = (lp - lm) / (2.0 * h);
            double g = grads[static_cast<size_t>(idx)];
            double rel = std::abs(g - fd) / std::max({std::abs(g), std::abs(fd), 1e-5});
            report.probes += 1;
            GradProbe probe{name, idx, g, fd, rel};
            report.worst.push_back(probe);
            std::sort(report.worst.begin(), report.worst.end(),
                      [](const GradProbe& a, const GradProbe& b) { return a.rel_err > b.rel_err; });
            if (report.worst.size() > 8) report.worst.pop_back();
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_param = name;
                report.worst_index = idx;
            }
        }
    }
    return report;
}

struct AblationRow {
    std::string name;
    double zs = 0.0;
    double r1 = 0.0;
    double r5 = 0.0;
    double sla = 0.0;
};

struct LossCombo {
    std::string name;
    double lambda_concept = 0.0;
    double lambda_pos = 0.0;
};

inline std::vector<std::string> all_strategies() {
    return {"none", "sinusoidal_absolute", "learnable_absolute", "relative", "dape"};
}

inline std::vector<LossCombo> default_loss_combos() {
    return {{"itc", 0.0, 0.0}, {"itc+concept", 0.5, 0.0}, {"full", 0.5, 0.1}};
}

/// Train one fresh model per (strategy, loss combo) cell of the grid and
/// evaluate it on the held-out test split.  Every cell starts from the same
/// base config and seed, so rows differ only in the axis under study.
template <typename T>
std::vector<AblationRow> run_ablation(const RunConfig& base,
                                      const std::vector<std::string>& strategies,
                                      const std::vector<LossCombo>& combos,
                                      const std::vector<Sample>& train_set,
                                      const std::vector<Sample>& test_set,
                                      std::ostream* progress = nullptr) {
    if (strategies.empty() || combos.empty())
        throw ValidationError("run_ablation: empty strategy or loss-combo axis");
    if (test_set.empty()) throw ValidationError("run_ablation: empty test set");
    std::vector<AblationRow> rows;
    for (const auto& strategy : strategies) {
        for (const auto& combo : combos) {
            RunConfig cfg = base;
            cfg.pos_strategy = strategy;
            cfg.weights.lambda_concept = combo.lambda_concept;
            cfg.weights.lambda_pos = combo.lambda_pos;
            auto st = init_train_state<T>(cfg);
            train(st, train_set, {}, nullptr);
            AblationRow row;
            row.name = strategy + "/" + combo.name;
            row.zs = zero_shot_classify(test_set, st.bank.concepts, st.model, st.tok).accuracy;
            auto ret = retrieve(st.model, st.tok, test_set, {1, 5});
            row.r1 = ret.recall_at.at(1);
            row.r5 = ret.recall_at.at(5);
            row.sla = sla(test_set, st.model, st.tok, cfg.attn_quantile, cfg.iou_pass).sla;
            rows.push_back(row);
            if (progress) {
                *progress << "ablation " << row.name << " done\n";
                progress->flush();
            }
        }
    }
    return rows;
}

/// Human-readable aligned table, one row per configuration.
inline std::string format_ablation_table(const std::vector<AblationRow>& rows) {
    size_t w = std::string("name").size();
    for (const auto& r : rows) w = std::max(w, r.name.size());
    std::ostringstream out;
    out << std::left << std::setw(static_cast<int>(w)) << "name" << std::right
        << std::setw(10) << "zs_acc" << std::setw(13) << "recall_at_1" << std::setw(13)
        << "recall_at_5" << std::setw(10) << "sla" << "\n";
    out << std::fixed << std::setprecision(4);
    for (const auto& r : rows)
        out << std::left << std::setw(static_cast<int>(w)) << r.name << std::right
            << std::setw(10) << r.zs << std::setw(13) << r.r1 << std::setw(13) << r.r5
            << std::setw(10) << r.sla << "\n";
    return out.str();
}

/// Delimiter-separated form with a header row.
inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
    std::ostringstream out;
    out << "name,zs_acc,recall_at_1,recall_at_5,sla\n";
    out << std::fixed << std::setprecision(6);
    for (const auto& r : rows)
        out << r.name << "," << r.zs << "," << r.r1 << "," << r.r5 << "," << r.sla << "\n";
    return out.str();
}

}  // namespace roadclip
