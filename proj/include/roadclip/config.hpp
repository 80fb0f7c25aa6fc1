#pragma once

#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "roadclip/adam.hpp"
#include "roadclip/concepts.hpp"
#include "roadclip/dape.hpp"
#include "roadclip/encoder.hpp"
#include "roadclip/errors.hpp"
#include "roadclip/losses.hpp"
#include "roadclip/synthbench.hpp"

namespace roadclip {

// Run configuration: one human-editable INI-style text file covering every
// knob of a run.  Parsing is strict: unknown sections or keys are rejected by
// name and every value is checked before use.  serialize/parse round-trips
// exactly, so a checkpoint can echo the precise configuration it was trained
// under.  '#' starts a comment anywhere on a line, which means values
// themselves cannot contain '#'.

struct RunConfig {
    // [encoder]; vocab_size is derived from the tokenizer, never from file
    EncoderConfig encoder;
    // [pos]
    std::string pos_strategy = "dape";
    int pos_mlp_hidden = 32;
    double pos_energy_floor = 1e-3;
    // [concepts]
    std::vector<std::string> concept_classes = damage_class_names();
    std::string prompt_template = "a photo of a {} on a road";
    double reanchor_lambda = 0.1;
    // [loss]
    LossWeights weights;
    double tau_init = 0.07;
    double tau_min = 0.01;
    double tau_max = 1.0;
    // [perturb]
    PerturbationSpec perturb;
    // [optim]
    AdamHyper optim{.lr = 3e-4};  // contrastive towers train stably at 3e-4; 1e-3 collapses text
    // [train]
    int batch_size = 32;  // smaller batches buy steps within the 20-epoch recipe
    int epochs = 20;
    uint64_t seed = 1;
    std::string dataset;  // may stay empty for commands that need no data
    // [eval]
    double attn_quantile = 0.8;
    double iou_pass = 0.5;
    std::vector<int> recall_ks = {1, 5, 10};

    ConceptSet concept_set() const {
        ConceptSet set;
        set.classes = concept_classes;
        set.prompt_template = prompt_template;
        return set;
    }

    void validate() const {
        auto e = encoder;
        if (e.vocab_size <= 0) e.vocab_size = 1;  // tokenizer fills the real value later
        e.validate();
        parse_strategy(pos_strategy);
        if (pos_mlp_hidden <= 0)
            throw ValidationError("config: [pos] mlp_hidden must be positive");
        if (!(pos_energy_floor >= 0.0) || !std::isfinite(pos_energy_floor))
            throw ValidationError("config: [pos] energy_floor must be finite and non-negative");
        concept_set().validate();
        if (!(reanchor_lambda >= 0.0 && reanchor_lambda <= 1.0))
            throw ValidationError("config: [concepts] reanchor_lambda must lie in [0, 1]");
        weights.validate();
        if (!(tau_init > 0.0) || !(tau_min > 0.0) || !(tau_max > 0.0))
            throw ValidationError("config: [loss] tau values must be positive");
        if (tau_min > tau_max || tau_init < tau_min || tau_init > tau_max)
            throw ValidationError("config: [loss] needs tau_min <= tau_init <= tau_max");
        perturb.validate();
        if (!(optim.lr > 0.0) || !std::isfinite(optim.lr))
            throw ValidationError("config: [optim] lr must be positive and finite");
        if (!(optim.beta1 >= 0.0 && optim.beta1 < 1.0) ||
            !(optim.beta2 >= 0.0 && optim.beta2 < 1.0))
            throw ValidationError("config: [optim] betas must lie in [0, 1)");
        if (!(optim.eps > 0.0) || !std::isfinite(optim.eps))
            throw ValidationError("config: [optim] eps must be positive and finite");
        if (batch_size < 1)
            throw ValidationError("config: [train] batch_size must be at least 1, got " +
                                  std::to_string(batch_size));
        if (epochs < 0)
            throw ValidationError("config: [train] epochs must be non-negative, got " +
                                  std::to_string(epochs));
        if (!(attn_quantile >= 0.0 && attn_quantile < 1.0))
            throw ValidationError("config: [eval] attn_quantile must lie in [0, 1)");
        if (!(iou_pass >= 0.0 && iou_pass <= 1.0))
            throw ValidationError("config: [eval] iou_pass must lie in [0, 1]");
        if (recall_ks.empty())
            throw ValidationError("config: [eval] recall_ks must not be empty");
        for (int k : recall_ks)
            if (k < 1)
                throw ValidationError("config: [eval] recall_ks entries must be at least 1, got " +
                                      std::to_string(k));
    }
};

namespace configdetail {

inline std::string trim(std::string_view s) {
    size_t b = 0, e = s.size();
    while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r')) ++b;
    while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r')) --e;
    return std::string(s.substr(b, e - b));
}

inline std::string spot(const std::string& section, const std::string& key) {
    return "[" + section + "] " + key;
}

inline long long parse_ll(const std::string& section, const std::string& key,
                          const std::string& raw) {
    long long v = 0;
    auto [p, ec] = std::from_chars(raw.data(), raw.data() + raw.size(), v);
    if (ec != std::errc{} || p != raw.data() + raw.size())
        throw ValidationError("config: " + spot(section, key) + ": '" + raw +
                              "' is not an integer");
    return v;
}

inline int parse_int(const std::string& section, const std::string& key, const std::string& raw) {
    long long v = parse_ll(section, key, raw);
    if (v < INT32_MIN || v > INT32_MAX)
        throw ValidationError("config: " + spot(section, key) + ": '" + raw + "' out of range");
    return static_cast<int>(v);
}

inline uint64_t parse_u64(const std::string& section, const std::string& key,
                          const std::string& raw) {
    uint64_t v = 0;
    auto [p, ec] = std::from_chars(raw.data(), raw.data() + raw.size(), v);
    if (ec != std::errc{} || p != raw.data() + raw.size())
        throw ValidationError("config: " + spot(section, key) + ": '" + raw +
                              "' is not a non-negative integer");
    return v;
}

inline double parse_double(const std::string& section, const std::string& key,
                           const std::string& raw) {
    if (raw.empty())
        throw ValidationError("config: " + spot(section, key) + ": empty value");
    char* end = nullptr;
    double v = std::strtod(raw.c_str(), &end);
    if (end != raw.c_str() + raw.size())
        throw ValidationError("config: " + spot(section, key) + ": '" + raw +
                              "' is not a number");
    return v;
}

inline std::vector<std::string> split_trimmed(const std::string& raw, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::stringstream ss(raw);
    while (std::getline(ss, cur, sep)) out.push_back(trim(cur));
    if (!raw.empty() && raw.back() == sep) out.push_back("");
    return out;
}

/// Shortest decimal text that parses back to exactly the same double.
inline std::string format_double(double v) {
    char buf[40];
    for (int prec = 1; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof buf, "%.*g", prec, v);
        if (std::strtod(buf, nullptr) == v) break;
    }
    return buf;
}

}  // namespace configdetail

/// Set one configuration value by section and key; the single dispatch point
/// shared by the file parser and CLI overrides, so both reject the same
/// unknown names with the same messages.
inline void apply_config_kv(RunConfig& cfg, const std::string& section, const std::string& key,
                            const std::string& value) {
    using namespace configdetail;
    auto unknown_key = [&]() -> ValidationError {
        return ValidationError("config: unknown key '" + key + "' in section [" + section + "]");
    };
    if (section == "encoder") {
        if (key == "embed_dim") cfg.encoder.embed_dim = parse_int(section, key, value);
        else if (key == "layers") cfg.encoder.layers = parse_int(section, key, value);
        else if (key == "heads") cfg.encoder.heads = parse_int(section, key, value);
        else if (key == "mlp_ratio") cfg.encoder.mlp_ratio = parse_int(section, key, value);
        else if (key == "patch_size") cfg.encoder.patch_size = parse_int(section, key, value);
        else if (key == "image_size") cfg.encoder.image_size = parse_int(section, key, value);
        else if (key == "max_text_len") cfg.encoder.max_text_len = parse_int(section, key, value);
        else throw unknown_key();
    } else if (section == "pos") {
        if (key == "strategy") cfg.pos_strategy = value;
        else if (key == "mlp_hidden") cfg.pos_mlp_hidden = parse_int(section, key, value);
        else if (key == "energy_floor") cfg.pos_energy_floor = parse_double(section, key, value);
        else throw unknown_key();
    } else if (section == "concepts") {
        if (key == "classes") {
            auto parts = split_trimmed(value, ';');
            for (const auto& p : parts)
                if (p.empty())
                    throw ValidationError("config: " + spot(section, key) +
                                          ": empty class name in list");
            cfg.concept_classes = parts;
        } else if (key == "prompt_template") cfg.prompt_template = value;
        else if (key == "reanchor_lambda") cfg.reanchor_lambda = parse_double(section, key, value);
        else throw unknown_key();
    } else if (section == "loss") {
        if (key == "lambda_concept") cfg.weights.lambda_concept = parse_double(section, key, value);
        else if (key == "lambda_pos") cfg.weights.lambda_pos = parse_double(section, key, value);
        else if (key == "tau_init") cfg.tau_init = parse_double(section, key, value);
        else if (key == "tau_min") cfg.tau_min = parse_double(section, key, value);
        else if (key == "tau_max") cfg.tau_max = parse_double(section, key, value);
        else throw unknown_key();
    } else if (section == "perturb") {
        if (key == "max_translate_px")
            cfg.perturb.max_translate_px = parse_int(section, key, value);
        else if (key == "max_rotate_deg")
            cfg.perturb.max_rotate_deg = parse_double(section, key, value);
        else throw unknown_key();
    } else if (section == "optim") {
        if (key == "lr") cfg.optim.lr = parse_double(section, key, value);
        else if (key == "beta1") cfg.optim.beta1 = parse_double(section, key, value);
        else if (key == "beta2") cfg.optim.beta2 = parse_double(section, key, value);
        else if (key == "eps") cfg.optim.eps = parse_double(section, key, value);
        else throw unknown_key();
    } else if (section == "train") {
        if (key == "batch_size") cfg.batch_size = parse_int(section, key, value);
        else if (key == "epochs") cfg.epochs = parse_int(section, key, value);
        else if (key == "seed") cfg.seed = parse_u64(section, key, value);
        else if (key == "dataset") cfg.dataset = value;
        else throw unknown_key();
    } else if (section == "eval") {
        if (key == "attn_quantile") cfg.attn_quantile = parse_double(section, key, value);
        else if (key == "iou_pass") cfg.iou_pass = parse_double(section, key, value);
        else if (key == "recall_ks") {
            auto parts = split_trimmed(value, ',');
            std::vector<int> ks;
            for (const auto& p : parts) ks.push_back(parse_int(section, key, p));
            cfg.recall_ks = ks;
        } else throw unknown_key();
    } else {
        throw ValidationError("config: unknown section [" + section + "]");
    }
}

/// Apply a CLI-style "section.key=value" override.
inline void apply_config_override(RunConfig& cfg, const std::string& assignment) {
    auto eq = assignment.find('=');
    if (eq == std::string::npos)
        throw ValidationError("config: override '" + assignment + "' is not section.key=value");
    std::string path = configdetail::trim(assignment.substr(0, eq));
    std::string value = configdetail::trim(assignment.substr(eq + 1));
    auto dot = path.find('.');
    if (dot == std::string::npos || dot == 0 || dot + 1 == path.size())
        throw ValidationError("config: override '" + assignment + "' is not section.key=value");
    apply_config_kv(cfg, path.substr(0, dot), path.substr(dot + 1), value);
}

/// Parse INI text into a RunConfig on top of the defaults.  Syntax and
/// per-value checks only; call validate() before using the result.
inline RunConfig parse_run_config(const std::string& text) {
    using namespace configdetail;
    RunConfig cfg;
    std::string section;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        std::string body = trim(line);
        if (body.empty()) continue;
        if (body.front() == '[') {
            if (body.back() != ']')
                throw ValidationError("config: line " + std::to_string(lineno) +
                                      ": unterminated section header '" + body + "'");
            section = trim(std::string_view(body).substr(1, body.size() - 2));
            if (section.empty())
                throw ValidationError("config: line " + std::to_string(lineno) +
                                      ": empty section name");
            continue;
        }
        auto eq = body.find('=');
        if (eq == std::string::npos)
            throw ValidationError("config: line " + std::to_string(lineno) +
                                  ": expected key = value, got '" + body + "'");
        std::string key = trim(std::string_view(body).substr(0, eq));
        std::string value = trim(std::string_view(body).substr(eq + 1));
        if (key.empty())
            throw ValidationError("config: line " + std::to_string(lineno) + ": empty key");
        if (section.empty())
            throw ValidationError("config: line " + std::to_string(lineno) + ": key '" + key +
                                  "' appears before any section");
        apply_config_kv(cfg, section, key, value);
    }
    return cfg;
}

/// Canonical text form: fixed section and key order, shortest exact floats.
/// parse_run_config(serialize_run_config(c)) reproduces c.
inline std::string serialize_run_config(const RunConfig& cfg) {
    using configdetail::format_double;
    std::ostringstream out;
    out << "[encoder]\n";
    out << "embed_dim = " << cfg.encoder.embed_dim << "\n";
    out << "layers = " << cfg.encoder.layers << "\n";
    out << "heads = " << cfg.encoder.heads << "\n";
    out << "mlp_ratio = " << cfg.encoder.mlp_ratio << "\n";
    out << "patch_size = " << cfg.encoder.patch_size << "\n";
    out << "image_size = " << cfg.encoder.image_size << "\n";
    out << "max_text_len = " << cfg.encoder.max_text_len << "\n";
    out << "\n[pos]\n";
    out << "strategy = " << cfg.pos_strategy << "\n";
    out << "mlp_hidden = " << cfg.pos_mlp_hidden << "\n";
    out << "energy_floor = " << format_double(cfg.pos_energy_floor) << "\n";
    out << "\n[concepts]\n";
    out << "classes = ";
    for (size_t i = 0; i < cfg.concept_classes.size(); ++i) {
        if (i) out << "; ";
        out << cfg.concept_classes[i];
    }
    out << "\n";
    out << "prompt_template = " << cfg.prompt_template << "\n";
    out << "reanchor_lambda = " << format_double(cfg.reanchor_lambda) << "\n";
    out << "\n[loss]\n";
    out << "lambda_concept = " << format_double(cfg.weights.lambda_concept) << "\n";
    out << "lambda_pos = " << format_double(cfg.weights.lambda_pos) << "\n";
    out << "tau_init = " << format_double(cfg.tau_init) << "\n";
    out << "tau_min = " << format_double(cfg.tau_min) << "\n";
    out << "tau_max = " << format_double(cfg.tau_max) << "\n";
    out << "\n[perturb]\n";
    out << "max_translate_px = " << cfg.perturb.max_translate_px << "\n";
    out << "max_rotate_deg = " << format_double(cfg.perturb.max_rotate_deg) << "\n";
    out << "\n[optim]\n";
    out << "lr = " << format_double(cfg.optim.lr) << "\n";
    out << "beta1 = " << format_double(cfg.optim.beta1) << "\n";
    out << "beta2 = " << format_double(cfg.optim.beta2) << "\n";
    out << "eps = " << format_double(cfg.optim.eps) << "\n";
    out << "\n[train]\n";
    out << "batch_size = " << cfg.batch_size << "\n";
    out << "epochs = " << cfg.epochs << "\n";
    out << "seed = " << cfg.seed << "\n";
    out << "dataset = " << cfg.dataset << "\n";
    out << "\n[eval]\n";
    out << "attn_quantile = " << format_double(cfg.attn_quantile) << "\n";
    out << "iou_pass = " << format_double(cfg.iou_pass) << "\n";
    out << "recall_ks = ";
    for (size_t i = 0; i < cfg.recall_ks.size(); ++i) {
        if (i) out << ", ";
        out << cfg.recall_ks[i];
    }
    out << "\n";
    return out.str();
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("load_run_config: cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_run_config(ss.str());
}

}  // namespace roadclip
