#pragma once

// Run configuration: flat `key = value` text files. Unknown keys are
// rejected, missing keys take the documented defaults, and the fully
// resolved configuration can be echoed back out and re-parsed to an equal
// config.

#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "rcp/errors.hpp"

namespace rcp {

enum class PrunerKind { learned, topk };

struct RunConfig {
    std::uint64_t seed = 1;

    // backbone
    std::size_t n_layers = 8;
    std::size_t d_model = 32;
    std::size_t n_heads = 4;
    std::size_t d_ff = 64;
    std::size_t vocab_size = 24;
    std::size_t max_len = 96;

    // layout
    std::size_t n_system = 2;
    std::size_t n_vision = 64;
    std::size_t n_question = 8;
    std::size_t n_answer = 2;

    // synthetic task
    std::size_t task_n_classes = 4;
    std::size_t task_n_regions = 5;
    double task_noise_std = 0.3;
    std::size_t task_filler_max = 2;

    // pruner
    std::vector<std::size_t> pruner_placements = {1, 4, 6};
    std::size_t pruner_n_queries = 16;
    std::size_t pruner_proj_dim = 16;  // d_p, defaults to d_model / 2
    double pruner_query_dropout = 0.2;
    double pruner_bias_init = 2.0;
    PrunerKind pruner_kind = PrunerKind::learned;

    // repair adapter
    bool adapter_enabled = true;
    std::vector<std::size_t> adapter_placements = {6, 7};
    std::size_t adapter_bottleneck_dim = 8;  // d_b, defaults to d_model / 4

    // losses
    double lambda_task = 1.5;
    double lambda_repair = 40.0;
    double lambda_sparse = 200.0;
    bool repair_loss_enabled = true;
    bool repair_mean_only = false;

    // schedules
    double tau_start = 1.5;
    double tau_end = 0.2;
    double target_retention = 0.33;  // r*
    double rstar_warmup_frac = 0.3;

    // plug-in training
    double train_lr = 5e-5;
    double train_lr_min_factor = 0.1;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t train_examples = 10000;
    std::size_t train_batch_size = 24;

    // backbone pretraining
    std::size_t pretrain_steps = 2000;
    double pretrain_lr = 3e-3;
    std::size_t pretrain_batch_size = 24;

    // evaluation
    std::size_t eval_examples = 1000;

    std::size_t seq_len() const { return n_system + n_vision + n_question + n_answer; }
    std::size_t d_patch() const { return task_n_classes + task_n_regions + 4; }
    std::size_t vocab_answer_base() const { return 8 + task_n_regions; }
    std::size_t required_vocab() const { return 8 + task_n_regions + task_n_classes; }

    void validate() const;
};

namespace detail_cfg {

inline std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

inline std::uint64_t to_u64(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const unsigned long long x = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (...) {
        throw ConfigError("config key '" + key + "': expected unsigned integer, got '" + v + "'");
    }
}

inline double to_double(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (...) {
        throw ConfigError("config key '" + key + "': expected number, got '" + v + "'");
    }
}

inline bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

inline std::vector<std::size_t> to_index_list(const std::string& key, const std::string& v) {
    std::vector<std::size_t> out;
    std::string item;
    std::istringstream is(v);
    while (std::getline(is, item, ',')) {
        item = trim(item);
        if (item.empty()) continue;
        out.push_back(static_cast<std::size_t>(to_u64(key, item)));
    }
    return out;
}

inline std::string fmt_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

inline std::string fmt_list(const std::vector<std::size_t>& v) {
    std::ostringstream os;
    for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
    return os.str();
}

}  // namespace detail_cfg

inline void RunConfig::validate() const {
    if (d_model % n_heads != 0)
        throw ConfigError("backbone.d_model must be divisible by backbone.n_heads");
    if (n_layers == 0) throw ConfigError("backbone.n_layers must be positive");
    if (max_len < seq_len())
        throw ConfigError("backbone.max_len smaller than the layout sequence length " +
                          std::to_string(seq_len()));
    if (vocab_size < required_vocab())
        throw ConfigError("backbone.vocab_size must be at least " +
                          std::to_string(required_vocab()) + " for task.n_classes");
    if (n_vision == 0) throw ConfigError("layout.n_vision must be positive");
    if (n_question < 3) throw ConfigError("layout.n_question must be at least 3");
    if (n_answer < 2) throw ConfigError("layout.n_answer must be at least 2");
    if (2 * task_n_regions > n_vision)
        throw ConfigError("2 * task.n_regions exceeds layout.n_vision");
    if (task_n_regions == 0) throw ConfigError("task.n_regions must be positive");
    if (3 + task_filler_max > n_question)
        throw ConfigError("task.filler_max leaves no room in layout.n_question");
    if (task_n_classes < 2) throw ConfigError("task.n_classes must be at least 2");

    std::size_t prev = 0;
    for (std::size_t i = 0; i < pruner_placements.size(); ++i) {
        const std::size_t p = pruner_placements[i];
        if (p < 1 || p >= n_layers)
            throw ConfigError("pruner.placements: layer " + std::to_string(p) +
                              " outside [1, n_layers-1] (a pruner needs a preceding "
                              "attention layer)");
        if (i > 0 && p <= prev)
            throw ConfigError("pruner.placements must be strictly increasing");
        prev = p;
    }
    prev = 0;
    for (std::size_t i = 0; i < adapter_placements.size(); ++i) {
        const std::size_t p = adapter_placements[i];
        if (p >= n_layers)
            throw ConfigError("adapter.placements: post-layer index " + std::to_string(p) +
                              " outside [0, n_layers-1]");
        if (i > 0 && p <= prev)
            throw ConfigError("adapter.placements must be strictly increasing");
        prev = p;
    }
    if (adapter_enabled && !adapter_placements.empty()) {
        if (pruner_placements.empty())
            throw ConfigError("adapter.placements set but pruner.placements is empty "
                              "(repair without pruning)");
        if (adapter_placements.front() < pruner_placements.front())
            throw ConfigError("adapter.placements: first adapter precedes the first pruner");
    }
    if (pruner_n_queries == 0) throw ConfigError("pruner.n_queries must be positive");
    if (pruner_proj_dim == 0) throw ConfigError("pruner.proj_dim must be positive");
    if (pruner_query_dropout < 0.0 || pruner_query_dropout >= 1.0)
        throw ConfigError("pruner.query_dropout must lie in [0, 1)");
    if (adapter_bottleneck_dim == 0) throw ConfigError("adapter.bottleneck_dim must be positive");
    if (lambda_task < 0.0 || lambda_repair < 0.0 || lambda_sparse < 0.0)
        throw ConfigError("loss weights must be non-negative");
    if (tau_start <= 0.0 || tau_end <= 0.0)
        throw ConfigError("schedule.tau endpoints must be positive");
    if (target_retention < 0.0 || target_retention > 1.0)
        throw ConfigError("schedule.target_retention must lie in [0, 1]");
    if (rstar_warmup_frac < 0.0 || rstar_warmup_frac > 1.0)
        throw ConfigError("schedule.rstar_warmup_frac must lie in [0, 1]");
    if (train_batch_size == 0 || pretrain_batch_size == 0)
        throw ConfigError("batch sizes must be positive");
    if (train_examples == 0) throw ConfigError("train.examples must be positive");
    if (train_lr < 0.0 || pretrain_lr < 0.0) throw ConfigError("learning rates must be non-negative");
    if (eval_examples == 0) throw ConfigError("eval.examples must be positive");
}

inline void apply_config_entry(RunConfig& c, const std::string& key, const std::string& value) {
    using namespace detail_cfg;
    if (key == "seed") c.seed = to_u64(key, value);
    else if (key == "backbone.n_layers") c.n_layers = to_u64(key, value);
    else if (key == "backbone.d_model") c.d_model = to_u64(key, value);
    else if (key == "backbone.n_heads") c.n_heads = to_u64(key, value);
    else if (key == "backbone.d_ff") c.d_ff = to_u64(key, value);
    else if (key == "backbone.vocab_size") c.vocab_size = to_u64(key, value);
    else if (key == "backbone.max_len") c.max_len = to_u64(key, value);
    else if (key == "layout.n_system") c.n_system = to_u64(key, value);
    else if (key == "layout.n_vision") c.n_vision = to_u64(key, value);
    else if (key == "layout.n_question") c.n_question = to_u64(key, value);
    else if (key == "layout.n_answer") c.n_answer = to_u64(key, value);
    else if (key == "task.n_classes") c.task_n_classes = to_u64(key, value);
    else if (key == "task.n_regions") c.task_n_regions = to_u64(key, value);
    else if (key == "task.noise_std") c.task_noise_std = to_double(key, value);
    else if (key == "task.filler_max") c.task_filler_max = to_u64(key, value);
    else if (key == "pruner.placements") c.pruner_placements = to_index_list(key, value);
    else if (key == "pruner.n_queries") c.pruner_n_queries = to_u64(key, value);
    else if (key == "pruner.proj_dim") c.pruner_proj_dim = to_u64(key, value);
    else if (key == "pruner.query_dropout") c.pruner_query_dropout = to_double(key, value);
    else if (key == "pruner.bias_init") c.pruner_bias_init = to_double(key, value);
    else if (key == "pruner.kind") {
        if (value == "learned") c.pruner_kind = PrunerKind::learned;
        else if (value == "topk") c.pruner_kind = PrunerKind::topk;
        else throw ConfigError("pruner.kind must be 'learned' or 'topk', got '" + value + "'");
    }
    else if (key == "adapter.enabled") c.adapter_enabled = to_bool(key, value);
    else if (key == "adapter.placements") c.adapter_placements = to_index_list(key, value);
    else if (key == "adapter.bottleneck_dim") c.adapter_bottleneck_dim = to_u64(key, value);
    else if (key == "loss.lambda_task") c.lambda_task = to_double(key, value);
    else if (key == "loss.lambda_repair") c.lambda_repair = to_double(key, value);
    else if (key == "loss.lambda_sparse") c.lambda_sparse = to_double(key, value);
    else if (key == "loss.repair_enabled") c.repair_loss_enabled = to_bool(key, value);
    else if (key == "loss.repair_mean_only") c.repair_mean_only = to_bool(key, value);
    else if (key == "schedule.tau_start") c.tau_start = to_double(key, value);
    else if (key == "schedule.tau_end") c.tau_end = to_double(key, value);
    else if (key == "schedule.target_retention") c.target_retention = to_double(key, value);
    else if (key == "schedule.rstar_warmup_frac") c.rstar_warmup_frac = to_double(key, value);
    else if (key == "train.lr") c.train_lr = to_double(key, value);
    else if (key == "train.lr_min_factor") c.train_lr_min_factor = to_double(key, value);
    else if (key == "train.adam_beta1") c.adam_beta1 = to_double(key, value);
    else if (key == "train.adam_beta2") c.adam_beta2 = to_double(key, value);
    else if (key == "train.adam_eps") c.adam_eps = to_double(key, value);
    else if (key == "train.examples") c.train_examples = to_u64(key, value);
    else if (key == "train.batch_size") c.train_batch_size = to_u64(key, value);
    else if (key == "pretrain.steps") c.pretrain_steps = to_u64(key, value);
    else if (key == "pretrain.lr") c.pretrain_lr = to_double(key, value);
    else if (key == "pretrain.batch_size") c.pretrain_batch_size = to_u64(key, value);
    else if (key == "eval.examples") c.eval_examples = to_u64(key, value);
    else throw ConfigError("unknown config key '" + key + "'");
}

inline RunConfig parse_config_text(const std::string& text) {
    RunConfig c;
    std::istringstream is(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail_cfg::trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) +
                              ": expected 'key = value', got '" + line + "'");
        const std::string key = detail_cfg::trim(line.substr(0, eq));
        const std::string value = detail_cfg::trim(line.substr(eq + 1));
        apply_config_entry(c, key, value);
    }
    return c;
}

inline RunConfig load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str());
}

// Every key with its resolved value, parse-compatible.
inline std::string render_config(const RunConfig& c) {
    using namespace detail_cfg;
    std::ostringstream os;
    os << "seed = " << c.seed << "\n";
    os << "backbone.n_layers = " << c.n_layers << "\n";
    os << "backbone.d_model = " << c.d_model << "\n";
    os << "backbone.n_heads = " << c.n_heads << "\n";
    os << "backbone.d_ff = " << c.d_ff << "\n";
    os << "backbone.vocab_size = " << c.vocab_size << "\n";
    os << "backbone.max_len = " << c.max_len << "\n";
    os << "layout.n_system = " << c.n_system << "\n";
    os << "layout.n_vision = " << c.n_vision << "\n";
    os << "layout.n_question = " << c.n_question << "\n";
    os << "layout.n_answer = " << c.n_answer << "\n";
    os << "task.n_classes = " << c.task_n_classes << "\n";
    os << "task.n_regions = " << c.task_n_regions << "\n";
    os << "task.noise_std = " << fmt_double(c.task_noise_std) << "\n";
    os << "task.filler_max = " << c.task_filler_max << "\n";
    os << "pruner.placements = " << fmt_list(c.pruner_placements) << "\n";
    os << "pruner.n_queries = " << c.pruner_n_queries << "\n";
    os << "pruner.proj_dim = " << c.pruner_proj_dim << "\n";
    os << "pruner.query_dropout = " << fmt_double(c.pruner_query_dropout) << "\n";
    os << "pruner.bias_init = " << fmt_double(c.pruner_bias_init) << "\n";
    os << "pruner.kind = " << (c.pruner_kind == PrunerKind::learned ? "learned" : "topk") << "\n";
    os << "adapter.enabled = " << (c.adapter_enabled ? "true" : "false") << "\n";
    os << "adapter.placements = " << fmt_list(c.adapter_placements) << "\n";
    os << "adapter.bottleneck_dim = " << c.adapter_bottleneck_dim << "\n";
    os << "loss.lambda_task = " << fmt_double(c.lambda_task) << "\n";
    os << "loss.lambda_repair = " << fmt_double(c.lambda_repair) << "\n";
    os << "loss.lambda_sparse = " << fmt_double(c.lambda_sparse) << "\n";
    os << "loss.repair_enabled = " << (c.repair_loss_enabled ? "true" : "false") << "\n";
    os << "loss.repair_mean_only = " << (c.repair_mean_only ? "true" : "false") << "\n";
    os << "schedule.tau_start = " << fmt_double(c.tau_start) << "\n";
    os << "schedule.tau_end = " << fmt_double(c.tau_end) << "\n";
    os << "schedule.target_retention = " << fmt_double(c.target_retention) << "\n";
    os << "schedule.rstar_warmup_frac = " << fmt_double(c.rstar_warmup_frac) << "\n";
    os << "train.lr = " << fmt_double(c.train_lr) << "\n";
    os << "train.lr_min_factor = " << fmt_double(c.train_lr_min_factor) << "\n";
    os << "train.adam_beta1 = " << fmt_double(c.adam_beta1) << "\n";
    os << "train.adam_beta2 = " << fmt_double(c.adam_beta2) << "\n";
    os << "train.adam_eps = " << fmt_double(c.adam_eps) << "\n";
    os << "train.examples = " << c.train_examples << "\n";
    os << "train.batch_size = " << c.train_batch_size << "\n";
    os << "pretrain.steps = " << c.pretrain_steps << "\n";
    os << "pretrain.lr = " << fmt_double(c.pretrain_lr) << "\n";
    os << "pretrain.batch_size = " << c.pretrain_batch_size << "\n";
    os << "eval.examples = " << c.eval_examples << "\n";
    return os.str();
}

inline bool operator==(const RunConfig& a, const RunConfig& b) {
    return render_config(a) == render_config(b);
}

}  // namespace rcp
