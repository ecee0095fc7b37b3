// Command-line driver: pretrain / train / eval / report / gradcheck / flops.
//
// Exit codes: 0 success, 1 validation or I/O error, 2 numeric failure.
// Relative --out / --run-dir paths resolve under $RCP_OUT_ROOT when set.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <json.hpp>

#include "rcp/gradcheck.hpp"
#include "rcp/metrics.hpp"
#include "rcp/model.hpp"
#include "rcp/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace rcp;

namespace {

fs::path resolve_out(const std::string& p) {
    fs::path path(p);
    if (path.is_absolute()) return path;
    if (const char* root = std::getenv("RCP_OUT_ROOT")) return fs::path(root) / path;
    return path;
}

RunConfig load_or_default(const std::string& config_path) {
    if (config_path.empty()) return RunConfig{};
    return load_config_file(config_path);
}

void apply_variant(RunConfig& cfg, const std::string& variant) {
    if (variant == "full" || variant.empty()) return;
    if (variant == "no-adapter") {
        cfg.adapter_enabled = false;
    } else if (variant == "no-repair-loss") {
        cfg.repair_loss_enabled = false;
    } else if (variant == "mean-only-repair") {
        cfg.repair_mean_only = true;
    } else if (variant == "pruner-only") {
        cfg.adapter_enabled = false;
        cfg.repair_loss_enabled = false;
    } else if (variant == "topk") {
        cfg.pruner_kind = PrunerKind::topk;
    } else {
        throw ConfigError("unknown --variant '" + variant +
                          "' (full, no-adapter, no-repair-loss, mean-only-repair, "
                          "pruner-only, topk)");
    }
}

void write_resolved_config(const RunConfig& cfg, const fs::path& dir) {
    write_text_file((dir / "config.resolved").string(), render_config(cfg));
}

RunConfig read_run_config(const fs::path& dir) {
    const fs::path p = dir / "config.resolved";
    if (!fs::exists(p)) throw IoError("missing artifact: " + p.string());
    return load_config_file(p.string());
}

BackboneParams load_backbone(const std::string& path, const RunConfig& cfg) {
    if (!fs::exists(path)) throw IoError("backbone checkpoint not found: " + path);
    return BackboneParams::from_named(load_named_tensors(path), cfg);
}

std::string read_backbone_path(const fs::path& run_dir) {
    const fs::path p = run_dir / "backbone.path";
    std::ifstream in(p);
    if (!in) throw IoError("missing artifact: " + p.string());
    std::string line;
    std::getline(in, line);
    return line;
}

int cmd_pretrain(const std::string& config_path, const std::string& out, bool force) {
    RunConfig cfg = load_or_default(config_path);
    cfg.validate();
    const fs::path dir = resolve_out(out);
    fs::create_directories(dir);
    const fs::path ckpt = dir / "backbone.bin";
    if (fs::exists(ckpt) && !force)
        throw ConfigError("checkpoint exists: " + ckpt.string() + " (use --force to overwrite)");

    PretrainResult pr = pretrain_backbone(cfg);
    save_named_tensors(ckpt.string(), pr.backbone.named());
    write_resolved_config(cfg, dir);

    BackboneParams frozen = pr.backbone.frozen();
    RcpModel dense(cfg, frozen, PluginParams{});
    const double acc = evaluate_dense_accuracy(dense, eval_split(cfg));
    const std::string digest = frozen.digest();
    write_text_file((dir / "backbone.digest").string(), digest + "\n");

    std::cout << "backbone: " << ckpt.string() << "\n"
              << "digest: " << digest << "\n"
              << "final pretrain loss: " << pr.final_loss << "\n"
              << "full-token accuracy: " << acc << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& backbone_path,
              const std::string& out, const std::string& variant, double target_retention,
              std::uint64_t seed_override, bool have_seed, bool force) {
    RunConfig cfg = load_or_default(config_path);
    apply_variant(cfg, variant);
    if (target_retention >= 0.0) cfg.target_retention = target_retention;
    if (have_seed) cfg.seed = seed_override;
    cfg.validate();

    const fs::path dir = resolve_out(out);
    fs::create_directories(dir);
    const fs::path plugin_path = dir / "plugin.bin";
    if (fs::exists(plugin_path) && !force)
        throw ConfigError("checkpoint exists: " + plugin_path.string() +
                          " (use --force to overwrite)");

    BackboneParams backbone = load_backbone(backbone_path, cfg);
    const std::string digest_before = backbone.digest();

    TrainResult tr = train_plugin(cfg, backbone);

    if (backbone.digest() != digest_before)
        throw NumericError("frozen backbone changed during training");
    save_named_tensors(plugin_path.string(), tr.plugin.named());
    write_resolved_config(cfg, dir);
    write_text_file((dir / "backbone.path").string(),
                    fs::absolute(backbone_path).string() + "\n");
    write_text_file((dir / "metrics.csv").string(), metrics_csv(tr.metrics));

    const MetricsRow& last = tr.metrics.back();
    std::cout << "plugin: " << plugin_path.string() << "\n"
              << "steps: " << tr.metrics.size() << "\n"
              << "final r_bar: " << last.r_bar << " (target " << cfg.target_retention << ")\n"
              << "final task/repair/sparse loss: " << last.task_loss << " / "
              << last.repair_loss << " / " << last.sparse_loss << "\n"
              << "monotonicity violations: " << tr.monotonicity_violations << "\n";
    return 0;
}

int cmd_eval(const std::string& run_dir_arg, const std::string& mode) {
    const fs::path dir = resolve_out(run_dir_arg);
    RunConfig cfg = read_run_config(dir);
    BackboneParams backbone = load_backbone(read_backbone_path(dir), cfg);
    const fs::path plugin_path = dir / "plugin.bin";
    if (!fs::exists(plugin_path)) throw IoError("missing artifact: " + plugin_path.string());
    PluginParams plugin = PluginParams::from_named(load_named_tensors(plugin_path.string()), cfg);
    RcpModel model(cfg, backbone, plugin);

    auto split = eval_split(cfg);
    json j;
    j["eval_examples"] = split.size();
    j["accuracy_full"] = evaluate_dense_accuracy(model, split);

    EvalResult masked, gathered;
    bool have_masked = mode == "masked" || mode == "both";
    bool have_gathered = mode == "gathered" || mode == "both";
    if (have_masked) {
        masked = evaluate(model, split, EvalMode::masked);
        j["accuracy_masked"] = masked.accuracy;
        j["monotonicity_violations_masked"] = masked.monotonicity_violations;
    }
    if (have_gathered) {
        gathered = evaluate(model, split, EvalMode::gathered);
        j["accuracy_gathered"] = gathered.accuracy;
        j["monotonicity_violations_gathered"] = gathered.monotonicity_violations;
    }
    const EvalResult& primary = have_gathered ? gathered : masked;
    j["accuracy_pruned"] = primary.accuracy;
    j["avg_tokens"] = primary.avg_retained_tokens;
    j["per_layer_retention"] = primary.per_layer_retention;
    j["per_stage_retention"] = primary.per_stage_retention;
    if (have_masked && have_gathered) {
        bool agree = true;
        for (std::size_t i = 0; i < masked.predictions.size(); ++i)
            agree = agree && masked.predictions[i] == gathered.predictions[i];
        j["modes_agree"] = agree;
    }
    if (!cfg.adapter_placements.empty())
        j["repair_loss_eval"] = measure_repair_loss(model, split);

    write_text_file((dir / "eval.json").string(), j.dump(2) + "\n");
    std::cout << j.dump(2) << "\n";
    return 0;
}

int cmd_report(const std::string& run_dir_arg) {
    const fs::path dir = resolve_out(run_dir_arg);
    std::vector<std::string> missing;
    for (const char* name : {"config.resolved", "plugin.bin", "backbone.path", "eval.json"})
        if (!fs::exists(dir / name)) missing.push_back(name);
    if (!missing.empty()) {
        std::string list;
        for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
        throw IoError("incomplete run directory " + dir.string() + "; missing: " + list);
    }

    RunConfig cfg = read_run_config(dir);
    BackboneParams backbone = load_backbone(read_backbone_path(dir), cfg);
    PluginParams plugin =
        PluginParams::from_named(load_named_tensors((dir / "plugin.bin").string()), cfg);
    RcpModel model(cfg, backbone, plugin);

    json ev;
    {
        std::ifstream in(dir / "eval.json");
        in >> ev;
    }

    auto split = eval_split(cfg);
    std::vector<double> drift = measure_drift(model, split);
    write_text_file((dir / "drift.csv").string(), drift_csv(drift));

    std::vector<double> per_layer = ev["per_layer_retention"].get<std::vector<double>>();
    std::vector<double> per_stage = ev["per_stage_retention"].get<std::vector<double>>();
    write_text_file((dir / "retention.csv").string(),
                    retention_csv(retention_report(cfg.pruner_placements, per_stage)));

    std::vector<double> dense_ret(cfg.n_layers, 1.0);
    const double flops_dense = flops_total(cost_model_from_retention(cfg, dense_ret));
    const double flops_pruned = flops_total(cost_model_from_retention(cfg, per_layer));
    const double cache_ratio = kv_cache_bytes(vision_cache_model(cfg, per_layer)) /
                               kv_cache_bytes(vision_cache_model(cfg, dense_ret));
    write_text_file((dir / "efficiency.csv").string(),
                    efficiency_csv(cfg, per_layer, flops_dense, flops_pruned, cache_ratio));

    json summary;
    summary["accuracy_full"] = ev["accuracy_full"];
    summary["accuracy_pruned"] = ev["accuracy_pruned"];
    summary["avg_tokens"] = ev["avg_tokens"];
    summary["flops_ratio"] = flops_pruned / flops_dense;
    summary["cache_ratio"] = cache_ratio;
    summary["final_repair_loss"] =
        ev.contains("repair_loss_eval") ? ev["repair_loss_eval"] : json(nullptr);
    write_text_file((dir / "summary.json").string(), summary.dump(2) + "\n");
    std::cout << summary.dump(2) << "\n";
    return 0;
}

// Small, fixed configuration for the end-to-end gradient check: every
// trainable parameter is probed, so the model must stay tiny to finish
// within the time budget.
RunConfig gradcheck_config() {
    RunConfig cfg;
    cfg.n_layers = 4;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.d_ff = 24;
    cfg.n_system = 1;
    cfg.n_vision = 8;
    cfg.n_question = 5;
    cfg.n_answer = 2;
    cfg.max_len = 16;
    cfg.task_n_regions = 2;
    cfg.pruner_placements = {1, 2};
    cfg.adapter_placements = {2, 3};
    cfg.pruner_n_queries = 2;
    cfg.pruner_proj_dim = 4;
    cfg.adapter_bottleneck_dim = 4;
    cfg.pruner_bias_init = 0.5;
    cfg.validate();
    return cfg;
}

int cmd_gradcheck(const std::string& config_path, double tol, std::size_t batch) {
    RunConfig cfg = config_path.empty() ? gradcheck_config() : load_config_file(config_path);
    cfg.validate();

    Rng rng(cfg.seed);
    Rng brng = rng.substream(StreamPurpose::param_init, 0, 0);
    BackboneParams backbone = BackboneParams::init(cfg, brng).frozen();
    Rng prng = rng.substream(StreamPurpose::param_init, 1, 0);
    PluginParams plugin = PluginParams::init(cfg, prng);
    // perturb the identity-initialized adapter maps so their gradients are live
    Rng perturb = rng.substream(StreamPurpose::param_init, 2, 0);
    for (auto& site : plugin.sites)
        for (Tensor t : {site.w_gamma, site.w_beta, site.w_up})
            for (double& v : t.values_mut()) v = perturb.normal() * 0.2;
    RcpModel model(cfg, backbone, plugin);

    Rng drng = rng.substream(StreamPurpose::data, 0, 0);
    auto examples = generate_batch(drng, cfg, batch);
    ModelInput input = make_model_input(cfg, examples);
    Rng run_rng(cfg.seed + 1);

    // relaxed (soft-mask) total loss: the hard path shares these gradients
    // through the straight-through estimator
    auto f = [&]() {
        StepLosses losses = compute_step_losses(model, input, MaskPolicy::train_soft, 1.2,
                                                cfg.target_retention, run_rng, 0, false);
        return losses.total;
    };
    std::vector<Tensor> params = model.trainable_params();
    GradCheckReport report = finite_diff_check(f, params, 1e-5);
    std::size_t n_coords = 0;
    for (const Tensor& p : params) n_coords += p.size();
    std::cout << "parameters: " << params.size() << " tensors, " << n_coords << " coordinates\n"
              << "max relative error: " << report.max_rel_error << "\n"
              << "worst: param " << report.worst_param << " coord " << report.worst_coord
              << " analytic " << report.worst_analytic << " numeric " << report.worst_numeric
              << "\n";
    if (report.max_rel_error > tol) {
        std::cerr << "gradcheck FAILED (tolerance " << tol << ")\n";
        return 2;
    }
    return 0;
}

int cmd_flops(const std::string& config_path, const std::vector<double>& retentions) {
    RunConfig cfg = load_or_default(config_path);
    cfg.validate();
    std::vector<double> dense(cfg.n_layers, 1.0);
    const double flops_dense = flops_total(cost_model_from_retention(cfg, dense));
    const double cache_dense = kv_cache_bytes(vision_cache_model(cfg, dense));
    std::cout << "retention,flops,flops_ratio,vision_cache_bytes,cache_ratio\n";
    for (double r : retentions) {
        std::vector<double> uniform(cfg.n_layers, r);
        const double f = flops_total(cost_model_from_retention(cfg, uniform));
        const double c = kv_cache_bytes(vision_cache_model(cfg, uniform));
        std::cout << r << "," << f << "," << f / flops_dense << "," << c << ","
                  << c / cache_dense << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"cumulative visual-token pruning with delayed repair, desk scale"};
    app.require_subcommand(1);

    std::string config_path, out_dir, backbone_path, run_dir, variant = "full", mode = "both";
    bool force = false;
    double target_retention = -1.0;
    std::uint64_t seed = 0;
    bool have_seed = false;
    double tol = 1e-4;
    std::size_t gc_batch = 2;
    std::vector<double> retentions = {0.11, 0.22, 0.33, 1.0};

    auto* pre = app.add_subcommand("pretrain", "train and freeze the toy backbone");
    pre->add_option("--config", config_path, "config file (key = value)");
    pre->add_option("--out", out_dir, "output directory")->required();
    pre->add_flag("--force", force, "overwrite an existing checkpoint");

    auto* tr = app.add_subcommand("train", "train the pruning/repair plug-ins");
    tr->add_option("--config", config_path, "config file (key = value)");
    tr->add_option("--backbone", backbone_path, "frozen backbone checkpoint")->required();
    tr->add_option("--out", out_dir, "run directory")->required();
    tr->add_option("--variant", variant,
                   "full | no-adapter | no-repair-loss | mean-only-repair | pruner-only | topk");
    tr->add_option("--target-retention", target_retention, "override schedule.target_retention");
    auto* seed_opt = tr->add_option("--seed", seed, "override seed");
    tr->add_flag("--force", force, "overwrite an existing checkpoint");

    auto* ev = app.add_subcommand("eval", "greedy-decode accuracy and retention");
    ev->add_option("--run-dir", run_dir, "directory produced by train")->required();
    ev->add_option("--mode", mode, "masked | gathered | both");

    auto* rep = app.add_subcommand("report", "emit drift/retention/efficiency CSVs + summary");
    rep->add_option("--run-dir", run_dir, "directory with train + eval artifacts")->required();

    auto* gc = app.add_subcommand("gradcheck", "finite-difference check of the total loss");
    gc->add_option("--config", config_path, "config file (defaults to the built-in small one)");
    gc->add_option("--tol", tol, "max relative error tolerance");
    gc->add_option("--batch", gc_batch, "batch size for the checked loss");

    auto* fl = app.add_subcommand("flops", "analytic FLOPs / cache table");
    fl->add_option("--config", config_path, "config file");
    fl->add_option("--retention", retentions, "uniform retention levels");

    CLI11_PARSE(app, argc, argv);
    have_seed = seed_opt->count() > 0;

    try {
        if (pre->parsed()) return cmd_pretrain(config_path, out_dir, force);
        if (tr->parsed())
            return cmd_train(config_path, backbone_path, out_dir, variant, target_retention,
                             seed, have_seed, force);
        if (ev->parsed()) {
            if (mode != "masked" && mode != "gathered" && mode != "both")
                throw ConfigError("--mode must be masked, gathered, or both");
            return cmd_eval(run_dir, mode);
        }
        if (rep->parsed()) return cmd_report(run_dir);
        if (gc->parsed()) return cmd_gradcheck(config_path, tol, gc_batch);
        if (fl->parsed()) return cmd_flops(config_path, retentions);
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
