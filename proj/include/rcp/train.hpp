#pragma once

// Training and evaluation harness. The backbone is pretrained dense on the
// synthetic task and frozen; plug-in training updates only pruner and
// adapter parameters with Adam under the tau / r* / cosine-lr schedules.
// All loops are single-threaded and seeded, so (seed, config) determines
// every reported number exactly.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "rcp/config.hpp"
#include "rcp/errors.hpp"
#include "rcp/model.hpp"
#include "rcp/objectives.hpp"
#include "rcp/synthetic.hpp"
#include "rcp/tensor.hpp"

namespace rcp {

class Adam {
public:
    Adam(const std::vector<Tensor>& params, double beta1, double beta2, double eps)
        : beta1_(beta1), beta2_(beta2), eps_(eps) {
        m_.resize(params.size());
        v_.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            m_[i].assign(params[i].size(), 0.0);
            v_[i].assign(params[i].size(), 0.0);
        }
    }

    void step(std::vector<Tensor>& params, double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            const std::vector<double>& g = params[i].grad();
            std::vector<double>& w = params[i].values_mut();
            for (std::size_t j = 0; j < w.size(); ++j) {
                m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g[j];
                v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g[j] * g[j];
                const double mhat = m_[i][j] / bc1;
                const double vhat = v_[i][j] / bc2;
                w[j] -= lr * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

private:
    double beta1_, beta2_, eps_;
    std::size_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

// Rows whose logits predict the answer tokens under teacher forcing:
// position answer_start - 1 + j predicts answer token j.
inline std::vector<std::size_t> answer_predictor_rows(std::size_t B, std::size_t L,
                                                      std::size_t answer_start,
                                                      std::size_t n_answer) {
    std::vector<std::size_t> rows;
    rows.reserve(B * n_answer);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t j = 0; j < n_answer; ++j)
            rows.push_back(b * L + answer_start - 1 + j);
    return rows;
}

inline Tensor task_cross_entropy(const RunConfig& cfg, const Tensor& logits, std::size_t B,
                                 std::size_t L, std::size_t answer_start,
                                 const std::vector<std::size_t>& answer_targets) {
    Tensor rows = gather_rows(logits, answer_predictor_rows(B, L, answer_start, cfg.n_answer));
    return cross_entropy_rows(rows, answer_targets);
}

struct StepLosses {
    Tensor task, repair, sparse, total;
    ForwardResult student;
};

// One full loss construction (Eq. 22 shape): teacher pass without gradients,
// student pass with the requested mask policy, task CE over answer
// predictors, repair loss averaged over the designated (adapter) layers,
// absolute sparsity loss on batch-mean retention.
inline StepLosses compute_step_losses(const RcpModel& model, const ModelInput& input,
                                      MaskPolicy policy, double tau, double r_star,
                                      const Rng& run_rng, std::uint64_t step,
                                      bool query_dropout) {
    const RunConfig& cfg = model.cfg;
    const std::size_t B = input.B, L = cfg.seq_len();
    const bool want_repair = cfg.repair_loss_enabled && !cfg.adapter_placements.empty();

    std::vector<Tensor> teacher_rows;
    if (want_repair) {
        NoGradGuard ng;
        ForwardOptions topt;
        topt.mode = ForwardMode::teacher_full;
        topt.capture_answer_rows = true;
        ForwardResult teacher = model.forward(input, topt);
        teacher_rows = std::move(teacher.layer_answer_rows);
    }

    ForwardOptions sopt;
    sopt.mode = ForwardMode::student_masked;
    sopt.policy = policy;
    sopt.tau = tau;
    sopt.run_rng = &run_rng;
    sopt.step = step;
    sopt.query_dropout = query_dropout;
    sopt.capture_answer_rows = want_repair;
    StepLosses out;
    out.student = model.forward(input, sopt);

    const std::size_t answer_start = L - cfg.n_answer;
    out.task = task_cross_entropy(cfg, out.student.logits, B, L, answer_start,
                                  input.answer_targets);

    if (want_repair) {
        Tensor acc;
        for (std::size_t i = 0; i < cfg.adapter_placements.size(); ++i) {
            const std::size_t layer = cfg.adapter_placements[i];
            Tensor term = repair_loss(out.student.layer_answer_rows[layer],
                                      teacher_rows[layer], cfg.repair_mean_only);
            acc = i == 0 ? term : add(acc, term);
        }
        out.repair = scale(acc, 1.0 / static_cast<double>(cfg.adapter_placements.size()));
    } else {
        out.repair = Tensor::scalar(0.0);
    }

    out.sparse = out.student.stage_cum.empty() ? Tensor::scalar(0.0)
                                               : sparsity_loss(out.student.r_bar, r_star);
    out.total = total_loss(out.task, out.repair, out.sparse,
                           {cfg.lambda_task, cfg.lambda_repair, cfg.lambda_sparse});
    return out;
}

// --- backbone pretraining ----------------------------------------------------

struct PretrainResult {
    BackboneParams backbone;  // trained, still trainable; freeze via .frozen()
    double final_loss = 0.0;
};

inline PretrainResult pretrain_backbone(const RunConfig& cfg) {
    cfg.validate();
    Rng root(cfg.seed);
    Rng init_rng = root.substream(StreamPurpose::param_init, 0, 0);
    BackboneParams backbone = BackboneParams::init(cfg, init_rng);
    std::vector<Tensor> params = backbone.all_params();
    Adam adam(params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);

    RcpModel dense(cfg, backbone, PluginParams{});
    const std::size_t L = cfg.seq_len();
    double last = 0.0;
    for (std::size_t step = 0; step < cfg.pretrain_steps; ++step) {
        Rng data_rng = root.substream(StreamPurpose::data, step, 0);
        auto batch = generate_batch(data_rng, cfg, cfg.pretrain_batch_size);
        ModelInput input = make_model_input(cfg, batch);
        ForwardOptions opt;
        opt.mode = ForwardMode::teacher_full;
        ForwardResult fr = dense.forward(input, opt);
        Tensor loss = task_cross_entropy(cfg, fr.logits, input.B, L, L - cfg.n_answer,
                                         input.answer_targets);
        check_finite(loss, "pretraining loss at step " + std::to_string(step));
        for (Tensor& p : params) p.zero_grad();
        backward(loss);
        adam.step(params, cfg.pretrain_lr);
        last = loss.item();
    }
    return {std::move(backbone), last};
}

// --- plug-in training --------------------------------------------------------

struct MetricsRow {
    std::size_t step = 0;
    double task_loss = 0.0, repair_loss = 0.0, sparse_loss = 0.0;
    double r_bar = 0.0, tau = 0.0, r_star = 0.0, lr = 0.0;
};

struct TrainResult {
    PluginParams plugin;
    std::vector<MetricsRow> metrics;
    std::size_t monotonicity_violations = 0;
};

inline TrainResult train_plugin(const RunConfig& cfg, const BackboneParams& frozen_backbone) {
    cfg.validate();
    if (cfg.pruner_placements.empty())
        throw ConfigError("train_plugin: pruner.placements is empty");
    Rng root(cfg.seed);
    Rng init_rng = root.substream(StreamPurpose::param_init, 1, 0);
    PluginParams plugin = PluginParams::init(cfg, init_rng);
    RcpModel model(cfg, frozen_backbone, plugin);
    std::vector<Tensor> params = model.trainable_params();
    Adam adam(params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);

    Schedules sched;
    sched.tau_start = cfg.tau_start;
    sched.tau_end = cfg.tau_end;
    sched.r_star_target = cfg.target_retention;
    sched.r_star_warmup_frac = cfg.rstar_warmup_frac;
    sched.lr0 = cfg.train_lr;
    sched.lr_min_factor = cfg.train_lr_min_factor;

    const std::size_t total_steps =
        (cfg.train_examples + cfg.train_batch_size - 1) / cfg.train_batch_size;

    TrainResult out;
    for (std::size_t step = 0; step < total_steps; ++step) {
        const double t = Schedules::progress(step, total_steps);
        const double tau = sched.tau_at(t);
        const double r_star = sched.r_star_at(t);
        const double lr = sched.lr_at(t);

        Rng data_rng = root.substream(StreamPurpose::data, step, 1);
        const std::size_t remaining = cfg.train_examples - step * cfg.train_batch_size;
        const std::size_t bs = std::min(cfg.train_batch_size, remaining);
        auto batch = generate_batch(data_rng, cfg, bs);
        ModelInput input = make_model_input(cfg, batch);

        StepLosses losses;
        try {
            losses = compute_step_losses(model, input, MaskPolicy::train_hard, tau, r_star,
                                         root, step, true);
        } catch (const NumericError& e) {
            throw NumericError("training aborted at step " + std::to_string(step) + ": " +
                               e.what());
        }

        // cumulative masks may only shrink; count any resurrection
        for (std::size_t g = 1; g < losses.student.stage_cum.size(); ++g) {
            const auto& prev = losses.student.stage_cum[g - 1].data();
            const auto& cur = losses.student.stage_cum[g].data();
            for (std::size_t i = 0; i < cur.size(); ++i)
                if (cur[i] > prev[i]) ++out.monotonicity_violations;
        }

        for (Tensor& p : params) p.zero_grad();
        backward(losses.total);
        adam.step(params, lr);

        MetricsRow row;
        row.step = step;
        row.task_loss = losses.task.item();
        row.repair_loss = losses.repair.item();
        row.sparse_loss = losses.sparse.item();
        row.r_bar = losses.student.r_bar.defined() ? losses.student.r_bar.item() : 1.0;
        row.tau = tau;
        row.r_star = r_star;
        row.lr = lr;
        out.metrics.push_back(row);
    }
    out.plugin = std::move(model.plugin);
    return out;
}

// --- evaluation ---------------------------------------------------------------

struct EvalResult {
    double accuracy = 0.0;
    double avg_retained_tokens = 0.0;            // layer-averaged retained vision tokens
    std::vector<double> per_layer_retention;     // length n_layers, fractions
    std::vector<double> per_stage_retention;     // one entry per pruning stage
    std::vector<std::vector<std::size_t>> predictions;  // per example answer ids
    std::size_t monotonicity_violations = 0;
};

inline std::vector<SyntheticExample> eval_split(const RunConfig& cfg) {
    Rng rng = Rng(cfg.seed).substream(StreamPurpose::eval_data, 0, 0);
    return generate_batch(rng, cfg, cfg.eval_examples);
}

enum class EvalMode { masked, gathered };

namespace detail_eval {

// Fold one example's stage masks into the running eval statistics.
inline void accumulate_retention(const RunConfig& cfg, const std::vector<Tensor>& stage_cum,
                                 std::size_t example_in_batch, std::size_t batch,
                                 EvalResult& res, double& r_bar_acc) {
    const std::size_t n_stages = cfg.pruner_placements.size();
    if (res.per_layer_retention.empty()) res.per_layer_retention.assign(cfg.n_layers, 0.0);
    if (stage_cum.empty()) {
        for (std::size_t l = 0; l < cfg.n_layers; ++l) res.per_layer_retention[l] += 1.0;
        r_bar_acc += 1.0;
        return;
    }
    const std::size_t N = cfg.n_vision;
    std::vector<double> stage_r(n_stages, 1.0);
    for (std::size_t g = 0; g < n_stages; ++g) {
        const double* cur = stage_cum[g].data().data() + example_in_batch * N;
        double s = 0.0;
        for (std::size_t i = 0; i < N; ++i) s += cur[i];
        stage_r[g] = s / static_cast<double>(N);
        res.per_stage_retention[g] += stage_r[g];
        if (g > 0) {
            const double* prev = stage_cum[g - 1].data().data() + example_in_batch * N;
            for (std::size_t i = 0; i < N; ++i)
                if (cur[i] > prev[i]) ++res.monotonicity_violations;
        }
    }
    (void)batch;
    std::vector<double> per_layer =
        expand_stage_retention(cfg.pruner_placements, cfg.n_layers, stage_r);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) res.per_layer_retention[l] += per_layer[l];
    r_bar_acc += average_retention(per_layer);
}

}  // namespace detail_eval

// Greedy decoding of the answer region under a teacher-forced prompt.
// Pruning decisions depend only on prompt content, so masks are identical
// across decode steps; retention is read off the last step. The masked view
// evaluates in batches (per-example results are identical to batch size 1);
// the gathered view runs one example at a time because kept sets differ.
inline EvalResult evaluate(const RcpModel& model, const std::vector<SyntheticExample>& examples,
                           EvalMode mode, std::size_t batch_size = 50) {
    NoGradGuard ng;
    const RunConfig& cfg = model.cfg;
    const std::size_t n_stages = cfg.pruner_placements.size();

    EvalResult res;
    res.per_stage_retention.assign(n_stages, 0.0);
    std::size_t correct = 0;
    double r_bar_acc = 0.0;

    ForwardOptions opt;
    opt.mode = mode == EvalMode::masked ? ForwardMode::student_masked
                                        : ForwardMode::student_gathered;
    opt.policy = MaskPolicy::infer;
    opt.tau = cfg.tau_end;
    if (mode == EvalMode::gathered) batch_size = 1;

    const std::size_t L = cfg.seq_len(), V = cfg.vocab_size;
    for (std::size_t off = 0; off < examples.size(); off += batch_size) {
        const std::size_t B = std::min(batch_size, examples.size() - off);
        std::vector<SyntheticExample> chunk(examples.begin() + off, examples.begin() + off + B);
        ModelInput input = make_model_input(cfg, chunk, /*teacher_force_answers=*/false);
        std::vector<std::vector<std::size_t>> decoded(B,
                                                      std::vector<std::size_t>(cfg.n_answer));
        ForwardResult fr;
        for (std::size_t t = 0; t < cfg.n_answer; ++t) {
            fr = model.forward(input, opt);
            const std::size_t L_pres = fr.present_L ? fr.present_L : L;
            for (std::size_t b = 0; b < B; ++b) {
                const std::size_t predictor = b * L_pres + L_pres - cfg.n_answer - 1 + t;
                const double* row = fr.logits.data().data() + predictor * V;
                std::size_t best = 0;
                for (std::size_t v = 1; v < V; ++v)
                    if (row[v] > row[best]) best = v;
                decoded[b][t] = best;
                input.token_ids[b * L + L - cfg.n_answer + t] = best;
            }
        }
        for (std::size_t b = 0; b < B; ++b) {
            if (decoded[b] == chunk[b].answer) ++correct;
            res.predictions.push_back(decoded[b]);
            detail_eval::accumulate_retention(cfg, fr.stage_cum, b, B, res, r_bar_acc);
        }
    }

    const double inv = 1.0 / static_cast<double>(examples.size());
    res.accuracy = static_cast<double>(correct) * inv;
    for (double& v : res.per_layer_retention) v *= inv;
    for (double& v : res.per_stage_retention) v *= inv;
    res.avg_retained_tokens = r_bar_acc * inv * static_cast<double>(cfg.n_vision);
    return res;
}

// Accuracy of the dense full-token backbone on a split.
inline double evaluate_dense_accuracy(const RcpModel& model,
                                      const std::vector<SyntheticExample>& examples,
                                      std::size_t batch_size = 50) {
    NoGradGuard ng;
    const RunConfig& cfg = model.cfg;
    const std::size_t L = cfg.seq_len(), V = cfg.vocab_size;
    std::size_t correct = 0;
    for (std::size_t off = 0; off < examples.size(); off += batch_size) {
        const std::size_t B = std::min(batch_size, examples.size() - off);
        std::vector<SyntheticExample> chunk(examples.begin() + off, examples.begin() + off + B);
        ModelInput input = make_model_input(cfg, chunk, false);
        std::vector<std::vector<std::size_t>> decoded(B,
                                                      std::vector<std::size_t>(cfg.n_answer));
        for (std::size_t t = 0; t < cfg.n_answer; ++t) {
            ForwardOptions opt;
            opt.mode = ForwardMode::teacher_full;
            ForwardResult fr = model.forward(input, opt);
            for (std::size_t b = 0; b < B; ++b) {
                const std::size_t predictor = b * L + L - cfg.n_answer - 1 + t;
                const double* row = fr.logits.data().data() + predictor * V;
                std::size_t best = 0;
                for (std::size_t v = 1; v < V; ++v)
                    if (row[v] > row[best]) best = v;
                decoded[b][t] = best;
                input.token_ids[b * L + L - cfg.n_answer + t] = best;
            }
        }
        for (std::size_t b = 0; b < B; ++b)
            if (decoded[b] == chunk[b].answer) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(examples.size());
}

// Repair loss measured on a split (teacher forcing, deterministic masks,
// rows pooled across the batch, averaged over the designated layers). Used
// for the stabilization comparison; works with or without the adapter.
inline double measure_repair_loss(const RcpModel& model,
                                  const std::vector<SyntheticExample>& examples,
                                  std::size_t batch_size = 50) {
    NoGradGuard ng;
    const RunConfig& cfg = model.cfg;
    if (cfg.adapter_placements.empty())
        throw ConfigError("measure_repair_loss: no designated layers configured");
    double acc = 0.0;
    std::size_t batches = 0;
    for (std::size_t off = 0; off < examples.size(); off += batch_size) {
        const std::size_t n = std::min(batch_size, examples.size() - off);
        std::vector<SyntheticExample> chunk(examples.begin() + off, examples.begin() + off + n);
        ModelInput input = make_model_input(cfg, chunk);
        ForwardOptions topt;
        topt.mode = ForwardMode::teacher_full;
        topt.capture_answer_rows = true;
        ForwardResult teacher = model.forward(input, topt);
        ForwardOptions sopt;
        sopt.mode = ForwardMode::student_masked;
        sopt.policy = MaskPolicy::infer;
        sopt.tau = cfg.tau_end;
        sopt.capture_answer_rows = true;
        ForwardResult student = model.forward(input, sopt);
        double layer_acc = 0.0;
        for (std::size_t layer : cfg.adapter_placements)
            layer_acc += repair_loss(student.layer_answer_rows[layer],
                                     teacher.layer_answer_rows[layer], cfg.repair_mean_only)
                             .item();
        acc += layer_acc / static_cast<double>(cfg.adapter_placements.size());
        ++batches;
    }
    return acc / static_cast<double>(batches);
}

}  // namespace rcp
