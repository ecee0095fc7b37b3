#pragma once

// Analytic cost accounting and diagnostics.
//
// FLOPs per decoder layer (multiply-add counted as 2 FLOPs):
//   8 * s * d^2         QKVO projections
//   4 * s^2 * d         attention scores + value mixing, all heads
//   4 * s * d * d_ff    two feed-forward matrices
// KV cache bytes per layer: s * 2 (keys+values) * d * bytes_per_element.
//
// Layer-wise drift is the repair-loss metric (normalized squared
// 2-Wasserstein distance between diagonal-Gaussian fits) applied to the
// answer-region rows of teacher vs student hidden states, per layer.

#include <cstddef>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "rcp/config.hpp"
#include "rcp/errors.hpp"
#include "rcp/model.hpp"
#include "rcp/objectives.hpp"
#include "rcp/train.hpp"

namespace rcp {

struct CostModel {
    std::size_t n_layers = 0;
    std::size_t d_model = 0;
    std::size_t n_heads = 0;
    std::size_t d_ff = 0;
    std::size_t bytes_per_element = 8;
    std::vector<double> seq_lens;  // s_l per layer
};

inline double flops_total(const CostModel& cm) {
    if (cm.seq_lens.size() != cm.n_layers)
        throw ShapeError("flops_total: seq_lens must have one entry per layer");
    const double d = static_cast<double>(cm.d_model);
    const double dff = static_cast<double>(cm.d_ff);
    double total = 0.0;
    for (double s : cm.seq_lens)
        total += 8.0 * s * d * d + 4.0 * s * s * d + 4.0 * s * d * dff;
    return total;
}

inline double kv_cache_bytes(const CostModel& cm) {
    if (cm.seq_lens.size() != cm.n_layers)
        throw ShapeError("kv_cache_bytes: seq_lens must have one entry per layer");
    double total = 0.0;
    for (double s : cm.seq_lens)
        total += s * 2.0 * static_cast<double>(cm.d_model) *
                 static_cast<double>(cm.bytes_per_element);
    return total;
}

// s_l = non-vision tokens + retained vision tokens at layer l.
inline CostModel cost_model_from_retention(const RunConfig& cfg,
                                           const std::vector<double>& per_layer_retention,
                                           std::size_t bytes_per_element = 8) {
    if (per_layer_retention.size() != cfg.n_layers)
        throw ShapeError("cost_model_from_retention: retention length mismatch");
    CostModel cm;
    cm.n_layers = cfg.n_layers;
    cm.d_model = cfg.d_model;
    cm.n_heads = cfg.n_heads;
    cm.d_ff = cfg.d_ff;
    cm.bytes_per_element = bytes_per_element;
    const double non_vision = static_cast<double>(cfg.seq_len() - cfg.n_vision);
    for (double r : per_layer_retention)
        cm.seq_lens.push_back(non_vision + r * static_cast<double>(cfg.n_vision));
    return cm;
}

// Vision-token cache only; the storage ratios of the efficiency table are
// exact under this accounting (text tokens are excluded there).
inline CostModel vision_cache_model(const RunConfig& cfg,
                                    const std::vector<double>& per_layer_retention,
                                    std::size_t bytes_per_element = 8) {
    CostModel cm = cost_model_from_retention(cfg, per_layer_retention, bytes_per_element);
    for (std::size_t l = 0; l < cm.seq_lens.size(); ++l)
        cm.seq_lens[l] = per_layer_retention[l] * static_cast<double>(cfg.n_vision);
    return cm;
}

// Per-layer W2^2 between teacher and student answer-region rows of one trace
// pair (the full repair metric, mean + std terms).
inline std::vector<double> layer_drift(const std::vector<Tensor>& teacher_answer_rows,
                                       const std::vector<Tensor>& student_answer_rows) {
    if (teacher_answer_rows.size() != student_answer_rows.size())
        throw ShapeError("layer_drift: trace lengths differ");
    NoGradGuard ng;
    std::vector<double> out;
    out.reserve(teacher_answer_rows.size());
    for (std::size_t l = 0; l < teacher_answer_rows.size(); ++l)
        out.push_back(repair_loss(student_answer_rows[l], teacher_answer_rows[l]).item());
    return out;
}

// Mean per-layer drift over a split (teacher forcing, deterministic masks,
// per-example moments over the answer rows).
inline std::vector<double> measure_drift(const RcpModel& model,
                                         const std::vector<SyntheticExample>& examples,
                                         std::size_t batch_size = 50) {
    NoGradGuard ng;
    const RunConfig& cfg = model.cfg;
    std::vector<double> acc(cfg.n_layers, 0.0);
    std::size_t count = 0;
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
        for (std::size_t b = 0; b < n; ++b) {
            for (std::size_t l = 0; l < cfg.n_layers; ++l) {
                Tensor ht = slice_rows(teacher.layer_answer_rows[l], b * cfg.n_answer,
                                       cfg.n_answer);
                Tensor hs = slice_rows(student.layer_answer_rows[l], b * cfg.n_answer,
                                       cfg.n_answer);
                acc[l] += repair_loss(hs, ht).item();
            }
            ++count;
        }
    }
    for (double& v : acc) v /= static_cast<double>(count);
    return acc;
}

struct RetentionReportRow {
    std::size_t layer = 0;
    double percent = 0.0;
};

// Per-pruning-layer retention percentages; enforces the monotone-decrease
// property across stages.
inline std::vector<RetentionReportRow> retention_report(
    const std::vector<std::size_t>& placements, const std::vector<double>& per_stage_retention) {
    if (placements.size() != per_stage_retention.size())
        throw ShapeError("retention_report: placements/values size mismatch");
    std::vector<RetentionReportRow> rows;
    for (std::size_t g = 0; g < placements.size(); ++g) {
        if (g > 0 && per_stage_retention[g] > per_stage_retention[g - 1] + 1e-12)
            throw NumericError("retention_report: stage retention increased with depth");
        rows.push_back({placements[g], 100.0 * per_stage_retention[g]});
    }
    return rows;
}

// --- CSV emission -------------------------------------------------------------

inline void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write '" + path + "'");
    out << content;
    if (!out) throw IoError("short write on '" + path + "'");
}

inline std::string drift_csv(const std::vector<double>& per_layer_drift) {
    std::ostringstream os;
    os << "layer,w2sq\n";
    os.precision(17);
    for (std::size_t l = 0; l < per_layer_drift.size(); ++l)
        os << l << "," << per_layer_drift[l] << "\n";
    return os.str();
}

inline std::string retention_csv(const std::vector<RetentionReportRow>& rows) {
    std::ostringstream os;
    os << "layer,percent\n";
    os.precision(17);
    for (const auto& r : rows) os << r.layer << "," << r.percent << "\n";
    return os.str();
}

inline std::string metrics_csv(const std::vector<MetricsRow>& rows) {
    std::ostringstream os;
    os << "step,task_loss,repair_loss,sparse_loss,r_bar,tau,r_star,lr\n";
    os.precision(17);
    for (const auto& r : rows)
        os << r.step << "," << r.task_loss << "," << r.repair_loss << "," << r.sparse_loss
           << "," << r.r_bar << "," << r.tau << "," << r.r_star << "," << r.lr << "\n";
    return os.str();
}

inline std::string efficiency_csv(const RunConfig& cfg,
                                  const std::vector<double>& per_layer_retention,
                                  double dense_flops, double pruned_flops, double cache_ratio) {
    std::ostringstream os;
    os << "# flops per layer = 8*s*d^2 (QKVO projections, multiply-add=2) + 4*s^2*d "
          "(score + value mix) + 4*s*d*d_ff (two-matrix feed-forward)\n";
    os << "# cache bytes per layer = s * 2 * d * bytes_per_element; cache_ratio counts "
          "vision tokens only\n";
    os << "quantity,value\n";
    os.precision(17);
    os << "flops_dense," << dense_flops << "\n";
    os << "flops_pruned," << pruned_flops << "\n";
    os << "flops_ratio," << pruned_flops / dense_flops << "\n";
    os << "cache_ratio," << cache_ratio << "\n";
    os << "latency_ms,not-modeled\n";
    double rbar = 0.0;
    for (double r : per_layer_retention) rbar += r;
    os << "avg_retention," << rbar / static_cast<double>(cfg.n_layers) << "\n";
    return os.str();
}

}  // namespace rcp
