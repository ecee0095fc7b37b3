#pragma once

// Synthetic multimodal QA task: region-addressed attribute retrieval.
//
// Each example scatters one color-bearing and one shape-bearing patch per
// region across a grid of n_vision patches; the remaining patches are noise.
// Attribute values are drawn independently per (region, type) slot, the
// question names a region and an attribute type, and the answer is the class
// of the matching patch, so an exact oracle exists for every generated label.
// The combined payload (regions x types x classes) is deliberately larger
// than one residual vector, so answering requires keeping (or repairing)
// vision information deep into the decoder rather than summarizing it once.
//
// Patch channels: [class one-hot | region one-hot | color flag | shape flag |
// 2 spare], Gaussian noise added everywhere.

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include "rcp/config.hpp"
#include "rcp/errors.hpp"
#include "rcp/layout.hpp"
#include "rcp/rng.hpp"

namespace rcp {

// Fixed vocabulary layout; region ids start at kTokRegionBase and answer ids
// follow after n_regions entries.
enum TokenId : std::size_t {
    kTokPad = 0,
    kTokBos = 1,
    kTokSys = 2,
    kTokEos = 3,
    kTokAsk = 4,
    kTokFiller = 5,
    kTokAttrColor = 6,
    kTokAttrShape = 7,
    kTokRegionBase = 8,
};

enum class Question : std::size_t { color = 0, shape = 1 };

struct SyntheticExample {
    std::vector<double> vision;       // n_vision x d_patch, row-major
    std::vector<std::size_t> tokens;  // full sequence, answer teacher-forced
    std::vector<std::size_t> answer;  // n_answer target ids
    std::size_t q_effective = 0;
    std::vector<std::size_t> colors;  // per region
    std::vector<std::size_t> shapes;  // per region
    std::size_t q_region = 0;
    Question question = Question::color;
};

inline std::size_t task_oracle_answer(const std::vector<std::size_t>& colors,
                                      const std::vector<std::size_t>& shapes,
                                      std::size_t q_region, Question q) {
    return q == Question::color ? colors[q_region] : shapes[q_region];
}

inline SequenceLayout layout_from_config(const RunConfig& cfg, std::size_t q_effective) {
    SequenceLayout l;
    l.n_system = cfg.n_system;
    l.n_vision = cfg.n_vision;
    l.n_question = cfg.n_question;
    l.n_answer = cfg.n_answer;
    l.q_effective = q_effective;
    l.validate();
    return l;
}

inline SyntheticExample generate_example(Rng& rng, const RunConfig& cfg) {
    const std::size_t K = cfg.task_n_classes;
    const std::size_t R = cfg.task_n_regions;
    const std::size_t N = cfg.n_vision;
    const std::size_t dp = cfg.d_patch();

    SyntheticExample ex;
    ex.colors.resize(R);
    ex.shapes.resize(R);
    for (std::size_t r = 0; r < R; ++r) {
        ex.colors[r] = rng.uniform_int(K);
        ex.shapes[r] = rng.uniform_int(K);
    }
    ex.q_region = rng.uniform_int(R);
    ex.question = static_cast<Question>(rng.uniform_int(2));

    // informative positions: partial Fisher-Yates; 2R distinct slots
    std::vector<std::size_t> perm(N);
    for (std::size_t i = 0; i < N; ++i) perm[i] = i;
    const std::size_t k_total = 2 * R;
    for (std::size_t i = 0; i < k_total; ++i)
        std::swap(perm[i], perm[i + rng.uniform_int(N - i)]);

    ex.vision.assign(N * dp, 0.0);
    for (std::size_t r = 0; r < R; ++r) {
        double* pc = ex.vision.data() + perm[r] * dp;  // color patch of region r
        pc[ex.colors[r]] = 1.0;
        pc[K + r] = 1.0;
        pc[K + R] = 1.0;  // color flag
        double* ps = ex.vision.data() + perm[R + r] * dp;  // shape patch of region r
        ps[ex.shapes[r]] = 1.0;
        ps[K + r] = 1.0;
        ps[K + R + 1] = 1.0;  // shape flag
    }
    for (double& v : ex.vision) v += rng.normal() * cfg.task_noise_std;

    const std::size_t filler =
        cfg.task_filler_max == 0 ? 0 : rng.uniform_int(cfg.task_filler_max + 1);
    ex.q_effective = 3 + filler;

    const std::size_t a0 = cfg.vocab_answer_base() +
                           task_oracle_answer(ex.colors, ex.shapes, ex.q_region, ex.question);
    ex.answer.assign(cfg.n_answer, kTokPad);
    ex.answer[0] = a0;
    ex.answer[1] = kTokEos;

    ex.tokens.assign(cfg.seq_len(), kTokPad);
    ex.tokens[0] = kTokBos;
    for (std::size_t i = 1; i < cfg.n_system; ++i) ex.tokens[i] = kTokSys;
    // vision positions keep kTokPad; their embeddings come from the patches
    const std::size_t qs = cfg.n_system + cfg.n_vision;
    ex.tokens[qs] = kTokAsk;
    ex.tokens[qs + 1] = kTokAttrColor + static_cast<std::size_t>(ex.question);
    ex.tokens[qs + 2] = kTokRegionBase + ex.q_region;
    for (std::size_t i = 0; i < filler; ++i) ex.tokens[qs + 3 + i] = kTokFiller;
    const std::size_t as = qs + cfg.n_question;
    for (std::size_t i = 0; i < cfg.n_answer; ++i) ex.tokens[as + i] = ex.answer[i];
    return ex;
}

inline std::vector<SyntheticExample> generate_batch(Rng& rng, const RunConfig& cfg,
                                                    std::size_t batch_size) {
    if (2 * cfg.task_n_regions > cfg.n_vision)
        throw ConfigError("generate_batch: 2 * task.n_regions exceeds layout.n_vision");
    std::vector<SyntheticExample> out;
    out.reserve(batch_size);
    for (std::size_t i = 0; i < batch_size; ++i) out.push_back(generate_example(rng, cfg));
    return out;
}

}  // namespace rcp
