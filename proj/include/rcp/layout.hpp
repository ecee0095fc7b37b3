#pragma once

// Token-sequence segmentation: system | vision | question | answer, plus the
// answer-region gate consumed by the repair adapter.

#include <cstddef>
#include <string>
#include <vector>

#include "rcp/errors.hpp"
#include "rcp/tensor.hpp"

namespace rcp {

struct SequenceLayout {
    std::size_t n_system = 0;
    std::size_t n_vision = 0;
    std::size_t n_question = 0;
    std::size_t q_effective = 0;  // non-padding question tokens, >= 1
    std::size_t n_answer = 0;

    std::size_t total() const { return n_system + n_vision + n_question + n_answer; }
    std::size_t vision_start() const { return n_system; }
    std::size_t question_start() const { return n_system + n_vision; }
    std::size_t answer_start() const { return n_system + n_vision + n_question; }

    void validate() const {
        if (n_vision == 0) throw ConfigError("layout: vision segment is empty");
        if (n_question == 0) throw ConfigError("layout: question segment is empty");
        if (q_effective < 1 || q_effective > n_question)
            throw ConfigError("layout: q_effective " + std::to_string(q_effective) +
                              " outside [1, " + std::to_string(n_question) + "]");
    }
};

struct RegionGate {
    std::vector<double> g;  // length L, 1 exactly on the answer segment
};

// g[i] = 1 iff i lies in the answer segment.
inline RegionGate build_gate(const SequenceLayout& layout) {
    layout.validate();
    if (layout.n_answer == 0)
        throw EmptyRegionError("build_gate: answer segment is empty");
    RegionGate gate;
    gate.g.assign(layout.total(), 0.0);
    for (std::size_t i = layout.answer_start(); i < layout.total(); ++i) gate.g[i] = 1.0;
    return gate;
}

inline std::vector<bool> gate_as_row_mask(const RegionGate& gate, std::size_t batch) {
    std::vector<bool> rows(batch * gate.g.size());
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < gate.g.size(); ++i)
            rows[b * gate.g.size() + i] = gate.g[i] == 1.0;
    return rows;
}

// The question->vision sub-block of one layer's attention weights: query rows
// are the first q_effective question positions, key columns the vision span.
inline Tensor attention_subblock(const Tensor& attn, const SequenceLayout& layout) {
    layout.validate();
    if (attn.rank() != 3 || attn.dim(1) != layout.total() || attn.dim(2) != layout.total())
        throw ShapeError("attention_subblock: weights " + shape_str(attn.shape()) +
                         " inconsistent with sequence length " +
                         std::to_string(layout.total()));
    return slice_last2(attn, layout.question_start(), layout.q_effective,
                       layout.vision_start(), layout.n_vision);
}

}  // namespace rcp
