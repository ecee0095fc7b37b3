#pragma once

// Dense row-major tensors with reverse-mode automatic differentiation.
//
// Every operation records a tape node holding its parents and a backward
// closure; backward(loss) walks the graph in reverse topological order and
// accumulates gradients into the leaves. Values are 64-bit floats. Tensors
// are immutable once created; the only sanctioned mutation is values_mut()
// on leaf parameters (optimizer updates, finite-difference probes) between
// graph constructions.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "rcp/errors.hpp"
#include "rcp/rng.hpp"

namespace rcp {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> val;
    std::vector<double> grad;  // lazily allocated, same length as val
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    void ensure_grad() {
        if (grad.size() != val.size()) grad.assign(val.size(), 0.0);
    }
};

// Tape recording is disabled inside NoGradGuard scopes (teacher passes,
// inference). Thread-local so independent runs may execute in parallel.
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

}  // namespace detail

struct NoGradGuard {
    NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape) {
        return make_leaf(std::move(shape), 0.0, false);
    }
    static Tensor full(Shape shape, double v) {
        return make_leaf(std::move(shape), v, false);
    }
    static Tensor scalar(double v) {
        Tensor t = make_leaf({1}, v, false);
        return t;
    }
    static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
        if (numel(shape) != data.size())
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        auto n = std::make_shared<detail::Node>();
        n->shape = std::move(shape);
        n->val = std::move(data);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }
    // Trainable leaf.
    static Tensor param(Shape shape, std::vector<double> data) {
        return from(std::move(shape), std::move(data), true);
    }
    static Tensor randn(Shape shape, Rng& rng, double std_dev, bool requires_grad = true) {
        std::vector<double> d(numel(shape));
        for (double& x : d) x = rng.normal() * std_dev;
        return from(std::move(shape), std::move(d), requires_grad);
    }

    bool defined() const { return static_cast<bool>(n_); }
    const Shape& shape() const { return n_->shape; }
    std::size_t size() const { return n_->val.size(); }
    std::size_t dim(std::size_t i) const { return n_->shape[i]; }
    std::size_t rank() const { return n_->shape.size(); }
    const std::vector<double>& data() const { return n_->val; }
    bool requires_grad() const { return n_->requires_grad; }

    double item() const {
        if (size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
        return n_->val[0];
    }

    // Gradient accumulated by the most recent backward(); zeros if untouched.
    const std::vector<double>& grad() const {
        n_->ensure_grad();
        return n_->grad;
    }
    void zero_grad() { n_->grad.assign(n_->val.size(), 0.0); }

    // Leaf-only mutable access: optimizer steps and finite-difference probes.
    std::vector<double>& values_mut() {
        if (!n_->parents.empty())
            throw Error("values_mut() is only valid on leaf tensors");
        return n_->val;
    }

    // Value copy detached from the tape.
    Tensor detach() const {
        return from(n_->shape, n_->val, false);
    }

    std::shared_ptr<detail::Node> node() const { return n_; }

    explicit Tensor(std::shared_ptr<detail::Node> n) : n_(std::move(n)) {}

private:
    static Tensor make_leaf(Shape shape, double fill, bool requires_grad) {
        auto n = std::make_shared<detail::Node>();
        n->val.assign(numel(shape), fill);
        n->shape = std::move(shape);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    std::shared_ptr<detail::Node> n_;
};

namespace detail {

inline Tensor make_op(Shape shape, std::vector<double> val,
                      std::vector<Tensor> parents,
                      std::function<void(Node&)> backward_fn) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->val = std::move(val);
    bool track = grad_mode();
    bool any = false;
    if (track) {
        for (const Tensor& p : parents)
            if (p.requires_grad()) { any = true; break; }
    }
    if (track && any) {
        n->requires_grad = true;
        n->parents.reserve(parents.size());
        for (const Tensor& p : parents) n->parents.push_back(p.node());
        n->backward_fn = std::move(backward_fn);
    }
    return Tensor(std::move(n));
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

// C += or = A(m×k) . B(k×n); accumulate controls += vs overwrite.
inline void gemm_nn(const double* a, const double* b, double* c,
                    std::size_t m, std::size_t k, std::size_t n,
                    double scale, bool accumulate) {
    if (!accumulate) std::fill(c, c + m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p] * scale;
            if (av == 0.0) continue;
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C += A(m×k) . B(n×k)^T
inline void gemm_nt(const double* a, const double* b, double* c,
                    std::size_t m, std::size_t k, std::size_t n,
                    double scale, bool accumulate) {
    if (!accumulate) std::fill(c, c + m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc * scale;
        }
    }
}

// C += A(k×m)^T . B(k×n)
inline void gemm_tn(const double* a, const double* b, double* c,
                    std::size_t m, std::size_t k, std::size_t n,
                    double scale, bool accumulate) {
    if (!accumulate) std::fill(c, c + m * n, 0.0);
    for (std::size_t p = 0; p < k; ++p) {
        const double* arow = a + p * m;
        const double* brow = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double av = arow[i] * scale;
            if (av == 0.0) continue;
            double* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// backward

inline void backward(const Tensor& loss) {
    if (loss.size() != 1)
        throw ShapeError("backward() expects a scalar loss, got " + shape_str(loss.shape()));
    if (!loss.requires_grad()) return;

    using detail::Node;
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    struct Frame {
        Node* n;
        std::size_t next;
    };
    std::vector<Frame> stack;
    stack.push_back({loss.node().get(), 0});
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.n->parents.size()) {
            Node* p = f.n->parents[f.next++].get();
            if (p->requires_grad && visited.insert(p).second)
                stack.push_back({p, 0});
        } else {
            order.push_back(f.n);
            stack.pop_back();
        }
    }

    loss.node()->ensure_grad();
    loss.node()->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn) {
            n->ensure_grad();
            n->backward_fn(*n);
        }
    }
}

// ---------------------------------------------------------------------------
// elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    auto an = a.node(), bn = b.node();
    return detail::make_op(a.shape(), std::move(out), {a, b}, [an, bn](detail::Node& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i];
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    auto an = a.node(), bn = b.node();
    return detail::make_op(a.shape(), std::move(out), {a, b}, [an, bn](detail::Node& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] -= self.grad[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    auto an = a.node(), bn = b.node();
    return detail::make_op(a.shape(), std::move(out), {a, b}, [an, bn](detail::Node& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                an->grad[i] += self.grad[i] * bn->val[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                bn->grad[i] += self.grad[i] * an->val[i];
        }
    });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "div");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] / b.data()[i];
    auto an = a.node(), bn = b.node();
    return detail::make_op(a.shape(), std::move(out), {a, b}, [an, bn](detail::Node& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                an->grad[i] += self.grad[i] / bn->val[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                bn->grad[i] -= self.grad[i] * an->val[i] / (bn->val[i] * bn->val[i]);
        }
    });
}

inline Tensor neg(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = -a.data()[i];
    auto an = a.node();
    return detail::make_op(a.shape(), std::move(out), {a}, [an](detail::Node& self) {
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] -= self.grad[i];
    });
}

inline Tensor add_scalar(const Tensor& a, double c) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + c;
    auto an = a.node();
    return detail::make_op(a.shape(), std::move(out), {a}, [an](detail::Node& self) {
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    });
}

inline Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
    auto an = a.node();
    return detail::make_op(a.shape(), std::move(out), {a}, [an, c](detail::Node& self) {
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * c;
    });
}

// Broadcast a [1] tensor over every element of x.
inline Tensor add_scalar_tensor(const Tensor& x, const Tensor& s) {
    if (s.size() != 1) throw ShapeError("add_scalar_tensor: scalar operand must be [1]");
    std::vector<double> out(x.size());
    const double c = s.data()[0];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] + c;
    auto xn = x.node(), sn = s.node();
    return detail::make_op(x.shape(), std::move(out), {x, s}, [xn, sn](detail::Node& self) {
        if (xn->requires_grad) {
            xn->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
        }
        if (sn->requires_grad) {
            sn->ensure_grad();
            double acc = 0.0;
            for (double g : self.grad) acc += g;
            sn->grad[0] += acc;
        }
    });
}

inline Tensor sigmoid(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = a.data()[i];
        out[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                          : std::exp(x) / (1.0 + std::exp(x));
    }
    auto an = a.node();
    return detail::make_op(a.shape(), std::move(out), {a}, [an](detail::Node& self) {
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const double y = self.val[i];
            an->grad[i] += self.grad[i] * y * (1.0 - y);
        }
    });
}

// GELU, tanh approximation:
//   gelu(x) = 0.5 x (1 + tanh(c0 (x + c1 x^3))),  c0 = sqrt(2/pi), c1 = 0.044715
inline Tensor gelu(const Tensor& a) {
    constexpr double c0 = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double c1 = 0.044715;
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = a.data()[i];
        out[i] = 0.5 * x * (1.0 + std::tanh(c0 * (x + c1 * x * x * x)));
    }
    auto an = a.node();
    return detail::make_op(a.shape(), std::move(out), {a}, [an](detail::Node& self) {
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const double x = an->val[i];
            const double u = c0 * (x + c1 * x * x * x);
            const double t = std::tanh(u);
            const double du = c0 * (1.0 + 3.0 * c1 * x * x);
            const double d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
            an->grad[i] += self.grad[i] * d;
        }
    });
}

inline Tensor sqrt_t(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(a.data()[i]);
    auto an = a.node();
    return detail::make_op(a.shape(), std::move(out), {a}, [an](detail::Node& self) {
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            an->grad[i] += self.grad[i] * 0.5 / self.val[i];
    });
}

inline Tensor log_t(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(a.data()[i]);
    auto an = a.node();
    return detail::make_op(a.shape(), std::move(out), {a}, [an](detail::Node& self) {
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            if (self.grad[i] == 0.0) continue;  // avoid 0 * inf at zero inputs
            an->grad[i] += self.grad[i] / an->val[i];
        }
    });
}

inline Tensor exp_t(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.data()[i]);
    auto an = a.node();
    return detail::make_op(a.shape(), std::move(out), {a}, [an](detail::Node& self) {
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            an->grad[i] += self.grad[i] * self.val[i];
    });
}

// Subgradient 0 at the kink.
inline Tensor abs_t(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::fabs(a.data()[i]);
    auto an = a.node();
    return detail::make_op(a.shape(), std::move(out), {a}, [an](detail::Node& self) {
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const double x = an->val[i];
            const double s = x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
            an->grad[i] += self.grad[i] * s;
        }
    });
}

// Gradient passes only where the input is strictly above the floor.
inline Tensor clamp_min(const Tensor& a, double floor) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(a.data()[i], floor);
    auto an = a.node();
    return detail::make_op(a.shape(), std::move(out), {a}, [an, floor](detail::Node& self) {
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            if (an->val[i] > floor) an->grad[i] += self.grad[i];
    });
}

// ---------------------------------------------------------------------------
// matmul family

// Batched matrix product: [*, m, k] . [*, k, n] -> [*, m, n]; the leading
// dimensions must match exactly. The result is scaled by `alpha`.
inline Tensor matmul(const Tensor& a, const Tensor& b, double alpha = 1.0) {
    if (a.rank() < 2 || b.rank() < 2)
        throw ShapeError("matmul: operands must have rank >= 2, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
    if (a.rank() != b.rank())
        throw ShapeError("matmul: rank mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    const std::size_t r = a.rank();
    for (std::size_t i = 0; i + 2 < r; ++i)
        if (a.dim(i) != b.dim(i))
            throw ShapeError("matmul: batch dims differ " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    const std::size_t m = a.dim(r - 2), k = a.dim(r - 1);
    const std::size_t k2 = b.dim(r - 2), n = b.dim(r - 1);
    if (k != k2)
        throw ShapeError("matmul: inner dimensions disagree " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    std::size_t batch = 1;
    for (std::size_t i = 0; i + 2 < r; ++i) batch *= a.dim(i);

    Shape out_shape(a.shape());
    out_shape[r - 1] = n;
    std::vector<double> out(batch * m * n);
    for (std::size_t bb = 0; bb < batch; ++bb)
        detail::gemm_nn(a.data().data() + bb * m * k, b.data().data() + bb * k * n,
                        out.data() + bb * m * n, m, k, n, alpha, false);

    auto an = a.node(), bn = b.node();
    return detail::make_op(std::move(out_shape), std::move(out), {a, b},
                           [an, bn, batch, m, k, n, alpha](detail::Node& self) {
        for (std::size_t bb = 0; bb < batch; ++bb) {
            const double* g = self.grad.data() + bb * m * n;
            if (an->requires_grad) {
                an->ensure_grad();
                detail::gemm_nt(g, bn->val.data() + bb * k * n,
                                an->grad.data() + bb * m * k, m, n, k, alpha, true);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                detail::gemm_tn(an->val.data() + bb * m * k, g,
                                bn->grad.data() + bb * k * n, k, m, n, alpha, true);
            }
        }
    });
}

inline Tensor transpose_last2(const Tensor& a) {
    if (a.rank() < 2) throw ShapeError("transpose_last2: rank must be >= 2");
    const std::size_t r = a.rank();
    const std::size_t m = a.dim(r - 2), n = a.dim(r - 1);
    std::size_t batch = 1;
    for (std::size_t i = 0; i + 2 < r; ++i) batch *= a.dim(i);
    Shape out_shape(a.shape());
    std::swap(out_shape[r - 2], out_shape[r - 1]);
    std::vector<double> out(a.size());
    for (std::size_t bb = 0; bb < batch; ++bb) {
        const double* src = a.data().data() + bb * m * n;
        double* dst = out.data() + bb * m * n;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
    }
    auto an = a.node();
    return detail::make_op(std::move(out_shape), std::move(out), {a},
                           [an, batch, m, n](detail::Node& self) {
        an->ensure_grad();
        for (std::size_t bb = 0; bb < batch; ++bb) {
            const double* g = self.grad.data() + bb * m * n;
            double* dst = an->grad.data() + bb * m * n;
            for (std::size_t j = 0; j < n; ++j)
                for (std::size_t i = 0; i < m; ++i) dst[i * n + j] += g[j * m + i];
        }
    });
}

inline Tensor reshape(const Tensor& a, Shape new_shape) {
    if (numel(new_shape) != a.size())
        throw ShapeError("reshape: element count mismatch " + shape_str(a.shape()) + " -> " +
                         shape_str(new_shape));
    std::vector<double> out(a.data());
    auto an = a.node();
    return detail::make_op(std::move(new_shape), std::move(out), {a}, [an](detail::Node& self) {
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    });
}

// [B*L, H*dh] -> [B, H, L, dh]
inline Tensor split_heads(const Tensor& x, std::size_t B, std::size_t L, std::size_t H) {
    if (x.rank() != 2 || x.dim(0) != B * L || x.dim(1) % H != 0)
        throw ShapeError("split_heads: bad input " + shape_str(x.shape()));
    const std::size_t d = x.dim(1), dh = d / H;
    std::vector<double> out(x.size());
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t l = 0; l < L; ++l) {
            const double* src = x.data().data() + (b * L + l) * d;
            for (std::size_t h = 0; h < H; ++h) {
                double* dst = out.data() + ((b * H + h) * L + l) * dh;
                std::copy(src + h * dh, src + (h + 1) * dh, dst);
            }
        }
    auto xn = x.node();
    return detail::make_op({B, H, L, dh}, std::move(out), {x},
                           [xn, B, L, H, d, dh](detail::Node& self) {
        xn->ensure_grad();
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t l = 0; l < L; ++l) {
                double* dst = xn->grad.data() + (b * L + l) * d;
                for (std::size_t h = 0; h < H; ++h) {
                    const double* src = self.grad.data() + ((b * H + h) * L + l) * dh;
                    for (std::size_t j = 0; j < dh; ++j) dst[h * dh + j] += src[j];
                }
            }
    });
}

// [B, H, L, dh] -> [B*L, H*dh]
inline Tensor merge_heads(const Tensor& x) {
    if (x.rank() != 4) throw ShapeError("merge_heads: expected rank-4 input");
    const std::size_t B = x.dim(0), H = x.dim(1), L = x.dim(2), dh = x.dim(3);
    const std::size_t d = H * dh;
    std::vector<double> out(x.size());
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t l = 0; l < L; ++l) {
                const double* src = x.data().data() + ((b * H + h) * L + l) * dh;
                double* dst = out.data() + (b * L + l) * d + h * dh;
                std::copy(src, src + dh, dst);
            }
    auto xn = x.node();
    return detail::make_op({B * L, d}, std::move(out), {x},
                           [xn, B, H, L, dh, d](detail::Node& self) {
        xn->ensure_grad();
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t h = 0; h < H; ++h)
                for (std::size_t l = 0; l < L; ++l) {
                    double* dst = xn->grad.data() + ((b * H + h) * L + l) * dh;
                    const double* src = self.grad.data() + (b * L + l) * d + h * dh;
                    for (std::size_t j = 0; j < dh; ++j) dst[j] += src[j];
                }
    });
}

// ---------------------------------------------------------------------------
// reductions and broadcasts

inline Tensor sum_all(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    auto an = a.node();
    return detail::make_op({1}, {acc}, {a}, [an](detail::Node& self) {
        an->ensure_grad();
        const double g = self.grad[0];
        for (double& gv : an->grad) gv += g;
    });
}

inline Tensor mean_all(const Tensor& a) {
    const double inv = 1.0 / static_cast<double>(a.size());
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    auto an = a.node();
    return detail::make_op({1}, {acc * inv}, {a}, [an, inv](detail::Node& self) {
        an->ensure_grad();
        const double g = self.grad[0] * inv;
        for (double& gv : an->grad) gv += g;
    });
}

// Column means of a [T, D] matrix.
inline Tensor mean_rows(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("mean_rows: expected rank-2, got " + shape_str(a.shape()));
    const std::size_t T = a.dim(0), D = a.dim(1);
    if (T == 0) throw EmptyRegionError("mean_rows over an empty region");
    std::vector<double> out(D, 0.0);
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t j = 0; j < D; ++j) out[j] += a.data()[t * D + j];
    const double inv = 1.0 / static_cast<double>(T);
    for (double& v : out) v *= inv;
    auto an = a.node();
    return detail::make_op({D}, std::move(out), {a}, [an, T, D, inv](detail::Node& self) {
        an->ensure_grad();
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t j = 0; j < D; ++j) an->grad[t * D + j] += self.grad[j] * inv;
    });
}

inline Tensor sum_lastdim(const Tensor& a) {
    if (a.rank() < 1) throw ShapeError("sum_lastdim: rank must be >= 1");
    const std::size_t n = a.dim(a.rank() - 1);
    const std::size_t rows = a.size() / n;
    Shape out_shape(a.shape());
    out_shape[a.rank() - 1] = 1;
    std::vector<double> out(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) out[r] += a.data()[r * n + j];
    auto an = a.node();
    return detail::make_op(std::move(out_shape), std::move(out), {a},
                           [an, rows, n](detail::Node& self) {
        an->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < n; ++j) an->grad[r * n + j] += self.grad[r];
    });
}

inline Tensor mean_lastdim(const Tensor& a) {
    const std::size_t n = a.dim(a.rank() - 1);
    return scale(sum_lastdim(a), 1.0 / static_cast<double>(n));
}

namespace detail {

// Shared implementation of elementwise ops where s has the same shape as x
// except the last dimension is 1 (broadcast across the last dimension).
enum class BcastKind { Add, Sub, Mul, Div };

inline Tensor bcast_last(const Tensor& x, const Tensor& s, BcastKind kind, const char* name) {
    if (x.rank() != s.rank() || s.dim(s.rank() - 1) != 1)
        throw ShapeError(std::string(name) + ": bad broadcast shapes " + shape_str(x.shape()) +
                         " vs " + shape_str(s.shape()));
    for (std::size_t i = 0; i + 1 < x.rank(); ++i)
        if (x.dim(i) != s.dim(i))
            throw ShapeError(std::string(name) + ": bad broadcast shapes " +
                             shape_str(x.shape()) + " vs " + shape_str(s.shape()));
    const std::size_t n = x.dim(x.rank() - 1);
    const std::size_t rows = x.size() / n;
    std::vector<double> out(x.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double sv = s.data()[r];
        const double* xr = x.data().data() + r * n;
        double* orow = out.data() + r * n;
        switch (kind) {
            case BcastKind::Add: for (std::size_t j = 0; j < n; ++j) orow[j] = xr[j] + sv; break;
            case BcastKind::Sub: for (std::size_t j = 0; j < n; ++j) orow[j] = xr[j] - sv; break;
            case BcastKind::Mul: for (std::size_t j = 0; j < n; ++j) orow[j] = xr[j] * sv; break;
            case BcastKind::Div: for (std::size_t j = 0; j < n; ++j) orow[j] = xr[j] / sv; break;
        }
    }
    auto xn = x.node(), sn = s.node();
    return make_op(x.shape(), std::move(out), {x, s},
                   [xn, sn, rows, n, kind](Node& self) {
        for (std::size_t r = 0; r < rows; ++r) {
            const double* g = self.grad.data() + r * n;
            const double sv = sn->val[r];
            if (xn->requires_grad) {
                xn->ensure_grad();
                double* xg = xn->grad.data() + r * n;
                switch (kind) {
                    case BcastKind::Add:
                    case BcastKind::Sub:
                        for (std::size_t j = 0; j < n; ++j) xg[j] += g[j];
                        break;
                    case BcastKind::Mul:
                        for (std::size_t j = 0; j < n; ++j) xg[j] += g[j] * sv;
                        break;
                    case BcastKind::Div:
                        for (std::size_t j = 0; j < n; ++j) xg[j] += g[j] / sv;
                        break;
                }
            }
            if (sn->requires_grad) {
                sn->ensure_grad();
                const double* xv = xn->val.data() + r * n;
                double acc = 0.0;
                switch (kind) {
                    case BcastKind::Add: for (std::size_t j = 0; j < n; ++j) acc += g[j]; break;
                    case BcastKind::Sub: for (std::size_t j = 0; j < n; ++j) acc -= g[j]; break;
                    case BcastKind::Mul: for (std::size_t j = 0; j < n; ++j) acc += g[j] * xv[j]; break;
                    case BcastKind::Div:
                        for (std::size_t j = 0; j < n; ++j) acc -= g[j] * xv[j] / (sv * sv);
                        break;
                }
                sn->grad[r] += acc;
            }
        }
    });
}

}  // namespace detail

inline Tensor add_bcast_last(const Tensor& x, const Tensor& s) {
    return detail::bcast_last(x, s, detail::BcastKind::Add, "add_bcast_last");
}
inline Tensor sub_bcast_last(const Tensor& x, const Tensor& s) {
    return detail::bcast_last(x, s, detail::BcastKind::Sub, "sub_bcast_last");
}
inline Tensor mul_bcast_last(const Tensor& x, const Tensor& s) {
    return detail::bcast_last(x, s, detail::BcastKind::Mul, "mul_bcast_last");
}
inline Tensor div_bcast_last(const Tensor& x, const Tensor& s) {
    return detail::bcast_last(x, s, detail::BcastKind::Div, "div_bcast_last");
}

// Add a [d] vector to every row of x[..., d].
inline Tensor add_lastdim_vec(const Tensor& x, const Tensor& v) {
    const std::size_t d = x.dim(x.rank() - 1);
    if (v.rank() != 1 || v.dim(0) != d)
        throw ShapeError("add_lastdim_vec: vector " + shape_str(v.shape()) +
                         " does not match last dim of " + shape_str(x.shape()));
    const std::size_t rows = x.size() / d;
    std::vector<double> out(x.size());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = x.data()[r * d + j] + v.data()[j];
    auto xn = x.node(), vn = v.node();
    return detail::make_op(x.shape(), std::move(out), {x, v},
                           [xn, vn, rows, d](detail::Node& self) {
        if (xn->requires_grad) {
            xn->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
        }
        if (vn->requires_grad) {
            vn->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < d; ++j) vn->grad[j] += self.grad[r * d + j];
        }
    });
}

// Tile a [d] vector into R identical rows.
inline Tensor broadcast_rows(const Tensor& v, std::size_t rows) {
    if (v.rank() != 1) throw ShapeError("broadcast_rows: expected rank-1, got " + shape_str(v.shape()));
    const std::size_t d = v.dim(0);
    std::vector<double> out(rows * d);
    for (std::size_t r = 0; r < rows; ++r)
        std::copy(v.data().begin(), v.data().end(), out.begin() + r * d);
    auto vn = v.node();
    return detail::make_op({rows, d}, std::move(out), {v}, [vn, rows, d](detail::Node& self) {
        vn->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) vn->grad[j] += self.grad[r * d + j];
    });
}

// [B, d] -> [B*L, d], each row repeated L consecutive times.
inline Tensor repeat_rows(const Tensor& x, std::size_t L) {
    if (x.rank() != 2) throw ShapeError("repeat_rows: expected rank-2, got " + shape_str(x.shape()));
    const std::size_t B = x.dim(0), d = x.dim(1);
    std::vector<double> out(B * L * d);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t l = 0; l < L; ++l)
            std::copy(x.data().begin() + b * d, x.data().begin() + (b + 1) * d,
                      out.begin() + (b * L + l) * d);
    auto xn = x.node();
    return detail::make_op({B * L, d}, std::move(out), {x}, [xn, B, L, d](detail::Node& self) {
        xn->ensure_grad();
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t l = 0; l < L; ++l)
                for (std::size_t j = 0; j < d; ++j)
                    xn->grad[b * d + j] += self.grad[(b * L + l) * d + j];
    });
}

// Whole-matrix tiling: [R, C] -> [times*R, C].
inline Tensor tile_rows(const Tensor& x, std::size_t times) {
    if (x.rank() != 2) throw ShapeError("tile_rows: expected rank-2, got " + shape_str(x.shape()));
    const std::size_t R = x.dim(0), C = x.dim(1);
    std::vector<double> out(times * R * C);
    for (std::size_t t = 0; t < times; ++t)
        std::copy(x.data().begin(), x.data().end(), out.begin() + t * R * C);
    auto xn = x.node();
    return detail::make_op({times * R, C}, std::move(out), {x},
                           [xn, times, R, C](detail::Node& self) {
        xn->ensure_grad();
        for (std::size_t t = 0; t < times; ++t)
            for (std::size_t i = 0; i < R * C; ++i) xn->grad[i] += self.grad[t * R * C + i];
    });
}

// Multiply every element of x by a [1] tensor.
inline Tensor mul_scalar_tensor(const Tensor& x, const Tensor& s) {
    if (s.size() != 1) throw ShapeError("mul_scalar_tensor: scalar operand must be [1]");
    const double c = s.data()[0];
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * c;
    auto xn = x.node(), sn = s.node();
    return detail::make_op(x.shape(), std::move(out), {x, s}, [xn, sn](detail::Node& self) {
        if (xn->requires_grad) {
            xn->ensure_grad();
            const double c = sn->val[0];
            for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i] * c;
        }
        if (sn->requires_grad) {
            sn->ensure_grad();
            double acc = 0.0;
            for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * xn->val[i];
            sn->grad[0] += acc;
        }
    });
}

// Row-gated residual add: rows with gate 1 become x + delta, rows with gate 0
// are copied from x bitwise (no arithmetic touches them).
inline Tensor add_rows_where(const Tensor& x, const Tensor& delta,
                             const std::vector<bool>& row_gate) {
    detail::check_same_shape(x, delta, "add_rows_where");
    if (x.rank() != 2 || row_gate.size() != x.dim(0))
        throw ShapeError("add_rows_where: gate length does not match rows of " +
                         shape_str(x.shape()));
    const std::size_t R = x.dim(0), C = x.dim(1);
    std::vector<double> out(x.data());
    for (std::size_t r = 0; r < R; ++r) {
        if (!row_gate[r]) continue;
        for (std::size_t j = 0; j < C; ++j) out[r * C + j] += delta.data()[r * C + j];
    }
    auto xn = x.node(), dn = delta.node();
    auto gate = std::make_shared<std::vector<bool>>(row_gate);
    return detail::make_op(x.shape(), std::move(out), {x, delta},
                           [xn, dn, gate, R, C](detail::Node& self) {
        if (xn->requires_grad) {
            xn->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
        }
        if (dn->requires_grad) {
            dn->ensure_grad();
            for (std::size_t r = 0; r < R; ++r) {
                if (!(*gate)[r]) continue;
                for (std::size_t j = 0; j < C; ++j)
                    dn->grad[r * C + j] += self.grad[r * C + j];
            }
        }
    });
}

// ---------------------------------------------------------------------------
// indexing

inline Tensor gather_rows(const Tensor& m, const std::vector<std::size_t>& idx) {
    if (m.rank() != 2) throw ShapeError("gather_rows: expected rank-2, got " + shape_str(m.shape()));
    const std::size_t R = m.dim(0), C = m.dim(1);
    std::vector<double> out(idx.size() * C);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= R)
            throw ShapeError("gather_rows: index " + std::to_string(idx[i]) + " out of range " +
                             std::to_string(R));
        std::copy(m.data().begin() + idx[i] * C, m.data().begin() + (idx[i] + 1) * C,
                  out.begin() + i * C);
    }
    auto mn = m.node();
    auto saved_idx = std::make_shared<std::vector<std::size_t>>(idx);
    return detail::make_op({idx.size(), C}, std::move(out), {m},
                           [mn, saved_idx, C](detail::Node& self) {
        mn->ensure_grad();
        for (std::size_t i = 0; i < saved_idx->size(); ++i) {
            double* dst = mn->grad.data() + (*saved_idx)[i] * C;
            const double* src = self.grad.data() + i * C;
            for (std::size_t j = 0; j < C; ++j) dst[j] += src[j];
        }
    });
}

// Copy of base with rows idx[i] replaced by patch row i.
inline Tensor overwrite_rows(const Tensor& base, const Tensor& patch,
                             const std::vector<std::size_t>& idx) {
    if (base.rank() != 2 || patch.rank() != 2 || base.dim(1) != patch.dim(1))
        throw ShapeError("overwrite_rows: incompatible shapes " + shape_str(base.shape()) +
                         " vs " + shape_str(patch.shape()));
    if (patch.dim(0) != idx.size())
        throw ShapeError("overwrite_rows: index count does not match patch rows");
    const std::size_t C = base.dim(1);
    std::vector<double> out(base.data());
    for (std::size_t i = 0; i < idx.size(); ++i)
        std::copy(patch.data().begin() + i * C, patch.data().begin() + (i + 1) * C,
                  out.begin() + idx[i] * C);
    auto bn = base.node(), pn = patch.node();
    auto saved_idx = std::make_shared<std::vector<std::size_t>>(idx);
    return detail::make_op(base.shape(), std::move(out), {base, patch},
                           [bn, pn, saved_idx, C](detail::Node& self) {
        if (bn->requires_grad) {
            bn->ensure_grad();
            std::vector<bool> overwritten(bn->val.size() / C, false);
            for (std::size_t r : *saved_idx) overwritten[r] = true;
            for (std::size_t r = 0; r < overwritten.size(); ++r) {
                if (overwritten[r]) continue;
                for (std::size_t j = 0; j < C; ++j)
                    bn->grad[r * C + j] += self.grad[r * C + j];
            }
        }
        if (pn->requires_grad) {
            pn->ensure_grad();
            for (std::size_t i = 0; i < saved_idx->size(); ++i)
                for (std::size_t j = 0; j < C; ++j)
                    pn->grad[i * C + j] += self.grad[(*saved_idx)[i] * C + j];
        }
    });
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no operands");
    const std::size_t C = parts[0].dim(1);
    std::size_t R = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != 2 || p.dim(1) != C)
            throw ShapeError("concat_rows: incompatible operand " + shape_str(p.shape()));
        R += p.dim(0);
    }
    std::vector<double> out;
    out.reserve(R * C);
    for (const Tensor& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    std::vector<std::shared_ptr<detail::Node>> nodes;
    for (const Tensor& p : parts) nodes.push_back(p.node());
    return detail::make_op({R, C}, std::move(out), parts, [nodes](detail::Node& self) {
        std::size_t off = 0;
        for (auto& pn : nodes) {
            if (pn->requires_grad) {
                pn->ensure_grad();
                for (std::size_t i = 0; i < pn->val.size(); ++i)
                    pn->grad[i] += self.grad[off + i];
            }
            off += pn->val.size();
        }
    });
}

// Rectangular slice of the trailing two dimensions.
inline Tensor slice_last2(const Tensor& x, std::size_t r0, std::size_t rn,
                          std::size_t c0, std::size_t cn) {
    if (x.rank() < 2) throw ShapeError("slice_last2: rank must be >= 2");
    const std::size_t r = x.rank();
    const std::size_t R = x.dim(r - 2), C = x.dim(r - 1);
    if (r0 + rn > R || c0 + cn > C)
        throw ShapeError("slice_last2: window out of range for " + shape_str(x.shape()));
    std::size_t batch = 1;
    for (std::size_t i = 0; i + 2 < r; ++i) batch *= x.dim(i);
    Shape out_shape(x.shape());
    out_shape[r - 2] = rn;
    out_shape[r - 1] = cn;
    std::vector<double> out(batch * rn * cn);
    for (std::size_t bb = 0; bb < batch; ++bb)
        for (std::size_t i = 0; i < rn; ++i) {
            const double* src = x.data().data() + (bb * R + r0 + i) * C + c0;
            std::copy(src, src + cn, out.data() + (bb * rn + i) * cn);
        }
    auto xn = x.node();
    return detail::make_op(std::move(out_shape), std::move(out), {x},
                           [xn, batch, R, C, r0, rn, c0, cn](detail::Node& self) {
        xn->ensure_grad();
        for (std::size_t bb = 0; bb < batch; ++bb)
            for (std::size_t i = 0; i < rn; ++i) {
                double* dst = xn->grad.data() + (bb * R + r0 + i) * C + c0;
                const double* src = self.grad.data() + (bb * rn + i) * cn;
                for (std::size_t j = 0; j < cn; ++j) dst[j] += src[j];
            }
    });
}

inline Tensor slice_rows(const Tensor& x, std::size_t r0, std::size_t rn) {
    return slice_last2(x, r0, rn, 0, x.dim(x.rank() - 1));
}

// ---------------------------------------------------------------------------
// softmax / normalization / losses

// Row-wise softmax over the last dimension with max-subtraction. -inf entries
// map to exactly 0; a row of only -inf raises MaskedRowError.
inline Tensor softmax_lastdim(const Tensor& x) {
    const std::size_t n = x.dim(x.rank() - 1);
    const std::size_t rows = x.size() / n;
    std::vector<double> out(x.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data().data() + r * n;
        double m = kNegInf;
        for (std::size_t j = 0; j < n; ++j) m = std::max(m, xr[j]);
        if (m == kNegInf)
            throw MaskedRowError("softmax row " + std::to_string(r) + " is entirely -inf");
        double z = 0.0;
        double* orow = out.data() + r * n;
        for (std::size_t j = 0; j < n; ++j) {
            orow[j] = xr[j] == kNegInf ? 0.0 : std::exp(xr[j] - m);
            z += orow[j];
        }
        const double inv = 1.0 / z;
        for (std::size_t j = 0; j < n; ++j) orow[j] *= inv;
    }
    auto xn = x.node();
    return detail::make_op(x.shape(), std::move(out), {x}, [xn, rows, n](detail::Node& self) {
        xn->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* y = self.val.data() + r * n;
            const double* g = self.grad.data() + r * n;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += y[j] * g[j];
            double* xg = xn->grad.data() + r * n;
            for (std::size_t j = 0; j < n; ++j) xg[j] += y[j] * (g[j] - dot);
        }
    });
}

// Layer normalization over the last dimension with affine gain/bias.
inline Tensor layer_norm_lastdim(const Tensor& x, const Tensor& gain, const Tensor& bias,
                                 double eps = 1e-5) {
    const std::size_t d = x.dim(x.rank() - 1);
    if (gain.size() != d || bias.size() != d)
        throw ShapeError("layer_norm_lastdim: gain/bias must have length " + std::to_string(d));
    const std::size_t rows = x.size() / d;
    std::vector<double> out(x.size());
    auto xhat = std::make_shared<std::vector<double>>(x.size());
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data().data() + r * d;
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += xr[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = xr[j] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (std::size_t j = 0; j < d; ++j) {
            const double h = (xr[j] - mean) * is;
            (*xhat)[r * d + j] = h;
            out[r * d + j] = h * gain.data()[j] + bias.data()[j];
        }
    }
    auto xn = x.node(), gn = gain.node(), bn = bias.node();
    return detail::make_op(x.shape(), std::move(out), {x, gain, bias},
                           [xn, gn, bn, xhat, inv_std, rows, d](detail::Node& self) {
        for (std::size_t r = 0; r < rows; ++r) {
            const double* g = self.grad.data() + r * d;
            const double* h = xhat->data() + r * d;
            if (gn->requires_grad) {
                gn->ensure_grad();
                for (std::size_t j = 0; j < d; ++j) gn->grad[j] += g[j] * h[j];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t j = 0; j < d; ++j) bn->grad[j] += g[j];
            }
            if (xn->requires_grad) {
                xn->ensure_grad();
                double sum_gy = 0.0, sum_gyh = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    const double gy = g[j] * gn->val[j];
                    sum_gy += gy;
                    sum_gyh += gy * h[j];
                }
                const double is = (*inv_std)[r];
                const double invd = 1.0 / static_cast<double>(d);
                double* xg = xn->grad.data() + r * d;
                for (std::size_t j = 0; j < d; ++j) {
                    const double gy = g[j] * gn->val[j];
                    xg[j] += is * (gy - invd * sum_gy - h[j] * invd * sum_gyh);
                }
            }
        }
    });
}

// Mean token-level cross-entropy of target ids under row logits.
inline Tensor cross_entropy_rows(const Tensor& logits, const std::vector<std::size_t>& targets) {
    if (logits.rank() != 2) throw ShapeError("cross_entropy_rows: expected rank-2 logits");
    const std::size_t R = logits.dim(0), V = logits.dim(1);
    if (targets.size() != R)
        throw ShapeError("cross_entropy_rows: " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(R) + " rows");
    auto probs = std::make_shared<std::vector<double>>(logits.size());
    double total = 0.0;
    for (std::size_t r = 0; r < R; ++r) {
        const double* xr = logits.data().data() + r * V;
        double m = xr[0];
        for (std::size_t j = 1; j < V; ++j) m = std::max(m, xr[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < V; ++j) {
            const double e = std::exp(xr[j] - m);
            (*probs)[r * V + j] = e;
            z += e;
        }
        const double inv = 1.0 / z;
        for (std::size_t j = 0; j < V; ++j) (*probs)[r * V + j] *= inv;
        if (targets[r] >= V)
            throw ShapeError("cross_entropy_rows: target id out of vocabulary");
        total += -(xr[targets[r]] - m - std::log(z));
    }
    auto ln = logits.node();
    auto saved_t = std::make_shared<std::vector<std::size_t>>(targets);
    const double invR = 1.0 / static_cast<double>(R);
    return detail::make_op({1}, {total * invR}, {logits},
                           [ln, probs, saved_t, R, V, invR](detail::Node& self) {
        ln->ensure_grad();
        const double g = self.grad[0] * invR;
        for (std::size_t r = 0; r < R; ++r) {
            double* dst = ln->grad.data() + r * V;
            const double* p = probs->data() + r * V;
            for (std::size_t j = 0; j < V; ++j) dst[j] += g * p[j];
            dst[(*saved_t)[r]] -= g;
        }
    });
}

// ---------------------------------------------------------------------------
// gradient-routing primitives

// Value copy that contributes zero gradient upstream.
inline Tensor stop_gradient(const Tensor& x) {
    return Tensor::from(x.shape(), x.data(), false);
}

// Straight-through estimator: forward is exactly 1[y > 0.5] (ties drop to 0),
// backward passes the incoming gradient to y unchanged.
inline Tensor straight_through(const Tensor& y) {
    std::vector<double> out(y.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = y.data()[i] > 0.5 ? 1.0 : 0.0;
    auto yn = y.node();
    return detail::make_op(y.shape(), std::move(out), {y}, [yn](detail::Node& self) {
        yn->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) yn->grad[i] += self.grad[i];
    });
}

// Non-differentiable indicator(x > threshold); used on inference paths.
inline Tensor threshold_gt(const Tensor& x, double threshold) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] > threshold ? 1.0 : 0.0;
    return Tensor::from(x.shape(), std::move(out), false);
}

// Additive attention-logit form of a keep mask. In soft mode this is log(m)
// (m > 0 assumed); in hard mode, exactly 0 for kept entries and -inf for
// dropped ones, with gradient passed through unchanged at kept positions.
// Dropped positions always receive zero upstream gradient from softmax.
inline Tensor keep_to_additive(const Tensor& m, bool soft) {
    if (soft) return log_t(m);
    std::vector<double> out(m.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = m.data()[i] > 0.5 ? 0.0 : kNegInf;
    auto mn = m.node();
    return detail::make_op(m.shape(), std::move(out), {m}, [mn](detail::Node& self) {
        mn->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            if (mn->val[i] > 0.5) mn->grad[i] += self.grad[i];
    });
}

// ---------------------------------------------------------------------------
// fused model ops

// Weighted mean of rows per batch element: out[b] = sum_i w[b,i] H[b,i,:] /
// sum_i w[b,i]; a batch element with zero total weight yields a zero row and
// propagates no gradient.
inline Tensor masked_row_mean(const Tensor& H, const Tensor& w) {
    if (H.rank() != 3 || w.rank() != 2 || H.dim(0) != w.dim(0) || H.dim(1) != w.dim(1))
        throw ShapeError("masked_row_mean: incompatible shapes " + shape_str(H.shape()) +
                         " vs " + shape_str(w.shape()));
    const std::size_t B = H.dim(0), N = H.dim(1), D = H.dim(2);
    std::vector<double> out(B * D, 0.0);
    auto denom = std::make_shared<std::vector<double>>(B, 0.0);
    for (std::size_t b = 0; b < B; ++b) {
        double s = 0.0;
        for (std::size_t i = 0; i < N; ++i) s += w.data()[b * N + i];
        (*denom)[b] = s;
        if (s == 0.0) continue;
        for (std::size_t i = 0; i < N; ++i) {
            const double wi = w.data()[b * N + i];
            if (wi == 0.0) continue;
            const double* h = H.data().data() + (b * N + i) * D;
            for (std::size_t j = 0; j < D; ++j) out[b * D + j] += wi * h[j];
        }
        for (std::size_t j = 0; j < D; ++j) out[b * D + j] /= s;
    }
    auto hn = H.node(), wn = w.node();
    return detail::make_op({B, D}, std::move(out), {H, w},
                           [hn, wn, denom, B, N, D](detail::Node& self) {
        for (std::size_t b = 0; b < B; ++b) {
            const double s = (*denom)[b];
            if (s == 0.0) continue;
            const double* g = self.grad.data() + b * D;
            const double* ob = self.val.data() + b * D;
            if (hn->requires_grad) {
                hn->ensure_grad();
                for (std::size_t i = 0; i < N; ++i) {
                    const double wi = wn->val[b * N + i];
                    if (wi == 0.0) continue;
                    double* dst = hn->grad.data() + (b * N + i) * D;
                    const double c = wi / s;
                    for (std::size_t j = 0; j < D; ++j) dst[j] += g[j] * c;
                }
            }
            if (wn->requires_grad) {
                wn->ensure_grad();
                for (std::size_t i = 0; i < N; ++i) {
                    const double* h = hn->val.data() + (b * N + i) * D;
                    double acc = 0.0;
                    for (std::size_t j = 0; j < D; ++j) acc += g[j] * (h[j] - ob[j]);
                    wn->grad[b * N + i] += acc / s;
                }
            }
        }
    });
}

// Causal + key-masked softmax over attention scores.
//
//   scores:   [B, H, Lq, Lk]
//   qpos/kpos: original sequence positions; key j is visible to query i iff
//              kpos[j] <= qpos[i]
//   key_add:  optional [B, Nk] additive mask applied to key columns
//              vis_start .. vis_start+Nk-1 (0 or -inf in hard mode, log m in
//              soft mode)
inline Tensor attention_softmax(const Tensor& scores,
                                const std::vector<std::size_t>& qpos,
                                const std::vector<std::size_t>& kpos,
                                const Tensor* key_add = nullptr,
                                std::size_t vis_start = 0) {
    if (scores.rank() != 4) throw ShapeError("attention_softmax: expected rank-4 scores");
    const std::size_t B = scores.dim(0), H = scores.dim(1), Lq = scores.dim(2), Lk = scores.dim(3);
    if (qpos.size() != Lq || kpos.size() != Lk)
        throw ShapeError("attention_softmax: position vectors do not match score shape");
    std::size_t Nk = 0;
    if (key_add) {
        if (key_add->rank() != 2 || key_add->dim(0) != B)
            throw ShapeError("attention_softmax: bad key mask shape " +
                             shape_str(key_add->shape()));
        Nk = key_add->dim(1);
        if (vis_start + Nk > Lk)
            throw ShapeError("attention_softmax: key mask window exceeds key count");
    }
    std::vector<double> out(scores.size());
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t i = 0; i < Lq; ++i) {
                const std::size_t base = ((b * H + h) * Lq + i) * Lk;
                const double* xr = scores.data().data() + base;
                double m = kNegInf;
                for (std::size_t j = 0; j < Lk; ++j) {
                    if (kpos[j] > qpos[i]) continue;
                    double v = xr[j];
                    if (key_add && j >= vis_start && j < vis_start + Nk)
                        v += key_add->data()[b * Nk + (j - vis_start)];
                    if (v > m) m = v;
                }
                if (m == kNegInf)
                    throw MaskedRowError("attention row with no visible keys");
                double z = 0.0;
                double* orow = out.data() + base;
                for (std::size_t j = 0; j < Lk; ++j) {
                    double v;
                    if (kpos[j] > qpos[i]) {
                        v = kNegInf;
                    } else {
                        v = xr[j];
                        if (key_add && j >= vis_start && j < vis_start + Nk)
                            v += key_add->data()[b * Nk + (j - vis_start)];
                    }
                    const double e = v == kNegInf ? 0.0 : std::exp(v - m);
                    orow[j] = e;
                    z += e;
                }
                const double inv = 1.0 / z;
                for (std::size_t j = 0; j < Lk; ++j) orow[j] *= inv;
            }

    auto sn = scores.node();
    std::shared_ptr<detail::Node> kn = key_add ? key_add->node() : nullptr;
    std::vector<Tensor> parents = {scores};
    if (key_add) parents.push_back(*key_add);
    return detail::make_op(scores.shape(), std::move(out), std::move(parents),
                           [sn, kn, B, H, Lq, Lk, Nk, vis_start](detail::Node& self) {
        const bool want_scores = sn->requires_grad;
        const bool want_mask = kn && kn->requires_grad;
        if (want_scores) sn->ensure_grad();
        if (want_mask) kn->ensure_grad();
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t h = 0; h < H; ++h)
                for (std::size_t i = 0; i < Lq; ++i) {
                    const std::size_t base = ((b * H + h) * Lq + i) * Lk;
                    const double* y = self.val.data() + base;
                    const double* g = self.grad.data() + base;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < Lk; ++j) dot += y[j] * g[j];
                    for (std::size_t j = 0; j < Lk; ++j) {
                        const double ds = y[j] * (g[j] - dot);
                        if (ds == 0.0) continue;
                        if (want_scores) sn->grad[base + j] += ds;
                        if (want_mask && j >= vis_start && j < vis_start + Nk)
                            kn->grad[b * Nk + (j - vis_start)] += ds;
                    }
                }
    });
}

// Mean attention received by each of `ncols` key columns (starting at
// col_start) from heads x the first row_counts[b] query rows (starting at
// row_start): out[b, c] = mean_{h, r} probs[b, h, row_start + r, col_start + c].
inline Tensor mean_over_heads_and_rows(const Tensor& probs, std::size_t row_start,
                                       const std::vector<std::size_t>& row_counts,
                                       std::size_t col_start, std::size_t ncols) {
    if (probs.rank() != 4) throw ShapeError("mean_over_heads_and_rows: expected rank-4 input");
    const std::size_t B = probs.dim(0), H = probs.dim(1), Lq = probs.dim(2), Lk = probs.dim(3);
    if (row_counts.size() != B)
        throw ShapeError("mean_over_heads_and_rows: row_counts size mismatch");
    if (col_start + ncols > Lk)
        throw ShapeError("mean_over_heads_and_rows: column window out of range");
    std::vector<double> out(B * ncols, 0.0);
    for (std::size_t b = 0; b < B; ++b) {
        const std::size_t rows = row_counts[b];
        if (rows == 0 || row_start + rows > Lq)
            throw ShapeError("mean_over_heads_and_rows: bad row window");
        const double inv = 1.0 / static_cast<double>(H * rows);
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t r = 0; r < rows; ++r) {
                const double* src =
                    probs.data().data() + ((b * H + h) * Lq + row_start + r) * Lk + col_start;
                for (std::size_t c = 0; c < ncols; ++c) out[b * ncols + c] += src[c] * inv;
            }
    }
    auto pn = probs.node();
    auto saved_counts = std::make_shared<std::vector<std::size_t>>(row_counts);
    return detail::make_op({B, ncols}, std::move(out), {probs},
                           [pn, saved_counts, B, H, Lq, Lk, row_start, col_start,
                            ncols](detail::Node& self) {
        pn->ensure_grad();
        for (std::size_t b = 0; b < B; ++b) {
            const std::size_t rows = (*saved_counts)[b];
            const double inv = 1.0 / static_cast<double>(H * rows);
            for (std::size_t h = 0; h < H; ++h)
                for (std::size_t r = 0; r < rows; ++r) {
                    double* dst =
                        pn->grad.data() + ((b * H + h) * Lq + row_start + r) * Lk + col_start;
                    const double* g = self.grad.data() + b * ncols;
                    for (std::size_t c = 0; c < ncols; ++c) dst[c] += g[c] * inv;
                }
        }
    });
}

// ---------------------------------------------------------------------------
// stochastic primitives

// I.i.d. standard-logistic noise: log(u) - log(1-u), u ~ U(0,1) clamped to
// [1e-7, 1-1e-7].
inline Tensor logistic_noise(Rng& rng, Shape shape) {
    std::vector<double> d(numel(shape));
    for (double& x : d) x = rng.logistic();
    return Tensor::from(std::move(shape), std::move(d), false);
}

// ---------------------------------------------------------------------------
// misc

inline void check_finite(const Tensor& t, const std::string& name) {
    for (double v : t.data())
        if (!std::isfinite(v))
            throw NumericError("non-finite value in " + name);
}

inline Tensor linear(const Tensor& x, const Tensor& W, const Tensor* bias = nullptr) {
    Tensor y = matmul(x, W);
    if (bias) y = add_lastdim_vec(y, *bias);
    return y;
}

}  // namespace rcp
