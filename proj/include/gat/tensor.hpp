#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "gat/errors.hpp"
#include "gat/rng.hpp"

namespace gat {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

class Tape;

// Dense tensor of 64-bit reals, row-major, rank 1..3. The payload is
// immutable and shared, so copies are cheap and safe to move across
// threads. A tensor recorded on a tape carries its node id; constants
// have node() == -1.
class Tensor {
   public:
    Tensor() = default;

    Tensor(Shape shape, std::shared_ptr<const std::vector<double>> data, Tape* tape, int node)
        : shape_(std::move(shape)), data_(std::move(data)), tape_(tape), node_(node) {
        if (!data_ || numel(shape_) != data_->size()) {
            throw ContractError("tensor data length does not match shape " + shape_str(shape_));
        }
    }

    static Tensor of(Shape shape, std::vector<double> data) {
        return Tensor(std::move(shape),
                      std::make_shared<const std::vector<double>>(std::move(data)), nullptr, -1);
    }

    static Tensor zeros(Shape shape) {
        std::vector<double> d(numel(shape), 0.0);
        return of(std::move(shape), std::move(d));
    }

    static Tensor full(Shape shape, double v) {
        std::vector<double> d(numel(shape), v);
        return of(std::move(shape), std::move(d));
    }

    static Tensor scalar(double v) { return of({1}, {v}); }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_ ? data_->size() : 0; }
    bool empty() const { return !data_; }

    std::size_t rows() const { return rank() == 2 ? shape_[0] : 1; }
    std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }

    const std::vector<double>& vec() const { return *data_; }
    std::span<const double> data() const { return {data_->data(), data_->size()}; }
    std::shared_ptr<const std::vector<double>> payload() const { return data_; }

    double operator[](std::size_t i) const { return (*data_)[i]; }
    double at(std::size_t i, std::size_t j) const { return (*data_)[i * cols() + j]; }

    double item() const {
        if (size() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape_));
        return (*data_)[0];
    }

    Tape* tape() const { return tape_; }
    int node() const { return node_; }
    bool on_tape() const { return node_ >= 0; }

    // same shape and bit-identical payload
    bool identical(const Tensor& o) const { return shape_ == o.shape_ && *data_ == *o.data_; }

   private:
    Shape shape_;
    std::shared_ptr<const std::vector<double>> data_;
    Tape* tape_ = nullptr;
    int node_ = -1;
};

inline bool all_finite(const Tensor& t) {
    for (double v : t.data())
        if (!std::isfinite(v)) return false;
    return true;
}

inline void require_finite(const Tensor& t, const std::string& what) {
    if (!all_finite(t)) throw NumericError("non-finite value in " + what);
}

// Gradient buffers keyed by tape node id. Buffers are allocated lazily;
// untouched nodes report no gradient.
class GradMap {
   public:
    explicit GradMap(std::vector<std::size_t> sizes)
        : sizes_(std::move(sizes)), bufs_(sizes_.size()), touched_(sizes_.size(), 0) {}

    std::vector<double>& accum(int node) {
        if (!touched_[node]) {
            bufs_[node].assign(sizes_[node], 0.0);
            touched_[node] = 1;
        }
        return bufs_[node];
    }

    bool touched(int node) const { return node >= 0 && touched_[node]; }

    const std::vector<double>* find(int node) const {
        if (node < 0 || static_cast<std::size_t>(node) >= bufs_.size() || !touched_[node])
            return nullptr;
        return &bufs_[node];
    }

    const std::vector<double>* of(const Tensor& t) const { return find(t.node()); }

   private:
    std::vector<std::size_t> sizes_;
    std::vector<std::vector<double>> bufs_;
    std::vector<char> touched_;
};

// Append-only record of differentiable operations. Backward replays the
// nodes in strict reverse append order; node inputs always have smaller
// ids than the node itself, so one sweep suffices. A tape is owned by a
// single evaluation and is not thread-safe; run concurrent evaluations
// on separate tapes.
class Tape {
   public:
    using BackwardFn = std::function<void(std::span<const double> up, GradMap& g)>;

    // register a leaf (parameter/input); shares the payload, no copy
    Tensor watch(const Tensor& t) {
        const int id = record(t.size(), nullptr);
        return Tensor(t.shape(), t.payload(), this, id);
    }

    int record(std::size_t out_size, BackwardFn fn) {
        nodes_.push_back(Node{out_size, std::move(fn)});
        return static_cast<int>(nodes_.size()) - 1;
    }

    std::size_t node_count() const { return nodes_.size(); }

    GradMap backward(const Tensor& loss) const {
        if (loss.tape() != this || !loss.on_tape())
            throw ContractError("backward: loss is not on this tape");
        if (loss.size() != 1)
            throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
        std::vector<std::size_t> sizes(nodes_.size());
        for (std::size_t i = 0; i < nodes_.size(); ++i) sizes[i] = nodes_[i].out_size;
        GradMap grads(std::move(sizes));
        grads.accum(loss.node())[0] = 1.0;
        for (int id = loss.node(); id >= 0; --id) {
            if (!grads.touched(id) || !nodes_[id].backward) continue;
            const std::vector<double>& up = *grads.find(id);
            nodes_[id].backward(std::span<const double>(up.data(), up.size()), grads);
        }
        return grads;
    }

   private:
    struct Node {
        std::size_t out_size;
        BackwardFn backward;
    };

    std::vector<Node> nodes_;
};

namespace detail {

inline Tape* joint_tape(std::initializer_list<const Tensor*> ts) {
    Tape* tape = nullptr;
    for (const Tensor* t : ts) {
        if (!t->on_tape()) continue;
        if (tape && tape != t->tape())
            throw ContractError("operands recorded on different tapes");
        tape = t->tape();
    }
    return tape;
}

inline Tensor make_result(Shape shape, std::vector<double> data, Tape* tape,
                          Tape::BackwardFn fn) {
    auto payload = std::make_shared<const std::vector<double>>(std::move(data));
    int node = -1;
    if (tape) node = tape->record(payload->size(), std::move(fn));
    return Tensor(std::move(shape), std::move(payload), tape, node);
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---- arithmetic ----

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    Tape* tape = detail::joint_tape({&a, &b});
    Tape::BackwardFn fn;
    if (tape) {
        fn = [an = a.node(), bn = b.node()](std::span<const double> up, GradMap& g) {
            if (an >= 0) {
                auto& ga = g.accum(an);
                for (std::size_t i = 0; i < up.size(); ++i) ga[i] += up[i];
            }
            if (bn >= 0) {
                auto& gb = g.accum(bn);
                for (std::size_t i = 0; i < up.size(); ++i) gb[i] += up[i];
            }
        };
    }
    return detail::make_result(a.shape(), std::move(out), tape, std::move(fn));
}

inline Tensor hadamard(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "hadamard");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    Tape* tape = detail::joint_tape({&a, &b});
    Tape::BackwardFn fn;
    if (tape) {
        fn = [an = a.node(), bn = b.node(), ad = a.payload(), bd = b.payload()](
                 std::span<const double> up, GradMap& g) {
            if (an >= 0) {
                auto& ga = g.accum(an);
                for (std::size_t i = 0; i < up.size(); ++i) ga[i] += up[i] * (*bd)[i];
            }
            if (bn >= 0) {
                auto& gb = g.accum(bn);
                for (std::size_t i = 0; i < up.size(); ++i) gb[i] += up[i] * (*ad)[i];
            }
        };
    }
    return detail::make_result(a.shape(), std::move(out), tape, std::move(fn));
}

inline Tensor scale(const Tensor& x, double s) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * s;
    Tape* tape = detail::joint_tape({&x});
    Tape::BackwardFn fn;
    if (tape) {
        fn = [xn = x.node(), s](std::span<const double> up, GradMap& g) {
            if (xn < 0) return;
            auto& gx = g.accum(xn);
            for (std::size_t i = 0; i < up.size(); ++i) gx[i] += up[i] * s;
        };
    }
    return detail::make_result(x.shape(), std::move(out), tape, std::move(fn));
}

// x: [m x d], bias: [d], added to every row
inline Tensor add_row_bias(const Tensor& x, const Tensor& b) {
    if (x.rank() != 2 || b.rank() != 1 || x.cols() != b.cols())
        throw DimensionError("add_row_bias: " + shape_str(x.shape()) + " vs " +
                             shape_str(b.shape()));
    const std::size_t m = x.rows(), d = x.cols();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] = x.at(i, j) + b[j];
    Tape* tape = detail::joint_tape({&x, &b});
    Tape::BackwardFn fn;
    if (tape) {
        fn = [xn = x.node(), bn = b.node(), m, d](std::span<const double> up, GradMap& g) {
            if (xn >= 0) {
                auto& gx = g.accum(xn);
                for (std::size_t i = 0; i < up.size(); ++i) gx[i] += up[i];
            }
            if (bn >= 0) {
                auto& gb = g.accum(bn);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < d; ++j) gb[j] += up[i * d + j];
            }
        };
    }
    return detail::make_result(x.shape(), std::move(out), tape, std::move(fn));
}

// ---- matrix products ----

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows())
        throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                             " x " + shape_str(b.shape()));
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    std::vector<double> out(m * n, 0.0);
    const double* ap = a.data().data();
    const double* bp = b.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ap[i * k + p];
            const double* brow = bp + p * n;
            double* orow = out.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    Tape* tape = detail::joint_tape({&a, &b});
    Tape::BackwardFn fn;
    if (tape) {
        fn = [an = a.node(), bn = b.node(), ad = a.payload(), bd = b.payload(), m, k,
              n](std::span<const double> up, GradMap& g) {
            if (an >= 0) {  // dA = dC * B^T
                auto& ga = g.accum(an);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) {
                        const double u = up[i * n + j];
                        for (std::size_t p = 0; p < k; ++p)
                            ga[i * k + p] += u * (*bd)[p * n + j];
                    }
            }
            if (bn >= 0) {  // dB = A^T * dC
                auto& gb = g.accum(bn);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        const double av = (*ad)[i * k + p];
                        for (std::size_t j = 0; j < n; ++j)
                            gb[p * n + j] += av * up[i * n + j];
                    }
            }
        };
    }
    return detail::make_result({m, n}, std::move(out), tape, std::move(fn));
}

// C = A * B^T with A: [m x k], B: [n x k]
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols())
        throw DimensionError("matmul_nt: inner dimensions disagree, " + shape_str(a.shape()) +
                             " x " + shape_str(b.shape()) + "^T");
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += a.at(i, p) * b.at(j, p);
            out[i * n + j] = s;
        }
    Tape* tape = detail::joint_tape({&a, &b});
    Tape::BackwardFn fn;
    if (tape) {
        fn = [an = a.node(), bn = b.node(), ad = a.payload(), bd = b.payload(), m, k,
              n](std::span<const double> up, GradMap& g) {
            if (an >= 0) {  // dA = dC * B
                auto& ga = g.accum(an);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) {
                        const double u = up[i * n + j];
                        for (std::size_t p = 0; p < k; ++p)
                            ga[i * k + p] += u * (*bd)[j * k + p];
                    }
            }
            if (bn >= 0) {  // dB = dC^T * A
                auto& gb = g.accum(bn);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) {
                        const double u = up[i * n + j];
                        for (std::size_t p = 0; p < k; ++p)
                            gb[j * k + p] += u * (*ad)[i * k + p];
                    }
            }
        };
    }
    return detail::make_result({m, n}, std::move(out), tape, std::move(fn));
}

// ---- elementwise nonlinearities ----

namespace detail {

template <typename Fwd, typename MakeBwd>
Tensor unary_op(const Tensor& x, Fwd fwd, MakeBwd make_bwd) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i]);
    Tape* tape = joint_tape({&x});
    Tape::BackwardFn fn;
    if (tape && x.on_tape()) fn = make_bwd(out);
    return make_result(x.shape(), std::move(out), tape, std::move(fn));
}

}  // namespace detail

// subgradient at 0 is 0
inline Tensor relu(const Tensor& x) {
    return detail::unary_op(
        x, [](double v) { return v > 0.0 ? v : 0.0; },
        [&x](const std::vector<double>&) -> Tape::BackwardFn {
            return [xn = x.node(), xd = x.payload()](std::span<const double> up, GradMap& g) {
                auto& gx = g.accum(xn);
                for (std::size_t i = 0; i < up.size(); ++i)
                    if ((*xd)[i] > 0.0) gx[i] += up[i];
            };
        });
}

inline Tensor sigmoid(const Tensor& x) {
    return detail::unary_op(
        x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
        [&x](const std::vector<double>& out) -> Tape::BackwardFn {
            auto saved = std::make_shared<std::vector<double>>(out);
            return [xn = x.node(), saved](std::span<const double> up, GradMap& g) {
                auto& gx = g.accum(xn);
                for (std::size_t i = 0; i < up.size(); ++i) {
                    const double s = (*saved)[i];
                    gx[i] += up[i] * s * (1.0 - s);
                }
            };
        });
}

inline Tensor tanh(const Tensor& x) {
    return detail::unary_op(
        x, [](double v) { return std::tanh(v); },
        [&x](const std::vector<double>& out) -> Tape::BackwardFn {
            auto saved = std::make_shared<std::vector<double>>(out);
            return [xn = x.node(), saved](std::span<const double> up, GradMap& g) {
                auto& gx = g.accum(xn);
                for (std::size_t i = 0; i < up.size(); ++i) {
                    const double t = (*saved)[i];
                    gx[i] += up[i] * (1.0 - t * t);
                }
            };
        });
}

// ---- row-wise ops ----

// rank-1 input is treated as a single row
inline Tensor softmax_rows(const Tensor& x) {
    if (x.rank() > 2) throw DimensionError("softmax_rows: rank " + shape_str(x.shape()));
    const std::size_t m = x.rank() == 2 ? x.rows() : 1;
    const std::size_t n = x.cols();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = x.data().data() + i * n;
        double mx = row[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            out[i * n + j] = std::exp(row[j] - mx);
            sum += out[i * n + j];
        }
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= sum;
    }
    Tape* tape = detail::joint_tape({&x});
    Tape::BackwardFn fn;
    if (tape) {
        auto saved = std::make_shared<std::vector<double>>(out);
        fn = [xn = x.node(), saved, m, n](std::span<const double> up, GradMap& g) {
            if (xn < 0) return;
            auto& gx = g.accum(xn);
            for (std::size_t i = 0; i < m; ++i) {
                const double* p = saved->data() + i * n;
                const double* u = up.data() + i * n;
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += u[j] * p[j];
                for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += p[j] * (u[j] - dot);
            }
        };
    }
    return detail::make_result(x.shape(), std::move(out), tape, std::move(fn));
}

// per-row normalization with population variance, then affine gain/bias
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    if (x.rank() != 2) throw DimensionError("layer_norm: need rank-2, got " + shape_str(x.shape()));
    const std::size_t m = x.rows(), d = x.cols();
    if (d < 2) throw ContractError("layer_norm: row width must be >= 2");
    if (gain.shape() != Shape{d} || bias.shape() != Shape{d})
        throw DimensionError("layer_norm: gain/bias must be [" + std::to_string(d) + "]");
    std::vector<double> out(x.size());
    auto xhat = std::make_shared<std::vector<double>>(x.size());
    auto rstd = std::make_shared<std::vector<double>>(m);
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = x.data().data() + i * d;
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += row[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = row[j] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double s = 1.0 / std::sqrt(var + eps);
        (*rstd)[i] = s;
        for (std::size_t j = 0; j < d; ++j) {
            const double xh = (row[j] - mean) * s;
            (*xhat)[i * d + j] = xh;
            out[i * d + j] = xh * gain[j] + bias[j];
        }
    }
    Tape* tape = detail::joint_tape({&x, &gain, &bias});
    Tape::BackwardFn fn;
    if (tape) {
        fn = [xn = x.node(), gn = gain.node(), bn = bias.node(), gd = gain.payload(), xhat,
              rstd, m, d](std::span<const double> up, GradMap& g) {
            for (std::size_t i = 0; i < m; ++i) {
                const double* u = up.data() + i * d;
                const double* xh = xhat->data() + i * d;
                if (xn >= 0) {
                    auto& gx = g.accum(xn);
                    double mean_dxh = 0.0, mean_dxh_xh = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dxh = u[j] * (*gd)[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[j];
                    }
                    mean_dxh /= static_cast<double>(d);
                    mean_dxh_xh /= static_cast<double>(d);
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dxh = u[j] * (*gd)[j];
                        gx[i * d + j] += (dxh - mean_dxh - xh[j] * mean_dxh_xh) * (*rstd)[i];
                    }
                }
                if (gn >= 0) {
                    auto& gg = g.accum(gn);
                    for (std::size_t j = 0; j < d; ++j) gg[j] += u[j] * xh[j];
                }
                if (bn >= 0) {
                    auto& gb = g.accum(bn);
                    for (std::size_t j = 0; j < d; ++j) gb[j] += u[j];
                }
            }
        };
    }
    return detail::make_result(x.shape(), std::move(out), tape, std::move(fn));
}

// ---- structural ops ----

inline Tensor concat_last_dim(const Tensor& a, const Tensor& b) {
    if (a.rank() != b.rank() || a.rank() < 1 || a.rank() > 2 ||
        (a.rank() == 2 && a.rows() != b.rows()))
        throw DimensionError("concat_last_dim: " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    const std::size_t m = a.rank() == 2 ? a.rows() : 1;
    const std::size_t ca = a.cols(), cb = b.cols(), cc = ca + cb;
    std::vector<double> out(m * cc);
    for (std::size_t i = 0; i < m; ++i) {
        std::copy_n(a.data().data() + i * ca, ca, out.data() + i * cc);
        std::copy_n(b.data().data() + i * cb, cb, out.data() + i * cc + ca);
    }
    Shape shape = a.rank() == 2 ? Shape{m, cc} : Shape{cc};
    Tape* tape = detail::joint_tape({&a, &b});
    Tape::BackwardFn fn;
    if (tape) {
        fn = [an = a.node(), bn = b.node(), m, ca, cb, cc](std::span<const double> up,
                                                           GradMap& g) {
            if (an >= 0) {
                auto& ga = g.accum(an);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < ca; ++j) ga[i * ca + j] += up[i * cc + j];
            }
            if (bn >= 0) {
                auto& gb = g.accum(bn);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < cb; ++j) gb[i * cb + j] += up[i * cc + ca + j];
            }
        };
    }
    return detail::make_result(std::move(shape), std::move(out), tape, std::move(fn));
}

inline Tensor slice_last_dim(const Tensor& x, std::size_t start, std::size_t len) {
    if (x.rank() < 1 || x.rank() > 2 || start + len > x.cols())
        throw DimensionError("slice_last_dim: [" + std::to_string(start) + "," +
                             std::to_string(start + len) + ") of " + shape_str(x.shape()));
    const std::size_t m = x.rank() == 2 ? x.rows() : 1;
    const std::size_t c = x.cols();
    std::vector<double> out(m * len);
    for (std::size_t i = 0; i < m; ++i)
        std::copy_n(x.data().data() + i * c + start, len, out.data() + i * len);
    Shape shape = x.rank() == 2 ? Shape{m, len} : Shape{len};
    Tape* tape = detail::joint_tape({&x});
    Tape::BackwardFn fn;
    if (tape) {
        fn = [xn = x.node(), m, c, start, len](std::span<const double> up, GradMap& g) {
            if (xn < 0) return;
            auto& gx = g.accum(xn);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < len; ++j) gx[i * c + start + j] += up[i * len + j];
        };
    }
    return detail::make_result(std::move(shape), std::move(out), tape, std::move(fn));
}

// [m x n] -> [n], column means
inline Tensor mean_rows(const Tensor& x) {
    if (x.rank() != 2) throw DimensionError("mean_rows: need rank-2, got " + shape_str(x.shape()));
    const std::size_t m = x.rows(), n = x.cols();
    std::vector<double> out(n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j] += x.at(i, j);
    for (std::size_t j = 0; j < n; ++j) out[j] /= static_cast<double>(m);
    Tape* tape = detail::joint_tape({&x});
    Tape::BackwardFn fn;
    if (tape) {
        fn = [xn = x.node(), m, n](std::span<const double> up, GradMap& g) {
            if (xn < 0) return;
            auto& gx = g.accum(xn);
            const double inv = 1.0 / static_cast<double>(m);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += up[j] * inv;
        };
    }
    return detail::make_result({n}, std::move(out), tape, std::move(fn));
}

inline Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    Tape* tape = detail::joint_tape({&x});
    Tape::BackwardFn fn;
    if (tape) {
        fn = [xn = x.node(), n = x.size()](std::span<const double> up, GradMap& g) {
            if (xn < 0) return;
            auto& gx = g.accum(xn);
            for (std::size_t i = 0; i < n; ++i) gx[i] += up[0];
        };
    }
    return detail::make_result({1}, {s}, tape, std::move(fn));
}

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (numel(shape) != x.size())
        throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
    Tape* tape = detail::joint_tape({&x});
    if (!tape) return Tensor(std::move(shape), x.payload(), nullptr, -1);
    Tape::BackwardFn fn = [xn = x.node()](std::span<const double> up, GradMap& g) {
        if (xn < 0) return;
        auto& gx = g.accum(xn);
        for (std::size_t i = 0; i < up.size(); ++i) gx[i] += up[i];
    };
    const int node = tape->record(x.size(), std::move(fn));
    return Tensor(std::move(shape), x.payload(), tape, node);
}

// rows of `table` gathered by id; backward scatter-adds
inline Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
    if (table.rank() != 2)
        throw DimensionError("embedding_lookup: table must be rank-2, got " +
                             shape_str(table.shape()));
    const std::size_t v = table.rows(), d = table.cols();
    for (int id : ids)
        if (id < 0 || static_cast<std::size_t>(id) >= v)
            throw ContractError("embedding_lookup: id " + std::to_string(id) +
                                " outside table of " + std::to_string(v));
    std::vector<double> out(ids.size() * d);
    for (std::size_t i = 0; i < ids.size(); ++i)
        std::copy_n(table.data().data() + static_cast<std::size_t>(ids[i]) * d, d,
                    out.data() + i * d);
    Tape* tape = detail::joint_tape({&table});
    Tape::BackwardFn fn;
    if (tape) {
        fn = [tn = table.node(), ids, d](std::span<const double> up, GradMap& g) {
            if (tn < 0) return;
            auto& gt = g.accum(tn);
            for (std::size_t i = 0; i < ids.size(); ++i)
                for (std::size_t j = 0; j < d; ++j)
                    gt[static_cast<std::size_t>(ids[i]) * d + j] += up[i * d + j];
        };
    }
    return detail::make_result({ids.size(), d}, std::move(out), tape, std::move(fn));
}

// stack rank-1 vectors into a matrix, one per row
inline Tensor stack_rows(const std::vector<Tensor>& rows) {
    if (rows.empty()) throw ContractError("stack_rows: no rows");
    const std::size_t d = rows[0].cols();
    for (const Tensor& r : rows)
        if (r.rank() != 1 || r.cols() != d)
            throw DimensionError("stack_rows: row shape " + shape_str(r.shape()));
    const std::size_t m = rows.size();
    std::vector<double> out(m * d);
    for (std::size_t i = 0; i < m; ++i)
        std::copy_n(rows[i].data().data(), d, out.data() + i * d);
    Tape* tape = nullptr;
    for (const Tensor& r : rows) {
        if (!r.on_tape()) continue;
        if (tape && tape != r.tape()) throw ContractError("stack_rows: rows on different tapes");
        tape = r.tape();
    }
    Tape::BackwardFn fn;
    if (tape) {
        std::vector<int> nodes(m);
        for (std::size_t i = 0; i < m; ++i) nodes[i] = rows[i].node();
        fn = [nodes, d](std::span<const double> up, GradMap& g) {
            for (std::size_t i = 0; i < nodes.size(); ++i) {
                if (nodes[i] < 0) continue;
                auto& gr = g.accum(nodes[i]);
                for (std::size_t j = 0; j < d; ++j) gr[j] += up[i * d + j];
            }
        };
    }
    return detail::make_result({m, d}, std::move(out), tape, std::move(fn));
}

// repeat a vector as m identical rows; backward sums over rows
inline Tensor tile_rows(const Tensor& v, std::size_t m) {
    if (v.rank() != 1) throw DimensionError("tile_rows: need rank-1, got " + shape_str(v.shape()));
    const std::size_t d = v.cols();
    std::vector<double> out(m * d);
    for (std::size_t i = 0; i < m; ++i) std::copy_n(v.data().data(), d, out.data() + i * d);
    Tape* tape = detail::joint_tape({&v});
    Tape::BackwardFn fn;
    if (tape) {
        fn = [vn = v.node(), m, d](std::span<const double> up, GradMap& g) {
            if (vn < 0) return;
            auto& gv = g.accum(vn);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < d; ++j) gv[j] += up[i * d + j];
        };
    }
    return detail::make_result({m, d}, std::move(out), tape, std::move(fn));
}

// softmax over row prefixes: row i normalizes columns 0..i, the rest are 0.
// For causal self-attention over square score matrices.
inline Tensor softmax_rows_causal(const Tensor& x) {
    if (x.rank() != 2 || x.rows() != x.cols())
        throw DimensionError("softmax_rows_causal: need square, got " + shape_str(x.shape()));
    const std::size_t n = x.rows();
    std::vector<double> out(x.size(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = x.data().data() + i * n;
        double mx = row[0];
        for (std::size_t j = 1; j <= i; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
            out[i * n + j] = std::exp(row[j] - mx);
            sum += out[i * n + j];
        }
        for (std::size_t j = 0; j <= i; ++j) out[i * n + j] /= sum;
    }
    Tape* tape = detail::joint_tape({&x});
    Tape::BackwardFn fn;
    if (tape) {
        auto saved = std::make_shared<std::vector<double>>(out);
        fn = [xn = x.node(), saved, n](std::span<const double> up, GradMap& g) {
            if (xn < 0) return;
            auto& gx = g.accum(xn);
            for (std::size_t i = 0; i < n; ++i) {
                const double* p = saved->data() + i * n;
                const double* u = up.data() + i * n;
                double dot = 0.0;
                for (std::size_t j = 0; j <= i; ++j) dot += u[j] * p[j];
                for (std::size_t j = 0; j <= i; ++j) gx[i * n + j] += p[j] * (u[j] - dot);
            }
        };
    }
    return detail::make_result(x.shape(), std::move(out), tape, std::move(fn));
}

// sum over rows of -log softmax(row)[target]; one node for a whole
// teacher-forced sequence
inline Tensor cross_entropy_rows_sum(const Tensor& logits, const std::vector<int>& targets) {
    if (logits.rank() != 2 || logits.rows() != targets.size())
        throw DimensionError("cross_entropy_rows_sum: logits " + shape_str(logits.shape()) +
                             " vs " + std::to_string(targets.size()) + " targets");
    const std::size_t m = logits.rows(), v = logits.cols();
    for (int t : targets)
        if (t < 0 || static_cast<std::size_t>(t) >= v)
            throw ContractError("cross_entropy_rows_sum: target " + std::to_string(t) +
                                " outside vocabulary of " + std::to_string(v));
    auto probs = std::make_shared<std::vector<double>>(logits.size());
    double total = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = logits.data().data() + i * v;
        double mx = row[0];
        for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double se = 0.0;
        for (std::size_t j = 0; j < v; ++j) se += std::exp(row[j] - mx);
        const double lse = mx + std::log(se);
        total += lse - row[static_cast<std::size_t>(targets[i])];
        for (std::size_t j = 0; j < v; ++j) (*probs)[i * v + j] = std::exp(row[j] - lse);
    }
    Tape* tape = detail::joint_tape({&logits});
    Tape::BackwardFn fn;
    if (tape) {
        fn = [ln = logits.node(), probs, targets, v](std::span<const double> up, GradMap& g) {
            if (ln < 0) return;
            auto& gl = g.accum(ln);
            for (std::size_t i = 0; i < targets.size(); ++i) {
                for (std::size_t j = 0; j < v; ++j)
                    gl[i * v + j] += up[0] * (*probs)[i * v + j];
                gl[i * v + static_cast<std::size_t>(targets[i])] -= up[0];
            }
        };
    }
    return detail::make_result({1}, {total}, tape, std::move(fn));
}

// -log softmax(logits)[target], computed with the log-sum-exp trick
inline Tensor cross_entropy(const Tensor& logits, int target) {
    if (logits.rank() != 1)
        throw DimensionError("cross_entropy: logits must be rank-1, got " +
                             shape_str(logits.shape()));
    const std::size_t v = logits.cols();
    if (target < 0 || static_cast<std::size_t>(target) >= v)
        throw ContractError("cross_entropy: target " + std::to_string(target) +
                            " outside vocabulary of " + std::to_string(v));
    double mx = logits[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, logits[j]);
    double se = 0.0;
    for (std::size_t j = 0; j < v; ++j) se += std::exp(logits[j] - mx);
    const double lse = mx + std::log(se);
    const double loss = lse - logits[static_cast<std::size_t>(target)];
    Tape* tape = detail::joint_tape({&logits});
    Tape::BackwardFn fn;
    if (tape) {
        auto probs = std::make_shared<std::vector<double>>(v);
        for (std::size_t j = 0; j < v; ++j) (*probs)[j] = std::exp(logits[j] - lse);
        fn = [ln = logits.node(), probs, target](std::span<const double> up, GradMap& g) {
            if (ln < 0) return;
            auto& gl = g.accum(ln);
            for (std::size_t j = 0; j < probs->size(); ++j) gl[j] += up[0] * (*probs)[j];
            gl[static_cast<std::size_t>(target)] -= up[0];
        };
    }
    return detail::make_result({1}, {loss}, tape, std::move(fn));
}

// inverted dropout; identity when rate <= 0
inline Tensor dropout(const Tensor& x, double rate, Rng& rng) {
    if (rate <= 0.0) return x;
    if (rate >= 1.0) throw ContractError("dropout: rate must be < 1");
    const double keep = 1.0 - rate;
    auto mask = std::make_shared<std::vector<double>>(x.size());
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        (*mask)[i] = rng.uniform() >= rate ? 1.0 / keep : 0.0;
        out[i] = x[i] * (*mask)[i];
    }
    Tape* tape = detail::joint_tape({&x});
    Tape::BackwardFn fn;
    if (tape) {
        fn = [xn = x.node(), mask](std::span<const double> up, GradMap& g) {
            if (xn < 0) return;
            auto& gx = g.accum(xn);
            for (std::size_t i = 0; i < up.size(); ++i) gx[i] += up[i] * (*mask)[i];
        };
    }
    return detail::make_result(x.shape(), std::move(out), tape, std::move(fn));
}

}  // namespace gat
