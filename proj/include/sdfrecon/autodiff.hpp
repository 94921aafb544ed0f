#pragma once

// Reverse-mode differentiation over batched matrices, plus Adam.
//
// A Tape records primitive operations (affine maps, elementwise activations,
// gathers, segment reductions) on matrices whose rows are batch entries.
// backward() replays the tape once in reverse creation order; gradients of
// shared inputs accumulate additively. Parameters live in a ParamStore as
// named blocks with their Adam moment buffers.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "sdfrecon/core.hpp"

namespace sdfrecon {

template <class T>
struct ParamBlock {
    MatX<T> value;
    MatX<T> grad;  // accumulated by Tape::backward, cleared by zero_grads()
    MatX<T> m;     // Adam first moment
    MatX<T> v;     // Adam second moment
    T lr_mult = T(1);
};

template <class T>
class ParamStore {
public:
    ParamBlock<T>& add(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
        if (index_.count(name))
            throw DataError("parameter block already exists: " + name);
        index_[name] = static_cast<int>(blocks_.size());
        blocks_.emplace_back(name, ParamBlock<T>{});
        ParamBlock<T>& b = blocks_.back().second;
        b.value = MatX<T>::Zero(rows, cols);
        b.grad = MatX<T>::Zero(rows, cols);
        b.m = MatX<T>::Zero(rows, cols);
        b.v = MatX<T>::Zero(rows, cols);
        return b;
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    ParamBlock<T>& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw DataError("no such parameter block: " + name);
        return blocks_[it->second].second;
    }
    const ParamBlock<T>& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw DataError("no such parameter block: " + name);
        return blocks_[it->second].second;
    }

    // Blocks in insertion order; iteration order is deterministic.
    const std::vector<std::pair<std::string, ParamBlock<T>>>& blocks() const { return blocks_; }
    std::vector<std::pair<std::string, ParamBlock<T>>>& blocks() { return blocks_; }

    void zero_grads() {
        for (auto& [name, b] : blocks_) b.grad.setZero();
    }

    std::int64_t step() const { return step_; }
    void set_step(std::int64_t s) { step_ = s; }
    void advance_step() { ++step_; }

    std::int64_t num_parameters() const {
        std::int64_t n = 0;
        for (const auto& [name, b] : blocks_) n += b.value.size();
        return n;
    }

private:
    std::vector<std::pair<std::string, ParamBlock<T>>> blocks_;
    std::unordered_map<std::string, int> index_;
    std::int64_t step_ = 0;  // shared step counter of the optimizer instance
};

// Numerically stable logistic; sigmoid(0) == 0.5 exactly.
template <class T>
inline T sigmoid(T x) {
    return T(0.5) * (std::tanh(T(0.5) * x) + T(1));
}

template <class T>
class Tape {
public:
    struct Ref {
        int id = -1;
        bool valid() const { return id >= 0; }
    };

    explicit Tape(ParamStore<T>* params = nullptr, bool record = true)
        : params_(params), record_(record) {}

    ParamStore<T>* params() { return params_; }
    bool recording() const { return record_; }
    size_t size() const { return nodes_.size(); }

    void reset() { nodes_.clear(); }

    const MatX<T>& value(Ref r) const { return node(r).value; }

    // Gradient w.r.t. a non-parameter node (for input-sensitivity checks).
    // Zero-sized until backward has touched the node.
    const MatX<T>& grad(Ref r) const { return node(r).grad; }

    // ---- leaves ------------------------------------------------------------

    Ref constant(MatX<T> v) { return push(std::move(v), false, nullptr); }

    Ref param(const std::string& block_name) {
        if (!params_) throw DataError("tape has no parameter store");
        ParamBlock<T>& b = params_->at(block_name);
        MatX<T> v = b.value;
        std::string name = block_name;
        return push(std::move(v), true, [name](Tape& t, int, const MatX<T>& g) {
            t.params_->at(name).grad += g;
        });
    }

    // ---- dense layers ------------------------------------------------------

    // y = x * W^T + 1 b^T with W: (out, in), b: (out, 1).
    Ref affine(Ref x, const std::string& w_name, const std::string& b_name) {
        if (!params_) throw DataError("tape has no parameter store");
        ParamBlock<T>& W = params_->at(w_name);
        ParamBlock<T>& B = params_->at(b_name);
        const MatX<T>& xv = value(x);
        if (xv.cols() != W.value.cols())
            throw DataError("affine: input has " + std::to_string(xv.cols()) +
                            " columns but " + w_name + " expects " +
                            std::to_string(W.value.cols()));
        if (B.value.rows() != W.value.rows() || B.value.cols() != 1)
            throw DataError("affine: bias shape mismatch for " + b_name);
        MatX<T> y = xv * W.value.transpose();
        y.rowwise() += B.value.col(0).transpose();
        int xid = x.id;
        std::string wn = w_name, bn = b_name;
        return push(std::move(y), true, [xid, wn, bn](Tape& t, int, const MatX<T>& g) {
            ParamBlock<T>& W = t.params_->at(wn);
            ParamBlock<T>& B = t.params_->at(bn);
            const MatX<T>& xv = t.nodes_[xid].value;
            W.grad.noalias() += g.transpose() * xv;
            B.grad.col(0) += g.colwise().sum().transpose();
            if (t.nodes_[xid].needs_grad)
                t.accumulate(xid, g * W.value);
        });
    }

    // ---- elementwise -------------------------------------------------------

    Ref relu(Ref x) {
        MatX<T> y = value(x).cwiseMax(T(0));
        return unary(x, std::move(y), [](Tape& t, int xid, const MatX<T>& g) {
            const MatX<T>& xv = t.nodes_[xid].value;
            t.accumulate(xid, (xv.array() > T(0)).select(g, MatX<T>::Zero(g.rows(), g.cols())));
        });
    }

    Ref sigmoid_(Ref x) {
        MatX<T> y = value(x).unaryExpr([](T v) { return sigmoid(v); });
        const int yid = next_id();
        return unary(x, std::move(y), [yid](Tape& t, int xid, const MatX<T>& g) {
            const MatX<T>& yv = t.nodes_[yid].value;
            t.accumulate(xid, (g.array() * yv.array() * (T(1) - yv.array())).matrix());
        });
    }

    Ref sin_(Ref x) {
        MatX<T> y = value(x).array().sin().matrix();
        return unary(x, std::move(y), [](Tape& t, int xid, const MatX<T>& g) {
            t.accumulate(xid, (g.array() * t.nodes_[xid].value.array().cos()).matrix());
        });
    }

    Ref cos_(Ref x) {
        MatX<T> y = value(x).array().cos().matrix();
        return unary(x, std::move(y), [](Tape& t, int xid, const MatX<T>& g) {
            t.accumulate(xid, (-g.array() * t.nodes_[xid].value.array().sin()).matrix());
        });
    }

    Ref square(Ref x) {
        MatX<T> y = value(x).array().square().matrix();
        return unary(x, std::move(y), [](Tape& t, int xid, const MatX<T>& g) {
            t.accumulate(xid, (T(2) * g.array() * t.nodes_[xid].value.array()).matrix());
        });
    }

    Ref reciprocal(Ref x) {
        MatX<T> y = value(x).array().inverse().matrix();
        const int yid = next_id();
        return unary(x, std::move(y), [yid](Tape& t, int xid, const MatX<T>& g) {
            const auto& yv = t.nodes_[yid].value.array();
            t.accumulate(xid, (-g.array() * yv * yv).matrix());
        });
    }

    Ref sqrt_(Ref x) {
        MatX<T> y = value(x).array().sqrt().matrix();
        const int yid = next_id();
        return unary(x, std::move(y), [yid](Tape& t, int xid, const MatX<T>& g) {
            const auto& yv = t.nodes_[yid].value.array();
            t.accumulate(xid, (g.array() / (T(2) * yv)).matrix());
        });
    }

    // Subgradient convention: gradient passes only strictly inside (lo, hi).
    Ref clamp(Ref x, T lo, T hi) {
        MatX<T> y = value(x).array().min(hi).max(lo).matrix();
        return unary(x, std::move(y), [lo, hi](Tape& t, int xid, const MatX<T>& g) {
            const auto& xv = t.nodes_[xid].value.array();
            MatX<T> gx =
                (xv > lo && xv < hi).select(g, MatX<T>::Zero(g.rows(), g.cols()));
            t.accumulate(xid, std::move(gx));
        });
    }

    // y = s * x + c
    Ref scale_add(Ref x, T s, T c) {
        MatX<T> y = (value(x).array() * s + c).matrix();
        return unary(x, std::move(y), [s](Tape& t, int xid, const MatX<T>& g) {
            t.accumulate(xid, (g.array() * s).matrix());
        });
    }

    // y = x .* m with a constant matrix (masks, per-sample loss weights).
    Ref cmul(Ref x, MatX<T> m) {
        check_same_shape(value(x), m, "cmul");
        MatX<T> y = value(x).cwiseProduct(m);
        auto mp = std::make_shared<MatX<T>>(std::move(m));
        return unary(x, std::move(y), [mp](Tape& t, int xid, const MatX<T>& g) {
            t.accumulate(xid, g.cwiseProduct(*mp));
        });
    }

    // y = x + c with a constant matrix.
    Ref cadd(Ref x, const MatX<T>& m) {
        check_same_shape(value(x), m, "cadd");
        MatX<T> y = value(x) + m;
        return unary(x, std::move(y), [](Tape& t, int xid, const MatX<T>& g) {
            t.accumulate(xid, g);
        });
    }

    // ---- binary ------------------------------------------------------------

    Ref add(Ref a, Ref b) {
        check_same_shape(value(a), value(b), "add");
        MatX<T> y = value(a) + value(b);
        return binary(a, b, std::move(y), [](Tape& t, int aid, int bid, const MatX<T>& g) {
            if (t.nodes_[aid].needs_grad) t.accumulate(aid, g);
            if (t.nodes_[bid].needs_grad) t.accumulate(bid, g);
        });
    }

    Ref sub(Ref a, Ref b) {
        check_same_shape(value(a), value(b), "sub");
        MatX<T> y = value(a) - value(b);
        return binary(a, b, std::move(y), [](Tape& t, int aid, int bid, const MatX<T>& g) {
            if (t.nodes_[aid].needs_grad) t.accumulate(aid, g);
            if (t.nodes_[bid].needs_grad) t.accumulate(bid, -g);
        });
    }

    // Hadamard product.
    Ref mul(Ref a, Ref b) {
        check_same_shape(value(a), value(b), "mul");
        MatX<T> y = value(a).cwiseProduct(value(b));
        return binary(a, b, std::move(y), [](Tape& t, int aid, int bid, const MatX<T>& g) {
            if (t.nodes_[aid].needs_grad) t.accumulate(aid, g.cwiseProduct(t.nodes_[bid].value));
            if (t.nodes_[bid].needs_grad) t.accumulate(bid, g.cwiseProduct(t.nodes_[aid].value));
        });
    }

    // ---- structure ---------------------------------------------------------

    Ref concat_cols(const std::vector<Ref>& parts) {
        if (parts.empty()) throw DataError("concat_cols: no inputs");
        Eigen::Index rows = value(parts[0]).rows(), cols = 0;
        for (Ref p : parts) {
            if (value(p).rows() != rows) throw DataError("concat_cols: row count mismatch");
            cols += value(p).cols();
        }
        MatX<T> y(rows, cols);
        std::vector<int> ids;
        std::vector<Eigen::Index> offs;
        Eigen::Index off = 0;
        bool ng = false;
        for (Ref p : parts) {
            y.middleCols(off, value(p).cols()) = value(p);
            ids.push_back(p.id);
            offs.push_back(off);
            off += value(p).cols();
            ng = ng || node(p).needs_grad;
        }
        if (!record_ || !ng) return push(std::move(y), ng, nullptr);
        return push(std::move(y), true, [ids, offs](Tape& t, int, const MatX<T>& g) {
            for (size_t k = 0; k < ids.size(); ++k) {
                auto& n = t.nodes_[ids[k]];
                if (n.needs_grad) t.accumulate(ids[k], g.middleCols(offs[k], n.value.cols()));
            }
        });
    }

    Ref vstack(Ref a, Ref b) {
        if (value(a).cols() != value(b).cols()) throw DataError("vstack: column count mismatch");
        MatX<T> y(value(a).rows() + value(b).rows(), value(a).cols());
        y.topRows(value(a).rows()) = value(a);
        y.bottomRows(value(b).rows()) = value(b);
        return binary(a, b, std::move(y), [](Tape& t, int aid, int bid, const MatX<T>& g) {
            Eigen::Index ra = t.nodes_[aid].value.rows();
            if (t.nodes_[aid].needs_grad) t.accumulate(aid, g.topRows(ra));
            if (t.nodes_[bid].needs_grad) t.accumulate(bid, g.bottomRows(g.rows() - ra));
        });
    }

    Ref slice_cols(Ref x, Eigen::Index first, Eigen::Index count) {
        if (first < 0 || count < 0 || first + count > value(x).cols())
            throw DataError("slice_cols: out of range");
        MatX<T> y = value(x).middleCols(first, count);
        return unary(x, std::move(y), [first, count](Tape& t, int xid, const MatX<T>& g) {
            MatX<T> gx = MatX<T>::Zero(t.nodes_[xid].value.rows(), t.nodes_[xid].value.cols());
            gx.middleCols(first, count) = g;
            t.accumulate(xid, std::move(gx));
        });
    }

    Ref gather_rows(Ref x, std::vector<int> idx) {
        const MatX<T>& xv = value(x);
        for (int i : idx)
            if (i < 0 || i >= xv.rows())
                throw DataError("gather_rows: index " + std::to_string(i) + " out of range");
        MatX<T> y(static_cast<Eigen::Index>(idx.size()), xv.cols());
        for (size_t r = 0; r < idx.size(); ++r) y.row(r) = xv.row(idx[r]);
        auto ip = std::make_shared<std::vector<int>>(std::move(idx));
        return unary(x, std::move(y), [ip](Tape& t, int xid, const MatX<T>& g) {
            MatX<T> gx = MatX<T>::Zero(t.nodes_[xid].value.rows(), t.nodes_[xid].value.cols());
            for (size_t r = 0; r < ip->size(); ++r) gx.row((*ip)[r]) += g.row(r);
            t.accumulate(xid, std::move(gx));
        });
    }

    // Row-wise reduction into per-segment sums; seg[i] in [0, nseg).
    Ref segment_sum(Ref x, std::vector<int> seg, int nseg) {
        const MatX<T>& xv = value(x);
        if (static_cast<Eigen::Index>(seg.size()) != xv.rows())
            throw DataError("segment_sum: segment id count must equal row count");
        MatX<T> y = MatX<T>::Zero(nseg, xv.cols());
        for (Eigen::Index r = 0; r < xv.rows(); ++r) {
            int s = seg[r];
            if (s < 0 || s >= nseg) throw DataError("segment_sum: segment id out of range");
            y.row(s) += xv.row(r);
        }
        auto sp = std::make_shared<std::vector<int>>(std::move(seg));
        return unary(x, std::move(y), [sp](Tape& t, int xid, const MatX<T>& g) {
            MatX<T> gx(t.nodes_[xid].value.rows(), t.nodes_[xid].value.cols());
            for (Eigen::Index r = 0; r < gx.rows(); ++r) gx.row(r) = g.row((*sp)[r]);
            t.accumulate(xid, std::move(gx));
        });
    }

    // Normalize each row to unit Euclidean length.
    Ref rows_normalize(Ref x) {
        const MatX<T>& xv = value(x);
        MatX<T> y = xv;
        for (Eigen::Index r = 0; r < y.rows(); ++r) y.row(r) /= xv.row(r).norm();
        return unary(x, std::move(y), [](Tape& t, int xid, const MatX<T>& g) {
            const MatX<T>& xv = t.nodes_[xid].value;
            MatX<T> gx(xv.rows(), xv.cols());
            for (Eigen::Index r = 0; r < xv.rows(); ++r) {
                T n = xv.row(r).norm();
                T d = xv.row(r).dot(g.row(r));
                gx.row(r) = g.row(r) / n - xv.row(r) * (d / (n * n * n));
            }
            t.accumulate(xid, std::move(gx));
        });
    }

    // Full reduction to a 1x1 scalar node.
    Ref sum_all(Ref x) {
        MatX<T> y(1, 1);
        y(0, 0) = value(x).sum();
        return unary(x, std::move(y), [](Tape& t, int xid, const MatX<T>& g) {
            t.accumulate(xid, MatX<T>::Constant(t.nodes_[xid].value.rows(),
                                                t.nodes_[xid].value.cols(), g(0, 0)));
        });
    }

    // Escape hatch for fused ops (pose application, etc.). The closure is
    // responsible for accumulating into its inputs and any parameter blocks.
    Ref custom(MatX<T> value, const std::vector<Ref>& inputs,
               std::function<void(Tape&, const MatX<T>&)> backward) {
        bool ng = params_ != nullptr;  // may touch parameter blocks directly
        for (Ref r : inputs) ng = ng || node(r).needs_grad;
        if (!record_) return push(std::move(value), ng, nullptr);
        return push(std::move(value), ng,
                    [bw = std::move(backward)](Tape& t, int, const MatX<T>& g) { bw(t, g); });
    }

    // Adds g into a node's gradient buffer (used by custom ops).
    void accumulate(int node_id, MatX<T> g) {
        Node& n = nodes_.at(node_id);
        if (n.grad.size() == 0)
            n.grad = std::move(g);
        else
            n.grad += g;
    }
    void accumulate(Ref r, MatX<T> g) { accumulate(r.id, std::move(g)); }

    // Reverse sweep from `root` (must be 1x1); gradients of parameter blocks
    // accumulate into the ParamStore. Each node is visited exactly once.
    void backward(Ref root) {
        if (!record_) throw DataError("backward on a non-recording tape");
        if (!root.valid() || root.id >= static_cast<int>(nodes_.size()))
            throw DataError("backward before forward: invalid root node");
        if (value(root).rows() != 1 || value(root).cols() != 1)
            throw DataError("backward root must be scalar (1x1)");
        backward_seeded(root, MatX<T>::Ones(1, 1));
    }

    void backward_seeded(Ref root, MatX<T> seed) {
        check_same_shape(value(root), seed, "backward seed");
        accumulate(root.id, std::move(seed));
        for (int i = root.id; i >= 0; --i) {
            Node& n = nodes_[i];
            if (n.grad.size() != 0 && n.backward) n.backward(*this, i, n.grad);
        }
    }

private:
    struct Node {
        MatX<T> value;
        MatX<T> grad;
        bool needs_grad = false;
        std::function<void(Tape&, int, const MatX<T>&)> backward;
    };

    std::vector<Node> nodes_;
    ParamStore<T>* params_;
    bool record_;

    Node& node(Ref r) {
        if (!r.valid() || r.id >= static_cast<int>(nodes_.size()))
            throw DataError("invalid tape node reference");
        return nodes_[r.id];
    }
    const Node& node(Ref r) const {
        if (!r.valid() || r.id >= static_cast<int>(nodes_.size()))
            throw DataError("invalid tape node reference");
        return nodes_[r.id];
    }

    int next_id() const { return static_cast<int>(nodes_.size()); }

    static void check_same_shape(const MatX<T>& a, const MatX<T>& b, const char* op) {
        if (a.rows() != b.rows() || a.cols() != b.cols())
            throw DataError(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) +
                            "x" + std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) +
                            "x" + std::to_string(b.cols()) + ")");
    }

    Ref push(MatX<T>&& v, bool needs_grad,
             std::function<void(Tape&, int, const MatX<T>&)> bw) {
        Node n;
        n.value = std::move(v);
        n.needs_grad = needs_grad;
        if (record_ && needs_grad) n.backward = std::move(bw);
        nodes_.push_back(std::move(n));
        return Ref{static_cast<int>(nodes_.size()) - 1};
    }

    template <class F>
    Ref unary(Ref x, MatX<T>&& y, F&& bw) {
        bool ng = node(x).needs_grad;
        if (!record_ || !ng) return push(std::move(y), ng, nullptr);
        return push(std::move(y), true,
                    [xid = x.id, f = std::forward<F>(bw)](Tape& t, int self, const MatX<T>& g) {
                        (void)self;
                        f(t, xid, g);
                    });
    }

    template <class F>
    Ref binary(Ref a, Ref b, MatX<T>&& y, F&& bw) {
        bool ng = node(a).needs_grad || node(b).needs_grad;
        if (!record_ || !ng) return push(std::move(y), ng, nullptr);
        return push(std::move(y), true,
                    [aid = a.id, bid = b.id, f = std::forward<F>(bw)](Tape& t, int,
                                                                      const MatX<T>& g) {
                        f(t, aid, bid, g);
                    });
    }
};

template <class T>
struct AdamConfig {
    T lr = T(5e-4);
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
};

struct AdamStepReport {
    std::vector<std::string> skipped_blocks;  // rejected due to non-finite gradients
};

// One Adam step with bias correction over all blocks (minus `frozen`).
// Blocks with non-finite gradients are left untouched for this step; the
// shared counter still advances.
template <class T>
AdamStepReport adam_step(ParamStore<T>& params, const AdamConfig<T>& cfg,
                         const std::set<std::string>* frozen = nullptr) {
    AdamStepReport report;
    params.advance_step();
    const auto t = static_cast<T>(params.step());
    const T bc1 = T(1) - std::pow(cfg.beta1, t);
    const T bc2 = T(1) - std::pow(cfg.beta2, t);
    for (auto& [name, b] : params.blocks()) {
        if (frozen && frozen->count(name)) continue;
        if (!b.grad.allFinite()) {
            report.skipped_blocks.push_back(name);
            continue;
        }
        b.m = cfg.beta1 * b.m + (T(1) - cfg.beta1) * b.grad;
        b.v = cfg.beta2 * b.v + (T(1) - cfg.beta2) * b.grad.cwiseProduct(b.grad);
        const T step_scale = cfg.lr * b.lr_mult / bc1;
        b.value.array() -=
            step_scale * b.m.array() / ((b.v.array() / bc2).sqrt() + cfg.eps);
    }
    return report;
}

// lr0 * decay^(step/total); the published schedule decays by 10x over 2.5e5 steps.
inline double lr_schedule(std::int64_t step, std::int64_t total = 250000, double lr0 = 5e-4,
                          double decay = 0.1) {
    if (total <= 0) throw UsageError("lr_schedule: total must be positive");
    if (step < 0) throw UsageError("lr_schedule: step must be non-negative");
    return lr0 * std::pow(decay, static_cast<double>(step) / static_cast<double>(total));
}

}  // namespace sdfrecon
