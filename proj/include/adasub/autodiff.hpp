#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "adasub/tensor.hpp"

namespace adasub {

/// Contiguous slice of the flat parameter vector owned by one layer.
struct ParamBlock {
    int block_id = 0;
    int64_t offset = 0;
    int64_t length = 0;
};

/// Raised when a forward evaluation produces a non-finite intermediate.
struct TapeEvalError : std::runtime_error {
    TapeEvalError(int node_index, const std::string& what)
        : std::runtime_error(what), node(node_index) {}
    int node;
};

// Primitive set of the tape. Every primitive's vector-Jacobian product is
// expressible with these same primitives, which is what makes the
// gradient-of-gradient construction below close on itself. All values are
// rank-2 internally: scalars are 1x1, column vectors n x 1, row vectors 1 x n.
enum class Op : uint8_t {
    kParam,      // leaf: slice of the flat parameter vector
    kConstant,   // leaf: rebindable data slot (batches, probe vectors)
    kFill,       // leaf: shape filled with a fixed scalar
    kAdd,        // a + b, same shape
    kMul,        // a ⊙ b, same shape
    kScale,      // a * c for a fixed scalar c
    kMatmul,     // op(a) * op(b), optional transposes
    kRelu,       // max(a, 0)
    kSelect,     // b ⊙ 1[a > 0]; the mask argument gets no derivative
    kExp,
    kLog,
    kSumCols,    // (r,c) -> (r,1)
    kBcastCols,  // (r,1) -> (r,c)
    kSumRows,    // (r,c) -> (1,c)
    kBcastRows,  // (1,c) -> (r,c)
    kLogSumExp,  // (r,c) -> (r,1), row-wise, max-subtracted
};

struct Node {
    Op op;
    int a = -1;
    int b = -1;
    int64_t rows = 1;
    int64_t cols = 1;
    bool trans_a = false;
    bool trans_b = false;
    double scalar = 0.0;   // kScale factor / kFill value
    int64_t offset = 0;    // kParam: offset into flat w
    int slot = -1;         // kConstant: index into Tape::constants
};

/// Append-only computation graph. Nodes are topologically ordered by
/// construction; leaves are parameters (bound from a flat vector at eval
/// time) and constants (rebindable slots owned by the tape).
class Tape {
public:
    std::vector<Node> nodes;
    std::vector<Tensor> constants;

    int64_t n_params() const { return n_params_; }
    const std::vector<int>& param_nodes() const { return param_nodes_; }

    int param(int64_t rows, int64_t cols) {
        Node n;
        n.op = Op::kParam;
        n.rows = rows;
        n.cols = cols;
        n.offset = n_params_;
        n_params_ += rows * cols;
        int id = push(n);
        param_nodes_.push_back(id);
        return id;
    }

    int constant(Tensor value) {
        Node n;
        n.op = Op::kConstant;
        n.rows = value.rows();
        n.cols = value.cols() * (value.rank() <= 1 ? 1 : 1);
        if (value.rank() == 1) {
            n.rows = static_cast<int64_t>(value.size());
            n.cols = 1;
        } else if (value.rank() == 0) {
            n.rows = 1;
            n.cols = 1;
        }
        n.slot = static_cast<int>(constants.size());
        constants.push_back(std::move(value));
        return push(n);
    }

    int constant_slot(int64_t rows, int64_t cols) {
        return constant(Tensor{{rows, cols}});
    }

    void bind_constant(int node_id, const Tensor& value) {
        const Node& n = at(node_id);
        if (n.op != Op::kConstant) throw std::invalid_argument("bind_constant: not a constant node");
        if (value.size() != static_cast<size_t>(n.rows * n.cols))
            throw std::invalid_argument("bind_constant: size mismatch");
        constants[static_cast<size_t>(n.slot)].data() = value.data();
    }

    void bind_constant(int node_id, const Vec& flat) {
        const Node& n = at(node_id);
        if (n.op != Op::kConstant) throw std::invalid_argument("bind_constant: not a constant node");
        if (flat.size() != static_cast<size_t>(n.rows * n.cols))
            throw std::invalid_argument("bind_constant: size mismatch");
        constants[static_cast<size_t>(n.slot)].data() = flat;
    }

    int fill(double value, int64_t rows, int64_t cols) {
        Node n;
        n.op = Op::kFill;
        n.rows = rows;
        n.cols = cols;
        n.scalar = value;
        return push(n);
    }

    int add(int a, int b) {
        require_same_shape(a, b, "add");
        Node n;
        n.op = Op::kAdd;
        n.a = a;
        n.b = b;
        n.rows = at(a).rows;
        n.cols = at(a).cols;
        return push(n);
    }

    int mul(int a, int b) {
        require_same_shape(a, b, "mul");
        Node n;
        n.op = Op::kMul;
        n.a = a;
        n.b = b;
        n.rows = at(a).rows;
        n.cols = at(a).cols;
        return push(n);
    }

    int scale(int a, double c) {
        Node n;
        n.op = Op::kScale;
        n.a = a;
        n.scalar = c;
        n.rows = at(a).rows;
        n.cols = at(a).cols;
        return push(n);
    }

    int sub(int a, int b) { return add(a, scale(b, -1.0)); }

    int matmul(int a, int b, bool trans_a = false, bool trans_b = false) {
        const int64_t am = trans_a ? at(a).cols : at(a).rows;
        const int64_t ak = trans_a ? at(a).rows : at(a).cols;
        const int64_t bk = trans_b ? at(b).cols : at(b).rows;
        const int64_t bn = trans_b ? at(b).rows : at(b).cols;
        if (ak != bk) throw std::invalid_argument("matmul: inner dimensions differ");
        Node n;
        n.op = Op::kMatmul;
        n.a = a;
        n.b = b;
        n.trans_a = trans_a;
        n.trans_b = trans_b;
        n.rows = am;
        n.cols = bn;
        return push(n);
    }

    int relu(int a) { return unary(Op::kRelu, a); }
    int exp(int a) { return unary(Op::kExp, a); }
    int log(int a) { return unary(Op::kLog, a); }

    int select(int mask_src, int a) {
        require_same_shape(mask_src, a, "select");
        Node n;
        n.op = Op::kSelect;
        n.a = mask_src;
        n.b = a;
        n.rows = at(a).rows;
        n.cols = at(a).cols;
        return push(n);
    }

    int sum_cols(int a) {
        Node n;
        n.op = Op::kSumCols;
        n.a = a;
        n.rows = at(a).rows;
        n.cols = 1;
        return push(n);
    }

    int bcast_cols(int a, int64_t cols) {
        if (at(a).cols != 1) throw std::invalid_argument("bcast_cols: source must be r x 1");
        Node n;
        n.op = Op::kBcastCols;
        n.a = a;
        n.rows = at(a).rows;
        n.cols = cols;
        return push(n);
    }

    int sum_rows(int a) {
        Node n;
        n.op = Op::kSumRows;
        n.a = a;
        n.rows = 1;
        n.cols = at(a).cols;
        return push(n);
    }

    int bcast_rows(int a, int64_t rows) {
        if (at(a).rows != 1) throw std::invalid_argument("bcast_rows: source must be 1 x c");
        Node n;
        n.op = Op::kBcastRows;
        n.a = a;
        n.rows = rows;
        n.cols = at(a).cols;
        return push(n);
    }

    int logsumexp(int a) {
        Node n;
        n.op = Op::kLogSumExp;
        n.a = a;
        n.rows = at(a).rows;
        n.cols = 1;
        return push(n);
    }

    // Sum of all entries down to a 1x1 scalar.
    int reduce_sum(int a) {
        int s = a;
        if (at(s).cols != 1) s = sum_cols(s);
        if (at(s).rows != 1) s = sum_rows(s);
        return s;
    }

    int dot(int a, int b) { return reduce_sum(mul(a, b)); }

    const Node& at(int id) const { return nodes[static_cast<size_t>(id)]; }
    int size() const { return static_cast<int>(nodes.size()); }

private:
    int64_t n_params_ = 0;
    std::vector<int> param_nodes_;

    int push(Node n) {
        nodes.push_back(n);
        return static_cast<int>(nodes.size()) - 1;
    }

    int unary(Op op, int a) {
        Node n;
        n.op = op;
        n.a = a;
        n.rows = at(a).rows;
        n.cols = at(a).cols;
        return push(n);
    }

    void require_same_shape(int a, int b, const char* what) {
        if (at(a).rows != at(b).rows || at(a).cols != at(b).cols)
            throw std::invalid_argument(std::string(what) + ": shape mismatch");
    }
};

/// Per-node value buffers, reusable across evaluations of the same tape.
struct Workspace {
    std::vector<Vec> values;

    void ensure(const Tape& t) {
        if (values.size() < t.nodes.size()) values.resize(t.nodes.size());
        for (size_t i = 0; i < t.nodes.size(); ++i) {
            const size_t need = static_cast<size_t>(t.nodes[i].rows * t.nodes[i].cols);
            if (values[i].size() != need) values[i].assign(need, 0.0);
        }
    }
};

namespace detail {

inline void eval_node(const Tape& t, int id, std::span<const double> w, Workspace& ws) {
    const Node& n = t.nodes[static_cast<size_t>(id)];
    Vec& out = ws.values[static_cast<size_t>(id)];
    const size_t count = static_cast<size_t>(n.rows * n.cols);

    switch (n.op) {
        case Op::kParam:
            for (size_t i = 0; i < count; ++i) out[i] = w[static_cast<size_t>(n.offset) + i];
            break;
        case Op::kConstant:
            out = t.constants[static_cast<size_t>(n.slot)].data();
            break;
        case Op::kFill:
            std::fill(out.begin(), out.end(), n.scalar);
            break;
        case Op::kAdd: {
            const Vec& a = ws.values[static_cast<size_t>(n.a)];
            const Vec& b = ws.values[static_cast<size_t>(n.b)];
            for (size_t i = 0; i < count; ++i) out[i] = a[i] + b[i];
            break;
        }
        case Op::kMul: {
            const Vec& a = ws.values[static_cast<size_t>(n.a)];
            const Vec& b = ws.values[static_cast<size_t>(n.b)];
            for (size_t i = 0; i < count; ++i) out[i] = a[i] * b[i];
            break;
        }
        case Op::kScale: {
            const Vec& a = ws.values[static_cast<size_t>(n.a)];
            for (size_t i = 0; i < count; ++i) out[i] = n.scalar * a[i];
            break;
        }
        case Op::kMatmul: {
            const Node& na = t.nodes[static_cast<size_t>(n.a)];
            const Node& nb = t.nodes[static_cast<size_t>(n.b)];
            const double* pa = ws.values[static_cast<size_t>(n.a)].data();
            const double* pb = ws.values[static_cast<size_t>(n.b)].data();
            double* pc = out.data();
            std::fill(out.begin(), out.end(), 0.0);
            const int64_t am = n.rows, bn = n.cols;
            const int64_t ak = n.trans_a ? na.rows : na.cols;
            const int64_t lda = na.cols, ldb = nb.cols;
            if (!n.trans_a && !n.trans_b) {
                for (int64_t i = 0; i < am; ++i)
                    for (int64_t k = 0; k < ak; ++k) {
                        const double aik = pa[i * lda + k];
                        if (aik == 0.0) continue;
                        const double* brow = pb + k * ldb;
                        double* crow = pc + i * bn;
                        for (int64_t j = 0; j < bn; ++j) crow[j] += aik * brow[j];
                    }
            } else if (!n.trans_a && n.trans_b) {
                for (int64_t i = 0; i < am; ++i)
                    for (int64_t j = 0; j < bn; ++j) {
                        const double* arow = pa + i * lda;
                        const double* brow = pb + j * ldb;
                        double s = 0.0;
                        for (int64_t k = 0; k < ak; ++k) s += arow[k] * brow[k];
                        pc[i * bn + j] = s;
                    }
            } else if (n.trans_a && !n.trans_b) {
                for (int64_t k = 0; k < ak; ++k) {
                    const double* arow = pa + k * lda;
                    const double* brow = pb + k * ldb;
                    for (int64_t i = 0; i < am; ++i) {
                        const double aki = arow[i];
                        if (aki == 0.0) continue;
                        double* crow = pc + i * bn;
                        for (int64_t j = 0; j < bn; ++j) crow[j] += aki * brow[j];
                    }
                }
            } else {
                for (int64_t i = 0; i < am; ++i)
                    for (int64_t j = 0; j < bn; ++j) {
                        double s = 0.0;
                        for (int64_t k = 0; k < ak; ++k) s += pa[k * lda + i] * pb[j * ldb + k];
                        pc[i * bn + j] = s;
                    }
            }
            break;
        }
        case Op::kRelu: {
            const Vec& a = ws.values[static_cast<size_t>(n.a)];
            for (size_t i = 0; i < count; ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
            break;
        }
        case Op::kSelect: {
            const Vec& m = ws.values[static_cast<size_t>(n.a)];
            const Vec& b = ws.values[static_cast<size_t>(n.b)];
            for (size_t i = 0; i < count; ++i) out[i] = m[i] > 0.0 ? b[i] : 0.0;
            break;
        }
        case Op::kExp: {
            const Vec& a = ws.values[static_cast<size_t>(n.a)];
            for (size_t i = 0; i < count; ++i) out[i] = std::exp(a[i]);
            break;
        }
        case Op::kLog: {
            const Vec& a = ws.values[static_cast<size_t>(n.a)];
            for (size_t i = 0; i < count; ++i) out[i] = std::log(a[i]);
            break;
        }
        case Op::kSumCols: {
            const Node& na = t.nodes[static_cast<size_t>(n.a)];
            const Vec& a = ws.values[static_cast<size_t>(n.a)];
            for (int64_t i = 0; i < na.rows; ++i) {
                const double* row = a.data() + i * na.cols;
                double s = 0.0;
                for (int64_t j = 0; j < na.cols; ++j) s += row[j];
                out[static_cast<size_t>(i)] = s;
            }
            break;
        }
        case Op::kBcastCols: {
            const Vec& a = ws.values[static_cast<size_t>(n.a)];
            for (int64_t i = 0; i < n.rows; ++i) {
                const double v = a[static_cast<size_t>(i)];
                double* row = out.data() + i * n.cols;
                for (int64_t j = 0; j < n.cols; ++j) row[j] = v;
            }
            break;
        }
        case Op::kSumRows: {
            const Node& na = t.nodes[static_cast<size_t>(n.a)];
            const Vec& a = ws.values[static_cast<size_t>(n.a)];
            std::fill(out.begin(), out.end(), 0.0);
            for (int64_t i = 0; i < na.rows; ++i) {
                const double* row = a.data() + i * na.cols;
                for (int64_t j = 0; j < na.cols; ++j) out[static_cast<size_t>(j)] += row[j];
            }
            break;
        }
        case Op::kBcastRows: {
            const Vec& a = ws.values[static_cast<size_t>(n.a)];
            for (int64_t i = 0; i < n.rows; ++i) {
                double* row = out.data() + i * n.cols;
                for (int64_t j = 0; j < n.cols; ++j) row[j] = a[static_cast<size_t>(j)];
            }
            break;
        }
        case Op::kLogSumExp: {
            const Node& na = t.nodes[static_cast<size_t>(n.a)];
            const Vec& a = ws.values[static_cast<size_t>(n.a)];
            for (int64_t i = 0; i < na.rows; ++i) {
                const double* row = a.data() + i * na.cols;
                double m = row[0];
                for (int64_t j = 1; j < na.cols; ++j) m = std::max(m, row[j]);
                double s = 0.0;
                for (int64_t j = 0; j < na.cols; ++j) s += std::exp(row[j] - m);
                out[static_cast<size_t>(i)] = m + std::log(s);
            }
            break;
        }
    }
}

}  // namespace detail

// Evaluate nodes [from, to) into the workspace. Values of nodes outside the
// range are left untouched; callers are responsible for having evaluated any
// prefix the range depends on.
inline void eval_range(const Tape& t, std::span<const double> w, Workspace& ws, int from, int to,
                       bool check_finite = true) {
    ws.ensure(t);
    for (int id = from; id < to; ++id) {
        detail::eval_node(t, id, w, ws);
        if (check_finite) {
            for (double x : ws.values[static_cast<size_t>(id)]) {
                if (!std::isfinite(x))
                    throw TapeEvalError(id, "non-finite value at tape node " + std::to_string(id));
            }
        }
    }
}

// Reverse-mode differentiation realized as graph construction: appends nodes
// computing the adjoint of `output` with respect to every node, and returns,
// for each requested leaf, the node id holding its gradient. Because the new
// nodes are made of the same primitive set, the construction can be applied
// to its own result, which is how Hessian-vector products are obtained.
inline std::vector<int> build_gradient(Tape& t, int output, const std::vector<int>& wrt_leaves) {
    const int top = t.size();
    const Node& out_node = t.at(output);
    if (out_node.rows != 1 || out_node.cols != 1)
        throw std::invalid_argument("build_gradient: output must be scalar");

    std::vector<int> adj(static_cast<size_t>(top), -1);
    adj[static_cast<size_t>(output)] = t.fill(1.0, 1, 1);

    auto accumulate = [&](int target, int contribution) {
        int& slot = adj[static_cast<size_t>(target)];
        slot = slot == -1 ? contribution : t.add(slot, contribution);
    };

    for (int id = top - 1; id >= 0; --id) {
        const int g = adj[static_cast<size_t>(id)];
        if (g == -1) continue;
        const Node n = t.at(id);  // copy: t.nodes may reallocate below
        switch (n.op) {
            case Op::kParam:
            case Op::kConstant:
            case Op::kFill:
                break;
            case Op::kAdd:
                accumulate(n.a, g);
                accumulate(n.b, g);
                break;
            case Op::kMul:
                accumulate(n.a, t.mul(g, n.b));
                accumulate(n.b, t.mul(g, n.a));
                break;
            case Op::kScale:
                accumulate(n.a, t.scale(g, n.scalar));
                break;
            case Op::kMatmul:
                if (!n.trans_a && !n.trans_b) {
                    accumulate(n.a, t.matmul(g, n.b, false, true));
                    accumulate(n.b, t.matmul(n.a, g, true, false));
                } else if (!n.trans_a && n.trans_b) {
                    accumulate(n.a, t.matmul(g, n.b, false, false));
                    accumulate(n.b, t.matmul(g, n.a, true, false));
                } else if (n.trans_a && !n.trans_b) {
                    accumulate(n.a, t.matmul(n.b, g, false, true));
                    accumulate(n.b, t.matmul(n.a, g, false, false));
                } else {
                    accumulate(n.a, t.matmul(n.b, g, true, true));
                    accumulate(n.b, t.matmul(g, n.a, true, true));
                }
                break;
            case Op::kRelu:
                accumulate(n.a, t.select(n.a, g));
                break;
            case Op::kSelect:
                // Mask source gets no derivative (a.e. convention).
                accumulate(n.b, t.select(n.a, g));
                break;
            case Op::kExp:
                accumulate(n.a, t.mul(g, id));
                break;
            case Op::kLog:
                // 1/x = exp(-log x) on log's domain.
                accumulate(n.a, t.mul(g, t.exp(t.scale(id, -1.0))));
                break;
            case Op::kSumCols:
                accumulate(n.a, t.bcast_cols(g, t.at(n.a).cols));
                break;
            case Op::kBcastCols:
                accumulate(n.a, t.sum_cols(g));
                break;
            case Op::kSumRows:
                accumulate(n.a, t.bcast_rows(g, t.at(n.a).rows));
                break;
            case Op::kBcastRows:
                accumulate(n.a, t.sum_rows(g));
                break;
            case Op::kLogSumExp: {
                // softmax(a) = exp(a - lse(a)), reusing this node's value.
                const int centered = t.sub(n.a, t.bcast_cols(id, n.cols == 1 ? t.at(n.a).cols : n.cols));
                const int softmax = t.exp(centered);
                accumulate(n.a, t.mul(softmax, t.bcast_cols(g, t.at(n.a).cols)));
                break;
            }
        }
    }

    std::vector<int> grads;
    grads.reserve(wrt_leaves.size());
    for (int leaf : wrt_leaves) {
        int g = adj[static_cast<size_t>(leaf)];
        if (g == -1) g = t.fill(0.0, t.at(leaf).rows, t.at(leaf).cols);
        grads.push_back(g);
    }
    return grads;
}

/// A scalar loss recorded on a tape over a flat parameter vector, with lazily
/// built first- and second-order sections. Models construct one of these per
/// (architecture, batch shape); batches are rebound between evaluations.
class LossProgram {
public:
    LossProgram(Tape tape, int loss_node, std::vector<ParamBlock> blocks, int logits_node = -1)
        : tape_(std::move(tape)),
          loss_node_(loss_node),
          logits_node_(logits_node),
          blocks_(std::move(blocks)) {
        forward_end_ = tape_.size();
        if (blocks_.empty()) {
            blocks_.push_back(ParamBlock{0, 0, tape_.n_params()});
        }
        int64_t covered = 0;
        for (const auto& b : blocks_) {
            if (b.offset != covered) throw std::invalid_argument("LossProgram: blocks must partition w");
            covered += b.length;
        }
        if (covered != tape_.n_params())
            throw std::invalid_argument("LossProgram: blocks must cover all parameters");
    }

    int64_t n_params() const { return tape_.n_params(); }
    const std::vector<ParamBlock>& blocks() const { return blocks_; }
    Tape& tape() { return tape_; }

    /// Invalidate cached evaluations after rebinding batch constants.
    void touch_data() { cached_w_.clear(); }

    double value(std::span<const double> w) {
        ensure_prefix(w, forward_end_);
        return ws_.values[static_cast<size_t>(loss_node_)][0];
    }

    std::pair<double, Vec> gradient(std::span<const double> w) {
        ensure_gradient_section();
        ensure_prefix(w, grad_end_);
        Vec g(static_cast<size_t>(tape_.n_params()), 0.0);
        gather(grad_nodes_, tape_.param_nodes(), g, 0);
        return {ws_.values[static_cast<size_t>(loss_node_)][0], std::move(g)};
    }

    Vec hvp(std::span<const double> w, const Vec& v) {
        if (static_cast<int64_t>(v.size()) != tape_.n_params())
            throw std::invalid_argument("hvp: probe vector size mismatch");
        ensure_hvp_section();
        ensure_prefix(w, grad_end_);
        bind_leaf_slices(hvp_v_slots_, tape_.param_nodes(), v, 0);
        eval_range(tape_, w, ws_, hvp_begin_, hvp_end_);
        Vec hv(static_cast<size_t>(tape_.n_params()), 0.0);
        gather(hvp_nodes_, tape_.param_nodes(), hv, 0);
        return hv;
    }

    Vec block_hvp(std::span<const double> w, const ParamBlock& block, const Vec& v_block) {
        const size_t bi = static_cast<size_t>(block.block_id);
        if (bi >= blocks_.size()) throw std::invalid_argument("block_hvp: unknown block");
        if (static_cast<int64_t>(v_block.size()) != block.length)
            throw std::invalid_argument("block_hvp: probe vector size mismatch");
        ensure_block_section(bi);
        ensure_prefix(w, grad_end_);
        BlockSection& sec = block_sections_[bi];
        bind_leaf_slices(sec.v_slots, sec.leaves, v_block, block.offset);
        eval_range(tape_, w, ws_, sec.begin, sec.end);
        Vec hv(static_cast<size_t>(block.length), 0.0);
        gather(sec.hvp_nodes, sec.leaves, hv, block.offset);
        return hv;
    }

    /// Value of an arbitrary node from the forward section (e.g. logits),
    /// valid after the most recent evaluation.
    const Vec& node_value(int node) const { return ws_.values[static_cast<size_t>(node)]; }
    int logits_node() const { return logits_node_; }
    int loss_node() const { return loss_node_; }

private:
    struct BlockSection {
        int begin = -1, end = -1;
        std::vector<int> leaves;     // param leaf ids inside this block
        std::vector<int> v_slots;    // constant node per leaf
        std::vector<int> hvp_nodes;  // gradient-of-dot node per leaf
    };

    Tape tape_;
    int loss_node_;
    int logits_node_;
    std::vector<ParamBlock> blocks_;
    Workspace ws_;

    int forward_end_ = 0;
    int grad_end_ = -1;
    std::vector<int> grad_nodes_;

    int hvp_begin_ = -1, hvp_end_ = -1;
    std::vector<int> hvp_v_slots_;
    std::vector<int> hvp_nodes_;

    std::vector<BlockSection> block_sections_;

    Vec cached_w_;
    int evaled_upto_ = 0;

    void ensure_prefix(std::span<const double> w, int upto) {
        const bool same_w = cached_w_.size() == w.size() &&
                            std::equal(cached_w_.begin(), cached_w_.end(), w.begin());
        if (same_w && evaled_upto_ >= upto) return;
        const int from = same_w ? evaled_upto_ : 0;
        eval_range(tape_, w, ws_, from, upto);
        if (!same_w) cached_w_.assign(w.begin(), w.end());
        evaled_upto_ = same_w ? std::max(evaled_upto_, upto) : upto;
    }

    void ensure_gradient_section() {
        if (grad_end_ != -1) return;
        grad_nodes_ = build_gradient(tape_, loss_node_, tape_.param_nodes());
        grad_end_ = tape_.size();
    }

    void ensure_hvp_section() {
        ensure_gradient_section();
        if (hvp_end_ != -1) return;
        hvp_begin_ = tape_.size();
        int dot = -1;
        for (size_t i = 0; i < tape_.param_nodes().size(); ++i) {
            const Node& leaf = tape_.at(tape_.param_nodes()[i]);
            const int slot = tape_.constant_slot(leaf.rows, leaf.cols);
            hvp_v_slots_.push_back(slot);
            const int term = tape_.dot(grad_nodes_[i], slot);
            dot = dot == -1 ? term : tape_.add(dot, term);
        }
        hvp_nodes_ = build_gradient(tape_, dot, tape_.param_nodes());
        hvp_end_ = tape_.size();
    }

    void ensure_block_section(size_t bi) {
        ensure_gradient_section();
        if (block_sections_.empty()) block_sections_.resize(blocks_.size());
        BlockSection& sec = block_sections_[bi];
        if (sec.end != -1) return;
        const ParamBlock& block = blocks_[bi];
        sec.begin = tape_.size();
        std::vector<int> grad_of_leaves;
        for (size_t i = 0; i < tape_.param_nodes().size(); ++i) {
            const Node& leaf = tape_.at(tape_.param_nodes()[i]);
            if (leaf.offset >= block.offset && leaf.offset < block.offset + block.length) {
                sec.leaves.push_back(tape_.param_nodes()[i]);
                grad_of_leaves.push_back(grad_nodes_[i]);
            }
        }
        int dot = -1;
        for (size_t i = 0; i < sec.leaves.size(); ++i) {
            const Node& leaf = tape_.at(sec.leaves[i]);
            const int slot = tape_.constant_slot(leaf.rows, leaf.cols);
            sec.v_slots.push_back(slot);
            const int term = tape_.dot(grad_of_leaves[i], slot);
            dot = dot == -1 ? term : tape_.add(dot, term);
        }
        sec.hvp_nodes = build_gradient(tape_, dot, sec.leaves);
        sec.end = tape_.size();
    }

    void gather(const std::vector<int>& value_nodes, const std::vector<int>& leaves, Vec& out,
                int64_t base_offset) {
        for (size_t i = 0; i < leaves.size(); ++i) {
            const Node& leaf = tape_.at(leaves[i]);
            const Vec& val = ws_.values[static_cast<size_t>(value_nodes[i])];
            std::copy(val.begin(), val.end(),
                      out.begin() + static_cast<size_t>(leaf.offset - base_offset));
        }
    }

    void bind_leaf_slices(const std::vector<int>& slots, const std::vector<int>& leaves,
                          const Vec& flat, int64_t base_offset) {
        for (size_t i = 0; i < leaves.size(); ++i) {
            const Node& leaf = tape_.at(leaves[i]);
            Vec slice(flat.begin() + static_cast<size_t>(leaf.offset - base_offset),
                      flat.begin() + static_cast<size_t>(leaf.offset - base_offset + leaf.rows * leaf.cols));
            tape_.bind_constant(slots[i], slice);
        }
    }
};

inline std::pair<double, Vec> gradient(LossProgram& f, const Vec& w) { return f.gradient(w); }

inline Vec hvp(LossProgram& f, const Vec& w, const Vec& v) { return f.hvp(w, v); }

inline Vec block_hvp(LossProgram& f, const Vec& w, const ParamBlock& block, const Vec& v_block) {
    return f.block_hvp(w, block, v_block);
}

}  // namespace adasub
