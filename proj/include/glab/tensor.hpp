#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace glab {

using Shape = std::vector<int>;

inline int numel(const Shape& s) {
    int n = 1;
    for (int e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        out += std::to_string(s[i]);
        if (i + 1 < s.size()) out += "x";
    }
    return out + "]";
}

// Operation kinds recorded on the tape. The first block is the public
// forward-op surface; the second block holds the ops the backward pass is
// expressed in, so that gradients are themselves differentiable tape values.
enum class Op {
    Conv2dSame,
    Add,
    Scale,
    AddConst,
    ConcatChannels,
    LeakyRelu,
    AbsPow,
    ReduceSum,
    Mul,
    AvgPool2x,
    UpsampleNearest2x,
    SliceChannels,
    TransposeFlipKernel,
    Conv2dWeightGrad,
    AbsPowScaled,
    BroadcastScalar,
    BiasAddChannels,
    SumSpatial,
    BroadcastChannels,
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::Conv2dSame: return "conv2d-same";
        case Op::Add: return "add";
        case Op::Scale: return "scale";
        case Op::AddConst: return "add-const";
        case Op::ConcatChannels: return "concat-channels";
        case Op::LeakyRelu: return "leaky-relu";
        case Op::AbsPow: return "abs-pow";
        case Op::ReduceSum: return "reduce-sum";
        case Op::Mul: return "elementwise-mul";
        case Op::AvgPool2x: return "avg-pool2x";
        case Op::UpsampleNearest2x: return "upsample-nearest2x";
        case Op::SliceChannels: return "slice-channels";
        case Op::TransposeFlipKernel: return "transpose-flip-kernel";
        case Op::Conv2dWeightGrad: return "conv2d-weight-grad";
        case Op::AbsPowScaled: return "abs-pow-scaled";
        case Op::BroadcastScalar: return "broadcast-scalar";
        case Op::BiasAddChannels: return "bias-add-channels";
        case Op::SumSpatial: return "sum-spatial";
        case Op::BroadcastChannels: return "broadcast-channels";
    }
    return "?";
}

class Tape;

// Dense 64-bit tensor. Value semantics; the payload is shared and treated as
// immutable once created. `tape`/`node` are set when the tensor is a live
// node of a tape.
class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<double> values)
        : shape_(std::move(shape)),
          data_(std::make_shared<const std::vector<double>>(std::move(values))) {
        if (static_cast<int>(data_->size()) != glab::numel(shape_))
            throw std::invalid_argument("Tensor: values length " + std::to_string(data_->size()) +
                                        " does not match shape " + shape_str(shape_));
    }

    static Tensor zeros(const Shape& s) { return Tensor(s, std::vector<double>(glab::numel(s), 0.0)); }
    static Tensor full(const Shape& s, double v) { return Tensor(s, std::vector<double>(glab::numel(s), v)); }
    static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

    const Shape& shape() const { return shape_; }
    int numel() const { return glab::numel(shape_); }
    bool is_scalar() const { return numel() == 1; }
    bool defined() const { return static_cast<bool>(data_); }

    const std::vector<double>& values() const { return *data_; }
    double operator[](int i) const { return (*data_)[static_cast<std::size_t>(i)]; }

    double scalar_value() const {
        if (!is_scalar()) throw std::invalid_argument("scalar_value: tensor has " + std::to_string(numel()) + " elements");
        return (*data_)[0];
    }

    bool attached() const { return tape_ != nullptr; }
    Tape* tape() const { return tape_; }
    int node() const { return node_; }

    Tensor detached() const {
        Tensor t = *this;
        t.tape_ = nullptr;
        t.node_ = -1;
        return t;
    }

    bool all_finite() const {
        for (double v : *data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

private:
    friend class Tape;
    friend Tensor record_op(Op op, const std::vector<Tensor>& inputs, Shape out_shape,
                            std::vector<double> out_values, double a, double b, bool odd, Shape aux);
    Shape shape_;
    std::shared_ptr<const std::vector<double>> data_;
    Tape* tape_ = nullptr;
    int node_ = -1;
};

using GradMap = std::unordered_map<int, Tensor>;

namespace detail {

// ---- raw kernels (shared by forward ops and tape replay) ------------------

// zero-pads one channel plane into a (h+kh-1) x (w+kw-1) scratch so the hot
// loops need no bounds checks
inline void pad_plane(const double* xp, int h, int w, int ph, int pw, std::vector<double>& pad) {
    const int pw2 = w + 2 * pw;
    pad.assign(static_cast<std::size_t>(h + 2 * ph) * pw2, 0.0);
    for (int i = 0; i < h; ++i)
        std::memcpy(pad.data() + static_cast<std::size_t>(i + ph) * pw2 + pw,
                    xp + static_cast<std::size_t>(i) * w, static_cast<std::size_t>(w) * sizeof(double));
}

inline void conv2d_same_kernel(const double* x, int ci, int h, int w,
                               const double* k, int co, int kh, int kw, double* y) {
    const int ph = kh / 2, pw = kw / 2;
    const int pw2 = w + 2 * pw;
    std::fill(y, y + static_cast<std::size_t>(co) * h * w, 0.0);
    std::vector<double> pad;
    for (int ic = 0; ic < ci; ++ic) {
        pad_plane(x + static_cast<std::size_t>(ic) * h * w, h, w, ph, pw, pad);
        for (int oc = 0; oc < co; ++oc) {
            double* yp = y + static_cast<std::size_t>(oc) * h * w;
            const double* kp = k + (static_cast<std::size_t>(oc) * ci + ic) * kh * kw;
            if (kh == 3 && kw == 3) {
                const double k00 = kp[0], k01 = kp[1], k02 = kp[2];
                const double k10 = kp[3], k11 = kp[4], k12 = kp[5];
                const double k20 = kp[6], k21 = kp[7], k22 = kp[8];
                for (int i = 0; i < h; ++i) {
                    const double* r0 = pad.data() + static_cast<std::size_t>(i) * pw2;
                    const double* r1 = r0 + pw2;
                    const double* r2 = r1 + pw2;
                    double* yr = yp + static_cast<std::size_t>(i) * w;
                    for (int j = 0; j < w; ++j) {
                        double s = yr[j];
                        s = std::fma(k00, r0[j], s);
                        s = std::fma(k01, r0[j + 1], s);
                        s = std::fma(k02, r0[j + 2], s);
                        s = std::fma(k10, r1[j], s);
                        s = std::fma(k11, r1[j + 1], s);
                        s = std::fma(k12, r1[j + 2], s);
                        s = std::fma(k20, r2[j], s);
                        s = std::fma(k21, r2[j + 1], s);
                        s = std::fma(k22, r2[j + 2], s);
                        yr[j] = s;
                    }
                }
            } else {
                for (int i = 0; i < h; ++i) {
                    double* yr = yp + static_cast<std::size_t>(i) * w;
                    for (int u = 0; u < kh; ++u) {
                        const double* rr = pad.data() + static_cast<std::size_t>(i + u) * pw2;
                        for (int v = 0; v < kw; ++v) {
                            const double c = kp[u * kw + v];
                            const double* xr = rr + v;
                            for (int j = 0; j < w; ++j) yr[j] = std::fma(c, xr[j], yr[j]);
                        }
                    }
                }
            }
        }
    }
}

// gw[oc,ic,u,v] = sum_{i,j} g[oc,i,j] * x[ic, i+u-ph, j+v-pw]
inline void conv2d_weight_grad_kernel(const double* x, int ci, int h, int w,
                                      const double* g, int co, int kh, int kw, double* gw) {
    const int ph = kh / 2, pw = kw / 2;
    const int pw2 = w + 2 * pw;
    std::vector<double> pad;
    for (int ic = 0; ic < ci; ++ic) {
        pad_plane(x + static_cast<std::size_t>(ic) * h * w, h, w, ph, pw, pad);
        for (int oc = 0; oc < co; ++oc) {
            const double* gp = g + static_cast<std::size_t>(oc) * h * w;
            double* out = gw + (static_cast<std::size_t>(oc) * ci + ic) * kh * kw;
            if (kh == 3 && kw == 3) {
                double a00 = 0, a01 = 0, a02 = 0, a10 = 0, a11 = 0, a12 = 0, a20 = 0, a21 = 0, a22 = 0;
                for (int i = 0; i < h; ++i) {
                    const double* r0 = pad.data() + static_cast<std::size_t>(i) * pw2;
                    const double* r1 = r0 + pw2;
                    const double* r2 = r1 + pw2;
                    const double* gr = gp + static_cast<std::size_t>(i) * w;
                    for (int j = 0; j < w; ++j) {
                        const double gv = gr[j];
                        a00 = std::fma(gv, r0[j], a00);
                        a01 = std::fma(gv, r0[j + 1], a01);
                        a02 = std::fma(gv, r0[j + 2], a02);
                        a10 = std::fma(gv, r1[j], a10);
                        a11 = std::fma(gv, r1[j + 1], a11);
                        a12 = std::fma(gv, r1[j + 2], a12);
                        a20 = std::fma(gv, r2[j], a20);
                        a21 = std::fma(gv, r2[j + 1], a21);
                        a22 = std::fma(gv, r2[j + 2], a22);
                    }
                }
                out[0] = a00;
                out[1] = a01;
                out[2] = a02;
                out[3] = a10;
                out[4] = a11;
                out[5] = a12;
                out[6] = a20;
                out[7] = a21;
                out[8] = a22;
            } else {
                std::vector<double> acc(static_cast<std::size_t>(kh) * kw, 0.0);
                for (int i = 0; i < h; ++i) {
                    const double* gr = gp + static_cast<std::size_t>(i) * w;
                    for (int j = 0; j < w; ++j) {
                        const double gv = gr[j];
                        for (int u = 0; u < kh; ++u) {
                            const double* rr = pad.data() + static_cast<std::size_t>(i + u) * pw2 + j;
                            for (int v = 0; v < kw; ++v)
                                acc[static_cast<std::size_t>(u) * kw + v] =
                                    std::fma(gv, rr[v], acc[static_cast<std::size_t>(u) * kw + v]);
                        }
                    }
                }
                std::memcpy(out, acc.data(), acc.size() * sizeof(double));
            }
        }
    }
}

inline double clamped_abs(double x, double expo) {
    double a = std::fabs(x);
    // |x| below 1e-12 is clamped when a negative/fractional power would blow up.
    if (expo < 1.0 && a < 1e-12) a = 1e-12;
    return a;
}

inline double abs_pow_scaled_value(double x, double coeff, double expo, bool odd) {
    double v;
    if (expo == 0.0) {
        v = coeff;
    } else if (expo == 1.0) {
        v = coeff * clamped_abs(x, expo);
    } else if (expo == 2.0) {
        const double a = std::fabs(x);
        v = coeff * a * a;
    } else {
        v = coeff * std::pow(clamped_abs(x, expo), expo);
    }
    if (odd) v *= (x > 0.0) - (x < 0.0);
    return v;
}

} // namespace detail

// Records every op so that (a) reverse sweeps can be run, and (b) the whole
// computation can be re-executed bit-for-bit from its leaves.
class Tape {
public:
    struct Record {
        Op op;
        std::vector<int> in;
        int out = -1;
        double a = 0.0;   // scale factor / slope / added const / coeff
        double b = 0.0;   // exponent
        bool odd = false; // sign factor of AbsPowScaled
        Shape aux;        // slice bounds, broadcast target, kernel extents
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    int num_nodes() const { return static_cast<int>(nodes_.size()); }
    int num_records() const { return static_cast<int>(records_.size()); }

    // Registers a detached tensor as a leaf of this tape.
    Tensor leaf(const Tensor& t) {
        Tensor out = t;
        out.tape_ = this;
        out.node_ = add_node(t.shape_, t.data_, /*leaf=*/true);
        return out;
    }
    Tensor leaf(const Shape& s, std::vector<double> v) { return leaf(Tensor(s, std::move(v))); }

    const Shape& node_shape(int id) const { return nodes_[static_cast<std::size_t>(id)].shape; }
    bool node_is_leaf(int id) const { return nodes_[static_cast<std::size_t>(id)].leaf; }

    // A Tensor view of a stored node; attached views let further ops record.
    Tensor node_tensor(int id, bool attach) {
        const NodeData& n = nodes_[static_cast<std::size_t>(id)];
        Tensor t;
        t.shape_ = n.shape;
        t.data_ = n.values;
        if (attach) {
            t.tape_ = this;
            t.node_ = id;
        }
        return t;
    }

    std::vector<int> leaf_ids() const {
        std::vector<int> ids;
        for (int i = 0; i < num_nodes(); ++i)
            if (nodes_[static_cast<std::size_t>(i)].leaf) ids.push_back(i);
        return ids;
    }

    // Reverse-mode sweep from a scalar output. Returns the adjoint of every
    // leaf that existed when the sweep started (zeros when unreachable).
    // With create_graph the sweep itself is recorded, so scalar functions of
    // the returned gradients support a further backward pass.
    // `only_towards`, when >= 0, restricts propagation to the ancestry cone
    // of that node: adjoints outside it are never materialized. The returned
    // gradient for that node is unchanged by the restriction.
    GradMap backward(const Tensor& out, bool create_graph = false, int only_towards = -1);

    // Re-executes every record from the stored leaf values and checks the
    // stored intermediate values are reproduced bit-for-bit.
    bool replay_bitexact() const;

private:
    struct NodeData {
        Shape shape;
        std::shared_ptr<const std::vector<double>> values;
        bool leaf = true;
    };

    int add_node(const Shape& s, std::shared_ptr<const std::vector<double>> v, bool leaf) {
        nodes_.push_back(NodeData{s, std::move(v), leaf});
        return num_nodes() - 1;
    }

    std::vector<NodeData> nodes_;
    std::vector<Record> records_;

    friend Tensor record_op(Op op, const std::vector<Tensor>& inputs, Shape out_shape,
                            std::vector<double> out_values, double a, double b, bool odd, Shape aux);
    friend std::vector<double> eval_record(const Tape::Record& rec,
                                           const std::vector<const std::vector<double>*>& in_values,
                                           const std::vector<Shape>& in_shapes, const Shape& out_shape);
};

// ---- shape validation helpers ---------------------------------------------

namespace detail {

[[noreturn]] inline void op_error(Op op, const std::string& msg) {
    throw std::invalid_argument(std::string(op_name(op)) + ": " + msg);
}

inline void require(bool cond, Op op, const std::string& msg) {
    if (!cond) op_error(op, msg);
}

inline void require_same_shape(Op op, const Tensor& x, const Tensor& y) {
    require(x.shape() == y.shape(), op,
            "shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
}

inline void require_chw(Op op, const Tensor& x) {
    require(x.shape().size() == 3, op, "expected [C,H,W] tensor, got " + shape_str(x.shape()));
}

} // namespace detail

// Computes a record's output values from its input values. Single evaluation
// path shared by the forward functions and Tape::replay_bitexact.
inline std::vector<double> eval_record(const Tape::Record& rec,
                                       const std::vector<const std::vector<double>*>& in,
                                       const std::vector<Shape>& is, const Shape& out_shape) {
    std::vector<double> out(static_cast<std::size_t>(numel(out_shape)));
    switch (rec.op) {
        case Op::Conv2dSame: {
            const Shape& xs = is[0];
            const Shape& ws = is[1];
            detail::conv2d_same_kernel(in[0]->data(), xs[0], xs[1], xs[2],
                                       in[1]->data(), ws[0], ws[2], ws[3], out.data());
            break;
        }
        case Op::Conv2dWeightGrad: {
            const Shape& xs = is[0];
            const Shape& gs = is[1];
            detail::conv2d_weight_grad_kernel(in[0]->data(), xs[0], xs[1], xs[2],
                                              in[1]->data(), gs[0], rec.aux[0], rec.aux[1], out.data());
            break;
        }
        case Op::TransposeFlipKernel: {
            const Shape& ws = is[0];
            const int co = ws[0], ci = ws[1], kh = ws[2], kw = ws[3];
            const double* w = in[0]->data();
            for (int oc = 0; oc < co; ++oc)
                for (int ic = 0; ic < ci; ++ic)
                    for (int u = 0; u < kh; ++u)
                        for (int v = 0; v < kw; ++v)
                            out[(((static_cast<std::size_t>(ic) * co + oc) * kh) + (kh - 1 - u)) * kw + (kw - 1 - v)] =
                                w[(((static_cast<std::size_t>(oc) * ci + ic) * kh) + u) * kw + v];
            break;
        }
        case Op::Add: {
            const double* a = in[0]->data();
            const double* b = in[1]->data();
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
            break;
        }
        case Op::Scale: {
            const double* a = in[0]->data();
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = rec.a * a[i];
            break;
        }
        case Op::AddConst: {
            const double* a = in[0]->data();
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + rec.a;
            break;
        }
        case Op::Mul: {
            const double* a = in[0]->data();
            const double* b = in[1]->data();
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
            break;
        }
        case Op::ConcatChannels: {
            std::size_t off = 0;
            for (std::size_t k = 0; k < in.size(); ++k) {
                std::memcpy(out.data() + off, in[k]->data(), in[k]->size() * sizeof(double));
                off += in[k]->size();
            }
            break;
        }
        case Op::SliceChannels: {
            const Shape& xs = is[0];
            const std::size_t plane = static_cast<std::size_t>(xs[1]) * xs[2];
            std::memcpy(out.data(), in[0]->data() + rec.aux[0] * plane,
                        static_cast<std::size_t>(rec.aux[1] - rec.aux[0]) * plane * sizeof(double));
            break;
        }
        case Op::LeakyRelu: {
            const double* a = in[0]->data();
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] >= 0.0 ? a[i] : rec.a * a[i];
            break;
        }
        case Op::AbsPow: {
            const double* a = in[0]->data();
            for (std::size_t i = 0; i < out.size(); ++i)
                out[i] = detail::abs_pow_scaled_value(a[i], 1.0, rec.b, false);
            break;
        }
        case Op::AbsPowScaled: {
            const double* a = in[0]->data();
            for (std::size_t i = 0; i < out.size(); ++i)
                out[i] = detail::abs_pow_scaled_value(a[i], rec.a, rec.b, rec.odd);
            break;
        }
        case Op::ReduceSum: {
            double s = 0.0;
            const double* a = in[0]->data();
            for (std::size_t i = 0; i < in[0]->size(); ++i) s += a[i];
            out[0] = s;
            break;
        }
        case Op::BroadcastScalar: {
            std::fill(out.begin(), out.end(), (*in[0])[0]);
            break;
        }
        case Op::BiasAddChannels: {
            const Shape& xs = is[0];
            const std::size_t plane = static_cast<std::size_t>(xs[1]) * xs[2];
            const double* a = in[0]->data();
            const double* b = in[1]->data();
            for (int c = 0; c < xs[0]; ++c)
                for (std::size_t i = 0; i < plane; ++i)
                    out[c * plane + i] = a[c * plane + i] + b[c];
            break;
        }
        case Op::SumSpatial: {
            const Shape& xs = is[0];
            const std::size_t plane = static_cast<std::size_t>(xs[1]) * xs[2];
            const double* a = in[0]->data();
            for (int c = 0; c < xs[0]; ++c) {
                double s = 0.0;
                for (std::size_t i = 0; i < plane; ++i) s += a[c * plane + i];
                out[static_cast<std::size_t>(c)] = s;
            }
            break;
        }
        case Op::BroadcastChannels: {
            const int h = rec.aux[0], w = rec.aux[1];
            const std::size_t plane = static_cast<std::size_t>(h) * w;
            const double* a = in[0]->data();
            for (std::size_t c = 0; c < in[0]->size(); ++c)
                std::fill(out.begin() + c * plane, out.begin() + (c + 1) * plane, a[c]);
            break;
        }
        case Op::AvgPool2x: {
            const Shape& xs = is[0];
            const int c = xs[0], h = xs[1], w = xs[2];
            const int oh = h / 2, ow = w / 2;
            const double* a = in[0]->data();
            for (int k = 0; k < c; ++k) {
                const double* xp = a + static_cast<std::size_t>(k) * h * w;
                double* yp = out.data() + static_cast<std::size_t>(k) * oh * ow;
                for (int i = 0; i < oh; ++i)
                    for (int j = 0; j < ow; ++j)
                        yp[i * ow + j] = 0.25 * (xp[(2 * i) * w + 2 * j] + xp[(2 * i) * w + 2 * j + 1] +
                                                 xp[(2 * i + 1) * w + 2 * j] + xp[(2 * i + 1) * w + 2 * j + 1]);
            }
            break;
        }
        case Op::UpsampleNearest2x: {
            const Shape& xs = is[0];
            const int c = xs[0], h = xs[1], w = xs[2];
            const double* a = in[0]->data();
            for (int k = 0; k < c; ++k) {
                const double* xp = a + static_cast<std::size_t>(k) * h * w;
                double* yp = out.data() + static_cast<std::size_t>(k) * 4 * h * w;
                for (int i = 0; i < 2 * h; ++i)
                    for (int j = 0; j < 2 * w; ++j)
                        yp[i * 2 * w + j] = xp[(i / 2) * w + j / 2];
            }
            break;
        }
    }
    return out;
}

// Central entry point for every forward op: computes values eagerly, and when
// any input lives on a tape, records the op (auto-registering detached inputs
// as constant leaves).
inline Tensor record_op(Op op, const std::vector<Tensor>& inputs, Shape out_shape,
                        std::vector<double> out_values, double a = 0.0, double b = 0.0,
                        bool odd = false, Shape aux = {}) {
    Tape* tape = nullptr;
    for (const Tensor& t : inputs) {
        if (!t.attached()) continue;
        if (tape && tape != t.tape())
            detail::op_error(op, "inputs live on different tapes");
        tape = t.tape();
    }
    Tensor out(std::move(out_shape), std::move(out_values));
    if (!tape) return out;

    Tape::Record rec;
    rec.op = op;
    rec.a = a;
    rec.b = b;
    rec.odd = odd;
    rec.aux = std::move(aux);
    for (const Tensor& t : inputs) {
        int id = t.node();
        if (!t.attached()) id = tape->leaf(t).node();
        rec.in.push_back(id);
    }
    out.tape_ = tape;
    out.node_ = tape->add_node(out.shape_, out.data_, /*leaf=*/false);
    rec.out = out.node_;
    tape->records_.push_back(std::move(rec));
    return out;
}

namespace detail {

inline std::vector<double> eval_from_tensors(Op op, const std::vector<Tensor>& inputs,
                                             const Shape& out_shape, double a = 0.0, double b = 0.0,
                                             bool odd = false, const Shape& aux = {}) {
    Tape::Record rec;
    rec.op = op;
    rec.a = a;
    rec.b = b;
    rec.odd = odd;
    rec.aux = aux;
    std::vector<const std::vector<double>*> vals;
    std::vector<Shape> shapes;
    for (const Tensor& t : inputs) {
        vals.push_back(&t.values());
        shapes.push_back(t.shape());
    }
    return eval_record(rec, vals, shapes, out_shape);
}

} // namespace detail

// ---- public forward ops ----------------------------------------------------

inline Tensor conv2d_same(const Tensor& x, const Tensor& w) {
    detail::require_chw(Op::Conv2dSame, x);
    detail::require(w.shape().size() == 4, Op::Conv2dSame,
                    "expected [Co,Ci,kh,kw] kernel, got " + shape_str(w.shape()));
    detail::require(w.shape()[1] == x.shape()[0], Op::Conv2dSame,
                    "kernel expects " + std::to_string(w.shape()[1]) + " input channels, image has " +
                        std::to_string(x.shape()[0]) + " (" + shape_str(x.shape()) + " vs " + shape_str(w.shape()) + ")");
    detail::require(w.shape()[2] % 2 == 1 && w.shape()[3] % 2 == 1, Op::Conv2dSame,
                    "kernel extents must be odd, got " + shape_str(w.shape()));
    Shape os{w.shape()[0], x.shape()[1], x.shape()[2]};
    auto v = detail::eval_from_tensors(Op::Conv2dSame, {x, w}, os);
    return record_op(Op::Conv2dSame, {x, w}, os, std::move(v));
}

inline Tensor conv2d_weight_grad(const Tensor& x, const Tensor& g, int kh, int kw) {
    detail::require_chw(Op::Conv2dWeightGrad, x);
    detail::require_chw(Op::Conv2dWeightGrad, g);
    detail::require(x.shape()[1] == g.shape()[1] && x.shape()[2] == g.shape()[2], Op::Conv2dWeightGrad,
                    "spatial mismatch " + shape_str(x.shape()) + " vs " + shape_str(g.shape()));
    Shape os{g.shape()[0], x.shape()[0], kh, kw};
    Shape aux{kh, kw};
    auto v = detail::eval_from_tensors(Op::Conv2dWeightGrad, {x, g}, os, 0, 0, false, aux);
    return record_op(Op::Conv2dWeightGrad, {x, g}, os, std::move(v), 0, 0, false, aux);
}

inline Tensor transpose_flip_kernel(const Tensor& w) {
    detail::require(w.shape().size() == 4, Op::TransposeFlipKernel, "expected 4-d kernel");
    Shape os{w.shape()[1], w.shape()[0], w.shape()[2], w.shape()[3]};
    auto v = detail::eval_from_tensors(Op::TransposeFlipKernel, {w}, os);
    return record_op(Op::TransposeFlipKernel, {w}, os, std::move(v));
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(Op::Add, a, b);
    auto v = detail::eval_from_tensors(Op::Add, {a, b}, a.shape());
    return record_op(Op::Add, {a, b}, a.shape(), std::move(v));
}

inline Tensor scale(const Tensor& x, double s) {
    auto v = detail::eval_from_tensors(Op::Scale, {x}, x.shape(), s);
    return record_op(Op::Scale, {x}, x.shape(), std::move(v), s);
}

inline Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

inline Tensor add_const(const Tensor& x, double c) {
    auto v = detail::eval_from_tensors(Op::AddConst, {x}, x.shape(), c);
    return record_op(Op::AddConst, {x}, x.shape(), std::move(v), c);
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(Op::Mul, a, b);
    auto v = detail::eval_from_tensors(Op::Mul, {a, b}, a.shape());
    return record_op(Op::Mul, {a, b}, a.shape(), std::move(v));
}

inline Tensor concat_channels(const std::vector<Tensor>& xs) {
    detail::require(!xs.empty(), Op::ConcatChannels, "no inputs");
    int c = 0;
    for (const Tensor& t : xs) {
        detail::require_chw(Op::ConcatChannels, t);
        detail::require(t.shape()[1] == xs[0].shape()[1] && t.shape()[2] == xs[0].shape()[2],
                        Op::ConcatChannels,
                        "spatial mismatch " + shape_str(t.shape()) + " vs " + shape_str(xs[0].shape()));
        c += t.shape()[0];
    }
    Shape os{c, xs[0].shape()[1], xs[0].shape()[2]};
    auto v = detail::eval_from_tensors(Op::ConcatChannels, xs, os);
    return record_op(Op::ConcatChannels, xs, os, std::move(v));
}

inline Tensor slice_channels(const Tensor& x, int c0, int c1) {
    detail::require_chw(Op::SliceChannels, x);
    detail::require(0 <= c0 && c0 < c1 && c1 <= x.shape()[0], Op::SliceChannels,
                    "bad channel range [" + std::to_string(c0) + "," + std::to_string(c1) + ") for " +
                        shape_str(x.shape()));
    Shape os{c1 - c0, x.shape()[1], x.shape()[2]};
    Shape aux{c0, c1};
    auto v = detail::eval_from_tensors(Op::SliceChannels, {x}, os, 0, 0, false, aux);
    return record_op(Op::SliceChannels, {x}, os, std::move(v), 0, 0, false, aux);
}

inline Tensor leaky_relu(const Tensor& x, double slope = 0.2) {
    auto v = detail::eval_from_tensors(Op::LeakyRelu, {x}, x.shape(), slope);
    return record_op(Op::LeakyRelu, {x}, x.shape(), std::move(v), slope);
}

inline Tensor abs_pow(const Tensor& x, double p) {
    detail::require(p >= 1.0, Op::AbsPow, "exponent p = " + std::to_string(p) + " < 1");
    auto v = detail::eval_from_tensors(Op::AbsPow, {x}, x.shape(), 0, p);
    return record_op(Op::AbsPow, {x}, x.shape(), std::move(v), 0, p);
}

// coeff * |x|^expo, optionally carrying sign(x); |x| clamped at 1e-12 when
// expo < 1. Backward helper of abs_pow; also the reciprocal / root used by
// norm expressions.
inline Tensor abs_pow_scaled(const Tensor& x, double coeff, double expo, bool odd) {
    auto v = detail::eval_from_tensors(Op::AbsPowScaled, {x}, x.shape(), coeff, expo, odd);
    return record_op(Op::AbsPowScaled, {x}, x.shape(), std::move(v), coeff, expo, odd);
}

inline Tensor reduce_sum(const Tensor& x) {
    Shape os{1};
    auto v = detail::eval_from_tensors(Op::ReduceSum, {x}, os);
    return record_op(Op::ReduceSum, {x}, os, std::move(v));
}

inline Tensor broadcast_scalar(const Tensor& s, const Shape& target) {
    detail::require(s.is_scalar(), Op::BroadcastScalar, "input must be scalar");
    auto v = detail::eval_from_tensors(Op::BroadcastScalar, {s}, target, 0, 0, false, target);
    return record_op(Op::BroadcastScalar, {s}, target, std::move(v), 0, 0, false, target);
}

inline Tensor bias_add_channels(const Tensor& x, const Tensor& b) {
    detail::require_chw(Op::BiasAddChannels, x);
    detail::require(b.shape().size() == 1 && b.shape()[0] == x.shape()[0], Op::BiasAddChannels,
                    "bias " + shape_str(b.shape()) + " does not match " + shape_str(x.shape()));
    auto v = detail::eval_from_tensors(Op::BiasAddChannels, {x, b}, x.shape());
    return record_op(Op::BiasAddChannels, {x, b}, x.shape(), std::move(v));
}

inline Tensor sum_spatial(const Tensor& x) {
    detail::require_chw(Op::SumSpatial, x);
    Shape os{x.shape()[0]};
    auto v = detail::eval_from_tensors(Op::SumSpatial, {x}, os);
    return record_op(Op::SumSpatial, {x}, os, std::move(v));
}

inline Tensor broadcast_channels(const Tensor& b, int h, int w) {
    detail::require(b.shape().size() == 1, Op::BroadcastChannels, "expected [C] input");
    Shape os{b.shape()[0], h, w};
    Shape aux{h, w};
    auto v = detail::eval_from_tensors(Op::BroadcastChannels, {b}, os, 0, 0, false, aux);
    return record_op(Op::BroadcastChannels, {b}, os, std::move(v), 0, 0, false, aux);
}

inline Tensor avg_pool2x(const Tensor& x) {
    detail::require_chw(Op::AvgPool2x, x);
    detail::require(x.shape()[1] % 2 == 0 && x.shape()[2] % 2 == 0, Op::AvgPool2x,
                    "extents must be even, got " + shape_str(x.shape()));
    Shape os{x.shape()[0], x.shape()[1] / 2, x.shape()[2] / 2};
    auto v = detail::eval_from_tensors(Op::AvgPool2x, {x}, os);
    return record_op(Op::AvgPool2x, {x}, os, std::move(v));
}

inline Tensor upsample_nearest2x(const Tensor& x) {
    detail::require_chw(Op::UpsampleNearest2x, x);
    Shape os{x.shape()[0], x.shape()[1] * 2, x.shape()[2] * 2};
    auto v = detail::eval_from_tensors(Op::UpsampleNearest2x, {x}, os);
    return record_op(Op::UpsampleNearest2x, {x}, os, std::move(v));
}

// ---- backward ---------------------------------------------------------------

inline GradMap Tape::backward(const Tensor& out, bool create_graph, int only_towards) {
    if (!out.attached() || out.tape() != this)
        throw std::invalid_argument("backward: output is not attached to this tape");
    if (!out.is_scalar())
        throw std::invalid_argument("backward: output must be scalar, got " + shape_str(out.shape()));

    const int n_records = num_records();
    const int n_nodes = num_nodes();
    std::vector<int> leaves;
    for (int i = 0; i < n_nodes; ++i)
        if (nodes_[static_cast<std::size_t>(i)].leaf) leaves.push_back(i);

    // restriction cone: nodes reachable from `only_towards` going forward
    std::vector<char> wanted;
    if (only_towards >= 0) {
        wanted.assign(static_cast<std::size_t>(n_nodes), 0);
        wanted[static_cast<std::size_t>(only_towards)] = 1;
        for (int r = 0; r < n_records; ++r) {
            const Record& rec = records_[static_cast<std::size_t>(r)];
            for (int in : rec.in)
                if (wanted[static_cast<std::size_t>(in)]) {
                    wanted[static_cast<std::size_t>(rec.out)] = 1;
                    break;
                }
        }
    }

    GradMap adj;
    Tensor seed = Tensor::scalar(1.0);
    if (create_graph) seed = this->leaf(seed);
    adj[out.node()] = seed;

    auto need = [&](int id) { return wanted.empty() || wanted[static_cast<std::size_t>(id)]; };
    auto accumulate = [&](int id, const Tensor& g) {
        auto it = adj.find(id);
        if (it == adj.end())
            adj.emplace(id, g);
        else
            it->second = add(it->second, g);
    };

    for (int r = n_records - 1; r >= 0; --r) {
        const Record rec = records_[static_cast<std::size_t>(r)]; // copy: vector may grow below
        auto it = adj.find(rec.out);
        if (it == adj.end()) continue;
        const Tensor g = it->second;
        auto in_view = [&](std::size_t k) { return node_tensor(rec.in[k], create_graph); };

        switch (rec.op) {
            case Op::Conv2dSame: {
                if (need(rec.in[0]))
                    accumulate(rec.in[0], conv2d_same(g, transpose_flip_kernel(in_view(1))));
                if (need(rec.in[1])) {
                    const Shape& ws = node_shape(rec.in[1]);
                    accumulate(rec.in[1], conv2d_weight_grad(in_view(0), g, ws[2], ws[3]));
                }
                break;
            }
            case Op::Conv2dWeightGrad: {
                // bilinear in (x, g0)
                if (need(rec.in[0])) accumulate(rec.in[0], conv2d_same(in_view(1), transpose_flip_kernel(g)));
                if (need(rec.in[1])) accumulate(rec.in[1], conv2d_same(in_view(0), g));
                break;
            }
            case Op::TransposeFlipKernel:
                if (need(rec.in[0])) accumulate(rec.in[0], transpose_flip_kernel(g));
                break;
            case Op::Add:
                if (need(rec.in[0])) accumulate(rec.in[0], g);
                if (need(rec.in[1])) accumulate(rec.in[1], g);
                break;
            case Op::Scale:
                if (need(rec.in[0])) accumulate(rec.in[0], scale(g, rec.a));
                break;
            case Op::AddConst:
                if (need(rec.in[0])) accumulate(rec.in[0], g);
                break;
            case Op::Mul:
                if (need(rec.in[0])) accumulate(rec.in[0], mul(g, in_view(1)));
                if (need(rec.in[1])) accumulate(rec.in[1], mul(g, in_view(0)));
                break;
            case Op::ConcatChannels: {
                int off = 0;
                for (std::size_t k = 0; k < rec.in.size(); ++k) {
                    const int c = node_shape(rec.in[k])[0];
                    if (need(rec.in[k])) accumulate(rec.in[k], slice_channels(g, off, off + c));
                    off += c;
                }
                break;
            }
            case Op::SliceChannels: {
                if (!need(rec.in[0])) break;
                const Shape& xs = node_shape(rec.in[0]);
                std::vector<Tensor> parts;
                if (rec.aux[0] > 0) parts.push_back(Tensor::zeros({rec.aux[0], xs[1], xs[2]}));
                parts.push_back(g);
                if (rec.aux[1] < xs[0]) parts.push_back(Tensor::zeros({xs[0] - rec.aux[1], xs[1], xs[2]}));
                accumulate(rec.in[0], parts.size() == 1 ? g : concat_channels(parts));
                break;
            }
            case Op::LeakyRelu: {
                // slope mask is constant under differentiation (2nd derivative
                // treated as exactly zero)
                if (!need(rec.in[0])) break;
                const std::vector<double>& xv = *nodes_[static_cast<std::size_t>(rec.in[0])].values;
                std::vector<double> m(xv.size());
                for (std::size_t i = 0; i < xv.size(); ++i) m[i] = xv[i] >= 0.0 ? 1.0 : rec.a;
                accumulate(rec.in[0], mul(g, Tensor(node_shape(rec.in[0]), std::move(m))));
                break;
            }
            case Op::AbsPow:
                if (need(rec.in[0]))
                    accumulate(rec.in[0], mul(g, abs_pow_scaled(in_view(0), rec.b, rec.b - 1.0, true)));
                break;
            case Op::AbsPowScaled: {
                if (rec.b == 0.0) break; // constant (or pure sign): zero a.e.
                if (need(rec.in[0]))
                    accumulate(rec.in[0],
                               mul(g, abs_pow_scaled(in_view(0), rec.a * rec.b, rec.b - 1.0, !rec.odd)));
                break;
            }
            case Op::ReduceSum:
                if (need(rec.in[0])) accumulate(rec.in[0], broadcast_scalar(g, node_shape(rec.in[0])));
                break;
            case Op::BroadcastScalar:
                if (need(rec.in[0])) accumulate(rec.in[0], reduce_sum(g));
                break;
            case Op::BiasAddChannels:
                if (need(rec.in[0])) accumulate(rec.in[0], g);
                if (need(rec.in[1])) accumulate(rec.in[1], sum_spatial(g));
                break;
            case Op::SumSpatial: {
                if (!need(rec.in[0])) break;
                const Shape& xs = node_shape(rec.in[0]);
                accumulate(rec.in[0], broadcast_channels(g, xs[1], xs[2]));
                break;
            }
            case Op::BroadcastChannels:
                if (need(rec.in[0])) accumulate(rec.in[0], sum_spatial(g));
                break;
            case Op::AvgPool2x:
                if (need(rec.in[0])) accumulate(rec.in[0], scale(upsample_nearest2x(g), 0.25));
                break;
            case Op::UpsampleNearest2x:
                if (need(rec.in[0])) accumulate(rec.in[0], scale(avg_pool2x(g), 4.0));
                break;
        }
    }

    GradMap result;
    for (int id : leaves) {
        auto it = adj.find(id);
        result[id] = it != adj.end() ? it->second : Tensor::zeros(node_shape(id));
    }
    return result;
}

inline bool Tape::replay_bitexact() const {
    std::vector<std::vector<double>> vals(nodes_.size());
    for (std::size_t i = 0; i < nodes_.size(); ++i)
        if (nodes_[i].leaf) vals[i] = *nodes_[i].values;
    for (const Record& rec : records_) {
        std::vector<const std::vector<double>*> in;
        std::vector<Shape> is;
        for (int id : rec.in) {
            in.push_back(&vals[static_cast<std::size_t>(id)]);
            is.push_back(nodes_[static_cast<std::size_t>(id)].shape);
        }
        vals[static_cast<std::size_t>(rec.out)] = eval_record(rec, in, is, nodes_[static_cast<std::size_t>(rec.out)].shape);
    }
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        if (vals[i].empty() && !nodes_[i].leaf) continue; // unreached (no record) cannot happen
        const std::vector<double>& a = vals[i];
        const std::vector<double>& b = *nodes_[i].values;
        if (a.size() != b.size()) return false;
        if (std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) != 0) return false;
    }
    return true;
}

// ---- finite-difference check ------------------------------------------------

// f builds a scalar tensor from a (tape-attached) copy of x. Returns the max
// over coordinates of |autodiff - central difference| / (|central difference| + 1e-12).
inline double grad_check(const std::function<Tensor(Tape&, const Tensor&)>& f, const Tensor& x0,
                         double h = 1e-5) {
    if (h <= 0.0) throw std::invalid_argument("grad_check: step h must be positive");

    std::vector<double> ad;
    {
        Tape tape;
        Tensor x = tape.leaf(x0);
        Tensor y = f(tape, x);
        if (!y.is_scalar()) throw std::invalid_argument("grad_check: f must return a scalar");
        if (!std::isfinite(y.scalar_value())) throw std::invalid_argument("grad_check: f value is not finite");
        GradMap g = tape.backward(y);
        ad = g.at(x.node()).values();
    }

    auto eval_at = [&](const std::vector<double>& v) {
        Tape tape;
        Tensor x = tape.leaf(Tensor(x0.shape(), v));
        const double y = f(tape, x).scalar_value();
        if (!std::isfinite(y)) throw std::invalid_argument("grad_check: f value is not finite");
        return y;
    };

    std::vector<double> v = x0.values();
    double worst = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double saved = v[i];
        v[i] = saved + h;
        const double yp = eval_at(v);
        v[i] = saved - h;
        const double ym = eval_at(v);
        v[i] = saved;
        const double fd = (yp - ym) / (2.0 * h);
        const double err = std::fabs(ad[i] - fd) / (std::fabs(fd) + 1e-12);
        worst = std::max(worst, err);
    }
    return worst;
}

} // namespace glab
