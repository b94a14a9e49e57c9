#include "fastslow/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace fastslow {

namespace {

[[noreturn]] void fail_usage(const std::string& msg) { throw UsageError(msg); }

void check_finite(const char* op, const Tensor& t) {
    for (double v : t.data) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string("non-finite value produced by op '") + op + "'");
        }
    }
}

Tape* common_tape(std::initializer_list<const Tensor*> ts) {
    Tape* tape = nullptr;
    for (const Tensor* t : ts) {
        if (!t->tape) continue;
        if (tape && tape != t->tape) fail_usage("operands belong to different tapes");
        tape = t->tape;
    }
    return tape;
}

// Value copy with no tape reference, for capture in backward closures.
Tensor detached(const Tensor& t) {
    Tensor out;
    out.shape = t.shape;
    out.data = t.data;
    return out;
}

void require(bool cond, const std::string& msg) {
    if (!cond) fail_usage(msg);
}

// Decomposes a shape around `axis` into (outer, n, inner) so that element
// (o, i, r) lives at offset (o * n + i) * inner + r.
struct AxisView {
    int64_t outer = 1, n = 1, inner = 1;
};

AxisView axis_view(const Shape& shape, int axis) {
    require(axis >= 0 && axis < static_cast<int>(shape.size()),
            "axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape));
    AxisView v;
    for (int i = 0; i < axis; ++i) v.outer *= shape[static_cast<size_t>(i)];
    v.n = shape[static_cast<size_t>(axis)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i) v.inner *= shape[i];
    return v;
}

// C[m x n] += A[m x k] * B[k x n]
void mm_acc_nn(double* c, const double* a, const double* b, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (int64_t t = 0; t < k; ++t) {
            double av = arow[t];
            if (av == 0.0) continue;
            const double* brow = b + t * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m x k] += A[m x n] * B[k x n]^T
void mm_acc_nt(double* c, const double* a, const double* b, int64_t m, int64_t n, int64_t k) {
    for (int64_t i = 0; i < m; ++i) {
        const double* arow = a + i * n;
        double* crow = c + i * k;
        for (int64_t j = 0; j < k; ++j) {
            const double* brow = b + j * n;
            double acc = 0.0;
            for (int64_t t = 0; t < n; ++t) acc += arow[t] * brow[t];
            crow[j] += acc;
        }
    }
}

// C[k x n] += A[m x k]^T * B[m x n]
void mm_acc_tn(double* c, const double* a, const double* b, int64_t m, int64_t k, int64_t n) {
    for (int64_t t = 0; t < m; ++t) {
        const double* arow = a + t * k;
        const double* brow = b + t * n;
        for (int64_t i = 0; i < k; ++i) {
            double av = arow[i];
            if (av == 0.0) continue;
            double* crow = c + i * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

Tensor unary_map(const char* op, const Tensor& a, const std::function<double(double)>& f,
                 Tape::BackwardFn backward_if_tracked) {
    Tensor out;
    out.shape = a.shape;
    out.data.resize(a.data.size());
    for (size_t i = 0; i < a.data.size(); ++i) out.data[i] = f(a.data[i]);
    check_finite(op, out);
    if (Tape* tape = common_tape({&a})) {
        out.tape = tape;
        out.node = tape->record(op, {a.node}, out.shape, std::move(backward_if_tracked));
    }
    return out;
}

}  // namespace

int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

Tensor::Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    for (int64_t dim : shape) require(dim > 0, "non-positive dimension in shape " + shape_str(shape));
    require(shape_numel(shape) == static_cast<int64_t>(data.size()),
            "shape " + shape_str(shape) + " does not match element count " +
                std::to_string(data.size()));
}

double Tensor::value() const {
    require(numel() == 1, "value() on non-scalar tensor of shape " + shape_str(shape));
    return data[0];
}

Tensor Tensor::zeros(Shape s) {
    int64_t n = shape_numel(s);
    return Tensor(std::move(s), std::vector<double>(static_cast<size_t>(n), 0.0));
}

Tensor Tensor::full(Shape s, double v) {
    int64_t n = shape_numel(s);
    Tensor t(std::move(s), std::vector<double>(static_cast<size_t>(n), v));
    check_finite("full", t);
    return t;
}

Tensor Tensor::scalar(double v) { return full({1}, v); }

Tensor Tensor::from_data(Shape s, std::vector<double> d) {
    Tensor t(std::move(s), std::move(d));
    check_finite("from_data", t);
    return t;
}

Tensor Tensor::uniform(Shape s, Rng& rng, double lo, double hi) {
    Tensor t = zeros(std::move(s));
    for (double& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

Tensor Tensor::glorot(Shape s, Rng& rng, int64_t fan_in, int64_t fan_out) {
    require(fan_in > 0 && fan_out > 0, "glorot needs positive fans");
    double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    return uniform(std::move(s), rng, -bound, bound);
}

// ---- GradSink / Gradients / Tape --------------------------------------------

Tensor& GradSink::buf(int id) {
    require(id >= 0, "gradient requested for a constant operand");
    size_t idx = static_cast<size_t>(id);
    if (grads_[idx].data.empty()) grads_[idx] = Tensor::zeros(shapes_[idx]);
    touched_[idx] = 1;
    return grads_[idx];
}

void GradSink::add(int id, const Tensor& delta) {
    Tensor& dst = buf(id);
    require(dst.shape == delta.shape, "gradient shape mismatch");
    for (size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += delta.data[i];
}

const Tensor& Gradients::of(const Tensor& t) const {
    if (t.tape != tape_ || t.node < 0 || t.node >= static_cast<int>(by_node_.size())) {
        fail_usage("gradient requested for a tensor not recorded on this tape");
    }
    return by_node_[static_cast<size_t>(t.node)];
}

Tensor Tape::watch(const Tensor& t) {
    require(!consumed_, "watch() on a consumed tape");
    require(t.tape == nullptr, "watch() expects a constant tensor");
    Tensor out = t;
    out.tape = this;
    out.node = record("leaf", {}, t.shape, nullptr);
    return out;
}

int Tape::record(const char* op, std::vector<int> inputs, Shape out_shape, BackwardFn fn) {
    require(!consumed_, std::string("op '") + op + "' recorded on a consumed tape");
    nodes_.push_back(NodeRec{op, std::move(inputs), std::move(out_shape), std::move(fn)});
    return static_cast<int>(nodes_.size()) - 1;
}

Gradients Tape::backward(const Tensor& loss) {
    require(!consumed_, "backward() on a consumed tape");
    require(loss.tape == this && loss.node >= 0, "backward() loss is not on this tape");
    require(loss.numel() == 1, "backward() needs a scalar loss");
    consumed_ = true;

    std::vector<Shape> shapes(nodes_.size());
    for (size_t i = 0; i < nodes_.size(); ++i) shapes[i] = nodes_[i].shape;
    std::vector<Tensor> grads(nodes_.size());
    std::vector<char> touched(nodes_.size(), 0);
    GradSink sink(shapes, grads, touched);

    sink.buf(loss.node).data[0] = 1.0;
    // Reverse recording order; each reachable node is processed exactly once.
    for (int id = loss.node; id >= 0; --id) {
        if (!touched[static_cast<size_t>(id)]) continue;
        const NodeRec& node = nodes_[static_cast<size_t>(id)];
        if (node.backward) node.backward(grads[static_cast<size_t>(id)], sink);
    }
    for (size_t i = 0; i < grads.size(); ++i) {
        if (grads[i].data.empty()) grads[i] = Tensor::zeros(shapes[i]);
    }
    return Gradients(this, std::move(grads));
}

// ---- elementwise -------------------------------------------------------------

namespace {

Tensor binary_same_shape(const char* op, const Tensor& a, const Tensor& b,
                         const std::function<double(double, double)>& f,
                         const std::function<void(const Tensor&, GradSink&, int, int)>& bw) {
    require(a.shape == b.shape, std::string(op) + ": shape mismatch " + shape_str(a.shape) +
                                    " vs " + shape_str(b.shape));
    Tensor out;
    out.shape = a.shape;
    out.data.resize(a.data.size());
    for (size_t i = 0; i < a.data.size(); ++i) out.data[i] = f(a.data[i], b.data[i]);
    check_finite(op, out);
    if (Tape* tape = common_tape({&a, &b})) {
        int ia = a.node, ib = b.node;
        out.tape = tape;
        out.node = tape->record(op, {ia, ib}, out.shape,
                                [bw, ia, ib](const Tensor& g, GradSink& sink) { bw(g, sink, ia, ib); });
    }
    return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_same_shape(
        "add", a, b, [](double x, double y) { return x + y; },
        [](const Tensor& g, GradSink& sink, int ia, int ib) {
            if (GradSink::wants(ia)) sink.add(ia, g);
            if (GradSink::wants(ib)) sink.add(ib, g);
        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_same_shape(
        "sub", a, b, [](double x, double y) { return x - y; },
        [](const Tensor& g, GradSink& sink, int ia, int ib) {
            if (GradSink::wants(ia)) sink.add(ia, g);
            if (GradSink::wants(ib)) {
                Tensor& dst = sink.buf(ib);
                for (size_t i = 0; i < g.data.size(); ++i) dst.data[i] -= g.data[i];
            }
        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    Tensor av = detached(a), bv = detached(b);
    return binary_same_shape(
        "mul", a, b, [](double x, double y) { return x * y; },
        [av, bv](const Tensor& g, GradSink& sink, int ia, int ib) {
            if (GradSink::wants(ia)) {
                Tensor& dst = sink.buf(ia);
                for (size_t i = 0; i < g.data.size(); ++i) dst.data[i] += g.data[i] * bv.data[i];
            }
            if (GradSink::wants(ib)) {
                Tensor& dst = sink.buf(ib);
                for (size_t i = 0; i < g.data.size(); ++i) dst.data[i] += g.data[i] * av.data[i];
            }
        });
}

Tensor scale(const Tensor& a, double c) {
    require(std::isfinite(c), "scale: non-finite factor");
    int ia = a.node;
    return unary_map(
        "scale", a, [c](double x) { return x * c; },
        [c, ia](const Tensor& g, GradSink& sink) {
            if (!GradSink::wants(ia)) return;
            Tensor& dst = sink.buf(ia);
            for (size_t i = 0; i < g.data.size(); ++i) dst.data[i] += g.data[i] * c;
        });
}

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
    require(x.rank() == 2 && v.rank() == 1 && x.dim(1) == v.dim(0),
            "add_rowvec: want 2-D x and 1-D v with matching width, got " + shape_str(x.shape) +
                " and " + shape_str(v.shape));
    int64_t m = x.dim(0), n = x.dim(1);
    Tensor out;
    out.shape = x.shape;
    out.data.resize(x.data.size());
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j)
            out.data[static_cast<size_t>(i * n + j)] =
                x.data[static_cast<size_t>(i * n + j)] + v.data[static_cast<size_t>(j)];
    check_finite("add_rowvec", out);
    if (Tape* tape = common_tape({&x, &v})) {
        int ix = x.node, iv = v.node;
        out.tape = tape;
        out.node = tape->record("add_rowvec", {ix, iv}, out.shape,
                                [ix, iv, m, n](const Tensor& g, GradSink& sink) {
                                    if (GradSink::wants(ix)) sink.add(ix, g);
                                    if (GradSink::wants(iv)) {
                                        Tensor& dv = sink.buf(iv);
                                        for (int64_t i = 0; i < m; ++i)
                                            for (int64_t j = 0; j < n; ++j)
                                                dv.data[static_cast<size_t>(j)] +=
                                                    g.data[static_cast<size_t>(i * n + j)];
                                    }
                                });
    }
    return out;
}

Tensor mul_scalar_t(const Tensor& x, const Tensor& s) {
    require(s.numel() == 1, "mul_scalar_t: scalar operand has shape " + shape_str(s.shape));
    double sv = s.data[0];
    Tensor xv = detached(x);
    Tensor out;
    out.shape = x.shape;
    out.data.resize(x.data.size());
    for (size_t i = 0; i < x.data.size(); ++i) out.data[i] = x.data[i] * sv;
    check_finite("mul_scalar_t", out);
    if (Tape* tape = common_tape({&x, &s})) {
        int ix = x.node, is = s.node;
        out.tape = tape;
        out.node = tape->record("mul_scalar_t", {ix, is}, out.shape,
                                [ix, is, sv, xv](const Tensor& g, GradSink& sink) {
                                    if (GradSink::wants(ix)) {
                                        Tensor& dx = sink.buf(ix);
                                        for (size_t i = 0; i < g.data.size(); ++i)
                                            dx.data[i] += g.data[i] * sv;
                                    }
                                    if (GradSink::wants(is)) {
                                        double acc = 0.0;
                                        for (size_t i = 0; i < g.data.size(); ++i)
                                            acc += g.data[i] * xv.data[i];
                                        sink.buf(is).data[0] += acc;
                                    }
                                });
    }
    return out;
}

Tensor recip(const Tensor& s) {
    require(s.numel() == 1, "recip: want scalar, got " + shape_str(s.shape));
    if (s.data[0] == 0.0) throw NumericError("recip: division by zero");
    double out_v = 1.0 / s.data[0];
    Tensor out = Tensor::scalar(out_v);
    check_finite("recip", out);
    if (Tape* tape = common_tape({&s})) {
        int is = s.node;
        out.tape = tape;
        out.node = tape->record("recip", {is}, out.shape,
                                [is, out_v](const Tensor& g, GradSink& sink) {
                                    if (GradSink::wants(is))
                                        sink.buf(is).data[0] += -g.data[0] * out_v * out_v;
                                });
    }
    return out;
}

// ---- linear algebra / shape ops ---------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
            "matmul: incompatible shapes " + shape_str(a.shape) + " x " + shape_str(b.shape));
    int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = Tensor::zeros({m, n});
    mm_acc_nn(out.data.data(), a.data.data(), b.data.data(), m, k, n);
    check_finite("matmul", out);
    if (Tape* tape = common_tape({&a, &b})) {
        Tensor av = detached(a), bv = detached(b);
        int ia = a.node, ib = b.node;
        out.tape = tape;
        out.node = tape->record(
            "matmul", {ia, ib}, out.shape,
            [av, bv, ia, ib, m, k, n](const Tensor& g, GradSink& sink) {
                if (GradSink::wants(ia))
                    mm_acc_nt(sink.buf(ia).data.data(), g.data.data(), bv.data.data(), m, n, k);
                if (GradSink::wants(ib))
                    mm_acc_tn(sink.buf(ib).data.data(), av.data.data(), g.data.data(), m, k, n);
            });
    }
    return out;
}

Tensor transpose2d(const Tensor& a) {
    require(a.rank() == 2, "transpose2d: want 2-D, got " + shape_str(a.shape));
    int64_t m = a.dim(0), n = a.dim(1);
    Tensor out = Tensor::zeros({n, m});
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j)
            out.data[static_cast<size_t>(j * m + i)] = a.data[static_cast<size_t>(i * n + j)];
    if (Tape* tape = common_tape({&a})) {
        int ia = a.node;
        out.tape = tape;
        out.node = tape->record("transpose2d", {ia}, out.shape,
                                [ia, m, n](const Tensor& g, GradSink& sink) {
                                    if (!GradSink::wants(ia)) return;
                                    Tensor& dst = sink.buf(ia);
                                    for (int64_t i = 0; i < m; ++i)
                                        for (int64_t j = 0; j < n; ++j)
                                            dst.data[static_cast<size_t>(i * n + j)] +=
                                                g.data[static_cast<size_t>(j * m + i)];
                                });
    }
    return out;
}

Tensor reshape(const Tensor& a, Shape s) {
    require(shape_numel(s) == a.numel(), "reshape: " + shape_str(a.shape) + " has " +
                                             std::to_string(a.numel()) + " elements, target " +
                                             shape_str(s) + " wants " +
                                             std::to_string(shape_numel(s)));
    Tensor out;
    out.shape = std::move(s);
    out.data = a.data;
    if (Tape* tape = common_tape({&a})) {
        int ia = a.node;
        out.tape = tape;
        out.node = tape->record("reshape", {ia}, out.shape,
                                [ia](const Tensor& g, GradSink& sink) {
                                    if (!GradSink::wants(ia)) return;
                                    Tensor& dst = sink.buf(ia);
                                    for (size_t i = 0; i < g.data.size(); ++i)
                                        dst.data[i] += g.data[i];
                                });
    }
    return out;
}

Tensor slice(const Tensor& a, int axis, int64_t start, int64_t len) {
    AxisView v = axis_view(a.shape, axis);
    require(start >= 0 && len > 0 && start + len <= v.n,
            "slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                ") out of bounds for axis " + std::to_string(axis) + " of " + shape_str(a.shape));
    Shape out_shape = a.shape;
    out_shape[static_cast<size_t>(axis)] = len;
    Tensor out = Tensor::zeros(out_shape);
    for (int64_t o = 0; o < v.outer; ++o)
        for (int64_t i = 0; i < len; ++i) {
            const double* src = a.data.data() + ((o * v.n + start + i) * v.inner);
            double* dst = out.data.data() + ((o * len + i) * v.inner);
            std::copy(src, src + v.inner, dst);
        }
    if (Tape* tape = common_tape({&a})) {
        int ia = a.node;
        out.tape = tape;
        out.node = tape->record("slice", {ia}, out.shape,
                                [ia, v, start, len](const Tensor& g, GradSink& sink) {
                                    if (!GradSink::wants(ia)) return;
                                    Tensor& dst = sink.buf(ia);
                                    for (int64_t o = 0; o < v.outer; ++o)
                                        for (int64_t i = 0; i < len; ++i) {
                                            const double* gs =
                                                g.data.data() + ((o * len + i) * v.inner);
                                            double* dd = dst.data.data() +
                                                         ((o * v.n + start + i) * v.inner);
                                            for (int64_t r = 0; r < v.inner; ++r) dd[r] += gs[r];
                                        }
                                });
    }
    return out;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    require(!parts.empty(), "concat: no inputs");
    const Shape& base = parts[0].shape;
    int64_t total = 0;
    for (const Tensor& p : parts) {
        require(p.rank() == static_cast<int>(base.size()),
                "concat: rank mismatch between inputs");
        for (size_t d = 0; d < base.size(); ++d) {
            if (static_cast<int>(d) == axis) continue;
            require(p.shape[d] == base[d], "concat: off-axis dimension mismatch");
        }
        total += p.shape[static_cast<size_t>(axis)];
    }
    AxisView v0 = axis_view(base, axis);
    Shape out_shape = base;
    out_shape[static_cast<size_t>(axis)] = total;
    Tensor out = Tensor::zeros(out_shape);

    std::vector<int64_t> lens;
    std::vector<int64_t> offsets;
    int64_t off = 0;
    for (const Tensor& p : parts) {
        lens.push_back(p.shape[static_cast<size_t>(axis)]);
        offsets.push_back(off);
        off += lens.back();
    }
    for (size_t pi = 0; pi < parts.size(); ++pi) {
        const Tensor& p = parts[pi];
        int64_t n_p = lens[pi];
        for (int64_t o = 0; o < v0.outer; ++o)
            for (int64_t i = 0; i < n_p; ++i) {
                const double* src = p.data.data() + ((o * n_p + i) * v0.inner);
                double* dst = out.data.data() + ((o * total + offsets[pi] + i) * v0.inner);
                std::copy(src, src + v0.inner, dst);
            }
    }

    std::vector<const Tensor*> ptrs;
    for (const Tensor& p : parts) ptrs.push_back(&p);
    Tape* tape = nullptr;
    for (const Tensor* p : ptrs) {
        if (!p->tape) continue;
        require(!tape || tape == p->tape, "operands belong to different tapes");
        tape = p->tape;
    }
    if (tape) {
        std::vector<int> ids;
        for (const Tensor& p : parts) ids.push_back(p.node);
        out.tape = tape;
        out.node = tape->record(
            "concat", ids, out.shape,
            [ids, lens, offsets, v0, total](const Tensor& g, GradSink& sink) {
                for (size_t pi = 0; pi < ids.size(); ++pi) {
                    if (!GradSink::wants(ids[pi])) continue;
                    Tensor& dst = sink.buf(ids[pi]);
                    int64_t n_p = lens[pi];
                    for (int64_t o = 0; o < v0.outer; ++o)
                        for (int64_t i = 0; i < n_p; ++i) {
                            const double* gs =
                                g.data.data() + ((o * total + offsets[pi] + i) * v0.inner);
                            double* dd = dst.data.data() + ((o * n_p + i) * v0.inner);
                            for (int64_t r = 0; r < v0.inner; ++r) dd[r] += gs[r];
                        }
                }
            });
    }
    return out;
}

Tensor select_index(const Tensor& a, int64_t flat_index) {
    require(flat_index >= 0 && flat_index < a.numel(),
            "select_index: index " + std::to_string(flat_index) + " out of range for " +
                std::to_string(a.numel()) + " elements");
    Tensor out = Tensor::scalar(a.data[static_cast<size_t>(flat_index)]);
    if (Tape* tape = common_tape({&a})) {
        int ia = a.node;
        out.tape = tape;
        out.node = tape->record("select_index", {ia}, out.shape,
                                [ia, flat_index](const Tensor& g, GradSink& sink) {
                                    if (GradSink::wants(ia))
                                        sink.buf(ia).data[static_cast<size_t>(flat_index)] +=
                                            g.data[0];
                                });
    }
    return out;
}

// ---- nonlinearities -----------------------------------------------------------

Tensor exp(const Tensor& a) {
    Tensor out;
    out.shape = a.shape;
    out.data.resize(a.data.size());
    for (size_t i = 0; i < a.data.size(); ++i) out.data[i] = std::exp(a.data[i]);
    check_finite("exp", out);
    if (Tape* tape = common_tape({&a})) {
        int ia = a.node;
        Tensor saved = detached(out);
        out.tape = tape;
        out.node = tape->record("exp", {ia}, out.shape,
                                [ia, saved](const Tensor& g, GradSink& sink) {
                                    if (!GradSink::wants(ia)) return;
                                    Tensor& dst = sink.buf(ia);
                                    for (size_t i = 0; i < g.data.size(); ++i)
                                        dst.data[i] += g.data[i] * saved.data[i];
                                });
    }
    return out;
}

Tensor log(const Tensor& a) {
    Tensor av = detached(a);
    int ia = a.node;
    return unary_map(
        "log", a, [](double x) { return std::log(x); },
        [ia, av](const Tensor& g, GradSink& sink) {
            if (!GradSink::wants(ia)) return;
            Tensor& dst = sink.buf(ia);
            for (size_t i = 0; i < g.data.size(); ++i) dst.data[i] += g.data[i] / av.data[i];
        });
}

Tensor relu(const Tensor& a) {
    Tensor av = detached(a);
    int ia = a.node;
    return unary_map(
        "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
        [ia, av](const Tensor& g, GradSink& sink) {
            if (!GradSink::wants(ia)) return;
            Tensor& dst = sink.buf(ia);
            for (size_t i = 0; i < g.data.size(); ++i)
                if (av.data[i] > 0.0) dst.data[i] += g.data[i];
        });
}

Tensor gelu(const Tensor& a) {
    Tensor av = detached(a);
    int ia = a.node;
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt_2pi = 0.39894228040143267794;
    return unary_map(
        "gelu", a,
        [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
        [ia, av](const Tensor& g, GradSink& sink) {
            if (!GradSink::wants(ia)) return;
            Tensor& dst = sink.buf(ia);
            for (size_t i = 0; i < g.data.size(); ++i) {
                double x = av.data[i];
                double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
                double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
                dst.data[i] += g.data[i] * (cdf + x * pdf);
            }
        });
}

// ---- softmax family -------------------------------------------------------------

namespace {

// Shared core for softmax/log_softmax: subtract the per-lane max first.
void softmax_forward(const Tensor& a, int axis, bool log_form, Tensor& out, AxisView& v) {
    v = axis_view(a.shape, axis);
    out.shape = a.shape;
    out.data.resize(a.data.size());
    for (int64_t o = 0; o < v.outer; ++o)
        for (int64_t r = 0; r < v.inner; ++r) {
            auto at = [&](int64_t i) -> size_t {
                return static_cast<size_t>((o * v.n + i) * v.inner + r);
            };
            double mx = a.data[at(0)];
            for (int64_t i = 1; i < v.n; ++i) mx = std::max(mx, a.data[at(i)]);
            double denom = 0.0;
            for (int64_t i = 0; i < v.n; ++i) denom += std::exp(a.data[at(i)] - mx);
            if (log_form) {
                double lse = std::log(denom);
                for (int64_t i = 0; i < v.n; ++i) out.data[at(i)] = a.data[at(i)] - mx - lse;
            } else {
                for (int64_t i = 0; i < v.n; ++i)
                    out.data[at(i)] = std::exp(a.data[at(i)] - mx) / denom;
            }
        }
}

}  // namespace

Tensor softmax(const Tensor& a, int axis) {
    Tensor out;
    AxisView v;
    softmax_forward(a, axis, false, out, v);
    check_finite("softmax", out);
    if (Tape* tape = common_tape({&a})) {
        int ia = a.node;
        Tensor saved = detached(out);
        out.tape = tape;
        out.node = tape->record(
            "softmax", {ia}, out.shape, [ia, saved, v](const Tensor& g, GradSink& sink) {
                if (!GradSink::wants(ia)) return;
                Tensor& dst = sink.buf(ia);
                for (int64_t o = 0; o < v.outer; ++o)
                    for (int64_t r = 0; r < v.inner; ++r) {
                        auto at = [&](int64_t i) -> size_t {
                            return static_cast<size_t>((o * v.n + i) * v.inner + r);
                        };
                        double dot = 0.0;
                        for (int64_t i = 0; i < v.n; ++i) dot += g.data[at(i)] * saved.data[at(i)];
                        for (int64_t i = 0; i < v.n; ++i)
                            dst.data[at(i)] += saved.data[at(i)] * (g.data[at(i)] - dot);
                    }
            });
    }
    return out;
}

Tensor log_softmax(const Tensor& a, int axis) {
    Tensor out;
    AxisView v;
    softmax_forward(a, axis, true, out, v);
    check_finite("log_softmax", out);
    if (Tape* tape = common_tape({&a})) {
        int ia = a.node;
        Tensor saved = detached(out);
        out.tape = tape;
        out.node = tape->record(
            "log_softmax", {ia}, out.shape, [ia, saved, v](const Tensor& g, GradSink& sink) {
                if (!GradSink::wants(ia)) return;
                Tensor& dst = sink.buf(ia);
                for (int64_t o = 0; o < v.outer; ++o)
                    for (int64_t r = 0; r < v.inner; ++r) {
                        auto at = [&](int64_t i) -> size_t {
                            return static_cast<size_t>((o * v.n + i) * v.inner + r);
                        };
                        double gsum = 0.0;
                        for (int64_t i = 0; i < v.n; ++i) gsum += g.data[at(i)];
                        for (int64_t i = 0; i < v.n; ++i)
                            dst.data[at(i)] += g.data[at(i)] - std::exp(saved.data[at(i)]) * gsum;
                    }
            });
    }
    return out;
}

// ---- normalization ---------------------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    require(x.rank() == 2, "layer_norm: want 2-D input, got " + shape_str(x.shape));
    int64_t m = x.dim(0), n = x.dim(1);
    require(gamma.rank() == 1 && gamma.dim(0) == n && beta.rank() == 1 && beta.dim(0) == n,
            "layer_norm: gamma/beta must be 1-D of width " + std::to_string(n));
    require(eps > 0.0, "layer_norm: eps must be positive");
    Tensor out = Tensor::zeros({m, n});
    Tensor xhat = Tensor::zeros({m, n});
    std::vector<double> sig(static_cast<size_t>(m));
    for (int64_t i = 0; i < m; ++i) {
        const double* row = x.data.data() + i * n;
        double mu = 0.0;
        for (int64_t j = 0; j < n; ++j) mu += row[j];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (int64_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(n);
        double s = std::sqrt(var + eps);
        sig[static_cast<size_t>(i)] = s;
        for (int64_t j = 0; j < n; ++j) {
            double xh = (row[j] - mu) / s;
            xhat.data[static_cast<size_t>(i * n + j)] = xh;
            out.data[static_cast<size_t>(i * n + j)] =
                gamma.data[static_cast<size_t>(j)] * xh + beta.data[static_cast<size_t>(j)];
        }
    }
    check_finite("layer_norm", out);
    if (Tape* tape = common_tape({&x, &gamma, &beta})) {
        int ix = x.node, ig = gamma.node, ib = beta.node;
        Tensor gammav = detached(gamma);
        out.tape = tape;
        out.node = tape->record(
            "layer_norm", {ix, ig, ib}, out.shape,
            [ix, ig, ib, gammav, xhat, sig, m, n](const Tensor& g, GradSink& sink) {
                if (GradSink::wants(ig)) {
                    Tensor& dg = sink.buf(ig);
                    for (int64_t i = 0; i < m; ++i)
                        for (int64_t j = 0; j < n; ++j)
                            dg.data[static_cast<size_t>(j)] +=
                                g.data[static_cast<size_t>(i * n + j)] *
                                xhat.data[static_cast<size_t>(i * n + j)];
                }
                if (GradSink::wants(ib)) {
                    Tensor& db = sink.buf(ib);
                    for (int64_t i = 0; i < m; ++i)
                        for (int64_t j = 0; j < n; ++j)
                            db.data[static_cast<size_t>(j)] += g.data[static_cast<size_t>(i * n + j)];
                }
                if (GradSink::wants(ix)) {
                    Tensor& dx = sink.buf(ix);
                    for (int64_t i = 0; i < m; ++i) {
                        double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                        for (int64_t j = 0; j < n; ++j) {
                            double dxh = g.data[static_cast<size_t>(i * n + j)] *
                                         gammav.data[static_cast<size_t>(j)];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xhat.data[static_cast<size_t>(i * n + j)];
                        }
                        mean_dxhat /= static_cast<double>(n);
                        mean_dxhat_xhat /= static_cast<double>(n);
                        double s = sig[static_cast<size_t>(i)];
                        for (int64_t j = 0; j < n; ++j) {
                            double dxh = g.data[static_cast<size_t>(i * n + j)] *
                                         gammav.data[static_cast<size_t>(j)];
                            dx.data[static_cast<size_t>(i * n + j)] +=
                                (dxh - mean_dxhat -
                                 xhat.data[static_cast<size_t>(i * n + j)] * mean_dxhat_xhat) /
                                s;
                        }
                    }
                }
            });
    }
    return out;
}

Tensor channel_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    require(x.rank() == 3, "channel_norm: want HxWxC input, got " + shape_str(x.shape));
    int64_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
    require(gamma.rank() == 1 && gamma.dim(0) == c && beta.rank() == 1 && beta.dim(0) == c,
            "channel_norm: gamma/beta must be 1-D of width " + std::to_string(c));
    require(eps > 0.0, "channel_norm: eps must be positive");
    int64_t hw = h * w;
    Tensor out = Tensor::zeros(x.shape);
    Tensor xhat = Tensor::zeros(x.shape);
    std::vector<double> sig(static_cast<size_t>(c));
    for (int64_t ch = 0; ch < c; ++ch) {
        double mu = 0.0;
        for (int64_t p = 0; p < hw; ++p) mu += x.data[static_cast<size_t>(p * c + ch)];
        mu /= static_cast<double>(hw);
        double var = 0.0;
        for (int64_t p = 0; p < hw; ++p) {
            double d = x.data[static_cast<size_t>(p * c + ch)] - mu;
            var += d * d;
        }
        var /= static_cast<double>(hw);
        double s = std::sqrt(var + eps);
        sig[static_cast<size_t>(ch)] = s;
        for (int64_t p = 0; p < hw; ++p) {
            double xh = (x.data[static_cast<size_t>(p * c + ch)] - mu) / s;
            xhat.data[static_cast<size_t>(p * c + ch)] = xh;
            out.data[static_cast<size_t>(p * c + ch)] =
                gamma.data[static_cast<size_t>(ch)] * xh + beta.data[static_cast<size_t>(ch)];
        }
    }
    check_finite("channel_norm", out);
    if (Tape* tape = common_tape({&x, &gamma, &beta})) {
        int ix = x.node, ig = gamma.node, ib = beta.node;
        Tensor gammav = detached(gamma);
        out.tape = tape;
        out.node = tape->record(
            "channel_norm", {ix, ig, ib}, out.shape,
            [ix, ig, ib, gammav, xhat, sig, hw, c](const Tensor& g, GradSink& sink) {
                if (GradSink::wants(ig)) {
                    Tensor& dg = sink.buf(ig);
                    for (int64_t p = 0; p < hw; ++p)
                        for (int64_t ch = 0; ch < c; ++ch)
                            dg.data[static_cast<size_t>(ch)] +=
                                g.data[static_cast<size_t>(p * c + ch)] *
                                xhat.data[static_cast<size_t>(p * c + ch)];
                }
                if (GradSink::wants(ib)) {
                    Tensor& db = sink.buf(ib);
                    for (int64_t p = 0; p < hw; ++p)
                        for (int64_t ch = 0; ch < c; ++ch)
                            db.data[static_cast<size_t>(ch)] +=
                                g.data[static_cast<size_t>(p * c + ch)];
                }
                if (GradSink::wants(ix)) {
                    Tensor& dx = sink.buf(ix);
                    for (int64_t ch = 0; ch < c; ++ch) {
                        double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                        for (int64_t p = 0; p < hw; ++p) {
                            double dxh = g.data[static_cast<size_t>(p * c + ch)] *
                                         gammav.data[static_cast<size_t>(ch)];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xhat.data[static_cast<size_t>(p * c + ch)];
                        }
                        mean_dxhat /= static_cast<double>(hw);
                        mean_dxhat_xhat /= static_cast<double>(hw);
                        double s = sig[static_cast<size_t>(ch)];
                        for (int64_t p = 0; p < hw; ++p) {
                            double dxh = g.data[static_cast<size_t>(p * c + ch)] *
                                         gammav.data[static_cast<size_t>(ch)];
                            dx.data[static_cast<size_t>(p * c + ch)] +=
                                (dxh - mean_dxhat -
                                 xhat.data[static_cast<size_t>(p * c + ch)] * mean_dxhat_xhat) /
                                s;
                        }
                    }
                }
            });
    }
    return out;
}

// ---- lookup / masking -------------------------------------------------------------

Tensor embedding_lookup(const Tensor& table, const std::vector<int64_t>& ids) {
    require(table.rank() == 2, "embedding_lookup: table must be 2-D");
    require(!ids.empty(), "embedding_lookup: empty id list");
    int64_t rows = table.dim(0), width = table.dim(1);
    for (int64_t id : ids) {
        if (id < 0 || id >= rows)
            throw DataError("embedding_lookup: id " + std::to_string(id) +
                            " out of range for table with " + std::to_string(rows) + " rows");
    }
    int64_t n = static_cast<int64_t>(ids.size());
    Tensor out = Tensor::zeros({n, width});
    for (int64_t i = 0; i < n; ++i) {
        const double* src = table.data.data() + ids[static_cast<size_t>(i)] * width;
        std::copy(src, src + width, out.data.data() + i * width);
    }
    if (Tape* tape = common_tape({&table})) {
        int it = table.node;
        std::vector<int64_t> ids_copy = ids;
        out.tape = tape;
        out.node = tape->record("embedding_lookup", {it}, out.shape,
                                [it, ids_copy, width](const Tensor& g, GradSink& sink) {
                                    if (!GradSink::wants(it)) return;
                                    Tensor& dst = sink.buf(it);
                                    for (size_t i = 0; i < ids_copy.size(); ++i) {
                                        double* dd = dst.data.data() + ids_copy[i] * width;
                                        const double* gs =
                                            g.data.data() + static_cast<int64_t>(i) * width;
                                        for (int64_t j = 0; j < width; ++j) dd[j] += gs[j];
                                    }
                                });
    }
    return out;
}

Tensor masked_fill(const Tensor& x, const Tensor& mask, double value) {
    require(x.shape == mask.shape, "masked_fill: mask shape " + shape_str(mask.shape) +
                                       " differs from input " + shape_str(x.shape));
    require(mask.tape == nullptr, "masked_fill: mask must be a constant tensor");
    require(std::isfinite(value), "masked_fill: non-finite fill value");
    Tensor out;
    out.shape = x.shape;
    out.data.resize(x.data.size());
    for (size_t i = 0; i < x.data.size(); ++i)
        out.data[i] = mask.data[i] != 0.0 ? value : x.data[i];
    if (Tape* tape = common_tape({&x})) {
        int ix = x.node;
        Tensor maskv = detached(mask);
        out.tape = tape;
        out.node = tape->record("masked_fill", {ix}, out.shape,
                                [ix, maskv](const Tensor& g, GradSink& sink) {
                                    if (!GradSink::wants(ix)) return;
                                    Tensor& dst = sink.buf(ix);
                                    for (size_t i = 0; i < g.data.size(); ++i)
                                        if (maskv.data[i] == 0.0) dst.data[i] += g.data[i];
                                });
    }
    return out;
}

// ---- reductions ----------------------------------------------------------------------

Tensor sum_all(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.data) acc += v;
    Tensor out = Tensor::scalar(acc);
    check_finite("sum_all", out);
    if (Tape* tape = common_tape({&a})) {
        int ia = a.node;
        out.tape = tape;
        out.node = tape->record("sum_all", {ia}, out.shape,
                                [ia](const Tensor& g, GradSink& sink) {
                                    if (!GradSink::wants(ia)) return;
                                    Tensor& dst = sink.buf(ia);
                                    for (double& v : dst.data) v += g.data[0];
                                });
    }
    return out;
}

Tensor mean_all(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.data) acc += v;
    double inv = 1.0 / static_cast<double>(a.numel());
    Tensor out = Tensor::scalar(acc * inv);
    check_finite("mean_all", out);
    if (Tape* tape = common_tape({&a})) {
        int ia = a.node;
        out.tape = tape;
        out.node = tape->record("mean_all", {ia}, out.shape,
                                [ia, inv](const Tensor& g, GradSink& sink) {
                                    if (!GradSink::wants(ia)) return;
                                    Tensor& dst = sink.buf(ia);
                                    for (double& v : dst.data) v += g.data[0] * inv;
                                });
    }
    return out;
}

namespace {

Tensor reduce_axis(const char* op, const Tensor& a, int axis, bool mean_form) {
    AxisView v = axis_view(a.shape, axis);
    Shape out_shape;
    for (size_t i = 0; i < a.shape.size(); ++i)
        if (static_cast<int>(i) != axis) out_shape.push_back(a.shape[i]);
    if (out_shape.empty()) out_shape.push_back(1);
    Tensor out = Tensor::zeros(out_shape);
    double inv = mean_form ? 1.0 / static_cast<double>(v.n) : 1.0;
    for (int64_t o = 0; o < v.outer; ++o)
        for (int64_t r = 0; r < v.inner; ++r) {
            double acc = 0.0;
            for (int64_t i = 0; i < v.n; ++i)
                acc += a.data[static_cast<size_t>((o * v.n + i) * v.inner + r)];
            out.data[static_cast<size_t>(o * v.inner + r)] = acc * inv;
        }
    check_finite(op, out);
    if (Tape* tape = common_tape({&a})) {
        int ia = a.node;
        out.tape = tape;
        out.node = tape->record(op, {ia}, out.shape,
                                [ia, v, inv](const Tensor& g, GradSink& sink) {
                                    if (!GradSink::wants(ia)) return;
                                    Tensor& dst = sink.buf(ia);
                                    for (int64_t o = 0; o < v.outer; ++o)
                                        for (int64_t r = 0; r < v.inner; ++r) {
                                            double gv =
                                                g.data[static_cast<size_t>(o * v.inner + r)] * inv;
                                            for (int64_t i = 0; i < v.n; ++i)
                                                dst.data[static_cast<size_t>(
                                                    (o * v.n + i) * v.inner + r)] += gv;
                                        }
                                });
    }
    return out;
}

}  // namespace

Tensor sum_axis(const Tensor& a, int axis) { return reduce_axis("sum_axis", a, axis, false); }
Tensor mean_axis(const Tensor& a, int axis) { return reduce_axis("mean_axis", a, axis, true); }

// ---- convolutions ---------------------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor* bias, int stride, int pad) {
    require(x.rank() == 3, "conv2d: input must be HxWxC, got " + shape_str(x.shape));
    require(w.rank() == 4, "conv2d: weight must be khxkwxCinxCout, got " + shape_str(w.shape));
    require(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
    int64_t h = x.dim(0), wd = x.dim(1), ci = x.dim(2);
    int64_t kh = w.dim(0), kw = w.dim(1);
    require(w.dim(2) == ci, "conv2d: weight expects " + std::to_string(w.dim(2)) +
                                " input channels, input has " + std::to_string(ci));
    int64_t co = w.dim(3);
    if (bias)
        require(bias->rank() == 1 && bias->dim(0) == co,
                "conv2d: bias must be 1-D of width " + std::to_string(co));
    int64_t oh = (h + 2 * pad - kh) / stride + 1;
    int64_t ow = (wd + 2 * pad - kw) / stride + 1;
    require(oh > 0 && ow > 0, "conv2d: kernel larger than padded input");

    Tensor out = Tensor::zeros({oh, ow, co});
    for (int64_t oy = 0; oy < oh; ++oy)
        for (int64_t ox = 0; ox < ow; ++ox) {
            double* orow = out.data.data() + (oy * ow + ox) * co;
            if (bias)
                for (int64_t c = 0; c < co; ++c) orow[c] = bias->data[static_cast<size_t>(c)];
            for (int64_t ky = 0; ky < kh; ++ky) {
                int64_t iy = oy * stride - pad + ky;
                if (iy < 0 || iy >= h) continue;
                for (int64_t kx = 0; kx < kw; ++kx) {
                    int64_t ix = ox * stride - pad + kx;
                    if (ix < 0 || ix >= wd) continue;
                    const double* xrow = x.data.data() + (iy * wd + ix) * ci;
                    const double* wrow = w.data.data() + ((ky * kw + kx) * ci) * co;
                    for (int64_t c = 0; c < ci; ++c) {
                        double xv = xrow[c];
                        if (xv == 0.0) continue;
                        const double* wslice = wrow + c * co;
                        for (int64_t oc = 0; oc < co; ++oc) orow[oc] += xv * wslice[oc];
                    }
                }
            }
        }
    check_finite("conv2d", out);

    const Tensor* operands[3] = {&x, &w, bias};
    Tape* tape = nullptr;
    for (const Tensor* t : operands) {
        if (!t || !t->tape) continue;
        require(!tape || tape == t->tape, "operands belong to different tapes");
        tape = t->tape;
    }
    if (tape) {
        int ixn = x.node, iwn = w.node, ibn = bias ? bias->node : -1;
        Tensor xv = detached(x), wv = detached(w);
        out.tape = tape;
        out.node = tape->record(
            "conv2d", {ixn, iwn, ibn}, out.shape,
            [ixn, iwn, ibn, xv, wv, h, wd, ci, kh, kw, co, oh, ow, stride,
             pad](const Tensor& g, GradSink& sink) {
                Tensor* dx = GradSink::wants(ixn) ? &sink.buf(ixn) : nullptr;
                Tensor* dw = GradSink::wants(iwn) ? &sink.buf(iwn) : nullptr;
                Tensor* db = GradSink::wants(ibn) ? &sink.buf(ibn) : nullptr;
                for (int64_t oy = 0; oy < oh; ++oy)
                    for (int64_t ox = 0; ox < ow; ++ox) {
                        const double* grow = g.data.data() + (oy * ow + ox) * co;
                        if (db)
                            for (int64_t oc = 0; oc < co; ++oc)
                                db->data[static_cast<size_t>(oc)] += grow[oc];
                        for (int64_t ky = 0; ky < kh; ++ky) {
                            int64_t iy = oy * stride - pad + ky;
                            if (iy < 0 || iy >= h) continue;
                            for (int64_t kx = 0; kx < kw; ++kx) {
                                int64_t ix = ox * stride - pad + kx;
                                if (ix < 0 || ix >= wd) continue;
                                const double* xrow = xv.data.data() + (iy * wd + ix) * ci;
                                for (int64_t c = 0; c < ci; ++c) {
                                    const double* wslice =
                                        wv.data.data() + (((ky * kw + kx) * ci) + c) * co;
                                    double acc_dx = 0.0;
                                    for (int64_t oc = 0; oc < co; ++oc) {
                                        double gv = grow[oc];
                                        if (dw)
                                            dw->data[static_cast<size_t>(
                                                (((ky * kw + kx) * ci) + c) * co + oc)] +=
                                                xrow[c] * gv;
                                        acc_dx += wslice[oc] * gv;
                                    }
                                    if (dx)
                                        dx->data[static_cast<size_t>((iy * wd + ix) * ci + c)] +=
                                            acc_dx;
                                }
                            }
                        }
                    }
            });
    }
    return out;
}

Tensor depthwise_conv3x3(const Tensor& x, const Tensor& k) {
    require(x.rank() == 3, "depthwise_conv3x3: input must be HxWxC");
    require(k.rank() == 3 && k.dim(0) == 3 && k.dim(1) == 3 && k.dim(2) == x.dim(2),
            "depthwise_conv3x3: kernel must be 3x3x" + std::to_string(x.dim(2)));
    int64_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
    Tensor out = Tensor::zeros(x.shape);
    for (int64_t y = 0; y < h; ++y)
        for (int64_t xx = 0; xx < w; ++xx) {
            double* orow = out.data.data() + (y * w + xx) * c;
            for (int64_t ky = 0; ky < 3; ++ky) {
                int64_t iy = y - 1 + ky;
                if (iy < 0 || iy >= h) continue;
                for (int64_t kx = 0; kx < 3; ++kx) {
                    int64_t ix = xx - 1 + kx;
                    if (ix < 0 || ix >= w) continue;
                    const double* xrow = x.data.data() + (iy * w + ix) * c;
                    const double* krow = k.data.data() + (ky * 3 + kx) * c;
                    for (int64_t ch = 0; ch < c; ++ch) orow[ch] += xrow[ch] * krow[ch];
                }
            }
        }
    check_finite("depthwise_conv3x3", out);
    if (Tape* tape = common_tape({&x, &k})) {
        int ixn = x.node, ikn = k.node;
        Tensor xv = detached(x), kv = detached(k);
        out.tape = tape;
        out.node = tape->record(
            "depthwise_conv3x3", {ixn, ikn}, out.shape,
            [ixn, ikn, xv, kv, h, w, c](const Tensor& g, GradSink& sink) {
                Tensor* dx = GradSink::wants(ixn) ? &sink.buf(ixn) : nullptr;
                Tensor* dk = GradSink::wants(ikn) ? &sink.buf(ikn) : nullptr;
                for (int64_t y = 0; y < h; ++y)
                    for (int64_t xx = 0; xx < w; ++xx) {
                        const double* grow = g.data.data() + (y * w + xx) * c;
                        for (int64_t ky = 0; ky < 3; ++ky) {
                            int64_t iy = y - 1 + ky;
                            if (iy < 0 || iy >= h) continue;
                            for (int64_t kx = 0; kx < 3; ++kx) {
                                int64_t ix = xx - 1 + kx;
                                if (ix < 0 || ix >= w) continue;
                                for (int64_t ch = 0; ch < c; ++ch) {
                                    double gv = grow[ch];
                                    if (dk)
                                        dk->data[static_cast<size_t>((ky * 3 + kx) * c + ch)] +=
                                            xv.data[static_cast<size_t>((iy * w + ix) * c + ch)] *
                                            gv;
                                    if (dx)
                                        dx->data[static_cast<size_t>((iy * w + ix) * c + ch)] +=
                                            kv.data[static_cast<size_t>((ky * 3 + kx) * c + ch)] *
                                            gv;
                                }
                            }
                        }
                    }
            });
    }
    return out;
}

Tensor upsample2x_nn(const Tensor& x) {
    require(x.rank() == 3, "upsample2x_nn: input must be HxWxC");
    int64_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
    Tensor out = Tensor::zeros({2 * h, 2 * w, c});
    for (int64_t y = 0; y < 2 * h; ++y)
        for (int64_t xx = 0; xx < 2 * w; ++xx) {
            const double* src = x.data.data() + ((y / 2) * w + (xx / 2)) * c;
            double* dst = out.data.data() + (y * 2 * w + xx) * c;
            std::copy(src, src + c, dst);
        }
    if (Tape* tape = common_tape({&x})) {
        int ixn = x.node;
        out.tape = tape;
        out.node = tape->record("upsample2x_nn", {ixn}, out.shape,
                                [ixn, h, w, c](const Tensor& g, GradSink& sink) {
                                    if (!GradSink::wants(ixn)) return;
                                    Tensor& dst = sink.buf(ixn);
                                    for (int64_t y = 0; y < 2 * h; ++y)
                                        for (int64_t xx = 0; xx < 2 * w; ++xx) {
                                            const double* gs =
                                                g.data.data() + (y * 2 * w + xx) * c;
                                            double* dd = dst.data.data() +
                                                         ((y / 2) * w + (xx / 2)) * c;
                                            for (int64_t ch = 0; ch < c; ++ch) dd[ch] += gs[ch];
                                        }
                                });
    }
    return out;
}

// ---- gradient checking -------------------------------------------------------------------

GradCheckResult grad_check(
    const std::function<Tensor(Tape*, std::vector<Tensor>&)>& objective,
    const std::vector<std::pair<std::string, Tensor>>& params,
    double step,
    double tol) {
    require(step > 0.0 && tol > 0.0, "grad_check: step and tol must be positive");

    // Analytic pass.
    Tape tape;
    std::vector<Tensor> watched;
    watched.reserve(params.size());
    for (const auto& [name, p] : params) watched.push_back(tape.watch(p));
    Tensor loss = objective(&tape, watched);
    require(loss.numel() == 1, "grad_check: objective must return a scalar");
    Gradients grads = tape.backward(loss);

    GradCheckResult result;
    result.pass = true;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        GradCheckParam report;
        report.name = params[pi].first;
        const Tensor& analytic = grads.of(watched[pi]);
        for (int64_t e = 0; e < params[pi].second.numel(); ++e) {
            auto probe = [&](double delta) {
                std::vector<Tensor> shifted;
                shifted.reserve(params.size());
                for (const auto& [n2, p2] : params) shifted.push_back(p2);
                shifted[pi].data[static_cast<size_t>(e)] += delta;
                Tensor v = objective(nullptr, shifted);
                return v.value();
            };
            double up = probe(step), down = probe(-step);
            double numeric = (up - down) / (2.0 * step);
            double a = analytic.data[static_cast<size_t>(e)];
            if (!std::isfinite(numeric) || !std::isfinite(a)) {
                report.finite = false;
                result.pass = false;
                continue;
            }
            double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-3});
            double rel = std::fabs(a - numeric) / denom;
            report.max_rel_err = std::max(report.max_rel_err, rel);
        }
        result.worst_rel_err = std::max(result.worst_rel_err, report.max_rel_err);
        if (report.max_rel_err > tol || !report.finite) result.pass = false;
        result.params.push_back(std::move(report));
    }
    return result;
}

}  // namespace fastslow
