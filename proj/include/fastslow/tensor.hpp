#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "fastslow/errors.hpp"
#include "fastslow/rng.hpp"

namespace fastslow {

class Tape;

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major float64 tensor. A tensor optionally refers to the tape
// node that produced it; tensors with tape == nullptr are constants and
// cost nothing extra, so inference runs entirely tape-free.
struct Tensor {
    Shape shape;
    std::vector<double> data;
    Tape* tape = nullptr;
    int node = -1;

    Tensor() = default;
    Tensor(Shape s, std::vector<double> d);

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }
    int rank() const { return static_cast<int>(shape.size()); }

    // Scalar access; errors unless numel() == 1.
    double value() const;

    static Tensor zeros(Shape s);
    static Tensor full(Shape s, double v);
    static Tensor scalar(double v);
    // Validates that every element is finite (external data enters here).
    static Tensor from_data(Shape s, std::vector<double> d);
    static Tensor uniform(Shape s, Rng& rng, double lo, double hi);
    // Glorot-style uniform range from explicit fan-in/fan-out.
    static Tensor glorot(Shape s, Rng& rng, int64_t fan_in, int64_t fan_out);
};

// Accumulates gradients into per-node buffers during a backward sweep.
// Backward rules call buf(id) for tracked inputs (id >= 0) and add into it.
class GradSink {
  public:
    // Mutable gradient buffer for node id, materialized lazily as zeros.
    Tensor& buf(int id);
    void add(int id, const Tensor& delta);
    static bool wants(int id) { return id >= 0; }

  private:
    friend class Tape;
    GradSink(const std::vector<Shape>& shapes, std::vector<Tensor>& grads,
             std::vector<char>& touched)
        : shapes_(shapes), grads_(grads), touched_(touched) {}
    const std::vector<Shape>& shapes_;
    std::vector<Tensor>& grads_;
    std::vector<char>& touched_;
};

// Per-node gradients produced by one backward sweep.
class Gradients {
  public:
    Gradients(const Tape* tape, std::vector<Tensor> by_node)
        : tape_(tape), by_node_(std::move(by_node)) {}

    // Gradient of the swept scalar w.r.t. a tensor recorded on the tape.
    // Watched-but-unused leaves yield all-zero gradients.
    const Tensor& of(const Tensor& t) const;

  private:
    const Tape* tape_;
    std::vector<Tensor> by_node_;
};

// Records every differentiable op applied to watched tensors, then replays
// them once, newest first, to accumulate gradients. Single use: a second
// backward() on the same tape is an error, as is recording after the sweep.
class Tape {
  public:
    using BackwardFn = std::function<void(const Tensor& grad_out, GradSink& sink)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Marks a leaf (parameter or input) for gradient tracking. Ops only
    // record when at least one operand is watched or derived from one.
    Tensor watch(const Tensor& t);

    // Reverse sweep from a scalar recorded on this tape. Consumes the tape.
    Gradients backward(const Tensor& loss);

    int record(const char* op, std::vector<int> inputs, Shape out_shape, BackwardFn fn);
    bool consumed() const { return consumed_; }
    size_t size() const { return nodes_.size(); }

  private:
    struct NodeRec {
        const char* op;
        std::vector<int> inputs;
        Shape shape;
        BackwardFn backward;
    };
    std::vector<NodeRec> nodes_;
    bool consumed_ = false;
};

// ---- primitive ops ---------------------------------------------------------
// Every op validates shapes, checks its output for non-finite values (raising
// NumericError at the faulting op), and registers an exact backward rule when
// an operand is on a tape.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
// y[i][j] = x[i][j] + v[j] for 2-D x and 1-D v.
Tensor add_rowvec(const Tensor& x, const Tensor& v);
// Broadcast multiply by a scalar tensor (differentiable in both operands).
Tensor mul_scalar_t(const Tensor& x, const Tensor& s);
// 1/s for a scalar tensor; s == 0 raises NumericError.
Tensor recip(const Tensor& s);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose2d(const Tensor& a);
Tensor reshape(const Tensor& a, Shape s);
Tensor slice(const Tensor& a, int axis, int64_t start, int64_t len);
Tensor concat(const std::vector<Tensor>& parts, int axis);
// Scalar pick from the flattened tensor.
Tensor select_index(const Tensor& a, int64_t flat_index);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);  // exact erf form

// Numerically safe softmax along one axis: the row max is subtracted before
// exponentiation, always.
Tensor softmax(const Tensor& a, int axis);
Tensor log_softmax(const Tensor& a, int axis);

// Row-wise normalization of a 2-D tensor with learned affine (gamma, beta
// are 1-D of row width).
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);
// Per-channel, per-sample normalization of an HxWxC map over its spatial
// extent, with learned per-channel affine.
Tensor channel_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);

// rows of table selected by ids; out-of-range ids raise DataError.
Tensor embedding_lookup(const Tensor& table, const std::vector<int64_t>& ids);
// Copies x, writing `value` where mask != 0. mask is a same-shape constant.
Tensor masked_fill(const Tensor& x, const Tensor& mask, double value);

Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor sum_axis(const Tensor& a, int axis);
Tensor mean_axis(const Tensor& a, int axis);

// x: HxWxC_in, w: khxkwxC_inxC_out, optional bias C_out. Zero padding.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor* bias, int stride, int pad);
// 3x3 depthwise convolution, stride 1, zero pad 1 (same-size output).
Tensor depthwise_conv3x3(const Tensor& x, const Tensor& k);
// 2x nearest-neighbour spatial upsample of an HxWxC map.
Tensor upsample2x_nn(const Tensor& x);

// ---- gradient checking ------------------------------------------------------

struct GradCheckParam {
    std::string name;
    double max_rel_err = 0.0;
    bool finite = true;
};

struct GradCheckResult {
    std::vector<GradCheckParam> params;
    double worst_rel_err = 0.0;
    bool pass = false;
};

// Compares tape gradients of a scalar objective against central finite
// differences, elementwise, for every parameter. The objective is called
// with a tape (analytic pass, params pre-watched) or without one (numeric
// probes). Relative error uses max(|analytic|, |numeric|, 1e-3) as the
// denominator so near-zero gradients do not blow up the ratio.
GradCheckResult grad_check(
    const std::function<Tensor(Tape*, std::vector<Tensor>&)>& objective,
    const std::vector<std::pair<std::string, Tensor>>& params,
    double step,
    double tol);

}  // namespace fastslow
