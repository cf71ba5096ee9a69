// Reverse-mode automatic differentiation over real tensors.
//
// A Tape records forward operations on flat float64 buffers; backward()
// walks the record once in reverse.  Complex quantities are (re, im) pairs
// of real tensors; complex ops are fused nodes over the four real buffers.
// Each training step builds a fresh tape and discards it.  A tape is
// single-threaded; independent tapes may run concurrently.

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "qjfuse/errors.hpp"
#include "qjfuse/params.hpp"

namespace qjfuse::ad {

// Handle to a tensor slot on a tape.  Shape lives in the handle so that
// reshape is free; the slot stores only the flat buffer.
struct Var {
    int32_t id = -1;
    int64_t rows = 0;
    int64_t cols = 1;

    bool valid() const { return id >= 0; }
    int64_t size() const { return rows * cols; }
};

// Complex tensor: paired real tensors of identical shape.
struct CVar {
    Var re, im;

    int64_t rows() const { return re.rows; }
    int64_t cols() const { return re.cols; }
    int64_t size() const { return re.size(); }
};

enum class Op : uint8_t {
    Add, Sub, Mul, ScaleConst, AddConst, ScaleVar,
    Matmul, MatmulNT, Matvec, Sum, Mean, RowMax, RowSum, Diag,
    Exp, Log, Softplus, Relu, Tanh, Recip, Sqrt, ClampMin,
    L2Norm, LayerNorm, Softmax, Concat, Slice, Dot, SubColVec, MulColVec, Transpose,
    CMatmul, CMatvec, CAdjoint, CInner, CMod2, CKron, COuterConj,
    CNorm, CScaleConst, CScaleReal, CAddIdentity, CMeasureBank,
};

struct Node {
    Op op;
    int32_t a = -1, b = -1, c = -1, d = -1; // input slots
    int32_t o1 = -1, o2 = -1;               // output slots
    int32_t m = 0, k = 0, n = 0;            // dims as needed per op
    double s0 = 0.0, s1 = 0.0;              // scalar attributes
    int32_t iaux = -1, niaux = 0;           // range into int pool
    int32_t daux = -1, ndaux = 0;           // range into double pool
};

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    Tape(Tape&&) = default;
    Tape& operator=(Tape&&) = default;

    // Drop all recorded state but keep allocated capacity.
    void reset();

    size_t num_nodes() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }

    // ----- leaves -----
    Var leaf(int64_t rows, int64_t cols, std::span<const double> v, bool requires_grad);
    Var scalar(double v, bool requires_grad = false);
    Var constant(int64_t rows, int64_t cols, std::span<const double> v);
    Var zeros(int64_t rows, int64_t cols, bool requires_grad = false);
    CVar cleaf(int64_t rows, int64_t cols, std::span<const double> re,
               std::span<const double> im, bool requires_grad);
    CVar czeros(int64_t rows, int64_t cols, bool requires_grad = false);

    // ----- real ops -----
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var scale(Var a, double s);
    Var add_const(Var a, double s);
    Var scale_var(Var a, Var s);            // s scalar
    Var matmul(Var a, Var b);               // [m,k]x[k,n]
    Var matmul_nt(Var a, Var b);            // [m,k]x[n,k]^T -> [m,n]
    Var matvec(Var a, Var x);               // [m,k]x[k] -> [m]
    Var sum(Var a);
    Var mean(Var a);
    Var row_max(Var a);                     // [m,n] -> [m]; ties to lowest index
    Var row_sum(Var a);                     // [m,n] -> [m]
    Var diag(Var a);                        // [m,m] -> [m]
    Var exp(Var a);
    Var log(Var a);
    Var softplus(Var a);
    Var relu(Var a);
    Var tanh(Var a);
    Var recip(Var a);
    Var sqrt(Var a);
    Var clamp_min(Var a, double lo);
    Var l2norm(Var a);
    Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
    Var softmax(Var a);                     // flat vector
    Var concat(std::span<const Var> parts); // flat
    Var slice(Var a, int64_t offset, int64_t len);
    Var dot(Var a, Var b);
    Var sub_colvec(Var a, Var v);           // a[m,n] - v[m] per row
    Var mul_colvec(Var a, Var v);           // a[m,n] * v[m] per row
    Var transpose(Var a);
    Var reshape(Var a, int64_t rows, int64_t cols) const;

    // ----- complex ops -----
    CVar cadd(CVar a, CVar b);
    CVar csub(CVar a, CVar b);
    CVar cmatmul(CVar a, CVar b);
    CVar cmatvec(CVar a, CVar x);
    CVar cadjoint(CVar a);
    CVar cinner(CVar a, CVar b);            // <a|b> = sum conj(a)*b, complex scalar
    Var cmod2(CVar z);                      // elementwise |z|^2
    CVar ckron(CVar a, CVar b);             // vector tensor product
    CVar couter_conj(CVar a, CVar b);       // a b^dagger
    Var cnorm(CVar z);                      // ||z|| (real scalar)
    CVar cscale(CVar z, double re, double im = 0.0);
    CVar cscale_real(CVar z, Var s);        // s real scalar
    CVar cadd_identity(CVar a);             // a + I
    Var cmeasure_bank(CVar bank, CVar psi); // q_i = |<bank_i|psi>|^2, [M]

    // ----- composites -----
    // v / ||v||; throws NearZeroNorm if ||v|| <= eps.
    CVar cnormalize(CVar v, double eps = 1e-12);
    // exp(-i * H * dt) via scaling-and-squaring of an order-8 power series.
    CVar matrix_exp_i(CVar h, double dt);

    // ----- access -----
    std::span<const double> val(Var v) const { return {vals_[v.id].data(), vals_[v.id].size()}; }
    std::span<const double> grad(Var v) const;
    bool has_grad(Var v) const { return v.valid() && !grads_[v.id].empty(); }
    double val0(Var v) const { return vals_[v.id][0]; }

    // ----- backward -----
    // Standard entry: seed d(loss)/d(loss)=1 and sweep.  Loss must be scalar.
    void backward(Var loss);
    // Seed an arbitrary slot's cotangent (accumulates).
    void seed_grad(Var v, std::span<const double> g);
    // Sweep using previously seeded cotangents.
    void backward_from_seeds();

    // Gradients of requires_grad leaves, keyed by slot id.  Empty map when
    // nothing requires gradients.
    std::map<int32_t, std::vector<double>> leaf_gradients() const;

private:
    std::vector<std::vector<double>> vals_;
    std::vector<std::vector<double>> grads_;
    std::vector<uint8_t> requires_;
    std::vector<uint8_t> is_leaf_;
    std::vector<Node> nodes_;
    std::vector<int32_t> ipool_;
    std::vector<double> dpool_;
    bool consumed_ = false;

    Var alloc(int64_t rows, int64_t cols, bool requires_grad, bool leaf);
    std::vector<double>& buf(int32_t id) { return vals_[id]; }
    double* grad_buf(int32_t id);
    void check_finite(int32_t id, const char* opname) const;
    void run_backward();
    void backward_node(const Node& nd);
};

// ---------------------------------------------------------------------------
// Gradient checking against central finite differences.

struct GradCheckGroup {
    std::string name;
    double max_rel_err = 0.0;
    int64_t checked = 0;
    bool pass = true;
};

struct GradCheckReport {
    std::vector<GradCheckGroup> groups;
    double tolerance = 0.0;
    bool pass = true;
};

// `loss_fn` evaluates the scalar loss at the store's current values;
// `grad_fn` returns analytic gradients keyed by array name.  Both must be
// deterministic.  At most `max_per_array` coordinates per array are probed
// (all when <= 0), chosen from `pick_seed`.  Per-coordinate relative error
// is |g_a - g_n| / max(|g_a|, |g_n|, 1e-8).
GradCheckReport grad_check(
    ParamStore& params,
    const std::function<double()>& loss_fn,
    const std::function<std::map<std::string, std::vector<double>>()>& grad_fn,
    double tolerance, double h = 1e-4, int64_t max_per_array = 0,
    uint64_t pick_seed = 0);

} // namespace qjfuse::ad
