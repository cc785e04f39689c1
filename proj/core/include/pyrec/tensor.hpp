#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "pyrec/errors.hpp"

namespace pyrec {

using Shape = std::vector<int>;

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// Transient gradient buffers for one backward pass, keyed by graph node.
/// Leaf entries survive the pass; intermediate buffers are dropped as soon
/// as their node has propagated.
class GradMap {
 public:
  std::vector<float>& at(const Node* n, size_t numel);
  const std::vector<float>* find(const Node* n) const;
  void erase(const Node* n) { buf_.erase(n); }
  void clear() { buf_.clear(); }
  size_t size() const { return buf_.size(); }

 private:
  std::unordered_map<const Node*, std::vector<float>> buf_;
};

/// One value in the gradient graph. Operations append nodes whose backward
/// closure scatters the output gradient into the parents' buffers. Leaves
/// (no backward closure) accumulate additively into `grad`.
struct Node {
  Shape shape;
  std::vector<float> data;
  bool requires_grad = false;
  std::vector<float> grad;  // leaf accumulator, sized lazily
  std::vector<NodePtr> parents;
  std::function<void(const std::vector<float>& gout, GradMap& gm)> backward;

  size_t numel() const { return data.size(); }
  bool is_leaf() const { return !backward; }
};

bool grad_enabled();

/// Disables graph construction in scope (evaluation paths).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Multiply-accumulate meter. When installed (thread-local), every matmul
/// kernel and attention score/mix loop reports its MAC count here.
struct MacCounter {
  uint64_t macs = 0;
};
MacCounter* mac_counter();
void set_mac_counter(MacCounter* c);

class MacCounterScope {
 public:
  explicit MacCounterScope(MacCounter* c) : prev_(mac_counter()) { set_mac_counter(c); }
  ~MacCounterScope() { set_mac_counter(prev_); }

 private:
  MacCounter* prev_;
};

/// Optional kink trace. While installed (thread-local), operations with
/// nondifferentiable points (abs, min/max, clamps, hard thresholds) append
/// one byte per element recording which side the forward pass took. Two
/// evaluations of the same function that disagree on the trace straddle a
/// kink, which is how the gradient checker excludes such probes.
std::vector<uint8_t>* branch_trace();
void set_branch_trace(std::vector<uint8_t>* t);
inline void trace_branch(uint8_t b) {
  if (auto* t = branch_trace()) t->push_back(b);
}

class BranchTraceScope {
 public:
  explicit BranchTraceScope(std::vector<uint8_t>* t) : prev_(branch_trace()) { set_branch_trace(t); }
  ~BranchTraceScope() { set_branch_trace(prev_); }

 private:
  std::vector<uint8_t>* prev_;
};

/// Dense row-major float32 array participating in a reverse-mode graph.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr n) : n_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<float> data, bool requires_grad = false);
  static Tensor scalar(float v);

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->shape; }
  int dim(int i) const { return n_->shape[static_cast<size_t>(i)]; }
  int rows() const;
  int cols() const;
  size_t numel() const { return n_->numel(); }
  bool requires_grad() const { return n_->requires_grad; }

  std::span<const float> data() const { return {n_->data.data(), n_->data.size()}; }
  std::span<float> mutable_data() { return {n_->data.data(), n_->data.size()}; }
  float at(size_t i) const { return n_->data[i]; }
  float at(int r, int c) const;
  float item() const;

  /// Leaf gradient accumulated by backward(); empty span until first write.
  std::span<const float> grad() const;
  void zero_grad();

  /// Value copy detached from the graph.
  Tensor detach() const;

  const NodePtr& node() const { return n_; }

 private:
  NodePtr n_;
};

// ---------------------------------------------------------------------------
// Operations. Every op checks shapes eagerly; gradients are defined for all
// arguments unless noted.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float c);
Tensor add_scalar(const Tensor& a, float c);
Tensor matmul(const Tensor& a, const Tensor& b);

/// [n×d] plus a length-d row broadcast over rows. The only implicit
/// broadcast in the engine.
Tensor add_row(const Tensor& x, const Tensor& row);

Tensor gather_rows(const Tensor& table, std::vector<int> ids);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_rows(std::initializer_list<Tensor> parts);
Tensor slice_rows(const Tensor& x, int start, int count);
Tensor element(const Tensor& x, int index);
Tensor reshape(const Tensor& x, Shape shape);

Tensor softmax_rows(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps = 1e-5f);
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor map_unary(const Tensor& x, float (*f)(float), float (*df)(float));

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor absval(const Tensor& x);
Tensor maximum(const Tensor& a, const Tensor& b);
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor clamp_min(const Tensor& x, float lo);
/// Elementwise a/b. Signals ContractError on a zero denominator rather than
/// producing NaN/Inf.
Tensor divide(const Tensor& a, const Tensor& b);

/// Output takes `forward_values`; the backward pass routes the full gradient
/// to `soft` as if the forward had used it.
Tensor straight_through(const Tensor& soft, std::span<const float> forward_values);

/// Reverse pass from a scalar root. Accumulates into the leaves' `grad`.
void backward(const Tensor& root);
/// Same pass, but leaf gradients are left in `leaf_sink` and the leaves'
/// own `grad` buffers are untouched. Lets one scan per worker accumulate
/// into a single owner deterministically.
void backward(const Tensor& root, GradMap& leaf_sink);

bool all_finite(const Tensor& t);
void dump(const Tensor& t, std::ostream& os);
std::string to_string(const Tensor& t);

// Raw row-major kernels, accumulate semantics (callers zero the output).
void mm_accum(const float* a, const float* b, float* c, int m, int k, int n);     // C += A·B
void mm_nt_accum(const float* a, const float* b, float* c, int m, int k, int n);  // C += A·Bᵀ, B is n×k
void mm_tn_accum(const float* a, const float* b, float* c, int m, int k, int n);  // C += Aᵀ·B, A is k×m

// ---------------------------------------------------------------------------
// Finite-difference gradient checking.

struct GradCheckOptions {
  /// Central-difference steps tried per coordinate; the best (smallest
  /// discrepancy) wins. Rounding and truncation trade off against each
  /// other, so a single step cannot serve every coordinate scale.
  std::vector<float> steps = {1e-3f, 3e-3f, 1e-2f};
  int max_coords = 200;
  uint64_t seed = 1;
  /// Optional kink detector evaluated after each loss evaluation. A probe
  /// whose two evaluations disagree on the signature straddles a
  /// nondifferentiable point and is excluded from pass/fail.
  std::function<std::vector<uint8_t>()> signature;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  int checked = 0;
  int skipped = 0;
};

/// Compares analytic gradients of `make_loss()` against central finite
/// differences over sampled parameter coordinates. `make_loss` must be
/// deterministic (re-evaluations see identical noise).
GradCheckReport check_gradients(const std::function<Tensor()>& make_loss,
                                std::span<Tensor> params,
                                const GradCheckOptions& opts = {});

}  // namespace pyrec
