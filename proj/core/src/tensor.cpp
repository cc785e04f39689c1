#include "pyrec/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <ostream>
#include <sstream>

#include "pyrec/rng.hpp"

namespace pyrec {

namespace {

thread_local bool g_grad_enabled = true;
thread_local MacCounter* g_mac = nullptr;
thread_local std::vector<uint8_t>* g_branch_trace = nullptr;

size_t shape_numel(const Shape& s) {
  size_t n = 1;
  for (int e : s) {
    if (e < 0) throw ShapeError("negative extent");
    n *= static_cast<size_t>(e);
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

NodePtr make_node(Shape shape, std::vector<float> data) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  return n;
}

bool want_grad(std::initializer_list<const Tensor*> parents) {
  if (!g_grad_enabled) return false;
  for (const Tensor* p : parents)
    if (p->requires_grad()) return true;
  return false;
}

// Registers `out` as the child of `parents` with the given backward closure.
void attach(const NodePtr& out, std::initializer_list<const Tensor*> parents,
            std::function<void(const std::vector<float>&, GradMap&)> fn) {
  out->requires_grad = true;
  for (const Tensor* p : parents) out->parents.push_back(p->node());
  out->backward = std::move(fn);
}

void bump_macs(uint64_t n) {
  if (g_mac) g_mac->macs += n;
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

MacCounter* mac_counter() { return g_mac; }
void set_mac_counter(MacCounter* c) { g_mac = c; }

std::vector<uint8_t>* branch_trace() { return g_branch_trace; }
void set_branch_trace(std::vector<uint8_t>* t) { g_branch_trace = t; }

std::vector<float>& GradMap::at(const Node* n, size_t numel) {
  auto it = buf_.find(n);
  if (it == buf_.end()) it = buf_.emplace(n, std::vector<float>(numel, 0.0f)).first;
  return it->second;
}

const std::vector<float>* GradMap::find(const Node* n) const {
  auto it = buf_.find(n);
  return it == buf_.end() ? nullptr : &it->second;
}

// ---------------------------------------------------------------------------
// Tensor basics

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  size_t n = shape_numel(shape);
  auto node = make_node(std::move(shape), std::vector<float>(n, 0.0f));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  size_t n = shape_numel(shape);
  auto node = make_node(std::move(shape), std::vector<float>(n, value));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<float> data, bool requires_grad) {
  if (shape_numel(shape) != data.size())
    throw ShapeError("from: data length " + std::to_string(data.size()) + " != numel of " +
                     shape_str(shape));
  auto node = make_node(std::move(shape), std::move(data));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(float v) { return from({1}, {v}); }

int Tensor::rows() const {
  if (n_->shape.empty()) throw ShapeError("rows: rank-0 tensor");
  return n_->shape[0];
}

int Tensor::cols() const {
  if (n_->shape.size() < 2) throw ShapeError("cols: tensor is not 2-D");
  return n_->shape[1];
}

float Tensor::at(int r, int c) const {
  return n_->data[static_cast<size_t>(r) * static_cast<size_t>(cols()) + static_cast<size_t>(c)];
}

float Tensor::item() const {
  if (numel() != 1) throw ContractError("item: tensor has " + std::to_string(numel()) + " elements");
  return n_->data[0];
}

std::span<const float> Tensor::grad() const { return {n_->grad.data(), n_->grad.size()}; }

void Tensor::zero_grad() { std::fill(n_->grad.begin(), n_->grad.end(), 0.0f); }

Tensor Tensor::detach() const {
  auto node = make_node(n_->shape, n_->data);
  return Tensor(std::move(node));
}

// ---------------------------------------------------------------------------
// Kernels

void mm_accum(const float* a, const float* b, float* c, int m, int k, int n) {
  bump_macs(uint64_t(m) * uint64_t(k) * uint64_t(n));
  for (int i = 0; i < m; ++i) {
    const float* arow = a + size_t(i) * k;
    float* crow = c + size_t(i) * n;
    for (int p = 0; p < k; ++p) {
      const float av = arow[p];
      const float* brow = b + size_t(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void mm_nt_accum(const float* a, const float* b, float* c, int m, int k, int n) {
  bump_macs(uint64_t(m) * uint64_t(k) * uint64_t(n));
  for (int i = 0; i < m; ++i) {
    const float* arow = a + size_t(i) * k;
    float* crow = c + size_t(i) * n;
    for (int j = 0; j < n; ++j) {
      const float* brow = b + size_t(j) * k;
      float acc = 0.0f;
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

void mm_tn_accum(const float* a, const float* b, float* c, int m, int k, int n) {
  bump_macs(uint64_t(m) * uint64_t(k) * uint64_t(n));
  for (int p = 0; p < k; ++p) {
    const float* arow = a + size_t(p) * m;
    const float* brow = b + size_t(p) * n;
    for (int i = 0; i < m; ++i) {
      const float av = arow[i];
      float* crow = c + size_t(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// ---------------------------------------------------------------------------
// Elementwise helpers

namespace {

Tensor binary_elementwise(const Tensor& a, const Tensor& b, const char* name,
                          float (*f)(float, float), float (*dfa)(float, float),
                          float (*dfb)(float, float)) {
  require_same_shape(a, b, name);
  std::vector<float> out(a.numel());
  auto ad = a.data();
  auto bd = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = f(ad[i], bd[i]);
  auto node = make_node(a.shape(), std::move(out));
  if (want_grad({&a, &b})) {
    Node* an = a.node().get();
    Node* bn = b.node().get();
    bool aw = a.requires_grad(), bw = b.requires_grad();
    std::vector<float> asave(ad.begin(), ad.end());
    std::vector<float> bsave(bd.begin(), bd.end());
    attach(node, {&a, &b},
           [an, bn, aw, bw, dfa, dfb, asave = std::move(asave), bsave = std::move(bsave)](
               const std::vector<float>& g, GradMap& gm) {
             if (aw) {
               auto& ga = gm.at(an, asave.size());
               for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfa(asave[i], bsave[i]);
             }
             if (bw) {
               auto& gb = gm.at(bn, bsave.size());
               for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * dfb(asave[i], bsave[i]);
             }
           });
  }
  return Tensor(std::move(node));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<float> out(a.numel());
  auto ad = a.data();
  auto bd = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
  auto node = make_node(a.shape(), std::move(out));
  if (want_grad({&a, &b})) {
    Node* an = a.node().get();
    Node* bn = b.node().get();
    bool aw = a.requires_grad(), bw = b.requires_grad();
    size_t n = a.numel();
    attach(node, {&a, &b}, [an, bn, aw, bw, n](const std::vector<float>& g, GradMap& gm) {
      if (aw) {
        auto& ga = gm.at(an, n);
        for (size_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (bw) {
        auto& gb = gm.at(bn, n);
        for (size_t i = 0; i < n; ++i) gb[i] += g[i];
      }
    });
  }
  return Tensor(std::move(node));
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<float> out(a.numel());
  auto ad = a.data();
  auto bd = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = ad[i] - bd[i];
  auto node = make_node(a.shape(), std::move(out));
  if (want_grad({&a, &b})) {
    Node* an = a.node().get();
    Node* bn = b.node().get();
    bool aw = a.requires_grad(), bw = b.requires_grad();
    size_t n = a.numel();
    attach(node, {&a, &b}, [an, bn, aw, bw, n](const std::vector<float>& g, GradMap& gm) {
      if (aw) {
        auto& ga = gm.at(an, n);
        for (size_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (bw) {
        auto& gb = gm.at(bn, n);
        for (size_t i = 0; i < n; ++i) gb[i] -= g[i];
      }
    });
  }
  return Tensor(std::move(node));
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      a, b, "mul", [](float x, float y) { return x * y; },
      [](float, float y) { return y; }, [](float x, float) { return x; });
}

Tensor scale(const Tensor& a, float c) {
  std::vector<float> out(a.numel());
  auto ad = a.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * c;
  auto node = make_node(a.shape(), std::move(out));
  if (want_grad({&a})) {
    Node* an = a.node().get();
    size_t n = a.numel();
    attach(node, {&a}, [an, c, n](const std::vector<float>& g, GradMap& gm) {
      auto& ga = gm.at(an, n);
      for (size_t i = 0; i < n; ++i) ga[i] += g[i] * c;
    });
  }
  return Tensor(std::move(node));
}

Tensor add_scalar(const Tensor& a, float c) {
  std::vector<float> out(a.numel());
  auto ad = a.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + c;
  auto node = make_node(a.shape(), std::move(out));
  if (want_grad({&a})) {
    Node* an = a.node().get();
    size_t n = a.numel();
    attach(node, {&a}, [an, n](const std::vector<float>& g, GradMap& gm) {
      auto& ga = gm.at(an, n);
      for (size_t i = 0; i < n; ++i) ga[i] += g[i];
    });
  }
  return Tensor(std::move(node));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2)
    throw ShapeError("matmul: operands must be 2-D");
  const int m = a.rows(), k = a.cols(), k2 = b.rows(), n = b.cols();
  if (k != k2)
    throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  std::vector<float> out(size_t(m) * n, 0.0f);
  mm_accum(a.data().data(), b.data().data(), out.data(), m, k, n);
  auto node = make_node({m, n}, std::move(out));
  if (want_grad({&a, &b})) {
    Node* an = a.node().get();
    Node* bn = b.node().get();
    bool aw = a.requires_grad(), bw = b.requires_grad();
    std::vector<float> asave(a.data().begin(), a.data().end());
    std::vector<float> bsave(b.data().begin(), b.data().end());
    attach(node, {&a, &b},
           [an, bn, aw, bw, m, k, n, asave = std::move(asave), bsave = std::move(bsave)](
               const std::vector<float>& g, GradMap& gm) {
             if (aw) {  // dA = G·Bᵀ
               auto& ga = gm.at(an, size_t(m) * k);
               mm_nt_accum(g.data(), bsave.data(), ga.data(), m, n, k);
             }
             if (bw) {  // dB = Aᵀ·G
               auto& gb = gm.at(bn, size_t(k) * n);
               mm_tn_accum(asave.data(), g.data(), gb.data(), k, m, n);
             }
           });
  }
  return Tensor(std::move(node));
}

Tensor add_row(const Tensor& x, const Tensor& row) {
  if (x.shape().size() != 2) throw ShapeError("add_row: x must be 2-D");
  const int n = x.rows(), d = x.cols();
  if (static_cast<int>(row.numel()) != d)
    throw ShapeError("add_row: row length " + std::to_string(row.numel()) + " != cols " +
                     std::to_string(d));
  std::vector<float> out(x.numel());
  auto xd = x.data();
  auto rd = row.data();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) out[size_t(i) * d + j] = xd[size_t(i) * d + j] + rd[j];
  auto node = make_node(x.shape(), std::move(out));
  if (want_grad({&x, &row})) {
    Node* xn = x.node().get();
    Node* rn = row.node().get();
    bool xw = x.requires_grad(), rw = row.requires_grad();
    attach(node, {&x, &row}, [xn, rn, xw, rw, n, d](const std::vector<float>& g, GradMap& gm) {
      if (xw) {
        auto& gx = gm.at(xn, size_t(n) * d);
        for (size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
      }
      if (rw) {
        auto& gr = gm.at(rn, size_t(d));
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < d; ++j) gr[j] += g[size_t(i) * d + j];
      }
    });
  }
  return Tensor(std::move(node));
}

Tensor gather_rows(const Tensor& table, std::vector<int> ids) {
  if (table.shape().size() != 2) throw ShapeError("gather_rows: table must be 2-D");
  const int rows = table.rows(), d = table.cols();
  for (int id : ids)
    if (id < 0 || id >= rows)
      throw InputError("gather_rows: id " + std::to_string(id) + " out of range [0," +
                       std::to_string(rows) + ")");
  const int n = static_cast<int>(ids.size());
  std::vector<float> out(size_t(n) * d);
  auto td = table.data();
  for (int i = 0; i < n; ++i)
    std::memcpy(out.data() + size_t(i) * d, td.data() + size_t(ids[i]) * d, sizeof(float) * d);
  auto node = make_node({n, d}, std::move(out));
  if (want_grad({&table})) {
    Node* tn = table.node().get();
    attach(node, {&table},
           [tn, rows, d, n, ids = std::move(ids)](const std::vector<float>& g, GradMap& gm) {
             auto& gt = gm.at(tn, size_t(rows) * d);
             for (int i = 0; i < n; ++i)
               for (int j = 0; j < d; ++j) gt[size_t(ids[i]) * d + j] += g[size_t(i) * d + j];
           });
  }
  return Tensor(std::move(node));
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no parts");
  const int d = parts[0].cols();
  int total = 0;
  for (const Tensor& p : parts) {
    if (p.shape().size() != 2 || p.cols() != d) throw ShapeError("concat_rows: column mismatch");
    total += p.rows();
  }
  std::vector<float> out(size_t(total) * d);
  size_t off = 0;
  for (const Tensor& p : parts) {
    std::memcpy(out.data() + off, p.data().data(), sizeof(float) * p.numel());
    off += p.numel();
  }
  auto node = make_node({total, d}, std::move(out));
  bool any = false;
  for (const Tensor& p : parts)
    if (p.requires_grad()) any = true;
  if (g_grad_enabled && any) {
    struct Piece {
      Node* n;
      size_t numel;
      bool wants;
    };
    std::vector<Piece> pieces;
    for (const Tensor& p : parts) {
      pieces.push_back({p.node().get(), p.numel(), p.requires_grad()});
      node->parents.push_back(p.node());
    }
    node->requires_grad = true;
    node->backward = [pieces = std::move(pieces)](const std::vector<float>& g, GradMap& gm) {
      size_t off2 = 0;
      for (const auto& pc : pieces) {
        if (pc.wants) {
          auto& gp = gm.at(pc.n, pc.numel);
          for (size_t i = 0; i < pc.numel; ++i) gp[i] += g[off2 + i];
        }
        off2 += pc.numel;
      }
    };
  }
  return Tensor(std::move(node));
}

Tensor concat_rows(std::initializer_list<Tensor> parts) {
  std::vector<Tensor> v(parts);
  return concat_rows(std::span<const Tensor>(v.data(), v.size()));
}

Tensor slice_rows(const Tensor& x, int start, int count) {
  if (x.shape().size() != 2) throw ShapeError("slice_rows: x must be 2-D");
  const int n = x.rows(), d = x.cols();
  if (start < 0 || count < 0 || start + count > n) throw ShapeError("slice_rows: range out of bounds");
  std::vector<float> out(size_t(count) * d);
  std::memcpy(out.data(), x.data().data() + size_t(start) * d, sizeof(float) * out.size());
  auto node = make_node({count, d}, std::move(out));
  if (want_grad({&x})) {
    Node* xn = x.node().get();
    attach(node, {&x}, [xn, n, d, start, count](const std::vector<float>& g, GradMap& gm) {
      auto& gx = gm.at(xn, size_t(n) * d);
      for (size_t i = 0; i < size_t(count) * d; ++i) gx[size_t(start) * d + i] += g[i];
    });
  }
  return Tensor(std::move(node));
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) throw ShapeError("reshape: element count mismatch");
  std::vector<float> out(x.data().begin(), x.data().end());
  auto node = make_node(std::move(shape), std::move(out));
  if (want_grad({&x})) {
    Node* xn = x.node().get();
    size_t n = x.numel();
    attach(node, {&x}, [xn, n](const std::vector<float>& g, GradMap& gm) {
      auto& gx = gm.at(xn, n);
      for (size_t i = 0; i < n; ++i) gx[i] += g[i];
    });
  }
  return Tensor(std::move(node));
}

Tensor element(const Tensor& x, int index) {
  if (index < 0 || static_cast<size_t>(index) >= x.numel())
    throw ShapeError("element: index out of range");
  auto node = make_node({1}, {x.at(static_cast<size_t>(index))});
  if (want_grad({&x})) {
    Node* xn = x.node().get();
    size_t n = x.numel();
    attach(node, {&x}, [xn, n, index](const std::vector<float>& g, GradMap& gm) {
      gm.at(xn, n)[static_cast<size_t>(index)] += g[0];
    });
  }
  return Tensor(std::move(node));
}

Tensor softmax_rows(const Tensor& x) {
  if (x.shape().size() != 2) throw ShapeError("softmax_rows: x must be 2-D");
  const int n = x.rows(), d = x.cols();
  std::vector<float> out(x.numel());
  auto xd = x.data();
  for (int i = 0; i < n; ++i) {
    const float* row = xd.data() + size_t(i) * d;
    float mx = row[0];
    for (int j = 1; j < d; ++j) mx = std::max(mx, row[j]);
    float denom = 0.0f;
    float* orow = out.data() + size_t(i) * d;
    for (int j = 0; j < d; ++j) {
      orow[j] = std::exp(row[j] - mx);
      denom += orow[j];
    }
    for (int j = 0; j < d; ++j) orow[j] /= denom;
  }
  auto node = make_node(x.shape(), std::move(out));
  if (want_grad({&x})) {
    Node* xn = x.node().get();
    std::vector<float> p(node->data);
    attach(node, {&x}, [xn, n, d, p = std::move(p)](const std::vector<float>& g, GradMap& gm) {
      auto& gx = gm.at(xn, size_t(n) * d);
      for (int i = 0; i < n; ++i) {
        const float* pr = p.data() + size_t(i) * d;
        const float* gr = g.data() + size_t(i) * d;
        float dot = 0.0f;
        for (int j = 0; j < d; ++j) dot += pr[j] * gr[j];
        float* gxr = gx.data() + size_t(i) * d;
        for (int j = 0; j < d; ++j) gxr[j] += pr[j] * (gr[j] - dot);
      }
    });
  }
  return Tensor(std::move(node));
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps) {
  if (x.shape().size() != 2) throw ShapeError("layer_norm: x must be 2-D");
  const int n = x.rows(), d = x.cols();
  if (static_cast<int>(gain.numel()) != d || static_cast<int>(bias.numel()) != d)
    throw ShapeError("layer_norm: gain/bias must match the last extent");
  std::vector<float> out(x.numel());
  std::vector<float> xhat(x.numel());
  std::vector<float> inv_sigma(static_cast<size_t>(n));
  auto xd = x.data();
  auto gd = gain.data();
  auto bd = bias.data();
  for (int i = 0; i < n; ++i) {
    const float* row = xd.data() + size_t(i) * d;
    float mu = 0.0f;
    for (int j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<float>(d);
    float var = 0.0f;
    for (int j = 0; j < d; ++j) {
      float c = row[j] - mu;
      var += c * c;
    }
    var /= static_cast<float>(d);
    const float is = 1.0f / std::sqrt(var + eps);
    inv_sigma[static_cast<size_t>(i)] = is;
    float* xh = xhat.data() + size_t(i) * d;
    float* orow = out.data() + size_t(i) * d;
    for (int j = 0; j < d; ++j) {
      xh[j] = (row[j] - mu) * is;
      orow[j] = xh[j] * gd[j] + bd[j];
    }
  }
  auto node = make_node(x.shape(), std::move(out));
  if (want_grad({&x, &gain, &bias})) {
    Node* xn = x.node().get();
    Node* gn = gain.node().get();
    Node* bn = bias.node().get();
    bool xw = x.requires_grad(), gw = gain.requires_grad(), bw = bias.requires_grad();
    std::vector<float> gsave(gd.begin(), gd.end());
    attach(node, {&x, &gain, &bias},
           [xn, gn, bn, xw, gw, bw, n, d, xhat = std::move(xhat), inv_sigma = std::move(inv_sigma),
            gsave = std::move(gsave)](const std::vector<float>& g, GradMap& gm) {
             if (gw) {
               auto& gg = gm.at(gn, size_t(d));
               for (int i = 0; i < n; ++i)
                 for (int j = 0; j < d; ++j) gg[j] += g[size_t(i) * d + j] * xhat[size_t(i) * d + j];
             }
             if (bw) {
               auto& gb = gm.at(bn, size_t(d));
               for (int i = 0; i < n; ++i)
                 for (int j = 0; j < d; ++j) gb[j] += g[size_t(i) * d + j];
             }
             if (xw) {
               auto& gx = gm.at(xn, size_t(n) * d);
               for (int i = 0; i < n; ++i) {
                 const float* gr = g.data() + size_t(i) * d;
                 const float* xh = xhat.data() + size_t(i) * d;
                 float m1 = 0.0f, m2 = 0.0f;
                 for (int j = 0; j < d; ++j) {
                   const float dxh = gr[j] * gsave[j];
                   m1 += dxh;
                   m2 += dxh * xh[j];
                 }
                 m1 /= static_cast<float>(d);
                 m2 /= static_cast<float>(d);
                 const float is = inv_sigma[static_cast<size_t>(i)];
                 float* gxr = gx.data() + size_t(i) * d;
                 for (int j = 0; j < d; ++j)
                   gxr[j] += is * (gr[j] * gsave[j] - m1 - xh[j] * m2);
               }
             }
           });
  }
  return Tensor(std::move(node));
}

namespace {

constexpr float kInvSqrt2 = 0.70710678118654752440f;
constexpr float kInvSqrt2Pi = 0.39894228040143267794f;

float gelu_f(float x) { return 0.5f * x * (1.0f + std::erf(x * kInvSqrt2)); }
float gelu_df(float x) {
  const float phi = 0.5f * (1.0f + std::erf(x * kInvSqrt2));
  return phi + x * kInvSqrt2Pi * std::exp(-0.5f * x * x);
}

float sigmoid_f(float x) {
  if (x >= 0.0f) {
    const float e = std::exp(-x);
    return 1.0f / (1.0f + e);
  }
  const float e = std::exp(x);
  return e / (1.0f + e);
}
float sigmoid_df(float x) {
  const float s = sigmoid_f(x);
  return s * (1.0f - s);
}

}  // namespace

Tensor map_unary(const Tensor& x, float (*f)(float), float (*df)(float)) {
  std::vector<float> out(x.numel());
  auto xd = x.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = f(xd[i]);
  auto node = make_node(x.shape(), std::move(out));
  if (want_grad({&x})) {
    Node* xn = x.node().get();
    std::vector<float> xsave(xd.begin(), xd.end());
    attach(node, {&x}, [xn, df, xsave = std::move(xsave)](const std::vector<float>& g, GradMap& gm) {
      auto& gx = gm.at(xn, xsave.size());
      for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xsave[i]);
    });
  }
  return Tensor(std::move(node));
}

Tensor gelu(const Tensor& x) { return map_unary(x, gelu_f, gelu_df); }
Tensor sigmoid(const Tensor& x) { return map_unary(x, sigmoid_f, sigmoid_df); }

Tensor sum(const Tensor& x) {
  float acc = 0.0f;
  for (float v : x.data()) acc += v;
  auto node = make_node({1}, {acc});
  if (want_grad({&x})) {
    Node* xn = x.node().get();
    size_t n = x.numel();
    attach(node, {&x}, [xn, n](const std::vector<float>& g, GradMap& gm) {
      auto& gx = gm.at(xn, n);
      for (size_t i = 0; i < n; ++i) gx[i] += g[0];
    });
  }
  return Tensor(std::move(node));
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), 1.0f / static_cast<float>(x.numel()));
}

Tensor absval(const Tensor& x) {
  for (float v : x.data()) trace_branch(v > 0.0f ? 1 : (v < 0.0f ? 2 : 0));
  return map_unary(
      x, [](float v) { return std::fabs(v); },
      [](float v) { return v > 0.0f ? 1.0f : (v < 0.0f ? -1.0f : 0.0f); });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
  {
    auto ad = a.data();
    auto bd = b.data();
    for (size_t i = 0; i < ad.size() && i < bd.size(); ++i) trace_branch(ad[i] >= bd[i] ? 1 : 0);
  }
  return binary_elementwise(
      a, b, "maximum", [](float x, float y) { return x >= y ? x : y; },
      [](float x, float y) { return x >= y ? 1.0f : 0.0f; },
      [](float x, float y) { return x >= y ? 0.0f : 1.0f; });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  {
    auto ad = a.data();
    auto bd = b.data();
    for (size_t i = 0; i < ad.size() && i < bd.size(); ++i) trace_branch(ad[i] <= bd[i] ? 1 : 0);
  }
  return binary_elementwise(
      a, b, "minimum", [](float x, float y) { return x <= y ? x : y; },
      [](float x, float y) { return x <= y ? 1.0f : 0.0f; },
      [](float x, float y) { return x <= y ? 0.0f : 1.0f; });
}

Tensor clamp_min(const Tensor& x, float lo) {
  std::vector<float> out(x.numel());
  auto xd = x.data();
  for (float v : xd) trace_branch(v > lo ? 1 : 0);
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::max(xd[i], lo);
  auto node = make_node(x.shape(), std::move(out));
  if (want_grad({&x})) {
    Node* xn = x.node().get();
    std::vector<float> xsave(xd.begin(), xd.end());
    attach(node, {&x}, [xn, lo, xsave = std::move(xsave)](const std::vector<float>& g, GradMap& gm) {
      auto& gx = gm.at(xn, xsave.size());
      for (size_t i = 0; i < g.size(); ++i)
        if (xsave[i] > lo) gx[i] += g[i];
    });
  }
  return Tensor(std::move(node));
}

Tensor divide(const Tensor& a, const Tensor& b) {
  for (float v : b.data())
    if (v == 0.0f) throw ContractError("divide: zero denominator");
  return binary_elementwise(
      a, b, "divide", [](float x, float y) { return x / y; },
      [](float, float y) { return 1.0f / y; }, [](float x, float y) { return -x / (y * y); });
}

Tensor straight_through(const Tensor& soft, std::span<const float> forward_values) {
  if (forward_values.size() != soft.numel())
    throw ShapeError("straight_through: forward value count mismatch");
  std::vector<float> out(forward_values.begin(), forward_values.end());
  auto node = make_node(soft.shape(), std::move(out));
  if (want_grad({&soft})) {
    Node* sn = soft.node().get();
    size_t n = soft.numel();
    attach(node, {&soft}, [sn, n](const std::vector<float>& g, GradMap& gm) {
      auto& gs = gm.at(sn, n);
      for (size_t i = 0; i < n; ++i) gs[i] += g[i];
    });
  }
  return Tensor(std::move(node));
}

// ---------------------------------------------------------------------------
// Backward

namespace {

std::vector<Node*> topo_order(Node* root) {
  std::vector<Node*> order;
  std::unordered_map<Node*, int> state;  // 0 unvisited, 1 on stack, 2 done
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root, 0);
  state[root] = 1;
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node* p = node->parents[idx++].get();
      auto& st = state[p];
      if (st == 0) {
        st = 1;
        stack.emplace_back(p, 0);
      }
    } else {
      state[node] = 2;
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;  // parents before children
}

void backward_impl(const Tensor& root, GradMap& gm, bool into_node_grad) {
  if (root.numel() != 1) throw ContractError("backward: root must be a scalar");
  if (!root.requires_grad()) return;
  std::vector<Node*> order = topo_order(root.node().get());
  gm.at(root.node().get(), 1)[0] += 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (!node->backward) continue;
    const std::vector<float>* g = gm.find(node);
    if (!g) continue;
    node->backward(*g, gm);
    gm.erase(node);  // propagated; free eagerly
  }
  if (into_node_grad) {
    for (Node* node : order) {
      if (!node->is_leaf() || !node->requires_grad) continue;
      const std::vector<float>* g = gm.find(node);
      if (!g) continue;
      if (node->grad.empty()) node->grad.assign(node->numel(), 0.0f);
      for (size_t i = 0; i < g->size(); ++i) node->grad[i] += (*g)[i];
    }
  }
}

}  // namespace

void backward(const Tensor& root) {
  GradMap gm;
  backward_impl(root, gm, /*into_node_grad=*/true);
}

void backward(const Tensor& root, GradMap& leaf_sink) {
  backward_impl(root, leaf_sink, /*into_node_grad=*/false);
}

bool all_finite(const Tensor& t) {
  for (float v : t.data())
    if (!std::isfinite(v)) return false;
  return true;
}

void dump(const Tensor& t, std::ostream& os) {
  os << "tensor " << shape_str(t.shape()) << "\n";
  const int cols = t.shape().size() == 2 ? t.cols() : static_cast<int>(t.numel());
  auto d = t.data();
  for (size_t i = 0; i < d.size(); ++i) {
    os << d[i];
    os << (((i + 1) % static_cast<size_t>(cols) == 0) ? '\n' : ' ');
  }
}

std::string to_string(const Tensor& t) {
  std::ostringstream os;
  dump(t, os);
  return os.str();
}

// ---------------------------------------------------------------------------
// Gradient checking

GradCheckReport check_gradients(const std::function<Tensor()>& make_loss,
                                std::span<Tensor> params, const GradCheckOptions& opts) {
  for (Tensor& p : params) p.zero_grad();
  Tensor loss = make_loss();
  backward(loss);
  std::vector<std::vector<float>> analytic;
  analytic.reserve(params.size());
  for (Tensor& p : params) {
    auto g = p.grad();
    analytic.emplace_back(g.begin(), g.end());
    if (analytic.back().empty()) analytic.back().assign(p.numel(), 0.0f);
  }

  size_t total = 0;
  for (const Tensor& p : params) total += p.numel();
  const size_t want = std::min<size_t>(static_cast<size_t>(opts.max_coords), total);

  // Sample coordinates without replacement across the flattened space.
  Rng rng(opts.seed);
  std::vector<size_t> picks;
  if (want == total) {
    picks.resize(total);
    for (size_t i = 0; i < total; ++i) picks[i] = i;
  } else {
    std::unordered_map<size_t, bool> seen;
    while (picks.size() < want) {
      size_t c = rng.next_u64() % total;
      if (!seen[c]) {
        seen[c] = true;
        picks.push_back(c);
      }
    }
  }

  GradCheckReport report;
  auto eval = [&](std::vector<uint8_t>* sig) {
    Tensor l = make_loss();
    if (sig && opts.signature) *sig = opts.signature();
    return l.item();
  };

  for (size_t flat : picks) {
    size_t pi = 0, off = flat;
    while (off >= params[pi].numel()) {
      off -= params[pi].numel();
      ++pi;
    }
    float* slot = params[pi].mutable_data().data() + off;
    const float saved = *slot;
    const double a = analytic[pi][off];

    double best = -1.0;
    bool any_valid = false;
    for (float h : opts.steps) {
      std::vector<uint8_t> sig_plus, sig_minus;
      *slot = saved + h;
      const double lp = eval(opts.signature ? &sig_plus : nullptr);
      *slot = saved - h;
      const double lm = eval(opts.signature ? &sig_minus : nullptr);
      *slot = saved;
      if (opts.signature && sig_plus != sig_minus) continue;  // straddles a kink
      any_valid = true;
      const double fd = (lp - lm) / (2.0 * h);
      const double rel = std::fabs(a - fd) / std::max({std::fabs(a), std::fabs(fd), 1e-8});
      if (best < 0.0 || rel < best) best = rel;
    }
    if (!any_valid) {
      ++report.skipped;
      continue;
    }
    ++report.checked;
    report.max_rel_err = std::max(report.max_rel_err, best);
  }
  return report;
}

}  // namespace pyrec
