#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "pewire/errors.hpp"
#include "pewire/tensor.hpp"

namespace pewire {

// Reverse-mode autodiff over a tape of dense tensors. Nodes are appended in
// evaluation order, which is already a topological order of the DAG, so the
// backward pass is a single reverse sweep. Execution is single-threaded and
// every kernel iterates in a fixed order: identical inputs and an identical
// tape give bit-identical outputs.
//
// Token batches are carried as 2-d [B*T, d] tensors. The handful of ops that
// care about the image blocking (attention, PE injection, pooling) take B and
// T explicitly instead of the library supporting general rank-3 arithmetic.

enum class OpKind {
  kConstant,
  kParam,
  kAdd,
  kAddBias,
  kMul,
  kMatMul,
  kTranspose,
  kReshape,
  kSoftmax,
  kGelu,
  kLayerNorm,
  kSum,
  kMeanRowsBlock,
  kTakeRowBlock,
  kAddRowsBlock,
  kPrependRowBlock,
  kSliceRows,
  kAttention,
  kCrossEntropy,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::kConstant: return "constant";
    case OpKind::kParam: return "param";
    case OpKind::kAdd: return "add";
    case OpKind::kAddBias: return "add_bias";
    case OpKind::kMul: return "mul";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kReshape: return "reshape";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kGelu: return "gelu";
    case OpKind::kLayerNorm: return "layer_norm";
    case OpKind::kSum: return "sum";
    case OpKind::kMeanRowsBlock: return "mean_rows_block";
    case OpKind::kTakeRowBlock: return "take_row_block";
    case OpKind::kAddRowsBlock: return "add_rows_block";
    case OpKind::kPrependRowBlock: return "prepend_row_block";
    case OpKind::kSliceRows: return "slice_rows";
    case OpKind::kAttention: return "attention";
    case OpKind::kCrossEntropy: return "cross_entropy";
  }
  return "?";
}

using NodeId = int;

template <class T>
struct NodeT {
  OpKind kind;
  std::vector<NodeId> inputs;
  TensorT<T> out;
  TensorT<T> grad;  // zero-initialized lazily during backward

  // Op-specific attributes.
  int batch = 0;       // B for blocked ops
  int tokens = 0;      // T for blocked ops
  int heads = 0;       // attention
  int offset = 0;      // first covered row within an image block
  int row0 = 0, row1 = 0;  // slice_rows
  T eps = T(0);        // layer_norm
  std::vector<int> labels;  // cross_entropy
  std::vector<T> cache;     // attention softmax / CE probs / LN row stats

  std::string scope;       // human context for numeric faults
  std::string param_name;  // kParam only
};

template <class T>
class GraphT {
 public:
  const TensorT<T>& value(NodeId id) const { return nodes_[check_id(id)].out; }
  const TensorT<T>& grad(NodeId id) const {
    const NodeT<T>& n = nodes_[check_id(id)];
    if (n.grad.data.empty())
      throw error("gradient not computed for node " + std::to_string(id) + " (" +
                  op_name(n.kind) + "); run backward first");
    return n.grad;
  }
  const NodeT<T>& node(NodeId id) const { return nodes_[check_id(id)]; }
  int size() const { return static_cast<int>(nodes_.size()); }

  // Context label attached to nodes created from here on; shows up in
  // numeric-fault messages.
  void set_scope(std::string scope) { scope_ = std::move(scope); }

  NodeId constant(TensorT<T> t) {
    NodeT<T> n;
    n.kind = OpKind::kConstant;
    n.out = std::move(t);
    return push(std::move(n));
  }

  NodeId param(const std::string& name, const TensorT<T>& value) {
    NodeT<T> n;
    n.kind = OpKind::kParam;
    n.out = value;
    n.param_name = name;
    return push(std::move(n));
  }

  NodeId add(NodeId a, NodeId b) {
    const TensorT<T>& x = value(a);
    const TensorT<T>& y = value(b);
    if (!x.same_shape(y))
      throw shape_error(std::string("add: shape mismatch ") + shape_str(x.shape) + " vs " +
                        shape_str(y.shape));
    NodeT<T> n = make(OpKind::kAdd, {a, b}, TensorT<T>(x.shape));
    for (size_t i = 0; i < x.data.size(); ++i) n.out.data[i] = x.data[i] + y.data[i];
    return push(std::move(n));
  }

  // x: [R, d], bias: [d], broadcast over rows.
  NodeId add_bias(NodeId a, NodeId b) {
    const TensorT<T>& x = value(a);
    const TensorT<T>& bias = value(b);
    if (x.rank() != 2 || bias.rank() != 1 || bias.dim(0) != x.cols())
      throw shape_error("add_bias: need [R,d] + [d], got " + shape_str(x.shape) + " + " +
                        shape_str(bias.shape));
    NodeT<T> n = make(OpKind::kAddBias, {a, b}, TensorT<T>(x.shape));
    const int rows = x.rows(), d = x.cols();
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < d; ++c) n.out.data[(size_t)r * d + c] = x.data[(size_t)r * d + c] + bias.data[c];
    return push(std::move(n));
  }

  NodeId mul(NodeId a, NodeId b) {
    const TensorT<T>& x = value(a);
    const TensorT<T>& y = value(b);
    if (!x.same_shape(y))
      throw shape_error("mul: shape mismatch " + shape_str(x.shape) + " vs " + shape_str(y.shape));
    NodeT<T> n = make(OpKind::kMul, {a, b}, TensorT<T>(x.shape));
    for (size_t i = 0; i < x.data.size(); ++i) n.out.data[i] = x.data[i] * y.data[i];
    return push(std::move(n));
  }

  // [m,k] x [k,n] -> [m,n]. Summation over k is left-to-right.
  NodeId matmul(NodeId a, NodeId b) {
    const TensorT<T>& x = value(a);
    const TensorT<T>& y = value(b);
    if (x.rank() != 2 || y.rank() != 2 || x.cols() != y.rows())
      throw shape_error("matmul: incompatible shapes " + shape_str(x.shape) + " x " +
                        shape_str(y.shape));
    NodeT<T> n = make(OpKind::kMatMul, {a, b}, TensorT<T>({x.rows(), y.cols()}));
    matmul_kernel(x.data.data(), y.data.data(), n.out.data.data(), x.rows(), x.cols(), y.cols());
    return push(std::move(n));
  }

  NodeId transpose(NodeId a) {
    const TensorT<T>& x = value(a);
    if (x.rank() != 2) throw shape_error("transpose: need 2-d tensor, got " + shape_str(x.shape));
    NodeT<T> n = make(OpKind::kTranspose, {a}, TensorT<T>({x.cols(), x.rows()}));
    for (int r = 0; r < x.rows(); ++r)
      for (int c = 0; c < x.cols(); ++c) n.out.data[(size_t)c * x.rows() + r] = x.data[(size_t)r * x.cols() + c];
    return push(std::move(n));
  }

  NodeId reshape(NodeId a, Shape shape) {
    const TensorT<T>& x = value(a);
    if (numel_of(shape) != x.numel())
      throw shape_error("reshape: " + shape_str(x.shape) + " -> " + shape_str(shape) +
                        " changes element count");
    NodeT<T> n = make(OpKind::kReshape, {a}, TensorT<T>(std::move(shape), x.data));
    return push(std::move(n));
  }

  // Softmax along the last axis, max-subtracted.
  NodeId softmax(NodeId a) {
    const TensorT<T>& x = value(a);
    if (x.rank() < 1 || x.shape.back() < 1)
      throw shape_error("softmax: need trailing axis of length >= 1");
    NodeT<T> n = make(OpKind::kSoftmax, {a}, TensorT<T>(x.shape));
    const int cols = x.shape.back();
    const long long rows = x.numel() / cols;
    for (long long r = 0; r < rows; ++r)
      softmax_row(x.data.data() + r * cols, n.out.data.data() + r * cols, cols);
    return push(std::move(n));
  }

  // Exact-erf GELU: x * Phi(x).
  NodeId gelu(NodeId a) {
    const TensorT<T>& x = value(a);
    NodeT<T> n = make(OpKind::kGelu, {a}, TensorT<T>(x.shape));
    for (size_t i = 0; i < x.data.size(); ++i) {
      const T v = x.data[i];
      n.out.data[i] = v * normal_cdf(v);
    }
    return push(std::move(n));
  }

  // Row-wise layer norm with population variance (divisor d) and affine.
  NodeId layer_norm(NodeId a, NodeId gamma, NodeId beta, T eps = T(1e-6)) {
    const TensorT<T>& x = value(a);
    const TensorT<T>& g = value(gamma);
    const TensorT<T>& b = value(beta);
    if (x.rank() != 2) throw shape_error("layer_norm: need [n,d] input, got " + shape_str(x.shape));
    const int d = x.cols();
    if (d < 2) throw shape_error("layer_norm: degenerate dimension d=" + std::to_string(d) + ", need d >= 2");
    if (g.rank() != 1 || g.dim(0) != d || b.rank() != 1 || b.dim(0) != d)
      throw shape_error("layer_norm: gamma/beta must be [d]");
    if (!(eps > T(0))) throw config_error("layer_norm: eps must be positive");
    NodeT<T> n = make(OpKind::kLayerNorm, {a, gamma, beta}, TensorT<T>(x.shape));
    n.eps = eps;
    const int rows = x.rows();
    n.cache.resize(static_cast<size_t>(rows) * 2);  // per row: mean, invstd
    for (int r = 0; r < rows; ++r) {
      const T* xr = x.data.data() + (size_t)r * d;
      T* yr = n.out.data.data() + (size_t)r * d;
      T mean = T(0);
      for (int c = 0; c < d; ++c) mean += xr[c];
      mean /= T(d);
      T var = T(0);
      for (int c = 0; c < d; ++c) {
        const T dv = xr[c] - mean;
        var += dv * dv;
      }
      var /= T(d);
      const T invstd = T(1) / std::sqrt(var + eps);
      n.cache[(size_t)r * 2] = mean;
      n.cache[(size_t)r * 2 + 1] = invstd;
      for (int c = 0; c < d; ++c) yr[c] = (xr[c] - mean) * invstd * g.data[c] + b.data[c];
    }
    return push(std::move(n));
  }

  // Sum of all elements -> [1].
  NodeId sum(NodeId a) {
    const TensorT<T>& x = value(a);
    NodeT<T> n = make(OpKind::kSum, {a}, TensorT<T>({1}));
    T s = T(0);
    for (T v : x.data) s += v;
    n.out.data[0] = s;
    return push(std::move(n));
  }

  // Mean over rows [offset, tokens) of each image block: [B*T,d] -> [B,d].
  NodeId mean_rows_block(NodeId a, int batch, int tokens, int offset) {
    const TensorT<T>& x = value(a);
    check_block(x, batch, tokens, "mean_rows_block");
    if (offset < 0 || offset >= tokens) throw shape_error("mean_rows_block: bad row offset");
    const int d = x.cols(), count = tokens - offset;
    NodeT<T> n = make(OpKind::kMeanRowsBlock, {a}, TensorT<T>({batch, d}));
    n.batch = batch;
    n.tokens = tokens;
    n.offset = offset;
    for (int b = 0; b < batch; ++b) {
      T* ob = n.out.data.data() + (size_t)b * d;
      for (int t = offset; t < tokens; ++t) {
        const T* xr = x.data.data() + ((size_t)b * tokens + t) * d;
        for (int c = 0; c < d; ++c) ob[c] += xr[c];
      }
      for (int c = 0; c < d; ++c) ob[c] /= T(count);
    }
    return push(std::move(n));
  }

  // Row `row` of each image block: [B*T,d] -> [B,d].
  NodeId take_row_block(NodeId a, int batch, int tokens, int row) {
    const TensorT<T>& x = value(a);
    check_block(x, batch, tokens, "take_row_block");
    if (row < 0 || row >= tokens) throw shape_error("take_row_block: row out of range");
    const int d = x.cols();
    NodeT<T> n = make(OpKind::kTakeRowBlock, {a}, TensorT<T>({batch, d}));
    n.batch = batch;
    n.tokens = tokens;
    n.offset = row;
    for (int b = 0; b < batch; ++b)
      for (int c = 0; c < d; ++c)
        n.out.data[(size_t)b * d + c] = x.data[((size_t)b * tokens + row) * d + c];
    return push(std::move(n));
  }

  // Adds a per-image tensor to every image block: rows [offset, tokens) of
  // each block receive the corresponding row of `pe` [tokens-offset, d].
  NodeId add_rows_block(NodeId a, NodeId pe, int batch, int tokens, int offset) {
    const TensorT<T>& x = value(a);
    const TensorT<T>& p = value(pe);
    check_block(x, batch, tokens, "add_rows_block");
    if (p.rank() != 2 || p.cols() != x.cols() || p.rows() != tokens - offset)
      throw shape_error("add_rows_block: addend " + shape_str(p.shape) + " does not cover rows [" +
                        std::to_string(offset) + "," + std::to_string(tokens) + ") of width " +
                        std::to_string(x.cols()));
    const int d = x.cols();
    NodeT<T> n = make(OpKind::kAddRowsBlock, {a, pe}, x);
    n.batch = batch;
    n.tokens = tokens;
    n.offset = offset;
    for (int b = 0; b < batch; ++b)
      for (int t = offset; t < tokens; ++t) {
        T* yr = n.out.data.data() + ((size_t)b * tokens + t) * d;
        const T* pr = p.data.data() + (size_t)(t - offset) * d;
        for (int c = 0; c < d; ++c) yr[c] += pr[c];
      }
    return push(std::move(n));
  }

  // Inserts a shared row (class token) at the front of each image block:
  // [B*N,d] + [d] -> [B*(N+1),d].
  NodeId prepend_row_block(NodeId a, NodeId cls, int batch, int tokens) {
    const TensorT<T>& x = value(a);
    const TensorT<T>& c = value(cls);
    check_block(x, batch, tokens, "prepend_row_block");
    if (c.rank() != 1 || c.dim(0) != x.cols())
      throw shape_error("prepend_row_block: class token must be [d]");
    const int d = x.cols(), to = tokens + 1;
    NodeT<T> n = make(OpKind::kPrependRowBlock, {a, cls}, TensorT<T>({batch * to, d}));
    n.batch = batch;
    n.tokens = tokens;
    for (int b = 0; b < batch; ++b) {
      T* dst = n.out.data.data() + (size_t)b * to * d;
      for (int k = 0; k < d; ++k) dst[k] = c.data[k];
      const T* src = x.data.data() + (size_t)b * tokens * d;
      for (int t = 0; t < tokens; ++t)
        for (int k = 0; k < d; ++k) dst[(size_t)(t + 1) * d + k] = src[(size_t)t * d + k];
    }
    return push(std::move(n));
  }

  NodeId slice_rows(NodeId a, int row0, int row1) {
    const TensorT<T>& x = value(a);
    if (x.rank() != 2 || row0 < 0 || row1 > x.rows() || row0 >= row1)
      throw shape_error("slice_rows: bad range [" + std::to_string(row0) + "," +
                        std::to_string(row1) + ") for " + shape_str(x.shape));
    const int d = x.cols();
    NodeT<T> n = make(OpKind::kSliceRows, {a}, TensorT<T>({row1 - row0, d}));
    n.row0 = row0;
    n.row1 = row1;
    std::copy(x.data.begin() + (size_t)row0 * d, x.data.begin() + (size_t)row1 * d,
              n.out.data.begin());
    return push(std::move(n));
  }

  // Multi-head scaled dot-product attention over a fused QKV input.
  // qkv: [B*T, 3d] (columns: Q | K | V), output context [B*T, d], before the
  // output projection. Scale is 1/sqrt(d/heads). Per-head softmax matrices
  // are cached for the backward pass.
  NodeId attention(NodeId qkv, int batch, int tokens, int heads) {
    const TensorT<T>& x = value(qkv);
    check_block(x, batch, tokens, "attention");
    if (x.cols() % 3 != 0) throw shape_error("attention: qkv width must be 3*d");
    const int d = x.cols() / 3;
    if (heads < 1 || d % heads != 0)
      throw config_error("attention: embed dim " + std::to_string(d) +
                         " not divisible by heads " + std::to_string(heads));
    const int dh = d / heads;
    const T scale = T(1) / std::sqrt(T(dh));
    NodeT<T> n = make(OpKind::kAttention, {qkv}, TensorT<T>({batch * tokens, d}));
    n.batch = batch;
    n.tokens = tokens;
    n.heads = heads;
    n.cache.assign((size_t)batch * heads * tokens * tokens, T(0));
    std::vector<T> srow(tokens);
    for (int b = 0; b < batch; ++b) {
      const T* blk = x.data.data() + (size_t)b * tokens * 3 * d;
      T* out = n.out.data.data() + (size_t)b * tokens * d;
      for (int h = 0; h < heads; ++h) {
        T* amat = n.cache.data() + ((size_t)b * heads + h) * tokens * tokens;
        const int qc = h * dh, kc = d + h * dh, vc = 2 * d + h * dh;
        for (int t = 0; t < tokens; ++t) {
          const T* q = blk + (size_t)t * 3 * d + qc;
          for (int u = 0; u < tokens; ++u) {
            const T* k = blk + (size_t)u * 3 * d + kc;
            T s = T(0);
            for (int e = 0; e < dh; ++e) s += q[e] * k[e];
            srow[u] = s * scale;
          }
          softmax_row(srow.data(), amat + (size_t)t * tokens, tokens);
        }
        for (int t = 0; t < tokens; ++t) {
          T* ctx = out + (size_t)t * d + h * dh;
          const T* arow = amat + (size_t)t * tokens;
          for (int e = 0; e < dh; ++e) ctx[e] = T(0);
          for (int u = 0; u < tokens; ++u) {
            const T a = arow[u];
            const T* v = blk + (size_t)u * 3 * d + vc;
            for (int e = 0; e < dh; ++e) ctx[e] += a * v[e];
          }
        }
      }
    }
    return push(std::move(n));
  }

  // Mean cross-entropy over the batch -> [1]. Caches softmax probabilities.
  NodeId cross_entropy(NodeId logits, std::vector<int> labels) {
    const TensorT<T>& x = value(logits);
    if (x.rank() != 2) throw shape_error("cross_entropy: logits must be [B,K]");
    const int bsz = x.rows(), k = x.cols();
    if (static_cast<int>(labels.size()) != bsz)
      throw shape_error("cross_entropy: got " + std::to_string(labels.size()) + " labels for batch " +
                        std::to_string(bsz));
    for (int lbl : labels)
      if (lbl < 0 || lbl >= k) throw config_error("cross_entropy: label " + std::to_string(lbl) + " out of range");
    NodeT<T> n = make(OpKind::kCrossEntropy, {logits}, TensorT<T>({1}));
    n.labels = std::move(labels);
    n.cache.resize((size_t)bsz * k);
    T total = T(0);
    for (int b = 0; b < bsz; ++b) {
      const T* row = x.data.data() + (size_t)b * k;
      T* prow = n.cache.data() + (size_t)b * k;
      T mx = row[0];
      for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
      T z = T(0);
      for (int j = 0; j < k; ++j) z += std::exp(row[j] - mx);
      const T lse = mx + std::log(z);
      for (int j = 0; j < k; ++j) prow[j] = std::exp(row[j] - lse);
      total += lse - row[n.labels[b]];
    }
    n.out.data[0] = total / T(bsz);
    return push(std::move(n));
  }

  // Reverse sweep from a scalar root. Gradient accumulators are reset first;
  // fan-out accumulates additively.
  void backward(NodeId root) {
    NodeT<T>& r = nodes_[check_id(root)];
    if (r.out.numel() != 1)
      throw error("backward: root must be scalar, got shape " + shape_str(r.out.shape));
    for (NodeT<T>& n : nodes_) n.grad = TensorT<T>();
    r.grad = TensorT<T>::full({1}, T(1));
    for (NodeId id = root; id >= 0; --id) {
      NodeT<T>& n = nodes_[id];
      if (n.grad.data.empty()) continue;  // not on a path to the root
      backward_node(n);
    }
  }

  // Gradients of all named param leaves, in tape order. Params untouched by
  // the last backward pass map to zeros.
  std::map<std::string, TensorT<T>> param_grads() const {
    std::map<std::string, TensorT<T>> out;
    for (const NodeT<T>& n : nodes_) {
      if (n.kind != OpKind::kParam) continue;
      if (n.grad.data.empty())
        out[n.param_name] = TensorT<T>(n.out.shape);
      else
        out[n.param_name] = n.grad;
    }
    return out;
  }

 private:
  std::vector<NodeT<T>> nodes_;
  std::string scope_;

  int check_id(NodeId id) const {
    if (id < 0 || id >= static_cast<int>(nodes_.size()))
      throw error("invalid node id " + std::to_string(id));
    return id;
  }

  NodeT<T> make(OpKind kind, std::vector<NodeId> inputs, TensorT<T> out) {
    NodeT<T> n;
    n.kind = kind;
    n.inputs = std::move(inputs);
    n.out = std::move(out);
    return n;
  }

  NodeId push(NodeT<T> n) {
    n.scope = scope_;
    if (!n.out.all_finite())
      throw numeric_error(std::string("numeric fault: non-finite output of op '") +
                          op_name(n.kind) + "'" + (n.scope.empty() ? "" : " in " + n.scope));
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size()) - 1;
  }

  static void check_block(const TensorT<T>& x, int batch, int tokens, const char* who) {
    if (x.rank() != 2 || batch < 1 || tokens < 1 || x.rows() != batch * tokens)
      throw shape_error(std::string(who) + ": rows " + shape_str(x.shape) +
                        " != batch*tokens = " + std::to_string(batch) + "*" + std::to_string(tokens));
  }

  static void matmul_kernel(const T* a, const T* b, T* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
      T* ci = c + (size_t)i * n;
      for (int j = 0; j < n; ++j) ci[j] = T(0);
      const T* ai = a + (size_t)i * k;
      for (int p = 0; p < k; ++p) {
        const T av = ai[p];
        const T* bp = b + (size_t)p * n;
        for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
      }
    }
  }

  static void softmax_row(const T* x, T* y, int n) {
    T mx = x[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, x[i]);
    T z = T(0);
    for (int i = 0; i < n; ++i) {
      y[i] = std::exp(x[i] - mx);
      z += y[i];
    }
    const T inv = T(1) / z;
    for (int i = 0; i < n; ++i) y[i] *= inv;
  }

  static T normal_cdf(T x) {
    return T(0.5) * (T(1) + std::erf(x / std::sqrt(T(2))));
  }
  static T normal_pdf(T x) {
    return std::exp(-x * x / T(2)) / std::sqrt(T(2) * T(M_PI));
  }

  TensorT<T>& grad_buf(NodeId id) {
    NodeT<T>& n = nodes_[id];
    if (n.grad.data.empty()) n.grad = TensorT<T>(n.out.shape);
    return n.grad;
  }

  void backward_node(NodeT<T>& n) {
    const TensorT<T>& g = n.grad;
    switch (n.kind) {
      case OpKind::kConstant:
      case OpKind::kParam:
        return;
      case OpKind::kAdd: {
        TensorT<T>& da = grad_buf(n.inputs[0]);
        TensorT<T>& db = grad_buf(n.inputs[1]);
        for (size_t i = 0; i < g.data.size(); ++i) {
          da.data[i] += g.data[i];
          db.data[i] += g.data[i];
        }
        return;
      }
      case OpKind::kAddBias: {
        TensorT<T>& dx = grad_buf(n.inputs[0]);
        TensorT<T>& db = grad_buf(n.inputs[1]);
        const int rows = n.out.rows(), d = n.out.cols();
        for (int r = 0; r < rows; ++r)
          for (int c = 0; c < d; ++c) {
            dx.data[(size_t)r * d + c] += g.data[(size_t)r * d + c];
            db.data[c] += g.data[(size_t)r * d + c];
          }
        return;
      }
      case OpKind::kMul: {
        const TensorT<T>& a = nodes_[n.inputs[0]].out;
        const TensorT<T>& b = nodes_[n.inputs[1]].out;
        TensorT<T>& da = grad_buf(n.inputs[0]);
        TensorT<T>& db = grad_buf(n.inputs[1]);
        for (size_t i = 0; i < g.data.size(); ++i) {
          da.data[i] += g.data[i] * b.data[i];
          db.data[i] += g.data[i] * a.data[i];
        }
        return;
      }
      case OpKind::kMatMul: {
        const TensorT<T>& a = nodes_[n.inputs[0]].out;
        const TensorT<T>& b = nodes_[n.inputs[1]].out;
        TensorT<T>& da = grad_buf(n.inputs[0]);
        TensorT<T>& db = grad_buf(n.inputs[1]);
        const int m = a.rows(), k = a.cols(), c = b.cols();
        // dA = G * B^T
        for (int i = 0; i < m; ++i)
          for (int p = 0; p < k; ++p) {
            T s = T(0);
            const T* gi = g.data.data() + (size_t)i * c;
            const T* bp = b.data.data() + (size_t)p * c;
            for (int j = 0; j < c; ++j) s += gi[j] * bp[j];
            da.data[(size_t)i * k + p] += s;
          }
        // dB = A^T * G
        for (int i = 0; i < m; ++i) {
          const T* ai = a.data.data() + (size_t)i * k;
          const T* gi = g.data.data() + (size_t)i * c;
          for (int p = 0; p < k; ++p) {
            const T av = ai[p];
            T* dbp = db.data.data() + (size_t)p * c;
            for (int j = 0; j < c; ++j) dbp[j] += av * gi[j];
          }
        }
        return;
      }
      case OpKind::kTranspose: {
        TensorT<T>& dx = grad_buf(n.inputs[0]);
        const int rows = n.out.rows(), cols = n.out.cols();  // transposed dims
        for (int r = 0; r < rows; ++r)
          for (int c = 0; c < cols; ++c)
            dx.data[(size_t)c * rows + r] += g.data[(size_t)r * cols + c];
        return;
      }
      case OpKind::kReshape: {
        TensorT<T>& dx = grad_buf(n.inputs[0]);
        for (size_t i = 0; i < g.data.size(); ++i) dx.data[i] += g.data[i];
        return;
      }
      case OpKind::kSoftmax: {
        TensorT<T>& dx = grad_buf(n.inputs[0]);
        const int cols = n.out.shape.back();
        const long long rows = n.out.numel() / cols;
        for (long long r = 0; r < rows; ++r) {
          const T* s = n.out.data.data() + r * cols;
          const T* gr = g.data.data() + r * cols;
          T dot = T(0);
          for (int c = 0; c < cols; ++c) dot += gr[c] * s[c];
          T* dxr = dx.data.data() + r * cols;
          for (int c = 0; c < cols; ++c) dxr[c] += s[c] * (gr[c] - dot);
        }
        return;
      }
      case OpKind::kGelu: {
        const TensorT<T>& x = nodes_[n.inputs[0]].out;
        TensorT<T>& dx = grad_buf(n.inputs[0]);
        for (size_t i = 0; i < g.data.size(); ++i) {
          const T v = x.data[i];
          dx.data[i] += g.data[i] * (normal_cdf(v) + v * normal_pdf(v));
        }
        return;
      }
      case OpKind::kLayerNorm: {
        const TensorT<T>& x = nodes_[n.inputs[0]].out;
        const TensorT<T>& gm = nodes_[n.inputs[1]].out;
        TensorT<T>& dx = grad_buf(n.inputs[0]);
        TensorT<T>& dg = grad_buf(n.inputs[1]);
        TensorT<T>& db = grad_buf(n.inputs[2]);
        const int rows = x.rows(), d = x.cols();
        std::vector<T> xhat(d), dxh(d);
        for (int r = 0; r < rows; ++r) {
          const T mean = n.cache[(size_t)r * 2];
          const T invstd = n.cache[(size_t)r * 2 + 1];
          const T* xr = x.data.data() + (size_t)r * d;
          const T* gr = g.data.data() + (size_t)r * d;
          T m1 = T(0), m2 = T(0);
          for (int c = 0; c < d; ++c) {
            xhat[c] = (xr[c] - mean) * invstd;
            dxh[c] = gr[c] * gm.data[c];
            m1 += dxh[c];
            m2 += dxh[c] * xhat[c];
          }
          m1 /= T(d);
          m2 /= T(d);
          T* dxr = dx.data.data() + (size_t)r * d;
          for (int c = 0; c < d; ++c) {
            dxr[c] += invstd * (dxh[c] - m1 - xhat[c] * m2);
            dg.data[c] += gr[c] * xhat[c];
            db.data[c] += gr[c];
          }
        }
        return;
      }
      case OpKind::kSum: {
        TensorT<T>& dx = grad_buf(n.inputs[0]);
        const T gv = g.data[0];
        for (size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += gv;
        return;
      }
      case OpKind::kMeanRowsBlock: {
        TensorT<T>& dx = grad_buf(n.inputs[0]);
        const int d = n.out.cols(), count = n.tokens - n.offset;
        const T inv = T(1) / T(count);
        for (int b = 0; b < n.batch; ++b) {
          const T* gb = g.data.data() + (size_t)b * d;
          for (int t = n.offset; t < n.tokens; ++t) {
            T* dxr = dx.data.data() + ((size_t)b * n.tokens + t) * d;
            for (int c = 0; c < d; ++c) dxr[c] += gb[c] * inv;
          }
        }
        return;
      }
      case OpKind::kTakeRowBlock: {
        TensorT<T>& dx = grad_buf(n.inputs[0]);
        const int d = n.out.cols();
        for (int b = 0; b < n.batch; ++b)
          for (int c = 0; c < d; ++c)
            dx.data[((size_t)b * n.tokens + n.offset) * d + c] += g.data[(size_t)b * d + c];
        return;
      }
      case OpKind::kAddRowsBlock: {
        TensorT<T>& dx = grad_buf(n.inputs[0]);
        TensorT<T>& dp = grad_buf(n.inputs[1]);
        const int d = n.out.cols();
        for (size_t i = 0; i < g.data.size(); ++i) dx.data[i] += g.data[i];
        for (int b = 0; b < n.batch; ++b)
          for (int t = n.offset; t < n.tokens; ++t) {
            const T* gr = g.data.data() + ((size_t)b * n.tokens + t) * d;
            T* dpr = dp.data.data() + (size_t)(t - n.offset) * d;
            for (int c = 0; c < d; ++c) dpr[c] += gr[c];
          }
        return;
      }
      case OpKind::kPrependRowBlock: {
        TensorT<T>& dx = grad_buf(n.inputs[0]);
        TensorT<T>& dc = grad_buf(n.inputs[1]);
        const int d = n.out.cols(), to = n.tokens + 1;
        for (int b = 0; b < n.batch; ++b) {
          const T* gb = g.data.data() + (size_t)b * to * d;
          for (int c = 0; c < d; ++c) dc.data[c] += gb[c];
          T* dxb = dx.data.data() + (size_t)b * n.tokens * d;
          for (int t = 0; t < n.tokens; ++t)
            for (int c = 0; c < d; ++c) dxb[(size_t)t * d + c] += gb[(size_t)(t + 1) * d + c];
        }
        return;
      }
      case OpKind::kSliceRows: {
        TensorT<T>& dx = grad_buf(n.inputs[0]);
        const int d = n.out.cols();
        for (int r = n.row0; r < n.row1; ++r)
          for (int c = 0; c < d; ++c)
            dx.data[(size_t)r * d + c] += g.data[(size_t)(r - n.row0) * d + c];
        return;
      }
      case OpKind::kAttention: {
        const TensorT<T>& qkv = nodes_[n.inputs[0]].out;
        TensorT<T>& dqkv = grad_buf(n.inputs[0]);
        const int d = qkv.cols() / 3, dh = d / n.heads, tokens = n.tokens;
        const T scale = T(1) / std::sqrt(T(dh));
        std::vector<T> dA((size_t)tokens * tokens), dS((size_t)tokens * tokens);
        for (int b = 0; b < n.batch; ++b) {
          const T* blk = qkv.data.data() + (size_t)b * tokens * 3 * d;
          T* dblk = dqkv.data.data() + (size_t)b * tokens * 3 * d;
          const T* gout = g.data.data() + (size_t)b * tokens * d;
          for (int h = 0; h < n.heads; ++h) {
            const T* amat = n.cache.data() + ((size_t)b * n.heads + h) * tokens * tokens;
            const int qc = h * dh, kc = d + h * dh, vc = 2 * d + h * dh;
            // dV[u] += sum_t A[t,u] * dctx[t]; dA[t,u] = dctx[t] . V[u]
            for (int t = 0; t < tokens; ++t) {
              const T* dctx = gout + (size_t)t * d + h * dh;
              const T* arow = amat + (size_t)t * tokens;
              T* darow = dA.data() + (size_t)t * tokens;
              for (int u = 0; u < tokens; ++u) {
                const T* v = blk + (size_t)u * 3 * d + vc;
                T* dv = dblk + (size_t)u * 3 * d + vc;
                T s = T(0);
                const T a = arow[u];
                for (int e = 0; e < dh; ++e) {
                  s += dctx[e] * v[e];
                  dv[e] += a * dctx[e];
                }
                darow[u] = s;
              }
            }
            // softmax backward per row: dS = A o (dA - rowdot)
            for (int t = 0; t < tokens; ++t) {
              const T* arow = amat + (size_t)t * tokens;
              const T* darow = dA.data() + (size_t)t * tokens;
              T dot = T(0);
              for (int u = 0; u < tokens; ++u) dot += darow[u] * arow[u];
              T* dsrow = dS.data() + (size_t)t * tokens;
              for (int u = 0; u < tokens; ++u) dsrow[u] = arow[u] * (darow[u] - dot);
            }
            // dQ[t] += scale * sum_u dS[t,u] K[u]; dK[u] += scale * sum_t dS[t,u] Q[t]
            for (int t = 0; t < tokens; ++t) {
              const T* dsrow = dS.data() + (size_t)t * tokens;
              const T* q = blk + (size_t)t * 3 * d + qc;
              T* dq = dblk + (size_t)t * 3 * d + qc;
              for (int u = 0; u < tokens; ++u) {
                const T w = dsrow[u] * scale;
                const T* k = blk + (size_t)u * 3 * d + kc;
                T* dk = dblk + (size_t)u * 3 * d + kc;
                for (int e = 0; e < dh; ++e) {
                  dq[e] += w * k[e];
                  dk[e] += w * q[e];
                }
              }
            }
          }
        }
        return;
      }
      case OpKind::kCrossEntropy: {
        TensorT<T>& dx = grad_buf(n.inputs[0]);
        const int bsz = static_cast<int>(n.labels.size());
        const int k = static_cast<int>(n.cache.size()) / bsz;
        const T gv = g.data[0] / T(bsz);
        for (int b = 0; b < bsz; ++b) {
          const T* p = n.cache.data() + (size_t)b * k;
          T* dxr = dx.data.data() + (size_t)b * k;
          for (int j = 0; j < k; ++j) dxr[j] += gv * (p[j] - (j == n.labels[b] ? T(1) : T(0)));
        }
        return;
      }
    }
    throw error("backward: unhandled op");
  }
};

using Graph = GraphT<float>;

}  // namespace pewire
