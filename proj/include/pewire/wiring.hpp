#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pewire/errors.hpp"
#include "pewire/graph.hpp"
#include "pewire/model.hpp"
#include "pewire/tensor.hpp"
#include "pewire/wiring_config.hpp"

namespace pewire {

// Composition of the wiring variants.
//
// All variants share the encoder skeleton
//     x'_l    = MSA_l(a_l) + x_l
//     x_{l+1} = MLP_l(ln_mlp_l(x'_l)) + x'_l
// and differ only in the attention input a_l and the head:
//   default  a_l = ln_attn_l(x_l); x_0 = tokens + pos; y = last_ln(x).
//   lape     x_0 = tokens; a_l = ln_attn_l(x_l) + inj_l for every layer,
//            inj_l = ln_pe_l(inj_{l-1}), inj chain seeded with pos.
//   pvg      x_0 = tokens + pos; layer 0 plain; layers 1..L injected.
//   mpvg     pvg plus y = last_ln(x) + last_ln_pe(pos_k) on patch rows.
//   fig5b    default dataflow plus the mpvg head with k = 0.
// The ablation knobs (layer0 / hier / xpe) move a_l and the chain recurrence
// within that frame.

template <class T>
struct PEChainT {
  TensorT<T> pos0;                      // raw initial PE, the paper's pos_0
  std::map<int, TensorT<T>> injected;   // delivered layer -> post-LN chain state
};

using PEChain = PEChainT<float>;

namespace detail {
template <class T>
TensorT<T> layer_norm_rows(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                           T eps) {
  const int rows = x.rows(), d = x.cols();
  TensorT<T> out(x.shape);
  for (int r = 0; r < rows; ++r) {
    const T* xr = x.data.data() + (size_t)r * d;
    T* yr = out.data.data() + (size_t)r * d;
    T mean = T(0);
    for (int c = 0; c < d; ++c) mean += xr[c];
    mean /= T(d);
    T var = T(0);
    for (int c = 0; c < d; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= T(d);
    const T invstd = T(1) / std::sqrt(var + eps);
    for (int c = 0; c < d; ++c) yr[c] = (xr[c] - mean) * invstd * gamma.data[c] + beta.data[c];
  }
  return out;
}
}  // namespace detail

// Stand-alone PE chain evaluation (no graph): state at a delivered layer is
// exactly the tensor the forward pass injects into that layer's attention
// input. hierarchical chains feed each state into the next LN; otherwise
// every LN reads pos_0.
template <class T>
PEChainT<T> build_pe_chain(const TensorT<T>& pos0, const ParamStoreT<T>& store, bool hierarchical,
                           const std::vector<int>& layers, T eps = T(1e-6)) {
  PEChainT<T> chain;
  chain.pos0 = pos0;
  const TensorT<T>* prev = &chain.pos0;
  for (int l : layers) {
    const std::string base = names::layer(l, "ln_pe");
    if (!store.has(base + ".gamma") || !store.has(base + ".beta"))
      throw config_error("missing PE LN params for delivered layer " + std::to_string(l));
    const TensorT<T>& src = hierarchical ? *prev : chain.pos0;
    chain.injected[l] =
        detail::layer_norm_rows(src, store.at(base + ".gamma").value, store.at(base + ".beta").value, eps);
    prev = &chain.injected[l];
  }
  return chain;
}

// Per-layer tensors captured during a forward pass, the raw material for the
// diagnostics module. Token states are the post-LN attention inputs before
// PE injection; PE states are the injected chain tensors.
template <class T>
struct ForwardTraceT {
  WiringConfig wiring;
  int batch = 0;
  int tokens = 0;      // rows per image block (N or N+1)
  int cls_offset = 0;  // 1 when row 0 is the class token
  std::vector<TensorT<T>> token_ln;      // [num_layers] x [B*T, d]
  std::map<int, TensorT<T>> pe_injected;  // delivered layer -> [N, d]
  TensorT<T> pre_last;   // x after the final layer, before the Last LN
  TensorT<T> post_last;  // y, after the Last LN (and its PE branch)
  TensorT<T> logits;     // [B, num_classes]

  int num_patches() const { return tokens - cls_offset; }
};

using ForwardTrace = ForwardTraceT<float>;

template <class T>
struct ForwardResult {
  NodeId logits = -1;
  ForwardTraceT<T> trace;
};

// Runs the full encoder for one image batch under the given wiring, building
// the autodiff tape in `g`. Images are [C,H,W] each.
template <class T>
ForwardResult<T> forward(GraphT<T>& g, const ParamStoreT<T>& store, const ModelConfig& m,
                         const WiringConfig& w, const std::vector<TensorT<T>>& images,
                         bool want_trace = false, T eps = T(1e-6)) {
  const ParamLayout lay = ParamLayout::of(m, w);
  if (images.empty()) throw config_error("forward: empty batch");

  const int batch = static_cast<int>(images.size());
  const int n = m.num_patches(), d = m.embed_dim;
  const int tokens = m.tokens(), cls_offset = m.cls_offset();

  // Patch extraction is pure data movement; one constant leaf for the batch.
  TensorT<T> patches({batch * n, m.patch_dim()});
  for (int b = 0; b < batch; ++b) {
    const TensorT<T>& img = images[b];
    if (img.rank() != 3 || img.dim(0) != m.channels || img.dim(1) != m.image_size ||
        img.dim(2) != m.image_size)
      throw shape_error("forward: image " + std::to_string(b) + " has shape " +
                        shape_str(img.shape) + ", expected [" + std::to_string(m.channels) + "," +
                        std::to_string(m.image_size) + "," + std::to_string(m.image_size) + "]");
    const TensorT<T> p = patchify(img, m.patch_size);
    std::copy(p.data.begin(), p.data.end(), patches.data.begin() + (size_t)b * n * p.cols());
  }

  BoundParamsT<T> params(g, store);
  g.set_scope("patch_embed");
  NodeId x = linear(params, g.constant(std::move(patches)), "patch_embed");
  if (lay.cls) x = g.prepend_row_block(x, params("cls_token"), batch, n);

  const NodeId pos0 = params("pos_embed");
  const bool input_pe = !w.layerwise() || w.add_pe_at_input;
  if (input_pe) {
    // Default-family PE covers the class token row too; layer-wise PE covers
    // patch rows only.
    const int off = lay.pe_rows == tokens ? 0 : cls_offset;
    x = g.add_rows_block(x, pos0, batch, tokens, off);
  }

  ForwardTraceT<T> trace;
  trace.wiring = w;
  trace.batch = batch;
  trace.tokens = tokens;
  trace.cls_offset = cls_offset;

  const std::vector<int> delivered = w.delivered_layers(m.num_layers);
  size_t next_delivery = 0;
  std::map<int, NodeId> chain_nodes;  // delivered layer -> injected node
  NodeId chain_prev = pos0;

  for (int l = 0; l < m.num_layers; ++l) {
    g.set_scope("layer." + std::to_string(l));
    NodeId x_ln = g.layer_norm(x, params(names::layer(l, "ln_attn.gamma")),
                               params(names::layer(l, "ln_attn.beta")), eps);
    if (want_trace) trace.token_ln.push_back(g.value(x_ln));

    NodeId attn_in = x_ln;
    if (next_delivery < delivered.size() && delivered[next_delivery] == l) {
      const NodeId src = w.hierarchical ? chain_prev : pos0;
      const NodeId inj = g.layer_norm(src, params(names::layer(l, "ln_pe.gamma")),
                                      params(names::layer(l, "ln_pe.beta")), eps);
      chain_prev = inj;
      chain_nodes[l] = inj;
      if (want_trace) trace.pe_injected[l] = g.value(inj);
      attn_in = g.add_rows_block(x_ln, inj, batch, tokens, cls_offset);
      ++next_delivery;
    }

    x = g.add(msa(params, l, attn_in, batch, tokens, m.num_heads), x);
    x = g.add(mlp(params, l, g.layer_norm(x, params(names::layer(l, "ln_mlp.gamma")),
                                          params(names::layer(l, "ln_mlp.beta")), eps)),
              x);
  }

  g.set_scope("head");
  if (want_trace) trace.pre_last = g.value(x);

  std::optional<NodeId> pe_term;
  if (w.has_last_ln_pe()) {
    const int k = *w.last_ln_pe_index;
    NodeId sel = k == 0 ? pos0 : chain_nodes.at(k);
    // A Default-family PE table carries a class-token row; the head branch
    // covers patch rows only.
    if (k == 0 && lay.pe_rows == n + 1) sel = g.slice_rows(sel, 1, n + 1);
    pe_term = sel;
  }

  const HeadResult<T> h = head(params, x, batch, tokens, w.head_mode, pe_term, eps);
  if (want_trace) {
    trace.post_last = g.value(h.normalized);
    trace.logits = g.value(h.logits);
  }
  g.set_scope("");

  ForwardResult<T> res;
  res.logits = h.logits;
  res.trace = std::move(trace);
  return res;
}

}  // namespace pewire
