#pragma once

#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "pewire/errors.hpp"
#include "pewire/graph.hpp"
#include "pewire/rng.hpp"
#include "pewire/tensor.hpp"
#include "pewire/wiring_config.hpp"

namespace pewire {

// Encoder shape. num_layers counts all encoder layers (the paper's L+1).
struct ModelConfig {
  int image_size = 32;
  int patch_size = 4;
  int channels = 1;
  int embed_dim = 64;
  int num_layers = 6;
  int num_heads = 4;
  int mlp_ratio = 4;
  int num_classes = 4;
  HeadMode head_mode = HeadMode::kGap;

  int patches_per_side() const { return image_size / patch_size; }
  int num_patches() const { return patches_per_side() * patches_per_side(); }
  int patch_dim() const { return channels * patch_size * patch_size; }
  int hidden_dim() const { return mlp_ratio * embed_dim; }
  bool has_cls() const { return head_mode == HeadMode::kCls; }
  int tokens() const { return num_patches() + (has_cls() ? 1 : 0); }
  // Patch rows start after the class token, when there is one.
  int cls_offset() const { return has_cls() ? 1 : 0; }

  void validate() const {
    if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0)
      throw config_error("image_size " + std::to_string(image_size) +
                         " not divisible by patch_size " + std::to_string(patch_size));
    if (channels < 1) throw config_error("channels must be >= 1");
    if (embed_dim < 2) throw config_error("embed_dim must be >= 2");
    if (num_heads < 1 || embed_dim % num_heads != 0)
      throw config_error("embed_dim " + std::to_string(embed_dim) + " not divisible by num_heads " +
                         std::to_string(num_heads));
    if (num_layers < 1) throw config_error("num_layers must be >= 1");
    if (mlp_ratio < 1) throw config_error("mlp_ratio must be >= 1");
    if (num_classes < 2) throw config_error("num_classes must be >= 2");
  }
};

template <class T>
struct ParamT {
  std::string name;
  TensorT<T> value;
  bool trainable = true;
};

// Ordered, uniquely named parameter table. Iteration order is creation order
// and is the order every consumer (init, optimizer, checkpoint) walks.
template <class T>
class ParamStoreT {
 public:
  int add(std::string name, TensorT<T> value, bool trainable = true) {
    if (index_.count(name)) throw config_error("duplicate param name '" + name + "'");
    index_[name] = static_cast<int>(params_.size());
    params_.push_back(ParamT<T>{std::move(name), std::move(value), trainable});
    return static_cast<int>(params_.size()) - 1;
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  ParamT<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw config_error("no param named '" + name + "'");
    return params_[it->second];
  }
  const ParamT<T>& at(const std::string& name) const {
    return const_cast<ParamStoreT*>(this)->at(name);
  }

  std::vector<ParamT<T>>& all() { return params_; }
  const std::vector<ParamT<T>>& all() const { return params_; }
  size_t size() const { return params_.size(); }

 private:
  std::vector<ParamT<T>> params_;
  std::map<std::string, int> index_;
};

using ParamStore = ParamStoreT<float>;

namespace names {
inline std::string layer(int l, const std::string& leaf) {
  return "layer." + std::to_string(l) + "." + leaf;
}
}  // namespace names

// Which optional tensors exist, derived from (config, wiring). Shared by
// parameter construction and the closed-form count.
struct ParamLayout {
  bool cls = false;
  int pe_rows = 0;
  std::vector<int> pe_ln_layers;
  bool last_ln_pe = false;

  static ParamLayout of(const ModelConfig& m, const WiringConfig& w) {
    m.validate();
    w.validate(m.num_layers);
    if (w.head_mode != m.head_mode)
      throw config_error("wiring head_mode disagrees with model head_mode");
    ParamLayout lay;
    lay.cls = m.has_cls();
    // Only the Default-family wirings give the class token its own PE row.
    const bool pe_covers_cls = lay.cls && !w.layerwise();
    lay.pe_rows = m.num_patches() + (pe_covers_cls ? 1 : 0);
    lay.pe_ln_layers = w.delivered_layers(m.num_layers);
    lay.last_ln_pe = w.has_last_ln_pe();
    return lay;
  }
};

// Exact trainable scalar count, closed form. The test suite checks this
// against a walk over the constructed tensors.
inline long long count_params(const ModelConfig& m, const WiringConfig& w) {
  const ParamLayout lay = ParamLayout::of(m, w);
  const long long d = m.embed_dim, hidden = m.hidden_dim(), k = m.num_classes;
  long long total = 0;
  total += (long long)m.patch_dim() * d + d;               // patch projection
  if (lay.cls) total += d;                                 // class token
  total += (long long)lay.pe_rows * d;                     // PE table
  long long per_layer = 2 * d;                             // ln_attn
  per_layer += d * 3 * d + 3 * d;                          // fused qkv
  per_layer += d * d + d;                                  // attention out proj
  per_layer += 2 * d;                                      // ln_mlp
  per_layer += d * hidden + hidden + hidden * d + d;       // mlp
  total += per_layer * m.num_layers;
  total += 2 * d * (long long)lay.pe_ln_layers.size();     // per-layer PE LNs
  total += 2 * d;                                          // last LN
  if (lay.last_ln_pe) total += 2 * d;                      // last-LN PE branch
  total += d * k + k;                                      // classifier
  return total;
}

// DeiT-style init: truncated normal std 0.02 for projection weights and the
// PE table, zero biases and class token, unit/zero LN affine. Draw order is
// the store's creation order.
template <class T>
ParamStoreT<T> build_params(const ModelConfig& m, const WiringConfig& w, Rng& rng,
                            bool freeze_pe = false) {
  const ParamLayout lay = ParamLayout::of(m, w);
  const int d = m.embed_dim, hidden = m.hidden_dim();
  ParamStoreT<T> store;

  auto trunc_init = [&](Shape shape) {
    TensorT<T> t(std::move(shape));
    for (T& v : t.data) v = static_cast<T>(rng.trunc_normal(0.02));
    return t;
  };

  store.add("patch_embed.weight", trunc_init({m.patch_dim(), d}));
  store.add("patch_embed.bias", TensorT<T>({d}));
  if (lay.cls) store.add("cls_token", TensorT<T>({d}));
  if (freeze_pe)
    store.add("pos_embed", TensorT<T>({lay.pe_rows, d}), /*trainable=*/false);
  else
    store.add("pos_embed", trunc_init({lay.pe_rows, d}));

  auto ln_pair = [&](const std::string& base) {
    store.add(base + ".gamma", TensorT<T>::full({d}, T(1)));
    store.add(base + ".beta", TensorT<T>({d}));
  };

  size_t next_pe_ln = 0;
  for (int l = 0; l < m.num_layers; ++l) {
    ln_pair(names::layer(l, "ln_attn"));
    store.add(names::layer(l, "qkv.weight"), trunc_init({d, 3 * d}));
    store.add(names::layer(l, "qkv.bias"), TensorT<T>({3 * d}));
    store.add(names::layer(l, "proj.weight"), trunc_init({d, d}));
    store.add(names::layer(l, "proj.bias"), TensorT<T>({d}));
    ln_pair(names::layer(l, "ln_mlp"));
    store.add(names::layer(l, "mlp.fc1.weight"), trunc_init({d, hidden}));
    store.add(names::layer(l, "mlp.fc1.bias"), TensorT<T>({hidden}));
    store.add(names::layer(l, "mlp.fc2.weight"), trunc_init({hidden, d}));
    store.add(names::layer(l, "mlp.fc2.bias"), TensorT<T>({d}));
    if (next_pe_ln < lay.pe_ln_layers.size() && lay.pe_ln_layers[next_pe_ln] == l) {
      ln_pair(names::layer(l, "ln_pe"));
      ++next_pe_ln;
    }
  }
  ln_pair("last_ln");
  if (lay.last_ln_pe) ln_pair("last_ln_pe");
  store.add("classifier.weight", trunc_init({d, m.num_classes}));
  store.add("classifier.bias", TensorT<T>({m.num_classes}));
  return store;
}

// Binds a param store to a graph: each named tensor becomes a leaf node on
// first use, exactly once.
template <class T>
class BoundParamsT {
 public:
  BoundParamsT(GraphT<T>& g, const ParamStoreT<T>& store) : g_(g), store_(store) {}

  NodeId operator()(const std::string& name) {
    auto it = ids_.find(name);
    if (it != ids_.end()) return it->second;
    const NodeId id = g_.param(name, store_.at(name).value);
    ids_[name] = id;
    return id;
  }

  GraphT<T>& graph() { return g_; }
  const ParamStoreT<T>& store() const { return store_; }

 private:
  GraphT<T>& g_;
  const ParamStoreT<T>& store_;
  std::map<std::string, NodeId> ids_;
};

using BoundParams = BoundParamsT<float>;

// Splits an image [C,H,W] into non-overlapping P x P patches, row-major over
// the patch grid; inside a patch features are channel-major, then pixel
// row-major. Output [N, C*P*P].
template <class T>
TensorT<T> patchify(const TensorT<T>& image, int patch) {
  if (image.rank() != 3) throw shape_error("patchify: image must be [C,H,W], got " + shape_str(image.shape));
  const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (patch <= 0 || h % patch != 0 || w % patch != 0)
    throw shape_error("patchify: image " + std::to_string(h) + "x" + std::to_string(w) +
                      " not divisible into " + std::to_string(patch) + "x" + std::to_string(patch) +
                      " patches");
  const int gh = h / patch, gw = w / patch;
  TensorT<T> out({gh * gw, c * patch * patch});
  for (int pr = 0; pr < gh; ++pr)
    for (int pc = 0; pc < gw; ++pc) {
      T* tok = out.data.data() + ((size_t)pr * gw + pc) * out.cols();
      for (int ch = 0; ch < c; ++ch)
        for (int py = 0; py < patch; ++py)
          for (int px = 0; px < patch; ++px)
            tok[(size_t)ch * patch * patch + py * patch + px] =
                image.data[((size_t)ch * h + pr * patch + py) * w + pc * patch + px];
    }
  return out;
}

// One linear layer: x * W + b.
template <class T>
NodeId linear(BoundParamsT<T>& p, NodeId x, const std::string& base) {
  GraphT<T>& g = p.graph();
  return g.add_bias(g.matmul(x, p(base + ".weight")), p(base + ".bias"));
}

// Multi-head self-attention for layer l over an already-normalized (and
// PE-injected, where the wiring says so) input. The residual add is the
// caller's job.
template <class T>
NodeId msa(BoundParamsT<T>& p, int l, NodeId x_ln, int batch, int tokens, int heads) {
  GraphT<T>& g = p.graph();
  const NodeId qkv = linear(p, x_ln, names::layer(l, "qkv"));
  const NodeId ctx = g.attention(qkv, batch, tokens, heads);
  return linear(p, ctx, names::layer(l, "proj"));
}

// Feed-forward block for layer l: linear -> gelu -> linear. Residual add is
// the caller's job.
template <class T>
NodeId mlp(BoundParamsT<T>& p, int l, NodeId x_ln) {
  GraphT<T>& g = p.graph();
  return linear(p, g.gelu(linear(p, x_ln, names::layer(l, "mlp.fc1"))), names::layer(l, "mlp.fc2"));
}

template <class T>
struct HeadResult {
  NodeId normalized;  // y, the post-Last-LN token state (PE branch included)
  NodeId logits;
};

// Classifier head: Last LN, then the optional last-LN PE branch added to the
// patch rows, then CLS read-out or GAP over patch rows.
template <class T>
HeadResult<T> head(BoundParamsT<T>& p, NodeId x_last, int batch, int tokens, HeadMode mode,
                   std::optional<NodeId> pe_term, T eps = T(1e-6)) {
  GraphT<T>& g = p.graph();
  const int cls_offset = mode == HeadMode::kCls ? 1 : 0;
  NodeId y = g.layer_norm(x_last, p("last_ln.gamma"), p("last_ln.beta"), eps);
  if (pe_term) {
    const NodeId pe_ln =
        g.layer_norm(*pe_term, p("last_ln_pe.gamma"), p("last_ln_pe.beta"), eps);
    y = g.add_rows_block(y, pe_ln, batch, tokens, cls_offset);
  }
  NodeId pooled;
  if (mode == HeadMode::kCls)
    pooled = g.take_row_block(y, batch, tokens, 0);
  else
    pooled = g.mean_rows_block(y, batch, tokens, cls_offset);
  const NodeId logits = linear(p, pooled, "classifier");
  return {y, logits};
}

}  // namespace pewire
