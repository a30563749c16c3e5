#include "hyperloop/model.hpp"

#include <cmath>
#include <map>

#include "hyperloop/error.hpp"
#include "hyperloop/ops.hpp"
#include "hyperloop/rng.hpp"

namespace hyperloop {

std::string_view to_string(ParamGroup group) {
  switch (group) {
    case ParamGroup::embeddings: return "embeddings";
    case ParamGroup::begin: return "begin";
    case ParamGroup::middle: return "middle";
    case ParamGroup::end: return "end";
    case ParamGroup::hyperconn: return "hyperconn";
    case ParamGroup::lora: return "lora";
  }
  return "?";
}

ParamGroup group_of(std::string_view name) {
  if (name.starts_with("begin.")) return ParamGroup::begin;
  if (name.starts_with("middle.")) return ParamGroup::middle;
  if (name.starts_with("end.")) return ParamGroup::end;
  if (name.starts_with("hc.")) return ParamGroup::hyperconn;
  if (name.starts_with("lora.")) return ParamGroup::lora;
  return ParamGroup::embeddings;
}

bool decays(std::string_view name) {
  for (std::string_view tail : {".norm", "final_norm", ".b_pre", ".b_post", ".b_res", ".alpha_pre", ".alpha_post",
                                ".alpha_res", ".loop_embedding"}) {
    if (name.ends_with(tail)) return false;
  }
  return true;
}

std::vector<HcSite> hc_sites(const ModelConfig& c) {
  std::vector<HcSite> sites;
  if (c.arch_kind != ArchKind::hyperloop) return sites;
  const Index total = c.middle_layers * c.loops;
  Index stride = c.middle_layers;
  if (c.hc_placement.kind == HcPlacement::Kind::per_layer) stride = 1;
  if (c.hc_placement.kind == HcPlacement::Kind::every_j_layers) stride = c.hc_placement.stride;
  for (Index first = 0; first < total; first += stride) {
    const Index last = std::min(first + stride, total);
    sites.push_back({first, last, last % c.middle_layers == 0});
  }
  return sites;
}

namespace {

void layer_manifest(std::vector<ParamSpec>& out, const std::string& prefix, Index c, Index f) {
  out.push_back({prefix + ".attn.wq", {c, c}});
  out.push_back({prefix + ".attn.wk", {c, c}});
  out.push_back({prefix + ".attn.wv", {c, c}});
  out.push_back({prefix + ".attn.wo", {c, c}});
  out.push_back({prefix + ".attn.norm", {c}});
  out.push_back({prefix + ".mlp.w_gate", {c, f}});
  out.push_back({prefix + ".mlp.w_up", {c, f}});
  out.push_back({prefix + ".mlp.w_down", {f, c}});
  out.push_back({prefix + ".mlp.norm", {c}});
}

void hc_manifest(std::vector<ParamSpec>& out, const std::string& prefix, HresMode mode, Index n, Index c, bool e) {
  const Index w = n * c;
  out.push_back({prefix + ".w_pre", {n, w}});
  out.push_back({prefix + ".b_pre", {n}});
  out.push_back({prefix + ".alpha_pre", {1}});
  out.push_back({prefix + ".w_post", {n, w}});
  out.push_back({prefix + ".b_post", {n}});
  out.push_back({prefix + ".alpha_post", {1}});
  if (mode != HresMode::identity) {
    const Index rows = mode == HresMode::sinkhorn ? n * n : n;
    out.push_back({prefix + ".w_res", {rows, w}});
    out.push_back({prefix + ".b_res", {rows}});
    out.push_back({prefix + ".alpha_res", {1}});
  }
  out.push_back({prefix + ".norm", {w}});
  if (e) out.push_back({prefix + ".loop_embedding", {c}});
}

std::array<std::pair<Index, Index>, 7> projection_dims(Index c, Index f) {
  return {{{c, c}, {c, c}, {c, c}, {c, c}, {c, f}, {c, f}, {f, c}}};
}

std::string layer_prefix(const char* block, Index i) { return std::string(block) + "." + std::to_string(i); }

std::string lora_prefix(Index loop, Index layer, std::size_t proj) {
  return "lora." + std::to_string(loop) + "." + std::to_string(layer) + "." + kProjectionNames[proj];
}

std::string mhc_prefix(Index layer, const char* sub) { return "hc." + std::to_string(layer) + "." + sub; }

}  // namespace

std::vector<ParamSpec> parameter_manifest(const ModelConfig& c) {
  validate(c);
  const Index dim = c.model_dim;
  const Index f = c.ffn_dim();
  std::vector<ParamSpec> out;
  out.push_back({"token_embedding", {c.vocab_size, dim}});
  for (Index i = 0; i < c.begin_layers; ++i) layer_manifest(out, layer_prefix("begin", i), dim, f);
  for (Index i = 0; i < c.middle_layers; ++i) layer_manifest(out, layer_prefix("middle", i), dim, f);
  for (Index i = 0; i < c.end_layers; ++i) layer_manifest(out, layer_prefix("end", i), dim, f);
  if (c.arch_kind == ArchKind::hyperloop) {
    const auto sites = hc_sites(c);
    for (std::size_t s = 0; s < sites.size(); ++s) {
      hc_manifest(out, "hc." + std::to_string(s), c.hres_mode, c.streams, dim, sites[s].loop_end);
    }
  } else if (c.arch_kind == ArchKind::mhc) {
    const Index layers = c.begin_layers + c.middle_layers + c.end_layers;
    for (Index d = 0; d < layers; ++d) {
      hc_manifest(out, mhc_prefix(d, "attn"), c.hres_mode, c.streams, dim, false);
      hc_manifest(out, mhc_prefix(d, "mlp"), c.hres_mode, c.streams, dim, false);
    }
  }
  if (c.lora_rank > 0) {
    const auto dims = projection_dims(dim, f);
    for (Index l = 0; l < c.loops; ++l) {
      for (Index i = 0; i < c.middle_layers; ++i) {
        for (std::size_t p = 0; p < dims.size(); ++p) {
          out.push_back({lora_prefix(l, i, p) + ".a", {dims[p].first, c.lora_rank}});
          out.push_back({lora_prefix(l, i, p) + ".b", {c.lora_rank, dims[p].second}});
        }
      }
    }
  }
  out.push_back({"unembedding", {c.vocab_size, dim}});
  out.push_back({"final_norm", {dim}});
  return out;
}

ParamCount count_params(const ModelConfig& c) {
  validate(c);
  const Index dim = c.model_dim;
  const Index f = c.ffn_dim();
  const Index n = c.streams;
  const Index layer = 4 * dim * dim + 3 * dim * f + 2 * dim;

  ParamCount p;
  p.unrolled_depth = c.unrolled_depth();
  p.token_embedding = c.vocab_size * dim;
  p.embeddings = 2 * c.vocab_size * dim + dim;
  p.begin = c.begin_layers * layer;
  p.middle = c.middle_layers * layer;
  p.end = c.end_layers * layer;

  Index rows = 2 * n;
  Index alphas = 2;
  if (c.hres_mode == HresMode::diagonal) rows += n, alphas += 1;
  if (c.hres_mode == HresMode::sinkhorn) rows += n * n, alphas += 1;
  // Each projection row spans the flattened n*C stream and carries one bias.
  const Index site = rows * (n * dim + 1) + alphas + n * dim;
  if (c.arch_kind == ArchKind::hyperloop) {
    const auto sites = hc_sites(c);
    p.hc_sites = static_cast<Index>(sites.size());
    Index with_embedding = 0;
    for (const auto& s : sites) with_embedding += s.loop_end ? 1 : 0;
    p.hyperconn = p.hc_sites * site + with_embedding * dim;
  } else if (c.arch_kind == ArchKind::mhc) {
    p.hc_sites = 2 * (c.begin_layers + c.middle_layers + c.end_layers);
    p.hyperconn = p.hc_sites * site;
  }
  p.hyperconn_norm = p.hc_sites * n * dim;
  p.lora = c.loops * c.middle_layers * c.lora_rank * (8 * dim + 3 * (dim + f));
  p.total = p.embeddings + p.begin + p.middle + p.end + p.hyperconn + p.lora;
  return p;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> Model<T>::named_parameters() const {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  out.emplace_back("token_embedding", embedding.tokens);
  auto add_layers = [&](const std::vector<LayerParams<T>>& layers) {
    for (const auto& l : layers) {
      out.emplace_back(l.attn.prefix + ".wq", l.attn.wq);
      out.emplace_back(l.attn.prefix + ".wk", l.attn.wk);
      out.emplace_back(l.attn.prefix + ".wv", l.attn.wv);
      out.emplace_back(l.attn.prefix + ".wo", l.attn.wo);
      out.emplace_back(l.attn.prefix + ".norm", l.attn.norm);
      out.emplace_back(l.mlp.prefix + ".w_gate", l.mlp.w_gate);
      out.emplace_back(l.mlp.prefix + ".w_up", l.mlp.w_up);
      out.emplace_back(l.mlp.prefix + ".w_down", l.mlp.w_down);
      out.emplace_back(l.mlp.prefix + ".norm", l.mlp.norm);
    }
  };
  add_layers(begin);
  add_layers(middle);
  add_layers(end);
  for (const auto& site : hc) {
    for (auto& kv : site.named_parameters()) out.push_back(std::move(kv));
  }
  for (std::size_t l = 0; l < lora.size(); ++l) {
    for (std::size_t i = 0; i < lora[l].size(); ++i) {
      for (std::size_t p = 0; p < kProjectionNames.size(); ++p) {
        const auto prefix = lora_prefix(static_cast<Index>(l), static_cast<Index>(i), p);
        out.emplace_back(prefix + ".a", lora[l][i].a[p]);
        out.emplace_back(prefix + ".b", lora[l][i].b[p]);
      }
    }
  }
  out.emplace_back("unembedding", embedding.unembed);
  out.emplace_back("final_norm", embedding.final_norm);
  return out;
}

template <typename T>
Index Model<T>::parameter_count() const {
  Index total = 0;
  for (const auto& [_, t] : named_parameters()) total += t.numel();
  return total;
}

namespace {

template <typename T>
Tensor<T> normal_leaf(const ModelConfig& c, const std::string& name, Shape shape, double std) {
  auto rng = CounterRng::stream(c.seed, name);
  std::vector<T> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = static_cast<T>(std * rng.truncated_normal());
  return Tensor<T>::from_vector(std::move(shape), std::move(v), true);
}

template <typename T>
LayerParams<T> init_layer(const ModelConfig& c, const std::string& prefix) {
  const Index dim = c.model_dim;
  const Index f = c.ffn_dim();
  const double out_std = kInitStd / std::sqrt(2.0 * static_cast<double>(c.unrolled_depth()));
  LayerParams<T> l;
  l.attn.prefix = prefix + ".attn";
  l.attn.wq = normal_leaf<T>(c, l.attn.prefix + ".wq", {dim, dim}, kInitStd);
  l.attn.wk = normal_leaf<T>(c, l.attn.prefix + ".wk", {dim, dim}, kInitStd);
  l.attn.wv = normal_leaf<T>(c, l.attn.prefix + ".wv", {dim, dim}, kInitStd);
  l.attn.wo = normal_leaf<T>(c, l.attn.prefix + ".wo", {dim, dim}, out_std);
  l.attn.norm = Tensor<T>::full({dim}, T(1), true);
  l.mlp.prefix = prefix + ".mlp";
  l.mlp.w_gate = normal_leaf<T>(c, l.mlp.prefix + ".w_gate", {dim, f}, kInitStd);
  l.mlp.w_up = normal_leaf<T>(c, l.mlp.prefix + ".w_up", {dim, f}, kInitStd);
  l.mlp.w_down = normal_leaf<T>(c, l.mlp.prefix + ".w_down", {f, dim}, out_std);
  l.mlp.norm = Tensor<T>::full({dim}, T(1), true);
  return l;
}

template <typename T>
Tensor<T> round_through_double(const Tensor<double>& t) {
  std::vector<T> v(t.data().begin(), t.data().end());
  return Tensor<T>::from_vector(t.shape(), std::move(v), true);
}

}  // namespace

template <typename T>
Model<T> build_model(const ModelConfig& c) {
  if constexpr (!std::is_same_v<T, double>) {
    return convert_model<T>(build_model<double>(c));
  } else {
    validate(c);
    Model<double> m;
    m.config = c;
    const Index dim = c.model_dim;
    m.embedding.tokens = normal_leaf<double>(c, "token_embedding", {c.vocab_size, dim}, kInitStd);
    m.embedding.unembed = normal_leaf<double>(c, "unembedding", {c.vocab_size, dim}, kInitStd);
    m.embedding.final_norm = Tensor<double>::full({dim}, 1.0, true);
    for (Index i = 0; i < c.begin_layers; ++i) m.begin.push_back(init_layer<double>(c, layer_prefix("begin", i)));
    for (Index i = 0; i < c.middle_layers; ++i) m.middle.push_back(init_layer<double>(c, layer_prefix("middle", i)));
    for (Index i = 0; i < c.end_layers; ++i) m.end.push_back(init_layer<double>(c, layer_prefix("end", i)));
    if (c.arch_kind == ArchKind::hyperloop) {
      const auto sites = hc_sites(c);
      for (std::size_t s = 0; s < sites.size(); ++s) {
        m.hc.push_back(init_hyperconn<double>("hc." + std::to_string(s), c.hres_mode, c.streams, dim, sites[s].loop_end));
      }
    } else if (c.arch_kind == ArchKind::mhc) {
      const Index layers = c.begin_layers + c.middle_layers + c.end_layers;
      for (Index d = 0; d < layers; ++d) {
        m.hc.push_back(init_hyperconn<double>(mhc_prefix(d, "attn"), c.hres_mode, c.streams, dim, false));
        m.hc.push_back(init_hyperconn<double>(mhc_prefix(d, "mlp"), c.hres_mode, c.streams, dim, false));
      }
    }
    if (c.lora_rank > 0) {
      const auto dims = projection_dims(dim, c.ffn_dim());
      m.lora.resize(static_cast<std::size_t>(c.loops));
      for (Index l = 0; l < c.loops; ++l) {
        for (Index i = 0; i < c.middle_layers; ++i) {
          LoraLayer<double> layer;
          for (std::size_t p = 0; p < dims.size(); ++p) {
            layer.a[p] = Tensor<double>::zeros({dims[p].first, c.lora_rank}, true);
            layer.b[p] = normal_leaf<double>(c, lora_prefix(l, i, p) + ".b", {c.lora_rank, dims[p].second}, kInitStd);
          }
          m.lora[static_cast<std::size_t>(l)].push_back(std::move(layer));
        }
      }
    }
    return m;
  }
}

template <typename To, typename From>
Model<To> convert_model(const Model<From>& src) {
  auto conv = [](const Tensor<From>& t) {
    if (!t.defined()) return Tensor<To>();
    std::vector<To> v(t.data().begin(), t.data().end());
    return Tensor<To>::from_vector(t.shape(), std::move(v), true);
  };
  auto conv_layer = [&](const LayerParams<From>& l) {
    LayerParams<To> o;
    o.attn = {l.attn.prefix, conv(l.attn.wq), conv(l.attn.wk), conv(l.attn.wv), conv(l.attn.wo), conv(l.attn.norm)};
    o.mlp = {l.mlp.prefix, conv(l.mlp.w_gate), conv(l.mlp.w_up), conv(l.mlp.w_down), conv(l.mlp.norm)};
    return o;
  };
  Model<To> m;
  m.config = src.config;
  m.embedding = {conv(src.embedding.tokens), conv(src.embedding.unembed), conv(src.embedding.final_norm)};
  for (const auto& l : src.begin) m.begin.push_back(conv_layer(l));
  for (const auto& l : src.middle) m.middle.push_back(conv_layer(l));
  for (const auto& l : src.end) m.end.push_back(conv_layer(l));
  for (const auto& h : src.hc) {
    HyperConnectionParams<To> o;
    o.prefix = h.prefix;
    o.mode = h.mode;
    o.streams = h.streams;
    o.dim = h.dim;
    o.w_pre = conv(h.w_pre), o.b_pre = conv(h.b_pre), o.alpha_pre = conv(h.alpha_pre);
    o.w_post = conv(h.w_post), o.b_post = conv(h.b_post), o.alpha_post = conv(h.alpha_post);
    o.w_res = conv(h.w_res), o.b_res = conv(h.b_res), o.alpha_res = conv(h.alpha_res);
    o.norm = conv(h.norm);
    o.loop_embedding = conv(h.loop_embedding);
    m.hc.push_back(std::move(o));
  }
  for (const auto& loop : src.lora) {
    std::vector<LoraLayer<To>> layers;
    for (const auto& l : loop) {
      LoraLayer<To> o;
      for (std::size_t p = 0; p < l.a.size(); ++p) o.a[p] = conv(l.a[p]), o.b[p] = conv(l.b[p]);
      layers.push_back(std::move(o));
    }
    m.lora.push_back(std::move(layers));
  }
  return m;
}

Index loop_of_effective_layer(const ModelConfig& c, Index d) {
  if (d <= c.begin_layers || d > c.begin_layers + c.middle_layers * c.loops) return -1;
  return (d - c.begin_layers - 1) / c.middle_layers;
}

namespace {

template <typename T>
struct Runner {
  const Model<T>& model;
  const ForwardOptions<T>& options;
  ActivationTrace<T>* trace;
  AttentionShape shape;

  void record(const Tensor<T>& inner, const Tensor<T>& outer, bool boundary) {
    if (!trace) return;
    trace->inner.push_back(inner);
    trace->outer.push_back(outer);
    trace->loop_boundary.push_back(boundary);
  }

  LinearObserver<T> observer_for(Index loop) const {
    if (!options.observer) return {};
    return [this, loop](const std::string& name, const Tensor<T>& x) { options.observer(name, loop, x); };
  }

  LayerParams<T> effective_middle(Index layer, Index loop) const {
    const auto& base = model.middle[static_cast<std::size_t>(layer)];
    if (model.lora.empty()) return base;
    const auto& ad = model.lora[static_cast<std::size_t>(loop)][static_cast<std::size_t>(layer)];
    auto delta = [&](const Tensor<T>& w, std::size_t p) { return add(w, matmul(ad.a[p], ad.b[p])); };
    LayerParams<T> l = base;
    l.attn.wq = delta(base.attn.wq, 0);
    l.attn.wk = delta(base.attn.wk, 1);
    l.attn.wv = delta(base.attn.wv, 2);
    l.attn.wo = delta(base.attn.wo, 3);
    l.mlp.w_gate = delta(base.mlp.w_gate, 4);
    l.mlp.w_up = delta(base.mlp.w_up, 5);
    l.mlp.w_down = delta(base.mlp.w_down, 6);
    return l;
  }

  Tensor<T> layer(const Tensor<T>& x, const LayerParams<T>& p, Index loop) const {
    const auto obs = observer_for(loop);
    return transformer_layer(x, p.attn, p.mlp, shape, obs ? &obs : nullptr);
  }

  MixMatrices<T> mix_for(const StreamState<T>& y, const HyperConnectionParams<T>& p) const {
    return options.hc_identity ? identity_mix(y) : compute_mix(y, p);
  }

  const Tensor<T>* embedding_for(const HyperConnectionParams<T>& p) const {
    return options.hc_identity || !p.has_loop_embedding() ? nullptr : &p.loop_embedding;
  }

  Tensor<T> plain_block(Tensor<T> x, const std::vector<LayerParams<T>>& layers) {
    for (const auto& l : layers) {
      x = layer(x, l, 0);
      record(x, x, false);
    }
    return x;
  }

  Tensor<T> looped_middle(Tensor<T> x) {
    const auto& c = model.config;
    for (Index l = 0; l < c.loops; ++l) {
      for (Index i = 0; i < c.middle_layers; ++i) {
        x = layer(x, effective_middle(i, l), l);
        record(x, x, c.shares_middle() && i + 1 == c.middle_layers);
      }
    }
    return x;
  }

  Tensor<T> hyperloop_middle(const Tensor<T>& x) {
    const auto& c = model.config;
    StreamState<T> y = expand(x, c.streams);
    const auto sites = hc_sites(c);
    for (std::size_t s = 0; s < sites.size(); ++s) {
      const auto& p = model.hc[s];
      if (trace) trace->streams.push_back(y);
      const auto mix = mix_for(y, p);
      const Tensor<T>* e = embedding_for(p);
      const auto x_in = hc_read(y, mix);
      Tensor<T> h = x_in;
      for (Index u = sites[s].first; u < sites[s].last; ++u) {
        const Index loop = u / c.middle_layers;
        h = layer(h, model.middle[static_cast<std::size_t>(u % c.middle_layers)], loop);
        if (trace && u + 1 < sites[s].last) {
          record(h, merge(hc_write(y, mix, sub(h, x_in), e)), (u + 1) % c.middle_layers == 0);
        }
      }
      y = hc_write(y, mix, sub(h, x_in), e);
      if (trace) record(h, merge(y), sites[s].last % c.middle_layers == 0);
    }
    if (trace) trace->streams.push_back(y);
    return merge(y);
  }

  Tensor<T> mhc_all(const Tensor<T>& x) {
    const auto& c = model.config;
    StreamState<T> y = expand(x, c.streams);
    std::vector<const LayerParams<T>*> layers;
    for (const auto& l : model.begin) layers.push_back(&l);
    for (const auto& l : model.middle) layers.push_back(&l);
    for (const auto& l : model.end) layers.push_back(&l);
    const auto obs = observer_for(0);
    const LinearObserver<T>* obs_ptr = obs ? &obs : nullptr;
    for (std::size_t d = 0; d < layers.size(); ++d) {
      const auto& lp = *layers[d];
      if (trace) trace->streams.push_back(y);
      std::function<Tensor<T>(const Tensor<T>&)> attn = [&](const Tensor<T>& in) {
        return attention(in, lp.attn, shape, obs_ptr);
      };
      std::function<Tensor<T>(const Tensor<T>&)> ffn = [&](const Tensor<T>& in) { return mlp(in, lp.mlp, obs_ptr); };
      y = hc_apply(y, mix_for(y, model.hc[2 * d]), attn, static_cast<const Tensor<T>*>(nullptr));
      y = hc_apply(y, mix_for(y, model.hc[2 * d + 1]), ffn, static_cast<const Tensor<T>*>(nullptr));
      if (trace) {
        auto merged = merge(y);
        record(merged, merged, false);
      }
    }
    if (trace) trace->streams.push_back(y);
    return merge(y);
  }
};

}  // namespace

template <typename T>
Tensor<T> forward(const Model<T>& model, std::span<const std::int32_t> tokens, const Shape& token_shape,
                  const ForwardOptions<T>& options, ActivationTrace<T>* trace) {
  const auto& c = model.config;
  if (token_shape.empty() || token_shape.size() > 2 || numel(token_shape) != static_cast<Index>(tokens.size())) {
    throw DimensionError("forward: token shape " + to_string(token_shape) + " does not match " +
                         std::to_string(tokens.size()) + " tokens");
  }
  const Index t_len = token_shape.back();
  if (t_len < 1 || t_len > c.max_seq_len) {
    throw InputError("forward: sequence length " + std::to_string(t_len) + " outside [1, " +
                     std::to_string(c.max_seq_len) + "]");
  }
  if (trace) *trace = {};
  Runner<T> run{model, options, trace, AttentionShape{static_cast<int>(c.head_count), c.rope_base}};

  Tensor<T> x = embedding(model.embedding.tokens, tokens, token_shape);
  run.record(x, x, false);
  if (c.arch_kind == ArchKind::mhc) {
    x = run.mhc_all(x);
  } else {
    x = run.plain_block(x, model.begin);
    x = c.arch_kind == ArchKind::hyperloop ? run.hyperloop_middle(x) : run.looped_middle(x);
    x = run.plain_block(x, model.end);
  }
  return lm_head(x, model.embedding);
}

template <typename T>
Tensor<T> lm_loss(const Model<T>& model, std::span<const std::int32_t> inputs, std::span<const std::int32_t> targets,
                  const Shape& token_shape, const ForwardOptions<T>& options) {
  return cross_entropy(forward(model, inputs, token_shape, options), targets);
}

#define HYPERLOOP_INSTANTIATE_MODEL(T)                                                                          \
  template struct Model<T>;                                                                                     \
  template Model<T> build_model(const ModelConfig&);                                                            \
  template Tensor<T> forward(const Model<T>&, std::span<const std::int32_t>, const Shape&,                      \
                             const ForwardOptions<T>&, ActivationTrace<T>*);                                    \
  template Tensor<T> lm_loss(const Model<T>&, std::span<const std::int32_t>, std::span<const std::int32_t>,     \
                             const Shape&, const ForwardOptions<T>&);

HYPERLOOP_INSTANTIATE_MODEL(float)
HYPERLOOP_INSTANTIATE_MODEL(double)
template Model<float> convert_model(const Model<double>&);
template Model<double> convert_model(const Model<float>&);
template Model<double> convert_model(const Model<double>&);
template Model<float> convert_model(const Model<float>&);

}  // namespace hyperloop
