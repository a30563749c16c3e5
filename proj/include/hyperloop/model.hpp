#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hyperloop/config.hpp"
#include "hyperloop/hyperconn.hpp"
#include "hyperloop/nn.hpp"
#include "hyperloop/tensor.hpp"

namespace hyperloop {

inline constexpr double kInitStd = 0.02;

struct ParamSpec {
  std::string name;
  Shape shape;
};

enum class ParamGroup { embeddings, begin, middle, end, hyperconn, lora };

std::string_view to_string(ParamGroup group);
ParamGroup group_of(std::string_view name);
/// Norm weights, biases, alphas and loop embeddings are excluded from weight decay.
bool decays(std::string_view name);

/// A run of unrolled middle layers [first, last) wrapped by one hyper-connection.
struct HcSite {
  Index first = 0;
  Index last = 0;
  bool loop_end = false;  // owns a loop embedding
};

std::vector<HcSite> hc_sites(const ModelConfig& config);

/// Every parameter tensor the model owns, in storage order, without allocating.
std::vector<ParamSpec> parameter_manifest(const ModelConfig& config);

struct ParamCount {
  Index total = 0;
  Index embeddings = 0;  // token embedding + unembedding + final norm
  Index begin = 0;
  Index middle = 0;
  Index end = 0;
  Index hyperconn = 0;
  Index lora = 0;
  Index token_embedding = 0;
  Index hyperconn_norm = 0;  // the flatten-norm weights inside `hyperconn`
  Index hc_sites = 0;
  Index unrolled_depth = 0;

  /// Everything except the input token table.
  Index without_token_embedding() const { return total - token_embedding; }
  /// Blocks and hyper-connections only.
  Index non_embedding() const { return total - embeddings; }
  Index hyperconn_without_norm() const { return hyperconn - hyperconn_norm; }
};

/// Closed-form count from the config alone.
ParamCount count_params(const ModelConfig& config);

template <typename T>
struct LayerParams {
  AttentionParams<T> attn;
  MlpParams<T> mlp;
};

inline constexpr std::array<const char*, 7> kProjectionNames{"wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down"};

/// Low-rank per-loop delta a * b for each projection of one middle layer, in kProjectionNames order.
template <typename T>
struct LoraLayer {
  std::array<Tensor<T>, 7> a;  // [in, r], zero at init
  std::array<Tensor<T>, 7> b;  // [r, out]
};

template <typename T>
struct Model {
  ModelConfig config;
  EmbeddingParams<T> embedding;
  std::vector<LayerParams<T>> begin, middle, end;
  /// hyperloop: one per site; mhc: attention then MLP site for each layer.
  std::vector<HyperConnectionParams<T>> hc;
  std::vector<std::vector<LoraLayer<T>>> lora;  // [loop][middle layer]

  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const;
  Index parameter_count() const;
};

/// Deterministic in config.seed. Values are generated in double, so float and
/// double builds of one config hold the same numbers up to rounding.
template <typename T>
Model<T> build_model(const ModelConfig& config);

/// Value copy into another scalar type; the copy owns fresh storage.
template <typename To, typename From>
Model<To> convert_model(const Model<From>& model);

template <typename T>
using ProjectionObserver = std::function<void(const std::string& weight, Index loop, const Tensor<T>& input)>;

template <typename T>
struct ForwardOptions {
  /// Replace every hyper-connection by pre = 1/n, post = 1, res = I and drop loop embeddings.
  bool hc_identity = false;
  ProjectionObserver<T> observer;
};

/// Per effective layer d in [0, unrolled_depth]: `inner` is the running
/// residual of the layer computation; `outer` is what a lens decodes (the
/// merged outer stream, early-written for positions inside a hyper-connection site).
template <typename T>
struct ActivationTrace {
  std::vector<Tensor<T>> inner;
  std::vector<Tensor<T>> outer;
  std::vector<bool> loop_boundary;
  /// Outer stream entering each hyper-connection site, then the final state.
  std::vector<StreamState<T>> streams;
};

/// tokens is [T] or [B, T] flattened row-major; returns logits [..., T, V].
template <typename T>
Tensor<T> forward(const Model<T>& model, std::span<const std::int32_t> tokens, const Shape& token_shape,
                  const ForwardOptions<T>& options = {}, ActivationTrace<T>* trace = nullptr);

/// Mean next-token cross-entropy of forward(inputs) against `targets`.
template <typename T>
Tensor<T> lm_loss(const Model<T>& model, std::span<const std::int32_t> inputs, std::span<const std::int32_t> targets,
                  const Shape& token_shape, const ForwardOptions<T>& options = {});

/// Loop index l in [0, L) and position within the loop for effective layer d, or -1 outside the middle block.
Index loop_of_effective_layer(const ModelConfig& config, Index d);

}  // namespace hyperloop
