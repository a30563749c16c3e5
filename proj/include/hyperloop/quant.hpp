#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "hyperloop/checkpoint.hpp"
#include "hyperloop/model.hpp"
#include "hyperloop/train.hpp"

namespace hyperloop {

/// Weight-only group quantization of a [rows = out, cols = in] matrix.
/// Groups run along each row; dequantized value = (code - zero) * scale.
struct QuantizedLinear {
  int bits = 4;
  Index rows = 0;
  Index cols = 0;
  Index group_size = 32;
  std::vector<std::uint8_t> packed;  // int4: two codes per byte, low nibble = even column
  std::vector<float> scales;         // [rows, groups]
  std::vector<std::uint8_t> zeros;   // [rows, groups]

  Index groups() const { return (cols + group_size - 1) / group_size; }
  int max_code() const { return (1 << bits) - 1; }
  std::uint8_t code(Index r, Index c) const;
  Eigen::MatrixXd dequantize() const;
};

std::vector<std::uint8_t> pack_int4(std::span<const std::uint8_t> codes, Index rows, Index cols);
std::vector<std::uint8_t> unpack_int4(std::span<const std::uint8_t> packed, Index rows, Index cols);

struct GroupGrid {
  float scale = 1.0f;
  std::uint8_t zero = 0;
};

/// Asymmetric min-max grid over a range widened to contain 0.
/// An all-equal group c gets scale |c| so that it dequantizes exactly.
GroupGrid fit_group(std::span<const double> values, int bits);
std::uint8_t quantize_code(double value, const GroupGrid& grid, int bits);

QuantizedLinear rtn_quantize(const Eigen::MatrixXd& weight, Index group_size, int bits = 4);

struct GptqResult {
  QuantizedLinear layer;
  bool fell_back = false;  // Cholesky failed; layer is RTN
};

/// Column-sequential GPTQ with error propagation through the upper Cholesky factor
/// of the dampened inverse Hessian. Group grids are fitted from the updated weights
/// when each group starts.
GptqResult gptq_quantize(const Eigen::MatrixXd& weight, const Eigen::MatrixXd& hessian, Index group_size, int bits = 4,
                         double damp = 0.01);

/// sum over calibration inputs of ||(W - W_hat) x||^2 = 0.5 * tr(D H D^T) with H = sum 2 x x^T.
double calibration_loss(const Eigen::MatrixXd& weight, const Eigen::MatrixXd& dequantized,
                        const Eigen::MatrixXd& hessian);

struct HessianAccumulator {
  Eigen::MatrixXd h;
  Index samples = 0;

  void add(std::span<const float> rows, Index dim);
};

struct HessianSet {
  /// Per weight name; a looped layer accumulates inputs from every loop.
  std::map<std::string, HessianAccumulator> aggregated;
  /// Per (weight name, loop index), only when requested.
  std::map<std::pair<std::string, Index>, HessianAccumulator> per_loop;
};

/// Runs `windows` calibration windows of `bytes` through the model and accumulates
/// the input Hessian of every attention/MLP projection.
HessianSet collect_hessians(const Model<float>& model, std::span<const std::uint8_t> bytes, Index seq_len,
                            std::span<const Index> windows, bool keep_per_loop = false, Index batch_size = 8);

/// Names of every quantized projection weight ([in, out] tensors in the model).
std::vector<std::string> projection_weights(const ModelConfig& config);

enum class QuantMethod { rtn, gptq };

struct QuantizeConfig {
  int bits = 4;
  Index group_size = 32;
  QuantMethod method = QuantMethod::gptq;
  Index calibration_sequences = 64;
  double damp = 0.01;
};

struct LayerReport {
  std::string name;
  double rtn_loss = 0;
  double gptq_loss = 0;
  bool fell_back = false;
};

struct QuantizedModel {
  QuantizeConfig config;
  std::map<std::string, QuantizedLinear> layers;
  std::vector<LayerReport> report;
};

/// Quantizes every projection of `model` using calibration windows from the training split.
QuantizedModel quantize_model(const Model<float>& model, const TokenStream& data, Index seq_len,
                              const QuantizeConfig& config);

/// Copy of `model` with every quantized projection replaced by its dequantized value.
Model<float> apply_quantization(const Model<float>& model, const QuantizedModel& quantized);

Checkpoint make_quantized_checkpoint(const Model<float>& model, const TrainConfig& train,
                                     const QuantizedModel& quantized);
/// Loads either a float or a quantized checkpoint; quantized weights are dequantized.
LoadedRun load_any_checkpoint(const std::filesystem::path& path);

}  // namespace hyperloop
