#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "hyperloop/model.hpp"

namespace hyperloop {

/// Windows of held-out bytes fed to the analyses: the first `max_windows`
/// non-overlapping windows of length seq_len (all of them when 0).
struct AnalysisData {
  std::span<const std::uint8_t> bytes;
  Index seq_len = 64;
  Index max_windows = 0;
  Index batch_size = 8;
};

/// Per effective layer d in [0, D), D = unrolled depth + 1; d = 0 is the embedding output.
struct LensReport {
  std::vector<double> cross_entropy;
  std::vector<double> entropy;
  std::vector<double> accuracy;
  std::vector<bool> loop_boundary;
  Index tokens = 0;

  Index depth() const { return static_cast<Index>(cross_entropy.size()); }
};

struct SimilarityReport {
  Index depth = 0;
  std::vector<double> matrix;  // [depth, depth], row-major
  std::vector<bool> loop_boundary;
  /// Mean similarity of corresponding middle layers across loop iterations; empty without loops.
  std::optional<double> cross_loop;
  Index zero_norm_pairs = 0;
  Index tokens = 0;

  double at(Index i, Index j) const { return matrix[static_cast<std::size_t>(i * depth + j)]; }
};

/// Decodes the outer residual stream at every effective layer through the final norm and unembedding.
template <typename T>
LensReport logit_lens(const Model<T>& model, const AnalysisData& data);

/// Token-averaged cosine similarity between the inner residual streams of every pair of effective layers.
template <typename T>
SimilarityReport cosine_map(const Model<T>& model, const AnalysisData& data);

/// Effective-layer indices (into the D trace points) of middle layer i at loop l.
Index middle_point(const ModelConfig& config, Index loop, Index layer);

/// Writes lens_cross_entropy.csv, lens_entropy.csv and lens_accuracy.csv into `dir`,
/// each with header "layer,value,loop_boundary".
void emit_plotdata(const LensReport& report, const std::filesystem::path& dir);
/// Writes similarity.csv ("layer_i,layer_j,value", all D*D pairs) and
/// similarity_summary.csv ("metric,value") into `dir`.
void emit_plotdata(const SimilarityReport& report, const std::filesystem::path& dir);

LensReport read_lens_plotdata(const std::filesystem::path& dir);
SimilarityReport read_similarity_plotdata(const std::filesystem::path& dir);

}  // namespace hyperloop
