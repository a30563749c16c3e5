#include "hyperloop/analyze.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <Eigen/Dense>

#include "hyperloop/error.hpp"
#include "hyperloop/nn.hpp"
#include "hyperloop/train.hpp"

namespace hyperloop {

namespace {

std::vector<std::vector<Index>> window_batches(const AnalysisData& data) {
  Index windows = window_count(data.bytes, data.seq_len);
  if (data.max_windows > 0) windows = std::min(windows, data.max_windows);
  if (windows < 1) {
    throw InputError("analysis data holds no complete window of " + std::to_string(data.seq_len) + " bytes");
  }
  std::vector<std::vector<Index>> out;
  for (Index start = 0; start < windows; start += data.batch_size) {
    auto& ids = out.emplace_back();
    for (Index w = start; w < std::min(windows, start + data.batch_size); ++w) ids.push_back(w);
  }
  return out;
}

template <typename T>
ActivationTrace<T> traced(const Model<T>& model, const Batch& batch) {
  ActivationTrace<T> trace;
  forward(model, batch.inputs, batch.shape, {}, &trace);
  return trace;
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::error_code ec;
  std::filesystem::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

void close_out(std::ofstream& out, const std::filesystem::path& path) {
  out.close();
  if (!out) throw IoError("failed writing " + path.string());
}

std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path, const std::string& header) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != header) throw IoError(path.string() + ": expected header \"" + header + "\"");
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto& row = rows.emplace_back();
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(cell);
  }
  return rows;
}

double parse_double(const std::string& s, const std::filesystem::path& path) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw IoError(path.string() + ": bad number \"" + s + "\"");
}

}  // namespace

Index middle_point(const ModelConfig& c, Index loop, Index layer) {
  return c.begin_layers + loop * c.middle_layers + layer + 1;
}

template <typename T>
LensReport logit_lens(const Model<T>& model, const AnalysisData& data) {
  NoGradGuard no_grad;
  const Index vocab = model.config.vocab_size;
  LensReport r;
  for (const auto& ids : window_batches(data)) {
    const auto batch = make_batch(data.bytes, ids, data.seq_len);
    const auto trace = traced(model, batch);
    const auto depth = trace.outer.size();
    if (r.cross_entropy.empty()) {
      r.cross_entropy.assign(depth, 0.0);
      r.entropy.assign(depth, 0.0);
      r.accuracy.assign(depth, 0.0);
      r.loop_boundary = trace.loop_boundary;
    }
    for (std::size_t d = 0; d < depth; ++d) {
      const auto logits = lm_head(trace.outer[d], model.embedding);
      const auto v = logits.data();
      for (std::size_t t = 0; t < batch.targets.size(); ++t) {
        const auto row = v.subspan(t * static_cast<std::size_t>(vocab), static_cast<std::size_t>(vocab));
        double mx = -INFINITY;
        std::size_t arg = 0;
        for (std::size_t k = 0; k < row.size(); ++k) {
          if (static_cast<double>(row[k]) > mx) {
            mx = static_cast<double>(row[k]);
            arg = k;
          }
        }
        double z = 0.0, weighted = 0.0;
        for (const auto x : row) {
          const double s = static_cast<double>(x) - mx;
          const double e = std::exp(s);
          z += e;
          weighted += e * s;
        }
        const double log_z = std::log(z);
        const auto target = static_cast<std::size_t>(batch.targets[t]);
        r.cross_entropy[d] += log_z - (static_cast<double>(row[target]) - mx);
        r.entropy[d] += std::max(0.0, log_z - weighted / z);
        r.accuracy[d] += arg == target ? 1.0 : 0.0;
      }
    }
    r.tokens += static_cast<Index>(batch.targets.size());
  }
  const double n = static_cast<double>(r.tokens);
  for (std::size_t d = 0; d < r.cross_entropy.size(); ++d) {
    r.cross_entropy[d] /= n;
    r.entropy[d] /= n;
    r.accuracy[d] /= n;
  }
  return r;
}

template <typename T>
SimilarityReport cosine_map(const Model<T>& model, const AnalysisData& data) {
  NoGradGuard no_grad;
  const auto& c = model.config;
  SimilarityReport r;
  std::vector<double> sums;
  for (const auto& ids : window_batches(data)) {
    const auto batch = make_batch(data.bytes, ids, data.seq_len);
    const auto trace = traced(model, batch);
    const auto depth = static_cast<Index>(trace.inner.size());
    if (sums.empty()) {
      r.depth = depth;
      r.loop_boundary = trace.loop_boundary;
      sums.assign(static_cast<std::size_t>(depth * depth), 0.0);
    }
    const Index dim = c.model_dim;
    const Index tokens = static_cast<Index>(batch.targets.size());
    std::vector<Eigen::MatrixXd> xs;
    std::vector<Eigen::VectorXd> norms;
    for (const auto& t : trace.inner) {
      Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(t.data().data(), tokens,
                                                                                             dim);
      xs.push_back(m.template cast<double>());
      norms.push_back(xs.back().rowwise().norm());
    }
    for (Index i = 0; i < depth; ++i) {
      for (Index j = i + 1; j < depth; ++j) {
        const Eigen::VectorXd dots = xs[i].cwiseProduct(xs[j]).rowwise().sum();
        double acc = 0.0;
        for (Index t = 0; t < tokens; ++t) {
          const double denom = norms[i](t) * norms[j](t);
          if (denom == 0.0) {
            ++r.zero_norm_pairs;
            continue;
          }
          acc += std::clamp(dots(t) / denom, -1.0, 1.0);
        }
        sums[static_cast<std::size_t>(i * depth + j)] += acc;
      }
    }
    r.tokens += tokens;
  }
  r.matrix.assign(sums.size(), 0.0);
  const double n = static_cast<double>(r.tokens);
  for (Index i = 0; i < r.depth; ++i) {
    r.matrix[static_cast<std::size_t>(i * r.depth + i)] = 1.0;
    for (Index j = i + 1; j < r.depth; ++j) {
      const double v = sums[static_cast<std::size_t>(i * r.depth + j)] / n;
      r.matrix[static_cast<std::size_t>(i * r.depth + j)] = v;
      r.matrix[static_cast<std::size_t>(j * r.depth + i)] = v;
    }
  }
  if (r.zero_norm_pairs > 0) {
    std::cerr << "warning: cosine_map: " << r.zero_norm_pairs << " zero-norm token pairs counted as similarity 0\n";
  }
  if (c.loops > 1 && c.arch_kind != ArchKind::mhc && c.arch_kind != ArchKind::vanilla) {
    double total = 0.0;
    Index pairs = 0;
    for (Index i = 0; i < c.middle_layers; ++i)
      for (Index l = 0; l < c.loops; ++l)
        for (Index l2 = l + 1; l2 < c.loops; ++l2) {
          total += r.at(middle_point(c, l, i), middle_point(c, l2, i));
          ++pairs;
        }
    r.cross_loop = total / static_cast<double>(pairs);
  }
  return r;
}

void emit_plotdata(const LensReport& report, const std::filesystem::path& dir) {
  const std::pair<const char*, const std::vector<double>*> metrics[] = {
      {"lens_cross_entropy.csv", &report.cross_entropy},
      {"lens_entropy.csv", &report.entropy},
      {"lens_accuracy.csv", &report.accuracy}};
  for (const auto& [file, values] : metrics) {
    const auto path = dir / file;
    auto out = open_out(path);
    out << "layer,value,loop_boundary\n";
    for (std::size_t d = 0; d < values->size(); ++d) {
      out << d << ',' << format_double((*values)[d]) << ',' << (report.loop_boundary[d] ? 1 : 0) << '\n';
    }
    close_out(out, path);
  }
}

void emit_plotdata(const SimilarityReport& report, const std::filesystem::path& dir) {
  const auto path = dir / "similarity.csv";
  auto out = open_out(path);
  out << "layer_i,layer_j,value\n";
  for (Index i = 0; i < report.depth; ++i)
    for (Index j = 0; j < report.depth; ++j) out << i << ',' << j << ',' << format_double(report.at(i, j)) << '\n';
  close_out(out, path);

  const auto summary_path = dir / "similarity_summary.csv";
  auto summary = open_out(summary_path);
  summary << "metric,value\n";
  summary << "cross_loop," << (report.cross_loop ? format_double(*report.cross_loop) : "") << '\n';
  summary << "zero_norm_pairs," << report.zero_norm_pairs << '\n';
  summary << "tokens," << report.tokens << '\n';
  std::string boundaries;
  for (std::size_t d = 0; d < report.loop_boundary.size(); ++d) {
    if (report.loop_boundary[d]) boundaries += (boundaries.empty() ? "" : " ") + std::to_string(d);
  }
  summary << "loop_boundaries," << boundaries << '\n';
  close_out(summary, summary_path);
}

LensReport read_lens_plotdata(const std::filesystem::path& dir) {
  LensReport r;
  const std::pair<const char*, std::vector<double>*> metrics[] = {{"lens_cross_entropy.csv", &r.cross_entropy},
                                                                  {"lens_entropy.csv", &r.entropy},
                                                                  {"lens_accuracy.csv", &r.accuracy}};
  for (const auto& [file, values] : metrics) {
    const auto path = dir / file;
    const auto rows = read_csv(path, "layer,value,loop_boundary");
    std::vector<bool> flags;
    for (std::size_t d = 0; d < rows.size(); ++d) {
      const auto& row = rows[d];
      if (row.size() != 3 || row[0] != std::to_string(d) || (row[2] != "0" && row[2] != "1")) {
        throw IoError(path.string() + ": malformed row " + std::to_string(d + 2));
      }
      values->push_back(parse_double(row[1], path));
      flags.push_back(row[2] == "1");
    }
    if (r.loop_boundary.empty()) r.loop_boundary = flags;
    if (flags != r.loop_boundary) throw IoError(path.string() + ": loop boundaries disagree with other metrics");
  }
  return r;
}

SimilarityReport read_similarity_plotdata(const std::filesystem::path& dir) {
  SimilarityReport r;
  const auto path = dir / "similarity.csv";
  const auto rows = read_csv(path, "layer_i,layer_j,value");
  r.depth = static_cast<Index>(std::llround(std::sqrt(static_cast<double>(rows.size()))));
  if (r.depth * r.depth != static_cast<Index>(rows.size())) throw IoError(path.string() + ": not a square map");
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k].size() != 3) throw IoError(path.string() + ": malformed row " + std::to_string(k + 2));
    r.matrix.push_back(parse_double(rows[k][2], path));
  }
  const auto summary_path = dir / "similarity_summary.csv";
  for (const auto& row : read_csv(summary_path, "metric,value")) {
    const std::string value = row.size() > 1 ? row[1] : "";
    if (row[0] == "cross_loop" && !value.empty()) r.cross_loop = parse_double(value, summary_path);
    if (row[0] == "zero_norm_pairs") r.zero_norm_pairs = std::stoll(value);
    if (row[0] == "tokens") r.tokens = std::stoll(value);
    if (row[0] == "loop_boundaries") {
      r.loop_boundary.assign(static_cast<std::size_t>(r.depth), false);
      std::stringstream ss(value);
      Index d;
      while (ss >> d) r.loop_boundary.at(static_cast<std::size_t>(d)) = true;
    }
  }
  return r;
}

template LensReport logit_lens(const Model<float>&, const AnalysisData&);
template LensReport logit_lens(const Model<double>&, const AnalysisData&);
template SimilarityReport cosine_map(const Model<float>&, const AnalysisData&);
template SimilarityReport cosine_map(const Model<double>&, const AnalysisData&);

}  // namespace hyperloop
