#include "hyperloop/quant.hpp"

#include <cmath>
#include <iostream>

#include "hyperloop/error.hpp"

namespace hyperloop {

std::vector<std::uint8_t> pack_int4(std::span<const std::uint8_t> codes, Index rows, Index cols) {
  const Index stride = (cols + 1) / 2;
  std::vector<std::uint8_t> out(static_cast<std::size_t>(rows * stride), 0);
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) {
      const std::uint8_t q = codes[static_cast<std::size_t>(r * cols + c)];
      if (q > 15) throw ContractError("pack_int4: code " + std::to_string(q) + " does not fit in 4 bits");
      auto& byte = out[static_cast<std::size_t>(r * stride + c / 2)];
      byte = static_cast<std::uint8_t>(c % 2 == 0 ? (byte & 0xF0) | q : (byte & 0x0F) | (q << 4));
    }
  }
  return out;
}

std::vector<std::uint8_t> unpack_int4(std::span<const std::uint8_t> packed, Index rows, Index cols) {
  const Index stride = (cols + 1) / 2;
  std::vector<std::uint8_t> out(static_cast<std::size_t>(rows * cols));
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) {
      const std::uint8_t byte = packed[static_cast<std::size_t>(r * stride + c / 2)];
      out[static_cast<std::size_t>(r * cols + c)] = c % 2 == 0 ? (byte & 0x0F) : (byte >> 4);
    }
  }
  return out;
}

std::uint8_t QuantizedLinear::code(Index r, Index c) const {
  if (bits == 4) {
    const std::uint8_t byte = packed[static_cast<std::size_t>(r * ((cols + 1) / 2) + c / 2)];
    return c % 2 == 0 ? (byte & 0x0F) : (byte >> 4);
  }
  return packed[static_cast<std::size_t>(r * cols + c)];
}

Eigen::MatrixXd QuantizedLinear::dequantize() const {
  Eigen::MatrixXd out(rows, cols);
  const Index g = groups();
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) {
      const auto gi = static_cast<std::size_t>(r * g + c / group_size);
      out(r, c) = (static_cast<double>(code(r, c)) - static_cast<double>(zeros[gi])) * static_cast<double>(scales[gi]);
    }
  }
  return out;
}

GroupGrid fit_group(std::span<const double> values, int bits) {
  const double maxq = static_cast<double>((1 << bits) - 1);
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double vmin = *lo_it, vmax = *hi_it;
  if (vmin == vmax) {
    if (vmin == 0.0) return {1e-8f, 0};
    return {static_cast<float>(std::abs(vmin)), static_cast<std::uint8_t>(vmin < 0.0 ? 1 : 0)};
  }
  const double lo = std::min(vmin, 0.0);
  const double hi = std::max(vmax, 0.0);
  GroupGrid g;
  g.scale = static_cast<float>((hi - lo) / maxq);
  const double z = std::round(-lo / static_cast<double>(g.scale));
  g.zero = static_cast<std::uint8_t>(std::clamp(z, 0.0, maxq));
  return g;
}

std::uint8_t quantize_code(double value, const GroupGrid& grid, int bits) {
  const double maxq = static_cast<double>((1 << bits) - 1);
  const double q = std::round(value / static_cast<double>(grid.scale)) + static_cast<double>(grid.zero);
  return static_cast<std::uint8_t>(std::clamp(q, 0.0, maxq));
}

namespace {

double dequant(std::uint8_t code, const GroupGrid& g) {
  return (static_cast<double>(code) - static_cast<double>(g.zero)) * static_cast<double>(g.scale);
}

QuantizedLinear empty_layer(Index rows, Index cols, Index group_size, int bits) {
  if (bits != 4 && bits != 8) throw ConfigError("bits must be 4 or 8, got " + std::to_string(bits));
  if (group_size < 1) throw ConfigError("group_size must be >= 1");
  QuantizedLinear q;
  q.bits = bits;
  q.rows = rows;
  q.cols = cols;
  q.group_size = std::min(group_size, cols);
  q.scales.assign(static_cast<std::size_t>(rows * q.groups()), 0.0f);
  q.zeros.assign(q.scales.size(), 0);
  return q;
}

void finish_codes(QuantizedLinear& q, const std::vector<std::uint8_t>& codes) {
  q.packed = q.bits == 4 ? pack_int4(codes, q.rows, q.cols) : codes;
}

}  // namespace

QuantizedLinear rtn_quantize(const Eigen::MatrixXd& w, Index group_size, int bits) {
  auto q = empty_layer(w.rows(), w.cols(), group_size, bits);
  std::vector<std::uint8_t> codes(static_cast<std::size_t>(w.size()));
  std::vector<double> buf;
  for (Index r = 0; r < w.rows(); ++r) {
    for (Index g = 0; g < q.groups(); ++g) {
      const Index c0 = g * q.group_size;
      const Index c1 = std::min(c0 + q.group_size, w.cols());
      buf.clear();
      for (Index c = c0; c < c1; ++c) buf.push_back(w(r, c));
      const auto grid = fit_group(buf, bits);
      const auto gi = static_cast<std::size_t>(r * q.groups() + g);
      q.scales[gi] = grid.scale;
      q.zeros[gi] = grid.zero;
      for (Index c = c0; c < c1; ++c) codes[static_cast<std::size_t>(r * w.cols() + c)] = quantize_code(w(r, c), grid, bits);
    }
  }
  finish_codes(q, codes);
  return q;
}

GptqResult gptq_quantize(const Eigen::MatrixXd& weight, const Eigen::MatrixXd& hessian, Index group_size, int bits,
                         double damp) {
  const Index rows = weight.rows();
  const Index cols = weight.cols();
  if (hessian.rows() != cols || hessian.cols() != cols) {
    throw DimensionError("gptq: Hessian is " + std::to_string(hessian.rows()) + "x" + std::to_string(hessian.cols()) +
                         " for " + std::to_string(cols) + " input columns");
  }
  Eigen::MatrixXd w = weight;
  Eigen::MatrixXd h = hessian;
  for (Index i = 0; i < cols; ++i) {
    if (h(i, i) == 0.0) {
      h(i, i) = 1.0;
      w.col(i).setZero();
    }
  }
  h.diagonal().array() += damp * h.diagonal().mean();

  Eigen::LLT<Eigen::MatrixXd> llt(h);
  Eigen::MatrixXd upper;
  if (llt.info() == Eigen::Success) {
    const Eigen::MatrixXd hinv = llt.solve(Eigen::MatrixXd::Identity(cols, cols));
    Eigen::LLT<Eigen::MatrixXd> inv_llt(hinv);
    if (inv_llt.info() == Eigen::Success) upper = inv_llt.matrixU();
  }
  if (upper.size() == 0 || !upper.allFinite()) {
    std::cerr << "warning: gptq: Cholesky failed after dampening; using round-to-nearest\n";
    return {rtn_quantize(weight, group_size, bits), true};
  }

  auto q = empty_layer(rows, cols, group_size, bits);
  std::vector<std::uint8_t> codes(static_cast<std::size_t>(rows * cols));
  std::vector<GroupGrid> grids(static_cast<std::size_t>(rows));
  std::vector<double> buf;
  for (Index i = 0; i < cols; ++i) {
    if (i % q.group_size == 0) {
      const Index c1 = std::min(i + q.group_size, cols);
      for (Index r = 0; r < rows; ++r) {
        buf.clear();
        for (Index c = i; c < c1; ++c) buf.push_back(w(r, c));
        grids[static_cast<std::size_t>(r)] = fit_group(buf, bits);
        const auto gi = static_cast<std::size_t>(r * q.groups() + i / q.group_size);
        q.scales[gi] = grids[static_cast<std::size_t>(r)].scale;
        q.zeros[gi] = grids[static_cast<std::size_t>(r)].zero;
      }
    }
    const double d = upper(i, i);
    Eigen::VectorXd err(rows);
    for (Index r = 0; r < rows; ++r) {
      const auto& grid = grids[static_cast<std::size_t>(r)];
      const std::uint8_t code = quantize_code(w(r, i), grid, bits);
      codes[static_cast<std::size_t>(r * cols + i)] = code;
      err(r) = (w(r, i) - dequant(code, grid)) / d;
    }
    if (i + 1 < cols) {
      w.rightCols(cols - i - 1).noalias() -= err * upper.row(i).tail(cols - i - 1);
    }
  }
  finish_codes(q, codes);
  return {std::move(q), false};
}

double calibration_loss(const Eigen::MatrixXd& weight, const Eigen::MatrixXd& dequantized,
                        const Eigen::MatrixXd& hessian) {
  const Eigen::MatrixXd delta = weight - dequantized;
  return 0.5 * (delta * hessian).cwiseProduct(delta).sum();
}

void HessianAccumulator::add(std::span<const float> rows, Index dim) {
  if (h.size() == 0) h = Eigen::MatrixXd::Zero(dim, dim);
  if (h.rows() != dim) throw DimensionError("hessian: input width changed");
  const Index n = static_cast<Index>(rows.size()) / dim;
  Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> x(rows.data(), n, dim);
  const Eigen::MatrixXd xd = x.cast<double>();
  h.noalias() += 2.0 * xd.transpose() * xd;
  samples += n;
}

HessianSet collect_hessians(const Model<float>& model, std::span<const std::uint8_t> bytes, Index seq_len,
                            std::span<const Index> windows, bool keep_per_loop, Index batch_size) {
  HessianSet set;
  ForwardOptions<float> opts;
  opts.observer = [&](const std::string& name, Index loop, const Tensorf& input) {
    const Index dim = input.dim(-1);
    set.aggregated[name].add(input.data(), dim);
    if (keep_per_loop) set.per_loop[{name, loop}].add(input.data(), dim);
  };
  NoGradGuard no_grad;
  for (std::size_t start = 0; start < windows.size(); start += static_cast<std::size_t>(batch_size)) {
    const auto n = std::min(windows.size() - start, static_cast<std::size_t>(batch_size));
    const auto batch = make_batch(bytes, windows.subspan(start, n), seq_len);
    forward(model, batch.inputs, batch.shape, opts);
  }
  return set;
}

std::vector<std::string> projection_weights(const ModelConfig& c) {
  std::vector<std::string> out;
  auto block = [&](const char* name, Index count) {
    for (Index i = 0; i < count; ++i) {
      const std::string p = std::string(name) + "." + std::to_string(i);
      for (const char* w : {"wq", "wk", "wv", "wo"}) out.push_back(p + ".attn." + w);
      for (const char* w : {"w_gate", "w_up", "w_down"}) out.push_back(p + ".mlp." + w);
    }
  };
  block("begin", c.begin_layers);
  block("middle", c.middle_layers);
  block("end", c.end_layers);
  return out;
}

namespace {

std::map<std::string, Tensorf> by_name(const Model<float>& model) {
  std::map<std::string, Tensorf> out;
  for (auto& [name, t] : model.named_parameters()) out.emplace(name, t);
  return out;
}

/// Model weight [in, out] as the quantizer's [out, in] matrix.
Eigen::MatrixXd as_out_in(const Tensorf& w) {
  Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(w.data().data(), w.dim(0),
                                                                                              w.dim(1));
  return m.transpose().cast<double>();
}

}  // namespace

QuantizedModel quantize_model(const Model<float>& model, const TokenStream& data, Index seq_len,
                              const QuantizeConfig& config) {
  QuantizedModel out;
  out.config = config;
  const Index available = window_count(data.train(), seq_len);
  if (available < 1) throw InputError("calibration data holds no complete window");
  // Evenly spaced calibration windows over the training split.
  std::vector<Index> windows;
  const Index count = std::min(config.calibration_sequences, available);
  for (Index i = 0; i < count; ++i) windows.push_back(i * available / count);
  const auto hessians = collect_hessians(model, data.train(), seq_len, windows);
  const auto params = by_name(model);
  for (const auto& name : projection_weights(model.config)) {
    const Eigen::MatrixXd w = as_out_in(params.at(name));
    const auto it = hessians.aggregated.find(name);
    if (it == hessians.aggregated.end()) throw StateError("quantize: no calibration inputs reached " + name);
    const auto& h = it->second.h;
    LayerReport rep{name};
    const auto rtn = rtn_quantize(w, config.group_size, config.bits);
    rep.rtn_loss = calibration_loss(w, rtn.dequantize(), h);
    if (config.method == QuantMethod::gptq) {
      auto g = gptq_quantize(w, h, config.group_size, config.bits, config.damp);
      rep.gptq_loss = calibration_loss(w, g.layer.dequantize(), h);
      rep.fell_back = g.fell_back;
      out.layers.emplace(name, std::move(g.layer));
    } else {
      rep.gptq_loss = rep.rtn_loss;
      out.layers.emplace(name, rtn);
    }
    out.report.push_back(rep);
  }
  return out;
}

Model<float> apply_quantization(const Model<float>& model, const QuantizedModel& quantized) {
  auto copy = convert_model<float>(model);
  for (auto& [name, t] : copy.named_parameters()) {
    const auto it = quantized.layers.find(name);
    if (it == quantized.layers.end()) continue;
    const Eigen::MatrixXd deq = it->second.dequantize();  // [out, in]
    auto dst = t.data_mut();
    const Index in = t.dim(0), outd = t.dim(1);
    for (Index i = 0; i < in; ++i)
      for (Index o = 0; o < outd; ++o) dst[static_cast<std::size_t>(i * outd + o)] = static_cast<float>(deq(o, i));
  }
  return copy;
}

Checkpoint make_quantized_checkpoint(const Model<float>& model, const TrainConfig& train,
                                     const QuantizedModel& quantized) {
  Checkpoint ckpt;
  std::vector<std::string> names;
  for (const auto& [name, _] : quantized.layers) names.push_back(name);
  ckpt.document = {{"model", to_json(model.config)},
                   {"train", to_json(train)},
                   {"quantization",
                    {{"bits", quantized.config.bits},
                     {"group_size", quantized.config.group_size},
                     {"method", quantized.config.method == QuantMethod::gptq ? "gptq" : "rtn"},
                     {"layout", "out_in"},
                     {"layers", names}}}};
  for (const auto& [name, t] : model.named_parameters()) {
    const auto it = quantized.layers.find(name);
    if (it == quantized.layers.end()) {
      ckpt.tensors.push_back(float_record(name, t.shape(), t.data()));
      continue;
    }
    const auto& q = it->second;
    ckpt.tensors.push_back({name + ".qweight", q.bits == 4 ? DType::int4 : DType::u8, {q.rows, q.cols}, q.packed});
    ckpt.tensors.push_back(float_record(name + ".scales", {q.rows, q.groups()}, q.scales));
    ckpt.tensors.push_back({name + ".zeros", DType::u8, {q.rows, q.groups()}, q.zeros});
  }
  return ckpt;
}

LoadedRun load_any_checkpoint(const std::filesystem::path& path) {
  auto ckpt = read_checkpoint(path);
  if (!ckpt.document.contains("quantization")) return load_training_checkpoint(ckpt);
  const auto& qdoc = ckpt.document.at("quantization");
  const int bits = qdoc.at("bits").get<int>();
  const Index group = qdoc.at("group_size").get<Index>();
  Checkpoint plain;
  plain.document = ckpt.document;
  plain.document.erase("quantization");
  std::map<std::string, const TensorRecord*> recs;
  for (const auto& r : ckpt.tensors) recs.emplace(r.name, &r);
  for (const auto& r : ckpt.tensors) {
    if (r.name.ends_with(".scales") || r.name.ends_with(".zeros")) continue;
    if (!r.name.ends_with(".qweight")) {
      plain.tensors.push_back(r);
      continue;
    }
    const std::string base = r.name.substr(0, r.name.size() - 8);
    const auto* scales = recs.at(base + ".scales");
    const auto* zeros = recs.at(base + ".zeros");
    QuantizedLinear q;
    q.bits = bits;
    q.rows = r.shape.at(0);
    q.cols = r.shape.at(1);
    q.group_size = std::min(group, q.cols);
    q.packed = r.payload;
    q.scales = float_values(*scales);
    q.zeros = zeros->payload;
    if (static_cast<Index>(q.scales.size()) != q.rows * q.groups()) throw IoError("checkpoint: bad scales for " + base);
    const Eigen::MatrixXd deq = q.dequantize();
    std::vector<float> w(static_cast<std::size_t>(q.rows * q.cols));
    for (Index i = 0; i < q.cols; ++i)
      for (Index o = 0; o < q.rows; ++o) w[static_cast<std::size_t>(i * q.rows + o)] = static_cast<float>(deq(o, i));
    plain.tensors.push_back(float_record(base, {q.cols, q.rows}, w));
  }
  // Restore manifest order so the float loader sees a plain checkpoint.
  const auto manifest = parameter_manifest(model_config_from_json(plain.document.at("model")));
  std::map<std::string, TensorRecord> pool;
  for (auto& r : plain.tensors) pool.emplace(r.name, std::move(r));
  plain.tensors.clear();
  for (const auto& spec : manifest) {
    auto it = pool.find(spec.name);
    if (it == pool.end()) throw IoError("checkpoint: missing tensor " + spec.name);
    plain.tensors.push_back(std::move(it->second));
  }
  return load_training_checkpoint(plain);
}

}  // namespace hyperloop
