#include "gw/gw_model.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <sstream>

namespace gw::model {

Readout parse_readout(const std::string& name) {
  if (name == "time-averaged" || name == "time_averaged") return Readout::time_averaged;
  if (name == "gate-argmax" || name == "gate_argmax") return Readout::gate_argmax;
  if (name == "final-step" || name == "final_step") return Readout::final_step;
  throw ValueError("readout: unknown mode '" + name + "'");
}

std::string to_string(Readout mode) {
  switch (mode) {
    case Readout::time_averaged: return "time-averaged";
    case Readout::gate_argmax: return "gate-argmax";
    case Readout::final_step: return "final-step";
  }
  return "?";
}

Tensor circular_shift(const Tensor& x) {
  if (x.shape().back() != 10)
    throw ShapeError("circular_shift: expected width 10, got " +
                     gw::to_string(x.shape()));
  return roll_last(x, 1);
}

std::vector<std::array<Scalar, 3>> oracle_gates(int a_left) {
  if (a_left < 1 || a_left > 9)
    throw ValueError("oracle_gates: a_left must be in [1,9], got " +
                     std::to_string(a_left));
  std::vector<std::array<Scalar, 3>> gates;
  gates.push_back({1, 0, 0});
  for (int i = 0; i < a_left; ++i) gates.push_back({0, 1, 0});
  gates.push_back({0, 0, 1});
  return gates;
}

GwModules identity_modules() {
  auto id = [](const Tensor& t) { return t; };
  GwModules m;
  m.encode_input = id;
  m.enc_vision = id;
  m.dec_vision = id;
  m.enc_digit = id;
  m.dec_digit = id;
  m.increment = [](const Tensor& t) { return circular_shift(t); };
  m.vision_dim = 10;
  return m;
}

// ---------------------------------------------------------------------------
// Router
// ---------------------------------------------------------------------------

Router::Router(nn::ParameterStore& store, const std::string& name, Index n_layer,
               Index hidden, Scalar dropout, Rng& rng) {
  lstm = nn::LstmStack(store, name + ".lstm", 1, hidden, n_layer, dropout, rng);
  head = nn::Linear(store, name + ".head", hidden, 3, rng);
}

void Router::reset(Index batch) { lstm.reset(batch); }

Tensor Router::step(const Tensor& instruction, Rng* dropout_rng) {
  return softmax(head(lstm.step(instruction, dropout_rng)));
}

GwModel make_onehot_model(unsigned seed, Index n_layer, Index hidden, Scalar dropout) {
  GwModel model;
  model.modules = identity_modules();
  Rng rng(seed);
  model.router = Router(model.params, "router", n_layer, hidden, dropout, rng);
  return model;
}

// ---------------------------------------------------------------------------
// Rollout
// ---------------------------------------------------------------------------

Tensor stack_right_encodings(const std::vector<task::AdditionSample>& batch) {
  if (batch.empty()) throw ValueError("rollout: empty batch");
  Index width = batch[0].right_encoding.size();
  Array data(static_cast<Index>(batch.size()) * width);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (batch[i].right_encoding.size() != width)
      throw ShapeError("rollout: mixed right-addend encodings in one batch");
    for (Index j = 0; j < width; ++j)
      data[static_cast<Index>(i) * width + j] = batch[i].right_encoding[j];
  }
  return Tensor({static_cast<Index>(batch.size()), width}, std::move(data));
}

Tensor instruction_column(const std::vector<task::AdditionSample>& batch,
                          bool normalize) {
  Array data(static_cast<Index>(batch.size()));
  for (std::size_t i = 0; i < batch.size(); ++i)
    data[static_cast<Index>(i)] =
        normalize ? batch[i].a_left / 10.0 : static_cast<Scalar>(batch[i].a_left);
  return Tensor({static_cast<Index>(batch.size()), 1}, std::move(data));
}

std::vector<int> targets_of(const std::vector<task::AdditionSample>& batch) {
  std::vector<int> t;
  t.reserve(batch.size());
  for (const auto& s : batch) t.push_back(s.target);
  return t;
}

namespace {

// Per-sample coefficient column `idx` of the gate matrix, as a length-B vector.
Tensor gate_coeff(const Tensor& gates, Index idx, Index batch) {
  return reshape(slice(gates, 1, idx, 1), {batch});
}

}  // namespace

RolloutResult rollout(GwModel& model, const std::vector<task::AdditionSample>& batch,
                      const RolloutOptions& opts) {
  if (batch.empty()) throw ValueError("rollout: empty batch");
  const Index b = static_cast<Index>(batch.size());
  const int horizon = opts.use_oracle_gates ? batch[0].a_left + 2 : batch[0].horizon;
  for (const auto& s : batch) {
    if (!opts.use_oracle_gates && s.horizon != horizon)
      throw ValueError("rollout: mixed horizons in one batch");
    if (opts.use_oracle_gates && s.a_left != batch[0].a_left)
      throw ValueError("rollout: oracle gating needs a shared instruction per batch");
  }

  RolloutResult res;
  res.targets = targets_of(batch);

  const GwModules& mod = model.modules;
  Tensor encoded_input = mod.encode_input(stack_right_encodings(batch));
  if (encoded_input.shape() != Shape{b, mod.vision_dim})
    throw ShapeError("rollout: encoded input is " + gw::to_string(encoded_input.shape()) +
                     ", expected [" + std::to_string(b) + ", " +
                     std::to_string(mod.vision_dim) + "]");
  Tensor instruction = instruction_column(batch, model.config.normalize_instruction);

  std::vector<std::array<Scalar, 3>> oracle;
  if (opts.use_oracle_gates) {
    oracle = oracle_gates(batch[0].a_left);
  } else {
    model.router.reset(b);
  }

  Tensor gw_state = Tensor::zeros({b, model.config.workspace_dim});
  std::vector<Tensor> step_losses;
  for (int t = 0; t < horizon; ++t) {
    Tensor gates;
    if (opts.use_oracle_gates) {
      const auto& g = oracle[static_cast<std::size_t>(t)];
      Array ga(b * 3);
      for (Index i = 0; i < b; ++i) {
        ga[i * 3 + 0] = g[0];
        ga[i * 3 + 1] = g[1];
        ga[i * 3 + 2] = g[2];
      }
      gates = Tensor({b, 3}, std::move(ga));
    } else {
      gates = model.router.step(instruction, opts.dropout_rng);
      res.router_hidden.push_back(model.router.lstm.h.back());
    }
    Tensor g_v = gate_coeff(gates, 0, b);
    Tensor g_o = gate_coeff(gates, 1, b);
    Tensor g_d = gate_coeff(gates, 2, b);

    // input module state: the encoded right addend at t=0, zero afterwards
    Tensor vision = t == 0 ? encoded_input : Tensor::zeros({b, mod.vision_dim});
    // digit-domain state, read as the model's answer logits
    Tensor digit = row_scale(mod.dec_digit(gw_state), g_d);
    // incrementer acting on the gated previous workspace
    Tensor incremented = mod.increment(row_scale(gw_state, g_o));
    // workspace aggregation of the three gated module contributions
    gw_state = add(add(row_scale(mod.enc_vision(vision), g_v),
                       row_scale(incremented, g_o)),
                   row_scale(mod.enc_digit(digit), g_d));

    res.outputs.push_back(digit);
    res.gates.push_back(gates);
    res.workspace.push_back(gw_state);
    if (!opts.loss_final_step_only || t == horizon - 1)
      step_losses.push_back(cross_entropy(digit, res.targets));
  }

  res.loss = step_losses[0];
  for (std::size_t i = 1; i < step_losses.size(); ++i)
    res.loss = add(res.loss, step_losses[i]);
  res.loss = mul(res.loss, 1.0 / static_cast<Scalar>(step_losses.size()));
  return res;
}

std::vector<int> readout(const RolloutResult& result, Readout mode) {
  const Index b = result.outputs[0].dim(0);
  const std::size_t horizon = result.outputs.size();
  std::vector<int> predictions(static_cast<std::size_t>(b));

  // softmaxed outputs per step, outside the graph
  std::vector<Eigen::MatrixXd> probs(horizon);
  for (std::size_t t = 0; t < horizon; ++t) {
    const Array& v = result.outputs[t].value();
    Eigen::MatrixXd p(b, 10);
    for (Index i = 0; i < b; ++i) {
      Eigen::ArrayXd row = ConstVecMap(v.data() + i * 10, 10).array();
      row = (row - row.maxCoeff()).exp();
      p.row(i) = (row / row.sum()).matrix();
    }
    probs[t] = std::move(p);
  }

  for (Index i = 0; i < b; ++i) {
    Eigen::VectorXd scores;
    switch (mode) {
      case Readout::time_averaged: {
        scores = Eigen::VectorXd::Zero(10);
        for (std::size_t t = 0; t < horizon; ++t) scores += probs[t].row(i);
        break;
      }
      case Readout::gate_argmax: {
        std::size_t best_t = 0;
        Scalar best_g = -1;
        for (std::size_t t = 0; t < horizon; ++t) {
          Scalar g_d = result.gates[t].value()[i * 3 + 2];
          if (g_d > best_g) {
            best_g = g_d;
            best_t = t;
          }
        }
        scores = probs[best_t].row(i);
        break;
      }
      case Readout::final_step:
        scores = probs[horizon - 1].row(i);
        break;
    }
    Index best = 0;
    for (Index c = 1; c < 10; ++c)
      if (scores[c] > scores[best]) best = c;
    predictions[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return predictions;
}

// ---------------------------------------------------------------------------
// Run records
// ---------------------------------------------------------------------------

std::vector<RunRecord> collect_records(const RolloutResult& result,
                                       const std::vector<task::AdditionSample>& batch,
                                       const std::string& arch, HiddenSource source) {
  const Index b = static_cast<Index>(batch.size());
  std::vector<RunRecord> records;
  records.reserve(batch.size() * result.outputs.size());
  for (std::size_t t = 0; t < result.outputs.size(); ++t) {
    const Array& out = result.outputs[t].value();
    const Array* gates = t < result.gates.size() ? &result.gates[t].value() : nullptr;
    const Tensor& state_tensor =
        source == HiddenSource::router && !result.router_hidden.empty()
            ? result.router_hidden[t]
            : result.workspace[t];
    const Array& st = state_tensor.value();
    Index sw = state_tensor.dim(1);
    for (Index i = 0; i < b; ++i) {
      RunRecord r;
      r.arch = arch;
      r.a_left = batch[static_cast<std::size_t>(i)].a_left;
      r.a_right = batch[static_cast<std::size_t>(i)].a_right;
      r.t = static_cast<int>(t);
      if (gates) {
        r.g_v = (*gates)[i * 3 + 0];
        r.g_o = (*gates)[i * 3 + 1];
        r.g_d = (*gates)[i * 3 + 2];
      }
      r.state = ConstVecMap(st.data() + i * sw, sw);
      Eigen::ArrayXd row = ConstVecMap(out.data() + i * 10, 10).array();
      row = (row - row.maxCoeff()).exp();
      row /= row.sum();
      r.output = row.matrix();
      int target = batch[static_cast<std::size_t>(i)].target;
      r.loss = -std::log(std::max(row[target], 1e-300));
      records.push_back(std::move(r));
    }
  }
  return records;
}

void write_records_csv(const std::vector<RunRecord>& records, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("run records: cannot open '" + path + "' for writing");
  Index sw = records.empty() ? 0 : records[0].state.size();
  os << "arch,a_left,a_right,t,g_V,g_O,g_D";
  for (Index i = 0; i < 10; ++i) os << ",out" << i;
  for (Index i = 0; i < sw; ++i) os << ",h" << i;
  os << ",loss\n";
  os.precision(17);
  for (const RunRecord& r : records) {
    if (r.state.size() != sw)
      throw ValueError("run records: mixed state widths in one file");
    os << r.arch << ',' << r.a_left << ',' << r.a_right << ',' << r.t << ',' << r.g_v
       << ',' << r.g_o << ',' << r.g_d;
    for (Index i = 0; i < 10; ++i) os << ',' << r.output[i];
    for (Index i = 0; i < sw; ++i) os << ',' << r.state[i];
    os << ',' << r.loss << '\n';
  }
}

void write_records_jsonl(const std::vector<RunRecord>& records,
                         const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("run records: cannot open '" + path + "' for writing");
  for (const RunRecord& r : records) {
    nlohmann::json j;
    j["arch"] = r.arch;
    j["a_left"] = r.a_left;
    j["a_right"] = r.a_right;
    j["t"] = r.t;
    j["g_V"] = r.g_v;
    j["g_O"] = r.g_o;
    j["g_D"] = r.g_d;
    j["gw"] = std::vector<Scalar>(r.state.data(), r.state.data() + r.state.size());
    j["output"] = std::vector<Scalar>(r.output.data(), r.output.data() + r.output.size());
    j["loss"] = r.loss;
    os << j.dump() << '\n';
  }
}

std::vector<RunRecord> read_records_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("run records: cannot open '" + path + "'");
  std::string header;
  std::getline(is, header);
  Index n_cols = 1;
  for (char c : header) n_cols += c == ',';
  Index sw = n_cols - 18;  // arch + 3 ids + 3 gates + 10 outputs + loss
  if (sw < 0) throw IoError("run records: malformed header in '" + path + "'");
  std::vector<RunRecord> records;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string field;
    RunRecord r;
    std::getline(ss, r.arch, ',');
    auto next = [&] {
      if (!std::getline(ss, field, ','))
        throw IoError("run records: truncated row in '" + path + "'");
      return std::stod(field);
    };
    r.a_left = static_cast<int>(next());
    r.a_right = static_cast<int>(next());
    r.t = static_cast<int>(next());
    r.g_v = next();
    r.g_o = next();
    r.g_d = next();
    r.output.resize(10);
    for (Index i = 0; i < 10; ++i) r.output[i] = next();
    r.state.resize(sw);
    for (Index i = 0; i < sw; ++i) r.state[i] = next();
    r.loss = next();
    records.push_back(std::move(r));
  }
  return records;
}

}  // namespace gw::model
