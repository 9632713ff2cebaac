#include "gw/baselines.hpp"

#include <cmath>

namespace gw::baselines {

Tensor input_step(const std::vector<task::AdditionSample>& batch, int t) {
  const Index b = static_cast<Index>(batch.size());
  Array data = Array::Zero(b * 11);
  for (Index i = 0; i < b; ++i) {
    const auto& s = batch[static_cast<std::size_t>(i)];
    data[i * 11] = static_cast<Scalar>(s.a_left);
    if (t == 0) {
      if (s.right_encoding.size() != 10)
        throw ShapeError("baseline input: right addend must be one-hot (10), got " +
                         std::to_string(s.right_encoding.size()));
      for (Index j = 0; j < 10; ++j) data[i * 11 + 1 + j] = s.right_encoding[j];
    }
  }
  return Tensor({b, 11}, std::move(data));
}

Tensor input_sequence(const std::vector<task::AdditionSample>& batch) {
  const Index b = static_cast<Index>(batch.size());
  const int horizon = batch.empty() ? 0 : batch[0].horizon;
  Array data = Array::Zero(b * horizon * 11);
  for (Index i = 0; i < b; ++i) {
    const auto& s = batch[static_cast<std::size_t>(i)];
    if (s.horizon != horizon)
      throw ValueError("baseline input: mixed horizons in one batch");
    for (int t = 0; t < horizon; ++t) {
      Index base = (i * horizon + t) * 11;
      data[base] = static_cast<Scalar>(s.a_left);
      if (t == 0)
        for (Index j = 0; j < 10; ++j) data[base + 1 + j] = s.right_encoding[j];
    }
  }
  return Tensor({b, horizon, 11}, std::move(data));
}

namespace {

Eigen::MatrixXd values_as_matrix(const Array& v, Index rows, Index cols) {
  return ConstMatMap(v.data(), rows, cols);
}

}  // namespace

LstmAdder::LstmAdder(unsigned seed, Index n_layer, Index hidden, Scalar dropout) {
  Rng rng(seed);
  lstm = nn::LstmStack(params, "lstm", 11, hidden, n_layer, dropout, rng);
  head = nn::Linear(params, "head", hidden, 10, rng);
}

BaselineRollout LstmAdder::rollout(const std::vector<task::AdditionSample>& batch,
                                   Rng* dropout_rng) {
  if (batch.empty()) throw ValueError("baseline rollout: empty batch");
  const Index b = static_cast<Index>(batch.size());
  const int horizon = batch[0].horizon;
  BaselineRollout out;
  out.targets = model::targets_of(batch);
  lstm.reset(b);
  Tensor loss;
  for (int t = 0; t < horizon; ++t) {
    Tensor h = lstm.step(input_step(batch, t), dropout_rng);
    Tensor logits = head(h);
    Tensor step_loss = cross_entropy(logits, out.targets);
    loss = t == 0 ? step_loss : add(loss, step_loss);
    out.logits.push_back(values_as_matrix(logits.value(), b, 10));
    out.hidden.push_back(values_as_matrix(h.value(), b, lstm.hidden));
  }
  out.loss = mul(loss, 1.0 / static_cast<Scalar>(horizon));
  return out;
}

TransformerAdder::TransformerAdder(unsigned seed, Index n_layer, Index width,
                                   Index n_head, Scalar dropout, bool bias) {
  Rng rng(seed);
  nn::TransformerConfig cfg;
  cfg.input_dim = 11;
  cfg.width = width;
  cfg.n_layer = n_layer;
  cfg.n_head = n_head;
  cfg.max_positions = 20;
  cfg.n_class = 10;
  cfg.dropout = dropout;
  cfg.bias = bias;
  model = nn::TransformerDecoder(params, "tf", cfg, rng);
}

BaselineRollout TransformerAdder::rollout(const std::vector<task::AdditionSample>& batch,
                                          Rng* dropout_rng) {
  if (batch.empty()) throw ValueError("baseline rollout: empty batch");
  const Index b = static_cast<Index>(batch.size());
  const int horizon = batch[0].horizon;
  BaselineRollout out;
  out.targets = model::targets_of(batch);

  Tensor block_out;
  Tensor logits3 = model.forward(input_sequence(batch), dropout_rng, &block_out);
  // per-(sample, step) cross entropy equals the per-step average
  std::vector<int> flat_targets;
  flat_targets.reserve(static_cast<std::size_t>(b * horizon));
  for (Index i = 0; i < b; ++i)
    for (int t = 0; t < horizon; ++t)
      flat_targets.push_back(out.targets[static_cast<std::size_t>(i)]);
  out.loss = cross_entropy(reshape(logits3, {b * horizon, 10}), flat_targets);

  const Array& lv = logits3.value();
  const Array& hv = block_out.value();
  const Index w = model.config().width;
  for (int t = 0; t < horizon; ++t) {
    Eigen::MatrixXd lm(b, 10), hm(b, w);
    for (Index i = 0; i < b; ++i) {
      for (Index c = 0; c < 10; ++c) lm(i, c) = lv[(i * horizon + t) * 10 + c];
      for (Index c = 0; c < w; ++c) hm(i, c) = hv[(i * horizon + t) * w + c];
    }
    out.logits.push_back(std::move(lm));
    out.hidden.push_back(std::move(hm));
  }
  return out;
}

std::vector<int> readout(const BaselineRollout& r, model::Readout mode) {
  if (mode == model::Readout::gate_argmax)
    throw ValueError("readout: baselines have no gates; use time-averaged or final-step");
  const Index b = r.logits[0].rows();
  const std::size_t horizon = r.logits.size();
  std::vector<int> out(static_cast<std::size_t>(b));
  for (Index i = 0; i < b; ++i) {
    Eigen::VectorXd score = Eigen::VectorXd::Zero(10);
    if (mode == model::Readout::time_averaged) {
      for (std::size_t t = 0; t < horizon; ++t) {
        Eigen::ArrayXd row = r.logits[t].row(i).array();
        row = (row - row.maxCoeff()).exp();
        score += (row / row.sum()).matrix();
      }
    } else {
      Eigen::ArrayXd row = r.logits[horizon - 1].row(i).array();
      row = (row - row.maxCoeff()).exp();
      score = (row / row.sum()).matrix();
    }
    Index best = 0;
    for (Index c = 1; c < 10; ++c)
      if (score[c] > score[best]) best = c;
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

std::vector<model::RunRecord> collect_records(
    const BaselineRollout& r, const std::vector<task::AdditionSample>& batch,
    const std::string& arch) {
  std::vector<model::RunRecord> records;
  const Index b = static_cast<Index>(batch.size());
  records.reserve(batch.size() * r.logits.size());
  for (std::size_t t = 0; t < r.logits.size(); ++t) {
    for (Index i = 0; i < b; ++i) {
      model::RunRecord rec;
      rec.arch = arch;
      rec.a_left = batch[static_cast<std::size_t>(i)].a_left;
      rec.a_right = batch[static_cast<std::size_t>(i)].a_right;
      rec.t = static_cast<int>(t);
      rec.state = r.hidden[t].row(i);
      Eigen::ArrayXd row = r.logits[t].row(i).array();
      row = (row - row.maxCoeff()).exp();
      row /= row.sum();
      rec.output = row.matrix();
      rec.loss = -std::log(std::max(row[batch[static_cast<std::size_t>(i)].target], 1e-300));
      records.push_back(std::move(rec));
    }
  }
  return records;
}

}  // namespace gw::baselines
