#pragma once

#include "gw/gw_model.hpp"
#include "gw/nn.hpp"
#include "gw/task.hpp"

#include <string>
#include <vector>

namespace gw::baselines {

/// Shared input protocol for every architecture: per step a width-11 vector,
/// [a_left] ++ one_hot(a_right) at t=0 and [a_left] ++ zeros afterwards.
Tensor input_step(const std::vector<task::AdditionSample>& batch, int t);
/// Stacked [B x T x 11] sequence of the same protocol.
Tensor input_sequence(const std::vector<task::AdditionSample>& batch);

/// Per-step logits and last-hidden-layer states of one evaluation or
/// training rollout; `loss` stays attached to the graph, the rest are values.
struct BaselineRollout {
  Tensor loss;
  std::vector<Eigen::MatrixXd> logits;  // T entries of [B x 10]
  std::vector<Eigen::MatrixXd> hidden;  // T entries of [B x H]
  std::vector<int> targets;
};

struct LstmAdder {
  nn::LstmStack lstm;
  nn::Linear head;
  nn::ParameterStore params;

  explicit LstmAdder(unsigned seed, Index n_layer = 4, Index hidden = 96,
                     Scalar dropout = 0.27);
  BaselineRollout rollout(const std::vector<task::AdditionSample>& batch,
                          Rng* dropout_rng = nullptr);
};

struct TransformerAdder {
  nn::TransformerDecoder model;
  nn::ParameterStore params;

  explicit TransformerAdder(unsigned seed, Index n_layer = 3, Index width = 64,
                            Index n_head = 4, Scalar dropout = 0.011,
                            bool bias = false);
  BaselineRollout rollout(const std::vector<task::AdditionSample>& batch,
                          Rng* dropout_rng = nullptr);
};

/// Prediction per sample. Baselines have no gates, so gate-argmax readout is
/// rejected.
std::vector<int> readout(const BaselineRollout& r, model::Readout mode);

std::vector<model::RunRecord> collect_records(
    const BaselineRollout& r, const std::vector<task::AdditionSample>& batch,
    const std::string& arch);

}  // namespace gw::baselines
