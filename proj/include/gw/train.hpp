#pragma once

#include "gw/baselines.hpp"
#include "gw/gw_model.hpp"

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace gw::train {

/// Everything one run needs. Defaults are the published router values
/// (1 layer, 128 hidden, lr 3.5e-3, weight decay 2.5e-4, dropout 1.6e-2,
/// 10,000 epochs, full batch); the factory functions below switch to the
/// other models' published values.
struct TrainConfig {
  std::string model = "gw";  // gw | lstm | transformer
  std::string variant = "one-hot";
  std::string condition = "1-9to1-9";
  int epochs = 10000;
  Index batch_size = 0;  // 0 = full batch
  Scalar lr = 3.5e-3;
  Scalar weight_decay = 2.5e-4;
  Scalar dropout = 0.016;
  Index n_layer = 1;
  Index hidden = 128;
  Index n_head = 4;
  bool transformer_bias = false;
  unsigned seed = 0;
  int horizon = 20;
  model::Readout readout = model::Readout::time_averaged;
  bool normalize_instruction = false;
};

TrainConfig router_defaults();
TrainConfig mnist_router_defaults();
TrainConfig lstm_defaults();
TrainConfig transformer_defaults();

struct TrainLog {
  std::vector<Scalar> epoch_loss;
  Scalar best_loss = 0;
  int best_epoch = -1;
};

/// Trains the router parameters of `model` on `samples`, full-batch or
/// minibatched, keeping the best-by-train-loss snapshot. Every parameter in
/// `frozen_stores` must be frozen (a stray trainable entry is an error).
TrainLog train_router(model::GwModel& model,
                      const std::vector<task::AdditionSample>& samples,
                      const TrainConfig& cfg,
                      std::span<const nn::ParameterStore* const> frozen_stores = {});

/// Builds a one-hot model per `cfg` and trains its router on the condition's
/// training pairs.
model::GwModel train_onehot_router(const TrainConfig& cfg, TrainLog* log = nullptr);

baselines::LstmAdder train_lstm(const TrainConfig& cfg, TrainLog* log = nullptr);
baselines::TransformerAdder train_transformer(const TrainConfig& cfg,
                                              TrainLog* log = nullptr);

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalReport {
  std::string model_kind;
  std::string condition;
  unsigned seed = 0;
  Scalar accuracy = 0;  // under the headline readout mode
  Scalar accuracy_per_step_averaged = 0;  // mean over t of per-step accuracy
  std::optional<Scalar> accuracy_gate_argmax;  // workspace model only
  std::optional<Scalar> accuracy_final_step;
  Scalar mean_loss = 0;
  Eigen::MatrixXd pair_accuracy;  // 9 x 10, -1 where the pair was not evaluated
  Index trainable_params = 0;
  std::vector<model::RunRecord> records;
};

EvalReport evaluate_gw(model::GwModel& m, const std::vector<task::AdditionSample>& samples,
                       model::Readout mode, bool keep_records = false,
                       model::HiddenSource hidden_source = model::HiddenSource::workspace);
EvalReport evaluate_lstm(baselines::LstmAdder& m,
                         const std::vector<task::AdditionSample>& samples,
                         model::Readout mode, bool keep_records = false);
EvalReport evaluate_transformer(baselines::TransformerAdder& m,
                                const std::vector<task::AdditionSample>& samples,
                                model::Readout mode, bool keep_records = false);

void write_report_json(const EvalReport& report, const std::string& path);

// ---------------------------------------------------------------------------
// Generalization suite
// ---------------------------------------------------------------------------

/// 95% confidence half-width across runs (Student t, two-sided).
Scalar ci95_half_width(const std::vector<Scalar>& values);

struct SuiteOptions {
  std::vector<std::string> conditions;
  std::vector<std::string> models = {"gw", "lstm", "transformer"};
  int n_seeds = 10;
  // Generalization runs converge long before the 10,000-epoch router regime;
  // budgets chosen from measured training curves (loss plateau), overridable.
  int gw_epochs = 3000;
  int lstm_epochs = 4000;
  int transformer_epochs = 2000;
  int n_workers = 2;
  std::string out_dir;  // empty: keep everything in memory
};

struct SuiteRow {
  std::string condition;
  std::string model;
  std::vector<Scalar> seed_accuracy;
  Scalar mean_accuracy = 0;
  Scalar ci95 = 0;
  Index trainable_params = 0;
};

std::vector<SuiteRow> run_generalization_suite(const SuiteOptions& opts);
void write_suite_csv(const std::vector<SuiteRow>& rows, const std::string& path);

}  // namespace gw::train
