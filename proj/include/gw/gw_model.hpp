#pragma once

#include "gw/nn.hpp"
#include "gw/task.hpp"

#include <array>
#include <functional>
#include <string>
#include <vector>

namespace gw::model {

enum class Readout { time_averaged, gate_argmax, final_step };

Readout parse_readout(const std::string& name);
std::string to_string(Readout mode);

struct GwConfig {
  Index workspace_dim = 10;
  int horizon = 20;
  Readout readout = Readout::time_averaged;
  bool normalize_instruction = false;  // feed a_left/10 instead of a_left
};

/// Right-shift by one with wrap-around over width-10 rows: the hand-designed
/// incrementer. y[..., (i+1) mod 10] = x[..., i].
Tensor circular_shift(const Tensor& x);

/// Hard one-hot gate schedule solving the task by construction: input once,
/// increment a_left times, output once (sequence length a_left + 2).
/// Each entry is (g_V, g_O, g_D).
std::vector<std::array<Scalar, 3>> oracle_gates(int a_left);

/// The pluggable pieces around the workspace: input encoder, domain codecs
/// and the increment operator, all acting on row batches.
struct GwModules {
  std::function<Tensor(const Tensor&)> encode_input;  // raw right addend -> vision state
  std::function<Tensor(const Tensor&)> enc_vision;    // vision state -> workspace
  std::function<Tensor(const Tensor&)> dec_vision;    // workspace -> vision state
  std::function<Tensor(const Tensor&)> enc_digit;     // digit state -> workspace
  std::function<Tensor(const Tensor&)> dec_digit;     // workspace -> digit state
  std::function<Tensor(const Tensor&)> increment;     // workspace -> workspace
  Index vision_dim = 10;  // width of the encoded vision state
};

/// One-hot instantiation: identity codecs, circular-shift incrementer.
GwModules identity_modules();

/// Gate controller: LSTM over the (constant) instruction scalar with a
/// 3-way softmax head.
struct Router {
  nn::LstmStack lstm;
  nn::Linear head;

  Router() = default;
  Router(nn::ParameterStore& store, const std::string& name, Index n_layer,
         Index hidden, Scalar dropout, Rng& rng);

  void reset(Index batch);
  /// One step over the instruction column [B x 1]; returns gates [B x 3]
  /// on the simplex.
  Tensor step(const Tensor& instruction, Rng* dropout_rng);
  Index hidden_size() const { return lstm.hidden; }
};

struct GwModel {
  GwConfig config;
  GwModules modules;
  Router router;
  nn::ParameterStore params;  // router parameters (codecs live with their stages)
};

/// One-hot model with the published router configuration (1 layer, 128 hidden).
GwModel make_onehot_model(unsigned seed, Index n_layer = 1, Index hidden = 128,
                          Scalar dropout = 0.016);

// ---------------------------------------------------------------------------
// Rollout
// ---------------------------------------------------------------------------

/// Batched input helpers. All samples in a batch share a horizon (and, under
/// oracle gating, the instruction).
Tensor stack_right_encodings(const std::vector<task::AdditionSample>& batch);
Tensor instruction_column(const std::vector<task::AdditionSample>& batch,
                          bool normalize);
std::vector<int> targets_of(const std::vector<task::AdditionSample>& batch);

struct RolloutOptions {
  bool use_oracle_gates = false;
  bool loss_final_step_only = false;  // incrementer training objective
  Rng* dropout_rng = nullptr;         // null: eval mode
};

/// Everything a rollout produces, still attached to the graph: per-step
/// digit-domain states (read as logits), gates, workspace states and router
/// hidden states, plus the scalar training loss.
struct RolloutResult {
  Tensor loss;
  std::vector<Tensor> outputs;       // D(t), [B x 10]
  std::vector<Tensor> gates;         // [B x 3]
  std::vector<Tensor> workspace;     // gw(t), [B x workspace_dim]
  std::vector<Tensor> router_hidden; // [B x H] (empty under oracle gating)
  std::vector<int> targets;
};

RolloutResult rollout(GwModel& model, const std::vector<task::AdditionSample>& batch,
                      const RolloutOptions& opts = {});

/// Converts a finished rollout into one predicted digit per sample.
std::vector<int> readout(const RolloutResult& result, Readout mode);

// ---------------------------------------------------------------------------
// Run records
// ---------------------------------------------------------------------------

/// One (sample, t) row of a persisted run: gates, state vector, softmaxed
/// output distribution and the per-sample loss at that step.
struct RunRecord {
  std::string arch;
  int a_left = 0;
  int a_right = 0;
  int t = 0;
  Scalar g_v = 0, g_o = 0, g_d = 0;
  Eigen::VectorXd state;
  Eigen::VectorXd output;
  Scalar loss = 0;
};

/// Which per-step vector fills RunRecord::state for the workspace model.
enum class HiddenSource { workspace, router };

std::vector<RunRecord> collect_records(const RolloutResult& result,
                                       const std::vector<task::AdditionSample>& batch,
                                       const std::string& arch,
                                       HiddenSource source = HiddenSource::workspace);

void write_records_csv(const std::vector<RunRecord>& records, const std::string& path);
void write_records_jsonl(const std::vector<RunRecord>& records, const std::string& path);
std::vector<RunRecord> read_records_csv(const std::string& path);

}  // namespace gw::model
