#pragma once

#include "gw/tensor.hpp"

#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace gw::nn {

/// Ordered, named map of trainable tensors. Entries registered here get
/// requires_grad set; frozen entries are skipped by the optimizer and do not
/// record gradients.
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    Tensor tensor;
    bool frozen = false;
  };

  Tensor add(const std::string& name, Tensor t);
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const;

  void freeze(const std::string& name);
  void unfreeze(const std::string& name);
  /// Freeze every entry whose name starts with `prefix`.
  void freeze_prefix(const std::string& prefix);
  void freeze_all();

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }
  std::size_t size() const { return entries_.size(); }

  /// Number of scalars in unfrozen / all entries.
  Index trainable_count() const;
  Index total_count() const;

  void zero_grads();

  /// Deep copies of all values (for best-checkpoint snapshots).
  std::vector<Array> snapshot_values() const;
  void restore_values(const std::vector<Array>& values);

 private:
  Entry& entry(const std::string& name);
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// Uniform fan-in init: U(-sqrt(1/fan_in), sqrt(1/fan_in)).
Tensor uniform_fan_in(Shape shape, Index fan_in, Rng& rng);

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

/// y = x W^T + b with weight [out x in]. Accepts any rank >= 1 input whose
/// last extent is `in`; leading extents are preserved.
struct Linear {
  Tensor weight;
  Tensor bias;
  bool has_bias = true;
  Index in = 0, out = 0;

  Linear() = default;
  Linear(ParameterStore& store, const std::string& name, Index in, Index out,
         Rng& rng, bool with_bias = true);
  Tensor operator()(const Tensor& x) const;
};

/// Feedforward stack: `dims` gives layer widths, ReLU between layers, linear
/// output.
struct Mlp {
  std::vector<Linear> layers;

  Mlp() = default;
  Mlp(ParameterStore& store, const std::string& name, const std::vector<Index>& dims,
      Rng& rng, bool with_bias = true);
  Tensor operator()(const Tensor& x) const;
};

/// Inverted-scaling dropout; identity when `rng` is null (eval) or p == 0.
Tensor dropout(const Tensor& x, Scalar p, Rng* rng);

/// Normalizes the last axis; learned gain, optional learned bias.
struct LayerNorm {
  Tensor gain;
  Tensor bias;
  bool has_bias = true;
  Index dim = 0;

  LayerNorm() = default;
  LayerNorm(ParameterStore& store, const std::string& name, Index dim,
            bool with_bias = true);
  Tensor operator()(const Tensor& x) const;
};

/// Per-channel batch normalization over [rows, C] or [B, C, H, W]. Training
/// mode normalizes with batch statistics (differentiably) and maintains
/// running statistics as frozen parameters for eval mode.
struct BatchNorm {
  Tensor gain, bias;
  Tensor running_mean, running_var;  // frozen entries, saved with checkpoints
  Index channels = 0;
  Scalar momentum = 0.1;
  Scalar eps = 1e-5;

  BatchNorm() = default;
  BatchNorm(ParameterStore& store, const std::string& name, Index channels);
  Tensor operator()(const Tensor& x, bool training);
};

/// Stacked LSTM cells; dropout applies between layers during training only.
/// State (h, c per layer) lives in the struct and must be reset before each
/// rollout.
struct LstmStack {
  struct Layer {
    Tensor w_ih;  // [4H x in]
    Tensor w_hh;  // [4H x H]
    Tensor b;     // [4H], forget-gate block initialized to 1
  };

  std::vector<Layer> layers;
  Index input = 0, hidden = 0;
  Scalar drop = 0.0;
  std::vector<Tensor> h, c;

  LstmStack() = default;
  LstmStack(ParameterStore& store, const std::string& name, Index input,
            Index hidden, Index n_layer, Scalar dropout, Rng& rng);

  void reset(Index batch);
  /// One step over x [B x input]; returns the top layer's h [B x hidden].
  Tensor step(const Tensor& x, Rng* dropout_rng);
};

struct TransformerConfig {
  Index input_dim = 11;
  Index width = 64;
  Index n_layer = 3;
  Index n_head = 4;
  Index max_positions = 20;
  Index n_class = 10;
  Scalar dropout = 0.011;
  bool bias = false;
};

/// Decoder-only causal transformer: learned linear input embedding, learned
/// positional embedding, pre-norm blocks with GELU feedforward (4x), output
/// projection per position.
class TransformerDecoder {
 public:
  TransformerDecoder() = default;
  TransformerDecoder(ParameterStore& store, const std::string& name,
                     const TransformerConfig& cfg, Rng& rng);

  /// x is [B x T x input_dim], T <= max_positions. Returns logits
  /// [B x T x n_class]. When `last_block_out` is given it receives the final
  /// block's output [B x T x width].
  Tensor forward(const Tensor& x, Rng* dropout_rng,
                 Tensor* last_block_out = nullptr) const;

  const TransformerConfig& config() const { return cfg_; }

 private:
  struct Block {
    LayerNorm ln1, ln2;
    Linear qkv, proj, fc_in, fc_out;
  };

  TransformerConfig cfg_;
  Linear embed_;
  Tensor pos_;  // [max_positions x width]
  std::vector<Block> blocks_;
  LayerNorm ln_f_;
  Linear head_;
  Tensor mask_;  // [max_positions x max_positions], 0 on/below diagonal
};

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// AdamW with decoupled weight decay. Moments are kept per parameter name;
/// step() updates every unfrozen entry and clears its gradient.
class AdamW {
 public:
  AdamW(Scalar lr, Scalar weight_decay, Scalar beta1 = 0.9, Scalar beta2 = 0.999,
        Scalar eps = 1e-8)
      : lr_(lr), weight_decay_(weight_decay), beta1_(beta1), beta2_(beta2),
        eps_(eps) {}

  void step(ParameterStore& store);

  Scalar lr() const { return lr_; }
  void set_lr(Scalar lr) { lr_ = lr; }
  std::int64_t steps_taken() const { return t_; }

 private:
  struct Moments {
    Array m, v;
  };
  Scalar lr_, weight_decay_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::unordered_map<std::string, Moments> moments_;
};

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Versioned binary container: magic, format version, parameter count, then
/// per parameter {name, shape, f64 little-endian data}.
void save_checkpoint(const ParameterStore& store, const std::string& path);
ParameterStore load_checkpoint(const std::string& path);

/// Copies values from `src` into same-named entries of `dst`; missing names
/// or shape mismatches are errors.
void copy_values(const ParameterStore& src, ParameterStore& dst);

}  // namespace gw::nn
