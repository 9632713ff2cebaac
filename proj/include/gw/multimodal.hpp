#pragma once

#include "gw/gw_model.hpp"
#include "gw/nn.hpp"
#include "gw/task.hpp"

#include <functional>
#include <string>
#include <vector>

namespace gw::multimodal {

// ---------------------------------------------------------------------------
// Variational autoencoder over 28x28 digit images
// ---------------------------------------------------------------------------

struct VaeConfig {
  bool convolutional = false;  // feedforward is the fast configuration;
                               // the conv path mirrors it with 3 conv /
                               // deconv layers and batch normalization
  Index latent_dim = 12;
  Scalar kl_weight = 1.0;
  int epochs = 55;
  Scalar lr = 3e-4;
  Index batch = 32;
};

class Vae {
 public:
  Vae() = default;
  Vae(const VaeConfig& cfg, unsigned seed);

  struct Encoded {
    Tensor mu, logvar;
  };
  Encoded encode(const Tensor& images, bool training);
  Tensor decode(const Tensor& z, bool training);
  /// Posterior mean in eval mode — the frozen encoder used by later stages.
  Tensor encode_mean(const Tensor& images);

  nn::ParameterStore& params() { return params_; }
  const nn::ParameterStore& params() const { return params_; }
  const VaeConfig& config() const { return cfg_; }

 private:
  VaeConfig cfg_;
  nn::ParameterStore params_;
  // feedforward path
  nn::Mlp enc_trunk_, dec_;
  nn::Linear enc_mu_, enc_logvar_;
  // convolutional path
  Tensor cw1_, cw2_, cw3_, cb1_, cb2_, cb3_;
  nn::BatchNorm cbn1_, cbn2_, cbn3_;
  nn::Linear cenc_mu_, cenc_logvar_;
  nn::Linear cdec_in_;
  Tensor dw1_, dw2_, dw3_, db1_, db2_, db3_;
  nn::BatchNorm dbn1_, dbn2_;
};

/// z = mu + exp(logvar / 2) * noise, with the noise held fixed.
Tensor reparameterize(const Tensor& mu, const Tensor& logvar, const Tensor& noise);

struct VaeTrainLog {
  std::vector<Scalar> epoch_recon;
  std::vector<Scalar> epoch_kl;
};

/// Standard VAE objective (summed squared reconstruction error per image +
/// weighted KL to the unit Gaussian). Freezes the parameters afterwards.
VaeTrainLog train_vae(Vae& vae, const task::MnistDataset& data, unsigned seed);

// ---------------------------------------------------------------------------
// Workspace codecs and the four alignment losses
// ---------------------------------------------------------------------------

/// Pluggable codec callables so the losses are testable in isolation.
struct CodecFns {
  std::function<Tensor(const Tensor&)> e_v, d_v, e_d, d_d;
};

struct LossWeights {
  Scalar contrastive = 1.0;
  Scalar translation = 1.0;
  Scalar demi_cycle = 1.0;
  Scalar cycle = 1.0;
};

/// Symmetric InfoNCE between e_V(latent) and e_D(label) rows with a learned
/// temperature (diagonal pairs are the positives). Batch must be >= 2.
Tensor contrastive_loss(const CodecFns& fns, const Tensor& log_temperature,
                        const Tensor& latents, const Tensor& labels);
/// MSE(label, d_D(e_V(lat))) + MSE(lat, d_V(e_D(label))).
Tensor translation_loss(const CodecFns& fns, const Tensor& latents, const Tensor& labels);
/// MSE(label, d_D(e_D(label))) + MSE(lat, d_V(e_V(lat))).
Tensor demi_cycle_loss(const CodecFns& fns, const Tensor& latents, const Tensor& labels);
/// MSE(label, d_D(e_V(d_V(e_D(label))))) + MSE(lat, d_V(e_D(d_D(e_V(lat))))).
Tensor cycle_loss(const CodecFns& fns, const Tensor& latents, const Tensor& labels);

/// The trainable codecs: five feedforward layers each, hidden width 32,
/// between a 12-dim vision latent, a 10-dim digit domain and the 10-dim
/// workspace; plus the contrastive temperature.
struct GwCodecs {
  nn::Mlp e_v, d_v, e_d, d_d;
  Tensor log_temperature;
  nn::ParameterStore params;

  GwCodecs() = default;
  GwCodecs(unsigned seed, Index latent_dim = 12, Index workspace_dim = 10,
           Index hidden = 32);
  CodecFns fns() const;
};

struct CodecTrainLog {
  std::vector<Scalar> epoch_loss;
};

CodecTrainLog train_codecs(GwCodecs& codecs, Vae& vae, const task::MnistDataset& data,
                           const LossWeights& weights, unsigned seed,
                           int epochs = 100, Scalar lr = 1e-3, Index batch = 1024);

// ---------------------------------------------------------------------------
// Incrementer
// ---------------------------------------------------------------------------

/// Workspace-to-workspace increment network (five feedforward layers,
/// hidden 32).
struct Incrementer {
  nn::Mlp net;
  nn::ParameterStore params;

  Incrementer() = default;
  Incrementer(unsigned seed, Index workspace_dim = 10, Index hidden = 32);
};

struct IncrementerTrainLog {
  std::vector<Scalar> epoch_loss;
};

/// Trains the incrementer under the ground-truth gate program (input once,
/// increment a_left times, output once; rollout length a_left + 2) with the
/// cross entropy taken on the final step only. Codecs and VAE stay frozen;
/// image encodings are precomputed once through the frozen encoder.
IncrementerTrainLog train_incrementer(Incrementer& inc, GwCodecs& codecs, Vae& vae,
                                      const std::vector<task::AdditionSample>& tasks,
                                      unsigned seed, int epochs = 1000,
                                      Scalar lr = 5e-4, Index batch = 512);

/// Oracle-gated training over *pre-encoded* vision states (the identity
/// input encoder); used internally and handy for small-scale checks.
IncrementerTrainLog train_incrementer_encoded(
    Incrementer& inc, const CodecFns& fns, Index vision_dim,
    const std::vector<task::AdditionSample>& encoded_tasks, unsigned seed,
    int epochs, Scalar lr, Index batch);

/// Binds VAE + codecs + incrementer into a workspace model with a fresh
/// router (2 layers of 64 by default, per the published values).
model::GwModel assemble_mnist_model(Vae& vae, GwCodecs& codecs, Incrementer& inc,
                                    unsigned seed, Index router_layers = 2,
                                    Index router_hidden = 64,
                                    Scalar router_dropout = 0.2);

/// Stage metadata written next to each stage checkpoint.
void write_stage_meta(const std::string& path, const std::string& stage,
                      unsigned seed, const std::string& config_summary);

}  // namespace gw::multimodal
