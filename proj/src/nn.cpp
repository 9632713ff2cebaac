#include "gw/nn.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace gw::nn {

// ---------------------------------------------------------------------------
// ParameterStore
// ---------------------------------------------------------------------------

Tensor ParameterStore::add(const std::string& name, Tensor t) {
  if (index_.count(name))
    throw ValueError("parameter store: duplicate name '" + name + "'");
  t.set_requires_grad(true);
  index_[name] = entries_.size();
  entries_.push_back(Entry{name, t, false});
  return t;
}

ParameterStore::Entry& ParameterStore::entry(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end())
    throw ValueError("parameter store: unknown name '" + name + "'");
  return entries_[it->second];
}

Tensor& ParameterStore::at(const std::string& name) { return entry(name).tensor; }

const Tensor& ParameterStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end())
    throw ValueError("parameter store: unknown name '" + name + "'");
  return entries_[it->second].tensor;
}

bool ParameterStore::contains(const std::string& name) const {
  return index_.count(name) != 0;
}

void ParameterStore::freeze(const std::string& name) {
  Entry& e = entry(name);
  e.frozen = true;
  e.tensor.set_requires_grad(false);
  e.tensor.zero_grad();
}

void ParameterStore::unfreeze(const std::string& name) {
  Entry& e = entry(name);
  e.frozen = false;
  e.tensor.set_requires_grad(true);
}

void ParameterStore::freeze_prefix(const std::string& prefix) {
  for (Entry& e : entries_)
    if (e.name.rfind(prefix, 0) == 0) {
      e.frozen = true;
      e.tensor.set_requires_grad(false);
      e.tensor.zero_grad();
    }
}

void ParameterStore::freeze_all() {
  for (Entry& e : entries_) {
    e.frozen = true;
    e.tensor.set_requires_grad(false);
    e.tensor.zero_grad();
  }
}

Index ParameterStore::trainable_count() const {
  Index n = 0;
  for (const Entry& e : entries_)
    if (!e.frozen) n += e.tensor.size();
  return n;
}

Index ParameterStore::total_count() const {
  Index n = 0;
  for (const Entry& e : entries_) n += e.tensor.size();
  return n;
}

void ParameterStore::zero_grads() {
  for (Entry& e : entries_) e.tensor.zero_grad();
}

std::vector<Array> ParameterStore::snapshot_values() const {
  std::vector<Array> out;
  out.reserve(entries_.size());
  for (const Entry& e : entries_) out.push_back(e.tensor.value());
  return out;
}

void ParameterStore::restore_values(const std::vector<Array>& values) {
  if (values.size() != entries_.size())
    throw ValueError("parameter store: snapshot size mismatch");
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i].size() != entries_[i].tensor.size())
      throw ShapeError("parameter store: snapshot entry '" + entries_[i].name +
                       "' size mismatch");
    entries_[i].tensor.value() = values[i];
  }
}

// ---------------------------------------------------------------------------
// Initialization and layers
// ---------------------------------------------------------------------------

Tensor uniform_fan_in(Shape shape, Index fan_in, Rng& rng) {
  Scalar bound = std::sqrt(1.0 / static_cast<Scalar>(fan_in));
  Array a(numel(shape));
  rng.fill_uniform(a, -bound, bound);
  return Tensor(std::move(shape), std::move(a));
}

Linear::Linear(ParameterStore& store, const std::string& name, Index in_dim,
               Index out_dim, Rng& rng, bool with_bias)
    : has_bias(with_bias), in(in_dim), out(out_dim) {
  weight = store.add(name + ".weight", uniform_fan_in({out, in}, in, rng));
  if (has_bias) bias = store.add(name + ".bias", Tensor::zeros({out}));
}

Tensor Linear::operator()(const Tensor& x) const {
  if (x.rank() < 1 || x.shape().back() != in)
    throw ShapeError("linear: input " + to_string(x.shape()) +
                     " does not end in width " + std::to_string(in));
  Index rows = x.size() / in;
  Tensor x2 = x.rank() == 2 ? x : reshape(x, {rows, in});
  Tensor y = matmul(x2, weight, false, true);
  if (has_bias) y = add(y, bias);
  if (x.rank() != 2) {
    Shape oshape(x.shape().begin(), x.shape().end() - 1);
    oshape.push_back(out);
    y = reshape(y, std::move(oshape));
  }
  return y;
}

Mlp::Mlp(ParameterStore& store, const std::string& name,
         const std::vector<Index>& dims, Rng& rng, bool with_bias) {
  if (dims.size() < 2) throw ValueError("mlp: need at least two widths");
  for (std::size_t i = 0; i + 1 < dims.size(); ++i)
    layers.emplace_back(store, name + ".l" + std::to_string(i), dims[i],
                        dims[i + 1], rng, with_bias);
}

Tensor Mlp::operator()(const Tensor& x) const {
  Tensor h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    h = layers[i](h);
    if (i + 1 < layers.size()) h = relu(h);
  }
  return h;
}

Tensor dropout(const Tensor& x, Scalar p, Rng* rng) {
  if (rng == nullptr || p <= 0.0) return x;
  if (p >= 1.0) throw ValueError("dropout: p must be < 1");
  Array mask(x.size());
  Scalar keep = 1.0 - p;
  for (Index i = 0; i < mask.size(); ++i)
    mask[i] = rng->bernoulli(keep) ? 1.0 / keep : 0.0;
  return mul(x, Tensor(x.shape(), std::move(mask)));
}

LayerNorm::LayerNorm(ParameterStore& store, const std::string& name, Index d,
                     bool with_bias)
    : has_bias(with_bias), dim(d) {
  gain = store.add(name + ".gain", Tensor::constant({dim}, 1.0));
  if (has_bias) bias = store.add(name + ".bias", Tensor::zeros({dim}));
}

Tensor LayerNorm::operator()(const Tensor& x) const {
  if (x.shape().back() != dim)
    throw ShapeError("layer_norm: input " + to_string(x.shape()) +
                     " does not end in width " + std::to_string(dim));
  Index rows = x.size() / dim;
  Tensor xt = transpose(reshape(x, {rows, dim}));  // [D x R]
  Tensor mu = mean_leading(xt);                    // [R]
  Tensor centered = sub(xt, mu);
  Tensor var = mean_leading(mul(centered, centered));
  Tensor inv = pow(add(var, 1e-5), -0.5);
  Tensor normed = transpose(mul(centered, inv));   // [R x D]
  Tensor y = mul(normed, gain);
  if (has_bias) y = add(y, bias);
  return reshape(y, x.shape());
}

BatchNorm::BatchNorm(ParameterStore& store, const std::string& name, Index c)
    : channels(c) {
  gain = store.add(name + ".gain", Tensor::constant({channels}, 1.0));
  bias = store.add(name + ".bias", Tensor::zeros({channels}));
  running_mean = store.add(name + ".running_mean", Tensor::zeros({channels}));
  running_var = store.add(name + ".running_var", Tensor::constant({channels}, 1.0));
  store.freeze(name + ".running_mean");
  store.freeze(name + ".running_var");
}

Tensor BatchNorm::operator()(const Tensor& x, bool training) {
  bool image = x.rank() == 4;
  if (!image && x.rank() != 2)
    throw ShapeError("batch_norm: expected rank 2 or 4, got " + to_string(x.shape()));
  if (x.dim(1) != channels)
    throw ShapeError("batch_norm: channel extent of " + to_string(x.shape()) +
                     " is not " + std::to_string(channels));
  Tensor rows = image
                    ? reshape(permute(x, {0, 2, 3, 1}), {x.size() / channels, channels})
                    : x;
  Index r = rows.dim(0);
  Tensor normed;
  if (training) {
    Tensor mu = mean_leading(rows);
    Tensor centered = sub(rows, mu);
    Tensor var = mean_leading(mul(centered, centered));
    normed = mul(centered, pow(add(var, eps), -0.5));
    // running statistics track the batch statistics outside the graph
    Scalar unbias = r > 1 ? static_cast<Scalar>(r) / static_cast<Scalar>(r - 1) : 1.0;
    running_mean.value() = (1.0 - momentum) * running_mean.value() + momentum * mu.value();
    running_var.value() =
        (1.0 - momentum) * running_var.value() + momentum * unbias * var.value();
  } else {
    Tensor centered = sub(rows, running_mean);
    Array inv = (running_var.value() + eps).rsqrt();
    normed = mul(centered, Tensor({channels}, std::move(inv)));
  }
  Tensor y = add(mul(normed, gain), bias);
  if (image) {
    Shape hw_last{x.dim(0), x.dim(2), x.dim(3), channels};
    y = permute(reshape(y, hw_last), {0, 3, 1, 2});
  }
  return y;
}

// ---------------------------------------------------------------------------
// LSTM
// ---------------------------------------------------------------------------

LstmStack::LstmStack(ParameterStore& store, const std::string& name, Index in_dim,
                     Index hidden_dim, Index n_layer, Scalar dropout_p, Rng& rng)
    : input(in_dim), hidden(hidden_dim), drop(dropout_p) {
  if (n_layer < 1) throw ValueError("lstm: need at least one layer");
  for (Index l = 0; l < n_layer; ++l) {
    Index in_l = l == 0 ? input : hidden;
    Layer layer;
    std::string p = name + ".l" + std::to_string(l);
    // both weight blocks scale with the hidden width, the usual LSTM scheme
    layer.w_ih = store.add(p + ".w_ih", uniform_fan_in({4 * hidden, in_l}, hidden, rng));
    layer.w_hh = store.add(p + ".w_hh", uniform_fan_in({4 * hidden, hidden}, hidden, rng));
    Tensor b = Tensor::zeros({4 * hidden});
    b.value().segment(hidden, hidden).setConstant(1.0);  // forget gate bias
    layer.b = store.add(p + ".b", b);
    layers.push_back(std::move(layer));
  }
  reset(1);
}

void LstmStack::reset(Index batch) {
  h.clear();
  c.clear();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    h.push_back(Tensor::zeros({batch, hidden}));
    c.push_back(Tensor::zeros({batch, hidden}));
  }
}

Tensor LstmStack::step(const Tensor& x, Rng* dropout_rng) {
  if (x.rank() != 2 || x.dim(1) != input)
    throw ShapeError("lstm: input " + to_string(x.shape()) + " does not match [B, " +
                     std::to_string(input) + "]");
  Tensor inp = x;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const Layer& ly = layers[l];
    Tensor z = add(add(matmul(inp, ly.w_ih, false, true),
                       matmul(h[l], ly.w_hh, false, true)),
                   ly.b);
    Tensor gi = sigmoid(slice(z, 1, 0, hidden));
    Tensor gf = sigmoid(slice(z, 1, hidden, hidden));
    Tensor gc = tanh(slice(z, 1, 2 * hidden, hidden));
    Tensor go = sigmoid(slice(z, 1, 3 * hidden, hidden));
    c[l] = add(mul(gf, c[l]), mul(gi, gc));
    h[l] = mul(go, tanh(c[l]));
    inp = h[l];
    if (l + 1 < layers.size()) inp = dropout(inp, drop, dropout_rng);
  }
  return h.back();
}

// ---------------------------------------------------------------------------
// Transformer
// ---------------------------------------------------------------------------

TransformerDecoder::TransformerDecoder(ParameterStore& store,
                                       const std::string& name,
                                       const TransformerConfig& cfg, Rng& rng)
    : cfg_(cfg) {
  embed_ = Linear(store, name + ".embed", cfg.input_dim, cfg.width, rng, cfg.bias);
  Array pos_init(cfg.max_positions * cfg.width);
  rng.fill_normal(pos_init, 0.0, 0.02);
  pos_ = store.add(name + ".pos", Tensor({cfg.max_positions, cfg.width},
                                         std::move(pos_init)));
  for (Index b = 0; b < cfg.n_layer; ++b) {
    std::string p = name + ".block" + std::to_string(b);
    Block blk;
    blk.ln1 = LayerNorm(store, p + ".ln1", cfg.width, cfg.bias);
    blk.ln2 = LayerNorm(store, p + ".ln2", cfg.width, cfg.bias);
    blk.qkv = Linear(store, p + ".qkv", cfg.width, 3 * cfg.width, rng, cfg.bias);
    blk.proj = Linear(store, p + ".proj", cfg.width, cfg.width, rng, cfg.bias);
    blk.fc_in = Linear(store, p + ".fc_in", cfg.width, 4 * cfg.width, rng, cfg.bias);
    blk.fc_out = Linear(store, p + ".fc_out", 4 * cfg.width, cfg.width, rng, cfg.bias);
    blocks_.push_back(std::move(blk));
  }
  ln_f_ = LayerNorm(store, name + ".ln_f", cfg.width, cfg.bias);
  head_ = Linear(store, name + ".head", cfg.width, cfg.n_class, rng, cfg.bias);

  Array m(cfg.max_positions * cfg.max_positions);
  for (Index i = 0; i < cfg.max_positions; ++i)
    for (Index j = 0; j < cfg.max_positions; ++j)
      m[i * cfg.max_positions + j] = j <= i ? 0.0 : -1e30;
  mask_ = Tensor({cfg.max_positions, cfg.max_positions}, std::move(m));
}

Tensor TransformerDecoder::forward(const Tensor& x, Rng* dropout_rng,
                                   Tensor* last_block_out) const {
  if (x.rank() != 3 || x.dim(2) != cfg_.input_dim)
    throw ShapeError("transformer: input " + to_string(x.shape()) +
                     " does not match [B, T, " + std::to_string(cfg_.input_dim) + "]");
  Index batch = x.dim(0), t_len = x.dim(1);
  if (t_len > cfg_.max_positions)
    throw ShapeError("transformer: sequence length " + std::to_string(t_len) +
                     " exceeds " + std::to_string(cfg_.max_positions) + " positions");
  const Index w = cfg_.width, nh = cfg_.n_head, hd = w / nh;
  Scalar p = cfg_.dropout;

  Tensor h = add(embed_(x), slice(pos_, 0, 0, t_len));
  h = dropout(h, p, dropout_rng);
  Tensor mask = slice(slice(mask_, 0, 0, t_len), 1, 0, t_len);

  auto split_heads = [&](const Tensor& t) {
    return reshape(permute(reshape(t, {batch, t_len, nh, hd}), {0, 2, 1, 3}),
                   {batch * nh, t_len, hd});
  };

  for (const Block& blk : blocks_) {
    Tensor a = blk.ln1(h);
    Tensor qkv = blk.qkv(a);  // [B, T, 3W]
    Tensor q = split_heads(slice(qkv, 2, 0, w));
    Tensor k = split_heads(slice(qkv, 2, w, w));
    Tensor v = split_heads(slice(qkv, 2, 2 * w, w));
    Tensor att = mul(bmm(q, k, false, true), 1.0 / std::sqrt(static_cast<Scalar>(hd)));
    att = softmax(add(att, mask));
    att = dropout(att, p, dropout_rng);
    Tensor o = bmm(att, v);  // [B*H, T, hd]
    o = reshape(permute(reshape(o, {batch, nh, t_len, hd}), {0, 2, 1, 3}),
                {batch, t_len, w});
    h = add(h, dropout(blk.proj(o), p, dropout_rng));
    Tensor m = blk.fc_out(gelu(blk.fc_in(blk.ln2(h))));
    h = add(h, dropout(m, p, dropout_rng));
  }
  if (last_block_out) *last_block_out = h;
  return head_(ln_f_(h));
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

void AdamW::step(ParameterStore& store) {
  ++t_;
  Scalar bc1 = 1.0 - std::pow(beta1_, static_cast<Scalar>(t_));
  Scalar bc2 = 1.0 - std::pow(beta2_, static_cast<Scalar>(t_));
  for (auto& e : store.entries()) {
    if (e.frozen) continue;
    if (!e.tensor.has_grad())
      throw ValueError("adamw: missing gradient for unfrozen parameter '" +
                       e.name + "'");
    Moments& mo = moments_[e.name];
    const Array& g = e.tensor.grad();
    if (mo.m.size() == 0) {
      mo.m = Array::Zero(g.size());
      mo.v = Array::Zero(g.size());
    }
    mo.m = beta1_ * mo.m + (1.0 - beta1_) * g;
    mo.v = beta2_ * mo.v + (1.0 - beta2_) * g.square();
    Array& w = e.tensor.value();
    if (weight_decay_ != 0.0) w -= lr_ * weight_decay_ * w;
    w -= lr_ * (mo.m / bc1) / ((mo.v / bc2).sqrt() + eps_);
    e.tensor.zero_grad();
  }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'G', 'W', 'A', 'D', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 8);
}

void put_f64(std::ostream& os, double v) {
  put_u64(os, std::bit_cast<std::uint64_t>(v));
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

double get_f64(std::istream& is) { return std::bit_cast<double>(get_u64(is)); }

}  // namespace

void save_checkpoint(const ParameterStore& store, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("checkpoint: cannot open '" + path + "' for writing");
  os.write(kMagic, 8);
  put_u32(os, kVersion);
  put_u64(os, store.size());
  for (const auto& e : store.entries()) {
    put_u32(os, static_cast<std::uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    put_u32(os, static_cast<std::uint32_t>(e.tensor.rank()));
    for (Index d : e.tensor.shape()) put_u64(os, static_cast<std::uint64_t>(d));
    for (Index i = 0; i < e.tensor.size(); ++i) put_f64(os, e.tensor.value()[i]);
  }
  if (!os) throw IoError("checkpoint: write to '" + path + "' failed");
}

ParameterStore load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open '" + path + "'");
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0)
    throw IoError("checkpoint: bad magic in '" + path + "'");
  std::uint32_t version = get_u32(is);
  if (version != kVersion)
    throw IoError("checkpoint: unsupported format version " +
                  std::to_string(version) + " in '" + path + "'");
  std::uint64_t count = get_u64(is);
  ParameterStore store;
  for (std::uint64_t i = 0; i < count; ++i) {
    std::uint32_t name_len = get_u32(is);
    if (!is || name_len > (1u << 20))
      throw IoError("checkpoint: corrupt entry header in '" + path + "'");
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    std::uint32_t rank = get_u32(is);
    if (!is || rank > 8) throw IoError("checkpoint: corrupt shape in '" + path + "'");
    Shape shape(rank);
    for (std::uint32_t d = 0; d < rank; ++d)
      shape[d] = static_cast<Index>(get_u64(is));
    Index n = numel(shape);
    Array data(n);
    for (Index j = 0; j < n; ++j) data[j] = get_f64(is);
    if (!is) throw IoError("checkpoint: truncated data in '" + path + "'");
    store.add(name, Tensor(std::move(shape), std::move(data)));
  }
  return store;
}

void copy_values(const ParameterStore& src, ParameterStore& dst) {
  for (const auto& e : src.entries()) {
    Tensor& t = dst.at(e.name);
    if (t.shape() != e.tensor.shape())
      throw ShapeError("checkpoint: parameter '" + e.name + "' has shape " +
                       to_string(e.tensor.shape()) + ", expected " +
                       to_string(t.shape()));
    t.value() = e.tensor.value();
  }
}

}  // namespace gw::nn
