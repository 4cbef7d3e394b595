#pragma once

// BERT-style post-LN transformer encoder that exposes every intermediate
// quantity distillation consumes, plus a classification head and the domain
// sub-network h_d = tanh((h + E_D[d]) W + b) with its K-way classifier.

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "mkd/batch.hpp"
#include "mkd/checkpoint.hpp"
#include "mkd/loss.hpp"
#include "mkd/ops.hpp"
#include "mkd/optim.hpp"

namespace mkd {

enum class Pooling { mean, sum };
enum class ClassifierInput { pooled, cls };

struct EncoderConfig {
  std::size_t vocab_size = 512;
  std::size_t max_seq_len = 32;
  std::size_t num_layers = 4;
  std::size_t hidden_dim = 64;
  std::size_t num_heads = 4;
  std::size_t ffn_dim = 128;
  std::size_t num_classes = 2;
  std::size_t num_domains = 3;
  double dropout = 0.1;
  Pooling pooling = Pooling::mean;
  ClassifierInput classifier_input = ClassifierInput::pooled;

  void validate() const {
    if (num_layers < 1) throw std::invalid_argument("EncoderConfig: num_layers must be >= 1");
    if (max_seq_len < 2) throw std::invalid_argument("EncoderConfig: max_seq_len must be >= 2");
    if (num_heads == 0 || hidden_dim % num_heads != 0) {
      throw std::invalid_argument("EncoderConfig: hidden_dim " + std::to_string(hidden_dim) +
                                  " not divisible by num_heads " + std::to_string(num_heads));
    }
    if (vocab_size <= static_cast<std::size_t>(kNumReserved)) throw std::invalid_argument("EncoderConfig: vocab too small");
    if (num_classes < 1 || num_domains < 1) throw std::invalid_argument("EncoderConfig: need >= 1 class and domain");
    if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("EncoderConfig: dropout outside [0, 1)");
  }

  static EncoderConfig teacher_default() { return {}; }
  static EncoderConfig student_default() {
    EncoderConfig c;
    c.num_layers = 2;
    c.hidden_dim = 32;
    c.ffn_dim = 64;
    return c;
  }
};

inline void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = {{"vocab_size", c.vocab_size},   {"max_seq_len", c.max_seq_len}, {"num_layers", c.num_layers},
       {"hidden_dim", c.hidden_dim},   {"num_heads", c.num_heads},     {"ffn_dim", c.ffn_dim},
       {"num_classes", c.num_classes}, {"num_domains", c.num_domains}, {"dropout", c.dropout},
       {"pooling", c.pooling == Pooling::mean ? "mean" : "sum"},
       {"classifier_input", c.classifier_input == ClassifierInput::pooled ? "pooled" : "cls"}};
}

inline void from_json(const nlohmann::json& j, EncoderConfig& c) {
  EncoderConfig d = c;
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.max_seq_len = j.value("max_seq_len", d.max_seq_len);
  c.num_layers = j.value("num_layers", d.num_layers);
  c.hidden_dim = j.value("hidden_dim", d.hidden_dim);
  c.num_heads = j.value("num_heads", d.num_heads);
  c.ffn_dim = j.value("ffn_dim", d.ffn_dim);
  c.num_classes = j.value("num_classes", d.num_classes);
  c.num_domains = j.value("num_domains", d.num_domains);
  c.dropout = j.value("dropout", d.dropout);
  const auto pool = j.value("pooling", std::string(d.pooling == Pooling::mean ? "mean" : "sum"));
  if (pool != "mean" && pool != "sum") throw std::invalid_argument("pooling must be mean|sum, got " + pool);
  c.pooling = pool == "mean" ? Pooling::mean : Pooling::sum;
  const auto ci = j.value("classifier_input", std::string(d.classifier_input == ClassifierInput::pooled ? "pooled" : "cls"));
  if (ci != "pooled" && ci != "cls") throw std::invalid_argument("classifier_input must be pooled|cls, got " + ci);
  c.classifier_input = ci == "pooled" ? ClassifierInput::pooled : ClassifierInput::cls;
}

/// Observable surface of one encoder pass.
struct ForwardTrace {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  Tensor embedding_out;                  // [B, N, H]
  std::vector<Tensor> hidden_states;     // L x [B, N, H]
  std::vector<Tensor> attention_scores;  // L x [B, A, N, N], scaled, pre-softmax
  Tensor pooled;                         // [B, H]
  Tensor transfer_vec;                   // [B, H]
  Tensor class_logits;                   // [B, M]
  Tensor domain_logits;                  // [B, K]
};

struct DomainSubnet {
  Tensor domain_embedding;  // [K x H]
  Tensor weight;            // [H x H]
  Tensor bias;              // [H]
  Tensor classifier_weight; // [H x K]
  Tensor classifier_bias;   // [K]
};

/// Pooled sentence vector over non-padding positions.
inline Tensor pool(const Tensor& final_hidden, std::span<const int> mask, Pooling mode = Pooling::mean) {
  return masked_pool(final_hidden, mask, mode == Pooling::mean);
}

struct TransferOutput {
  Tensor transfer_vec;
  Tensor domain_logits;
};

inline TransferOutput transfer_head(const Tensor& pooled, std::span<const int> domain_labels, const DomainSubnet& net) {
  const std::size_t k = net.domain_embedding.dim(0);
  for (int d : domain_labels) {
    if (d < 0 || static_cast<std::size_t>(d) >= k) {
      throw std::out_of_range("transfer_head: domain label " + std::to_string(d) + " outside " + std::to_string(k) +
                              " domains");
    }
  }
  Tensor shifted = add(pooled, embedding(net.domain_embedding, domain_labels));
  Tensor tv = tanh(linear(shifted, net.weight, net.bias));
  Tensor dl = linear(tv, net.classifier_weight, net.classifier_bias);
  return {tv, dl};
}

class Encoder {
 public:
  Encoder(EncoderConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    const std::size_t h = cfg_.hidden_dim;
    auto mat = [&](const std::string& name, Shape s) -> Tensor& { return store_.add(name, normal_init(std::move(s), 0.02, rng)); };
    auto vec = [&](const std::string& name, std::size_t n, double v) -> Tensor& { return store_.add(name, Tensor::full({n}, v)); };

    tok_emb_ = mat("embeddings.token", {cfg_.vocab_size, h});
    pos_emb_ = mat("embeddings.position", {cfg_.max_seq_len, h});
    emb_ln_g_ = vec("embeddings.ln.gain", h, 1.0);
    emb_ln_b_ = vec("embeddings.ln.bias", h, 0.0);
    for (std::size_t l = 0; l < cfg_.num_layers; ++l) {
      const std::string p = "encoder.layer" + std::to_string(l) + ".";
      Layer L;
      L.wq = mat(p + "attn.wq", {h, h});
      L.bq = vec(p + "attn.bq", h, 0.0);
      L.wk = mat(p + "attn.wk", {h, h});
      L.bk = vec(p + "attn.bk", h, 0.0);
      L.wv = mat(p + "attn.wv", {h, h});
      L.bv = vec(p + "attn.bv", h, 0.0);
      L.wo = mat(p + "attn.wo", {h, h});
      L.bo = vec(p + "attn.bo", h, 0.0);
      L.ln1_g = vec(p + "attn.ln.gain", h, 1.0);
      L.ln1_b = vec(p + "attn.ln.bias", h, 0.0);
      L.w1 = mat(p + "ffn.w1", {h, cfg_.ffn_dim});
      L.b1 = vec(p + "ffn.b1", cfg_.ffn_dim, 0.0);
      L.w2 = mat(p + "ffn.w2", {cfg_.ffn_dim, h});
      L.b2 = vec(p + "ffn.b2", h, 0.0);
      L.ln2_g = vec(p + "ffn.ln.gain", h, 1.0);
      L.ln2_b = vec(p + "ffn.ln.bias", h, 0.0);
      layers_.push_back(L);
    }
    cls_w_ = mat("classifier.weight", {h, cfg_.num_classes});
    cls_b_ = vec("classifier.bias", cfg_.num_classes, 0.0);
    subnet_.domain_embedding = mat("domain.embedding", {cfg_.num_domains, h});
    subnet_.weight = mat("domain.subnet.weight", {h, h});
    subnet_.bias = vec("domain.subnet.bias", h, 0.0);
    subnet_.classifier_weight = mat("domain.classifier.weight", {h, cfg_.num_domains});
    subnet_.classifier_bias = vec("domain.classifier.bias", cfg_.num_domains, 0.0);
  }

  Encoder(const Encoder&) = delete;
  Encoder& operator=(const Encoder&) = delete;
  Encoder(Encoder&&) = default;
  Encoder& operator=(Encoder&&) = default;

  /// Deep copy with independent parameter storage.
  Encoder clone() const {
    Encoder e(cfg_, 0);
    e.store_.restore(store_.snapshot());
    return e;
  }

  const EncoderConfig& config() const { return cfg_; }
  ParameterStore& params() { return store_; }
  const ParameterStore& params() const { return store_; }
  const DomainSubnet& subnet() const { return subnet_; }

  /// Runs the encoder. Dropout is active only when `training` and an RNG is given.
  ForwardTrace encode(const Batch& batch, bool training = false, std::mt19937_64* rng = nullptr) const {
    validate_batch(batch);
    const std::size_t b = batch.size, n = batch.seq_len, h = cfg_.hidden_dim;
    const bool drop = training && rng != nullptr && cfg_.dropout > 0.0;
    std::mt19937_64 dummy;
    std::mt19937_64& r = rng ? *rng : dummy;

    ForwardTrace tr;
    tr.batch = b;
    tr.seq_len = n;
    std::vector<int> pos(b * n);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t t = 0; t < n; ++t) pos[i * n + t] = static_cast<int>(t);
    Tensor x = reshape(add(embedding(tok_emb_, batch.token_ids), embedding(pos_emb_, pos)), {b, n, h});
    x = dropout(layer_norm(x, emb_ln_g_, emb_ln_b_), cfg_.dropout, drop, r);
    tr.embedding_out = x;

    for (const auto& L : layers_) {
      Tensor q = linear(x, L.wq, L.bq);
      Tensor k = linear(x, L.wk, L.bk);
      Tensor v = linear(x, L.wv, L.bv);
      Tensor scores = attention_scores(q, k, b, n, cfg_.num_heads);
      tr.attention_scores.push_back(scores);
      Tensor probs = dropout(masked_attention_softmax(scores, batch.mask), cfg_.dropout, drop, r);
      Tensor attn = dropout(linear(attention_context(probs, v), L.wo, L.bo), cfg_.dropout, drop, r);
      x = layer_norm(add(x, attn), L.ln1_g, L.ln1_b);
      Tensor ff = dropout(linear(gelu(linear(x, L.w1, L.b1)), L.w2, L.b2), cfg_.dropout, drop, r);
      x = layer_norm(add(x, ff), L.ln2_g, L.ln2_b);
      tr.hidden_states.push_back(x);
    }

    tr.pooled = pool(x, batch.mask, cfg_.pooling);
    const Tensor& cls_in = cfg_.classifier_input == ClassifierInput::pooled ? tr.pooled : first_token(x);
    tr.class_logits = linear(cls_in, cls_w_, cls_b_);
    auto th = transfer_head(tr.pooled, batch.domain_labels, subnet_);
    tr.transfer_vec = th.transfer_vec;
    tr.domain_logits = th.domain_logits;
    return tr;
  }

  nlohmann::json manifest() const {
    nlohmann::json names = nlohmann::json::array();
    for (const auto& p : store_.all()) names.push_back(p.name);
    return {{"kind", "encoder"}, {"config", cfg_}, {"parameters", names}};
  }

  Checkpoint to_checkpoint(nlohmann::json extra = nlohmann::json::object()) const {
    auto meta = manifest();
    for (auto it = extra.begin(); it != extra.end(); ++it) meta[it.key()] = it.value();
    return mkd::to_checkpoint(store_, std::move(meta));
  }

  static Encoder from_checkpoint(const Checkpoint& c) {
    if (c.meta.value("kind", "") != "encoder") throw std::runtime_error("checkpoint is not an encoder");
    Encoder e(c.meta.at("config").get<EncoderConfig>(), 0);
    load_into(e.store_, c);
    return e;
  }

 private:
  struct Layer {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo, ln1_g, ln1_b, w1, b1, w2, b2, ln2_g, ln2_b;
  };

  void validate_batch(const Batch& batch) const {
    if (batch.size == 0 || batch.seq_len == 0) throw std::invalid_argument("encode: empty batch");
    if (batch.seq_len > cfg_.max_seq_len) {
      throw std::invalid_argument("encode: sequence length " + std::to_string(batch.seq_len) + " exceeds max_seq_len " +
                                  std::to_string(cfg_.max_seq_len));
    }
    const std::size_t cells = batch.size * batch.seq_len;
    if (batch.token_ids.size() != cells || batch.mask.size() != cells || batch.domain_labels.size() != batch.size) {
      throw DimensionError("encode: batch arrays inconsistent with " + std::to_string(batch.size) + "x" +
                           std::to_string(batch.seq_len));
    }
    for (int id : batch.token_ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab_size) {
        throw std::out_of_range("encode: token id " + std::to_string(id) + " outside vocabulary of " +
                                std::to_string(cfg_.vocab_size));
      }
    }
  }

  EncoderConfig cfg_;
  ParameterStore store_;
  Tensor tok_emb_, pos_emb_, emb_ln_g_, emb_ln_b_;
  std::vector<Layer> layers_;
  Tensor cls_w_, cls_b_;
  DomainSubnet subnet_;
};

}  // namespace mkd
