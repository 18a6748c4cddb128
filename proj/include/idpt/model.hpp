#pragma once

#include <cstdint>
#include <string>

#include "idpt/corpus.hpp"
#include "idpt/prefix.hpp"
#include "idpt/recognizer.hpp"
#include "idpt/transformer.hpp"

namespace idpt {

struct ModelConfig {
  Index hidden = 64;
  Index enc_layers = 2;
  Index dec_layers = 2;
  Index heads = 4;
  Index vocab_size = 0;  // from the corpus
  Index max_seq_len = 128;
  Index prefix_len = 5;
  Index n_initiatives = kNumInitiatives;

  void validate() const {
    if (hidden < 2 || heads < 1 || hidden % heads != 0)
      throw ConfigError("hidden must be >= 2 and divisible by heads");
    if (enc_layers < 1 || dec_layers < 1) throw ConfigError("layer counts must be positive");
    if (vocab_size <= Vocab::kKno) throw ConfigError("vocab_size must cover the special tokens");
    if (prefix_len < 1) throw ConfigError("prefix_len must be positive");
    if (n_initiatives < 2) throw ConfigError("n_initiatives must be >= 2");
    if (max_seq_len < prefix_len + 2) throw ConfigError("max_seq_len too small for the prefix");
  }
};

// The full IDPT model. Parameter registration order (encoder, decoder, bank,
// recognizer) fixes the checkpoint manifest order. Not copyable: the param
// set holds pointers into the components.
template <typename T>
class IdptModel {
 public:
  ModelConfig cfg;
  Vocab vocab;
  EncoderStack<T> encoder;
  DecoderStack<T> decoder;
  PrefixBank<T> bank;
  Recognizer<T> recognizer;

  IdptModel(const ModelConfig& config, Vocab v, std::uint32_t seed) : cfg(config), vocab(std::move(v)) {
    cfg.validate();
    if (vocab.size() != cfg.vocab_size) throw ConfigError("vocab size does not match config");
    {
      Rng rng(derive_seed(seed, "encoder-init"));
      encoder.init(cfg.vocab_size, cfg.hidden, cfg.enc_layers, cfg.heads, cfg.max_seq_len, rng);
    }
    {
      Rng rng(derive_seed(seed, "decoder-init"));
      decoder.init(cfg.vocab_size, cfg.hidden, cfg.dec_layers, cfg.heads, cfg.max_seq_len, rng);
    }
    {
      Rng rng(derive_seed(seed, "bank-init"));
      bank.init(cfg.n_initiatives, cfg.prefix_len, cfg.hidden, cfg.dec_layers, rng);
    }
    {
      Rng rng(derive_seed(seed, "recognizer-init"));
      recognizer.init(cfg.hidden, cfg.heads, rng);
    }
    encoder.register_params(params_);
    decoder.register_params(params_);
    bank.register_params(params_);
    recognizer.register_params(params_);
  }

  IdptModel(const IdptModel&) = delete;
  IdptModel& operator=(const IdptModel&) = delete;

  ParamSet<T>& params() { return params_; }

  EncodedDialogue<T> encode_example(Tape<T>& t, const DialogueExample& ex) {
    EncodedDialogue<T> out;
    out.ids = encode_context_ids(ex, vocab, cfg.max_seq_len);
    out.hidden = encoder.encode(t, out.ids);
    return out;
  }

 private:
  ParamSet<T> params_;
};

}  // namespace idpt
