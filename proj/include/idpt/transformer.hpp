#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "idpt/autodiff.hpp"
#include "idpt/corpus.hpp"
#include "idpt/error.hpp"
#include "idpt/rng.hpp"
#include "idpt/tensor.hpp"

namespace idpt {

// ---- building blocks ----

template <typename T>
struct LinearLayer {
  Parameter<T> w;  // in x out
  Parameter<T> b;  // out

  void init(const std::string& name, Index in, Index out, Rng& rng) {
    w.name = name;
    b.name = name + "_b";
    w.tensor = Tensor<T>({in, out});
    b.tensor = Tensor<T>({out});
    double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    for (auto& v : w.tensor.data) v = static_cast<T>(rng.uniform(-limit, limit));
  }

  void register_params(ParamSet<T>& set) {
    set.add(&w);
    set.add(&b);
  }

  typename Tape<T>::Var forward(Tape<T>& t, typename Tape<T>::Var x) {
    return t.add_row_broadcast(t.matmul(x, t.param(w)), t.param(b));
  }
};

template <typename T>
struct LayerNormLayer {
  Parameter<T> gain, bias;
  T eps = T(1e-5);

  void init(const std::string& name, Index h) {
    if (h < 2) throw ConfigError("layer norm width must be >= 2, got " + std::to_string(h));
    gain.name = name + ".gain";
    bias.name = name + ".bias";
    gain.tensor = Tensor<T>::full({h}, T(1));
    bias.tensor = Tensor<T>({h});
  }

  void register_params(ParamSet<T>& set) {
    set.add(&gain);
    set.add(&bias);
  }

  typename Tape<T>::Var forward(Tape<T>& t, typename Tape<T>::Var x) {
    return t.layer_norm(x, t.param(gain), t.param(bias), eps);
  }
};

// Per-layer injected prefix entries, as tape variables (training path).
template <typename T>
struct PrefixVars {
  std::vector<typename Tape<T>::Var> keys;    // one |P| x h block per layer
  std::vector<typename Tape<T>::Var> values;  // same layout
};

// Same data as plain tensors (generation path).
template <typename T>
struct PastKeyValues {
  std::vector<Tensor<T>> keys;
  std::vector<Tensor<T>> values;

  Index layer_count() const { return static_cast<Index>(keys.size()); }
  Index prefix_len() const { return keys.empty() ? 0 : keys[0].shape[0]; }
};

// One post-norm transformer block: self-attention (optionally causal with
// injected prefix K/V rows), then a GELU feed-forward, each followed by a
// residual layer norm.
template <typename T>
struct TransformerBlock {
  LinearLayer<T> wq, wk, wv, wo;
  LinearLayer<T> ffn1, ffn2;
  LayerNormLayer<T> ln1, ln2;
  Index hidden = 0;
  Index heads = 0;

  void init(const std::string& name, Index h, Index k_heads, Index ffn_dim, Rng& rng) {
    if (h % k_heads != 0)
      throw ConfigError("hidden size " + std::to_string(h) + " not divisible by heads " +
                        std::to_string(k_heads));
    hidden = h;
    heads = k_heads;
    wq.init(name + ".attn.wq", h, h, rng);
    wk.init(name + ".attn.wk", h, h, rng);
    wv.init(name + ".attn.wv", h, h, rng);
    wo.init(name + ".attn.wo", h, h, rng);
    ffn1.init(name + ".ffn.w1", h, ffn_dim, rng);
    ffn2.init(name + ".ffn.w2", ffn_dim, h, rng);
    ln1.init(name + ".ln1", h);
    ln2.init(name + ".ln2", h);
  }

  void register_params(ParamSet<T>& set) {
    wq.register_params(set);
    wk.register_params(set);
    wv.register_params(set);
    wo.register_params(set);
    ffn1.register_params(set);
    ffn2.register_params(set);
    ln1.register_params(set);
    ln2.register_params(set);
  }

  // prefix_k / prefix_v: optional |P| x h blocks injected ahead of the
  // token K/V rows. causal limits token i to prefix plus tokens <= i.
  typename Tape<T>::Var forward(Tape<T>& t, typename Tape<T>::Var x, bool causal,
                                const typename Tape<T>::Var* prefix_k = nullptr,
                                const typename Tape<T>::Var* prefix_v = nullptr) {
    using Var = typename Tape<T>::Var;
    const Index len = t.val(x).shape[0];
    const Index p_len = prefix_k ? t.val(*prefix_k).shape[0] : 0;
    const Index d_z = hidden / heads;

    Var q = wq.forward(t, x);
    Var k = wk.forward(t, x);
    Var v = wv.forward(t, x);
    Var k_full = prefix_k ? t.concat_rows({*prefix_k, k}) : k;
    Var v_full = prefix_v ? t.concat_rows({*prefix_v, v}) : v;

    Var mask = -1;
    if (causal) {
      Tensor<T> m({len, p_len + len});
      for (Index i = 0; i < len; ++i)
        for (Index j = 0; j < p_len + len; ++j)
          m.at(i, j) = (j < p_len || j - p_len <= i) ? T(0) : T(-1e30);
      mask = t.leaf(std::move(m));
    }

    std::vector<Var> head_outputs;
    head_outputs.reserve(static_cast<std::size_t>(heads));
    for (Index m = 0; m < heads; ++m) {
      Var q_m = t.slice_cols(q, m * d_z, (m + 1) * d_z);
      Var k_m = t.slice_cols(k_full, m * d_z, (m + 1) * d_z);
      Var v_m = t.slice_cols(v_full, m * d_z, (m + 1) * d_z);
      Var e = t.scale(t.matmul_bt(q_m, k_m), T(1) / static_cast<T>(std::sqrt(static_cast<double>(d_z))));
      if (causal) e = t.add(e, mask);
      Var alpha = t.softmax_rows(e);
      head_outputs.push_back(t.matmul(alpha, v_m));
    }
    Var attn = wo.forward(t, t.concat_cols(head_outputs));
    x = ln1.forward(t, t.add(x, attn));
    Var f = ffn2.forward(t, t.gelu(ffn1.forward(t, x)));
    return ln2.forward(t, t.add(x, f));
  }
};

// ---- encoder ----

template <typename T>
struct EncoderStack {
  Parameter<T> tok_emb;  // |V| x h
  Parameter<T> pos_emb;  // max_seq_len x h
  std::vector<TransformerBlock<T>> blocks;
  Index hidden = 0;
  Index max_seq_len = 0;

  void init(Index vocab, Index h, Index layers, Index k_heads, Index max_len, Rng& rng) {
    hidden = h;
    max_seq_len = max_len;
    tok_emb.name = "encoder.tok_emb";
    pos_emb.name = "encoder.pos_emb";
    tok_emb.tensor = Tensor<T>({vocab, h});
    pos_emb.tensor = Tensor<T>({max_len, h});
    for (auto& v : tok_emb.tensor.data) v = static_cast<T>(rng.uniform(-0.1, 0.1));
    for (auto& v : pos_emb.tensor.data) v = static_cast<T>(rng.uniform(-0.1, 0.1));
    blocks.resize(static_cast<std::size_t>(layers));
    for (Index l = 0; l < layers; ++l)
      blocks[static_cast<std::size_t>(l)].init("encoder.layer" + std::to_string(l), h, k_heads,
                                               4 * h, rng);
  }

  void register_params(ParamSet<T>& set) {
    set.add(&tok_emb);
    set.add(&pos_emb);
    for (auto& b : blocks) b.register_params(set);
  }

  void set_trainable(bool trainable) {
    ParamSet<T> tmp;
    register_params(tmp);
    for (Parameter<T>* p : tmp.ordered()) p->trainable = trainable;
  }

  /// Contextualized representation of the ids, shape |S| x h. Inputs longer
  /// than max_seq_len keep their knowledge prefix (up to the first <sep>)
  /// and lose oldest tokens from the middle.
  typename Tape<T>::Var encode(Tape<T>& t, std::vector<Index> ids) {
    if (ids.empty()) throw ShapeError("encode: empty input");
    if (static_cast<Index>(ids.size()) > max_seq_len) {
      std::size_t kno_end = 0;
      while (kno_end < ids.size() && ids[kno_end] != Vocab::kSep) ++kno_end;
      std::size_t keep_tail = static_cast<std::size_t>(max_seq_len) - kno_end;
      std::vector<Index> trimmed(ids.begin(), ids.begin() + static_cast<long>(kno_end));
      trimmed.insert(trimmed.end(), ids.end() - static_cast<long>(keep_tail), ids.end());
      ids = std::move(trimmed);
    }
    std::vector<Index> positions(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) positions[i] = static_cast<Index>(i);
    auto x = t.add(t.embed_rows(t.param(tok_emb), ids), t.embed_rows(t.param(pos_emb), positions));
    for (auto& b : blocks) x = b.forward(t, x, /*causal=*/false);
    return x;
  }
};

// Encoder output together with the ids it came from.
template <typename T>
struct EncodedDialogue {
  typename Tape<T>::Var hidden;  // |S| x h
  std::vector<Index> ids;
};

// ---- decoder ----

template <typename T>
struct DecoderStack {
  Parameter<T> tok_emb;
  Parameter<T> pos_emb;
  Parameter<T> w_out;  // h x |V|, no bias
  std::vector<TransformerBlock<T>> blocks;
  Index hidden = 0;
  Index max_seq_len = 0;
  Index vocab_size = 0;
  bool frozen = false;

  void init(Index vocab, Index h, Index layers, Index k_heads, Index max_len, Rng& rng) {
    hidden = h;
    max_seq_len = max_len;
    vocab_size = vocab;
    tok_emb.name = "decoder.tok_emb";
    pos_emb.name = "decoder.pos_emb";
    w_out.name = "decoder.w_out";
    tok_emb.tensor = Tensor<T>({vocab, h});
    pos_emb.tensor = Tensor<T>({max_len, h});
    w_out.tensor = Tensor<T>({h, vocab});
    for (auto& v : tok_emb.tensor.data) v = static_cast<T>(rng.uniform(-0.1, 0.1));
    for (auto& v : pos_emb.tensor.data) v = static_cast<T>(rng.uniform(-0.1, 0.1));
    double limit = std::sqrt(6.0 / static_cast<double>(h + vocab));
    for (auto& v : w_out.tensor.data) v = static_cast<T>(rng.uniform(-limit, limit));
    blocks.resize(static_cast<std::size_t>(layers));
    for (Index l = 0; l < layers; ++l)
      blocks[static_cast<std::size_t>(l)].init("decoder.layer" + std::to_string(l), h, k_heads,
                                               4 * h, rng);
  }

  void register_params(ParamSet<T>& set) {
    set.add(&tok_emb);
    set.add(&pos_emb);
    set.add(&w_out);
    for (auto& b : blocks) b.register_params(set);
  }

  Index layer_count() const { return static_cast<Index>(blocks.size()); }

  void set_frozen(bool value) {
    frozen = value;
    ParamSet<T> tmp;
    register_params(tmp);
    for (Parameter<T>* p : tmp.ordered()) p->trainable = !value;
  }

  /// Next-token logits (|ids| x |V|) for the given target ids, with optional
  /// per-layer prefix K/V injected ahead of the tokens. Token positions
  /// start at the prefix length; prefix rows are attended to by every token
  /// and are never predicted.
  typename Tape<T>::Var decode_with_prefix(Tape<T>& t, const std::vector<Index>& ids,
                                           const PrefixVars<T>* prefix) {
    Index p_len = 0;
    if (prefix && !prefix->keys.empty()) {
      if (static_cast<Index>(prefix->keys.size()) != layer_count())
        throw ConfigError("prefix has " + std::to_string(prefix->keys.size()) + " layers, decoder has " +
                          std::to_string(layer_count()));
      p_len = t.val(prefix->keys[0]).shape[0];
    }
    return forward_at_offset(t, ids, prefix, p_len);
  }

  /// Decoder pass with an explicit position offset for the token rows.
  /// Pretraining uses random offsets so every position the prefix will later
  /// shift tokens onto has trained embeddings.
  typename Tape<T>::Var forward_at_offset(Tape<T>& t, const std::vector<Index>& ids,
                                          const PrefixVars<T>* prefix, Index pos_offset) {
    if (ids.empty()) throw ShapeError("decode: empty target");
    if (pos_offset + static_cast<Index>(ids.size()) > max_seq_len)
      throw ShapeError("decode: sequence of " + std::to_string(ids.size()) + " at offset " +
                       std::to_string(pos_offset) + " exceeds max_seq_len " + std::to_string(max_seq_len));
    std::vector<Index> positions(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) positions[i] = pos_offset + static_cast<Index>(i);
    auto x = t.add(t.embed_rows(t.param(tok_emb), ids), t.embed_rows(t.param(pos_emb), positions));
    bool has_prefix = prefix && !prefix->keys.empty();
    for (std::size_t l = 0; l < blocks.size(); ++l) {
      auto* pk = has_prefix ? &prefix->keys[l] : nullptr;
      auto* pv = has_prefix ? &prefix->values[l] : nullptr;
      x = blocks[l].forward(t, x, /*causal=*/true, pk, pv);
    }
    return t.matmul(x, t.param(w_out));
  }

  // ---- incremental generation (no tape, KV cache) ----

  struct GenState {
    std::vector<std::vector<T>> key_rows;    // per layer, flat rows of h
    std::vector<std::vector<T>> value_rows;  // per layer
    std::vector<Index> cached_rows;          // per layer
    Index next_pos = 0;
  };

  GenState start_state(const PastKeyValues<T>* prefix) {
    GenState s;
    const std::size_t layers = blocks.size();
    s.key_rows.resize(layers);
    s.value_rows.resize(layers);
    s.cached_rows.assign(layers, 0);
    if (prefix && prefix->layer_count() > 0) {
      if (prefix->layer_count() != layer_count())
        throw ConfigError("prefix has " + std::to_string(prefix->layer_count()) + " layers, decoder has " +
                          std::to_string(layer_count()));
      for (std::size_t l = 0; l < layers; ++l) {
        s.key_rows[l].assign(prefix->keys[l].data.begin(), prefix->keys[l].data.end());
        s.value_rows[l].assign(prefix->values[l].data.begin(), prefix->values[l].data.end());
        s.cached_rows[l] = prefix->keys[l].shape[0];
      }
      s.next_pos = prefix->prefix_len();
    }
    return s;
  }

  /// Feed one token, extend every layer's cache, return next-token logits.
  /// Runs the same tape kernels as the full pass, so logits match the full
  /// sequence computation bit for bit.
  Tensor<T> step(GenState& s, Index token_id) {
    if (s.next_pos >= max_seq_len) throw ShapeError("decode: position exceeds max_seq_len");
    Tape<T> t(false);
    const Index d_z = hidden / blocks[0].heads;
    auto x = t.add(t.embed_rows(t.param(tok_emb), {token_id}),
                   t.embed_rows(t.param(pos_emb), {s.next_pos}));
    for (std::size_t l = 0; l < blocks.size(); ++l) {
      auto& blk = blocks[l];
      auto q = blk.wq.forward(t, x);
      auto k = blk.wk.forward(t, x);
      auto v = blk.wv.forward(t, x);
      const auto& k_new = t.val(k);
      const auto& v_new = t.val(v);
      s.key_rows[l].insert(s.key_rows[l].end(), k_new.data.begin(), k_new.data.end());
      s.value_rows[l].insert(s.value_rows[l].end(), v_new.data.begin(), v_new.data.end());
      s.cached_rows[l] += 1;

      Tensor<T> k_cache, v_cache;
      k_cache.shape = {s.cached_rows[l], hidden};
      k_cache.data = s.key_rows[l];
      v_cache.shape = {s.cached_rows[l], hidden};
      v_cache.data = s.value_rows[l];
      auto k_full = t.leaf(std::move(k_cache));
      auto v_full = t.leaf(std::move(v_cache));

      std::vector<typename Tape<T>::Var> head_outputs;
      for (Index m = 0; m < blk.heads; ++m) {
        auto q_m = t.slice_cols(q, m * d_z, (m + 1) * d_z);
        auto k_m = t.slice_cols(k_full, m * d_z, (m + 1) * d_z);
        auto v_m = t.slice_cols(v_full, m * d_z, (m + 1) * d_z);
        auto e = t.scale(t.matmul_bt(q_m, k_m), T(1) / static_cast<T>(std::sqrt(static_cast<double>(d_z))));
        auto alpha = t.softmax_rows(e);
        head_outputs.push_back(t.matmul(alpha, v_m));
      }
      auto attn = blk.wo.forward(t, t.concat_cols(head_outputs));
      x = blk.ln1.forward(t, t.add(x, attn));
      auto f = blk.ffn2.forward(t, t.gelu(blk.ffn1.forward(t, x)));
      x = blk.ln2.forward(t, t.add(x, f));
    }
    s.next_pos += 1;
    return t.val(t.matmul(x, t.param(w_out))).reshaped({vocab_size});
  }
};

// ---- language-model pretraining ----

struct PretrainConfig {
  double learning_rate = 0.1;
  int epochs = 30;
  int batch_size = 16;
  std::uint32_t seed = 0;
  double clip_norm = 1.0;
  Index max_position_offset = 20;  // covers every prefix length the sweep trains
};

template <typename T>
struct PretrainResult {
  double initial_perplexity = 0;
  double final_perplexity = 0;
};

template <typename T>
double lm_perplexity(DecoderStack<T>& decoder, const std::vector<std::vector<Index>>& sequences) {
  double nll_sum = 0;
  long token_count = 0;
  for (const auto& seq : sequences) {
    if (seq.size() < 2) continue;
    Tape<T> t(false);
    std::vector<Index> input(seq.begin(), seq.end() - 1);
    std::vector<Index> targets(seq.begin() + 1, seq.end());
    auto logits = decoder.forward_at_offset(t, input, nullptr, 0);
    auto loss = t.seq_nll(logits, targets);
    nll_sum += static_cast<double>(t.val(loss).scalar()) * static_cast<double>(targets.size());
    token_count += static_cast<long>(targets.size());
  }
  if (token_count == 0) throw DataError("perplexity: no scorable tokens");
  return std::exp(nll_sum / static_cast<double>(token_count));
}

/// Trains the decoder with next-token NLL on the given sequences, then
/// freezes it. Sequences are presented at a seeded random position offset
/// each epoch so the embeddings stay valid when a prefix later shifts the
/// tokens.
template <typename T>
PretrainResult<T> pretrain_lm(DecoderStack<T>& decoder, const std::vector<std::vector<Index>>& sequences,
                              const PretrainConfig& cfg) {
  if (sequences.empty()) throw DataError("pretrain: empty corpus");
  ParamSet<T> params;
  decoder.register_params(params);
  decoder.set_frozen(false);

  PretrainResult<T> result;
  result.initial_perplexity = lm_perplexity(decoder, sequences);

  Index max_len = 0;
  for (const auto& seq : sequences) max_len = std::max(max_len, static_cast<Index>(seq.size()));
  Index offset_cap = std::min<Index>(cfg.max_position_offset, decoder.max_seq_len - max_len);
  if (offset_cap < 0) throw ConfigError("pretrain: sequences exceed decoder max_seq_len");

  std::vector<std::size_t> order(sequences.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng(derive_seed(cfg.seed, "pretrain-epoch-" + std::to_string(epoch)));
    shuffle(order, rng);
    std::size_t cursor = 0;
    while (cursor < order.size()) {
      std::size_t batch_end = std::min(order.size(), cursor + static_cast<std::size_t>(cfg.batch_size));
      GradMap<T> batch_grads;
      int counted = 0;
      for (std::size_t bi = cursor; bi < batch_end; ++bi) {
        const auto& seq = sequences[order[bi]];
        if (seq.size() < 2) continue;
        Index offset = offset_cap > 0 ? static_cast<Index>(rng.index(static_cast<std::size_t>(offset_cap) + 1)) : 0;
        Tape<T> t;
        std::vector<Index> input(seq.begin(), seq.end() - 1);
        std::vector<Index> targets(seq.begin() + 1, seq.end());
        auto loss = t.seq_nll(decoder.forward_at_offset(t, input, nullptr, offset), targets);
        auto grads = t.backward(loss);
        for (auto& [name, g] : grads) {
          auto it = batch_grads.find(name);
          if (it == batch_grads.end())
            batch_grads.emplace(name, std::move(g));
          else
            for (Index i = 0; i < g.numel(); ++i) it->second[i] += g[i];
        }
        ++counted;
      }
      if (counted > 0) {
        T inv = T(1) / static_cast<T>(counted);
        for (auto& [name, g] : batch_grads)
          for (auto& v : g.data) v *= inv;
        sgd_step(params, batch_grads, static_cast<T>(cfg.learning_rate), static_cast<T>(cfg.clip_norm));
      }
      cursor = batch_end;
    }
  }

  decoder.set_frozen(true);
  result.final_perplexity = lm_perplexity(decoder, sequences);
  return result;
}

}  // namespace idpt
