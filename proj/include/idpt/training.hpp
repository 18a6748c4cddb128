#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "idpt/corpus.hpp"
#include "idpt/metrics.hpp"
#include "idpt/model.hpp"

#include <json.hpp>

namespace idpt {

enum class TrainMode { HA, SA, AblateAverage, AblateRandom, AblateNone };

inline const char* mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::HA: return "ha";
    case TrainMode::SA: return "sa";
    case TrainMode::AblateAverage: return "ablate-average";
    case TrainMode::AblateRandom: return "ablate-random";
    case TrainMode::AblateNone: return "ablate-none";
  }
  return "?";
}

inline TrainMode mode_from_name(const std::string& name) {
  if (name == "ha") return TrainMode::HA;
  if (name == "sa") return TrainMode::SA;
  if (name == "ablate-average") return TrainMode::AblateAverage;
  if (name == "ablate-random") return TrainMode::AblateRandom;
  if (name == "ablate-none") return TrainMode::AblateNone;
  throw ConfigError("unknown mode: " + name);
}

enum class PrefixSource { Gold, Argmax };

struct TrainConfig {
  TrainMode mode = TrainMode::HA;
  double gamma = 1.0;
  double alpha = 1.0;
  double learning_rate = 8e-5;
  int epochs = 100;
  int batch_size = 4;
  std::uint32_t seed = 0;
  PrefixSource train_prefix_source = PrefixSource::Gold;
  Index max_decode_len = 24;
  double clip_norm = 0.0;  // <= 0: clipping off
  bool freeze_encoder = false;

  void validate() const {
    if (mode == TrainMode::HA && gamma != 1.0) throw ConfigError("HA requires gamma=1");
    if (mode == TrainMode::SA && gamma != 0.0) throw ConfigError("SA requires gamma=0");
    if (alpha <= 0) throw ConfigError("alpha must be positive");
    if (epochs < 1 || batch_size < 1) throw ConfigError("epochs and batch_size must be positive");
    if (learning_rate <= 0) throw ConfigError("learning_rate must be positive");
    if (max_decode_len < 1) throw ConfigError("max_decode_len must be positive");
  }
};

struct LossBreakdown {
  double l_ce = 0;
  double l_gen = 0;
  double total = 0;
};

template <typename T>
struct ForwardResult {
  typename Tape<T>::Var total = -1;  // scalar node for backward
  typename Tape<T>::Var l_gen = -1;  // generation term alone
  LossBreakdown values;
  Index predicted = -1;  // classifier argmax (raw cluster id), -1 without a classifier
};

namespace train_detail {

template <typename T>
Index argmax_index(const Tensor<T>& v) {
  Index best = 0;
  for (Index j = 1; j < v.numel(); ++j)
    if (v[j] > v[best]) best = j;
  return best;
}

inline Index random_prefix_index(std::uint32_t seed, const std::string& example_id, Index n) {
  return static_cast<Index>(derive_seed(seed, "ablate-random-" + example_id) % static_cast<std::uint32_t>(n));
}

}  // namespace train_detail

/// Generation loss for one example under a given prefix: mean NLL of the
/// target tokens (response tokens plus <eos>) under the prefixed decoder.
template <typename T>
typename Tape<T>::Var generation_loss_with_prefix(Tape<T>& t, IdptModel<T>& model,
                                                  const DialogueExample& ex,
                                                  const MaterializedPrefix<T>& prefix) {
  std::vector<Index> ids = response_ids(ex.response, model.vocab);
  std::vector<Index> input(ids.begin(), ids.end() - 1);
  std::vector<Index> targets(ids.begin() + 1, ids.end());
  auto logits = model.decoder.decode_with_prefix(t, input, &prefix.kv);
  return t.seq_nll(logits, targets);
}

/// Soft-attention forward pass: classify, mix every prefix by the predicted
/// distribution, score the response. With gamma = 0 the classifier trains
/// only through the generation term; a gold label, when present, is scored
/// for reporting.
template <typename T>
ForwardResult<T> forward_soft(Tape<T>& t, IdptModel<T>& model, const DialogueExample& ex, double gamma,
                              double alpha) {
  ForwardResult<T> out;
  auto ctx = model.encode_example(t, ex);
  auto cls = model.recognizer.classify(t, ctx.hidden, model.bank);
  out.predicted = train_detail::argmax_index(t.val(cls.probs));
  auto prefix = model.bank.mix(t, cls.probs);
  out.l_gen = generation_loss_with_prefix(t, model, ex, prefix);
  out.total = t.scale(out.l_gen, static_cast<T>(alpha));
  if (ex.initiative) {
    auto ce = model.recognizer.ce_loss(t, cls, *ex.initiative);
    out.values.l_ce = static_cast<double>(t.val(ce).scalar());
    if (gamma != 0.0) out.total = t.add(t.scale(ce, static_cast<T>(gamma)), out.total);
  }
  out.values.l_gen = static_cast<double>(t.val(out.l_gen).scalar());
  out.values.total = static_cast<double>(t.val(out.total).scalar());
  return out;
}

/// Hard-attention forward pass: classification loss on the gold label plus
/// the generation loss under one selected prefix (the gold label's by
/// default, or the classifier argmax).
template <typename T>
ForwardResult<T> forward_hard(Tape<T>& t, IdptModel<T>& model, const DialogueExample& ex, double alpha,
                              PrefixSource source) {
  if (!ex.initiative)
    throw DataError("example " + ex.id + ": hard-attention training needs an initiative label");
  ForwardResult<T> out;
  auto ctx = model.encode_example(t, ex);
  auto cls = model.recognizer.classify(t, ctx.hidden, model.bank);
  out.predicted = train_detail::argmax_index(t.val(cls.probs));
  auto ce = model.recognizer.ce_loss(t, cls, *ex.initiative);

  MaterializedPrefix<T> prefix;
  if (source == PrefixSource::Gold) {
    prefix = model.bank.materialize(t, *ex.initiative);
  } else {
    prefix = model.bank.select(t, t.val(cls.probs)).second;
  }
  out.l_gen = generation_loss_with_prefix(t, model, ex, prefix);
  out.total = t.add(ce, t.scale(out.l_gen, static_cast<T>(alpha)));
  out.values.l_ce = static_cast<double>(t.val(ce).scalar());
  out.values.l_gen = static_cast<double>(t.val(out.l_gen).scalar());
  out.values.total = static_cast<double>(t.val(out.total).scalar());
  return out;
}

/// Ablation forward passes (everything else identical to the main pipeline):
/// average mixes all prefixes uniformly, random picks a seeded per-example
/// prefix, none uses a single prefix with no recognizer at all.
template <typename T>
ForwardResult<T> forward_ablation(Tape<T>& t, IdptModel<T>& model, const DialogueExample& ex,
                                  TrainMode variant, double alpha, std::uint32_t seed) {
  ForwardResult<T> out;
  if (variant == TrainMode::AblateNone) {
    auto prefix = model.bank.materialize(t, 0);
    out.l_gen = generation_loss_with_prefix(t, model, ex, prefix);
    out.total = t.scale(out.l_gen, static_cast<T>(alpha));
    out.values.l_gen = static_cast<double>(t.val(out.l_gen).scalar());
    out.values.total = static_cast<double>(t.val(out.total).scalar());
    return out;
  }

  auto ctx = model.encode_example(t, ex);
  auto cls = model.recognizer.classify(t, ctx.hidden, model.bank);
  out.predicted = train_detail::argmax_index(t.val(cls.probs));

  MaterializedPrefix<T> prefix;
  if (variant == TrainMode::AblateAverage) {
    Tensor<T> uniform = Tensor<T>::full({model.bank.size()}, T(1) / static_cast<T>(model.bank.size()));
    prefix = model.bank.mix(t, t.leaf(std::move(uniform)));
  } else if (variant == TrainMode::AblateRandom) {
    prefix = model.bank.materialize(
        t, train_detail::random_prefix_index(seed, ex.id, model.bank.size()));
  } else {
    throw ConfigError("not an ablation variant");
  }
  out.l_gen = generation_loss_with_prefix(t, model, ex, prefix);
  out.total = t.scale(out.l_gen, static_cast<T>(alpha));
  if (ex.initiative) {
    auto ce = model.recognizer.ce_loss(t, cls, *ex.initiative);
    out.values.l_ce = static_cast<double>(t.val(ce).scalar());
    out.total = t.add(ce, out.total);
  }
  out.values.l_gen = static_cast<double>(t.val(out.l_gen).scalar());
  out.values.total = static_cast<double>(t.val(out.total).scalar());
  return out;
}

template <typename T>
ForwardResult<T> forward_example(Tape<T>& t, IdptModel<T>& model, const DialogueExample& ex,
                                 const TrainConfig& cfg) {
  switch (cfg.mode) {
    case TrainMode::HA:
      return forward_hard(t, model, ex, cfg.alpha, cfg.train_prefix_source);
    case TrainMode::SA:
      return forward_soft(t, model, ex, cfg.gamma, cfg.alpha);
    default:
      return forward_ablation(t, model, ex, cfg.mode, cfg.alpha, cfg.seed);
  }
}

// ---- generation ----

struct GenerateOptions {
  std::optional<Index> initiative;  // forced prefix index
  TrainMode mode = TrainMode::HA;
  Index max_decode_len = 24;
  int top_k = 0;  // 0: greedy; otherwise seeded top-k sampling
  std::uint32_t sample_seed = 0;
  std::uint32_t run_seed = 0;  // matches the training seed for ablate-random
};

/// Greedy (or top-k) decoding from <bos> under the prefix chosen by the mode
/// or forced by `initiative`. Prefix slots are never emitted; <pad> and
/// <bos> are suppressed; <eos> terminates and is not returned.
template <typename T>
TokenSeq generate(IdptModel<T>& model, const DialogueExample& context, const GenerateOptions& opts) {
  Tape<T> t(false);
  PastKeyValues<T> kv;
  if (opts.initiative) {
    if (*opts.initiative < 0 || *opts.initiative >= model.bank.size())
      throw IndexError("initiative index " + std::to_string(*opts.initiative) + " out of range 0.." +
                       std::to_string(model.bank.size() - 1));
    kv = extract_past_kv(t, model.bank.materialize(t, *opts.initiative));
  } else if (opts.mode == TrainMode::AblateNone) {
    kv = extract_past_kv(t, model.bank.materialize(t, 0));
  } else if (opts.mode == TrainMode::AblateRandom) {
    kv = extract_past_kv(
        t, model.bank.materialize(
               t, train_detail::random_prefix_index(opts.run_seed, context.id, model.bank.size())));
  } else if (opts.mode == TrainMode::AblateAverage) {
    Tensor<T> uniform = Tensor<T>::full({model.bank.size()}, T(1) / static_cast<T>(model.bank.size()));
    kv = extract_past_kv(t, model.bank.mix(t, t.leaf(std::move(uniform))));
  } else {
    auto ctx = model.encode_example(t, context);
    auto cls = model.recognizer.classify(t, ctx.hidden, model.bank);
    if (opts.mode == TrainMode::HA) {
      kv = extract_past_kv(t, model.bank.select(t, t.val(cls.probs)).second);
    } else {
      kv = extract_past_kv(t, model.bank.mix(t, cls.probs));
    }
  }

  Rng sample_rng(derive_seed(opts.sample_seed, "topk-" + context.id));
  auto state = model.decoder.start_state(&kv);
  TokenSeq out;
  Index token = Vocab::kBos;
  for (Index step = 0; step < opts.max_decode_len; ++step) {
    Tensor<T> logits = model.decoder.step(state, token);
    logits[Vocab::kPad] = T(-1e30);
    logits[Vocab::kBos] = T(-1e30);
    Index next;
    if (opts.top_k > 0) {
      std::vector<Index> order(static_cast<std::size_t>(logits.numel()));
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<Index>(i);
      std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return logits[a] > logits[b]; });
      Index k = std::min<Index>(opts.top_k, logits.numel());
      // Softmax over the top k, then one seeded draw.
      double mx = static_cast<double>(logits[order[0]]);
      std::vector<double> probs(static_cast<std::size_t>(k));
      double denom = 0;
      for (Index i = 0; i < k; ++i) {
        probs[static_cast<std::size_t>(i)] = std::exp(static_cast<double>(logits[order[static_cast<std::size_t>(i)]]) - mx);
        denom += probs[static_cast<std::size_t>(i)];
      }
      double u = sample_rng.unit() * denom;
      double acc = 0;
      next = order[static_cast<std::size_t>(k - 1)];
      for (Index i = 0; i < k; ++i) {
        acc += probs[static_cast<std::size_t>(i)];
        if (u < acc) {
          next = order[static_cast<std::size_t>(i)];
          break;
        }
      }
    } else {
      next = train_detail::argmax_index(logits);
    }
    if (next == Vocab::kEos) break;
    out.push_back(model.vocab.token(next));
    token = next;
  }
  return out;
}

/// The N-way initiative sweep for one context.
template <typename T>
std::vector<TokenSeq> sweep_initiatives(IdptModel<T>& model, const DialogueExample& context,
                                        const GenerateOptions& base) {
  std::vector<TokenSeq> out;
  for (Index i = 0; i < model.bank.size(); ++i) {
    GenerateOptions opts = base;
    opts.initiative = i;
    out.push_back(generate(model, context, opts));
  }
  return out;
}

// ---- evaluation ----

/// Classifier argmax for one example without building gradients.
template <typename T>
Index predict_label(IdptModel<T>& model, const DialogueExample& ex) {
  Tape<T> t(false);
  auto ctx = model.encode_example(t, ex);
  auto cls = model.recognizer.classify(t, ctx.hidden, model.bank);
  return train_detail::argmax_index(t.val(cls.probs));
}

template <typename T>
EvalReport evaluate(IdptModel<T>& model, const std::vector<DialogueExample>& data,
                    const GenerateOptions& opts, bool with_sweep = true) {
  if (data.empty()) throw DataError("evaluate: empty dataset");
  EvalReport report;
  std::vector<int> preds, golds;
  std::vector<double> lengths, labels;
  double b1 = 0, b4 = 0, r1 = 0, rl = 0, ctrl = 0;
  bool has_classifier = opts.mode != TrainMode::AblateNone;

  for (const auto& ex : data) {
    ExampleRecord rec;
    rec.id = ex.id;
    rec.gold_label = ex.initiative ? *ex.initiative : -1;
    if (has_classifier) rec.predicted_label = static_cast<int>(predict_label(model, ex));

    TokenSeq generated = generate(model, ex, opts);
    TokenSeq reference = tokenize(ex.response);
    rec.bleu1 = bleu(generated, reference, 1);
    rec.bleu4 = bleu(generated, reference, 4);
    rec.rouge1_f = rouge1(generated, reference);
    rec.rougeL_f = rougeL(generated, reference);
    for (const auto& tok : generated) rec.generated += (rec.generated.empty() ? "" : " ") + tok;

    if (with_sweep) {
      auto sweep = sweep_initiatives(model, ex, opts);
      rec.controllability = controllability(sweep, static_cast<int>(model.bank.size()),
                                            make_template_matcher(ex));
    }

    if (ex.initiative && has_classifier) {
      preds.push_back(rec.predicted_label);
      golds.push_back(*ex.initiative);
    }
    if (ex.initiative) {
      lengths.push_back(static_cast<double>(generated.size()));
      labels.push_back(static_cast<double>(*ex.initiative));
    }
    b1 += rec.bleu1;
    b4 += rec.bleu4;
    r1 += rec.rouge1_f;
    rl += rec.rougeL_f;
    ctrl += rec.controllability;
    report.per_example.push_back(std::move(rec));
  }

  const double n = static_cast<double>(data.size());
  report.bleu1 = b1 / n;
  report.bleu4 = b4 / n;
  report.rouge1_f = r1 / n;
  report.rougeL_f = rl / n;
  report.controllability = ctrl / n;
  if (!preds.empty()) {
    if (opts.mode == TrainMode::SA) {
      report.accuracy = permutation_matched_accuracy(preds, golds, static_cast<int>(model.bank.size())).first;
    } else {
      report.accuracy = accuracy(preds, golds);
    }
  }
  if (lengths.size() >= 2) {
    bool len_varies = false, label_varies = false;
    for (std::size_t i = 1; i < lengths.size(); ++i) {
      len_varies = len_varies || lengths[i] != lengths[0];
      label_varies = label_varies || labels[i] != labels[0];
    }
    if (len_varies && label_varies) report.pearson_len_init = pearson(lengths, labels);
  }
  return report;
}

// ---- training loop ----

struct EpochLog {
  int epoch = 0;
  double l_ce = 0;
  double l_gen = 0;
  std::optional<double> dev_accuracy;
  double dev_bleu1 = 0;
};

struct TrainLog {
  std::vector<EpochLog> epochs;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& e : epochs) {
      nlohmann::ordered_json j;
      j["epoch"] = e.epoch;
      j["l_ce"] = e.l_ce;
      j["l_gen"] = e.l_gen;
      j["dev_accuracy"] = e.dev_accuracy ? nlohmann::ordered_json(*e.dev_accuracy)
                                         : nlohmann::ordered_json(nullptr);
      j["dev_bleu1"] = e.dev_bleu1;
      arr.push_back(std::move(j));
    }
    return arr;
  }
};

/// Trains encoder, prefix bank, and recognizer on a frozen decoder. The
/// batch objective is the sum of per-example joint losses; examples are
/// reshuffled each epoch with a seeded generator.
template <typename T>
TrainLog train(IdptModel<T>& model, const std::vector<DialogueExample>& train_data,
               const std::vector<DialogueExample>& dev_data, const TrainConfig& cfg) {
  cfg.validate();
  if (train_data.empty()) throw DataError("train: empty training set");
  if (!model.decoder.frozen)
    throw ConfigError("train: decoder must be pretrained and frozen first");
  if (cfg.mode == TrainMode::HA) {
    for (const auto& ex : train_data)
      if (!ex.initiative) throw DataError("example " + ex.id + ": HA training needs initiative labels");
  }
  model.encoder.set_trainable(!cfg.freeze_encoder);

  std::vector<std::size_t> order(train_data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  GenerateOptions gen_opts;
  gen_opts.mode = cfg.mode;
  gen_opts.max_decode_len = cfg.max_decode_len;
  gen_opts.run_seed = cfg.seed;

  TrainLog log;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng(derive_seed(cfg.seed, "train-epoch-" + std::to_string(epoch)));
    shuffle(order, rng);

    double ce_sum = 0, gen_sum = 0;
    std::size_t cursor = 0;
    while (cursor < order.size()) {
      std::size_t batch_end = std::min(order.size(), cursor + static_cast<std::size_t>(cfg.batch_size));
      GradMap<T> batch_grads;
      for (std::size_t bi = cursor; bi < batch_end; ++bi) {
        const auto& ex = train_data[order[bi]];
        Tape<T> t;
        auto fwd = forward_example(t, model, ex, cfg);
        ce_sum += fwd.values.l_ce;
        gen_sum += fwd.values.l_gen;
        auto grads = t.backward(fwd.total);
        for (auto& [name, g] : grads) {
          auto it = batch_grads.find(name);
          if (it == batch_grads.end())
            batch_grads.emplace(name, std::move(g));
          else
            for (Index i = 0; i < g.numel(); ++i) it->second[i] += g[i];
        }
      }
      sgd_step(model.params(), batch_grads, static_cast<T>(cfg.learning_rate),
               static_cast<T>(cfg.clip_norm));
      cursor = batch_end;
    }

    EpochLog entry;
    entry.epoch = epoch;
    entry.l_ce = ce_sum / static_cast<double>(train_data.size());
    entry.l_gen = gen_sum / static_cast<double>(train_data.size());
    if (!dev_data.empty()) {
      auto dev_report = evaluate(model, dev_data, gen_opts, /*with_sweep=*/false);
      entry.dev_accuracy = dev_report.accuracy;
      entry.dev_bleu1 = dev_report.bleu1;
    }
    log.epochs.push_back(entry);
  }
  return log;
}

}  // namespace idpt
