#pragma once

// The step autoencoder: a context-conditioned encoder summarizes
// [context; SEP; step] into a dense vector, a ReLU projector expands it
// into a nonnegative sparse feature of width c*d, and a context-
// conditioned decoder reconstructs the step tokens from the context plus
// the feature segments spliced in as prefix vectors.

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ssae/corpus.hpp"
#include "ssae/rng.hpp"
#include "ssae/tape.hpp"
#include "ssae/tokenizer.hpp"
#include "ssae/transformer.hpp"

namespace ssae {

struct SsaeConfig {
  int d = 64;
  int c = 1;
  int layers = 2;
  int heads = 4;
  int ff_mult = 4;
  int max_seq = 320;
  double sigma = 0.01;
  bool ablate_context = false;  // context replaced by SEP alone
  int vocab = 0;                // filled from the tokenizer

  TransformerConfig stack_config() const {
    TransformerConfig t;
    t.vocab = vocab;
    t.d = d;
    t.layers = layers;
    t.heads = heads;
    t.ff_mult = ff_mult;
    t.max_seq = max_seq;
    return t;
  }
};

struct SparseFeature {
  std::vector<double> values;  // width c*d
  int c = 1;
  int d = 0;

  int width() const { return static_cast<int>(values.size()); }
};

struct SsaeModel {
  SsaeConfig cfg;
  ParamStore params;
  StackParams enc, dec;
  int proj_w = -1, proj_b = -1;
  int head_w = -1, head_b = -1;
};

inline SsaeModel make_ssae_model(SsaeConfig cfg, std::uint64_t seed) {
  if (cfg.vocab <= 0) cfg.vocab = corpus_tokenizer().size();
  if (cfg.sigma < 0) throw std::runtime_error("ssae: sigma must be >= 0");
  SsaeModel m;
  m.cfg = cfg;
  const TransformerConfig tc = cfg.stack_config();
  {
    Rng rng(derive_seed(seed, "init/enc"));
    m.enc = make_stack_params(m.params, "enc", tc, rng);
  }
  {
    Rng rng(derive_seed(seed, "init/dec"));
    m.dec = make_stack_params(m.params, "dec", tc, rng);
  }
  Rng rng(derive_seed(seed, "init/proj"));
  Tensor w({cfg.d, cfg.c * cfg.d});
  const double s = 1.0 / std::sqrt(static_cast<double>(cfg.d));
  for (double& v : w.data) v = rng.next_gaussian() * s;
  m.proj_w = m.params.add("proj.w", std::move(w));
  m.proj_b = m.params.add("proj.b", Tensor({cfg.c * cfg.d}));
  Tensor hw({cfg.d, cfg.vocab});
  for (double& v : hw.data) v = rng.next_gaussian() * 0.02;
  m.head_w = m.params.add("dec.head.w", std::move(hw));
  m.head_b = m.params.add("dec.head.b", Tensor({cfg.vocab}));
  return m;
}

inline std::vector<int> effective_context(const SsaeModel& m,
                                          const std::vector<int>& context_ids) {
  if (!m.cfg.ablate_context) return context_ids;
  return {Tokenizer::kSep};
}

// ---------------------------------------------------------------------
// Graph builders (shared by training and eval paths)
// ---------------------------------------------------------------------

// Encoder: last hidden state of [context; step].
inline int encode_node(Tape& tape, const SsaeModel& m,
                       const EncoderInput& input) {
  SpliceInput in;
  in.ids_before = effective_context(m, input.context_ids);
  in.ids_before.insert(in.ids_before.end(), input.step_ids.begin(),
                       input.step_ids.end());
  const int hs = transformer_nodes(tape, m.params, m.enc, m.cfg.stack_config(), in);
  const int L = tape.val(hs).shape[0];
  return tape.take_rows(hs, L - 1, 1);  // [1 x d]
}

// Projector: relu(W h + b), optionally plus a fixed noise vector.
inline int project_node(Tape& tape, const SsaeModel& m, int h_node,
                        const Tensor* noise = nullptr) {
  int z = tape.add_bias(tape.matmul(h_node, tape.param(m.params, m.proj_w)),
                        tape.param(m.params, m.proj_b));
  int feat = tape.relu(z);  // [1 x cd]
  if (noise != nullptr) {
    Tensor n2({1, m.cfg.c * m.cfg.d}, noise->data);
    feat = tape.add_const(feat, n2);
  }
  return feat;
}

// Decoder logits aligned to step_ids (teacher forcing).
// Input layout: [context; SEP already inside context] + c feature
// segments + BOS + step tokens (minus the final one).
inline int decode_logits_node(Tape& tape, const SsaeModel& m, int feat_node,
                              const std::vector<int>& context_ids,
                              const std::vector<int>& step_ids) {
  if (step_ids.empty() || step_ids.back() != Tokenizer::kEos)
    throw std::runtime_error("decode: step_ids must end with EOS");
  const Tensor& fv = tape.val(feat_node);
  if (fv.numel() != static_cast<std::size_t>(m.cfg.c) * m.cfg.d)
    throw std::runtime_error("decode: segment width mismatch");

  SpliceInput in;
  in.ids_before = effective_context(m, context_ids);
  in.prefix_node = tape.reshape(feat_node, {m.cfg.c, m.cfg.d});
  in.ids_after.push_back(Tokenizer::kBos);
  in.ids_after.insert(in.ids_after.end(), step_ids.begin(), step_ids.end() - 1);

  const int prefix_len =
      static_cast<int>(in.ids_before.size()) + m.cfg.c + 1;  // + BOS
  const int hs = transformer_nodes(tape, m.params, m.dec, m.cfg.stack_config(), in);
  const int total = tape.val(hs).shape[0];
  const int L = static_cast<int>(step_ids.size());
  if (total != prefix_len - 1 + L)
    throw std::runtime_error("decode: prefix length bookkeeping failed");
  const int rows = tape.take_rows(hs, prefix_len - 1, L);
  return tape.add_bias(tape.matmul(rows, tape.param(m.params, m.head_w)),
                       tape.param(m.params, m.head_b));
}

// The decoder conditions on this many positions before the first step
// token is predicted: |context| + c + 1.
inline int decoder_prefix_length(const SsaeModel& m,
                                 const std::vector<int>& context_ids) {
  return static_cast<int>(effective_context(m, context_ids).size()) +
         m.cfg.c + 1;
}

// ---------------------------------------------------------------------
// Eval-mode API
// ---------------------------------------------------------------------

// Dense feature h_k (width d).
inline Tensor encode(const SsaeModel& m, const EncoderInput& input) {
  Tape tape(false);
  const int h = encode_node(tape, m, input);
  Tensor out({m.cfg.d});
  out.data = tape.val(h).data;
  return out;
}

// Sparse feature; train_mode adds N(0, sigma^2) noise after the ReLU.
inline SparseFeature project(const SsaeModel& m, const Tensor& h,
                             bool train_mode = false, Rng* rng = nullptr) {
  if (h.numel() != static_cast<std::size_t>(m.cfg.d))
    throw std::runtime_error("project: dense width mismatch");
  Tape tape(false);
  const int hn = tape.input(Tensor({1, m.cfg.d}, h.data));
  const int f = project_node(tape, m, hn);
  SparseFeature feat;
  feat.c = m.cfg.c;
  feat.d = m.cfg.d;
  feat.values = tape.val(f).data;
  if (train_mode && m.cfg.sigma > 0.0) {
    if (rng == nullptr)
      throw std::runtime_error("project: train mode needs an rng");
    for (double& v : feat.values) v += rng->next_gaussian() * m.cfg.sigma;
  }
  return feat;
}

// Contiguous segments of width d; concatenation reproduces the input.
inline std::vector<Tensor> split_segments(const SparseFeature& feat) {
  if (feat.d <= 0 || feat.width() % feat.d != 0)
    throw std::runtime_error("split_segments: width not divisible by d");
  std::vector<Tensor> out;
  for (int s = 0; s * feat.d < feat.width(); ++s) {
    Tensor seg({feat.d});
    std::copy(feat.values.begin() + static_cast<std::size_t>(s) * feat.d,
              feat.values.begin() + static_cast<std::size_t>(s + 1) * feat.d,
              seg.data.begin());
    out.push_back(std::move(seg));
  }
  if (static_cast<int>(out.size()) != feat.c)
    throw std::runtime_error("split_segments: segment count != c");
  return out;
}

inline Tensor decode_teacher_forced(const SsaeModel& m,
                                    const std::vector<int>& context_ids,
                                    const std::vector<Tensor>& segments,
                                    const std::vector<int>& step_ids) {
  if (static_cast<int>(segments.size()) != m.cfg.c)
    throw std::runtime_error("decode: expected c segments");
  Tape tape(false);
  Tensor flat({1, m.cfg.c * m.cfg.d});
  for (int s = 0; s < m.cfg.c; ++s) {
    if (segments[s].numel() != static_cast<std::size_t>(m.cfg.d))
      throw std::runtime_error("decode: segment width mismatch");
    std::copy(segments[s].data.begin(), segments[s].data.end(),
              flat.data.begin() + static_cast<std::size_t>(s) * m.cfg.d);
  }
  const int f = tape.input(std::move(flat));
  const int logits = decode_logits_node(tape, m, f, context_ids, step_ids);
  return tape.val(logits);
}

// Autoregressive sampling; greedy when temperature == 0. Returns the
// generated tokens, including the terminating EOS when one was drawn.
inline std::vector<int> decode_sample(const SsaeModel& m,
                                      const std::vector<int>& context_ids,
                                      const std::vector<Tensor>& segments,
                                      int max_len, Rng* rng,
                                      double temperature = 0.0) {
  if (max_len < 1) throw std::runtime_error("decode_sample: max_len must be >= 1");
  if (temperature > 0.0 && rng == nullptr)
    throw std::runtime_error("decode_sample: sampling needs an rng");
  if (static_cast<int>(segments.size()) != m.cfg.c)
    throw std::runtime_error("decode_sample: expected c segments");

  Tensor flat({1, m.cfg.c * m.cfg.d});
  for (int s = 0; s < m.cfg.c; ++s)
    std::copy(segments[s].data.begin(), segments[s].data.end(),
              flat.data.begin() + static_cast<std::size_t>(s) * m.cfg.d);

  std::vector<int> generated;
  const std::vector<int> ctx = effective_context(m, context_ids);
  while (static_cast<int>(generated.size()) < max_len) {
    Tape tape(false);
    SpliceInput in;
    in.ids_before = ctx;
    in.prefix_node =
        tape.reshape(tape.input(flat), {m.cfg.c, m.cfg.d});
    in.ids_after.push_back(Tokenizer::kBos);
    in.ids_after.insert(in.ids_after.end(), generated.begin(), generated.end());
    const int hs =
        transformer_nodes(tape, m.params, m.dec, m.cfg.stack_config(), in);
    const int last = tape.val(hs).shape[0] - 1;
    const int rows = tape.take_rows(hs, last, 1);
    const int logits_node =
        tape.add_bias(tape.matmul(rows, tape.param(m.params, m.head_w)),
                      tape.param(m.params, m.head_b));
    const Tensor& logits = tape.val(logits_node);

    int next = 0;
    if (temperature <= 0.0) {
      for (int j = 1; j < m.cfg.vocab; ++j)
        if (logits.data[j] > logits.data[next]) next = j;
    } else {
      double mx = logits.data[0];
      for (int j = 1; j < m.cfg.vocab; ++j) mx = std::max(mx, logits.data[j]);
      std::vector<double> p(m.cfg.vocab);
      double z = 0.0;
      for (int j = 0; j < m.cfg.vocab; ++j) {
        p[j] = std::exp((logits.data[j] - mx) / temperature);
        z += p[j];
      }
      double u = rng->next_double() * z;
      next = m.cfg.vocab - 1;
      double acc = 0.0;
      for (int j = 0; j < m.cfg.vocab; ++j) {
        acc += p[j];
        if (u < acc) {
          next = j;
          break;
        }
      }
    }
    generated.push_back(next);
    if (next == Tokenizer::kEos) break;
  }
  return generated;
}

// Convenience wrapper for the common pipeline: encode, project (eval),
// split, greedy-decode under an arbitrary context.
inline std::vector<int> reconstruct_under_context(
    const SsaeModel& m, const EncoderInput& source,
    const std::vector<int>& target_context_ids, int max_len) {
  const Tensor h = encode(m, source);
  const SparseFeature f = project(m, h);
  return decode_sample(m, target_context_ids, split_segments(f), max_len,
                       nullptr, 0.0);
}

}  // namespace ssae
