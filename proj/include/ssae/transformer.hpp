#pragma once

// Small pre-norm causal transformer (GPT style): learned absolute
// positions, multi-head attention, 4x gelu feed-forward. Two independent
// stacks (encoder / decoder) share this code; an optional block of
// continuous prefix vectors can be spliced into the embedded sequence at
// a marker position, which is how sparse-feature segments reach the
// decoder.

#include <optional>
#include <string>
#include <vector>

#include "ssae/rng.hpp"
#include "ssae/tape.hpp"
#include "ssae/tensor.hpp"

namespace ssae {

struct TransformerConfig {
  int vocab = 0;
  int d = 64;
  int layers = 2;
  int heads = 4;
  int ff_mult = 4;
  int max_seq = 256;
};

struct StackParams {
  struct Layer {
    int ln1_g, ln1_b;
    int wq, bq, wk, bk, wv, bv, wo, bo;
    int ln2_g, ln2_b;
    int w1, b1, w2, b2;
  };
  int tok_emb = -1;
  int pos_emb = -1;
  int lnf_g = -1, lnf_b = -1;
  std::vector<Layer> layers;
};

// Registers one stack's parameters under `prefix.` and returns the ids.
inline StackParams make_stack_params(ParamStore& store, const std::string& prefix,
                                     const TransformerConfig& cfg, Rng& rng) {
  auto gauss = [&](std::vector<int> shape, double std_dev) {
    Tensor t(std::move(shape));
    for (double& v : t.data) v = rng.next_gaussian() * std_dev;
    return t;
  };
  auto zeros = [](std::vector<int> shape) { return Tensor(std::move(shape)); };
  auto ones = [](std::vector<int> shape) {
    Tensor t(std::move(shape));
    for (double& v : t.data) v = 1.0;
    return t;
  };

  StackParams p;
  p.tok_emb = store.add(prefix + ".tok_emb", gauss({cfg.vocab, cfg.d}, 0.02));
  p.pos_emb = store.add(prefix + ".pos_emb", gauss({cfg.max_seq, cfg.d}, 0.01));
  const int ff = cfg.ff_mult * cfg.d;
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string lp = prefix + ".l" + std::to_string(l);
    StackParams::Layer L;
    L.ln1_g = store.add(lp + ".ln1.g", ones({cfg.d}));
    L.ln1_b = store.add(lp + ".ln1.b", zeros({cfg.d}));
    L.wq = store.add(lp + ".attn.wq", gauss({cfg.d, cfg.d}, 0.02));
    L.bq = store.add(lp + ".attn.bq", zeros({cfg.d}));
    L.wk = store.add(lp + ".attn.wk", gauss({cfg.d, cfg.d}, 0.02));
    L.bk = store.add(lp + ".attn.bk", zeros({cfg.d}));
    L.wv = store.add(lp + ".attn.wv", gauss({cfg.d, cfg.d}, 0.02));
    L.bv = store.add(lp + ".attn.bv", zeros({cfg.d}));
    L.wo = store.add(lp + ".attn.wo", gauss({cfg.d, cfg.d}, 0.02));
    L.bo = store.add(lp + ".attn.bo", zeros({cfg.d}));
    L.ln2_g = store.add(lp + ".ln2.g", ones({cfg.d}));
    L.ln2_b = store.add(lp + ".ln2.b", zeros({cfg.d}));
    L.w1 = store.add(lp + ".ff.w1", gauss({cfg.d, ff}, 0.02));
    L.b1 = store.add(lp + ".ff.b1", zeros({ff}));
    L.w2 = store.add(lp + ".ff.w2", gauss({ff, cfg.d}, 0.02));
    L.b2 = store.add(lp + ".ff.b2", zeros({cfg.d}));
    p.layers.push_back(L);
  }
  p.lnf_g = store.add(prefix + ".lnf.g", ones({cfg.d}));
  p.lnf_b = store.add(prefix + ".lnf.b", zeros({cfg.d}));
  return p;
}

// Splice description for one forward pass: tokens before the marker, an
// optional tape node holding [c x d] prefix vectors, tokens after.
struct SpliceInput {
  std::vector<int> ids_before;
  int prefix_node = -1;  // -1 when absent
  std::vector<int> ids_after;
};

// Builds the stack on the tape, returns the node with hidden states
// [L' x d] where L' = |before| + c + |after|.
inline int transformer_nodes(Tape& tape, const ParamStore& store,
                             const StackParams& sp, const TransformerConfig& cfg,
                             const SpliceInput& in) {
  for (int id : in.ids_before)
    if (id < 0 || id >= cfg.vocab)
      throw std::runtime_error("transformer: unknown token id " +
                               std::to_string(id));
  for (int id : in.ids_after)
    if (id < 0 || id >= cfg.vocab)
      throw std::runtime_error("transformer: unknown token id " +
                               std::to_string(id));

  const int tok_emb = tape.param(store, sp.tok_emb);
  std::vector<int> parts;
  int length = 0;
  if (!in.ids_before.empty()) {
    parts.push_back(tape.embed_rows(tok_emb, in.ids_before));
    length += static_cast<int>(in.ids_before.size());
  }
  if (in.prefix_node >= 0) {
    const Tensor& pv = tape.val(in.prefix_node);
    if (pv.shape.size() != 2 || pv.shape[1] != cfg.d)
      throw std::runtime_error("transformer: prefix vector width mismatch");
    parts.push_back(in.prefix_node);
    length += pv.shape[0];
  }
  if (!in.ids_after.empty()) {
    parts.push_back(tape.embed_rows(tok_emb, in.ids_after));
    length += static_cast<int>(in.ids_after.size());
  }
  if (parts.empty()) throw std::runtime_error("transformer: empty input");
  if (length > cfg.max_seq)
    throw std::runtime_error("transformer: sequence length " +
                             std::to_string(length) + " exceeds max_seq " +
                             std::to_string(cfg.max_seq));

  int x = parts.size() == 1 ? parts[0] : tape.concat_rows(parts);

  std::vector<int> pos_ids(length);
  for (int i = 0; i < length; ++i) pos_ids[i] = i;
  const int pos_emb = tape.param(store, sp.pos_emb);
  x = tape.add(x, tape.embed_rows(pos_emb, pos_ids));

  for (const auto& L : sp.layers) {
    int a = tape.layer_norm(x, tape.param(store, L.ln1_g),
                            tape.param(store, L.ln1_b));
    int q = tape.add_bias(tape.matmul(a, tape.param(store, L.wq)),
                          tape.param(store, L.bq));
    int k = tape.add_bias(tape.matmul(a, tape.param(store, L.wk)),
                          tape.param(store, L.bk));
    int v = tape.add_bias(tape.matmul(a, tape.param(store, L.wv)),
                          tape.param(store, L.bv));
    int att = tape.causal_attention(q, k, v, cfg.heads);
    int proj = tape.add_bias(tape.matmul(att, tape.param(store, L.wo)),
                             tape.param(store, L.bo));
    x = tape.add(x, proj);
    int m = tape.layer_norm(x, tape.param(store, L.ln2_g),
                            tape.param(store, L.ln2_b));
    int h1 = tape.gelu(tape.add_bias(tape.matmul(m, tape.param(store, L.w1)),
                                     tape.param(store, L.b1)));
    int h2 = tape.add_bias(tape.matmul(h1, tape.param(store, L.w2)),
                           tape.param(store, L.b2));
    x = tape.add(x, h2);
  }
  return tape.layer_norm(x, tape.param(store, sp.lnf_g),
                         tape.param(store, sp.lnf_b));
}

// Reserved marker token: a slot in token id streams where prefix vectors
// are spliced in. It has a vocabulary id (see Tokenizer) but never an
// embedding row of its own in the output sequence.
inline constexpr int kNoPrefixMarker = -1;

// Plain-tensor forward. When `prefix_vectors` is nonempty, `token_ids`
// must contain `marker_id` exactly once; the prefix block replaces it.
inline Tensor transformer_forward(const ParamStore& store, const StackParams& sp,
                                  const TransformerConfig& cfg,
                                  const std::vector<int>& token_ids,
                                  const std::vector<Tensor>& prefix_vectors = {},
                                  int marker_id = kNoPrefixMarker) {
  SpliceInput in;
  if (prefix_vectors.empty()) {
    in.ids_before = token_ids;
  } else {
    int marker_pos = -1;
    for (std::size_t i = 0; i < token_ids.size(); ++i) {
      if (token_ids[i] == marker_id) {
        if (marker_pos >= 0)
          throw std::runtime_error("transformer: multiple prefix markers");
        marker_pos = static_cast<int>(i);
      }
    }
    if (marker_pos < 0)
      throw std::runtime_error("transformer: prefix vectors without marker");
    in.ids_before.assign(token_ids.begin(), token_ids.begin() + marker_pos);
    in.ids_after.assign(token_ids.begin() + marker_pos + 1, token_ids.end());
  }

  Tape tape(/*grad_enabled=*/false);
  if (!prefix_vectors.empty()) {
    const int c = static_cast<int>(prefix_vectors.size());
    Tensor block({c, cfg.d});
    for (int i = 0; i < c; ++i) {
      if (prefix_vectors[i].numel() != static_cast<std::size_t>(cfg.d))
        throw std::runtime_error("transformer: prefix vector width mismatch");
      std::copy(prefix_vectors[i].data.begin(), prefix_vectors[i].data.end(),
                block.row(i));
    }
    in.prefix_node = tape.input(std::move(block));
  }
  int out = transformer_nodes(tape, store, sp, cfg, in);
  return tape.val(out);
}

}  // namespace ssae
