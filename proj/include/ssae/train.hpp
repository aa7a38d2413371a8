#pragma once

// Training loop: reconstruction NLL + lambda * L1 objective, the
// multiplicative sparsity controller, Adam, evaluation and binary
// checkpoints. Batches fan out across worker threads per example;
// gradients are reduced in example order so results do not depend on
// thread count.

#include <atomic>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "ssae/corpus.hpp"
#include "ssae/model.hpp"
#include "ssae/rng.hpp"
#include "ssae/tape.hpp"

namespace ssae {

// ---------------------------------------------------------------------
// Loss and controller
// ---------------------------------------------------------------------

inline double total_loss(double recon_nll, double l1, double lambda) {
  if (!std::isfinite(recon_nll) || !std::isfinite(l1) || !std::isfinite(lambda))
    throw std::runtime_error("total_loss: non-finite input");
  return recon_nll + lambda * l1;
}

struct ControllerState {
  double lambda = 1e-3;
  double lambda_min = 1e-6;
  double lambda_max = 10.0;
  double alpha = 0.01;
  double tau_spar = 10.0;
  int window_size = 100;  // N
  std::vector<double> window;
  long long t = 0;

  bool valid() const {
    return lambda_min <= lambda && lambda <= lambda_max && window_size > 0 &&
           static_cast<int>(window.size()) <= window_size;
  }
};

inline int sgn(double x) { return x > 0.0 ? 1 : (x < 0.0 ? -1 : 0); }

// Appends per-sample L1 values; every time the window fills, lambda is
// scaled by (1 + alpha * sgn(mean - tau)) and clipped, and the window
// resets. sgn(0) leaves lambda unchanged.
inline ControllerState controller_update(ControllerState state,
                                         const std::vector<double>& values) {
  if (!state.valid()) throw std::runtime_error("controller_update: bad state");
  for (double v : values) {
    state.window.push_back(v);
    if (static_cast<int>(state.window.size()) == state.window_size) {
      double mean = 0.0;
      for (double w : state.window) mean += w;
      mean /= state.window_size;
      const double factor = 1.0 + state.alpha * sgn(mean - state.tau_spar);
      state.lambda = std::min(state.lambda_max,
                              std::max(state.lambda_min, state.lambda * factor));
      state.window.clear();
      ++state.t;
    }
  }
  return state;
}

// ---------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------

struct AdamState {
  std::vector<Tensor> m, v;
  long long step_count = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  void init(const ParamStore& store) {
    m.clear();
    v.clear();
    for (const auto& t : store.values) {
      m.emplace_back(Tensor::zeros(t.shape));
      v.emplace_back(Tensor::zeros(t.shape));
    }
    step_count = 0;
  }

  void step(ParamStore& store, double lr) {
    ++step_count;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
    for (int p = 0; p < store.size(); ++p) {
      double* w = store.values[p].data.data();
      double* g = store.grads[p].data.data();
      double* mp = m[p].data.data();
      double* vp = v[p].data.data();
      const std::size_t n = store.values[p].numel();
      for (std::size_t i = 0; i < n; ++i) {
        mp[i] = beta1 * mp[i] + (1.0 - beta1) * g[i];
        vp[i] = beta2 * vp[i] + (1.0 - beta2) * g[i] * g[i];
        const double mh = mp[i] / bc1;
        const double vh = vp[i] / bc2;
        w[i] -= lr * mh / (std::sqrt(vh) + eps);
      }
    }
  }
};

// ---------------------------------------------------------------------
// Parallel helper: deterministic as long as per-index work is pure.
// ---------------------------------------------------------------------

inline void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
  if (threads <= 0)
    threads = static_cast<int>(std::thread::hardware_concurrency());
  threads = std::max(1, std::min(threads, n));
  if (threads == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&, t]() {
      try {
        for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------
// Example enumeration
// ---------------------------------------------------------------------

struct ExampleRef {
  int traj_index = 0;
  int step_k = 1;  // 1-based

  // stable id for noise streams (depth <= 8 keeps k in one nibble)
  long long stable_id() const { return static_cast<long long>(traj_index) * 16 + step_k; }
};

inline std::vector<ExampleRef> enumerate_examples(const Corpus& corpus, Split split) {
  std::vector<ExampleRef> out;
  for (int ti : corpus.indices_of(split))
    for (int k = 1; k <= static_cast<int>(corpus.trajectories[ti].steps.size()); ++k)
      out.push_back({ti, k});
  return out;
}

// ---------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------

struct TrainConfig {
  double lr = 3e-4;
  int batch = 32;
  int epochs = 10;
  std::uint64_t seed = 1;
  double tau_spar = 10.0;
  double sigma = 0.01;
  int window = 100;
  double lambda_init = 1e-3;
  double lambda_min = 1e-6;
  double lambda_max = 10.0;
  bool fixed_lambda = false;  // control mode: lambda stays at lambda_init
  int threads = 0;
};

struct TrainLogRow {
  long long step = 0;
  long long window_t = 0;
  double lambda = 0.0;
  double mean_l1 = 0.0;
  double recon_nll = 0.0;
  double total = 0.0;
};

struct TrainingLog {
  std::vector<TrainLogRow> rows;

  void write_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("TrainingLog: cannot open " + path);
    out << "step,window_t,lambda,mean_L1,recon_nll,total_loss\n";
    out.precision(17);
    for (const auto& r : rows)
      out << r.step << "," << r.window_t << "," << r.lambda << "," << r.mean_l1
          << "," << r.recon_nll << "," << r.total << "\n";
  }
};

struct TrainerState {
  AdamState adam;
  ControllerState controller;
  int epoch = 0;            // next epoch to run
  long long global_step = 0;
};

inline ControllerState make_controller(const TrainConfig& cfg) {
  ControllerState c;
  c.lambda = cfg.lambda_init;
  c.lambda_min = cfg.lambda_min;
  c.lambda_max = cfg.lambda_max;
  c.alpha = 0.01;
  c.tau_spar = cfg.tau_spar;
  c.window_size = cfg.window;
  return c;
}

// Builds the per-example objective graph; returns {loss, recon, l1} nodes.
struct ExampleNodes {
  int loss = -1, recon = -1, l1 = -1;
};

inline ExampleNodes build_example_loss(Tape& tape, const SsaeModel& m,
                                       const EncoderInput& ex, double lambda,
                                       const Tensor* noise) {
  ExampleNodes n;
  const int h = encode_node(tape, m, ex);
  const int feat = project_node(tape, m, h, noise);
  n.l1 = tape.l1_norm(feat);
  const int logits = decode_logits_node(tape, m, feat, ex.context_ids, ex.step_ids);
  n.recon = tape.sequence_nll(logits, ex.step_ids);
  n.loss = tape.add(n.recon, tape.scale(n.l1, lambda));
  return n;
}

inline Tensor draw_noise(const SsaeModel& m, std::uint64_t seed,
                         long long example_id, int epoch) {
  Tensor noise({m.cfg.c * m.cfg.d});
  if (m.cfg.sigma > 0.0) {
    Rng rng(derive_seed(seed, "noise", static_cast<std::uint64_t>(example_id),
                        static_cast<std::uint64_t>(epoch)));
    for (double& v : noise.data) v = rng.next_gaussian() * m.cfg.sigma;
  }
  return noise;
}

// Runs `cfg.epochs` epochs starting from `state` (fresh by default).
// Deterministic in (model init, cfg). Appends to `log`.
inline void train(SsaeModel& model, const Corpus& corpus, const TrainConfig& cfg,
                  TrainerState& state, TrainingLog& log,
                  const std::function<void(int)>& on_epoch_done = nullptr) {
  const auto examples = enumerate_examples(corpus, Split::train);
  if (examples.empty()) throw std::runtime_error("train: empty train split");
  if (state.adam.m.empty()) state.adam.init(model.params);
  if (state.controller.window_size == 0) state.controller = make_controller(cfg);

  struct Slot {
    double recon = 0.0, l1 = 0.0;
    Tape tape{true};
    int loss_node = -1;
  };

  const int end_epoch = cfg.epochs;
  for (int epoch = state.epoch; epoch < end_epoch; ++epoch) {
    std::vector<int> order(examples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    Rng shuffle_rng(derive_seed(cfg.seed, "shuffle", epoch));
    shuffle_rng.shuffle(order);

    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const int bsz = static_cast<int>(
          std::min<std::size_t>(cfg.batch, order.size() - start));
      const double lambda = state.controller.lambda;
      std::vector<Slot> slots(bsz);

      parallel_for(bsz, cfg.threads, [&](int b) {
        const ExampleRef& ref = examples[order[start + b]];
        const Trajectory& traj = corpus.trajectories[ref.traj_index];
        const EncoderInput ex = build_example(traj, ref.step_k);
        const Tensor noise = draw_noise(model, cfg.seed, ref.stable_id(), epoch);
        Slot& s = slots[b];
        const ExampleNodes nodes = build_example_loss(
            s.tape, model, ex, lambda, model.cfg.sigma > 0.0 ? &noise : nullptr);
        s.recon = s.tape.val(nodes.recon).data[0];
        s.l1 = s.tape.val(nodes.l1).data[0];
        s.loss_node = nodes.loss;
        s.tape.backward(nodes.loss);
      });

      model.params.zero_grads();
      double recon_sum = 0.0, l1_sum = 0.0;
      std::vector<double> l1_values(bsz);
      for (int b = 0; b < bsz; ++b) {  // fixed reduction order
        slots[b].tape.flush_param_grads(model.params, 1.0 / bsz);
        recon_sum += slots[b].recon;
        l1_sum += slots[b].l1;
        l1_values[b] = slots[b].l1;
      }
      const double recon_mean = recon_sum / bsz;
      const double l1_mean = l1_sum / bsz;
      double total;
      try {
        total = total_loss(recon_mean, l1_mean, lambda);
      } catch (const std::exception&) {
        throw std::runtime_error("train: divergence (non-finite loss) at step " +
                                 std::to_string(state.global_step));
      }

      state.adam.step(model.params, cfg.lr);
      if (!cfg.fixed_lambda)
        state.controller = controller_update(state.controller, l1_values);
      else
        state.controller.window.clear();

      ++state.global_step;
      log.rows.push_back({state.global_step, state.controller.t,
                          lambda, l1_mean, recon_mean, total});
    }
    state.epoch = epoch + 1;
    if (on_epoch_done) on_epoch_done(epoch);
  }
}

// ---------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------

struct EvalMetrics {
  double recon_nll = 0.0;
  double token_accuracy = 0.0;
  double exact_match_rate = 0.0;
  double mean_l1 = 0.0;
  double mean_l0 = 0.0;
  int n_examples = 0;
};

inline EvalMetrics evaluate(const SsaeModel& model, const Corpus& corpus,
                            Split split, double theta_act = 0.01,
                            int threads = 0, int max_decode_len = 48) {
  const auto examples = enumerate_examples(corpus, split);
  if (examples.empty()) throw std::runtime_error("evaluate: empty split");
  struct Row {
    double nll = 0.0;
    int tokens = 0, correct_tokens = 0;
    bool exact = false;
    double l1 = 0.0;
    int l0 = 0;
  };
  std::vector<Row> rows(examples.size());
  parallel_for(static_cast<int>(examples.size()), threads, [&](int i) {
    const ExampleRef& ref = examples[i];
    const Trajectory& traj = corpus.trajectories[ref.traj_index];
    const EncoderInput ex = build_example(traj, ref.step_k);
    const Tensor h = encode(model, ex);
    const SparseFeature feat = project(model, h);
    Row r;
    for (double v : feat.values) {
      r.l1 += std::abs(v);
      if (v > theta_act) ++r.l0;
    }
    const auto segments = split_segments(feat);
    const Tensor logits =
        decode_teacher_forced(model, ex.context_ids, segments, ex.step_ids);
    const int L = logits.shape[0], V = logits.shape[1];
    double nll = 0.0;
    int correct = 0;
    for (int t = 0; t < L; ++t) {
      const double* lt = logits.row(t);
      double mx = lt[0];
      int arg = 0;
      for (int j = 1; j < V; ++j)
        if (lt[j] > mx) {
          mx = lt[j];
          arg = j;
        }
      double z = 0.0;
      for (int j = 0; j < V; ++j) z += std::exp(lt[j] - mx);
      nll += -(lt[ex.step_ids[t]] - mx - std::log(z));
      if (arg == ex.step_ids[t]) ++correct;
    }
    r.nll = nll / L;
    r.tokens = L;
    r.correct_tokens = correct;
    auto gen = decode_sample(model, ex.context_ids, segments, max_decode_len,
                             nullptr, 0.0);
    if (!gen.empty() && gen.back() == Tokenizer::kEos) gen.pop_back();
    std::vector<int> want(ex.step_ids.begin(), ex.step_ids.end() - 1);
    r.exact = (gen == want);
    rows[i] = r;
  });

  EvalMetrics m;
  m.n_examples = static_cast<int>(examples.size());
  long long tok = 0, tok_ok = 0;
  for (const Row& r : rows) {
    m.recon_nll += r.nll;
    m.exact_match_rate += r.exact ? 1.0 : 0.0;
    m.mean_l1 += r.l1;
    m.mean_l0 += r.l0;
    tok += r.tokens;
    tok_ok += r.correct_tokens;
  }
  m.recon_nll /= m.n_examples;
  m.exact_match_rate /= m.n_examples;
  m.mean_l1 /= m.n_examples;
  m.mean_l0 /= m.n_examples;
  m.token_accuracy = static_cast<double>(tok_ok) / static_cast<double>(tok);
  return m;
}

// ---------------------------------------------------------------------
// Checkpoints: one self-describing binary file with a trailing checksum.
// ---------------------------------------------------------------------

namespace ckpt {

inline void put_u64(std::string& s, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_i64(std::string& s, long long v) {
  put_u64(s, static_cast<std::uint64_t>(v));
}
inline void put_f64(std::string& s, double v) {
  std::uint64_t u;
  std::memcpy(&u, &v, 8);
  put_u64(s, u);
}
inline void put_str(std::string& s, const std::string& v) {
  put_u64(s, v.size());
  s += v;
}
inline void put_tensor(std::string& s, const Tensor& t) {
  put_u64(s, t.shape.size());
  for (int d : t.shape) put_i64(s, d);
  put_u64(s, t.data.size());
  const std::size_t at = s.size();
  s.resize(at + t.data.size() * 8);
  std::memcpy(s.data() + at, t.data.data(), t.data.size() * 8);
}

struct Reader {
  const std::string& s;
  std::size_t pos = 0;

  explicit Reader(const std::string& str) : s(str) {}
  void need(std::size_t n) const {
    if (pos + n > s.size()) throw std::runtime_error("checkpoint: truncated file");
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[pos + i]))
           << (8 * i);
    pos += 8;
    return v;
  }
  long long i64() { return static_cast<long long>(u64()); }
  double f64() {
    const std::uint64_t u = u64();
    double v;
    std::memcpy(&v, &u, 8);
    return v;
  }
  std::string str() {
    const std::uint64_t n = u64();
    need(n);
    std::string v = s.substr(pos, n);
    pos += n;
    return v;
  }
  Tensor tensor() {
    const std::uint64_t rank = u64();
    std::vector<int> shape(rank);
    for (auto& d : shape) d = static_cast<int>(i64());
    const std::uint64_t n = u64();
    need(n * 8);
    Tensor t;
    t.shape = std::move(shape);
    t.data.resize(n);
    std::memcpy(t.data.data(), s.data() + pos, n * 8);
    pos += n * 8;
    if (t.data.size() != Tensor::numel_of(t.shape))
      throw std::runtime_error("checkpoint: tensor shape mismatch");
    return t;
  }
};

}  // namespace ckpt

inline constexpr std::uint64_t kCheckpointMagic = 0x53534145434b5031ULL;  // "SSAECKP1"

inline void save_checkpoint(const std::string& path, const SsaeModel& model,
                            const TrainerState& state, std::uint64_t config_hash) {
  std::string s;
  ckpt::put_u64(s, kCheckpointMagic);
  ckpt::put_u64(s, config_hash);
  const SsaeConfig& c = model.cfg;
  ckpt::put_i64(s, c.d);
  ckpt::put_i64(s, c.c);
  ckpt::put_i64(s, c.layers);
  ckpt::put_i64(s, c.heads);
  ckpt::put_i64(s, c.ff_mult);
  ckpt::put_i64(s, c.max_seq);
  ckpt::put_f64(s, c.sigma);
  ckpt::put_i64(s, c.ablate_context ? 1 : 0);
  ckpt::put_i64(s, c.vocab);
  // tokenizer vocabulary (for self-description)
  const Tokenizer& tok = corpus_tokenizer();
  ckpt::put_u64(s, tok.size());
  for (int i = 0; i < tok.size(); ++i) ckpt::put_str(s, tok.token(i));
  // parameters
  ckpt::put_u64(s, model.params.size());
  for (int p = 0; p < model.params.size(); ++p) {
    ckpt::put_str(s, model.params.names[p]);
    ckpt::put_tensor(s, model.params.values[p]);
  }
  // optimizer
  ckpt::put_u64(s, state.adam.m.size());
  for (std::size_t p = 0; p < state.adam.m.size(); ++p) {
    ckpt::put_tensor(s, state.adam.m[p]);
    ckpt::put_tensor(s, state.adam.v[p]);
  }
  ckpt::put_i64(s, state.adam.step_count);
  // controller
  const ControllerState& ct = state.controller;
  ckpt::put_f64(s, ct.lambda);
  ckpt::put_f64(s, ct.lambda_min);
  ckpt::put_f64(s, ct.lambda_max);
  ckpt::put_f64(s, ct.alpha);
  ckpt::put_f64(s, ct.tau_spar);
  ckpt::put_i64(s, ct.window_size);
  ckpt::put_u64(s, ct.window.size());
  for (double v : ct.window) ckpt::put_f64(s, v);
  ckpt::put_i64(s, ct.t);
  ckpt::put_i64(s, state.epoch);
  ckpt::put_i64(s, state.global_step);

  const std::uint64_t checksum = fnv1a64(s.data(), s.size());
  ckpt::put_u64(s, checksum);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
  if (!out) throw std::runtime_error("save_checkpoint: write failed");
}

struct LoadedCheckpoint {
  SsaeModel model;
  TrainerState state;
  std::uint64_t config_hash = 0;
};

inline LoadedCheckpoint load_checkpoint(
    const std::string& path,
    std::optional<std::uint64_t> expected_config_hash = std::nullopt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  std::string s = ss.str();
  if (s.size() < 16) throw std::runtime_error("load_checkpoint: truncated file");
  const std::uint64_t stored_sum = [&] {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(
               static_cast<unsigned char>(s[s.size() - 8 + i]))
           << (8 * i);
    return v;
  }();
  s.resize(s.size() - 8);
  if (fnv1a64(s.data(), s.size()) != stored_sum)
    throw std::runtime_error("load_checkpoint: checksum mismatch (corrupt file)");

  ckpt::Reader r(s);
  if (r.u64() != kCheckpointMagic)
    throw std::runtime_error("load_checkpoint: bad magic");
  LoadedCheckpoint out;
  out.config_hash = r.u64();
  if (expected_config_hash && *expected_config_hash != out.config_hash)
    throw std::runtime_error("load_checkpoint: config hash mismatch");

  SsaeConfig c;
  c.d = static_cast<int>(r.i64());
  c.c = static_cast<int>(r.i64());
  c.layers = static_cast<int>(r.i64());
  c.heads = static_cast<int>(r.i64());
  c.ff_mult = static_cast<int>(r.i64());
  c.max_seq = static_cast<int>(r.i64());
  c.sigma = r.f64();
  c.ablate_context = r.i64() != 0;
  c.vocab = static_cast<int>(r.i64());

  const std::uint64_t vocab_count = r.u64();
  const Tokenizer& tok = corpus_tokenizer();
  if (static_cast<int>(vocab_count) != tok.size())
    throw std::runtime_error("load_checkpoint: tokenizer vocabulary mismatch");
  for (int i = 0; i < tok.size(); ++i)
    if (r.str() != tok.token(i))
      throw std::runtime_error("load_checkpoint: tokenizer vocabulary mismatch");

  out.model = make_ssae_model(c, /*seed=*/0);
  const std::uint64_t n_params = r.u64();
  if (static_cast<int>(n_params) != out.model.params.size())
    throw std::runtime_error("load_checkpoint: parameter count mismatch");
  for (std::uint64_t p = 0; p < n_params; ++p) {
    const std::string name = r.str();
    Tensor t = r.tensor();
    const int id = out.model.params.id_of(name);
    if (t.shape != out.model.params.values[id].shape)
      throw std::runtime_error("load_checkpoint: shape mismatch for " + name);
    out.model.params.values[id] = std::move(t);
  }
  const std::uint64_t n_adam = r.u64();
  out.state.adam.m.resize(n_adam);
  out.state.adam.v.resize(n_adam);
  for (std::uint64_t p = 0; p < n_adam; ++p) {
    out.state.adam.m[p] = r.tensor();
    out.state.adam.v[p] = r.tensor();
  }
  out.state.adam.step_count = r.i64();
  ControllerState& ct = out.state.controller;
  ct.lambda = r.f64();
  ct.lambda_min = r.f64();
  ct.lambda_max = r.f64();
  ct.alpha = r.f64();
  ct.tau_spar = r.f64();
  ct.window_size = static_cast<int>(r.i64());
  const std::uint64_t wn = r.u64();
  ct.window.resize(wn);
  for (auto& v : ct.window) v = r.f64();
  ct.t = r.i64();
  out.state.epoch = static_cast<int>(r.i64());
  out.state.global_step = r.i64();
  return out;
}

}  // namespace ssae
