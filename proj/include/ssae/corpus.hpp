#pragma once

// Synthetic multi-step arithmetic corpus. Each trajectory is a chain of
// two-operand integer operations narrated through surface templates, with
// exact per-step labels (correctness, topical coherence, token length,
// first token). Corruption modes plant labelled errors. Everything is a
// pure function of (seed, config).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "ssae/rng.hpp"
#include "ssae/tokenizer.hpp"

namespace ssae {

enum class OpKind { add, sub, mul };

inline char op_symbol(OpKind k) {
  switch (k) {
    case OpKind::add: return '+';
    case OpKind::sub: return '-';
    default: return '*';
  }
}
inline OpKind op_from_symbol(char c) {
  if (c == '+') return OpKind::add;
  if (c == '-') return OpKind::sub;
  if (c == '*') return OpKind::mul;
  throw std::runtime_error("corpus: bad op symbol");
}
inline long long apply_op(OpKind k, long long a, long long b) {
  switch (k) {
    case OpKind::add: return a + b;
    case OpKind::sub: return a - b;
    default: return a * b;
  }
}

enum class CorruptMode { none, wrong_result, operand_swap, off_topic };

inline const char* corrupt_name(CorruptMode m) {
  switch (m) {
    case CorruptMode::none: return "none";
    case CorruptMode::wrong_result: return "wrong_result";
    case CorruptMode::operand_swap: return "operand_swap";
    default: return "off_topic";
  }
}
inline CorruptMode corrupt_from_name(const std::string& s) {
  if (s == "none") return CorruptMode::none;
  if (s == "wrong_result") return CorruptMode::wrong_result;
  if (s == "operand_swap") return CorruptMode::operand_swap;
  if (s == "off_topic") return CorruptMode::off_topic;
  throw std::runtime_error("corpus: bad corruption name");
}

struct Step {
  std::string text;
  std::vector<int> token_ids;
  bool is_correct = true;
  bool is_logical = true;
  int length_tokens = 0;
  int first_token = -1;

  // arithmetic plan behind the rendered text
  long long value_in = 0;   // running value entering the step
  OpKind op = OpKind::add;
  long long operand = 0;    // planned operand
  long long result = 0;     // true result of the plan at this step
  int style = 0;
  bool is_final = false;
  CorruptMode corrupt = CorruptMode::none;
};

struct Trajectory {
  std::string query;
  std::vector<Step> steps;
  long long final_answer = 0;
  std::uint64_t seed = 0;
  int query_style = 0;
};

// ---------------------------------------------------------------------
// Template language
// ---------------------------------------------------------------------

namespace templates {

inline const std::vector<std::string>& names() {
  static const std::vector<std::string> v = {"mia", "tom",  "sam",
                                             "ava", "leo", "zoe"};
  return v;
}

inline const std::vector<std::string>& off_topic_lines() {
  // placeholder N is replaced by a name
  static const std::vector<std::string> v = {
      "N likes to draw pictures.",
      "the sky is very blue today.",
      "N walks to the park.",
      "lunch was good.",
  };
  return v;
}

inline constexpr int kMaxStepStyles = 6;

inline std::string op_word(OpKind k) {
  switch (k) {
    case OpKind::add: return "plus";
    case OpKind::sub: return "minus";
    default: return "times";
  }
}

inline std::string plan_word(OpKind k) {
  switch (k) {
    case OpKind::add: return "add";
    case OpKind::sub: return "minus";
    default: return "times";
  }
}

// all words used anywhere, for the fixed vocabulary
inline std::vector<std::string> all_words() {
  std::vector<std::string> w = {
      // query
      "starts", "begins", "with", "at", "then", "result", "what", "is",
      "add", "minus", "times", "plus",
      // steps
      "so", "next", "now", "we", "have", "get", "equals", "gives", "makes",
      "compute", "to", "from", "answer", "the",
      // off topic
      "likes", "draw", "pictures", "sky", "very", "blue", "today", "walks",
      "park", "lunch", "was", "good"};
  for (const auto& n : names()) w.push_back(n);
  return w;
}

inline std::string render_number(long long v) { return std::to_string(v); }

// Query: name, start value, then the operation plan.
inline std::string render_query(const std::string& name, long long v0,
                                const std::vector<std::pair<OpKind, long long>>& plan,
                                int style) {
  std::ostringstream os;
  os << name << (style == 0 ? " starts with " : " begins at ")
     << render_number(v0) << ".";
  for (const auto& [op, operand] : plan)
    os << " then " << plan_word(op) << " " << render_number(operand) << ".";
  os << " what is the result?";
  return os.str();
}

inline std::string render_step_body(int style, long long v, OpKind op,
                                    long long o, long long r) {
  const std::string vs = render_number(v), os_ = render_number(o),
                    rs = render_number(r), opw = op_word(op);
  switch (style % kMaxStepStyles) {
    case 0: return "so " + vs + " " + opw + " " + os_ + " equals " + rs + ".";
    case 1: return "then " + vs + " " + opw + " " + os_ + " is " + rs + ".";
    case 2: return "next " + vs + " " + opw + " " + os_ + " gives " + rs + ".";
    case 3:
      return "now we have " + vs + " " + opw + " " + os_ + " makes " + rs +
             ".";
    case 4:
      return "compute " + vs + " " + opw + " " + os_ + " to get " + rs + ".";
    default:
      return "we get " + rs + " from " + vs + " " + opw + " " + os_ + ".";
  }
}

inline std::string render_step(int style, long long v, OpKind op, long long o,
                               long long r, bool is_final) {
  std::string s = render_step_body(style, v, op, o, r);
  if (is_final) s += " the answer is " + render_number(r) + ".";
  return s;
}

}  // namespace templates

inline const Tokenizer& corpus_tokenizer() {
  static const Tokenizer tok(templates::all_words());
  return tok;
}

// ---------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------

// Chooses (op, operand) keeping every intermediate value in [1, 99].
inline std::pair<OpKind, long long> pick_operation(Rng& rng, long long v) {
  std::vector<OpKind> allowed;
  if (v + 1 <= 99) allowed.push_back(OpKind::add);
  if (v >= 2) allowed.push_back(OpKind::sub);
  if (2 * v <= 99) allowed.push_back(OpKind::mul);
  const OpKind op = allowed[rng.next_below(allowed.size())];
  long long o = 1;
  switch (op) {
    case OpKind::add: o = rng.next_int(1, 99 - v); break;
    case OpKind::sub: o = rng.next_int(1, v - 1); break;
    case OpKind::mul: o = rng.next_int(2, 99 / v); break;
  }
  return {op, o};
}

inline void refresh_step_token_fields(Step& s) {
  s.token_ids = corpus_tokenizer().tokenize(s.text);
  if (s.token_ids.empty()) throw std::runtime_error("corpus: empty step");
  s.length_tokens = static_cast<int>(s.token_ids.size());
  s.first_token = s.token_ids[0];
}

inline Trajectory generate_trajectory(std::uint64_t seed, int depth,
                                      int style_pool) {
  if (depth < 2 || depth > 8)
    throw std::runtime_error("generate_trajectory: depth must be in [2,8]");
  if (style_pool < 1)
    throw std::runtime_error("generate_trajectory: style_pool must be >= 1");
  style_pool = std::min(style_pool, templates::kMaxStepStyles);

  Rng rng(derive_seed(seed, "trajectory"));
  Trajectory traj;
  traj.seed = seed;

  const auto& names = templates::names();
  const std::string name = names[rng.next_below(names.size())];
  long long v = rng.next_int(1, 99);
  const long long v0 = v;

  std::vector<std::pair<OpKind, long long>> plan;
  traj.steps.reserve(depth);
  for (int k = 0; k < depth; ++k) {
    auto [op, o] = pick_operation(rng, v);
    plan.emplace_back(op, o);
    Step s;
    s.value_in = v;
    s.op = op;
    s.operand = o;
    s.result = apply_op(op, v, o);
    s.style = static_cast<int>(rng.next_below(style_pool));
    s.is_final = (k == depth - 1);
    s.text = templates::render_step(s.style, v, op, o, s.result, s.is_final);
    refresh_step_token_fields(s);
    traj.steps.push_back(std::move(s));
    v = traj.steps.back().result;
  }
  traj.final_answer = v;
  traj.query_style = static_cast<int>(rng.next_below(2));
  traj.query = templates::render_query(name, v0, plan, traj.query_style);
  return traj;
}

// Re-executes the stated plan; used as the label-soundness oracle.
inline long long execute_plan(const Trajectory& t) {
  long long v = t.steps.empty() ? 0 : t.steps[0].value_in;
  for (const auto& s : t.steps) v = apply_op(s.op, v, s.operand);
  return v;
}

// ---------------------------------------------------------------------
// Corruption
// ---------------------------------------------------------------------

// `operand_pool` holds candidate substitutes drawn from elsewhere in the
// trajectory (other steps' operands and the start value).
inline Step corrupt_step(const Step& step, CorruptMode mode,
                         std::uint64_t rng_seed,
                         const std::vector<long long>& operand_pool = {}) {
  if (step.corrupt != CorruptMode::none || !step.is_correct)
    throw std::runtime_error("corrupt_step: step is already corrupted");
  if (mode == CorruptMode::none)
    throw std::runtime_error("corrupt_step: mode must corrupt");

  Rng rng(derive_seed(rng_seed, "corrupt"));
  Step out = step;
  out.corrupt = mode;
  switch (mode) {
    case CorruptMode::wrong_result: {
      long long off = rng.next_int(1, 9);
      if (rng.next_below(2) == 0) off = -off;
      const long long stated = step.result + off;
      out.text = templates::render_step(step.style, step.value_in, step.op,
                                        step.operand, stated, step.is_final);
      out.is_correct = false;
      out.is_logical = true;
      break;
    }
    case CorruptMode::operand_swap: {
      std::vector<long long> pool;
      for (long long c : operand_pool)
        if (c != step.operand) pool.push_back(c);
      long long o2;
      if (!pool.empty()) {
        o2 = pool[rng.next_below(pool.size())];
      } else {
        o2 = step.operand > 1 ? step.operand - 1 : step.operand + 1;
      }
      const long long stated = apply_op(step.op, step.value_in, o2);
      out.text = templates::render_step(step.style, step.value_in, step.op, o2,
                                        stated, step.is_final);
      out.is_correct = false;
      out.is_logical = true;
      break;
    }
    case CorruptMode::off_topic: {
      const auto& lines = templates::off_topic_lines();
      std::string line = lines[rng.next_below(lines.size())];
      const auto& names = templates::names();
      const std::string name = names[rng.next_below(names.size())];
      const auto pos = line.find('N');
      if (pos != std::string::npos) line = line.substr(0, pos) + name + line.substr(pos + 1);
      out.text = line;
      out.is_correct = false;
      out.is_logical = false;
      break;
    }
    default: break;
  }
  refresh_step_token_fields(out);
  return out;
}

// ---------------------------------------------------------------------
// Corpus config, emission, loading
// ---------------------------------------------------------------------

struct CorpusConfig {
  std::uint64_t seed = 1;
  int n_trajectories = 10000;
  int depth_min = 2;
  int depth_max = 5;
  int style_pool = 4;
  double corruption_rate = 0.3;  // fraction of steps corrupted overall
  double split_train = 0.8;
  double split_val = 0.1;
  double split_test = 0.1;
};

enum class Split { train, val, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    default: return "test";
  }
}
inline Split split_from_name(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw std::runtime_error("corpus: bad split name");
}

struct Corpus {
  CorpusConfig config;
  std::vector<Trajectory> trajectories;
  std::vector<Split> splits;  // parallel to trajectories

  std::vector<int> indices_of(Split s) const {
    std::vector<int> out;
    for (std::size_t i = 0; i < trajectories.size(); ++i)
      if (splits[i] == s) out.push_back(static_cast<int>(i));
    return out;
  }
};

// Half the trajectories stay clean; within a selected trajectory each
// step is corrupted independently so the overall per-step rate matches
// `corruption_rate`.
inline void apply_corruption(Trajectory& traj, double rate, Rng& rng) {
  if (rng.next_double() < 0.5) return;
  const double per_step = std::min(1.0, 2.0 * rate);
  std::vector<long long> pool;
  pool.push_back(traj.steps[0].value_in);
  for (const auto& s : traj.steps) pool.push_back(s.operand);
  for (std::size_t k = 0; k < traj.steps.size(); ++k) {
    if (rng.next_double() >= per_step) continue;
    auto mode = static_cast<CorruptMode>(1 + rng.next_below(3));
    // keep the last step stating some answer
    if (mode == CorruptMode::off_topic && traj.steps[k].is_final)
      mode = CorruptMode::wrong_result;
    traj.steps[k] = corrupt_step(traj.steps[k], mode,
                                 derive_seed(traj.seed, "corrupt_step", k), pool);
  }
}

inline Corpus generate_corpus(const CorpusConfig& cfg) {
  if (cfg.n_trajectories < 1) throw std::runtime_error("corpus: empty config");
  if (cfg.depth_min < 2 || cfg.depth_max > 8 || cfg.depth_min > cfg.depth_max)
    throw std::runtime_error("corpus: bad depth range");
  if (cfg.corruption_rate < 0.0 || cfg.corruption_rate > 0.5)
    throw std::runtime_error("corpus: corruption_rate must be in [0, 0.5]");
  const double fsum = cfg.split_train + cfg.split_val + cfg.split_test;
  if (std::abs(fsum - 1.0) > 1e-9)
    throw std::runtime_error("corpus: split fractions must sum to 1");

  Corpus corpus;
  corpus.config = cfg;
  corpus.trajectories.reserve(cfg.n_trajectories);
  for (int i = 0; i < cfg.n_trajectories; ++i) {
    const std::uint64_t tseed = derive_seed(cfg.seed, "traj_seed", i);
    Rng pick(derive_seed(tseed, "depth"));
    const int depth =
        static_cast<int>(pick.next_int(cfg.depth_min, cfg.depth_max));
    Trajectory t = generate_trajectory(tseed, depth, cfg.style_pool);
    Rng crng(derive_seed(tseed, "corruption"));
    apply_corruption(t, cfg.corruption_rate, crng);
    corpus.trajectories.push_back(std::move(t));
  }

  const int n = cfg.n_trajectories;
  const int n_train = static_cast<int>(std::llround(cfg.split_train * n));
  const int n_val = static_cast<int>(std::llround(cfg.split_val * n));
  corpus.splits.resize(n);
  for (int i = 0; i < n; ++i)
    corpus.splits[i] = i < n_train            ? Split::train
                       : i < n_train + n_val ? Split::val
                                             : Split::test;
  return corpus;
}

// Encoder-side view of one (trajectory, step) pair.
struct EncoderInput {
  std::vector<int> context_ids;  // query + prior steps + SEP
  std::vector<int> step_ids;     // step tokens + EOS
};

// k is 1-based, matching "step k with context C_k".
inline EncoderInput build_example(const Trajectory& traj, int k) {
  if (k < 1 || k > static_cast<int>(traj.steps.size()))
    throw std::runtime_error("build_example: step index out of range");
  const Tokenizer& tok = corpus_tokenizer();
  EncoderInput ex;
  ex.context_ids = tok.tokenize(traj.query);
  for (int i = 0; i + 1 < k; ++i) {
    const auto& ids = traj.steps[i].token_ids;
    ex.context_ids.insert(ex.context_ids.end(), ids.begin(), ids.end());
  }
  ex.context_ids.push_back(Tokenizer::kSep);
  ex.step_ids = traj.steps[k - 1].token_ids;
  ex.step_ids.push_back(Tokenizer::kEos);
  return ex;
}

// ---------------------------------------------------------------------
// JSON Lines round trip
// ---------------------------------------------------------------------

inline nlohmann::json trajectory_to_json(const Trajectory& t, Split split) {
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& s : t.steps) {
    steps.push_back({{"text", s.text},
                     {"is_correct", s.is_correct},
                     {"is_logical", s.is_logical},
                     {"value_in", s.value_in},
                     {"op", std::string(1, op_symbol(s.op))},
                     {"operand", s.operand},
                     {"result", s.result},
                     {"style", s.style},
                     {"is_final", s.is_final},
                     {"corrupt", corrupt_name(s.corrupt)}});
  }
  return {{"seed", t.seed},
          {"query", t.query},
          {"query_style", t.query_style},
          {"final_answer", t.final_answer},
          {"split", split_name(split)},
          {"steps", steps}};
}

inline std::pair<Trajectory, Split> trajectory_from_json(const nlohmann::json& j) {
  Trajectory t;
  t.seed = j.at("seed").get<std::uint64_t>();
  t.query = j.at("query").get<std::string>();
  t.query_style = j.at("query_style").get<int>();
  t.final_answer = j.at("final_answer").get<long long>();
  for (const auto& js : j.at("steps")) {
    Step s;
    s.text = js.at("text").get<std::string>();
    s.is_correct = js.at("is_correct").get<bool>();
    s.is_logical = js.at("is_logical").get<bool>();
    s.value_in = js.at("value_in").get<long long>();
    s.op = op_from_symbol(js.at("op").get<std::string>().at(0));
    s.operand = js.at("operand").get<long long>();
    s.result = js.at("result").get<long long>();
    s.style = js.at("style").get<int>();
    s.is_final = js.at("is_final").get<bool>();
    s.corrupt = corrupt_from_name(js.at("corrupt").get<std::string>());
    refresh_step_token_fields(s);
    t.steps.push_back(std::move(s));
  }
  if (t.steps.size() < 2) throw std::runtime_error("corpus: trajectory too short");
  return {std::move(t), split_from_name(j.at("split").get<std::string>())};
}

struct CorpusCounts {
  int n_train = 0, n_val = 0, n_test = 0;
  int n_steps = 0;
  int n_corrupted_steps = 0;
};

inline CorpusCounts emit_corpus(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("emit_corpus: cannot open " + path);
  CorpusCounts counts;
  for (std::size_t i = 0; i < corpus.trajectories.size(); ++i) {
    const auto& t = corpus.trajectories[i];
    const Split sp = corpus.splits[i];
    out << trajectory_to_json(t, sp).dump() << "\n";
    if (sp == Split::train) ++counts.n_train;
    if (sp == Split::val) ++counts.n_val;
    if (sp == Split::test) ++counts.n_test;
    for (const auto& s : t.steps) {
      ++counts.n_steps;
      if (s.corrupt != CorruptMode::none) ++counts.n_corrupted_steps;
    }
  }
  if (!out) throw std::runtime_error("emit_corpus: write failed for " + path);
  return counts;
}

inline Corpus load_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_corpus: cannot open " + path);
  Corpus corpus;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      auto [t, sp] = trajectory_from_json(j);
      corpus.trajectories.push_back(std::move(t));
      corpus.splits.push_back(sp);
    } catch (const std::exception& e) {
      throw std::runtime_error("load_corpus: malformed record at line " +
                               std::to_string(line_no) + ": " + e.what());
    }
  }
  if (corpus.trajectories.empty())
    throw std::runtime_error("load_corpus: empty corpus in " + path);
  return corpus;
}

// ---------------------------------------------------------------------
// Naive baselines
// ---------------------------------------------------------------------

struct BaselineStats {
  int n_steps = 0;
  double correct_rate = 0.0;       // fraction labelled correct
  double logical_rate = 0.0;
  double majority_correct_acc = 0.0;
  double majority_logical_acc = 0.0;
  bool majority_correct_class = true;
  bool majority_logical_class = true;
  double mean_length = 0.0;
  double length_rmse_of_mean = 0.0;  // constant-prediction baseline
  std::map<int, double> first_token_dist;
  double first_token_perplexity = 0.0;  // self cross-entropy baseline
};

template <class StepRange>
inline BaselineStats label_stats_over(const StepRange& steps) {
  BaselineStats st;
  double len_sum = 0.0;
  std::map<int, int> ft_counts;
  int n_correct = 0, n_logical = 0;
  for (const Step& s : steps) {
    ++st.n_steps;
    n_correct += s.is_correct ? 1 : 0;
    n_logical += s.is_logical ? 1 : 0;
    len_sum += s.length_tokens;
    ++ft_counts[s.first_token];
  }
  if (st.n_steps == 0) throw std::runtime_error("label_stats: empty corpus");
  st.correct_rate = static_cast<double>(n_correct) / st.n_steps;
  st.logical_rate = static_cast<double>(n_logical) / st.n_steps;
  st.majority_correct_class = st.correct_rate >= 0.5;
  st.majority_logical_class = st.logical_rate >= 0.5;
  st.majority_correct_acc = std::max(st.correct_rate, 1.0 - st.correct_rate);
  st.majority_logical_acc = std::max(st.logical_rate, 1.0 - st.logical_rate);
  st.mean_length = len_sum / st.n_steps;
  double sq = 0.0;
  for (const Step& s : steps) {
    const double e = s.length_tokens - st.mean_length;
    sq += e * e;
  }
  st.length_rmse_of_mean = std::sqrt(sq / st.n_steps);
  double ce = 0.0;
  for (const auto& [tokid, cnt] : ft_counts) {
    const double p = static_cast<double>(cnt) / st.n_steps;
    st.first_token_dist[tokid] = p;
    ce -= p * std::log(p);
  }
  st.first_token_perplexity = std::exp(ce);
  return st;
}

inline BaselineStats label_stats(const Corpus& corpus,
                                 std::optional<Split> only = std::nullopt) {
  std::vector<Step> steps;
  for (std::size_t i = 0; i < corpus.trajectories.size(); ++i) {
    if (only && corpus.splits[i] != *only) continue;
    for (const auto& s : corpus.trajectories[i].steps) steps.push_back(s);
  }
  return label_stats_over(steps);
}

}  // namespace ssae
