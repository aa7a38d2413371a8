#pragma once

// Central-difference verification of reverse-mode gradients. The loss
// builder is re-invoked per probe point, so it must be a pure function of
// the parameter store.

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "ssae/rng.hpp"
#include "ssae/tape.hpp"

namespace ssae {

struct GradCheckResult {
  double max_rel_err = 0.0;
  int coords_checked = 0;
};

// `build_loss` appends a graph against `store` and returns the loss node.
// Checks a random subsample of at least `min_coords` coordinates (all of
// them when the store is smaller).
inline GradCheckResult grad_check(
    ParamStore& store, const std::function<int(Tape&)>& build_loss, double h,
    std::uint64_t seed, int min_coords = 200) {
  if (h <= 0.0) throw std::runtime_error("grad_check: h must be positive");

  auto eval = [&]() {
    Tape tape(/*grad_enabled=*/false);
    int loss = build_loss(tape);
    const double v = tape.val(loss).data[0];
    if (!std::isfinite(v))
      throw std::runtime_error("grad_check: non-finite loss at evaluation point");
    return v;
  };

  // analytic pass
  store.zero_grads();
  {
    Tape tape(true);
    int loss = build_loss(tape);
    if (!std::isfinite(tape.val(loss).data[0]))
      throw std::runtime_error("grad_check: non-finite loss at evaluation point");
    tape.backward(loss);
    tape.flush_param_grads(store);
  }

  // flat coordinate index: (param id, offset)
  std::vector<std::pair<int, std::size_t>> coords;
  for (int p = 0; p < store.size(); ++p)
    for (std::size_t i = 0; i < store.values[p].numel(); ++i)
      coords.emplace_back(p, i);

  Rng rng(derive_seed(seed, "grad_check"));
  if (static_cast<int>(coords.size()) > min_coords) {
    rng.shuffle(coords);
    coords.resize(min_coords);
  }

  GradCheckResult res;
  res.coords_checked = static_cast<int>(coords.size());
  for (auto [p, i] : coords) {
    double& slot = store.values[p].data[i];
    const double keep = slot;
    slot = keep + h;
    const double fp = eval();
    slot = keep - h;
    const double fm = eval();
    slot = keep;
    const double numeric = (fp - fm) / (2.0 * h);
    const double analytic = store.grads[p].data[i];
    const double denom =
        std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    res.max_rel_err =
        std::max(res.max_rel_err, std::abs(analytic - numeric) / denom);
  }
  return res;
}

}  // namespace ssae
