#include "capsdefl/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "capsdefl/graph.hpp"
#include "capsdefl/ops.hpp"

namespace capsdefl {
namespace {

double eval(const ScalarFn64& fn, const std::vector<Tensor64>& inputs) {
  return fn(inputs).item();
}

}  // namespace

GradCheckResult grad_check_at(const ScalarFn64& fn, const std::vector<Tensor64>& inputs,
                              std::uint64_t seed, const GradCheckOptions& options) {
  std::vector<Tensor64> live;
  live.reserve(inputs.size());
  for (const auto& in : inputs) live.push_back(in.detach(true));
  backward(fn(live));

  std::mt19937_64 rng(seed);
  struct Sample {
    std::size_t input, coord;
    double analytic, numeric, fwd, bwd, near;
  };
  std::vector<Sample> samples;
  GradCheckResult result;
  const double h = options.step;

  for (std::size_t i = 0; i < live.size(); ++i) {
    const std::size_t n = live[i].numel();
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), 0);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(std::min(n, options.coords_per_input));
    const bool banded = std::find(options.kink_inputs.begin(), options.kink_inputs.end(), i) !=
                        options.kink_inputs.end();

    for (std::size_t c : coords) {
      const double x0 = live[i].data()[c];
      if (banded && std::abs(x0) < options.kink_band) {
        ++result.skipped;
        continue;
      }
      std::vector<Tensor64> probe;
      for (const auto& in : live) probe.push_back(in.detach());
      auto set = [&](double v) { probe[i].mutable_data()[c] = v; };
      set(x0 + h);
      const double up = eval(fn, probe);
      set(x0 - h);
      const double down = eval(fn, probe);
      set(x0 + h / 10);
      const double up_near = eval(fn, probe);
      set(x0 - h / 10);
      const double down_near = eval(fn, probe);
      set(x0);
      const double mid = eval(fn, probe);
      const double analytic = live[i].has_grad() ? live[i].grad()[c] : 0.0;
      samples.push_back({i, c, analytic, (up - down) / (2 * h), (up - mid) / h, (mid - down) / h,
                         (up_near - down_near) * 5 / h});
    }
  }

  // Slopes are judged against the loss's own gradient scale, not against 1:
  // deep losses can have gradients of 1e-6 where a relu crossing is still
  // a visible kink. Kinks on both sides can leave the one-sided slopes in
  // agreement, so a tenth-step central difference must agree too.
  double largest = 0.0, steepest = 0.0;
  for (const auto& s : samples) {
    largest = std::max(largest, std::abs(s.analytic));
    steepest = std::max({steepest, std::abs(s.fwd), std::abs(s.bwd)});
  }
  const double slope_floor = std::max(1e-3 * steepest, 1e-12);
  const double floor = 1e-6 + 1e-3 * largest;
  for (const auto& s : samples) {
    const double slope_scale = std::max({slope_floor, std::abs(s.fwd), std::abs(s.bwd)});
    if (std::abs(s.fwd - s.bwd) > options.kink_tolerance * slope_scale ||
        std::abs(s.numeric - s.near) > options.kink_tolerance * slope_scale) {
      ++result.skipped;
      continue;
    }
    const double denom = std::max({std::abs(s.analytic), std::abs(s.numeric), floor});
    result.max_rel_error = std::max(result.max_rel_error, std::abs(s.analytic - s.numeric) / denom);
    ++result.checked;
  }
  return result;
}

GradCheckResult grad_check(const ScalarFn64& fn, const std::vector<Shape>& input_shapes,
                           std::uint64_t seed, const GradCheckOptions& options) {
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  std::vector<Tensor64> inputs;
  for (const auto& shape : input_shapes) {
    std::vector<double> data(numel(shape));
    for (auto& v : data) v = uni(rng);
    inputs.push_back(Tensor64::from(shape, std::move(data)));
  }
  return grad_check_at(fn, inputs, seed, options);
}

Tensor64 random_projection(const Tensor64& output, std::uint64_t seed) {
  std::mt19937_64 rng(seed + 17);
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  std::vector<double> w(output.numel());
  for (auto& v : w) v = uni(rng);
  return weighted_sum(output, std::span<const double>(w));
}

}  // namespace capsdefl
