#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "cellsearch/autodiff.hpp"
#include "cellsearch/ops.hpp"

namespace testing_support {

using namespace cellsearch;

inline Tensor<double> random_tensor(const Shape& shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Tensor<double> t(shape);
  for (double& v : t.data()) v = n(rng);
  return t;
}

// <x, w> as a scalar node; gives every output element a distinct weight.
template <typename T>
Var<T> dot_with(const Var<T>& x, const Tensor<T>& w) {
  T acc = 0;
  for (std::size_t i = 0; i < w.data().size(); ++i) acc += x.value()[i] * w[i];
  Tensor<T> out(Shape{1}, std::vector<T>{acc});
  return x.tape().record("dot", std::move(out), {x.id()}, [id = x.id(), w](Tape<T>& tape, const Tensor<T>& g) {
    if (Tensor<T>* sink = tape.grad_sink(id))
      for (std::size_t i = 0; i < w.data().size(); ++i) (*sink)[i] += g[0] * w[i];
  });
}

using ScalarFn = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

struct GradCheck {
  double rel_error = 0.0;  // ||analytic - numeric|| / max(||analytic||, ||numeric||)
  double max_abs_grad = 0.0;
};

// Central differences over every input entry.
inline GradCheck check_gradients(const ScalarFn& f, std::vector<Tensor<double>> inputs, double h = 1e-6) {
  std::vector<Tensor<double>> analytic;
  {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const auto& t : inputs) vars.push_back(tape.variable(t));
    tape.backward(f(tape, vars));
    for (const auto& v : vars) analytic.push_back(v.grad());
  }
  auto eval = [&]() {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const auto& t : inputs) vars.push_back(tape.variable(t));
    return f(tape, vars).value()[0];
  };
  double diff = 0.0, na = 0.0, nn = 0.0, max_abs = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i = 0; i < inputs[k].data().size(); ++i) {
      const double orig = inputs[k][i];
      inputs[k][i] = orig + h;
      const double up = eval();
      inputs[k][i] = orig - h;
      const double down = eval();
      inputs[k][i] = orig;
      const double numeric = (up - down) / (2 * h);
      const double a = analytic[k].empty() ? 0.0 : analytic[k][i];
      diff += (a - numeric) * (a - numeric);
      na += a * a;
      nn += numeric * numeric;
      max_abs = std::max(max_abs, std::abs(a));
    }
  }
  const double denom = std::max({std::sqrt(na), std::sqrt(nn), 1e-300});
  return {std::sqrt(diff) / denom, max_abs};
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("cellsearch_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testing_support

namespace testing_support {

// Central differences over the entries of the parameters in `store`; all of
// them, or `sample` entries drawn without replacement.
inline GradCheck check_param_gradients(ParamStore<double>& store,
                                       const std::function<Var<double>(Tape<double>&)>& f, double h = 1e-6,
                                       std::size_t sample = 0, std::uint64_t seed = 0) {
  store.zero_grad();
  {
    Tape<double> tape;
    tape.backward(f(tape));
  }
  std::vector<std::pair<Parameter<double>*, std::size_t>> entries;
  for (auto& [name, p] : store.params())
    for (std::size_t i = 0; i < p.value.data().size(); ++i) entries.emplace_back(&p, i);
  if (sample > 0 && sample < entries.size()) {
    std::mt19937_64 rng(seed);
    std::shuffle(entries.begin(), entries.end(), rng);
    entries.resize(sample);
  }
  double diff = 0.0, na = 0.0, nn = 0.0, max_abs = 0.0;
  for (auto [pp, i] : entries) {
    Parameter<double>& p = *pp;
    {
      const double orig = p.value[i];
      p.value[i] = orig + h;
      Tape<double> t1;
      const double up = f(t1).value()[0];
      p.value[i] = orig - h;
      Tape<double> t2;
      const double down = f(t2).value()[0];
      p.value[i] = orig;
      const double numeric = (up - down) / (2 * h);
      const double a = p.has_grad() ? p.grad[i] : 0.0;
      diff += (a - numeric) * (a - numeric);
      na += a * a;
      nn += numeric * numeric;
      max_abs = std::max(max_abs, std::abs(a));
    }
  }
  const double denom = std::max({std::sqrt(na), std::sqrt(nn), 1e-300});
  return {std::sqrt(diff) / denom, max_abs};
}

}  // namespace testing_support
