#pragma once

// Differentiable primitives paired with random input generators, shared by the
// unit tests and the acceptance runner.

#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "smdt/autodiff.hpp"

namespace primitive_cases {

using smdt::ad::Shape;
using smdt::ad::Tensor;
using smdt::ad::Var;
using Vars = std::span<const Var<double>>;
namespace ad = smdt::ad;

inline Tensor<double> random_tensor(std::mt19937_64& rng, Shape s, double lo = -1.5, double hi = 1.5) {
  Tensor<double> t(std::move(s));
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& v : t.data) v = u(rng);
  return t;
}

// Projects a tensor onto a random fixed direction so every output entry
// receives a distinct upstream gradient.
inline Var<double> project(const Var<double>& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return ad::sum(ad::mul(y, y.tape()->constant(random_tensor(rng, y.shape(), -1.0, 1.0))));
}

struct Case {
  std::string name;
  std::function<std::vector<Tensor<double>>(std::mt19937_64&)> inputs;
  std::function<Var<double>(Vars)> fn;
};

inline std::vector<Case> all() {
  auto two = [](Shape a, Shape b) {
    return [a, b](std::mt19937_64& rng) { return std::vector{random_tensor(rng, a), random_tensor(rng, b)}; };
  };
  auto one = [](Shape a, double lo = -1.5, double hi = 1.5) {
    return [a, lo, hi](std::mt19937_64& rng) { return std::vector{random_tensor(rng, a, lo, hi)}; };
  };
  std::vector<Case> c;
  c.push_back({"add", two({3, 4}, {3, 4}), [](Vars x) { return ad::add(x[0], x[1]); }});
  c.push_back({"add_broadcast", two({2, 3, 4}, {4}), [](Vars x) { return ad::add(x[0], x[1]); }});
  c.push_back({"sub", two({3, 4}, {4}), [](Vars x) { return ad::sub(x[0], x[1]); }});
  c.push_back({"mul", two({3, 4}, {3, 4}), [](Vars x) { return ad::mul(x[0], x[1]); }});
  c.push_back({"mul_broadcast", two({5, 2}, {2}), [](Vars x) { return ad::mul(x[0], x[1]); }});
  c.push_back({"div", [](std::mt19937_64& rng) {
                 return std::vector{random_tensor(rng, {3, 3}), random_tensor(rng, {3, 3}, 0.5, 2.0)};
               },
               [](Vars x) { return ad::div(x[0], x[1]); }});
  c.push_back({"scale", one({4, 2}), [](Vars x) { return ad::scale(x[0], 1.7); }});
  c.push_back({"add_scalar", one({4, 2}), [](Vars x) { return ad::add_scalar(x[0], -0.3); }});
  c.push_back({"minimum", two({4, 3}, {4, 3}), [](Vars x) { return ad::minimum(x[0], x[1]); }});
  c.push_back({"maximum", two({4, 3}, {4, 3}), [](Vars x) { return ad::maximum(x[0], x[1]); }});
  c.push_back({"matmul", two({3, 4}, {4, 5}), [](Vars x) { return ad::matmul(x[0], x[1]); }});
  c.push_back({"matmul_leading", two({2, 3, 4}, {4, 2}), [](Vars x) { return ad::matmul(x[0], x[1]); }});
  c.push_back({"matmul_batched", two({2, 3, 4}, {2, 4, 2}), [](Vars x) { return ad::matmul(x[0], x[1]); }});
  c.push_back({"reshape", one({2, 6}), [](Vars x) { return ad::reshape(x[0], {3, 4}); }});
  c.push_back({"permute", one({2, 3, 4}), [](Vars x) {
                 const std::size_t axes[] = {2, 0, 1};
                 return ad::permute(x[0], axes);
               }});
  c.push_back({"transpose", one({2, 3, 4}), [](Vars x) { return ad::transpose(x[0]); }});
  c.push_back({"concat", two({2, 3}, {2, 2}), [](Vars x) {
                 const Var<double> parts[] = {x[0], x[1]};
                 return ad::concat<double>(parts, 1);
               }});
  c.push_back({"slice", one({5, 3}), [](Vars x) { return ad::slice(x[0], 0, 1, 4); }});
  c.push_back({"index_select", one({5, 3}), [](Vars x) {
                 const std::size_t rows[] = {4, 0, 2};
                 return ad::index_select(x[0], rows);
               }});
  c.push_back({"sum_all", one({3, 4}), [](Vars x) { return ad::sum(x[0]); }});
  c.push_back({"sum_axis", one({3, 4, 2}), [](Vars x) { return ad::sum(x[0], 1); }});
  c.push_back({"mean_axis", one({3, 4, 2}), [](Vars x) { return ad::mean(x[0], 0); }});
  c.push_back({"max_axis", one({4, 3, 2}), [](Vars x) { return ad::max(x[0], 0); }});
  c.push_back({"softmax", one({3, 5}), [](Vars x) { return ad::softmax(x[0]); }});
  c.push_back({"sigmoid", one({3, 5}), [](Vars x) { return ad::sigmoid(x[0]); }});
  c.push_back({"log", one({3, 5}, 0.2, 3.0), [](Vars x) { return ad::log(x[0]); }});
  c.push_back({"exp", one({3, 5}), [](Vars x) { return ad::exp(x[0]); }});
  c.push_back({"abs", one({3, 5}), [](Vars x) { return ad::abs(x[0]); }});
  c.push_back({"clamp", one({3, 5}), [](Vars x) { return ad::clamp(x[0], -0.5, 0.5); }});
  c.push_back({"gelu", one({3, 5}), [](Vars x) { return ad::gelu(x[0]); }});
  c.push_back({"layer_norm",
               [](std::mt19937_64& rng) {
                 return std::vector{random_tensor(rng, {3, 6}), random_tensor(rng, {6}), random_tensor(rng, {6})};
               },
               [](Vars x) { return ad::layer_norm(x[0], x[1], x[2]); }});
  c.push_back({"attention",
               [](std::mt19937_64& rng) {
                 return std::vector{random_tensor(rng, {2, 3, 4}), random_tensor(rng, {2, 5, 4}),
                                    random_tensor(rng, {2, 5, 4})};
               },
               [](Vars x) { return ad::scaled_dot_product_attention(x[0], x[1], x[2]); }});
  c.push_back({"position_embedding_add", two({2, 3, 3, 4}, {2, 3, 3, 4}),
               [](Vars x) { return ad::add(x[0], x[1]); }});
  return c;
}

}  // namespace primitive_cases
