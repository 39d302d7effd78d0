#include "smdt/token_selection.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "smdt/errors.hpp"

namespace smdt {

using ad::Shape;
using ad::Tensor;
using ad::Var;

std::string_view strategy_name(Strategy s) {
  switch (s) {
    case Strategy::Singletons: return "singletons";
    case Strategy::Tubelets: return "tubelets";
    case Strategy::CT: return "ct";
    case Strategy::MaxPoolClass: return "maxpool_class";
    case Strategy::TwoCT: return "two_ct";
  }
  return "?";
}

Strategy parse_strategy(std::string_view name) {
  for (Strategy s : kAllStrategies) {
    if (strategy_name(s) == name) return s;
  }
  throw ConfigError("unknown token selection strategy '" + std::string(name) +
                    "' (expected singletons, tubelets, ct, maxpool_class or two_ct)");
}

std::size_t selected_count(Strategy s, std::size_t t, std::size_t h, std::size_t w) {
  switch (s) {
    case Strategy::Singletons: return t * h * w;
    case Strategy::Tubelets:
    case Strategy::CT:
    case Strategy::MaxPoolClass: return h * w;
    case Strategy::TwoCT: return 2 * h * w;
  }
  return 0;
}

TokenVolume::TokenVolume(Tensor<double> values) : data(std::move(values)) {
  if (data.rank() != 4) throw InputError("token volume must be rank 4 [t,h,w,d]");
  for (double v : data.data) {
    if (!std::isfinite(v)) throw InputError("token volume has a non-finite entry");
  }
}

std::vector<GridIndex> grid_positions(std::size_t h, std::size_t w, std::size_t replicate) {
  std::vector<GridIndex> out;
  out.reserve(h * w * replicate);
  for (std::size_t k = 0; k < replicate; ++k) {
    for (std::size_t r = 0; r < h; ++r) {
      for (std::size_t c = 0; c < w; ++c) out.push_back({r, c});
    }
  }
  return out;
}

namespace {

double logit(double p) {
  // One-cell extents of a 1-wide grid would map to +inf.
  p = std::clamp(p, 1e-4, 1.0 - 1e-4);
  return std::log(p / (1.0 - p));
}

template <typename T>
Var<T> frame(const Var<T>& v, std::size_t index) {
  const Shape& s = v.shape();
  return ad::reshape(ad::slice(v, 0, index, index + 1), Shape{s[1] * s[2], s[3]});
}

template <typename T>
Var<T> temporal_mean(const Var<T>& v, std::size_t begin, std::size_t end) {
  const Shape& s = v.shape();
  return ad::reshape(ad::mean(ad::slice(v, 0, begin, end), 0), Shape{s[1] * s[2], s[3]});
}

}  // namespace

template <typename T>
SelectedVars<T> select_tokens(const Var<T>& volume, Strategy s) {
  const Shape& shape = volume.shape();
  if (shape.size() != 4) throw InputError("select_tokens: expected [t,h,w,d], got " + ad::to_string(shape));
  const std::size_t t = shape[0], h = shape[1], w = shape[2], d = shape[3];
  if (t == 0) throw InputError("select_tokens: empty temporal axis");
  SelectedVars<T> out;
  switch (s) {
    case Strategy::Singletons: {
      out.actor = ad::reshape(volume, Shape{t * h * w, d});
      out.action = out.actor;
      out.grid_index = grid_positions(h, w, t);
      break;
    }
    case Strategy::Tubelets: {
      out.actor = temporal_mean(volume, 0, t);
      out.action = out.actor;
      out.grid_index = grid_positions(h, w, 1);
      break;
    }
    case Strategy::CT: {
      out.actor = frame(volume, t / 2);
      out.action = temporal_mean(volume, 0, t);
      out.grid_index = grid_positions(h, w, 1);
      break;
    }
    case Strategy::MaxPoolClass: {
      out.actor = frame(volume, t / 2);
      out.action = ad::reshape(volume, Shape{t * h * w, d});
      out.grid_index = grid_positions(h, w, 1);
      out.pool_class_over_time = true;
      out.frames = t;
      break;
    }
    case Strategy::TwoCT: {
      if (t % 2 != 0) throw InputError("two_ct selection needs an even number of frames, got " + std::to_string(t));
      const std::array<Var<T>, 2> central{frame(volume, t / 2 - 1), frame(volume, t / 2)};
      // Past pool covers frames [0, t/2), future pool [t/2, t).
      const std::array<Var<T>, 2> pools{temporal_mean(volume, 0, t / 2), temporal_mean(volume, t / 2, t)};
      out.actor = ad::concat(std::span<const Var<T>>(central), 0);
      out.action = ad::concat(std::span<const Var<T>>(pools), 0);
      out.grid_index = grid_positions(h, w, 2);
      break;
    }
  }
  return out;
}

template <typename T>
Var<T> pool_class_logits(const Var<T>& logits, std::size_t frames) {
  const Shape& s = logits.shape();
  if (s.size() != 2 || frames == 0 || s[0] % frames != 0) {
    throw InputError("pool_class_logits: logits " + ad::to_string(s) + " not divisible into " +
                     std::to_string(frames) + " frames");
  }
  return ad::max(ad::reshape(logits, Shape{frames, s[0] / frames, s[1]}), 0);
}

template SelectedVars<float> select_tokens(const Var<float>&, Strategy);
template SelectedVars<double> select_tokens(const Var<double>&, Strategy);
template Var<float> pool_class_logits(const Var<float>&, std::size_t);
template Var<double> pool_class_logits(const Var<double>&, std::size_t);

namespace {

SelectedTokens run_selection(const TokenVolume& v, Strategy s) {
  ad::Tape<double> tape;
  const auto sel = select_tokens(tape.constant(v.data), s);
  SelectedTokens out;
  out.actor_stream = sel.actor.value();
  out.action_stream = sel.action.value();
  out.grid_index = sel.grid_index;
  out.count = out.actor_stream.dim(0);
  return out;
}

}  // namespace

SelectedTokens select_singletons(const TokenVolume& v) { return run_selection(v, Strategy::Singletons); }
SelectedTokens select_tubelets(const TokenVolume& v) { return run_selection(v, Strategy::Tubelets); }
SelectedTokens select_ct(const TokenVolume& v) { return run_selection(v, Strategy::CT); }
SelectedTokens select_two_ct(const TokenVolume& v) { return run_selection(v, Strategy::TwoCT); }

SelectedTokens select(const TokenVolume& v, Strategy s) {
  if (s == Strategy::MaxPoolClass) {
    throw InputError("maxpool_class selection needs class logits; use select_maxpool_class");
  }
  return run_selection(v, s);
}

MaxPoolSelection select_maxpool_class(const TokenVolume& v, const Tensor<double>& class_logits) {
  const Shape& ls = class_logits.shape;
  if (ls.size() != 4 || ls[0] != v.t() || ls[1] != v.h() || ls[2] != v.w()) {
    throw InputError("select_maxpool_class: logits shape " + ad::to_string(ls) +
                     " does not match volume [t,h,w,C]");
  }
  ad::Tape<double> tape;
  const auto sel = select_tokens(tape.constant(v.data), Strategy::MaxPoolClass);
  const std::size_t hw = v.h() * v.w();
  Var<double> flat = ad::reshape(tape.constant(class_logits), Shape{v.t() * hw, ls[3]});
  MaxPoolSelection out;
  out.actor.actor_stream = sel.actor.value();
  out.actor.action_stream = sel.actor.value();
  out.actor.grid_index = sel.grid_index;
  out.actor.count = hw;
  out.pooled_logits = pool_class_logits(flat, v.t()).value();
  out.pooled_logits.shape = Shape{v.h(), v.w(), ls[3]};
  return out;
}

Tensor<double> box_bias(std::size_t h, std::size_t w, std::size_t replicate) {
  if (h == 0 || w == 0 || replicate == 0) throw InputError("box_bias: grid dims must be >= 1");
  Tensor<double> out({h * w * replicate, 4});
  const double size_h = logit(1.0 / static_cast<double>(h));
  const double size_w = logit(1.0 / static_cast<double>(w));
  std::size_t i = 0;
  for (const GridIndex& g : grid_positions(h, w, replicate)) {
    out[i++] = logit((static_cast<double>(g.col) + 0.5) / static_cast<double>(w));
    out[i++] = logit((static_cast<double>(g.row) + 0.5) / static_cast<double>(h));
    out[i++] = size_h;
    out[i++] = size_w;
  }
  return out;
}

}  // namespace smdt
