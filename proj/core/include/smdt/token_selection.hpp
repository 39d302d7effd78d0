#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "smdt/autodiff.hpp"

namespace smdt {

/// How the t x h x w output volume is reduced to aligned actor/action streams.
enum class Strategy {
  Singletons,    // every token, L = t*h*w
  Tubelets,      // temporal mean for both streams, L = h*w
  CT,            // central frame / temporal mean, L = h*w
  MaxPoolClass,  // central frame / class logits max-pooled over time, L = h*w
  TwoCT,         // two central frames / past and future means, L = 2*h*w
};

inline constexpr Strategy kAllStrategies[] = {Strategy::Singletons, Strategy::Tubelets, Strategy::CT,
                                              Strategy::MaxPoolClass, Strategy::TwoCT};

/// Config keys: singletons | tubelets | ct | maxpool_class | two_ct.
std::string_view strategy_name(Strategy s);
/// Throws ConfigError on an unknown key.
Strategy parse_strategy(std::string_view name);

/// Number of prediction slots a strategy produces for a (t, h, w) volume.
std::size_t selected_count(Strategy s, std::size_t t, std::size_t h, std::size_t w);

struct GridIndex {
  std::size_t row = 0;
  std::size_t col = 0;
  friend bool operator==(const GridIndex&, const GridIndex&) = default;
};

/// Dense t x h x w x d output of the backbone.
struct TokenVolume {
  ad::Tensor<double> data;  // shape [t, h, w, d]

  TokenVolume() = default;
  /// Throws InputError unless `data` is rank 4 with finite entries.
  explicit TokenVolume(ad::Tensor<double> values);

  std::size_t t() const { return data.dim(0); }
  std::size_t h() const { return data.dim(1); }
  std::size_t w() const { return data.dim(2); }
  std::size_t d() const { return data.dim(3); }
};

struct SelectedTokens {
  ad::Tensor<double> actor_stream;   // [L, d]
  ad::Tensor<double> action_stream;  // [L, d]
  std::vector<GridIndex> grid_index;
  std::size_t count = 0;
};

SelectedTokens select_singletons(const TokenVolume& v);
SelectedTokens select_tubelets(const TokenVolume& v);
SelectedTokens select_ct(const TokenVolume& v);
/// Throws InputError for odd or zero t.
SelectedTokens select_two_ct(const TokenVolume& v);

struct MaxPoolSelection {
  SelectedTokens actor;                // action_stream mirrors actor_stream
  ad::Tensor<double> pooled_logits;    // [h, w, C]
};
/// `class_logits` is [t, h, w, C], computed on every token.
MaxPoolSelection select_maxpool_class(const TokenVolume& v, const ad::Tensor<double>& class_logits);

/// Dispatch for the four strategies that reduce the embeddings directly.
SelectedTokens select(const TokenVolume& v, Strategy s);

/// Tape form of the selection. For MaxPoolClass, `action` holds all t*h*w
/// tokens and class logits must go through pool_class_logits.
template <typename T>
struct SelectedVars {
  ad::Var<T> actor;
  ad::Var<T> action;
  std::vector<GridIndex> grid_index;
  bool pool_class_over_time = false;
  std::size_t frames = 1;
};

template <typename T>
SelectedVars<T> select_tokens(const ad::Var<T>& volume, Strategy s);

/// [t*h*w, C] logits -> [h*w, C], max over time.
template <typename T>
ad::Var<T> pool_class_logits(const ad::Var<T>& logits, std::size_t frames);

/// Logit-space box bias [h*w*replicate, 4] in (cx, cy, h, w) order: each
/// token defaults to the centre of its grid cell with a one-cell extent.
/// Every temporal copy receives the same 2D bias.
ad::Tensor<double> box_bias(std::size_t h, std::size_t w, std::size_t replicate);

/// Grid positions for h*w*replicate tokens, copies stacked, row-major.
std::vector<GridIndex> grid_positions(std::size_t h, std::size_t w, std::size_t replicate);

}  // namespace smdt
