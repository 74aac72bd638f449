#pragma once
#include <string>
#include <vector>

#include "scenediff/nn.hpp"

namespace sde::net {

// 1-D UNet over per-object pose tokens. Each block: time-conditioned
// residual layer, cross-attention to the object's condition row, intra-scene
// attention across the objects of the same scene. Feature widths halve every
// third block down to width/4; decoder blocks mirror the encoder and consume
// its outputs through concatenation skips.
struct PoseDenoiserConfig {
  int width = 512;
  int blocks = 8;
  int heads = 8;
  int time_dim = 128;
  int cond_width = 156;
  bool use_isa = true;

  std::vector<int> enc_widths() const {
    std::vector<int> w;
    for (int i = 0; i < blocks; ++i) w.push_back(std::max(width >> (i / 3), width / 4));
    return w;
  }
  int head_dim() const { return width / heads; }
};

class PoseDenoiser {
 public:
  explicit PoseDenoiser(PoseDenoiserConfig cfg) : cfg_(cfg) {}
  const PoseDenoiserConfig& config() const { return cfg_; }

  void register_params(nn::ParamStore<float>& ps, Rng& rng) const;

  // noisy: [n_tokens, 7] normalized-pose tokens across a batch of scenes.
  // scene_of[i] gives the scene of token i; t_of_scene the timestep of each
  // scene; y the [n_tokens, cond_width] condition rows. Tokens never attend
  // across scenes.
  template <typename S>
  ad::Var forward(nn::NetCtx<S>& ctx, ad::Var noisy, const std::vector<int>& scene_of,
                  int num_scenes, const std::vector<int>& t_of_scene, ad::Var y) const;

 private:
  PoseDenoiserConfig cfg_;
};

// Permutation-equivariant transformer over a set of tokens per object,
// cross-attending to per-object condition tokens. Encoder layers refine the
// condition tokens; decoder layers interleave self/cross attention.
struct SetDenoiserConfig {
  std::string prefix;
  int token_dim = 16;
  int cond_dim = 16;  // width of each raw condition token
  int cond_tokens = 1;
  int width = 128;
  int enc_layers = 2;
  int dec_layers = 6;
  int heads = 4;
  int time_dim = 128;
  int mlp_mult = 2;
};

class SetDenoiser {
 public:
  explicit SetDenoiser(SetDenoiserConfig cfg) : cfg_(std::move(cfg)) {}
  const SetDenoiserConfig& config() const { return cfg_; }

  void register_params(nn::ParamStore<float>& ps, Rng& rng) const;

  // tokens: [batch, set_size, token_dim]; cond: [batch, cond_tokens, cond_dim];
  // t_of: timestep per batch row. Output matches the token shape.
  template <typename S>
  ad::Var forward(nn::NetCtx<S>& ctx, ad::Var tokens, const std::vector<int>& t_of,
                  ad::Var cond) const;

 private:
  SetDenoiserConfig cfg_;
};

// Splits condition rows y [n, 84+feat+classes] into three tokens per object
// (box, feature, class) lifted to a common width.
template <typename S>
ad::Var condition_tokens(nn::NetCtx<S>& ctx, const std::string& prefix, ad::Var y, int box_dim,
                         int feat_dim, int class_dim);

void register_condition_token_params(nn::ParamStore<float>& ps, const std::string& prefix,
                                     int box_dim, int feat_dim, int class_dim, int width,
                                     Rng& rng);

// Shared helper: sinusoidal features -> 2-layer MLP -> [rows, width].
template <typename S>
ad::Var time_embedding_rows(nn::NetCtx<S>& ctx, const std::string& prefix,
                            const std::vector<int>& t_of, int time_dim);

void register_time_embedding(nn::ParamStore<float>& ps, const std::string& prefix, int time_dim,
                             int width, Rng& rng);

}  // namespace sde::net
