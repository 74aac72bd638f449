#pragma once
#include <vector>

#include "scenediff/nn.hpp"
#include "scenediff/rng.hpp"

namespace sde::cond {

struct Box2D {
  double left = 0, top = 0, right = 0, bottom = 0;

  void validate() const {
    require(right > left && bottom > top, ErrorCode::invalid_argument,
            "box2d: right/bottom must exceed left/top");
  }
  double cx() const { return 0.5 * (left + right); }
  double cy() const { return 0.5 * (top + bottom); }
};

struct ObjectObservation {
  Box2D box;
  ad::Tensorf patch;  // [channels, patch, patch] from the renderer stub
  int class_id = 0;
};

struct ConditionConfig {
  int box_freqs = 10;
  int feat_width = 64;
  int class_count = 8;
  int patch_size = 8;
  int patch_channels = 2;
  int feat_conv1 = 16, feat_conv2 = 32, feat_conv3 = 32;
  int feat_groups = 4;

  int box_dim() const { return 4 * (1 + 2 * box_freqs); }
  int width() const { return box_dim() + feat_width + class_count; }
};

// Per coordinate (normalized to [0,1]): raw value then sin/cos at the
// geometric frequencies 2^0 pi .. 2^(freqs-1) pi.
std::vector<float> embed_box(const Box2D& box, double image_w, double image_h, int freqs = 10);

std::vector<float> embed_class(int class_id, int class_count);

void register_condition_params(nn::ParamStore<float>& ps, const ConditionConfig& cfg, Rng& rng);

// Learned conv stack over the observation patches: three valid 3x3 blocks
// (conv, group norm, leaky relu), then a dense head to feat_width.
template <typename S>
ad::Var embed_features(nn::NetCtx<S>& ctx, const ConditionConfig& cfg, ad::Var patches);

// Rows y_i = concat(box, feat, class) per object, observation order
// preserved. When dropped, every slot is the learned null token instead.
template <typename S>
ad::Var assemble_condition(nn::NetCtx<S>& ctx, const ConditionConfig& cfg,
                           const std::vector<ObjectObservation>& obs, double image_w,
                           double image_h, bool dropped);

}  // namespace sde::cond
