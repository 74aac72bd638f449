#include "scenediff/condition.hpp"

#include <cmath>

namespace sde::cond {

using ad::Shape;
using ad::Tensor;
using ad::Var;

std::vector<float> embed_box(const Box2D& box, double image_w, double image_h, int freqs) {
  box.validate();
  double coords[4] = {box.left / image_w, box.top / image_h, box.right / image_w,
                      box.bottom / image_h};
  std::vector<float> out;
  out.reserve(size_t(4 * (1 + 2 * freqs)));
  const double pi = 3.14159265358979323846;
  for (double c : coords) {
    out.push_back(float(c));
    double freq = pi;
    for (int k = 0; k < freqs; ++k) {
      out.push_back(float(std::sin(freq * c)));
      out.push_back(float(std::cos(freq * c)));
      freq *= 2.0;
    }
  }
  return out;
}

std::vector<float> embed_class(int class_id, int class_count) {
  require(class_id >= 0 && class_id < class_count, ErrorCode::invalid_argument,
          "class id " + std::to_string(class_id) + " out of range [0," +
              std::to_string(class_count) + ")");
  std::vector<float> out(size_t(class_count), 0.0f);
  out[size_t(class_id)] = 1.0f;
  return out;
}

void register_condition_params(nn::ParamStore<float>& ps, const ConditionConfig& cfg, Rng& rng) {
  int c0 = cfg.patch_channels;
  nn::reg_dense(ps, "cond.feat.c1", 9 * c0, cfg.feat_conv1, rng, 0.05);
  nn::reg_dense(ps, "cond.feat.c2", 9 * cfg.feat_conv1, cfg.feat_conv2, rng, 0.05);
  nn::reg_dense(ps, "cond.feat.c3", 9 * cfg.feat_conv2, cfg.feat_conv3, rng, 0.05);
  int flat = cfg.feat_conv3 * (cfg.patch_size - 6) * (cfg.patch_size - 6);
  nn::reg_dense(ps, "cond.feat.head", flat, cfg.feat_width, rng);
  ps.init_normal("cond.null", {1, cfg.width()}, rng, 0.02);
}

namespace {

// Valid 3x3 convolution as im2col over existing tape ops: nine shifted
// slices concatenated on the channel axis, then one matmul.
template <typename S>
Var conv3x3_valid(nn::NetCtx<S>& ctx, const std::string& prefix, Var x) {
  auto& t = ctx.tape;
  const auto& sh = t.value(x).shape();
  int64_t N = sh[0], H = sh[2], W = sh[3];
  int64_t oh = H - 2, ow = W - 2;
  std::vector<Var> shifts;
  for (int dh = 0; dh < 3; ++dh)
    for (int dw = 0; dw < 3; ++dw)
      shifts.push_back(slice(t, slice(t, x, 2, dh, oh), 3, dw, ow));
  Var cols = concat(t, shifts, 1);  // [N, 9C, oh, ow]
  int64_t out_c = ctx.params.at(prefix + ".w").extent(1);
  Var flat = reshape(t, cols, {N, t.value(cols).extent(1), oh * ow});
  Var moved = transpose(t, flat, {0, 2, 1});  // [N, oh*ow, 9C]
  Var y = add(t, matmul(t, moved, ctx.p(prefix + ".w")), ctx.p(prefix + ".b"));
  return transpose(t, reshape(t, y, {N, oh, ow, out_c}), {0, 3, 1, 2});
}

}  // namespace

template <typename S>
Var embed_features(nn::NetCtx<S>& ctx, const ConditionConfig& cfg, Var patches) {
  auto& t = ctx.tape;
  const Shape sh = t.value(patches).shape();  // copy: node storage may reallocate
  require(sh.size() == 4 && sh[1] == cfg.patch_channels && sh[2] == cfg.patch_size &&
              sh[3] == cfg.patch_size,
          ErrorCode::shape_mismatch,
          "embed_features: patches " + ad::shape_str(sh) + " do not match the configured extent");
  Var h = patches;
  for (int block = 0; block < 3; ++block) {
    const char* names[3] = {"cond.feat.c1", "cond.feat.c2", "cond.feat.c3"};
    h = conv3x3_valid(ctx, names[block], h);
    h = group_norm(t, h, cfg.feat_groups);
    h = leaky_relu(t, h);
  }
  int64_t N = sh[0];
  Var flat = reshape(t, h, {N, t.value(h).numel() / N});
  return nn::dense(ctx, "cond.feat.head", flat);
}

template <typename S>
Var assemble_condition(nn::NetCtx<S>& ctx, const ConditionConfig& cfg,
                       const std::vector<ObjectObservation>& obs, double image_w, double image_h,
                       bool dropped) {
  require(!obs.empty(), ErrorCode::invalid_argument, "assemble_condition: no observations");
  auto& t = ctx.tape;
  int64_t n = int64_t(obs.size());
  if (dropped) {
    Tensor<S> ones({n, 1}, S(1));
    return matmul(t, t.constant(std::move(ones)), ctx.p("cond.null"));
  }
  Tensor<S> boxes({n, int64_t(cfg.box_dim())});
  Tensor<S> classes({n, int64_t(cfg.class_count)});
  Tensor<S> patches({n, int64_t(cfg.patch_channels), int64_t(cfg.patch_size),
                     int64_t(cfg.patch_size)});
  int64_t patch_len = int64_t(cfg.patch_channels) * cfg.patch_size * cfg.patch_size;
  for (int64_t i = 0; i < n; ++i) {
    std::vector<float> be = embed_box(obs[size_t(i)].box, image_w, image_h, cfg.box_freqs);
    for (size_t k = 0; k < be.size(); ++k) boxes[i * cfg.box_dim() + int64_t(k)] = S(be[k]);
    std::vector<float> ce = embed_class(obs[size_t(i)].class_id, cfg.class_count);
    for (size_t k = 0; k < ce.size(); ++k) classes[i * cfg.class_count + int64_t(k)] = S(ce[k]);
    const ad::Tensorf& p = obs[size_t(i)].patch;
    require(p.numel() == patch_len, ErrorCode::shape_mismatch,
            "assemble_condition: patch extent mismatch");
    for (int64_t k = 0; k < patch_len; ++k) patches[i * patch_len + k] = S(p[k]);
  }
  Var feats = embed_features(ctx, cfg, t.constant(std::move(patches)));
  return concat(t, {t.constant(std::move(boxes)), feats, t.constant(std::move(classes))}, 1);
}

template ad::Var embed_features<float>(nn::NetCtx<float>&, const ConditionConfig&, ad::Var);
template ad::Var embed_features<double>(nn::NetCtx<double>&, const ConditionConfig&, ad::Var);
template ad::Var assemble_condition<float>(nn::NetCtx<float>&, const ConditionConfig&,
                                           const std::vector<ObjectObservation>&, double, double,
                                           bool);
template ad::Var assemble_condition<double>(nn::NetCtx<double>&, const ConditionConfig&,
                                            const std::vector<ObjectObservation>&, double, double,
                                            bool);

}  // namespace sde::cond
