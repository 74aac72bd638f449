#include "scenediff/denoiser.hpp"

namespace sde::net {

using ad::Shape;
using ad::Tensor;
using ad::Var;

void register_time_embedding(nn::ParamStore<float>& ps, const std::string& prefix, int time_dim,
                             int width, Rng& rng) {
  nn::reg_mlp(ps, prefix + ".temb", time_dim, width, width, rng);
}

template <typename S>
Var time_embedding_rows(nn::NetCtx<S>& ctx, const std::string& prefix,
                        const std::vector<int>& t_of, int time_dim) {
  Tensor<S> rows({int64_t(t_of.size()), int64_t(time_dim)});
  for (size_t r = 0; r < t_of.size(); ++r) {
    std::vector<double> f = nn::timestep_features(double(t_of[r]), time_dim);
    for (int k = 0; k < time_dim; ++k) rows[int64_t(r) * time_dim + k] = S(f[size_t(k)]);
  }
  return nn::mlp(ctx, prefix + ".temb", ctx.tape.constant(std::move(rows)));
}

// ---------------------------------------------------------------------------
// Pose UNet
// ---------------------------------------------------------------------------

namespace {

std::string blk(const std::string& stage, int i) { return "pose." + stage + std::to_string(i); }

void register_pose_block(nn::ParamStore<float>& ps, const std::string& prefix, int win, int wout,
                         int cond_width, bool use_isa, Rng& rng) {
  nn::reg_dense(ps, prefix + ".d1", win, wout, rng);
  nn::reg_dense(ps, prefix + ".d2", wout, wout, rng);
  if (win != wout) nn::reg_dense(ps, prefix + ".skip", win, wout, rng);
  nn::reg_dense(ps, prefix + ".cross.v", cond_width, wout, rng);
  nn::reg_dense(ps, prefix + ".cross.o", wout, wout, rng);
  if (use_isa) nn::reg_mha(ps, prefix + ".isa", wout, wout, wout, wout, rng);
}

}  // namespace

void PoseDenoiser::register_params(nn::ParamStore<float>& ps, Rng& rng) const {
  std::vector<int> enc = cfg_.enc_widths();
  nn::reg_dense(ps, "pose.lift", 7, enc[0], rng);
  register_time_embedding(ps, "pose", cfg_.time_dim, cfg_.width, rng);
  int prev = enc[0];
  for (int i = 0; i < cfg_.blocks; ++i) {
    register_pose_block(ps, blk("enc", i), prev, enc[size_t(i)], cfg_.cond_width, cfg_.use_isa,
                        rng);
    nn::reg_dense(ps, blk("enc", i) + ".tproj", cfg_.width, enc[size_t(i)], rng);
    prev = enc[size_t(i)];
  }
  for (int i = 0; i < cfg_.blocks; ++i) {
    int skip_w = enc[size_t(cfg_.blocks - 1 - i)];
    int wout = skip_w;
    register_pose_block(ps, blk("dec", i), prev + skip_w, wout, cfg_.cond_width, cfg_.use_isa,
                        rng);
    nn::reg_dense(ps, blk("dec", i) + ".tproj", cfg_.width, wout, rng);
    prev = wout;
  }
  nn::reg_dense(ps, "pose.out", prev, 7, rng, 0.02, /*zero_init=*/true);
}

template <typename S>
Var PoseDenoiser::forward(nn::NetCtx<S>& ctx, Var noisy, const std::vector<int>& scene_of,
                          int num_scenes, const std::vector<int>& t_of_scene, Var y) const {
  auto& t = ctx.tape;
  int64_t n = t.value(noisy).extent(0);
  require(t.value(noisy).rank() == 2 && t.value(noisy).extent(1) == 7, ErrorCode::shape_mismatch,
          "pose denoiser expects [n,7] tokens, got " + ad::shape_str(t.value(noisy).shape()));
  require(int64_t(scene_of.size()) == n, ErrorCode::shape_mismatch,
          "pose denoiser: scene index count mismatch");
  require(t.value(y).extent(0) == n && t.value(y).extent(1) == cfg_.cond_width,
          ErrorCode::shape_mismatch,
          "pose denoiser: condition rows " + ad::shape_str(t.value(y).shape()) +
              " do not match tokens (expected [" + std::to_string(n) + "," +
              std::to_string(cfg_.cond_width) + "])");
  require(int(t_of_scene.size()) == num_scenes, ErrorCode::shape_mismatch,
          "pose denoiser: timestep count mismatch");

  // Scene-wise time embedding scattered to tokens via a one-hot selector.
  Var temb_scene = time_embedding_rows(ctx, "pose", t_of_scene, cfg_.time_dim);
  Tensor<S> sel({n, int64_t(num_scenes)});
  for (int64_t i = 0; i < n; ++i) sel[i * num_scenes + scene_of[size_t(i)]] = S(1);
  Var temb_tok = matmul(t, t.constant(std::move(sel)), temb_scene);  // [n, width]

  // Additive attention mask: tokens of different scenes never interact.
  Tensor<S> mask({n, n});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j)
      mask[i * n + j] = scene_of[size_t(i)] == scene_of[size_t(j)] ? S(0) : S(-1e9);

  auto block = [&](const std::string& prefix, Var x, int win, int wout) {
    Var h = layer_norm(t, x);
    Var a = add(t, nn::dense(ctx, prefix + ".d1", h), nn::dense(ctx, prefix + ".tproj", temb_tok));
    Var res = nn::dense(ctx, prefix + ".d2", silu(t, a));
    Var base = win == wout ? x : nn::dense(ctx, prefix + ".skip", x);
    x = add(t, base, res);
    // Single condition token per object: softmax over one key is the
    // identity, so this attention reduces to value/output projections.
    x = add(t, x, nn::dense(ctx, prefix + ".cross.o", nn::dense(ctx, prefix + ".cross.v", y)));
    if (cfg_.use_isa) {
      int heads = std::max(1, wout / cfg_.head_dim());
      Var q = layer_norm(t, x);
      x = add(t, x, nn::mha(ctx, prefix + ".isa", q, q, heads, &mask));
    }
    return x;
  };

  std::vector<int> enc = cfg_.enc_widths();
  Var x = nn::dense(ctx, "pose.lift", noisy);
  std::vector<Var> skips;
  int prev = enc[0];
  for (int i = 0; i < cfg_.blocks; ++i) {
    x = block(blk("enc", i), x, prev, enc[size_t(i)]);
    prev = enc[size_t(i)];
    skips.push_back(x);
  }
  for (int i = 0; i < cfg_.blocks; ++i) {
    int skip_w = enc[size_t(cfg_.blocks - 1 - i)];
    Var cat = concat(t, {x, skips[size_t(cfg_.blocks - 1 - i)]}, 1);
    x = block(blk("dec", i), cat, prev + skip_w, skip_w);
    prev = skip_w;
  }
  return nn::dense(ctx, "pose.out", layer_norm(t, x));
}

// ---------------------------------------------------------------------------
// Set transformer (shape scaffold / latent denoisers)
// ---------------------------------------------------------------------------

void SetDenoiser::register_params(nn::ParamStore<float>& ps, Rng& rng) const {
  const std::string& p = cfg_.prefix;
  nn::reg_dense(ps, p + ".lift", cfg_.token_dim, cfg_.width, rng);
  nn::reg_dense(ps, p + ".clift", cfg_.cond_dim, cfg_.width, rng);
  register_time_embedding(ps, p, cfg_.time_dim, cfg_.width, rng);
  for (int l = 0; l < cfg_.enc_layers; ++l) {
    std::string lp = p + ".enc" + std::to_string(l);
    nn::reg_mha(ps, lp + ".attn", cfg_.width, cfg_.width, cfg_.width, cfg_.width, rng);
    nn::reg_mlp(ps, lp + ".mlp", cfg_.width, cfg_.width * cfg_.mlp_mult, cfg_.width, rng);
  }
  for (int l = 0; l < cfg_.dec_layers; ++l) {
    std::string lp = p + ".dec" + std::to_string(l);
    nn::reg_mha(ps, lp + ".self", cfg_.width, cfg_.width, cfg_.width, cfg_.width, rng);
    nn::reg_mha(ps, lp + ".cross", cfg_.width, cfg_.width, cfg_.width, cfg_.width, rng);
    nn::reg_mlp(ps, lp + ".mlp", cfg_.width, cfg_.width * cfg_.mlp_mult, cfg_.width, rng);
  }
  nn::reg_dense(ps, p + ".out", cfg_.width, cfg_.token_dim, rng, 0.02, /*zero_init=*/true);
}

template <typename S>
Var SetDenoiser::forward(nn::NetCtx<S>& ctx, Var tokens, const std::vector<int>& t_of,
                         Var cond) const {
  auto& t = ctx.tape;
  const std::string& p = cfg_.prefix;
  const auto& sh = t.value(tokens).shape();
  require(sh.size() == 3 && sh[2] == cfg_.token_dim, ErrorCode::shape_mismatch,
          p + ": tokens must be [batch,set," + std::to_string(cfg_.token_dim) + "], got " +
              ad::shape_str(sh));
  int64_t B = sh[0], g = sh[1];
  require(int64_t(t_of.size()) == B, ErrorCode::shape_mismatch, p + ": timestep count mismatch");
  require(t.value(cond).rank() == 3 && t.value(cond).extent(0) == B &&
              t.value(cond).extent(2) == cfg_.cond_dim,
          ErrorCode::shape_mismatch,
          p + ": condition tokens " + ad::shape_str(t.value(cond).shape()) + " do not conform");

  Var x = nn::dense(ctx, p + ".lift", tokens);
  Var temb = time_embedding_rows(ctx, p, t_of, cfg_.time_dim);  // [B, width]
  Var temb3 = reshape(t, temb, {B, 1, int64_t(cfg_.width)});
  Var ones = t.constant(Tensor<S>({B, g, 1}, S(1)));
  x = add(t, x, matmul(t, ones, temb3));

  Var c = nn::dense(ctx, p + ".clift", cond);
  for (int l = 0; l < cfg_.enc_layers; ++l) {
    std::string lp = p + ".enc" + std::to_string(l);
    Var q = layer_norm(t, c);
    c = add(t, c, nn::mha_batched(ctx, lp + ".attn", q, q, cfg_.heads));
    c = add(t, c, nn::mlp(ctx, lp + ".mlp", layer_norm(t, c)));
  }
  for (int l = 0; l < cfg_.dec_layers; ++l) {
    std::string lp = p + ".dec" + std::to_string(l);
    Var q = layer_norm(t, x);
    x = add(t, x, nn::mha_batched(ctx, lp + ".self", q, q, cfg_.heads));
    x = add(t, x, nn::mha_batched(ctx, lp + ".cross", layer_norm(t, x), layer_norm(t, c),
                                  cfg_.heads));
    x = add(t, x, nn::mlp(ctx, lp + ".mlp", layer_norm(t, x)));
  }
  return nn::dense(ctx, p + ".out", layer_norm(t, x));
}

// ---------------------------------------------------------------------------
// Condition token split for the set denoisers
// ---------------------------------------------------------------------------

void register_condition_token_params(nn::ParamStore<float>& ps, const std::string& prefix,
                                     int box_dim, int feat_dim, int class_dim, int width,
                                     Rng& rng) {
  nn::reg_dense(ps, prefix + ".tok.box", box_dim, width, rng);
  nn::reg_dense(ps, prefix + ".tok.feat", feat_dim, width, rng);
  nn::reg_dense(ps, prefix + ".tok.cls", class_dim, width, rng);
}

template <typename S>
Var condition_tokens(nn::NetCtx<S>& ctx, const std::string& prefix, Var y, int box_dim,
                     int feat_dim, int class_dim) {
  auto& t = ctx.tape;
  int64_t n = t.value(y).extent(0);
  int64_t w = ctx.params.at(prefix + ".tok.box.w").extent(1);
  Var box = nn::dense(ctx, prefix + ".tok.box", slice(t, y, 1, 0, box_dim));
  Var feat = nn::dense(ctx, prefix + ".tok.feat", slice(t, y, 1, box_dim, feat_dim));
  Var cls = nn::dense(ctx, prefix + ".tok.cls", slice(t, y, 1, box_dim + feat_dim, class_dim));
  return concat(t,
                {reshape(t, box, {n, 1, w}), reshape(t, feat, {n, 1, w}),
                 reshape(t, cls, {n, 1, w})},
                1);
}

// Explicit instantiations.
template Var time_embedding_rows<float>(nn::NetCtx<float>&, const std::string&,
                                        const std::vector<int>&, int);
template Var time_embedding_rows<double>(nn::NetCtx<double>&, const std::string&,
                                         const std::vector<int>&, int);
template Var PoseDenoiser::forward<float>(nn::NetCtx<float>&, Var, const std::vector<int>&, int,
                                          const std::vector<int>&, Var) const;
template Var PoseDenoiser::forward<double>(nn::NetCtx<double>&, Var, const std::vector<int>&, int,
                                           const std::vector<int>&, Var) const;
template Var SetDenoiser::forward<float>(nn::NetCtx<float>&, Var, const std::vector<int>&,
                                         Var) const;
template Var SetDenoiser::forward<double>(nn::NetCtx<double>&, Var, const std::vector<int>&,
                                          Var) const;
template Var condition_tokens<float>(nn::NetCtx<float>&, const std::string&, Var, int, int, int);
template Var condition_tokens<double>(nn::NetCtx<double>&, const std::string&, Var, int, int, int);

}  // namespace sde::net
