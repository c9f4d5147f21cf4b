#include "ganshare/gan/gan.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace ganshare::gan {

using namespace diffmath;

std::string variant_name(GanVariant v) { return v == GanVariant::dcgan ? "dcgan" : "wgan_gp"; }

GanVariant variant_from_name(const std::string& s) {
  if (s == "dcgan") return GanVariant::dcgan;
  if (s == "wgan_gp" || s == "wgan-gp") return GanVariant::wgan_gp;
  throw ConfigError("unknown GAN variant: " + s);
}

GanConfig GanConfig::dcgan_defaults(int image_side) {
  GanConfig c;
  c.variant = GanVariant::dcgan;
  c.image_side = image_side;
  c.opt_g = OptimizerConfig::adam(2e-4, 0.5, 0.999);
  c.opt_d = OptimizerConfig::adam(2e-4, 0.5, 0.999);
  return c;
}

GanConfig GanConfig::wgan_gp_defaults(int image_side) {
  GanConfig c;
  c.variant = GanVariant::wgan_gp;
  c.image_side = image_side;
  c.epochs = 2700;
  c.opt_g = OptimizerConfig::adam(1e-4, 0.0, 0.9);
  c.opt_d = OptimizerConfig::adam(1e-4, 0.0, 0.9);
  return c;
}

void GanConfig::validate() const {
  if (image_side < 8 || (image_side & (image_side - 1)) != 0)
    throw ConfigError("gan image_side must be a power of two >= 8, got " +
                      std::to_string(image_side));
  if (batch_size < 1) throw ConfigError("gan batch_size must be >= 1");
  if (epochs < 1) throw ConfigError("gan epochs must be >= 1");
  if (variant == GanVariant::dcgan && checkpoint_start > epochs)
    throw ConfigError("dcgan checkpoint_start " + std::to_string(checkpoint_start) +
                      " exceeds epochs " + std::to_string(epochs) +
                      "; no checkpoint would be stored");
  if (variant == GanVariant::wgan_gp && critic_steps < 1)
    throw ConfigError("wgan_gp critic_steps must be >= 1");
}

json GanConfig::to_json() const {
  return json{{"variant", variant_name(variant)},
              {"model_id", model_id},
              {"image_side", image_side},
              {"batch_size", batch_size},
              {"epochs", epochs},
              {"smooth_lo", smooth_lo},
              {"smooth_hi", smooth_hi},
              {"critic_steps", critic_steps},
              {"lambda_gp", lambda_gp},
              {"checkpoint_every", checkpoint_every},
              {"checkpoint_start", checkpoint_start},
              {"flip_p_horizontal", flip_p_horizontal},
              {"flip_p_vertical", flip_p_vertical},
              {"base_channels", base_channels},
              {"lr_g", opt_g.learning_rate},
              {"lr_d", opt_d.learning_rate},
              {"beta1", opt_g.beta1},
              {"beta2", opt_g.beta2}};
}

GanConfig GanConfig::from_json(const json& j) {
  const GanVariant v = variant_from_name(j.at("variant").get<std::string>());
  GanConfig c = v == GanVariant::dcgan ? dcgan_defaults(j.at("image_side"))
                                       : wgan_gp_defaults(j.at("image_side"));
  c.model_id = j.value("model_id", std::string());
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.smooth_lo = j.value("smooth_lo", c.smooth_lo);
  c.smooth_hi = j.value("smooth_hi", c.smooth_hi);
  c.critic_steps = j.value("critic_steps", c.critic_steps);
  c.lambda_gp = j.value("lambda_gp", c.lambda_gp);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.checkpoint_start = j.value("checkpoint_start", c.checkpoint_start);
  c.flip_p_horizontal = j.value("flip_p_horizontal", c.flip_p_horizontal);
  c.flip_p_vertical = j.value("flip_p_vertical", c.flip_p_vertical);
  c.base_channels = j.value("base_channels", c.base_channels);
  if (j.contains("lr_g")) c.opt_g.learning_rate = j.at("lr_g");
  if (j.contains("lr_d")) c.opt_d.learning_rate = j.at("lr_d");
  if (j.contains("beta1")) c.opt_g.beta1 = c.opt_d.beta1 = j.at("beta1").get<double>();
  if (j.contains("beta2")) c.opt_g.beta2 = c.opt_d.beta2 = j.at("beta2").get<double>();
  return c;
}

namespace {
int upsample_stages(int image_side) {
  int stages = 0, s = 4;
  while (s < image_side) {
    s *= 2;
    stages++;
  }
  return std::max(1, stages);
}
}  // namespace

std::vector<LayerSpec> generator_arch(const GanConfig& cfg) {
  const int stages = upsample_stages(cfg.image_side);
  const int top = cfg.base_channels << (stages - 1);
  std::vector<LayerSpec> arch;
  arch.push_back(LayerSpec::lin(kLatentDim, top * 4 * 4));
  arch.push_back(LayerSpec::unflat(top, 4));
  arch.push_back(LayerSpec::bn2d(top));
  arch.push_back(LayerSpec::act(LayerKind::relu));
  int ch = top;
  for (int s = 0; s < stages - 1; ++s) {
    arch.push_back(LayerSpec::tconv(ch, ch / 2, 4, 2, 1));
    arch.push_back(LayerSpec::bn2d(ch / 2));
    arch.push_back(LayerSpec::act(LayerKind::relu));
    ch /= 2;
  }
  arch.push_back(LayerSpec::tconv(ch, 1, 4, 2, 1));
  arch.push_back(LayerSpec::act(LayerKind::tanh));
  return arch;
}

std::vector<LayerSpec> discriminator_arch(const GanConfig& cfg) {
  const int stages = upsample_stages(cfg.image_side);
  const bool critic = cfg.variant == GanVariant::wgan_gp;
  std::vector<LayerSpec> arch;
  // kernel-6 stride-2 convolutions halve the spatial extent each stage
  arch.push_back(LayerSpec::conv(1, cfg.base_channels, 6, 2, 2));
  arch.push_back(LayerSpec::leaky(0.2));
  int ch = cfg.base_channels;
  for (int s = 1; s < stages; ++s) {
    arch.push_back(LayerSpec::conv(ch, ch * 2, 6, 2, 2));
    if (!critic) arch.push_back(LayerSpec::bn2d(ch * 2));
    arch.push_back(LayerSpec::leaky(0.2));
    ch *= 2;
  }
  arch.push_back(LayerSpec::act(LayerKind::flatten));
  arch.push_back(LayerSpec::lin(ch * 4 * 4, 1));
  if (!critic) arch.push_back(LayerSpec::act(LayerKind::sigmoid));
  return arch;
}

template <class S>
std::pair<Var<S>, Var<S>> dcgan_losses(const Var<S>& d_real, const Var<S>& d_fake_detached,
                                       const Var<S>& d_fake_live,
                                       const Tensor<S>& smooth_targets) {
  const S eps = static_cast<S>(1e-7);
  for (const Var<S>* v : {&d_real, &d_fake_detached, &d_fake_live}) {
    for (S p : (*v)->value.data)
      if (!std::isfinite(static_cast<double>(p)) || p < S(0) || p > S(1))
        throw NumericError("dcgan_losses: discriminator output " + std::to_string(p) +
                           " is not a probability");
  }
  auto pr = clamp_const(d_real, eps, S(1) - eps);
  auto pf = clamp_const(d_fake_detached, eps, S(1) - eps);
  auto pl = clamp_const(d_fake_live, eps, S(1) - eps);

  // -mean[t*log D(x) + log(1 - D(G(z)))], fake targets exactly 0 (one-sided)
  auto real_term = mask_mul(log_op(pr), smooth_targets);
  auto fake_term = log_op(scalar_add(neg(pf), S(1)));
  auto loss_d = neg(add(mean_all(real_term), mean_all(fake_term)));
  // non-saturating generator loss
  auto loss_g = neg(mean_all(log_op(pl)));
  return {loss_d, loss_g};
}

template <class S>
WganGpLoss<S> wgan_gp_loss(Network<S>& critic, const Tensor<S>& real_batch,
                           const Var<S>& fake_live, double lambda_gp, Rng& rng) {
  if (real_batch.shape != fake_live->value.shape)
    throw ShapeError("wgan_gp_loss: real batch " + shape_str(real_batch.shape) +
                     " vs fake batch " + shape_str(fake_live->value.shape));
  for (const auto& l : critic.layers)
    if (l.spec.kind == LayerKind::batchnorm2d)
      throw ConfigError("wgan_gp_loss: critic must not contain batchnorm layers");

  const int64_t n = real_batch.shape[0];
  const int64_t per = real_batch.size() / n;

  // x^ = eps*x + (1-eps)*x~ with per-sample eps ~ U(0,1)
  Tensor<S> interp(real_batch.shape);
  const auto& fake_v = fake_live->value;
  for (int64_t i = 0; i < n; ++i) {
    const S e = static_cast<S>(rng.uniform());
    for (int64_t j = 0; j < per; ++j) {
      const int64_t k = i * per + j;
      interp.data[k] = e * real_batch.data[k] + (S(1) - e) * fake_v.data[k];
    }
  }
  auto x_hat = make_leaf(std::move(interp), true, "x_hat");
  auto g = input_gradient<S>(
      [&](const Var<S>& v) { return critic.forward(v, Mode::train); }, x_hat);

  auto norm = sqrt_op(sum_axes(mul(g, g), {1, 2, 3}, false));  // (N)
  if (!norm->value.all_finite())
    throw NumericError("wgan_gp_loss: non-finite gradient norm (training divergence)");
  auto excess = scalar_add(norm, S(-1));
  auto gp = mean_all(mul(excess, excess));

  auto d_real = critic.forward(constant(real_batch), Mode::train);
  auto d_fake = critic.forward(detach(fake_live), Mode::train);
  auto d_fake_live = critic.forward(fake_live, Mode::train);

  WganGpLoss<S> out;
  out.gp_term = gp;
  out.loss_critic = add(sub(mean_all(d_fake), mean_all(d_real)),
                        scalar_mul(gp, static_cast<S>(lambda_gp)));
  out.loss_g = neg(mean_all(d_fake_live));
  out.wasserstein = static_cast<double>(mean_all(d_real)->value.item()) -
                    static_cast<double>(mean_all(d_fake)->value.item());
  return out;
}

namespace {

// flips applied to a side x side patch copied out of the dataset
template <class S>
void flip_patch(S* p, int side, bool horizontal, bool vertical) {
  if (horizontal) {
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side / 2; ++x)
        std::swap(p[y * side + x], p[y * side + side - 1 - x]);
  }
  if (vertical) {
    for (int y = 0; y < side / 2; ++y)
      for (int x = 0; x < side; ++x)
        std::swap(p[y * side + x], p[(side - 1 - y) * side + x]);
  }
}

template <class S>
Tensor<S> batch_from(const std::vector<const PatchRecord*>& patches,
                     const std::vector<size_t>& ids, int side, const GanConfig& cfg, Rng& rng) {
  Tensor<S> t(Shape{static_cast<int64_t>(ids.size()), 1, side, side});
  const int64_t per = static_cast<int64_t>(side) * side;
  for (size_t i = 0; i < ids.size(); ++i) {
    const auto& pix = patches[ids[i]]->pixels;
    S* dst = t.ptr() + static_cast<int64_t>(i) * per;
    for (int64_t j = 0; j < per; ++j) dst[j] = static_cast<S>(pix[j] * 2.0f - 1.0f);
    flip_patch(dst, side, rng.bernoulli(cfg.flip_p_horizontal),
               rng.bernoulli(cfg.flip_p_vertical));
  }
  return t;
}

template <class S>
Tensor<S> latent_batch(int64_t n, Rng& rng) {
  Tensor<S> z(Shape{n, kLatentDim});
  for (auto& v : z.data) v = static_cast<S>(rng.normal());
  return z;
}

template <class S>
std::vector<NamedTensor<float>> snapshot_state(const Network<S>& net) {
  std::vector<NamedTensor<float>> out;
  for (const auto& nt : net.state()) out.push_back({nt.name, nt.tensor.template cast<float>()});
  return out;
}

template <class S>
double sample_diversity(Network<S>& gen, Rng& rng) {
  const int n = 64;
  Tensor<S> z = latent_batch<S>(n, rng);
  auto out = gen.forward(constant(std::move(z)), Mode::eval);
  const int64_t per = out->size() / n;
  const S* d = out->value.ptr();
  double acc = 0;
  int64_t pairs = 0;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      double s = 0;
      for (int64_t k = 0; k < per; ++k) {
        const double diff = static_cast<double>(d[i * per + k]) - d[j * per + k];
        s += diff * diff;
      }
      acc += std::sqrt(s);
      pairs++;
    }
  return acc / static_cast<double>(pairs);
}

}  // namespace

template <class S>
TrainedGan train_gan(const GanConfig& config, const std::vector<PatchRecord>& patches,
                     uint64_t seed) {
  config.validate();
  if (patches.empty()) throw DataError("train_gan: empty patch list");
  std::vector<const PatchRecord*> pool;
  for (const auto& p : patches) {
    if (p.label != patchlab::PatchLabel::non_healthy)
      throw DataError("train_gan: GANs are trained on lesion patches only; found a healthy one");
    if (p.side != config.image_side)
      throw DataError("train_gan: patch side " + std::to_string(p.side) +
                      " does not match configured image side " +
                      std::to_string(config.image_side));
    pool.push_back(&p);
  }

  Rng root(seed ^ hash_str("train_gan"));
  Rng init_rng = root.fork("init");
  auto gen = Network<S>::build(generator_arch(config), init_rng);
  auto dis = Network<S>::build(discriminator_arch(config), init_rng);
  Optimizer<S> opt_g(config.opt_g, gen.parameters());
  Optimizer<S> opt_d(config.opt_d, dis.parameters());

  TrainedGan out;
  out.config = config;
  out.gen_arch = gen.arch;
  out.seed = seed;
  out.generator_id = config.model_id.empty()
                         ? variant_name(config.variant) + "-s" + std::to_string(seed)
                         : config.model_id;
  if (!patches.empty()) out.source_centre = patches.front().source_centre;

  Rng shuffle_rng = root.fork("shuffle");
  Rng aug_rng = root.fork("aug");
  Rng z_rng = root.fork("z");
  Rng smooth_rng = root.fork("smooth");
  Rng gp_rng = root.fork("gp");
  Rng div_rng = root.fork("diversity");

  const int side = config.image_side;
  std::vector<size_t> order(pool.size());
  std::iota(order.begin(), order.end(), size_t{0});

  int critic_since_g = 0;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng.engine());
    double ep_loss_d = 0, ep_loss_g = 0, ep_gp = 0, ep_w = 0;
    int d_batches = 0, g_batches = 0;

    for (size_t start = 0; start < order.size(); start += config.batch_size) {
      std::vector<size_t> ids(order.begin() + start,
                              order.begin() + std::min(order.size(),
                                                       start + config.batch_size));
      const int64_t nb = static_cast<int64_t>(ids.size());
      Tensor<S> real = batch_from<S>(pool, ids, side, config, aug_rng);

      if (config.variant == GanVariant::dcgan) {
        // discriminator step
        auto fake = gen.forward(constant(latent_batch<S>(nb, z_rng)), Mode::train);
        auto d_real = dis.forward(constant(real), Mode::train);
        auto d_fake_det = dis.forward(detach(fake), Mode::train);
        Tensor<S> targets(Shape{nb, 1});
        for (auto& t : targets.data)
          t = static_cast<S>(smooth_rng.uniform(config.smooth_lo, config.smooth_hi));
        auto [loss_d, ignored] = dcgan_losses(d_real, d_fake_det, d_fake_det, targets);
        if (!std::isfinite(static_cast<double>(loss_d->value.item())))
          throw NumericError("train_gan: discriminator loss diverged at epoch " +
                             std::to_string(epoch));
        opt_d.zero_grad();
        backward(loss_d);
        opt_d.step();

        // generator step (non-saturating)
        auto fake_live = gen.forward(constant(latent_batch<S>(nb, z_rng)), Mode::train);
        auto d_fake_live = dis.forward(fake_live, Mode::train);
        auto pl = clamp_const(d_fake_live, static_cast<S>(1e-7), S(1) - static_cast<S>(1e-7));
        auto loss_g = neg(mean_all(log_op(pl)));
        if (!std::isfinite(static_cast<double>(loss_g->value.item())))
          throw NumericError("train_gan: generator loss diverged at epoch " +
                             std::to_string(epoch));
        opt_g.zero_grad();
        backward(loss_g);
        opt_g.step();

        ep_loss_d += static_cast<double>(loss_d->value.item());
        ep_loss_g += static_cast<double>(loss_g->value.item());
        d_batches++;
        g_batches++;
      } else {
        // critic step
        auto fake = gen.forward(constant(latent_batch<S>(nb, z_rng)), Mode::train);
        auto losses = wgan_gp_loss(dis, real, fake, config.lambda_gp, gp_rng);
        if (!std::isfinite(static_cast<double>(losses.loss_critic->value.item())))
          throw NumericError("train_gan: critic loss diverged at epoch " +
                             std::to_string(epoch));
        opt_d.zero_grad();
        backward(losses.loss_critic);
        opt_d.step();
        ep_loss_d += static_cast<double>(losses.loss_critic->value.item());
        ep_gp += static_cast<double>(losses.gp_term->value.item());
        ep_w += losses.wasserstein;
        d_batches++;

        if (++critic_since_g >= config.critic_steps) {
          critic_since_g = 0;
          auto fake_live = gen.forward(constant(latent_batch<S>(nb, z_rng)), Mode::train);
          auto d_fake_live = dis.forward(fake_live, Mode::train);
          auto loss_g = neg(mean_all(d_fake_live));
          if (!std::isfinite(static_cast<double>(loss_g->value.item())))
            throw NumericError("train_gan: generator loss diverged at epoch " +
                               std::to_string(epoch));
          opt_g.zero_grad();
          backward(loss_g);
          opt_g.step();
          ep_loss_g += static_cast<double>(loss_g->value.item());
          g_batches++;
        }
      }
    }

    EpochStats st;
    st.epoch = epoch;
    st.loss_d = d_batches ? ep_loss_d / d_batches : 0;
    st.loss_g = g_batches ? ep_loss_g / g_batches : 0;
    st.gp = d_batches ? ep_gp / d_batches : 0;
    st.wasserstein = d_batches ? ep_w / d_batches : 0;
    out.history.push_back(st);

    const bool dcgan_snapshot = config.variant == GanVariant::dcgan &&
                                epoch >= config.checkpoint_start &&
                                (epoch - config.checkpoint_start) % config.checkpoint_every == 0;
    const bool wgan_snapshot = config.variant == GanVariant::wgan_gp && epoch == config.epochs;
    if (dcgan_snapshot || wgan_snapshot) {
      out.checkpoints.push_back({epoch, snapshot_state(gen)});
      out.checkpoint_diversity.emplace_back(epoch, sample_diversity(gen, div_rng));
    }
  }

  out.generator_updates = opt_g.steps_taken();
  out.discriminator_updates = opt_d.steps_taken();
  return out;
}

std::vector<int> ensemble_split(int count, int checkpoints) {
  std::vector<int> out(checkpoints, count / checkpoints);
  for (int i = 0; i < count % checkpoints; ++i) out[i]++;
  return out;
}

std::vector<PatchRecord> sample_synthetic(const TrainedGan& gan, int count, uint64_t seed,
                                          bool ensemble) {
  if (count < 1) throw ConfigError("sample_synthetic: count must be >= 1");
  if (gan.checkpoints.empty()) throw DataError("sample_synthetic: no stored checkpoints");

  std::vector<std::pair<int, int>> plan;  // (checkpoint index, count)
  if (ensemble) {
    auto split = ensemble_split(count, static_cast<int>(gan.checkpoints.size()));
    for (size_t i = 0; i < split.size(); ++i)
      if (split[i] > 0) plan.emplace_back(static_cast<int>(i), split[i]);
  } else {
    plan.emplace_back(static_cast<int>(gan.checkpoints.size()) - 1, count);
  }

  Rng root(seed ^ hash_str("sample_synthetic/" + gan.generator_id));
  Rng init_rng = root.fork("net");
  Network<float> gen = Network<float>::build(gan.gen_arch, init_rng);

  std::vector<PatchRecord> out;
  out.reserve(count);
  const int side = gan.config.image_side;
  const int64_t per = static_cast<int64_t>(side) * side;

  for (const auto& [ci, n_samples] : plan) {
    const Checkpoint& ck = gan.checkpoints[ci];
    gen.load_state(ck.state);
    Rng z_rng = root.fork("z/" + std::to_string(ck.epoch));
    int remaining = n_samples;
    while (remaining > 0) {
      const int64_t nb = std::min(remaining, 64);
      auto y = gen.forward(constant(latent_batch<float>(nb, z_rng)), Mode::eval);
      y->value.check_finite("generator output");
      for (int64_t i = 0; i < nb; ++i) {
        PatchRecord r;
        r.side = side;
        r.pixels.resize(per);
        const float* src = y->value.ptr() + i * per;
        for (int64_t j = 0; j < per; ++j)
          r.pixels[j] = std::clamp((src[j] + 1.0f) / 2.0f, 0.0f, 1.0f);
        r.label = patchlab::PatchLabel::non_healthy;
        if (gan.trained_scope == patchlab::Scope::masses_only)
          r.kinds = {phantom::LesionKind::mass};
        r.source_centre = gan.source_centre;
        r.prov.synthetic = true;
        r.prov.generator_id = gan.generator_id;
        r.prov.checkpoint_epoch = ck.epoch;
        r.patient_id = "synthetic/" + gan.generator_id;
        out.push_back(std::move(r));
      }
      remaining -= static_cast<int>(nb);
    }
  }
  return out;
}

template std::pair<Var<float>, Var<float>> dcgan_losses<float>(const Var<float>&,
                                                               const Var<float>&,
                                                               const Var<float>&,
                                                               const Tensor<float>&);
template std::pair<Var<double>, Var<double>> dcgan_losses<double>(const Var<double>&,
                                                                  const Var<double>&,
                                                                  const Var<double>&,
                                                                  const Tensor<double>&);
template WganGpLoss<float> wgan_gp_loss<float>(Network<float>&, const Tensor<float>&,
                                               const Var<float>&, double, Rng&);
template WganGpLoss<double> wgan_gp_loss<double>(Network<double>&, const Tensor<double>&,
                                                 const Var<double>&, double, Rng&);
template TrainedGan train_gan<float>(const GanConfig&, const std::vector<PatchRecord>&,
                                     uint64_t);
template TrainedGan train_gan<double>(const GanConfig&, const std::vector<PatchRecord>&,
                                      uint64_t);

}  // namespace ganshare::gan
