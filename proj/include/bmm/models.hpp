#pragma once

// The three networks: generator and discriminator of the adversarial pair,
// and the skip-connected denoising autoencoder. Builders produce
// ModelSpecs; trainers own parameters, optimizer state and the random
// stream, and can be snapshotted to a Checkpoint at epoch boundaries.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "bmm/image.hpp"
#include "bmm/kv.hpp"
#include "bmm/model_spec.hpp"

namespace bmm {

// ---------------------------------------------------------------------------
// Configuration

struct GanConfig {
  std::size_t noise_dim = 100;
  std::size_t image_height = 64;
  std::size_t image_width = 64;
  std::vector<std::size_t> generator_filters{32, 64, 128};
  std::size_t projection_filters = 128;
  std::vector<std::size_t> discriminator_filters{32, 64, 128, 256};
  double leaky_alpha = 0.2;
  double dropout_rate = 0.3;
  std::size_t epochs = 1500;
  std::size_t batch_size = 32;
  OptimizerConfig generator_optimizer{1e-4, 0.5, 0.999, 1e-8};
  OptimizerConfig discriminator_optimizer{1e-4, 0.5, 0.999, 1e-8};
  double init_std = 0.02;
  std::uint64_t rng_seed = 0;

  std::size_t upsampling_stages() const { return generator_filters.size(); }

  void validate() const {
    if (noise_dim == 0) throw ConfigError("noise_dim must be >= 1");
    if (generator_filters.empty()) throw ConfigError("generator needs at least one stage");
    if (projection_filters == 0) throw ConfigError("projection_filters must be >= 1");
    for (auto f : generator_filters) {
      if (f == 0) throw ConfigError("generator filter counts must be >= 1");
    }
    const std::size_t step = std::size_t{1} << generator_filters.size();
    if (image_height == 0 || image_width == 0 || image_height % step || image_width % step) {
      throw ConfigError("image size " + std::to_string(image_height) + "x" +
                        std::to_string(image_width) + " must be divisible by " +
                        std::to_string(step) + " for " + std::to_string(generator_filters.size()) +
                        " upsampling stages");
    }
    if (discriminator_filters.size() != 4) {
      throw ConfigError("discriminator needs exactly 4 convolution layers");
    }
    for (std::size_t i = 1; i < 4; ++i) {
      if (discriminator_filters[i] <= discriminator_filters[i - 1]) {
        throw ConfigError("discriminator filter counts must strictly increase");
      }
    }
    if (discriminator_filters[0] == 0) throw ConfigError("discriminator filters must be >= 1");
    if (image_height % 16 || image_width % 16) {
      throw ConfigError("image size must be divisible by 16 for four stride-2 convolutions");
    }
    if (!(leaky_alpha >= 0.0)) throw ConfigError("leaky_alpha must be >= 0");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
      throw ConfigError("dropout_rate must lie in [0,1)");
    }
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (!(init_std > 0.0)) throw ConfigError("init_std must be > 0");
    generator_optimizer.validate();
    discriminator_optimizer.validate();
  }
};

struct DaeConfig {
  std::size_t image_height = 64;
  std::size_t image_width = 64;
  std::vector<std::size_t> encoder_filters{32, 64, 128};
  std::vector<std::size_t> skip_sources{0, 1};
  bool residual = true;  // add the input image to the final (linear) output
  std::size_t epochs = 60;
  std::size_t batch_size = 16;
  OptimizerConfig optimizer{1e-3, 0.9, 0.999, 1e-8};
  double final_lr_fraction = 1.0;  // cosine decay to lr * fraction at the last epoch; 1 = constant
  double init_std = 0.02;
  std::uint64_t rng_seed = 0;

  /// Learning rate for a 0-based epoch index.
  double learning_rate_at(std::size_t epoch) const {
    if (final_lr_fraction == 1.0 || epochs <= 1) return optimizer.learning_rate;
    const double progress = std::min(1.0, double(epoch) / double(epochs - 1));
    const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
    return optimizer.learning_rate * (final_lr_fraction + (1.0 - final_lr_fraction) * cosine);
  }

  void validate() const {
    const std::size_t stages = encoder_filters.size();
    if (stages < 3) {
      throw ConfigError("denoising autoencoder needs at least 3 encoder stages for two skips");
    }
    for (std::size_t i = 0; i < stages; ++i) {
      if (encoder_filters[i] == 0) throw ConfigError("encoder filter counts must be >= 1");
      if (i && encoder_filters[i] <= encoder_filters[i - 1]) {
        throw ConfigError("encoder filter counts must strictly increase");
      }
    }
    if (skip_sources.size() != 2 || skip_sources[0] == skip_sources[1]) {
      throw ConfigError("denoising autoencoder needs exactly two distinct skip sources");
    }
    for (auto s : skip_sources) {
      if (s + 1 >= stages) {
        throw ConfigError("skip source " + std::to_string(s) +
                          " has no spatially matching decoder layer (valid: 0.." +
                          std::to_string(stages - 2) + ")");
      }
    }
    const std::size_t step = std::size_t{1} << stages;
    if (image_height == 0 || image_width == 0 || image_height % step || image_width % step) {
      throw ConfigError("image size must be divisible by " + std::to_string(step) + " for " +
                        std::to_string(stages) + " stride-2 stages");
    }
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (!(init_std > 0.0)) throw ConfigError("init_std must be > 0");
    if (!(final_lr_fraction > 0.0 && final_lr_fraction <= 1.0)) {
      throw ConfigError("final_lr_fraction must lie in (0,1]");
    }
    optimizer.validate();
  }
};

inline void put_optimizer(KeyValues& kv, const std::string& prefix, const OptimizerConfig& o) {
  kv[prefix + ".learning_rate"] = format_double(o.learning_rate);
  kv[prefix + ".beta1"] = format_double(o.beta1);
  kv[prefix + ".beta2"] = format_double(o.beta2);
  kv[prefix + ".eps"] = format_double(o.eps);
}

inline OptimizerConfig get_optimizer(const KeyValues& kv, const std::string& prefix) {
  OptimizerConfig o;
  o.learning_rate = parse_double(require_key(kv, prefix + ".learning_rate"), prefix);
  o.beta1 = parse_double(require_key(kv, prefix + ".beta1"), prefix);
  o.beta2 = parse_double(require_key(kv, prefix + ".beta2"), prefix);
  o.eps = parse_double(require_key(kv, prefix + ".eps"), prefix);
  return o;
}

inline KeyValues to_key_values(const GanConfig& c) {
  KeyValues kv;
  kv["noise_dim"] = std::to_string(c.noise_dim);
  kv["image_height"] = std::to_string(c.image_height);
  kv["image_width"] = std::to_string(c.image_width);
  kv["generator_filters"] = join_ints(c.generator_filters);
  kv["projection_filters"] = std::to_string(c.projection_filters);
  kv["discriminator_filters"] = join_ints(c.discriminator_filters);
  kv["leaky_alpha"] = format_double(c.leaky_alpha);
  kv["dropout_rate"] = format_double(c.dropout_rate);
  kv["epochs"] = std::to_string(c.epochs);
  kv["batch_size"] = std::to_string(c.batch_size);
  put_optimizer(kv, "generator_optimizer", c.generator_optimizer);
  put_optimizer(kv, "discriminator_optimizer", c.discriminator_optimizer);
  kv["init_std"] = format_double(c.init_std);
  kv["rng_seed"] = std::to_string(c.rng_seed);
  return kv;
}

inline GanConfig gan_config_from(const KeyValues& kv) {
  GanConfig c;
  c.noise_dim = parse_u64(require_key(kv, "noise_dim"));
  c.image_height = parse_u64(require_key(kv, "image_height"));
  c.image_width = parse_u64(require_key(kv, "image_width"));
  c.generator_filters = parse_ints(require_key(kv, "generator_filters"));
  c.projection_filters = parse_u64(require_key(kv, "projection_filters"));
  c.discriminator_filters = parse_ints(require_key(kv, "discriminator_filters"));
  c.leaky_alpha = parse_double(require_key(kv, "leaky_alpha"));
  c.dropout_rate = parse_double(require_key(kv, "dropout_rate"));
  c.epochs = parse_u64(require_key(kv, "epochs"));
  c.batch_size = parse_u64(require_key(kv, "batch_size"));
  c.generator_optimizer = get_optimizer(kv, "generator_optimizer");
  c.discriminator_optimizer = get_optimizer(kv, "discriminator_optimizer");
  c.init_std = parse_double(require_key(kv, "init_std"));
  c.rng_seed = parse_u64(require_key(kv, "rng_seed"));
  return c;
}

inline KeyValues to_key_values(const DaeConfig& c) {
  KeyValues kv;
  kv["image_height"] = std::to_string(c.image_height);
  kv["image_width"] = std::to_string(c.image_width);
  kv["encoder_filters"] = join_ints(c.encoder_filters);
  kv["skip_sources"] = join_ints(c.skip_sources);
  kv["residual"] = c.residual ? "1" : "0";
  kv["epochs"] = std::to_string(c.epochs);
  kv["batch_size"] = std::to_string(c.batch_size);
  put_optimizer(kv, "optimizer", c.optimizer);
  kv["final_lr_fraction"] = format_double(c.final_lr_fraction);
  kv["init_std"] = format_double(c.init_std);
  kv["rng_seed"] = std::to_string(c.rng_seed);
  return kv;
}

inline DaeConfig dae_config_from(const KeyValues& kv) {
  DaeConfig c;
  c.image_height = parse_u64(require_key(kv, "image_height"));
  c.image_width = parse_u64(require_key(kv, "image_width"));
  c.encoder_filters = parse_ints(require_key(kv, "encoder_filters"));
  c.skip_sources = parse_ints(require_key(kv, "skip_sources"));
  c.residual = parse_u64(require_key(kv, "residual")) != 0;
  c.epochs = parse_u64(require_key(kv, "epochs"));
  c.batch_size = parse_u64(require_key(kv, "batch_size"));
  c.optimizer = get_optimizer(kv, "optimizer");
  c.final_lr_fraction = parse_double(require_key(kv, "final_lr_fraction"));
  c.init_std = parse_double(require_key(kv, "init_std"));
  c.rng_seed = parse_u64(require_key(kv, "rng_seed"));
  return c;
}

// ---------------------------------------------------------------------------
// Builders

/// dense -> reshape -> [upsample x2 -> deconv k3 s1 -> batchnorm -> relu]
/// per stage -> deconv k3 s1 to one channel -> tanh.
inline ModelSpec build_generator(const GanConfig& config) {
  config.validate();
  const std::size_t stages = config.upsampling_stages();
  const std::size_t h0 = config.image_height >> stages;
  const std::size_t w0 = config.image_width >> stages;
  ModelSpec spec{"generator", {config.noise_dim}, {}};
  auto& L = spec.layers;

  LayerSpec proj{LayerKind::dense, "project"};
  proj.filters = config.projection_filters * h0 * w0;
  L.push_back(proj);
  LayerSpec rs{LayerKind::reshape, "reshape"};
  rs.target = {config.projection_filters, h0, w0};
  L.push_back(rs);

  for (std::size_t i = 0; i < stages; ++i) {
    const std::string tag = std::to_string(i);
    LayerSpec up{LayerKind::upsample, "up" + tag};
    up.factor = 2;
    L.push_back(up);
    LayerSpec dc{LayerKind::deconv, "deconv" + tag};
    dc.filters = config.generator_filters[i];
    dc.kernel = 3;
    dc.stride = 1;
    dc.padding = 1;
    L.push_back(dc);
    L.push_back(LayerSpec{LayerKind::batchnorm, "bn" + tag});
    LayerSpec act{LayerKind::activation, "relu" + tag};
    act.act = {ActivationKind::relu, 0.0};
    L.push_back(act);
  }
  LayerSpec out{LayerKind::deconv, "deconv_out"};
  out.filters = 1;
  out.kernel = 3;
  out.stride = 1;
  out.padding = 1;
  L.push_back(out);
  LayerSpec th{LayerKind::activation, "tanh"};
  th.act = {ActivationKind::tanh, 0.0};
  L.push_back(th);
  infer_shapes(spec);
  return spec;
}

/// 4 x [conv k3 s2 -> leaky relu -> dropout] -> flatten -> dense(1) -> sigmoid.
inline ModelSpec build_discriminator(const GanConfig& config) {
  config.validate();
  ModelSpec spec{"discriminator", {1, config.image_height, config.image_width}, {}};
  auto& L = spec.layers;
  std::size_t h = config.image_height, w = config.image_width;
  for (std::size_t i = 0; i < 4; ++i) {
    const std::string tag = std::to_string(i);
    LayerSpec cv{LayerKind::conv, "conv" + tag};
    cv.filters = config.discriminator_filters[i];
    cv.kernel = 3;
    cv.stride = 2;
    cv.padding = 1;
    L.push_back(cv);
    LayerSpec act{LayerKind::activation, "lrelu" + tag};
    act.act = {ActivationKind::leaky_relu, config.leaky_alpha};
    L.push_back(act);
    LayerSpec dr{LayerKind::dropout, "dropout" + tag};
    dr.dropout_rate = config.dropout_rate;
    L.push_back(dr);
    h /= 2;
    w /= 2;
  }
  LayerSpec flat{LayerKind::reshape, "flatten"};
  flat.target = {config.discriminator_filters[3] * h * w};
  L.push_back(flat);
  LayerSpec fc{LayerKind::dense, "classify"};
  fc.filters = 1;
  L.push_back(fc);
  LayerSpec sg{LayerKind::activation, "sigmoid"};
  sg.act = {ActivationKind::sigmoid, 0.0};
  L.push_back(sg);
  infer_shapes(spec);
  return spec;
}

/// Encoder [conv k3 s2 -> relu] per stage, mirrored decoder
/// [deconv k3 s2 (-> + encoder features) -> relu], final deconv linear.
inline ModelSpec build_dae(const DaeConfig& config) {
  config.validate();
  const std::size_t stages = config.encoder_filters.size();
  ModelSpec spec{"dae", {1, config.image_height, config.image_width}, {}};
  auto& L = spec.layers;
  std::vector<std::size_t> encoder_feature_layer(stages);
  for (std::size_t i = 0; i < stages; ++i) {
    const std::string tag = std::to_string(i);
    LayerSpec cv{LayerKind::conv, "enc" + tag};
    cv.filters = config.encoder_filters[i];
    cv.kernel = 3;
    cv.stride = 2;
    cv.padding = 1;
    L.push_back(cv);
    LayerSpec act{LayerKind::activation, "enc_relu" + tag};
    act.act = {ActivationKind::relu, 0.0};
    L.push_back(act);
    encoder_feature_layer[i] = L.size() - 1;
  }
  for (std::size_t j = 0; j < stages; ++j) {
    const std::string tag = std::to_string(j);
    const bool last = j + 1 == stages;
    LayerSpec dc{LayerKind::deconv, "dec" + tag};
    // Decoder stage j restores the resolution of encoder stage stages-2-j.
    dc.filters = last ? 1 : config.encoder_filters[stages - 2 - j];
    dc.kernel = 3;
    dc.stride = 2;
    dc.padding = 1;
    dc.output_padding = 1;
    L.push_back(dc);
    if (last) {
      if (config.residual) {
        LayerSpec res{LayerKind::skip_add, "residual"};
        res.skip_source = skip_input;
        L.push_back(res);
      }
      break;
    }
    const std::size_t partner = stages - 2 - j;
    if (std::find(config.skip_sources.begin(), config.skip_sources.end(), partner) !=
        config.skip_sources.end()) {
      LayerSpec sk{LayerKind::skip_add, "skip" + std::to_string(partner)};
      sk.skip_source = encoder_feature_layer[partner];
      L.push_back(sk);
    }
    LayerSpec act{LayerKind::activation, "dec_relu" + tag};
    act.act = {ActivationKind::relu, 0.0};
    L.push_back(act);
  }
  if (output_shape(spec) != spec.input_shape) {
    throw ConfigError("denoising autoencoder output shape " + shape_string(output_shape(spec)) +
                      " differs from input " + shape_string(spec.input_shape));
  }
  return spec;
}

// ---------------------------------------------------------------------------
// Checkpoints

struct Checkpoint {
  std::string kind;  // "gan" or "dae"
  KeyValues meta;    // "config.*", "epoch", "rng", "<net>.adam_step"
  TensorMap<float> tensors;
};

namespace detail {

template <typename T>
void pack_network(Checkpoint& ck, const std::string& net, const ModelState<T>& state,
                  const AdamState<T>& adam) {
  for (const auto& [name, t] : state.params) ck.tensors.emplace(net + "/param/" + name, t);
  for (const auto& [name, n] : state.norms) {
    ck.tensors.emplace(net + "/norm/" + name + ".running_mean", n.running_mean);
    ck.tensors.emplace(net + "/norm/" + name + ".running_var", n.running_var);
  }
  for (const auto& [name, t] : adam.first_moment) ck.tensors.emplace(net + "/adam_m/" + name, t);
  for (const auto& [name, t] : adam.second_moment) ck.tensors.emplace(net + "/adam_v/" + name, t);
  ck.meta[net + ".adam_step"] = std::to_string(adam.step);
}

inline const Tensor<float>& take(const Checkpoint& ck, const std::string& key) {
  auto it = ck.tensors.find(key);
  if (it == ck.tensors.end()) throw FormatError("checkpoint is missing tensor '" + key + "'");
  return it->second;
}

template <typename T>
void unpack_network(const Checkpoint& ck, const std::string& net, const ModelSpec& spec,
                    ModelState<T>& state, AdamState<T>& adam) {
  const auto shapes = parameter_shapes(spec);
  state = {};
  adam = {};
  for (const auto& [name, shape] : shapes) {
    const auto& t = take(ck, net + "/param/" + name);
    if (t.shape() != shape) {
      throw FormatError("checkpoint tensor " + name + " has shape " + shape_string(t.shape()) +
                        ", model expects " + shape_string(shape));
    }
    state.params.emplace(name, tensor_cast<T>(t));
    auto m = ck.tensors.find(net + "/adam_m/" + name);
    auto v = ck.tensors.find(net + "/adam_v/" + name);
    if (m != ck.tensors.end()) adam.first_moment.emplace(name, tensor_cast<T>(m->second));
    if (v != ck.tensors.end()) adam.second_moment.emplace(name, tensor_cast<T>(v->second));
  }
  for (const auto& l : spec.layers) {
    if (l.kind != LayerKind::batchnorm) continue;
    BatchNormState<T> n;
    n.running_mean = tensor_cast<T>(take(ck, net + "/norm/" + l.name + ".running_mean"));
    n.running_var = tensor_cast<T>(take(ck, net + "/norm/" + l.name + ".running_var"));
    state.norms.emplace(l.name, std::move(n));
  }
  adam.step = parse_u64(require_key(ck.meta, net + ".adam_step"));
}

inline KeyValues config_section(const KeyValues& meta) {
  KeyValues out;
  for (const auto& [k, v] : meta) {
    if (k.rfind("config.", 0) == 0) out.emplace(k.substr(7), v);
  }
  return out;
}

inline void check_finite(const Tensor<float>& t, const std::string& what, std::size_t epoch,
                         std::size_t step) {
  if (!t.all_finite()) {
    throw TrainingError("non-finite " + what + " at epoch " + std::to_string(epoch) + " step " +
                        std::to_string(step));
  }
}

inline void check_finite(const TensorMap<float>& grads, const std::string& net, std::size_t epoch,
                         std::size_t step) {
  for (const auto& [name, g] : grads) check_finite(g, net + " gradient " + name, epoch, step);
}

}  // namespace detail

inline void require_kind(const Checkpoint& ck, const std::string& kind) {
  if (ck.kind != kind) {
    throw ValidationError("expected a '" + kind + "' checkpoint, got '" + ck.kind + "'");
  }
}

// ---------------------------------------------------------------------------
// Adversarial training

struct GanEpochLog {
  std::size_t epoch = 0;  // 1-based
  double discriminator_loss = 0.0;
  double generator_loss = 0.0;
  double discriminator_accuracy = 0.0;  // balanced probe batch, infer mode
};

inline Tensor<float> uniform_noise(Rng& rng, std::size_t n, std::size_t dim) {
  Tensor<float> z(Shape{n, dim});
  for (auto& v : z.data()) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  return z;
}

class GanTrainer {
 public:
  explicit GanTrainer(GanConfig config)
      : config_(std::move(config)),
        gspec_(build_generator(config_)),
        dspec_(build_discriminator(config_)),
        rng_(config_.rng_seed) {
    Rng init(derive_seed(config_.rng_seed, 1));
    generator_ = init_model<float>(gspec_, init, config_.init_std);
    discriminator_ = init_model<float>(dspec_, init, config_.init_std);
  }

  static GanTrainer resume(const Checkpoint& ck) {
    require_kind(ck, "gan");
    GanTrainer t(gan_config_from(detail::config_section(ck.meta)));
    detail::unpack_network(ck, "generator", t.gspec_, t.generator_, t.gen_adam_);
    detail::unpack_network(ck, "discriminator", t.dspec_, t.discriminator_, t.disc_adam_);
    t.epoch_ = parse_u64(require_key(ck.meta, "epoch"));
    t.rng_.set_state(require_key(ck.meta, "rng"));
    return t;
  }

  /// Overrides the epoch budget (used when resuming with a longer schedule).
  void set_epochs(std::size_t epochs) { config_.epochs = epochs; }

  const GanConfig& config() const { return config_; }
  const ModelSpec& generator_spec() const { return gspec_; }
  const ModelSpec& discriminator_spec() const { return dspec_; }
  const ModelState<float>& generator() const { return generator_; }
  const ModelState<float>& discriminator() const { return discriminator_; }
  std::size_t epoch() const { return epoch_; }

  /// One pass over `images` (each [H,W] in [-1,1]): per minibatch a
  /// discriminator step on real (label 1) + generated (label 0), then a
  /// generator step through the frozen discriminator against label 1.
  GanEpochLog train_epoch(std::span<const Image> images) {
    check_dataset(images);
    const std::size_t n = images.size();
    const std::size_t batch = std::min(config_.batch_size, n);
    const auto order = rng_.permutation(n);
    double d_total = 0.0, g_total = 0.0;
    std::size_t steps = 0;
    const std::size_t epoch_number = epoch_ + 1;

    for (std::size_t start = 0; start < n; start += batch) {
      const std::size_t count = std::min(batch, n - start);
      std::span<const std::size_t> idx(order.data() + start, count);
      const std::uint64_t step_seed = rng_.next();

      // Discriminator step.
      {
        Rng noise_rng(derive_seed(step_seed, 1));
        const auto z = uniform_noise(noise_rng, count, config_.noise_dim);
        Tensor<float> fake = run_generator(z, Mode::train, derive_seed(step_seed, 2));
        const Tensor<float> real = stack_images(images, idx);
        Tensor<float> both(Shape{2 * count, 1, config_.image_height, config_.image_width});
        std::copy(real.data().begin(), real.data().end(), both.data().begin());
        std::copy(fake.data().begin(), fake.data().end(),
                  both.data().begin() + static_cast<std::ptrdiff_t>(real.size()));
        Tensor<float> labels(Shape{2 * count, 1}, 0.0f);
        for (std::size_t i = 0; i < count; ++i) labels[i] = 1.0f;

        Graph<float> g;
        const NodeId x = g.constant(std::move(both));
        ForwardOptions opt{Mode::train, derive_seed(step_seed, 3), true, {}};
        auto d = forward(g, dspec_, discriminator_, x, opt);
        const NodeId loss = bce_loss(g, d.output, labels);
        detail::check_finite(g.value(loss), "discriminator loss", epoch_number, steps);
        g.backward(loss);
        auto grads = collect_gradients(g, d);
        detail::check_finite(grads, "discriminator", epoch_number, steps);
        adam_step(discriminator_.params, grads, disc_adam_, config_.discriminator_optimizer);
        d_total += g.value(loss)[0];
      }

      // Generator step.
      {
        Rng noise_rng(derive_seed(step_seed, 4));
        const auto z = uniform_noise(noise_rng, count, config_.noise_dim);
        Graph<float> g;
        const NodeId zin = g.constant(z);
        ForwardOptions gopt{Mode::train, derive_seed(step_seed, 5), true, {}};
        auto gen = forward(g, gspec_, generator_, zin, gopt);
        ForwardOptions dopt{Mode::train, derive_seed(step_seed, 6), false, {}};
        auto d = forward(g, dspec_, discriminator_, gen.output, dopt);
        const NodeId loss = bce_loss(g, d.output, Tensor<float>(Shape{count, 1}, 1.0f));
        detail::check_finite(g.value(loss), "generator loss", epoch_number, steps);
        g.backward(loss);
        auto grads = collect_gradients(g, gen);
        detail::check_finite(grads, "generator", epoch_number, steps);
        adam_step(generator_.params, grads, gen_adam_, config_.generator_optimizer);
        g_total += g.value(loss)[0];
      }
      ++steps;
    }
    epoch_ = epoch_number;
    GanEpochLog log;
    log.epoch = epoch_number;
    log.discriminator_loss = d_total / static_cast<double>(steps);
    log.generator_loss = g_total / static_cast<double>(steps);
    log.discriminator_accuracy = probe_accuracy(images);
    return log;
  }

  /// Generator forward pass; infer mode uses running batchnorm statistics.
  Tensor<float> generate(const Tensor<float>& noise) const {
    auto state = generator_;
    Graph<float> g;
    auto out = forward(g, gspec_, state, g.constant(noise), {Mode::infer, 0, false, {}});
    return g.value(out.output);
  }

  /// Discriminator scores in infer mode (dropout off).
  Tensor<float> score(const Tensor<float>& images) const {
    auto state = discriminator_;
    Graph<float> g;
    auto d = forward(g, dspec_, state, g.constant(images), {Mode::infer, 0, false, {}});
    return g.value(d.output);
  }

  /// Balanced probe: the first min(batch, n) training images against as
  /// many samples from a fixed probe noise batch.
  double probe_accuracy(std::span<const Image> images) const {
    const std::size_t count = std::min(config_.batch_size, images.size());
    std::vector<std::size_t> idx(count);
    for (std::size_t i = 0; i < count; ++i) idx[i] = i;
    Rng probe_rng(derive_seed(config_.rng_seed, 7));
    const auto fake = generate(uniform_noise(probe_rng, count, config_.noise_dim));
    const auto real_scores = score(stack_images(images, idx));
    const auto fake_scores = score(fake);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < count; ++i) {
      correct += real_scores[i] > 0.5f;
      correct += fake_scores[i] < 0.5f;
    }
    return static_cast<double>(correct) / static_cast<double>(2 * count);
  }

  Checkpoint checkpoint() const {
    Checkpoint ck;
    ck.kind = "gan";
    for (const auto& [k, v] : to_key_values(config_)) ck.meta["config." + k] = v;
    ck.meta["epoch"] = std::to_string(epoch_);
    ck.meta["rng"] = rng_.state();
    detail::pack_network(ck, "generator", generator_, gen_adam_);
    detail::pack_network(ck, "discriminator", discriminator_, disc_adam_);
    return ck;
  }

 private:
  /// Train-mode generator pass without gradients (updates running statistics).
  Tensor<float> run_generator(const Tensor<float>& noise, Mode mode, std::uint64_t seed) {
    Graph<float> g;
    auto out = forward(g, gspec_, generator_, g.constant(noise), {mode, seed, false, {}});
    return g.value(out.output);
  }

  void check_dataset(std::span<const Image> images) const {
    if (images.empty()) throw ValidationError("train_gan: dataset is empty");
    for (std::size_t i = 0; i < images.size(); ++i) {
      const auto& im = images[i];
      if (im.shape() != Shape{config_.image_height, config_.image_width}) {
        throw ShapeError("train_gan: image " + std::to_string(i) + " has shape " +
                         shape_string(im.shape()) + ", config expects [" +
                         std::to_string(config_.image_height) + "," +
                         std::to_string(config_.image_width) + "]");
      }
      for (float v : im.data()) {
        if (!(v >= -1.0f - 1e-6f && v <= 1.0f + 1e-6f)) {
          throw ValidationError("train_gan: image " + std::to_string(i) +
                                " is not normalized to [-1,1]");
        }
      }
    }
  }

  GanConfig config_;
  ModelSpec gspec_;
  ModelSpec dspec_;
  ModelState<float> generator_;
  ModelState<float> discriminator_;
  AdamState<float> gen_adam_;
  AdamState<float> disc_adam_;
  Rng rng_;
  std::size_t epoch_ = 0;
};

struct GanCallbacks {
  std::function<void(const GanEpochLog&, const GanTrainer&)> on_epoch;
};

struct GanResult {
  Checkpoint checkpoint;
  std::vector<GanEpochLog> log;
};

/// Trains up to config.epochs total epochs, continuing from `resume` if given.
inline GanResult train_gan(std::span<const Image> images, const GanConfig& config,
                           const GanCallbacks& callbacks = {}, const Checkpoint* resume = nullptr) {
  GanTrainer trainer = resume ? GanTrainer::resume(*resume) : GanTrainer(config);
  trainer.set_epochs(config.epochs);
  GanResult result;
  while (trainer.epoch() < config.epochs) {
    result.log.push_back(trainer.train_epoch(images));
    if (callbacks.on_epoch) callbacks.on_epoch(result.log.back(), trainer);
  }
  result.checkpoint = trainer.checkpoint();
  return result;
}

/// n images in [-1,1] from n uniform[-1,1] noise vectors drawn with `noise_seed`.
inline std::vector<Image> synthesize(const Checkpoint& ck, std::size_t n, std::uint64_t noise_seed) {
  require_kind(ck, "gan");
  if (n == 0) return {};
  const GanTrainer trainer = GanTrainer::resume(ck);
  Rng rng(noise_seed);
  const auto z = uniform_noise(rng, n, trainer.config().noise_dim);
  std::vector<Image> out;
  out.reserve(n);
  const std::size_t chunk = 16;
  const std::size_t dim = trainer.config().noise_dim;
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t count = std::min(chunk, n - start);
    Tensor<float> part(Shape{count, dim});
    std::copy_n(z.data().begin() + static_cast<std::ptrdiff_t>(start * dim), count * dim,
                part.data().begin());
    for (auto& im : unstack_images(trainer.generate(part))) out.push_back(std::move(im));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Denoising autoencoder

struct DaeEpochLog {
  std::size_t epoch = 0;  // 1-based
  double training_mse = 0.0;
};

struct DenoisePair {
  Image noisy;
  Image clean;
};

class DaeTrainer {
 public:
  explicit DaeTrainer(DaeConfig config)
      : config_(std::move(config)), spec_(build_dae(config_)), rng_(config_.rng_seed) {
    Rng init(derive_seed(config_.rng_seed, 1));
    model_ = init_model<float>(spec_, init, config_.init_std);
  }

  static DaeTrainer resume(const Checkpoint& ck) {
    require_kind(ck, "dae");
    DaeTrainer t(dae_config_from(detail::config_section(ck.meta)));
    detail::unpack_network(ck, "dae", t.spec_, t.model_, t.adam_);
    t.epoch_ = parse_u64(require_key(ck.meta, "epoch"));
    t.rng_.set_state(require_key(ck.meta, "rng"));
    return t;
  }

  /// Overrides the epoch budget; the learning-rate schedule follows it.
  void set_epochs(std::size_t epochs) { config_.epochs = epochs; }

  const DaeConfig& config() const { return config_; }
  const ModelSpec& spec() const { return spec_; }
  const ModelState<float>& model() const { return model_; }
  std::size_t epoch() const { return epoch_; }

  DaeEpochLog train_epoch(std::span<const DenoisePair> pairs) {
    if (pairs.empty()) throw ValidationError("train_dae: no training pairs");
    std::vector<Image> noisy, clean;
    noisy.reserve(pairs.size());
    clean.reserve(pairs.size());
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      check_size(pairs[i].noisy, i);
      check_size(pairs[i].clean, i);
      noisy.push_back(pairs[i].noisy);
      clean.push_back(pairs[i].clean);
    }
    const std::size_t n = pairs.size();
    const std::size_t batch = std::min(config_.batch_size, n);
    const auto order = rng_.permutation(n);
    const std::size_t epoch_number = epoch_ + 1;
    OptimizerConfig opt = config_.optimizer;
    opt.learning_rate = config_.learning_rate_at(epoch_);
    double weighted = 0.0;
    std::size_t step = 0;
    for (std::size_t start = 0; start < n; start += batch, ++step) {
      const std::size_t count = std::min(batch, n - start);
      std::span<const std::size_t> idx(order.data() + start, count);
      Graph<float> g;
      const NodeId x = g.constant(stack_images(std::span<const Image>(noisy), idx));
      auto out = forward(g, spec_, model_, x, {Mode::train, rng_.next(), true, {}});
      const NodeId loss = mse_loss(g, out.output, stack_images(std::span<const Image>(clean), idx));
      detail::check_finite(g.value(loss), "reconstruction loss", epoch_number, step);
      g.backward(loss);
      auto grads = collect_gradients(g, out);
      detail::check_finite(grads, "dae", epoch_number, step);
      adam_step(model_.params, grads, adam_, opt);
      weighted += g.value(loss)[0] * static_cast<double>(count);
    }
    epoch_ = epoch_number;
    return {epoch_number, weighted / static_cast<double>(n)};
  }

  Checkpoint checkpoint() const {
    Checkpoint ck;
    ck.kind = "dae";
    for (const auto& [k, v] : to_key_values(config_)) ck.meta["config." + k] = v;
    ck.meta["epoch"] = std::to_string(epoch_);
    ck.meta["rng"] = rng_.state();
    detail::pack_network(ck, "dae", model_, adam_);
    return ck;
  }

 private:
  void check_size(const Image& im, std::size_t i) const {
    if (im.shape() != Shape{config_.image_height, config_.image_width}) {
      throw ShapeError("train_dae: pair " + std::to_string(i) + " has shape " +
                       shape_string(im.shape()) + ", config expects [" +
                       std::to_string(config_.image_height) + "," +
                       std::to_string(config_.image_width) + "]");
    }
  }

  DaeConfig config_;
  ModelSpec spec_;
  ModelState<float> model_;
  AdamState<float> adam_;
  Rng rng_;
  std::size_t epoch_ = 0;
};

struct DaeCallbacks {
  std::function<void(const DaeEpochLog&, const DaeTrainer&)> on_epoch;
};

struct DaeResult {
  Checkpoint checkpoint;
  std::vector<DaeEpochLog> log;
};

inline DaeResult train_dae(std::span<const DenoisePair> pairs, const DaeConfig& config,
                           const DaeCallbacks& callbacks = {}, const Checkpoint* resume = nullptr) {
  DaeTrainer trainer = resume ? DaeTrainer::resume(*resume) : DaeTrainer(config);
  trainer.set_epochs(config.epochs);
  DaeResult result;
  while (trainer.epoch() < config.epochs) {
    result.log.push_back(trainer.train_epoch(pairs));
    if (callbacks.on_epoch) callbacks.on_epoch(result.log.back(), trainer);
  }
  result.checkpoint = trainer.checkpoint();
  return result;
}

/// Inference wrapper around a trained autoencoder. Immutable after
/// construction, so one instance may serve several threads.
class Denoiser {
 public:
  explicit Denoiser(const Checkpoint& ck) {
    require_kind(ck, "dae");
    config_ = dae_config_from(detail::config_section(ck.meta));
    spec_ = build_dae(config_);
    AdamState<float> unused;
    detail::unpack_network(ck, "dae", spec_, model_, unused);
  }

  const DaeConfig& config() const { return config_; }

  /// Single infer-mode forward pass; output clamped to the [0,1] storage range.
  Image operator()(const Image& noisy) const {
    if (noisy.shape() != Shape{config_.image_height, config_.image_width}) {
      throw ShapeError("denoise: image shape " + shape_string(noisy.shape()) +
                       " does not match the checkpoint's [" + std::to_string(config_.image_height) +
                       "," + std::to_string(config_.image_width) + "]");
    }
    auto state = model_;
    Graph<float> g;
    const Image single[] = {noisy};
    auto out = forward(g, spec_, state, g.constant(stack_images(std::span<const Image>(single))),
                       {Mode::infer, 0, false, {}});
    Image result = unstack_images(g.value(out.output)).front();
    for (auto& v : result.data()) v = std::clamp(v, 0.0f, 1.0f);
    return result;
  }

 private:
  DaeConfig config_;
  ModelSpec spec_;
  ModelState<float> model_;
};

inline Image denoise(const Checkpoint& ck, const Image& noisy) { return Denoiser(ck)(noisy); }

}  // namespace bmm
