#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "bmm/checkpoint_io.hpp"
#include "bmm/dataflow.hpp"
#include "bmm/models.hpp"

using namespace bmm;
namespace fs = std::filesystem;

namespace {

struct NetCheck {
  double max_error = 0;
  std::string worst;
  std::size_t checked = 0;
  std::size_t kinks = 0;       // elements skipped because a ReLU kink lies within eps
  double max_structural = 0;   // largest |gradient| among names expected to be exactly zero
};

// Finite differences over every parameter and input element of a model in
// double precision, against the tape gradient of a fixed random projection.
// Names in `zero_grad` (biases feeding train-mode batchnorm) must have a
// vanishing gradient instead.
NetCheck network_grad_check(const ModelSpec& spec, const ModelState<double>& state0,
                            const Tensor<double>& x0, Mode mode, std::uint64_t dropout_seed,
                            const std::set<std::string>& zero_grad = {}, double eps = 1e-5) {
  Tensor<double> projection;
  auto loss_of = [&](ModelState<double> st, const Tensor<double>& x, bool grads, TensorMap<double>* out,
                     Tensor<double>* dx) {
    Graph<double> g;
    const NodeId in = g.parameter(x);
    auto res = forward(g, spec, st, in, {mode, dropout_seed, true, {}});
    const auto& y = g.value(res.output);
    if (projection.empty()) {
      Rng r(99);
      projection = Tensor<double>(y.shape());
      for (auto& v : projection.values()) v = r.uniform(-1, 1);
    }
    double l = 0;
    for (std::size_t i = 0; i < y.size(); ++i) l += y[i] * projection[i];
    if (grads) {
      g.backward(sum(g, mul(g, res.output, g.constant(projection))));
      *out = collect_gradients(g, res);
      *dx = *g.grad(in);
    }
    return l;
  };
  TensorMap<double> analytic;
  Tensor<double> dx;
  const double base = loss_of(state0, x0, true, &analytic, &dx);

  NetCheck r;
  auto compare = [&](double a, double plus, double minus, const std::string& what, bool structural) {
    const double n = (plus - minus) / (2 * eps);
    ++r.checked;
    if (structural) {
      r.max_structural = std::max({r.max_structural, std::abs(a), std::abs(n)});
      return;
    }
    // One-sided slopes disagree only where the function is not smooth.
    const double right = (plus - base) / eps, left = (base - minus) / eps;
    if (std::abs(right - left) > 1e-3 * std::max({1.0, std::abs(right), std::abs(left)})) {
      ++r.kinks;
      return;
    }
    const double rel = std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-8});
    if (rel > r.max_error) {
      r.max_error = rel;
      r.worst = what + " analytic " + std::to_string(a) + " numeric " + std::to_string(n);
    }
  };
  for (const auto& [name, p] : state0.params) {
    for (std::size_t i = 0; i < p.size(); ++i) {
      auto sp = state0, sm = state0;
      sp.params.at(name)[i] += eps;
      sm.params.at(name)[i] -= eps;
      compare(analytic.at(name)[i], loss_of(sp, x0, false, nullptr, nullptr),
              loss_of(sm, x0, false, nullptr, nullptr), name + "[" + std::to_string(i) + "]",
              zero_grad.count(name) > 0);
    }
  }
  for (std::size_t i = 0; i < x0.size(); ++i) {
    auto xp = x0, xm = x0;
    xp[i] += eps;
    xm[i] -= eps;
    compare(dx[i], loss_of(state0, xp, false, nullptr, nullptr), loss_of(state0, xm, false, nullptr, nullptr),
            "input[" + std::to_string(i) + "]", false);
  }
  return r;
}

void expect_agreement(const NetCheck& r, const std::string& label) {
  EXPECT_LT(r.max_error, 1e-3) << label << ": " << r.worst;
  // One pre-activation near zero touches every parameter upstream of it.
  EXPECT_LE(r.kinks * 20, r.checked) << label << ": " << r.kinks << " of " << r.checked << " at kinks";
  EXPECT_LT(r.max_structural, 1e-6) << label;
}

Tensor<double> randn(Shape s, Rng& rng) {
  Tensor<double> t(std::move(s));
  for (auto& v : t.values()) v = rng.normal();
  return t;
}

// Zero biases put pre-activations of all-zero regions exactly on the ReLU
// kink; random biases and gammas keep the check away from it.
ModelState<double> random_state(const ModelSpec& spec, Rng& rng) {
  auto st = init_model<double>(spec, rng, 0.5);
  for (auto& [name, t] : st.params) {
    const bool bias = name.ends_with(".bias") || name.ends_with(".beta");
    if (bias) for (auto& v : t.values()) v = 0.3 * rng.normal();
    if (name.ends_with(".gamma")) for (auto& v : t.values()) v = 0.5 + rng.uniform();
  }
  return st;
}

GanConfig tiny_gan(std::size_t size = 16) {
  GanConfig c;
  c.noise_dim = 8;
  c.image_height = c.image_width = size;
  c.generator_filters = {4, 6};
  c.projection_filters = 4;
  c.discriminator_filters = {2, 3, 4, 5};
  c.batch_size = 4;
  c.generator_optimizer.learning_rate = 2e-4;
  c.discriminator_optimizer.learning_rate = 2e-4;
  return c;
}

DaeConfig tiny_dae(std::size_t size = 8) {
  DaeConfig c;
  c.image_height = c.image_width = size;
  c.encoder_filters = {2, 3, 4};
  c.skip_sources = {0, 1};
  c.batch_size = 4;
  c.epochs = 3;
  return c;
}

std::vector<Image> phantom_images(std::size_t n, std::size_t size, std::uint64_t seed0 = 0) {
  std::vector<Image> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(to_symmetric(generate_phantom(seed0 + i, size, size).image));
  return out;
}

std::vector<Image> downsample2(const std::vector<Image>& ims) {
  std::vector<Image> out;
  for (const auto& im : ims) {
    const std::size_t h = image_height(im) / 2, w = image_width(im) / 2;
    Image d(Shape{h, w});
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t W = image_width(im);
        d[y * w + x] = 0.25f * (im[2 * y * W + 2 * x] + im[2 * y * W + 2 * x + 1] +
                                im[(2 * y + 1) * W + 2 * x] + im[(2 * y + 1) * W + 2 * x + 1]);
      }
    out.push_back(d);
  }
  return out;
}

void expect_same_checkpoint(const Checkpoint& a, const Checkpoint& b) {
  EXPECT_EQ(a.kind, b.kind);
  EXPECT_EQ(a.meta, b.meta);
  ASSERT_EQ(a.tensors.size(), b.tensors.size());
  for (const auto& [name, t] : a.tensors) {
    ASSERT_TRUE(b.tensors.count(name)) << name;
    EXPECT_TRUE(bitwise_equal(t, b.tensors.at(name))) << name;
  }
}

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("bmm_models_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

// --- builders ------------------------------------------------------------------

TEST(Generator, DefaultShapeAndRange) {
  GanConfig c;
  const auto spec = build_generator(c);
  EXPECT_EQ(output_shape(spec), (Shape{1, 64, 64}));
  Rng init(1);
  auto st = init_model<float>(spec, init, c.init_std);
  Rng nz(2);
  Graph<float> g;
  auto out = forward(g, spec, st, g.constant(uniform_noise(nz, 2, 100)), {Mode::infer, 0, false, {}});
  EXPECT_EQ(g.shape(out.output), (Shape{2, 1, 64, 64}));
  for (float v : g.value(out.output).data()) {
    EXPECT_GE(v, -1.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(Generator, LayerSequence) {
  const auto spec = build_generator(tiny_gan());
  std::vector<LayerKind> kinds;
  for (const auto& l : spec.layers) kinds.push_back(l.kind);
  using K = LayerKind;
  EXPECT_EQ(kinds, (std::vector<K>{K::dense, K::reshape, K::upsample, K::deconv, K::batchnorm,
                                   K::activation, K::upsample, K::deconv, K::batchnorm,
                                   K::activation, K::deconv, K::activation}));
  EXPECT_EQ(spec.layers[1].target, (Shape{4, 4, 4}));
  EXPECT_EQ(spec.layers.back().act.kind, ActivationKind::tanh);
}

TEST(Generator, ParameterCountClosedForm) {
  GanConfig c;
  // dense 100 -> 128*8*8, then deconvs 128->32->64->128 and 128->1, batchnorm per stage.
  const std::size_t dense = 100 * 128 * 64 + 128 * 64;
  const std::size_t d0 = 128 * 32 * 9 + 32, d1 = 32 * 64 * 9 + 64, d2 = 64 * 128 * 9 + 128;
  const std::size_t out = 128 * 1 * 9 + 1;
  const std::size_t bn = 2 * (32 + 64 + 128);
  EXPECT_EQ(parameter_count(build_generator(c)), dense + d0 + d1 + d2 + out + bn);
}

TEST(Generator, DeterministicForSeedAndNoise) {
  auto make = [] {
    GanTrainer t(tiny_gan());
    Rng nz(5);
    return t.generate(uniform_noise(nz, 3, 8));
  };
  EXPECT_TRUE(bitwise_equal(make(), make()));
}

TEST(Discriminator, ShapesAndCount) {
  GanConfig c;
  const auto spec = build_discriminator(c);
  const auto shapes = infer_shapes(spec);
  std::size_t flatten = 0;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    if (spec.layers[i].kind == LayerKind::reshape) flatten = i;
  }
  EXPECT_EQ(shapes[flatten - 1], (Shape{256, 4, 4}));
  EXPECT_EQ(output_shape(spec), (Shape{1}));
  std::size_t expect = 0, cin = 1;
  for (std::size_t f : {32u, 64u, 128u, 256u}) {
    expect += f * cin * 9 + f;
    cin = f;
  }
  expect += 256 * 16 + 1;
  EXPECT_EQ(parameter_count(spec), expect);
}

TEST(Discriminator, OutputInOpenUnitIntervalAndInferDeterministic) {
  GanTrainer t(tiny_gan());
  Rng r(3);
  Tensor<float> x(Shape{4, 1, 16, 16});
  for (auto& v : x.values()) v = float(r.uniform(-1, 1));
  const auto a = t.score(x);
  for (float v : a.data()) {
    EXPECT_GT(v, 0.0f);
    EXPECT_LT(v, 1.0f);
  }
  EXPECT_TRUE(bitwise_equal(a, t.score(x)));
}

TEST(GanConfig, ValidationErrors) {
  auto c = tiny_gan();
  c.image_height = 20;
  EXPECT_THROW(build_generator(c), ConfigError);
  c = tiny_gan();
  c.discriminator_filters = {2, 3, 3, 5};
  EXPECT_THROW(build_discriminator(c), ConfigError);
  c = tiny_gan();
  c.discriminator_filters = {2, 3, 4};
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_gan();
  c.dropout_rate = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(GanConfig, KeyValueRoundTrip) {
  auto c = tiny_gan();
  c.rng_seed = 123456789012345ULL;
  c.generator_optimizer = {3e-4, 0.25, 0.99, 1e-7};
  const auto back = gan_config_from(to_key_values(c));
  EXPECT_EQ(to_key_values(back), to_key_values(c));
  EXPECT_EQ(back.generator_filters, c.generator_filters);
  EXPECT_EQ(back.generator_optimizer.beta1, 0.25);
}

TEST(Dae, DefaultShapes) {
  DaeConfig c;
  const auto spec = build_dae(c);
  EXPECT_EQ(output_shape(spec), (Shape{1, 64, 64}));
  const auto shapes = infer_shapes(spec);
  std::size_t skips = 0;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    if (l.kind != LayerKind::skip_add) continue;
    if (l.skip_source == skip_input) continue;
    ++skips;
    EXPECT_EQ(shapes[l.skip_source], shapes[i - 1]) << l.name;
  }
  EXPECT_EQ(skips, 2u);
  // Final layer is linear: nothing after the last deconv except the residual add.
  EXPECT_EQ(spec.layers.back().kind, LayerKind::skip_add);
  EXPECT_EQ(spec.layers.back().skip_source, skip_input);
  EXPECT_EQ(spec.layers[spec.layers.size() - 2].kind, LayerKind::deconv);
}

TEST(Dae, WithoutResidualEndsInDeconv) {
  DaeConfig c;
  c.residual = false;
  const auto spec = build_dae(c);
  EXPECT_EQ(spec.layers.back().kind, LayerKind::deconv);
  EXPECT_EQ(output_shape(spec), (Shape{1, 64, 64}));
}

TEST(Dae, ParameterCountClosedForm) {
  DaeConfig c;
  // enc 1->32->64->128, dec 128->64->32->1.
  const std::size_t enc = (32 * 1 * 9 + 32) + (64 * 32 * 9 + 64) + (128 * 64 * 9 + 128);
  const std::size_t dec = (128 * 64 * 9 + 64) + (64 * 32 * 9 + 32) + (32 * 1 * 9 + 1);
  EXPECT_EQ(parameter_count(build_dae(c)), enc + dec);
}

TEST(Dae, ConfigErrors) {
  auto c = tiny_dae();
  c.skip_sources = {0};
  EXPECT_THROW(build_dae(c), ConfigError);
  c.skip_sources = {1, 1};
  EXPECT_THROW(build_dae(c), ConfigError);
  c.skip_sources = {0, 2};  // the bottleneck has no decoder partner
  EXPECT_THROW(build_dae(c), ConfigError);
  c = tiny_dae();
  c.encoder_filters = {4, 3, 5};
  EXPECT_THROW(build_dae(c), ConfigError);
  c = tiny_dae(12);
  EXPECT_THROW(build_dae(c), ConfigError);
  c = tiny_dae();
  c.final_lr_fraction = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Dae, CosineScheduleEndpoints) {
  DaeConfig c;
  c.epochs = 11;
  c.optimizer.learning_rate = 1e-3;
  EXPECT_EQ(c.learning_rate_at(0), 1e-3);
  EXPECT_EQ(c.learning_rate_at(10), 1e-3);
  c.final_lr_fraction = 0.1;
  EXPECT_DOUBLE_EQ(c.learning_rate_at(0), 1e-3);
  EXPECT_NEAR(c.learning_rate_at(5), 0.55e-3, 1e-15);
  EXPECT_NEAR(c.learning_rate_at(10), 1e-4, 1e-15);
  for (std::size_t e = 1; e < 11; ++e) EXPECT_LT(c.learning_rate_at(e), c.learning_rate_at(e - 1));
}

TEST(Dae, KeyValueRoundTrip) {
  auto c = tiny_dae();
  c.residual = false;
  c.final_lr_fraction = 0.05;
  const auto back = dae_config_from(to_key_values(c));
  EXPECT_EQ(to_key_values(back), to_key_values(c));
  EXPECT_FALSE(back.residual);
}

// --- finite-difference agreement of complete networks ---------------------------

TEST(NetworkGradCheck, Generator) {
  auto c = tiny_gan(8);
  c.generator_filters = {3, 2};
  c.projection_filters = 3;
  c.noise_dim = 4;
  c.discriminator_filters = {1, 2, 3, 4};
  c.image_height = c.image_width = 16;
  const auto spec = build_generator(c);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    auto st = random_state(spec, rng);
    auto z = randn({2, 4}, rng);
    const auto r = network_grad_check(spec, st, z, Mode::train, 0, {"deconv0.bias", "deconv1.bias"});
    expect_agreement(r, "seed " + std::to_string(seed));
  }
}

TEST(NetworkGradCheck, Discriminator) {
  auto c = tiny_gan(16);
  const auto spec = build_discriminator(c);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(100 + seed);
    auto st = random_state(spec, rng);
    auto x = randn({2, 1, 16, 16}, rng);
    // Train mode: dropout active with a fixed mask.
    const auto r = network_grad_check(spec, st, x, Mode::train, seed);
    expect_agreement(r, "seed " + std::to_string(seed));
  }
}

TEST(NetworkGradCheck, DenoisingAutoencoder) {
  for (bool residual : {true, false}) {
    auto c = tiny_dae(8);
    c.residual = residual;
    const auto spec = build_dae(c);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng rng(200 + seed);
      auto st = random_state(spec, rng);
      auto x = randn({2, 1, 8, 8}, rng);
      const auto r = network_grad_check(spec, st, x, Mode::train, 0);
      expect_agreement(r, "residual " + std::to_string(residual) + " seed " + std::to_string(seed));
    }
  }
}

TEST(NetworkGradCheck, SkipCarriesEncoderFeaturesPastZeroedDecoder) {
  auto c = tiny_dae(8);
  c.residual = false;
  const auto spec = build_dae(c);
  Rng rng(7);
  auto st = random_state(spec, rng);
  // Zero the weights of every decoder stage except the last so only the
  // enc0 -> dec1 skip can carry encoder features to the output.
  for (auto& [name, t] : st.params) {
    if (name == "dec0.weight" || name == "dec1.weight") t.fill(0.0);
  }
  Tensor<double> x(Shape{1, 1, 8, 8});
  for (auto& v : x.values()) v = rng.uniform(0.2, 1.0);
  Graph<double> g;
  auto res = forward(g, spec, st, g.constant(x), {Mode::train, 0, true, {}});
  g.backward(sum(g, res.output));
  const auto grads = collect_gradients(g, res);
  double enc0 = 0, enc2 = 0;
  for (double v : grads.at("enc0.weight").data()) enc0 += std::abs(v);
  for (double v : grads.at("enc2.weight").data()) enc2 += std::abs(v);
  EXPECT_GT(enc0, 1e-6);
  EXPECT_EQ(enc2, 0.0);
  expect_agreement(network_grad_check(spec, st, x, Mode::train, 0), "zeroed decoder");
}

// --- training -------------------------------------------------------------------

TEST(GanTraining, ZeroEpochsReturnsInitialCheckpoint) {
  auto c = tiny_gan();
  c.epochs = 0;
  const auto res = train_gan(downsample2(phantom_images(4, 32)), c);
  EXPECT_TRUE(res.log.empty());
  EXPECT_EQ(res.checkpoint.meta.at("epoch"), "0");
  expect_same_checkpoint(res.checkpoint, GanTrainer(c).checkpoint());
}

TEST(GanTraining, TinySmokeRunHasFiniteLosses) {
  auto c = tiny_gan();
  c.epochs = 30;
  const auto images = downsample2(phantom_images(8, 32));
  const auto res = train_gan(images, c);
  ASSERT_EQ(res.log.size(), 30u);
  for (const auto& e : res.log) {
    EXPECT_TRUE(std::isfinite(e.discriminator_loss));
    EXPECT_TRUE(std::isfinite(e.generator_loss));
    EXPECT_GE(e.discriminator_accuracy, 0.0);
    EXPECT_LE(e.discriminator_accuracy, 1.0);
  }
  EXPECT_EQ(res.log.back().epoch, 30u);
}

TEST(GanTraining, RejectsBadDatasets) {
  auto c = tiny_gan();
  GanTrainer t(c);
  EXPECT_THROW(t.train_epoch({}), ValidationError);
  std::vector<Image> wrong{Image(Shape{8, 8})};
  EXPECT_THROW(t.train_epoch(wrong), ShapeError);
  std::vector<Image> unnormalized{Image(Shape{16, 16}, 2.0f)};
  EXPECT_THROW(t.train_epoch(unnormalized), ValidationError);
}

TEST(GanTraining, DeterministicAndResumeIsBitExact) {
  auto c = tiny_gan();
  c.rng_seed = 42;
  const auto images = downsample2(phantom_images(6, 32));
  GanTrainer straight(c);
  for (int e = 0; e < 3; ++e) straight.train_epoch(images);

  GanTrainer first(c);
  for (int e = 0; e < 2; ++e) first.train_epoch(images);
  const auto dir = temp_dir("gan_resume");
  write_checkpoint(dir / "mid.ckpt", first.checkpoint());
  auto resumed = GanTrainer::resume(read_checkpoint(dir / "mid.ckpt"));
  EXPECT_EQ(resumed.epoch(), 2u);
  resumed.train_epoch(images);
  expect_same_checkpoint(straight.checkpoint(), resumed.checkpoint());
  fs::remove_all(dir);
}

TEST(GanTraining, SynthesizeIsDeterministicAndBounded) {
  auto c = tiny_gan();
  c.epochs = 2;
  const auto ck = train_gan(downsample2(phantom_images(4, 32)), c).checkpoint;
  EXPECT_TRUE(synthesize(ck, 0, 1).empty());
  const auto a = synthesize(ck, 20, 1000), b = synthesize(ck, 20, 1000), d = synthesize(ck, 20, 1001);
  ASSERT_EQ(a.size(), 20u);
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_TRUE(bitwise_equal(a[i], b[i]));
    differs |= !(a[i] == d[i]);
    EXPECT_EQ(a[i].shape(), (Shape{16, 16}));
    for (float v : a[i].data()) EXPECT_LE(std::abs(v), 1.0f);
  }
  EXPECT_TRUE(differs);
  // The first 16 outputs do not depend on how many are requested.
  const auto small = synthesize(ck, 3, 1000);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_TRUE(bitwise_equal(small[i], a[i]));
  Checkpoint wrong = ck;
  wrong.kind = "dae";
  EXPECT_THROW(synthesize(wrong, 1, 1), ValidationError);
}

namespace {

std::vector<DenoisePair> noisy_pairs(std::size_t n, std::size_t size, double snr, std::uint64_t seed0) {
  std::vector<DenoisePair> pairs;
  for (std::size_t i = 0; i < n; ++i) {
    const auto s = generate_phantom(seed0 + i, size, size);
    pairs.push_back({snr > 0 ? add_noise(s, {snr, 77 + i}).image : s.image, s.image});
  }
  return pairs;
}

}  // namespace

TEST(DaeTraining, SnrTenSmokeRunImproves) {
  DaeConfig c = tiny_dae(32);
  c.encoder_filters = {8, 16, 32};
  c.epochs = 30;
  c.batch_size = 8;
  c.optimizer.learning_rate = 3e-3;
  const auto pairs = noisy_pairs(32, 32, 10.0, 0);
  const auto res = train_dae(pairs, c);
  ASSERT_EQ(res.log.size(), 30u);
  EXPECT_LT(res.log.back().training_mse, res.log.front().training_mse);
}

TEST(DaeTraining, IdentityPairsLearnIdentity) {
  DaeConfig c = tiny_dae(32);
  c.encoder_filters = {8, 16, 32};
  c.epochs = 20;
  c.batch_size = 8;
  c.optimizer.learning_rate = 1e-3;
  const auto pairs = noisy_pairs(16, 32, 0.0, 0);
  const auto res = train_dae(pairs, c);
  EXPECT_LT(res.log.back().training_mse, res.log.front().training_mse);
  EXPECT_LT(res.log.back().training_mse, 1e-3);
  const Denoiser d(res.checkpoint);
  const auto held = generate_phantom(999, 32, 32).image;
  double mse = 0;
  const auto out = d(held);
  for (std::size_t i = 0; i < out.size(); ++i) mse += (out[i] - held[i]) * (out[i] - held[i]);
  EXPECT_LT(mse / double(out.size()), 1e-3);
}

TEST(DaeTraining, ResumeIsBitExact) {
  DaeConfig c = tiny_dae(16);
  c.epochs = 3;
  c.rng_seed = 9;
  const auto pairs = noisy_pairs(6, 32, 10.0, 0);
  std::vector<DenoisePair> small;
  for (const auto& p : pairs) {
    auto d = downsample2({p.noisy, p.clean});
    small.push_back({d[0], d[1]});
  }
  DaeTrainer straight(c);
  for (int e = 0; e < 3; ++e) straight.train_epoch(small);
  DaeTrainer first(c);
  first.train_epoch(small);
  const auto dir = temp_dir("dae_resume");
  write_checkpoint(dir / "mid.ckpt", first.checkpoint());
  auto resumed = DaeTrainer::resume(read_checkpoint(dir / "mid.ckpt"));
  resumed.train_epoch(small);
  resumed.train_epoch(small);
  expect_same_checkpoint(straight.checkpoint(), resumed.checkpoint());
  fs::remove_all(dir);
}

TEST(DaeTraining, DistinctLevelsGiveDistinctCheckpoints) {
  std::vector<Checkpoint> cks;
  for (double snr : {1.0, 10.0, 100.0}) {
    DaeConfig c = tiny_dae(32);
    c.epochs = 1;
    c.rng_seed = derive_seed(0, std::uint64_t(snr));
    cks.push_back(train_dae(noisy_pairs(4, 32, snr, 0), c).checkpoint);
  }
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = i + 1; j < 3; ++j) {
      EXPECT_FALSE(cks[i].tensors.at("dae/param/enc0.weight") == cks[j].tensors.at("dae/param/enc0.weight"));
    }
}

TEST(Denoiser, ShapeRangeAndDeterminism) {
  DaeConfig c = tiny_dae(32);
  c.epochs = 1;
  const auto ck = train_dae(noisy_pairs(4, 32, 10.0, 0), c).checkpoint;
  const Denoiser d(ck);
  const auto noisy = add_noise(generate_phantom(5, 32, 32), {10.0, 3}).image;
  const auto a = d(noisy);
  EXPECT_EQ(a.shape(), noisy.shape());
  EXPECT_TRUE(bitwise_equal(a, d(noisy)));
  EXPECT_TRUE(bitwise_equal(a, denoise(ck, noisy)));
  for (float v : a.data()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  EXPECT_THROW(d(Image(Shape{16, 16})), ShapeError);
  Checkpoint gan = ck;
  gan.kind = "gan";
  EXPECT_THROW(Denoiser{gan}, ValidationError);
}
