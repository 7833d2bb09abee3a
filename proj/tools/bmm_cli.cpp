// bmm_cli: dataset generation, GAN and autoencoder training, synthesis,
// denoising, SUSAN calibration, evaluation and the rating server.
//
// Every command writes run.json (config snapshot, seeds, input fingerprints,
// outputs) next to its artifacts. Wall-clock durations go to timing.json so
// that run.json stays byte-identical across reruns.

#include <bit>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "bmm/bmm.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace bmm;

namespace {

// ---------------------------------------------------------------------------
// Shared plumbing

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

/// Effective option values of a subcommand, whether from flags, config or defaults.
json option_snapshot(const CLI::App& cmd) {
  json out = json::object();
  for (const CLI::Option* o : cmd.get_options()) {
    if (o->get_lnames().empty() || o->get_lnames()[0] == "help") continue;
    const std::string name = o->get_lnames()[0];
    if (o->get_type_size() == 0) {
      out[name] = o->count() > 0;
    } else {
      out[name] = o->count() > 0 ? o->as<std::string>() : o->get_default_str();
    }
  }
  return out;
}

std::string file_fingerprint(const fs::path& path) {
  return detail::hex64(fnv1a64(detail::read_file(path)));
}

void write_json(const fs::path& path, const json& value) {
  detail::write_file(path, value.dump(2) + "\n");
}

void write_run_files(const fs::path& dir, const CLI::App& cmd, json extra, const Stopwatch& clock,
                     json timing = json::object()) {
  json run = json::object();
  run["command"] = cmd.get_name();
  run["format"] = 1;
  run["options"] = option_snapshot(cmd);
  for (auto& [k, v] : extra.items()) run[k] = v;
  write_json(dir / "run.json", run);
  timing["total_seconds"] = clock.seconds();
  write_json(dir / "timing.json", timing);
}

std::string snr_tag(double snr) { return format_double(snr); }

std::uint64_t snr_bits(double snr) { return std::bit_cast<std::uint64_t>(snr); }

/// Noise seed for one (purpose, level, sample, copy) cell.
std::uint64_t noise_seed(std::uint64_t base, std::uint64_t purpose, double snr, std::size_t sample,
                         std::size_t copy = 0) {
  return derive_seed(derive_seed(derive_seed(derive_seed(base, purpose), snr_bits(snr)), sample), copy);
}

enum NoisePurpose : std::uint64_t { noise_train = 1, noise_calibrate = 2, noise_evaluate = 3 };

std::vector<double> parse_levels(const std::string& s, const std::string& what) {
  auto v = parse_doubles(s, what);
  if (v.empty()) throw ConfigError(what + " must list at least one value");
  for (double x : v) {
    if (!(x > 0.0)) throw ConfigError(what + " values must be > 0");
  }
  return v;
}

/// Held-out samples are the last `holdout` of the dataset; the rest train.
struct Split {
  std::vector<std::size_t> train, holdout;
};

Split split_dataset(std::size_t n, std::size_t holdout, std::size_t train_limit) {
  if (holdout >= n) {
    throw ConfigError("holdout " + std::to_string(holdout) + " leaves no training data in a dataset of " +
                      std::to_string(n));
  }
  Split s;
  for (std::size_t i = 0; i + holdout < n; ++i) {
    if (train_limit == 0 || s.train.size() < train_limit) s.train.push_back(i);
  }
  for (std::size_t i = n - holdout; i < n; ++i) s.holdout.push_back(i);
  return s;
}

std::vector<ImageSample> load_dataset(const fs::path& dir) {
  auto samples = read_dataset(dir);
  if (samples.empty()) throw PrerequisiteError("dataset " + dir.string() + " is empty");
  return samples;
}

Checkpoint load_checkpoint(const fs::path& path, const std::string& kind) {
  if (!fs::exists(path)) throw PrerequisiteError("checkpoint " + path.string() + " not found");
  auto ck = read_checkpoint(path);
  if (ck.kind != kind) {
    throw PrerequisiteError("checkpoint " + path.string() + " holds a '" + ck.kind + "' model, expected '" +
                            kind + "'");
  }
  return ck;
}

Image load_any_image(const fs::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".pgm") return normalize(read_pgm(path), IntensityRange::unit).image;
  return read_image(path);
}

std::vector<fs::path> list_images(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw PrerequisiteError("image directory " + dir.string() + " not found");
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".img") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  if (out.empty()) throw PrerequisiteError("no .img files in " + dir.string());
  return out;
}

/// Same-size images tiled into a grid, row-major.
Image tile(std::span<const Image> images, std::size_t cols) {
  const std::size_t h = image_height(images[0]), w = image_width(images[0]);
  const std::size_t rows = (images.size() + cols - 1) / cols;
  Image grid(Shape{rows * h, cols * w});
  for (std::size_t k = 0; k < images.size(); ++k) {
    const std::size_t r0 = (k / cols) * h, c0 = (k % cols) * w;
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) grid[(r0 + i) * cols * w + c0 + j] = images[k][i * w + j];
    }
  }
  return grid;
}

std::string csv_cell(double v) { return detail::cell(v); }

// ---------------------------------------------------------------------------
// gen-data

struct GenDataOptions {
  fs::path out;
  std::size_t n = 528;
  std::size_t height = 64, width = 64;
  std::uint64_t seed = 0;
  std::size_t previews = 0;
};

void cmd_gen_data(const GenDataOptions& o, const CLI::App& cmd) {
  Stopwatch clock;
  if (o.n == 0) throw ConfigError("n must be >= 1");
  std::vector<ImageSample> samples;
  samples.reserve(o.n);
  for (std::size_t i = 0; i < o.n; ++i) {
    auto s = generate_phantom(derive_seed(o.seed, i), o.height, o.width);
    std::ostringstream id;
    id << "phantom_" << std::setw(4) << std::setfill('0') << i;
    s.meta.id = id.str();
    samples.push_back(std::move(s));
  }
  write_dataset(o.out, samples);
  if (o.previews) {
    std::vector<Image> first;
    for (std::size_t i = 0; i < std::min(o.previews, samples.size()); ++i) first.push_back(samples[i].image);
    export_png8(tile(first, 8), o.out / "preview.png");
  }
  write_run_files(o.out, cmd,
                  {{"samples", o.n}, {"phantom_seeds", "derive_seed(seed, index)"},
                   {"manifest", file_fingerprint(o.out / "manifest.tsv")}},
                  clock);
  std::cout << "wrote " << o.n << " phantoms to " << o.out.string() << "\n";
}

// ---------------------------------------------------------------------------
// train-gan

struct TrainGanOptions {
  fs::path data, out, resume;
  std::size_t limit = 0;
  std::size_t epochs = 1500, batch = 32, noise_dim = 100, projection = 128;
  std::string gen_filters = "32,64,128", disc_filters = "32,64,128,256";
  double leaky = 0.2, dropout = 0.3, lr_g = 1e-4, lr_d = 1e-4, beta1 = 0.5, init_std = 0.02;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0, sample_every = 0;
};

void cmd_train_gan(const TrainGanOptions& o, const CLI::App& cmd) {
  Stopwatch clock;
  const auto samples = load_dataset(o.data);
  std::vector<Image> images;
  for (std::size_t i = 0; i < samples.size() && (o.limit == 0 || i < o.limit); ++i) {
    images.push_back(to_symmetric(samples[i].image));
  }
  GanConfig c;
  c.noise_dim = o.noise_dim;
  c.image_height = image_height(images[0]);
  c.image_width = image_width(images[0]);
  c.generator_filters = parse_ints(o.gen_filters, "generator-filters");
  c.projection_filters = o.projection;
  c.discriminator_filters = parse_ints(o.disc_filters, "discriminator-filters");
  c.leaky_alpha = o.leaky;
  c.dropout_rate = o.dropout;
  c.epochs = o.epochs;
  c.batch_size = o.batch;
  c.generator_optimizer = {o.lr_g, o.beta1, 0.999, 1e-8};
  c.discriminator_optimizer = {o.lr_d, o.beta1, 0.999, 1e-8};
  c.init_std = o.init_std;
  c.rng_seed = o.seed;
  c.validate();

  std::optional<GanTrainer> trainer;
  json extra = json::object();
  if (!o.resume.empty()) {
    trainer.emplace(GanTrainer::resume(load_checkpoint(o.resume, "gan")));
    trainer->set_epochs(o.epochs);
    extra["resumed_from"] = {{"path", o.resume.string()}, {"epoch", trainer->epoch()},
                             {"fingerprint", file_fingerprint(o.resume)}};
  } else {
    trainer.emplace(c);
  }
  fs::create_directories(o.out);
  std::ofstream log(o.out / "log.csv", trainer->epoch() ? std::ios::app : std::ios::trunc);
  if (!trainer->epoch()) log << "epoch,discriminator_loss,generator_loss,discriminator_accuracy\n";
  Rng grid_rng(derive_seed(o.seed, 0x67726964ULL));
  const auto grid_noise = uniform_noise(grid_rng, 16, c.noise_dim);
  while (trainer->epoch() < o.epochs) {
    const auto e = trainer->train_epoch(images);
    log << e.epoch << ',' << csv_cell(e.discriminator_loss) << ',' << csv_cell(e.generator_loss) << ','
        << csv_cell(e.discriminator_accuracy) << '\n';
    log.flush();
    if (o.checkpoint_every && e.epoch % o.checkpoint_every == 0) {
      std::ostringstream name;
      name << "epoch_" << std::setw(5) << std::setfill('0') << e.epoch << ".ckpt";
      write_checkpoint(o.out / "checkpoints" / name.str(), trainer->checkpoint());
    }
    if (o.sample_every && e.epoch % o.sample_every == 0) {
      std::vector<Image> grid;
      for (auto& im : unstack_images(trainer->generate(grid_noise))) grid.push_back(to_unit(im));
      std::ostringstream name;
      name << "epoch_" << std::setw(5) << std::setfill('0') << e.epoch << ".png";
      export_png8(tile(grid, 4), o.out / "samples" / name.str());
    }
  }
  const auto ck = trainer->checkpoint();
  write_checkpoint(o.out / "gan.ckpt", ck);
  extra["training_images"] = images.size();
  extra["dataset_manifest"] = file_fingerprint(o.data / "manifest.tsv");
  extra["config"] = to_key_values(trainer->config());
  extra["checkpoint"] = file_fingerprint(o.out / "gan.ckpt");
  write_run_files(o.out, cmd, extra, clock);
  std::cout << "trained GAN to epoch " << trainer->epoch() << ", checkpoint " << (o.out / "gan.ckpt").string()
            << "\n";
}

// ---------------------------------------------------------------------------
// synth

struct SynthOptions {
  fs::path checkpoint, out;
  std::size_t n = 100;
  std::uint64_t seed = 1000;
  bool png = false;
};

void cmd_synth(const SynthOptions& o, const CLI::App& cmd) {
  Stopwatch clock;
  const auto ck = load_checkpoint(o.checkpoint, "gan");
  const auto images = synthesize(ck, o.n, o.seed);
  fs::create_directories(o.out);
  for (std::size_t i = 0; i < images.size(); ++i) {
    std::ostringstream name;
    name << "synth_" << std::setw(4) << std::setfill('0') << i;
    const Image unit = to_unit(images[i]);
    write_image(o.out / (name.str() + ".img"), unit);
    if (o.png) export_png8(unit, o.out / (name.str() + ".png"));
  }
  write_run_files(o.out, cmd,
                  {{"images", images.size()}, {"noise_seed", o.seed},
                   {"checkpoint", file_fingerprint(o.checkpoint)}},
                  clock);
  std::cout << "wrote " << images.size() << " synthesized images to " << o.out.string() << "\n";
}

// ---------------------------------------------------------------------------
// train-dae

struct TrainDaeOptions {
  fs::path data, out;
  std::string snr = "1,10,100";
  std::size_t holdout = 20, train_count = 0, noise_copies = 2;
  std::uint64_t noise_seed = 0, seed = 0;
  std::size_t epochs = 60, batch = 16;
  std::string filters = "32,64,128", skips = "0,1";
  bool residual = true;
  double lr = 1e-3, beta1 = 0.9, final_lr_fraction = 1.0, init_std = 0.02;
};

void cmd_train_dae(const TrainDaeOptions& o, const CLI::App& cmd) {
  Stopwatch clock;
  const auto samples = load_dataset(o.data);
  const auto split = split_dataset(samples.size(), o.holdout, o.train_count);
  if (o.noise_copies == 0) throw ConfigError("noise-copies must be >= 1");
  const auto levels = parse_levels(o.snr, "snr");
  fs::create_directories(o.out);
  json extra = json::object(), timing = json::object();
  extra["training_samples"] = split.train.size();
  extra["holdout_samples"] = split.holdout.size();
  extra["dataset_manifest"] = file_fingerprint(o.data / "manifest.tsv");
  for (double snr : levels) {
    Stopwatch level_clock;
    DaeConfig c;
    c.image_height = image_height(samples[0].image);
    c.image_width = image_width(samples[0].image);
    c.encoder_filters = parse_ints(o.filters, "encoder-filters");
    c.skip_sources = parse_ints(o.skips, "skip-sources");
    c.residual = o.residual;
    c.epochs = o.epochs;
    c.batch_size = o.batch;
    c.optimizer = {o.lr, o.beta1, 0.999, 1e-8};
    c.final_lr_fraction = o.final_lr_fraction;
    c.init_std = o.init_std;
    c.rng_seed = derive_seed(o.seed, snr_bits(snr));
    c.validate();
    std::vector<DenoisePair> pairs;
    for (std::size_t i : split.train) {
      for (std::size_t k = 0; k < o.noise_copies; ++k) {
        pairs.push_back({add_noise(samples[i], {snr, noise_seed(o.noise_seed, noise_train, snr, i, k)}).image,
                         samples[i].image});
      }
    }
    const std::string tag = snr_tag(snr);
    std::ofstream log(o.out / ("log_snr" + tag + ".csv"), std::ios::trunc);
    log << "epoch,training_mse\n";
    DaeCallbacks cb;
    cb.on_epoch = [&](const DaeEpochLog& e, const DaeTrainer&) {
      log << e.epoch << ',' << csv_cell(e.training_mse) << '\n';
      log.flush();
    };
    const auto result = train_dae(pairs, c, cb);
    const fs::path ck_path = o.out / ("dae_snr" + tag + ".ckpt");
    write_checkpoint(ck_path, result.checkpoint);
    extra["levels"][tag] = {{"snr", snr},
                            {"rng_seed", c.rng_seed},
                            {"pairs", pairs.size()},
                            {"final_mse", result.log.empty() ? 0.0 : result.log.back().training_mse},
                            {"checkpoint", file_fingerprint(ck_path)}};
    timing["snr" + tag + "_seconds"] = level_clock.seconds();
    std::cout << "SNR " << tag << ": trained " << c.epochs << " epochs on " << pairs.size() << " pairs, mse "
              << (result.log.empty() ? 0.0 : result.log.back().training_mse) << "\n";
  }
  write_run_files(o.out, cmd, extra, clock, timing);
}

// ---------------------------------------------------------------------------
// denoise

struct DenoiseOptions {
  fs::path checkpoint, input, out;
  bool png = false;
  bool pad = false;
};

void cmd_denoise(const DenoiseOptions& o, const CLI::App& cmd) {
  Stopwatch clock;
  const Denoiser denoiser(load_checkpoint(o.checkpoint, "dae"));
  const auto& c = denoiser.config();
  std::vector<std::pair<fs::path, fs::path>> jobs;
  if (fs::is_directory(o.input)) {
    for (const auto& p : list_images(o.input)) jobs.emplace_back(p, o.out / p.filename());
  } else {
    if (!fs::exists(o.input)) throw PrerequisiteError("input " + o.input.string() + " not found");
    jobs.emplace_back(o.input, o.out);
  }
  json outputs = json::array();
  for (const auto& [in, out] : jobs) {
    const Image noisy = load_any_image(in);
    Image result;
    if (noisy.shape() == Shape{c.image_height, c.image_width}) {
      result = denoiser(noisy);
    } else if (o.pad) {
      PadOffsets offsets;
      const Image padded = pad_to_multiple(noisy, std::size_t{1} << c.encoder_filters.size(), &offsets);
      if (padded.shape() != Shape{c.image_height, c.image_width}) {
        throw PrerequisiteError("image " + in.string() + " pads to " + shape_string(padded.shape()) +
                                ", checkpoint expects [" + std::to_string(c.image_height) + "," +
                                std::to_string(c.image_width) + "]");
      }
      result = crop(denoiser(padded), offsets);
    } else {
      throw PrerequisiteError("image " + in.string() + " is " + shape_string(noisy.shape()) +
                              " but the checkpoint was trained on [" + std::to_string(c.image_height) + "," +
                              std::to_string(c.image_width) + "]");
    }
    fs::path target = out;
    if (target.extension() != ".img") target.replace_extension(".img");
    write_image(target, result);
    if (o.png) export_png8(result, fs::path(target).replace_extension(".png"));
    outputs.push_back(target.filename().string());
  }
  const fs::path meta_dir = fs::is_directory(o.input) ? o.out : o.out.parent_path();
  write_run_files(meta_dir.empty() ? fs::path(".") : meta_dir, cmd,
                  {{"checkpoint", file_fingerprint(o.checkpoint)}, {"outputs", outputs}}, clock);
  std::cout << "denoised " << jobs.size() << " image(s)\n";
}

// ---------------------------------------------------------------------------
// susan-calibrate

struct CalibrateOptions {
  fs::path data, out;
  double snr = 10.0;
  std::size_t count = 10, holdout = 20;
  std::uint64_t noise_seed = 0;
  std::string t_grid = "0.02,0.05,0.1,0.2,0.4", sigma_grid = "0.75,1,1.5,2,3";
  unsigned threads = 1;
};

void cmd_susan_calibrate(const CalibrateOptions& o, const CLI::App& cmd) {
  Stopwatch clock;
  const auto samples = load_dataset(o.data);
  const auto split = split_dataset(samples.size(), o.holdout, o.count);
  std::vector<Image> noisy, clean;
  for (std::size_t i : split.train) {
    clean.push_back(samples[i].image);
    noisy.push_back(add_noise(samples[i], {o.snr, noise_seed(o.noise_seed, noise_calibrate, o.snr, i)}).image);
  }
  const auto t_grid = parse_levels(o.t_grid, "t-grid");
  const auto s_grid = parse_levels(o.sigma_grid, "sigma-grid");
  const auto result = grid_search_susan(noisy, clean, t_grid, s_grid, o.threads);
  fs::create_directories(o.out);
  write_susan_table_csv(o.out / "susan_grid.csv", result);
  json params = to_key_values(result.best);
  params["calibration_snr"] = format_double(o.snr);
  params["best_mean_psnr"] = csv_cell(result.table[result.best_index].mean_psnr);
  write_json(o.out / "susan.json", params);
  write_run_files(o.out, cmd,
                  {{"calibration_images", noisy.size()}, {"selected", to_key_values(result.best)},
                   {"dataset_manifest", file_fingerprint(o.data / "manifest.tsv")}},
                  clock);
  std::cout << "selected t=" << result.best.brightness_threshold << " sigma=" << result.best.spatial_sigma
            << " (mean PSNR " << result.table[result.best_index].mean_psnr << " dB over " << noisy.size()
            << " images)\n";
}

SusanParams load_susan(const fs::path& path) {
  if (!fs::exists(path)) throw PrerequisiteError("SUSAN parameters " + path.string() + " not found (run susan-calibrate)");
  const json j = json::parse(detail::read_file(path));
  KeyValues kv;
  for (const char* k : {"susan.t", "susan.sigma", "susan.radius"}) {
    if (!j.contains(k)) throw FormatError(path.string() + " lacks " + k);
    kv[k] = j.at(k).get<std::string>();
  }
  return susan_params_from(kv);
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluateOptions {
  fs::path data, dae_dir, susan, synth_dir, out;
  std::string snr = "1,10,100";
  std::size_t holdout = 20, train_count = 0;
  std::uint64_t noise_seed = 0;
};

void cmd_evaluate(const EvaluateOptions& o, const CLI::App& cmd) {
  Stopwatch clock;
  const auto samples = load_dataset(o.data);
  const auto split = split_dataset(samples.size(), o.holdout, o.train_count);
  if (split.holdout.empty()) throw ConfigError("evaluate needs holdout >= 1");
  const auto levels = parse_levels(o.snr, "snr");
  const SusanParams susan = load_susan(o.susan);
  fs::create_directories(o.out);
  json extra = json::object();
  extra["dataset_manifest"] = file_fingerprint(o.data / "manifest.tsv");
  extra["susan_source"] = {{"path", o.susan.string()}, {"fingerprint", file_fingerprint(o.susan)}};

  DenoiseReport report;
  for (double snr : levels) {
    const std::string tag = snr_tag(snr);
    const fs::path ck_path = o.dae_dir / ("dae_snr" + tag + ".ckpt");
    const Denoiser denoiser(load_checkpoint(ck_path, "dae"));
    DenoiseLevel level;
    level.snr = snr;
    for (std::size_t i : split.holdout) {
      const auto& clean = samples[i];
      const Image noisy = add_noise(clean, {snr, noise_seed(o.noise_seed, noise_evaluate, snr, i)}).image;
      level.ids.push_back(clean.meta.id);
      level.noisy.push_back(psnr(clean.image, noisy));
      level.susan.push_back(psnr(clean.image, susan_denoise(noisy, susan)));
      level.proposed.push_back(psnr(clean.image, denoiser(noisy)));
    }
    finish_level(level);
    extra["susan_applied"][tag] = to_key_values(susan);
    extra["levels"][tag] = {{"checkpoint", file_fingerprint(ck_path)},
                            {"mean_noisy", csv_cell(DenoiseLevel::mean_of(level.noisy))},
                            {"mean_susan", csv_cell(DenoiseLevel::mean_of(level.susan))},
                            {"mean_proposed", csv_cell(DenoiseLevel::mean_of(level.proposed))},
                            {"p_two_sided", csv_cell(level.proposed_vs_susan.p_two_sided)}};
    std::cout << "SNR " << tag << ": noisy " << DenoiseLevel::mean_of(level.noisy) << " dB, SUSAN "
              << DenoiseLevel::mean_of(level.susan) << " dB, proposed " << DenoiseLevel::mean_of(level.proposed)
              << " dB, p=" << level.proposed_vs_susan.p_two_sided << "\n";
    report.levels.push_back(std::move(level));
  }
  write_psnr_table_csv(o.out / "psnr_table.csv", report);
  write_denoise_summary_csv(o.out / "denoise_summary.csv", report);

  if (!o.synth_dir.empty()) {
    std::vector<Image> synth, train;
    std::string synth_bytes;
    for (const auto& p : list_images(o.synth_dir)) {
      const std::string bytes = detail::read_file(p);
      synth_bytes += p.filename().string() + '\n' + bytes;
      synth.push_back(decode_raw_image(bytes));
    }
    for (std::size_t i : split.train) train.push_back(samples[i].image);
    const auto corr = correlation_matrix(synth, train);
    write_correlation_csv(o.out / "correlation.csv", corr);
    const double top = *std::max_element(corr.nearest_rho.begin(), corr.nearest_rho.end());
    std::size_t above = 0;
    for (double r : corr.nearest_rho) above += r > 0.2;
    extra["correlation"] = {{"synthesized", corr.rows},
                            {"training", corr.cols},
                            {"max_nearest_rho", csv_cell(top)},
                            {"fraction_nearest_above_0.2", csv_cell(double(above) / double(corr.rows))},
                            {"synth_images", detail::hex64(fnv1a64(synth_bytes))}};
    std::cout << "correlation: max nearest rho " << top << ", " << above << "/" << corr.rows
              << " above 0.2\n";
  }
  write_run_files(o.out, cmd, extra, clock);
}

// ---------------------------------------------------------------------------
// rate-serve

struct RateServeOptions {
  fs::path real, synth, store = "ratings.ndjson", ui;
  std::size_t n_real = 100, n_synth = 100;
  std::uint64_t seed = 0;
  std::string host = "127.0.0.1";
  int port = 8080;
};

void cmd_rate_serve(const RateServeOptions& o) {
  ImagePool real, synth;
  for (const auto& s : load_dataset(o.real)) real.add(s.meta.id, s.image);
  for (const auto& p : list_images(o.synth)) synth.add(p.stem().string(), read_image(p));
  RatingService service(std::move(real), std::move(synth), {o.n_real, o.n_synth, o.seed}, o.store);
  httplib::Server server;
  install_rating_routes(server, service, o.ui);
  if (!server.bind_to_port(o.host, o.port)) {
    throw PrerequisiteError("cannot bind " + o.host + ":" + std::to_string(o.port));
  }
  std::cout << "rating server on http://" << o.host << ":" << o.port << " (store " << o.store.string() << ")"
            << std::endl;
  server.listen_after_bind();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Brain MRI synthesis and denoising toolkit"};
  app.set_config("--config", "", "INI config file; sections are named after subcommands");
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);

  GenDataOptions gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a phantom dataset");
  gen_cmd->add_option("--out", gen.out, "Output dataset directory")->required();
  gen_cmd->add_option("--n", gen.n, "Number of phantoms");
  gen_cmd->add_option("--height", gen.height, "Image height");
  gen_cmd->add_option("--width", gen.width, "Image width");
  gen_cmd->add_option("--seed", gen.seed, "Base phantom seed");
  gen_cmd->add_option("--previews", gen.previews, "Tile the first N phantoms into preview.png");

  TrainGanOptions tg;
  auto* tg_cmd = app.add_subcommand("train-gan", "Train the generator/discriminator pair");
  tg_cmd->add_option("--data", tg.data, "Dataset directory")->required();
  tg_cmd->add_option("--out", tg.out, "Output directory")->required();
  tg_cmd->add_option("--resume", tg.resume, "Continue from a GAN checkpoint");
  tg_cmd->add_option("--limit", tg.limit, "Use only the first N samples (0 = all)");
  tg_cmd->add_option("--epochs", tg.epochs, "Total epochs");
  tg_cmd->add_option("--batch-size", tg.batch, "Minibatch size");
  tg_cmd->add_option("--noise-dim", tg.noise_dim, "Generator noise length");
  tg_cmd->add_option("--projection-filters", tg.projection, "Channels after the dense projection");
  tg_cmd->add_option("--generator-filters", tg.gen_filters, "Deconvolution ladder, comma separated");
  tg_cmd->add_option("--discriminator-filters", tg.disc_filters, "Four increasing convolution widths");
  tg_cmd->add_option("--leaky-alpha", tg.leaky, "LeakyReLU slope");
  tg_cmd->add_option("--dropout", tg.dropout, "Discriminator dropout rate");
  tg_cmd->add_option("--lr-generator", tg.lr_g, "Generator learning rate");
  tg_cmd->add_option("--lr-discriminator", tg.lr_d, "Discriminator learning rate");
  tg_cmd->add_option("--beta1", tg.beta1, "Adam beta1 for both networks");
  tg_cmd->add_option("--init-std", tg.init_std, "Weight init standard deviation");
  tg_cmd->add_option("--seed", tg.seed, "Training seed");
  tg_cmd->add_option("--checkpoint-every", tg.checkpoint_every, "Write a checkpoint every N epochs");
  tg_cmd->add_option("--sample-every", tg.sample_every, "Write a 4x4 sample grid every N epochs");

  SynthOptions sy;
  auto* sy_cmd = app.add_subcommand("synth", "Synthesize images from a GAN checkpoint");
  sy_cmd->add_option("--checkpoint", sy.checkpoint, "GAN checkpoint")->required();
  sy_cmd->add_option("--out", sy.out, "Output directory")->required();
  sy_cmd->add_option("--n", sy.n, "Number of images");
  sy_cmd->add_option("--seed", sy.seed, "Noise seed");
  sy_cmd->add_flag("--png", sy.png, "Also write PNG files");

  TrainDaeOptions td;
  auto* td_cmd = app.add_subcommand("train-dae", "Train one denoising autoencoder per SNR level");
  td_cmd->add_option("--data", td.data, "Dataset directory")->required();
  td_cmd->add_option("--out", td.out, "Output directory")->required();
  td_cmd->add_option("--snr", td.snr, "SNR levels, comma separated");
  td_cmd->add_option("--holdout", td.holdout, "Samples reserved at the end of the dataset");
  td_cmd->add_option("--train-count", td.train_count, "Use at most N training samples (0 = all)");
  td_cmd->add_option("--noise-copies", td.noise_copies, "Noise realizations per training sample");
  td_cmd->add_option("--noise-seed", td.noise_seed, "Base noise seed");
  td_cmd->add_option("--seed", td.seed, "Training seed");
  td_cmd->add_option("--epochs", td.epochs, "Epochs per level");
  td_cmd->add_option("--batch-size", td.batch, "Minibatch size");
  td_cmd->add_option("--encoder-filters", td.filters, "Increasing encoder widths, comma separated");
  td_cmd->add_option("--skip-sources", td.skips, "Two encoder indices feeding skips");
  td_cmd->add_option("--residual", td.residual, "Add the input image to the network output (true/false)");
  td_cmd->add_option("--lr", td.lr, "Learning rate");
  td_cmd->add_option("--beta1", td.beta1, "Adam beta1");
  td_cmd->add_option("--final-lr-fraction", td.final_lr_fraction, "Cosine decay target as a fraction of lr");
  td_cmd->add_option("--init-std", td.init_std, "Weight init standard deviation");

  DenoiseOptions dn;
  auto* dn_cmd = app.add_subcommand("denoise", "Denoise images with a trained autoencoder");
  dn_cmd->add_option("--checkpoint", dn.checkpoint, "Autoencoder checkpoint")->required();
  dn_cmd->add_option("--input", dn.input, "Input image (.img/.pgm) or directory of .img")->required();
  dn_cmd->add_option("--out", dn.out, "Output image or directory")->required();
  dn_cmd->add_flag("--png", dn.png, "Also write PNG files");
  dn_cmd->add_flag("--pad", dn.pad, "Center-pad inputs to the checkpoint geometry and crop back");

  CalibrateOptions sc;
  auto* sc_cmd = app.add_subcommand("susan-calibrate", "Grid-search SUSAN parameters at one SNR");
  sc_cmd->add_option("--data", sc.data, "Dataset directory")->required();
  sc_cmd->add_option("--out", sc.out, "Output directory")->required();
  sc_cmd->add_option("--snr", sc.snr, "Calibration SNR");
  sc_cmd->add_option("--count", sc.count, "Calibration images from the training split");
  sc_cmd->add_option("--holdout", sc.holdout, "Samples reserved at the end of the dataset");
  sc_cmd->add_option("--noise-seed", sc.noise_seed, "Base noise seed");
  sc_cmd->add_option("--t-grid", sc.t_grid, "Brightness thresholds, comma separated");
  sc_cmd->add_option("--sigma-grid", sc.sigma_grid, "Spatial sigmas, comma separated");
  sc_cmd->add_option("--threads", sc.threads, "Worker threads (results do not depend on it)");

  EvaluateOptions ev;
  auto* ev_cmd = app.add_subcommand("evaluate", "PSNR comparison, rank-sum tests and correlation matrix");
  ev_cmd->add_option("--data", ev.data, "Dataset directory")->required();
  ev_cmd->add_option("--dae-dir", ev.dae_dir, "Directory with dae_snr<level>.ckpt files")->required();
  ev_cmd->add_option("--susan", ev.susan, "susan.json from susan-calibrate")->required();
  ev_cmd->add_option("--synth-dir", ev.synth_dir, "Synthesized images for the correlation matrix");
  ev_cmd->add_option("--out", ev.out, "Report directory")->required();
  ev_cmd->add_option("--snr", ev.snr, "SNR levels, comma separated");
  ev_cmd->add_option("--holdout", ev.holdout, "Held-out samples at the end of the dataset");
  ev_cmd->add_option("--train-count", ev.train_count, "Training images for correlation (0 = all)");
  ev_cmd->add_option("--noise-seed", ev.noise_seed, "Base noise seed");

  RateServeOptions rs;
  auto* rs_cmd = app.add_subcommand("rate-serve", "Serve blinded rating sessions over HTTP");
  rs_cmd->add_option("--real", rs.real, "Dataset directory with real images")->required();
  rs_cmd->add_option("--synth", rs.synth, "Directory of synthesized .img files")->required();
  rs_cmd->add_option("--n-real", rs.n_real, "Real images per deck");
  rs_cmd->add_option("--n-synth", rs.n_synth, "Synthesized images per deck");
  rs_cmd->add_option("--seed", rs.seed, "Deck seed");
  rs_cmd->add_option("--host", rs.host, "Bind address");
  rs_cmd->add_option("--port", rs.port, "Port");
  rs_cmd->add_option("--store", rs.store, "Append-only rating log");
  rs_cmd->add_option("--ui", rs.ui, "Static UI bundle directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (gen_cmd->parsed()) cmd_gen_data(gen, *gen_cmd);
    else if (tg_cmd->parsed()) cmd_train_gan(tg, *tg_cmd);
    else if (sy_cmd->parsed()) cmd_synth(sy, *sy_cmd);
    else if (td_cmd->parsed()) cmd_train_dae(td, *td_cmd);
    else if (dn_cmd->parsed()) cmd_denoise(dn, *dn_cmd);
    else if (sc_cmd->parsed()) cmd_susan_calibrate(sc, *sc_cmd);
    else if (ev_cmd->parsed()) cmd_evaluate(ev, *ev_cmd);
    else if (rs_cmd->parsed()) cmd_rate_serve(rs);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const PrerequisiteError& e) {
    std::cerr << "missing prerequisite: " << e.what() << "\n";
    return 3;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
