#pragma once

// Stage-wise training. Stage 1 fits the conditioned denoiser; stage 2 fits
// only the adapter on augmented pairs with every other weight frozen.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>

#include "amad/diffusion/pipeline.hpp"
#include "amad/scene/augment.hpp"
#include "amad/scene/dataset.hpp"

namespace amad {

struct TrainConfig {
  int stage = 1;
  double lr = 1e-5;
  std::size_t batch_size = 0;  // 0: 2 for stage 1, 1 for stage 2
  std::size_t steps = 1000;
  std::uint64_t seed = 0;
  std::size_t resolution = 32;
  std::filesystem::path dataset_dir;
  std::filesystem::path checkpoint_dir = ".";
  std::size_t eval_every = 0;  // checkpoint cadence; 0 = only at the end
  std::filesystem::path stage1_ckpt;
  double weight_decay = 1e-2;
  std::size_t adapter_c_mid = 8;
  bool adapter_grouped = false;
  double pair_prob = 0.5;  // stage 1: share of samples trained with augmented attention on a paired view

  std::size_t effective_batch() const { return batch_size ? batch_size : (stage == 1 ? 2 : 1); }

  /// Applies one key=value setting; unknown keys are ConfigError.
  void set(const std::string& key, const std::string& value) {
    auto num = [&](auto& dst) {
      std::istringstream is(value);
      if (!(is >> dst) || !is.eof()) throw ConfigError("bad value '" + value + "' for " + key);
    };
    if (key == "stage") num(stage);
    else if (key == "lr") num(lr);
    else if (key == "batch_size") num(batch_size);
    else if (key == "steps") num(steps);
    else if (key == "seed") num(seed);
    else if (key == "resolution") num(resolution);
    else if (key == "dataset") dataset_dir = value;
    else if (key == "checkpoint_dir") checkpoint_dir = value;
    else if (key == "eval_every") num(eval_every);
    else if (key == "stage1_ckpt") stage1_ckpt = value;
    else if (key == "weight_decay") num(weight_decay);
    else if (key == "adapter_c_mid") num(adapter_c_mid);
    else if (key == "adapter_grouped") adapter_grouped = value == "1" || value == "true";
    else if (key == "pair_prob") num(pair_prob);
    else throw ConfigError("unknown config key '" + key + "'");
  }

  static TrainConfig parse(std::istream& is) { return parse(is, TrainConfig()); }
  static TrainConfig parse(std::istream& is, TrainConfig base) {
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return std::string();
        return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
      };
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
      base.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return base;
  }

  static TrainConfig load(const std::filesystem::path& file) { return load(file, TrainConfig()); }
  static TrainConfig load(const std::filesystem::path& file, TrainConfig base) {
    std::ifstream is(file);
    if (!is) throw IoError("cannot open config '" + file.string() + "'");
    return parse(is, std::move(base));
  }

  void validate() const {
    if (stage != 1 && stage != 2) throw ConfigError("stage must be 1 or 2");
    if (lr < 0.0) throw ConfigError("lr must be >= 0");
    if (stage == 2 && stage1_ckpt.empty()) throw ConfigError("stage 2 requires stage1_ckpt");
    if (resolution != 32) throw ConfigError("only resolution 32 is supported");
    if (!(pair_prob >= 0.0 && pair_prob <= 1.0)) throw ConfigError("pair_prob must be in [0, 1]");
  }

  std::string dump() const {
    std::ostringstream os;
    os << "stage=" << stage << "\nlr=" << lr << "\nbatch_size=" << effective_batch() << "\nsteps=" << steps
       << "\nseed=" << seed << "\nresolution=" << resolution << "\ndataset=" << dataset_dir.string()
       << "\ncheckpoint_dir=" << checkpoint_dir.string() << "\neval_every=" << eval_every
       << "\nstage1_ckpt=" << stage1_ckpt.string() << "\nweight_decay=" << weight_decay
       << "\nadapter_c_mid=" << adapter_c_mid << "\nadapter_grouped=" << (adapter_grouped ? 1 : 0)
       << "\npair_prob=" << pair_prob << '\n';
    return os.str();
  }
};

struct TrainResult {
  std::vector<double> losses;
  std::filesystem::path checkpoint;
};

/// CSV metrics: step,loss,lr,wall_ms
class MetricsLog {
 public:
  explicit MetricsLog(const std::filesystem::path& file) : os_(file) {
    if (!os_) throw IoError("cannot write '" + file.string() + "'");
    os_ << "step,loss,lr,wall_ms\n";
    start_ = std::chrono::steady_clock::now();
  }
  void row(std::size_t step, double loss, double lr) {
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count();
    os_ << step << ',' << loss << ',' << lr << ',' << static_cast<long long>(ms) << '\n';
    os_.flush();
  }

 private:
  std::ofstream os_;
  std::chrono::steady_clock::time_point start_;
};

inline bool is_adapter_path(const std::string& p) { return p.rfind("adapter.", 0) == 0; }

/// Denoising MSE on one (image, seg) sample.
inline Tensor denoise_loss(const DenoiserNet& net, const SceneImage& img, const SegMap& seg, long t, const Tensor& noise,
                           const NoiseSchedule& sched) {
  const Tensor zt = forward_noise(image_to_latent(img), t, noise, sched);
  return mse_loss(net.forward(zt, t, seg), noise);
}

inline void check_dataset(const std::vector<DatasetSample>& data, const TrainConfig& cfg) {
  if (data.empty()) throw ConfigError("dataset '" + cfg.dataset_dir.string() + "' is empty");
  for (const auto& s : data) {
    if (s.image.height != cfg.resolution || s.image.width != cfg.resolution) {
      throw ConfigError("sample " + s.id + " is not " + std::to_string(cfg.resolution) + "x" + std::to_string(cfg.resolution));
    }
  }
}

using StepHook = std::function<void(std::size_t step, double loss)>;

/// One paired sample: the target view's branch consumes the exemplar view's
/// keys/values at the same timestep.
struct Stage2Batch {
  PairSample pair;
  long t = 0;
  Tensor noise_y, noise_x;
};

inline Tensor stage2_loss(const DenoiserNet& net, const Stage2Batch& b, const NoiseSchedule& sched, AttnMode mode) {
  KVCapture kv;
  {
    NoGradGuard ng;
    BranchRun app;
    app.capture = &kv;
    net.forward(forward_noise(image_to_latent(b.pair.exemplar_image), b.t, b.noise_x, sched), b.t, b.pair.exemplar_seg, app);
  }
  const CatCost cost = attention_cost(net.config(), b.pair.target_seg, b.pair.exemplar_seg, {});
  BranchRun run;
  run.mode = mode;
  run.exemplar = &kv;
  run.cost = &cost;
  const Tensor zt = forward_noise(image_to_latent(b.pair.target_image), b.t, b.noise_y, sched);
  return mse_loss(net.forward(zt, b.t, b.pair.target_seg, run), b.noise_y);
}

inline Stage2Batch draw_stage2_batch(const std::vector<DatasetSample>& data, std::mt19937_64& rng, const NoiseSchedule& sched,
                                     std::size_t res) {
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  std::uniform_int_distribution<long> tdist(0, static_cast<long>(sched.T_train) - 1);
  const auto& s = data[pick(rng)];
  Stage2Batch b;
  b.pair = augment_pair(s.image, s.seg, s.id, rng());
  b.t = tdist(rng);
  b.noise_y = Tensor::randn({3, res, res}, rng);
  b.noise_x = Tensor::randn({3, res, res}, rng);
  return b;
}

inline TrainResult train_stage1(const TrainConfig& cfg, DenoiserNet& net, const std::vector<DatasetSample>& data,
                                const StepHook& hook = {}) {
  cfg.validate();
  check_dataset(data, cfg);
  const NoiseSchedule sched = NoiseSchedule::linear();
  std::filesystem::create_directories(cfg.checkpoint_dir);
  MetricsLog log(cfg.checkpoint_dir / "stage1_metrics.csv");
  AdamWConfig opt;
  opt.lr = cfg.lr;
  opt.weight_decay = cfg.weight_decay;
  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  std::uniform_int_distribution<long> tdist(0, static_cast<long>(sched.T_train) - 1);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  TrainResult res;
  res.checkpoint = cfg.checkpoint_dir / "stage1.ckpt";
  ParamSet& ps = net.params();
  const std::size_t B = cfg.effective_batch();
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    ps.zero_grad();
    double total = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
      Tensor loss;
      if (cfg.pair_prob > 0.0 && coin(rng) < cfg.pair_prob) {
        loss = stage2_loss(net, draw_stage2_batch(data, rng, sched, cfg.resolution), sched, AttnMode::Augmented);
      } else {
        const auto& s = data[pick(rng)];
        const long t = tdist(rng);
        const Tensor noise = Tensor::randn({3, cfg.resolution, cfg.resolution}, rng);
        loss = denoise_loss(net, s.image, s.seg, t, noise, sched);
      }
      loss = scale(loss, 1.0 / static_cast<double>(B));
      loss.backward();
      total += loss.item();
    }
    ps.adamw_step(opt);
    res.losses.push_back(total);
    log.row(step, total, cfg.lr);
    if (hook) hook(step, total);
    if (cfg.eval_every && step % cfg.eval_every == 0) ps.subset("net.").save(res.checkpoint);
  }
  ps.subset("net.").save(res.checkpoint);
  return res;
}

inline TrainResult train_stage1(const TrainConfig& cfg, const StepHook& hook = {}) {
  const auto data = read_dataset(cfg.dataset_dir);
  NetConfig nc;
  nc.image = cfg.resolution;
  DenoiserNet net(nc, cfg.seed);
  return train_stage1(cfg, net, data, hook);
}

/// `net` must already hold the stage-1 weights; an adapter is attached if
/// absent. Throws StateError if any non-adapter weight changes.
inline TrainResult train_stage2(const TrainConfig& cfg, DenoiserNet& net, const std::vector<DatasetSample>& data,
                                const StepHook& hook = {}) {
  check_dataset(data, cfg);
  if (cfg.stage != 2) throw ConfigError("train_stage2 needs stage=2");
  const NoiseSchedule sched = NoiseSchedule::linear();
  if (!net.has_adapter()) {
    AdapterConfig acfg;
    acfg.c_mid = cfg.adapter_c_mid;
    acfg.grouped = cfg.adapter_grouped;
    net.attach_adapter(cfg.seed ^ 0xada97e7ull, acfg);
  }
  ParamSet& ps = net.params();
  ps.freeze_all_except("adapter.");
  const auto frozen_hash = [&ps] { return ps.hash_where([](const std::string& p) { return !is_adapter_path(p); }); };
  const std::uint64_t before = frozen_hash();
  std::filesystem::create_directories(cfg.checkpoint_dir);
  MetricsLog log(cfg.checkpoint_dir / "stage2_metrics.csv");
  AdamWConfig opt;
  opt.lr = cfg.lr;
  opt.weight_decay = cfg.weight_decay;
  std::mt19937_64 rng(cfg.seed);
  TrainResult res;
  res.checkpoint = cfg.checkpoint_dir / "adapter.ckpt";
  const std::size_t B = cfg.effective_batch();
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    ps.zero_grad();
    double total = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
      const Stage2Batch batch = draw_stage2_batch(data, rng, sched, cfg.resolution);
      const Tensor loss = scale(stage2_loss(net, batch, sched, AttnMode::Adapter), 1.0 / static_cast<double>(B));
      loss.backward();
      total += loss.item();
    }
    ps.adamw_step(opt);
    if (frozen_hash() != before) throw StateError("a frozen parameter changed during stage-2 step " + std::to_string(step));
    res.losses.push_back(total);
    log.row(step, total, cfg.lr);
    if (hook) hook(step, total);
    if (cfg.eval_every && step % cfg.eval_every == 0) ps.subset("adapter.").save(res.checkpoint);
  }
  ps.subset("adapter.").save(res.checkpoint);
  return res;
}

inline TrainResult train_stage2(const TrainConfig& cfg, const StepHook& hook = {}) {
  cfg.validate();
  const auto data = read_dataset(cfg.dataset_dir);
  NetConfig nc;
  nc.image = cfg.resolution;
  DenoiserNet net(nc, cfg.seed);
  net.load_net(ParamSet::load(cfg.stage1_ckpt));
  return train_stage2(cfg, net, data, hook);
}

}  // namespace amad
