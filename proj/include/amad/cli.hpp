#pragma once

// Command-line front end. run_cli() is the whole program; main() only
// forwards argv. Exit codes: 0 success, 1 usage error, 2 runtime error.
//
// Every subcommand accepts --config FILE with key=value lines whose keys are
// the long flag names (dashes or underscores). File values are applied first,
// so flags given on the command line take precedence.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "amad/evalviz.hpp"
#include "amad/retrieval.hpp"
#include "amad/training.hpp"

namespace amad {

namespace cli_detail {

inline std::string flag_name(std::string key) {
  std::replace(key.begin(), key.end(), '_', '-');
  return "--" + key;
}

inline std::vector<std::string> config_args(const std::filesystem::path& file) {
  std::ifstream is(file);
  if (!is) throw IoError("cannot open config '" + file.string() + "'");
  std::vector<std::string> out;
  std::string line;
  while (std::getline(is, line)) {
    if (const auto h = line.find('#'); h != std::string::npos) line.erase(h);
    const auto eq = line.find('=');
    auto trim = [](const std::string& s) {
      const auto b = s.find_first_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
    };
    if (trim(line).empty()) continue;
    if (eq == std::string::npos) throw ConfigError("config '" + file.string() + "': expected key=value, got '" + trim(line) + "'");
    out.push_back(flag_name(trim(line.substr(0, eq))) + "=" + trim(line.substr(eq + 1)));
  }
  return out;
}

/// Splices --config contents in front of the subcommand's own arguments.
inline std::vector<std::string> expand_config(const std::vector<std::string>& args) {
  if (args.size() < 2 || args[1].rfind("-", 0) == 0) return args;
  std::vector<std::string> rest, injected;
  for (std::size_t i = 2; i < args.size(); ++i) {
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) throw CLI::ArgumentMismatch("--config needs a file");
      injected = config_args(args[++i]);
    } else if (args[i].rfind("--config=", 0) == 0) {
      injected = config_args(args[i].substr(9));
    } else {
      rest.push_back(args[i]);
    }
  }
  std::vector<std::string> out{args[0], args[1]};
  out.insert(out.end(), injected.begin(), injected.end());
  out.insert(out.end(), rest.begin(), rest.end());
  return out;
}

/// Resolved values of every option of a subcommand.
inline nlohmann::json resolved(const CLI::App& sub) {
  nlohmann::json j = nlohmann::json::object();
  for (const CLI::Option* o : sub.get_options()) {
    if (o->get_lnames().empty() || o->get_lnames().front().rfind("help", 0) == 0) continue;
    j["--" + o->get_lnames().front()] = o->count() > 0 ? o->as<std::string>() : o->get_default_str();
  }
  return j;
}

inline void write_manifest_json(const std::filesystem::path& file, const std::string& command, const CLI::App& sub,
                                 const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json j;
  j["command"] = command;
  j["options"] = resolved(sub);
  if (!extra.empty()) j["result"] = extra;
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream os(file);
  if (!os) throw IoError("cannot write '" + file.string() + "'");
  os << j.dump(2) << '\n';
}

inline std::filesystem::path manifest_for(const std::filesystem::path& out) { return out.string() + ".manifest.json"; }

inline CostMode parse_mode(const std::string& m) {
  if (m == "adapter") return CostMode::Adapter;
  if (m == "catmask") return CostMode::CatMask;
  if (m == "baseline") return CostMode::Baseline;
  throw ConfigError("unknown mode '" + m + "' (adapter, catmask, baseline)");
}

struct ModelFlags {
  std::string net, adapter;
  void add(CLI::App* s, bool with_adapter = true) {
    s->add_option("--net", net, "Stage-1 checkpoint")->required();
    if (with_adapter) s->add_option("--adapter", adapter, "Adapter checkpoint");
  }
  DenoiserNet load() const {
    DenoiserNet m;
    m.load_net(ParamSet::load(net));
    if (!adapter.empty()) m.load_adapter(ParamSet::load(adapter));
    return m;
  }
};

struct ExemplarFlags {
  std::string pool, exemplar_id, image, seg;
  bool auto_retrieve = false;
  void add(CLI::App* s) {
    s->add_option("--pool", pool, "Exemplar pool directory (scene-data layout)");
    s->add_flag("--auto-retrieve", auto_retrieve, "Pick the exemplar by probe-image SSIM");
    s->add_option("--exemplar", exemplar_id, "Pool id of a manually chosen exemplar");
    s->add_option("--exemplar-image", image, "Exemplar PPM (bypasses the pool)");
    s->add_option("--exemplar-seg", seg, "Exemplar label map PGM");
  }
};

struct Exemplar {
  std::string id;
  SceneImage image;
  SegMap seg;
  double score = 0.0;
};

inline Exemplar resolve_exemplar(const ExemplarFlags& f, const SegMap& seg_y, const DenoiserNet& net, std::uint64_t seed,
                                 std::size_t classes) {
  if (!f.image.empty() || !f.seg.empty()) {
    if (f.image.empty() || f.seg.empty()) throw CLI::ValidationError("--exemplar-image and --exemplar-seg go together");
    return {f.image, read_image(f.image), read_segmap(f.seg, classes), 0.0};
  }
  if (f.pool.empty()) throw CLI::ValidationError("need --pool with --auto-retrieve or --exemplar, or --exemplar-image/--exemplar-seg");
  if (f.auto_retrieve == !f.exemplar_id.empty()) throw CLI::ValidationError("give exactly one of --auto-retrieve and --exemplar");
  const ExemplarPool pool = ExemplarPool::load(f.pool);
  if (!f.exemplar_id.empty()) {
    const auto& e = pool.find(f.exemplar_id);
    return {e.id, e.image, e.seg, 0.0};
  }
  const auto r = retrieve(seg_y, pool, net, seed);
  const auto& e = pool.entries()[r.hits.front().index];
  return {e.id, e.image, e.seg, r.hits.front().score};
}

inline std::pair<std::size_t, std::size_t> parse_point(const std::string& s) {
  const auto c = s.find(',');
  try {
    if (c == std::string::npos) throw std::invalid_argument(s);
    return {std::stoul(s.substr(0, c)), std::stoul(s.substr(c + 1))};
  } catch (const std::exception&) {
    throw CLI::ValidationError("--query expects y,x");
  }
}

}  // namespace cli_detail

inline int run_cli(const std::vector<std::string>& raw_args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  using namespace cli_detail;
  CLI::App app("Segmentation-conditioned scene synthesis with exemplar appearance matching");
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Full flag reference for every command");

  // gen-data
  auto* gd = app.add_subcommand("gen-data", "Render a synthetic scene dataset");
  std::string gd_out;
  std::size_t gd_count = 1000;
  std::uint64_t seed = 0;
  bool gd_nojitter = false;
  gd->add_option("--out", gd_out, "Output directory")->required();
  gd->add_option("--count", gd_count, "Number of scenes")->capture_default_str();
  gd->add_flag("--no-jitter", gd_nojitter, "Canonical palette colours only");

  // training
  struct TrainFlags {
    std::string dataset, checkpoint_dir = ".", stage1_ckpt;
    double lr = 1e-5, weight_decay = 1e-2, pair_prob = 0.5;
    std::size_t batch_size = 0, steps = 1000, eval_every = 0, resolution = 32, adapter_c_mid = 8;
    bool adapter_grouped = false;
  } tf;
  auto add_train = [&](CLI::App* s, bool stage2) {
    s->add_option("--dataset", tf.dataset, "Dataset directory")->required();
    s->add_option("--checkpoint-dir", tf.checkpoint_dir, "Checkpoint and log directory")->capture_default_str();
    s->add_option("--lr", tf.lr, "AdamW learning rate")->capture_default_str();
    s->add_option("--batch-size", tf.batch_size, "Batch size (0: stage default)")->capture_default_str();
    s->add_option("--steps", tf.steps, "Optimisation steps")->capture_default_str();
    s->add_option("--eval-every", tf.eval_every, "Checkpoint cadence in steps (0: end only)")->capture_default_str();
    s->add_option("--resolution", tf.resolution, "Image side")->capture_default_str();
    s->add_option("--weight-decay", tf.weight_decay, "Decoupled weight decay")->capture_default_str();
    if (stage2) {
      s->add_option("--stage1-ckpt", tf.stage1_ckpt, "Stage-1 checkpoint")->required();
      s->add_option("--adapter-c-mid", tf.adapter_c_mid, "Adapter hidden channels")->capture_default_str();
      s->add_flag("--adapter-grouped", tf.adapter_grouped, "Per-head adapter with shared weights");
    } else {
      s->add_option("--pair-prob", tf.pair_prob, "Share of samples trained with augmented attention on a paired view")
          ->capture_default_str();
    }
  };
  auto* t1 = app.add_subcommand("train-stage1", "Train the conditioned denoiser");
  add_train(t1, false);
  auto* t2 = app.add_subcommand("train-stage2", "Train the matching adapter with the denoiser frozen");
  add_train(t2, true);

  // retrieve
  auto* rt = app.add_subcommand("retrieve", "Rank a pool for a target label map");
  std::string seg_path, pool_path, probe_out, metric = "ssim";
  std::size_t k = 5;
  ModelFlags model;
  rt->add_option("--seg", seg_path, "Target label map PGM")->required();
  rt->add_option("--pool", pool_path, "Pool directory")->required();
  model.add(rt, false);
  rt->add_option("--k", k, "Number of hits")->capture_default_str();
  rt->add_option("--metric", metric, "ssim or l2")->capture_default_str();
  rt->add_option("--probe-out", probe_out, "Write the probe image here");

  // generate
  auto* ge = app.add_subcommand("generate", "Synthesize an image for a target label map");
  std::string out_path, guide_path, mode = "adapter", source = "inversion";
  double s = 7.5;
  std::size_t threads = 0;
  bool no_clip = false;
  ExemplarFlags ex;
  ge->add_option("--seg", seg_path, "Target label map PGM")->required();
  model.add(ge);
  ex.add(ge);
  ge->add_option("--s", s, "Matching cost guidance scale")->capture_default_str();
  ge->add_option("--mode", mode, "adapter, catmask or baseline")->capture_default_str();
  ge->add_option("--guide", guide_path, "One-to-one guidance file");
  ge->add_option("--source", source, "Exemplar latents: inversion or forward")->capture_default_str();
  ge->add_option("--threads", threads, "Branch workers (0: AM_ADAPTER_THREADS)")->capture_default_str();
  ge->add_flag("--no-clip", no_clip, "Do not clamp the clean estimate to [-1, 1] while sampling");
  ge->add_option("--out", out_path, "Output PPM")->required();

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "Score a generated image against target and exemplar");
  std::string gen_path, ex_img, ex_seg, label = "run";
  ev->add_option("--generated", gen_path, "Generated PPM")->required();
  ev->add_option("--seg", seg_path, "Target label map PGM")->required();
  ev->add_option("--exemplar-image", ex_img, "Exemplar PPM")->required();
  ev->add_option("--exemplar-seg", ex_seg, "Exemplar label map PGM")->required();
  ev->add_option("--label", label, "Config column value")->capture_default_str();
  ev->add_option("--out", out_path, "Report CSV")->required();

  // attn-vis
  auto* av = app.add_subcommand("attn-vis", "Render Y->X attention before/after the adapter and the categorical cost");
  std::string out_dir, query = "16,16";
  std::size_t layer = 5, step = 0;
  av->add_option("--seg", seg_path, "Target label map PGM")->required();
  model.add(av);
  ex.add(av);
  av->add_option("--layer", layer, "Attention site (1-9)")->capture_default_str();
  av->add_option("--query", query, "Target pixel y,x in image coordinates")->capture_default_str();
  av->add_option("--step", step, "Sampling step index (0 = first)")->capture_default_str();
  av->add_option("--mode", mode, "adapter or catmask")->capture_default_str();
  av->add_option("--guide", guide_path, "One-to-one guidance file");
  av->add_option("--out-dir", out_dir, "Output directory")->required();

  for (CLI::App* sub : app.get_subcommands({})) sub->add_option("--seed", seed, "Seed for all randomness")->capture_default_str();

  std::vector<std::string> args;
  try {
    args = expand_config(raw_args);
  } catch (const CLI::Error& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }

  const std::size_t classes = NetConfig{}.num_classes;
  try {
    if (gd->parsed()) {
      SceneConfig sc = gd_nojitter ? SceneConfig::no_jitter() : SceneConfig{};
      write_dataset(gd_out, generate_scenes(gd_count, seed, sc));
      write_manifest_json(std::filesystem::path(gd_out) / "run_manifest.json", "gen-data", *gd);
      out << "wrote " << gd_count << " scenes to " << gd_out << '\n';
    } else if (t1->parsed() || t2->parsed()) {
      CLI::App* sub = t1->parsed() ? t1 : t2;
      TrainConfig cfg;
      cfg.stage = t1->parsed() ? 1 : 2;
      cfg.dataset_dir = tf.dataset;
      cfg.checkpoint_dir = tf.checkpoint_dir;
      cfg.stage1_ckpt = tf.stage1_ckpt;
      cfg.lr = tf.lr;
      cfg.weight_decay = tf.weight_decay;
      cfg.batch_size = tf.batch_size;
      cfg.steps = tf.steps;
      cfg.eval_every = tf.eval_every;
      cfg.resolution = tf.resolution;
      cfg.adapter_c_mid = tf.adapter_c_mid;
      cfg.adapter_grouped = tf.adapter_grouped;
      cfg.pair_prob = tf.pair_prob;
      cfg.seed = seed;
      const StepHook progress = [&](std::size_t st, double loss) {
        if (st % 100 == 0 || st == cfg.steps) err << "step " << st << " loss " << loss << '\n';
      };
      const TrainResult r = cfg.stage == 1 ? train_stage1(cfg, progress) : train_stage2(cfg, progress);
      write_manifest_json(manifest_for(r.checkpoint), sub->get_name(), *sub, {{"checkpoint", r.checkpoint.string()}});
      out << "checkpoint " << r.checkpoint.string() << '\n';
    } else if (rt->parsed()) {
      if (metric != "ssim" && metric != "l2") throw CLI::ValidationError("--metric must be ssim or l2");
      const SegMap seg_y = read_segmap(seg_path, classes);
      const DenoiserNet net = model.load();
      const auto r = retrieve(seg_y, ExemplarPool::load(pool_path), net, seed, k,
                              metric == "ssim" ? SimilarityMetric::Ssim : SimilarityMetric::L2);
      nlohmann::json hits = nlohmann::json::array();
      for (std::size_t i = 0; i < r.hits.size(); ++i) {
        out << i + 1 << '\t' << r.hits[i].id << '\t' << r.hits[i].score << '\n';
        hits.push_back({{"id", r.hits[i].id}, {"score", r.hits[i].score}});
      }
      if (!probe_out.empty()) {
        write_image(probe_out, r.probe);
        write_manifest_json(manifest_for(probe_out), "retrieve", *rt, {{"hits", hits}});
      }
    } else if (ge->parsed()) {
      const SegMap seg_y = read_segmap(seg_path, classes);
      const DenoiserNet net = model.load();
      const Exemplar e = resolve_exemplar(ex, seg_y, net, seed, classes);
      if (source != "inversion" && source != "forward") throw CLI::ValidationError("--source must be inversion or forward");
      GenerateOptions opt;
      opt.mode = parse_mode(mode);
      opt.s = s;
      opt.seed = seed;
      opt.threads = threads ? threads : adapter_threads();
      opt.clip_x0 = !no_clip;
      if (!guide_path.empty()) opt.guide = read_guidance(guide_path);
      const NoiseSchedule sched = NoiseSchedule::linear();
      const auto trace = prepare_exemplar(net, e.image, e.seg, sched,
                                          source == "inversion" ? ExemplarSource::Inversion : ExemplarSource::ForwardNoise, seed);
      const GenerateResult r = generate(net, seg_y, e.seg, trace, opt, sched);
      write_image(out_path, r.image);
      nlohmann::json res{{"exemplar", e.id},       {"retrieval_score", e.score}, {"empty_rows", r.empty_rows},
                         {"T_sample", sched.T_sample}, {"adapter_hash", nullptr}};
      if (net.has_adapter()) {
        std::ostringstream h;
        h << std::hex << net.params().hash_where(is_adapter_path);
        res["adapter_hash"] = h.str();
      }
      write_manifest_json(manifest_for(out_path), "generate", *ge, res);
      if (!r.empty_rows.empty()) err << "warning: " << r.empty_rows.size() << " attention rows have no admissible exemplar position\n";
      out << "wrote " << out_path << " (exemplar " << e.id << ")\n";
    } else if (ev->parsed()) {
      const SegMap seg_y = read_segmap(seg_path, classes), seg_x = read_segmap(ex_seg, classes);
      const MetricReport rep = score(read_image(gen_path), seg_y, read_image(ex_img), seg_x);
      write_report_csv(out_path, {{std::filesystem::path(gen_path).stem().string(), label, rep}});
      write_manifest_json(manifest_for(out_path), "evaluate", *ev);
      out << "structure_iou " << rep.structure_iou << " appearance_dist ";
      if (rep.appearance_dist) out << *rep.appearance_dist;
      else out << "absent";
      out << '\n';
    } else if (av->parsed()) {
      const SegMap seg_y = read_segmap(seg_path, classes);
      const DenoiserNet net = model.load();
      const Exemplar e = resolve_exemplar(ex, seg_y, net, seed, classes);
      if (layer < 1 || layer >= NetConfig::kSites) throw ConfigError("--layer must be in [1, 9]");
      const auto [qy, qx] = parse_point(query);
      if (qy >= seg_y.height || qx >= seg_y.width) throw ConfigError("--query outside the target image");
      const NetConfig& nc = net.config();
      const std::size_t side = nc.site_side(layer);
      const std::size_t gy = qy * side / seg_y.height, gx = qx * side / seg_y.width;
      AttnProbe probe;
      probe.layer = layer;
      GenerateOptions opt;
      opt.mode = parse_mode(mode);
      if (opt.mode == CostMode::Baseline) throw ConfigError("attn-vis needs --mode adapter or catmask");
      opt.s = 0.0;
      opt.seed = seed;
      opt.probe = &probe;
      opt.probe_step = step;
      if (!guide_path.empty()) opt.guide = read_guidance(guide_path);
      const NoiseSchedule sched = NoiseSchedule::linear();
      if (step >= sched.T_sample) throw ConfigError("--step beyond the sampling schedule");
      generate(net, seg_y, e.seg, prepare_exemplar(net, e.image, e.seg, sched), opt, sched);
      std::filesystem::create_directories(out_dir);
      const std::filesystem::path dir(out_dir);
      const std::size_t H = seg_y.height, W = seg_y.width;
      render_attention(*probe.a_yx, side, side, side, side, gy, gx, dir / "attn_before.ppm", e.seg.height, e.seg.width);
      if (probe.refined) {
        render_attention(*probe.refined, side, side, side, side, gy, gx, dir / "attn_after.ppm", e.seg.height, e.seg.width);
      }
      const CatCost cost = attention_cost(nc, seg_y, e.seg, opt.guide);
      render_cat_cost(cost, gy, gx, dir / "cat_cost.ppm", e.seg.height, e.seg.width);
      write_manifest_json(dir / "manifest.json", "attn-vis", *av,
                          {{"exemplar", e.id}, {"grid_query", {gy, gx}}, {"image_size", {H, W}}});
      out << "wrote heatmaps to " << out_dir << '\n';
    }
  } catch (const CLI::Error& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}

}  // namespace amad
