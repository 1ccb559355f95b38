// cpmamba: data generation, training, evaluation, ablations, probes and self-checks.

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <thread>

#include "cpmamba/config.hpp"
#include "cpmamba/experiments.hpp"
#include "cpmamba/io.hpp"
#include "cpmamba/train.hpp"
#include "support/verify_suite.hpp"

using namespace cpmamba;

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  unsigned threads = 0;
};

// Relative output paths land under $CPMAMBA_OUTPUT_ROOT when it is set.
fs::path output_path(const std::string& p) {
  const fs::path path(p);
  if (path.is_absolute()) return path;
  if (const char* root = std::getenv("CPMAMBA_OUTPUT_ROOT"); root != nullptr && *root != '\0') return fs::path(root) / path;
  return path;
}

void apply_threads(unsigned flag) {
  unsigned n = flag;
  if (n == 0) {
    if (const char* env = std::getenv("CPMAMBA_THREADS"); env != nullptr && *env != '\0') n = static_cast<unsigned>(std::stoul(env));
  }
  if (n == 0) n = std::max(1u, std::thread::hardware_concurrency());
  set_thread_count(n);
}

RunConfig resolve(const Common& c) { return load_config(c.config_path, c.overrides); }

void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

std::vector<std::string> dataset_header(const RunConfig& cfg) {
  auto h = provenance(cfg, "gen-data");
  std::istringstream in(canonical_text(cfg));
  for (std::string line; std::getline(in, line);) h.push_back("config " + line);
  return h;
}

// The dataset must agree with the model on image size; class ids above NC are an error.
void check_compatible(const std::vector<Sample>& data, const ModelConfig& m) {
  for (const auto& s : data) {
    if (s.image.size(1) != m.image_size || s.image.size(2) != m.image_size)
      throw std::runtime_error("dataset image " + std::to_string(s.index) + " is " + std::to_string(s.image.size(1)) +
                               "x" + std::to_string(s.image.size(2)) + ", model expects " +
                               std::to_string(m.image_size));
    for (int c : s.instances.classes)
      if (c < 1 || static_cast<std::size_t>(c) > m.classes)
        throw std::runtime_error("dataset uses class " + std::to_string(c) + " but the model has " +
                                 std::to_string(m.classes));
  }
}

std::pair<std::vector<Sample>, std::vector<Sample>> load_split(const fs::path& dir, const RunConfig& cfg) {
  auto all = read_dataset(dir);
  if (all.size() < 2) throw std::runtime_error("dataset " + dir.string() + " needs at least two samples");
  check_compatible(all, cfg.model);
  return split(all, cfg.train_fraction, cfg.data.seed);
}

RunConfig config_from_checkpoint(const fs::path& ckpt) {
  RunConfig cfg;
  apply_config_text(cfg, read_checkpoint_info(ckpt).config_text, (ckpt / "config.txt").string());
  cfg.validate();
  return cfg;
}

int cmd_gen_data(const Common& c, const std::string& out) {
  const RunConfig cfg = resolve(c);
  const fs::path dir = output_path(out);
  const auto samples = generate(cfg.data, cfg.data_count);
  write_dataset(dir, samples, dataset_header(cfg));
  std::size_t failures = 0;
  for (const auto& s : samples) failures += s.placement_failures;
  std::cout << "wrote " << samples.size() << " samples to " << dir.string() << " (" << failures
            << " placement failures)\n";
  return 0;
}

int cmd_train(const Common& c, const std::string& data, const std::string& out, bool resume,
              std::size_t checkpoint_every) {
  const RunConfig cfg = resolve(c);
  auto [train_set, val_set] = load_split(data, cfg);
  const fs::path dir = output_path(out);
  Model<float> model(cfg.model);
  TrainOptions opt;
  opt.out_dir = dir;
  opt.header = provenance(cfg, "train");
  opt.config_text = canonical_text(cfg);
  opt.resume = resume;
  opt.checkpoint_every = checkpoint_every;
  opt.on_log = [](const LogRecord& r) {
    std::cout << "iter " << r.iteration << " loss " << r.terms.total << " (l_p " << r.terms.prompt << ", l_sem "
              << r.terms.semantic << ", l_cls " << r.terms.classes << ")\n";
  };
  const TrainResult r = train(model, train_set, opt);
  write_json(dir / "summary.json", {{"provenance", opt.header},
                                    {"train_samples", train_set.size()},
                                    {"start_iteration", r.start_iteration},
                                    {"iterations", cfg.model.iterations},
                                    {"initial_loss", r.initial_loss},
                                    {"final_loss", r.final_loss}});
  std::cout << "loss " << r.initial_loss << " -> " << r.final_loss << "; checkpoint in " << (dir / "checkpoint").string()
            << '\n';
  return 0;
}

std::vector<Sample> pick_split(const std::string& which, std::vector<Sample> train_set, std::vector<Sample> val_set) {
  if (which == "train") return train_set;
  if (which == "val") return val_set;
  train_set.insert(train_set.end(), val_set.begin(), val_set.end());
  std::sort(train_set.begin(), train_set.end(), [](const Sample& a, const Sample& b) { return a.index < b.index; });
  return train_set;
}

int cmd_eval(const Common& c, const std::string& ckpt, const std::string& data, const std::string& which,
             const std::string& out) {
  const fs::path ckpt_dir = output_path(ckpt);
  RunConfig cfg = config_from_checkpoint(ckpt_dir);
  for (const auto& o : c.overrides) apply_override(cfg, o);  // e.g. data.train_fraction for the split
  cfg.validate();
  auto [train_set, val_set] = load_split(data, cfg);
  const auto samples = pick_split(which, train_set, val_set);
  Model<float> model(cfg.model);
  load_checkpoint(ckpt_dir, model);

  nlohmann::json per_image = nlohmann::json::array();
  MetricAccumulator total(cfg.model.classes);
  for (const auto& s : samples) {
    NoGradGuard<float> guard;
    const InstanceMask pred = model.predict_instances(model.forward(s.image));
    MetricAccumulator one(cfg.model.classes);
    one.add(pred, s.instances);
    total.add(pred, s.instances);
    auto j = MetricsReport::from(one).to_json();
    j["index"] = s.index;
    per_image.push_back(j);
  }
  const MetricsReport report = MetricsReport::from(total);
  nlohmann::json j{{"provenance", provenance(cfg, "eval")}, {"checkpoint", ckpt_dir.string()}, {"split", which},
                   {"aggregate", report.to_json()}, {"per_image", per_image}};
  validate_report_json(j["aggregate"]);
  write_json(output_path(out), j);
  std::cout << j["aggregate"].dump(2) << '\n';
  return 0;
}

int cmd_infer(const Common& c, const std::string& ckpt, const std::string& image, const std::string& out) {
  (void)c;
  const fs::path ckpt_dir = output_path(ckpt);
  const RunConfig cfg = config_from_checkpoint(ckpt_dir);
  Model<float> model(cfg.model);
  load_checkpoint(ckpt_dir, model);
  const Tensor<float> img = read_png_rgb8(image);
  NoGradGuard<float> guard;
  const auto output = model.forward(img);
  const InstanceMask pred = model.predict_instances(output);
  const fs::path dir = output_path(out);
  fs::create_directories(dir);
  write_instance_mask(dir / "instances.png", pred);
  write_png_gray16(dir / "classes.png", pred.class_mask());
  std::ofstream prov(dir / "provenance.txt");
  for (const auto& l : provenance(cfg, "infer")) prov << l << '\n';
  std::cout << pred.count() << " instances written to " << dir.string() << '\n';
  return 0;
}

int cmd_ablate(const Common& c, const std::string& data, const std::string& out) {
  const RunConfig cfg = resolve(c);
  auto [train_set, val_set] = load_split(data, cfg);
  const fs::path dir = output_path(out);
  auto variants = ordering_variants(cfg.model, cfg.ablate_orderings);
  if (cfg.ablate_toggles) {
    auto t = toggle_variants(cfg.model);
    variants.insert(variants.end(), t.begin(), t.end());
  }
  const auto header = provenance(cfg, "ablate-scan");
  const auto result = run_ablation(variants, cfg.ablate_seeds, train_set, val_set, dir, header, [](const AblationRun& r) {
    std::cout << r.variant << " seed " << r.seed << ": F_d " << r.report.f_detection << ", loss " << r.initial_loss
              << " -> " << r.final_loss << '\n';
  });
  auto j = result.to_json();
  j["provenance"] = header;
  write_json(dir / "ablation.json", j);
  std::ofstream md(dir / "ablation.md");
  for (const auto& l : header) md << "<!-- " << l << " -->\n";
  md << result.table();
  std::cout << result.table();
  return 0;
}

int cmd_entropy_probe(const Common& c, const std::string& out) {
  const RunConfig cfg = resolve(c);
  const auto seqs = mixture_sequences(cfg.probe_trials, cfg.probe_tokens, cfg.probe_classes, cfg.model.seed);
  const auto report = entropy_probe(seqs, cfg.model.seed);
  // One-hot control: every ordering must report zero.
  TokenDistributions onehot{cfg.probe_tokens, cfg.probe_classes, std::vector<double>(cfg.probe_tokens * cfg.probe_classes)};
  for (std::size_t t = 0; t < cfg.probe_tokens; ++t) onehot.probs[t * cfg.probe_classes + t % cfg.probe_classes] = 1.0;
  nlohmann::json control;
  for (auto o : {ProbeOrdering::sorted, ProbeOrdering::random, ProbeOrdering::raster})
    control[to_string(o)] = ordering_entropy(onehot, o, cfg.model.seed);
  nlohmann::json j{{"provenance", provenance(cfg, "entropy-probe")},
                   {"trials", report.trials},
                   {"tokens", cfg.probe_tokens},
                   {"classes", cfg.probe_classes},
                   {"sorted", report.sorted},
                   {"random", report.random},
                   {"raster", report.raster},
                   {"mean_sorted", EntropyProbeReport::mean(report.sorted)},
                   {"mean_random", EntropyProbeReport::mean(report.random)},
                   {"mean_raster", EntropyProbeReport::mean(report.raster)},
                   {"sorted_lower_than_random", report.sorted_lower()},
                   {"one_hot_control", control}};
  write_json(output_path(out), j);
  std::cout << "mean entropy (nats): sorted " << j["mean_sorted"] << ", random " << j["mean_random"] << ", raster "
            << j["mean_raster"] << "; sorted < random in " << report.sorted_lower() << "/" << report.trials
            << " trials\n";
  return 0;
}

int cmd_verify() {
  int failures = 0;
  for (const auto& r : testing::run_verify_suite()) {
    std::printf("%s  %-28s %6.2fs  %s\n", r.pass ? "PASS" : "FAIL", r.name.c_str(), r.seconds, r.detail.c_str());
    failures += !r.pass;
  }
  std::printf("%s: %d failing check(s)\n", failures == 0 ? "verify passed" : "verify FAILED", failures);
  return failures == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cpmamba: category-prompt Mamba segmentation toolkit"};
  app.require_subcommand(1);
  Common common;
  app.add_option("--config", common.config_path, "key = value configuration file");
  app.add_option("--set", common.overrides, "override one key, key=value (repeatable; wins over --config)");
  app.add_option("--threads", common.threads, "worker threads (default: $CPMAMBA_THREADS or all cores)");

  std::string out, data, ckpt, image, which = "val";
  bool resume = false;
  std::size_t checkpoint_every = 0;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  gen->add_option("--out", out, "dataset directory")->required();

  auto* tr = app.add_subcommand("train", "train on the training split of a dataset");
  tr->add_option("--data", data, "dataset directory")->required();
  tr->add_option("--out", out, "run directory (log.jsonl, checkpoint/)")->required();
  tr->add_flag("--resume", resume, "continue from <out>/checkpoint");
  tr->add_option("--checkpoint-every", checkpoint_every, "extra checkpoint period in iterations");

  auto* ev = app.add_subcommand("eval", "score a checkpoint on a dataset split");
  ev->add_option("--checkpoint", ckpt, "checkpoint directory")->required();
  ev->add_option("--data", data, "dataset directory")->required();
  ev->add_option("--split", which, "train | val | all")->check(CLI::IsMember({"train", "val", "all"}));
  ev->add_option("--out", out, "report file (JSON)")->required();

  auto* inf = app.add_subcommand("infer", "segment one RGB PNG");
  inf->add_option("--checkpoint", ckpt, "checkpoint directory")->required();
  inf->add_option("--image", image, "input PNG")->required()->check(CLI::ExistingFile);
  inf->add_option("--out", out, "output directory")->required();

  auto* ab = app.add_subcommand("ablate-scan", "train orderings and module toggles over several seeds");
  ab->add_option("--data", data, "dataset directory")->required();
  ab->add_option("--out", out, "output directory")->required();

  auto* probe = app.add_subcommand("entropy-probe", "sequence entropy of sorted vs random orderings");
  probe->add_option("--out", out, "report file (JSON)")->required();

  auto* ver = app.add_subcommand("verify", "run the gradient, oracle and property checks");

  CLI11_PARSE(app, argc, argv);
  try {
    apply_threads(common.threads);
    if (*gen) return cmd_gen_data(common, out);
    if (*tr) return cmd_train(common, data, out, resume, checkpoint_every);
    if (*ev) return cmd_eval(common, ckpt, data, which, out);
    if (*inf) return cmd_infer(common, ckpt, image, out);
    if (*ab) return cmd_ablate(common, data, out);
    if (*probe) return cmd_entropy_probe(common, out);
    if (*ver) return cmd_verify();
  } catch (const TrainingError& e) {
    std::cerr << "training aborted: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
