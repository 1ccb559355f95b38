#pragma once

#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <nlohmann/json.hpp>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cpmamba/io.hpp"
#include "cpmamba/network.hpp"
#include "cpmamba/synth.hpp"

namespace cpmamba {

struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Checkpoint directory:
//   manifest.txt  "cpmamba-checkpoint 1", "# ..." header lines, "iteration N",
//                 then one "param <name>" / "velocity <name>" line per blob
//   tensors.bin   the blobs, concatenated in manifest order
//   config.txt    the run configuration as given

struct CheckpointInfo {
  std::size_t iteration = 0;
  std::vector<std::string> header;
  std::string config_text;
};

inline std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

template <class T>
void save_checkpoint(const fs::path& dir, const Model<T>& model, const Sgd<T>& opt, const CheckpointInfo& info) {
  fs::create_directories(dir);
  std::ofstream manifest(dir / "manifest.txt");
  std::ofstream blobs(dir / "tensors.bin", std::ios::binary);
  if (!manifest || !blobs) throw IoError("cannot write checkpoint in " + dir.string());
  manifest << "cpmamba-checkpoint 1\n";
  for (const auto& h : info.header) manifest << "# " << h << '\n';
  manifest << "iteration " << info.iteration << '\n';
  for (const auto& p : model.parameters()) {
    manifest << "param " << p.name << '\n';
    write_tensor(blobs, p.tensor);
  }
  for (const auto& [name, v] : opt.velocity()) {
    manifest << "velocity " << name << '\n';
    write_tensor(blobs, Tensor<T>(Shape{v.size()}, v));
  }
  std::ofstream cfg(dir / "config.txt", std::ios::binary);
  cfg << info.config_text;
  if (!manifest || !blobs || !cfg) throw IoError("checkpoint write failed in " + dir.string());
}

/// Header and config only; used to rebuild the model before load_checkpoint.
inline CheckpointInfo read_checkpoint_info(const fs::path& dir) {
  std::ifstream manifest(dir / "manifest.txt");
  if (!manifest) throw IoError("no checkpoint manifest in " + dir.string());
  std::string line;
  if (!std::getline(manifest, line) || line != "cpmamba-checkpoint 1") throw IoError("bad checkpoint magic in " + dir.string());
  CheckpointInfo info;
  while (std::getline(manifest, line)) {
    if (line.rfind("# ", 0) == 0) {
      info.header.push_back(line.substr(2));
    } else if (line.rfind("iteration ", 0) == 0) {
      info.iteration = std::stoull(line.substr(10));
    }
  }
  info.config_text = read_text_file(dir / "config.txt");
  return info;
}

/// Loads parameters (and velocities, when `opt` is given) into an already
/// constructed model. Names and shapes must match exactly.
template <class T>
CheckpointInfo load_checkpoint(const fs::path& dir, const Model<T>& model, Sgd<T>* opt = nullptr) {
  CheckpointInfo info = read_checkpoint_info(dir);
  std::ifstream manifest(dir / "manifest.txt");
  std::ifstream blobs(dir / "tensors.bin", std::ios::binary);
  if (!blobs) throw IoError("no tensors.bin in " + dir.string());
  std::map<std::string, Tensor<T>> params;
  for (auto& p : model.parameters()) params.emplace(p.name, p.tensor);
  std::size_t loaded = 0;
  std::map<std::string, std::vector<T>> velocity;
  std::string line;
  while (std::getline(manifest, line)) {
    const bool is_param = line.rfind("param ", 0) == 0;
    const bool is_velocity = line.rfind("velocity ", 0) == 0;
    if (!is_param && !is_velocity) continue;
    const std::string name = line.substr(is_param ? 6 : 9);
    Tensor<T> t = read_tensor<T>(blobs);
    if (is_velocity) {
      velocity[name] = t.values();
      continue;
    }
    auto it = params.find(name);
    if (it == params.end()) throw IoError("checkpoint parameter '" + name + "' does not exist in the model");
    if (it->second.shape() != t.shape())
      throw IoError("checkpoint parameter '" + name + "' has shape " + to_string(t.shape()) + ", model expects " +
                    to_string(it->second.shape()));
    it->second.values() = t.values();
    ++loaded;
  }
  if (loaded != params.size()) throw IoError("checkpoint is missing model parameters");
  if (opt) opt->velocity() = std::move(velocity);
  return info;
}

// ---------------------------------------------------------------------------

struct LogRecord {
  std::size_t iteration = 0;
  LossTerms terms;

  nlohmann::ordered_json to_json() const {
    return {{"iteration", iteration}, {"loss", terms.total}, {"l_p", terms.prompt},
            {"l_sem", terms.semantic}, {"l_cls", terms.classes}};
  }
};

struct TrainOptions {
  fs::path out_dir;                  // log.jsonl and checkpoint/ go here
  std::vector<std::string> header;   // provenance, written to log and checkpoint
  std::string config_text;
  bool resume = false;
  std::size_t checkpoint_every = 0;  // 0: only at the end
  std::function<void(const LogRecord&)> on_log;
};

struct TrainResult {
  double initial_loss = 0.0;  // full-dataset evaluation before the first step of this run
  double final_loss = 0.0;    // and after the last
  std::size_t start_iteration = 0;
  std::size_t iterations = 0;
};

/// Sample index used at batch slot `slot` of iteration `it`: epochs walk a
/// seeded permutation, so any iteration's batch can be recomputed on resume.
class BatchSchedule {
 public:
  BatchSchedule(std::size_t samples, std::size_t batch, std::uint64_t seed) : n_(samples), batch_(batch), seed_(seed) {}

  std::vector<std::size_t> batch(std::size_t it) {
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < batch_; ++j) {
      const std::size_t g = it * batch_ + j;
      out.push_back(order(g / n_)[g % n_]);
    }
    return out;
  }

 private:
  const std::vector<std::size_t>& order(std::size_t epoch) {
    auto it = cache_.find(epoch);
    if (it != cache_.end()) return it->second;
    if (cache_.size() > 4) cache_.clear();
    std::vector<std::size_t> perm(n_);
    for (std::size_t i = 0; i < n_; ++i) perm[i] = i;
    std::mt19937_64 rng(detail::splitmix64(seed_ ^ (0x5851f42d4c957f2dULL * (epoch + 1))));
    std::shuffle(perm.begin(), perm.end(), rng);
    return cache_.emplace(epoch, std::move(perm)).first->second;
  }

  std::size_t n_, batch_;
  std::uint64_t seed_;
  std::map<std::size_t, std::vector<std::size_t>> cache_;
};

template <class T>
Tensor<T> sample_image(const Sample& s) {
  if constexpr (std::is_same_v<T, float>) {
    return s.image;
  } else {
    return s.image.template cast<T>();
  }
}

inline std::vector<Targets> make_targets(const std::vector<Sample>& data, const ModelConfig& cfg) {
  std::vector<Targets> out;
  out.reserve(data.size());
  for (const auto& s : data) out.push_back(Targets::from(s.instances, cfg.blocks, cfg.classes));
  return out;
}

/// Mean total loss over the whole set, no tape.
template <class T>
LossTerms evaluate_loss(const Model<T>& model, const std::vector<Sample>& data, const std::vector<Targets>& targets) {
  NoGradGuard<T> guard;
  LossTerms mean;
  for (std::size_t i = 0; i < data.size(); ++i) {
    LossTerms t;
    model.total_loss(model.forward(sample_image<T>(data[i]), &targets[i]), targets[i], &t);
    mean.total += t.total;
    mean.prompt += t.prompt;
    mean.semantic += t.semantic;
    mean.classes += t.classes;
  }
  const double n = static_cast<double>(data.size());
  mean.total /= n;
  mean.prompt /= n;
  mean.semantic /= n;
  mean.classes /= n;
  return mean;
}

/// Pooled metrics of the model's predictions over the set.
template <class T>
MetricAccumulator evaluate_metrics(const Model<T>& model, const std::vector<Sample>& data,
                                   std::vector<InstanceMask>* predictions = nullptr) {
  NoGradGuard<T> guard;
  MetricAccumulator acc(model.config().classes);
  for (const auto& s : data) {
    InstanceMask pred = model.predict_instances(model.forward(sample_image<T>(s)));
    acc.add(pred, s.instances);
    if (predictions) predictions->push_back(std::move(pred));
  }
  return acc;
}

inline void write_log_header(std::ostream& out, const std::vector<std::string>& header) {
  out << nlohmann::ordered_json{{"header", header}}.dump() << '\n';
}

/// Drops log records past `iteration` (left by a run that died after its
/// last checkpoint) so a resumed run continues the log seamlessly.
inline void truncate_log(const fs::path& path, std::size_t iteration) {
  std::ifstream in(path);
  if (!in) throw IoError("resume: missing log " + path.string());
  std::vector<std::string> keep;
  std::string line;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    if (j.contains("iteration") && j["iteration"].get<std::size_t>() > iteration) break;
    keep.push_back(line);
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : keep) out << l << '\n';
}

/// SGD over `data` for model.config().iterations total iterations. Each
/// iteration averages the loss over a batch; gradients accumulate in batch
/// order, so runs are bit-reproducible.
template <class T>
TrainResult train(Model<T>& model, const std::vector<Sample>& data, const TrainOptions& options) {
  if (data.empty()) throw std::invalid_argument("train: dataset is empty");
  const ModelConfig& cfg = model.config();
  if (cfg.batch_size == 0) throw std::invalid_argument("train: batch_size must be positive");
  for (const auto& s : data)
    if (s.image.shape() != Shape{3, cfg.image_size, cfg.image_size})
      throw std::invalid_argument("train: sample " + std::to_string(s.index) + " does not match image_size");

  Sgd<T> opt(cfg.sgd);
  auto params = model.parameters();
  const fs::path ckpt = options.out_dir / "checkpoint";
  const fs::path log_path = options.out_dir / "log.jsonl";
  fs::create_directories(options.out_dir);

  TrainResult result;
  std::ofstream log;
  if (options.resume) {
    result.start_iteration = load_checkpoint(ckpt, model, &opt).iteration;
    truncate_log(log_path, result.start_iteration);
    log.open(log_path, std::ios::app);
  } else {
    log.open(log_path, std::ios::trunc);
    write_log_header(log, options.header);
  }
  if (!log) throw IoError("cannot write " + log_path.string());

  const auto targets = make_targets(data, cfg);
  result.initial_loss = evaluate_loss(model, data, targets).total;

  BatchSchedule schedule(data.size(), cfg.batch_size, cfg.seed);
  const T inv_batch = T{1} / static_cast<T>(cfg.batch_size);
  auto save = [&](std::size_t it) { save_checkpoint(ckpt, model, opt, {it, options.header, options.config_text}); };

  for (std::size_t it = result.start_iteration; it < cfg.iterations; ++it) {
    zero_grads(params);
    LogRecord rec{it + 1, {}};
    for (std::size_t k : schedule.batch(it)) {
      GradientTape<T> tape;
      LossTerms terms;
      Tensor<T> loss = model.total_loss(model.forward(sample_image<T>(data[k]), &targets[k]), targets[k], &terms);
      if (!std::isfinite(terms.total)) {
        throw TrainingError("non-finite loss at iteration " + std::to_string(it + 1) + " on sample " +
                            std::to_string(data[k].index) + " (l_p " + std::to_string(terms.prompt) + ", l_sem " +
                            std::to_string(terms.semantic) + ", l_cls " + std::to_string(terms.classes) + ")");
      }
      tape.backward(loss, inv_batch);
      rec.terms.total += terms.total / static_cast<double>(cfg.batch_size);
      rec.terms.prompt += terms.prompt / static_cast<double>(cfg.batch_size);
      rec.terms.semantic += terms.semantic / static_cast<double>(cfg.batch_size);
      rec.terms.classes += terms.classes / static_cast<double>(cfg.batch_size);
    }
    opt.step(params);
    const bool last = it + 1 == cfg.iterations;
    if ((cfg.log_every != 0 && (it + 1) % cfg.log_every == 0) || last) {
      log << rec.to_json().dump() << '\n';
      log.flush();
      if (options.on_log) options.on_log(rec);
    }
    if (options.checkpoint_every != 0 && (it + 1) % options.checkpoint_every == 0 && !last) save(it + 1);
  }
  zero_grads(params);
  save(std::max(cfg.iterations, result.start_iteration));
  result.iterations = cfg.iterations > result.start_iteration ? cfg.iterations - result.start_iteration : 0;
  result.final_loss = evaluate_loss(model, data, targets).total;
  return result;
}

}  // namespace cpmamba
