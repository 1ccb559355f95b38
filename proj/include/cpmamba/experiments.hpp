#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "cpmamba/train.hpp"

namespace cpmamba {

struct AblationVariant {
  std::string name;
  ModelConfig model;
};

struct AblationRun {
  std::string variant;
  std::uint64_t seed = 0;
  double initial_loss = 0, final_loss = 0;
  MetricsReport report;
  fs::path dir;
};

struct MeanSd {
  double mean = 0, sd = 0;

  static MeanSd of(const std::vector<double>& v) {
    MeanSd r;
    if (v.empty()) return r;
    for (double x : v) r.mean += x;
    r.mean /= static_cast<double>(v.size());
    if (v.size() > 1) {
      for (double x : v) r.sd += (x - r.mean) * (x - r.mean);
      r.sd = std::sqrt(r.sd / static_cast<double>(v.size() - 1));  // sample sd
    }
    return r;
  }
};

struct AblationRow {
  std::string variant;
  std::vector<std::uint64_t> seeds;
  MeanSd f_detection, dice, aji, pq;
  std::vector<MeanSd> per_class_f1;
};

struct AblationResult {
  std::vector<AblationRun> runs;
  std::vector<AblationRow> rows;

  const AblationRow& row(const std::string& variant) const {
    for (const auto& r : rows)
      if (r.variant == variant) return r;
    throw std::out_of_range("no ablation row '" + variant + "'");
  }

  /// One row per configuration: mean +- sd over seeds.
  std::string table() const {
    std::string out = "| configuration | seeds | F_d | ";
    const std::size_t nc = rows.empty() ? 0 : rows.front().per_class_f1.size();
    for (std::size_t c = 0; c < nc; ++c) out += "F1 class " + std::to_string(c + 1) + " | ";
    out += "Dice | AJI | PQ |\n|---|---|---|";
    for (std::size_t c = 0; c < nc + 3; ++c) out += "---|";
    out += "\n";
    auto cell = [](const MeanSd& m) {
      char buf[48];
      std::snprintf(buf, sizeof buf, "%.4f ± %.4f", m.mean, m.sd);
      return std::string(buf);
    };
    for (const auto& r : rows) {
      std::string seeds;
      for (auto s : r.seeds) seeds += (seeds.empty() ? "" : ",") + std::to_string(s);
      out += "| " + r.variant + " | " + seeds + " | " + cell(r.f_detection) + " | ";
      for (const auto& f : r.per_class_f1) out += cell(f) + " | ";
      out += cell(r.dice) + " | " + cell(r.aji) + " | " + cell(r.pq) + " |\n";
    }
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    auto ms = [](const MeanSd& m) { return nlohmann::json{{"mean", m.mean}, {"sd", m.sd}}; };
    for (const auto& r : rows) {
      nlohmann::json row{{"configuration", r.variant}, {"seeds", r.seeds}, {"f_detection", ms(r.f_detection)}};
      nlohmann::json pc = nlohmann::json::array();
      for (const auto& f : r.per_class_f1) pc.push_back(ms(f));
      row["per_class_f1"] = pc;
      row["dice"] = ms(r.dice);
      row["aji"] = ms(r.aji);
      row["pq"] = ms(r.pq);
      j["rows"].push_back(row);
    }
    for (const auto& run : runs)
      j["runs"].push_back({{"configuration", run.variant}, {"seed", run.seed}, {"initial_loss", run.initial_loss},
                           {"final_loss", run.final_loss}, {"metrics", run.report.to_json()}});
    return j;
  }
};

inline std::vector<AblationVariant> ordering_variants(const ModelConfig& base, const std::vector<OrderingKind>& kinds) {
  std::vector<AblationVariant> out;
  for (auto k : kinds) {
    ModelConfig m = base;
    m.ordering = k;
    m.sorting_on = true;
    out.push_back({to_string(k), m});
  }
  return out;
}

/// {sorting, phenotype} x {on, off}, fully disabled first.
inline std::vector<AblationVariant> toggle_variants(const ModelConfig& base) {
  std::vector<AblationVariant> out;
  for (bool sorting : {false, true})
    for (bool phenotype : {false, true}) {
      ModelConfig m = base;
      m.ordering = OrderingKind::probability_sorted;
      m.sorting_on = sorting;
      m.phenotype_on = phenotype;
      out.push_back({std::string("sorting_") + (sorting ? "on" : "off") + "+phenotype_" + (phenotype ? "on" : "off"), m});
    }
  return out;
}

/// Trains every variant for `seeds` model seeds (base seed + k) on `train_set`
/// and scores it on `eval_set`. Each run lives in out_dir/<variant>/seed<k>.
inline AblationResult run_ablation(const std::vector<AblationVariant>& variants, std::size_t seeds,
                                   const std::vector<Sample>& train_set, const std::vector<Sample>& eval_set,
                                   const fs::path& out_dir, const std::vector<std::string>& header = {},
                                   const std::function<void(const AblationRun&)>& progress = {}) {
  AblationResult result;
  for (const auto& v : variants) {
    AblationRow row;
    row.variant = v.name;
    std::vector<double> fd, di, aj, pq;
    std::vector<std::vector<double>> pc(v.model.classes);
    for (std::size_t k = 0; k < seeds; ++k) {
      ModelConfig m = v.model;
      m.seed = v.model.seed + k;
      AblationRun run;
      run.variant = v.name;
      run.seed = m.seed;
      run.dir = out_dir / v.name / ("seed" + std::to_string(m.seed));
      Model<float> model(m);
      auto h = header;
      h.push_back("variant " + v.name);
      h.push_back("seed " + std::to_string(m.seed));
      const TrainResult tr = train(model, train_set, {.out_dir = run.dir, .header = h});
      run.initial_loss = tr.initial_loss;
      run.final_loss = tr.final_loss;
      run.report = MetricsReport::from(evaluate_metrics(model, eval_set));
      row.seeds.push_back(m.seed);
      fd.push_back(run.report.f_detection);
      di.push_back(run.report.dice);
      aj.push_back(run.report.aji);
      pq.push_back(run.report.pq);
      for (std::size_t c = 0; c < pc.size(); ++c) pc[c].push_back(run.report.per_class_f1.at(c));
      if (progress) progress(run);
      result.runs.push_back(std::move(run));
    }
    row.f_detection = MeanSd::of(fd);
    row.dice = MeanSd::of(di);
    row.aji = MeanSd::of(aj);
    row.pq = MeanSd::of(pq);
    for (const auto& c : pc) row.per_class_f1.push_back(MeanSd::of(c));
    result.rows.push_back(std::move(row));
  }
  return result;
}

}  // namespace cpmamba
