#include "kshift/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "kshift/checkpoint.hpp"
#include "kshift/dataset_io.hpp"
#include "kshift/errors.hpp"
#include "kshift/plot.hpp"
#include "kshift/stats.hpp"

namespace kshift::expcli {

using nlohmann::json;
using adapt::Method;

std::vector<double> SweepConfig::default_alpha_grid() {
  std::vector<double> g;
  for (int i = 0; i < 10; ++i) g.push_back(std::pow(3.0, -10.0 + 10.0 * i / 9.0));
  return g;
}

std::vector<double> SweepConfig::default_lambda_grid() { return {1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0}; }

void ExperimentConfig::validate() const {
  if (!dataset_dir) dataset.validate();
  if (k < 2) throw ConfigError("k must be at least 2");
  for (auto f : folds_to_run) {
    if (f >= k) throw ConfigError("fold index out of range");
  }
  train.validate();
  for (const auto& m : methods) m.config.validate();
  for (double w : sweep.alpha_grid) {
    if (!(w >= 0)) throw ConfigError("alpha grid values must be non-negative");
  }
  for (double w : sweep.lambda_grid) {
    if (!(w >= 0)) throw ConfigError("lambda grid values must be non-negative");
  }
}

namespace {

std::vector<std::size_t> index_list(const json& j) { return j.get<std::vector<std::size_t>>(); }

}  // namespace

ExperimentConfig experiment_config_from_json(const json& j) {
  ExperimentConfig c;
  if (j.contains("dataset")) c.dataset = io::dataset_config_from_json(j.at("dataset"));
  if (j.contains("dataset_dir")) c.dataset_dir = j.at("dataset_dir").get<std::string>();
  c.seed = j.value("seed", c.seed);
  c.k = j.value("k", c.k);
  if (j.contains("folds_to_run")) c.folds_to_run = index_list(j.at("folds_to_run"));
  if (j.contains("train")) c.train = adapt::train_config_from_json(j.at("train"));
  if (j.contains("methods")) {
    for (const auto& m : j.at("methods")) {
      const json entry = m.is_string() ? json{{"method", m}} : m;
      if (!entry.contains("method")) throw ConfigError("method entry without a method");
      MethodEntry e;
      e.config = adapt::train_config_from_json(entry, c.train);
      e.name = entry.value("name", adapt::to_string(e.config.method));
      c.methods.push_back(std::move(e));
    }
  }
  if (j.contains("wilcoxon_pairs")) {
    c.wilcoxon_pairs.clear();
    for (const auto& p : j.at("wilcoxon_pairs")) {
      c.wilcoxon_pairs.emplace_back(p.at(0).get<std::string>(), p.at(1).get<std::string>());
    }
  }
  if (j.contains("sweep")) {
    const auto& s = j.at("sweep");
    if (s.contains("methods")) {
      c.sweep.methods.clear();
      for (const auto& m : s.at("methods")) c.sweep.methods.push_back(adapt::method_from_string(m.get<std::string>()));
    }
    if (s.contains("alpha_grid")) c.sweep.alpha_grid = s.at("alpha_grid").get<std::vector<double>>();
    if (s.contains("lambda_grid")) c.sweep.lambda_grid = s.at("lambda_grid").get<std::vector<double>>();
    if (s.contains("folds_to_run")) c.sweep.folds_to_run = index_list(s.at("folds_to_run"));
  }
  if (j.contains("ablation")) {
    const auto& a = j.at("ablation");
    if (a.contains("methods")) c.ablation.methods = a.at("methods").get<std::vector<std::string>>();
    if (a.contains("train_families")) c.ablation.train_families = index_list(a.at("train_families"));
    c.ablation.lesion_free_pairs = a.value("lesion_free_pairs", c.ablation.lesion_free_pairs);
    if (a.contains("folds_to_run")) c.ablation.folds_to_run = index_list(a.at("folds_to_run"));
  }
  c.save_checkpoints = j.value("save_checkpoints", c.save_checkpoints);
  c.validate();
  return c;
}

json to_json(const ExperimentConfig& c) {
  json methods = json::array();
  for (const auto& m : c.methods) {
    json e = adapt::to_json(m.config);
    e["name"] = m.name;
    methods.push_back(e);
  }
  json pairs = json::array();
  for (const auto& [a, b] : c.wilcoxon_pairs) pairs.push_back({a, b});
  json sweep_methods = json::array();
  for (Method m : c.sweep.methods) sweep_methods.push_back(adapt::to_string(m));
  json j{{"dataset", io::to_json(c.dataset)},
         {"seed", c.seed},
         {"k", c.k},
         {"folds_to_run", c.folds_to_run},
         {"train", adapt::to_json(c.train)},
         {"methods", methods},
         {"wilcoxon_pairs", pairs},
         {"sweep",
          {{"methods", sweep_methods},
           {"alpha_grid", c.sweep.alpha_grid},
           {"lambda_grid", c.sweep.lambda_grid},
           {"folds_to_run", c.sweep.folds_to_run}}},
         {"ablation",
          {{"methods", c.ablation.methods},
           {"train_families", c.ablation.train_families},
           {"lesion_free_pairs", c.ablation.lesion_free_pairs},
           {"folds_to_run", c.ablation.folds_to_run}}},
         {"save_checkpoints", c.save_checkpoints}};
  if (c.dataset_dir) j["dataset_dir"] = c.dataset_dir->string();
  return j;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  try {
    return experiment_config_from_json(json::parse(io::read_text(path)));
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::vector<MethodEntry> method_entries(const ExperimentConfig& c) {
  std::vector<MethodEntry> out = c.methods;
  if (out.empty()) {
    for (Method m : adapt::all_methods()) {
      adapt::TrainConfig t = c.train;
      t.method = m;
      out.push_back({adapt::to_string(m), t});
    }
  }
  for (auto& e : out) e.config.seed = c.seed;
  return out;
}

metrics::CrossValOptions cv_options(const ExperimentConfig& c, const std::vector<std::size_t>& folds,
                                    std::optional<fs::path> checkpoint_root) {
  metrics::CrossValOptions o;
  o.k = c.k;
  o.seed = c.seed;
  o.folds_to_run = folds;
  if (c.save_checkpoints) o.checkpoint_root = std::move(checkpoint_root);
  return o;
}

namespace {

std::vector<double> fold_values(const metrics::MetricsReport& r, bool consistency) {
  std::vector<double> v;
  for (const auto& f : r.folds) v.push_back(consistency ? f.consistency.mean : f.target_dice);
  return v;
}

/// Per-image scores averaged over folds.
std::vector<double> image_values(const metrics::MetricsReport& r, bool consistency) {
  std::vector<double> v;
  for (const auto& f : r.folds) {
    std::vector<double> x;
    if (consistency) {
      for (const auto& p : f.consistency.pairs) x.push_back(p.dice);
    } else {
      x = f.target_per_volume;
    }
    if (v.empty()) v.assign(x.size(), 0.0);
    if (x.size() != v.size()) throw InvalidInput("folds disagree on the number of test images");
    for (std::size_t i = 0; i < x.size(); ++i) v[i] += x[i] / static_cast<double>(r.folds.size());
  }
  return v;
}

std::vector<std::size_t> fold_ids(const metrics::MetricsReport& r) {
  std::vector<std::size_t> ids;
  for (const auto& f : r.folds) ids.push_back(f.fold);
  return ids;
}

json to_json(const PValue& p) {
  return {{"a", p.a}, {"b", p.b}, {"metric", p.metric}, {"setup", p.setup},
          {"p", p.p ? json(*p.p) : json(nullptr)}, {"note", p.note}};
}

json summary_row(const metrics::MetricsReport& r) {
  json family = json::array();
  for (std::size_t i = 0; i < r.families.size(); ++i) {
    const auto s = r.family_consistency(i);
    family.push_back({{"family", r.families[i]},
                      {"mean", s ? json(s->mean) : json(nullptr)},
                      {"std", s ? json(s->std) : json(nullptr)}});
  }
  return {{"name", r.name},
          {"folds", fold_ids(r)},
          {"source_dice", {{"mean", r.source_val().mean}, {"std", r.source_val().std}}},
          {"target_dice", {{"mean", r.target().mean}, {"std", r.target().std}}},
          {"consistency", {{"mean", r.consistency().mean}, {"std", r.consistency().std}}},
          {"pooled_consistency", r.pooled_consistency().mean},
          {"family_consistency", family}};
}

void write_report(const metrics::MetricsReport& r, const fs::path& path) {
  fs::create_directories(path.parent_path());
  io::write_text(path, metrics::to_json(r).dump(2));
}

}  // namespace

std::vector<PValue> compare_reports(const metrics::MetricsReport& a, const metrics::MetricsReport& b) {
  std::vector<PValue> out;
  if (fold_ids(a) != fold_ids(b)) throw InvalidInput("reports cover different folds");
  for (bool consistency : {false, true}) {
    const std::string metric = consistency ? "consistency" : "target_dice";
    for (bool per_image : {false, true}) {
      PValue p{a.name, b.name, metric, per_image ? "per_image" : "fold_mean", std::nullopt, ""};
      try {
        const auto x = per_image ? image_values(a, consistency) : fold_values(a, consistency);
        const auto y = per_image ? image_values(b, consistency) : fold_values(b, consistency);
        p.p = metrics::wilcoxon_one_sided(x, y, metrics::Alternative::less);
      } catch (const std::exception& e) {
        p.note = e.what();
      }
      out.push_back(std::move(p));
    }
  }
  return out;
}

ComparisonResult run_comparison(const ExperimentConfig& c, const datagen::Datasets& ds, const fs::path& out) {
  ComparisonResult result;
  for (const auto& e : method_entries(c)) {
    std::clog << "[compare] " << e.name << '\n';
    try {
      auto r = metrics::cross_validate(e.config, ds, cv_options(c, c.folds_to_run, out / "checkpoints" / e.name));
      r.name = e.name;
      write_report(r, out / "reports" / (e.name + ".json"));
      result.reports.push_back(std::move(r));
    } catch (const std::exception& ex) {
      std::clog << "[compare] " << e.name << " failed: " << ex.what() << '\n';
      result.errors[e.name] = ex.what();
    }
  }
  auto find = [&](const std::string& name) -> const metrics::MetricsReport* {
    for (const auto& r : result.reports) {
      if (r.name == name) return &r;
    }
    return nullptr;
  };
  for (const auto& [a, b] : c.wilcoxon_pairs) {
    const auto* ra = find(a);
    const auto* rb = find(b);
    if (!ra || !rb) continue;
    for (auto& p : compare_reports(*ra, *rb)) result.p_values.push_back(std::move(p));
  }

  fs::create_directories(out);
  io::write_text(out / "comparison.csv", metrics::comparison_csv(result.reports));
  json rows = json::array(), ps = json::array();
  for (const auto& r : result.reports) rows.push_back(summary_row(r));
  for (const auto& p : result.p_values) ps.push_back(to_json(p));
  io::write_text(out / "comparison.json", json{{"rows", rows}, {"errors", result.errors}, {"p_values", ps}}.dump(2));
  return result;
}

std::optional<double> select_weight(const std::vector<SweepPoint>& points) {
  std::vector<const SweepPoint*> ok;
  for (const auto& p : points) {
    if (p.report && !p.report->folds.empty()) ok.push_back(&p);
  }
  if (ok.empty()) return std::nullopt;
  std::sort(ok.begin(), ok.end(), [](auto* x, auto* y) { return x->weight < y->weight; });
  double var = 0.0;
  for (const auto* p : ok) var += std::pow(p->report->source_val().std, 2);
  const double pooled = std::sqrt(var / static_cast<double>(ok.size()));
  const double floor = ok.front()->report->source_val().mean - pooled;
  double chosen = ok.front()->weight;
  // Walk up the grid until the first point that drops below the band.
  for (const auto* p : ok) {
    if (p->report->source_val().mean < floor) break;
    chosen = p->weight;
  }
  return chosen;
}

std::string sweep_csv(const SweepResult& r) {
  std::ostringstream ss;
  ss << "method,weight,source_dice_mean,source_dice_std,target_dice_mean,target_dice_std,consistency_mean,"
        "consistency_std,error\n";
  for (const auto& p : r.points) {
    ss << adapt::to_string(p.method) << ',' << std::setprecision(9) << p.weight << std::fixed << std::setprecision(6);
    if (p.report) {
      const auto s = p.report->source_val(), t = p.report->target(), c = p.report->consistency();
      ss << ',' << s.mean << ',' << s.std << ',' << t.mean << ',' << t.std << ',' << c.mean << ',' << c.std << ',';
    } else {
      ss << ",,,,,,,\"" << p.error << '"';
    }
    ss << std::defaultfloat << '\n';
  }
  return ss.str();
}

SweepResult run_tradeoff_sweep(const ExperimentConfig& c, const datagen::Datasets& ds, const fs::path& out) {
  if (c.sweep.methods.empty()) throw ConfigError("sweep has no methods");
  SweepResult result;
  for (Method m : c.sweep.methods) {
    const bool lam = adapt::uses_discriminator(m);
    const auto& grid = lam ? c.sweep.lambda_grid : c.sweep.alpha_grid;
    if (grid.empty()) throw ConfigError("sweep grid is empty");
    std::vector<SweepPoint> points;
    for (std::size_t i = 0; i < grid.size(); ++i) {
      SweepPoint p{m, grid[i], std::nullopt, ""};
      adapt::TrainConfig t = c.train;
      t.method = m;
      t.seed = c.seed;
      (lam ? t.lambda : t.alpha) = grid[i];
      const std::string tag = adapt::to_string(m) + "_" + std::to_string(i);
      std::clog << "[sweep] " << tag << " weight=" << grid[i] << '\n';
      try {
        auto r = metrics::cross_validate(t, ds, cv_options(c, c.sweep.folds_to_run, out / "checkpoints" / tag));
        r.name = tag;
        write_report(r, out / "reports" / (tag + ".json"));
        p.report = std::move(r);
      } catch (const std::exception& e) {
        std::clog << "[sweep] " << tag << " failed: " << e.what() << '\n';
        p.error = e.what();
      }
      points.push_back(std::move(p));
    }
    if (const auto w = select_weight(points)) result.selected[m] = *w;

    plot::Figure fig;
    fig.title = "Trade-off for " + adapt::to_string(m);
    fig.x_label = lam ? "lambda" : "alpha";
    fig.y_label = "Dice";
    plot::Series src{"source Dice", {}, {}, {}}, tgt{"target Dice", {}, {}, {}}, con{"consistency", {}, {}, {}};
    for (const auto& p : points) {
      if (!p.report || !(p.weight > 0)) continue;
      const auto s = p.report->source_val(), t = p.report->target(), cs = p.report->consistency();
      for (auto [series, sum] : {std::pair{&src, s}, std::pair{&tgt, t}, std::pair{&con, cs}}) {
        series->x.push_back(p.weight);
        series->y.push_back(sum.mean);
        series->err.push_back(sum.std);
      }
    }
    fig.log_x = true;
    fig.series = {src, tgt, con};
    fs::create_directories(out);
    io::write_text(out / ("tradeoff_" + adapt::to_string(m) + ".svg"), plot::render_svg(fig));
    for (auto& p : points) result.points.push_back(std::move(p));
  }

  io::write_text(out / "sweep.csv", sweep_csv(result));
  json pts = json::array(), sel = json::object();
  for (const auto& p : result.points) {
    pts.push_back({{"method", adapt::to_string(p.method)},
                   {"weight", p.weight},
                   {"summary", p.report ? summary_row(*p.report) : json(nullptr)},
                   {"error", p.error}});
  }
  for (const auto& [m, w] : result.selected) sel[adapt::to_string(m)] = w;
  io::write_text(out / "sweep.json", json{{"points", pts}, {"selected", sel}}.dump(2));
  return result;
}

std::vector<datagen::PairedVolume> ablation_pairs(const ExperimentConfig& c, const datagen::Datasets& ds) {
  std::vector<datagen::PairedVolume> source;
  if (c.ablation.lesion_free_pairs) {
    datagen::DatasetConfig free = c.dataset;
    free.families = ds.families;
    free.paired_lesion_count = std::pair{0, 0};
    source = datagen::build_paired(free, c.seed).first.volumes;
  } else {
    source = ds.paired_train.volumes;
  }
  for (auto f : c.ablation.train_families) {
    if (f >= ds.families.size()) throw ConfigError("ablation family index out of range");
  }
  std::vector<datagen::PairedVolume> out;
  for (auto& v : source) {
    if (std::ranges::find(c.ablation.train_families, v.family) != c.ablation.train_families.end()) {
      out.push_back(std::move(v));
    }
  }
  if (out.empty()) throw ConfigError("ablation selects no training pairs");
  return out;
}

std::string ablation_csv(const AblationResult& r) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(6);
  ss << "method";
  for (std::size_t i = 0; i < r.families.size(); ++i) {
    const std::string col = r.families[i] + (r.seen[i] ? " (seen)" : " (unseen)");
    ss << ',' << col << "_mean," << col << "_std";
  }
  ss << ",seen_mean,unseen_mean,error\n";
  for (const auto& row : r.rows) {
    ss << row.name;
    if (!row.report) {
      for (std::size_t i = 0; i < r.families.size(); ++i) ss << ",,";
      ss << ",,\"" << row.error << "\"\n";
      continue;
    }
    double seen = 0, unseen = 0;
    int ns = 0, nu = 0;
    for (std::size_t i = 0; i < r.families.size(); ++i) {
      const auto s = row.report->family_consistency(i);
      if (!s) {
        ss << ",,";
        continue;
      }
      ss << ',' << s->mean << ',' << s->std;
      (r.seen[i] ? seen : unseen) += s->mean;
      ++(r.seen[i] ? ns : nu);
    }
    ss << ',';
    if (ns) ss << seen / ns;
    ss << ',';
    if (nu) ss << unseen / nu;
    ss << ",\n";
  }
  return ss.str();
}

AblationResult run_generalization_ablation(const ExperimentConfig& c, const datagen::Datasets& ds,
                                           const fs::path& out) {
  if (ds.families.size() < 3) throw ConfigError("the ablation needs at least 3 kernel-pair families");
  AblationResult result;
  result.lesion_free_pairs = c.ablation.lesion_free_pairs;
  for (std::size_t f = 0; f < ds.families.size(); ++f) {
    result.families.push_back(ds.families[f].name);
    result.seen.push_back(std::ranges::find(c.ablation.train_families, f) != c.ablation.train_families.end());
  }
  const auto pairs = ablation_pairs(c, ds);
  for (const auto& name : c.ablation.methods) {
    AblationRow row{name, std::nullopt, ""};
    std::clog << "[ablate] " << name << '\n';
    try {
      adapt::TrainConfig t = c.train;
      t.method = adapt::method_from_string(name);
      for (const auto& e : c.methods) {
        if (e.name == name) t = e.config;
      }
      t.seed = c.seed;
      auto r = metrics::cross_validate(t, ds, cv_options(c, c.ablation.folds_to_run, out / "checkpoints" / name),
                                       std::span<const datagen::PairedVolume>(pairs));
      r.name = name;
      write_report(r, out / "reports" / (name + ".json"));
      row.report = std::move(r);
    } catch (const std::exception& e) {
      std::clog << "[ablate] " << name << " failed: " << e.what() << '\n';
      row.error = e.what();
    }
    result.rows.push_back(std::move(row));
  }

  fs::create_directories(out);
  io::write_text(out / "ablation.csv", ablation_csv(result));
  json rows = json::array();
  for (const auto& row : result.rows) {
    rows.push_back({{"name", row.name}, {"summary", row.report ? summary_row(*row.report) : json(nullptr)},
                    {"error", row.error}});
  }
  io::write_text(out / "ablation.json", json{{"families", result.families},
                                             {"seen", result.seen},
                                             {"lesion_free_pairs", result.lesion_free_pairs},
                                             {"train_pairs", pairs.size()},
                                             {"rows", rows}}
                                            .dump(2));
  return result;
}

}  // namespace kshift::expcli
