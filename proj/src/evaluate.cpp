#include "kshift/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <stdexcept>

#include "kshift/checkpoint.hpp"
#include "kshift/dataset_io.hpp"
#include "kshift/errors.hpp"
#include "kshift/stats.hpp"

namespace kshift::metrics {

using nlohmann::json;

std::vector<Mask2D> predict_masks(adapt::Model& model, std::span<const Image2D> images) {
  if (images.empty()) return {};
  std::vector<torch::Tensor> stack;
  stack.reserve(images.size());
  for (const auto& img : images) stack.push_back(adapt::to_tensor(img));
  const auto logits = adapt::predict_logits(model, torch::stack(stack)).to(torch::kFloat32).contiguous();
  const auto binary = logits.ge(0.0).to(torch::kUInt8).contiguous();

  std::vector<Mask2D> out;
  const auto* p = binary.data_ptr<std::uint8_t>();
  for (const auto& img : images) {
    Mask2D m(img.rows, img.cols);
    std::copy(p, p + m.data.size(), m.data.begin());
    p += m.data.size();
    out.push_back(std::move(m));
  }
  return out;
}

double volume_dice(adapt::Model& model, const datagen::LabeledVolume& volume) {
  std::vector<Image2D> images;
  std::vector<Mask2D> truth;
  for (const auto& s : volume.slices) {
    images.push_back(s.image);
    truth.push_back(s.lesion);
  }
  return dice(predict_masks(model, images), truth);
}

ConsistencyScores summarize_consistency(std::vector<PairConsistency> pairs,
                                        std::span<const datagen::KernelPairFamily> families) {
  ConsistencyScores out;
  out.pairs = std::move(pairs);
  std::vector<double> sums(families.size(), 0.0);
  out.family_sizes.assign(families.size(), 0);
  double pooled = 0.0;
  for (const auto& p : out.pairs) {
    if (p.family >= families.size()) throw InvalidInput("pair " + p.id + " has an unknown family");
    sums[p.family] += p.dice;
    ++out.family_sizes[p.family];
    pooled += p.dice;
  }
  std::size_t present = 0;
  for (std::size_t f = 0; f < families.size(); ++f) {
    out.families.push_back(families[f].name);
    if (out.family_sizes[f] == 0) {
      std::clog << "warning: no test pairs for family " << families[f].name << ", excluded\n";
      out.per_family.push_back(std::nullopt);
      continue;
    }
    const double m = sums[f] / static_cast<double>(out.family_sizes[f]);
    out.per_family.push_back(m);
    out.mean += m;
    ++present;
  }
  if (present > 0) out.mean /= static_cast<double>(present);
  if (!out.pairs.empty()) out.pooled = pooled / static_cast<double>(out.pairs.size());
  return out;
}

ConsistencyScores consistency_dice(adapt::Model& model, std::span<const datagen::PairedVolume> paired,
                                   std::span<const datagen::KernelPairFamily> families) {
  std::vector<PairConsistency> pairs;
  for (const auto& v : paired) {
    const auto a = predict_masks(model, v.smooth);
    const auto b = predict_masks(model, v.sharp);
    pairs.push_back({v.id, v.family, dice(a, b)});
  }
  return summarize_consistency(std::move(pairs), families);
}

PairedSegmentation paired_segmentation_dice(adapt::Model& model, const datagen::PairedSet& paired) {
  PairedSegmentation out;
  for (std::size_t i = 0; i < paired.volumes.size(); ++i) {
    const auto& v = paired.volumes[i];
    out.smooth.push_back(dice(predict_masks(model, v.smooth), paired.hidden_lesions[i]));
    out.sharp.push_back(dice(predict_masks(model, v.sharp), paired.hidden_lesions[i]));
  }
  return out;
}

namespace {

Summary summarize(const std::vector<double>& v) { return {mean(v), stddev(v)}; }

template <class F>
Summary over_folds(const std::vector<FoldResult>& folds, F get) {
  std::vector<double> v;
  for (const auto& f : folds) v.push_back(get(f));
  return summarize(v);
}

}  // namespace

Summary MetricsReport::source_val() const {
  return over_folds(folds, [](const FoldResult& f) { return f.source_val_dice; });
}
Summary MetricsReport::target() const {
  return over_folds(folds, [](const FoldResult& f) { return f.target_dice; });
}
Summary MetricsReport::consistency() const {
  return over_folds(folds, [](const FoldResult& f) { return f.consistency.mean; });
}
Summary MetricsReport::pooled_consistency() const {
  return over_folds(folds, [](const FoldResult& f) { return f.consistency.pooled; });
}

std::optional<Summary> MetricsReport::family_consistency(std::size_t family) const {
  std::vector<double> v;
  for (const auto& f : folds) {
    if (family >= f.consistency.per_family.size() || !f.consistency.per_family[family]) return std::nullopt;
    v.push_back(*f.consistency.per_family[family]);
  }
  if (v.empty()) return std::nullopt;
  return summarize(v);
}

PairedSegmentation MetricsReport::mean_paired_segmentation() const {
  PairedSegmentation out;
  if (folds.empty()) return out;
  const std::size_t n = folds.front().paired_segmentation.smooth.size();
  out.smooth.assign(n, 0.0);
  out.sharp.assign(n, 0.0);
  for (const auto& f : folds) {
    for (std::size_t i = 0; i < n; ++i) {
      out.smooth[i] += f.paired_segmentation.smooth.at(i) / static_cast<double>(folds.size());
      out.sharp[i] += f.paired_segmentation.sharp.at(i) / static_cast<double>(folds.size());
    }
  }
  return out;
}

std::uint64_t fold_seed(std::uint64_t seed, std::size_t fold) {
  return datagen::stream_rng(seed, 20, fold)() >> 1;
}

MetricsReport cross_validate(const adapt::TrainConfig& config, const datagen::Datasets& ds,
                             const CrossValOptions& options,
                             std::optional<std::span<const datagen::PairedVolume>> paired_train) {
  if (options.k < 2) throw ConfigError("cross-validation needs k >= 2");
  config.validate();
  const auto split = options.split ? *options.split : datagen::split_folds(ds.source.size(), options.k, options.seed);
  if (split.k != options.k || split.assignments.size() != ds.source.size()) {
    throw ConfigError("fold assignments do not match the source set");
  }
  auto by_id = [&](std::vector<std::size_t> idx) {
    std::ranges::sort(idx, [&](std::size_t a, std::size_t b) { return ds.source[a].id < ds.source[b].id; });
    return idx;
  };
  std::vector<std::size_t> folds = options.folds_to_run;
  if (folds.empty()) {
    for (std::size_t f = 0; f < options.k; ++f) folds.push_back(f);
  }
  const std::span<const datagen::PairedVolume> pairs =
      paired_train ? *paired_train : std::span<const datagen::PairedVolume>(ds.paired_train.volumes);

  MetricsReport report;
  report.name = adapt::to_string(config.method);
  report.config = config;
  report.k = options.k;
  for (const auto& fam : ds.families) report.families.push_back(fam.name);

  for (std::size_t f : folds) {
    if (f >= options.k) throw ConfigError("fold index " + std::to_string(f) + " out of range");
    try {
      std::vector<datagen::LabeledVolume> train_vols;
      for (std::size_t i : by_id(split.complement(f))) train_vols.push_back(ds.source[i]);

      adapt::TrainConfig fold_config = config;
      fold_config.seed = fold_seed(config.seed, f);
      auto trained = adapt::train(fold_config, {train_vols, pairs});
      auto& model = trained.model;

      FoldResult r;
      r.fold = f;
      r.train_seed = fold_config.seed;
      for (std::size_t i : by_id(split.fold(f))) r.source_val_per_volume.push_back(volume_dice(model, ds.source[i]));
      for (const auto& v : ds.target_test) r.target_per_volume.push_back(volume_dice(model, v));
      r.source_val_dice = mean(r.source_val_per_volume);
      r.target_dice = mean(r.target_per_volume);
      r.consistency = consistency_dice(model, ds.paired_test.volumes, ds.families);
      r.paired_segmentation = paired_segmentation_dice(model, ds.paired_test);

      if (options.checkpoint_root) {
        const std::string rel = "fold_" + std::to_string(f);
        adapt::save_checkpoint(model, *options.checkpoint_root / rel);
        io::write_text(*options.checkpoint_root / rel / "train_log.csv", adapt::log_csv(trained.log));
        r.checkpoint = rel;
        r.checkpoint_hash = io::file_hash(*options.checkpoint_root / rel / "params.bin");
      }
      report.folds.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw std::runtime_error("fold " + std::to_string(f) + ": " + e.what());
    }
  }
  return report;
}

json to_json(const ConsistencyScores& c) {
  json per_family = json::array();
  for (std::size_t f = 0; f < c.families.size(); ++f) {
    per_family.push_back({{"family", c.families[f]},
                          {"pairs", c.family_sizes[f]},
                          {"dice", c.per_family[f] ? json(*c.per_family[f]) : json(nullptr)}});
  }
  json pairs = json::array();
  for (const auto& p : c.pairs) pairs.push_back({{"id", p.id}, {"family", p.family}, {"dice", p.dice}});
  return {{"per_family", per_family}, {"mean", c.mean}, {"pooled", c.pooled}, {"pairs", pairs}};
}

namespace {

json to_json(const Summary& s) { return {{"mean", s.mean}, {"std", s.std}}; }

ConsistencyScores consistency_from_json(const json& j) {
  ConsistencyScores c;
  for (const auto& f : j.at("per_family")) {
    c.families.push_back(f.at("family").get<std::string>());
    c.family_sizes.push_back(f.at("pairs").get<std::size_t>());
    c.per_family.push_back(f.at("dice").is_null() ? std::nullopt : std::optional<double>(f.at("dice").get<double>()));
  }
  c.mean = j.at("mean").get<double>();
  c.pooled = j.at("pooled").get<double>();
  for (const auto& p : j.at("pairs")) {
    c.pairs.push_back({p.at("id").get<std::string>(), p.at("family").get<std::size_t>(), p.at("dice").get<double>()});
  }
  return c;
}

}  // namespace

json to_json(const MetricsReport& r) {
  json folds = json::array();
  for (const auto& f : r.folds) {
    folds.push_back({{"fold", f.fold},
                     {"train_seed", f.train_seed},
                     {"source_val_dice", f.source_val_dice},
                     {"target_dice", f.target_dice},
                     {"source_val_per_volume", f.source_val_per_volume},
                     {"target_per_volume", f.target_per_volume},
                     {"consistency", to_json(f.consistency)},
                     {"paired_dice_smooth", f.paired_segmentation.smooth},
                     {"paired_dice_sharp", f.paired_segmentation.sharp},
                     {"checkpoint", f.checkpoint},
                     {"checkpoint_hash", f.checkpoint_hash}});
  }
  json family = json::array();
  for (std::size_t i = 0; i < r.families.size(); ++i) {
    const auto s = r.family_consistency(i);
    family.push_back({{"family", r.families[i]}, {"consistency", s ? to_json(*s) : json(nullptr)}});
  }
  return {{"name", r.name},
          {"config", adapt::to_json(r.config)},
          {"k", r.k},
          {"families", r.families},
          {"summary",
           {{"source_val_dice", to_json(r.source_val())},
            {"target_dice", to_json(r.target())},
            {"consistency", to_json(r.consistency())},
            {"pooled_consistency", to_json(r.pooled_consistency())},
            {"family_consistency", family}}},
          {"folds", folds}};
}

MetricsReport report_from_json(const json& j) {
  MetricsReport r;
  r.name = j.at("name").get<std::string>();
  r.config = adapt::train_config_from_json(j.at("config"));
  r.k = j.at("k").get<std::size_t>();
  r.families = j.at("families").get<std::vector<std::string>>();
  for (const auto& f : j.at("folds")) {
    FoldResult fr;
    fr.fold = f.at("fold").get<std::size_t>();
    fr.train_seed = f.at("train_seed").get<std::uint64_t>();
    fr.source_val_dice = f.at("source_val_dice").get<double>();
    fr.target_dice = f.at("target_dice").get<double>();
    fr.source_val_per_volume = f.at("source_val_per_volume").get<std::vector<double>>();
    fr.target_per_volume = f.at("target_per_volume").get<std::vector<double>>();
    fr.consistency = consistency_from_json(f.at("consistency"));
    fr.paired_segmentation.smooth = f.at("paired_dice_smooth").get<std::vector<double>>();
    fr.paired_segmentation.sharp = f.at("paired_dice_sharp").get<std::vector<double>>();
    fr.checkpoint = f.at("checkpoint").get<std::string>();
    fr.checkpoint_hash = f.at("checkpoint_hash").get<std::string>();
    r.folds.push_back(std::move(fr));
  }
  return r;
}

std::string comparison_csv(std::span<const MetricsReport> reports) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(6);
  const auto& families = reports.empty() ? std::vector<std::string>{} : reports.front().families;
  ss << "method,source_dice_mean,source_dice_std,target_dice_mean,target_dice_std";
  for (const auto& f : families) ss << ',' << f << "_mean," << f << "_std";
  ss << ",consistency_mean,consistency_std,pooled_consistency_mean\n";
  for (const auto& r : reports) {
    if (r.families != families) throw InvalidInput("reports disagree on kernel-pair families");
    const auto s = r.source_val(), t = r.target(), c = r.consistency();
    ss << r.name << ',' << s.mean << ',' << s.std << ',' << t.mean << ',' << t.std;
    for (std::size_t i = 0; i < families.size(); ++i) {
      if (const auto fc = r.family_consistency(i)) {
        ss << ',' << fc->mean << ',' << fc->std;
      } else {
        ss << ",,";
      }
    }
    ss << ',' << c.mean << ',' << c.std << ',' << r.pooled_consistency().mean << '\n';
  }
  return ss.str();
}

}  // namespace kshift::metrics
