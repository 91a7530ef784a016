// Acceptance suite: one PASS/FAIL line per criterion, experiments on the desk-scale synthetic build.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <sstream>

#include <CLI11.hpp>
#include <torch/torch.h>

#include "kshift/dataset_io.hpp"
#include "kshift/errors.hpp"
#include "kshift/experiment.hpp"
#include "kshift/losses.hpp"
#include "kshift/recon.hpp"
#include "kshift/stats.hpp"

namespace fs = std::filesystem;
using namespace kshift;

namespace {

struct Verdict {
  int id = 0;
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int digits = 3) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(digits) << v;
  return ss.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

const metrics::MetricsReport* find_report(const std::vector<metrics::MetricsReport>& reports, const std::string& name) {
  for (const auto& r : reports) {
    if (r.name == name) return &r;
  }
  return nullptr;
}

// ---------------------------------------------------------------------------------------------
// Criterion 6 oracles.

Image2D centered_disk(std::size_t n, double radius_px) {
  Image2D img(n, n);
  const double c = 0.5 * static_cast<double>(n - 1);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t col = 0; col < n; ++col) {
      if (std::hypot(r - c, col - c) <= radius_px) img(r, col) = 1.0;
    }
  }
  return img;
}

double radon_mass_error() {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Image2D img(48, 48, 1.75);
  for (double& v : img.data) v = u(rng);
  double mass = 0.0;
  for (double v : img.data) mass += v * img.pixel_area();
  const auto sino = recon::radon(img, 90);
  double worst = 0.0;
  for (std::size_t a = 0; a < sino.n_angles; ++a) {
    double proj = 0.0;
    for (double v : sino.projection(a)) proj += v * sino.detector_spacing;
    worst = std::max(worst, std::abs(proj - mass) / std::abs(mass));
  }
  return worst;
}

double disk_round_trip_rmse() {
  const double radius = 20.0;
  const auto truth = centered_disk(64, radius);
  const auto rec = recon::reconstruct(recon::radon(truth, 180), {0.0, 1.0}, 64);
  const double c = 31.5;
  double err = 0.0, norm = 0.0;
  for (std::size_t r = 0; r < 64; ++r) {
    for (std::size_t col = 0; col < 64; ++col) {
      if (std::hypot(r - c, col - c) > radius - 2.0) continue;
      err += std::pow(rec(r, col) - truth(r, col), 2);
      norm += std::pow(truth(r, col), 2);
    }
  }
  return std::sqrt(err / norm);
}

template <class F>
double gradient_error(F loss, torch::Tensor x, double h = 1e-6) {
  x = x.detach().clone().set_requires_grad(true);
  loss(x).backward();
  const auto grad = x.grad().clone().view({-1});
  torch::NoGradGuard guard;
  auto flat = x.view({-1});
  double worst = 0.0;
  for (int64_t i = 0; i < flat.numel(); ++i) {
    const double orig = flat[i].item<double>();
    flat[i] = orig + h;
    const double up = loss(x).template item<double>();
    flat[i] = orig - h;
    const double down = loss(x).template item<double>();
    flat[i] = orig;
    const double fd = (up - down) / (2 * h), g = grad[i].item<double>();
    worst = std::max(worst, std::abs(fd - g) / std::max({std::abs(fd), std::abs(g), 1e-8}));
  }
  return worst;
}

Verdict criterion_oracles() {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<std::string> failures;
  auto check = [&](bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  };

  const double mass = radon_mass_error();
  check(mass < 1e-3, "radon mass " + fmt(mass, 6));
  const double rmse = disk_round_trip_rmse();
  check(rmse < 0.05, "disk rmse " + fmt(rmse, 4));

  constexpr auto f64 = torch::kFloat64;
  torch::manual_seed(6);
  const auto y = (torch::rand({2, 1, 4, 4}, f64) > 0.5).to(f64);
  const double seg = gradient_error([&](const torch::Tensor& x) { return adapt::segmentation_loss(x, y); },
                                    torch::randn({2, 1, 4, 4}, f64));
  const auto d = torch::tensor({0.0, 1.0, 1.0, 0.0}, f64);
  const double dom =
      gradient_error([&](const torch::Tensor& x) { return adapt::domain_loss(x, d); }, torch::randn({4}, f64));
  const std::vector<torch::Tensor> other{torch::randn({2, 3, 4, 4}, f64), torch::randn({2, 2, 2, 2}, f64)};
  const double fc = gradient_error(
      [&](const torch::Tensor& x) {
        return adapt::f_consistency_loss({x.slice(0, 0, 96).view({2, 3, 4, 4}), x.slice(0, 96, 112).view({2, 2, 2, 2})},
                                         other);
      },
      torch::randn({112}, f64));
  const auto q = torch::rand({3, 1, 4, 4}, f64);
  const double pc = gradient_error([&](const torch::Tensor& x) { return adapt::p_consistency_loss(x, q); },
                                   0.05 + 0.9 * torch::rand({3, 1, 4, 4}, f64));
  check(seg < 1e-4, "segmentation grad " + fmt(seg, 8));
  check(dom < 1e-4, "domain grad " + fmt(dom, 8));
  check(fc < 1e-5, "f-consistency grad " + fmt(fc, 8));
  check(pc < 1e-4, "p-consistency grad " + fmt(pc, 8));

  auto x = torch::tensor(3.0, f64).set_requires_grad(true);
  segnet::grad_reverse(x, 2.0).pow(2).backward();
  const double grl = x.grad().item<double>();
  check(std::abs(grl + 12.0) < 1e-6, "grad_reverse " + fmt(grl, 8));

  const std::vector<double> a{1, 2, 3, 4, 5}, b{2, 4, 6, 8, 10};
  const double p5 = metrics::wilcoxon_one_sided(a, b);
  check(std::abs(p5 - 1.0 / 32.0) < 1e-12, "wilcoxon n=5 " + fmt(p5, 6));
  const std::vector<double> d12{-0.3, -1.2, 0.7, -2.1, -0.15, -0.9, 0.45, -1.6, -0.05, -0.8, 0.25, -1.05};
  const std::vector<double> zeros(d12.size(), 0.0);
  const auto sr = metrics::signed_ranks(d12, zeros);
  const double exact = metrics::wilcoxon_exact(sr, metrics::Alternative::less);
  const double normal = metrics::wilcoxon_normal(sr, metrics::Alternative::less);
  check(std::abs(exact - normal) < 0.02, "wilcoxon n=12 exact " + fmt(exact, 4) + " normal " + fmt(normal, 4));

  Mask2D full(4, 4), empty(4, 4), half(4, 4);
  std::fill(full.data.begin(), full.data.end(), 1);
  for (std::size_t i = 0; i < 8; ++i) half.data[i] = 1;
  Mask2D shifted(4, 4);
  for (std::size_t i = 0; i < 8; ++i) shifted.data[i + 4] = 1;
  check(metrics::dice(full, full) == 1.0, "dice identical");
  check(metrics::dice(full, empty) == 0.0, "dice disjoint");
  check(metrics::dice(half, shifted) == 0.5, "dice half overlap");

  const double secs = seconds_since(t0);
  check(secs < 60.0, "runtime " + fmt(secs, 1) + " s");
  std::string detail = "radon " + fmt(mass, 6) + ", rmse " + fmt(rmse, 4) + ", grads " + fmt(std::max({seg, dom, pc}), 7) +
                       "/" + fmt(fc, 7) + ", grl " + fmt(grl, 3) + ", p5 " + fmt(p5, 5) + ", |exact-normal| " +
                       fmt(std::abs(exact - normal), 4) + ", " + fmt(secs, 1) + " s";
  for (const auto& f : failures) detail += "; FAILED " + f;
  return {6, failures.empty(), detail};
}

// ---------------------------------------------------------------------------------------------
// Criterion 7: equal-seed CLI runs produce identical reports and checkpoints.

fs::path only_subdirectory(const fs::path& root) {
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory()) dirs.push_back(e.path());
  }
  if (dirs.size() != 1) throw InvalidInput("expected one run directory under " + root.string());
  return dirs.front();
}

// Files whose bytes must agree between runs, relative to the run directory.
std::vector<fs::path> artifacts(const fs::path& run) {
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(run)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), run);
    const auto top = rel.begin()->string();
    if (top == "reports" || top == "checkpoints" || top == "checkpoint" || top == "comparison.csv") out.push_back(rel);
  }
  std::sort(out.begin(), out.end());
  return out;
}

fs::path cli_run(const fs::path& cli, const fs::path& root, const std::string& args) {
  fs::remove_all(root);
  fs::create_directories(root);
  const std::string cmd = "KSHIFT_OUTPUT_ROOT='" + root.string() + "' '" + cli.string() + "' " + args + " > '" +
                          (root / "stdout.txt").string() + "' 2>&1";
  const int rc = std::system(cmd.c_str());
  if (rc != 0) throw InvalidInput("command failed (" + std::to_string(rc) + "): " + cmd);
  return only_subdirectory(root);
}

Verdict criterion_determinism(const fs::path& cli, const fs::path& config, const fs::path& work) {
  std::vector<std::string> failures;
  std::size_t compared = 0;
  const std::vector<std::string> commands{"train --method dann_enc --seed 4 --config '" + config.string() + "'",
                                          "train --method fbpaug --seed 4 --config '" + config.string() + "'",
                                          "compare --seed 4 --config '" + config.string() + "'"};
  try {
    for (std::size_t i = 0; i < commands.size(); ++i) {
      const auto a = cli_run(cli, work / ("cmd" + std::to_string(i) + "_a"), commands[i]);
      const auto b = cli_run(cli, work / ("cmd" + std::to_string(i) + "_b"), commands[i]);
      const auto files = artifacts(a);
      if (files.empty() || files != artifacts(b)) {
        failures.push_back("artifact lists differ for: " + commands[i]);
        continue;
      }
      for (const auto& f : files) {
        ++compared;
        if (io::read_text(a / f) != io::read_text(b / f)) failures.push_back(f.string() + " differs");
      }
    }
  } catch (const std::exception& e) {
    failures.push_back(e.what());
  }
  std::string detail = std::to_string(compared) + " files compared bytewise across " +
                       std::to_string(commands.size()) + " commands";
  for (const auto& f : failures) detail += "; " + f;
  return {7, failures.empty(), detail};
}

// ---------------------------------------------------------------------------------------------
// Criteria 1 to 5.

struct SweepOutcome {
  Verdict verdict;
  std::map<adapt::Method, double> selected;
};

SweepOutcome criterion_sweep(const expcli::ExperimentConfig& c, const datagen::Datasets& ds, const fs::path& out) {
  const auto result = expcli::run_tradeoff_sweep(c, ds, out);
  bool pass = true;
  std::string detail;
  for (auto m : c.sweep.methods) {
    std::vector<const expcli::SweepPoint*> pts;
    for (const auto& p : result.points) {
      if (p.method == m) pts.push_back(&p);
    }
    if (!detail.empty()) detail += "; ";
    detail += adapt::to_string(m) + ": ";
    if (pts.size() < 2 || !pts.front()->report || !pts.back()->report) {
      pass = false;
      detail += "missing end points";
      continue;
    }
    const auto& lo = *pts.front()->report;
    const auto& hi = *pts.back()->report;
    const double gain = hi.consistency().mean - lo.consistency().mean;
    const double src = hi.source_val().mean;
    pass = pass && gain >= 0.15 && src < 0.2;
    detail += "consistency " + fmt(lo.consistency().mean) + " -> " + fmt(hi.consistency().mean) + " (gain " +
              fmt(gain) + (gain >= 0.15 ? " >= " : " < ") + "0.15), source Dice at largest weight " + fmt(src) +
              (src < 0.2 ? " (< 0.2)" : " (>= 0.2)");
  }
  return {{4, pass, detail}, result.selected};
}

std::vector<Verdict> criteria_comparison(const expcli::ComparisonResult& r) {
  std::vector<Verdict> out;
  const auto* base = find_report(r.reports, "baseline");
  const auto* fe = find_report(r.reports, "fcons_enc");
  const auto* fd = find_report(r.reports, "fcons_dec");
  const auto* de = find_report(r.reports, "dann_enc");
  const auto* dd = find_report(r.reports, "dann_dec");

  if (base) {
    const double gap = base->source_val().mean - base->target().mean;
    const auto paired = base->mean_paired_segmentation();
    double p = 1.0;
    std::string note;
    try {
      p = metrics::wilcoxon_one_sided(paired.sharp, paired.smooth);
    } catch (const std::exception& e) {
      note = std::string(", test undefined: ") + e.what();
    }
    out.push_back({1, gap >= 0.03 && p < 0.05,
                   "source-val " + fmt(base->source_val().mean) + " vs target " + fmt(base->target().mean) + " (gap " +
                       fmt(gap) + (gap >= 0.03 ? " >= " : " < ") + "0.03); per-image sharp " +
                       fmt(metrics::mean(paired.sharp)) + " vs smooth " +
                       fmt(metrics::mean(paired.smooth)) + " over n=" + std::to_string(paired.smooth.size()) +
                       " volumes, one-sided Wilcoxon p = " + fmt(p, 6) + (p < 0.05 ? " (< 0.05)" : " (>= 0.05)") + note});
  } else {
    out.push_back({1, false, "baseline did not run"});
  }

  if (base && fe && de) {
    const double b = base->consistency().mean, f = fe->consistency().mean, dn = de->consistency().mean;
    const bool gain = f >= b + 0.10;
    const bool target = fe->target().mean >= base->target().mean;
    const bool order = f >= dn && dn >= b;
    out.push_back({2, gain && target && order,
                   "consistency baseline " + fmt(b) + ", dann_enc " + fmt(dn) + ", fcons_enc " + fmt(f) +
                       " (gain >= 0.10: " + (gain ? "yes" : "no") + ", order fcons_enc >= dann_enc >= baseline: " +
                       (order ? "yes" : "no") + "); target Dice " + fmt(base->target().mean) + " -> " +
                       fmt(fe->target().mean)});
  } else {
    out.push_back({2, false, "baseline, fcons_enc or dann_enc did not run"});
  }

  if (fe && fd && de && dd) {
    const bool fcons = fe->consistency().mean > fd->consistency().mean;
    const bool dann = de->consistency().mean > dd->consistency().mean;
    out.push_back({3, fcons && dann,
                   "F-Consistency enc " + fmt(fe->consistency().mean) + " vs dec " + fmt(fd->consistency().mean) +
                       "; DANN enc " + fmt(de->consistency().mean) + " vs dec " + fmt(dd->consistency().mean)});
  } else {
    out.push_back({3, false, "an encoder or decoder variant did not run"});
  }
  return out;
}

Verdict criterion_lesion_free(const expcli::AblationResult& r) {
  std::map<std::string, const metrics::MetricsReport*> by_name;
  for (const auto& row : r.rows) {
    if (row.report) by_name[row.name] = &*row.report;
  }
  if (!by_name.count("baseline") || !by_name.count("fcons_enc") || !by_name.count("pcons")) {
    return {5, false, "an ablation row did not run"};
  }
  const double b = by_name["baseline"]->consistency().mean;
  const double f = by_name["fcons_enc"]->consistency().mean;
  const double p = by_name["pcons"]->consistency().mean;
  const bool pass = f >= b + 0.05 && std::abs(p - b) <= 0.05;
  return {5, pass,
          "lesion-free pairs: consistency baseline " + fmt(b) + ", fcons_enc " + fmt(f) + (f >= b + 0.05 ? " (>= " : " (< ") +
              "baseline + 0.05), pcons " + fmt(p) + " (|diff| " + fmt(std::abs(p - b)) +
              (std::abs(p - b) <= 0.05 ? " <= " : " > ") + "0.05)"};
}

// Methods whose weight comes from the sweep take the selected value.
void apply_selected(std::vector<expcli::MethodEntry>& methods, const std::map<adapt::Method, double>& selected) {
  for (auto& m : methods) {
    const auto it = selected.find(m.config.method);
    if (it == selected.end()) continue;
    if (adapt::uses_discriminator(m.config.method)) {
      m.config.lambda = it->second;
    } else {
      m.config.alpha = it->second;
    }
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance suite"};
  std::string config_path, cli_config_path, work_dir = "acceptance_work", cli_path;
  std::vector<int> only;
  app.add_option("--config", config_path, "Experiment config for criteria 1-5")->required()->check(CLI::ExistingFile);
  app.add_option("--cli-config", cli_config_path, "Small config for the determinism runs")
      ->required()
      ->check(CLI::ExistingFile);
  app.add_option("--cli", cli_path, "Path to the kshift executable")->required()->check(CLI::ExistingFile);
  app.add_option("--work", work_dir, "Scratch directory (recreated)");
  app.add_option("--only", only, "Run only these criteria");
  CLI11_PARSE(app, argc, argv);
  at::set_num_threads(1);

  auto wanted = [&](int id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };
  const fs::path work = fs::absolute(work_dir);
  fs::remove_all(work);
  fs::create_directories(work);

  std::map<int, Verdict> verdicts;
  auto record = [&](Verdict v) {
    std::clog << "[criterion " << v.id << "] " << (v.pass ? "PASS" : "FAIL") << ": " << v.detail << std::endl;
    verdicts[v.id] = std::move(v);
  };
  auto guarded = [&](std::initializer_list<int> ids, const std::function<void()>& body) {
    try {
      body();
    } catch (const std::exception& e) {
      for (int id : ids) record({id, false, std::string("error: ") + e.what()});
    }
  };

  if (wanted(6)) guarded({6}, [&] { record(criterion_oracles()); });
  if (wanted(7)) {
    guarded({7}, [&] { record(criterion_determinism(fs::absolute(cli_path), fs::absolute(cli_config_path), work / "cli")); });
  }

  if (wanted(1) || wanted(2) || wanted(3) || wanted(4) || wanted(5)) {
    guarded({1, 2, 3, 4, 5}, [&] {
      auto config = expcli::load_experiment_config(config_path);
      auto t0 = std::chrono::steady_clock::now();
      const auto ds = datagen::build_datasets(config.dataset, config.seed);
      std::clog << "datasets built in " << fmt(seconds_since(t0), 1) << " s" << std::endl;

      std::map<adapt::Method, double> selected;
      if (wanted(4) || wanted(2) || wanted(3) || wanted(5)) {
        t0 = std::chrono::steady_clock::now();
        auto sweep = criterion_sweep(config, ds, work / "sweep");
        sweep.verdict.detail += " [" + fmt(seconds_since(t0) / 60.0, 1) + " min]";
        selected = sweep.selected;
        for (const auto& [m, w] : selected) std::clog << "selected weight " << adapt::to_string(m) << " = " << w << std::endl;
        if (wanted(4)) record(sweep.verdict);
      }
      apply_selected(config.methods, selected);

      if (wanted(1) || wanted(2) || wanted(3)) {
        t0 = std::chrono::steady_clock::now();
        const auto result = expcli::run_comparison(config, ds, work / "comparison");
        const std::string took = " [" + fmt(seconds_since(t0) / 60.0, 1) + " min]";
        for (auto v : criteria_comparison(result)) {
          if (!wanted(v.id)) continue;
          v.detail += took;
          record(v);
        }
      }

      if (wanted(5)) {
        auto ablation = config;
        ablation.ablation.lesion_free_pairs = true;
        ablation.ablation.train_families.clear();
        for (std::size_t i = 0; i < config.dataset.families.size(); ++i) ablation.ablation.train_families.push_back(i);
        // Rows missing from the comparison still get the swept weight.
        for (const auto& name : ablation.ablation.methods) {
          if (std::ranges::none_of(ablation.methods, [&](const auto& m) { return m.name == name; })) {
            auto t = config.train;
            t.method = adapt::method_from_string(name);
            ablation.methods.push_back({name, t});
          }
        }
        apply_selected(ablation.methods, selected);
        t0 = std::chrono::steady_clock::now();
        auto v = criterion_lesion_free(expcli::run_generalization_ablation(ablation, ds, work / "ablation"));
        v.detail += " [" + fmt(seconds_since(t0) / 60.0, 1) + " min]";
        record(v);
      }
    });
  }

  bool all = true;
  for (int id = 1; id <= 7; ++id) {
    if (!wanted(id)) continue;
    const auto it = verdicts.find(id);
    const Verdict v = it == verdicts.end() ? Verdict{id, false, "not evaluated"} : it->second;
    all = all && v.pass;
    std::cout << "criterion " << id << ": " << (v.pass ? "PASS" : "FAIL") << " - " << v.detail << '\n';
  }
  return all ? 0 : 1;
}
