#include "torch_doctest.hpp"

#include <cmath>
#include <random>

#include <torch/torch.h>

#include "kshift/checkpoint.hpp"
#include "kshift/errors.hpp"
#include "kshift/losses.hpp"
#include "kshift/train.hpp"

using namespace kshift;
using namespace kshift::adapt;

namespace {

constexpr auto f64 = torch::kFloat64;

// Small labeled volumes: a bright disk on noise, labeled by the disk.
std::vector<datagen::LabeledVolume> toy_labeled(std::size_t n_volumes, std::size_t side, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<datagen::LabeledVolume> out;
  for (std::size_t v = 0; v < n_volumes; ++v) {
    datagen::LabeledVolume vol;
    vol.id = "toy" + std::to_string(v);
    for (int s = 0; s < 2; ++s) {
      datagen::LabeledSlice slice{Image2D(side, side, 1.75), Mask2D(side, side), Mask2D(side, side)};
      const double cr = side * (0.3 + 0.4 * u(rng)), cc = side * (0.3 + 0.4 * u(rng)), rad = side * 0.15;
      for (std::size_t r = 0; r < side; ++r) {
        for (std::size_t c = 0; c < side; ++c) {
          const bool in = std::hypot(r - cr, c - cc) < rad;
          slice.image(r, c) = 0.2 * u(rng) + (in ? 0.6 : 0.1);
          slice.lesion(r, c) = in;
        }
      }
      slice.image.intensity = Intensity::normalized;
      vol.slices.push_back(std::move(slice));
    }
    out.push_back(std::move(vol));
  }
  return out;
}

// Pairs whose sharp image adds high-frequency noise to the smooth one.
std::vector<datagen::PairedVolume> toy_pairs(std::size_t n, std::size_t side, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 0.1);
  std::vector<datagen::PairedVolume> out;
  for (const auto& lv : toy_labeled(n, side, seed + 1)) {
    datagen::PairedVolume pv;
    pv.id = "pair_" + lv.id;
    for (const auto& s : lv.slices) {
      Image2D sharp = s.image;
      for (double& v : sharp.data) v += g(rng);
      pv.smooth.push_back(s.image);
      pv.sharp.push_back(sharp);
    }
    out.push_back(std::move(pv));
  }
  return out;
}

TrainConfig tiny_config(Method m, int iterations = 4) {
  TrainConfig c;
  c.method = m;
  c.iterations = iterations;
  c.lr_milestones = TrainConfig::scaled_milestones(iterations);
  c.batch_labeled = 4;
  c.batch_pairs = 2;
  c.lr = 1e-3;
  c.net = {2, 4, 1, 1};
  c.aggregate_channels = 8;
  c.seed = 3;
  return c;
}

double relative_error(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8}); }

/// Largest relative error between autograd and central differences over every coordinate of `x`.
template <class F>
double max_gradient_error(F loss, torch::Tensor x, double h = 1e-6) {
  x = x.detach().clone().set_requires_grad(true);
  loss(x).backward();
  const auto grad = x.grad().clone();
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
    worst = std::max(worst, relative_error((up - down) / (2 * h), grad.view({-1})[i].item<double>()));
  }
  return worst;
}

std::vector<torch::Tensor> trunk_grads(Model& m) {
  std::vector<torch::Tensor> g;
  for (const auto& p : m.trunk_parameters()) g.push_back(p.grad().defined() ? p.grad().clone() : torch::zeros_like(p));
  return g;
}

void zero_all(Model& m) {
  for (auto& p : m.trunk_parameters()) p.mutable_grad() = torch::Tensor();
  for (auto& p : m.discriminator_parameters()) p.mutable_grad() = torch::Tensor();
}

bool equal_all(const std::vector<torch::Tensor>& a, const std::vector<torch::Tensor>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!torch::equal(a[i], b[i])) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("segmentation loss examples") {
  const auto target = torch::tensor({1.0, 0.0, 1.0, 0.0}, f64);
  CHECK(segmentation_loss(torch::tensor({20.0, -20.0, 20.0, -20.0}, f64), target).item<double>() <= 1e-6);
  CHECK(segmentation_loss(torch::zeros({4}, f64), target).item<double>() == doctest::Approx(std::log(2.0)));
  // sigmoid outputs 0.8 and 0.4
  const auto logits = torch::tensor({std::log(0.8 / 0.2), std::log(0.4 / 0.6)}, f64);
  CHECK(segmentation_loss(logits, torch::tensor({1.0, 0.0}, f64)).item<double>() ==
        doctest::Approx(-(std::log(0.8) + std::log(0.6)) / 2).epsilon(1e-12));
  CHECK(segmentation_loss(logits, torch::tensor({1.0, 0.0}, f64)).item<double>() == doctest::Approx(0.3670).epsilon(1e-4));
  CHECK_THROWS_AS(segmentation_loss(torch::zeros({2}), torch::tensor({0.5, 1.0})), InvalidInput);
  CHECK_THROWS_AS(segmentation_loss(torch::zeros({3}), torch::zeros({2})), InvalidInput);
}

TEST_CASE("domain loss of a confused discriminator is ln 2") {
  CHECK(domain_loss(torch::zeros({6}, f64), torch::tensor({0.0, 1.0, 0.0, 1.0, 0.0, 1.0}, f64)).item<double>() ==
        doctest::Approx(std::log(2.0)));
  CHECK_THROWS_AS(domain_loss(torch::zeros({2}), torch::tensor({0.0, 2.0})), InvalidInput);
}

TEST_CASE("lambda schedule") {
  CHECK(lambda_schedule(0.0, 1.0) == 0.0);
  CHECK(lambda_schedule(1.0, 1.0) == doctest::Approx(2.0 / (1.0 + std::exp(-10.0)) - 1.0).epsilon(1e-12));
  CHECK(lambda_schedule(1.0, 1.0) == doctest::Approx(0.9999).epsilon(1e-4));
  CHECK(lambda_schedule(0.5, 0.01) == doctest::Approx(0.009866).epsilon(1e-4));
  CHECK(lambda_schedule(-0.5, 1.0) == 0.0);
  CHECK(lambda_schedule(2.0, 1.0) == lambda_schedule(1.0, 1.0));
  double prev = -1.0;
  for (int i = 0; i <= 100; ++i) {
    const double v = lambda_schedule(i / 100.0, 0.3);
    CHECK(v >= prev);
    prev = v;
  }
}

TEST_CASE("f-consistency loss examples") {
  const std::vector<torch::Tensor> a{torch::tensor({1.0, 2.0}, f64)}, b{torch::tensor({1.0, 4.0}, f64)};
  CHECK(f_consistency_loss(a, b).item<double>() == 2.0);
  CHECK(f_consistency_loss(a, a).item<double>() == 0.0);
  CHECK_THROWS_AS(f_consistency_loss(a, std::vector<torch::Tensor>{torch::zeros({3}, f64)}), InvalidInput);
  CHECK_THROWS_AS(f_consistency_loss(a, std::vector<torch::Tensor>{}), InvalidInput);

  // mean over sites of per-site MSE
  const std::vector<torch::Tensor> a2{torch::zeros({2}, f64), torch::zeros({4}, f64)};
  const std::vector<torch::Tensor> b2{torch::ones({2}, f64), torch::full({4}, 3.0, f64)};
  CHECK(f_consistency_loss(a2, b2).item<double>() == doctest::Approx((1.0 + 9.0) / 2));
}

TEST_CASE("f-consistency loss is symmetric and non-negative") {
  torch::manual_seed(0);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<torch::Tensor> a{torch::randn({2, 3, 4, 4}), torch::randn({2, 5, 2, 2})};
    std::vector<torch::Tensor> b{torch::randn({2, 3, 4, 4}), torch::randn({2, 5, 2, 2})};
    const auto ab = f_consistency_loss(a, b), ba = f_consistency_loss(b, a);
    CHECK(torch::equal(ab, ba));
    CHECK(ab.item<double>() >= 0.0);
  }
}

TEST_CASE("f-consistency loss on tap sets uses the filtered sites") {
  const segnet::TapSet a{{{segnet::SiteKind::encoder, 0}, torch::zeros({1, 1, 2, 2}, f64)},
                         {{segnet::SiteKind::decoder, 0}, torch::zeros({1, 1, 2, 2}, f64)}};
  const segnet::TapSet b{{{segnet::SiteKind::encoder, 0}, torch::ones({1, 1, 2, 2}, f64)},
                         {{segnet::SiteKind::decoder, 0}, torch::zeros({1, 1, 2, 2}, f64)}};
  CHECK(f_consistency_loss(a, b, segnet::SiteFilter::encoder).item<double>() == 1.0);
  CHECK(f_consistency_loss(a, b, segnet::SiteFilter::decoder).item<double>() == 0.0);
}

TEST_CASE("p-consistency loss examples") {
  CHECK(p_consistency_loss(torch::tensor({1.0, 0.0}, f64), torch::tensor({0.5, 0.5}, f64)).item<double>() ==
        doctest::Approx(1.0 / 3.0).epsilon(1e-12));

  const auto p = torch::tensor({0.9, 0.2, 0.7, 0.0}, f64);
  const double sum = p.sum().item<double>();
  const double self = p_consistency_loss(p, p).item<double>();
  CHECK(self >= 0.0);
  CHECK(self <= 1.0 / (2 * sum + 1.0) + 1e-12);

  const int64_t n = 100;
  CHECK(p_consistency_loss(torch::ones({n}, f64), torch::zeros({n}, f64)).item<double>() ==
        doctest::Approx(1.0 - 1.0 / (n + 1.0)).epsilon(1e-12));

  CHECK_THROWS_AS(p_consistency_loss(torch::tensor({1.2}), torch::tensor({0.5})), InvalidInput);
  CHECK_THROWS_AS(p_consistency_loss(torch::tensor({-0.1}), torch::tensor({0.5})), InvalidInput);
  CHECK_THROWS_AS(p_consistency_loss(torch::zeros({2}), torch::zeros({3})), InvalidInput);
}

TEST_CASE("p-consistency loss averages over items") {
  const auto a = torch::stack({torch::tensor({1.0, 0.0}, f64), torch::ones({2}, f64)});
  const auto b = torch::stack({torch::tensor({0.5, 0.5}, f64), torch::ones({2}, f64)});
  const double second = 1.0 - (2 * 2.0 + 1.0) / (2.0 + 2.0 + 1.0);
  CHECK(p_consistency_loss(a, b).item<double>() == doctest::Approx((1.0 / 3.0 + second) / 2));
}

TEST_CASE("loss gradients match central finite differences") {
  torch::manual_seed(1);
  SUBCASE("segmentation loss") {
    const auto y = (torch::rand({2, 1, 5, 5}, f64) > 0.5).to(f64);
    CHECK(max_gradient_error([&](const torch::Tensor& x) { return segmentation_loss(x, y); },
                             torch::randn({2, 1, 5, 5}, f64)) < 1e-4);
  }
  SUBCASE("domain loss") {
    const auto y = torch::tensor({0.0, 1.0, 1.0, 0.0}, f64);
    CHECK(max_gradient_error([&](const torch::Tensor& x) { return domain_loss(x, y); }, torch::randn({4}, f64)) <
          1e-4);
  }
  SUBCASE("f-consistency loss") {
    const std::vector<torch::Tensor> other{torch::randn({2, 3, 4, 4}, f64), torch::randn({2, 2, 2, 2}, f64)};
    auto loss = [&](const torch::Tensor& x) {
      std::vector<torch::Tensor> mine{x.slice(0, 0, 96).view({2, 3, 4, 4}), x.slice(0, 96, 112).view({2, 2, 2, 2})};
      return f_consistency_loss(mine, other);
    };
    CHECK(max_gradient_error(loss, torch::randn({112}, f64)) < 1e-5);
  }
  SUBCASE("p-consistency loss") {
    const auto q = torch::rand({3, 1, 4, 4}, f64);
    CHECK(max_gradient_error([&](const torch::Tensor& x) { return p_consistency_loss(x, q); },
                             0.05 + 0.9 * torch::rand({3, 1, 4, 4}, f64)) < 1e-4);
  }
  SUBCASE("p-consistency through the sigmoid") {
    const auto q = torch::rand({2, 1, 3, 3}, f64);
    CHECK(max_gradient_error([&](const torch::Tensor& x) { return p_consistency_loss(torch::sigmoid(x), q); },
                             torch::randn({2, 1, 3, 3}, f64)) < 1e-4);
  }
}

TEST_CASE("learning-rate milestones") {
  CHECK(TrainConfig::scaled_milestones(3000) == (std::vector<int>{720, 1440, 2160, 2880}));
  CHECK(TrainConfig::scaled_milestones(25000) == (std::vector<int>{6000, 12000, 18000, 24000}));
  TrainConfig c;
  CHECK(c.learning_rate(0) == 1e-4);
  CHECK(c.learning_rate(720) == doctest::Approx(2e-5));
  CHECK(c.learning_rate(2999) == doctest::Approx(1e-4 * std::pow(0.2, 4)));
  CHECK(c.batch_labeled == 32);
  CHECK(c.batch_pairs == 16);
}

TEST_CASE("config validation") {
  TrainConfig c;
  c.alpha = -1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.lambda = -1e-3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(method_from_string("cyclegan"), ConfigError);
  for (Method m : all_methods()) CHECK(method_from_string(to_string(m)) == m);
}

TEST_CASE("pair-requiring methods refuse to train without pairs") {
  const auto labeled = toy_labeled(2, 16, 1);
  for (Method m : {Method::dann_enc, Method::dann_dec, Method::fcons_enc, Method::fcons_dec, Method::pcons}) {
    CHECK_THROWS_AS(train(tiny_config(m), {labeled, {}}), ConfigError);
  }
  CHECK_NOTHROW(train(tiny_config(Method::baseline, 1), {labeled, {}}));
}

TEST_CASE("zero adaptation weight reproduces the baseline gradients exactly") {
  const auto labeled = toy_labeled(3, 16, 2);
  const auto pairs = toy_pairs(2, 16, 3);
  BatchSampler sampler({labeled, pairs}, 5);
  const auto lb = sampler.labeled(4);
  const auto pb = sampler.pairs(2);

  Model base = Model::create(tiny_config(Method::baseline));
  base.train(true);
  compute_objective(base, Method::baseline, lb, nullptr, 0.0).backward_target.backward();
  const auto reference = trunk_grads(base);

  for (Method m : {Method::dann_enc, Method::dann_dec, Method::fcons_enc, Method::fcons_dec, Method::pcons}) {
    CAPTURE(to_string(m));
    Model model = Model::create(tiny_config(m));
    model.train(true);
    zero_all(model);
    auto obj = compute_objective(model, m, lb, &pb, 0.0);
    obj.backward_target.backward();
    CHECK(equal_all(trunk_grads(model), reference));
    CHECK(obj.adapt_loss.item<double>() >= 0.0);
  }
}

TEST_CASE("zero alpha reproduces the baseline trajectory") {
  const auto labeled = toy_labeled(3, 16, 4);
  const auto pairs = toy_pairs(2, 16, 5);
  auto base = train(tiny_config(Method::baseline, 6), {labeled, pairs});
  for (Method m : {Method::fcons_enc, Method::pcons}) {
    auto cfg = tiny_config(m, 6);
    cfg.alpha = 0.0;
    auto other = train(cfg, {labeled, pairs});
    CHECK(equal_all(other.model.net->parameters(), base.model.net->parameters()));
    CHECK(equal_all(other.model.net->buffers(), base.model.net->buffers()));
  }
}

TEST_CASE("gradient reversal gives the trunk the negated, scaled discriminator gradient") {
  const auto labeled = toy_labeled(3, 16, 6);
  const auto pairs = toy_pairs(2, 16, 7);
  BatchSampler sampler({labeled, pairs}, 9);
  const auto lb = sampler.labeled(4);
  const auto pb = sampler.pairs(2);
  const double lambda = 0.37;

  Model model = Model::create(tiny_config(Method::dann_enc));
  model.to(torch::kFloat64);
  model.train(true);
  LabeledBatch lb64{lb.images.to(f64), lb.masks.to(f64)};
  PairBatch pb64{pb.smooth.to(f64), pb.sharp.to(f64)};

  // Trunk gradient of the domain loss alone, through the reversal layer.
  zero_all(model);
  auto obj = adversarial_objective(model, lb64, pb64, lambda, segnet::SiteFilter::encoder);
  obj.adapt_loss.backward();
  const auto reversed = trunk_grads(model);
  const double before = obj.adapt_loss.item<double>();

  // Same graph without the reversal; pairs are normalized with running statistics.
  zero_all(model);
  model.net->eval();
  auto out = model.net->forward(torch::cat({pb64.smooth, pb64.sharp}));
  model.net->train();
  auto logits = model.discriminator->forward(model.aggregator->forward(segnet::select(out.taps, segnet::SiteFilter::encoder)));
  domain_loss(logits, torch::cat({torch::zeros({2}), torch::ones({2})}).to(f64)).backward();
  const auto plain = trunk_grads(model);

  double max_abs = 0.0;
  for (std::size_t i = 0; i < plain.size(); ++i) {
    CHECK(torch::allclose(reversed[i], -lambda * plain[i], 1e-9, 1e-12));
    max_abs = std::max(max_abs, plain[i].abs().max().item<double>());
  }
  CHECK(max_abs > 0.0);

  // One discriminator step lowers the domain loss on the same batch.
  zero_all(model);
  obj = adversarial_objective(model, lb64, pb64, lambda, segnet::SiteFilter::encoder);
  obj.adapt_loss.backward();
  torch::optim::SGD opt(model.discriminator_parameters(), torch::optim::SGDOptions(1e-2));
  opt.step();
  const double after = adversarial_objective(model, lb64, pb64, lambda, segnet::SiteFilter::encoder).adapt_loss.item<double>();
  // Running statistics were not touched, so only the discriminator changed.
  CHECK(after < before);
}

TEST_CASE("baseline overfits a handful of samples") {
  const auto labeled = toy_labeled(4, 16, 8);
  auto cfg = tiny_config(Method::baseline, 300);
  cfg.lr = 3e-3;
  const auto result = train(cfg, {labeled, {}});
  REQUIRE(result.log.size() == 300);
  double first = 0, last = 0;
  for (int i = 0; i < 10; ++i) {
    first += result.log[static_cast<std::size_t>(i)].seg_loss;
    last += result.log[result.log.size() - 1 - static_cast<std::size_t>(i)].seg_loss;
  }
  CHECK(last < first);
  for (const auto& row : result.log) {
    CHECK(std::isfinite(row.seg_loss));
    CHECK(row.seg_loss >= 0.0);
  }
}

TEST_CASE("training is deterministic for a fixed seed") {
  const auto labeled = toy_labeled(3, 16, 10);
  const auto pairs = toy_pairs(2, 16, 11);
  for (Method m : {Method::fbpaug, Method::dann_dec, Method::fcons_enc}) {
    CAPTURE(to_string(m));
    const auto a = train(tiny_config(m, 3), {labeled, pairs});
    const auto b = train(tiny_config(m, 3), {labeled, pairs});
    CHECK(equal_all(a.model.net->parameters(), b.model.net->parameters()));
    CHECK(log_csv(a.log) == log_csv(b.log));
    CHECK(a.model.rng_state == b.model.rng_state);
  }
}

TEST_CASE("dann weight follows the schedule in the log") {
  const auto labeled = toy_labeled(2, 16, 12);
  const auto pairs = toy_pairs(2, 16, 13);
  auto cfg = tiny_config(Method::dann_enc, 5);
  cfg.lambda = 0.5;
  const auto r = train(cfg, {labeled, pairs});
  for (const auto& row : r.log) CHECK(row.weight == doctest::Approx(lambda_schedule(row.iteration / 4.0, 0.5)));
  CHECK(log_csv(r.log).starts_with("iteration,L_s,L_adapt,lr,weight\n"));
}

TEST_CASE("fbpaug hook") {
  const auto labeled = toy_labeled(2, 32, 14);
  BatchSampler sampler({labeled, {}}, 1);
  const auto batch = sampler.labeled(4);
  recon::AugmentOptions opts;
  opts.n_angles = 60;

  SUBCASE("probability 0 leaves the batch unchanged") {
    opts.prob = 0.0;
    std::mt19937_64 rng(1);
    const auto out = fbpaug_train_hook(batch, opts, rng);
    CHECK(torch::equal(out.images, batch.images));
    CHECK(torch::equal(out.masks, batch.masks));
  }
  SUBCASE("probability 1 changes every slice and no mask") {
    opts.prob = 1.0;
    std::mt19937_64 rng(2);
    const auto out = fbpaug_train_hook(batch, opts, rng);
    for (int64_t i = 0; i < batch.images.size(0); ++i) CHECK_FALSE(torch::equal(out.images[i], batch.images[i]));
    CHECK(torch::equal(out.masks, batch.masks));
  }
  SUBCASE("fixed seed reproduces the batch") {
    opts.prob = 0.5;
    std::mt19937_64 r1(3), r2(3);
    CHECK(torch::equal(fbpaug_train_hook(batch, opts, r1).images, fbpaug_train_hook(batch, opts, r2).images));
  }
}

TEST_CASE("checkpoint round trip") {
  const auto labeled = toy_labeled(2, 16, 15);
  const auto pairs = toy_pairs(2, 16, 16);
  auto cfg = tiny_config(Method::dann_dec, 3);
  cfg.lambda = 0.25;
  auto trained = train(cfg, {labeled, pairs});
  const auto dir = std::filesystem::temp_directory_path() / "kshift_test_ckpt";
  std::filesystem::remove_all(dir);
  save_checkpoint(trained.model, dir);
  auto loaded = load_checkpoint(dir);

  CHECK(loaded.iteration == 3);
  CHECK(loaded.rng_state == trained.model.rng_state);
  CHECK(loaded.config.lambda == 0.25);
  CHECK(loaded.config.method == Method::dann_dec);
  CHECK(equal_all(loaded.net->parameters(), trained.model.net->parameters()));
  CHECK(equal_all(loaded.net->buffers(), trained.model.net->buffers()));
  CHECK(equal_all(loaded.discriminator_parameters(), trained.model.discriminator_parameters()));

  const auto x = torch::rand({2, 1, 16, 16});
  CHECK(torch::equal(predict_logits(loaded, x), predict_logits(trained.model, x)));
  std::filesystem::remove_all(dir);
}

TEST_CASE("train config json round trip") {
  auto c = tiny_config(Method::pcons, 50);
  c.alpha = 0.125;
  c.augment.prob = 0.3;
  const auto back = train_config_from_json(to_json(c));
  CHECK(to_json(back) == to_json(c));
  CHECK(train_config_from_json({{"iterations", 100}}).lr_milestones == TrainConfig::scaled_milestones(100));
  CHECK_THROWS_AS(train_config_from_json({{"alpha", -1.0}}), ConfigError);
}
