#include "kshift/train.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "kshift/errors.hpp"
#include "kshift/losses.hpp"

namespace kshift::adapt {

using segnet::SiteFilter;

std::string to_string(Method m) {
  switch (m) {
    case Method::baseline: return "baseline";
    case Method::fbpaug: return "fbpaug";
    case Method::dann_enc: return "dann_enc";
    case Method::dann_dec: return "dann_dec";
    case Method::fcons_enc: return "fcons_enc";
    case Method::fcons_dec: return "fcons_dec";
    case Method::pcons: return "pcons";
  }
  return "?";
}

const std::vector<Method>& all_methods() {
  static const std::vector<Method> methods{Method::baseline,  Method::fbpaug,    Method::dann_enc, Method::dann_dec,
                                           Method::fcons_enc, Method::fcons_dec, Method::pcons};
  return methods;
}

Method method_from_string(const std::string& s) {
  for (Method m : all_methods()) {
    if (to_string(m) == s) return m;
  }
  throw ConfigError("unknown method: " + s);
}

bool needs_pairs(Method m) {
  return m != Method::baseline && m != Method::fbpaug;
}

bool uses_discriminator(Method m) { return m == Method::dann_enc || m == Method::dann_dec; }

std::optional<SiteFilter> adapted_sites(Method m) {
  switch (m) {
    case Method::dann_enc:
    case Method::fcons_enc: return SiteFilter::encoder;
    case Method::dann_dec:
    case Method::fcons_dec: return SiteFilter::decoder;
    case Method::pcons: return SiteFilter::output;
    default: return std::nullopt;
  }
}

std::vector<int> TrainConfig::scaled_milestones(int iterations) {
  std::vector<int> out;
  const double step = 6.0 / 25.0 * iterations;
  for (int k = 1;; ++k) {
    const int m = static_cast<int>(std::lround(step * k));
    if (m <= 0 || m >= iterations) break;
    out.push_back(m);
  }
  return out;
}

double TrainConfig::learning_rate(int iteration) const {
  double rate = lr;
  for (int m : lr_milestones) {
    if (iteration >= m) rate *= lr_decay;
  }
  return rate;
}

void TrainConfig::validate() const {
  if (!(lambda >= 0.0) || !(alpha >= 0.0)) throw ConfigError("adaptation weights must be non-negative");
  if (iterations < 1 || batch_labeled < 1 || batch_pairs < 1) throw ConfigError("iterations and batch sizes must be positive");
  if (!(lr > 0.0) || !(lr_decay > 0.0)) throw ConfigError("learning rate and decay must be positive");
  if (!std::is_sorted(lr_milestones.begin(), lr_milestones.end())) throw ConfigError("lr milestones must be sorted");
  if (aggregate_channels < 1) throw ConfigError("aggregate channel count must be positive");
  if (method == Method::fbpaug) augment.validate();
}

torch::Tensor to_tensor(const Image2D& img) {
  auto t = torch::empty({1, static_cast<int64_t>(img.rows), static_cast<int64_t>(img.cols)}, torch::kFloat32);
  auto* p = t.data_ptr<float>();
  for (std::size_t i = 0; i < img.data.size(); ++i) p[i] = static_cast<float>(img.data[i]);
  return t;
}

torch::Tensor to_tensor(const Mask2D& mask) {
  auto t = torch::empty({1, static_cast<int64_t>(mask.rows), static_cast<int64_t>(mask.cols)}, torch::kFloat32);
  auto* p = t.data_ptr<float>();
  for (std::size_t i = 0; i < mask.data.size(); ++i) p[i] = mask.data[i] ? 1.0f : 0.0f;
  return t;
}

Image2D to_image(const torch::Tensor& t, double spacing_mm) {
  auto c = t.detach().to(torch::kFloat64).contiguous().reshape({t.size(-2), t.size(-1)});
  Image2D img(static_cast<std::size_t>(c.size(0)), static_cast<std::size_t>(c.size(1)), spacing_mm);
  img.intensity = Intensity::normalized;
  std::copy(c.data_ptr<double>(), c.data_ptr<double>() + c.numel(), img.data.begin());
  return img;
}

BatchSampler::BatchSampler(const TrainData& data, std::uint64_t seed)
    : data_(data),
      labeled_rng_(datagen::stream_rng(seed, 10)),
      pair_rng_(datagen::stream_rng(seed, 11)),
      augment_rng_(datagen::stream_rng(seed, 12)) {}

LabeledBatch BatchSampler::labeled(int n) {
  if (data_.labeled.empty()) throw ConfigError("no labeled training data");
  std::vector<torch::Tensor> images, masks;
  for (int i = 0; i < n; ++i) {
    const auto& vol = data_.labeled[std::uniform_int_distribution<std::size_t>(0, data_.labeled.size() - 1)(labeled_rng_)];
    const auto& slice = vol.slices[std::uniform_int_distribution<std::size_t>(0, vol.slices.size() - 1)(labeled_rng_)];
    images.push_back(to_tensor(slice.image));
    masks.push_back(to_tensor(slice.lesion));
  }
  return {torch::stack(images), torch::stack(masks)};
}

PairBatch BatchSampler::pairs(int n) {
  if (data_.paired.empty()) throw ConfigError("no paired training data");
  std::vector<torch::Tensor> smooth, sharp;
  for (int i = 0; i < n; ++i) {
    const auto& vol = data_.paired[std::uniform_int_distribution<std::size_t>(0, data_.paired.size() - 1)(pair_rng_)];
    const auto s = std::uniform_int_distribution<std::size_t>(0, vol.smooth.size() - 1)(pair_rng_);
    smooth.push_back(to_tensor(vol.smooth[s]));
    sharp.push_back(to_tensor(vol.sharp[s]));
  }
  return {torch::stack(smooth), torch::stack(sharp)};
}

LabeledBatch fbpaug_train_hook(const LabeledBatch& batch, const recon::AugmentOptions& opts, std::mt19937_64& rng) {
  LabeledBatch out{batch.images.clone(), batch.masks};
  for (int64_t i = 0; i < batch.images.size(0); ++i) {
    out.images[i].copy_(to_tensor(recon::fbp_augment(to_image(batch.images[i]), opts, rng)));
  }
  return out;
}

LabeledBatch BatchSampler::augment(const LabeledBatch& batch, const recon::AugmentOptions& opts) {
  return fbpaug_train_hook(batch, opts, augment_rng_);
}

std::string BatchSampler::state() const {
  std::ostringstream ss;
  ss << labeled_rng_ << ' ' << pair_rng_ << ' ' << augment_rng_;
  return ss.str();
}

Model Model::create(const TrainConfig& config) {
  config.validate();
  torch::manual_seed(config.seed);
  Model m;
  m.config = config;
  m.net = segnet::UNet(config.net);
  if (uses_discriminator(config.method)) {
    m.aggregator = segnet::FeatureAggregator(segnet::tap_channels(config.net, *adapted_sites(config.method)),
                                             config.aggregate_channels);
    m.discriminator = segnet::Discriminator(m.aggregator->output_channels());
  }
  return m;
}

std::vector<torch::Tensor> Model::trunk_parameters() const { return net->parameters(); }

std::vector<torch::Tensor> Model::discriminator_parameters() const {
  std::vector<torch::Tensor> out;
  if (aggregator) {
    for (auto& p : aggregator->parameters()) out.push_back(p);
  }
  if (discriminator) {
    for (auto& p : discriminator->parameters()) out.push_back(p);
  }
  return out;
}

void Model::to(torch::Dtype dtype) {
  net->to(dtype);
  if (aggregator) aggregator->to(dtype);
  if (discriminator) discriminator->to(dtype);
}

void Model::train(bool on) {
  net->train(on);
  if (aggregator) aggregator->train(on);
  if (discriminator) discriminator->train(on);
}

double Objective::trunk_value(Method m) const {
  const double seg = seg_loss.item<double>();
  const double adapt = adapt_loss.item<double>();
  return uses_discriminator(m) ? seg - weight * adapt : seg + weight * adapt;
}

namespace {

/// Forward on paired images with BatchNorm normalizing by its running statistics, as at
/// evaluation. Batch statistics of a mixed smooth/sharp batch would let the pair objectives be
/// met under a normalization the evaluated network never uses. Running statistics are left
/// to the labeled batches.
segnet::UNetOutput forward_pairs(Model& model, const torch::Tensor& images) {
  std::vector<torch::nn::BatchNorm2dImpl*> norms;
  for (const auto& m : model.net->modules(false)) {
    if (auto* bn = m->as<torch::nn::BatchNorm2d>()) {
      if (bn->is_training()) norms.push_back(bn);
    }
  }
  for (auto* bn : norms) bn->eval();
  auto out = model.net->forward(images);
  for (auto* bn : norms) bn->train();
  return out;
}

}  // namespace

Objective adversarial_objective(Model& model, const LabeledBatch& labeled, const PairBatch& pairs, double lambda,
                                SiteFilter sites) {
  if (!model.aggregator || !model.discriminator) throw ConfigError("model has no discriminator");
  if (!pairs.smooth.defined() || !pairs.sharp.defined()) throw InvalidInput("paired batch lacks a domain");
  Objective obj;
  obj.weight = lambda;
  obj.seg_loss = segmentation_loss(model.net->forward(labeled.images).logits, labeled.masks);

  const int64_t n = pairs.smooth.size(0);
  auto out = forward_pairs(model, torch::cat({pairs.smooth, pairs.sharp}, 0));
  segnet::TapSet reversed;
  for (const auto& tap : segnet::select(out.taps, sites)) {
    reversed.push_back({tap.site, segnet::grad_reverse(tap.features, lambda)});
  }
  auto domain_logits = model.discriminator->forward(model.aggregator->forward(reversed));
  auto labels = torch::cat({torch::zeros({n}), torch::ones({n})}).to(domain_logits.dtype());
  obj.adapt_loss = domain_loss(domain_logits, labels);
  obj.backward_target = obj.seg_loss + obj.adapt_loss;
  return obj;
}

Objective compute_objective(Model& model, Method method, const LabeledBatch& labeled, const PairBatch* pairs,
                            double weight) {
  if (needs_pairs(method) && !pairs) throw ConfigError(to_string(method) + " requires paired data");
  if (uses_discriminator(method)) return adversarial_objective(model, labeled, *pairs, weight, *adapted_sites(method));

  Objective obj;
  obj.weight = weight;
  obj.seg_loss = segmentation_loss(model.net->forward(labeled.images).logits, labeled.masks);
  if (!needs_pairs(method)) {
    obj.adapt_loss = torch::zeros({}, obj.seg_loss.options());
    obj.backward_target = obj.seg_loss;
    return obj;
  }

  auto out = forward_pairs(model, torch::cat({pairs->smooth, pairs->sharp}, 0));
  if (method == Method::pcons) {
    auto probs = torch::sigmoid(out.logits).chunk(2, 0);
    obj.adapt_loss = p_consistency_loss(probs[0], probs[1]);
  } else {
    std::vector<torch::Tensor> a, b;
    for (const auto& tap : segnet::select(out.taps, *adapted_sites(method))) {
      auto halves = tap.features.chunk(2, 0);
      a.push_back(halves[0]);
      b.push_back(halves[1]);
    }
    obj.adapt_loss = f_consistency_loss(a, b);
  }
  obj.backward_target = obj.seg_loss + weight * obj.adapt_loss;
  return obj;
}

TrainResult train(const TrainConfig& config, const TrainData& data) {
  config.validate();
  if (needs_pairs(config.method) && data.paired.empty()) {
    throw ConfigError(to_string(config.method) + " requires paired data");
  }
  // Single-threaded kernels keep runs bit-reproducible.
  at::set_num_threads(1);

  TrainResult result{Model::create(config), {}};
  Model& model = result.model;
  model.train(true);
  BatchSampler sampler(data, config.seed);

  torch::optim::Adam trunk_opt(model.trunk_parameters(), torch::optim::AdamOptions(config.lr));
  std::optional<torch::optim::Adam> disc_opt;
  if (uses_discriminator(config.method)) {
    disc_opt.emplace(model.discriminator_parameters(), torch::optim::AdamOptions(config.lr));
  }
  auto set_lr = [](torch::optim::Adam& opt, double lr) {
    for (auto& group : opt.param_groups()) static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
  };

  const double denom = std::max(1, config.iterations - 1);
  for (int it = 0; it < config.iterations; ++it) {
    const double lr = config.learning_rate(it);
    set_lr(trunk_opt, lr);
    if (disc_opt) set_lr(*disc_opt, lr);

    LabeledBatch labeled = sampler.labeled(config.batch_labeled);
    if (config.method == Method::fbpaug) labeled = sampler.augment(labeled, config.augment);
    std::optional<PairBatch> pairs;
    if (needs_pairs(config.method)) pairs = sampler.pairs(config.batch_pairs);

    const double weight = uses_discriminator(config.method) ? lambda_schedule(it / denom, config.lambda)
                                                            : config.alpha;
    Objective obj = compute_objective(model, config.method, labeled, pairs ? &*pairs : nullptr, weight);

    trunk_opt.zero_grad();
    if (disc_opt) disc_opt->zero_grad();
    obj.backward_target.backward();
    trunk_opt.step();
    if (disc_opt) disc_opt->step();

    LogRow row{it, obj.seg_loss.item<double>(), obj.adapt_loss.item<double>(), lr, weight};
    if (!std::isfinite(row.seg_loss) || !std::isfinite(row.adapt_loss)) {
      throw std::runtime_error("non-finite loss at iteration " + std::to_string(it));
    }
    result.log.push_back(row);
  }
  model.iteration = config.iterations;
  model.rng_state = sampler.state();
  model.train(false);
  return result;
}

std::string log_csv(const std::vector<LogRow>& log) {
  std::ostringstream ss;
  ss.precision(9);
  ss << "iteration,L_s,L_adapt,lr,weight\n";
  for (const auto& r : log) {
    ss << r.iteration << ',' << r.seg_loss << ',' << r.adapt_loss << ',' << r.lr << ',' << r.weight << '\n';
  }
  return ss.str();
}

torch::Tensor predict_logits(Model& model, const torch::Tensor& images, int chunk) {
  torch::NoGradGuard guard;
  const bool was_training = model.net->is_training();
  model.net->eval();
  std::vector<torch::Tensor> parts;
  for (int64_t start = 0; start < images.size(0); start += chunk) {
    const int64_t end = std::min<int64_t>(images.size(0), start + chunk);
    parts.push_back(model.net->forward(images.slice(0, start, end)).logits);
  }
  model.net->train(was_training);
  return torch::cat(parts, 0);
}

}  // namespace kshift::adapt
