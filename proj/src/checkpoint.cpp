#include "kshift/checkpoint.hpp"

#include "kshift/dataset_io.hpp"
#include "kshift/errors.hpp"

namespace kshift::adapt {

using nlohmann::json;

json to_json(const TrainConfig& c) {
  return {{"method", to_string(c.method)},
          {"lambda", c.lambda},
          {"alpha", c.alpha},
          {"iterations", c.iterations},
          {"batch_labeled", c.batch_labeled},
          {"batch_pairs", c.batch_pairs},
          {"lr", c.lr},
          {"lr_decay", c.lr_decay},
          {"lr_milestones", c.lr_milestones},
          {"seed", c.seed},
          {"augment",
           {{"a_range", {c.augment.a_range.lo, c.augment.a_range.hi}},
            {"b_range", {c.augment.b_range.lo, c.augment.b_range.hi}},
            {"prob", c.augment.prob},
            {"n_angles", c.augment.n_angles}}},
          {"net",
           {{"depth", c.net.depth},
            {"base_width", c.net.base_width},
            {"blocks_per_stage", c.net.blocks_per_stage},
            {"in_channels", c.net.in_channels}}},
          {"aggregate_channels", c.aggregate_channels}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  if (j.contains("method")) c.method = method_from_string(j.at("method").get<std::string>());
  c.lambda = j.value("lambda", c.lambda);
  c.alpha = j.value("alpha", c.alpha);
  if (j.contains("iterations")) {
    c.iterations = j.at("iterations").get<int>();
    c.lr_milestones = TrainConfig::scaled_milestones(c.iterations);
  }
  c.batch_labeled = j.value("batch_labeled", c.batch_labeled);
  c.batch_pairs = j.value("batch_pairs", c.batch_pairs);
  c.lr = j.value("lr", c.lr);
  c.lr_decay = j.value("lr_decay", c.lr_decay);
  if (j.contains("lr_milestones")) c.lr_milestones = j.at("lr_milestones").get<std::vector<int>>();
  c.seed = j.value("seed", c.seed);
  if (j.contains("augment")) {
    const auto& a = j.at("augment");
    if (a.contains("a_range")) c.augment.a_range = {a.at("a_range").at(0).get<double>(), a.at("a_range").at(1).get<double>()};
    if (a.contains("b_range")) c.augment.b_range = {a.at("b_range").at(0).get<double>(), a.at("b_range").at(1).get<double>()};
    c.augment.prob = a.value("prob", c.augment.prob);
    c.augment.n_angles = a.value("n_angles", c.augment.n_angles);
  }
  if (j.contains("net")) {
    const auto& n = j.at("net");
    c.net.depth = n.value("depth", c.net.depth);
    c.net.base_width = n.value("base_width", c.net.base_width);
    c.net.blocks_per_stage = n.value("blocks_per_stage", c.net.blocks_per_stage);
    c.net.in_channels = n.value("in_channels", c.net.in_channels);
  }
  c.aggregate_channels = j.value("aggregate_channels", c.aggregate_channels);
  c.validate();
  return c;
}

namespace {

struct NamedTensor {
  std::string name;
  torch::Tensor tensor;
};

std::vector<NamedTensor> state_of(const Model& m) {
  std::vector<NamedTensor> out;
  auto add = [&](const std::string& prefix, const torch::nn::Module& mod) {
    for (const auto& p : mod.named_parameters()) out.push_back({prefix + p.key(), p.value()});
    for (const auto& b : mod.named_buffers()) out.push_back({prefix + b.key(), b.value()});
  };
  add("net.", *m.net);
  if (m.aggregator) add("aggregator.", *m.aggregator);
  if (m.discriminator) add("discriminator.", *m.discriminator);
  return out;
}

}  // namespace

void save_checkpoint(const Model& model, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<float> blob;
  json table = json::array();
  for (const auto& [name, tensor] : state_of(model)) {
    auto flat = tensor.detach().to(torch::kFloat32).contiguous().reshape({-1});
    table.push_back({{"name", name}, {"shape", tensor.sizes().vec()}, {"offset", blob.size()}});
    blob.insert(blob.end(), flat.data_ptr<float>(), flat.data_ptr<float>() + flat.numel());
  }
  io::write_f32(dir / "params.bin", blob);
  json manifest{{"format", "kshift-checkpoint-1"},
                {"train_config", to_json(model.config)},
                {"iteration", model.iteration},
                {"rng_state", model.rng_state},
                {"parameter_count", blob.size()},
                {"tensors", table}};
  io::write_text(dir / "manifest.json", manifest.dump(2));
}

Model load_checkpoint(const std::filesystem::path& dir) {
  const json manifest = json::parse(io::read_text(dir / "manifest.json"));
  Model model = Model::create(train_config_from_json(manifest.at("train_config")));
  model.iteration = manifest.at("iteration").get<int>();
  model.rng_state = manifest.at("rng_state").get<std::string>();
  const auto blob = io::read_f32(dir / "params.bin", manifest.at("parameter_count").get<std::size_t>());

  auto state = state_of(model);
  const auto& table = manifest.at("tensors");
  if (table.size() != state.size()) throw InvalidInput("checkpoint tensor table does not match the architecture");
  torch::NoGradGuard guard;
  for (std::size_t i = 0; i < state.size(); ++i) {
    const auto& entry = table[i];
    auto& [name, tensor] = state[i];
    if (entry.at("name").get<std::string>() != name ||
        entry.at("shape").get<std::vector<int64_t>>() != tensor.sizes().vec()) {
      throw InvalidInput("checkpoint tensor " + name + " does not match the architecture");
    }
    const auto offset = entry.at("offset").get<std::size_t>();
    auto src = torch::from_blob(const_cast<float*>(blob.data() + offset), {tensor.numel()}, torch::kFloat32);
    tensor.copy_(src.reshape(tensor.sizes()).to(tensor.dtype()));
  }
  model.train(false);
  return model;
}

}  // namespace kshift::adapt
