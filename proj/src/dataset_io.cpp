#include "kshift/dataset_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "kshift/errors.hpp"

namespace kshift::io {
namespace {

using datagen::Datasets;
using datagen::LabeledSlice;
using datagen::LabeledVolume;
using datagen::PairedSet;
using datagen::PairedVolume;

std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) return __builtin_bswap32(v);
  return v;
}

std::vector<float> flatten(const std::vector<const Image2D*>& images) {
  std::vector<float> out;
  for (const auto* img : images) {
    for (double v : img->data) out.push_back(static_cast<float>(v));
  }
  return out;
}

std::vector<float> flatten(const std::vector<const Mask2D*>& masks) {
  std::vector<float> out;
  for (const auto* m : masks) {
    for (auto v : m->data) out.push_back(v ? 1.0f : 0.0f);
  }
  return out;
}

std::vector<Image2D> unflatten_images(const std::vector<float>& flat, std::size_t slices, std::size_t rows,
                                      std::size_t cols, double spacing) {
  std::vector<Image2D> out;
  for (std::size_t s = 0; s < slices; ++s) {
    Image2D img(rows, cols, spacing);
    img.intensity = Intensity::normalized;
    for (std::size_t i = 0; i < rows * cols; ++i) img.data[i] = flat[s * rows * cols + i];
    out.push_back(std::move(img));
  }
  return out;
}

std::vector<Mask2D> unflatten_masks(const std::vector<float>& flat, std::size_t slices, std::size_t rows,
                                    std::size_t cols) {
  std::vector<Mask2D> out;
  for (std::size_t s = 0; s < slices; ++s) {
    Mask2D m(rows, cols);
    for (std::size_t i = 0; i < rows * cols; ++i) m.data[i] = flat[s * rows * cols + i] > 0.5f;
    out.push_back(std::move(m));
  }
  return out;
}

json shape_of(std::size_t slices, const Image2D& first) { return json::array({slices, first.rows, first.cols}); }

void save_labeled(const std::vector<LabeledVolume>& vols, const fs::path& dir) {
  fs::create_directories(dir);
  json samples = json::array();
  for (const auto& v : vols) {
    if (v.slices.empty()) continue;
    std::vector<const Image2D*> imgs;
    std::vector<const Mask2D*> lesions, lungs;
    for (const auto& s : v.slices) {
      imgs.push_back(&s.image);
      lesions.push_back(&s.lesion);
      lungs.push_back(&s.lung);
    }
    write_f32(dir / (v.id + ".image.f32"), flatten(imgs));
    write_f32(dir / (v.id + ".lesion.f32"), flatten(lesions));
    write_f32(dir / (v.id + ".lung.f32"), flatten(lungs));
    samples.push_back({{"id", v.id},
                       {"shape", shape_of(v.slices.size(), v.slices.front().image)},
                       {"spacing_mm", v.slices.front().image.spacing_mm},
                       {"domain_tag", datagen::to_string(v.domain)},
                       {"kernel", to_json(v.kernel)},
                       {"image", v.id + ".image.f32"},
                       {"lesion_mask", v.id + ".lesion.f32"},
                       {"lung_mask", v.id + ".lung.f32"}});
  }
  write_text(dir / "manifest.json", json{{"kind", "labeled"}, {"samples", samples}}.dump(2));
}

std::vector<LabeledVolume> load_labeled(const fs::path& dir) {
  const json manifest = json::parse(read_text(dir / "manifest.json"));
  std::vector<LabeledVolume> vols;
  for (const auto& s : manifest.at("samples")) {
    const auto shape = s.at("shape").get<std::vector<std::size_t>>();
    const std::size_t count = shape[0] * shape[1] * shape[2];
    const double spacing = s.at("spacing_mm").get<double>();
    auto imgs = unflatten_images(read_f32(dir / s.at("image").get<std::string>(), count), shape[0], shape[1],
                                 shape[2], spacing);
    auto lesions = unflatten_masks(read_f32(dir / s.at("lesion_mask").get<std::string>(), count), shape[0],
                                   shape[1], shape[2]);
    auto lungs = unflatten_masks(read_f32(dir / s.at("lung_mask").get<std::string>(), count), shape[0],
                                 shape[1], shape[2]);
    LabeledVolume v{s.at("id").get<std::string>(), datagen::domain_from_string(s.at("domain_tag")),
                    kernel_from_json(s.at("kernel")), {}};
    for (std::size_t i = 0; i < shape[0]; ++i) {
      v.slices.push_back({std::move(imgs[i]), std::move(lesions[i]), std::move(lungs[i])});
    }
    vols.push_back(std::move(v));
  }
  return vols;
}

void save_paired(const PairedSet& set, const std::vector<datagen::KernelPairFamily>& families, const fs::path& dir) {
  fs::create_directories(dir);
  json samples = json::array();
  for (std::size_t i = 0; i < set.volumes.size(); ++i) {
    const auto& v = set.volumes[i];
    if (v.smooth.empty()) continue;
    std::vector<const Image2D*> smooth, sharp;
    for (const auto& img : v.smooth) smooth.push_back(&img);
    for (const auto& img : v.sharp) sharp.push_back(&img);
    std::vector<const Mask2D*> hidden;
    for (const auto& m : set.hidden_lesions.at(i)) hidden.push_back(&m);
    write_f32(dir / (v.id + ".smooth.f32"), flatten(smooth));
    write_f32(dir / (v.id + ".sharp.f32"), flatten(sharp));
    write_f32(dir / (v.id + ".lesion_hidden.f32"), flatten(hidden));
    samples.push_back({{"id", v.id},
                       {"pair_id", v.id},
                       {"family", v.family},
                       {"family_name", families.at(v.family).name},
                       {"shape", shape_of(v.smooth.size(), v.smooth.front())},
                       {"spacing_mm", v.smooth.front().spacing_mm},
                       {"kernel_smooth", to_json(v.kernel_smooth)},
                       {"kernel_sharp", to_json(v.kernel_sharp)},
                       {"image_smooth", {{"file", v.id + ".smooth.f32"}, {"domain_tag", "smooth"}, {"pair_id", v.id}}},
                       {"image_sharp", {{"file", v.id + ".sharp.f32"}, {"domain_tag", "sharp"}, {"pair_id", v.id}}},
                       {"lesion_mask_hidden", v.id + ".lesion_hidden.f32"}});
  }
  write_text(dir / "manifest.json", json{{"kind", "paired"}, {"samples", samples}}.dump(2));
}

PairedSet load_paired(const fs::path& dir) {
  const json manifest = json::parse(read_text(dir / "manifest.json"));
  PairedSet set;
  for (const auto& s : manifest.at("samples")) {
    const auto shape = s.at("shape").get<std::vector<std::size_t>>();
    const std::size_t count = shape[0] * shape[1] * shape[2];
    const double spacing = s.at("spacing_mm").get<double>();
    PairedVolume v{s.at("id").get<std::string>(), s.at("family").get<std::size_t>(),
                   kernel_from_json(s.at("kernel_smooth")), kernel_from_json(s.at("kernel_sharp")), {}, {}};
    v.smooth = unflatten_images(read_f32(dir / s.at("image_smooth").at("file").get<std::string>(), count), shape[0],
                                shape[1], shape[2], spacing);
    v.sharp = unflatten_images(read_f32(dir / s.at("image_sharp").at("file").get<std::string>(), count), shape[0],
                               shape[1], shape[2], spacing);
    set.hidden_lesions.push_back(unflatten_masks(
        read_f32(dir / s.at("lesion_mask_hidden").get<std::string>(), count), shape[0], shape[1], shape[2]));
    set.volumes.push_back(std::move(v));
  }
  return set;
}

}  // namespace

void write_f32(const fs::path& path, std::span<const float> values) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (float v : values) {
    const std::uint32_t bits = to_le(std::bit_cast<std::uint32_t>(v));
    out.write(reinterpret_cast<const char*>(&bits), sizeof bits);
  }
}

std::vector<float> read_f32(const fs::path& path, std::size_t expected_count) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot read " + path.string());
  std::vector<float> out(expected_count);
  for (auto& v : out) {
    std::uint32_t bits = 0;
    if (!in.read(reinterpret_cast<char*>(&bits), sizeof bits)) {
      throw InvalidInput(path.string() + " is shorter than its manifest shape");
    }
    v = std::bit_cast<float>(to_le(bits));
  }
  return out;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

json to_json(const recon::KernelSpec& k) { return {{"a", k.a}, {"b", k.b}}; }

recon::KernelSpec kernel_from_json(const json& j) {
  recon::KernelSpec k{j.value("a", 0.0), j.value("b", 1.0)};
  k.validate();
  return k;
}

json to_json(const datagen::DatasetConfig& c) {
  json families = json::array();
  for (const auto& f : c.families) {
    families.push_back({{"name", f.name}, {"smooth", to_json(f.smooth)}, {"sharp", to_json(f.sharp)}});
  }
  json j{{"phantom",
          {{"size", c.phantom.size},
           {"spacing_mm", c.phantom.spacing_mm},
           {"lesion_count", {c.phantom.lesion_count_min, c.phantom.lesion_count_max}},
           {"lesion_hu", {c.phantom.lesion_hu_min, c.phantom.lesion_hu_max}},
           {"noise_sigma_hu", c.phantom.noise_sigma_hu}}},
         {"source_volumes", c.source_volumes},
         {"target_volumes", c.target_volumes},
         {"slices_per_volume", c.slices_per_volume},
         {"pairs_per_family", c.pairs_per_family},
         {"slices_per_pair", c.slices_per_pair},
         {"paired_test_fraction", c.paired_test_fraction},
         {"n_angles", c.n_angles},
         {"source_kernel", to_json(c.source_kernel)},
         {"families", families}};
  if (c.paired_lesion_count) {
    j["paired_lesion_count"] = {c.paired_lesion_count->first, c.paired_lesion_count->second};
  }
  return j;
}

datagen::DatasetConfig dataset_config_from_json(const json& j) {
  datagen::DatasetConfig c;
  if (j.contains("phantom")) {
    const auto& p = j.at("phantom");
    c.phantom.size = p.value("size", c.phantom.size);
    c.phantom.spacing_mm = p.value("spacing_mm", c.phantom.spacing_mm);
    if (p.contains("lesion_count")) {
      c.phantom.lesion_count_min = p.at("lesion_count").at(0).get<int>();
      c.phantom.lesion_count_max = p.at("lesion_count").at(1).get<int>();
    }
    if (p.contains("lesion_hu")) {
      c.phantom.lesion_hu_min = p.at("lesion_hu").at(0).get<double>();
      c.phantom.lesion_hu_max = p.at("lesion_hu").at(1).get<double>();
    }
    c.phantom.noise_sigma_hu = p.value("noise_sigma_hu", c.phantom.noise_sigma_hu);
  }
  c.source_volumes = j.value("source_volumes", c.source_volumes);
  c.target_volumes = j.value("target_volumes", c.target_volumes);
  c.slices_per_volume = j.value("slices_per_volume", c.slices_per_volume);
  c.pairs_per_family = j.value("pairs_per_family", c.pairs_per_family);
  c.slices_per_pair = j.value("slices_per_pair", c.slices_per_pair);
  c.paired_test_fraction = j.value("paired_test_fraction", c.paired_test_fraction);
  c.n_angles = j.value("n_angles", c.n_angles);
  if (j.contains("source_kernel")) c.source_kernel = kernel_from_json(j.at("source_kernel"));
  if (j.contains("families")) {
    c.families.clear();
    for (const auto& f : j.at("families")) {
      c.families.push_back({f.at("name").get<std::string>(), kernel_from_json(f.at("smooth")),
                            kernel_from_json(f.at("sharp"))});
    }
  }
  if (j.contains("paired_lesion_count")) {
    c.paired_lesion_count = std::pair{j.at("paired_lesion_count").at(0).get<int>(),
                                      j.at("paired_lesion_count").at(1).get<int>()};
  }
  c.validate();
  return c;
}

void save_datasets(const Datasets& ds, const datagen::DatasetConfig& config, std::uint64_t seed,
                   const fs::path& dir) {
  fs::create_directories(dir);
  save_labeled(ds.source, dir / "source");
  save_labeled(ds.target_test, dir / "target_test");
  save_paired(ds.paired_train, ds.families, dir / "paired_train");
  save_paired(ds.paired_test, ds.families, dir / "paired_test");
  write_text(dir / "datasets.json",
             json{{"seed", seed}, {"config", to_json(config)}, {"hash", dataset_hash(ds)}}.dump(2));
}

Datasets load_datasets(const fs::path& dir) {
  const json top = json::parse(read_text(dir / "datasets.json"));
  Datasets ds;
  ds.families = dataset_config_from_json(top.at("config")).families;
  ds.source = load_labeled(dir / "source");
  ds.target_test = load_labeled(dir / "target_test");
  ds.paired_train = load_paired(dir / "paired_train");
  ds.paired_test = load_paired(dir / "paired_test");
  return ds;
}

DatasetMeta load_dataset_meta(const fs::path& dir) {
  const json top = json::parse(read_text(dir / "datasets.json"));
  return {dataset_config_from_json(top.at("config")), top.at("seed").get<std::uint64_t>(),
          top.at("hash").get<std::string>()};
}

namespace {

constexpr std::uint64_t fnv_offset = 1469598103934665603ULL;

void fnv_mix(std::uint64_t& h, const void* p, std::size_t n) {
  const auto* b = static_cast<const unsigned char*>(p);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= b[i];
    h *= 1099511628211ULL;
  }
}

std::string hex(std::uint64_t h) {
  std::ostringstream ss;
  ss << std::hex << std::setw(16) << std::setfill('0') << h;
  return ss.str();
}

}  // namespace

std::string content_hash(std::string_view bytes) {
  std::uint64_t h = fnv_offset;
  fnv_mix(h, bytes.data(), bytes.size());
  return hex(h);
}

std::string file_hash(const fs::path& path) { return content_hash(read_text(path)); }

std::string dataset_hash(const Datasets& ds) {
  std::uint64_t h = fnv_offset;
  auto mix_bytes = [&](const void* p, std::size_t n) { fnv_mix(h, p, n); };
  auto mix_image = [&](const Image2D& img) {
    for (double v : img.data) {
      const float f = static_cast<float>(v);
      mix_bytes(&f, sizeof f);
    }
  };
  auto mix_mask = [&](const Mask2D& m) { mix_bytes(m.data.data(), m.data.size()); };
  for (const auto* vols : {&ds.source, &ds.target_test}) {
    for (const auto& v : *vols) {
      for (const auto& s : v.slices) {
        mix_image(s.image);
        mix_mask(s.lesion);
        mix_mask(s.lung);
      }
    }
  }
  for (const auto* set : {&ds.paired_train, &ds.paired_test}) {
    for (std::size_t i = 0; i < set->volumes.size(); ++i) {
      for (const auto& img : set->volumes[i].smooth) mix_image(img);
      for (const auto& img : set->volumes[i].sharp) mix_image(img);
      for (const auto& m : set->hidden_lesions[i]) mix_mask(m);
    }
  }
  return hex(h);
}

}  // namespace kshift::io
