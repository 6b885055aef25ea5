#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "shmamba/error.hpp"
#include "shmamba/ops.hpp"
#include "shmamba/tensor.hpp"
#include "shmamba/tensor_file.hpp"

namespace shmamba::data {

using json = nlohmann::json;

inline constexpr const char* kManifestFormat = "shmamba-dataset";
inline constexpr int kManifestVersion = 1;

/// One audio-visual-question sample.
struct FeatureBundle {
  Tensor audio;     ///< (T, D_a)
  Tensor visual;    ///< (T, D_v)
  Tensor question;  ///< (D_q)
  int label = 0;
  int query_type = -1;  ///< -1 when the manifest does not record it
};

/// Parameters of the synthetic AVQA-shaped task. Child classes are grouped
/// under parent classes (child c belongs to parent c mod n_parent_classes).
struct SyntheticSpec {
  std::size_t n_samples = 64;
  std::size_t T = 8;
  std::size_t d_audio = 32;
  std::size_t d_visual = 48;
  std::size_t d_question = 16;
  std::size_t vocab_size = 6;
  std::size_t n_parent_classes = 4;
  std::size_t n_child_classes = 8;
  double noise_std = 0.05;
  std::uint64_t seed = 7;
  std::size_t n_query_types = 3;
  std::size_t prototype_dim = 16;
  /// Spread of child prototypes around their parent prototype.
  double child_spread = 0.6;
  /// Extra samples from the same generative world, written to eval_manifest.json.
  std::size_t n_eval_samples = 0;

  void validate() const {
    if (n_samples < 1 || T < 1 || d_audio < 1 || d_visual < 1 || d_question < 1 || prototype_dim < 1) {
      throw ConfigError("synthetic spec: sizes must be >= 1");
    }
    if (vocab_size < 2) throw ConfigError("synthetic spec: vocab_size must be >= 2");
    if (n_parent_classes < 1 || n_child_classes < n_parent_classes) {
      throw ConfigError("synthetic spec: need n_child_classes >= n_parent_classes >= 1");
    }
    if (n_query_types < 1) throw ConfigError("synthetic spec: n_query_types must be >= 1");
    if (!(noise_std >= 0.0)) throw ConfigError("synthetic spec: noise_std must be >= 0");
  }

  /// Answer index for a (child class, query type) pair.
  int label_for(std::size_t child, std::size_t query) const {
    const std::size_t parent = child % n_parent_classes;
    return static_cast<int>((child + query * (parent + 1)) % vocab_size);
  }
};

inline void to_json(json& j, const SyntheticSpec& s) {
  j = json{{"n_samples", s.n_samples},       {"T", s.T},
           {"d_audio", s.d_audio},           {"d_visual", s.d_visual},
           {"d_question", s.d_question},     {"vocab_size", s.vocab_size},
           {"n_parent_classes", s.n_parent_classes}, {"n_child_classes", s.n_child_classes},
           {"noise_std", s.noise_std},       {"seed", s.seed},
           {"n_query_types", s.n_query_types}, {"prototype_dim", s.prototype_dim},
           {"child_spread", s.child_spread}, {"n_eval_samples", s.n_eval_samples}};
}

inline void from_json(const json& j, SyntheticSpec& s) {
  SyntheticSpec d;
  s.n_samples = j.value("n_samples", d.n_samples);
  s.T = j.value("T", d.T);
  s.d_audio = j.value("d_audio", d.d_audio);
  s.d_visual = j.value("d_visual", d.d_visual);
  s.d_question = j.value("d_question", d.d_question);
  s.vocab_size = j.value("vocab_size", d.vocab_size);
  s.n_parent_classes = j.value("n_parent_classes", d.n_parent_classes);
  s.n_child_classes = j.value("n_child_classes", d.n_child_classes);
  s.noise_std = j.value("noise_std", d.noise_std);
  s.seed = j.value("seed", d.seed);
  s.n_query_types = j.value("n_query_types", d.n_query_types);
  s.prototype_dim = j.value("prototype_dim", d.prototype_dim);
  s.child_spread = j.value("child_spread", d.child_spread);
  s.n_eval_samples = j.value("n_eval_samples", d.n_eval_samples);
}

/// Shapes every sample of a manifest must have.
struct FeatureShapes {
  std::size_t T = 0;
  std::size_t d_audio = 0;
  std::size_t d_visual = 0;
  std::size_t d_question = 0;
  std::size_t vocab_size = 0;
};

struct Dataset {
  FeatureShapes shapes;
  std::vector<std::string> vocab;
  std::vector<FeatureBundle> samples;
  std::filesystem::path manifest_path;
};

/// Prototype geometry the generator planted, exposed for checks.
struct World {
  std::vector<std::vector<double>> child_prototypes;
  std::vector<std::size_t> parent_of;
};

/// Mean within-parent and across-parent cosine similarity of child prototypes.
inline std::pair<double, double> hierarchy_similarity(const World& w) {
  auto cosine = [](const std::vector<double>& a, const std::vector<double>& b) {
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      ab += a[i] * b[i];
      aa += a[i] * a[i];
      bb += b[i] * b[i];
    }
    return ab / std::sqrt(aa * bb);
  };
  double within = 0.0, across = 0.0;
  std::size_t n_within = 0, n_across = 0;
  for (std::size_t i = 0; i < w.child_prototypes.size(); ++i)
    for (std::size_t j = i + 1; j < w.child_prototypes.size(); ++j) {
      const double c = cosine(w.child_prototypes[i], w.child_prototypes[j]);
      if (w.parent_of[i] == w.parent_of[j]) {
        within += c;
        ++n_within;
      } else {
        across += c;
        ++n_across;
      }
    }
  return {n_within ? within / static_cast<double>(n_within) : 1.0,
          n_across ? across / static_cast<double>(n_across) : -1.0};
}

struct GeneratedSample {
  FeatureBundle bundle;
  std::size_t child = 0;
  std::size_t parent = 0;
};

/// In-memory generator; `generate_synthetic_dataset` writes its output to disk.
class SyntheticGenerator {
 public:
  explicit SyntheticGenerator(const SyntheticSpec& spec) : spec_(spec), rng_(spec.seed) {
    spec_.validate();
    std::normal_distribution<double> normal(0.0, 1.0);
    const std::size_t P = spec_.prototype_dim;
    std::vector<std::vector<double>> parents(spec_.n_parent_classes, std::vector<double>(P));
    for (auto& p : parents)
      for (double& v : p) v = normal(rng_);
    for (std::size_t c = 0; c < spec_.n_child_classes; ++c) {
      const std::size_t parent = c % spec_.n_parent_classes;
      std::vector<double> proto(P);
      for (std::size_t i = 0; i < P; ++i) proto[i] = parents[parent][i] + spec_.child_spread * normal(rng_);
      world_.child_prototypes.push_back(std::move(proto));
      world_.parent_of.push_back(parent);
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(P));
    audio_proj_ = random_matrix(P, spec_.d_audio, scale, normal);
    visual_proj_ = random_matrix(P, spec_.d_visual, scale, normal);
    question_embed_ = random_matrix(spec_.n_query_types, spec_.d_question, 1.0, normal);

    const auto [within, across] = hierarchy_similarity(world_);
    if (spec_.n_parent_classes > 1 && spec_.n_child_classes > spec_.n_parent_classes && !(within > across)) {
      throw Error("synthetic generator: planted hierarchy is not visible (within-parent similarity " +
                  std::to_string(within) + " <= across-parent " + std::to_string(across) + ")");
    }
  }

  const World& world() const noexcept { return world_; }
  const SyntheticSpec& spec() const noexcept { return spec_; }

  GeneratedSample next() {
    std::normal_distribution<double> normal(0.0, 1.0);
    GeneratedSample s;
    s.child = static_cast<std::size_t>(rng_() % spec_.n_child_classes);
    s.parent = world_.parent_of[s.child];
    const std::size_t query = static_cast<std::size_t>(rng_() % spec_.n_query_types);
    const auto& proto = world_.child_prototypes[s.child];
    s.bundle.audio = project_sequence(proto, audio_proj_, spec_.d_audio, normal);
    s.bundle.visual = project_sequence(proto, visual_proj_, spec_.d_visual, normal);
    s.bundle.question = Tensor(Shape{spec_.d_question},
                               std::vector<double>(question_embed_.begin() + static_cast<std::ptrdiff_t>(query * spec_.d_question),
                                                   question_embed_.begin() + static_cast<std::ptrdiff_t>((query + 1) * spec_.d_question)));
    s.bundle.query_type = static_cast<int>(query);
    s.bundle.label = spec_.label_for(s.child, query);
    return s;
  }

 private:
  std::vector<double> random_matrix(std::size_t rows, std::size_t cols, double scale,
                                    std::normal_distribution<double>& normal) {
    std::vector<double> m(rows * cols);
    for (double& v : m) v = scale * normal(rng_);
    return m;
  }

  Tensor project_sequence(const std::vector<double>& proto, const std::vector<double>& proj, std::size_t width,
                          std::normal_distribution<double>& normal) {
    std::vector<double> clean(width, 0.0);
    for (std::size_t i = 0; i < proto.size(); ++i)
      for (std::size_t j = 0; j < width; ++j) clean[j] += proto[i] * proj[i * width + j];
    Tensor out(Shape{spec_.T, width});
    for (std::size_t t = 0; t < spec_.T; ++t)
      for (std::size_t j = 0; j < width; ++j) {
        const double noise = spec_.noise_std > 0.0 ? spec_.noise_std * normal(rng_) : 0.0;
        out[t * width + j] = clean[j] + noise;
      }
    return out;
  }

  SyntheticSpec spec_;
  Rng rng_;
  World world_;
  std::vector<double> audio_proj_;
  std::vector<double> visual_proj_;
  std::vector<double> question_embed_;
};

inline std::string sample_stem(const std::string& split, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%06zu", i);
  return "samples/" + split + "_" + buf;
}

inline void write_json_file(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": malformed JSON: " + e.what());
  }
}

struct GeneratedPaths {
  std::filesystem::path manifest;
  std::filesystem::path eval_manifest;  ///< empty unless n_eval_samples > 0
};

/// Writes manifest.json (and eval_manifest.json when requested) at `root`,
/// with sample tensors under root/samples/.
inline GeneratedPaths generate_synthetic_dataset(const SyntheticSpec& spec, const std::filesystem::path& root) {
  SyntheticGenerator gen(spec);
  std::error_code ec;
  std::filesystem::create_directories(root / "samples", ec);
  if (ec) throw IoError("cannot create " + (root / "samples").string() + ": " + ec.message());

  json vocab = json::array();
  for (std::size_t i = 0; i < spec.vocab_size; ++i) vocab.push_back("answer_" + std::to_string(i));

  auto write_split = [&](const std::string& split, std::size_t count, const std::filesystem::path& manifest) {
    json samples = json::array();
    for (std::size_t i = 0; i < count; ++i) {
      const GeneratedSample s = gen.next();
      const std::string stem = sample_stem(split, i);
      io::write_tensor_file(root / (stem + ".audio.sht"), s.bundle.audio);
      io::write_tensor_file(root / (stem + ".visual.sht"), s.bundle.visual);
      io::write_tensor_file(root / (stem + ".question.sht"), s.bundle.question);
      samples.push_back(json{{"audio", stem + ".audio.sht"},
                             {"visual", stem + ".visual.sht"},
                             {"question", stem + ".question.sht"},
                             {"label", s.bundle.label},
                             {"query_type", s.bundle.query_type},
                             {"child", s.child},
                             {"parent", s.parent}});
    }
    json m{{"format", kManifestFormat}, {"version", kManifestVersion}, {"split", split},
           {"spec", spec},              {"seed", spec.seed},            {"vocab", vocab},
           {"samples", samples}};
    write_json_file(manifest, m);
  };

  GeneratedPaths paths{root / "manifest.json", {}};
  write_split("train", spec.n_samples, paths.manifest);
  if (spec.n_eval_samples > 0) {
    paths.eval_manifest = root / "eval_manifest.json";
    write_split("eval", spec.n_eval_samples, paths.eval_manifest);
  }
  return paths;
}

/// Reads a manifest and every tensor it references, in manifest order,
/// checking each against the declared shapes.
inline Dataset load_dataset_manifest(const std::filesystem::path& path) {
  const json m = read_json_file(path);
  if (m.value("format", std::string{}) != kManifestFormat) {
    throw IoError(path.string() + ": not a dataset manifest (format field)");
  }
  if (m.value("version", 0) != kManifestVersion) throw IoError(path.string() + ": unsupported manifest version");
  Dataset ds;
  ds.manifest_path = path;
  try {
    const json& spec = m.at("spec");
    ds.shapes = FeatureShapes{spec.at("T").get<std::size_t>(), spec.at("d_audio").get<std::size_t>(),
                              spec.at("d_visual").get<std::size_t>(), spec.at("d_question").get<std::size_t>(),
                              spec.at("vocab_size").get<std::size_t>()};
    for (const auto& v : m.at("vocab")) ds.vocab.push_back(v.get<std::string>());
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": incomplete manifest: " + e.what());
  }
  if (ds.vocab.size() != ds.shapes.vocab_size) throw IoError(path.string() + ": vocab list length != vocab_size");

  const std::filesystem::path base = path.parent_path();
  const json& samples = m.at("samples");
  ds.samples.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const json& s = samples[i];
    auto load = [&](const char* key, const Shape& expect) {
      const std::filesystem::path file = base / s.at(key).get<std::string>();
      if (!std::filesystem::exists(file)) throw MissingFileError(i, std::string(key) + " file missing: " + file.string());
      Tensor t;
      try {
        t = io::read_tensor_file(file);
      } catch (const TruncatedPayloadError& e) {
        throw SampleShapeError(i, std::string(key) + ": " + e.what());
      } catch (const IoError& e) {
        throw ManifestError(i, e.what());
      }
      if (t.shape() != expect) {
        throw SampleShapeError(i, std::string(key) + " has shape " + shape_str(t.shape()) + ", expected " +
                                      shape_str(expect));
      }
      return t;
    };
    FeatureBundle b;
    b.audio = load("audio", Shape{ds.shapes.T, ds.shapes.d_audio});
    b.visual = load("visual", Shape{ds.shapes.T, ds.shapes.d_visual});
    b.question = load("question", Shape{ds.shapes.d_question});
    b.label = s.at("label").get<int>();
    b.query_type = s.value("query_type", -1);
    if (b.label < 0 || static_cast<std::size_t>(b.label) >= ds.shapes.vocab_size) {
      throw ManifestError(i, "label " + std::to_string(b.label) + " outside vocabulary");
    }
    ds.samples.push_back(std::move(b));
  }
  return ds;
}

}  // namespace shmamba::data
