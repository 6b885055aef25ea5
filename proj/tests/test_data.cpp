#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "shmamba/data.hpp"

using namespace shmamba;
using namespace shmamba::data;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir() {
  const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
  const fs::path dir = fs::temp_directory_path() / "shmamba_test_data" /
                       (std::string(info->test_suite_name()) + "." + info->name());
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string bytes_of(const fs::path& p) { return io::read_file_bytes(p); }

std::vector<double> pooled(const FeatureBundle& b) {
  std::vector<double> out;
  for (const Tensor* t : {&b.audio, &b.visual}) {
    const std::size_t T = t->dim(0), D = t->dim(1);
    for (std::size_t j = 0; j < D; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < T; ++i) s += (*t)[i * D + j];
      out.push_back(s / static_cast<double>(T));
    }
  }
  return out;
}

}  // namespace

TEST(TensorFile, RoundTripWithinBinary32) {
  const fs::path dir = scratch_dir();
  Rng rng(1);
  Tensor x(Shape{3, 4, 5});
  for (double& v : x.data()) v = 4.0 * uniform01(rng) - 2.0;
  io::write_tensor_file(dir / "x.sht", x);
  const Tensor y = io::read_tensor_file(dir / "x.sht");
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], static_cast<double>(static_cast<float>(x[i])));
  EXPECT_EQ(fs::file_size(dir / "x.sht"), 12u + 8u * 3u + 4u * 60u);
}

TEST(TensorFile, HeaderLayoutIsLittleEndian) {
  const std::string b = io::encode_tensor(Tensor(Shape{2}, {1.0, -2.0}));
  ASSERT_EQ(b.size(), 12u + 8u + 8u);
  EXPECT_EQ(b.substr(0, 4), "SHT1");
  EXPECT_EQ(io::detail::get_le(b, 4, 4), 1u);
  EXPECT_EQ(io::detail::get_le(b, 8, 4), 1u);
  EXPECT_EQ(io::detail::get_le(b, 12, 8), 2u);
  EXPECT_EQ(io::detail::get_le(b, 20, 4), 0x3F800000u);
  EXPECT_EQ(io::detail::get_le(b, 24, 4), 0xC0000000u);
}

TEST(TensorFile, DistinctErrors) {
  std::string b = io::encode_tensor(Tensor(Shape{2, 2}, {1, 2, 3, 4}));
  std::string magic = b;
  magic.replace(0, 4, "XXXX");
  EXPECT_THROW(io::decode_tensor(magic), BadMagicError);
  std::string version = b;
  version[4] = 2;
  EXPECT_THROW(io::decode_tensor(version), VersionMismatchError);
  EXPECT_THROW(io::decode_tensor(b.substr(0, b.size() - 1)), TruncatedPayloadError);
  std::string dims = b;
  dims[12] = 3;
  EXPECT_THROW(io::decode_tensor(dims), TruncatedPayloadError);
  std::string huge = b;
  huge[19] = 0x7F;
  EXPECT_THROW(io::decode_tensor(huge), TruncatedPayloadError);
}

TEST(TensorFile, RejectsNonFiniteOnWrite) {
  const fs::path dir = scratch_dir();
  Tensor x(Shape{2}, {1.0, std::numeric_limits<double>::infinity()});
  EXPECT_THROW(io::write_tensor_file(dir / "x.sht", x), NumericalError);
}

TEST(Synthetic, SixtyFourSamplesLabelsInRange) {
  const fs::path dir = scratch_dir();
  SyntheticSpec spec;
  spec.n_samples = 64;
  spec.vocab_size = 6;
  const GeneratedPaths paths = generate_synthetic_dataset(spec, dir);
  const json m = read_json_file(paths.manifest);
  ASSERT_EQ(m.at("samples").size(), 64u);
  const Dataset ds = load_dataset_manifest(paths.manifest);
  ASSERT_EQ(ds.samples.size(), 64u);
  for (const auto& s : ds.samples) {
    EXPECT_GE(s.label, 0);
    EXPECT_LT(s.label, 6);
    EXPECT_EQ(s.audio.shape(), (Shape{spec.T, spec.d_audio}));
    EXPECT_EQ(s.visual.shape(), (Shape{spec.T, spec.d_visual}));
    EXPECT_EQ(s.question.shape(), (Shape{spec.d_question}));
  }
  EXPECT_EQ(ds.vocab.size(), 6u);
  EXPECT_TRUE(paths.eval_manifest.empty());
}

TEST(Synthetic, ByteIdenticalAcrossRuns) {
  const fs::path dir = scratch_dir();
  SyntheticSpec spec;
  spec.seed = 7;
  spec.n_samples = 12;
  spec.n_eval_samples = 4;
  generate_synthetic_dataset(spec, dir / "a");
  generate_synthetic_dataset(spec, dir / "b");
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir / "a")) {
    if (!e.is_regular_file()) continue;
    const fs::path rel = fs::relative(e.path(), dir / "a");
    EXPECT_EQ(bytes_of(e.path()), bytes_of(dir / "b" / rel)) << rel;
    ++files;
  }
  EXPECT_EQ(files, 2u + 3u * 16u);
  spec.seed = 8;
  generate_synthetic_dataset(spec, dir / "c");
  EXPECT_NE(bytes_of(dir / "a" / "samples" / "train_000000.audio.sht"),
            bytes_of(dir / "c" / "samples" / "train_000000.audio.sht"));
}

TEST(Synthetic, ZeroNoiseSameChildSameFeatures) {
  SyntheticSpec spec;
  spec.noise_std = 0.0;
  SyntheticGenerator gen(spec);
  std::map<std::size_t, FeatureBundle> first;
  std::size_t compared = 0;
  for (int i = 0; i < 64; ++i) {
    GeneratedSample s = gen.next();
    auto it = first.find(s.child);
    if (it == first.end()) {
      first.emplace(s.child, std::move(s.bundle));
      continue;
    }
    EXPECT_EQ(s.bundle.audio, it->second.audio);
    EXPECT_EQ(s.bundle.visual, it->second.visual);
    ++compared;
  }
  EXPECT_GT(compared, 0u);
}

TEST(Synthetic, LabelDependsOnChildAndQuery) {
  SyntheticSpec spec;
  SyntheticGenerator gen(spec);
  std::map<std::pair<std::size_t, int>, int> seen;
  std::set<int> queries;
  for (int i = 0; i < 256; ++i) {
    const GeneratedSample s = gen.next();
    EXPECT_EQ(s.parent, gen.world().parent_of[s.child]);
    const auto key = std::make_pair(s.child, s.bundle.query_type);
    auto [it, inserted] = seen.emplace(key, s.bundle.label);
    if (!inserted) {
      EXPECT_EQ(it->second, s.bundle.label);
    }
    queries.insert(s.bundle.query_type);
  }
  EXPECT_EQ(queries.size(), spec.n_query_types);
}

TEST(Synthetic, NearestCentroidSeparability) {
  SyntheticSpec spec;
  spec.noise_std = 0.05;
  SyntheticGenerator gen(spec);
  std::vector<std::vector<double>> sums(spec.n_child_classes);
  std::vector<std::size_t> counts(spec.n_child_classes, 0);
  for (int i = 0; i < 256; ++i) {
    const GeneratedSample s = gen.next();
    const auto f = pooled(s.bundle);
    if (sums[s.child].empty()) sums[s.child].assign(f.size(), 0.0);
    for (std::size_t j = 0; j < f.size(); ++j) sums[s.child][j] += f[j];
    ++counts[s.child];
  }
  for (std::size_t c = 0; c < sums.size(); ++c) {
    ASSERT_GT(counts[c], 0u);
    for (double& v : sums[c]) v /= static_cast<double>(counts[c]);
  }
  std::size_t correct = 0;
  const std::size_t n_test = 256;
  for (std::size_t i = 0; i < n_test; ++i) {
    const GeneratedSample s = gen.next();
    const auto f = pooled(s.bundle);
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < sums.size(); ++c) {
      double d = 0.0;
      for (std::size_t j = 0; j < f.size(); ++j) d += (f[j] - sums[c][j]) * (f[j] - sums[c][j]);
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    correct += best == s.child;
  }
  EXPECT_GE(static_cast<double>(correct) / n_test, 0.95);
}

TEST(Synthetic, HierarchyVisibleInPrototypes) {
  for (std::uint64_t seed : {1, 7, 42}) {
    SyntheticSpec spec;
    spec.seed = seed;
    SyntheticGenerator gen(spec);
    const auto [within, across] = hierarchy_similarity(gen.world());
    EXPECT_GT(within, across) << "seed " << seed;
  }
}

TEST(Synthetic, InvalidSpecRejected) {
  SyntheticSpec spec;
  spec.n_child_classes = 2;
  EXPECT_THROW(SyntheticGenerator{spec}, ConfigError);
  spec = SyntheticSpec{};
  spec.vocab_size = 1;
  EXPECT_THROW(SyntheticGenerator{spec}, ConfigError);
  spec = SyntheticSpec{};
  spec.noise_std = -1.0;
  EXPECT_THROW(SyntheticGenerator{spec}, ConfigError);
}

TEST(Manifest, MissingFileNamesSample) {
  const fs::path dir = scratch_dir();
  SyntheticSpec spec;
  spec.n_samples = 8;
  const auto paths = generate_synthetic_dataset(spec, dir);
  fs::remove(dir / "samples" / "train_000005.visual.sht");
  try {
    load_dataset_manifest(paths.manifest);
    FAIL() << "expected MissingFileError";
  } catch (const MissingFileError& e) {
    EXPECT_EQ(e.sample(), 5u);
    EXPECT_NE(std::string(e.what()).find("sample 5"), std::string::npos);
  }
}

TEST(Manifest, CorruptDimsNamesSample) {
  const fs::path dir = scratch_dir();
  SyntheticSpec spec;
  spec.n_samples = 8;
  const auto paths = generate_synthetic_dataset(spec, dir);
  const fs::path victim = dir / "samples" / "train_000003.audio.sht";
  const Tensor t = io::read_tensor_file(victim);
  io::write_tensor_file(victim, t.reshaped(Shape{t.dim(0) * 2, t.dim(1) / 2}));
  try {
    load_dataset_manifest(paths.manifest);
    FAIL() << "expected SampleShapeError";
  } catch (const SampleShapeError& e) {
    EXPECT_EQ(e.sample(), 3u);
  }

  std::string bytes = io::read_file_bytes(victim);
  bytes[12] = static_cast<char>(bytes[12] + 1);
  std::ofstream(victim, std::ios::binary | std::ios::trunc) << bytes;
  EXPECT_THROW(load_dataset_manifest(paths.manifest), SampleShapeError);
}

TEST(Manifest, RejectsForeignDocuments) {
  const fs::path dir = scratch_dir();
  write_json_file(dir / "m.json", json{{"format", "other"}, {"version", 1}});
  EXPECT_THROW(load_dataset_manifest(dir / "m.json"), IoError);
  write_json_file(dir / "m.json", json{{"format", kManifestFormat}, {"version", 9}});
  EXPECT_THROW(load_dataset_manifest(dir / "m.json"), IoError);
}

TEST(Manifest, EvalSplitShareShapes) {
  const fs::path dir = scratch_dir();
  SyntheticSpec spec;
  spec.n_samples = 4;
  spec.n_eval_samples = 6;
  const auto paths = generate_synthetic_dataset(spec, dir);
  const Dataset tr = load_dataset_manifest(paths.manifest);
  const Dataset ev = load_dataset_manifest(paths.eval_manifest);
  EXPECT_EQ(ev.samples.size(), 6u);
  EXPECT_EQ(ev.shapes.d_visual, tr.shapes.d_visual);
  EXPECT_NE(ev.samples[0].audio, tr.samples[0].audio);
}
