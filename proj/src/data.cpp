#include "cbm/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <json.hpp>

#include "cbm/binary_io.hpp"
#include "cbm/error.hpp"
#include "cbm/rng.hpp"

namespace cbm {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void validate_split(const Split& split, std::size_t n) {
  std::vector<char> seen(n, 0);
  auto mark = [&](const IndexList& list, const char* which) {
    for (auto idx : list) {
      if (idx >= n) throw DataError(std::string("split index out of range in ") + which);
      if (seen[idx]) throw DataError("train and test splits overlap or repeat an index");
      seen[idx] = 1;
    }
  };
  mark(split.train, "train");
  mark(split.test, "test");
}

EmbeddingMatrix embeddings_from(std::vector<float> values, Eigen::Index rows, Eigen::Index cols) {
  EmbeddingMatrix m(rows, cols);
  std::copy(values.begin(), values.end(), m.data());
  return m;
}

double log_binomial(std::int64_t n, std::int64_t k) {
  return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
}

}  // namespace

void validate_dataset(const ConceptDataset& d) {
  const auto n = d.num_examples();
  const auto m = d.num_concepts();
  const auto c = d.num_classes();
  if (d.attributes.rows() != n || d.attributes.cols() != m) {
    throw DimensionError("attributes must be N x M (" + std::to_string(n) + " x " +
                         std::to_string(m) + ")");
  }
  if (static_cast<Eigen::Index>(d.labels.size()) != n) {
    throw DimensionError("labels length must equal N");
  }
  if (d.text_embeddings && (d.text_embeddings->rows() != m || d.text_embeddings->cols() != d.embed_dim())) {
    throw DimensionError("text embeddings must be M x K");
  }
  for (Eigen::Index i = 0; i < d.attributes.size(); ++i) {
    if (d.attributes.data()[i] > 1) throw DataError("attribute value outside {0,1}");
  }
  for (auto label : d.labels) {
    if (static_cast<Eigen::Index>(label) >= c) throw DataError("label >= number of classes");
  }
  validate_split(d.split, static_cast<std::size_t>(n));
}

bool identical(const ConceptDataset& a, const ConceptDataset& b) {
  auto same_f32 = [](const EmbeddingMatrix& x, const EmbeddingMatrix& y) {
    return x.rows() == y.rows() && x.cols() == y.cols() &&
           std::equal(x.data(), x.data() + x.size(), y.data(), [](float p, float q) {
             return std::bit_cast<std::uint32_t>(p) == std::bit_cast<std::uint32_t>(q);
           });
  };
  if (!same_f32(a.image_embeddings, b.image_embeddings)) return false;
  if (a.attributes.rows() != b.attributes.rows() || a.attributes.cols() != b.attributes.cols() ||
      !std::equal(a.attributes.data(), a.attributes.data() + a.attributes.size(), b.attributes.data())) {
    return false;
  }
  if (a.text_embeddings.has_value() != b.text_embeddings.has_value()) return false;
  if (a.text_embeddings && !same_f32(*a.text_embeddings, *b.text_embeddings)) return false;
  return a.labels == b.labels && a.concept_names == b.concept_names &&
         a.class_names == b.class_names && a.split.train == b.split.train &&
         a.split.test == b.split.test;
}

ConceptDataset load_dataset(const fs::path& dir) {
  const auto meta_path = dir / "meta.json";
  std::ifstream meta_in(meta_path);
  if (!meta_in) throw DataError("missing file: " + meta_path.string());
  json meta;
  try {
    meta = json::parse(meta_in);
  } catch (const json::exception& e) {
    throw DataError("malformed meta.json: " + std::string(e.what()));
  }

  ConceptDataset d;
  Eigen::Index n = 0, k = 0, m = 0, c = 0;
  bool has_text = false;
  try {
    n = meta.at("n").get<Eigen::Index>();
    k = meta.at("k").get<Eigen::Index>();
    m = meta.at("m").get<Eigen::Index>();
    c = meta.at("c").get<Eigen::Index>();
    d.concept_names = meta.at("concept_names").get<std::vector<std::string>>();
    d.class_names = meta.at("class_names").get<std::vector<std::string>>();
    has_text = meta.value("has_text_embeddings", false);
    if (meta.contains("split")) {
      d.split.train = meta["split"].value("train", IndexList{});
      d.split.test = meta["split"].value("test", IndexList{});
    }
  } catch (const json::exception& e) {
    throw DataError("meta.json: " + std::string(e.what()));
  }
  if (n < 0 || k < 0 || m < 0 || c < 0) throw DataError("meta.json: negative dimension");
  if (static_cast<Eigen::Index>(d.concept_names.size()) != m) {
    throw DimensionError("meta.json: concept_names length != m");
  }
  if (static_cast<Eigen::Index>(d.class_names.size()) != c) {
    throw DimensionError("meta.json: class_names length != c");
  }

  const auto nk = static_cast<std::size_t>(n * k);
  d.image_embeddings = embeddings_from(io::read_f32(dir / "embeddings.f32", nk), n, k);
  const auto attrs = io::read_u8(dir / "attributes.u8", static_cast<std::size_t>(n * m));
  d.attributes.resize(n, m);
  std::copy(attrs.begin(), attrs.end(), d.attributes.data());
  d.labels = io::read_u32(dir / "labels.u32", static_cast<std::size_t>(n));
  if (has_text) {
    d.text_embeddings =
        embeddings_from(io::read_f32(dir / "text_embeddings.f32", static_cast<std::size_t>(m * k)), m, k);
  }
  validate_dataset(d);
  return d;
}

void save_dataset(const ConceptDataset& d, const fs::path& dir) {
  validate_dataset(d);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create directory " + dir.string() + ": " + ec.message());

  json meta = {
      {"n", d.num_examples()},
      {"k", d.embed_dim()},
      {"m", d.num_concepts()},
      {"c", d.num_classes()},
      {"concept_names", d.concept_names},
      {"class_names", d.class_names},
      {"has_text_embeddings", d.text_embeddings.has_value()},
      {"split", {{"train", d.split.train}, {"test", d.split.test}}},
  };
  std::ofstream out(dir / "meta.json");
  if (!out) throw DataError("cannot write " + (dir / "meta.json").string());
  out << meta.dump(2) << '\n';

  const auto& e = d.image_embeddings;
  io::write_f32(dir / "embeddings.f32", {e.data(), static_cast<std::size_t>(e.size())});
  io::write_u8(dir / "attributes.u8",
               {d.attributes.data(), static_cast<std::size_t>(d.attributes.size())});
  io::write_u32(dir / "labels.u32", d.labels);
  if (d.text_embeddings) {
    const auto& t = *d.text_embeddings;
    io::write_f32(dir / "text_embeddings.f32", {t.data(), static_cast<std::size_t>(t.size())});
  }
}

ConceptDataset split_dataset(ConceptDataset d, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw ConfigError("test fraction must lie in (0,1)");
  }
  const auto n = static_cast<std::size_t>(d.num_examples());
  if (n < 2) throw DataError("splitting requires at least 2 examples");
  const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n)));
  if (n_test == 0 || n_test == n) throw ConfigError("test fraction leaves an empty partition");

  IndexList order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = static_cast<std::uint32_t>(i);
  CounterRng rng(seed, Stream::kSplit);
  deterministic_shuffle(order, rng);

  d.split.test.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
  d.split.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_test), order.end());
  std::sort(d.split.test.begin(), d.split.test.end());
  std::sort(d.split.train.begin(), d.split.train.end());
  return d;
}

void SyntheticSpec::validate() const {
  if (n_examples < 1 || n_concepts < 1 || n_classes < 1 || embed_dim < 1 || concepts_per_class < 1) {
    throw ConfigError("synthetic spec: all counts must be >= 1");
  }
  if (concepts_per_class > n_concepts) throw ConfigError("synthetic spec: concepts_per_class > M");
  if (!(attribute_flip_rate >= 0.0 && attribute_flip_rate < 1.0)) {
    throw ConfigError("synthetic spec: flip rate must lie in [0,1)");
  }
  if (!(embedding_noise_std >= 0.0) || !std::isfinite(embedding_noise_std)) {
    throw ConfigError("synthetic spec: noise std must be finite and >= 0");
  }
  if (log_binomial(n_concepts, concepts_per_class) < std::log(static_cast<double>(n_classes)) - 1e-9) {
    throw ConfigError("synthetic spec: too few concept subsets for distinct class prototypes");
  }
}

ConceptDataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const Eigen::Index n = spec.n_examples, m = spec.n_concepts, c = spec.n_classes, k = spec.embed_dim;

  // Distinct class prototypes.
  CounterRng proto_rng(spec.seed, Stream::kSynthetic, 0);
  AttributeMatrix prototypes = AttributeMatrix::Zero(c, m);
  std::set<std::vector<std::uint32_t>> used;
  std::vector<std::uint32_t> pool(static_cast<std::size_t>(m));
  for (Eigen::Index cls = 0; cls < c; ++cls) {
    std::vector<std::uint32_t> chosen;
    do {
      for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = static_cast<std::uint32_t>(i);
      for (std::int64_t j = 0; j < spec.concepts_per_class; ++j) {
        const auto pick = static_cast<std::size_t>(j) + proto_rng.below(pool.size() - static_cast<std::size_t>(j));
        std::swap(pool[static_cast<std::size_t>(j)], pool[pick]);
      }
      chosen.assign(pool.begin(), pool.begin() + spec.concepts_per_class);
      std::sort(chosen.begin(), chosen.end());
    } while (!used.insert(chosen).second);
    for (auto idx : chosen) prototypes(cls, idx) = 1;
  }

  CounterRng mix_rng(spec.seed, Stream::kSynthetic, 1);
  const double mix_scale = 1.0 / std::sqrt(static_cast<double>(spec.concepts_per_class));
  Eigen::MatrixXd mixing(m, k);
  for (Eigen::Index i = 0; i < m; ++i) {
    for (Eigen::Index j = 0; j < k; ++j) mixing(i, j) = mix_rng.normal() * mix_scale;
  }

  ConceptDataset d;
  d.labels.resize(static_cast<std::size_t>(n));
  d.attributes.resize(n, m);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto cls = static_cast<std::uint32_t>(i % c);
    d.labels[static_cast<std::size_t>(i)] = cls;
    for (Eigen::Index j = 0; j < m; ++j) {
      std::uint8_t bit = prototypes(cls, j);
      if (spec.attribute_flip_rate > 0.0 &&
          counter_uniform(spec.seed, Stream::kSynthetic, 2, static_cast<std::uint64_t>(i),
                          static_cast<std::uint64_t>(j)) < spec.attribute_flip_rate) {
        bit ^= 1;
      }
      d.attributes(i, j) = bit;
    }
  }

  Eigen::MatrixXd embeddings = d.attributes.cast<double>() * mixing;
  if (spec.embedding_noise_std > 0.0) {
    for (Eigen::Index i = 0; i < n; ++i) {
      CounterRng noise(spec.seed, Stream::kSynthetic, 3 + static_cast<std::uint64_t>(i));
      for (Eigen::Index j = 0; j < k; ++j) embeddings(i, j) += spec.embedding_noise_std * noise.normal();
    }
  }
  d.image_embeddings = embeddings.cast<float>();
  d.text_embeddings = EmbeddingMatrix(mixing.cast<float>());

  for (Eigen::Index j = 0; j < m; ++j) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "concept_%03ld", static_cast<long>(j));
    d.concept_names.emplace_back(buf);
  }
  for (Eigen::Index j = 0; j < c; ++j) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "class_%02ld", static_cast<long>(j));
    d.class_names.emplace_back(buf);
  }
  return d;
}

std::vector<std::uint32_t> select_labels(std::span<const std::uint32_t> labels,
                                         std::span<const std::uint32_t> rows) {
  std::vector<std::uint32_t> out;
  out.reserve(rows.size());
  for (auto r : rows) out.push_back(labels[r]);
  return out;
}

}  // namespace cbm
