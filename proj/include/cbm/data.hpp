#ifndef CBM_DATA_HPP
#define CBM_DATA_HPP

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace cbm {

using EmbeddingMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using AttributeMatrix = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using IndexList = std::vector<std::uint32_t>;

struct Split {
  IndexList train;
  IndexList test;

  bool empty() const { return train.empty() && test.empty(); }
};

// Precomputed image embeddings with binary concept annotations and class labels.
//
// Shapes: image_embeddings N x K, attributes N x M, labels N,
// text_embeddings (optional) M x K. Embeddings are kept in float32 exactly as
// ingested; computation casts to double.
struct ConceptDataset {
  EmbeddingMatrix image_embeddings;
  AttributeMatrix attributes;
  std::vector<std::uint32_t> labels;
  std::vector<std::string> concept_names;
  std::vector<std::string> class_names;
  std::optional<EmbeddingMatrix> text_embeddings;
  Split split;

  Eigen::Index num_examples() const { return image_embeddings.rows(); }
  Eigen::Index embed_dim() const { return image_embeddings.cols(); }
  Eigen::Index num_concepts() const { return static_cast<Eigen::Index>(concept_names.size()); }
  Eigen::Index num_classes() const { return static_cast<Eigen::Index>(class_names.size()); }
};

// Throws DataError / DimensionError when any dataset invariant is violated.
void validate_dataset(const ConceptDataset& dataset);

// Field-for-field, bitwise comparison of all arrays.
bool identical(const ConceptDataset& a, const ConceptDataset& b);

ConceptDataset load_dataset(const std::filesystem::path& dir);
void save_dataset(const ConceptDataset& dataset, const std::filesystem::path& dir);

// Random partition with |test| = round(test_fraction * N). Pure in (N, fraction, seed).
ConceptDataset split_dataset(ConceptDataset dataset, double test_fraction, std::uint64_t seed);

struct SyntheticSpec {
  std::int64_t n_examples = 2000;
  std::int64_t n_concepts = 50;
  std::int64_t n_classes = 10;
  std::int64_t embed_dim = 64;
  std::int64_t concepts_per_class = 8;
  double attribute_flip_rate = 0.05;
  double embedding_noise_std = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
};

// Class-prototype generator. Each class owns a fixed random set of
// concepts_per_class active concepts; examples copy their prototype with
// independent bit flips, and embeddings are attributes * G + noise for a fixed
// random mixing matrix G (M x K). The rows of G double as text embeddings.
ConceptDataset generate_synthetic(const SyntheticSpec& spec);

// Gathers the listed rows of any dense expression.
template <typename Derived>
typename Derived::PlainObject select_rows(const Eigen::DenseBase<Derived>& m,
                                          std::span<const std::uint32_t> rows) {
  typename Derived::PlainObject out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
  }
  return out;
}

std::vector<std::uint32_t> select_labels(std::span<const std::uint32_t> labels,
                                         std::span<const std::uint32_t> rows);

}  // namespace cbm

#endif  // CBM_DATA_HPP
