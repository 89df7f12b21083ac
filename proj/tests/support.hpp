#ifndef CBM_TESTS_SUPPORT_HPP
#define CBM_TESTS_SUPPORT_HPP

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

#include <unistd.h>

#include "cbm/data.hpp"
#include "cbm/rng.hpp"

namespace testing {

// Fresh scratch directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("cbm_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline cbm::ConceptDataset small_synthetic(std::int64_t n = 300, std::uint64_t seed = 7) {
  cbm::SyntheticSpec spec;
  spec.n_examples = n;
  spec.n_concepts = 20;
  spec.n_classes = 4;
  spec.embed_dim = 24;
  spec.concepts_per_class = 4;
  spec.seed = seed;
  return cbm::split_dataset(cbm::generate_synthetic(spec), 0.25, seed);
}

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300});
}

}  // namespace testing

#endif
