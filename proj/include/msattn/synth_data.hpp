#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "msattn/tensor.hpp"

namespace msattn {

/// Malformed dataset configuration or file.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class SourceRole { Reference, Additional };

struct SourceSpec {
  std::string name;
  std::size_t channels = 1;
  std::size_t neighborhood = 1;
  std::size_t object_size = 1;
  std::size_t window = 1;
  SourceRole role = SourceRole::Additional;
  std::size_t offset_jitter = 0;  // max per-axis displacement from the centred position

  /// Throws DataError on an inconsistent spec.
  void validate() const;
  /// Top-left coordinate of the centred object.
  std::size_t centered_offset() const { return (neighborhood - object_size) / 2; }
};

/// ref 3x25x25 (object fills the frame), a 8x12x12 (object 4, W=5),
/// b 1x24x24 (object 8, W=8). Jitter spans the whole neighbourhood.
std::vector<SourceSpec> default_sources();

/// Reads "name channels neighborhood object window role jitter" lines ('#' comments).
std::vector<SourceSpec> parse_source_specs(const std::string& text);

using Offset = std::array<std::int16_t, 2>;  // (row, col) top-left of the planted object

/// One split of a multisource dataset, stored source-major.
struct Split {
  std::string name;
  std::vector<Tensor> images;               // per source [n, B, N, N]
  std::vector<int> labels;                  // 0-based
  std::vector<std::vector<Offset>> offsets; // per source, per sample; diagnostics only

  std::size_t size() const { return labels.size(); }
  /// Batch of the given sample indices for one source.
  Tensor gather(std::size_t source, std::span<const std::size_t> indices) const;
};

struct DatasetManifest {
  std::size_t classes = 0;
  std::vector<std::size_t> class_counts;
  std::vector<SourceSpec> sources;
  std::uint64_t seed = 0;
  double difficulty = 0.0;
  double imbalance = 1.0;
  std::array<std::vector<std::size_t>, 3> split_counts;  // train/val/test per class

  std::string to_text() const;
  static DatasetManifest from_text(const std::string& text);
  std::size_t source_index(const std::string& name) const;
};

struct Dataset {
  DatasetManifest manifest;
  Split train, val, test;
};

struct GeneratorConfig {
  std::size_t classes = 10;
  std::size_t max_per_class = 300;
  double imbalance = 10.0;  // largest / smallest class count
  double difficulty = 0.5;  // 0: orthogonal noiseless signatures, 1: indistinguishable
  std::uint64_t seed = 1;
  std::vector<SourceSpec> sources = default_sources();
};

/// count_c = round(max * (c+1)^-g) with g chosen so count_0 / count_{C-1} = ratio.
std::vector<std::size_t> power_law_counts(std::size_t classes, std::size_t max_count, double ratio);

/// Per-class 60/20/20 split sizes.
std::array<std::size_t, 3> split_sizes(std::size_t count);

/// Per-class unit-energy templates [C, B, s, s] for one source.
Tensor class_templates(const SourceSpec& spec, std::size_t classes, std::uint64_t seed, std::size_t source_index);

Dataset generate_dataset(const GeneratorConfig& config);

/// p_c proportional to 1 / count_c.
std::vector<double> oversample_weights(std::span<const std::size_t> class_counts);

/// Draws sample indices with class probability proportional to inverse frequency.
/// Draws sample indices with per-sample rate p_c, which makes the class stream uniform.
class OversamplingSampler {
 public:
  OversamplingSampler(std::span<const int> labels, std::size_t classes);
  std::vector<std::size_t> draw(std::size_t n, Rng& rng) const;

 private:
  std::vector<std::vector<std::size_t>> members_;
  std::vector<double> cumulative_;
};

/// Shifts every channel of an image [B,N,N] by (dy, dx), zero-filling vacated pixels.
void shift_image(float* image, std::size_t channels, std::size_t side, int dy, int dx);

/// Independent per-axis integer shift in [-floor(max_frac*N), floor(max_frac*N)].
Tensor augment_shift(const Tensor& image, double max_frac, Rng& rng);
int max_shift(std::size_t side, double max_frac);

void save_split(const std::filesystem::path& path, const DatasetManifest& manifest, const Split& split);
Split load_split(const std::filesystem::path& path, DatasetManifest* manifest = nullptr);

/// Writes train.msws / val.msws / test.msws and manifest.txt.
void save_dataset(const std::filesystem::path& dir, const Dataset& dataset);
Dataset load_dataset(const std::filesystem::path& dir);

/// FNV-1a over the three split files.
std::uint64_t dataset_hash(const std::filesystem::path& dir);

}  // namespace msattn
