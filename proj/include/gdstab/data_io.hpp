#pragma once

// Dataset construction and file emission.

#include "gdstab/model.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

namespace gdstab {

enum class SyntheticKind { linear_teacher, gaussian_blobs, scalar_pair };
std::string to_string(SyntheticKind k);
SyntheticKind parse_synthetic_kind(std::string_view name);

struct SyntheticSpec {
  SyntheticKind kind = SyntheticKind::linear_teacher;
  int d0 = 2;
  int dh = 2;
  int n = 10;
  int rank = 1;              // linear_teacher
  int classes = 2;           // gaussian_blobs; labels are one-hot, so dh == classes
  double blob_sigma = 0.5;   // gaussian_blobs
  double blob_separation = 2.0;
  double x = 1.0;            // scalar_pair
  double y = 1.0;
  double noise_sigma = 0.0;
  std::uint64_t seed = 0;
  bool whiten = false;

  void validate() const;
};

// linear_teacher: X Gaussian (whitened first when requested), Y = W X + noise
// with W of the given rank. gaussian_blobs: k isotropic clusters with one-hot
// labels. scalar_pair: the single sample {x -> y}.
DataBatch make_synthetic(const SyntheticSpec& spec);

// Linear change of input coordinates making X X^T = I: with X^T = Q R
// (diag R > 0) the result is Q^T. Y is unchanged.
DataBatch whiten(const DataBatch& data);

struct IdxImages {
  std::uint32_t count = 0;
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  std::vector<std::uint8_t> pixels;  // count * rows * cols
};

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

IdxImages read_idx_images(const std::filesystem::path& path);
std::vector<std::uint8_t> read_idx_labels(const std::filesystem::path& path);

// Images flattened row-major into columns of X and scaled by 1/255; labels
// one-hot over `keep_labels` in the given order. At most `max_per_class`
// images of each kept label are taken, in file order.
DataBatch load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                   const std::vector<int>& keep_labels, int max_per_class);

using Cell = std::variant<double, long long, std::string>;

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<Cell>> rows;
};

// Shortest round-trip form is not required; 17 significant digits always
// round-trip exactly.
std::string format_double(double v);

void write_csv(const Table& table, const std::filesystem::path& path);
// Header and rows as strings, quoting removed.
std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path);

void write_manifest(const nlohmann::json& doc, const std::filesystem::path& path);
nlohmann::json read_manifest(const std::filesystem::path& path);

inline constexpr const char* kSchemaVersion = "1";
inline constexpr const char* kToolVersion = "0.1.0";

}  // namespace gdstab
