#include "gdstab/data_io.hpp"
#include "gdstab/errors.hpp"
#include "gdstab/landscape.hpp"

#include <doctest.h>

#include <cstring>
#include <fstream>

using namespace gdstab;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "gdstab_test_data_io";
  fs::create_directories(dir);
  return dir / name;
}

void put_be32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<std::uint8_t>(v >> s));
}

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& b) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

// count images of rows x cols; image k has every pixel equal to (k * 7) % 256
// and label labels[k].
void write_idx_pair(const fs::path& images, const fs::path& labels, const std::vector<std::uint8_t>& lab, int rows,
                    int cols) {
  std::vector<std::uint8_t> img;
  put_be32(img, kIdxImageMagic);
  put_be32(img, static_cast<std::uint32_t>(lab.size()));
  put_be32(img, rows);
  put_be32(img, cols);
  for (std::size_t k = 0; k < lab.size(); ++k)
    for (int p = 0; p < rows * cols; ++p) img.push_back(static_cast<std::uint8_t>((k * 7 + p) % 256));
  write_bytes(images, img);
  std::vector<std::uint8_t> l;
  put_be32(l, kIdxLabelMagic);
  put_be32(l, static_cast<std::uint32_t>(lab.size()));
  l.insert(l.end(), lab.begin(), lab.end());
  write_bytes(labels, l);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("scalar pair is the single sample x -> y") {
  SyntheticSpec s;
  s.kind = SyntheticKind::scalar_pair;
  const DataBatch d = make_synthetic(s);
  CHECK(d.X.rows() == 1);
  CHECK(d.X.cols() == 1);
  CHECK(d.X(0, 0) == 1.0);
  CHECK(d.Y(0, 0) == 1.0);
}

TEST_CASE("whitened inputs have identity covariance and whitening is idempotent") {
  SyntheticSpec s;
  s.d0 = 4;
  s.dh = 3;
  s.n = 9;
  s.rank = 2;
  s.whiten = true;
  s.seed = 3;
  const DataBatch d = make_synthetic(s);
  CHECK((d.X * d.X.transpose() - Matrix::Identity(4, 4)).norm() < 1e-10);
  const DataBatch again = whiten(d);
  CHECK((again.X - d.X).norm() < 1e-12);
  s.n = 3;
  CHECK_THROWS_AS(make_synthetic(s), ConfigError);
}

TEST_CASE("noiseless teacher is recovered by the global minimizer") {
  SyntheticSpec s;
  s.d0 = 5;
  s.dh = 3;
  s.n = 20;
  s.rank = 2;
  s.seed = 8;
  const DataBatch d = make_synthetic(s);
  const Matrix W = global_minimizer(d);
  // The teacher is recovered exactly, so the fit is exact and of the given rank.
  CHECK((W * d.X - d.Y).norm() < 1e-8);
  Eigen::JacobiSVD<Matrix> svd(W);
  CHECK(svd.singularValues()[2] < 1e-8 * svd.singularValues()[0]);
  CHECK(svd.singularValues()[1] > 1e-3);
}

TEST_CASE("synthetic data is a function of the seed") {
  SyntheticSpec s;
  s.kind = SyntheticKind::gaussian_blobs;
  s.d0 = 3;
  s.n = 10;
  s.seed = 4;
  const DataBatch a = make_synthetic(s), b = make_synthetic(s);
  CHECK((a.X - b.X).norm() == 0.0);
  CHECK(a.Y.colwise().sum().isOnes());
  s.seed = 5;
  CHECK((make_synthetic(s).X - a.X).norm() > 0.0);
}

TEST_CASE("invalid synthetic specs are rejected with key paths") {
  SyntheticSpec s;
  s.rank = 3;
  try {
    make_synthetic(s);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.key_path() == "data.rank");
  }
  s = SyntheticSpec{};
  s.kind = SyntheticKind::gaussian_blobs;
  s.classes = 3;
  CHECK_THROWS_AS(make_synthetic(s), ConfigError);
}

TEST_CASE("IDX files are parsed bit-exactly and filtered per class") {
  const auto img = scratch("imgs.idx"), lab = scratch("labs.idx");
  const std::vector<std::uint8_t> labels{0, 1, 2, 1, 0, 1, 0, 2};
  write_idx_pair(img, lab, labels, 2, 3);

  const IdxImages raw = read_idx_images(img);
  CHECK(raw.count == 8);
  CHECK(raw.rows == 2);
  CHECK(raw.cols == 3);
  CHECK(raw.pixels.size() == 48);
  CHECK(raw.pixels[6 * 5 + 4] == static_cast<std::uint8_t>(5 * 7 + 4));
  CHECK(read_idx_labels(lab) == labels);

  const DataBatch d = load_idx(img, lab, {1, 0}, 2);
  // File order: images 0 (label 0), 1 (1), 3 (1), 4 (0).
  REQUIRE(d.X.cols() == 4);
  CHECK(d.X.rows() == 6);
  CHECK(d.Y.rows() == 2);
  const int picked[] = {0, 1, 3, 4};
  const int slot[] = {1, 0, 0, 1};
  for (int j = 0; j < 4; ++j) {
    for (int p = 0; p < 6; ++p) CHECK(d.X(p, j) == ((picked[j] * 7 + p) % 256) / 255.0);
    CHECK(d.Y(slot[j], j) == 1.0);
    CHECK(d.Y.col(j).sum() == 1.0);
  }
  const DataBatch again = load_idx(img, lab, {1, 0}, 2);
  CHECK(std::memcmp(again.X.data(), d.X.data(), sizeof(double) * d.X.size()) == 0);
  CHECK(load_idx(img, lab, {0, 1}, 32).X.cols() == 6);
}

TEST_CASE("malformed IDX files raise distinct errors") {
  const auto img = scratch("imgs2.idx"), lab = scratch("labs2.idx");
  write_idx_pair(img, lab, {3, 3, 4}, 2, 2);
  CHECK_THROWS_AS(load_idx(img, lab, {7}, 5), EmptySelectionError);
  CHECK_THROWS_AS(read_idx_images(lab), IdxMagicError);
  CHECK_THROWS_AS(read_idx_labels(img), IdxMagicError);

  std::string bytes = slurp(img);
  write_bytes(scratch("short.idx"), std::vector<std::uint8_t>(bytes.begin(), bytes.end() - 1));
  CHECK_THROWS_AS(read_idx_images(scratch("short.idx")), IdxTruncatedError);
  write_bytes(scratch("hdr.idx"), std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + 10));
  CHECK_THROWS_AS(read_idx_images(scratch("hdr.idx")), IdxTruncatedError);
  CHECK_THROWS_AS(read_idx_images(scratch("missing.idx")), IoError);

  const auto lab_short = scratch("labs_short.idx");
  write_idx_pair(scratch("unused.idx"), lab_short, {3, 3}, 2, 2);
  CHECK_THROWS_AS(load_idx(img, lab_short, {3}, 5), DimensionError);
}

TEST_CASE("CSV output is header-first, LF-terminated and round-trips doubles") {
  Table t;
  t.header = {"a", "b,c", "q\"x"};
  const auto empty = scratch("empty.csv");
  write_csv(t, empty);
  CHECK(slurp(empty) == "a,\"b,c\",\"q\"\"x\"\n");

  t.rows.push_back({0.1, 42LL, std::string("x,y")});
  t.rows.push_back({-1e-300, -7LL, std::string("plain")});
  const auto path = scratch("t.csv");
  write_csv(t, path);
  const auto rows = read_csv(path);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0] == t.header);
  CHECK(std::stod(rows[1][0]) == 0.1);
  CHECK(rows[1][1] == "42");
  CHECK(rows[1][2] == "x,y");
  CHECK(std::stod(rows[2][0]) == -1e-300);
  CHECK(slurp(path).find('\r') == std::string::npos);

  Table bad;
  bad.header = {"a"};
  bad.rows.push_back({1.0, 2.0});
  CHECK_THROWS_AS(write_csv(bad, scratch("bad.csv")), DimensionError);
  CHECK_THROWS_AS(write_csv(t, fs::path("/proc/definitely/not/writable.csv")), IoError);
}

TEST_CASE("format_double keeps 17 significant digits") {
  CHECK(format_double(0.1) == "0.10000000000000001");
  CHECK(format_double(1.0) == "1");
  CHECK(std::stod(format_double(1.0 / 3.0)) == 1.0 / 3.0);
}

TEST_CASE("manifest round-trips") {
  nlohmann::json m{{"schema_version", kSchemaVersion},
                   {"seed", 7},
                   {"run_cfg", {{"eta", 0.1}, {"grad_tol", 1e-8}}},
                   {"outputs", {"a.csv"}}};
  const auto path = scratch("manifest.json");
  write_manifest(m, path);
  CHECK(read_manifest(path) == m);
  CHECK(slurp(path).back() == '\n');
}
