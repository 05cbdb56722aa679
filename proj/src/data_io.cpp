#include "gdstab/data_io.hpp"

#include "gdstab/errors.hpp"
#include "gdstab/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <sstream>

namespace gdstab {

std::string to_string(SyntheticKind k) {
  switch (k) {
    case SyntheticKind::linear_teacher: return "linear_teacher";
    case SyntheticKind::gaussian_blobs: return "gaussian_blobs";
    case SyntheticKind::scalar_pair: return "scalar_pair";
  }
  return "?";
}

SyntheticKind parse_synthetic_kind(std::string_view name) {
  if (name == "linear_teacher") return SyntheticKind::linear_teacher;
  if (name == "gaussian_blobs") return SyntheticKind::gaussian_blobs;
  if (name == "scalar_pair") return SyntheticKind::scalar_pair;
  throw InvalidArgument("unknown synthetic data kind '" + std::string(name) + "'");
}

void SyntheticSpec::validate() const {
  if (kind == SyntheticKind::scalar_pair) return;
  if (d0 < 1 || dh < 1 || n < 1) throw ConfigError("data", "d0, dh and n must be >= 1");
  if (noise_sigma < 0.0) throw ConfigError("data.noise_sigma", "must be >= 0");
  if (kind == SyntheticKind::linear_teacher && (rank < 1 || rank > std::min(d0, dh)))
    throw ConfigError("data.rank", "must lie in [1, min(d0, dh)]");
  if (kind == SyntheticKind::gaussian_blobs) {
    if (classes < 2) throw ConfigError("data.classes", "must be >= 2");
    if (dh != classes) throw ConfigError("data.dh", "must equal the number of classes (one-hot labels)");
    if (blob_sigma < 0.0) throw ConfigError("data.blob_sigma", "must be >= 0");
  }
  if (whiten && n < d0)
    throw ConfigError("data.n", "whitening needs n >= d0 (X X^T must be full rank)");
}

namespace {

Matrix gaussian(Rng& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
  Matrix m(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c)
    for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = scale * standard_normal(rng);
  return m;
}

Matrix whiten_inputs(const Matrix& X) {
  const Eigen::Index d0 = X.rows(), n = X.cols();
  if (n < d0) throw RankDeficientError("whitening needs at least as many samples as input dimensions");
  Eigen::HouseholderQR<Matrix> qr(X.transpose());
  Matrix q = qr.householderQ() * Matrix::Identity(n, d0);
  const Matrix r = qr.matrixQR().topRows(d0).triangularView<Eigen::Upper>();
  const double scale = r.diagonal().cwiseAbs().maxCoeff();
  for (Eigen::Index i = 0; i < d0; ++i) {
    if (!(std::abs(r(i, i)) > 1e-12 * scale)) throw RankDeficientError("cannot whiten rank-deficient inputs");
    if (r(i, i) < 0.0) q.col(i) = -q.col(i);
  }
  return q.transpose();
}

}  // namespace

DataBatch whiten(const DataBatch& data) {
  return DataBatch{whiten_inputs(data.X), data.Y};
}

DataBatch make_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  DataBatch out;
  Rng rng = substream(spec.seed, {static_cast<std::uint64_t>(spec.kind)});
  switch (spec.kind) {
    case SyntheticKind::scalar_pair:
      out.X = Matrix::Constant(1, 1, spec.x);
      out.Y = Matrix::Constant(1, 1, spec.y);
      return out;
    case SyntheticKind::linear_teacher: {
      out.X = gaussian(rng, spec.d0, spec.n);
      if (spec.whiten) out.X = whiten_inputs(out.X);
      const Matrix teacher = gaussian(rng, spec.dh, spec.rank) * gaussian(rng, spec.rank, spec.d0);
      out.Y = teacher * out.X + gaussian(rng, spec.dh, spec.n, spec.noise_sigma);
      return out;
    }
    case SyntheticKind::gaussian_blobs: {
      const Matrix centers = gaussian(rng, spec.d0, spec.classes, spec.blob_separation);
      out.X.resize(spec.d0, spec.n);
      out.Y = Matrix::Zero(spec.classes, spec.n);
      for (int j = 0; j < spec.n; ++j) {
        const int label = j % spec.classes;
        out.X.col(j) = centers.col(label) + gaussian(rng, spec.d0, 1, spec.blob_sigma);
        out.Y(label, j) = 1.0;
      }
      if (spec.whiten) out.X = whiten_inputs(out.X);
      return out;
    }
  }
  return out;
}

namespace {

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& bytes, std::size_t at) {
  return (std::uint32_t{bytes[at]} << 24) | (std::uint32_t{bytes[at + 1]} << 16) |
         (std::uint32_t{bytes[at + 2]} << 8) | std::uint32_t{bytes[at + 3]};
}

void check_header(const std::vector<std::uint8_t>& bytes, std::size_t header, std::uint32_t magic,
                  const std::filesystem::path& path) {
  if (bytes.size() < 4) throw IdxTruncatedError("'" + path.string() + "' is too short for an IDX header");
  const std::uint32_t found = read_be32(bytes, 0);
  if (found != magic) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "bad magic 0x%08x (expected 0x%08x)", found, magic);
    throw IdxMagicError("'" + path.string() + "': " + buf);
  }
  if (bytes.size() < header) throw IdxTruncatedError("'" + path.string() + "' has a truncated header");
}

void check_payload(std::size_t have, std::size_t need, const std::filesystem::path& path) {
  if (have < need)
    throw IdxTruncatedError("'" + path.string() + "' is truncated: " + std::to_string(have) + " of " +
                            std::to_string(need) + " payload bytes");
  if (have > need)
    throw IoError("'" + path.string() + "' has " + std::to_string(have - need) + " unexpected trailing bytes");
}

}  // namespace

IdxImages read_idx_images(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  check_header(bytes, 16, kIdxImageMagic, path);
  IdxImages img;
  img.count = read_be32(bytes, 4);
  img.rows = read_be32(bytes, 8);
  img.cols = read_be32(bytes, 12);
  const std::size_t need = std::size_t{img.count} * img.rows * img.cols;
  check_payload(bytes.size() - 16, need, path);
  img.pixels.assign(bytes.begin() + 16, bytes.end());
  return img;
}

std::vector<std::uint8_t> read_idx_labels(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  check_header(bytes, 8, kIdxLabelMagic, path);
  const std::uint32_t count = read_be32(bytes, 4);
  check_payload(bytes.size() - 8, count, path);
  return std::vector<std::uint8_t>(bytes.begin() + 8, bytes.end());
}

DataBatch load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                   const std::vector<int>& keep_labels, int max_per_class) {
  if (keep_labels.empty()) throw InvalidArgument("keep_labels must not be empty");
  if (max_per_class < 1) throw InvalidArgument("max_per_class must be >= 1");
  for (std::size_t i = 0; i < keep_labels.size(); ++i) {
    if (keep_labels[i] < 0 || keep_labels[i] > 255) throw InvalidArgument("labels must lie in [0, 255]");
    for (std::size_t j = 0; j < i; ++j)
      if (keep_labels[i] == keep_labels[j]) throw InvalidArgument("duplicate label in keep_labels");
  }
  const IdxImages images = read_idx_images(images_path);
  const auto labels = read_idx_labels(labels_path);
  if (labels.size() != images.count)
    throw DimensionError("image count " + std::to_string(images.count) + " != label count " +
                         std::to_string(labels.size()));

  std::vector<int> slot(256, -1);
  for (std::size_t i = 0; i < keep_labels.size(); ++i) slot[keep_labels[i]] = static_cast<int>(i);
  std::vector<int> taken(keep_labels.size(), 0);
  std::vector<std::pair<std::size_t, int>> chosen;  // (image index, class slot)
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int s = slot[labels[i]];
    if (s < 0 || taken[s] >= max_per_class) continue;
    ++taken[s];
    chosen.emplace_back(i, s);
  }
  if (chosen.empty()) throw EmptySelectionError("no images carry any of the requested labels");

  const std::size_t pixels = std::size_t{images.rows} * images.cols;
  DataBatch out;
  out.X.resize(static_cast<Eigen::Index>(pixels), static_cast<Eigen::Index>(chosen.size()));
  out.Y = Matrix::Zero(static_cast<Eigen::Index>(keep_labels.size()), static_cast<Eigen::Index>(chosen.size()));
  for (std::size_t j = 0; j < chosen.size(); ++j) {
    const std::uint8_t* src = images.pixels.data() + chosen[j].first * pixels;
    for (std::size_t p = 0; p < pixels; ++p)
      out.X(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(j)) = src[p] / 255.0;
    out.Y(chosen[j].second, static_cast<Eigen::Index>(j)) = 1.0;
  }
  return out;
}

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

namespace {

std::string quote(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string render(const Cell& cell) {
  if (const auto* d = std::get_if<double>(&cell)) return format_double(*d);
  if (const auto* i = std::get_if<long long>(&cell)) return std::to_string(*i);
  return quote(std::get<std::string>(cell));
}

void write_text(const std::string& text, const std::filesystem::path& path) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory '" + path.parent_path().string() + "': " + ec.message());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw IoError("write to '" + path.string() + "' failed");
}

}  // namespace

void write_csv(const Table& table, const std::filesystem::path& path) {
  if (table.header.empty()) throw InvalidArgument("CSV tables need a header row");
  std::string text;
  for (std::size_t i = 0; i < table.header.size(); ++i) {
    if (i) text += ',';
    text += quote(table.header[i]);
  }
  text += '\n';
  for (const auto& row : table.rows) {
    if (row.size() != table.header.size())
      throw DimensionError("CSV row has " + std::to_string(row.size()) + " cells, header has " +
                           std::to_string(table.header.size()));
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) text += ',';
      text += render(row[i]);
    }
    text += '\n';
  }
  write_text(text, path);
}

std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false, any = false;
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    const char c = static_cast<char>(bytes[i]);
    if (quoted) {
      if (c == '"') {
        if (i + 1 < bytes.size() && bytes[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
      continue;
    }
    if (c == '"') {
      quoted = true;
      any = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
      any = true;
    } else if (c == '\n') {
      row.push_back(std::move(field));
      field.clear();
      rows.push_back(std::move(row));
      row.clear();
      any = false;
    } else if (c != '\r') {
      field += c;
      any = true;
    }
  }
  if (any) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_manifest(const nlohmann::json& doc, const std::filesystem::path& path) {
  write_text(doc.dump(2) + "\n", path);
}

nlohmann::json read_manifest(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  try {
    return nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw IoError("'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

}  // namespace gdstab
