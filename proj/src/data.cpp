#include "excessmtl/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>

namespace excessmtl {

Index train_rows(Index n) {
  // Round-half-up of 4n / 5 in integers.
  return (8 * n + 5) / 10;
}

namespace {

DenseMatrix gaussian_matrix(Index rows, Index cols, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, 1.0);
  DenseMatrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = scale * normal(rng);
  return m;
}

std::vector<TaskSplits> split_rows(const DenseMatrix& x, const std::vector<Targets>& targets) {
  const Index n_train = train_rows(x.rows());
  const Index n_test = x.rows() - n_train;
  std::vector<TaskSplits> out;
  for (const auto& y : targets) {
    TaskSplits s;
    s.train.x = x.topRows(n_train);
    s.test.x = x.bottomRows(n_test);
    s.train.split = Split::Train;
    s.test.split = Split::Test;
    if (const auto* labels = std::get_if<Labels>(&y)) {
      s.train.y = Labels(labels->begin(), labels->begin() + n_train);
      s.test.y = Labels(labels->begin() + n_train, labels->end());
    } else {
      const auto& values = std::get<DenseMatrix>(y);
      s.train.y = DenseMatrix(values.topRows(n_train));
      s.test.y = DenseMatrix(values.bottomRows(n_test));
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

std::vector<TaskSplits> gen_synthetic_classification(std::size_t num_tasks, std::size_t classes,
                                                     Index dim, Index n, double separation,
                                                     std::uint64_t seed) {
  if (num_tasks < 1 || classes < 1 || dim < 1 || n < 1) {
    throw ConfigError("synthetic classification: counts must be >= 1");
  }
  if (!(separation > 0.0)) throw ConfigError("synthetic classification: separation must be > 0");
  const auto directions = static_cast<Index>(num_tasks * classes);
  if (dim < directions) {
    throw ConfigError("synthetic classification: dim " + std::to_string(dim) +
                      " is smaller than num_tasks * classes = " + std::to_string(directions));
  }

  std::mt19937_64 rng(seed);
  const DenseMatrix frame_seed = gaussian_matrix(dim, directions, rng);
  const Eigen::HouseholderQR<DenseMatrix> qr(frame_seed);
  // Orthonormal columns; unit vectors sqrt(2)/2 * s apart become s apart.
  const DenseMatrix means = (separation / std::sqrt(2.0)) *
                            (qr.householderQ() * DenseMatrix::Identity(dim, directions));

  DenseMatrix x = gaussian_matrix(n, dim, rng);
  std::vector<Targets> targets;
  std::vector<Labels> labels(num_tasks, Labels(static_cast<std::size_t>(n)));
  std::uniform_int_distribution<int> draw(0, static_cast<int>(classes) - 1);
  for (Index r = 0; r < n; ++r) {
    for (std::size_t t = 0; t < num_tasks; ++t) {
      const int label = draw(rng);
      labels[t][static_cast<std::size_t>(r)] = label;
      x.row(r) += means.col(static_cast<Index>(t * classes) + label).transpose();
    }
  }
  for (auto& l : labels) targets.emplace_back(std::move(l));
  return split_rows(x, targets);
}

std::vector<TaskSplits> gen_synthetic_regression(std::size_t num_tasks, Index dim, Index n,
                                                 double noise_std, std::uint64_t seed,
                                                 double weight_scale) {
  if (num_tasks < 1 || dim < 1 || n < 1) throw ConfigError("synthetic regression: counts must be >= 1");
  if (!(noise_std >= 0.0)) throw ConfigError("synthetic regression: noise_std must be >= 0");
  std::mt19937_64 rng(seed);
  const DenseMatrix x = gaussian_matrix(n, dim, rng);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<Targets> targets;
  for (std::size_t t = 0; t < num_tasks; ++t) {
    const DenseVector w = gaussian_matrix(dim, 1, rng, weight_scale);
    const double b = normal(rng);
    DenseMatrix y = x * w;
    for (Index r = 0; r < n; ++r) y(r, 0) += b + noise_std * normal(rng);
    targets.emplace_back(std::move(y));
  }
  return split_rows(x, targets);
}

IdxTensor read_idx(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open IDX file " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                        std::istreambuf_iterator<char>());
  const auto where = [&](std::size_t offset) {
    return path.string() + " at byte offset " + std::to_string(offset);
  };
  if (bytes.size() < 4) throw FormatError("IDX magic truncated in " + where(bytes.size()));
  if (bytes[0] != 0 || bytes[1] != 0) throw FormatError("bad IDX magic in " + where(0));
  if (bytes[2] != 0x08) {
    throw FormatError("unsupported IDX element type " + std::to_string(bytes[2]) + " in " + where(2));
  }
  const std::size_t ndims = bytes[3];
  const std::size_t header = 4 + 4 * ndims;
  if (bytes.size() < header) {
    throw FormatError("IDX header expects " + std::to_string(ndims) + " dimensions, truncated in " +
                      where(bytes.size()));
  }
  IdxTensor tensor;
  std::size_t expected = 1;
  for (std::size_t d = 0; d < ndims; ++d) {
    const std::size_t o = 4 + 4 * d;
    const std::uint32_t size = (std::uint32_t{bytes[o]} << 24) | (std::uint32_t{bytes[o + 1]} << 16) |
                               (std::uint32_t{bytes[o + 2]} << 8) | std::uint32_t{bytes[o + 3]};
    tensor.dims.push_back(size);
    expected *= size;
  }
  const std::size_t actual = bytes.size() - header;
  if (actual != expected) {
    throw FormatError("IDX payload expected " + std::to_string(expected) + " bytes but found " +
                      std::to_string(actual) + " in " + where(header));
  }
  tensor.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(header), bytes.end());
  return tensor;
}

void write_idx(const std::filesystem::path& path, const IdxTensor& tensor) {
  if (tensor.dims.size() > 255) throw FormatError("IDX supports at most 255 dimensions");
  std::size_t expected = 1;
  for (auto d : tensor.dims) expected *= d;
  if (expected != tensor.data.size()) {
    throw FormatError("IDX tensor holds " + std::to_string(tensor.data.size()) +
                      " bytes, dims require " + std::to_string(expected));
  }
  std::vector<std::uint8_t> bytes{0, 0, 0x08, static_cast<std::uint8_t>(tensor.dims.size())};
  for (auto d : tensor.dims) {
    for (int shift = 24; shift >= 0; shift -= 8) bytes.push_back(static_cast<std::uint8_t>(d >> shift));
  }
  bytes.insert(bytes.end(), tensor.data.begin(), tensor.data.end());
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("cannot write IDX file " + path.string());
}

namespace {

std::size_t check_image_set(const IdxTensor& images, const IdxTensor& labels, Index digit,
                            const char* which) {
  if (images.dims.size() != 3 || images.dims[1] != digit || images.dims[2] != digit) {
    throw FormatError(std::string("multimnist: image set ") + which + " must be n x " +
                      std::to_string(digit) + " x " + std::to_string(digit));
  }
  if (labels.dims.size() != 1 || labels.dims[0] != images.dims[0]) {
    throw FormatError(std::string("multimnist: label set ") + which + " does not match its images");
  }
  return images.dims[0];
}

}  // namespace

std::pair<TaskDataset, TaskDataset> compose_multimnist(const IdxTensor& images_a,
                                                       const IdxTensor& labels_a,
                                                       const IdxTensor& images_b,
                                                       const IdxTensor& labels_b,
                                                       std::uint64_t seed, Split split,
                                                       MultiMnistLayout layout) {
  if (layout.canvas < layout.digit) throw FormatError("multimnist: canvas smaller than a digit");
  const std::size_t n = check_image_set(images_a, labels_a, layout.digit, "A");
  if (check_image_set(images_b, labels_b, layout.digit, "B") != n) {
    throw FormatError("multimnist: image sets A and B differ in length");
  }
  std::vector<std::size_t> partner(n);
  std::iota(partner.begin(), partner.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(partner.begin(), partner.end(), rng);

  const Index digit = layout.digit;
  const Index canvas = layout.canvas;
  const Index offset = canvas - digit;
  const auto pixels = static_cast<std::size_t>(digit * digit);
  DenseMatrix x = DenseMatrix::Zero(static_cast<Index>(n), canvas * canvas);
  Labels left(n);
  Labels right(n);
  for (std::size_t k = 0; k < n; ++k) {
    const std::uint8_t* a = images_a.data.data() + k * pixels;
    const std::uint8_t* b = images_b.data.data() + partner[k] * pixels;
    auto row = x.row(static_cast<Index>(k));
    for (Index r = 0; r < digit; ++r) {
      for (Index c = 0; c < digit; ++c) {
        const double pa = a[r * digit + c] / 255.0;
        const double pb = b[r * digit + c] / 255.0;
        row(r * canvas + c) = std::max(row(r * canvas + c), pa);
        row((r + offset) * canvas + c + offset) = std::max(row((r + offset) * canvas + c + offset), pb);
      }
    }
    left[k] = labels_a.data[k];
    right[k] = labels_b.data[partner[k]];
  }
  return {TaskDataset{x, std::move(left), split}, TaskDataset{x, std::move(right), split}};
}

std::pair<TaskDataset, Standardization> standardize(const TaskDataset& ds,
                                                    const std::optional<Standardization>& stats) {
  Standardization s;
  if (stats) {
    s = *stats;
    if (s.mean.size() != ds.x.cols() || s.stddev.size() != ds.x.cols()) {
      throw DimensionError("standardize: statistics do not match feature count");
    }
  } else {
    const auto n = static_cast<double>(std::max<Index>(ds.x.rows(), 1));
    s.mean = ds.x.colwise().mean();
    s.stddev = ((ds.x.rowwise() - s.mean.transpose()).colwise().squaredNorm() / n).cwiseSqrt();
    s.stddev = s.stddev.cwiseMax(kStdFloor);
  }
  TaskDataset out = ds;
  out.x = (ds.x.rowwise() - s.mean.transpose()).array().rowwise() / s.stddev.transpose().array();
  return {std::move(out), std::move(s)};
}

std::uint64_t dataset_hash(const TaskDataset& ds) {
  std::uint64_t h = 14695981039346656037ULL;
  auto mix = [&h](const void* p, std::size_t len) {
    const auto* bytes = static_cast<const std::uint8_t*>(p);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  };
  mix(ds.x.data(), static_cast<std::size_t>(ds.x.size()) * sizeof(double));
  if (const auto* labels = std::get_if<Labels>(&ds.y)) {
    mix(labels->data(), labels->size() * sizeof(int));
  } else {
    const auto& values = std::get<DenseMatrix>(ds.y);
    mix(values.data(), static_cast<std::size_t>(values.size()) * sizeof(double));
  }
  return h;
}

}  // namespace excessmtl
