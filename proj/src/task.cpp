#include "gw/task.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

namespace gw::task {

int target_sum(int a_left, int a_right) {
  if (a_left < 1)
    throw ValueError("target_sum: a_left must be >= 1, got " + std::to_string(a_left));
  if (a_right < 0 || a_right > 9)
    throw ValueError("target_sum: a_right must be in [0,9], got " +
                     std::to_string(a_right));
  return (a_left + a_right) % 10;
}

Eigen::VectorXd one_hot(int digit) {
  if (digit < 0 || digit > 9)
    throw ValueError("one_hot: digit must be in [0,9], got " + std::to_string(digit));
  Eigen::VectorXd v = Eigen::VectorXd::Zero(10);
  v[digit] = 1.0;
  return v;
}

Tensor one_hot_tensor(int digit) {
  Eigen::VectorXd v = one_hot(digit);
  return Tensor({10}, v.array());
}

AdditionSample make_onehot_sample(int a_left, int a_right, int horizon) {
  AdditionSample s;
  s.a_left = a_left;
  s.a_right = a_right;
  s.target = target_sum(a_left, a_right);
  s.horizon = horizon;
  s.right_encoding = one_hot(a_right);
  return s;
}

// ---------------------------------------------------------------------------
// IDX files
// ---------------------------------------------------------------------------

namespace {

std::uint32_t read_be32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return (static_cast<std::uint32_t>(b[0]) << 24) |
         (static_cast<std::uint32_t>(b[1]) << 16) |
         (static_cast<std::uint32_t>(b[2]) << 8) | static_cast<std::uint32_t>(b[3]);
}

void write_be32(std::ostream& os, std::uint32_t v) {
  char b[4] = {static_cast<char>((v >> 24) & 0xff), static_cast<char>((v >> 16) & 0xff),
               static_cast<char>((v >> 8) & 0xff), static_cast<char>(v & 0xff)};
  os.write(b, 4);
}

constexpr std::uint32_t kImageMagic = 2051;
constexpr std::uint32_t kLabelMagic = 2049;

}  // namespace

MnistDataset load_idx(const std::string& images_path, const std::string& labels_path,
                      const std::string& split_tag) {
  std::ifstream imgs(images_path, std::ios::binary);
  if (!imgs) throw IoError("idx: cannot open '" + images_path + "'");
  std::uint32_t magic = read_be32(imgs);
  if (!imgs || magic != kImageMagic)
    throw IoError("idx: bad magic " + std::to_string(magic) + " in '" + images_path +
                  "' (expected 2051)");
  std::uint32_t n = read_be32(imgs);
  std::uint32_t rows = read_be32(imgs);
  std::uint32_t cols = read_be32(imgs);
  if (!imgs || rows != 28 || cols != 28)
    throw IoError("idx: image dims " + std::to_string(rows) + "x" +
                  std::to_string(cols) + " in '" + images_path + "' (expected 28x28)");
  std::vector<unsigned char> buf(static_cast<std::size_t>(n) * 784);
  imgs.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!imgs) throw IoError("idx: truncated image data in '" + images_path + "'");

  std::ifstream lbls(labels_path, std::ios::binary);
  if (!lbls) throw IoError("idx: cannot open '" + labels_path + "'");
  std::uint32_t lmagic = read_be32(lbls);
  if (!lbls || lmagic != kLabelMagic)
    throw IoError("idx: bad magic " + std::to_string(lmagic) + " in '" + labels_path +
                  "' (expected 2049)");
  std::uint32_t ln = read_be32(lbls);
  if (ln != n)
    throw IoError("idx: " + std::to_string(n) + " images but " + std::to_string(ln) +
                  " labels");
  std::vector<unsigned char> lbuf(ln);
  lbls.read(reinterpret_cast<char*>(lbuf.data()), static_cast<std::streamsize>(ln));
  if (!lbls) throw IoError("idx: truncated label data in '" + labels_path + "'");

  MnistDataset data;
  data.split = split_tag;
  data.images.resize(n, 784);
  data.labels.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    for (int p = 0; p < 784; ++p)
      data.images(i, p) = static_cast<double>(buf[i * 784 + p]) / 255.0;
    if (lbuf[i] > 9)
      throw IoError("idx: label " + std::to_string(int(lbuf[i])) + " out of range");
    data.labels[i] = lbuf[i];
  }
  return data;
}

void write_idx(const MnistDataset& data, const std::string& images_path,
               const std::string& labels_path) {
  if (data.images.rows() != static_cast<Index>(data.labels.size()))
    throw ValueError("idx: image count does not match label count");
  std::ofstream imgs(images_path, std::ios::binary);
  if (!imgs) throw IoError("idx: cannot open '" + images_path + "' for writing");
  write_be32(imgs, kImageMagic);
  write_be32(imgs, static_cast<std::uint32_t>(data.images.rows()));
  write_be32(imgs, 28);
  write_be32(imgs, 28);
  for (Index i = 0; i < data.images.rows(); ++i)
    for (int p = 0; p < 784; ++p) {
      auto byte = static_cast<unsigned char>(
          std::lround(std::clamp(data.images(i, p), 0.0, 1.0) * 255.0));
      imgs.put(static_cast<char>(byte));
    }
  std::ofstream lbls(labels_path, std::ios::binary);
  if (!lbls) throw IoError("idx: cannot open '" + labels_path + "' for writing");
  write_be32(lbls, kLabelMagic);
  write_be32(lbls, static_cast<std::uint32_t>(data.labels.size()));
  for (int l : data.labels) lbls.put(static_cast<char>(l));
}

std::vector<std::vector<int>> MnistDataset::by_class() const {
  std::vector<std::vector<int>> out(10);
  for (Index i = 0; i < size(); ++i) out[static_cast<std::size_t>(labels[i])].push_back(static_cast<int>(i));
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic digits
// ---------------------------------------------------------------------------

namespace {

struct Pt {
  double x, y;
};
using Stroke = std::vector<Pt>;

// Elliptical arc sampled in degrees; y grows downward.
Stroke arc(double cx, double cy, double rx, double ry, double deg0, double deg1,
           int n = 16) {
  Stroke s;
  for (int i = 0; i <= n; ++i) {
    double d = deg0 + (deg1 - deg0) * i / n;
    double a = d * M_PI / 180.0;
    s.push_back({cx + rx * std::cos(a), cy + ry * std::sin(a)});
  }
  return s;
}

std::vector<Stroke> glyph(int digit) {
  switch (digit) {
    case 0:
      return {arc(0.5, 0.5, 0.22, 0.32, 0, 360, 24)};
    case 1:
      return {{{0.36, 0.30}, {0.53, 0.12}}, {{0.53, 0.12}, {0.53, 0.88}}};
    case 2: {
      Stroke top = arc(0.5, 0.32, 0.22, 0.20, 180, 405, 14);
      top.push_back({0.28, 0.88});
      return {top, {{0.28, 0.88}, {0.74, 0.88}}};
    }
    case 3:
      return {arc(0.47, 0.30, 0.20, 0.18, -160, 80, 12),
              arc(0.47, 0.66, 0.22, 0.21, -80, 170, 14)};
    case 4:
      return {{{0.62, 0.10}, {0.24, 0.58}},
              {{0.24, 0.58}, {0.78, 0.58}},
              {{0.60, 0.32}, {0.60, 0.90}}};
    case 5: {
      return {{{0.70, 0.12}, {0.33, 0.12}},
              {{0.33, 0.12}, {0.31, 0.45}},
              arc(0.48, 0.65, 0.23, 0.22, -120, 150, 14)};
    }
    case 6: {
      Stroke s = {{0.66, 0.12}, {0.50, 0.20}, {0.38, 0.38}, {0.325, 0.58}};
      Stroke loop = arc(0.50, 0.68, 0.175, 0.17, 180, 540, 20);
      s.insert(s.end(), loop.begin(), loop.end());
      return {s};
    }
    case 7:
      return {{{0.26, 0.14}, {0.74, 0.14}}, {{0.74, 0.14}, {0.42, 0.88}}};
    case 8:
      return {arc(0.5, 0.30, 0.17, 0.16, 90, 450, 18),
              arc(0.5, 0.66, 0.20, 0.19, -90, 270, 18)};
    case 9: {
      Stroke tail = {{0.675, 0.34}, {0.66, 0.60}, {0.56, 0.88}};
      return {arc(0.5, 0.32, 0.175, 0.17, 0, 360, 18), tail};
    }
    default:
      throw ValueError("glyph: digit out of range");
  }
}

double seg_distance(double px, double py, const Pt& a, const Pt& b) {
  double vx = b.x - a.x, vy = b.y - a.y;
  double wx = px - a.x, wy = py - a.y;
  double len2 = vx * vx + vy * vy;
  double t = len2 > 0 ? std::clamp((wx * vx + wy * vy) / len2, 0.0, 1.0) : 0.0;
  double dx = wx - t * vx, dy = wy - t * vy;
  return std::sqrt(dx * dx + dy * dy);
}

}  // namespace

MnistDataset synthesize_digits(Index n, unsigned seed, const std::string& split_tag) {
  MnistDataset data;
  data.split = split_tag;
  data.images.resize(n, 784);
  data.labels.resize(static_cast<std::size_t>(n));
  Rng rng(seed);
  for (Index i = 0; i < n; ++i) {
    int digit = static_cast<int>(i % 10);  // balanced classes
    data.labels[static_cast<std::size_t>(i)] = digit;

    double rot = rng.uniform(-0.22, 0.22);
    double sx = rng.uniform(0.75, 1.05), sy = rng.uniform(0.78, 1.05);
    double shear = rng.uniform(-0.18, 0.18);
    double tx = rng.uniform(-2.2, 2.2), ty = rng.uniform(-2.0, 2.0);
    double radius = rng.uniform(0.85, 1.6);
    double contrast = rng.uniform(0.8, 1.0);
    double noise = rng.uniform(0.0, 0.06);
    double cr = std::cos(rot), sr = std::sin(rot);

    auto map = [&](Pt p) {
      // unit square -> pixel coordinates, centered transform
      double ux = (p.x - 0.5) * 28.0 * sx, uy = (p.y - 0.5) * 28.0 * sy;
      ux += shear * uy;
      double rxp = cr * ux - sr * uy, ryp = sr * ux + cr * uy;
      return Pt{rxp + 14.0 + tx, ryp + 14.0 + ty};
    };

    std::vector<Stroke> strokes = glyph(digit);
    std::vector<std::pair<Pt, Pt>> segs;
    for (Stroke& s : strokes) {
      for (Pt& p : s) {
        Pt q = map(p);
        q.x += rng.uniform(-0.7, 0.7);
        q.y += rng.uniform(-0.7, 0.7);
        p = q;
      }
      for (std::size_t k = 0; k + 1 < s.size(); ++k) segs.emplace_back(s[k], s[k + 1]);
    }

    for (int py = 0; py < 28; ++py)
      for (int px = 0; px < 28; ++px) {
        double d = 1e9;
        for (auto& sg : segs)
          d = std::min(d, seg_distance(px + 0.5, py + 0.5, sg.first, sg.second));
        double v = std::clamp(radius + 0.5 - d, 0.0, 1.0) * contrast;
        if (noise > 0) v += rng.normal(0.0, noise);
        data.images(i, py * 28 + px) = std::clamp(v, 0.0, 1.0);
      }
  }
  return data;
}

AdditionSample make_image_sample(int a_left, int a_right, const MnistDataset& data,
                                 const std::vector<std::vector<int>>& by_class,
                                 Rng& rng, int horizon) {
  const auto& pool = by_class[static_cast<std::size_t>(a_right)];
  if (pool.empty())
    throw ValueError("make_image_sample: no images of digit " + std::to_string(a_right));
  int idx = pool[static_cast<std::size_t>(rng.below(static_cast<std::int64_t>(pool.size())))];
  AdditionSample s;
  s.a_left = a_left;
  s.a_right = a_right;
  s.target = target_sum(a_left, a_right);
  s.horizon = horizon;
  s.right_encoding = data.images.row(idx).transpose();
  return s;
}

std::vector<AdditionSample> sample_image_tasks(const MnistDataset& data, Index n,
                                               Rng& rng, int horizon) {
  std::vector<AdditionSample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    int a_left = static_cast<int>(rng.below(9)) + 1;
    int idx = static_cast<int>(rng.below(data.size()));
    AdditionSample s;
    s.a_left = a_left;
    s.a_right = data.labels[static_cast<std::size_t>(idx)];
    s.target = target_sum(a_left, s.a_right);
    s.horizon = horizon;
    s.right_encoding = data.images.row(idx).transpose();
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Generalization splits
// ---------------------------------------------------------------------------

namespace {

std::vector<int> parse_ranges(const std::string& text, const std::string& full) {
  std::vector<int> out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t comma = text.find(',', pos);
    std::string part = text.substr(pos, comma == std::string::npos ? std::string::npos
                                                                   : comma - pos);
    std::size_t dash = part.find('-');
    try {
      if (dash == std::string::npos) {
        out.push_back(std::stoi(part));
      } else {
        int lo = std::stoi(part.substr(0, dash));
        int hi = std::stoi(part.substr(dash + 1));
        for (int v = lo; v <= hi; ++v) out.push_back(v);
      }
    } catch (const std::exception&) {
      throw ValueError("split: cannot parse condition '" + full + "'");
    }
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  for (int v : out)
    if (v < 1 || v > 9)
      throw ValueError("split: instruction value " + std::to_string(v) +
                       " out of [1,9] in '" + full + "'");
  if (out.empty()) throw ValueError("split: empty range in '" + full + "'");
  return out;
}

std::vector<std::pair<int, int>> pairs_for(const std::vector<int>& a_lefts) {
  std::vector<std::pair<int, int>> out;
  for (int a : a_lefts)
    for (int r = 0; r <= 9; ++r) out.emplace_back(a, r);
  return out;
}

}  // namespace

GeneralizationSplit make_split(const std::string& condition, unsigned seed) {
  std::size_t sep = condition.find("to");
  if (sep == std::string::npos || sep == 0 || sep + 2 >= condition.size())
    throw ValueError("split: unknown condition '" + condition +
                     "' (expected '<ranges>to<ranges>')");
  GeneralizationSplit split;
  split.label = condition;
  split.train_a_left = parse_ranges(condition.substr(0, sep), condition);
  split.test_a_left = parse_ranges(condition.substr(sep + 2), condition);

  bool in_distribution = split.train_a_left == split.test_a_left;
  if (in_distribution) {
    // random 80% split of the task pairs
    std::vector<std::pair<int, int>> pairs = pairs_for(split.train_a_left);
    Rng rng(seed ^ 0x80u);
    rng.shuffle(pairs);
    std::size_t n_train = pairs.size() * 8 / 10;
    split.train_pairs.assign(pairs.begin(), pairs.begin() + static_cast<long>(n_train));
    split.test_pairs.assign(pairs.begin() + static_cast<long>(n_train), pairs.end());
    return split;
  }

  std::set<int> train_set(split.train_a_left.begin(), split.train_a_left.end());
  for (int v : split.test_a_left)
    if (train_set.count(v))
      throw ValueError("split: train and test instruction sets overlap in '" +
                       condition + "'");
  split.train_pairs = pairs_for(split.train_a_left);
  split.test_pairs = pairs_for(split.test_a_left);
  return split;
}

std::vector<std::string> default_conditions() {
  std::vector<std::string> out;
  for (int k = 5; k <= 8; ++k)
    for (int t = k + 1; t <= 9; ++t)
      out.push_back("1-" + std::to_string(k) + "to" + std::to_string(t));
  for (int v = 2; v <= 8; ++v) {
    std::string left;
    if (v == 2) left = "1";
    else left = "1-" + std::to_string(v - 1);
    if (v == 8) left += ",9";
    else left += "," + std::to_string(v + 1) + "-9";
    out.push_back(left + "to" + std::to_string(v));
  }
  out.push_back("1-9to1-9");
  return out;
}

std::vector<AdditionSample> samples_from_pairs(
    const std::vector<std::pair<int, int>>& pairs, int horizon) {
  std::vector<AdditionSample> out;
  out.reserve(pairs.size());
  for (auto [a, r] : pairs) out.push_back(make_onehot_sample(a, r, horizon));
  return out;
}

}  // namespace gw::task
