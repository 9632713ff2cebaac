#pragma once

#include "gw/tensor.hpp"

#include <string>
#include <utility>
#include <vector>

namespace gw::task {

/// (a_left + a_right) mod 10 with domain checks: a_left >= 1, a_right in [0,9].
int target_sum(int a_left, int a_right);

/// Unit basis vector for a digit in [0,9].
Eigen::VectorXd one_hot(int digit);
Tensor one_hot_tensor(int digit);

/// One task instance. The right addend is shown only at the first time step,
/// either as a one-hot vector (10) or as a flattened 28x28 image in [0,1].
struct AdditionSample {
  int a_left = 1;
  int a_right = 0;
  int target = 1;
  int horizon = 20;
  Eigen::VectorXd right_encoding;  // length 10 (one-hot) or 784 (image)

  bool is_image() const { return right_encoding.size() == 784; }
};

AdditionSample make_onehot_sample(int a_left, int a_right, int horizon = 20);

// ---------------------------------------------------------------------------
// MNIST-format data
// ---------------------------------------------------------------------------

struct MnistDataset {
  Eigen::MatrixXd images;  // n x 784, values in [0,1], row-major pixels
  std::vector<int> labels;
  std::string split;  // "train" or "test"

  Index size() const { return images.rows(); }
  /// Indices grouped by digit class.
  std::vector<std::vector<int>> by_class() const;
};

/// Parses the big-endian IDX pair (magic 2051 for images with dims n,28,28;
/// 2049 for labels with dim n). Pixel bytes are scaled by 1/255.
MnistDataset load_idx(const std::string& images_path, const std::string& labels_path,
                      const std::string& split_tag);

/// Inverse of load_idx; pixels are rounded back to bytes.
void write_idx(const MnistDataset& data, const std::string& images_path,
               const std::string& labels_path);

/// Deterministic procedurally-rendered digit dataset in the same layout as
/// MNIST (28x28 grayscale, labels 0..9). Used where the canonical files are
/// unavailable; every image applies a random affine deformation, stroke
/// width, jitter and pixel noise.
MnistDataset synthesize_digits(Index n, unsigned seed, const std::string& split_tag);

/// Image sample for a task pair: uniformly picks an image of class a_right.
AdditionSample make_image_sample(int a_left, int a_right, const MnistDataset& data,
                                 const std::vector<std::vector<int>>& by_class,
                                 Rng& rng, int horizon = 20);

/// Random (a_left, image) task set drawn from the product of instructions
/// 1..9 and the dataset.
std::vector<AdditionSample> sample_image_tasks(const MnistDataset& data, Index n,
                                               Rng& rng, int horizon = 20);

// ---------------------------------------------------------------------------
// Generalization splits
// ---------------------------------------------------------------------------

/// Task split by instruction value. Conditions are written
/// "<ranges>to<ranges>", e.g. "1-7to9", "1-6to8-9", "1-3,5-9to4". The
/// in-distribution condition "1-9to1-9" draws a random 80% split of the 90
/// (a_left, a_right) pairs instead (seeded).
struct GeneralizationSplit {
  std::string label;
  std::vector<int> train_a_left;
  std::vector<int> test_a_left;
  std::vector<std::pair<int, int>> train_pairs;  // (a_left, a_right)
  std::vector<std::pair<int, int>> test_pairs;
};

GeneralizationSplit make_split(const std::string& condition, unsigned seed = 0);

/// The default condition list: extrapolation (train 1..k, each unseen value
/// separately, k = 5..8), interpolation (each interior value held out), and
/// the in-distribution 80% split.
std::vector<std::string> default_conditions();

std::vector<AdditionSample> samples_from_pairs(
    const std::vector<std::pair<int, int>>& pairs, int horizon = 20);

}  // namespace gw::task
