#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "softcpt/encoder.hpp"
#include "softcpt/model.hpp"
#include "softcpt/optim.hpp"

namespace softcpt {

// ---------------------------------------------------------------------------
// Tensor blocks.
//
// Every tensor file starts with a 16-byte little-endian header:
//   offset 0  char[4] magic "PTSH"
//   offset 4  u16     version (1)
//   offset 6  u32     rows
//   offset 10 u32     cols
//   offset 14 u16     element kind: 0 = float32 (suites), 1 = float64 (checkpoints)
// followed by rows*cols row-major little-endian elements.
// ---------------------------------------------------------------------------

inline constexpr char kTensorMagic[4] = {'P', 'T', 'S', 'H'};
inline constexpr std::uint16_t kTensorVersion = 1;
inline constexpr std::size_t kTensorHeaderBytes = 16;

enum class ElementKind : std::uint16_t { float32 = 0, float64 = 1 };

std::string encode_tensor(const Matrix& m, ElementKind kind = ElementKind::float32);
Matrix decode_tensor(std::string_view bytes, const std::string& origin = "<memory>");
void write_tensor(const std::filesystem::path& path, const Matrix& m,
                  ElementKind kind = ElementKind::float32);
Matrix read_tensor(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Suites.
// ---------------------------------------------------------------------------

enum class Metric { top1, per_class };
const char* to_string(Metric m) noexcept;
Metric parse_metric(std::string_view name);

enum class Split { train, val, test };

struct TaskBundle {
  std::string name;
  std::vector<std::string> class_names;
  Matrix image_features;  // N x d_txt
  std::vector<int> labels;
  std::vector<std::size_t> train, val, test;
  Metric metric = Metric::top1;
  std::optional<TokenSequence> task_tokens;
  std::optional<std::vector<TokenSequence>> class_tokens;

  std::size_t class_count() const noexcept { return class_names.size(); }
  const std::vector<std::size_t>& split(Split s) const;
};

/// A set of tasks sharing feature and embedding widths. Stored as a
/// directory holding suite.json plus one tensor file per block.
struct Suite {
  std::vector<TaskBundle> tasks;
  int d_txt = 0;
  int d_embed = 0;
  double tau = 0.01;
  bool features_normalized = false;
  Pooling pooling = Pooling::mean;
  std::string source = "unknown";
  /// Toy encoder that produced a synthetic suite, if any.
  std::optional<EncoderSpec> encoder;

  /// Throws DatasetError / FormatError(format_width) on a broken invariant.
  void validate() const;
  std::size_t total_classes() const noexcept;
};

void write_suite(const Suite& suite, const std::filesystem::path& dir);
Suite read_suite(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Sampling and splitting.
// ---------------------------------------------------------------------------

struct FewShotSplit {
  int k = 0;
  std::uint64_t seed = 0;
  std::vector<std::vector<std::size_t>> per_class;

  /// All selected sample indices in ascending order.
  std::vector<std::size_t> indices() const;
};

/// Stratified k-shot draw from the train split, without replacement.
FewShotSplit sample_few_shot(const TaskBundle& bundle, int k, std::uint64_t seed);

/// Classes sorted by name; the first ceil(C/2) are base, the rest new.
/// Labels of each half are renumbered in that sorted order.
std::pair<TaskBundle, TaskBundle> split_base_new(const TaskBundle& bundle);

/// Frozen token blocks for each task, taken from the suite when it carries
/// them and from the toy tokenizer otherwise.
std::vector<TaskText> task_texts(const Suite& suite, const EncoderSpec& encoder);

/// Samples of one split across all tasks. With `few_shot` (one entry per
/// task) the train split is replaced by the few-shot selection.
Batch split_batch(const Suite& suite, Split split, std::span<const FewShotSplit> few_shot = {});
Batch task_split_batch(const Suite& suite, std::size_t task, Split split);

// ---------------------------------------------------------------------------
// Synthetic suites.
// ---------------------------------------------------------------------------

struct SyntheticSpec {
  int tasks = 3;
  int classes = 4;
  int train_per_class = 16;
  int val_per_class = 0;
  int test_per_class = 16;
  /// Norm scale of the isotropic noise added to each class center.
  double spread = 0.1;
  std::uint64_t seed = 1;
  int hidden_context_length = 4;
  EncoderSpec encoder;

  void validate() const;
};

/// Gaussian class clusters on the unit sphere. Each center is the encoder's
/// feature of a hidden task prompt followed by the class name, so some
/// prompt context exists that reproduces the centers exactly.
Suite generate_synthetic(const SyntheticSpec& spec);

/// Class centers used by generate_synthetic for one task (unit rows).
Matrix synthetic_centers(const SyntheticSpec& spec, const Suite& suite, std::size_t task);

// ---------------------------------------------------------------------------
// Checkpoints: checkpoint.json plus one float64 tensor file per entry.
// ---------------------------------------------------------------------------

struct Checkpoint {
  ModelConfig model;
  EncoderSpec encoder;
  ParameterSet params;
  ParameterSet buffers;
  std::vector<std::string> task_names;
  std::vector<std::size_t> class_counts;
  /// Meta-input layout of C* variants.
  std::string augment_order = "task-first";
  std::uint64_t seed = 0;
};

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir);
Checkpoint read_checkpoint(const std::filesystem::path& dir);

/// Writes `fill(tmp)` into a fresh temporary directory and renames it over `dir`.
template <typename Fill>
void write_directory_atomically(const std::filesystem::path& dir, Fill&& fill);

void replace_directory(const std::filesystem::path& tmp, const std::filesystem::path& dir);
std::filesystem::path temporary_sibling(const std::filesystem::path& dir);

template <typename Fill>
void write_directory_atomically(const std::filesystem::path& dir, Fill&& fill) {
  const auto tmp = temporary_sibling(dir);
  std::filesystem::remove_all(tmp);
  std::filesystem::create_directories(tmp);
  try {
    fill(tmp);
  } catch (...) {
    std::filesystem::remove_all(tmp);
    throw;
  }
  replace_directory(tmp, dir);
}

}  // namespace softcpt
