#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace nope {

enum class TaskKind { kAddition, kReversal, kIndexing, kOrdering };

std::string to_string(TaskKind k);
TaskKind parse_task_kind(const std::string& s);

/// A prompt/answer pair; `full` is prompt + answer + EOS.
struct TaskSample {
  std::string prompt;
  std::string answer;
  std::string full;
};

inline constexpr char kEos = '\n';

TaskSample make_sample(std::string prompt, std::string answer);

/// Task family plus the operand size that sets its maximum prompt length.
///
/// `max_operand` is the number of digits per addition operand (3), the
/// reversal string length (16), the indexing string length (9), or the
/// ordering string length (5) at full scale. The desk presets shrink it.
/// `max_len_fraction` of samples use the maximum operand size; the rest are
/// uniform over the shorter valid sizes.
struct TaskSpec {
  TaskKind kind = TaskKind::kReversal;
  int max_operand = 16;
  double max_len_fraction = 0.90;

  static TaskSpec full(TaskKind kind);
  static TaskSpec desk(TaskKind kind);

  /// Prompt length when every operand is at its maximum size.
  int max_prompt_len() const;
  /// Answer length upper bound (without EOS).
  int max_answer_len() const;
  void validate() const;
};

/// Character vocabulary sorted by code point, with PAD as the last id.
class Vocab {
 public:
  Vocab();

  int size() const { return static_cast<int>(chars_.size()) + 1; }
  int pad_id() const { return static_cast<int>(chars_.size()); }
  int eos_id() const { return id(kEos); }
  int id(char c) const;
  char symbol(int id) const;
  bool contains(char c) const;
  const std::string& chars() const { return chars_; }

  std::vector<int> tokenize(std::string_view s) const;
  std::string detokenize(const std::vector<int>& ids) const;

 private:
  std::string chars_;
  int lookup_[256];
};

const Vocab& default_vocab();

using Rng = std::mt19937_64;

/// Digits usable for operands. Tasks whose answer depends on arithmetic
/// (addition) ignore the pool.
using DigitPool = std::set<int>;
DigitPool all_digits();

// Individual generators. Each draws operand sizes by the TaskSpec length rule.
TaskSample gen_addition(Rng& rng, const TaskSpec& spec);
TaskSample gen_reversal(Rng& rng, const TaskSpec& spec, const DigitPool& pool = all_digits());
TaskSample gen_indexing(Rng& rng, const TaskSpec& spec, const DigitPool& pool = all_digits());
TaskSample gen_ordering(Rng& rng, const TaskSpec& spec, const DigitPool& pool = all_digits());
TaskSample gen_sample(Rng& rng, const TaskSpec& spec, const DigitPool& pool = all_digits());

// Answer functions, also used to build prompts from explicit operands.
std::string addition_answer(long a, long b);
std::string reversal_answer(std::string_view digits);
std::string indexing_answer(std::string_view digits, char query);
std::string ordering_answer(std::string_view original, std::string_view permuted);

struct Dataset {
  TaskSpec spec;
  std::vector<TaskSample> samples;
};

/// Deterministic per-sample generation: sample i uses a stream derived from
/// (seed, i). Throws if the pool cannot satisfy the task (ordering needs
/// max_operand distinct digits).
Dataset build_dataset(const TaskSpec& spec, int n, std::uint64_t seed, const DigitPool& pool = all_digits());

struct DatasetSplit {
  Dataset train;
  Dataset test;
};

/// Train and test sets with no prompt shared between them. Test samples that
/// collide with a training prompt are redrawn from later stream indices.
DatasetSplit build_split(const TaskSpec& spec, int n_train, int n_test, std::uint64_t seed,
                         const DigitPool& pool = all_digits());

void write_dataset_files(const DatasetSplit& split, const std::filesystem::path& dir);
std::vector<TaskSample> read_dataset_file(const std::filesystem::path& path);

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

}  // namespace nope
