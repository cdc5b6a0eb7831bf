#include "nope/tasks.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <unordered_set>

namespace nope {

std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::kAddition: return "addition";
    case TaskKind::kReversal: return "reversal";
    case TaskKind::kIndexing: return "indexing";
    case TaskKind::kOrdering: return "ordering";
  }
  return "unknown";
}

TaskKind parse_task_kind(const std::string& s) {
  if (s == "addition") return TaskKind::kAddition;
  if (s == "reversal") return TaskKind::kReversal;
  if (s == "indexing") return TaskKind::kIndexing;
  if (s == "ordering") return TaskKind::kOrdering;
  throw std::invalid_argument("unknown task '" + s + "' (expected addition, reversal, indexing or ordering)");
}

TaskSample make_sample(std::string prompt, std::string answer) {
  TaskSample s{std::move(prompt), std::move(answer), {}};
  s.full = s.prompt + s.answer + kEos;
  return s;
}

TaskSpec TaskSpec::full(TaskKind kind) {
  switch (kind) {
    case TaskKind::kAddition: return {kind, 3, 0.90};
    case TaskKind::kReversal: return {kind, 16, 0.90};
    case TaskKind::kIndexing: return {kind, 9, 0.90};
    case TaskKind::kOrdering: return {kind, 5, 0.90};
  }
  throw std::invalid_argument("unknown task kind");
}

TaskSpec TaskSpec::desk(TaskKind kind) {
  switch (kind) {
    case TaskKind::kAddition: return {kind, 2, 0.90};
    case TaskKind::kReversal: return {kind, 8, 0.90};
    case TaskKind::kIndexing: return {kind, 6, 0.90};
    case TaskKind::kOrdering: return {kind, 4, 0.90};
  }
  throw std::invalid_argument("unknown task kind");
}

int TaskSpec::max_prompt_len() const {
  const int L = max_operand;
  switch (kind) {
    case TaskKind::kAddition: return 2 * L + 2;   // A+B=
    case TaskKind::kReversal: return L + 6;       // rev(D)=
    case TaskKind::kIndexing: return L + 11;      // wherex(D,c)=
    case TaskKind::kOrdering: return 2 * L + 9;   // order(S,P)=
  }
  return 0;
}

int TaskSpec::max_answer_len() const {
  switch (kind) {
    case TaskKind::kAddition: return max_operand + 1;
    case TaskKind::kReversal: return max_operand;
    case TaskKind::kIndexing: return static_cast<int>(std::to_string(max_operand - 1).size());
    case TaskKind::kOrdering: return max_operand;
  }
  return 0;
}

void TaskSpec::validate() const {
  if (max_operand < 1) throw std::invalid_argument("task max_operand must be >= 1");
  if (max_len_fraction < 0.0 || max_len_fraction > 1.0) throw std::invalid_argument("max_len_fraction must be in [0,1]");
  if (kind == TaskKind::kAddition && max_operand > 9) throw std::invalid_argument("addition operands limited to 9 digits");
  if (kind == TaskKind::kOrdering && max_operand > 10) {
    throw std::invalid_argument("ordering needs distinct digits, so at most 10");
  }
}

Vocab::Vocab() : chars_("\n()+,0123456789=dehorvwx") {
  std::sort(chars_.begin(), chars_.end());
  std::fill(std::begin(lookup_), std::end(lookup_), -1);
  for (std::size_t i = 0; i < chars_.size(); ++i) lookup_[static_cast<unsigned char>(chars_[i])] = static_cast<int>(i);
}

int Vocab::id(char c) const {
  const int v = lookup_[static_cast<unsigned char>(c)];
  if (v < 0) {
    const std::string shown = c == '\n' ? "\\n" : std::string(1, c);
    throw std::invalid_argument("character '" + shown + "' is not in the vocabulary");
  }
  return v;
}

bool Vocab::contains(char c) const { return lookup_[static_cast<unsigned char>(c)] >= 0; }

char Vocab::symbol(int id) const {
  if (id < 0 || id >= static_cast<int>(chars_.size())) {
    throw std::out_of_range("token id " + std::to_string(id) + " has no character");
  }
  return chars_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocab::tokenize(std::string_view s) const {
  std::vector<int> out;
  out.reserve(s.size());
  for (char c : s) out.push_back(id(c));
  return out;
}

std::string Vocab::detokenize(const std::vector<int>& ids) const {
  std::string out;
  out.reserve(ids.size());
  for (int i : ids) out.push_back(symbol(i));
  return out;
}

const Vocab& default_vocab() {
  static const Vocab v;
  return v;
}

DigitPool all_digits() { return {0, 1, 2, 3, 4, 5, 6, 7, 8, 9}; }

namespace {

int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

// Operand size: max with probability `frac`, else uniform over 1..max-1.
int draw_length(Rng& rng, const TaskSpec& spec) {
  const int L = spec.max_operand;
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  if (L == 1 || u < spec.max_len_fraction) return L;
  return uniform_int(rng, 1, L - 1);
}

std::vector<int> pool_vector(const DigitPool& pool) {
  if (pool.empty()) throw std::invalid_argument("digit pool is empty");
  for (int d : pool) {
    if (d < 0 || d > 9) throw std::invalid_argument("digit pool entries must be in 0..9");
  }
  return {pool.begin(), pool.end()};
}

std::string random_digits(Rng& rng, int len, const std::vector<int>& pool) {
  std::string s;
  for (int i = 0; i < len; ++i) {
    s.push_back(static_cast<char>('0' + pool[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(pool.size()) - 1))]));
  }
  return s;
}

long random_operand(Rng& rng, int digits) {
  if (digits == 1) return uniform_int(rng, 0, 9);
  long lo = 1;
  for (int i = 1; i < digits; ++i) lo *= 10;
  return std::uniform_int_distribution<long>(lo, lo * 10 - 1)(rng);
}

}  // namespace

std::string addition_answer(long a, long b) {
  std::string s = std::to_string(a + b);
  std::reverse(s.begin(), s.end());
  return s;
}

std::string reversal_answer(std::string_view digits) { return {digits.rbegin(), digits.rend()}; }

std::string indexing_answer(std::string_view digits, char query) {
  const auto pos = digits.find(query);
  if (pos == std::string_view::npos) throw std::invalid_argument("indexing query digit not present");
  return std::to_string(pos);
}

std::string ordering_answer(std::string_view original, std::string_view permuted) {
  if (original.size() != permuted.size()) throw std::invalid_argument("ordering operands differ in length");
  std::string out;
  for (char c : permuted) {
    const auto pos = original.find(c);
    if (pos == std::string_view::npos) throw std::invalid_argument("ordering operand is not a permutation");
    out += std::to_string(pos);
  }
  return out;
}

TaskSample gen_addition(Rng& rng, const TaskSpec& spec) {
  const int L = spec.max_operand;
  int la = L, lb = L;
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  if (L > 1 && u >= spec.max_len_fraction) {
    // Uniform over the (la, lb) pairs that are not both maximal.
    const int choice = uniform_int(rng, 0, L * L - 2);
    la = choice / L + 1;
    lb = choice % L + 1;
  }
  const long a = random_operand(rng, la);
  const long b = random_operand(rng, lb);
  return make_sample(std::to_string(a) + "+" + std::to_string(b) + "=", addition_answer(a, b));
}

TaskSample gen_reversal(Rng& rng, const TaskSpec& spec, const DigitPool& pool) {
  const auto digits = pool_vector(pool);
  const std::string d = random_digits(rng, draw_length(rng, spec), digits);
  return make_sample("rev(" + d + ")=", reversal_answer(d));
}

TaskSample gen_indexing(Rng& rng, const TaskSpec& spec, const DigitPool& pool) {
  const auto digits = pool_vector(pool);
  const std::string d = random_digits(rng, draw_length(rng, spec), digits);
  const char q = d[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(d.size()) - 1))];
  return make_sample("wherex(" + d + "," + q + ")=", indexing_answer(d, q));
}

TaskSample gen_ordering(Rng& rng, const TaskSpec& spec, const DigitPool& pool) {
  auto digits = pool_vector(pool);
  if (static_cast<int>(digits.size()) < spec.max_operand) {
    throw std::invalid_argument("ordering needs " + std::to_string(spec.max_operand) +
                                " distinct digits but the pool has " + std::to_string(digits.size()));
  }
  const int len = draw_length(rng, spec);
  std::shuffle(digits.begin(), digits.end(), rng);
  std::string s;
  for (int i = 0; i < len; ++i) s.push_back(static_cast<char>('0' + digits[static_cast<std::size_t>(i)]));
  std::string p = s;
  std::shuffle(p.begin(), p.end(), rng);
  return make_sample("order(" + s + "," + p + ")=", ordering_answer(s, p));
}

TaskSample gen_sample(Rng& rng, const TaskSpec& spec, const DigitPool& pool) {
  switch (spec.kind) {
    case TaskKind::kAddition: return gen_addition(rng, spec);
    case TaskKind::kReversal: return gen_reversal(rng, spec, pool);
    case TaskKind::kIndexing: return gen_indexing(rng, spec, pool);
    case TaskKind::kOrdering: return gen_ordering(rng, spec, pool);
  }
  throw std::invalid_argument("unknown task kind");
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  // splitmix64 finalizer over a mix of both inputs
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

Dataset build_dataset(const TaskSpec& spec, int n, std::uint64_t seed, const DigitPool& pool) {
  spec.validate();
  if (n < 1) throw std::invalid_argument("dataset size must be >= 1");
  if (spec.kind == TaskKind::kOrdering && static_cast<int>(pool.size()) < spec.max_operand) {
    throw std::invalid_argument("digit pool too small for ordering: need " + std::to_string(spec.max_operand) +
                                " distinct digits");
  }
  Dataset ds{spec, {}};
  ds.samples.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
    ds.samples.push_back(gen_sample(rng, spec, pool));
  }
  return ds;
}

DatasetSplit build_split(const TaskSpec& spec, int n_train, int n_test, std::uint64_t seed, const DigitPool& pool) {
  DatasetSplit split;
  split.train = build_dataset(spec, n_train, derive_seed(seed, 0x7472), pool);
  std::unordered_set<std::string> seen;
  for (const auto& s : split.train.samples) seen.insert(s.prompt);

  if (n_test < 1) throw std::invalid_argument("dataset size must be >= 1");
  split.test.spec = spec;
  const std::uint64_t test_seed = derive_seed(seed, 0x7465);
  const long long max_draws = 50LL * n_test + 1000;
  for (long long i = 0; static_cast<int>(split.test.samples.size()) < n_test; ++i) {
    if (i >= max_draws) {
      throw std::invalid_argument("cannot draw " + std::to_string(n_test) + " test prompts disjoint from training for " +
                                  to_string(spec.kind));
    }
    Rng rng(derive_seed(test_seed, static_cast<std::uint64_t>(i)));
    TaskSample s = gen_sample(rng, spec, pool);
    if (seen.count(s.prompt)) continue;
    split.test.samples.push_back(std::move(s));
  }
  return split;
}

namespace {

void write_lines(const std::vector<TaskSample>& samples, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& s : samples) out << s.full;
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

}  // namespace

void write_dataset_files(const DatasetSplit& split, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_lines(split.train.samples, dir / "train.txt");
  write_lines(split.test.samples, dir / "test.txt");
  std::ofstream vocab(dir / "vocab.txt", std::ios::binary);
  for (char c : default_vocab().chars()) {
    if (c == '\n') {
      vocab << "\\n\n";
    } else {
      vocab << c << '\n';
    }
  }
  vocab << "<pad>\n";
}

std::vector<TaskSample> read_dataset_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<TaskSample> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::runtime_error("malformed sample line: " + line);
    out.push_back(make_sample(line.substr(0, eq + 1), line.substr(eq + 1)));
  }
  return out;
}

}  // namespace nope
