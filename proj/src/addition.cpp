#include "tlab/addition.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "tlab/rng.hpp"

namespace tlab {

namespace vocab {

int id_of(char symbol) {
  if (symbol >= '0' && symbol <= '9') return symbol - '0';
  if (symbol == '+') return kPlus;
  if (symbol == '=') return kEquals;
  if (symbol == '$') return kMarker;
  throw std::invalid_argument(std::string("vocab: unknown symbol '") + symbol + "'");
}

char symbol_of(int id) {
  if (id >= 0 && id <= 9) return static_cast<char>('0' + id);
  if (id == kPlus) return '+';
  if (id == kEquals) return '=';
  if (id == kMarker) return '$';
  throw std::out_of_range("vocab: id " + std::to_string(id) + " out of range [0, 13)");
}

std::vector<int> tokenize(const std::string& text) {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (char c : text) ids.push_back(id_of(c));
  return ids;
}

std::string detokenize(const std::vector<int>& ids) {
  std::string text;
  text.reserve(ids.size());
  for (int id : ids) text.push_back(symbol_of(id));
  return text;
}

}  // namespace vocab

std::string AdditionSample::text() const {
  std::vector<int> ids = prompt;
  ids.insert(ids.end(), answer.begin(), answer.end());
  return vocab::detokenize(ids);
}

std::vector<int> AdditionSample::full_sequence() const {
  std::vector<int> ids;
  ids.reserve(kSequenceLen);
  ids.push_back(vocab::kMarker);
  ids.insert(ids.end(), prompt.begin(), prompt.end());
  ids.insert(ids.end(), answer.begin(), answer.end());
  return ids;
}

AdditionSample render_sample(int a, int b) {
  if (a < 0 || a > 999 || b < 0 || b > 999)
    throw std::domain_error("render_sample: operands must be in [0, 999], got " +
                            std::to_string(a) + " and " + std::to_string(b));
  AdditionSample s;
  s.a = a;
  s.b = b;
  char prompt[9];
  std::snprintf(prompt, sizeof(prompt), "%03d+%03d=", a, b);
  s.prompt = vocab::tokenize(prompt);
  const int total = a + b;
  char digits[5];
  std::snprintf(digits, sizeof(digits), "%04d", total);
  // Reversed answer: least-significant digit first, then the end marker.
  std::string answer(digits, 4);
  std::reverse(answer.begin(), answer.end());
  answer.push_back('$');
  s.answer = vocab::tokenize(answer);
  return s;
}

AdditionSample parse_sample_text(const std::string& line) {
  const std::size_t expect = AdditionSample::kPromptLen + AdditionSample::kAnswerLen;
  if (line.size() != expect)
    throw std::invalid_argument("parse_sample_text: expected " + std::to_string(expect) +
                                " characters, got " + std::to_string(line.size()) + " in \"" +
                                line + "\"");
  if (line[3] != '+' || line[7] != '=' || line[12] != '$')
    throw std::invalid_argument("parse_sample_text: malformed sample \"" + line + "\"");
  const int a = std::stoi(line.substr(0, 3));
  const int b = std::stoi(line.substr(4, 3));
  AdditionSample s = render_sample(a, b);
  if (s.text() != line)
    throw std::invalid_argument("parse_sample_text: answer in \"" + line +
                                "\" does not match " + std::to_string(a) + "+" +
                                std::to_string(b));
  return s;
}

DatasetSplit generate_splits(std::size_t n_train, std::size_t n_test, std::uint64_t seed) {
  constexpr std::size_t kPairSpace = 1000 * 1000;
  if (n_train + n_test > kPairSpace)
    throw std::length_error("generate_splits: requested " + std::to_string(n_train) + " + " +
                            std::to_string(n_test) + " samples from a space of " +
                            std::to_string(kPairSpace) + " pairs");
  std::vector<std::uint32_t> pairs(kPairSpace);
  for (std::size_t i = 0; i < kPairSpace; ++i) pairs[i] = static_cast<std::uint32_t>(i);
  Rng rng(seed);
  rng.shuffle(pairs);
  DatasetSplit split;
  split.seed = seed;
  split.train.reserve(n_train);
  split.test.reserve(n_test);
  for (std::size_t i = 0; i < n_train; ++i)
    split.train.push_back(render_sample(static_cast<int>(pairs[i] / 1000),
                                        static_cast<int>(pairs[i] % 1000)));
  for (std::size_t i = 0; i < n_test; ++i)
    split.test.push_back(render_sample(static_cast<int>(pairs[n_train + i] / 1000),
                                       static_cast<int>(pairs[n_train + i] % 1000)));
  return split;
}

void write_samples(const std::string& path, const std::vector<AdditionSample>& samples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_samples: cannot open " + path);
  for (const AdditionSample& s : samples) out << s.text() << '\n';
  if (!out) throw std::runtime_error("write_samples: write failed for " + path);
}

std::vector<AdditionSample> read_samples(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_samples: cannot open " + path);
  std::vector<AdditionSample> samples;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    samples.push_back(parse_sample_text(line));
  }
  return samples;
}

std::vector<std::vector<int>> decode_answers(const NextTokenFn& next_token,
                                             const std::vector<AdditionSample>& samples) {
  if (samples.empty()) throw std::invalid_argument("decode_answers: no samples");
  const std::size_t n = samples.size();
  const std::size_t prompt_len = 1 + AdditionSample::kPromptLen;  // '$' + prompt
  std::vector<int> ids;
  ids.reserve(n * AdditionSample::kSequenceLen);
  std::size_t n_seq = prompt_len;
  for (const AdditionSample& s : samples) {
    ids.push_back(vocab::kMarker);
    ids.insert(ids.end(), s.prompt.begin(), s.prompt.end());
  }
  std::vector<std::vector<int>> decoded(n);
  for (std::size_t step = 0; step < AdditionSample::kAnswerLen; ++step) {
    std::vector<int> next = next_token(ids, n, n_seq);
    if (next.size() != n)
      throw std::runtime_error("decode_answers: decoder returned " +
                               std::to_string(next.size()) + " tokens for " +
                               std::to_string(n) + " sequences");
    // Re-pack with the new token appended to every sequence.
    std::vector<int> grown;
    grown.reserve(n * (n_seq + 1));
    for (std::size_t s = 0; s < n; ++s) {
      grown.insert(grown.end(), ids.begin() + s * n_seq, ids.begin() + (s + 1) * n_seq);
      grown.push_back(next[s]);
      decoded[s].push_back(next[s]);
    }
    ids = std::move(grown);
    ++n_seq;
  }
  return decoded;
}

NextTokenFn model_next_token(const TransformerModel& model) {
  return [&model](const std::vector<int>& ids, std::size_t n_batch, std::size_t n_seq) {
    Tape tape(false);
    Tensor logits = model_forward_batch(model, ids, n_batch, n_seq, tape);
    const std::size_t v = logits.cols();
    std::vector<int> next(n_batch);
    for (std::size_t s = 0; s < n_batch; ++s) {
      const double* row = logits.data() + ((s + 1) * n_seq - 1) * v;
      std::size_t best = 0;
      for (std::size_t j = 1; j < v; ++j)
        if (row[j] > row[best]) best = j;  // ties keep the lowest id
      next[s] = static_cast<int>(best);
    }
    return next;
  };
}

std::vector<std::vector<int>> decode_answers(const TransformerModel& model,
                                             const std::vector<AdditionSample>& samples,
                                             std::size_t max_batch) {
  std::vector<std::vector<int>> decoded;
  decoded.reserve(samples.size());
  NextTokenFn stepper = model_next_token(model);
  for (std::size_t start = 0; start < samples.size(); start += max_batch) {
    const std::size_t stop = std::min(samples.size(), start + max_batch);
    std::vector<AdditionSample> chunk(samples.begin() + start, samples.begin() + stop);
    auto part = decode_answers(stepper, chunk);
    for (auto& d : part) decoded.push_back(std::move(d));
  }
  return decoded;
}

double evaluate_exact_match(const NextTokenFn& next_token,
                            const std::vector<AdditionSample>& samples) {
  if (samples.empty()) throw std::invalid_argument("evaluate_exact_match: no samples");
  const auto decoded = decode_answers(next_token, samples);
  std::size_t correct = 0;  // exact integer counting
  for (std::size_t i = 0; i < samples.size(); ++i)
    if (decoded[i] == samples[i].answer) ++correct;
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

double evaluate_exact_match(const TransformerModel& model,
                            const std::vector<AdditionSample>& samples,
                            std::size_t max_batch) {
  if (samples.empty()) throw std::invalid_argument("evaluate_exact_match: no samples");
  std::size_t correct = 0;
  NextTokenFn stepper = model_next_token(model);
  for (std::size_t start = 0; start < samples.size(); start += max_batch) {
    const std::size_t stop = std::min(samples.size(), start + max_batch);
    std::vector<AdditionSample> chunk(samples.begin() + start, samples.begin() + stop);
    const auto decoded = decode_answers(stepper, chunk);
    for (std::size_t i = 0; i < chunk.size(); ++i)
      if (decoded[i] == chunk[i].answer) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

}  // namespace tlab
