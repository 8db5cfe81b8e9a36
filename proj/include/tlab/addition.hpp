#ifndef TLAB_ADDITION_HPP_
#define TLAB_ADDITION_HPP_

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "tlab/model.hpp"

namespace tlab {

// 13-symbol character vocabulary: '0'..'9' -> 0..9, '+' -> 10, '=' -> 11,
// '$' -> 12. '$' doubles as the sequence padding marker and the
// end-of-answer marker.
namespace vocab {
constexpr std::size_t kSize = 13;
constexpr int kPlus = 10;
constexpr int kEquals = 11;
constexpr int kMarker = 12;

int id_of(char symbol);    // throws std::invalid_argument naming the symbol
char symbol_of(int id);    // throws std::out_of_range
std::vector<int> tokenize(const std::string& text);
std::string detokenize(const std::vector<int>& ids);
}  // namespace vocab

// One rendered 3-digit addition problem. The prompt is "AAA+BBB=" (operands
// zero-padded to 3 digits); the answer is the sum zero-padded to 4 digits,
// emitted least-significant digit first, followed by '$'.
struct AdditionSample {
  int a = 0;
  int b = 0;
  std::vector<int> prompt;  // 8 tokens
  std::vector<int> answer;  // 5 tokens

  std::string text() const;  // prompt immediately followed by answer
  // Training/eval sequence: '$' padding marker + prompt + answer (14 tokens).
  std::vector<int> full_sequence() const;
  static constexpr std::size_t kPromptLen = 8;
  static constexpr std::size_t kAnswerLen = 5;
  static constexpr std::size_t kSequenceLen = 14;
};

AdditionSample render_sample(int a, int b);
// Inverse of render_sample on prompt+answer tokens; throws on malformed input.
AdditionSample parse_sample_text(const std::string& line);

struct DatasetSplit {
  std::vector<AdditionSample> train;
  std::vector<AdditionSample> test;
  std::uint64_t seed = 0;
};

// Uniform sampling without replacement from the 10^6 operand-pair space;
// train and test are disjoint. Deterministic for a given seed.
DatasetSplit generate_splits(std::size_t n_train, std::size_t n_test, std::uint64_t seed);

// Plain-text dataset files: one rendered sample per line.
void write_samples(const std::string& path, const std::vector<AdditionSample>& samples);
std::vector<AdditionSample> read_samples(const std::string& path);

// Greedy decoder seam: maps a batch of contexts (packed n_batch x n_seq ids)
// to one next-token id per sequence. Lets tests substitute oracle decoders.
using NextTokenFn =
    std::function<std::vector<int>(const std::vector<int>& ids, std::size_t n_batch,
                                   std::size_t n_seq)>;

// Greedy-decodes kAnswerLen tokens after each prompt ('$' + prompt context).
std::vector<std::vector<int>> decode_answers(const NextTokenFn& next_token,
                                             const std::vector<AdditionSample>& samples);
std::vector<std::vector<int>> decode_answers(const TransformerModel& model,
                                             const std::vector<AdditionSample>& samples,
                                             std::size_t max_batch = 512);

// Fraction of samples whose decoded answer matches all kAnswerLen tokens.
double evaluate_exact_match(const NextTokenFn& next_token,
                            const std::vector<AdditionSample>& samples);
double evaluate_exact_match(const TransformerModel& model,
                            const std::vector<AdditionSample>& samples,
                            std::size_t max_batch = 512);

// Argmax next-token stepper for a model (ties resolved to the lowest id).
NextTokenFn model_next_token(const TransformerModel& model);

}  // namespace tlab

#endif  // TLAB_ADDITION_HPP_
