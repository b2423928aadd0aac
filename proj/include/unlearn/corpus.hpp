#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "unlearn/common.hpp"

namespace unlearn::corpus {

enum class DocType : uint8_t { kCreative = 0, kBiography = 1, kWeb = 2 };
enum class TaskType : uint8_t { kCompletion = 0, kQa = 1 };
enum class Split : uint8_t { kForget = 0, kRetain = 1, kHoldout = 2, kUtility = 3 };

std::string_view doc_type_name(DocType t);
std::string_view task_type_name(TaskType t);
std::string_view split_name(Split s);
DocType parse_doc_type(std::string_view s);
TaskType parse_task_type(std::string_view s);
Split parse_split(std::string_view s);

// Byte-level tokenizer over the generator's charset (printable ASCII) plus
// control tokens. Unknown bytes map to the replacement token and are flagged.
class Tokenizer {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kSep = 3;
  static constexpr int kUnk = 4;
  static constexpr int kFirstChar = 5;
  static constexpr char kCharLo = ' ';  // 0x20
  static constexpr char kCharHi = '~';  // 0x7e

  int vocab_size() const { return kFirstChar + (kCharHi - kCharLo + 1); }
  std::vector<int> tokenize(std::string_view text, bool* had_unknown = nullptr) const;
  std::string detokenize(std::span<const int> ids) const;  // control tokens render as nothing
};

struct Sample {
  std::string id;
  DocType doc_type = DocType::kCreative;
  TaskType task_type = TaskType::kCompletion;
  std::string input;
  std::string output;
  Split split = Split::kForget;
};

struct CorpusSpec {
  uint64_t seed = 7;
  // documents per (doc_type x split) for the three document-bearing splits
  std::array<std::array<int, 3>, 3> doc_counts = {{{10, 10, 10}, {10, 10, 10}, {30, 30, 30}}};
  int utility_count = 10;
  int name_pool = 96;     // distinct people/story/org entities available
  int template_pool = 5;  // lore carrier-sentence variants in use

  int docs(DocType t, Split s) const { return doc_counts[static_cast<int>(t)][static_cast<int>(s)]; }
  int& docs(DocType t, Split s) { return doc_counts[static_cast<int>(t)][static_cast<int>(s)]; }
};

class Corpus {
 public:
  Corpus() = default;
  explicit Corpus(std::vector<Sample> samples);

  const std::vector<Sample>& samples() const { return samples_; }
  std::vector<const Sample*> split(Split s) const;
  std::vector<const Sample*> cell(Split s, DocType d, TaskType t) const;

 private:
  std::vector<Sample> samples_;
};

struct GeneratedCorpus {
  Corpus corpus;
  // doc entity strings (names, titles, orgs, phones, addresses) per split,
  // used to verify that forget/retain/holdout never share an entity
  std::map<Split, std::set<std::string>> entities;
};

GeneratedCorpus generate(const CorpusSpec& spec);

void save(const Corpus& corpus, const std::string& path);
Corpus load(const std::string& path);

// Token sequence [BOS input SEP output EOS] with next-token targets; the loss
// mask covers exactly the post-SEP targets.
struct Encoded {
  std::vector<int> tokens;
  int sep_pos = 0;
  std::vector<int> targets;      // size tokens.size() - 1
  std::vector<uint8_t> mask;     // size tokens.size() - 1
  const Sample* sample = nullptr;
};

Encoded encode(const Sample& sample, const Tokenizer& tok, int context_len);
std::vector<Encoded> encode_all(std::span<const Sample* const> samples, const Tokenizer& tok, int context_len);

}  // namespace unlearn::corpus
