#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace mps {

/// Whitespace/punctuation tokenizer vocabulary. Ids are contiguous from 0
/// with the four reserved tokens first; serialized one token per line where
/// the line number is the id.
class Vocabulary {
 public:
  static constexpr int pad_id = 0;
  static constexpr int bos_id = 1;
  static constexpr int eos_id = 2;
  static constexpr int unk_id = 3;
  static constexpr int reserved_count = 4;

  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> tokens);

  int size() const { return static_cast<int>(tokens_.size()); }
  int id_of(const std::string& token) const;  // unk_id when absent
  const std::string& token_of(int id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

/// Lowercase a-z0-9 word split; everything else is a separator.
std::vector<std::string> split_words(const std::string& text);

/// Frequency-ranked vocabulary over the corpus, capped at max_size total
/// entries (reserved included). forced words are always present.
Vocabulary build_vocabulary(const std::vector<std::string>& corpus,
                            const std::vector<std::string>& forced, int max_size = 2048);

/// BOS + token ids (UNK for out-of-vocabulary) + EOS, truncated to
/// max_tokens preserving the trailing EOS.
std::vector<int> tokenize(const std::string& text, const Vocabulary& vocab, int max_tokens = 32);

/// Inverse of tokenize for in-vocabulary text (reserved ids are skipped).
std::string detokenize(const std::vector<int>& ids, const Vocabulary& vocab);

}  // namespace mps
