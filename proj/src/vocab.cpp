#include "mps/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <stdexcept>
#include <unordered_set>

namespace mps {

namespace {
const std::vector<std::string> kReserved = {"<pad>", "<bos>", "<eos>", "<unk>"};
}

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  index_.reserve(tokens_.size());
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    auto [it, inserted] = index_.emplace(tokens_[i], static_cast<int>(i));
    if (!inserted) throw std::invalid_argument("Vocabulary: duplicate token " + tokens_[i]);
  }
  if (tokens_.size() < kReserved.size())
    throw std::invalid_argument("Vocabulary: missing reserved tokens");
}

int Vocabulary::id_of(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? unk_id : it->second;
}

const std::string& Vocabulary::token_of(int id) const {
  if (id < 0 || id >= size()) throw std::out_of_range("Vocabulary: id out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("Vocabulary::save: cannot open " + path);
  for (const auto& t : tokens_) out << t << '\n';
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("Vocabulary::load: cannot open " + path);
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) tokens.push_back(line);
  return Vocabulary(std::move(tokens));
}

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> words;
  std::string cur;
  for (char ch : text) {
    const unsigned char u = static_cast<unsigned char>(ch);
    if (std::isalnum(u)) {
      cur.push_back(static_cast<char>(std::tolower(u)));
    } else if (!cur.empty()) {
      words.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

Vocabulary build_vocabulary(const std::vector<std::string>& corpus,
                            const std::vector<std::string>& forced, int max_size) {
  if (corpus.empty()) throw std::invalid_argument("build_vocabulary: empty corpus");
  if (max_size < static_cast<int>(kReserved.size()) + static_cast<int>(forced.size()))
    throw std::invalid_argument("build_vocabulary: cap too small for reserved + forced tokens");

  std::map<std::string, long> freq;  // ordered map for a deterministic tie-break
  for (const auto& text : corpus)
    for (auto& w : split_words(text)) ++freq[w];

  std::vector<std::string> tokens = kReserved;
  std::unordered_set<std::string> seen(tokens.begin(), tokens.end());
  for (const auto& w : forced)
    if (seen.insert(w).second) tokens.push_back(w);

  std::vector<std::pair<std::string, long>> ranked(freq.begin(), freq.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  for (const auto& [w, n] : ranked) {
    if (static_cast<int>(tokens.size()) >= max_size) break;
    if (seen.insert(w).second) tokens.push_back(w);
  }
  return Vocabulary(std::move(tokens));
}

std::vector<int> tokenize(const std::string& text, const Vocabulary& vocab, int max_tokens) {
  if (max_tokens < 2) throw std::invalid_argument("tokenize: max_tokens must be >= 2");
  auto words = split_words(text);
  bool blank = true;
  for (char ch : text)
    if (!std::isspace(static_cast<unsigned char>(ch))) blank = false;
  if (blank) throw std::invalid_argument("tokenize: empty text");

  std::vector<int> ids;
  ids.reserve(words.size() + 2);
  ids.push_back(Vocabulary::bos_id);
  for (const auto& w : words) {
    if (static_cast<int>(ids.size()) >= max_tokens - 1) break;
    ids.push_back(vocab.id_of(w));
  }
  ids.push_back(Vocabulary::eos_id);
  return ids;
}

std::string detokenize(const std::vector<int>& ids, const Vocabulary& vocab) {
  std::string text;
  for (int id : ids) {
    if (id < Vocabulary::reserved_count) continue;
    if (!text.empty()) text.push_back(' ');
    text += vocab.token_of(id);
  }
  return text;
}

}  // namespace mps
