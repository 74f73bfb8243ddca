#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "mps/dataset.hpp"

namespace mps {

/// Parse a JSONL file, one object per line. Malformed lines raise an error
/// naming the 1-based line number. An empty file yields an empty list.
inline std::vector<nlohmann::json> read_jsonl(const std::string& path) {
  std::vector<nlohmann::json> records;
  const auto lines = read_jsonl_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    try {
      records.push_back(nlohmann::json::parse(lines[i]));
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(path + ": malformed JSON on line " + std::to_string(i + 1) + ": " +
                               e.what());
    }
  }
  return records;
}

inline void write_jsonl(const std::string& path, const std::vector<nlohmann::json>& records) {
  std::vector<std::string> lines;
  lines.reserve(records.size());
  for (const auto& r : records) lines.push_back(r.dump());
  write_lines_atomic(path, lines);
}

}  // namespace mps
