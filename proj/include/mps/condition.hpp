#pragma once

#include <array>
#include <stdexcept>
#include <string>
#include <vector>

namespace mps {

/// The four preference dimensions.
enum class Dimension { aesthetics, detail, alignment, overall };

constexpr std::array<Dimension, 4> all_dimensions = {Dimension::aesthetics, Dimension::detail,
                                                     Dimension::alignment, Dimension::overall};

inline const char* to_string(Dimension d) {
  switch (d) {
    case Dimension::aesthetics: return "aesthetics";
    case Dimension::detail: return "detail";
    case Dimension::alignment: return "alignment";
    case Dimension::overall: return "overall";
  }
  throw std::invalid_argument("to_string: bad Dimension");
}

inline Dimension dimension_from_string(const std::string& s) {
  for (Dimension d : all_dimensions)
    if (s == to_string(d)) return d;
  throw std::invalid_argument("dimension_from_string: unknown dimension '" + s + "'");
}

/// A preference dimension and the attribute words that represent it. The
/// standard sets are fixed; custom word lists are allowed as an extension
/// point for user-defined conditions.
struct ConditionSpec {
  Dimension dimension;
  std::vector<std::string> words;

  static ConditionSpec standard(Dimension d);
  static std::vector<std::string> all_attribute_words();  // union over the four sets

  /// Space-joined word list, the text fed to the condition encoder.
  std::string joined() const {
    std::string s;
    for (const auto& w : words) {
      if (!s.empty()) s.push_back(' ');
      s += w;
    }
    return s;
  }
};

inline ConditionSpec ConditionSpec::standard(Dimension d) {
  static const std::vector<std::string> aesthetics = {"light", "color",    "clarity", "tone",
                                                      "style", "ambiance", "artistry"};
  static const std::vector<std::string> detail = {"shape", "face",      "hair",     "hands",
                                                  "limbs", "structure", "instance", "texture"};
  static const std::vector<std::string> alignment = {"quantity", "attributes", "position",
                                                     "number", "location"};
  switch (d) {
    case Dimension::aesthetics: return {d, aesthetics};
    case Dimension::detail: return {d, detail};
    case Dimension::alignment: return {d, alignment};
    case Dimension::overall: {
      std::vector<std::string> words = aesthetics;
      words.insert(words.end(), detail.begin(), detail.end());
      words.insert(words.end(), alignment.begin(), alignment.end());
      return {d, std::move(words)};
    }
  }
  throw std::invalid_argument("ConditionSpec::standard: bad Dimension");
}

inline std::vector<std::string> ConditionSpec::all_attribute_words() {
  return standard(Dimension::overall).words;
}

}  // namespace mps
