// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <bitset>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace scale {

// Canonical order fixes every per-modality index (score matrix rows, segment
// order in the fused sequence, report columns).
enum class ModalityKind : std::uint8_t { Text = 0, Image = 1, Table = 2, Video = 3, Audio = 4 };

inline constexpr std::size_t kNumModalities = 5;
inline constexpr std::array<ModalityKind, kNumModalities> kAllModalities = {
    ModalityKind::Text, ModalityKind::Image, ModalityKind::Table, ModalityKind::Video, ModalityKind::Audio};

constexpr std::size_t index_of(ModalityKind k) { return static_cast<std::size_t>(k); }

inline std::string_view modality_name(ModalityKind k) {
  switch (k) {
    case ModalityKind::Text: return "text";
    case ModalityKind::Image: return "image";
    case ModalityKind::Table: return "table";
    case ModalityKind::Video: return "video";
    case ModalityKind::Audio: return "audio";
  }
  return "?";
}

// Short labels used in report tables: T, I, Tab, V, A.
inline std::string_view modality_short(ModalityKind k) {
  switch (k) {
    case ModalityKind::Text: return "T";
    case ModalityKind::Image: return "I";
    case ModalityKind::Table: return "Tab";
    case ModalityKind::Video: return "V";
    case ModalityKind::Audio: return "A";
  }
  return "?";
}

inline ModalityKind parse_modality(std::string_view s) {
  for (ModalityKind k : kAllModalities) {
    if (s == modality_name(k) || s == modality_short(k)) return k;
  }
  throw std::invalid_argument("unknown modality: " + std::string(s));
}

inline bool is_discrete(ModalityKind k) { return k == ModalityKind::Text || k == ModalityKind::Table; }

class ModalitySet {
 public:
  constexpr ModalitySet() = default;
  ModalitySet(std::initializer_list<ModalityKind> kinds) {
    for (ModalityKind k : kinds) bits_.set(index_of(k));
  }

  static ModalitySet all() {
    ModalitySet s;
    s.bits_.set();
    return s;
  }

  // Accepts "T,I,Tab" or "text,image,table" or "all".
  static ModalitySet parse(std::string_view spec) {
    if (spec == "all") return all();
    ModalitySet s;
    std::size_t start = 0;
    while (start <= spec.size()) {
      std::size_t end = spec.find_first_of(",+", start);
      if (end == std::string_view::npos) end = spec.size();
      std::string_view tok = spec.substr(start, end - start);
      if (!tok.empty()) s.insert(parse_modality(tok));
      start = end + 1;
    }
    if (s.empty()) throw std::invalid_argument("empty modality set");
    return s;
  }

  bool contains(ModalityKind k) const { return bits_.test(index_of(k)); }
  void insert(ModalityKind k) { bits_.set(index_of(k)); }
  void erase(ModalityKind k) { bits_.reset(index_of(k)); }
  std::size_t size() const { return bits_.count(); }
  bool empty() const { return bits_.none(); }

  std::vector<ModalityKind> kinds() const {
    std::vector<ModalityKind> out;
    for (ModalityKind k : kAllModalities) {
      if (contains(k)) out.push_back(k);
    }
    return out;
  }

  std::string to_string() const {
    std::ostringstream oss;
    bool first = true;
    for (ModalityKind k : kinds()) {
      if (!first) oss << ",";
      oss << modality_short(k);
      first = false;
    }
    return oss.str();
  }

  friend bool operator==(const ModalitySet& a, const ModalitySet& b) { return a.bits_ == b.bits_; }

 private:
  std::bitset<kNumModalities> bits_;
};

// Shared token layout for the text and table vocabularies.
namespace tokens {
inline constexpr std::int64_t kPad = 0;
inline constexpr std::int64_t kCls = 1;
inline constexpr std::int64_t kMask = 2;
inline constexpr std::int64_t kSep = 3;
inline constexpr std::int64_t kFirstWord = 4;
}  // namespace tokens

}  // namespace scale
