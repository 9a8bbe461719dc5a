#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "phqfuse/error.hpp"

namespace phqfuse::text {

// Byte-level vocabulary: ids 0-255 are raw bytes, then four specials.
inline constexpr int kBos = 256;
inline constexpr int kEos = 257;
inline constexpr int kPad = 258;
inline constexpr int kAudio = 259;  // marks where projected audio frames are spliced in
inline constexpr int kVocabSize = 260;

inline bool is_special(int id) { return id >= kBos && id < kVocabSize; }

inline std::vector<int> encode(std::string_view s, bool add_bos = false, bool add_eos = false) {
  std::vector<int> ids;
  ids.reserve(s.size() + 2);
  if (add_bos) ids.push_back(kBos);
  for (unsigned char c : s) ids.push_back(static_cast<int>(c));
  if (add_eos) ids.push_back(kEos);
  return ids;
}

/// Inverse of encode; special ids are dropped.
inline std::string decode(std::span<const int> ids) {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id < 0 || id >= kVocabSize) throw RangeError("token id " + std::to_string(id) + " outside vocabulary");
    if (id < 256) out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
  }
  return out;
}

}  // namespace phqfuse::text
