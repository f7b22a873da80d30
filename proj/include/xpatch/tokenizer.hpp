#pragma once

// Byte-level tokenizer over a checkpoint vocab: each byte maps to the vocab
// entry spelling that single byte, or to "<unk>" when there is none.

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "xpatch/model.hpp"

namespace xpatch {

class ByteTokenizer {
 public:
  explicit ByteTokenizer(const Checkpoint& ck) : vocab_(&ck.vocab) {
    byte_to_id_.fill(-1);
    for (std::size_t i = 0; i < ck.vocab.size(); ++i)
      if (ck.vocab[i].size() == 1) byte_to_id_[static_cast<unsigned char>(ck.vocab[i][0])] = static_cast<TokenId>(i);
    unk_ = ck.token_id("<unk>");
  }

  /// nullopt if some byte has neither a vocab entry nor an <unk> fallback.
  std::optional<std::vector<TokenId>> encode(std::string_view text) const {
    std::vector<TokenId> ids;
    ids.reserve(text.size());
    for (char ch : text) {
      const TokenId id = byte_to_id_[static_cast<unsigned char>(ch)];
      if (id >= 0) {
        ids.push_back(id);
      } else if (unk_) {
        ids.push_back(*unk_);
      } else {
        return std::nullopt;
      }
    }
    return ids;
  }

  std::string decode(std::span<const TokenId> ids) const {
    std::string out;
    for (TokenId t : ids) out += (*vocab_)[static_cast<std::size_t>(t)];
    return out;
  }

 private:
  const std::vector<std::string>* vocab_;
  std::array<TokenId, 256> byte_to_id_{};
  std::optional<TokenId> unk_;
};

}  // namespace xpatch
