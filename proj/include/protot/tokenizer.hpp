#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"
#include "protot/common.hpp"

namespace protot {

/// Byte-level BPE vocabulary.
///
/// Ids 0..255 are the raw bytes, followed by the merge outputs in rule order
/// (rules that spell an existing token reuse its id), followed by the eos and
/// unk specials. Text is pre-split into chunks
/// (runs of letters, digits or punctuation, each closed by at most one
/// whitespace character) and merges never cross chunk boundaries, so encoding
/// is stable at whitespace boundaries.
///
/// A trained vocabulary is immutable and safe to share across threads.
class BpeVocab {
 public:
  static constexpr int kByteSymbols = 256;
  static constexpr int kSpecials = 2;
  static constexpr int kMinVocab = kByteSymbols + kSpecials;
  static constexpr std::string_view kEosText = "<|eos|>";
  static constexpr std::string_view kUnkText = "<|unk|>";

  /// Learns merges until the vocabulary holds `target_vocab` entries or no
  /// adjacent pair is left. Ties between max-count pairs go to the
  /// lexicographically lowest (left, right) token-byte pair.
  static BpeVocab train(std::span<const std::string> corpus, int target_vocab);

  std::vector<TokenId> encode(std::string_view text) const;
  std::string decode(std::span<const TokenId> ids) const;

  int size() const { return static_cast<int>(id_to_token_.size()); }
  TokenId eos() const { return eos_; }
  TokenId unk() const { return unk_; }
  const std::vector<std::pair<TokenId, TokenId>>& merges() const { return merges_; }
  /// Raw bytes of one token.
  const std::string& token_bytes(TokenId id) const;
  std::optional<TokenId> find(std::string_view bytes) const;

  nlohmann::json to_json() const;
  static BpeVocab from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static BpeVocab load(const std::filesystem::path& path);
  /// Hash of the serialized form.
  std::uint64_t hash() const;

  /// Splits text into merge-independent chunks.
  static std::vector<std::string_view> pretokenize(std::string_view text);

 private:
  static std::uint64_t pair_key(TokenId a, TokenId b) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
           static_cast<std::uint32_t>(b);
  }
  void rebuild_indices();
  void encode_chunk(std::string_view chunk, std::vector<TokenId>& out) const;

  std::vector<std::pair<TokenId, TokenId>> merges_;
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, TokenId> token_to_id_;
  std::vector<TokenId> merge_out_;
  std::unordered_map<std::uint64_t, int> merge_rank_;
  TokenId eos_ = 0;
  TokenId unk_ = 0;
};

/// GPT-2 style reversible byte -> printable unicode mapping used for JSON.
std::string bytes_to_printable(std::string_view bytes);
std::string printable_to_bytes(std::string_view text);

}  // namespace protot
