#include "protot/tokenizer.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <queue>
#include <sstream>
#include <unordered_set>

namespace protot {

namespace {

enum class CharClass { kLetter, kDigit, kPunct, kSpace };

CharClass classify(unsigned char c) {
  if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f')
    return CharClass::kSpace;
  if (c >= '0' && c <= '9') return CharClass::kDigit;
  if ((c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c == '\'' || c >= 0x80)
    return CharClass::kLetter;
  return CharClass::kPunct;
}

struct ByteMap {
  std::array<std::uint32_t, 256> to_cp{};
  std::unordered_map<std::uint32_t, unsigned char> from_cp;

  ByteMap() {
    std::vector<bool> direct(256, false);
    for (int b = '!'; b <= '~'; ++b) direct[b] = true;
    for (int b = 0xA1; b <= 0xAC; ++b) direct[b] = true;
    for (int b = 0xAE; b <= 0xFF; ++b) direct[b] = true;
    std::uint32_t next = 256;
    for (int b = 0; b < 256; ++b) {
      to_cp[b] = direct[b] ? static_cast<std::uint32_t>(b) : next++;
      from_cp[to_cp[b]] = static_cast<unsigned char>(b);
    }
  }
};

const ByteMap& byte_map() {
  static const ByteMap m;
  return m;
}

void append_utf8(std::uint32_t cp, std::string& out) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

struct HeapEntry {
  std::int64_t count;
  std::uint64_t key;
};

}  // namespace

std::string bytes_to_printable(std::string_view bytes) {
  const auto& m = byte_map();
  std::string out;
  out.reserve(bytes.size() * 2);
  for (unsigned char c : bytes) append_utf8(m.to_cp[c], out);
  return out;
}

std::string printable_to_bytes(std::string_view text) {
  const auto& m = byte_map();
  std::string out;
  std::size_t i = 0;
  while (i < text.size()) {
    auto c = static_cast<unsigned char>(text[i]);
    std::uint32_t cp = 0;
    int len = 1;
    if (c < 0x80) {
      cp = c;
    } else if ((c & 0xE0) == 0xC0 && i + 1 < text.size()) {
      cp = ((c & 0x1F) << 6) | (static_cast<unsigned char>(text[i + 1]) & 0x3F);
      len = 2;
    } else if ((c & 0xF0) == 0xE0 && i + 2 < text.size()) {
      cp = ((c & 0x0F) << 12) | ((static_cast<unsigned char>(text[i + 1]) & 0x3F) << 6) |
           (static_cast<unsigned char>(text[i + 2]) & 0x3F);
      len = 3;
    } else {
      throw ConfigError("vocabulary token is not valid printable UTF-8");
    }
    auto it = m.from_cp.find(cp);
    if (it == m.from_cp.end()) throw ConfigError("vocabulary token contains an unmapped code point");
    out.push_back(static_cast<char>(it->second));
    i += static_cast<std::size_t>(len);
  }
  return out;
}

std::vector<std::string_view> BpeVocab::pretokenize(std::string_view text) {
  std::vector<std::string_view> chunks;
  std::size_t start = 0;
  std::size_t i = 0;
  while (i < text.size()) {
    CharClass cls = classify(static_cast<unsigned char>(text[i]));
    if (cls == CharClass::kSpace) {
      chunks.push_back(text.substr(start, i + 1 - start));
      start = ++i;
      continue;
    }
    if (i > start && classify(static_cast<unsigned char>(text[i - 1])) != cls) {
      chunks.push_back(text.substr(start, i - start));
      start = i;
    }
    ++i;
  }
  if (start < text.size()) chunks.push_back(text.substr(start));
  return chunks;
}

BpeVocab BpeVocab::train(std::span<const std::string> corpus, int target_vocab) {
  if (corpus.empty()) throw ConfigError("train_bpe: corpus is empty");
  if (target_vocab < kMinVocab)
    throw ConfigError("train_bpe: target_vocab " + std::to_string(target_vocab) +
                      " is below the " + std::to_string(kMinVocab) + " base symbols");

  BpeVocab vocab;
  vocab.id_to_token_.reserve(static_cast<std::size_t>(target_vocab));
  for (int b = 0; b < kByteSymbols; ++b) vocab.id_to_token_.emplace_back(1, static_cast<char>(b));

  std::unordered_map<std::string_view, std::int64_t> chunk_counts;
  for (const auto& doc : corpus)
    for (auto chunk : pretokenize(doc)) ++chunk_counts[chunk];

  struct Word {
    std::vector<TokenId> symbols;
    std::int64_t count;
  };
  std::vector<std::pair<std::string_view, std::int64_t>> sorted_chunks(chunk_counts.begin(),
                                                                         chunk_counts.end());
  std::sort(sorted_chunks.begin(), sorted_chunks.end());
  std::vector<Word> words;
  words.reserve(sorted_chunks.size());
  for (const auto& [chunk, count] : sorted_chunks) {
    Word w{{}, count};
    for (unsigned char c : chunk) w.symbols.push_back(c);
    words.push_back(std::move(w));
  }

  std::unordered_map<std::uint64_t, std::int64_t> pair_counts;
  std::unordered_map<std::uint64_t, std::vector<std::size_t>> where;
  for (std::size_t wi = 0; wi < words.size(); ++wi) {
    const auto& s = words[wi].symbols;
    for (std::size_t i = 0; i + 1 < s.size(); ++i) {
      auto key = pair_key(s[i], s[i + 1]);
      pair_counts[key] += words[wi].count;
      where[key].push_back(wi);
    }
  }

  const auto& tokens = vocab.id_to_token_;
  auto worse = [&tokens](const HeapEntry& x, const HeapEntry& y) {
    if (x.count != y.count) return x.count < y.count;
    const auto& xl = tokens[x.key >> 32];
    const auto& yl = tokens[y.key >> 32];
    if (xl != yl) return xl > yl;
    return tokens[x.key & 0xffffffffULL] > tokens[y.key & 0xffffffffULL];
  };
  std::priority_queue<HeapEntry, std::vector<HeapEntry>, decltype(worse)> heap(worse);
  for (const auto& [key, count] : pair_counts) heap.push({count, key});

  for (int b = 0; b < kByteSymbols; ++b) vocab.token_to_id_.emplace(vocab.id_to_token_[b], b);
  const auto merged_target = static_cast<std::size_t>(target_vocab - kSpecials);
  while (vocab.id_to_token_.size() < merged_target && !heap.empty()) {
    HeapEntry top = heap.top();
    heap.pop();
    auto it = pair_counts.find(top.key);
    if (it == pair_counts.end() || it->second != top.count || top.count <= 0) continue;

    const auto left = static_cast<TokenId>(top.key >> 32);
    const auto right = static_cast<TokenId>(top.key & 0xffffffffULL);
    // Distinct merge paths can spell the same string; they share one id.
    std::string merged_text = vocab.id_to_token_[left] + vocab.id_to_token_[right];
    auto existing = vocab.token_to_id_.find(merged_text);
    TokenId merged;
    if (existing != vocab.token_to_id_.end()) {
      merged = existing->second;
    } else {
      merged = static_cast<TokenId>(vocab.id_to_token_.size());
      vocab.id_to_token_.push_back(merged_text);
      vocab.token_to_id_.emplace(std::move(merged_text), merged);
    }
    vocab.merges_.emplace_back(left, right);
    vocab.merge_out_.push_back(merged);

    std::unordered_set<std::uint64_t> touched;
    std::vector<std::size_t> affected = std::move(where[top.key]);
    where.erase(top.key);
    std::sort(affected.begin(), affected.end());
    affected.erase(std::unique(affected.begin(), affected.end()), affected.end());
    for (std::size_t wi : affected) {
      auto& w = words[wi];
      auto& s = w.symbols;
      bool present = false;
      for (std::size_t i = 0; i + 1 < s.size(); ++i)
        if (s[i] == left && s[i + 1] == right) present = true;
      if (!present) continue;
      for (std::size_t i = 0; i + 1 < s.size(); ++i) {
        auto key = pair_key(s[i], s[i + 1]);
        pair_counts[key] -= w.count;
        touched.insert(key);
      }
      std::vector<TokenId> next;
      next.reserve(s.size());
      for (std::size_t i = 0; i < s.size(); ++i) {
        if (i + 1 < s.size() && s[i] == left && s[i + 1] == right) {
          next.push_back(merged);
          ++i;
        } else {
          next.push_back(s[i]);
        }
      }
      s = std::move(next);
      for (std::size_t i = 0; i + 1 < s.size(); ++i) {
        auto key = pair_key(s[i], s[i + 1]);
        pair_counts[key] += w.count;
        touched.insert(key);
        if (s[i] == merged || s[i + 1] == merged) where[key].push_back(wi);
      }
    }
    for (auto key : touched) {
      auto pc = pair_counts.find(key);
      if (pc == pair_counts.end()) continue;
      if (pc->second <= 0) {
        pair_counts.erase(pc);
        continue;
      }
      heap.push({pc->second, key});
    }
  }

  vocab.eos_ = static_cast<TokenId>(vocab.id_to_token_.size());
  vocab.id_to_token_.emplace_back(kEosText);
  vocab.unk_ = static_cast<TokenId>(vocab.id_to_token_.size());
  vocab.id_to_token_.emplace_back(kUnkText);
  vocab.rebuild_indices();
  return vocab;
}

void BpeVocab::rebuild_indices() {
  token_to_id_.clear();
  merge_rank_.clear();
  for (std::size_t i = 0; i < id_to_token_.size(); ++i)
    token_to_id_.emplace(id_to_token_[i], static_cast<TokenId>(i));
  for (std::size_t r = 0; r < merges_.size(); ++r)
    merge_rank_.emplace(pair_key(merges_[r].first, merges_[r].second), static_cast<int>(r));
}

const std::string& BpeVocab::token_bytes(TokenId id) const {
  if (id < 0 || id >= size())
    throw DomainError("token id " + std::to_string(id) + " out of range [0, " +
                      std::to_string(size()) + ")");
  return id_to_token_[static_cast<std::size_t>(id)];
}

std::optional<TokenId> BpeVocab::find(std::string_view bytes) const {
  auto it = token_to_id_.find(std::string(bytes));
  if (it == token_to_id_.end()) return std::nullopt;
  return it->second;
}

void BpeVocab::encode_chunk(std::string_view chunk, std::vector<TokenId>& out) const {
  std::vector<TokenId> s(chunk.begin(), chunk.end());
  for (auto& id : s) id = static_cast<unsigned char>(id);
  // Repeatedly apply the earliest-learned merge present in the chunk.
  while (s.size() > 1) {
    int best = -1;
    for (std::size_t i = 0; i + 1 < s.size(); ++i) {
      auto it = merge_rank_.find(pair_key(s[i], s[i + 1]));
      if (it != merge_rank_.end() && (best < 0 || it->second < best)) best = it->second;
    }
    if (best < 0) break;
    const auto& [left, right] = merges_[static_cast<std::size_t>(best)];
    const TokenId merged = merge_out_[static_cast<std::size_t>(best)];
    std::size_t w = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i + 1 < s.size() && s[i] == left && s[i + 1] == right) {
        s[w++] = merged;
        ++i;
      } else {
        s[w++] = s[i];
      }
    }
    s.resize(w);
  }
  out.insert(out.end(), s.begin(), s.end());
}

std::vector<TokenId> BpeVocab::encode(std::string_view text) const {
  std::vector<TokenId> ids;
  ids.reserve(text.size() / 3 + 1);
  while (!text.empty()) {
    std::size_t cut = text.size();
    TokenId special = -1;
    for (auto [marker, id] : {std::pair{kEosText, eos_}, std::pair{kUnkText, unk_}}) {
      auto pos = text.find(marker);
      if (pos != std::string_view::npos && pos < cut) {
        cut = pos;
        special = id;
      }
    }
    for (auto chunk : pretokenize(text.substr(0, cut))) encode_chunk(chunk, ids);
    if (special < 0) break;
    ids.push_back(special);
    text.remove_prefix(cut + (special == eos_ ? kEosText.size() : kUnkText.size()));
  }
  return ids;
}

std::string BpeVocab::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) out += token_bytes(id);
  return out;
}

nlohmann::json BpeVocab::to_json() const {
  nlohmann::json merges = nlohmann::json::array();
  for (const auto& [a, b] : merges_)
    merges.push_back({bytes_to_printable(id_to_token_[a]), bytes_to_printable(id_to_token_[b])});
  nlohmann::json tokens = nlohmann::json::object();
  for (std::size_t i = 0; i < id_to_token_.size(); ++i) {
    const bool special = static_cast<TokenId>(i) == eos_ || static_cast<TokenId>(i) == unk_;
    tokens[special ? id_to_token_[i] : bytes_to_printable(id_to_token_[i])] = i;
  }
  return {{"merges", merges}, {"vocab", tokens}, {"special", {{"eos", eos_}, {"unk", unk_}}}};
}

BpeVocab BpeVocab::from_json(const nlohmann::json& j) {
  BpeVocab vocab;
  try {
    vocab.eos_ = j.at("special").at("eos").get<TokenId>();
    vocab.unk_ = j.at("special").at("unk").get<TokenId>();
    const auto& tokens = j.at("vocab");
    vocab.id_to_token_.assign(tokens.size(), std::string());
    std::vector<bool> seen(tokens.size(), false);
    for (const auto& [text, id_json] : tokens.items()) {
      auto id = id_json.get<std::int64_t>();
      if (id < 0 || id >= static_cast<std::int64_t>(tokens.size()) || seen[id])
        throw ConfigError("vocabulary ids are not a permutation of [0, size)");
      seen[id] = true;
      const bool special = id == vocab.eos_ || id == vocab.unk_;
      vocab.id_to_token_[id] = special ? text : printable_to_bytes(text);
    }
    vocab.rebuild_indices();
    for (const auto& m : j.at("merges")) {
      auto left = vocab.find(printable_to_bytes(m.at(0).get<std::string>()));
      auto right = vocab.find(printable_to_bytes(m.at(1).get<std::string>()));
      if (!left || !right) throw ConfigError("merge rule references an unknown token");
      auto out = vocab.find(vocab.id_to_token_[*left] + vocab.id_to_token_[*right]);
      if (!out) throw ConfigError("merge rule output is missing from the vocabulary");
      vocab.merges_.emplace_back(*left, *right);
      vocab.merge_out_.push_back(*out);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed vocabulary JSON: ") + e.what());
  }
  for (int b = 0; b < kByteSymbols && b < vocab.size(); ++b)
    if (vocab.id_to_token_[b] != std::string(1, static_cast<char>(b)))
      throw ConfigError("vocabulary ids 0..255 must be the raw bytes");
  vocab.rebuild_indices();
  return vocab;
}

void BpeVocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write vocabulary file " + path.string());
  out << to_json().dump() << '\n';
  if (!out) throw IoError("failed writing vocabulary file " + path.string());
}

BpeVocab BpeVocab::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read vocabulary file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("vocabulary file " + path.string() + " is not JSON: " + e.what());
  }
  return from_json(j);
}

std::uint64_t BpeVocab::hash() const { return fnv1a(to_json().dump()); }

}  // namespace protot
