#include "brain3d/langmodel.hpp"

#include <algorithm>
#include <cctype>
#include <set>

namespace brain3d {

namespace {

bool is_punct(char c) {
  switch (c) {
    case '.': case ',': case ';': case ':': case '!': case '?': case '(': case ')':
      return true;
    default:
      return false;
  }
}

}  // namespace

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char raw : text) {
    const auto c = static_cast<char>(std::tolower(static_cast<unsigned char>(raw)));
    if (std::isspace(static_cast<unsigned char>(c))) {
      flush();
    } else if (is_punct(c)) {
      flush();
      out.emplace_back(1, c);
    } else {
      cur.push_back(c);
    }
  }
  flush();
  return out;
}

std::string join_words(std::span<const std::string> words) {
  std::string out;
  for (const auto& w : words) {
    const bool attach = w.size() == 1 && is_punct(w[0]) && w[0] != '(';
    if (!out.empty() && !attach && out.back() != '(') out.push_back(' ');
    out += w;
  }
  return out;
}

Vocabulary::Vocabulary() {
  for (const char* s : {"<pad>", "<bos>", "<eos>", "<unk>"}) add(s);
}

void Vocabulary::add(std::string token) {
  if (ids_.count(token)) throw ConfigError("vocabulary: duplicate token " + token);
  ids_.emplace(token, static_cast<int>(tokens_.size()));
  tokens_.push_back(std::move(token));
}

Vocabulary Vocabulary::build(std::span<const std::string> corpus) {
  std::set<std::string> words;
  for (const auto& text : corpus) {
    for (auto& w : split_words(text)) words.insert(std::move(w));
  }
  Vocabulary v;
  for (const auto& w : words) {
    if (!v.ids_.count(w)) v.add(w);
  }
  return v;
}

Vocabulary Vocabulary::from_json(const nlohmann::json& j) {
  std::vector<std::pair<int, std::string>> items;
  for (auto it = j.begin(); it != j.end(); ++it) items.emplace_back(std::stoi(it.key()), it.value().get<std::string>());
  std::sort(items.begin(), items.end());
  Vocabulary v;
  v.tokens_.clear();
  v.ids_.clear();
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].first != static_cast<int>(i)) throw ConfigError("vocabulary: ids must be dense from 0");
    v.add(items[i].second);
  }
  if (v.size() < 4 || v.tokens_[kPad] != "<pad>" || v.tokens_[kBos] != "<bos>" || v.tokens_[kEos] != "<eos>" ||
      v.tokens_[kUnk] != "<unk>") {
    throw ConfigError("vocabulary: special tokens missing");
  }
  return v;
}

nlohmann::json Vocabulary::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t i = 0; i < tokens_.size(); ++i) j[std::to_string(i)] = tokens_[i];
  return j;
}

int Vocabulary::id(std::string_view word) const {
  auto it = ids_.find(std::string(word));
  return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) throw IndexError("vocabulary: id out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode(std::string_view text) const {
  std::vector<int> out;
  for (const auto& w : split_words(text)) out.push_back(id(w));
  return out;
}

std::string Vocabulary::decode(std::span<const int> ids) const {
  std::vector<std::string> words;
  for (int i : ids) {
    if (i == kPad || i == kBos || i == kEos) continue;
    words.push_back(token(i));
  }
  return join_words(words);
}

TokenSequence tokenize(const Vocabulary& vocab, std::string_view text, TokenRole role) {
  TokenSequence seq;
  seq.ids = vocab.encode(text);
  seq.roles.assign(seq.ids.size(), role);
  return seq;
}

std::string detokenize(const Vocabulary& vocab, std::span<const int> ids) { return vocab.decode(ids); }

std::vector<int> report_ids(const Vocabulary& vocab, std::string_view report) {
  auto ids = vocab.encode(report);
  ids.push_back(Vocabulary::kEos);
  return ids;
}

std::vector<int> prompt_ids(const Vocabulary& vocab) { return vocab.encode(kCanonicalPrompt); }

void LmConfig::validate() const {
  if (vocab_size < 4) throw ConfigError("lm: vocabulary too small");
  if (width <= 0 || heads <= 0 || width % heads != 0) throw ConfigError("lm: width must be divisible by heads");
  if (layers < 0 || mlp_ratio <= 0 || max_positions <= 0) throw ConfigError("lm: invalid shape");
}

std::size_t LossMask::supervised() const {
  return static_cast<std::size_t>(std::count_if(labels.begin(), labels.end(), [](int y) { return y != kIgnoreIndex; }));
}

LossMask build_loss_mask(std::size_t visual, std::size_t prompt, std::span<const int> report) {
  LossMask m;
  m.labels.assign(visual + prompt + report.size(), kIgnoreIndex);
  if (report.empty()) return m;
  if (visual + prompt == 0) throw ShapeError("loss mask: no position precedes the first report token");
  const std::size_t first = visual + prompt - 1;
  for (std::size_t j = 0; j < report.size(); ++j) m.labels[first + j] = report[j];
  return m;
}

}  // namespace brain3d
