#pragma once

#include <algorithm>
#include <cctype>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "safe/encoders.hpp"

namespace safe {

/// A prompt with exactly one "{}" placeholder, or the sentinel NONE (bare label).
class PromptTemplate {
 public:
  static constexpr const char* kNone = "NONE";

  PromptTemplate() : PromptTemplate(kNone) {}
  explicit PromptTemplate(std::string text) : text_(std::move(text)) {
    if (is_none()) return;
    const auto first = text_.find("{}");
    if (first == std::string::npos || text_.find("{}", first + 2) != std::string::npos)
      throw ConfigError("prompt template '" + text_ + "' must contain exactly one {} placeholder (or be NONE)");
  }

  bool is_none() const { return text_ == kNone; }
  const std::string& text() const { return text_; }

  friend bool operator==(const PromptTemplate&, const PromptTemplate&) = default;

 private:
  std::string text_;
};

inline std::string render_prompt(const PromptTemplate& tpl, const std::string& label) {
  if (label.empty()) throw ContractError("render_prompt: empty label");
  if (tpl.is_none()) return label;
  std::string out = tpl.text();
  out.replace(out.find("{}"), 2, label);
  return out;
}

/// Lowercased, punctuation-stripped, whitespace-split words.
inline std::vector<std::string> prompt_words(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char ch : text) {
    if (std::isspace(ch)) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else if (!std::ispunct(ch)) {
      cur.push_back(static_cast<char>(std::tolower(ch)));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

/// Word-level vocabulary over a closed set of prompts. PAD = 0, UNK = 1,
/// remaining ids follow sorted word order.
class Vocabulary {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kUnk = 1;

  Vocabulary() = default;

  static Vocabulary build(std::span<const std::string> prompts) {
    std::set<std::string> words;
    for (const auto& p : prompts)
      for (auto& w : prompt_words(p)) words.insert(std::move(w));
    Vocabulary v;
    std::size_t next = 2;
    for (const auto& w : words) v.ids_.emplace(w, next++);
    return v;
  }

  std::size_t id(const std::string& word) const {
    auto it = ids_.find(word);
    return it == ids_.end() ? kUnk : it->second;
  }

  std::size_t size() const { return ids_.size() + 2; }

 private:
  std::map<std::string, std::size_t> ids_;
};

inline std::vector<std::size_t> tokenize(const std::string& text, const Vocabulary& vocab, std::size_t max_len) {
  if (max_len == 0) throw ContractError("tokenize: max_len must be at least 1");
  std::vector<std::size_t> ids(max_len, Vocabulary::kPad);
  const auto words = prompt_words(text);
  for (std::size_t i = 0; i < std::min(max_len, words.size()); ++i) ids[i] = vocab.id(words[i]);
  return ids;
}

inline std::vector<std::string> render_all(const PromptTemplate& tpl, std::span<const std::string> labels) {
  std::vector<std::string> out;
  for (const auto& l : labels) out.push_back(render_prompt(tpl, l));
  return out;
}

struct TextConfig {
  std::string prompt = "The action of the human is {}";
  std::size_t depth = 1;
  std::size_t max_len = 16;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 2;
  bool trainable = true;

  void validate(std::size_t dim) const {
    PromptTemplate{prompt};
    if (max_len == 0) throw ConfigError("text.max_len must be at least 1");
    if (heads == 0 || dim % heads != 0) throw ConfigError("text.heads must divide the model dim");
    if (mlp_ratio == 0) throw ConfigError("text.mlp_ratio must be positive");
  }
};

inline void add_text_params(ParamStore& store, ParamInit& init, std::size_t vocab_size, std::size_t dim,
                            const TextConfig& cfg) {
  store.add("text.embed", init.normal({vocab_size, dim}));
  store.add("text.pos", init.normal({cfg.max_len, dim}));
  for (std::size_t b = 0; b < cfg.depth; ++b)
    add_block_params(store, init, "text.block" + std::to_string(b), dim, dim * cfg.mlp_ratio);
  add_linear_params(store, init, "text.proj", dim, dim);
}

/// One pooled token per class: embed the prompt's words, run the text
/// blocks over the non-PAD prefix, mean-pool and project. Row i is class i.
inline TokenSequence encode_labels(ParamBinder& p, std::span<const std::string> labels, const PromptTemplate& tpl,
                                   const Vocabulary& vocab, const TextConfig& cfg, Activation act) {
  if (labels.size() < 2) throw ContractError("encode_labels: need at least 2 labels");
  std::set<std::string> seen;
  for (const auto& l : labels)
    if (!seen.insert(l).second) throw ContractError("encode_labels: duplicate label '" + l + "'");
  Var embed = p("text.embed");
  Var pos = p("text.pos");
  if (cfg.max_len > pos.rows()) throw ContractError("encode_labels: max_len exceeds positional table");
  std::vector<Var> rows;
  rows.reserve(labels.size());
  for (const auto& label : labels) {
    const auto ids = tokenize(render_prompt(tpl, label), vocab, cfg.max_len);
    const auto n = static_cast<std::size_t>(std::find(ids.begin(), ids.end(), Vocabulary::kPad) - ids.begin());
    if (n == 0) throw ContractError("encode_labels: prompt for '" + label + "' has no words");
    Var x = add(gather_rows(embed, std::span(ids).first(n)), slice_rows(pos, 0, n));
    for (std::size_t b = 0; b < cfg.depth; ++b) x = transformer_block(p, x, "text.block" + std::to_string(b), cfg.heads, act);
    rows.push_back(mean_rows(x));
  }
  return {linear(p, concat_rows(rows), "text.proj"), Modality::Text};
}

}  // namespace safe
