#pragma once

// Closed vocabulary for the synthetic caption language, plus the token
// sequence type shared by the text encoder, the caption generator, and the
// prompt composer.
//
// Id layout (fixed, also the embedding-table row index for all but the
// pseudo token):
//   0        PAD
//   1        BOS
//   2        EOS
//   3..9     structural words: a of in photo is and ,
//   10..29   object nouns        (20)
//   30..34   domain words        (5)
//   35..42   attribute words     (8)
//   43..48   scene words         (6)
//   49       [*]  pseudo-token placeholder (no embedding row; its vector is
//            injected per query)
//
// The embedding table therefore has size()-1 rows.  PAD positions are never
// looked up: they embed as structural zero rows.

#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "p2w/errors.hpp"

namespace p2w {

// A tokenized prompt or caption: BOS ... EOS, no padding.  Positions holding
// the pseudo id take their vectors either from `pseudo_payload` (a plain
// numeric row, for replay/serialization) or from a live override passed to
// the encoder (for gradient flow into the mapper).
struct TokenSequence {
    std::vector<int> ids;
    // One row per pseudo occurrence, in sequence order.  Stored as double so
    // float payloads round-trip exactly.
    std::vector<std::vector<double>> pseudo_payloads;

    std::size_t length() const { return ids.size(); }
};

class Vocabulary {
  public:
    static constexpr int pad_id = 0;
    static constexpr int bos_id = 1;
    static constexpr int eos_id = 2;

    Vocabulary() {
        add_word("<pad>");
        add_word("<bos>");
        add_word("<eos>");
        for (const char* w : {"a", "of", "in", "photo", "is", "and", ","}) add_word(w);
        objects_ = {"car",   "cat",   "dog",   "house", "tree",  "boat",  "bird",
                    "fish",  "horse", "chair", "table", "plane", "train", "flower",
                    "clock", "shoe",  "cup",   "phone", "book",  "lamp"};
        domains_ = {"real", "cartoon", "origami", "toy", "sculpture"};
        attributes_ = {"red", "blue", "green", "yellow", "wooden", "metal", "striped", "shiny"};
        scenes_ = {"park", "beach", "kitchen", "street", "forest", "office"};
        for (const auto& w : objects_) add_word(w);
        for (const auto& w : domains_) add_word(w);
        for (const auto& w : attributes_) add_word(w);
        for (const auto& w : scenes_) add_word(w);
        add_word("[*]");
    }

    int size() const { return static_cast<int>(words_.size()); }
    int pseudo_id() const { return size() - 1; }
    // Embedding rows cover every id except the pseudo placeholder.
    int table_rows() const { return size() - 1; }

    int id(const std::string& word) const {
        auto it = index_.find(word);
        if (it == index_.end()) throw UnknownToken("'" + word + "' is not in the vocabulary");
        return it->second;
    }
    bool contains(const std::string& word) const { return index_.count(word) != 0; }

    const std::string& word(int id) const {
        if (id < 0 || id >= size())
            throw ContractViolation("token id " + std::to_string(id) + " out of range");
        return words_[id];
    }

    const std::vector<std::string>& objects() const { return objects_; }
    const std::vector<std::string>& domains() const { return domains_; }
    const std::vector<std::string>& attributes() const { return attributes_; }
    const std::vector<std::string>& scenes() const { return scenes_; }

    int object_id(std::size_t i) const { return id(objects_.at(i)); }
    int domain_id(std::size_t i) const { return id(domains_.at(i)); }
    int attribute_id(std::size_t i) const { return id(attributes_.at(i)); }
    int scene_id(std::size_t i) const { return id(scenes_.at(i)); }

    // Wrap plain words in BOS/EOS.  Words must already be vocabulary items
    // ("," included); no pseudo payloads are attached here.
    TokenSequence sequence_from_words(const std::vector<std::string>& words) const {
        TokenSequence seq;
        seq.ids.reserve(words.size() + 2);
        seq.ids.push_back(bos_id);
        for (const auto& w : words) seq.ids.push_back(id(w));
        seq.ids.push_back(eos_id);
        return seq;
    }

    // Whitespace tokenizer for human-entered text.  A trailing comma sticks
    // to its word in written text, so it is split into its own token.
    std::vector<std::string> split(const std::string& text) const {
        std::vector<std::string> out;
        std::string cur;
        auto flush = [&] {
            if (cur.empty()) return;
            if (cur.size() > 1 && cur.back() == ',') {
                out.push_back(cur.substr(0, cur.size() - 1));
                out.push_back(",");
            } else {
                out.push_back(cur);
            }
            cur.clear();
        };
        for (char ch : text) {
            if (ch == ' ' || ch == '\t' || ch == '\n')
                flush();
            else
                cur.push_back(ch);
        }
        flush();
        return out;
    }

    TokenSequence tokenize(const std::string& text) const {
        return sequence_from_words(split(text));
    }

  private:
    void add_word(const std::string& w) {
        index_.emplace(w, static_cast<int>(words_.size()));
        words_.push_back(w);
    }

    std::vector<std::string> words_;
    std::unordered_map<std::string, int> index_;
    std::vector<std::string> objects_, domains_, attributes_, scenes_;
};

inline std::size_t count_pseudo_slots(const Vocabulary& vocab, const TokenSequence& seq) {
    std::size_t n = 0;
    for (int id : seq.ids)
        if (id == vocab.pseudo_id()) ++n;
    return n;
}

} // namespace p2w
