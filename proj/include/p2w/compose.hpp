#pragma once

// Query composition: renders a retrieval prompt that wraps the mapped image
// (the pseudo token) in task-specific text.
//
// Patterns are space-separated token lists with placeholders:
//   {pseudo}   the pseudo-token slot (exactly one required)
//   {domain}   the bound domain word
//   {objects}  bound object words, expanded with a comma grammar:
//                one object   ->  and o1
//                two or more  ->  , o1 , ... , and oN
//   {text}     bound free text, tokenized; if empty, the placeholder and an
//              immediately preceding "," disappear
// Every other pattern token must be a vocabulary word ("," included).

#include <string>
#include <vector>

#include "p2w/errors.hpp"
#include "p2w/synthworld.hpp"
#include "p2w/vocab.hpp"

namespace p2w {

struct TemplateBindings {
    std::string domain_word;
    std::vector<std::string> object_words;
    std::string text;
};

inline const char* default_pattern(char kind) {
    switch (kind) {
        case 'a': return "a {domain} of {pseudo}";
        case 'b': return "a photo of {pseudo} {objects}";
        case 'c': return "a photo of {pseudo} , {text}";
        default: throw ContractViolation("unknown task kind");
    }
}

inline TokenSequence render_pattern(const Vocabulary& vocab, const std::string& pattern,
                                    const TemplateBindings& bind,
                                    std::size_t context_len = 16) {
    std::vector<std::string> words;
    std::size_t pseudo_slots = 0;
    for (const auto& tok : vocab.split(pattern)) {
        if (tok == "{pseudo}" || tok == "[*]") {
            words.push_back("[*]");
            ++pseudo_slots;
        } else if (tok == "{domain}") {
            if (bind.domain_word.empty())
                throw ContractViolation("template uses {domain} but no domain is bound");
            words.push_back(bind.domain_word);
        } else if (tok == "{objects}") {
            if (bind.object_words.empty())
                throw ContractViolation("template uses {objects} but no objects are bound");
            if (bind.object_words.size() == 1) {
                words.push_back("and");
                words.push_back(bind.object_words[0]);
            } else {
                for (std::size_t i = 0; i < bind.object_words.size(); ++i) {
                    words.push_back(",");
                    if (i + 1 == bind.object_words.size()) words.push_back("and");
                    words.push_back(bind.object_words[i]);
                }
            }
        } else if (tok == "{text}") {
            const auto text_words = vocab.split(bind.text);
            if (text_words.empty()) {
                if (!words.empty() && words.back() == ",") words.pop_back();
            } else {
                words.insert(words.end(), text_words.begin(), text_words.end());
            }
        } else {
            vocab.id(tok); // throws UnknownToken for anything off-vocabulary
            words.push_back(tok);
        }
    }
    if (pseudo_slots != 1)
        throw ContractViolation("template must contain exactly one {pseudo} slot");

    TokenSequence seq = vocab.sequence_from_words(words);
    if (seq.length() > context_len)
        throw SequenceTooLong("composed prompt has " + std::to_string(seq.length()) +
                              " tokens; the encoder accepts " + std::to_string(context_len));
    return seq;
}

// Render the prompt for a task query.  `pattern_override` substitutes the
// task's default template when non-empty.
inline TokenSequence compose_query(const Vocabulary& vocab, char kind, const CirQuery& q,
                                   const std::string& pattern_override = "",
                                   std::size_t context_len = 16) {
    TemplateBindings bind;
    bind.domain_word = q.domain_word;
    bind.object_words = q.object_words;
    bind.text = q.attr_text;
    const std::string pattern =
        pattern_override.empty() ? default_pattern(kind) : pattern_override;
    return render_pattern(vocab, pattern, bind, context_len);
}

// Attach a concrete pseudo vector as the sequence's stored payload.
inline TokenSequence with_payload(TokenSequence seq, std::vector<double> pseudo_vec) {
    seq.pseudo_payloads = {std::move(pseudo_vec)};
    return seq;
}

} // namespace p2w
