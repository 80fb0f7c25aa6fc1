#pragma once

#include <algorithm>
#include <cctype>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "roadclip/errors.hpp"

namespace roadclip {

/// Word-level tokenizer over the closed caption grammar.
///
/// The vocabulary is built programmatically from every word the caption
/// templates and the class-prompt template can emit, so it is finished and
/// enumerable.  Id 0 is the sequence-summary token prepended to every
/// sequence, id 1 the UNK sink for out-of-grammar words; the remaining ids
/// follow lexicographic order, which makes assignments stable across runs by
/// construction.

struct TokenSequence {
    std::vector<int> ids;  // ids[0] is always the summary token
};

class Tokenizer {
public:
    static constexpr int kSummaryId = 0;
    static constexpr int kUnkId = 1;

    explicit Tokenizer(const std::vector<std::string>& extra_words = {}) {
        std::vector<std::string> words = base_words();
        words.insert(words.end(), extra_words.begin(), extra_words.end());
        std::sort(words.begin(), words.end());
        words.erase(std::unique(words.begin(), words.end()), words.end());
        int next = 2;
        for (const auto& w : words) id_of_[w] = next++;
    }

    int vocab_size() const { return 2 + static_cast<int>(id_of_.size()); }

    /// Lowercase, split on whitespace, strip punctuation; summary token
    /// prepended; truncated to max_len tokens total.
    TokenSequence tokenize(std::string_view caption, int max_len) const {
        if (max_len < 1) throw ValidationError("tokenize: max_len must be at least 1");
        TokenSequence seq;
        seq.ids.push_back(kSummaryId);
        std::string word;
        auto flush = [&] {
            if (word.empty()) return;
            if (static_cast<int>(seq.ids.size()) < max_len) {
                auto it = id_of_.find(word);
                seq.ids.push_back(it == id_of_.end() ? kUnkId : it->second);
            }
            word.clear();
        };
        for (char ch : caption) {
            unsigned char c = static_cast<unsigned char>(ch);
            if (std::isalnum(c) || c == '.') {
                word.push_back(static_cast<char>(std::tolower(c)));
            } else {
                flush();
            }
        }
        flush();
        if (seq.ids.size() < 2) throw ValidationError("tokenize: caption has no words");
        return seq;
    }

    /// All known words with their ids, for inspection and tests.
    std::vector<std::pair<std::string, int>> entries() const {
        return {id_of_.begin(), id_of_.end()};
    }

private:
    static std::vector<std::string> base_words() {
        std::vector<std::string> w = {
            // template glue
            "a", "about", "across", "and", "at", "conditions", "in", "long",
            "meters", "of", "on", "road", "the",
            // class names
            "longitudinal", "transverse", "crack", "cracking", "alligator",
            "pothole", "patch", "repair", "edge", "centerline", "discoloration",
            "mixed", "damage", "irregular", "defect", "diameter",
            // severities, positions, environments
            "hairline", "moderate", "severe",
            "center", "shoulder",
            "bright", "wet", "foggy", "dark",
            // prompt template
            "photo",
        };
        // dimension words: half-meter steps, integers printed bare
        for (int half = 1; half <= 12; ++half) {
            double m = half * 0.5;
            w.push_back(format_meters(m));
        }
        return w;
    }

public:
    /// "2" for whole meters, "1.5" otherwise; shared with the caption grammar.
    static std::string format_meters(double m) {
        long long whole = static_cast<long long>(m + 0.25);
        if (std::abs(m - static_cast<double>(whole)) < 0.25) return std::to_string(whole);
        return std::to_string(whole) + ".5";
    }

private:
    std::map<std::string, int> id_of_;
};

}  // namespace roadclip
