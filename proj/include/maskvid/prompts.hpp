#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "maskvid/synthset.hpp"

namespace maskvid {

/// Object-specific prompt bound to a mask label.
struct LocalPrompt {
    int object_id = 1;
    std::string text;

    bool operator==(const LocalPrompt&) const = default;
};

/// Global caption, motion-only caption and per-object prompts (ascending object id).
struct PromptBundle {
    std::string global_caption;
    std::string motion_prompt;
    std::vector<LocalPrompt> local_prompts;

    bool operator==(const PromptBundle&) const = default;
};

PromptBundle render_prompts(const SceneSpec& scene);

/// Words describing colors and placement; motion prompts never contain them.
const std::vector<std::string>& appearance_lexicon();

struct ObjectPrompt {
    std::string name;
    std::string description;

    bool operator==(const ObjectPrompt&) const = default;
};

/// Parses an `Answer: [[name: description] [name: description]]` block.
/// Throws ParseError carrying the byte offset of the first violation.
std::vector<ObjectPrompt> parse_object_prompts(std::string_view text);
/// Writes pairs in the same answer format; parse_object_prompts inverts it.
std::string format_object_prompts(const std::vector<ObjectPrompt>& pairs);

/// Lowercases and splits punctuation into standalone words separated by single spaces.
std::string normalize_text(std::string_view text);

class Vocabulary {
public:
    static constexpr int kPad = 0;
    static constexpr int kUnk = 1;
    static constexpr int kBos = 2;

    /// Builds a vocabulary from words; specials are prepended.
    explicit Vocabulary(const std::vector<std::string>& words);

    int id(const std::string& word) const;
    const std::string& word(int id) const { return words_.at(static_cast<std::size_t>(id)); }
    int size() const { return static_cast<int>(words_.size()); }
    /// FNV-1a over the ordered word list; stored in checkpoints.
    uint64_t hash() const { return hash_; }

private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, int> index_;
    uint64_t hash_ = 0;
};

/// The closed vocabulary covering every word the prompt templates can emit.
const Vocabulary& template_vocabulary();

/// Fixed-length token ids; valid[i] == 0 marks padding.
struct TokenizedText {
    std::vector<int> ids;
    std::vector<uint8_t> valid;

    int length() const { return static_cast<int>(ids.size()); }
    int valid_count() const;
    bool operator==(const TokenizedText&) const = default;
};

/// BOS followed by the normalized words, truncated or padded to `length`.
TokenizedText tokenize(std::string_view text, const Vocabulary& vocab, int length);
std::string detokenize(const TokenizedText& tokens, const Vocabulary& vocab);

void to_json(nlohmann::json& j, const PromptBundle& b);
void from_json(const nlohmann::json& j, PromptBundle& b);

/// Prompt-bundle sidecar file.
void save_prompt_bundle(const std::string& path, const PromptBundle& bundle);
PromptBundle load_prompt_bundle(const std::string& path);

/// Replaces local prompts with parsed answer pairs, bound to ids 1..n in order of appearance.
PromptBundle with_object_prompts(PromptBundle bundle, const std::vector<ObjectPrompt>& pairs);

}  // namespace maskvid
