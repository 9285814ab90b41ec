#include "maskvid/prompts.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

#include "maskvid/error.hpp"

namespace maskvid {

namespace {

std::string verb_for(const std::string& noun) {
    if (noun == "ball") return "rolls";
    if (noun == "kite") return "flies";
    if (noun == "box") return "slides";
    return "moves";
}

std::string direction_phrase(int vx, int vy) {
    const int sx = (vx > 0) - (vx < 0);
    const int sy = (vy > 0) - (vy < 0);
    if (sy == 0) return sx > 0 ? "to the right" : "to the left";
    if (sx == 0) return sy < 0 ? "upward" : "downward";
    const std::string vertical = sy < 0 ? "up" : "down";
    return vertical + (sx > 0 ? " and to the right" : " and to the left");
}

std::string speed_adverb(int vx, int vy) {
    const int speed = std::max(std::abs(vx), std::abs(vy));
    if (speed <= 1) return "";
    if (speed == 2) return "quickly ";
    return "rapidly ";
}

std::string motion_phrase(const ObjectSpec& o) {
    if (o.motion.kind == MotionKind::still) return "stays still";
    const std::string verb = o.motion.kind == MotionKind::bounce ? "bounces" : verb_for(o.noun);
    return verb + " " + speed_adverb(o.motion.vx, o.motion.vy) + direction_phrase(o.motion.vx, o.motion.vy);
}

std::string size_word(const ObjectSpec& o, const SceneSpec& s) {
    return o.size_px(s.cell) * 4 <= std::min(s.height, s.width) ? "small" : "large";
}

std::string position_phrase(const ObjectSpec& o, const SceneSpec& s) {
    const double half = (s.cell - 1) / 2.0;
    const double px = o.cx * s.cell + half;
    const double py = o.cy * s.cell + half;
    const char* vertical = py * 3 < s.height ? "top" : (py * 3 < 2 * s.height ? "middle" : "bottom");
    const char* horizontal = px * 3 < s.width ? "left" : (px * 3 < 2 * s.width ? "center" : "right");
    if (std::string(vertical) == "middle" && std::string(horizontal) == "center") return "at the center";
    return std::string("at the ") + vertical + " " + horizontal;
}

std::string noun_of(const ObjectSpec& o) { return o.noun.empty() ? shape_name(o.shape) : o.noun; }

std::string join_clauses(const std::vector<std::string>& clauses) {
    std::string out;
    for (std::size_t i = 0; i < clauses.size(); ++i) {
        if (i > 0) out += (i + 1 == clauses.size()) ? " , and " : " , ";
        out += clauses[i];
    }
    return out;
}

std::string_view trim(std::string_view s) {
    const auto is_space = [](char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; };
    while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
    while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
    return s;
}

std::size_t skip_space(std::string_view s, std::size_t i) {
    while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    return i;
}

}  // namespace

const std::vector<std::string>& appearance_lexicon() {
    static const std::vector<std::string> words = [] {
        std::vector<std::string> w{"small", "large", "top", "middle", "bottom", "center", "at", "background"};
        for (const auto& c : color_table()) w.push_back(c.name);
        return w;
    }();
    return words;
}

PromptBundle render_prompts(const SceneSpec& scene) {
    PromptBundle b;
    std::vector<ObjectSpec> objects = scene.objects;
    std::sort(objects.begin(), objects.end(),
              [](const ObjectSpec& a, const ObjectSpec& c) { return a.object_id < c.object_id; });

    std::vector<std::string> global, motion;
    const auto& colors = color_table();
    for (const auto& o : objects) {
        const std::string noun = noun_of(o);
        const std::string look = size_word(o, scene) + " " + colors.at(o.color).name + " " + noun;
        global.push_back("a " + look + " " + position_phrase(o, scene) + " " + motion_phrase(o));
        motion.push_back("the " + noun + " " + motion_phrase(o));
        b.local_prompts.push_back({o.object_id, "the " + look + " " + motion_phrase(o)});
    }
    b.global_caption = join_clauses(global) + " on a " + colors.at(scene.background).name + " background";
    b.motion_prompt = join_clauses(motion);
    return b;
}

std::vector<ObjectPrompt> parse_object_prompts(std::string_view text) {
    const std::size_t anchor = text.find("Answer:");
    if (anchor == std::string_view::npos) throw ParseError("missing 'Answer:'", 0);
    std::size_t i = skip_space(text, anchor + 7);
    if (text.substr(i, 2) != "[[") throw ParseError("expected '[['", i);
    i += 2;
    if (skip_space(text, i) < text.size() && text[skip_space(text, i)] == ']') {
        throw ParseError("empty answer block", i);
    }

    std::vector<ObjectPrompt> pairs;
    while (true) {
        const std::size_t name_start = i;
        while (i < text.size() && text[i] != ':' && text[i] != ']' && text[i] != '[') ++i;
        if (i >= text.size()) throw ParseError("unbalanced brackets", i);
        if (text[i] != ':') throw ParseError("missing ':' in pair", i);
        const std::string_view name = trim(text.substr(name_start, i - name_start));
        if (name.empty()) throw ParseError("empty object name", name_start);
        ++i;
        const std::size_t desc_start = i;
        while (i < text.size() && text[i] != ']') ++i;
        if (i >= text.size()) throw ParseError("unbalanced brackets", i);
        const std::string_view desc = trim(text.substr(desc_start, i - desc_start));
        if (desc.empty()) throw ParseError("empty description", desc_start);
        pairs.push_back({std::string(name), std::string(desc)});
        ++i;  // consume ']'
        if (i < text.size() && text[i] == ']') break;
        i = skip_space(text, i);
        if (i >= text.size()) throw ParseError("unbalanced brackets", i);
        if (text[i] != '[') throw ParseError("expected '[' or ']'", i);
        ++i;
    }
    return pairs;
}

std::string format_object_prompts(const std::vector<ObjectPrompt>& pairs) {
    std::string out = "Answer: [";
    for (const auto& p : pairs) {
        if (&p != &pairs.front()) out += " ";
        out += "[" + p.name + ": " + p.description + "]";
    }
    return out + "]";
}

std::string normalize_text(std::string_view text) {
    std::string spaced;
    spaced.reserve(text.size() * 2);
    for (char c : text) {
        const auto uc = static_cast<unsigned char>(c);
        if (c == ',' || c == '.' || c == ';' || c == ':' || c == '!' || c == '?') {
            spaced += ' ';
            spaced += c;
            spaced += ' ';
        } else if (std::isspace(uc)) {
            spaced += ' ';
        } else {
            spaced += static_cast<char>(std::tolower(uc));
        }
    }
    std::istringstream in(spaced);
    std::string word, out;
    while (in >> word) {
        if (!out.empty()) out += ' ';
        out += word;
    }
    return out;
}

Vocabulary::Vocabulary(const std::vector<std::string>& words) {
    words_ = {"<pad>", "<unk>", "<bos>"};
    for (const auto& w : words) {
        if (index_.count(w) == 0 && w != "<pad>" && w != "<unk>" && w != "<bos>") {
            index_.emplace(w, static_cast<int>(words_.size()));
            words_.push_back(w);
        }
    }
    index_["<pad>"] = kPad;
    index_["<unk>"] = kUnk;
    index_["<bos>"] = kBos;
    hash_ = 1469598103934665603ULL;
    for (const auto& w : words_) {
        for (char c : w + "\n") {
            hash_ ^= static_cast<unsigned char>(c);
            hash_ *= 1099511628211ULL;
        }
    }
}

int Vocabulary::id(const std::string& word) const {
    const auto it = index_.find(word);
    return it == index_.end() ? kUnk : it->second;
}

const Vocabulary& template_vocabulary() {
    static const Vocabulary vocab = [] {
        std::vector<std::string> words{"a",      "the",     "and",      ",",        ".",      "on",
                                       "stays",  "still",   "rolls",    "flies",    "slides", "moves",
                                       "bounces", "quickly", "rapidly",  "to",       "right",  "left",
                                       "upward", "downward", "up",      "down",     "circle", "ball",
                                       "square", "box",     "triangle", "kite"};
        for (const auto& w : appearance_lexicon()) words.push_back(w);
        return Vocabulary(words);
    }();
    return vocab;
}

int TokenizedText::valid_count() const {
    return static_cast<int>(std::count(valid.begin(), valid.end(), uint8_t{1}));
}

TokenizedText tokenize(std::string_view text, const Vocabulary& vocab, int length) {
    if (length < 1) throw ShapeError("token length must be positive");
    TokenizedText t;
    t.ids.assign(length, Vocabulary::kPad);
    t.valid.assign(length, 0);
    t.ids[0] = Vocabulary::kBos;
    t.valid[0] = 1;
    std::istringstream in(normalize_text(text));
    std::string word;
    for (int i = 1; i < length && (in >> word); ++i) {
        t.ids[i] = vocab.id(word);
        t.valid[i] = 1;
    }
    return t;
}

std::string detokenize(const TokenizedText& tokens, const Vocabulary& vocab) {
    std::string out;
    for (int i = 0; i < tokens.length(); ++i) {
        if (!tokens.valid[i] || tokens.ids[i] == Vocabulary::kBos) continue;
        if (!out.empty()) out += ' ';
        out += vocab.word(tokens.ids[i]);
    }
    return out;
}

void to_json(nlohmann::json& j, const PromptBundle& b) {
    nlohmann::json locals = nlohmann::json::array();
    for (const auto& l : b.local_prompts) locals.push_back({{"object_id", l.object_id}, {"text", l.text}});
    j = {{"global_caption", b.global_caption}, {"motion_prompt", b.motion_prompt}, {"local_prompts", locals}};
}

void from_json(const nlohmann::json& j, PromptBundle& b) {
    b.global_caption = j.at("global_caption").get<std::string>();
    b.motion_prompt = j.at("motion_prompt").get<std::string>();
    b.local_prompts.clear();
    for (const auto& l : j.at("local_prompts")) {
        b.local_prompts.push_back({l.at("object_id").get<int>(), l.at("text").get<std::string>()});
    }
    std::sort(b.local_prompts.begin(), b.local_prompts.end(),
              [](const LocalPrompt& x, const LocalPrompt& y) { return x.object_id < y.object_id; });
}

void save_prompt_bundle(const std::string& path, const PromptBundle& bundle) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write " + path);
    out << nlohmann::json(bundle).dump(2) << "\n";
}

PromptBundle load_prompt_bundle(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot read " + path);
    try {
        return nlohmann::json::parse(in).get<PromptBundle>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ": " + e.what());
    }
}

PromptBundle with_object_prompts(PromptBundle bundle, const std::vector<ObjectPrompt>& pairs) {
    bundle.local_prompts.clear();
    int id = 1;
    for (const auto& p : pairs) bundle.local_prompts.push_back({id++, normalize_text(p.description)});
    return bundle;
}

}  // namespace maskvid
