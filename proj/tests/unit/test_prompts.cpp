#include <gtest/gtest.h>

#include <random>

#include "helpers.hpp"
#include "maskvid/error.hpp"
#include "maskvid/prompts.hpp"

using namespace maskvid;

namespace {

SceneSpec two_object_scene() {
    SceneSpec s;
    s.height = s.width = 48;
    ObjectSpec a;
    a.object_id = 1;
    a.shape = Shape::circle;
    a.color = 2;
    a.cx = 8;
    a.cy = 8;
    a.noun = "ball";
    a.motion = {MotionKind::translate, 1, 0};
    ObjectSpec b;
    b.object_id = 2;
    b.shape = Shape::square;
    b.color = 3;
    b.cx = 30;
    b.cy = 30;
    s.objects = {a, b};
    return s;
}

}  // namespace

TEST(Prompts, MotionPromptHasNoAppearanceWords) {
    GeneratorConfig c;
    for (uint64_t seed = 0; seed < 50; ++seed) {
        const PromptBundle b = render_prompts(generate_scene(seed, c).scene);
        const std::string words = " " + normalize_text(b.motion_prompt) + " ";
        for (const auto& w : appearance_lexicon()) EXPECT_EQ(words.find(" " + w + " "), std::string::npos) << w;
    }
}

TEST(Prompts, LocalPromptsFollowObjectIds) {
    const PromptBundle b = render_prompts(two_object_scene());
    ASSERT_EQ(b.local_prompts.size(), 2u);
    EXPECT_EQ(b.local_prompts[0].object_id, 1);
    EXPECT_EQ(b.local_prompts[1].object_id, 2);
    EXPECT_NE(b.local_prompts[0].text.find("ball"), std::string::npos);
    EXPECT_NE(b.local_prompts[0].text.find("to the right"), std::string::npos);
    EXPECT_NE(b.local_prompts[1].text.find("stays still"), std::string::npos);
    EXPECT_NE(b.global_caption.find("background"), std::string::npos);
}

TEST(Prompts, EveryTemplateWordIsInTheVocabulary) {
    GeneratorConfig c;
    const Vocabulary& v = template_vocabulary();
    for (uint64_t seed = 0; seed < 100; ++seed) {
        const PromptBundle b = render_prompts(generate_scene(seed, c).scene);
        std::vector<std::string> texts{b.global_caption, b.motion_prompt};
        for (const auto& lp : b.local_prompts) texts.push_back(lp.text);
        for (const auto& t : texts) {
            const TokenizedText tok = tokenize(t, v, 64);
            for (std::size_t i = 0; i < tok.ids.size(); ++i)
                if (tok.valid[i]) {
                    EXPECT_NE(tok.ids[i], Vocabulary::kUnk) << t;
                }
        }
    }
}

TEST(Prompts, TokenizePadsTruncatesAndStartsWithBos) {
    const Vocabulary& v = template_vocabulary();
    const TokenizedText t = tokenize("the ball rolls", v, 8);
    ASSERT_EQ(t.length(), 8);
    EXPECT_EQ(t.ids[0], Vocabulary::kBos);
    EXPECT_EQ(t.valid_count(), 4);
    EXPECT_EQ(t.ids[7], Vocabulary::kPad);
    EXPECT_EQ(t.valid[7], 0);
    EXPECT_EQ(detokenize(t, v), "the ball rolls");
    EXPECT_EQ(tokenize("the ball rolls to the right", v, 3).valid_count(), 3);
    EXPECT_EQ(tokenize("", v, 4).valid_count(), 1);
    EXPECT_EQ(tokenize("zyzzyva", v, 4).ids[1], Vocabulary::kUnk);
}

TEST(Prompts, NormalizeSplitsPunctuation) {
    EXPECT_EQ(normalize_text("  The Ball,  rolls. "), "the ball , rolls .");
}

TEST(Prompts, VocabularyHashDependsOnOrder) {
    EXPECT_NE(Vocabulary({"a", "b"}).hash(), Vocabulary({"b", "a"}).hash());
    EXPECT_EQ(Vocabulary({"a", "b"}).hash(), Vocabulary({"a", "b"}).hash());
}

TEST(Prompts, ParserAcceptsWhitespaceVariants) {
    const auto pairs = parse_object_prompts("Answer:[[cat: sits.][dog :  runs  ]]");
    ASSERT_EQ(pairs.size(), 2u);
    EXPECT_EQ(pairs[0], (ObjectPrompt{"cat", "sits."}));
    EXPECT_EQ(pairs[1], (ObjectPrompt{"dog", "runs"}));
    // The description may contain colons; the name ends at the first one.
    EXPECT_EQ(parse_object_prompts("Answer: [[a: b: c]]")[0].description, "b: c");
}

TEST(Prompts, ParserReportsOffsets) {
    try {
        parse_object_prompts("Answer: [[cat sits]]");
        FAIL();
    } catch (const ParseError& e) {
        EXPECT_GT(e.offset(), 8u);
    }
    EXPECT_THROW(parse_object_prompts("Reply: [[a: b]]"), ParseError);
    EXPECT_THROW(parse_object_prompts("Answer: [[a: b]"), ParseError);
    EXPECT_THROW(parse_object_prompts("Answer: [[: b]]"), ParseError);
    EXPECT_THROW(parse_object_prompts("Answer: []"), ParseError);
}

TEST(Prompts, ParserIgnoresTextAroundTheAnswerBlock) {
    const auto pairs = parse_object_prompts("Reasoning first.\nAnswer: [[a: b]]\nDone.");
    ASSERT_EQ(pairs.size(), 1u);
    EXPECT_EQ(pairs[0], (ObjectPrompt{"a", "b"}));
}

TEST(Prompts, WithObjectPromptsBindsIdsInOrder) {
    PromptBundle b = render_prompts(two_object_scene());
    b = with_object_prompts(b, {{"x", "first"}, {"y", "second"}});
    ASSERT_EQ(b.local_prompts.size(), 2u);
    EXPECT_EQ(b.local_prompts[1], (LocalPrompt{2, "second"}));
}

TEST(Prompts, BundleFileRoundTrip) {
    testutil::TempDir dir("prompts");
    const PromptBundle b = render_prompts(two_object_scene());
    save_prompt_bundle(dir.file("p.json"), b);
    EXPECT_EQ(load_prompt_bundle(dir.file("p.json")), b);
}

TEST(Prompts, MotionPromptTemplates) {
    SceneSpec s;
    s.height = s.width = 48;
    ObjectSpec ball;
    ball.noun = "ball";
    ball.cx = ball.cy = 10;
    ball.motion = {MotionKind::translate, 1, 0};
    ObjectSpec kite = ball;
    kite.object_id = 2;
    kite.color = 3;
    kite.noun = "kite";
    kite.shape = Shape::triangle;
    kite.cx = 30;
    kite.motion = {MotionKind::translate, 0, -1};
    s.objects = {ball, kite};
    EXPECT_EQ(normalize_text(render_prompts(s).motion_prompt), "the ball rolls to the right , and the kite flies upward");

    SceneSpec still;
    ObjectSpec circle;
    circle.cx = circle.cy = 10;
    still.objects = {circle};
    EXPECT_EQ(normalize_text(render_prompts(still).motion_prompt), "the circle stays still");
}

TEST(Prompts, ParserKeepsPairOrder) {
    const auto pairs = parse_object_prompts("Answer: [[a: x] [b: y] [c: z]]");
    EXPECT_EQ(pairs, (std::vector<ObjectPrompt>{{"a", "x"}, {"b", "y"}, {"c", "z"}}));
}
