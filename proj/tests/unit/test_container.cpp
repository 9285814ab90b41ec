#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "helpers.hpp"
#include "maskvid/container.hpp"
#include "maskvid/error.hpp"

using namespace maskvid;

namespace {

GeneratorConfig tiny() {
    GeneratorConfig c;
    c.height = c.width = 16;
    c.frames = 3;
    c.max_objects = 2;
    c.min_radius = 1;
    c.max_radius = 2;
    return c;
}

}  // namespace

TEST(Container, SampleRoundTrip) {
    testutil::TempDir dir("container");
    const auto g = generate_scene(5, tiny());
    SampleFile f;
    f.video = g.video;
    f.mask = g.mask;
    f.scene = g.scene;
    f.config_hash = "abc123";
    save_sample(dir.file("a.mvs"), f);
    const SampleFile r = load_sample(dir.file("a.mvs"));
    ASSERT_TRUE(r.video && r.mask && r.scene);
    // Video payload is float32; synthetic colors are exactly representable.
    EXPECT_EQ(r.video->data, g.video.data);
    EXPECT_EQ(*r.mask, g.mask);
    EXPECT_EQ(*r.scene, g.scene);
    EXPECT_EQ(r.palette, f.palette);
    EXPECT_EQ(r.config_hash, "abc123");
}

TEST(Container, OptionalPayloadsStayAbsent) {
    testutil::TempDir dir("container");
    SampleFile f;
    f.mask = MaskTrajectory(2, 4, 4, 1);
    save_sample(dir.file("m.mvs"), f);
    const SampleFile r = load_sample(dir.file("m.mvs"));
    EXPECT_FALSE(r.video);
    EXPECT_FALSE(r.scene);
    EXPECT_EQ(*r.mask, *f.mask);
}

TEST(Container, CorruptFilesAreRejected) {
    testutil::TempDir dir("container");
    SampleFile f;
    f.mask = MaskTrajectory(2, 4, 4, 1);
    save_sample(dir.file("m.mvs"), f);
    std::ifstream in(dir.file("m.mvs"), std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    std::string bad_magic = bytes;
    bad_magic[0] = 'X';
    std::ofstream(dir.file("magic.mvs"), std::ios::binary) << bad_magic;
    EXPECT_THROW(load_sample(dir.file("magic.mvs")), FormatError);

    std::string bad_version = bytes;
    bad_version[8] = static_cast<char>(kSampleVersion + 1);
    std::ofstream(dir.file("version.mvs"), std::ios::binary) << bad_version;
    EXPECT_THROW(load_sample(dir.file("version.mvs")), FormatError);

    std::ofstream(dir.file("short.mvs"), std::ios::binary) << bytes.substr(0, bytes.size() - 3);
    EXPECT_THROW(load_sample(dir.file("short.mvs")), FormatError);

    EXPECT_THROW(load_sample(dir.file("missing.mvs")), Error);
}

TEST(Container, DatasetSplitsAndSidecars) {
    testutil::TempDir dir("dataset");
    const auto manifest = write_dataset(dir.path().string(), 8, 100, tiny(), 0.25);
    ASSERT_EQ(manifest.samples.size(), 8u);
    EXPECT_EQ(manifest.samples[0].seed, 100u);
    const auto train = load_dataset(dir.path().string(), "train");
    const auto test = load_dataset(dir.path().string(), "test");
    EXPECT_EQ(train.size(), 6u);
    EXPECT_EQ(test.size(), 2u);
    EXPECT_EQ(load_dataset(dir.path().string()).size(), 8u);
    for (const auto& s : test) {
        ASSERT_TRUE(s.prompts);
        ASSERT_TRUE(s.file.scene);
        EXPECT_EQ(s.prompts->local_prompts.size(), s.file.scene->objects.size());
    }
    // Regeneration from the manifest seed reproduces the stored sample.
    const auto again = generate_scene(manifest.samples[7].seed, read_manifest(dir.path().string()).generator);
    EXPECT_EQ(*test.back().file.mask, again.mask);
}

TEST(Container, MissingManifestThrows) {
    testutil::TempDir dir("dataset");
    EXPECT_THROW(load_dataset(dir.path().string()), Error);
}
