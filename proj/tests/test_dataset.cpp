#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "reenact/dataset.hpp"

using namespace reenact;
namespace fs = std::filesystem;

namespace {

DatasetGenConfig tiny_config(uint64_t seed = 99) {
    DatasetGenConfig cfg;
    cfg.n_identities = 4;
    cfg.n_tracks = 3;
    cfg.n_clips = 3;
    cfg.clip_length = 5;
    cfg.seed = seed;
    cfg.spec = PatchSpec{16, 16, 3, 4};
    return cfg;
}

std::string fresh_dir(const std::string& tag) {
    fs::path dir = fs::path(testing::TempDir()) / ("reenact_ds_" + tag);
    fs::remove_all(dir);
    return dir.string();
}

}  // namespace

TEST(Dataset, WriteReadRoundTripBitwise) {
    std::string dir = fresh_dir("roundtrip");
    dataset_generate(dir, tiny_config());
    Dataset ds = dataset_read(dir);
    ASSERT_EQ(ds.clips.size(), 3u);
    for (size_t i = 0; i < ds.clips.size(); ++i) {
        const Clip& clip = ds.clips[i];
        IdentityParams id_a = sample_identity(ds.records[i].id_a_seed);
        IdentityParams id_b = sample_identity(ds.records[i].id_b_seed);
        EXPECT_TRUE(clip.id_a == id_a);
        EXPECT_TRUE(clip.id_b == id_b);
        MotionTrack track = sample_track(ds.records[i].track_seed, ds.records[i].length);
        ASSERT_EQ(clip.track.size(), track.size());
        for (size_t t = 0; t < track.size(); ++t) {
            EXPECT_TRUE(clip.track[t] == track[t]);
            EXPECT_TRUE(clip.target[t] == render_frame(id_b, track[t], ds.spec));
            EXPECT_TRUE(clip.masks[t] == region_masks(id_a, track[t], ds.spec));
            EXPECT_TRUE(clip.driving_masked[t] ==
                        mask_drive_frame(render_frame(id_a, track[t], ds.spec), clip.masks[t]));
        }
    }
}

TEST(Dataset, GenerationDeterministicInSeed) {
    std::string d1 = fresh_dir("det1"), d2 = fresh_dir("det2");
    dataset_generate(d1, tiny_config(7));
    dataset_generate(d2, tiny_config(7));
    Dataset a = dataset_read(d1, false), b = dataset_read(d2, false);
    ASSERT_EQ(a.records.size(), b.records.size());
    for (size_t i = 0; i < a.records.size(); ++i) {
        EXPECT_EQ(a.records[i].frames_checksum, b.records[i].frames_checksum);
        EXPECT_EQ(a.records[i].masks_checksum, b.records[i].masks_checksum);
        EXPECT_EQ(a.records[i].params_checksum, b.records[i].params_checksum);
    }
}

TEST(Dataset, CorruptedFrameFileNamesFile) {
    std::string dir = fresh_dir("corrupt");
    dataset_generate(dir, tiny_config());
    std::string victim = (fs::path(dir) / "clip_0001" / "frames.bin").string();
    {
        std::fstream f(victim, std::ios::binary | std::ios::in | std::ios::out);
        f.seekp(64);
        f.put('\x5a');
    }
    try {
        dataset_read(dir);
        FAIL() << "expected ChecksumError";
    } catch (const ChecksumError& e) {
        EXPECT_NE(std::string(e.what()).find("clip_0001"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("frames.bin"), std::string::npos);
    }
}

TEST(Dataset, MissingManifestDistinctError) {
    std::string dir = fresh_dir("nomanifest");
    fs::create_directories(dir);
    EXPECT_THROW(dataset_read(dir), ManifestError);
}

TEST(Dataset, VersionMismatchDistinctError) {
    std::string dir = fresh_dir("version");
    dataset_generate(dir, tiny_config());
    fs::path mpath = fs::path(dir) / "manifest.json";
    nlohmann::json manifest;
    {
        std::ifstream f(mpath);
        f >> manifest;
    }
    manifest["version"] = 999;
    {
        std::ofstream f(mpath);
        f << manifest.dump(2);
    }
    EXPECT_THROW(dataset_read(dir), VersionError);
}

TEST(Dataset, EmptyDatasetIsValid) {
    std::string dir = fresh_dir("empty");
    DatasetGenConfig cfg = tiny_config();
    cfg.n_clips = 0;
    dataset_generate(dir, cfg);
    Dataset ds = dataset_read(dir);
    EXPECT_TRUE(ds.clips.empty());
    EXPECT_EQ(ds.spec, cfg.spec);
}

TEST(Dataset, InvalidCountsRejected) {
    DatasetGenConfig cfg = tiny_config();
    cfg.n_identities = 0;
    EXPECT_THROW(dataset_generate(fresh_dir("bad"), cfg), ContractError);
    cfg = tiny_config();
    cfg.n_identities = 1;
    EXPECT_THROW(dataset_generate(fresh_dir("bad2"), cfg), ContractError);
}

TEST(VideoBin, RoundTripAndErrors) {
    std::string dir = fresh_dir("videobin");
    fs::create_directories(dir);
    std::string path = (fs::path(dir) / "v.bin").string();
    Rng rng(3);
    Video v;
    for (int t = 0; t < 3; ++t) {
        Image img(8, 8, 3);
        for (auto& x : img.px) x = rng.uniform();
        v.push_back(img);
    }
    write_video_bin(path, v);
    Video back = read_video_bin(path);
    ASSERT_EQ(back.size(), v.size());
    for (size_t t = 0; t < v.size(); ++t) EXPECT_TRUE(back[t] == v[t]);

    EXPECT_THROW(read_video_bin((fs::path(dir) / "absent.bin").string()), IoError);
}
