#pragma once

// On-disk dataset layout.
//
//   <dir>/manifest.json          version, patch spec, clip table with the
//                                generating seeds and per-file checksums
//   <dir>/<clip>/frames.bin      target video (identity B under the track)
//   <dir>/<clip>/masks.bin       driving-region boxes per frame (identity A)
//   <dir>/<clip>/params.bin      both identities plus the motion track
//
// frames.bin: "RNFR" | u16 version | u16 precision(64) | u32 L,H,W,C |
//             L*H*W*C f64. masks.bin: "RNMK" | u16 version | u32 L |
//             per frame 4 boxes (left eye, right eye, nose, mouth) as
//             4 x i32 half-open pixel ranges. params.bin: "RNPR" |
//             u16 version | identity A | identity B | u32 L | L x 7 f64.
// All integers little-endian; doubles are IEEE-754 bit patterns.
//
// The driving video is not stored: it re-renders deterministically from
// params.bin, and the stored checksums make silent corruption detectable.

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "reenact/portraits.hpp"
#include "reenact/serialize.hpp"

namespace reenact {

class ManifestError : public IoError {
public:
    using IoError::IoError;
};
class ChecksumError : public IoError {
public:
    using IoError::IoError;
};
class VersionError : public IoError {
public:
    using IoError::IoError;
};

constexpr uint16_t kDatasetVersion = 1;

struct ClipRecord {
    std::string name;
    uint64_t id_a_seed = 0;
    uint64_t id_b_seed = 0;
    uint64_t track_seed = 0;
    int length = 0;
    uint64_t frames_checksum = 0;
    uint64_t masks_checksum = 0;
    uint64_t params_checksum = 0;
};

struct Clip {
    std::string name;
    IdentityParams id_a;  // driving identity
    IdentityParams id_b;  // source/target identity
    MotionTrack track;
    Video target;                   // renders of id_b (stored)
    std::vector<RegionMask> masks;  // id_a boxes (stored)
    Video driving_masked;           // re-rendered from id_a + track + masks
};

struct Dataset {
    PatchSpec spec;
    std::vector<ClipRecord> records;
    std::vector<Clip> clips;
};

// --------------------------------------------------------------------------
// low-level file formats (also used by the CLI for external inputs)

inline void write_video_bin(const std::string& path, const Video& video) {
    if (video.empty()) throw IoError("write_video_bin: empty video");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for write: " + path);
    f.write("RNFR", 4);
    put_u16(f, kDatasetVersion);
    put_u16(f, 64);
    put_u32(f, static_cast<uint32_t>(video.size()));
    put_u32(f, static_cast<uint32_t>(video[0].height));
    put_u32(f, static_cast<uint32_t>(video[0].width));
    put_u32(f, static_cast<uint32_t>(video[0].channels));
    for (const Image& img : video) {
        if (!img.same_shape(video[0])) throw IoError("write_video_bin: ragged video");
        for (double v : img.px) put_f64(f, v);
    }
    if (!f) throw IoError("write failed: " + path);
}

inline Video read_video_bin(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for read: " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::string(magic, 4) != "RNFR")
        throw IoError("bad magic in frames file: " + path);
    uint16_t version = get_u16(f);
    if (version != kDatasetVersion)
        throw VersionError("frames file version " + std::to_string(version) +
                           " unsupported (want " + std::to_string(kDatasetVersion) + "): " + path);
    uint16_t precision = get_u16(f);
    if (precision != 64) throw VersionError("frames file precision flag " +
                                            std::to_string(precision) + " unsupported: " + path);
    uint32_t L = get_u32(f), H = get_u32(f), W = get_u32(f), C = get_u32(f);
    Video video;
    video.reserve(L);
    for (uint32_t t = 0; t < L; ++t) {
        Image img(static_cast<int>(H), static_cast<int>(W), static_cast<int>(C));
        for (double& v : img.px) v = get_f64(f);
        video.push_back(std::move(img));
    }
    return video;
}

inline void write_masks_bin(const std::string& path, const std::vector<RegionMask>& masks) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for write: " + path);
    f.write("RNMK", 4);
    put_u16(f, kDatasetVersion);
    put_u32(f, static_cast<uint32_t>(masks.size()));
    for (const RegionMask& rm : masks)
        for (const Box* b : {&rm.left_eye, &rm.right_eye, &rm.nose, &rm.mouth}) {
            put_i32(f, b->x0);
            put_i32(f, b->y0);
            put_i32(f, b->x1);
            put_i32(f, b->y1);
        }
    if (!f) throw IoError("write failed: " + path);
}

inline std::vector<RegionMask> read_masks_bin(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for read: " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::string(magic, 4) != "RNMK")
        throw IoError("bad magic in masks file: " + path);
    uint16_t version = get_u16(f);
    if (version != kDatasetVersion)
        throw VersionError("masks file version " + std::to_string(version) + " unsupported: " + path);
    uint32_t L = get_u32(f);
    std::vector<RegionMask> masks(L);
    for (uint32_t t = 0; t < L; ++t)
        for (Box* b : {&masks[t].left_eye, &masks[t].right_eye, &masks[t].nose, &masks[t].mouth}) {
            b->x0 = get_i32(f);
            b->y0 = get_i32(f);
            b->x1 = get_i32(f);
            b->y1 = get_i32(f);
        }
    return masks;
}

namespace detail {

inline void put_identity(std::ostream& f, const IdentityParams& id) {
    put_f64(f, id.head_width);
    put_f64(f, id.head_height);
    put_f64(f, id.eye_spacing);
    put_f64(f, id.eye_size);
    put_f64(f, id.mouth_width);
    for (double c : id.skin_shade) put_f64(f, c);
    for (double c : id.eye_shade) put_f64(f, c);
    for (double c : id.mouth_shade) put_f64(f, c);
    put_f64(f, id.brow_thickness);
}

inline IdentityParams get_identity(std::istream& f) {
    IdentityParams id;
    id.head_width = get_f64(f);
    id.head_height = get_f64(f);
    id.eye_spacing = get_f64(f);
    id.eye_size = get_f64(f);
    id.mouth_width = get_f64(f);
    for (double& c : id.skin_shade) c = get_f64(f);
    for (double& c : id.eye_shade) c = get_f64(f);
    for (double& c : id.mouth_shade) c = get_f64(f);
    id.brow_thickness = get_f64(f);
    return id;
}

}  // namespace detail

inline void write_params_bin(const std::string& path, const IdentityParams& id_a,
                             const IdentityParams& id_b, const MotionTrack& track) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for write: " + path);
    f.write("RNPR", 4);
    put_u16(f, kDatasetVersion);
    detail::put_identity(f, id_a);
    detail::put_identity(f, id_b);
    put_u32(f, static_cast<uint32_t>(track.size()));
    for (const MotionFrame& m : track)
        for (int i = 0; i < MotionFrame::kComponents; ++i) put_f64(f, m.component(i));
    if (!f) throw IoError("write failed: " + path);
}

inline void read_params_bin(const std::string& path, IdentityParams& id_a,
                            IdentityParams& id_b, MotionTrack& track) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for read: " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::string(magic, 4) != "RNPR")
        throw IoError("bad magic in params file: " + path);
    uint16_t version = get_u16(f);
    if (version != kDatasetVersion)
        throw VersionError("params file version " + std::to_string(version) + " unsupported: " + path);
    id_a = detail::get_identity(f);
    id_b = detail::get_identity(f);
    uint32_t L = get_u32(f);
    track.assign(L, MotionFrame{});
    for (uint32_t t = 0; t < L; ++t)
        for (int i = 0; i < MotionFrame::kComponents; ++i) track[t].component(i) = get_f64(f);
}

// --------------------------------------------------------------------------
// dataset write / read

struct DatasetGenConfig {
    int n_identities = 256;
    int n_tracks = 128;
    int n_clips = 512;
    int clip_length = 32;
    uint64_t seed = 0;
    PatchSpec spec;
};

inline void dataset_write(const std::string& dir, const PatchSpec& spec,
                          const std::vector<ClipRecord>& records,
                          const std::vector<Clip>& clips) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json manifest;
    manifest["version"] = kDatasetVersion;
    manifest["spec"] = {{"height", spec.image_height},
                        {"width", spec.image_width},
                        {"channels", spec.channels},
                        {"patch_size", spec.patch_size}};
    manifest["clips"] = nlohmann::json::array();
    for (size_t i = 0; i < clips.size(); ++i) {
        const Clip& clip = clips[i];
        ClipRecord rec = records[i];
        fs::path cdir = fs::path(dir) / clip.name;
        fs::create_directories(cdir);
        write_video_bin((cdir / "frames.bin").string(), clip.target);
        write_masks_bin((cdir / "masks.bin").string(), clip.masks);
        write_params_bin((cdir / "params.bin").string(), clip.id_a, clip.id_b, clip.track);
        rec.frames_checksum = file_checksum((cdir / "frames.bin").string());
        rec.masks_checksum = file_checksum((cdir / "masks.bin").string());
        rec.params_checksum = file_checksum((cdir / "params.bin").string());
        manifest["clips"].push_back({{"name", rec.name},
                                     {"id_a_seed", rec.id_a_seed},
                                     {"id_b_seed", rec.id_b_seed},
                                     {"track_seed", rec.track_seed},
                                     {"length", rec.length},
                                     {"frames_checksum", hex64(rec.frames_checksum)},
                                     {"masks_checksum", hex64(rec.masks_checksum)},
                                     {"params_checksum", hex64(rec.params_checksum)}});
    }
    std::ofstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw IoError("cannot write manifest in " + dir);
    mf << manifest.dump(2) << "\n";
}

// Renders and writes a procedurally generated dataset; returns clip count.
inline int dataset_generate(const std::string& dir, const DatasetGenConfig& cfg) {
    if (cfg.n_identities < 1 || cfg.n_tracks < 1 || cfg.n_clips < 0 || cfg.clip_length < 1)
        throw ContractError("dataset_generate: counts must be positive");
    if (cfg.n_identities < 2)
        throw ContractError("dataset_generate: need at least 2 identities for cross pairing");
    cfg.spec.validate();
    Rng master(cfg.seed);
    std::vector<uint64_t> id_seeds(static_cast<size_t>(cfg.n_identities));
    for (auto& s : id_seeds) s = master.next_u64();
    std::vector<uint64_t> track_seeds(static_cast<size_t>(cfg.n_tracks));
    for (auto& s : track_seeds) s = master.next_u64();

    std::vector<ClipRecord> records;
    std::vector<Clip> clips;
    for (int i = 0; i < cfg.n_clips; ++i) {
        size_t a = master.uniform_int(static_cast<uint64_t>(cfg.n_identities));
        size_t b = a;
        while (b == a) b = master.uniform_int(static_cast<uint64_t>(cfg.n_identities));
        size_t tr = master.uniform_int(static_cast<uint64_t>(cfg.n_tracks));

        ClipRecord rec;
        char buf[32];
        std::snprintf(buf, sizeof(buf), "clip_%04d", i);
        rec.name = buf;
        rec.id_a_seed = id_seeds[a];
        rec.id_b_seed = id_seeds[b];
        rec.track_seed = track_seeds[tr];
        rec.length = cfg.clip_length;

        Clip clip;
        clip.name = rec.name;
        clip.id_a = sample_identity(rec.id_a_seed);
        clip.id_b = sample_identity(rec.id_b_seed);
        clip.track = sample_track(rec.track_seed, cfg.clip_length);
        PairSample pair = make_pair(clip.id_a, clip.id_b, clip.track, cfg.spec);
        clip.target = std::move(pair.target_video);
        clip.masks = std::move(pair.masks);
        clip.driving_masked = std::move(pair.driving_masked);
        records.push_back(rec);
        clips.push_back(std::move(clip));
    }
    dataset_write(dir, cfg.spec, records, clips);
    return cfg.n_clips;
}

inline Dataset dataset_read(const std::string& dir, bool materialize_driving = true) {
    namespace fs = std::filesystem;
    fs::path mpath = fs::path(dir) / "manifest.json";
    if (!fs::exists(mpath)) throw ManifestError("missing manifest: " + mpath.string());
    std::ifstream mf(mpath);
    nlohmann::json manifest;
    try {
        mf >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw ManifestError("unparseable manifest " + mpath.string() + ": " + e.what());
    }
    if (!manifest.contains("version") || manifest["version"].get<int>() != kDatasetVersion)
        throw VersionError("manifest version mismatch in " + mpath.string());

    Dataset ds;
    ds.spec.image_height = manifest["spec"]["height"].get<int>();
    ds.spec.image_width = manifest["spec"]["width"].get<int>();
    ds.spec.channels = manifest["spec"]["channels"].get<int>();
    ds.spec.patch_size = manifest["spec"]["patch_size"].get<int>();
    ds.spec.validate();

    for (const auto& j : manifest["clips"]) {
        ClipRecord rec;
        rec.name = j["name"].get<std::string>();
        rec.id_a_seed = j["id_a_seed"].get<uint64_t>();
        rec.id_b_seed = j["id_b_seed"].get<uint64_t>();
        rec.track_seed = j["track_seed"].get<uint64_t>();
        rec.length = j["length"].get<int>();

        fs::path cdir = fs::path(dir) / rec.name;
        auto check = [&](const char* file, const std::string& want_hex) {
            std::string path = (cdir / file).string();
            if (!fs::exists(path)) throw IoError("missing clip file: " + path);
            uint64_t got = file_checksum(path);
            if (hex64(got) != want_hex)
                throw ChecksumError("checksum mismatch for " + path + " (manifest " + want_hex +
                                    ", file " + hex64(got) + ")");
            return got;
        };
        rec.frames_checksum = check("frames.bin", j["frames_checksum"].get<std::string>());
        rec.masks_checksum = check("masks.bin", j["masks_checksum"].get<std::string>());
        rec.params_checksum = check("params.bin", j["params_checksum"].get<std::string>());

        Clip clip;
        clip.name = rec.name;
        clip.target = read_video_bin((cdir / "frames.bin").string());
        clip.masks = read_masks_bin((cdir / "masks.bin").string());
        read_params_bin((cdir / "params.bin").string(), clip.id_a, clip.id_b, clip.track);
        if (materialize_driving) {
            clip.driving_masked.reserve(clip.track.size());
            for (size_t t = 0; t < clip.track.size(); ++t) {
                Image drv = render_frame(clip.id_a, clip.track[t], ds.spec);
                clip.driving_masked.push_back(mask_drive_frame(drv, clip.masks[t]));
            }
        }
        ds.records.push_back(rec);
        ds.clips.push_back(std::move(clip));
    }
    return ds;
}

}  // namespace reenact
