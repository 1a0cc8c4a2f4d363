#pragma once

// Procedural parametric portrait renderer and paired-clip factory.
//
// Faces are flat-shaded ellipse/box compositions with analytically known
// geometry, so region boxes and motion recovery are exact by construction.
// Yaw/pitch act as canvas translation (plus a slight eye-spacing
// foreshortening for yaw). Edges are antialiased with a deterministic
// 1-pixel signed-distance ramp, which keeps the pixel values continuous in
// every motion parameter.

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "reenact/image.hpp"
#include "reenact/rng.hpp"
#include "reenact/tokens.hpp"

namespace reenact {

struct IdentityParams {
    double head_width = 0.5;    // fraction of canvas width (full extent)
    double head_height = 0.6;   // fraction of canvas height
    double eye_spacing = 0.2;   // fraction between eye centers
    double eye_size = 0.055;    // eye half-width fraction
    double mouth_width = 0.18;  // full width fraction
    double skin_shade[3] = {0.7, 0.55, 0.45};
    double eye_shade[3] = {0.15, 0.15, 0.2};
    double mouth_shade[3] = {0.6, 0.15, 0.15};
    double brow_thickness = 0.025;

    bool operator==(const IdentityParams& o) const {
        auto eq3 = [](const double* a, const double* b) {
            return a[0] == b[0] && a[1] == b[1] && a[2] == b[2];
        };
        return head_width == o.head_width && head_height == o.head_height &&
               eye_spacing == o.eye_spacing && eye_size == o.eye_size &&
               mouth_width == o.mouth_width && eq3(skin_shade, o.skin_shade) &&
               eq3(eye_shade, o.eye_shade) && eq3(mouth_shade, o.mouth_shade) &&
               brow_thickness == o.brow_thickness;
    }
};

struct MotionFrame {
    double yaw = 0.0;         // [-1, 1]
    double pitch = 0.0;       // [-1, 1]
    double mouth_open = 0.0;  // [0, 1]
    double blink = 0.0;       // [0, 1]
    double gaze_x = 0.0;      // [-1, 1]
    double gaze_y = 0.0;      // [-1, 1]
    double brow_raise = 0.0;  // [-1, 1]

    static constexpr int kComponents = 7;
    double component(int i) const {
        const double* p = &yaw;
        return p[i];
    }
    double& component(int i) {
        double* p = &yaw;
        return p[i];
    }
    static const char* component_name(int i) {
        static const char* names[] = {"yaw", "pitch", "mouth_open", "blink",
                                      "gaze_x", "gaze_y", "brow_raise"};
        return names[i];
    }
    static double component_lo(int i) { return (i == 2 || i == 3) ? 0.0 : -1.0; }
    static double component_hi(int) { return 1.0; }

    bool operator==(const MotionFrame& o) const {
        for (int i = 0; i < kComponents; ++i)
            if (component(i) != o.component(i)) return false;
        return true;
    }
};

using MotionTrack = std::vector<MotionFrame>;

// Per-frame maximum component change for sampled tracks.
constexpr double kMotionSmoothnessCap = 0.25;

struct Box {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // half-open pixel ranges

    bool contains(int x, int y) const { return x >= x0 && x < x1 && y >= y0 && y < y1; }
    bool empty() const { return x1 <= x0 || y1 <= y0; }
    double cx() const { return 0.5 * (x0 + x1); }
    double cy() const { return 0.5 * (y0 + y1); }
    bool operator==(const Box&) const = default;
};

struct RegionMask {
    Box left_eye, right_eye, nose, mouth;

    bool contains(int x, int y) const {
        return left_eye.contains(x, y) || right_eye.contains(x, y) ||
               nose.contains(x, y) || mouth.contains(x, y);
    }
    bool operator==(const RegionMask&) const = default;
};

namespace face {

// Layout constants, all in canvas fractions.
constexpr double kYawShift = 0.06;
constexpr double kPitchShift = 0.05;
constexpr double kHeadCx = 0.5;
constexpr double kHeadCy = 0.48;
constexpr double kEyeDrop = -0.10;         // eyes above head center
constexpr double kForeshorten = 0.15;      // eye-spacing shrink per |yaw|
constexpr double kApertureFloor = 0.25;    // eyes stay faintly open at blink=1
constexpr double kPupilRadius = 0.45;      // x eye_size
constexpr double kPupilTravel = 0.35;      // x eye_size per unit gaze
constexpr double kBrowLift = 1.6;          // x eye_size above eye center
constexpr double kBrowTravel = 0.025;      // per unit brow_raise
constexpr double kBrowHalfWidth = 1.15;    // x eye_size
constexpr double kNoseDrop = 0.06;
constexpr double kNoseRx = 0.022;
constexpr double kNoseRy = 0.035;
constexpr double kMouthDrop = 0.175;
constexpr double kMouthMaxRy = 0.055;
constexpr double kMouthFloor = 0.10;       // lips never vanish entirely
constexpr double kScleraShade = 0.93;
constexpr double kBrowShade = 0.12;
constexpr double kNoseShadeMul = 0.72;
constexpr double kBackground = 0.10;

// Sampling ranges for identities.
constexpr double kHeadWidthLo = 0.44, kHeadWidthHi = 0.60;
constexpr double kHeadHeightLo = 0.54, kHeadHeightHi = 0.68;
constexpr double kEyeSpacingLo = 0.16, kEyeSpacingHi = 0.26;
constexpr double kEyeSizeLo = 0.045, kEyeSizeHi = 0.07;
constexpr double kMouthWidthLo = 0.14, kMouthWidthHi = 0.24;
constexpr double kBrowThickLo = 0.015, kBrowThickHi = 0.04;

// All part centers/radii in pixel coordinates; shared by the renderer and
// the mask computation so they can never drift apart.
struct Geometry {
    double head_cx, head_cy, head_rx, head_ry;
    double eye_lx, eye_rx_c, eye_y;            // eye centers
    double eye_rad_x, eye_rad_y, eye_rad_y_max;
    double pupil_r, pupil_dx, pupil_dy;
    double brow_y, brow_hx, brow_hy;
    double nose_cx, nose_cy, nose_rx, nose_ry;
    double mouth_cx, mouth_cy, mouth_rx, mouth_ry, mouth_ry_max;
};

inline Geometry layout(const IdentityParams& id, const MotionFrame& m, int W, int H) {
    Geometry g{};
    double cx = (kHeadCx + kYawShift * m.yaw) * W;
    double cy = (kHeadCy + kPitchShift * m.pitch) * H;
    g.head_cx = cx;
    g.head_cy = cy;
    g.head_rx = 0.5 * id.head_width * W;
    g.head_ry = 0.5 * id.head_height * H;

    double spacing = id.eye_spacing * (1.0 - kForeshorten * std::abs(m.yaw));
    g.eye_lx = cx - 0.5 * spacing * W;
    g.eye_rx_c = cx + 0.5 * spacing * W;
    g.eye_y = cy + kEyeDrop * H;
    g.eye_rad_x = id.eye_size * W;
    g.eye_rad_y_max = id.eye_size * H;
    g.eye_rad_y = g.eye_rad_y_max * (kApertureFloor + (1.0 - kApertureFloor) * (1.0 - m.blink));
    g.pupil_r = kPupilRadius * id.eye_size * W;
    g.pupil_dx = m.gaze_x * kPupilTravel * id.eye_size * W;
    g.pupil_dy = m.gaze_y * kPupilTravel * id.eye_size * H;

    g.brow_y = g.eye_y - (kBrowLift * id.eye_size + kBrowTravel * m.brow_raise) * H;
    g.brow_hx = kBrowHalfWidth * id.eye_size * W;
    g.brow_hy = 0.5 * id.brow_thickness * H;

    g.nose_cx = cx;
    g.nose_cy = cy + kNoseDrop * H;
    g.nose_rx = kNoseRx * W;
    g.nose_ry = kNoseRy * H;

    g.mouth_cx = cx;
    g.mouth_cy = cy + kMouthDrop * H;
    g.mouth_rx = 0.5 * id.mouth_width * W;
    g.mouth_ry_max = kMouthMaxRy * H;
    g.mouth_ry = g.mouth_ry_max * (kMouthFloor + (1.0 - kMouthFloor) * m.mouth_open);
    return g;
}

// Soft coverage of an axis-aligned ellipse: 1 inside, 0 outside, with a
// ~1 px signed-distance ramp at the boundary.
inline double ellipse_cov(double px, double py, double cx, double cy, double rx, double ry) {
    double dx = px - cx, dy = py - cy;
    double f = std::sqrt((dx * dx) / (rx * rx) + (dy * dy) / (ry * ry));
    double dist;
    if (f < 1e-9) {
        dist = -std::min(rx, ry);
    } else {
        double gx = dx / (rx * rx), gy = dy / (ry * ry);
        double gn = std::sqrt(gx * gx + gy * gy);
        dist = gn > 1e-12 ? f * (f - 1.0) / gn : (f - 1.0) * std::min(rx, ry);
    }
    return std::clamp(0.5 - dist, 0.0, 1.0);
}

inline double box_cov(double px, double py, double cx, double cy, double hx, double hy) {
    double dx = std::abs(px - cx) - hx;
    double dy = std::abs(py - cy) - hy;
    double ax = std::max(dx, 0.0), ay = std::max(dy, 0.0);
    double dist = std::sqrt(ax * ax + ay * ay) + std::min(std::max(dx, dy), 0.0);
    return std::clamp(0.5 - dist, 0.0, 1.0);
}

}  // namespace face

inline IdentityParams sample_identity(uint64_t seed) {
    Rng rng(seed ^ 0x1dfaceull);
    IdentityParams id;
    id.head_width = rng.uniform(face::kHeadWidthLo, face::kHeadWidthHi);
    id.head_height = rng.uniform(face::kHeadHeightLo, face::kHeadHeightHi);
    id.eye_spacing = rng.uniform(face::kEyeSpacingLo, face::kEyeSpacingHi);
    id.eye_size = rng.uniform(face::kEyeSizeLo, face::kEyeSizeHi);
    id.mouth_width = rng.uniform(face::kMouthWidthLo, face::kMouthWidthHi);
    for (double& c : id.skin_shade) c = 0.0;
    id.skin_shade[0] = rng.uniform(0.55, 0.85);
    id.skin_shade[1] = rng.uniform(0.40, 0.70);
    id.skin_shade[2] = rng.uniform(0.30, 0.60);
    for (double& c : id.eye_shade) c = rng.uniform(0.05, 0.30);
    id.mouth_shade[0] = rng.uniform(0.45, 0.75);
    id.mouth_shade[1] = rng.uniform(0.05, 0.25);
    id.mouth_shade[2] = rng.uniform(0.05, 0.25);
    id.brow_thickness = rng.uniform(face::kBrowThickLo, face::kBrowThickHi);
    return id;
}

// Smoothed per-component random walk obeying the smoothness cap.
inline MotionTrack sample_track(uint64_t seed, int length) {
    if (length < 1) throw ContractError("sample_track: length must be >= 1");
    Rng rng(seed ^ 0x7eac4ull);
    MotionTrack track(static_cast<size_t>(length));
    double vel[MotionFrame::kComponents] = {};
    MotionFrame cur;
    for (int i = 0; i < MotionFrame::kComponents; ++i)
        cur.component(i) = rng.uniform(MotionFrame::component_lo(i), MotionFrame::component_hi(i));
    track[0] = cur;
    for (int t = 1; t < length; ++t) {
        for (int i = 0; i < MotionFrame::kComponents; ++i) {
            double lo = MotionFrame::component_lo(i), hi = MotionFrame::component_hi(i);
            vel[i] = 0.65 * vel[i] + 0.35 * rng.uniform(-kMotionSmoothnessCap, kMotionSmoothnessCap);
            double step = std::clamp(vel[i], -kMotionSmoothnessCap, kMotionSmoothnessCap);
            cur.component(i) = std::clamp(cur.component(i) + step, lo, hi);
        }
        track[static_cast<size_t>(t)] = cur;
    }
    return track;
}

inline Image render_frame(const IdentityParams& id, const MotionFrame& m, const PatchSpec& spec) {
    const int W = spec.image_width, H = spec.image_height, C = spec.channels;
    face::Geometry g = face::layout(id, m, W, H);
    Image img(H, W, C);

    double nose_shade[3], brow_shade[3] = {face::kBrowShade, face::kBrowShade, face::kBrowShade};
    double sclera[3] = {face::kScleraShade, face::kScleraShade, face::kScleraShade};
    for (int c = 0; c < 3; ++c) nose_shade[c] = id.skin_shade[c] * face::kNoseShadeMul;

    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double px = x + 0.5, py = y + 0.5;
            double rgb[3] = {face::kBackground, face::kBackground, face::kBackground};
            auto paint = [&](double cov, const double* shade) {
                if (cov <= 0.0) return;
                for (int c = 0; c < 3; ++c) rgb[c] += cov * (shade[c] - rgb[c]);
            };
            paint(face::ellipse_cov(px, py, g.head_cx, g.head_cy, g.head_rx, g.head_ry),
                  id.skin_shade);
            paint(face::box_cov(px, py, g.eye_lx, g.brow_y, g.brow_hx, g.brow_hy), brow_shade);
            paint(face::box_cov(px, py, g.eye_rx_c, g.brow_y, g.brow_hx, g.brow_hy), brow_shade);
            for (double ex : {g.eye_lx, g.eye_rx_c}) {
                double sc = face::ellipse_cov(px, py, ex, g.eye_y, g.eye_rad_x, g.eye_rad_y);
                paint(sc, sclera);
                double pc = face::ellipse_cov(px, py, ex + g.pupil_dx, g.eye_y + g.pupil_dy,
                                              g.pupil_r, g.pupil_r);
                paint(std::min(sc, pc), id.eye_shade);  // pupil clipped to the aperture
            }
            paint(face::ellipse_cov(px, py, g.nose_cx, g.nose_cy, g.nose_rx, g.nose_ry),
                  nose_shade);
            paint(face::ellipse_cov(px, py, g.mouth_cx, g.mouth_cy, g.mouth_rx, g.mouth_ry),
                  id.mouth_shade);
            if (C == 3) {
                for (int c = 0; c < 3; ++c) img.at(y, x, c) = rgb[c];
            } else if (C == 1) {
                img.at(y, x, 0) = (rgb[0] + rgb[1] + rgb[2]) / 3.0;
            } else {
                throw ContractError("render_frame: channels must be 1 or 3");
            }
        }
    return img;
}

namespace face {

// Box around (cx, cy) with half-extents (ex, ey) plus a 1 px margin,
// clamped to the canvas.
inline Box part_box(double cx, double cy, double ex, double ey, int W, int H) {
    Box b;
    b.x0 = std::max(0, static_cast<int>(std::floor(cx - ex - 1.0)));
    b.y0 = std::max(0, static_cast<int>(std::floor(cy - ey - 1.0)));
    b.x1 = std::min(W, static_cast<int>(std::ceil(cx + ex + 1.0)));
    b.y1 = std::min(H, static_cast<int>(std::ceil(cy + ey + 1.0)));
    return b;
}

}  // namespace face

// Analytic boxes for the masked driving regions. Extents use the maximal
// aperture over blink/gaze/mouth_open so localized motion stays inside a
// fixed-size box; the centers track head translation.
inline RegionMask region_masks(const IdentityParams& id, const MotionFrame& m,
                               const PatchSpec& spec) {
    const int W = spec.image_width, H = spec.image_height;
    face::Geometry g = face::layout(id, m, W, H);
    RegionMask rm;
    rm.left_eye = face::part_box(g.eye_lx, g.eye_y, g.eye_rad_x, g.eye_rad_y_max, W, H);
    rm.right_eye = face::part_box(g.eye_rx_c, g.eye_y, g.eye_rad_x, g.eye_rad_y_max, W, H);
    rm.nose = face::part_box(g.nose_cx, g.nose_cy, g.nose_rx, g.nose_ry, W, H);
    rm.mouth = face::part_box(g.mouth_cx, g.mouth_cy, g.mouth_rx, g.mouth_ry_max, W, H);
    return rm;
}

// Keeps pixels inside the union of the region boxes, zeroes the rest.
inline Image mask_drive_frame(const Image& frame, const RegionMask& masks) {
    Image out(frame.height, frame.width, frame.channels);
    for (int y = 0; y < frame.height; ++y)
        for (int x = 0; x < frame.width; ++x)
            if (masks.contains(x, y))
                for (int c = 0; c < frame.channels; ++c) out.at(y, x, c) = frame.at(y, x, c);
    return out;
}

// One cross-identity training pair: the same track rendered under both
// identities; the sample drives identity B with A's masked video.
struct PairSample {
    IdentityParams driving_id;  // A
    IdentityParams source_id;   // B
    MotionTrack track;
    Video driving_video;          // renders of A
    Video target_video;           // renders of B (ground truth)
    std::vector<RegionMask> masks;  // boxes of A, per frame
    Video driving_masked;
};

inline PairSample make_pair(const IdentityParams& idA, const IdentityParams& idB,
                            const MotionTrack& track, const PatchSpec& spec) {
    if (idA == idB)
        throw ContractError("make_pair: identities must differ for cross-identity pairing");
    if (track.empty()) throw ContractError("make_pair: empty track");
    PairSample s;
    s.driving_id = idA;
    s.source_id = idB;
    s.track = track;
    s.driving_video.reserve(track.size());
    s.target_video.reserve(track.size());
    s.masks.reserve(track.size());
    s.driving_masked.reserve(track.size());
    for (const MotionFrame& m : track) {
        s.driving_video.push_back(render_frame(idA, m, spec));
        s.target_video.push_back(render_frame(idB, m, spec));
        s.masks.push_back(region_masks(idA, m, spec));
        s.driving_masked.push_back(mask_drive_frame(s.driving_video.back(), s.masks.back()));
    }
    return s;
}

}  // namespace reenact
