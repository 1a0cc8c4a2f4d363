#pragma once

// Frame <-> token conversion and the positional scheme that tells the
// streams apart.
//
// Frames are cut into P x P x C patches, one token per patch, flattened
// row-major. Every stream of one model instance shares the token grid; the
// streams are distinguished by a per-stream shift of the 2-D sinusoidal
// coordinate frame, so noise, source and driving tokens never share a
// coordinate. History tokens reuse the noise coordinates and are separated
// temporally by the frame-number encoding instead.

#include <cmath>
#include <string>

#include "reenact/image.hpp"
#include "reenact/tensor.hpp"

namespace reenact {

enum class Stream { noise, source, driving, history };

inline const char* stream_name(Stream s) {
    switch (s) {
        case Stream::noise: return "noise";
        case Stream::source: return "source";
        case Stream::driving: return "driving";
        case Stream::history: return "history";
    }
    return "?";
}

struct PatchSpec {
    int image_height = 32;
    int image_width = 32;
    int channels = 3;
    int patch_size = 4;

    int token_dim() const { return patch_size * patch_size * channels; }
    int grid_h() const { return image_height / patch_size; }
    int grid_w() const { return image_width / patch_size; }
    int tokens_per_frame() const { return grid_h() * grid_w(); }

    void validate() const {
        if (image_height <= 0 || image_width <= 0 || channels <= 0 || patch_size <= 0)
            throw DimError("patch spec: all dimensions must be positive");
        if (image_height % patch_size != 0 || image_width % patch_size != 0)
            throw DimError("patch spec: patch size " + std::to_string(patch_size) +
                           " must divide " + std::to_string(image_height) + "x" +
                           std::to_string(image_width));
    }

    bool operator==(const PatchSpec&) const = default;
};

// One frame's tokens for one conditioning role.
struct TokenStream {
    Tensor tokens;  // [T_f, d_tok]
    Stream stream = Stream::noise;
    int frame_index = 0;
};

// Image -> [T_f, d_tok]; row k holds the patch at grid (k / grid_w, k % grid_w).
inline Tensor patchify(const Image& frame, const PatchSpec& spec) {
    spec.validate();
    if (frame.height != spec.image_height || frame.width != spec.image_width ||
        frame.channels != spec.channels)
        throw DimError("patchify: frame " + std::to_string(frame.height) + "x" +
                       std::to_string(frame.width) + "x" + std::to_string(frame.channels) +
                       " does not match spec " + std::to_string(spec.image_height) + "x" +
                       std::to_string(spec.image_width) + "x" + std::to_string(spec.channels));
    const int P = spec.patch_size, gw = spec.grid_w(), gh = spec.grid_h(), C = spec.channels;
    Tensor out({spec.tokens_per_frame(), spec.token_dim()});
    double* o = out.data();
    for (int gy = 0; gy < gh; ++gy)
        for (int gx = 0; gx < gw; ++gx) {
            double* row = o + static_cast<int64_t>(gy * gw + gx) * spec.token_dim();
            int k = 0;
            for (int py = 0; py < P; ++py)
                for (int px = 0; px < P; ++px)
                    for (int c = 0; c < C; ++c)
                        row[k++] = frame.at(gy * P + py, gx * P + px, c);
        }
    return out;
}

inline Image unpatchify(const Tensor& tokens, const PatchSpec& spec) {
    spec.validate();
    if (tokens.rank() != 2 || tokens.dim(0) != spec.tokens_per_frame() ||
        tokens.dim(1) != spec.token_dim())
        throw DimError("unpatchify: token shape " + shape_str(tokens.shape()) +
                       " inconsistent with spec (expected [" +
                       std::to_string(spec.tokens_per_frame()) + ", " +
                       std::to_string(spec.token_dim()) + "])");
    const int P = spec.patch_size, gw = spec.grid_w(), gh = spec.grid_h(), C = spec.channels;
    Image img(spec.image_height, spec.image_width, C);
    const double* o = tokens.data();
    for (int gy = 0; gy < gh; ++gy)
        for (int gx = 0; gx < gw; ++gx) {
            const double* row = o + static_cast<int64_t>(gy * gw + gx) * spec.token_dim();
            int k = 0;
            for (int py = 0; py < P; ++py)
                for (int px = 0; px < P; ++px)
                    for (int c = 0; c < C; ++c)
                        img.at(gy * P + py, gx * P + px, c) = row[k++];
        }
    return img;
}

// Per-stream shift of the positional coordinate frame, applied to both axes.
// Source sits one grid-plus-gap beyond noise, driving two; history shares
// the noise frame.
inline int stream_offset(Stream s, const PatchSpec& spec, int gap) {
    if (gap < 1) throw ContractError("spatial_encoding: gap must be >= 1");
    int unit = spec.grid_h() + gap;
    switch (s) {
        case Stream::noise: return 0;
        case Stream::history: return 0;
        case Stream::source: return unit;
        case Stream::driving: return 2 * unit;
    }
    throw ContractError("spatial_encoding: unknown stream");
}

namespace detail {

// 1-D sinusoidal encoding of a scalar position into dim values
// (dim/2 frequency pairs, geometric from 1 down to 1/10000).
inline void sincos_encode(double pos, int dim, double* out) {
    int pairs = dim / 2;
    for (int i = 0; i < pairs; ++i) {
        double freq = std::pow(10000.0, -static_cast<double>(i) / pairs);
        out[2 * i] = std::sin(pos * freq);
        out[2 * i + 1] = std::cos(pos * freq);
    }
}

}  // namespace detail

// 2-D sinusoidal encoding at the stream's shifted grid coordinates.
// First half of each token encodes the row coordinate, second half the
// column coordinate.
inline Tensor spatial_encoding(Stream stream, const PatchSpec& spec, int gap) {
    spec.validate();
    int d = spec.token_dim();
    if (d % 4 != 0)
        throw DimError("spatial_encoding: token dim " + std::to_string(d) +
                       " must be divisible by 4");
    int delta = stream_offset(stream, spec, gap);
    int gh = spec.grid_h(), gw = spec.grid_w();
    Tensor out({spec.tokens_per_frame(), d});
    for (int h = 0; h < gh; ++h)
        for (int w = 0; w < gw; ++w) {
            double* row = out.data() + static_cast<int64_t>(h * gw + w) * d;
            detail::sincos_encode(h + delta, d / 2, row);
            detail::sincos_encode(w + delta, d / 2, row + d / 2);
        }
    return out;
}

// 1-D sinusoidal encoding of the frame index within a temporal window of
// window_len frames (history occupies the leading indices).
inline Tensor frame_encoding(int frame_index, int window_len, int d_tok) {
    if (frame_index < 0 || frame_index >= window_len)
        throw ContractError("frame_encoding: index " + std::to_string(frame_index) +
                            " outside window [0, " + std::to_string(window_len) + ")");
    if (d_tok % 2 != 0)
        throw DimError("frame_encoding: dim must be even, got " + std::to_string(d_tok));
    Tensor out({d_tok});
    detail::sincos_encode(static_cast<double>(frame_index), d_tok, out.data());
    return out;
}

}  // namespace reenact
