#pragma once

// Dense image buffer, row-major [y][x][c], values nominally in [0, 1].

#include <stdexcept>
#include <string>
#include <vector>

namespace reenact {

struct Image {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<double> px;

    Image() = default;
    Image(int h, int w, int c, double fill = 0.0)
        : height(h), width(w), channels(c),
          px(static_cast<size_t>(h) * w * c, fill) {}

    double& at(int y, int x, int c) {
        return px[(static_cast<size_t>(y) * width + x) * channels + c];
    }
    double at(int y, int x, int c) const {
        return px[(static_cast<size_t>(y) * width + x) * channels + c];
    }

    size_t size() const { return px.size(); }

    bool same_shape(const Image& o) const {
        return height == o.height && width == o.width && channels == o.channels;
    }

    bool operator==(const Image& o) const {
        return same_shape(o) && px == o.px;
    }
};

using Video = std::vector<Image>;

inline void check_same_shape(const Image& a, const Image& b, const char* what) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(what) + ": image shapes differ ([" +
                                    std::to_string(a.height) + "x" + std::to_string(a.width) + "x" +
                                    std::to_string(a.channels) + "] vs [" +
                                    std::to_string(b.height) + "x" + std::to_string(b.width) + "x" +
                                    std::to_string(b.channels) + "])");
}

// Mean absolute difference between two images of equal shape.
inline double mean_abs_diff(const Image& a, const Image& b) {
    check_same_shape(a, b, "mean_abs_diff");
    double acc = 0.0;
    for (size_t i = 0; i < a.px.size(); ++i) acc += std::abs(a.px[i] - b.px[i]);
    return a.px.empty() ? 0.0 : acc / static_cast<double>(a.px.size());
}

}  // namespace reenact
