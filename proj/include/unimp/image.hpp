#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "unimp/core.hpp"

namespace unimp {

// RGB raster with values in [0,1], row-major, 3 channels.
struct ImageTensor {
    int height = 0;
    int width = 0;
    std::vector<float> data;

    static ImageTensor zeros(int h, int w) {
        ImageTensor img;
        img.height = h;
        img.width = w;
        img.data.assign(static_cast<size_t>(h) * w * 3, 0.0f);
        return img;
    }

    float& at(int y, int x, int c) { return data[(static_cast<size_t>(y) * width + x) * 3 + c]; }
    float at(int y, int x, int c) const { return data[(static_cast<size_t>(y) * width + x) * 3 + c]; }

    void clamp01() {
        for (auto& v : data) v = std::min(1.0f, std::max(0.0f, v));
    }
};

namespace detail {
inline int ppm_next_int(std::istream& in) {
    // skips whitespace and '#' comments between header fields
    int c = in.get();
    while (c != EOF) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = in.get();
        } else if (!std::isspace(c)) {
            break;
        }
        c = in.get();
    }
    if (c == EOF) throw DataError("truncated PPM header");
    int value = 0;
    while (c != EOF && std::isdigit(c)) {
        value = value * 10 + (c - '0');
        c = in.get();
    }
    return value;
}
}  // namespace detail

// Binary 8-bit PPM (P6).
inline ImageTensor read_ppm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open image " + path.string());
    char magic[2];
    in.read(magic, 2);
    if (!in || magic[0] != 'P' || magic[1] != '6') throw DataError("not a P6 PPM: " + path.string());
    const int w = detail::ppm_next_int(in);
    const int h = detail::ppm_next_int(in);
    const int maxval = detail::ppm_next_int(in);
    if (maxval != 255) throw DataError("unsupported PPM maxval " + std::to_string(maxval));
    std::vector<unsigned char> raw(static_cast<size_t>(w) * h * 3);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!in) throw DataError("truncated PPM pixel data: " + path.string());
    ImageTensor img = ImageTensor::zeros(h, w);
    for (size_t i = 0; i < raw.size(); ++i) img.data[i] = static_cast<float>(raw[i]) / 255.0f;
    return img;
}

inline void write_ppm(const std::filesystem::path& path, const ImageTensor& img) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write image " + path.string());
    out << "P6\n" << img.width << " " << img.height << "\n255\n";
    std::vector<unsigned char> raw(img.data.size());
    for (size_t i = 0; i < raw.size(); ++i) {
        const float v = std::min(1.0f, std::max(0.0f, img.data[i]));
        raw[i] = static_cast<unsigned char>(v * 255.0f + 0.5f);
    }
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
}

inline double image_mse(const ImageTensor& a, const ImageTensor& b) {
    if (a.height != b.height || a.width != b.width) throw DimensionError("image_mse size mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        const double d = static_cast<double>(a.data[i]) - b.data[i];
        acc += d * d;
    }
    return acc / static_cast<double>(a.data.size());
}

}  // namespace unimp
