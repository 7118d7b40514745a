#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <string>
#include <vector>

#include "unimp/core.hpp"
#include "unimp/image.hpp"
#include "unimp/io.hpp"
#include "unimp/rng.hpp"

namespace unimp {

constexpr uint32_t kCodebookVersion = 1;

// Patch-level k-means codebook standing in for a learned image tokenizer.
// Codes map one-to-one onto the vocabulary's <v0>..<vK-1> tokens.
struct Codebook {
    int k = 0;
    int patch_px = 0;
    std::vector<std::vector<float>> centroids;  // k vectors of patch_px^2 * 3
    bool trained = false;
    int fit_iterations = 0;
    double inertia = 0.0;
    std::vector<double> inertia_history;

    int patch_dim() const { return patch_px * patch_px * 3; }
};

namespace detail {

inline std::vector<float> extract_patch(const ImageTensor& img, int py, int px, int patch) {
    std::vector<float> out(static_cast<size_t>(patch) * patch * 3);
    size_t w = 0;
    for (int y = 0; y < patch; ++y)
        for (int x = 0; x < patch; ++x)
            for (int c = 0; c < 3; ++c) out[w++] = img.at(py * patch + y, px * patch + x, c);
    return out;
}

inline double sq_dist(const std::vector<float>& a, const std::vector<float>& b) {
    double acc = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - b[i];
        acc += d * d;
    }
    return acc;
}

// Nearest centroid, ties broken by lowest index.
inline int nearest_centroid(const std::vector<float>& p, const std::vector<std::vector<float>>& centroids) {
    int best = 0;
    double best_d = sq_dist(p, centroids[0]);
    for (size_t j = 1; j < centroids.size(); ++j) {
        const double d = sq_dist(p, centroids[j]);
        if (d < best_d) {
            best_d = d;
            best = static_cast<int>(j);
        }
    }
    return best;
}

}  // namespace detail

inline std::vector<std::vector<float>> image_patches(const ImageTensor& img, int patch_px) {
    if (img.height % patch_px != 0 || img.width % patch_px != 0) {
        throw DimensionError("patch size " + std::to_string(patch_px) + " does not divide image " +
                             std::to_string(img.width) + "x" + std::to_string(img.height));
    }
    std::vector<std::vector<float>> patches;
    for (int py = 0; py < img.height / patch_px; ++py)
        for (int px = 0; px < img.width / patch_px; ++px) patches.push_back(detail::extract_patch(img, py, px, patch_px));
    return patches;
}

// Seeded k-means++ over all image patches; iteration cap 50, relative
// inertia tolerance 1e-6.
inline Codebook fit_codebook(const std::vector<ImageTensor>& images, int k, uint64_t seed, int patch_px = 8) {
    if (k < 2) throw ValidationError("codebook needs k >= 2");
    std::vector<std::vector<float>> patches;
    for (const auto& img : images) {
        auto p = image_patches(img, patch_px);
        patches.insert(patches.end(), p.begin(), p.end());
    }
    std::set<std::vector<float>> distinct(patches.begin(), patches.end());
    if (static_cast<int>(distinct.size()) < k) {
        throw ValidationError("only " + std::to_string(distinct.size()) + " distinct patches for k=" + std::to_string(k));
    }

    Rng rng(seed);
    Codebook cb;
    cb.k = k;
    cb.patch_px = patch_px;

    // k-means++ seeding over distinct patches so duplicates cannot collapse picks
    std::vector<std::vector<float>> uniq(distinct.begin(), distinct.end());
    cb.centroids.push_back(uniq[rng.below(uniq.size())]);
    std::vector<double> d2(uniq.size());
    while (static_cast<int>(cb.centroids.size()) < k) {
        double total = 0.0;
        for (size_t i = 0; i < uniq.size(); ++i) {
            d2[i] = detail::sq_dist(uniq[i], cb.centroids[0]);
            for (size_t j = 1; j < cb.centroids.size(); ++j) d2[i] = std::min(d2[i], detail::sq_dist(uniq[i], cb.centroids[j]));
            total += d2[i];
        }
        if (total <= 0.0) {
            cb.centroids.push_back(uniq[rng.below(uniq.size())]);
            continue;
        }
        double r = rng.uniform() * total;
        size_t pick = uniq.size() - 1;
        double acc = 0.0;
        for (size_t i = 0; i < uniq.size(); ++i) {
            acc += d2[i];
            if (r < acc) {
                pick = i;
                break;
            }
        }
        cb.centroids.push_back(uniq[pick]);
    }

    const int dim = cb.patch_dim();
    std::vector<int> assign(patches.size(), 0);
    double prev_inertia = std::numeric_limits<double>::infinity();
    for (int iter = 0; iter < 50; ++iter) {
        double inertia = 0.0;
        for (size_t i = 0; i < patches.size(); ++i) {
            assign[i] = detail::nearest_centroid(patches[i], cb.centroids);
            inertia += detail::sq_dist(patches[i], cb.centroids[assign[i]]);
        }
        cb.inertia_history.push_back(inertia);
        cb.fit_iterations = iter + 1;
        cb.inertia = inertia;
        if (prev_inertia - inertia <= 1e-6 * std::max(prev_inertia, 1e-12)) break;
        prev_inertia = inertia;

        std::vector<std::vector<double>> sums(k, std::vector<double>(dim, 0.0));
        std::vector<long long> counts(k, 0);
        for (size_t i = 0; i < patches.size(); ++i) {
            auto& s = sums[assign[i]];
            for (int j = 0; j < dim; ++j) s[j] += patches[i][j];
            ++counts[assign[i]];
        }
        for (int c = 0; c < k; ++c) {
            if (counts[c] == 0) {
                // revive from the patch farthest from its centroid
                size_t far = 0;
                double far_d = -1.0;
                for (size_t i = 0; i < patches.size(); ++i) {
                    const double d = detail::sq_dist(patches[i], cb.centroids[assign[i]]);
                    if (d > far_d) {
                        far_d = d;
                        far = i;
                    }
                }
                cb.centroids[c] = patches[far];
                assign[far] = c;
                continue;
            }
            for (int j = 0; j < dim; ++j) cb.centroids[c][j] = static_cast<float>(sums[c][j] / counts[c]);
        }
    }
    cb.trained = true;
    return cb;
}

// Row-major grid of nearest-centroid indices.
inline std::vector<int> quantize_image(const ImageTensor& img, const Codebook& cb) {
    if (!cb.trained) throw ValidationError("codebook is not trained");
    auto patches = image_patches(img, cb.patch_px);
    std::vector<int> tokens(patches.size());
    for (size_t i = 0; i < patches.size(); ++i) tokens[i] = detail::nearest_centroid(patches[i], cb.centroids);
    return tokens;
}

inline ImageTensor dequantize_image(const std::vector<int>& tokens, const Codebook& cb, int height, int width) {
    const int rows = height / cb.patch_px, cols = width / cb.patch_px;
    if (height % cb.patch_px != 0 || width % cb.patch_px != 0 ||
        static_cast<int>(tokens.size()) != rows * cols) {
        throw DimensionError("token grid of " + std::to_string(tokens.size()) + " does not tile " +
                             std::to_string(width) + "x" + std::to_string(height));
    }
    ImageTensor img = ImageTensor::zeros(height, width);
    for (int py = 0; py < rows; ++py) {
        for (int px = 0; px < cols; ++px) {
            const int t = tokens[py * cols + px];
            if (t < 0 || t >= cb.k) throw IndexError("image code " + std::to_string(t) + " out of range");
            const auto& c = cb.centroids[t];
            size_t w = 0;
            for (int y = 0; y < cb.patch_px; ++y)
                for (int x = 0; x < cb.patch_px; ++x)
                    for (int ch = 0; ch < 3; ++ch)
                        img.at(py * cb.patch_px + y, px * cb.patch_px + x, ch) = c[w++];
        }
    }
    img.clamp01();
    return img;
}

// "UMVQ" codebook file: magic, version, K, patch_px, centroid reals.
inline void write_codebook(const std::filesystem::path& path, const Codebook& cb) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write codebook " + path.string());
    out.write("UMVQ", 4);
    detail::write_u32(out, kCodebookVersion);
    detail::write_u32(out, static_cast<uint32_t>(cb.k));
    detail::write_u32(out, static_cast<uint32_t>(cb.patch_px));
    for (const auto& c : cb.centroids) detail::write_f32(out, c.data(), c.size());
}

inline Codebook read_codebook(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open codebook " + path.string());
    char magic[4];
    in.read(magic, 4);
    if (!in || std::string(magic, 4) != "UMVQ") throw DataError("bad codebook magic in " + path.string());
    const uint32_t version = detail::read_u32(in);
    if (version != kCodebookVersion) throw DataError("unknown codebook version " + std::to_string(version));
    Codebook cb;
    cb.k = static_cast<int>(detail::read_u32(in));
    cb.patch_px = static_cast<int>(detail::read_u32(in));
    cb.centroids.assign(cb.k, std::vector<float>(static_cast<size_t>(cb.patch_dim())));
    for (auto& c : cb.centroids) {
        in.read(reinterpret_cast<char*>(c.data()), static_cast<std::streamsize>(c.size() * 4));
        if (!in) throw DataError("truncated codebook " + path.string());
    }
    cb.trained = true;
    return cb;
}

}  // namespace unimp
