#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "roadclip/errors.hpp"

namespace roadclip {

/// Single-channel image with float pixels in [0,1], row-major.
struct GrayImage {
    int width = 0;
    int height = 0;
    std::vector<float> pix;

    GrayImage() = default;
    GrayImage(int w, int h, float fill = 0.0f)
        : width(w), height(h), pix(static_cast<size_t>(w) * h, fill) {}

    float at(int r, int c) const { return pix[static_cast<size_t>(r) * width + c]; }
    float& at(int r, int c) { return pix[static_cast<size_t>(r) * width + c]; }
};

inline uint8_t quantize_u8(float v) {
    float s = std::round(v * 255.0f);
    if (s < 0.0f) s = 0.0f;
    if (s > 255.0f) s = 255.0f;
    return static_cast<uint8_t>(s);
}

/// Canonical P5 bytes: fixed header layout so output is reproducible.
inline std::vector<uint8_t> pgm_bytes(const std::vector<uint8_t>& v, int width, int height) {
    std::string header = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
    std::vector<uint8_t> out(header.begin(), header.end());
    out.insert(out.end(), v.begin(), v.end());
    return out;
}

inline void write_pgm(const std::filesystem::path& path, const std::vector<uint8_t>& v, int width,
                      int height) {
    if (static_cast<size_t>(width) * height != v.size())
        throw ValidationError("write_pgm: pixel count does not match " + std::to_string(width) + "x" +
                              std::to_string(height));
    auto bytes = pgm_bytes(v, width, height);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("write_pgm: cannot open " + path.string());
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write_pgm: write failed for " + path.string());
}

struct PgmData {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> pix;
};

inline PgmData read_pgm(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("read_pgm: cannot open " + path.string());
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    f >> magic >> w >> h >> maxval;
    if (magic != "P5" || maxval != 255 || w <= 0 || h <= 0)
        throw IoError("read_pgm: " + path.string() + " is not an 8-bit P5 graymap");
    f.get();  // single whitespace byte after the header
    PgmData out;
    out.width = w;
    out.height = h;
    out.pix.resize(static_cast<size_t>(w) * h);
    f.read(reinterpret_cast<char*>(out.pix.data()), static_cast<std::streamsize>(out.pix.size()));
    if (f.gcount() != static_cast<std::streamsize>(out.pix.size()))
        throw IoError("read_pgm: " + path.string() + " truncated");
    return out;
}

inline std::vector<uint8_t> quantize_image(const GrayImage& img) {
    std::vector<uint8_t> v(img.pix.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = quantize_u8(img.pix[i]);
    return v;
}

inline GrayImage image_from_u8(const PgmData& p) {
    GrayImage img(p.width, p.height);
    for (size_t i = 0; i < p.pix.size(); ++i) img.pix[i] = static_cast<float>(p.pix[i]) / 255.0f;
    return img;
}

/// Rigid transform: rotate by `angle_rad` (clockwise on screen, row 0 at top)
/// about the image center, then translate by integer (dx, dy).  Nearest
/// neighbor with edge replication.  Zero magnitudes reproduce the input
/// bit-identically; right angles are exact because the rounded sample grid is
/// itself exact.
inline GrayImage spatial_transform(const GrayImage& img, int dx, int dy, double angle_rad) {
    if (dx == 0 && dy == 0 && angle_rad == 0.0) return img;
    GrayImage out(img.width, img.height);
    double cx = (img.width - 1) / 2.0, cy = (img.height - 1) / 2.0;
    double cosw = std::cos(angle_rad), sinw = std::sin(angle_rad);
    for (int r = 0; r < img.height; ++r) {
        for (int c = 0; c < img.width; ++c) {
            double xc = c - cx - dx;
            double yr = r - cy - dy;
            double sx = cosw * xc + sinw * yr;
            double sy = -sinw * xc + cosw * yr;
            int sc = static_cast<int>(std::lround(sx + cx));
            int sr = static_cast<int>(std::lround(sy + cy));
            sc = std::clamp(sc, 0, img.width - 1);
            sr = std::clamp(sr, 0, img.height - 1);
            out.at(r, c) = img.at(sr, sc);
        }
    }
    return out;
}

}  // namespace roadclip
