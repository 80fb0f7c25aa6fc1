#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "roadclip/errors.hpp"
#include "roadclip/image.hpp"
#include "roadclip/rng.hpp"
#include "roadclip/threading.hpp"
#include "roadclip/tokenizer.hpp"

namespace roadclip {

// Procedural miniature road-damage benchmark: seeded renderer for ten defect
// classes over noisy asphalt, pixel-exact masks kept by the draw pass itself,
// a closed caption grammar with a parser as its inverse, and a persisted
// dataset layout whose bytes are a pure function of the manifest.

// ----------------------------------------------------------------- taxonomy

inline constexpr int kNumClasses = 10;
inline constexpr int kLongitudinalCrack = 0;
inline constexpr int kTransverseCrack = 1;
inline constexpr int kAlligatorCracking = 2;
inline constexpr int kPothole = 3;
inline constexpr int kPatchRepair = 4;
inline constexpr int kEdgeCrack = 5;
inline constexpr int kCenterlineCrack = 6;
inline constexpr int kDiscoloration = 7;
inline constexpr int kMixedDamage = 8;
inline constexpr int kIrregularDefect = 9;

inline const std::vector<std::string>& damage_class_names() {
    static const std::vector<std::string> names = {
        "longitudinal crack", "transverse crack", "alligator cracking", "pothole",
        "patch repair",       "edge crack",       "centerline crack",   "discoloration",
        "mixed damage",       "irregular defect"};
    return names;
}

inline const std::string& damage_class_name(int k) {
    if (k < 0 || k >= kNumClasses)
        throw ValidationError("damage class: index " + std::to_string(k) + " out of range");
    return damage_class_names()[static_cast<size_t>(k)];
}

inline int parse_damage_class(const std::string& name) {
    const auto& names = damage_class_names();
    for (int k = 0; k < kNumClasses; ++k)
        if (names[static_cast<size_t>(k)] == name) return k;
    throw ValidationError("damage class: unknown name '" + name + "'");
}

enum class Severity { hairline, moderate, severe };
enum class PositionTag { center, edge, shoulder, centerline };
enum class Environment { bright, wet, foggy, dark };

inline const char* severity_name(Severity s) {
    switch (s) {
        case Severity::hairline: return "hairline";
        case Severity::moderate: return "moderate";
        case Severity::severe: return "severe";
    }
    throw ValidationError("severity: bad enum value");
}

inline Severity parse_severity(const std::string& s) {
    if (s == "hairline") return Severity::hairline;
    if (s == "moderate") return Severity::moderate;
    if (s == "severe") return Severity::severe;
    throw ValidationError("severity: unknown name '" + s + "'");
}

inline const char* position_name(PositionTag p) {
    switch (p) {
        case PositionTag::center: return "center";
        case PositionTag::edge: return "edge";
        case PositionTag::shoulder: return "shoulder";
        case PositionTag::centerline: return "centerline";
    }
    throw ValidationError("position: bad enum value");
}

inline PositionTag parse_position(const std::string& s) {
    if (s == "center") return PositionTag::center;
    if (s == "edge") return PositionTag::edge;
    if (s == "shoulder") return PositionTag::shoulder;
    if (s == "centerline") return PositionTag::centerline;
    throw ValidationError("position: unknown name '" + s + "'");
}

inline const char* environment_name(Environment e) {
    switch (e) {
        case Environment::bright: return "bright";
        case Environment::wet: return "wet";
        case Environment::foggy: return "foggy";
        case Environment::dark: return "dark";
    }
    throw ValidationError("environment: bad enum value");
}

inline Environment parse_environment(const std::string& s) {
    if (s == "bright") return Environment::bright;
    if (s == "wet") return Environment::wet;
    if (s == "foggy") return Environment::foggy;
    if (s == "dark") return Environment::dark;
    throw ValidationError("environment: unknown name '" + s + "'");
}

// ---------------------------------------------------------------- spec

/// Full recipe for one rendered defect.  Which geometry fields are live
/// depends on the class: cracks use the endpoints, round and boxy defects the
/// center/radius/aspect, the scribble its step count.
struct DefectSpec {
    int damage = 0;
    Severity severity = Severity::moderate;
    PositionTag position = PositionTag::center;
    Environment environment = Environment::bright;
    double length_m = 1.0;  // nominal metric dimension, snapped to 0.5 steps

    double x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // polyline endpoints, px
    double cx = 0, cy = 0;                  // center, px
    double radius = 0;                      // radius or half extent, px
    double aspect = 1.0;                    // ellipse/box squish in [0.5, 1]
    int width_px = 2;                       // stroke width
    int steps = 0;                          // scribble step count
    double contrast = 0.2;                  // darkening depth
    int mix_a = -1, mix_b = -1;             // mixed damage component classes
};

inline void to_json(nlohmann::json& j, const DefectSpec& s) {
    j = nlohmann::json{{"class", damage_class_name(s.damage)},
                       {"severity", severity_name(s.severity)},
                       {"position", position_name(s.position)},
                       {"environment", environment_name(s.environment)},
                       {"length_m", s.length_m},
                       {"x0", s.x0},
                       {"y0", s.y0},
                       {"x1", s.x1},
                       {"y1", s.y1},
                       {"cx", s.cx},
                       {"cy", s.cy},
                       {"radius", s.radius},
                       {"aspect", s.aspect},
                       {"width_px", s.width_px},
                       {"steps", s.steps},
                       {"contrast", s.contrast}};
    if (s.damage == kMixedDamage) {
        j["mix_a"] = damage_class_name(s.mix_a);
        j["mix_b"] = damage_class_name(s.mix_b);
    }
}

inline void from_json(const nlohmann::json& j, DefectSpec& s) {
    s.damage = parse_damage_class(j.at("class").get<std::string>());
    s.severity = parse_severity(j.at("severity").get<std::string>());
    s.position = parse_position(j.at("position").get<std::string>());
    s.environment = parse_environment(j.at("environment").get<std::string>());
    s.length_m = j.at("length_m").get<double>();
    s.x0 = j.at("x0").get<double>();
    s.y0 = j.at("y0").get<double>();
    s.x1 = j.at("x1").get<double>();
    s.y1 = j.at("y1").get<double>();
    s.cx = j.at("cx").get<double>();
    s.cy = j.at("cy").get<double>();
    s.radius = j.at("radius").get<double>();
    s.aspect = j.at("aspect").get<double>();
    s.width_px = j.at("width_px").get<int>();
    s.steps = j.at("steps").get<int>();
    s.contrast = j.at("contrast").get<double>();
    s.mix_a = j.contains("mix_a") ? parse_damage_class(j.at("mix_a").get<std::string>()) : -1;
    s.mix_b = j.contains("mix_b") ? parse_damage_class(j.at("mix_b").get<std::string>()) : -1;
}

// ---------------------------------------------------------------- grammar

/// "long" for linear defects, "across" for areal ones, "in diameter" for
/// potholes; fixed per class so captions parse back unambiguously.
inline std::string dimension_phrase(int damage) {
    switch (damage) {
        case kPothole: return "in diameter";
        case kAlligatorCracking:
        case kPatchRepair:
        case kDiscoloration:
        case kMixedDamage: return "across";
        default: return "long";
    }
}

inline std::string generate_caption(const DefectSpec& spec) {
    std::string cls = damage_class_name(spec.damage);
    if (spec.damage == kMixedDamage) {
        if (spec.mix_a < 0 || spec.mix_b < 0 || spec.mix_a == spec.mix_b)
            throw ValidationError("generate_caption: mixed damage needs two distinct components");
        cls += " of " + damage_class_name(spec.mix_a) + " and " + damage_class_name(spec.mix_b);
    }
    return "a " + std::string(severity_name(spec.severity)) + " " + cls + " about " +
           Tokenizer::format_meters(spec.length_m) + " meters " + dimension_phrase(spec.damage) +
           " at the " + position_name(spec.position) + " of the road, " +
           environment_name(spec.environment) + " conditions";
}

struct ParsedCaption {
    int damage = 0;
    Severity severity = Severity::moderate;
    PositionTag position = PositionTag::center;
    Environment environment = Environment::bright;
    double length_m = 0.0;
    int mix_a = -1, mix_b = -1;
};

/// Inverse of generate_caption on the closed grammar; throws on any text the
/// grammar cannot have produced.
inline ParsedCaption parse_caption(const std::string& caption) {
    std::vector<std::string> w;
    std::string cur;
    for (char ch : caption) {
        if (ch == ' ') {
            if (!cur.empty()) w.push_back(cur);
            cur.clear();
        } else if (ch != ',') {
            cur.push_back(ch);
        }
    }
    if (!cur.empty()) w.push_back(cur);

    size_t i = 0;
    auto need = [&](const std::string& what) -> const std::string& {
        if (i >= w.size()) throw ValidationError("parse_caption: truncated before " + what);
        return w[i++];
    };
    auto expect = [&](const std::string& word) {
        const auto& got = need("'" + word + "'");
        if (got != word)
            throw ValidationError("parse_caption: expected '" + word + "', got '" + got + "'");
    };

    ParsedCaption out;
    expect("a");
    out.severity = parse_severity(need("severity"));

    std::vector<std::string> cls_words;
    while (i < w.size() && w[i] != "about") cls_words.push_back(w[i++]);
    auto join = [](const std::vector<std::string>& parts, size_t a, size_t b) {
        std::string s;
        for (size_t k = a; k < b; ++k) {
            if (k > a) s += " ";
            s += parts[k];
        }
        return s;
    };
    auto of_it = std::find(cls_words.begin(), cls_words.end(), "of");
    if (of_it != cls_words.end()) {
        size_t of_pos = static_cast<size_t>(of_it - cls_words.begin());
        out.damage = parse_damage_class(join(cls_words, 0, of_pos));
        auto and_it = std::find(cls_words.begin() + static_cast<long>(of_pos), cls_words.end(), "and");
        if (and_it == cls_words.end())
            throw ValidationError("parse_caption: mixed damage without 'and'");
        size_t and_pos = static_cast<size_t>(and_it - cls_words.begin());
        out.mix_a = parse_damage_class(join(cls_words, of_pos + 1, and_pos));
        out.mix_b = parse_damage_class(join(cls_words, and_pos + 1, cls_words.size()));
    } else {
        out.damage = parse_damage_class(join(cls_words, 0, cls_words.size()));
    }

    expect("about");
    {
        const auto& num = need("dimension");
        size_t used = 0;
        out.length_m = std::stod(num, &used);
        if (used != num.size())
            throw ValidationError("parse_caption: bad dimension '" + num + "'");
    }
    expect("meters");
    {
        const auto& dim = need("dimension word");
        std::string expected = dimension_phrase(out.damage);
        if (dim == "in") {
            expect("diameter");
            if (expected != "in diameter")
                throw ValidationError("parse_caption: 'in diameter' on a non-pothole class");
        } else if (dim != expected) {
            throw ValidationError("parse_caption: dimension word '" + dim +
                                  "' does not fit class '" + damage_class_name(out.damage) + "'");
        }
    }
    expect("at");
    expect("the");
    out.position = parse_position(need("position"));
    expect("of");
    expect("the");
    expect("road");
    out.environment = parse_environment(need("environment"));
    expect("conditions");
    if (i != w.size()) throw ValidationError("parse_caption: trailing words after 'conditions'");
    return out;
}

// ---------------------------------------------------------------- renderer

/// Pixels that deviate from the defect-free plate by more than this are
/// expected to be defect work; the faithfulness invariant is stated at it.
inline constexpr float kContrastFloor = 0.08f;

/// Outer band width (edge cracks) and central half band (centerline cracks).
inline int edge_band_width(int side) { return static_cast<int>(std::lround(0.15 * side)); }
inline int centerline_half_band(int side) { return static_cast<int>(std::lround(0.05 * side)); }

namespace synthdetail {

/// Draw-pass bookkeeping: every write marks the mask, so mask support and
/// touched support are the same set by construction.
struct Canvas {
    GrayImage& img;
    std::vector<uint8_t>& mask;

    void shade(int r, int c, float delta) {
        if (r < 0 || r >= img.height || c < 0 || c >= img.width) return;
        float v = img.at(r, c) + delta;
        img.at(r, c) = std::clamp(v, 0.0f, 1.0f);
        mask[static_cast<size_t>(r) * img.width + c] = 1;
    }

    void put(int r, int c, float v) {
        if (r < 0 || r >= img.height || c < 0 || c >= img.width) return;
        img.at(r, c) = std::clamp(v, 0.0f, 1.0f);
        mask[static_cast<size_t>(r) * img.width + c] = 1;
    }
};

struct P2 {
    double x = 0, y = 0;
};

inline double dist_to_segment(double px, double py, const P2& a, const P2& b) {
    double vx = b.x - a.x, vy = b.y - a.y;
    double wx = px - a.x, wy = py - a.y;
    double vv = vx * vx + vy * vy;
    double t = vv > 0.0 ? std::clamp((wx * vx + wy * vy) / vv, 0.0, 1.0) : 0.0;
    double dx = px - (a.x + t * vx), dy = py - (a.y + t * vy);
    return std::sqrt(dx * dx + dy * dy);
}

/// Pixels within half width of any segment of the polyline, row-major order.
inline std::vector<size_t> polyline_support(const std::vector<P2>& pts, double half_w, int side) {
    std::vector<uint8_t> hit(static_cast<size_t>(side) * side, 0);
    for (size_t s = 0; s + 1 < pts.size(); ++s) {
        int r0 = std::max(0, static_cast<int>(std::floor(std::min(pts[s].y, pts[s + 1].y) - half_w - 1)));
        int r1 = std::min(side - 1, static_cast<int>(std::ceil(std::max(pts[s].y, pts[s + 1].y) + half_w + 1)));
        int c0 = std::max(0, static_cast<int>(std::floor(std::min(pts[s].x, pts[s + 1].x) - half_w - 1)));
        int c1 = std::min(side - 1, static_cast<int>(std::ceil(std::max(pts[s].x, pts[s + 1].x) + half_w + 1)));
        for (int r = r0; r <= r1; ++r)
            for (int c = c0; c <= c1; ++c)
                if (dist_to_segment(c, r, pts[s], pts[s + 1]) <= half_w)
                    hit[static_cast<size_t>(r) * side + c] = 1;
    }
    std::vector<size_t> out;
    for (size_t i = 0; i < hit.size(); ++i)
        if (hit[i]) out.push_back(i);
    return out;
}

/// Wobbly crack path between the spec endpoints.  Wobble is drawn from the
/// render stream; an optional column clamp keeps band-bound classes inside
/// their band for any draw.
inline std::vector<P2> crack_path(const DefectSpec& spec, Rng& rng, double wobble_amp,
                                  double clamp_lo_x = -1.0, double clamp_hi_x = -1.0) {
    double len = std::hypot(spec.x1 - spec.x0, spec.y1 - spec.y0);
    int segs = std::max(2, static_cast<int>(len / 5.0));
    double nx = -(spec.y1 - spec.y0) / std::max(len, 1e-9);
    double ny = (spec.x1 - spec.x0) / std::max(len, 1e-9);
    std::vector<P2> pts;
    double w = 0.0;
    for (int s = 0; s <= segs; ++s) {
        double t = static_cast<double>(s) / segs;
        if (s == 0 || s == segs)
            w = 0.0;
        else
            w = 0.55 * w + rng.uniform(-wobble_amp, wobble_amp);
        P2 p{spec.x0 + t * (spec.x1 - spec.x0) + w * nx, spec.y0 + t * (spec.y1 - spec.y0) + w * ny};
        if (clamp_lo_x >= 0.0) p.x = std::clamp(p.x, clamp_lo_x, clamp_hi_x);
        pts.push_back(p);
    }
    return pts;
}

inline float severity_contrast(Severity s) {
    switch (s) {
        case Severity::hairline: return 0.14f;
        case Severity::moderate: return 0.22f;
        case Severity::severe: return 0.32f;
    }
    return 0.22f;
}

inline int severity_width(Severity s) {
    switch (s) {
        case Severity::hairline: return 1;
        case Severity::moderate: return 2;
        case Severity::severe: return 3;
    }
    return 2;
}

inline void darken_support(Canvas& cv, const std::vector<size_t>& support, float contrast,
                           Rng& rng, int side) {
    for (size_t idx : support) {
        int r = static_cast<int>(idx / static_cast<size_t>(side));
        int c = static_cast<int>(idx % static_cast<size_t>(side));
        cv.shade(r, c, -contrast * static_cast<float>(0.8 + 0.4 * rng.uniform()));
    }
}

inline void draw_crack_between(Canvas& cv, const DefectSpec& spec, Rng& rng, int side,
                               double clamp_lo = -1.0, double clamp_hi = -1.0) {
    double wobble = spec.severity == Severity::hairline ? 1.0 : 1.6;
    auto pts = crack_path(spec, rng, wobble, clamp_lo, clamp_hi);
    auto support = polyline_support(pts, spec.width_px / 2.0, side);
    darken_support(cv, support, static_cast<float>(spec.contrast), rng, side);
}

inline void draw_pothole(Canvas& cv, double cx, double cy, double radius, double aspect,
                         float contrast, Rng& rng, int side) {
    // ragged radius: two low harmonics, fixed per defect
    double ph0 = rng.uniform(0.0, 2.0 * std::numbers::pi);
    double ph1 = rng.uniform(0.0, 2.0 * std::numbers::pi);
    int r0 = std::max(0, static_cast<int>(cy - radius - 2));
    int r1 = std::min(side - 1, static_cast<int>(cy + radius + 2));
    int c0 = std::max(0, static_cast<int>(cx - radius - 2));
    int c1 = std::min(side - 1, static_cast<int>(cx + radius + 2));
    std::vector<std::pair<int, int>> inside;
    for (int r = r0; r <= r1; ++r)
        for (int c = c0; c <= c1; ++c) {
            double dx = (c - cx), dy = (r - cy) / aspect;
            double d = std::hypot(dx, dy);
            double phi = std::atan2(dy, dx);
            double edge = radius * (1.0 + 0.08 * std::sin(3.0 * phi + ph0) +
                                    0.05 * std::sin(5.0 * phi + ph1));
            if (d <= edge) inside.emplace_back(r, c);
        }
    for (auto [r, c] : inside) {
        double dx = (c - cx), dy = (r - cy) / aspect;
        double d = std::hypot(dx, dy) / std::max(radius, 1e-9);
        // deep center, darker ragged rim ring near the boundary
        float base = 0.60f - contrast * static_cast<float>(1.35 - 0.55 * d * d);
        if (d > 0.78) base -= 0.06f;
        base += static_cast<float>(rng.uniform(-0.03, 0.03));
        cv.put(r, c, base);
    }
}

inline void draw_patch(Canvas& cv, double cx, double cy, double half_w, double half_h,
                       Rng& rng, int side) {
    int r0 = std::max(0, static_cast<int>(std::lround(cy - half_h)));
    int r1 = std::min(side - 1, static_cast<int>(std::lround(cy + half_h)));
    int c0 = std::max(0, static_cast<int>(std::lround(cx - half_w)));
    int c1 = std::min(side - 1, static_cast<int>(std::lround(cx + half_w)));
    for (int r = r0; r <= r1; ++r)
        for (int c = c0; c <= c1; ++c) {
            bool border = (r == r0 || r == r1 || c == c0 || c == c1);
            float v = 0.42f + static_cast<float>(rng.uniform(-0.025, 0.025));
            if (border) v -= 0.08f;
            cv.put(r, c, v);
        }
}

inline void draw_discoloration(Canvas& cv, const DefectSpec& spec, Rng& rng, int side) {
    double amp = 0.12 + 0.02 * static_cast<int>(spec.severity);
    // support ends where the falloff drops to 0.02
    double support_r = spec.radius * std::sqrt(std::log(amp / 0.02) / 2.0);
    int r0 = std::max(0, static_cast<int>(spec.cy - support_r - 1));
    int r1 = std::min(side - 1, static_cast<int>(spec.cy + support_r + 1));
    int c0 = std::max(0, static_cast<int>(spec.cx - support_r - 1));
    int c1 = std::min(side - 1, static_cast<int>(spec.cx + support_r + 1));
    for (int r = r0; r <= r1; ++r)
        for (int c = c0; c <= c1; ++c) {
            double d = std::hypot(c - spec.cx, (r - spec.cy) / spec.aspect);
            if (d > support_r) continue;
            double shift = amp * std::exp(-2.0 * (d / spec.radius) * (d / spec.radius));
            cv.shade(r, c, static_cast<float>(shift + rng.uniform(-0.008, 0.008)));
        }
}

inline void draw_alligator(Canvas& cv, const DefectSpec& spec, Rng& rng, int side) {
    double h = spec.radius;  // half box extent
    double spacing = 3.2 + 1.0 * spec.aspect;
    float contrast = static_cast<float>(spec.contrast);
    double half_w = std::max(1, spec.width_px) / 2.0;
    std::vector<uint8_t> hit(static_cast<size_t>(side) * side, 0);
    auto stamp = [&](const std::vector<P2>& pts) {
        for (size_t i : polyline_support(pts, half_w, side)) hit[i] = 1;
    };
    for (double x = spec.cx - h; x <= spec.cx + h + 1e-9; x += spacing) {
        std::vector<P2> pts;
        for (double y = spec.cy - h; y <= spec.cy + h + 1e-9; y += 4.0)
            pts.push_back({x + rng.uniform(-1.4, 1.4), y});
        stamp(pts);
    }
    for (double y = spec.cy - h; y <= spec.cy + h + 1e-9; y += spacing) {
        std::vector<P2> pts;
        for (double x = spec.cx - h; x <= spec.cx + h + 1e-9; x += 4.0)
            pts.push_back({x, y + rng.uniform(-1.4, 1.4)});
        stamp(pts);
    }
    std::vector<size_t> support;
    for (size_t i = 0; i < hit.size(); ++i)
        if (hit[i]) support.push_back(i);
    darken_support(cv, support, contrast, rng, side);
}

inline void draw_scribble(Canvas& cv, const DefectSpec& spec, Rng& rng, int side) {
    std::vector<P2> pts;
    double x = spec.x0, y = spec.y0;
    double dir = rng.uniform(0.0, 2.0 * std::numbers::pi);
    pts.push_back({x, y});
    double lo = 2.0, hi = side - 3.0;
    for (int s = 0; s < spec.steps; ++s) {
        dir += rng.uniform(-0.7, 0.7);
        x += std::cos(dir);
        y += std::sin(dir);
        if (x < lo || x > hi) {
            dir = std::numbers::pi - dir;
            x = std::clamp(x, lo, hi);
        }
        if (y < lo || y > hi) {
            dir = -dir;
            y = std::clamp(y, lo, hi);
        }
        pts.push_back({x, y});
    }
    auto support = polyline_support(pts, spec.width_px / 2.0, side);
    darken_support(cv, support, static_cast<float>(spec.contrast), rng, side);
}

}  // namespace synthdetail

/// Asphalt-like plate: mean near 0.6, coarse undulation plus fine grain.
inline GrayImage render_background(int side, Rng rng) {
    int cells = 8;
    std::vector<double> coarse(static_cast<size_t>(cells + 1) * (cells + 1));
    for (auto& v : coarse) v = rng.uniform(-0.03, 0.03);
    GrayImage img(side, side);
    double cell_px = static_cast<double>(side) / cells;
    for (int r = 0; r < side; ++r)
        for (int c = 0; c < side; ++c) {
            double gx = c / cell_px, gy = r / cell_px;
            int ix = std::min(cells - 1, static_cast<int>(gx));
            int iy = std::min(cells - 1, static_cast<int>(gy));
            double fx = gx - ix, fy = gy - iy;
            auto at = [&](int yy, int xx) {
                return coarse[static_cast<size_t>(yy) * (cells + 1) + xx];
            };
            double low = (1 - fx) * (1 - fy) * at(iy, ix) + fx * (1 - fy) * at(iy, ix + 1) +
                         (1 - fx) * fy * at(iy + 1, ix) + fx * fy * at(iy + 1, ix + 1);
            img.at(r, c) = static_cast<float>(0.6 + low + rng.uniform(-0.035, 0.035));
        }
    return img;
}

/// Per-pixel tone map for the environment tag; no spatial mixing, so defect
/// support is exactly preserved.
inline float apply_environment(Environment e, float v) {
    float out = v;
    switch (e) {
        case Environment::bright: out = v * 1.18f; break;
        case Environment::wet: out = 0.5f + (v - 0.5f) * 1.25f - 0.06f; break;
        case Environment::foggy: out = v * 0.55f + 0.75f * 0.45f; break;
        case Environment::dark: out = v * 0.62f; break;
    }
    return std::clamp(out, 0.0f, 1.0f);
}

inline void validate_spec(const DefectSpec& spec, int side) {
    auto in_box = [&](double x, double y) {
        return x >= 0.0 && x <= side - 1.0 && y >= 0.0 && y <= side - 1.0;
    };
    if (spec.damage < 0 || spec.damage >= kNumClasses)
        throw ValidationError("render_sample: class index " + std::to_string(spec.damage) +
                              " out of range");
    if (spec.width_px < 1 || spec.width_px > 6)
        throw ValidationError("render_sample: stroke width " + std::to_string(spec.width_px) +
                              " outside [1, 6]");
    switch (spec.damage) {
        case kLongitudinalCrack:
        case kTransverseCrack:
        case kEdgeCrack:
        case kCenterlineCrack:
            if (!in_box(spec.x0, spec.y0) || !in_box(spec.x1, spec.y1))
                throw ValidationError("render_sample: crack endpoints outside image");
            break;
        case kPothole:
        case kDiscoloration:
        case kAlligatorCracking:
        case kPatchRepair:
            if (spec.radius < 2.0)
                throw ValidationError("render_sample: radius " + std::to_string(spec.radius) +
                                      " too small");
            if (!in_box(spec.cx - spec.radius, spec.cy - spec.radius) ||
                !in_box(spec.cx + spec.radius, spec.cy + spec.radius))
                throw ValidationError("render_sample: defect extent outside image");
            break;
        case kMixedDamage:
            if (spec.mix_a < 0 || spec.mix_b < 0 || spec.mix_a == spec.mix_b)
                throw ValidationError("render_sample: mixed damage needs two distinct components");
            if (spec.mix_a == kMixedDamage || spec.mix_b == kMixedDamage)
                throw ValidationError("render_sample: mixed damage cannot nest");
            if (!in_box(spec.x0, spec.y0) || !in_box(spec.x1, spec.y1) ||
                !in_box(spec.cx - spec.radius, spec.cy - spec.radius) ||
                !in_box(spec.cx + spec.radius, spec.cy + spec.radius))
                throw ValidationError("render_sample: mixed components outside image");
            break;
        case kIrregularDefect:
            if (!in_box(spec.x0, spec.y0) || spec.steps < 1)
                throw ValidationError("render_sample: scribble start or steps invalid");
            break;
        default: break;
    }
}

struct RenderParts {
    GrayImage background;  // defect-free plate, same environment, quantized
    GrayImage image;       // final image, quantized to the u8 grid
    std::vector<uint8_t> mask;  // 0/1 per pixel
};

inline void draw_defect(synthdetail::Canvas& cv, const DefectSpec& spec, Rng& rng, int side) {
    using namespace synthdetail;
    switch (spec.damage) {
        case kLongitudinalCrack:
        case kTransverseCrack:
            draw_crack_between(cv, spec, rng, side);
            break;
        case kEdgeCrack: {
            int band = edge_band_width(side);
            double half_w = spec.width_px / 2.0;
            bool left = spec.x0 < side / 2.0;
            double lo = left ? half_w : side - band + half_w;
            double hi = left ? band - 1 - half_w : side - 1 - half_w;
            draw_crack_between(cv, spec, rng, side, lo, hi);
            break;
        }
        case kCenterlineCrack: {
            int half_band = centerline_half_band(side);
            double half_w = spec.width_px / 2.0;
            double lo = side / 2.0 - half_band + half_w;
            double hi = side / 2.0 + half_band - 1 - half_w;
            draw_crack_between(cv, spec, rng, side, lo, hi);
            break;
        }
        case kAlligatorCracking:
            draw_alligator(cv, spec, rng, side);
            break;
        case kPothole:
            draw_pothole(cv, spec.cx, spec.cy, spec.radius, spec.aspect,
                         severity_contrast(spec.severity), rng, side);
            break;
        case kPatchRepair:
            draw_patch(cv, spec.cx, spec.cy, spec.radius, spec.radius * spec.aspect, rng, side);
            break;
        case kDiscoloration:
            draw_discoloration(cv, spec, rng, side);
            break;
        case kMixedDamage: {
            DefectSpec a = spec;
            a.damage = spec.mix_a;
            draw_defect(cv, a, rng, side);
            DefectSpec b = spec;
            b.damage = spec.mix_b;
            draw_defect(cv, b, rng, side);
            break;
        }
        case kIrregularDefect:
            draw_scribble(cv, spec, rng, side);
            break;
        default:
            throw ValidationError("render_sample: class index out of range");
    }
}

/// Deterministic render split into plate and defect passes.  The returned
/// background is the identical plate without the defect pass, which is what
/// mask faithfulness is judged against.
inline RenderParts render_parts(const DefectSpec& spec, int side, uint64_t seed) {
    validate_spec(spec, side);
    Rng root(seed);
    GrayImage plate = render_background(side, root.stream("bg"));

    RenderParts parts;
    parts.background = plate;
    parts.image = plate;
    parts.mask.assign(static_cast<size_t>(side) * side, 0);
    synthdetail::Canvas cv{parts.image, parts.mask};
    Rng defect_rng = root.stream("defect");
    draw_defect(cv, spec, defect_rng, side);

    for (auto& v : parts.background.pix)
        v = quantize_u8(apply_environment(spec.environment, v)) / 255.0f;
    for (auto& v : parts.image.pix)
        v = quantize_u8(apply_environment(spec.environment, v)) / 255.0f;
    return parts;
}

struct Sample {
    std::string id;
    GrayImage image;
    std::vector<uint8_t> mask;  // 0/1
    int label = 0;
    std::string caption;
    DefectSpec spec;
};

inline Sample render_sample(const DefectSpec& spec, int side, uint64_t seed) {
    auto parts = render_parts(spec, side, seed);
    Sample s;
    s.image = std::move(parts.image);
    s.mask = std::move(parts.mask);
    s.label = spec.damage;
    s.caption = generate_caption(spec);
    s.spec = spec;
    return s;
}

// ---------------------------------------------------------------- sampling

/// Snap a metric dimension to the grammar's half-meter steps.
inline double snap_length_m(double m) {
    double s = std::round(m * 2.0) / 2.0;
    return std::clamp(s, 0.5, 6.0);
}

/// Draw a class-appropriate spec whose geometry respects the class bands and
/// image bounds.  All randomness comes from the passed stream.
inline DefectSpec sample_spec(int damage, int side, double scale_m_per_px, Rng& rng) {
    if (damage < 0 || damage >= kNumClasses)
        throw ValidationError("sample_spec: class index " + std::to_string(damage) +
                              " out of range");
    DefectSpec s;
    s.damage = damage;
    s.severity = static_cast<Severity>(rng.uniform_int(3));
    s.environment = static_cast<Environment>(rng.uniform_int(4));
    s.width_px = synthdetail::severity_width(s.severity);
    s.contrast = synthdetail::severity_contrast(s.severity);

    auto pick_axis = [&](PositionTag pos, double ext) {
        // horizontal placement honoring the position tag, clamped in-bounds
        double lo, hi;
        if (pos == PositionTag::center) {
            lo = side * 0.34;
            hi = side * 0.66;
        } else {  // shoulder: one outer third, clear of the edge band
            bool leftside = rng.uniform() < 0.5;
            lo = leftside ? edge_band_width(side) + 1.0 : side * 0.70;
            hi = leftside ? side * 0.30 : side - 1.0 - edge_band_width(side);
        }
        double in_lo = ext + 1.0, in_hi = side - 1.0 - ext - 1.0;
        lo = std::max(lo, in_lo);
        hi = std::min(hi, in_hi);
        if (hi < lo) lo = hi = std::clamp((lo + hi) / 2.0, in_lo, in_hi);
        return rng.uniform(lo, hi);
    };

    // geometry ranges are tuned at 64 px and scale linearly with the side
    const double f = side / 64.0;
    auto crack_len = [&](double lo, double hi) {
        return std::min(rng.uniform(lo * f, hi * f), side - 8.0);
    };
    auto blob_radius = [&](double lo, double hi) {
        return std::max(3.0, rng.uniform(lo * f, hi * f));
    };

    switch (damage) {
        case kLongitudinalCrack:
        case kEdgeCrack:
        case kCenterlineCrack: {
            double len = crack_len(22.0, 48.0);
            double slant = rng.uniform(-0.26, 0.26);  // within 15 degrees of vertical
            double xmid;
            if (damage == kEdgeCrack) {
                s.position = PositionTag::edge;
                int band = edge_band_width(side);
                bool left = rng.uniform() < 0.5;
                double m = std::max(2.0, 0.3 * band);
                xmid = left ? rng.uniform(m, std::max(m, band - m))
                            : rng.uniform(side - band + m,
                                          std::max(side - band + m, side - 1.0 - m));
                slant = rng.uniform(-0.08, 0.08);
            } else if (damage == kCenterlineCrack) {
                s.position = PositionTag::centerline;
                xmid = side / 2.0 + rng.uniform(-0.5, 0.5);
                slant = rng.uniform(-0.06, 0.06);
            } else {
                s.position = rng.uniform() < 0.6 ? PositionTag::center : PositionTag::shoulder;
                xmid = pick_axis(s.position, std::abs(len * std::tan(slant)) / 2.0 + 3.0);
            }
            double dx = len * std::tan(slant);
            double y0 = rng.uniform(2.0, side - 3.0 - len);
            s.x0 = std::clamp(xmid - dx / 2.0, 1.0, side - 2.0);
            s.x1 = std::clamp(xmid + dx / 2.0, 1.0, side - 2.0);
            s.y0 = y0;
            s.y1 = y0 + len;
            s.length_m = snap_length_m(len * scale_m_per_px);
            break;
        }
        case kTransverseCrack: {
            double len = crack_len(22.0, 48.0);
            double slant = rng.uniform(-0.26, 0.26);
            s.position = rng.uniform() < 0.6 ? PositionTag::center : PositionTag::shoulder;
            double dy = len * std::tan(slant);
            double x0 = rng.uniform(2.0, side - 3.0 - len);
            double ymid = rng.uniform(side * 0.2, side * 0.8);
            s.x0 = x0;
            s.x1 = x0 + len;
            s.y0 = std::clamp(ymid - dy / 2.0, 1.0, side - 2.0);
            s.y1 = std::clamp(ymid + dy / 2.0, 1.0, side - 2.0);
            s.length_m = snap_length_m(len * scale_m_per_px);
            break;
        }
        case kAlligatorCracking: {
            s.radius = blob_radius(15.5, 18.0);
            s.aspect = rng.uniform(0.6, 1.0);  // reused as grid spacing wiggle
            s.position = rng.uniform() < 0.6 ? PositionTag::center : PositionTag::shoulder;
            s.cx = pick_axis(s.position, s.radius + 2.0);
            s.cy = rng.uniform(s.radius + 3.0, side - 4.0 - s.radius);
            s.width_px = std::max(2, s.width_px);
            s.length_m = snap_length_m(2.0 * s.radius * scale_m_per_px);
            break;
        }
        case kPothole: {
            s.radius = blob_radius(13.0, 15.5);
            s.aspect = rng.uniform(0.85, 1.0);
            s.position = rng.uniform() < 0.6 ? PositionTag::center : PositionTag::shoulder;
            s.cx = pick_axis(s.position, s.radius + 2.0);
            s.cy = rng.uniform(s.radius + 3.0, side - 4.0 - s.radius);
            s.length_m = snap_length_m(2.0 * s.radius * scale_m_per_px);
            break;
        }
        case kPatchRepair: {
            s.radius = blob_radius(12.0, 15.0);  // half width
            s.aspect = rng.uniform(0.8, 1.0);    // half height = radius * aspect
            s.position = rng.uniform() < 0.6 ? PositionTag::center : PositionTag::shoulder;
            s.cx = pick_axis(s.position, s.radius + 2.0);
            s.cy = rng.uniform(s.radius + 3.0, side - 4.0 - s.radius);
            s.length_m = snap_length_m(2.0 * s.radius * scale_m_per_px);
            break;
        }
        case kDiscoloration: {
            s.radius = blob_radius(13.5, 16.0);
            s.aspect = rng.uniform(0.85, 1.0);
            s.position = rng.uniform() < 0.6 ? PositionTag::center : PositionTag::shoulder;
            s.cx = pick_axis(s.position, s.radius + 2.0);
            s.cy = rng.uniform(s.radius + 3.0, side - 4.0 - s.radius);
            s.length_m = snap_length_m(2.0 * s.radius * scale_m_per_px);
            break;
        }
        case kMixedDamage: {
            s.mix_a = rng.uniform() < 0.5 ? kLongitudinalCrack : kTransverseCrack;
            s.mix_b = rng.uniform() < 0.5 ? kPothole : kPatchRepair;
            s.position = rng.uniform() < 0.6 ? PositionTag::center : PositionTag::shoulder;
            double len = crack_len(18.0, 30.0);
            double wob = 5.0 * f;
            if (s.mix_a == kLongitudinalCrack) {
                double x = rng.uniform(14.0 * f, side - 1.0 - 14.0 * f);
                double y0 = rng.uniform(3.0, side - 4.0 - len);
                s.x0 = x;
                s.x1 = std::clamp(x + rng.uniform(-wob, wob), 2.0, side - 3.0);
                s.y0 = y0;
                s.y1 = y0 + len;
            } else {
                double y = rng.uniform(14.0 * f, side - 1.0 - 14.0 * f);
                double x0 = rng.uniform(3.0, side - 4.0 - len);
                s.x0 = x0;
                s.x1 = x0 + len;
                s.y0 = y;
                s.y1 = std::clamp(y + rng.uniform(-wob, wob), 2.0, side - 3.0);
            }
            s.radius = blob_radius(9.0, 12.0);
            s.aspect = rng.uniform(0.8, 1.0);
            s.cx = rng.uniform(s.radius + 3.0, side - 4.0 - s.radius);
            s.cy = rng.uniform(s.radius + 3.0, side - 4.0 - s.radius);
            double ext = std::max(len, 2.0 * s.radius);
            s.length_m = snap_length_m(ext * scale_m_per_px);
            break;
        }
        case kIrregularDefect: {
            s.steps = static_cast<int>(rng.uniform_int(19)) + 26;  // 26..44
            s.position = rng.uniform() < 0.6 ? PositionTag::center : PositionTag::shoulder;
            s.x0 = pick_axis(s.position, 4.0);
            s.y0 = rng.uniform(side * 0.25, side * 0.75);
            s.width_px = std::min(s.width_px, 2);
            s.length_m = snap_length_m(s.steps * scale_m_per_px);
            break;
        }
        default: break;
    }
    return s;
}

// ---------------------------------------------------------------- dataset

inline std::vector<double> default_class_weights() {
    std::vector<double> w(kNumClasses, 1.0);
    w[kMixedDamage] = 0.5;
    w[kIrregularDefect] = 0.5;
    return w;
}

/// Integer class counts by largest remainder; ties go to the lower index.
inline std::vector<int> class_counts(int total, const std::vector<double>& weights) {
    if (total < 0) throw ValidationError("class_counts: negative total");
    if (weights.empty()) throw ValidationError("class_counts: no weights");
    double wsum = 0.0;
    for (double w : weights) {
        if (!(w >= 0.0) || !std::isfinite(w))
            throw ValidationError("class_counts: weights must be finite and non-negative");
        wsum += w;
    }
    if (wsum <= 0.0) throw ValidationError("class_counts: weights sum to zero");

    std::vector<int> counts(weights.size(), 0);
    std::vector<std::pair<double, size_t>> rema;
    int assigned = 0;
    for (size_t k = 0; k < weights.size(); ++k) {
        double exact = total * weights[k] / wsum;
        counts[k] = static_cast<int>(std::floor(exact));
        assigned += counts[k];
        rema.emplace_back(exact - counts[k], k);
    }
    std::stable_sort(rema.begin(), rema.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    for (int i = 0; i < total - assigned; ++i) counts[rema[static_cast<size_t>(i)].second] += 1;
    return counts;
}

inline const std::array<const char*, 3>& split_names() {
    static const std::array<const char*, 3> names = {"train", "val", "test"};
    return names;
}

struct DatasetManifest {
    uint64_t seed = 0;
    int image_size = 64;
    double scale_m_per_px = 0.05;
    std::vector<double> class_weights = default_class_weights();
    std::map<std::string, int> split_sizes = {{"train", 2000}, {"val", 200}, {"test", 200}};

    void validate() const {
        // below 32 px the 15% edge band is narrower than a severe stroke
        if (image_size < 32 || image_size > 1024)
            throw ValidationError("manifest: image_size " + std::to_string(image_size) +
                                  " outside [32, 1024]");
        if (!(scale_m_per_px > 0.0) || !std::isfinite(scale_m_per_px))
            throw ValidationError("manifest: scale must be positive");
        if (class_weights.size() != static_cast<size_t>(kNumClasses))
            throw ValidationError("manifest: expected " + std::to_string(kNumClasses) +
                                  " class weights, got " + std::to_string(class_weights.size()));
        for (const auto& name : split_names())
            if (!split_sizes.count(name))
                throw ValidationError("manifest: missing split '" + std::string(name) + "'");
        for (const auto& [name, n] : split_sizes) {
            bool known = false;
            for (const auto& s : split_names()) known |= (name == s);
            if (!known) throw ValidationError("manifest: unknown split '" + name + "'");
            if (n < 0) throw ValidationError("manifest: split '" + name + "' has negative size");
        }
    }
};

struct Dataset {
    DatasetManifest manifest;
    std::map<std::string, std::vector<Sample>> splits;
};

inline std::string hex16(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline uint64_t file_checksum(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("checksum: cannot open " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return fnv1a64(bytes);
}

inline std::string sample_index_name(int idx) {
    char buf[8];
    std::snprintf(buf, sizeof buf, "%06d", idx);
    return buf;
}

/// Build one split's samples in memory.  Each sample is a pure function of
/// (manifest, split, index), so rendering order and worker count cannot
/// change the result.
inline std::vector<Sample> build_split(const DatasetManifest& manifest, const std::string& split) {
    int n = manifest.split_sizes.at(split);
    auto counts = class_counts(n, manifest.class_weights);
    std::vector<int> labels;
    labels.reserve(static_cast<size_t>(n));
    for (int k = 0; k < kNumClasses; ++k)
        labels.insert(labels.end(), static_cast<size_t>(counts[static_cast<size_t>(k)]), k);

    std::vector<Sample> samples(static_cast<size_t>(n));
    parallel_for(static_cast<size_t>(n), [&](size_t i) {
        std::string tag = split + "/" + std::to_string(i);
        Rng spec_rng(manifest.seed, "spec/" + tag);
        auto spec = sample_spec(labels[i], manifest.image_size, manifest.scale_m_per_px, spec_rng);
        auto sample = render_sample(spec, manifest.image_size,
                                    derive_seed(manifest.seed, "render/" + tag));
        sample.id = split + "/" + sample_index_name(static_cast<int>(i));
        samples[i] = std::move(sample);
    });
    return samples;
}

inline nlohmann::json record_json(const Sample& s, const std::string& split, int idx) {
    std::string stem = sample_index_name(idx) + std::string(".pgm");
    return nlohmann::json{{"id", s.id},
                         {"image_path", split + "/images/" + stem},
                         {"mask_path", split + "/masks/" + stem},
                         {"label", s.label},
                         {"caption", s.caption},
                         {"spec", s.spec}};
}

/// Generate, persist, and return the dataset.  Bytes on disk depend only on
/// the manifest.
inline Dataset generate_dataset(const DatasetManifest& manifest,
                                const std::filesystem::path& out_dir) {
    manifest.validate();
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("generate_dataset: cannot create " + out_dir.string());

    Dataset ds;
    ds.manifest = manifest;
    std::map<std::string, uint64_t> checksums;

    for (const auto& split : split_names()) {
        auto samples = build_split(manifest, split);
        fs::create_directories(out_dir / split / "images", ec);
        fs::create_directories(out_dir / split / "masks", ec);
        if (ec) throw IoError("generate_dataset: cannot create split dirs under " + out_dir.string());

        std::string records;
        for (size_t i = 0; i < samples.size(); ++i) {
            const auto& s = samples[i];
            std::string stem = sample_index_name(static_cast<int>(i)) + std::string(".pgm");
            write_pgm(out_dir / split / "images" / stem, quantize_image(s.image),
                      s.image.width, s.image.height);
            std::vector<uint8_t> mask_u8(s.mask.size());
            for (size_t p = 0; p < s.mask.size(); ++p) mask_u8[p] = s.mask[p] ? 255 : 0;
            write_pgm(out_dir / split / "masks" / stem, mask_u8, s.image.width, s.image.height);
            records += record_json(s, split, static_cast<int>(i)).dump();
            records += "\n";
        }
        auto rec_path = out_dir / split / "records.jsonl";
        {
            std::ofstream f(rec_path, std::ios::binary);
            if (!f) throw IoError("generate_dataset: cannot open " + rec_path.string());
            f.write(records.data(), static_cast<std::streamsize>(records.size()));
            if (!f) throw IoError("generate_dataset: write failed for " + rec_path.string());
        }

        for (size_t i = 0; i < samples.size(); ++i) {
            std::string stem = sample_index_name(static_cast<int>(i)) + std::string(".pgm");
            for (const char* kind : {"images", "masks"}) {
                auto rel = std::string(split) + "/" + kind + "/" + stem;
                checksums[rel] = file_checksum(out_dir / rel);
            }
        }
        checksums[std::string(split) + "/records.jsonl"] = file_checksum(rec_path);
        ds.splits[split] = std::move(samples);
    }

    nlohmann::json mj{{"version", 1},
                      {"seed", manifest.seed},
                      {"image_size", manifest.image_size},
                      {"scale_m_per_px", manifest.scale_m_per_px},
                      {"class_names", damage_class_names()},
                      {"class_weights", manifest.class_weights},
                      {"split_sizes", manifest.split_sizes}};
    nlohmann::json cj = nlohmann::json::object();
    for (const auto& [rel, sum] : checksums) cj[rel] = hex16(sum);
    mj["checksums"] = cj;
    auto man_path = out_dir / "manifest.json";
    {
        std::ofstream f(man_path, std::ios::binary);
        if (!f) throw IoError("generate_dataset: cannot open " + man_path.string());
        auto text = mj.dump(2) + "\n";
        f.write(text.data(), static_cast<std::streamsize>(text.size()));
        if (!f) throw IoError("generate_dataset: write failed for " + man_path.string());
    }
    return ds;
}

/// Load a persisted dataset, verifying checksums and per-record consistency.
inline Dataset load_dataset(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    auto man_path = dir / "manifest.json";
    std::ifstream mf(man_path, std::ios::binary);
    if (!mf) throw IoError("load_dataset: cannot open " + man_path.string());
    nlohmann::json mj;
    try {
        mf >> mj;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("load_dataset: bad manifest " + man_path.string() + ": " + e.what());
    }

    Dataset ds;
    try {
        if (mj.at("version").get<int>() != 1)
            throw IoError("load_dataset: unsupported dataset version " +
                          mj.at("version").dump());
        ds.manifest.seed = mj.at("seed").get<uint64_t>();
        ds.manifest.image_size = mj.at("image_size").get<int>();
        ds.manifest.scale_m_per_px = mj.at("scale_m_per_px").get<double>();
        ds.manifest.class_weights = mj.at("class_weights").get<std::vector<double>>();
        ds.manifest.split_sizes = mj.at("split_sizes").get<std::map<std::string, int>>();
        if (mj.at("class_names").get<std::vector<std::string>>() != damage_class_names())
            throw ValidationError("load_dataset: class name list does not match this build");
    } catch (const nlohmann::json::exception& e) {
        throw IoError("load_dataset: manifest field error in " + man_path.string() + ": " +
                      e.what());
    }
    ds.manifest.validate();

    for (const auto& [rel, hexsum] : mj.at("checksums").items()) {
        auto path = dir / rel;
        if (!fs::exists(path)) throw IoError("load_dataset: missing file " + path.string());
        if (hex16(file_checksum(path)) != hexsum.get<std::string>())
            throw IoError("load_dataset: checksum mismatch for " + path.string());
    }

    for (const auto& split : split_names()) {
        int expected = ds.manifest.split_sizes.at(split);
        auto rec_path = dir / split / "records.jsonl";
        std::ifstream rf(rec_path, std::ios::binary);
        if (!rf) throw IoError("load_dataset: cannot open " + rec_path.string());
        std::vector<Sample> samples;
        std::string line;
        int line_no = 0;
        while (std::getline(rf, line)) {
            line_no += 1;
            if (line.empty()) continue;
            nlohmann::json rj;
            Sample s;
            try {
                rj = nlohmann::json::parse(line);
                s.id = rj.at("id").get<std::string>();
                s.label = rj.at("label").get<int>();
                s.caption = rj.at("caption").get<std::string>();
                s.spec = rj.at("spec").get<DefectSpec>();
            } catch (const nlohmann::json::exception& e) {
                throw IoError("load_dataset: bad record at " + rec_path.string() + ":" +
                              std::to_string(line_no) + ": " + e.what());
            }
            auto img = read_pgm(dir / rj.at("image_path").get<std::string>());
            if (img.width != ds.manifest.image_size || img.height != ds.manifest.image_size)
                throw ValidationError(
                    "load_dataset: image " + rj.at("image_path").get<std::string>() + " is " +
                    std::to_string(img.width) + "x" + std::to_string(img.height) +
                    ", manifest says " + std::to_string(ds.manifest.image_size));
            auto msk = read_pgm(dir / rj.at("mask_path").get<std::string>());
            if (msk.width != ds.manifest.image_size || msk.height != ds.manifest.image_size)
                throw ValidationError("load_dataset: mask dimensions do not match manifest for " +
                                      rj.at("mask_path").get<std::string>());
            s.image = image_from_u8(img);
            s.mask.resize(msk.pix.size());
            for (size_t p = 0; p < msk.pix.size(); ++p) {
                if (msk.pix[p] != 0 && msk.pix[p] != 255)
                    throw ValidationError("load_dataset: mask " +
                                          rj.at("mask_path").get<std::string>() +
                                          " holds a value other than 0/255");
                s.mask[p] = msk.pix[p] ? 1 : 0;
            }
            samples.push_back(std::move(s));
        }
        if (static_cast<int>(samples.size()) != expected)
            throw IoError("load_dataset: split '" + std::string(split) + "' has " +
                          std::to_string(samples.size()) + " records, manifest says " +
                          std::to_string(expected));
        ds.splits[split] = std::move(samples);
    }
    return ds;
}

}  // namespace roadclip
