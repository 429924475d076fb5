#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>

#include "uaseg/common.hpp"
#include "uaseg/image.hpp"

namespace uaseg::synth {

// ---------------------------------------------------------------------------
// Parametric description of one synthetic layered particle: concentric
// annuli (kernel, buffer, IPyC, SiC, OPyC) on a background matrix, with the
// defect morphologies seen in irradiated samples: a debonding gap between
// buffer and IPyC, thin bridges across it, cracks, kernel pullout, polishing
// artifacts and a frequently removed OPyC layer.
// ---------------------------------------------------------------------------

enum class DefectKind { GapBridge, Crack, KernelPullout, MissingOpyc, PolishNoise };

inline std::string to_string(DefectKind k) {
    switch (k) {
        case DefectKind::GapBridge: return "gap-bridge";
        case DefectKind::Crack: return "crack";
        case DefectKind::KernelPullout: return "kernel-pullout";
        case DefectKind::MissingOpyc: return "missing-OPyC";
        case DefectKind::PolishNoise: return "polish-noise";
    }
    return "?";
}

struct Defect {
    DefectKind kind;
    double angle = 0.0;      // radians; bridges, cracks, pullout placement
    double width = 0.0;      // bridge: radians; crack: pixels
    double extent = 0.0;     // pullout: blob radius as a fraction of the kernel radius
    double offset = 0.0;     // pullout: center offset as a fraction of the kernel radius
    double magnitude = 0.0;  // polish-noise strength
    int layer = 0;           // crack: class index of the crossed layer (2..5)
};

struct ParticleSpec {
    double cx = 0, cy = 0;
    std::array<double, 5> radii{};  // outer radii: kernel, buffer, IPyC, SiC, OPyC
    double gap_width = 0.0;         // buffer-IPyC debonding gap, eats the buffer's outer rim
    bool has_opyc = true;
    std::vector<Defect> defects;
    std::array<std::uint64_t, 6> texture_seeds{};
    double illum_angle = 0.0, illum_strength = 0.0;
    int illum_tiles = 0;  // 0 = smooth ramp only; >0 adds montage-style tile offsets
    double noise_amp = 0.0;

    void validate(int canvas) const {
        for (int i = 1; i < 5; ++i)
            if (radii[i] <= radii[i - 1])
                throw ValidationError("ParticleSpec: radii must be strictly increasing");
        if (gap_width < 0) throw ValidationError("ParticleSpec: gap width must be >= 0");
        if (gap_width >= radii[1] - radii[0])
            throw ValidationError("ParticleSpec: gap width must be smaller than buffer thickness");
        const double half = canvas / 2.0;
        const double off = std::max(std::abs(cx - half), std::abs(cy - half));
        if (radii[4] + off > half)
            throw ValidationError("ParticleSpec: particle does not fit inside the canvas");
    }
};

struct DomainProfile {
    std::string name = "agr567like";
    double p_missing_opyc = 0.0;
    double p_gap = 0.5;
    double p_gap_bridge = 0.5;  // given the gap is present
    double p_crack = 0.25;
    double p_kernel_pullout = 0.10;
    double p_polish_noise = 0.5;
    double noise_amp_lo = 0.02, noise_amp_hi = 0.06;
    double illum_lo = 0.04, illum_hi = 0.15;
    bool tiled_illumination = true;

    void validate() const {
        for (double p : {p_missing_opyc, p_gap, p_gap_bridge, p_crack, p_kernel_pullout,
                         p_polish_noise})
            if (p < 0.0 || p > 1.0) throw ConfigError("DomainProfile: probability outside [0,1]");
        if (noise_amp_lo > noise_amp_hi || illum_lo > illum_hi)
            throw ConfigError("DomainProfile: invalid range");
    }

    // OPyC usually removed, cleaner imaging.
    static DomainProfile agr2like() {
        DomainProfile p;
        p.name = "agr2like";
        p.p_missing_opyc = 0.81;
        p.p_crack = 0.15;
        p.p_kernel_pullout = 0.05;
        p.p_polish_noise = 0.10;
        p.noise_amp_lo = 0.01;
        p.noise_amp_hi = 0.03;
        p.illum_lo = 0.0;
        p.illum_hi = 0.06;
        p.tiled_illumination = false;
        return p;
    }

    // All layers present, montage tiling and polishing artifacts.
    static DomainProfile agr567like() { return DomainProfile{}; }

    static DomainProfile by_name(const std::string& name) {
        if (name == "agr2like") return agr2like();
        if (name == "agr567like") return agr567like();
        throw ConfigError("unknown profile '" + name + "' (expected agr2like or agr567like)");
    }
};

// ---------------------------------------------------------------------------
// Spec sampling. All randomness comes from the provided rng, so a (seed,
// profile, canvas) triple fully determines the particle.
// ---------------------------------------------------------------------------

inline ParticleSpec sample_particle_spec(Rng& rng, const DomainProfile& profile, int canvas) {
    profile.validate();
    if (canvas < 64) throw ConfigError("sample_particle_spec: canvas must be at least 64x64");

    ParticleSpec s;
    const double half = canvas / 2.0;
    s.cx = half + rng.uniform(-0.03, 0.03) * canvas;
    s.cy = half + rng.uniform(-0.03, 0.03) * canvas;

    // Nominal layer proportions of the half-width, jittered +-10%, kept
    // strictly increasing and inside the canvas.
    static constexpr std::array<double, 5> kFractions = {0.42, 0.62, 0.72, 0.82, 0.92};
    for (int i = 0; i < 5; ++i)
        s.radii[i] = kFractions[i] * half * (1.0 + rng.uniform(-0.10, 0.10));
    for (int i = 1; i < 5; ++i)
        s.radii[i] = std::max(s.radii[i], s.radii[i - 1] + 1.5);
    const double max_off = std::max(std::abs(s.cx - half), std::abs(s.cy - half));
    const double max_r = half - max_off;
    if (s.radii[4] > max_r) {
        const double k = max_r / s.radii[4];
        for (auto& r : s.radii) r *= k;
    }

    if (rng.bernoulli(profile.p_gap)) {
        const double buffer_thickness = s.radii[1] - s.radii[0];
        s.gap_width = std::min(rng.uniform(0.01, 0.04) * s.radii[1], 0.6 * buffer_thickness);
    }

    if (rng.bernoulli(profile.p_missing_opyc)) {
        s.has_opyc = false;
        s.defects.push_back({DefectKind::MissingOpyc});
    }

    if (s.gap_width > 0 && rng.bernoulli(profile.p_gap_bridge)) {
        const int n_bridges = 1 + static_cast<int>(rng.uniform_int(3));
        const double r_gap = s.radii[1] - 0.5 * s.gap_width;
        for (int b = 0; b < n_bridges; ++b) {
            Defect d{DefectKind::GapBridge};
            d.angle = rng.uniform(0.0, 2.0 * M_PI);
            d.width = rng.uniform(2.0, 5.0) / r_gap;  // arc length 2-5 px
            s.defects.push_back(d);
        }
    }

    if (rng.bernoulli(profile.p_crack)) {
        Defect d{DefectKind::Crack};
        const int max_layer = s.has_opyc ? 5 : 4;
        d.layer = 2 + static_cast<int>(rng.uniform_int(max_layer - 1));  // buffer..outermost
        d.angle = rng.uniform(0.0, 2.0 * M_PI);
        d.width = rng.uniform(1.0, 2.5);
        s.defects.push_back(d);
    }

    if (rng.bernoulli(profile.p_kernel_pullout)) {
        Defect d{DefectKind::KernelPullout};
        d.angle = rng.uniform(0.0, 2.0 * M_PI);
        d.offset = rng.uniform(0.0, 0.45);
        d.extent = rng.uniform(0.2, 0.45);
        s.defects.push_back(d);
    }

    if (rng.bernoulli(profile.p_polish_noise)) {
        Defect d{DefectKind::PolishNoise};
        d.magnitude = rng.uniform(0.08, 0.18);
        s.defects.push_back(d);
    }

    for (auto& t : s.texture_seeds) t = rng.next_u64();
    s.illum_angle = rng.uniform(0.0, 2.0 * M_PI);
    s.illum_strength = rng.uniform(profile.illum_lo, profile.illum_hi);
    s.illum_tiles = profile.tiled_illumination ? 4 : 0;
    s.noise_amp = rng.uniform(profile.noise_amp_lo, profile.noise_amp_hi);

    s.validate(canvas);
    return s;
}

// ---------------------------------------------------------------------------
// Rendering. The mask is pure geometry; the image applies per-layer textures,
// illumination, defect shading and additive noise on top of the same
// geometry, so every labeled structure has a consistent appearance.
// ---------------------------------------------------------------------------

inline double angular_distance(double a, double b) {
    double d = std::fmod(std::abs(a - b), 2.0 * M_PI);
    return d > M_PI ? 2.0 * M_PI - d : d;
}

// Radial class without defects: gap pixels and everything outside the
// particle are background.
inline int classify_radius(double d, const ParticleSpec& s) {
    if (d <= s.radii[0]) return 1;
    if (d <= s.radii[1] - s.gap_width) return 2;
    if (d <= s.radii[1]) return 0;  // debonding gap
    if (d <= s.radii[2]) return 3;
    if (d <= s.radii[3]) return 4;
    if (s.has_opyc && d <= s.radii[4]) return 5;
    return 0;
}

// Full per-pixel label; if the pixel is a void created by a crack or pullout
// (dark in the image), *void_pixel is set.
inline int label_pixel(const ParticleSpec& s, int x, int y, bool* void_pixel = nullptr) {
    const double dx = x - s.cx, dy = y - s.cy;
    const double d = std::hypot(dx, dy);
    int cls = classify_radius(d, s);
    const double ang = std::atan2(dy, dx);

    if (cls == 0 && d > s.radii[1] - s.gap_width && d <= s.radii[1]) {
        for (const auto& def : s.defects)
            if (def.kind == DefectKind::GapBridge &&
                angular_distance(ang, def.angle) <= def.width / 2.0) {
                cls = 2;
                break;
            }
    }

    for (const auto& def : s.defects) {
        if (def.kind == DefectKind::Crack && cls == def.layer) {
            // Radial fracture through one layer, a few pixels wide.
            if (angular_distance(ang, def.angle) * d <= def.width / 2.0) {
                cls = 0;
                if (void_pixel) *void_pixel = true;
            }
        } else if (def.kind == DefectKind::KernelPullout && cls == 1) {
            const double px = s.cx + def.offset * s.radii[0] * std::cos(def.angle);
            const double py = s.cy + def.offset * s.radii[0] * std::sin(def.angle);
            if (std::hypot(x - px, y - py) <= def.extent * s.radii[0]) {
                cls = 0;
                if (void_pixel) *void_pixel = true;
            }
        }
    }
    return cls;
}

// Band-limited value noise: bilinear interpolation of a seeded coarse grid.
class ValueNoise {
public:
    ValueNoise(std::uint64_t seed, int canvas, double period) : period_(period) {
        n_ = static_cast<int>(canvas / period) + 3;
        grid_.resize(static_cast<std::size_t>(n_) * n_);
        Rng rng(seed);
        for (auto& v : grid_) v = rng.uniform(-1.0, 1.0);
    }

    double at(double x, double y) const {
        const double gx = x / period_, gy = y / period_;
        const int x0 = static_cast<int>(gx), y0 = static_cast<int>(gy);
        const double fx = gx - x0, fy = gy - y0;
        auto g = [&](int i, int j) { return grid_[std::size_t(j % n_) * n_ + (i % n_)]; };
        const double a = g(x0, y0) * (1 - fx) + g(x0 + 1, y0) * fx;
        const double b = g(x0, y0 + 1) * (1 - fx) + g(x0 + 1, y0 + 1) * fx;
        return a * (1 - fy) + b * fy;
    }

private:
    double period_;
    int n_;
    std::vector<double> grid_;
};

// Per-class base grays: kernel darkest, SiC brightest.
inline constexpr std::array<double, 6> kBaseGray = {0.40, 0.12, 0.28, 0.55, 0.88, 0.68};
inline constexpr std::array<double, 6> kTextureAmp = {0.05, 0.03, 0.04, 0.04, 0.04, 0.04};

inline ImageSample render_particle(const ParticleSpec& spec, int canvas, Rng& rng) {
    spec.validate(canvas);
    LabelMask mask(canvas, canvas);
    cv::Mat img(canvas, canvas, CV_32FC1);

    std::array<std::unique_ptr<ValueNoise>, 6> tex;
    for (int c = 0; c < 6; ++c)
        tex[c] = std::make_unique<ValueNoise>(spec.texture_seeds[c], canvas, canvas / 8.0);

    const Defect* polish = nullptr;
    for (const auto& d : spec.defects)
        if (d.kind == DefectKind::PolishNoise) polish = &d;
    std::unique_ptr<ValueNoise> polish_noise;
    if (polish)
        polish_noise = std::make_unique<ValueNoise>(splitmix64(spec.texture_seeds[0] ^ 0x9e37ULL),
                                                    canvas, canvas / 5.0);

    // Montage-style tile offsets.
    std::vector<double> tile_off;
    if (spec.illum_tiles > 0) {
        Rng trng(splitmix64(spec.texture_seeds[0] ^ 0x7157ULL));
        tile_off.resize(static_cast<std::size_t>(spec.illum_tiles) * spec.illum_tiles);
        for (auto& t : tile_off) t = trng.uniform(-1.0, 1.0);
    }

    const double ca = std::cos(spec.illum_angle), sa = std::sin(spec.illum_angle);
    for (int y = 0; y < canvas; ++y) {
        float* row = img.ptr<float>(y);
        for (int x = 0; x < canvas; ++x) {
            bool void_px = false;
            const int cls = label_pixel(spec, x, y, &void_px);
            mask.at(y, x) = static_cast<std::uint8_t>(cls);

            double v = void_px ? 0.08 : kBaseGray[cls];
            v += kTextureAmp[cls] * tex[cls]->at(x, y);
            // Smooth illumination gradient across the canvas.
            v += spec.illum_strength * ((x - canvas / 2.0) * ca + (y - canvas / 2.0) * sa) / canvas;
            if (!tile_off.empty()) {
                const int tx = std::min(spec.illum_tiles - 1, x * spec.illum_tiles / canvas);
                const int ty = std::min(spec.illum_tiles - 1, y * spec.illum_tiles / canvas);
                v += 0.5 * spec.illum_strength * tile_off[std::size_t(ty) * spec.illum_tiles + tx];
            }
            if (polish && !void_px) {
                const double p = polish_noise->at(x, y);
                if (p > 0.25) v -= polish->magnitude * (p - 0.25) / 0.75;
            }
            v += spec.noise_amp * rng.normal();
            row[x] = clampf(static_cast<float>(v), 0.f, 1.f);
        }
    }

    // Quantize to 8 bits so the in-memory sample equals its PNG round trip.
    for (int y = 0; y < canvas; ++y) {
        float* row = img.ptr<float>(y);
        for (int x = 0; x < canvas; ++x)
            row[x] = static_cast<float>(cvRound(row[x] * 255.f)) / 255.f;
    }

    ImageSample out;
    out.image = img;
    out.mask = std::move(mask);
    out.meta.orig_h = canvas;
    out.meta.orig_w = canvas;
    return out;
}

// ---------------------------------------------------------------------------
// Dataset generation and the JSON manifest.
// ---------------------------------------------------------------------------

struct ManifestEntry {
    std::string image, mask;
    std::uint64_t seed = 0;
    std::string profile, split;
};

struct DatasetManifest {
    std::string root;  // directory containing the manifest (not serialized)
    std::string generator_version = "1.0";
    std::uint64_t global_seed = 0;
    std::string profile;
    int canvas = 0;
    std::vector<ManifestEntry> samples;

    std::vector<const ManifestEntry*> split(const std::string& name) const {
        std::vector<const ManifestEntry*> out;
        for (const auto& s : samples)
            if (s.split == name) out.push_back(&s);
        return out;
    }

    void validate() const {
        std::set<std::string> paths;
        for (const auto& s : samples) {
            if (!paths.insert(s.image).second || !paths.insert(s.mask).second)
                throw ValidationError("manifest: duplicate path " + s.image);
            if (s.split != "train" && s.split != "val" && s.split != "test")
                throw ValidationError("manifest: unknown split '" + s.split + "'");
        }
    }
};

struct SplitFractions {
    double train = 0.64, val = 0.16, test = 0.20;
};

struct SplitSizes {
    int train = 0, val = 0, test = 0;
};

// Rounded val/test, remainder to train.
inline SplitSizes split_sizes(int count, const SplitFractions& f) {
    if (std::abs(f.train + f.val + f.test - 1.0) > 1e-9)
        throw ConfigError("split fractions must sum to 1");
    if (f.train < 0 || f.val < 0 || f.test < 0) throw ConfigError("split fractions must be >= 0");
    SplitSizes s;
    s.val = static_cast<int>(std::llround(f.val * count));
    s.test = static_cast<int>(std::llround(f.test * count));
    s.train = count - s.val - s.test;
    if (s.train < 0) throw ConfigError("split fractions leave no training samples");
    return s;
}

inline nlohmann::ordered_json manifest_to_json(const DatasetManifest& m) {
    nlohmann::ordered_json j;
    j["generator_version"] = m.generator_version;
    j["global_seed"] = m.global_seed;
    j["profile"] = m.profile;
    j["canvas"] = m.canvas;
    j["samples"] = nlohmann::ordered_json::array();
    for (const auto& s : m.samples)
        j["samples"].push_back({{"image", s.image},
                                {"mask", s.mask},
                                {"seed", s.seed},
                                {"profile", s.profile},
                                {"split", s.split}});
    return j;
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
    DatasetManifest m;
    m.generator_version = j.at("generator_version").get<std::string>();
    m.global_seed = j.at("global_seed").get<std::uint64_t>();
    m.profile = j.at("profile").get<std::string>();
    m.canvas = j.at("canvas").get<int>();
    for (const auto& e : j.at("samples")) {
        ManifestEntry s;
        s.image = e.at("image").get<std::string>();
        s.mask = e.at("mask").get<std::string>();
        s.seed = e.at("seed").get<std::uint64_t>();
        s.profile = e.at("profile").get<std::string>();
        s.split = e.at("split").get<std::string>();
        m.samples.push_back(std::move(s));
    }
    m.validate();
    return m;
}

inline void save_manifest(const DatasetManifest& m, const std::string& path) {
    std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot write manifest: " + path);
    os << manifest_to_json(m).dump(2) << "\n";
}

inline DatasetManifest load_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read manifest: " + path);
    nlohmann::json j;
    is >> j;
    DatasetManifest m = manifest_from_json(j);
    m.root = std::filesystem::path(path).parent_path().string();
    return m;
}

// Generate `count` samples; each sample's seed is derived from (global seed,
// index) so any sample can be regenerated independently. The first block of
// indices is the training split, then validation, then test.
inline DatasetManifest generate_dataset(const DomainProfile& profile, int count,
                                        const SplitFractions& fractions, std::uint64_t seed,
                                        const std::string& out_dir, int canvas = 512) {
    profile.validate();
    if (count <= 0) throw ConfigError("generate_dataset: count must be > 0");
    const SplitSizes sizes = split_sizes(count, fractions);

    std::error_code ec;
    std::filesystem::create_directories(std::filesystem::path(out_dir) / "images", ec);
    std::filesystem::create_directories(std::filesystem::path(out_dir) / "masks", ec);
    if (ec) throw IoError("cannot create dataset directory " + out_dir + ": " + ec.message());

    DatasetManifest m;
    m.root = out_dir;
    m.global_seed = seed;
    m.profile = profile.name;
    m.canvas = canvas;

    for (int i = 0; i < count; ++i) {
        const std::uint64_t sample_seed = derive_seed(seed, static_cast<std::uint64_t>(i));
        Rng rng(sample_seed);
        const ParticleSpec spec = sample_particle_spec(rng, profile, canvas);
        ImageSample sample = render_particle(spec, canvas, rng);
        sample.meta.profile = profile.name;
        sample.meta.seed = sample_seed;

        char img_name[64], msk_name[64];
        std::snprintf(img_name, sizeof(img_name), "images/img_%06d.png", i);
        std::snprintf(msk_name, sizeof(msk_name), "masks/msk_%06d.png", i);

        cv::Mat img8(canvas, canvas, CV_8UC1);
        for (int y = 0; y < canvas; ++y)
            for (int x = 0; x < canvas; ++x)
                img8.at<std::uint8_t>(y, x) =
                    static_cast<std::uint8_t>(cvRound(sample.image.at<float>(y, x) * 255.f));
        write_png((std::filesystem::path(out_dir) / img_name).string(), img8);
        write_png((std::filesystem::path(out_dir) / msk_name).string(), mask_to_mat(sample.mask));

        ManifestEntry e;
        e.image = img_name;
        e.mask = msk_name;
        e.seed = sample_seed;
        e.profile = profile.name;
        e.split = i < sizes.train ? "train" : (i < sizes.train + sizes.val ? "val" : "test");
        m.samples.push_back(std::move(e));
    }

    save_manifest(m, (std::filesystem::path(out_dir) / "manifest.json").string());
    return m;
}

}  // namespace uaseg::synth
