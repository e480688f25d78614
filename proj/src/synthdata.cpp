#include "spcl/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "spcl/rng.hpp"

namespace spcl {

namespace {

constexpr std::uint64_t kGeometryStream = 0x67656f6d;  // "geom"
constexpr std::uint64_t kTextureStream = 0x74657874;   // "text"
constexpr std::uint64_t kNoiseStream = 0x6e6f6973;     // "nois"

constexpr double kSqrt3 = 1.7320508075688772935;

const std::array<std::array<double, 3>, 8> kPalette = {{
    {0.30, 0.32, 0.30},  // 0 background
    {0.75, 0.20, 0.20},  // 1 red
    {0.20, 0.45, 0.75},  // 2 blue
    {0.80, 0.70, 0.25},  // 3 yellow
    {0.30, 0.65, 0.30},  // 4 green
    {0.55, 0.30, 0.60},  // 5 purple
    {0.85, 0.55, 0.25},  // 6 orange
    {0.20, 0.70, 0.70},  // 7 teal
}};

// Per-class speckle amplitude; variety keeps features from being a pure
// color lookup.
double texture_amplitude(int c) { return 0.02 + 0.015 * static_cast<double>((c * 3) % 5); }

double clamp01(double x) { return std::min(1.0, std::max(0.0, x)); }

int pick_weighted(RandomStream& rng, const std::vector<double>& w) {
    // Classes 1..C-1 only; the background is never a primitive.
    double total = 0.0;
    for (std::size_t c = 1; c < w.size(); ++c) total += w[c];
    double r = rng.uniform(0.0, total);
    for (std::size_t c = 1; c < w.size(); ++c) {
        r -= w[c];
        if (r < 0.0) return static_cast<int>(c);
    }
    return static_cast<int>(w.size()) - 1;
}

struct Paint {
    Eigen::ArrayXd& image;
    LabelMap& labels;
    int h, w;

    void pixel(int r, int c, int cls, const std::array<double, 3>& rgb) {
        if (r < 0 || r >= h || c < 0 || c >= w) return;
        labels.at(r, c) = static_cast<std::uint8_t>(cls);
        double* px = image.data() + (static_cast<long>(r) * w + c) * 3;
        px[0] = rgb[0];
        px[1] = rgb[1];
        px[2] = rgb[2];
    }
};

}  // namespace

std::string_view domain_name(Domain d) { return d == Domain::source ? "source" : "target"; }

SceneSpec SceneSpec::defaults() {
    SceneSpec s;
    s.class_weights = {1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.15};
    return s;
}

void SceneSpec::validate() const {
    if (height <= 0 || width <= 0) throw std::invalid_argument("SceneSpec: zero image area");
    if (classes < 2 || classes > 254) {
        throw std::invalid_argument("SceneSpec: class count must be in [2, 254]");
    }
    if (static_cast<int>(class_weights.size()) != classes) {
        throw std::invalid_argument("SceneSpec: expected " + std::to_string(classes) +
                                    " class weights, got " + std::to_string(class_weights.size()));
    }
    for (double w : class_weights) {
        if (!(w > 0.0)) throw std::invalid_argument("SceneSpec: class weights must be positive");
    }
    if (min_shapes < 1 || max_shapes < min_shapes) {
        throw std::invalid_argument("SceneSpec: bad shapes-per-scene range");
    }
}

bool DomainShiftParams::is_identity() const {
    return color.isIdentity(0.0) && bias.isZero(0.0) && gamma == 1.0 && noise_std == 0.0 &&
           texture_amp == 1.0;
}

DomainShiftParams DomainShiftParams::preset(std::string_view name) {
    DomainShiftParams p;
    if (name == "none") return p;
    if (name == "default") {
        p.color << 0.80, 0.14, 0.06,
                   0.10, 0.82, 0.08,
                   0.06, 0.18, 0.76;
        p.bias << 0.05, -0.02, 0.04;
        p.gamma = 1.3;
        p.noise_std = 0.05;
        p.texture_amp = 1.5;
        return p;
    }
    if (name == "strong") {
        p.color << 0.72, 0.20, 0.08,
                   0.18, 0.70, 0.12,
                   0.10, 0.24, 0.66;
        p.bias << 0.09, -0.05, 0.07;
        p.gamma = 1.6;
        p.noise_std = 0.10;
        p.texture_amp = 2.0;
        return p;
    }
    throw std::invalid_argument("unknown shift preset '" + std::string(name) + "'");
}

std::array<double, 3> class_color(int c) { return kPalette[static_cast<std::size_t>(c % 8)]; }

Sample generate_sample(const SceneSpec& spec, const DomainShiftParams& shift, Domain domain,
                       int index) {
    spec.validate();
    if (index < 0) throw std::invalid_argument("generate_sample: index must be >= 0");
    const int h = spec.height, w = spec.width;

    Sample s;
    s.domain = domain;
    s.scene_seed = mix64(spec.seed ^ mix64(static_cast<std::uint64_t>(index)));
    s.labels = LabelMap(h, w, 0);
    s.image = Eigen::ArrayXd::Zero(static_cast<long>(h) * w * 3);
    Paint paint{s.image, s.labels, h, w};

    // Background.
    const auto bg = class_color(0);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) paint.pixel(r, c, 0, bg);

    // Geometry depends on (seed, index) only, never on the domain, so the
    // two domains share label maps exactly.
    RandomStream geo(spec.seed, static_cast<std::uint64_t>(index), kGeometryStream);
    const double wmax = *std::max_element(spec.class_weights.begin() + 1, spec.class_weights.end());
    const double base = static_cast<double>(std::min(h, w));
    const int n_shapes = spec.min_shapes + geo.uniform_int(spec.max_shapes - spec.min_shapes + 1);

    for (int sh = 0; sh < n_shapes; ++sh) {
        const int cls = pick_weighted(geo, spec.class_weights);
        const int kind = geo.uniform_int(4);
        // Rare classes are drawn smaller, so weight controls area share
        // superlinearly.
        const double scale =
            std::min(1.0, std::sqrt(spec.class_weights[static_cast<std::size_t>(cls)] / wmax));
        const double lo = 0.10 * base * scale, hi = 0.32 * base * scale;

        auto rgb = class_color(cls);
        for (auto& ch : rgb) ch = clamp01(ch + geo.uniform(-0.05, 0.05));

        const double cy = geo.uniform(0.0, h), cx = geo.uniform(0.0, w);
        if (kind == 0) {  // axis-aligned rectangle
            const double hh = geo.uniform(lo, hi), hw = geo.uniform(lo, hi);
            for (int r = static_cast<int>(cy - hh); r <= static_cast<int>(cy + hh); ++r)
                for (int c = static_cast<int>(cx - hw); c <= static_cast<int>(cx + hw); ++c)
                    paint.pixel(r, c, cls, rgb);
        } else if (kind == 1) {  // circle
            const double rad = geo.uniform(lo, hi);
            for (int r = static_cast<int>(cy - rad); r <= static_cast<int>(cy + rad); ++r)
                for (int c = static_cast<int>(cx - rad); c <= static_cast<int>(cx + rad); ++c)
                    if ((r - cy) * (r - cy) + (c - cx) * (c - cx) <= rad * rad)
                        paint.pixel(r, c, cls, rgb);
        } else if (kind == 2) {  // triangle around (cy, cx)
            double vy[3], vx[3];
            for (int i = 0; i < 3; ++i) {
                vy[i] = cy + geo.uniform(-1.4 * hi, 1.4 * hi);
                vx[i] = cx + geo.uniform(-1.4 * hi, 1.4 * hi);
            }
            const double rmin = *std::min_element(vy, vy + 3), rmax = *std::max_element(vy, vy + 3);
            const double cmin = *std::min_element(vx, vx + 3), cmax = *std::max_element(vx, vx + 3);
            auto edge = [](double ay, double ax, double by, double bx, double py, double px) {
                return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
            };
            for (int r = static_cast<int>(rmin); r <= static_cast<int>(rmax); ++r) {
                for (int c = static_cast<int>(cmin); c <= static_cast<int>(cmax); ++c) {
                    const double e0 = edge(vy[0], vx[0], vy[1], vx[1], r, c);
                    const double e1 = edge(vy[1], vx[1], vy[2], vx[2], r, c);
                    const double e2 = edge(vy[2], vx[2], vy[0], vx[0], r, c);
                    const bool in = (e0 >= 0 && e1 >= 0 && e2 >= 0) ||
                                    (e0 <= 0 && e1 <= 0 && e2 <= 0);
                    if (in) paint.pixel(r, c, cls, rgb);
                }
            }
        } else {  // horizontal band, full width
            const double th = geo.uniform(0.5 * lo, 0.5 * hi) + 1.0;
            for (int r = static_cast<int>(cy - th); r <= static_cast<int>(cy + th); ++r)
                for (int c = 0; c < w; ++c) paint.pixel(r, c, cls, rgb);
        }
    }

    // Per-class speckle texture; shared across domains up to the shift's
    // amplitude multiplier.
    const double tex_mul = domain == Domain::target ? shift.texture_amp : 1.0;
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            RandomStream tex(spec.seed, static_cast<std::uint64_t>(index), kTextureStream,
                             static_cast<std::uint64_t>(r) << 32 | static_cast<std::uint64_t>(c));
            const double n = tex.uniform(-1.0, 1.0);
            const double amp = texture_amplitude(s.labels.at(r, c)) * tex_mul;
            double* px = s.image.data() + (static_cast<long>(r) * w + c) * 3;
            for (int ch = 0; ch < 3; ++ch) px[ch] = clamp01(px[ch] + amp * n);
        }
    }

    if (domain == Domain::target) {
        const bool do_color = !(shift.color.isIdentity(0.0) && shift.bias.isZero(0.0));
        RandomStream noise(spec.seed, static_cast<std::uint64_t>(index), kNoiseStream, 1);
        const double na = kSqrt3 * shift.noise_std;  // uniform with matching std
        for (long p = 0; p < static_cast<long>(h) * w; ++p) {
            Eigen::Vector3d rgb(s.image[p * 3], s.image[p * 3 + 1], s.image[p * 3 + 2]);
            if (do_color) {
                rgb = shift.color * rgb + shift.bias;
                for (int ch = 0; ch < 3; ++ch) rgb[ch] = clamp01(rgb[ch]);
            }
            if (shift.gamma != 1.0)
                for (int ch = 0; ch < 3; ++ch) rgb[ch] = std::pow(rgb[ch], shift.gamma);
            if (shift.noise_std != 0.0)
                for (int ch = 0; ch < 3; ++ch) rgb[ch] += noise.uniform(-na, na);
            for (int ch = 0; ch < 3; ++ch) s.image[p * 3 + ch] = clamp01(rgb[ch]);
        }
    }
    return s;
}

Eigen::ArrayXd class_pixel_shares(const std::vector<Sample>& samples, int classes) {
    if (samples.empty()) throw std::invalid_argument("class_pixel_shares: empty dataset");
    Eigen::ArrayXd counts = Eigen::ArrayXd::Zero(classes);
    long total = 0;
    for (const Sample& s : samples) {
        for (std::uint8_t v : s.labels.v) {
            counts[v] += 1.0;
            ++total;
        }
    }
    return counts / static_cast<double>(total);
}

std::vector<int> tail_classes(const Eigen::ArrayXd& shares) {
    std::vector<int> tail;
    for (int c = 0; c < shares.size(); ++c)
        if (shares[c] < 0.01) tail.push_back(c);
    return tail;
}

// ---------------------------------------------------------------------------
// PNM i/o
// ---------------------------------------------------------------------------

namespace {

void skip_pnm_space(std::istream& in) {
    for (;;) {
        int ch = in.peek();
        if (ch == '#') {
            std::string line;
            std::getline(in, line);
        } else if (std::isspace(ch)) {
            in.get();
        } else {
            return;
        }
    }
}

void read_pnm_header(std::istream& in, const char* magic, int& w, int& h) {
    char m0 = 0, m1 = 0;
    in.get(m0);
    in.get(m1);
    if (m0 != magic[0] || m1 != magic[1]) {
        throw std::runtime_error(std::string("bad pnm magic, expected ") + magic);
    }
    int maxval = 0;
    skip_pnm_space(in);
    in >> w;
    skip_pnm_space(in);
    in >> h;
    skip_pnm_space(in);
    in >> maxval;
    if (!in || w <= 0 || h <= 0 || maxval != 255) throw std::runtime_error("bad pnm header");
    in.get();  // single whitespace before raster
}

}  // namespace

void save_ppm(const std::filesystem::path& path, const Eigen::ArrayXd& image, int h, int w,
              const std::string& comment) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "P6\n";
    if (!comment.empty()) out << "# " << comment << "\n";
    out << w << " " << h << "\n255\n";
    std::vector<unsigned char> raw(static_cast<std::size_t>(h) * w * 3);
    for (std::size_t i = 0; i < raw.size(); ++i) {
        raw[i] = static_cast<unsigned char>(
            std::lround(clamp01(image[static_cast<long>(i)]) * 255.0));
    }
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<long>(raw.size()));
}

Eigen::ArrayXd load_ppm(const std::filesystem::path& path, int& h, int& w) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    read_pnm_header(in, "P6", w, h);
    std::vector<unsigned char> raw(static_cast<std::size_t>(h) * w * 3);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<long>(raw.size()));
    if (!in) throw std::runtime_error("truncated ppm " + path.string());
    Eigen::ArrayXd image(static_cast<long>(h) * w * 3);
    for (std::size_t i = 0; i < raw.size(); ++i)
        image[static_cast<long>(i)] = raw[i] / 255.0;
    return image;
}

void save_pgm(const std::filesystem::path& path, const LabelMap& labels) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "P5\n" << labels.cols << " " << labels.rows << "\n255\n";
    out.write(reinterpret_cast<const char*>(labels.v.data()), labels.size());
}

LabelMap load_pgm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    int w = 0, h = 0;
    read_pnm_header(in, "P5", w, h);
    LabelMap labels(h, w);
    in.read(reinterpret_cast<char*>(labels.v.data()), labels.size());
    if (!in) throw std::runtime_error("truncated pgm " + path.string());
    return labels;
}

// ---------------------------------------------------------------------------
// dataset directory
// ---------------------------------------------------------------------------

namespace {

std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string fmt_list(const double* v, int n) {
    std::string s;
    for (int i = 0; i < n; ++i) {
        if (i) s += ",";
        s += fmt_double(v[i]);
    }
    return s;
}

std::vector<double> parse_list(const std::string& s) {
    std::vector<double> out;
    std::istringstream is(s);
    std::string tok;
    while (std::getline(is, tok, ',')) out.push_back(std::stod(tok));
    return out;
}

}  // namespace

void write_dataset(const std::filesystem::path& root, const SceneSpec& spec,
                   const DomainShiftParams& shift, int count_source, int count_target) {
    spec.validate();
    namespace fs = std::filesystem;
    fs::create_directories(root / "source");
    fs::create_directories(root / "target");

    for (int i = 0; i < count_source; ++i) {
        Sample s = generate_sample(spec, shift, Domain::source, i);
        save_ppm(root / "source" / ("img_" + std::to_string(i) + ".ppm"), s.image, spec.height,
                 spec.width);
        save_pgm(root / "source" / ("lab_" + std::to_string(i) + ".pgm"), s.labels);
    }
    for (int i = 0; i < count_target; ++i) {
        Sample s = generate_sample(spec, shift, Domain::target, i);
        save_ppm(root / "target" / ("img_" + std::to_string(i) + ".ppm"), s.image, spec.height,
                 spec.width);
        save_pgm(root / "target" / ("lab_" + std::to_string(i) + ".pgm"), s.labels);
    }

    std::ofstream out(root / "manifest.txt");
    if (!out) throw std::runtime_error("cannot write manifest in " + root.string());
    out << "classes = " << spec.classes << "\n";
    out << "height = " << spec.height << "\n";
    out << "width = " << spec.width << "\n";
    out << "count_source = " << count_source << "\n";
    out << "count_target = " << count_target << "\n";
    out << "seed = " << spec.seed << "\n";
    out << "min_shapes = " << spec.min_shapes << "\n";
    out << "max_shapes = " << spec.max_shapes << "\n";
    out << "class_weights = "
        << fmt_list(spec.class_weights.data(), static_cast<int>(spec.class_weights.size())) << "\n";
    Eigen::Matrix<double, 3, 3, Eigen::RowMajor> cm = shift.color;
    out << "shift_color = " << fmt_list(cm.data(), 9) << "\n";
    out << "shift_bias = " << fmt_list(shift.bias.data(), 3) << "\n";
    out << "shift_gamma = " << fmt_double(shift.gamma) << "\n";
    out << "shift_noise_std = " << fmt_double(shift.noise_std) << "\n";
    out << "shift_texture_amp = " << fmt_double(shift.texture_amp) << "\n";
}

DatasetManifest read_manifest(const std::filesystem::path& root) {
    std::ifstream in(root / "manifest.txt");
    if (!in) throw std::runtime_error("cannot read manifest in " + root.string());
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(in, line)) {
        auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    auto need = [&](const std::string& k) {
        auto it = kv.find(k);
        if (it == kv.end()) throw std::runtime_error("manifest missing key '" + k + "'");
        return it->second;
    };
    DatasetManifest m;
    m.spec.classes = std::stoi(need("classes"));
    m.spec.height = std::stoi(need("height"));
    m.spec.width = std::stoi(need("width"));
    m.count_source = std::stoi(need("count_source"));
    m.count_target = std::stoi(need("count_target"));
    m.spec.seed = std::stoull(need("seed"));
    m.spec.min_shapes = std::stoi(need("min_shapes"));
    m.spec.max_shapes = std::stoi(need("max_shapes"));
    m.spec.class_weights = parse_list(need("class_weights"));
    auto cm = parse_list(need("shift_color"));
    if (cm.size() != 9) throw std::runtime_error("manifest shift_color needs 9 values");
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) m.shift.color(r, c) = cm[static_cast<std::size_t>(r) * 3 + c];
    auto bias = parse_list(need("shift_bias"));
    if (bias.size() != 3) throw std::runtime_error("manifest shift_bias needs 3 values");
    for (int i = 0; i < 3; ++i) m.shift.bias[i] = bias[static_cast<std::size_t>(i)];
    m.shift.gamma = std::stod(need("shift_gamma"));
    m.shift.noise_std = std::stod(need("shift_noise_std"));
    m.shift.texture_amp = std::stod(need("shift_texture_amp"));
    return m;
}

Sample load_sample(const std::filesystem::path& root, const DatasetManifest& m, Domain domain,
                   int index) {
    const auto dir = root / std::string(domain_name(domain));
    Sample s;
    int h = 0, w = 0;
    s.image = load_ppm(dir / ("img_" + std::to_string(index) + ".ppm"), h, w);
    if (h != m.spec.height || w != m.spec.width) {
        throw std::runtime_error("sample extents disagree with manifest");
    }
    s.labels = load_pgm(dir / ("lab_" + std::to_string(index) + ".pgm"));
    s.domain = domain;
    s.scene_seed = mix64(m.spec.seed ^ mix64(static_cast<std::uint64_t>(index)));
    return s;
}

}  // namespace spcl
