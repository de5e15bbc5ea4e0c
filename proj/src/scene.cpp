#include "tokenhalt/scene.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <numbers>
#include <ostream>
#include <sstream>
#include <tuple>

namespace tokenhalt {

namespace {

constexpr double kPi = std::numbers::pi;

double wrap_angle(double a) {
    a = std::fmod(a + kPi, 2 * kPi);
    if (a < 0) a += 2 * kPi;
    return a - kPi;
}

bool inside_extent(double x, double y, double extent) {
    const double h = extent / 2;
    return x >= -h && x < h && y >= -h && y < h;
}

bool in_any_footprint(const std::vector<BBox>& boxes, double x, double y) {
    return std::any_of(boxes.begin(), boxes.end(), [&](const BBox& b) { return in_footprint(b, x, y); });
}

BBox sample_box(Rng& rng, double extent) {
    BBox b;
    const double pick = rng.uniform();
    if (pick < 0.6) {
        b.class_id = 0;
        b.wx = rng.uniform(3.8, 5.0);
        b.wy = rng.uniform(1.7, 2.1);
        b.wz = rng.uniform(1.4, 1.8);
    } else if (pick < 0.8) {
        b.class_id = 1;
        b.wx = rng.uniform(0.6, 1.0);
        b.wy = rng.uniform(0.6, 1.0);
        b.wz = rng.uniform(1.6, 1.9);
    } else {
        b.class_id = 2;
        b.wx = rng.uniform(1.6, 2.0);
        b.wy = rng.uniform(0.6, 0.9);
        b.wz = rng.uniform(1.5, 1.8);
    }
    const double margin = 4.0;
    b.lx = rng.uniform(-extent / 2 + margin, extent / 2 - margin);
    b.ly = rng.uniform(-extent / 2 + margin, extent / 2 - margin);
    b.lz = b.wz / 2;
    b.alpha = wrap_angle(rng.uniform(-kPi, kPi));
    return b;
}

void add_object_points(const BBox& b, Rng& rng, std::vector<Point>& out) {
    const int n = b.class_id == 0 ? 120 + static_cast<int>(rng.below(61))
                : b.class_id == 1 ? 40 + static_cast<int>(rng.below(21))
                                  : 50 + static_cast<int>(rng.below(31));
    const double c = std::cos(b.alpha), s = std::sin(b.alpha);
    const double hx = b.wx / 2 * 0.98, hy = b.wy / 2 * 0.98, hz = b.wz / 2 * 0.98;
    for (int i = 0; i < n; ++i) {
        double u = rng.uniform(-hx, hx), v = rng.uniform(-hy, hy), w = rng.uniform(-hz, hz);
        if (i % 2 == 1) {
            // surface sample: pin one coordinate to a side face or the roof
            switch (rng.below(5)) {
                case 0: u = hx; break;
                case 1: u = -hx; break;
                case 2: v = hy; break;
                case 3: v = -hy; break;
                default: w = hz; break;
            }
        }
        Point p;
        p.x = b.lx + c * u - s * v;
        p.y = b.ly + s * u + c * v;
        p.z = b.lz + w;
        p.intensity = rng.uniform(0.4, 1.0);
        p.elongation = rng.uniform(0.0, 0.4);
        out.push_back(p);
    }
}

void add_cluster_points(Rng& rng, double extent, const std::vector<BBox>& boxes, std::vector<Point>& out) {
    const bool wall = rng.uniform() < 0.5;
    const double cx = rng.uniform(-extent / 2 + 2, extent / 2 - 2);
    const double cy = rng.uniform(-extent / 2 + 2, extent / 2 - 2);
    const double theta = rng.uniform(-kPi, kPi);
    const double length = rng.uniform(3.0, 8.0);
    for (int i = 0; i < 80; ++i) {
        double x, y, z;
        if (wall) {
            const double t = rng.uniform(-length / 2, length / 2);
            const double n = rng.uniform(-0.1, 0.1);
            x = cx + std::cos(theta) * t - std::sin(theta) * n;
            y = cy + std::sin(theta) * t + std::cos(theta) * n;
            z = rng.uniform(0.0, 3.0);
        } else {
            x = cx + rng.normal(0.0, 1.0);
            y = cy + rng.normal(0.0, 1.0);
            z = rng.uniform(0.5, 3.0);
        }
        if (!inside_extent(x, y, extent) || in_any_footprint(boxes, x, y)) continue;
        Point p{x, y, z, rng.uniform(0.1, 0.5), wall ? rng.uniform(0.0, 0.3) : rng.uniform(0.3, 1.0)};
        out.push_back(p);
    }
}

std::string fmt(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

double parse_double(const std::string& tok, int line) {
    double v = 0;
    auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (res.ec != std::errc() || res.ptr != tok.data() + tok.size()) {
        throw SceneFormatError("line " + std::to_string(line) + ": bad number '" + tok + "'");
    }
    return v;
}

std::vector<std::string> split(const std::string& line) {
    std::istringstream is(line);
    std::vector<std::string> out;
    std::string t;
    while (is >> t) out.push_back(t);
    return out;
}

}  // namespace

bool in_footprint(const BBox& box, double x, double y) {
    const double dx = x - box.lx, dy = y - box.ly;
    const double c = std::cos(box.alpha), s = std::sin(box.alpha);
    const double u = c * dx + s * dy;
    const double v = -s * dx + c * dy;
    return std::abs(u) <= box.wx / 2 && std::abs(v) <= box.wy / 2;
}

Scene generate_scene(std::uint64_t seed, const SceneConfig& config) {
    Scene scene;
    scene.seed = seed;
    scene.extent_m = config.extent_m;
    const double extent = config.extent_m;
    Rng rng = Rng::stream(seed, "scene");

    for (int i = 0; i < config.n_objects; ++i) {
        for (int attempt = 0; attempt < 200; ++attempt) {
            BBox b = sample_box(rng, extent);
            const double diag = std::hypot(b.wx, b.wy);
            const bool clear = std::none_of(scene.boxes.begin(), scene.boxes.end(), [&](const BBox& o) {
                return std::hypot(o.lx - b.lx, o.ly - b.ly) < (diag + std::hypot(o.wx, o.wy)) / 2 + 1.0;
            });
            if (clear) {
                scene.boxes.push_back(b);
                break;
            }
        }
    }

    const double r_max = extent / 2 * std::numbers::sqrt2;
    for (int i = 0; i < config.n_ground_points; ++i) {
        const double r = rng.uniform(1.5, r_max);
        const double th = rng.uniform(-kPi, kPi);
        const double x = r * std::cos(th), y = r * std::sin(th);
        const double z = rng.uniform(-0.05, 0.05);
        const double inten = rng.uniform(0.0, 0.25), elong = rng.uniform(0.0, 0.2);
        if (!inside_extent(x, y, extent) || in_any_footprint(scene.boxes, x, y)) continue;
        scene.points.push_back(Point{x, y, z, inten, elong});
    }
    for (const auto& b : scene.boxes) add_object_points(b, rng, scene.points);
    for (int i = 0; i < config.n_background_clusters; ++i) add_cluster_points(rng, extent, scene.boxes, scene.points);
    return scene;
}

Scene augment_scene(const Scene& scene, Rng& rng) {
    const bool flip = rng.uniform() < 0.5;
    const double angle = rng.uniform(-kPi / 4, kPi / 4);
    const double c = std::cos(angle), s = std::sin(angle);
    auto move = [&](double& x, double& y) {
        if (flip) y = -y;
        const double nx = c * x - s * y, ny = s * x + c * y;
        x = nx;
        y = ny;
    };
    Scene out;
    out.seed = scene.seed;
    out.extent_m = scene.extent_m;
    for (auto p : scene.points) {
        move(p.x, p.y);
        if (inside_extent(p.x, p.y, scene.extent_m)) out.points.push_back(p);
    }
    for (auto b : scene.boxes) {
        move(b.lx, b.ly);
        b.alpha = wrap_angle((flip ? -b.alpha : b.alpha) + angle);
        if (inside_extent(b.lx, b.ly, scene.extent_m)) out.boxes.push_back(b);
    }
    return out;
}

void write_scene(std::ostream& os, const Scene& scene) {
    os << "scene " << scene.seed << ' ' << fmt(scene.extent_m) << '\n';
    os << "points " << scene.points.size() << '\n';
    for (const auto& p : scene.points) {
        os << fmt(p.x) << ' ' << fmt(p.y) << ' ' << fmt(p.z) << ' ' << fmt(p.intensity) << ' ' << fmt(p.elongation)
           << '\n';
    }
    os << "boxes " << scene.boxes.size() << '\n';
    for (const auto& b : scene.boxes) {
        os << fmt(b.lx) << ' ' << fmt(b.ly) << ' ' << fmt(b.lz) << ' ' << fmt(b.wx) << ' ' << fmt(b.wy) << ' '
           << fmt(b.wz) << ' ' << fmt(b.alpha) << ' ' << b.class_id << '\n';
    }
}

Scene read_scene(std::istream& is) {
    Scene scene;
    std::string line;
    int lineno = 0;
    auto next_fields = [&](std::size_t expected, const char* what) {
        if (!std::getline(is, line)) throw SceneFormatError(std::string("unexpected end of file reading ") + what);
        ++lineno;
        auto f = split(line);
        if (f.size() != expected) {
            throw SceneFormatError("line " + std::to_string(lineno) + ": expected " + std::to_string(expected) +
                                   " fields for " + what);
        }
        return f;
    };
    auto count_of = [&](const std::vector<std::string>& f, const char* key) {
        if (f[0] != key) throw SceneFormatError("line " + std::to_string(lineno) + ": expected '" + key + "'");
        try {
            return static_cast<std::size_t>(std::stoull(f[1]));
        } catch (const std::exception&) {
            throw SceneFormatError("line " + std::to_string(lineno) + ": bad count '" + f[1] + "'");
        }
    };

    auto header = next_fields(3, "header");
    if (header[0] != "scene") throw SceneFormatError("line 1: expected 'scene' header");
    try {
        scene.seed = std::stoull(header[1]);
    } catch (const std::exception&) {
        throw SceneFormatError("line 1: bad seed '" + header[1] + "'");
    }
    scene.extent_m = parse_double(header[2], lineno);
    if (!(scene.extent_m > 0)) throw SceneFormatError("line 1: extent must be positive");

    const std::size_t np = count_of(next_fields(2, "points header"), "points");
    scene.points.reserve(np);
    for (std::size_t i = 0; i < np; ++i) {
        auto f = next_fields(5, "point");
        scene.points.push_back(Point{parse_double(f[0], lineno), parse_double(f[1], lineno), parse_double(f[2], lineno),
                                     parse_double(f[3], lineno), parse_double(f[4], lineno)});
    }
    const std::size_t nb = count_of(next_fields(2, "boxes header"), "boxes");
    for (std::size_t i = 0; i < nb; ++i) {
        auto f = next_fields(8, "box");
        BBox b{parse_double(f[0], lineno), parse_double(f[1], lineno), parse_double(f[2], lineno),
               parse_double(f[3], lineno), parse_double(f[4], lineno), parse_double(f[5], lineno),
               parse_double(f[6], lineno), static_cast<int>(parse_double(f[7], lineno))};
        if (!(b.wx > 0 && b.wy > 0 && b.wz > 0)) {
            throw SceneFormatError("line " + std::to_string(lineno) + ": box dimensions must be positive");
        }
        scene.boxes.push_back(b);
    }
    return scene;
}

void save_scene(const std::filesystem::path& path, const Scene& scene) {
    std::ofstream os(path);
    if (!os) throw SceneFormatError("cannot open " + path.string() + " for writing");
    write_scene(os, scene);
}

Scene load_scene(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw SceneFormatError("cannot open " + path.string());
    return read_scene(is);
}

int GridSpec::cells_per_side() const {
    const double ratio = extent_m / voxel_m;
    const double rounded = std::round(ratio);
    if (!(voxel_m > 0) || std::abs(ratio - rounded) > 1e-9 || rounded < 1) {
        throw std::invalid_argument("voxel size " + fmt(voxel_m) + " does not divide extent " + fmt(extent_m));
    }
    return static_cast<int>(rounded);
}

int GridSpec::cell_of(double coord) const {
    const int n = cells_per_side();
    const int i = static_cast<int>(std::floor((coord - origin()) / voxel_m));
    return std::clamp(i, 0, n - 1);
}

std::vector<std::uint32_t> TokenSet::cells(const GridSpec& grid) const {
    std::vector<std::uint32_t> out;
    out.reserve(grid_coords.size());
    for (const auto& c : grid_coords) out.push_back(grid.flat(c[0], c[1]));
    return out;
}

TokenSet voxelize(const Scene& scene, const GridSpec& grid, const Embedding* embed) {
    grid.cells_per_side();  // validates divisibility
    std::map<std::uint32_t, std::vector<const Point*>> cells;
    for (const auto& p : scene.points) {
        cells[grid.flat(grid.cell_of(p.x), grid.cell_of(p.y))].push_back(&p);
    }

    TokenSet ts;
    const std::size_t n = cells.size();
    ts.raw = Tensor(Shape{n, kRawFeatures});
    const int side = grid.cells_per_side();
    std::size_t row = 0;
    for (auto& [flat, pts] : cells) {
        // fixed summation order makes the pooled features independent of input order
        std::sort(pts.begin(), pts.end(), [](const Point* a, const Point* b) {
            return std::tie(a->x, a->y, a->z, a->intensity, a->elongation) <
                   std::tie(b->x, b->y, b->z, b->intensity, b->elongation);
        });
        const int ix = static_cast<int>(flat % side), iy = static_cast<int>(flat / side);
        double sx = 0, sy = 0, sz = 0, sr = 0, st = 0;
        for (const Point* p : pts) {
            sx += p->x;
            sy += p->y;
            sz += p->z;
            sr += p->intensity;
            st += p->elongation;
        }
        const double cnt = static_cast<double>(pts.size());
        double* f = &ts.raw[row * kRawFeatures];
        f[0] = (sx / cnt - grid.cell_center(ix)) / grid.voxel_m;
        f[1] = (sy / cnt - grid.cell_center(iy)) / grid.voxel_m;
        f[2] = sz / cnt / 2.0;
        f[3] = sr / cnt;
        f[4] = st / cnt;
        f[5] = cnt / 16.0;
        ts.grid_coords.push_back({ix, iy});
        ts.n_points.push_back(static_cast<int>(pts.size()));
        ++row;
    }

    if (embed) {
        const std::size_t d = embed->bias.size();
        if (embed->weight.shape() != Shape{kRawFeatures, d}) {
            throw ShapeError("voxelize", "embedding weight " + shape_str(embed->weight.shape()));
        }
        ts.features = Tensor(Shape{n, d});
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) {
                double s = embed->bias[j];
                for (std::size_t k = 0; k < kRawFeatures; ++k) s += ts.raw[i * kRawFeatures + k] * embed->weight[k * d + j];
                ts.features[i * d + j] = s;
            }
    } else {
        ts.features = ts.raw;
    }
    return ts;
}

std::array<int, 2> region_cell(std::array<int, 2> coord, int region_size, bool shifted) {
    if (region_size < 1) throw std::invalid_argument("region size must be >= 1");
    const int off = shifted ? region_size / 2 : 0;
    return {(coord[0] + off) / region_size, (coord[1] + off) / region_size};
}

void assign_regions(TokenSet& tokens, int region_size) {
    tokens.region_size = region_size;
    tokens.region_id.clear();
    tokens.shifted_region_id.clear();
    // coordinates are non-negative, so a generous fixed stride linearizes uniquely
    constexpr int kStride = 1 << 16;
    for (const auto& c : tokens.grid_coords) {
        const auto r = region_cell(c, region_size, false);
        const auto s = region_cell(c, region_size, true);
        tokens.region_id.push_back(r[1] * kStride + r[0]);
        tokens.shifted_region_id.push_back(s[1] * kStride + s[0]);
    }
}

Heatmap build_heatmap(const std::vector<BBox>& boxes, const GridSpec& grid, double sigma_fraction) {
    const int n = grid.cells_per_side();
    Heatmap hm;
    hm.width = n;
    hm.values.assign(static_cast<std::size_t>(n) * n, 0.0);
    for (const auto& b : boxes) {
        const int cx = grid.cell_of(b.lx), cy = grid.cell_of(b.ly);
        const double ccx = grid.cell_center(cx), ccy = grid.cell_center(cy);
        const double sigma = sigma_fraction * std::hypot(b.wx, b.wy);
        const double reach = std::hypot(b.wx, b.wy) / 2 + grid.voxel_m;
        const int lo_x = grid.cell_of(b.lx - reach), hi_x = grid.cell_of(b.lx + reach);
        const int lo_y = grid.cell_of(b.ly - reach), hi_y = grid.cell_of(b.ly + reach);
        for (int iy = lo_y; iy <= hi_y; ++iy)
            for (int ix = lo_x; ix <= hi_x; ++ix) {
                const double x = grid.cell_center(ix), y = grid.cell_center(iy);
                const bool center = ix == cx && iy == cy;
                if (!center && !in_footprint(b, x, y)) continue;
                const double d2 = (x - ccx) * (x - ccx) + (y - ccy) * (y - ccy);
                const double m = center ? 1.0 : std::exp(-d2 / (2 * sigma * sigma));
                double& cell = hm.values[static_cast<std::size_t>(iy * n + ix)];
                cell = std::max(cell, m);
            }
    }
    return hm;
}

std::array<double, kBoxParams> encode_box(const BBox& box, const GridSpec& grid) {
    const int cx = grid.cell_of(box.lx), cy = grid.cell_of(box.ly);
    return {(box.lx - grid.cell_center(cx)) / grid.voxel_m,
            (box.ly - grid.cell_center(cy)) / grid.voxel_m,
            box.lz,
            std::log(box.wx),
            std::log(box.wy),
            std::log(box.wz),
            std::sin(box.alpha),
            std::cos(box.alpha)};
}

}  // namespace tokenhalt
