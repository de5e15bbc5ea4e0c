#pragma once

#include "tokenhalt/rng.hpp"
#include "tokenhalt/tensor.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

namespace tokenhalt {

struct Point {
    double x = 0, y = 0, z = 0;
    double intensity = 0;   // [0, 1]
    double elongation = 0;  // [0, 1]
};

struct BBox {
    double lx = 0, ly = 0, lz = 0;  // center, meters
    double wx = 1, wy = 1, wz = 1;  // dimensions, meters
    double alpha = 0;               // heading in [-pi, pi)
    int class_id = 0;
};

/// True if the planar point lies inside the box footprint rotated by alpha.
bool in_footprint(const BBox& box, double x, double y);

struct Scene {
    std::uint64_t seed = 0;
    double extent_m = 40.0;
    std::vector<Point> points;
    std::vector<BBox> boxes;
};

struct SceneConfig {
    int n_objects = 3;
    int n_background_clusters = 2;
    double extent_m = 40.0;
    int n_ground_points = 900;
};

/// Deterministic synthetic LiDAR-like scene: a ground plane with range
/// falloff, box-shaped objects (interior plus surface samples) and wall or
/// foliage clusters that avoid object footprints.
Scene generate_scene(std::uint64_t seed, const SceneConfig& config);

/// Random flip about the x axis and rotation about z; drops anything that
/// leaves the extent.
Scene augment_scene(const Scene& scene, Rng& rng);

class SceneFormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

void write_scene(std::ostream& os, const Scene& scene);
Scene read_scene(std::istream& is);
void save_scene(const std::filesystem::path& path, const Scene& scene);
Scene load_scene(const std::filesystem::path& path);

/// Square BEV grid over [-extent/2, extent/2)^2.
struct GridSpec {
    double extent_m = 40.0;
    double voxel_m = 0.5;

    int cells_per_side() const;
    double origin() const { return -extent_m / 2; }
    double cell_center(int index) const { return origin() + (index + 0.5) * voxel_m; }
    int cell_of(double coord) const;
    std::uint32_t flat(int ix, int iy) const { return static_cast<std::uint32_t>(iy * cells_per_side() + ix); }
};

constexpr std::size_t kRawFeatures = 6;

struct Embedding {
    Tensor weight;  // [kRawFeatures, D]
    Tensor bias;    // [D]
};

struct TokenSet {
    Tensor raw;       // [N, kRawFeatures] pooled point statistics
    Tensor features;  // [N, D]; equals raw when no embedding is supplied
    std::vector<std::array<int, 2>> grid_coords;
    std::vector<int> n_points;
    std::vector<int> region_id;
    std::vector<int> shifted_region_id;
    int region_size = 0;

    std::size_t size() const { return grid_coords.size(); }
    std::vector<std::uint32_t> cells(const GridSpec& grid) const;
};

/// One token per occupied cell, ordered by flat cell index. Raw features are
/// (mean dx, mean dy relative to the cell center in cell units, mean z / 2m,
/// mean intensity, mean elongation, n_points / 16).
TokenSet voxelize(const Scene& scene, const GridSpec& grid, const Embedding* embed = nullptr);

/// Region cell of a grid coordinate; the shifted grouping offsets by floor(R/2).
std::array<int, 2> region_cell(std::array<int, 2> coord, int region_size, bool shifted);
/// Fills region_id and shifted_region_id.
void assign_regions(TokenSet& tokens, int region_size);

struct Heatmap {
    int width = 0;
    std::vector<double> values;  // row-major [y * width + x]
    double at(int ix, int iy) const { return values[static_cast<std::size_t>(iy * width + ix)]; }
};

/// Gaussian center heatmap: cells inside a footprint get exp(-d^2 / 2 sigma^2)
/// with d measured between cell centers from the cell holding the box center,
/// sigma = sigma_fraction * planar diagonal; per-class maps are max-reduced.
Heatmap build_heatmap(const std::vector<BBox>& boxes, const GridSpec& grid, double sigma_fraction = 0.25);

constexpr std::size_t kBoxParams = 8;

/// Regression target at the box center cell: center offset (cell units),
/// z, log dimensions, sin and cos of the heading.
std::array<double, kBoxParams> encode_box(const BBox& box, const GridSpec& grid);

}  // namespace tokenhalt
