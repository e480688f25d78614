#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "spcl/label_map.hpp"

namespace spcl {

enum class Domain { source, target };

std::string_view domain_name(Domain d);

/// Scene recipe for the paired-domain generator. Weights steer how often
/// each class is drawn as a primitive (entry 0 belongs to the flat
/// background and is not sampled); low-weight classes are also drawn
/// smaller, which is what pushes a tail class under a 1% pixel share.
struct SceneSpec {
    int height = 64;
    int width = 64;
    int classes = 8;
    int min_shapes = 3;
    int max_shapes = 8;
    std::vector<double> class_weights;
    std::uint64_t seed = 7;

    static SceneSpec defaults();
    void validate() const;
};

/// Rendering shift applied to target-domain samples. All-default values
/// mean no shift: source and target renders are then bit-identical.
struct DomainShiftParams {
    Eigen::Matrix3d color = Eigen::Matrix3d::Identity();
    Eigen::Vector3d bias = Eigen::Vector3d::Zero();
    double gamma = 1.0;
    double noise_std = 0.0;
    double texture_amp = 1.0;

    bool is_identity() const;
    /// Named presets: "none", "default", "strong".
    static DomainShiftParams preset(std::string_view name);
};

struct Sample {
    Eigen::ArrayXd image;  // H*W*3 row-major, values in [0,1]
    LabelMap labels;       // H x W class ids, no ignore values
    Domain domain = Domain::source;
    std::uint64_t scene_seed = 0;
};

/// Class base color, also the fixed rendering palette (8 entries, cycled).
std::array<double, 3> class_color(int c);

/// Deterministic render of scene (spec.seed, index). Geometry and labels
/// depend only on (seed, index); the shift is applied to target renders.
Sample generate_sample(const SceneSpec& spec, const DomainShiftParams& shift, Domain domain,
                       int index);

/// Fraction of pixels per class over a set of samples; sums to 1.
Eigen::ArrayXd class_pixel_shares(const std::vector<Sample>& samples, int classes);

/// Class ids whose pixel share is below 1%.
std::vector<int> tail_classes(const Eigen::ArrayXd& shares);

// --- dataset directory layout -----------------------------------------------
//   <root>/<domain>/img_<index>.ppm   binary 8-bit P6
//   <root>/<domain>/lab_<index>.pgm   binary P5, pixel value = class id
//   <root>/manifest.txt               key = value lines

struct DatasetManifest {
    SceneSpec spec;
    DomainShiftParams shift;
    int count_source = 0;
    int count_target = 0;
};

void save_ppm(const std::filesystem::path& path, const Eigen::ArrayXd& image, int h, int w,
              const std::string& comment = {});
Eigen::ArrayXd load_ppm(const std::filesystem::path& path, int& h, int& w);
void save_pgm(const std::filesystem::path& path, const LabelMap& labels);
LabelMap load_pgm(const std::filesystem::path& path);

void write_dataset(const std::filesystem::path& root, const SceneSpec& spec,
                   const DomainShiftParams& shift, int count_source, int count_target);
DatasetManifest read_manifest(const std::filesystem::path& root);
Sample load_sample(const std::filesystem::path& root, const DatasetManifest& m, Domain domain,
                   int index);

}  // namespace spcl
