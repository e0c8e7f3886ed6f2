#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cstn/rng.hpp"
#include "cstn/tensor.hpp"
#include "cstn/types.hpp"

namespace cstn {

/// Generation recipe. Splits draw from disjoint counter-based seed
/// streams, so train and val are independent of each other's sizes.
struct DatasetSpec {
    std::uint64_t seed = 1;
    int num_classes = 6; // <= 6 shape classes
    int n_train = 1000;
    int n_val = 500;
    int image_size = 64;
    double scale_min = 0.15; // max gt side as fraction of image side
    double scale_max = 0.8;
    double aspect_min = 0.75;
    double aspect_max = 4.0 / 3.0;
    double clutter = 1.0; // 0 = plain background, 1 = full noise + distractors
};

/// One weakly-labeled image. The box is ground truth for evaluation only;
/// training sees just the label.
struct WeakSample {
    Tensor image; // [3,H,W], values in [0,1]
    int label = 0;
    BoxXYXY gt_box; // tight box of the rendered object, strictly inside
    int area_bin = 0; // of 10 equal-width bins over [0, max gt area in split]
};

struct Dataset {
    DatasetSpec spec;
    std::vector<WeakSample> train;
    std::vector<WeakSample> val;
};

/// Pose and palette of one object; generate() draws these per sample,
/// tests construct them directly.
struct ObjectParams {
    int label = 0;
    double cx = 0.0, cy = 0.0; // center in pixels
    double scale = 0.5;        // max AABB side / image side
    double aspect = 1.0;
    double rotation = 0.0; // radians
    double color[3] = {0.9, 0.35, 0.25};
};

/// Number of classes the renderer knows (disk, square, triangle, cross,
/// ring, bar).
int max_classes();
const char* class_name(int label);

/// Renders one sample: clutter background (driven by rng), then the
/// object; gt_box is the tight box of the coverage mask. area_bin is left
/// at 0 (assigned per split by generate).
WeakSample render_sample(const DatasetSpec& spec, const ObjectParams& obj, Rng& rng);

/// Fully deterministic in spec.seed. Objects too large to place inside
/// the image are resampled a bounded number of times, then rejected.
Dataset generate(const DatasetSpec& spec);

/// Dataset directory layout: manifest.json (one sample per line; line one
/// also carries the generation spec) plus one raw tensor file per image.
void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

} // namespace cstn
