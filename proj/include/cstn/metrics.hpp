#pragma once

#include <string>
#include <vector>

#include "cstn/common.hpp"
#include "cstn/types.hpp"

namespace cstn {

/// One candidate box with its joint probability (in box.score) and its
/// IoU against the record's ground truth.
struct ScoredBox {
    BoxXYXY box;
    double iou = 0.0;
};

/// Per-sample evaluation output. Classification and localization make
/// separate class calls: marginal_class is the argmax of the class
/// marginal (classification), pred_class is the class at the joint
/// argmax (localization). Boxes are the top-k (k <= 5) candidates for
/// the ground-truth class, best first; when pred_class is right its
/// best box coincides with boxes[0], so the one list serves every
/// localization metric.
struct EvalRecord {
    int id = 0;
    int pred_class = 0;     // class at the joint (c,l,s) argmax
    int marginal_class = 0; // argmax of the class marginal
    std::vector<ScoredBox> boxes;
    int gt_label = 0;
    BoxXYXY gt_box;
};

/// Intersection-over-union with input validation (x1<=x2, y1<=y2).
double iou(const BoxXYXY& a, const BoxXYXY& b);

/// Fraction with marginal_class == gt_label.
double top1_class(const std::vector<EvalRecord>& records);
/// Fraction with pred_class == gt_label AND IoU(top-1 box) >= 0.5. When
/// the class is right the gt-class top-1 box is exactly the predicted
/// class's best box, so the stored list serves both metrics.
double top1_loc(const std::vector<EvalRecord>& records);
/// Fraction with IoU(top-1 box) >= 0.5, class given.
double gt_known_loc(const std::vector<EvalRecord>& records);
/// Fraction where any of the (<=5) boxes reaches IoU >= 0.5, class given.
double top5_box_loc(const std::vector<EvalRecord>& records);
/// Mean area of each record's top-1 box.
double mean_top1_area(const std::vector<EvalRecord>& records);

struct HistogramBin {
    double lo = 0.0, hi = 0.0; // gt-area edges
    int total = 0;
    int correct_with = 0;    // IoU(top-1) >= 0.5 in the with-transform set
    int correct_without = 0; // same sample in the without-transform set
};

/// Ten equal-width bins over [0, max gt area in the set]. Totals sum to
/// the record count.
struct HistogramReport {
    std::vector<HistogramBin> bins;
    double max_area = 0.0;
};

/// Both sets must cover the same samples (same ids, same gt boxes).
HistogramReport size_histogram(const std::vector<EvalRecord>& with_transform,
                               const std::vector<EvalRecord>& without_transform);

struct MetricsReport {
    int count = 0;
    double top1_class = 0.0;
    double top1_loc = 0.0;
    double gt_known_loc = 0.0;
    double top5_box_loc = 0.0;
    double mean_top1_area = 0.0;
};

MetricsReport compute_metrics(const std::vector<EvalRecord>& records);
std::string metrics_to_text(const MetricsReport& m);

/// Newline-delimited record stream, one JSON object per record.
std::string record_to_line(const EvalRecord& r);
void write_records(const std::string& path, const std::vector<EvalRecord>& records);
/// Parse failures raise ParseError carrying the byte offset in the file.
std::vector<EvalRecord> read_records(const std::string& path);

std::string histogram_to_text(const HistogramReport& h);
std::string histogram_to_svg(const HistogramReport& h);

} // namespace cstn
