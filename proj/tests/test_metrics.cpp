#include <doctest.h>

#include <algorithm>
#include <filesystem>

#include "cstn/io.hpp"
#include "cstn/metrics.hpp"
#include "cstn/rng.hpp"
#include "xml_check.hpp"

using namespace cstn;

namespace {

BoxXYXY box(double x1, double y1, double x2, double y2) {
    BoxXYXY b;
    b.x1 = x1;
    b.y1 = y1;
    b.x2 = x2;
    b.y2 = y2;
    return b;
}

EvalRecord record(int id, int pred, int gt, BoxXYXY gt_box, std::vector<BoxXYXY> cands) {
    EvalRecord r;
    r.id = id;
    r.pred_class = pred;
    r.marginal_class = pred;
    r.gt_label = gt;
    r.gt_box = gt_box;
    for (const BoxXYXY& b : cands) r.boxes.push_back({b, iou(b, gt_box)});
    return r;
}

std::vector<EvalRecord> random_records(Rng& rng, int n, int classes) {
    std::vector<EvalRecord> out;
    for (int i = 0; i < n; ++i) {
        double x = rng.uniform(5, 40), y = rng.uniform(5, 40);
        BoxXYXY gt = box(x, y, x + rng.uniform(5, 20), y + rng.uniform(5, 20));
        std::vector<BoxXYXY> cands;
        int k = 1 + static_cast<int>(rng.uniform_int(5));
        for (int j = 0; j < k; ++j) {
            double dx = rng.uniform(-8, 8), dy = rng.uniform(-8, 8);
            cands.push_back(box(gt.x1 + dx, gt.y1 + dy, gt.x2 + dx, gt.y2 + dy));
        }
        EvalRecord r = record(i, static_cast<int>(rng.uniform_int(classes)),
                              static_cast<int>(rng.uniform_int(classes)), gt, cands);
        r.marginal_class = static_cast<int>(rng.uniform_int(classes));
        out.push_back(r);
    }
    return out;
}

} // namespace

TEST_CASE("iou basics") {
    BoxXYXY a = box(0, 0, 10, 10);
    CHECK(iou(a, a) == doctest::Approx(1.0));
    CHECK(iou(a, box(20, 20, 30, 30)) == 0.0);
    // unit squares offset by half along one axis: 0.5 / 1.5
    CHECK(iou(box(0, 0, 1, 1), box(0.5, 0, 1.5, 1)) == doctest::Approx(1.0 / 3.0));
    // symmetry and bounds on random boxes
    Rng rng(4);
    for (int i = 0; i < 100; ++i) {
        BoxXYXY p = box(rng.uniform(0, 20), rng.uniform(0, 20), rng.uniform(20, 40),
                        rng.uniform(20, 40));
        BoxXYXY q = box(rng.uniform(0, 20), rng.uniform(0, 20), rng.uniform(20, 40),
                        rng.uniform(20, 40));
        double ab = iou(p, q), ba = iou(q, p);
        CHECK(ab == ba);
        CHECK(ab >= 0.0);
        CHECK(ab <= 1.0);
    }
    CHECK_THROWS_AS(iou(box(5, 0, 0, 5), a), ValueError);
}

TEST_CASE("top1_loc requires class and box to both be right") {
    BoxXYXY gt = box(10, 10, 30, 30);
    std::vector<EvalRecord> all_good = {record(0, 1, 1, gt, {gt}), record(1, 2, 2, gt, {gt})};
    CHECK(top1_loc(all_good) == doctest::Approx(1.0));
    CHECK(top1_class(all_good) == doctest::Approx(1.0));

    std::vector<EvalRecord> wrong_class = {record(0, 0, 1, gt, {gt}), record(1, 1, 2, gt, {gt})};
    CHECK(top1_loc(wrong_class) == doctest::Approx(0.0));
    CHECK(gt_known_loc(wrong_class) == doctest::Approx(1.0)); // boxes still right

    std::vector<EvalRecord> wrong_box = {record(0, 1, 1, gt, {box(0, 0, 5, 5)})};
    CHECK(top1_loc(wrong_box) == doctest::Approx(0.0));

    // The two class calls are scored independently: the localization
    // metric reads the joint-argmax class, the classification metric the
    // marginal one.
    EvalRecord split = record(0, 1, 1, gt, {gt});
    split.marginal_class = 0;
    CHECK(top1_loc({split}) == doctest::Approx(1.0));
    CHECK(top1_class({split}) == doctest::Approx(0.0));
    split.pred_class = 0;
    split.marginal_class = 1;
    CHECK(top1_loc({split}) == doctest::Approx(0.0));
    CHECK(top1_class({split}) == doctest::Approx(1.0));
}

TEST_CASE("metrics match a per-record loop oracle on random sets") {
    Rng rng(99);
    std::vector<EvalRecord> recs = random_records(rng, 200, 4);
    int t1c = 0, t1l = 0, gtk = 0, t5 = 0;
    for (const EvalRecord& r : recs) {
        bool cls = r.marginal_class == r.gt_label;
        bool map_cls = r.pred_class == r.gt_label;
        bool box_ok = !r.boxes.empty() && iou(r.boxes[0].box, r.gt_box) >= 0.5;
        bool any = false;
        for (const ScoredBox& b : r.boxes) any = any || iou(b.box, r.gt_box) >= 0.5;
        t1c += cls;
        t1l += map_cls && box_ok;
        gtk += box_ok;
        t5 += any;
    }
    double n = static_cast<double>(recs.size());
    CHECK(top1_class(recs) == doctest::Approx(t1c / n));
    CHECK(top1_loc(recs) == doctest::Approx(t1l / n));
    CHECK(gt_known_loc(recs) == doctest::Approx(gtk / n));
    CHECK(top5_box_loc(recs) == doctest::Approx(t5 / n));
}

TEST_CASE("metric ordering holds on any record set") {
    Rng rng(123);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<EvalRecord> recs = random_records(rng, 50, 3);
        CHECK(top5_box_loc(recs) >= gt_known_loc(recs));
        CHECK(gt_known_loc(recs) >= top1_loc(recs));
    }
}

TEST_CASE("metrics are permutation invariant") {
    Rng rng(7);
    std::vector<EvalRecord> recs = random_records(rng, 64, 4);
    MetricsReport a = compute_metrics(recs);
    std::reverse(recs.begin(), recs.end());
    MetricsReport b = compute_metrics(recs);
    CHECK(a.top1_class == b.top1_class);
    CHECK(a.top1_loc == b.top1_loc);
    CHECK(a.gt_known_loc == b.gt_known_loc);
    CHECK(a.top5_box_loc == b.top5_box_loc);
    // The mean is a float sum; order changes rounding, not the value.
    CHECK(a.mean_top1_area == doctest::Approx(b.mean_top1_area).epsilon(1e-12));
}

TEST_CASE("only the fifth box being right still counts for top-5") {
    BoxXYXY gt = box(10, 10, 30, 30);
    BoxXYXY miss = box(0, 0, 4, 4);
    EvalRecord r = record(0, 0, 0, gt, {miss, miss, miss, miss, gt});
    std::vector<EvalRecord> recs = {r};
    CHECK(top5_box_loc(recs) == doctest::Approx(1.0));
    CHECK(gt_known_loc(recs) == doctest::Approx(0.0));
}

TEST_CASE("size histogram bins, counts, and oracle") {
    Rng rng(31);
    std::vector<EvalRecord> with = random_records(rng, 120, 3);
    std::vector<EvalRecord> without = with; // same samples, tweak boxes
    for (EvalRecord& r : without)
        for (ScoredBox& b : r.boxes) {
            b.box.x1 -= 3;
            b.box.y2 += 5;
            b.iou = iou(b.box, r.gt_box);
        }
    HistogramReport h = size_histogram(with, without);
    REQUIRE(h.bins.size() == 10);
    int total = 0;
    for (const HistogramBin& b : h.bins) {
        total += b.total;
        CHECK(b.correct_with <= b.total);
        CHECK(b.correct_without <= b.total);
    }
    CHECK(total == 120);
    // per-sample recount oracle
    int want_with[10] = {0}, want_without[10] = {0}, want_total[10] = {0};
    for (size_t i = 0; i < with.size(); ++i) {
        int bin = std::min(9, static_cast<int>(10.0 * with[i].gt_box.area() / h.max_area));
        ++want_total[bin];
        if (!with[i].boxes.empty() && with[i].boxes[0].iou >= 0.5) ++want_with[bin];
        if (!without[i].boxes.empty() && without[i].boxes[0].iou >= 0.5) ++want_without[bin];
    }
    for (int b = 0; b < 10; ++b) {
        CHECK(h.bins[size_t(b)].total == want_total[b]);
        CHECK(h.bins[size_t(b)].correct_with == want_with[b]);
        CHECK(h.bins[size_t(b)].correct_without == want_without[b]);
    }
}

TEST_CASE("size histogram with one area fills a single bin") {
    BoxXYXY gt = box(0, 0, 10, 10);
    std::vector<EvalRecord> recs = {record(0, 0, 0, gt, {gt}), record(1, 1, 1, gt, {gt})};
    HistogramReport h = size_histogram(recs, recs);
    int nonzero = 0;
    for (const HistogramBin& b : h.bins)
        if (b.total) ++nonzero;
    CHECK(nonzero == 1);
    CHECK(h.bins[9].total == 2); // max area lands in the top bin
}

TEST_CASE("size histogram rejects mismatched sample sets") {
    Rng rng(8);
    std::vector<EvalRecord> a = random_records(rng, 10, 3);
    std::vector<EvalRecord> b = a;
    b.pop_back();
    CHECK_THROWS_AS(size_histogram(a, b), ValueError);
    b = a;
    b[3].id = 999;
    CHECK_THROWS_AS(size_histogram(a, b), ValueError);
}

TEST_CASE("record stream round-trips through the text format") {
    namespace fs = std::filesystem;
    Rng rng(55);
    std::vector<EvalRecord> recs = random_records(rng, 40, 5);
    fs::path p = fs::temp_directory_path() / "cstn_records.jsonl";
    write_records(p.string(), recs);
    std::vector<EvalRecord> back = read_records(p.string());
    REQUIRE(back.size() == recs.size());
    for (size_t i = 0; i < recs.size(); ++i) {
        CHECK(back[i].id == recs[i].id);
        CHECK(back[i].pred_class == recs[i].pred_class);
        CHECK(back[i].gt_label == recs[i].gt_label);
        CHECK(back[i].gt_box.x1 == recs[i].gt_box.x1);
        REQUIRE(back[i].boxes.size() == recs[i].boxes.size());
        for (size_t j = 0; j < recs[i].boxes.size(); ++j) {
            CHECK(back[i].boxes[j].box.x2 == recs[i].boxes[j].box.x2);
            CHECK(back[i].boxes[j].box.score == recs[i].boxes[j].box.score);
            CHECK(back[i].boxes[j].iou == recs[i].boxes[j].iou);
        }
    }
    // recomputation from the stream gives identical metrics
    MetricsReport ma = compute_metrics(recs);
    MetricsReport mb = compute_metrics(back);
    CHECK(ma.top1_loc == mb.top1_loc);
    CHECK(ma.top5_box_loc == mb.top5_box_loc);
    CHECK(ma.mean_top1_area == mb.mean_top1_area);
    fs::remove(p);
}

TEST_CASE("corrupt record line reports its byte offset") {
    namespace fs = std::filesystem;
    Rng rng(56);
    std::vector<EvalRecord> recs = random_records(rng, 3, 2);
    fs::path p = fs::temp_directory_path() / "cstn_records_bad.jsonl";
    write_records(p.string(), recs);
    std::string text = read_text_file(p.string());
    size_t line2 = text.find('\n') + 1;
    text[line2] = '#';
    write_text_file(p.string(), text);
    try {
        read_records(p.string());
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(e.offset >= static_cast<std::int64_t>(line2));
    }
    fs::remove(p);
}

TEST_CASE("histogram renders as text and well-formed SVG") {
    Rng rng(77);
    std::vector<EvalRecord> recs = random_records(rng, 30, 3);
    HistogramReport h = size_histogram(recs, recs);
    std::string text = histogram_to_text(h);
    CHECK(text.find("total") != std::string::npos);
    std::string svg = histogram_to_svg(h);
    CHECK(svg.find("<svg") == 0);
    CHECK(xml_well_formed(svg));
    std::string report = metrics_to_text(compute_metrics(recs));
    CHECK(report.find("top1_loc") != std::string::npos);
}
