#include "cstn/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <map>
#include <sstream>

#include "cstn/common.hpp"
#include "cstn/io.hpp"

namespace cstn {

namespace {

using json = nlohmann::json;

void require_well_formed(const BoxXYXY& b, const char* what) {
    if (!(b.x1 <= b.x2) || !(b.y1 <= b.y2))
        throw ValueError(std::string(what) + ": malformed box (x1<=x2, y1<=y2 required)");
}

bool hit(const EvalRecord& r) { return !r.boxes.empty() && r.boxes.front().iou >= 0.5; }

double fraction(const std::vector<EvalRecord>& records, bool (*pred)(const EvalRecord&)) {
    if (records.empty()) return 0.0;
    int n = 0;
    for (const EvalRecord& r : records)
        if (pred(r)) ++n;
    return static_cast<double>(n) / static_cast<double>(records.size());
}

} // namespace

double iou(const BoxXYXY& a, const BoxXYXY& b) {
    require_well_formed(a, "iou");
    require_well_formed(b, "iou");
    return box_iou(a, b);
}

double top1_class(const std::vector<EvalRecord>& records) {
    return fraction(records, [](const EvalRecord& r) { return r.marginal_class == r.gt_label; });
}

double top1_loc(const std::vector<EvalRecord>& records) {
    return fraction(records,
                    [](const EvalRecord& r) { return r.pred_class == r.gt_label && hit(r); });
}

double gt_known_loc(const std::vector<EvalRecord>& records) {
    return fraction(records, [](const EvalRecord& r) { return hit(r); });
}

double top5_box_loc(const std::vector<EvalRecord>& records) {
    return fraction(records, [](const EvalRecord& r) {
        for (const ScoredBox& b : r.boxes)
            if (b.iou >= 0.5) return true;
        return false;
    });
}

double mean_top1_area(const std::vector<EvalRecord>& records) {
    if (records.empty()) return 0.0;
    double total = 0.0;
    for (const EvalRecord& r : records)
        if (!r.boxes.empty()) total += r.boxes.front().box.area();
    return total / static_cast<double>(records.size());
}

HistogramReport size_histogram(const std::vector<EvalRecord>& with_transform,
                               const std::vector<EvalRecord>& without_transform) {
    if (with_transform.size() != without_transform.size())
        throw ValueError("size_histogram: record sets differ in size");
    std::map<int, const EvalRecord*> by_id;
    for (const EvalRecord& r : without_transform) {
        if (!by_id.emplace(r.id, &r).second)
            throw ValueError("size_histogram: duplicate sample id " + std::to_string(r.id));
    }
    HistogramReport rep;
    for (const EvalRecord& r : with_transform) {
        auto it = by_id.find(r.id);
        if (it == by_id.end())
            throw ValueError("size_histogram: sample id " + std::to_string(r.id) +
                             " missing from the without-transform set");
        if (it->second->gt_box.area() != r.gt_box.area())
            throw ValueError("size_histogram: gt boxes disagree for id " + std::to_string(r.id));
        rep.max_area = std::max(rep.max_area, r.gt_box.area());
    }
    rep.bins.resize(10);
    for (int b = 0; b < 10; ++b) {
        rep.bins[static_cast<size_t>(b)].lo = rep.max_area * b / 10.0;
        rep.bins[static_cast<size_t>(b)].hi = rep.max_area * (b + 1) / 10.0;
    }
    for (const EvalRecord& r : with_transform) {
        int b = rep.max_area > 0.0
                    ? std::min(9, static_cast<int>(10.0 * r.gt_box.area() / rep.max_area))
                    : 0;
        HistogramBin& bin = rep.bins[static_cast<size_t>(b)];
        ++bin.total;
        if (hit(r)) ++bin.correct_with;
        if (hit(*by_id.at(r.id))) ++bin.correct_without;
    }
    return rep;
}

MetricsReport compute_metrics(const std::vector<EvalRecord>& records) {
    MetricsReport m;
    m.count = static_cast<int>(records.size());
    m.top1_class = top1_class(records);
    m.top1_loc = top1_loc(records);
    m.gt_known_loc = gt_known_loc(records);
    m.top5_box_loc = top5_box_loc(records);
    m.mean_top1_area = mean_top1_area(records);
    return m;
}

std::string metrics_to_text(const MetricsReport& m) {
    std::ostringstream ss;
    ss.precision(4);
    ss << std::fixed;
    ss << "samples          " << m.count << "\n";
    ss << "top1_class       " << m.top1_class << "\n";
    ss << "top1_loc         " << m.top1_loc << "\n";
    ss << "gt_known_loc     " << m.gt_known_loc << "\n";
    ss << "top5_box_loc     " << m.top5_box_loc << "\n";
    ss << "mean_top1_area   " << m.mean_top1_area << "\n";
    return ss.str();
}

namespace {

json box_json(const BoxXYXY& b) { return json::array({b.x1, b.y1, b.x2, b.y2}); }

BoxXYXY box_from(const json& j) {
    if (!j.is_array() || j.size() != 4) throw ValueError("box must be a 4-array");
    BoxXYXY b;
    b.x1 = j[0].get<double>();
    b.y1 = j[1].get<double>();
    b.x2 = j[2].get<double>();
    b.y2 = j[3].get<double>();
    return b;
}

} // namespace

std::string record_to_line(const EvalRecord& r) {
    json boxes = json::array();
    for (const ScoredBox& b : r.boxes)
        boxes.push_back(json{{"box", box_json(b.box)}, {"score", b.box.score}, {"iou", b.iou}});
    json j{{"id", r.id},
           {"pred_class", r.pred_class},
           {"marginal_class", r.marginal_class},
           {"gt_label", r.gt_label},
           {"gt_box", box_json(r.gt_box)},
           {"boxes", boxes}};
    return j.dump();
}

void write_records(const std::string& path, const std::vector<EvalRecord>& records) {
    std::string out;
    for (const EvalRecord& r : records) {
        out += record_to_line(r);
        out += '\n';
    }
    write_text_file(path, out);
}

std::vector<EvalRecord> read_records(const std::string& path) {
    std::string text = read_text_file(path);
    std::vector<EvalRecord> records;
    size_t pos = 0;
    int line_no = 0;
    while (pos < text.size()) {
        size_t eol = text.find('\n', pos);
        if (eol == std::string::npos) eol = text.size();
        std::string line = text.substr(pos, eol - pos);
        std::int64_t line_start = static_cast<std::int64_t>(pos);
        pos = eol + 1;
        if (line.empty()) continue;
        ++line_no;
        try {
            json j = json::parse(line);
            EvalRecord r;
            r.id = j.at("id").get<int>();
            r.pred_class = j.at("pred_class").get<int>();
            r.marginal_class = j.at("marginal_class").get<int>();
            r.gt_label = j.at("gt_label").get<int>();
            r.gt_box = box_from(j.at("gt_box"));
            for (const json& bj : j.at("boxes")) {
                ScoredBox b;
                b.box = box_from(bj.at("box"));
                b.box.score = bj.at("score").get<double>();
                b.iou = bj.at("iou").get<double>();
                if (b.iou < 0.0 || b.iou > 1.0)
                    throw ValueError("iou out of [0,1]");
                r.boxes.push_back(b);
            }
            if (r.boxes.size() > 5) throw ValueError("more than 5 boxes in a record");
            records.push_back(std::move(r));
        } catch (const json::parse_error& e) {
            throw ParseError("record line " + std::to_string(line_no) + ": " + e.what(),
                             line_start + static_cast<std::int64_t>(e.byte) - 1);
        } catch (const json::exception& e) {
            throw ParseError("record line " + std::to_string(line_no) + ": " + e.what(),
                             line_start);
        } catch (const ValueError& e) {
            throw ParseError("record line " + std::to_string(line_no) + ": " + e.what(),
                             line_start);
        }
    }
    return records;
}

std::string histogram_to_text(const HistogramReport& h) {
    std::ostringstream ss;
    ss << "bin  area_lo    area_hi    total  with  without\n";
    for (size_t b = 0; b < h.bins.size(); ++b) {
        const HistogramBin& bin = h.bins[b];
        char buf[96];
        std::snprintf(buf, sizeof(buf), "%-4zu %-10.1f %-10.1f %-6d %-5d %-7d\n", b, bin.lo,
                      bin.hi, bin.total, bin.correct_with, bin.correct_without);
        ss << buf;
    }
    return ss.str();
}

std::string histogram_to_svg(const HistogramReport& h) {
    const int W = 720, H = 360, pad = 40;
    int n = static_cast<int>(h.bins.size());
    int peak = 1;
    for (const HistogramBin& b : h.bins) peak = std::max(peak, b.total);
    std::ostringstream ss;
    ss << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
       << "\" viewBox=\"0 0 " << W << " " << H << "\">\n";
    ss << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
    double slot = static_cast<double>(W - 2 * pad) / n;
    double bw = slot / 4.0;
    auto bar = [&](double x, int value, const char* color) {
        double bh = static_cast<double>(H - 2 * pad) * value / peak;
        ss << "<rect x=\"" << x << "\" y=\"" << (H - pad - bh) << "\" width=\"" << bw
           << "\" height=\"" << bh << "\" fill=\"" << color << "\"/>\n";
    };
    for (int b = 0; b < n; ++b) {
        const HistogramBin& bin = h.bins[static_cast<size_t>(b)];
        double x0 = pad + slot * b;
        bar(x0, bin.total, "#7cb342");
        bar(x0 + bw, bin.correct_with, "#e53935");
        bar(x0 + 2 * bw, bin.correct_without, "#1e88e5");
        ss << "<text x=\"" << (x0 + slot / 2 - 4) << "\" y=\"" << (H - pad + 16)
           << "\" font-size=\"12\">" << b << "</text>\n";
    }
    ss << "<text x=\"" << pad << "\" y=\"20\" font-size=\"13\">"
       << "per-bin: total (green), localized with transform (red), without (blue)"
       << "</text>\n";
    ss << "<text x=\"" << pad << "\" y=\"" << (H - 8) << "\" font-size=\"12\">gt-box area bin"
       << "</text>\n";
    ss << "</svg>\n";
    return ss.str();
}

} // namespace cstn
