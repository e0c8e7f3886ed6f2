#include "cstn/config.hpp"

#include <charconv>
#include <cstdlib>
#include <sstream>

#include "cstn/common.hpp"
#include "cstn/io.hpp"

namespace cstn {

namespace {

// One mutable binding per key; the table drives parsing, overrides, and
// serialization so the three can never drift apart.
struct Field {
    const char* section;
    const char* key;
    enum Kind { kInt, kU64, kDouble, kBool, kString } kind;
    void* ptr;
};

std::vector<Field> fields(TrainConfig& c) {
    return {
        {"data", "seed", Field::kU64, &c.data.seed},
        {"data", "num_classes", Field::kInt, &c.data.num_classes},
        {"data", "n_train", Field::kInt, &c.data.n_train},
        {"data", "n_val", Field::kInt, &c.data.n_val},
        {"data", "image_size", Field::kInt, &c.data.image_size},
        {"data", "scale_min", Field::kDouble, &c.data.scale_min},
        {"data", "scale_max", Field::kDouble, &c.data.scale_max},
        {"data", "aspect_min", Field::kDouble, &c.data.aspect_min},
        {"data", "aspect_max", Field::kDouble, &c.data.aspect_max},
        {"data", "clutter", Field::kDouble, &c.data.clutter},
        {"data", "dir", Field::kString, &c.data_dir},
        {"model", "base_size", Field::kDouble, &c.base_size},
        {"model", "fpn_channels", Field::kInt, &c.fpn_channels},
        {"model", "loc_hidden", Field::kInt, &c.loc_hidden},
        {"model", "use_cstn", Field::kBool, &c.use_cstn},
        {"train", "seed", Field::kU64, &c.seed},
        {"train", "epochs", Field::kInt, &c.epochs},
        {"train", "batch", Field::kInt, &c.batch},
        {"train", "lr", Field::kDouble, &c.lr},
        {"train", "optimizer", Field::kString, &c.optimizer},
        {"train", "lambda", Field::kDouble, &c.lambda},
        {"train", "alpha", Field::kDouble, &c.alpha},
        {"eval", "use_transform_at_eval", Field::kBool, &c.use_transform_at_eval},
        {"eval", "single_scale_level", Field::kInt, &c.single_scale_level},
        {"out", "dir", Field::kString, &c.out_dir},
        {"out", "checkpoint", Field::kString, &c.checkpoint},
    };
}

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

void assign(const Field& f, const std::string& raw, std::int64_t offset) {
    const std::string v = trim(raw);
    auto bad = [&](const char* what) {
        throw ParseError("config value '" + v + "' for " + f.section + "." + f.key + " is not " +
                             what,
                         offset);
    };
    switch (f.kind) {
        case Field::kInt: {
            int out = 0;
            auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
            if (ec != std::errc() || p != v.data() + v.size()) bad("an integer");
            *static_cast<int*>(f.ptr) = out;
            break;
        }
        case Field::kU64: {
            std::uint64_t out = 0;
            auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
            if (ec != std::errc() || p != v.data() + v.size()) bad("an unsigned integer");
            *static_cast<std::uint64_t*>(f.ptr) = out;
            break;
        }
        case Field::kDouble: {
            // strtod via a bounded copy; from_chars<double> is still
            // missing from some standard libraries
            char* end = nullptr;
            std::string c = v;
            double out = std::strtod(c.c_str(), &end);
            if (end != c.c_str() + c.size() || c.empty()) bad("a number");
            *static_cast<double*>(f.ptr) = out;
            break;
        }
        case Field::kBool: {
            if (v == "true" || v == "1")
                *static_cast<bool*>(f.ptr) = true;
            else if (v == "false" || v == "0")
                *static_cast<bool*>(f.ptr) = false;
            else
                bad("a boolean (true/false/1/0)");
            break;
        }
        case Field::kString:
            *static_cast<std::string*>(f.ptr) = v;
            break;
    }
}

void set_key(TrainConfig& c, const std::string& section, const std::string& key,
             const std::string& value, std::int64_t offset) {
    for (const Field& f : fields(c)) {
        if (section == f.section && key == f.key) {
            assign(f, value, offset);
            return;
        }
    }
    throw ParseError("unknown config key " + section + "." + key, offset);
}

} // namespace

TrainConfig parse_config_text(const std::string& text) {
    TrainConfig c;
    std::string section;
    size_t pos = 0;
    while (pos < text.size()) {
        size_t eol = text.find('\n', pos);
        if (eol == std::string::npos) eol = text.size();
        std::string line = text.substr(pos, eol - pos);
        std::int64_t offset = static_cast<std::int64_t>(pos);

        size_t hash = line.find_first_of("#;");
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (!line.empty()) {
            if (line.front() == '[') {
                if (line.back() != ']')
                    throw ParseError("unterminated section header '" + line + "'", offset);
                section = trim(line.substr(1, line.size() - 2));
                bool known = false;
                for (const Field& f : fields(c)) known = known || section == f.section;
                if (!known) throw ParseError("unknown config section [" + section + "]", offset);
            } else {
                size_t eq = line.find('=');
                if (eq == std::string::npos)
                    throw ParseError("expected key = value, got '" + line + "'", offset);
                std::string key = trim(line.substr(0, eq));
                if (section.empty())
                    throw ParseError("key '" + key + "' before any [section]", offset);
                set_key(c, section, key, line.substr(eq + 1), offset);
            }
        }
        pos = eol + 1;
    }
    return c;
}

TrainConfig load_config(const std::string& path) { return parse_config_text(read_text_file(path)); }

std::string config_to_text(const TrainConfig& config) {
    TrainConfig& c = const_cast<TrainConfig&>(config); // field table needs mutable pointers
    std::ostringstream out;
    out.precision(17);
    std::string section;
    for (const Field& f : fields(c)) {
        if (section != f.section) {
            if (!section.empty()) out << "\n";
            section = f.section;
            out << "[" << section << "]\n";
        }
        out << f.key << " = ";
        switch (f.kind) {
            case Field::kInt: out << *static_cast<int*>(f.ptr); break;
            case Field::kU64: out << *static_cast<std::uint64_t*>(f.ptr); break;
            case Field::kDouble: out << *static_cast<double*>(f.ptr); break;
            case Field::kBool: out << (*static_cast<bool*>(f.ptr) ? "true" : "false"); break;
            case Field::kString: out << *static_cast<std::string*>(f.ptr); break;
        }
        out << "\n";
    }
    return out.str();
}

void apply_override(TrainConfig& c, const std::string& spec) {
    size_t eq = spec.find('=');
    if (eq == std::string::npos)
        throw ParseError("override must be section.key=value, got '" + spec + "'");
    std::string path = trim(spec.substr(0, eq));
    size_t dot = path.find('.');
    if (dot == std::string::npos)
        throw ParseError("override key must be section.key, got '" + path + "'");
    set_key(c, path.substr(0, dot), path.substr(dot + 1), spec.substr(eq + 1), -1);
}

void validate_config(const TrainConfig& c) {
    if (c.lambda < 0.0) throw ValueError("config: train.lambda must be >= 0");
    if (c.alpha < 0.0) throw ValueError("config: train.alpha must be >= 0");
    if (c.batch < 2) throw ValueError("config: train.batch must be >= 2 (batchnorm)");
    if (c.epochs < 0) throw ValueError("config: train.epochs must be >= 0");
    if (c.lr <= 0.0) throw ValueError("config: train.lr must be positive");
    if (c.optimizer != "adam" && c.optimizer != "sgd")
        throw ValueError("config: train.optimizer must be adam or sgd, got '" + c.optimizer + "'");
    if (c.single_scale_level < -1 || c.single_scale_level > 1)
        throw ValueError("config: eval.single_scale_level must be -1, 0, or 1");
    if (c.base_size <= 0.0) throw ValueError("config: model.base_size must be positive");
    if (c.fpn_channels < 1 || c.loc_hidden < 1)
        throw ValueError("config: model channel counts must be positive");
}

} // namespace cstn
