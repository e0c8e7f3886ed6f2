#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "cstn/io.hpp"
#include "cstn/synth.hpp"

using namespace cstn;
namespace fs = std::filesystem;

namespace {

DatasetSpec small_spec() {
    DatasetSpec s;
    s.seed = 77;
    s.n_train = 24;
    s.n_val = 12;
    return s;
}

fs::path fresh_dir(const char* tag) {
    fs::path p = fs::temp_directory_path() / (std::string("cstn_synth_") + tag);
    fs::remove_all(p);
    return p;
}

} // namespace

TEST_CASE("same seed generates bit-identical datasets") {
    Dataset a = generate(small_spec());
    Dataset b = generate(small_spec());
    REQUIRE(a.train.size() == b.train.size());
    for (size_t i = 0; i < a.train.size(); ++i) {
        CHECK(a.train[i].image.values() == b.train[i].image.values());
        CHECK(a.train[i].label == b.train[i].label);
        CHECK(a.train[i].gt_box.x1 == b.train[i].gt_box.x1);
        CHECK(a.train[i].gt_box.y2 == b.train[i].gt_box.y2);
        CHECK(a.train[i].area_bin == b.train[i].area_bin);
    }
    // train and val streams are independent draws
    CHECK(a.train[0].image.values() != a.val[0].image.values());
}

TEST_CASE("samples satisfy the declared invariants") {
    DatasetSpec spec = small_spec();
    Dataset ds = generate(spec);
    double S = spec.image_size;
    for (const auto* split : {&ds.train, &ds.val}) {
        for (const WeakSample& s : *split) {
            CHECK(s.label >= 0);
            CHECK(s.label < spec.num_classes);
            CHECK(s.area_bin >= 0);
            CHECK(s.area_bin < 10);
            // strictly inside the image
            CHECK(s.gt_box.x1 > 0.0);
            CHECK(s.gt_box.y1 > 0.0);
            CHECK(s.gt_box.x2 < S);
            CHECK(s.gt_box.y2 < S);
            CHECK(s.gt_box.area() > 0.0);
            // requested scale range bounds the realized side within 2 px
            double side = std::max(s.gt_box.x2 - s.gt_box.x1, s.gt_box.y2 - s.gt_box.y1);
            CHECK(side >= spec.scale_min * S - 2.0);
            CHECK(side <= spec.scale_max * S + 2.0);
            for (double v : s.image.values()) {
                CHECK(v >= 0.0);
                CHECK(v <= 1.0);
            }
        }
    }
}

TEST_CASE("clutter-free centered disk has a tight centered box") {
    DatasetSpec spec;
    spec.clutter = 0.0;
    ObjectParams obj;
    obj.label = 0; // disk
    obj.cx = 32.0;
    obj.cy = 32.0;
    obj.scale = 0.5;
    obj.aspect = 1.0;
    obj.rotation = 0.0;
    Rng rng(1);
    WeakSample s = render_sample(spec, obj, rng);
    double w = s.gt_box.x2 - s.gt_box.x1;
    double h = s.gt_box.y2 - s.gt_box.y1;
    CHECK(std::abs(w - 32.0) <= 1.0);
    CHECK(std::abs(h - 32.0) <= 1.0);
    CHECK(std::abs((s.gt_box.x1 + s.gt_box.x2) / 2 - 32.0) <= 1.0);
    CHECK(std::abs((s.gt_box.y1 + s.gt_box.y2) / 2 - 32.0) <= 1.0);
    // plain background outside the box: constant per channel
    CHECK(s.image.at({0, 0, 0}) == s.image.at({0, 1, 1}));
}

TEST_CASE("oversized objects are rejected after bounded retries") {
    DatasetSpec spec = small_spec();
    spec.scale_min = 1.5;
    spec.scale_max = 1.5;
    CHECK_THROWS_AS(generate(spec), ValueError);
}

TEST_CASE("invalid specs are rejected") {
    DatasetSpec s = small_spec();
    s.num_classes = 7;
    CHECK_THROWS_AS(generate(s), ValueError);
    s = small_spec();
    s.scale_min = 0.0;
    CHECK_THROWS_AS(generate(s), ValueError);
    s = small_spec();
    s.aspect_max = s.aspect_min - 0.1;
    CHECK_THROWS_AS(generate(s), ValueError);
    s = small_spec();
    s.clutter = 1.5;
    CHECK_THROWS_AS(generate(s), ValueError);
}

TEST_CASE("class names cover the six shapes") {
    CHECK(max_classes() == 6);
    CHECK(std::string(class_name(0)) == "disk");
    CHECK(std::string(class_name(5)) == "bar");
    CHECK_THROWS_AS(class_name(6), ValueError);
}

TEST_CASE("area census covers all ten bins") {
    DatasetSpec spec;
    spec.seed = 5;
    spec.n_train = 10000;
    spec.n_val = 0;
    Dataset ds = generate(spec);
    int counts[10] = {0};
    for (const WeakSample& s : ds.train) ++counts[s.area_bin];
    for (int b = 0; b < 10; ++b) {
        CAPTURE(b);
        CHECK(counts[b] >= 200); // >= 2% of 10k
    }
}

TEST_CASE("save and load round-trip exactly") {
    DatasetSpec spec = small_spec();
    Dataset ds = generate(spec);
    fs::path dir = fresh_dir("roundtrip");
    save_dataset(ds, dir.string());

    // manifest has exactly one line per sample
    std::string manifest = read_text_file((dir / "manifest.json").string());
    size_t lines = 0;
    for (char c : manifest)
        if (c == '\n') ++lines;
    CHECK(lines == ds.train.size() + ds.val.size());

    Dataset back = load_dataset(dir.string());
    CHECK(back.spec.seed == spec.seed);
    CHECK(back.spec.scale_max == spec.scale_max);
    REQUIRE(back.train.size() == ds.train.size());
    REQUIRE(back.val.size() == ds.val.size());
    for (size_t i = 0; i < ds.train.size(); ++i) {
        CHECK(back.train[i].image.values() == ds.train[i].image.values());
        CHECK(back.train[i].label == ds.train[i].label);
        CHECK(back.train[i].gt_box.x1 == ds.train[i].gt_box.x1);
        CHECK(back.train[i].gt_box.x2 == ds.train[i].gt_box.x2);
        CHECK(back.train[i].area_bin == ds.train[i].area_bin);
    }
    fs::remove_all(dir);
}

TEST_CASE("corrupt manifest reports a byte offset") {
    Dataset ds = generate(small_spec());
    fs::path dir = fresh_dir("corrupt");
    save_dataset(ds, dir.string());
    std::string manifest = read_text_file((dir / "manifest.json").string());
    size_t second_line = manifest.find('\n') + 1;
    manifest[second_line + 3] = '\x01'; // break JSON on line 2
    write_text_file((dir / "manifest.json").string(), manifest);
    try {
        load_dataset(dir.string());
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(e.offset >= static_cast<std::int64_t>(second_line));
        CHECK(std::string(e.what()).find("byte") != std::string::npos);
    }
    fs::remove_all(dir);
}

TEST_CASE("truncated image file fails the whole load") {
    Dataset ds = generate(small_spec());
    fs::path dir = fresh_dir("trunc");
    save_dataset(ds, dir.string());
    fs::path victim = dir / "img_train_00003.f64";
    fs::resize_file(victim, fs::file_size(victim) / 2);
    CHECK_THROWS_AS(load_dataset(dir.string()), ParseError);
    fs::remove_all(dir);
}
