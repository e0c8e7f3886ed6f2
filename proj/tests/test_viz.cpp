#include <doctest.h>
#include <png.h>

#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "cstn/rng.hpp"
#include "cstn/viz.hpp"

using namespace cstn;

namespace {

// Independent inverse: decode through libpng's read path and return raw
// 8-bit RGB rows.
struct DecodedPng {
    int w = 0, h = 0;
    std::vector<unsigned char> rgb; // h*w*3
};

struct ByteCursor {
    const std::string* bytes;
    size_t pos = 0;
};

void read_bytes(png_structp png, png_bytep out, png_size_t n) {
    ByteCursor* c = static_cast<ByteCursor*>(png_get_io_ptr(png));
    if (c->pos + n > c->bytes->size()) png_error(png, "read past end");
    std::memcpy(out, c->bytes->data() + c->pos, n);
    c->pos += n;
}

DecodedPng decode_png(const std::string& bytes) {
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    REQUIRE(png != nullptr);
    png_infop info = png_create_info_struct(png);
    REQUIRE(info != nullptr);
    DecodedPng out;
    std::vector<png_bytep> rows;
    ByteCursor cur{&bytes, 0};
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        FAIL("libpng rejected the encoded stream");
        return out;
    }
    png_set_read_fn(png, &cur, read_bytes);
    png_read_info(png, info);
    out.w = static_cast<int>(png_get_image_width(png, info));
    out.h = static_cast<int>(png_get_image_height(png, info));
    REQUIRE(png_get_color_type(png, info) == PNG_COLOR_TYPE_RGB);
    REQUIRE(png_get_bit_depth(png, info) == 8);
    out.rgb.assign(static_cast<size_t>(out.w) * out.h * 3, 0);
    rows.resize(static_cast<size_t>(out.h));
    for (int y = 0; y < out.h; ++y)
        rows[static_cast<size_t>(y)] = out.rgb.data() + static_cast<size_t>(y) * out.w * 3;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

} // namespace

TEST_CASE("png encoding round trips through an independent decoder") {
    Rng rng(77);
    Tensor img(Shape{3, 13, 9});
    for (double& v : img.values()) v = rng.uniform();
    // out-of-range values must clamp, not wrap
    img.values()[0] = -5.0;
    img.values()[1] = 7.0;

    std::string bytes = encode_png(img);
    // PNG signature
    REQUIRE(bytes.size() >= 8);
    const unsigned char sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};
    CHECK(std::memcmp(bytes.data(), sig, 8) == 0);

    DecodedPng back = decode_png(bytes);
    CHECK(back.w == 9);
    CHECK(back.h == 13);
    const std::int64_t plane = 13 * 9;
    for (int y = 0; y < 13; ++y)
        for (int x = 0; x < 9; ++x)
            for (int c = 0; c < 3; ++c) {
                double v = img.values()[static_cast<size_t>(c * plane + y * 9 + x)];
                v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
                const int expect = static_cast<int>(std::lround(v * 255.0));
                const int got = back.rgb[static_cast<size_t>((y * 9 + x) * 3 + c)];
                REQUIRE(got == expect);
            }

    CHECK_THROWS_AS(encode_png(Tensor::zeros(Shape{1, 4, 4})), ShapeError);
    CHECK_THROWS_AS(encode_png(Tensor::zeros(Shape{3, 4})), ShapeError);
}

TEST_CASE("base64 matches the reference vectors") {
    // RFC 4648 test vectors
    CHECK(base64_encode("") == "");
    CHECK(base64_encode("f") == "Zg==");
    CHECK(base64_encode("fo") == "Zm8=");
    CHECK(base64_encode("foo") == "Zm9v");
    CHECK(base64_encode("foob") == "Zm9vYg==");
    CHECK(base64_encode("fooba") == "Zm9vYmE=");
    CHECK(base64_encode("foobar") == "Zm9vYmFy");
    // binary safety, including NUL
    std::string raw("\x00\xFF\x10", 3);
    CHECK(base64_encode(raw) == "AP8Q");
}

TEST_CASE("xml escaping covers markup characters") {
    CHECK(xml_escape("a<b&c>d\"e") == "a&lt;b&amp;c&gt;d&quot;e");
    CHECK(xml_escape("plain text 123") == "plain text 123");
}

TEST_CASE("sample svg carries all three boxes and the caption") {
    Tensor img = Tensor::full(Shape{3, 16, 16}, 0.5);
    BoxXYXY gt{2, 3, 10, 11};
    BoxXYXY dflt{1, 1, 9, 9};
    BoxXYXY pred{2.5, 3.5, 10.5, 11.5};
    std::string svg = sample_to_svg(img, gt, dflt, pred, "disk p=0.42 <gt>");

    CHECK(svg.find("<?xml") == 0);
    CHECK(svg.find("data:image/png;base64,") != std::string::npos);
    CHECK(svg.find("#22c55e") != std::string::npos); // green gt
    CHECK(svg.find("#3b82f6") != std::string::npos); // blue default
    CHECK(svg.find("#ef4444") != std::string::npos); // red transformed
    CHECK(svg.find("disk p=0.42 &lt;gt&gt;") != std::string::npos);
    CHECK(svg.find("<gt>") == std::string::npos); // raw markup must not leak
    CHECK(svg.rfind("</svg>\n") == svg.size() - 7);

    // balanced tag count as a cheap well-formedness proxy: every '<' has
    // a matching '>'
    CHECK(std::count(svg.begin(), svg.end(), '<') == std::count(svg.begin(), svg.end(), '>'));

    // a degenerate box contributes no rect
    BoxXYXY degen{5, 5, 5, 5};
    degen.degenerate = true;
    std::string svg2 = sample_to_svg(img, gt, dflt, degen, "x");
    CHECK(svg2.find("#ef4444") == std::string::npos);
    CHECK(svg2.find("#22c55e") != std::string::npos);
}
