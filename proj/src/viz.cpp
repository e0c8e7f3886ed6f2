#include "cstn/viz.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <vector>

namespace cstn {

namespace {

png_byte quantize(double v) {
    if (v < 0.0) v = 0.0;
    if (v > 1.0) v = 1.0;
    return static_cast<png_byte>(std::lround(v * 255.0));
}

void append_bytes(png_structp png, png_bytep data, png_size_t n) {
    static_cast<std::string*>(png_get_io_ptr(png))->append(reinterpret_cast<char*>(data), n);
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

// One stroked, unfilled rectangle; nothing for degenerate boxes.
void append_rect(std::string& out, const BoxXYXY& b, const char* color) {
    if (b.degenerate || b.x2 <= b.x1 || b.y2 <= b.y1) return;
    out += "  <rect x=\"" + fmt(b.x1) + "\" y=\"" + fmt(b.y1) + "\" width=\"" + fmt(b.x2 - b.x1) +
           "\" height=\"" + fmt(b.y2 - b.y1) + "\" fill=\"none\" stroke=\"" + color +
           "\" stroke-width=\"1\"/>\n";
}

} // namespace

std::string encode_png(const Tensor& image) {
    if (image.ndim() != 3 || image.dim(0) != 3)
        throw ShapeError("encode_png: expected [3,H,W], got " + shape_str(image.shape()));
    const int h = image.dim(1), w = image.dim(2);

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("encode_png: png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("encode_png: png_create_info_struct failed");
    }
    std::string out;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("encode_png: libpng reported a write error");
    }
    png_set_write_fn(png, &out, append_bytes, nullptr);
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);

    const double* d = image.data();
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    std::vector<png_byte> row(static_cast<size_t>(w) * 3);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const std::int64_t px = static_cast<std::int64_t>(y) * w + x;
            row[static_cast<size_t>(x) * 3 + 0] = quantize(d[px]);
            row[static_cast<size_t>(x) * 3 + 1] = quantize(d[plane + px]);
            row[static_cast<size_t>(x) * 3 + 2] = quantize(d[2 * plane + px]);
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    return out;
}

std::string base64_encode(const std::string& bytes) {
    static const char* alphabet = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    size_t i = 0;
    for (; i + 3 <= bytes.size(); i += 3) {
        const unsigned v = (static_cast<unsigned char>(bytes[i]) << 16) |
                           (static_cast<unsigned char>(bytes[i + 1]) << 8) |
                           static_cast<unsigned char>(bytes[i + 2]);
        out += alphabet[(v >> 18) & 63];
        out += alphabet[(v >> 12) & 63];
        out += alphabet[(v >> 6) & 63];
        out += alphabet[v & 63];
    }
    const size_t rest = bytes.size() - i;
    if (rest == 1) {
        const unsigned v = static_cast<unsigned char>(bytes[i]) << 16;
        out += alphabet[(v >> 18) & 63];
        out += alphabet[(v >> 12) & 63];
        out += "==";
    } else if (rest == 2) {
        const unsigned v = (static_cast<unsigned char>(bytes[i]) << 16) |
                           (static_cast<unsigned char>(bytes[i + 1]) << 8);
        out += alphabet[(v >> 18) & 63];
        out += alphabet[(v >> 12) & 63];
        out += alphabet[(v >> 6) & 63];
        out += '=';
    }
    return out;
}

std::string xml_escape(const std::string& text) {
    std::string out;
    out.reserve(text.size());
    for (char c : text) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

std::string sample_to_svg(const Tensor& image, const BoxXYXY& gt_box, const BoxXYXY& default_box,
                          const BoxXYXY& transformed_box, const std::string& caption) {
    const int h = image.dim(1), w = image.dim(2);
    const int bar = 16; // caption strip under the image
    std::string svg;
    svg += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(w) +
           "\" height=\"" + std::to_string(h + bar) + "\" viewBox=\"0 0 " + std::to_string(w) +
           " " + std::to_string(h + bar) + "\">\n";
    svg += "  <image x=\"0\" y=\"0\" width=\"" + std::to_string(w) + "\" height=\"" +
           std::to_string(h) + "\" href=\"data:image/png;base64," +
           base64_encode(encode_png(image)) + "\"/>\n";
    append_rect(svg, default_box, "#3b82f6");     // blue: default box
    append_rect(svg, transformed_box, "#ef4444"); // red: transformed box
    append_rect(svg, gt_box, "#22c55e");          // green: ground truth
    svg += "  <rect x=\"0\" y=\"" + std::to_string(h) + "\" width=\"" + std::to_string(w) +
           "\" height=\"" + std::to_string(bar) + "\" fill=\"#111111\"/>\n";
    svg += "  <text x=\"2\" y=\"" + std::to_string(h + bar - 5) +
           "\" font-family=\"monospace\" font-size=\"8\" fill=\"#eeeeee\">" +
           xml_escape(caption) + "</text>\n";
    svg += "</svg>\n";
    return svg;
}

} // namespace cstn
