#include "cstn/io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

namespace cstn {

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian and read back without swapping");
static_assert(sizeof(double) == 8 && std::numeric_limits<double>::is_iec559,
              "file formats assume IEEE-754 binary64");

namespace {
constexpr std::uint32_t kImageMagic = 0x4E545343u; // bytes "CSTN"
}

void write_image_file(const std::string& path, const Tensor& t) {
    if (t.ndim() != 3) throw ShapeError("image file expects [C,H,W], got " + shape_str(t.shape()));
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    std::uint32_t header[4] = {kImageMagic, static_cast<std::uint32_t>(t.dim(0)),
                               static_cast<std::uint32_t>(t.dim(1)),
                               static_cast<std::uint32_t>(t.dim(2))};
    f.write(reinterpret_cast<const char*>(header), sizeof(header));
    f.write(reinterpret_cast<const char*>(t.data()),
            static_cast<std::streamsize>(sizeof(double) * static_cast<size_t>(t.numel())));
    if (!f) throw IoError("write failed: " + path);
}

Tensor read_image_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    std::uint32_t header[4] = {0, 0, 0, 0};
    f.read(reinterpret_cast<char*>(header), sizeof(header));
    if (f.gcount() != sizeof(header))
        throw ParseError("truncated image header in " + path, f.gcount());
    if (header[0] != kImageMagic) throw ParseError("bad magic in " + path, 0);
    for (int i = 1; i < 4; ++i) {
        if (header[i] == 0 || header[i] > (1u << 20))
            throw ParseError("implausible dimension in " + path, 4 * i);
    }
    Shape shape = {static_cast<int>(header[1]), static_cast<int>(header[2]),
                   static_cast<int>(header[3])};
    Tensor t(shape);
    auto bytes = static_cast<std::streamsize>(sizeof(double) * static_cast<size_t>(t.numel()));
    f.read(reinterpret_cast<char*>(t.data()), bytes);
    if (f.gcount() != bytes)
        throw ParseError("truncated image data in " + path,
                         static_cast<std::int64_t>(sizeof(header)) + f.gcount());
    return t;
}

std::string read_text_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    f.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!f) throw IoError("write failed: " + path);
}

namespace {

constexpr std::uint32_t kCheckpointMagic = 0x54504B43u; // bytes "CKPT"

struct BinReader {
    const std::string& buf;
    size_t pos = 0;
    const std::string& path;

    void need(size_t n, const char* what) const {
        if (pos + n > buf.size())
            throw ParseError(std::string("truncated ") + what + " in " + path,
                             static_cast<std::int64_t>(pos));
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v;
        std::memcpy(&v, buf.data() + pos, 4);
        pos += 4;
        return v;
    }
    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v;
        std::memcpy(&v, buf.data() + pos, 8);
        pos += 8;
        return v;
    }
    std::string str(const char* what) {
        std::uint32_t n = u32(what);
        need(n, what);
        std::string out(buf.data() + pos, n);
        pos += n;
        return out;
    }
};

void put_u32(std::string& out, std::uint32_t v) { out.append(reinterpret_cast<const char*>(&v), 4); }
void put_u64(std::string& out, std::uint64_t v) { out.append(reinterpret_cast<const char*>(&v), 8); }
void put_str(std::string& out, const std::string& s) {
    put_u32(out, static_cast<std::uint32_t>(s.size()));
    out.append(s);
}

} // namespace

const Tensor& Checkpoint::tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return t;
    std::string have;
    for (const auto& [n, t] : tensors) {
        if (!have.empty()) have += ", ";
        have += n;
    }
    throw ValueError("checkpoint has no tensor '" + name + "' (has: " + have + ")");
}

bool Checkpoint::has_tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return true;
    return false;
}

void save_checkpoint(const std::string& path, const Checkpoint& c) {
    std::string out;
    put_u32(out, kCheckpointMagic);
    put_u32(out, c.version);
    put_u64(out, c.epoch);
    put_u64(out, c.rng_state);
    put_str(out, c.config_text);
    put_u32(out, static_cast<std::uint32_t>(c.tensors.size()));
    for (const auto& [name, t] : c.tensors) {
        put_str(out, name);
        put_u32(out, static_cast<std::uint32_t>(t.ndim()));
        for (int i = 0; i < t.ndim(); ++i) put_u32(out, static_cast<std::uint32_t>(t.dim(i)));
        out.append(reinterpret_cast<const char*>(t.data()),
                   sizeof(double) * static_cast<size_t>(t.numel()));
    }
    write_text_file(path, out);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::string buf = read_text_file(path);
    BinReader r{buf, 0, path};
    if (r.u32("magic") != kCheckpointMagic) throw ParseError("bad checkpoint magic in " + path, 0);
    Checkpoint c;
    c.version = r.u32("version");
    if (c.version != kCheckpointVersion)
        throw ParseError("checkpoint " + path + " has format version " +
                         std::to_string(c.version) + ", this build reads version " +
                         std::to_string(kCheckpointVersion));
    c.epoch = r.u64("epoch");
    c.rng_state = r.u64("rng state");
    c.config_text = r.str("config text");
    std::uint32_t count = r.u32("tensor count");
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = r.str("tensor name");
        std::uint32_t ndim = r.u32("tensor rank");
        if (ndim > 8) throw ParseError("implausible tensor rank in " + path,
                                       static_cast<std::int64_t>(r.pos) - 4);
        Shape shape;
        std::int64_t numel = 1;
        for (std::uint32_t d = 0; d < ndim; ++d) {
            std::uint32_t v = r.u32("tensor dim");
            if (v == 0 || v > (1u << 24))
                throw ParseError("implausible tensor dim in " + path,
                                 static_cast<std::int64_t>(r.pos) - 4);
            shape.push_back(static_cast<int>(v));
            numel *= v;
        }
        r.need(sizeof(double) * static_cast<size_t>(numel), "tensor data");
        Tensor t(shape);
        std::memcpy(t.data(), buf.data() + r.pos, sizeof(double) * static_cast<size_t>(numel));
        r.pos += sizeof(double) * static_cast<size_t>(numel);
        c.tensors.emplace_back(std::move(name), std::move(t));
    }
    if (r.pos != buf.size())
        throw ParseError("trailing bytes after checkpoint payload in " + path,
                         static_cast<std::int64_t>(r.pos));
    return c;
}

} // namespace cstn
