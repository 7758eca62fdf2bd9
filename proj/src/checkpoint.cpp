#include "vitae/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

#include "vitae/errors.hpp"

namespace vitae {

namespace {
constexpr uint64_t kVersion = 1;

void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double d) {
    uint64_t bits;
    std::memcpy(&bits, &d, 8);
    put_u64(out, bits);
}

struct Reader {
    const unsigned char* p;
    size_t left;
    std::string what;

    void need(size_t n) const {
        if (left < n) throw TruncatedFile(what + ": wanted " + std::to_string(n) + " more bytes");
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= uint64_t(p[i]) << (8 * i);
        p += 8;
        left -= 8;
        return v;
    }
    double f64() {
        uint64_t bits = u64();
        double d;
        std::memcpy(&d, &bits, 8);
        return d;
    }
    std::string str(size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(p), n);
        p += n;
        left -= n;
        return s;
    }
};
}  // namespace

std::string encode_arrays(const std::vector<NamedArray>& arrays) {
    std::string out;
    put_u64(out, kVersion);
    put_u64(out, arrays.size());
    for (const auto& a : arrays) {
        size_t n = 1;
        for (size_t e : a.shape) n *= e;
        if (n != a.data.size())
            throw ShapeMismatch("array '" + a.name + "': shape does not match data length");
        put_u64(out, a.name.size());
        out += a.name;
        put_u64(out, a.shape.size());
        for (size_t e : a.shape) put_u64(out, e);
        for (double d : a.data) put_f64(out, d);
    }
    return out;
}

std::vector<NamedArray> decode_arrays(const char* bytes, size_t len, const std::string& what) {
    Reader r{reinterpret_cast<const unsigned char*>(bytes), len, what};
    uint64_t version = r.u64();
    if (version != kVersion)
        throw BadMagic(what + ": container version " + std::to_string(version));
    uint64_t count = r.u64();
    std::vector<NamedArray> arrays;
    arrays.reserve(count);
    for (uint64_t i = 0; i < count; ++i) {
        NamedArray a;
        a.name = r.str(r.u64());
        uint64_t rank = r.u64();
        a.shape.resize(rank);
        size_t n = 1;
        for (auto& e : a.shape) {
            e = r.u64();
            n *= e;
        }
        a.data.resize(n);
        for (auto& d : a.data) d = r.f64();
        arrays.push_back(std::move(a));
    }
    if (r.left != 0) throw BadMagic(what + ": trailing bytes after last array");
    return arrays;
}

void save_arrays(const std::string& path, const std::vector<NamedArray>& arrays) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + path + " for writing");
    std::string buf = encode_arrays(arrays);
    f.write(buf.data(), (std::streamsize)buf.size());
    if (!f) throw IoError("short write to " + path);
}

std::vector<NamedArray> load_arrays(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode_arrays(buf.data(), buf.size(), path);
}

}  // namespace vitae
