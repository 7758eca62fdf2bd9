#include "vitae/manifest.hpp"

#include <cstdint>
#include <fstream>
#include <sstream>

#include "vitae/errors.hpp"

namespace vitae {

namespace {

uint32_t rol(uint32_t v, int n) { return (v << n) | (v >> (32 - n)); }

}  // namespace

std::string sha1_hex(const std::string& bytes) {
    uint32_t h[5] = {0x67452301u, 0xEFCDAB89u, 0x98BADCFEu, 0x10325476u, 0xC3D2E1F0u};

    std::string msg = bytes;
    uint64_t bitlen = (uint64_t)bytes.size() * 8;
    msg.push_back((char)0x80);
    while (msg.size() % 64 != 56) msg.push_back('\0');
    for (int i = 7; i >= 0; --i) msg.push_back((char)((bitlen >> (8 * i)) & 0xff));

    for (size_t off = 0; off < msg.size(); off += 64) {
        uint32_t w[80];
        for (int i = 0; i < 16; ++i)
            w[i] = ((uint32_t)(unsigned char)msg[off + 4 * i] << 24) |
                   ((uint32_t)(unsigned char)msg[off + 4 * i + 1] << 16) |
                   ((uint32_t)(unsigned char)msg[off + 4 * i + 2] << 8) |
                   (uint32_t)(unsigned char)msg[off + 4 * i + 3];
        for (int i = 16; i < 80; ++i) w[i] = rol(w[i - 3] ^ w[i - 8] ^ w[i - 14] ^ w[i - 16], 1);

        uint32_t a = h[0], b = h[1], c = h[2], d = h[3], e = h[4];
        for (int i = 0; i < 80; ++i) {
            uint32_t f, k;
            if (i < 20) {
                f = (b & c) | (~b & d);
                k = 0x5A827999u;
            } else if (i < 40) {
                f = b ^ c ^ d;
                k = 0x6ED9EBA1u;
            } else if (i < 60) {
                f = (b & c) | (b & d) | (c & d);
                k = 0x8F1BBCDCu;
            } else {
                f = b ^ c ^ d;
                k = 0xCA62C1D6u;
            }
            uint32_t t = rol(a, 5) + f + e + k + w[i];
            e = d;
            d = c;
            c = rol(b, 30);
            b = a;
            a = t;
        }
        h[0] += a;
        h[1] += b;
        h[2] += c;
        h[3] += d;
        h[4] += e;
    }

    static const char* hex = "0123456789abcdef";
    std::string out;
    out.reserve(40);
    for (uint32_t v : h)
        for (int i = 7; i >= 0; --i) out.push_back(hex[(v >> (4 * i)) & 0xf]);
    return out;
}

std::string blob_hash_bytes(const std::string& bytes) {
    return sha1_hex("blob " + std::to_string(bytes.size()) + '\0' + bytes);
}

std::string blob_hash_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return blob_hash_bytes(ss.str());
}

void manifest_set(Manifest& m, const std::string& key, const std::string& value) {
    for (auto& f : m.fields)
        if (f.first == key) {
            f.second = value;
            return;
        }
    m.fields.emplace_back(key, value);
}

void manifest_input(Manifest& m, const std::string& name, const std::string& path) {
    m.inputs.emplace_back(name, blob_hash_file(path));
}

std::string manifest_text(const Manifest& m) {
    std::string out = "command=" + m.command + "\n";
    for (const auto& f : m.fields) out += f.first + "=" + f.second + "\n";
    for (const auto& i : m.inputs) out += "input." + i.first + "=" + i.second + "\n";
    return out;
}

void write_manifest(const Manifest& m, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    out << manifest_text(m);
    if (!out) throw IoError("write failed: " + path);
}

}  // namespace vitae
