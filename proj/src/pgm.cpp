#include "vitae/pgm.hpp"

#include <cmath>
#include <fstream>

#include "vitae/errors.hpp"

namespace vitae {

namespace {

// Header tokens are whitespace-separated; '#' starts a comment running to end
// of line, allowed anywhere whitespace is.
std::string next_token(std::istream& in) {
    std::string tok;
    int c;
    while ((c = in.get()) != EOF) {
        if (c == '#') {
            while ((c = in.get()) != EOF && c != '\n') {
            }
            continue;
        }
        if (std::isspace(c)) {
            if (!tok.empty()) return tok;
            continue;
        }
        tok.push_back((char)c);
    }
    return tok;
}

size_t parse_header_num(const std::string& tok, const std::string& what, const std::string& path) {
    if (tok.empty()) throw TruncatedFile("pgm header ends before " + what + ": " + path);
    size_t v = 0;
    for (char ch : tok) {
        if (ch < '0' || ch > '9') throw BadMagic("pgm " + what + " is not a number: " + path);
        v = v * 10 + (size_t)(ch - '0');
    }
    return v;
}

}  // namespace

Tensor read_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);

    std::string magic = next_token(in);
    if (magic != "P5") throw BadMagic("not a binary pgm (want P5): " + path);
    size_t w = parse_header_num(next_token(in), "width", path);
    size_t h = parse_header_num(next_token(in), "height", path);
    size_t maxval = parse_header_num(next_token(in), "maxval", path);
    if (w == 0 || h == 0) throw BadMagic("pgm with empty dimensions: " + path);
    if (maxval == 0 || maxval > 255) throw BadMagic("pgm maxval out of 8-bit range: " + path);
    // the header's closing whitespace byte was consumed by next_token

    std::vector<unsigned char> raw(h * w);
    in.read(reinterpret_cast<char*>(raw.data()), (std::streamsize)raw.size());
    if ((size_t)in.gcount() != raw.size())
        throw TruncatedFile("pgm pixel data short: " + path);

    std::vector<double> px(h * w);
    for (size_t i = 0; i < px.size(); ++i) px[i] = raw[i] / (double)maxval;
    return Tensor::from_data({h, w}, std::move(px));
}

void write_pgm(const std::string& path, const Tensor& image) {
    if (image.rank() != 2 || image.numel() == 0)
        throw ShapeMismatch("write_pgm: want a non-empty [h,w] image");
    size_t h = image.shape()[0];
    size_t w = image.shape()[1];

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    out << "P5\n" << w << " " << h << "\n255\n";
    const auto& d = image.data();
    std::vector<unsigned char> raw(h * w);
    for (size_t i = 0; i < raw.size(); ++i) {
        double v = std::min(std::max(d[i], 0.0), 1.0);
        raw[i] = (unsigned char)std::lround(v * 255.0);
    }
    out.write(reinterpret_cast<const char*>(raw.data()), (std::streamsize)raw.size());
    if (!out) throw IoError("write failed: " + path);
}

}  // namespace vitae
