#pragma once

#include <string>
#include <vector>

namespace vitae {

struct NamedArray {
    std::string name;
    std::vector<size_t> shape;
    std::vector<double> data;
};

// Single binary container used for checkpoints and cached datasets.
// Layout, all little-endian:
//   u64 version (currently 1), u64 array count,
//   then per array: u64 name length, UTF-8 name bytes, u64 rank,
//   u64 extents[rank], f64 data (raw IEEE-754 bits).
// Round-trips are bit-exact; that is what run-to-run determinism is
// checked against.
void save_arrays(const std::string& path, const std::vector<NamedArray>& arrays);
std::vector<NamedArray> load_arrays(const std::string& path);

// Same wire format against an in-memory buffer (dataset caches prepend a
// text header line before the container bytes).
std::string encode_arrays(const std::vector<NamedArray>& arrays);
std::vector<NamedArray> decode_arrays(const char* bytes, size_t len, const std::string& what);

}  // namespace vitae
