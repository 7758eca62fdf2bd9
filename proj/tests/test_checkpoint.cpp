#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <cstring>
#include <fstream>

#include "vitae/checkpoint.hpp"
#include "vitae/errors.hpp"
#include "vitae/rng.hpp"

using namespace vitae;

static std::string tmp_path(const char* name) {
    return std::string("ckpt_test_") + name + ".bin";
}

TEST_CASE("save/load round-trips bit-exactly") {
    RngStream rng(3, "ckpt");
    std::vector<NamedArray> arrays;
    arrays.push_back({"enc.w", {3, 4}, {}});
    for (size_t i = 0; i < 12; ++i) arrays[0].data.push_back(rng.normal() * 1e3);
    // awkward values: negative zero, denormal, huge
    arrays.push_back({"edge", {4}, {-0.0, 5e-324, 1.7976931348623157e308, 1.0 / 3.0}});
    arrays.push_back({"scalar", {}, {42.0}});
    arrays.push_back({"empty-name-ok \xc3\xa9", {2, 1}, {1.5, -2.5}});

    auto path = tmp_path("roundtrip");
    save_arrays(path, arrays);
    auto back = load_arrays(path);

    REQUIRE(back.size() == arrays.size());
    for (size_t i = 0; i < arrays.size(); ++i) {
        CHECK(back[i].name == arrays[i].name);
        CHECK(back[i].shape == arrays[i].shape);
        REQUIRE(back[i].data.size() == arrays[i].data.size());
        for (size_t j = 0; j < arrays[i].data.size(); ++j) {
            // bit equality, not approximate
            CHECK(std::memcmp(&back[i].data[j], &arrays[i].data[j], 8) == 0);
        }
    }
    std::remove(path.c_str());
}

TEST_CASE("two saves of the same arrays are byte-identical") {
    std::vector<NamedArray> arrays{{"a", {2}, {0.1, 0.2}}, {"b", {1}, {3.0}}};
    CHECK(encode_arrays(arrays) == encode_arrays(arrays));
}

TEST_CASE("truncated container is rejected") {
    std::vector<NamedArray> arrays{{"w", {2, 2}, {1, 2, 3, 4}}};
    std::string buf = encode_arrays(arrays);
    for (size_t cut : {size_t(4), buf.size() / 2, buf.size() - 1}) {
        CHECK_THROWS_AS(decode_arrays(buf.data(), cut, "t"), TruncatedFile);
    }
}

TEST_CASE("wrong version and trailing garbage are rejected") {
    std::string buf = encode_arrays({});
    buf[0] = 9;  // version
    CHECK_THROWS_AS(decode_arrays(buf.data(), buf.size(), "t"), BadMagic);

    std::string ok = encode_arrays({});
    ok += "junk";
    CHECK_THROWS_AS(decode_arrays(ok.data(), ok.size(), "t"), BadMagic);
}

TEST_CASE("missing file raises IoError") {
    CHECK_THROWS_AS(load_arrays("definitely/not/here.bin"), IoError);
}

TEST_CASE("shape/data disagreement is caught at save time") {
    std::vector<NamedArray> bad{{"w", {3}, {1.0}}};
    CHECK_THROWS_AS(encode_arrays(bad), ShapeMismatch);
}
