#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>

#include "doctest.h"

#include "cqvae/checkpoint.hpp"
#include "cqvae/rng.hpp"
#include "cqvae/tensor.hpp"

using namespace cqvae;

namespace {

template <typename Fn>
std::string thrown_message(Fn&& fn) {
    try {
        fn();
    } catch (const std::exception& e) {
        return e.what();
    }
    return "";
}

struct TempFile {
    std::string path;
    explicit TempFile(std::string p) : path(std::move(p)) {}
    ~TempFile() { std::remove(path.c_str()); }
};

CheckpointData sample_checkpoint() {
    CheckpointData ckpt;
    ckpt.config_text = "m = 2\nn = 3\n# comment survives as raw bytes\n";
    ckpt.meta = {{"epoch", "7"}, {"steps", "123"}, {"adam.t", "123"}};

    RngStream rng = RngStream::named(99, "gumbel");
    (void)rng.normal();
    (void)rng.uniform01();
    ckpt.rng_states = {{"gumbel", rng.save_state()}, {"data", RngStream(5).save_state()}};

    Tensorf a(Dims{2, 3});
    for (size_t i = 0; i < a.data.size(); ++i) a.data[i] = float(i) * 0.25f - 0.6f;
    Tensorf b(Dims{4});
    b.data = {1.0f, -2.5f, 3.25f, 0.0f};
    Tensorf c(Dims{2, 1, 2, 2});
    for (size_t i = 0; i < c.data.size(); ++i) c.data[i] = 1.0f / float(i + 1);
    ckpt.tensors = {{"enc.w", a}, {"enc.b", b}, {"adam.m.enc.w", c}};
    return ckpt;
}

}  // namespace

TEST_CASE("checkpoint write and read round trip is exact") {
    const CheckpointData ckpt = sample_checkpoint();
    TempFile file("test_ckpt_roundtrip.bin");
    write_checkpoint(ckpt, file.path);
    const CheckpointData back = read_checkpoint(file.path);

    CHECK(back.config_text == ckpt.config_text);
    REQUIRE(back.meta == ckpt.meta);
    REQUIRE(back.rng_states == ckpt.rng_states);
    REQUIRE(back.tensors.size() == ckpt.tensors.size());
    for (size_t i = 0; i < ckpt.tensors.size(); ++i) {
        CHECK(back.tensors[i].first == ckpt.tensors[i].first);
        CHECK(back.tensors[i].second.shape == ckpt.tensors[i].second.shape);
        REQUIRE(back.tensors[i].second.data.size() == ckpt.tensors[i].second.data.size());
        for (size_t k = 0; k < ckpt.tensors[i].second.data.size(); ++k) {
            // Bitwise equality: the file stores raw float32.
            CHECK(back.tensors[i].second.data[k] == ckpt.tensors[i].second.data[k]);
        }
    }
}

TEST_CASE("restored rng state resumes the exact sequence") {
    RngStream rng = RngStream::named(123, "gumbel");
    (void)rng.normal();
    (void)rng.gumbel();

    CheckpointData ckpt;
    ckpt.rng_states = {{"gumbel", rng.save_state()}};
    TempFile file("test_ckpt_rng.bin");
    write_checkpoint(ckpt, file.path);

    std::vector<double> expected;
    for (int i = 0; i < 5; ++i) expected.push_back(rng.normal());

    const CheckpointData back = read_checkpoint(file.path);
    const std::string* state = back.find_rng("gumbel");
    REQUIRE(state != nullptr);
    RngStream resumed(0);
    resumed.load_state(*state);
    for (int i = 0; i < 5; ++i) CHECK(resumed.normal() == expected[size_t(i)]);
}

TEST_CASE("find helpers return null for missing entries") {
    const CheckpointData ckpt = sample_checkpoint();
    CHECK(ckpt.find_meta("epoch") != nullptr);
    CHECK(*ckpt.find_meta("epoch") == "7");
    CHECK(ckpt.find_meta("no-such") == nullptr);
    CHECK(ckpt.find_rng("gumbel") != nullptr);
    CHECK(ckpt.find_rng("nope") == nullptr);
    CHECK(ckpt.find_tensor("enc.w") != nullptr);
    CHECK(ckpt.find_tensor("enc.w")->shape == Dims{2, 3});
    CHECK(ckpt.find_tensor("dec.w") == nullptr);
}

TEST_CASE("reader rejects foreign and damaged files") {
    SUBCASE("missing file") {
        CHECK_THROWS_AS((void)read_checkpoint("no/such/checkpoint.bin"), std::runtime_error);
    }

    SUBCASE("wrong magic") {
        TempFile file("test_ckpt_magic.bin");
        std::ofstream out(file.path, std::ios::binary);
        out << "NOPE" << std::string(64, '\0');
        out.close();
        const std::string msg = thrown_message([&] { (void)read_checkpoint(file.path); });
        CHECK(msg.find("magic") != std::string::npos);
    }

    SUBCASE("unsupported version names both versions") {
        TempFile file("test_ckpt_version.bin");
        std::ofstream out(file.path, std::ios::binary);
        out << "CQVK";
        const unsigned char v2[4] = {2, 0, 0, 0};
        out.write(reinterpret_cast<const char*>(v2), 4);
        out.close();
        const std::string msg = thrown_message([&] { (void)read_checkpoint(file.path); });
        CHECK(msg.find("2") != std::string::npos);
        CHECK(msg.find("1") != std::string::npos);
    }

    SUBCASE("truncated file") {
        const CheckpointData ckpt = sample_checkpoint();
        TempFile full("test_ckpt_full.bin");
        write_checkpoint(ckpt, full.path);

        std::ifstream in(full.path, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        in.close();
        REQUIRE(bytes.size() > 40);

        TempFile cut("test_ckpt_cut.bin");
        std::ofstream out(cut.path, std::ios::binary);
        out.write(bytes.data(), std::streamsize(bytes.size() - 25));
        out.close();
        CHECK_THROWS_AS((void)read_checkpoint(cut.path), std::runtime_error);
    }

    SUBCASE("absurd declared length is capped, not allocated") {
        TempFile file("test_ckpt_huge.bin");
        std::ofstream out(file.path, std::ios::binary);
        out << "CQVK";
        const unsigned char v1[4] = {1, 0, 0, 0};
        out.write(reinterpret_cast<const char*>(v1), 4);
        const unsigned char huge[4] = {0xff, 0xff, 0xff, 0x7f};
        out.write(reinterpret_cast<const char*>(huge), 4);
        out.close();
        CHECK_THROWS_AS((void)read_checkpoint(file.path), std::runtime_error);
    }
}
