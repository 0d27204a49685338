#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>

#include "saeforge/checkpoint.hpp"
#include "saeforge/serialize.hpp"

using namespace saeforge;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
    auto dir = fs::temp_directory_path() / ("saeforge_test_checkpoint_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::vector<char> file_bytes(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

std::uint64_t read_u64(const std::vector<char>& b, std::size_t at) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b[at + static_cast<std::size_t>(i)])) << (8 * i);
    }
    return v;
}

template <typename F>
std::uint64_t error_offset(F&& f) {
    try {
        f();
    } catch (const CheckpointError& e) {
        return e.offset();
    }
    FAIL("expected CheckpointError");
    return 0;
}

}  // namespace

TEST_CASE("SAE checkpoint round-trips bitwise") {
    auto dir = scratch_dir("sae");
    auto sae = init_sae(8, 32, 3, 2);
    sae.encoder_bias[5] = -0.0f;
    sae.decoder_bias[1] = std::numeric_limits<float>::denorm_min();
    save_sae(dir / "a.ckpt", sae, {{"note", "x"}});
    const auto back = load_sae(dir / "a.ckpt");
    CHECK(back.placement_layer == 2);
    const auto src = sae.named();
    const auto dst = back.named();
    REQUIRE(src.size() == dst.size());
    for (std::size_t i = 0; i < src.size(); ++i) {
        CHECK(src[i].second->shape() == dst[i].second->shape());
        CHECK(std::memcmp(src[i].second->data().data(), dst[i].second->data().data(),
                          src[i].second->numel() * sizeof(float)) == 0);
    }
    CHECK(std::signbit(back.encoder_bias[5]));
    CHECK(parameter_hash(sae) == parameter_hash(back));

    // Saving the loaded copy reproduces the file byte for byte.
    save_sae(dir / "b.ckpt", back, {{"note", "x"}});
    CHECK(file_bytes(dir / "a.ckpt") == file_bytes(dir / "b.ckpt"));
    CHECK_FALSE(fs::exists(dir / "a.ckpt.tmp"));
}

TEST_CASE("transformer checkpoint round-trips") {
    auto dir = scratch_dir("transformer");
    TransformerConfig cfg{2, 16, 2, 32, 20, 8, 1e-5};
    const auto params = init_transformer(cfg, 11);
    save_transformer(dir / "m.ckpt", params);
    const auto back = load_transformer(dir / "m.ckpt");
    CHECK(back.config == cfg);
    CHECK(parameter_hash(back) == parameter_hash(params));
    CHECK_THROWS_AS(load_sae(dir / "m.ckpt"), std::invalid_argument);
}

TEST_CASE("empty tensor map and run metadata survive encoding") {
    const nlohmann::json run = {{"a", 1}, {"b", {1.5, 2.5}}};
    const auto ckpt = decode_checkpoint(encode_checkpoint({}, run));
    CHECK(ckpt.tensors.empty());
    CHECK(ckpt.run == run);

    NamedTensors one{{"w", Tensor<float>({2, 3})}};
    one[0].second[4] = 7.0f;
    const auto back = decode_checkpoint(encode_checkpoint(one, {}));
    REQUIRE(back.tensors.size() == 1);
    CHECK(back.tensors[0].first == "w");
    CHECK(back.tensors[0].second.shape() == Shape{2, 3});
    CHECK(back.tensors[0].second[4] == 7.0f);
}

TEST_CASE("malformed checkpoints are rejected with byte offsets") {
    NamedTensors t{{"w", Tensor<float>({4})}, {"v", Tensor<float>({2, 2})}};
    const auto good = encode_checkpoint(t, {});
    const std::uint64_t meta_len = read_u64(good, 12);
    const std::uint64_t payload = 20 + meta_len;
    REQUIRE(good.size() == payload + 8 * sizeof(float));

    auto bad_magic = good;
    bad_magic[3] = 'X';
    CHECK(error_offset([&] { decode_checkpoint(bad_magic); }) == 0);

    auto bad_version = good;
    bad_version[8] = 9;
    CHECK(error_offset([&] { decode_checkpoint(bad_version); }) == 8);

    auto long_meta = good;
    long_meta[19] = 0x7f;
    CHECK(error_offset([&] { decode_checkpoint(long_meta); }) == good.size());

    auto bad_json = good;
    bad_json[20] = '#';
    CHECK(error_offset([&] { decode_checkpoint(bad_json); }) >= 20);

    // Truncation inside the second tensor.
    std::vector<char> cut(good.begin(), good.end() - 3);
    CHECK(error_offset([&] { decode_checkpoint(cut); }) == cut.size());

    auto extra = good;
    extra.push_back(0);
    CHECK(error_offset([&] { decode_checkpoint(extra); }) == good.size());

    CHECK(error_offset([&] { decode_checkpoint(std::vector<char>(5, 'S')); }) == 0);

    NamedTensors dup{{"w", Tensor<float>({1})}, {"w", Tensor<float>({1})}};
    CHECK_THROWS_AS(encode_checkpoint(dup, {}), std::invalid_argument);
}

TEST_CASE("checkpoint error messages carry the offset") {
    try {
        decode_checkpoint(std::vector<char>(30, 0));
        FAIL("expected error");
    } catch (const CheckpointError& e) {
        CHECK(std::string(e.what()).find("(at byte 0)") != std::string::npos);
    }
}

TEST_CASE("fnv1a64 matches reference vectors") {
    CHECK(fnv1a64(std::string()) == 0xcbf29ce484222325ULL);
    CHECK(fnv1a64(std::string("a")) == 0xaf63dc4c8601ec8cULL);
    CHECK(fnv1a64(std::string("foobar")) == 0x85944171f73967e8ULL);
    CHECK(hex64(0xabcULL) == "0000000000000abc");
}

TEST_CASE("JSON forms replace non-finite values with null") {
    LossBreakdown b;
    b.total = std::nan("");
    b.downstream_per_layer = {1.0, INFINITY};
    const nlohmann::json j = b;
    CHECK(j["total"].is_null());
    CHECK(j["downstream_per_layer"][0] == 1.0);
    CHECK(j["downstream_per_layer"][1].is_null());

    TrainConfig c;
    c.loss.kind = LossKind::e2e_downstream;
    const nlohmann::json jc = c;
    CHECK(jc["loss"]["kind"] == "e2e_ds");
    CHECK(jc["loss"]["kl_coeff"] == 0.5);
    CHECK(jc["warmup_samples"] == 800);

    TransformerConfig t{3, 32, 4, 64, 50, 16, 1e-5};
    CHECK(nlohmann::json(t).get<TransformerConfig>() == t);
}
