#include <set>

#include "cvl/encoder.hpp"
#include "cvl/ops.hpp"
#include "cvl/verify.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace cvl;
using testutil::random_tensor;

TEST_SUITE("encoder") {

TEST_CASE("large 4-stage geometry lands within 5% of 200M parameters") {
    const encoder_config cfg = encoder_config::large();
    CHECK(cfg.total_blocks() == 36);
    CHECK(cfg.downsample_factor() == 32);
    const int64_t count = encoder_param_count(cfg);
    CHECK(count > static_cast<int64_t>(0.95 * 200e6));
    CHECK(count < static_cast<int64_t>(1.05 * 200e6));

    const encoder_config five = encoder_config::large_5stage();
    CHECK(five.downsample_factor() == 64);
    CHECK(five.depths.back() == 6);
}

TEST_CASE("hand-counted parameter total for a one-stage config") {
    encoder_config cfg;
    cfg.depths = {1};
    cfg.channels = {8};
    cfg.stem_patch = 4;

    // stem conv 8*3*4*4+8, stem norm 2*8,
    // block: dw 8*49+8, norm 16, pw1 32*8+32, pw2 8*32+8, scale 8,
    // final norm 16
    const int64_t stem = 8 * 3 * 16 + 8 + 16;
    const int64_t block = (8 * 49 + 8) + 16 + (32 * 8 + 32) + (8 * 32 + 8) + 8;
    const int64_t want = stem + block + 16;
    CHECK(encoder_param_count(cfg) == want);

    const encoder_state<float> st = build_encoder<float>(cfg, 1);
    CHECK(st.params.param_count() == want);
}

TEST_CASE("allocated parameters match the analytic count on mixed configs") {
    for (int stages = 1; stages <= 5; ++stages) {
        const encoder_config cfg = encoder_config::tiny(stages);
        const encoder_state<float> st = build_encoder<float>(cfg, 7);
        CHECK(st.params.param_count() == encoder_param_count(cfg));
    }
}

TEST_CASE("identical seeds build bitwise-identical parameters") {
    const encoder_config cfg = encoder_config::tiny(3);
    const encoder_state<float> a = build_encoder<float>(cfg, 42);
    const encoder_state<float> b = build_encoder<float>(cfg, 42);
    const encoder_state<float> c = build_encoder<float>(cfg, 43);

    REQUIRE(a.params.entries.size() == b.params.entries.size());
    bool any_diff_c = false;
    for (const auto & [name, e] : a.params.entries) {
        CHECK(testutil::bitwise_equal(*e.value, b.params.at(name)));
        if (!testutil::bitwise_equal(*e.value, c.params.at(name))) {
            any_diff_c = true;
        }
    }
    CHECK(any_diff_c);
}

TEST_CASE("token grids at the reference resolutions") {
    rng r(3);
    const encoder_state<float> e5 = build_encoder<float>(encoder_config::tiny(5), 1);
    const auto img1536 = random_tensor<float>(r, {1, 3, 1536, 1536}, -0.5, 0.5);
    const visual_tokens<float> t1536 = encode(e5, img1536);
    CHECK(t1536.grid_h == 24);
    CHECK(t1536.grid_w == 24);
    CHECK(t1536.tokens.shape == std::vector<int64_t>{1, 576, 64});

    const auto img1024 = random_tensor<float>(r, {1, 3, 1024, 1024}, -0.5, 0.5);
    CHECK(encode(e5, img1024).tokens.size(1) == 256);

    const encoder_state<float> e4 = build_encoder<float>(encoder_config::tiny(4), 1);
    const auto img768 = random_tensor<float>(r, {1, 3, 768, 768}, -0.5, 0.5);
    CHECK(encode(e4, img768).tokens.size(1) == 576);
}

TEST_CASE("token-count law over random sizes, doubling, and aspect freedom") {
    rng r(9);
    const encoder_config cfg = encoder_config::tiny(3);  // D = 16
    const encoder_state<float> enc = build_encoder<float>(cfg, 2);
    const int64_t d = cfg.downsample_factor();

    for (int trial = 0; trial < 6; ++trial) {
        const int64_t h = d * (1 + r.uniform_int(6));
        const int64_t w = d * (1 + r.uniform_int(6));
        const auto img = random_tensor<float>(r, {1, 3, h, w}, -0.5, 0.5);
        const visual_tokens<float> t = encode(enc, img);
        CHECK(t.grid_h == h / d);
        CHECK(t.grid_w == w / d);
        CHECK(t.tokens.size(1) == (h / d) * (w / d));
    }

    // doubling each side multiplies N by exactly 4
    const auto small = random_tensor<float>(r, {1, 3, 2 * d, 3 * d}, -0.5, 0.5);
    const auto big = random_tensor<float>(r, {1, 3, 4 * d, 6 * d}, -0.5, 0.5);
    CHECK(encode(enc, big).tokens.size(1) == 4 * encode(enc, small).tokens.size(1));

    // non-square inputs produce non-square grids
    const visual_tokens<float> wide = encode(enc, random_tensor<float>(r, {1, 3, 2 * d, 5 * d}));
    CHECK(wide.grid_h == 2);
    CHECK(wide.grid_w == 5);

    CHECK_THROWS_WITH_AS(encode(enc, random_tensor<float>(r, {1, 3, d - 1, d})),
                         doctest::Contains("minimum size"), std::runtime_error);
}

TEST_CASE("zeroed projection and layer scale make a block the identity") {
    // two-block model with the second block zeroed == one-block model
    // with identical shared parameters
    encoder_config two;
    two.depths = {2};
    two.channels = {8};
    encoder_config one;
    one.depths = {1};
    one.channels = {8};

    encoder_state<float> e2 = build_encoder<float>(two, 21);
    encoder_state<float> e1 = build_encoder<float>(one, 22);
    for (auto & [name, e] : e1.params.entries) {
        *e.value = e2.params.at(name);  // same names except block1
    }
    e2.params.at("stage1.block1.pw2.weight").fill(0.f);
    e2.params.at("stage1.block1.pw2.bias").fill(0.f);
    e2.params.at("stage1.block1.layerscale").fill(0.f);

    rng r(23);
    const auto img = random_tensor<float>(r, {1, 3, 32, 32}, -0.5, 0.5);
    const visual_tokens<float> t2 = encode(e2, img);
    const visual_tokens<float> t1 = encode(e1, img);
    CHECK(testutil::max_abs_diff(t2.tokens, t1.tokens) == 0.0);
}

TEST_CASE("taped and inference encodes agree") {
    const encoder_config cfg = encoder_config::tiny(4);
    encoder_state<float> enc = build_encoder<float>(cfg, 31);
    rng r(32);
    const auto img = random_tensor<float>(r, {1, 3, 64, 96}, -0.5, 0.5);

    const visual_tokens<float> eager = encode(enc, img);

    tape<float> tp;
    tape_binding<float> bind(tp, enc.params);
    const auto leaf = tp.leaf(img);
    const taped_tokens<float> taped = encode_on_tape(enc, tp, bind, leaf);
    CHECK(taped.grid_h == eager.grid_h);
    CHECK(taped.grid_w == eager.grid_w);
    CHECK(testutil::bitwise_equal(tp.val(taped.node), eager.tokens));
}

TEST_CASE("freeze_mask: last 18 of 36 blocks selects the tail of stage 3 plus stage 4") {
    encoder_config cfg;
    cfg.depths = {3, 3, 27, 3};
    cfg.channels = {4, 8, 16, 32};
    encoder_state<float> enc = build_encoder<float>(cfg, 5);

    const int64_t trainable = freeze_mask(enc, freeze_spec::last_n_blocks(18));
    CHECK(trainable > 0);
    CHECK(trainable == enc.params.trainable_count());

    std::set<std::string> trainable_blocks;
    for (const auto & [name, e] : enc.params.entries) {
        if (e.trainable) {
            const size_t dot = name.find('.');
            REQUIRE(name.rfind("stage", 0) == 0);  // blocks only
            trainable_blocks.insert(name.substr(0, name.find('.', dot + 1)));
        }
    }
    // last 15 blocks of stage 3 (indices 12..26) and all 3 of stage 4
    std::set<std::string> want;
    for (int b = 12; b < 27; ++b) {
        want.insert("stage3.block" + std::to_string(b));
    }
    for (int b = 0; b < 3; ++b) {
        want.insert("stage4.block" + std::to_string(b));
    }
    CHECK(trainable_blocks == want);

    CHECK(freeze_mask(enc, freeze_spec::none()) == 0);
    CHECK(freeze_mask(enc, freeze_spec::all()) == enc.params.param_count());
    CHECK_THROWS_WITH_AS(freeze_mask(enc, freeze_spec::last_n_blocks(37)),
                         doctest::Contains("out of range"), std::runtime_error);
}

TEST_CASE("freeze_mask: from_stage 3 on a 5-stage model") {
    encoder_state<float> enc = build_encoder<float>(encoder_config::tiny(5), 5);
    freeze_mask(enc, freeze_spec::from_stage(3));

    for (const auto & [name, e] : enc.params.entries) {
        const bool in_upper = name.rfind("stage3.", 0) == 0 || name.rfind("stage4.", 0) == 0 ||
                              name.rfind("stage5.", 0) == 0 || name.rfind("down3.", 0) == 0 ||
                              name.rfind("down4.", 0) == 0 || name.rfind("down5.", 0) == 0;
        CHECK(e.trainable == in_upper);
    }
    CHECK_THROWS_AS(freeze_mask(enc, freeze_spec::from_stage(6)), std::runtime_error);
    CHECK_THROWS_AS(freeze_mask(enc, freeze_spec::from_stage(0)), std::runtime_error);
}

TEST_CASE("translation by D pixels shifts the grid by one cell") {
    const equivariance_report rep = equivariance_check(7, encoder_config::tiny(5), 1280, 64);
    CHECK(rep.pass);
    CHECK(rep.max_interior_diff < 1e-5);
    CHECK(rep.interior_cells > 0);

    const equivariance_report rep3 = equivariance_check(8, encoder_config::tiny(3), 512, 16);
    CHECK(rep3.pass);
}

TEST_CASE("receptive-field margin arithmetic") {
    encoder_config cfg = encoder_config::tiny(2);  // stem 4 + block k7 + down + block k7
    cfg.kernel_size = 7;
    // stem: rf 4, jump 4; s1 block: +24 -> 28; down: +4 -> 32, jump 8;
    // s2 block: +48 -> 80
    CHECK(receptive_field_extent(cfg) == 80);
    CHECK(equivariance_margin_cells(cfg) == (39 + 7) / 8);
}

}  // TEST_SUITE
