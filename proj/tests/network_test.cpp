#include <gtest/gtest.h>

#include "skipseg/gradcheck.hpp"
#include "skipseg/network.hpp"

using namespace skipseg;

namespace {

NetworkConfig four_stage(int input = 64, int grid = 64) {
    NetworkConfig cfg;
    cfg.input_size = input;
    cfg.stage_channels = {4, 6, 8, 8};
    cfg.n_classes = 5;
    cfg.grid_size = grid;
    return cfg;
}

std::vector<double> flat_parameters(Network<double>& net) {
    std::vector<double> out;
    for (auto& np : net.parameters()) {
        out.insert(out.end(), np.params->weights.data().begin(), np.params->weights.data().end());
        out.insert(out.end(), np.params->bias.begin(), np.params->bias.end());
    }
    return out;
}

std::size_t direct_count(Network<double>& net) {
    std::size_t n = 0;
    for (auto& np : net.parameters()) n += np.params->weights.size() + np.params->bias.size();
    return n;
}

}  // namespace

TEST(Build, SameSeedGivesIdenticalParameters) {
    auto a = build<double>(four_stage(), SkipSpec{2, 5}, 42);
    auto b = build<double>(four_stage(), SkipSpec{2, 5}, 42);
    EXPECT_EQ(flat_parameters(a), flat_parameters(b));
    auto c = build<double>(four_stage(), SkipSpec{2, 5}, 43);
    EXPECT_NE(flat_parameters(a), flat_parameters(c));
}

TEST(Build, BaselineHasNoSkipParameters) {
    auto base = build<double>(four_stage(), SkipSpec{}, 1);
    for (const auto& name : base.parameter_names()) EXPECT_FALSE(name.starts_with("skip."));
    EXPECT_EQ(base.parameter_count(), direct_count(base));
}

TEST(Build, SkipBranchParameterFormula) {
    for (int tap : {0, 1, 2, 3}) {
        for (int n : {3, 5, 7}) {
            for (int hidden : {0, 5}) {
                auto cfg = four_stage();
                cfg.skip_channels = hidden;
                auto base = build<double>(cfg, SkipSpec{}, 1);
                auto skip = build<double>(cfg, SkipSpec{tap, n}, 1);
                const int c_tap = cfg.stage_channels[tap];
                const int c_h = hidden ? hidden : c_tap;
                EXPECT_EQ(skip.parameter_count() - base.parameter_count(), skip_parameter_count(n, c_tap, c_h, cfg.n_classes));
                EXPECT_EQ(skip.parameter_count(), direct_count(skip));
            }
        }
    }
}

TEST(Build, BackboneIsSharedAcrossArmsWithSameSeed) {
    auto base = build<double>(four_stage(), SkipSpec{}, 9);
    auto skip = build<double>(four_stage(), SkipSpec{1, 3}, 9);
    auto bp = base.parameters();
    auto sp = skip.parameters();
    for (std::size_t i = 0; i < bp.size(); ++i) {
        EXPECT_EQ(bp[i].params->weights.values(), sp[i].params->weights.values()) << bp[i].name;
    }
}

TEST(Build, ConfigurationErrors) {
    auto cfg = four_stage();
    cfg.tap_points = {1, 2};
    EXPECT_THROW(build<double>(cfg, SkipSpec{3, 3}, 1), ConfigError);
    EXPECT_THROW(build<double>(four_stage(), SkipSpec{1, 4}, 1), ConfigError);
    EXPECT_THROW(build<double>(four_stage(), SkipSpec{1, 1}, 1), ConfigError);

    auto bad = four_stage();
    bad.stage_channels = {4};
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = four_stage();
    bad.n_classes = 1;
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = four_stage();
    bad.tap_points = {2, 1};
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = four_stage();
    bad.tap_points = {4};
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = four_stage(60);
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = four_stage(64, 16);
    bad.tap_points = {1};  // 32x32 features do not fit in a 16x16 grid
    EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Build, DefaultTapsAreStagesThatFitTheGrid) {
    EXPECT_EQ(four_stage(64, 64).effective_taps(), (std::vector<int>{0, 1, 2, 3}));
    EXPECT_EQ(four_stage(32, 16).effective_taps(), (std::vector<int>{1, 2, 3}));
}

TEST(Forward, StageFeatureSizesHalve) {
    auto net = build<double>(four_stage(), SkipSpec{}, 3);
    const auto b = net.forward(Tensor<double>({1, 3, 64, 64}, 0.5));
    ASSERT_EQ(b.features.size(), 4u);
    const int expected[] = {64, 32, 16, 8};
    for (int i = 0; i < 4; ++i) {
        EXPECT_EQ(b.features[i].height(), expected[i]);
        EXPECT_EQ(b.features[i].width(), expected[i]);
    }
}

TEST(Forward, RejectsWrongInputSize) {
    auto net = build<double>(four_stage(), SkipSpec{}, 3);
    EXPECT_THROW(net.forward(Tensor<double>({1, 3, 32, 32})), ConfigError);
    EXPECT_THROW(net.forward(Tensor<double>({1, 1, 64, 64})), ConfigError);
}

TEST(Forward, BaselineLogitsAreUpsampledTopMap) {
    Rng rng(4);
    auto net = build<double>(four_stage(32, 20), SkipSpec{}, 5);
    const auto b = net.forward(random_tensor({2, 3, 32, 32}, rng));
    const auto expected = upsample(b.z_top, 20, 20, UpsampleMode::bilinear);
    EXPECT_EQ(b.merged.values(), expected.values());
}

TEST(Forward, ZeroSkipBranchMatchesBaseline) {
    Rng rng(5);
    for (int tap : {0, 1, 2, 3}) {
        auto base = build<double>(four_stage(), SkipSpec{}, 11);
        auto skip = build<double>(four_stage(), SkipSpec{tap, 7}, 99);
        skip.copy_backbone_from(base);
        skip.zero_skip_branch();
        for (int i = 0; i < 10; ++i) {
            const auto images = random_tensor({1, 3, 64, 64}, rng);
            const auto a = base.forward(images).merged;
            const auto b = skip.forward(images).merged;
            for (std::size_t k = 0; k < a.size(); ++k) ASSERT_NEAR(a[k], b[k], 1e-12);
        }
    }
}

TEST(Forward, ResolutionLadder) {
    auto cfg = four_stage(64, 64);
    for (int tap : cfg.effective_taps()) {
        auto net = build<double>(cfg, SkipSpec{tap, 3}, 1);
        const auto b = net.forward(Tensor<double>({1, 3, 64, 64}, 0.25));
        EXPECT_EQ(b.z_skip.height(), 64 >> tap);
        EXPECT_EQ(b.z_skip.width(), 64 >> tap);
        EXPECT_EQ(b.z_skip.channels(), cfg.n_classes);
        EXPECT_EQ(b.z_top.channels(), cfg.n_classes);
        EXPECT_EQ(b.merged.height(), 64);
    }
}

TEST(Forward, ThirtyThreeCellTapIsUpsampledToSixtySevenGrid) {
    NetworkConfig cfg;
    cfg.input_size = 66;
    cfg.stage_channels = {3, 4};
    cfg.n_classes = 21;
    cfg.grid_size = 67;
    auto net = build<double>(cfg, SkipSpec{1, 3}, 2);
    Rng rng(3);
    const auto b = net.forward(random_tensor({1, 3, 66, 66}, rng));
    EXPECT_EQ(b.z_skip.height(), 33);
    EXPECT_EQ(b.merged.height(), 67);
    EXPECT_EQ(b.merged.width(), 67);
    const auto expected = add(upsample(b.z_top, 67, 67, UpsampleMode::bilinear), upsample(b.z_skip, 67, 67, UpsampleMode::bilinear));
    for (std::size_t k = 0; k < expected.size(); ++k) EXPECT_NEAR(b.merged[k], expected[k], 1e-12);
}

TEST(ExtractClassmaps, KeysDependOnSkip) {
    auto base = build<double>(four_stage(), SkipSpec{}, 1);
    auto skip = build<double>(four_stage(), SkipSpec{2, 3}, 1);
    const Tensor<double> img({1, 3, 64, 64}, 0.1);
    const auto mb = extract_classmaps(base.forward(img));
    const auto ms = extract_classmaps(skip.forward(img));
    EXPECT_EQ(mb.size(), 2u);
    EXPECT_TRUE(mb.contains("z_top") && mb.contains("merged"));
    EXPECT_EQ(ms.size(), 3u);
    EXPECT_TRUE(ms.contains("z_skip"));
    for (const auto& [name, t] : ms) EXPECT_EQ(t.channels(), 5) << name;
}

TEST(Backward, ZeroLogitGradGivesZeroParameterGrads) {
    auto net = build<double>(four_stage(32, 32), SkipSpec{1, 3}, 1);
    const auto b = net.forward(Tensor<double>({1, 3, 32, 32}, 0.3));
    const auto g = net.backward(b, Tensor<double>(b.merged.shape()));
    ASSERT_EQ(g.entries.size(), net.parameters().size());
    for (const auto& e : g.entries) {
        for (double v : e.weight_grad.data()) EXPECT_EQ(v, 0.0);
        for (double v : e.bias_grad) EXPECT_EQ(v, 0.0);
    }
}

TEST(Backward, BaselineGradsHaveNoSkipEntries) {
    auto net = build<double>(four_stage(32, 32), SkipSpec{}, 1);
    const auto b = net.forward(Tensor<double>({1, 3, 32, 32}, 0.3));
    const auto g = net.backward(b, Tensor<double>(b.merged.shape(), 1.0));
    EXPECT_EQ(g.find("skip.conv"), nullptr);
    EXPECT_EQ(g.find("skip.head"), nullptr);
    EXPECT_NE(g.find("top.head"), nullptr);
}

TEST(Backward, RejectsForeignBundleAndBadGradShape) {
    auto base = build<double>(four_stage(32, 32), SkipSpec{}, 1);
    auto skip = build<double>(four_stage(32, 32), SkipSpec{1, 3}, 1);
    const Tensor<double> img({1, 3, 32, 32}, 0.3);
    const auto b = base.forward(img);
    EXPECT_THROW(skip.backward(b, Tensor<double>(b.merged.shape())), ConfigError);
    EXPECT_THROW(base.backward(b, Tensor<double>({1, 5, 16, 16})), ConfigError);
}

TEST(Backward, TinyNetworkMatchesFiniteDifferences) {
    for (std::uint64_t seed : {1u, 2u}) {
        GradcheckOptions opt{seed, ""};
        for (const auto& spec : {SkipSpec{}, SkipSpec{0, 3}, SkipSpec{1, 5}}) {
            const auto e = check_network(opt, spec, "net");
            EXPECT_LE(e.max_rel_error, kGradTolerance64) << spec.tap_label() << " seed " << seed;
        }
    }
}

TEST(Convert, PreservesValuesAcrossPrecision) {
    auto net = build<double>(four_stage(32, 32), SkipSpec{2, 3}, 8);
    auto f = convert<float>(net);
    auto back = convert<double>(f);
    auto a = net.parameters();
    auto b = back.parameters();
    for (std::size_t i = 0; i < a.size(); ++i) {
        for (std::size_t k = 0; k < a[i].params->weights.size(); ++k) {
            EXPECT_FLOAT_EQ(static_cast<float>(a[i].params->weights[k]), static_cast<float>(b[i].params->weights[k]));
        }
    }
}
