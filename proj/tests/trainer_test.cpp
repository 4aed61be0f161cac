#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "skipseg/dataset.hpp"
#include "skipseg/trainer.hpp"

using namespace skipseg;

namespace {

NetworkConfig tiny_config() {
    NetworkConfig cfg;
    cfg.input_size = 16;
    cfg.stage_channels = {8, 16};
    cfg.n_classes = 4;
    cfg.grid_size = 16;
    return cfg;
}

Dataset tiny_data(int count, std::uint64_t seed = 3) { return generate(seed, count, 3, 16); }

std::vector<float> flat(Network<float>& net) {
    std::vector<float> out;
    for (auto& np : net.parameters()) {
        out.insert(out.end(), np.params->weights.data().begin(), np.params->weights.data().end());
        out.insert(out.end(), np.params->bias.begin(), np.params->bias.end());
    }
    return out;
}

}  // namespace

TEST(SgdMomentum, PlainGradientDescentWithoutMomentum) {
    std::vector<double> w{1.0, -2.0, 0.5}, g{0.1, 0.2, -0.3}, v;
    TrainConfig cfg;
    cfg.learning_rate = 0.5;
    cfg.momentum = 0.0;
    sgd_momentum_step<double>(w, g, v, cfg);
    EXPECT_DOUBLE_EQ(w[0], 1.0 - 0.05);
    EXPECT_DOUBLE_EQ(w[1], -2.0 - 0.1);
    EXPECT_DOUBLE_EQ(w[2], 0.5 + 0.15);
}

TEST(SgdMomentum, ZeroGradientAndVelocityIsNoop) {
    std::vector<double> w{1.0, 2.0}, g{0.0, 0.0}, v{0.0, 0.0};
    TrainConfig cfg;
    sgd_momentum_step<double>(w, g, v, cfg);
    EXPECT_EQ(w, (std::vector<double>{1.0, 2.0}));
}

TEST(SgdMomentum, TwoStepClosedForm) {
    // v1 = g, w1 = w0 - lr g; v2 = mu g + g, w2 = w1 - lr (1 + mu) g  =>  w2 - w0 = -lr g (2 + mu)
    for (double mu : {0.0, 0.5, 0.9}) {
        std::vector<double> w{0.3, -1.7}, v;
        const std::vector<double> g{0.25, -0.75}, w0 = w;
        TrainConfig cfg;
        cfg.learning_rate = 0.1;
        cfg.momentum = mu;
        sgd_momentum_step<double>(w, g, v, cfg);
        sgd_momentum_step<double>(w, g, v, cfg);
        for (std::size_t i = 0; i < w.size(); ++i) EXPECT_NEAR(w[i] - w0[i], -0.1 * g[i] * (2 + mu), 1e-12);
    }
}

TEST(SgdMomentum, WeightDecayEntersVelocity) {
    std::vector<double> w{2.0}, g{0.0}, v;
    TrainConfig cfg;
    cfg.learning_rate = 0.1;
    cfg.weight_decay = 0.5;
    sgd_momentum_step<double>(w, g, v, cfg);
    EXPECT_DOUBLE_EQ(w[0], 2.0 - 0.1 * 0.5 * 2.0);
}

TEST(TrainConfig, Validation) {
    TrainConfig cfg;
    cfg.momentum = 1.0;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = {};
    cfg.learning_rate = -1;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = {};
    cfg.batch_size = 0;
    EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(LabelToGrid, GridSizedMaskIsUnchanged) {
    const auto ds = tiny_data(1);
    EXPECT_EQ(label_to_grid(ds.samples[0].mask, 16), ds.samples[0].mask);
}

TEST(LabelToGrid, UniformMask) {
    const LabelImage mask(12, 12, 7);
    const auto g = label_to_grid(mask, 4);
    for (int l : g.labels) EXPECT_EQ(l, 7);
}

TEST(LabelToGrid, TieGoesToSmallestLabel) {
    LabelImage mask(4, 4, 3);
    // top-left box holds {0, 0, 1, 1}
    mask.at(0, 0) = 1;
    mask.at(0, 1) = 0;
    mask.at(1, 0) = 0;
    mask.at(1, 1) = 1;
    const auto g = label_to_grid(mask, 2);
    EXPECT_EQ(g.at(0, 0), 0);
    EXPECT_EQ(g.at(1, 1), 3);
}

TEST(LabelToGrid, IgnoredPixelsDoNotVote) {
    LabelImage mask(2, 4, kIgnoreLabel);
    mask.at(0, 0) = 2;  // box 0: one vote for 2, three ignored
    const auto g = label_to_grid(mask, 2);
    EXPECT_EQ(g.at(0, 0), 2);
    EXPECT_EQ(g.at(0, 1), kIgnoreLabel);
}

TEST(LabelToGrid, MaskSmallerThanGridIsRejected) {
    EXPECT_THROW(label_to_grid(LabelImage(8, 8), 16), ConfigError);
}

TEST(LabelToGrid, MajorityLabelComesFromItsBox) {
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        const int size = rng.uniform_int(8, 40), grid = rng.uniform_int(1, 8);
        LabelImage mask(size, size);
        for (auto& l : mask.labels) l = rng.uniform() < 0.1 ? kIgnoreLabel : rng.uniform_int(0, 4);
        const auto g = label_to_grid(mask, grid);
        for (int gy = 0; gy < grid; ++gy)
            for (int gx = 0; gx < grid; ++gx) {
                std::set<int> present;
                for (int y = gy * size / grid; y < (gy + 1) * size / grid; ++y)
                    for (int x = gx * size / grid; x < (gx + 1) * size / grid; ++x)
                        if (mask.at(y, x) != kIgnoreLabel) present.insert(mask.at(y, x));
                const int l = g.at(gy, gx);
                if (present.empty()) EXPECT_EQ(l, kIgnoreLabel);
                else EXPECT_TRUE(present.contains(l));
            }
    }
}

TEST(Train, ZeroLearningRateLeavesParametersUnchanged) {
    const auto data = prepare<float>(tiny_data(4), 16);
    auto net = build<float>(tiny_config(), SkipSpec{0, 3}, 1);
    const auto before = flat(net);
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 2;
    cfg.learning_rate = 0.0;
    train(net, data, cfg);
    EXPECT_EQ(flat(net), before);
}

TEST(Train, SameSeedGivesIdenticalLog) {
    const auto data = prepare<float>(tiny_data(6), 16);
    const auto val = prepare<float>(tiny_data(3, 9), 16);
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 4;
    cfg.seed = 5;
    auto a = build<float>(tiny_config(), SkipSpec{1, 3}, 2);
    auto b = build<float>(tiny_config(), SkipSpec{1, 3}, 2);
    const auto la = train(a, data, cfg, &val);
    const auto lb = train(b, data, cfg, &val);
    EXPECT_EQ(la, lb);
    EXPECT_EQ(flat(a), flat(b));
    ASSERT_EQ(la.epochs.size(), 3u);
    EXPECT_TRUE(la.epochs.back().validation.has_value());
}

TEST(Train, OverfitsSingleSample) {
    const auto data = prepare<float>(tiny_data(1), 16);
    auto net = build<float>(tiny_config(), SkipSpec{0, 3}, 1);
    TrainConfig cfg;
    cfg.epochs = 200;
    cfg.batch_size = 1;
    const auto log = train(net, data, cfg);
    ASSERT_EQ(log.step_losses.size(), 200u);
    EXPECT_LT(log.step_losses.back(), log.step_losses.front());
    EXPECT_LT(log.step_losses.back(), 0.1 * std::log(4.0));
}

TEST(Train, LossDecreasesOnFixedBatchAcrossSeeds) {
    const auto data = prepare<float>(tiny_data(8), 16);
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        auto net = build<float>(tiny_config(), SkipSpec{}, seed);
        TrainConfig cfg;
        cfg.epochs = 50;
        cfg.batch_size = 8;  // full batch
        cfg.learning_rate = 0.01;
        cfg.seed = seed;
        const auto log = train(net, data, cfg);
        EXPECT_LT(log.step_losses.back(), log.step_losses.front()) << "seed " << seed;
    }
}

TEST(Train, NonFiniteLossIsReported) {
    const auto data = prepare<float>(tiny_data(4), 16);
    auto net = build<float>(tiny_config(), SkipSpec{}, 1);
    TrainConfig cfg;
    cfg.epochs = 20;
    cfg.batch_size = 2;
    cfg.learning_rate = 1e30;
    EXPECT_THROW(train(net, data, cfg), DivergenceError);
}

TEST(Train, EmptyDatasetAndWrongGridAreRejected) {
    auto net = build<float>(tiny_config(), SkipSpec{}, 1);
    EXPECT_THROW(train(net, PreparedSet<float>{}, TrainConfig{}), ConfigError);
    const auto wrong = prepare<float>(tiny_data(2), 8);
    EXPECT_THROW(train(net, wrong, TrainConfig{}), ConfigError);
}

TEST(TrainLog, TsvColumns) {
    TrainLog log;
    log.epochs.push_back({1, 1.25, std::nullopt});
    log.epochs.push_back({2, 0.5, MetricSummary{0.9, 0.8, 0.7}});
    EXPECT_EQ(log.to_tsv(), "epoch\tmean_loss\tpixel_acc\tmean_acc\tmean_iou\n1\t1.25\tNA\tNA\tNA\n2\t0.5\t0.9\t0.8\t0.7\n");
}
