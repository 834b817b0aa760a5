#include <gtest/gtest.h>

#include "deepscm/optim.hpp"

using namespace deepscm;

namespace {

void set_grad(Tensor& p, double g) {
    p.zero_grad();
    backward(scale(sum(p), g));
}

} // namespace

TEST(Adam, ZeroGradientLeavesParamsAndAdvancesStep) {
    Tensor p = Tensor::from({2}, {1.0, -2.0}, true);
    Adam adam({p});
    set_grad(p, 0.0);
    adam.step(1e-3);
    EXPECT_EQ(p.values(), (std::vector<double>{1.0, -2.0}));
    EXPECT_EQ(adam.state().t, 1);
}

TEST(Adam, FirstStepMagnitudeIsLearningRate) {
    Tensor p = Tensor::scalar(0.0, true);
    Adam adam({p});
    set_grad(p, 0.5);
    adam.step(1e-3);
    // m̂ = g, v̂ = g², so the step is lr·g/(|g|+eps).
    EXPECT_NEAR(p[0], -1e-3 * 0.5 / (0.5 + 1e-8), 1e-15);
}

TEST(Adam, ConstantGradientMovesMonotonically) {
    Tensor p = Tensor::scalar(0.0, true);
    Adam adam({p});
    double prev = p[0];
    for (int i = 0; i < 100; ++i) {
        set_grad(p, -0.3);
        adam.step(1e-2);
        EXPECT_GT(p[0], prev);
        prev = p[0];
    }
}

TEST(Adam, NonPositiveLearningRateThrows) {
    Tensor p = Tensor::scalar(0.0, true);
    Adam adam({p});
    EXPECT_THROW(adam.step(0.0), ContractError);
}

TEST(Adam, MomentsStayNonNegativeVariance) {
    Tensor p = Tensor::from({3}, {0, 0, 0}, true);
    Adam adam({p});
    for (int i = 0; i < 5; ++i) {
        set_grad(p, i % 2 ? 1.0 : -2.0);
        adam.step(1e-3);
    }
    for (double v : adam.state().v[0]) EXPECT_GE(v, 0.0);
    EXPECT_EQ(adam.state().m[0].size(), 3u);
}

TEST(LrSchedule, CycleStartMidpointAndRestart) {
    const LrSchedule s{2e-4, 1e-5, 10.0, 2.0};
    EXPECT_DOUBLE_EQ(lr_at(0.0, s), 2e-4);
    EXPECT_NEAR(lr_at(5.0, s), (2e-4 + 1e-5) / 2.0, 1e-18);
    EXPECT_DOUBLE_EQ(lr_at(10.0, s), 2e-4);
    EXPECT_NEAR(lr_at(20.0, s), (2e-4 + 1e-5) / 2.0, 1e-18);  // second cycle lasts 20
    EXPECT_DOUBLE_EQ(lr_at(30.0, s), 2e-4);
}

TEST(LrSchedule, BoundedEverywhere) {
    const LrSchedule s{1e-3, 1e-5, 7.0, 1.5};
    for (double e = 0.0; e < 200.0; e += 0.37) {
        const double lr = lr_at(e, s);
        EXPECT_GE(lr, s.eta_min);
        EXPECT_LE(lr, s.eta_max);
    }
}

TEST(LrSchedule, NegativeEpochThrows) {
    EXPECT_THROW(lr_at(-1.0, LrSchedule{}), ContractError);
}
