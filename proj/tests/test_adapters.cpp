#include <cmath>
#include <cstdio>

#include <gtest/gtest.h>

#include "testutil.hpp"
#include "wlora/adapters.hpp"
#include "wlora/checkpoint.hpp"
#include "wlora/models.hpp"

using namespace wlora;

namespace {

AdapterState random_trained_adapter(std::size_t d, std::size_t k, std::size_t r, Rng& rng) {
    AdapterState a = AdapterState::init(0, d, k, r, rng, 32.0, 0.0, 1.0);
    // give B nonzero content, as after some training
    for (auto& v : a.b.mutable_data()) {
        v = rng.normal();
    }
    return a;
}

double forward_value_diff(const FrozenBase& base, const AdapterState& lhs,
                          const AdapterState& rhs, Rng& rng) {
    Tensor x = Tensor::randn({base.k()}, rng);
    Tensor y0 = lora_forward(base, lhs, x);
    Tensor y1 = lora_forward(base, rhs, x);
    return testutil::max_abs_diff(y0.data(), y1.data());
}

}  // namespace

TEST(LoraForward, FreshAdapterIsExactlyBasePath) {
    Rng rng(1);
    FrozenBase base(Tensor::randn({4, 3}, rng));
    AdapterState adapter = AdapterState::init(0, 4, 3, 2, rng);
    Tensor x = Tensor::randn({3}, rng);
    Tensor y = lora_forward(base, adapter, x);
    Tensor wx = matmul(base.w, x);
    EXPECT_EQ(y.data(), wx.data());  // B = 0 so the branch contributes exact zero
}

TEST(LoraForward, HandComputedBranch) {
    FrozenBase base(Tensor::zeros({2, 2}));
    Rng rng(2);
    AdapterState adapter = AdapterState::init(0, 2, 2, 1, rng, /*alpha=*/1.0, 0.0);
    adapter.a.mutable_data() = {1.0, 0.0};
    adapter.b.mutable_data() = {2.0, 0.0};
    Tensor x = Tensor::from({2}, {1.0, 0.0});
    Tensor y = lora_forward(base, adapter, x);
    EXPECT_DOUBLE_EQ(y.at(0), 2.0);
    EXPECT_DOUBLE_EQ(y.at(1), 0.0);
}

TEST(LoraForward, MatchesMaterializedProductOracle) {
    Rng rng(3);
    for (int rep = 0; rep < 10; ++rep) {
        FrozenBase base(Tensor::randn({6, 5}, rng));
        AdapterState adapter = random_trained_adapter(6, 5, 3, rng);
        Tensor x = Tensor::randn({5}, rng);
        Tensor y = lora_forward(base, adapter, x);

        // Dense oracle: W x + (alpha/r) (A B) x with A B materialized first.
        linalg::Mat ab = adapter.product();
        std::vector<double> expect(6, 0.0);
        for (std::size_t i = 0; i < 6; ++i) {
            for (std::size_t j = 0; j < 5; ++j) {
                expect[i] += (base.w.at(i, j) + adapter.scale() * ab(i, j)) * x.at(j);
            }
        }
        EXPECT_LE(testutil::max_abs_diff(y.data(), expect), 1e-10);
    }
}

TEST(LoraForward, BaseReceivesNoGradient) {
    Rng rng(4);
    FrozenBase base(Tensor::randn({4, 3}, rng));
    AdapterState adapter = random_trained_adapter(4, 3, 2, rng);
    Tensor x = Tensor::randn({3}, rng);
    backward(sum(lora_forward(base, adapter, x)));
    EXPECT_FALSE(base.w.has_grad());
    EXPECT_TRUE(adapter.b.has_grad());
}

TEST(WeightedForward, GateOneIsBitwiseLora) {
    Rng rng(5);
    FrozenBase base(Tensor::randn({5, 4}, rng));
    AdapterState adapter = random_trained_adapter(5, 4, 2, rng);
    Tensor gates = Tensor::full({3}, 1.0, true);
    Tensor x = Tensor::randn({4}, rng);
    Tensor gated = weighted_forward(base, adapter, gates, 1, x);
    Tensor plain = lora_forward(base, adapter, x);
    EXPECT_EQ(gated.data(), plain.data());
}

TEST(WeightedForward, DisconnectedAdapterSkipsBranch) {
    Rng rng(6);
    FrozenBase base(Tensor::randn({4, 4}, rng));
    AdapterState adapter = random_trained_adapter(4, 4, 2, rng);
    adapter.active = false;  // frozen gate at zero disconnects the adapter
    Tensor gates = Tensor::zeros({1});
    Tensor x = Tensor::randn({4}, rng);
    adapter.a.zero_grad();
    adapter.b.zero_grad();
    Tensor y = weighted_forward(base, adapter, gates, 0, x);
    Tensor wx = matmul(base.w, x);
    EXPECT_EQ(y.data(), wx.data());
    backward(sum(y));
    for (double g : adapter.a.grad()) {
        EXPECT_EQ(g, 0.0);
    }
    for (double g : adapter.b.grad()) {
        EXPECT_EQ(g, 0.0);
    }
}

TEST(WeightedForward, HalfGateScalesBranch) {
    FrozenBase base(Tensor::zeros({2, 2}));
    Rng rng(7);
    AdapterState adapter = AdapterState::init(0, 2, 2, 1, rng, 1.0, 0.0);
    adapter.a.mutable_data() = {1.0, 0.0};
    adapter.b.mutable_data() = {2.0, 0.0};
    Tensor gates = Tensor::from({1}, {0.5});
    Tensor x = Tensor::from({2}, {1.0, 0.0});
    Tensor y = weighted_forward(base, adapter, gates, 0, x);
    EXPECT_DOUBLE_EQ(y.at(0), 1.0);
    EXPECT_DOUBLE_EQ(y.at(1), 0.0);
}

TEST(WeightedForward, GradientMatchesFiniteDifferences) {
    Rng rng(99);
    for (int rep = 0; rep < 5; ++rep) {
        FrozenBase base(Tensor::randn({5, 4}, rng));
        AdapterState adapter = random_trained_adapter(5, 4, 2, rng);
        Tensor gates = Tensor::randn({3}, rng, 1.0, true);
        Tensor x = Tensor::randn({4}, rng);
        Tensor target = Tensor::randn({5}, rng);
        const double err = testutil::max_grad_rel_err(
            {adapter.a, adapter.b, gates},
            [&] { return mse(weighted_forward(base, adapter, gates, 1, x), target); });
        EXPECT_LE(err, 1e-6);
    }
}

TEST(ExpandGaussian, ProductPreservedExactly) {
    Rng rng(8);
    AdapterState a = random_trained_adapter(6, 4, 1, rng);
    AdapterState e = expand_rank_gaussian(a, 2, rng);
    linalg::Mat p0 = a.product();
    linalg::Mat p1 = e.product();
    EXPECT_EQ(p0.a, p1.a);  // the zero block annihilates the new columns
    EXPECT_EQ(e.rank, 2u);
    EXPECT_EQ(e.scale(), a.alpha / 2.0);
}

TEST(ExpandGaussian, NewBRowsAreExactlyZero) {
    Rng rng(9);
    AdapterState a = random_trained_adapter(5, 7, 2, rng);
    AdapterState e = expand_rank_gaussian(a, 5, rng);
    for (std::size_t i = 2; i < 5; ++i) {
        for (std::size_t j = 0; j < 7; ++j) {
            EXPECT_EQ(e.b.at(i, j), 0.0);
        }
    }
}

TEST(ExpandGaussian, ForwardEqualWhenAlphaHeldProportional) {
    Rng rng(10);
    for (int rep = 0; rep < 10; ++rep) {
        FrozenBase base(Tensor::randn({6, 4}, rng));
        AdapterState a = random_trained_adapter(6, 4, 2, rng);
        AdapterState e = expand_rank_gaussian(a, 5, rng, /*keep_effective_scale=*/true);
        EXPECT_LE(forward_value_diff(base, a, e, rng), 1e-12);
    }
}

TEST(ExpandGaussian, RankMustGrow) {
    Rng rng(11);
    AdapterState a = random_trained_adapter(4, 4, 2, rng);
    EXPECT_THROW(expand_rank_gaussian(a, 2, rng), ContractError);
    EXPECT_THROW(expand_rank_gaussian(a, 1, rng), ContractError);
}

TEST(ExpandQr, FreshAdapterStaysZero) {
    Rng rng(12);
    AdapterState a = AdapterState::init(0, 8, 5, 2, rng, 32.0, 0.0, 1.0);  // B = 0
    AdapterState e = expand_rank_qr(a, 4, rng);
    linalg::Mat p1 = e.product();
    for (double v : p1.a) {
        EXPECT_EQ(v, 0.0);
    }
}

TEST(ExpandQr, ProductPreservedToTolerance) {
    Rng rng(13);
    for (int rep = 0; rep < 10; ++rep) {
        AdapterState a = random_trained_adapter(8, 6, 2, rng);
        AdapterState e = expand_rank_qr(a, 4, rng);
        linalg::Mat p0 = a.product();
        linalg::Mat p1 = e.product();
        double num = 0.0;
        for (std::size_t i = 0; i < p0.a.size(); ++i) {
            num += (p1.a[i] - p0.a[i]) * (p1.a[i] - p0.a[i]);
        }
        EXPECT_LE(std::sqrt(num) / linalg::frobenius_norm(p0), 1e-10);
    }
}

TEST(ExpandQr, NewColumnsOrthogonalToRangeOfA) {
    Rng rng(14);
    AdapterState a = random_trained_adapter(8, 6, 2, rng);
    AdapterState e = expand_rank_qr(a, 4, rng);
    // Q_A is the first r columns of the expanded A.
    for (std::size_t q_col = 0; q_col < 2; ++q_col) {
        for (std::size_t new_col = 2; new_col < 4; ++new_col) {
            double dot = 0.0;
            for (std::size_t i = 0; i < 8; ++i) {
                dot += e.a.at(i, q_col) * e.a.at(i, new_col);
            }
            EXPECT_LE(std::abs(dot), 1e-10);
        }
    }
}

TEST(ExpandQr, RankDeficientAdvisesGaussianScheme) {
    Rng rng(15);
    AdapterState a = random_trained_adapter(6, 4, 2, rng);
    // make column 1 a copy of column 0
    for (std::size_t i = 0; i < 6; ++i) {
        a.a.mutable_data()[i * 2 + 1] = a.a.at(i, 0);
    }
    try {
        expand_rank_qr(a, 4, rng);
        FAIL() << "expected DegeneracyError";
    } catch (const DegeneracyError& e) {
        EXPECT_NE(std::string(e.what()).find("Gaussian"), std::string::npos);
    }
}

TEST(Expansion, ValuePreservationOverManyRandomInstances) {
    Rng rng(16);
    for (int rep = 0; rep < 100; ++rep) {
        const std::size_t d = 4 + rng.uniform_int(8);
        const std::size_t k = 4 + rng.uniform_int(8);
        const std::size_t r = 1 + rng.uniform_int(std::min(d, k) - 1);
        const std::size_t r_new = r + 1 + rng.uniform_int(3);
        AdapterState a = random_trained_adapter(d, k, r, rng);
        AdapterState g = expand_rank_gaussian(a, r_new, rng);
        EXPECT_LE(expansion_residual(a, g), 1e-10);
        AdapterState q = expand_rank_qr(a, r_new, rng);
        EXPECT_LE(expansion_residual(a, q), 1e-10);
    }
}

TEST(ParamCount, MatchesClosedForm) {
    Rng rng(17);
    AdapterState big = AdapterState::init(0, 768, 768, 8, rng);
    EXPECT_EQ(adapter_param_count(big), 12288);

    AdapterState small = AdapterState::init(0, 4, 6, 2, rng);
    EXPECT_EQ(adapter_param_count(small), 20);

    small.active = false;
    EXPECT_EQ(adapter_param_count(small), 0);
}

TEST(AdapterState, RankBoundEnforced) {
    Rng rng(18);
    EXPECT_THROW(AdapterState::init(0, 4, 6, 5, rng), ContractError);
    EXPECT_THROW(AdapterState::init(0, 4, 6, 0, rng), ContractError);
}

TEST(FrozenBase, BitwiseUnchangedByAdapterTraining) {
    Rng rng(19);
    FrozenBase base(Tensor::randn({5, 5}, rng));
    const auto snapshot = base.w.data();
    AdapterState adapter = random_trained_adapter(5, 5, 2, rng);
    for (int step = 0; step < 25; ++step) {
        adapter.a.zero_grad();
        adapter.b.zero_grad();
        Tensor x = Tensor::randn({5}, rng);
        backward(sum(lora_forward(base, adapter, x)));
        for (std::size_t i = 0; i < adapter.a.numel(); ++i) {
            adapter.a.mutable_data()[i] -= 0.01 * adapter.a.grad()[i];
        }
        for (std::size_t i = 0; i < adapter.b.numel(); ++i) {
            adapter.b.mutable_data()[i] -= 0.01 * adapter.b.grad()[i];
        }
    }
    EXPECT_EQ(base.w.data(), snapshot);
}

TEST(Dropout, OffMakesForwardDeterministic) {
    Rng rng(20);
    FrozenBase base(Tensor::randn({4, 4}, rng));
    AdapterState adapter = random_trained_adapter(4, 4, 2, rng);
    adapter.dropout_p = 0.0;
    Tensor x = Tensor::randn({4}, rng);
    Rng d1(9), d2(1234);
    ForwardCtx c1{true, &d1}, c2{true, &d2};
    Tensor y1 = lora_forward(base, adapter, x, c1);
    Tensor y2 = lora_forward(base, adapter, x, c2);
    EXPECT_EQ(y1.data(), y2.data());
}

TEST(Dropout, MaskExpectationMatchesDeterministicBranch) {
    Rng rng(21);
    FrozenBase base(Tensor::zeros({4, 4}));
    AdapterState adapter = random_trained_adapter(4, 4, 2, rng);
    adapter.dropout_p = 0.25;
    Tensor x = Tensor::randn({4}, rng);

    ForwardCtx eval_ctx;
    Tensor expected = lora_forward(base, adapter, x, eval_ctx);

    constexpr int kMasks = 10000;
    Rng mask_rng(22);
    std::vector<double> mean(4, 0.0);
    std::vector<double> sq(4, 0.0);
    for (int m = 0; m < kMasks; ++m) {
        ForwardCtx ctx{true, &mask_rng};
        Tensor y = lora_forward(base, adapter, x, ctx);
        for (std::size_t i = 0; i < 4; ++i) {
            mean[i] += y.at(i);
            sq[i] += y.at(i) * y.at(i);
        }
    }
    for (std::size_t i = 0; i < 4; ++i) {
        mean[i] /= kMasks;
        const double var = sq[i] / kMasks - mean[i] * mean[i];
        const double sigma_of_mean = std::sqrt(std::max(var, 1e-30) / kMasks);
        EXPECT_NEAR(mean[i], expected.at(i), 3.0 * sigma_of_mean + 1e-12);
    }
}

TEST(Checkpoint, RoundTripsAdaptersAndGates) {
    Rng rng(23);
    MlpConfig mc;
    mc.n_layers = 3;
    mc.in_dim = mc.hidden = 5;
    mc.out_dim = 4;
    MlpModel model(mc, 31);
    AdapterBank bank = attach_adapters(model, {0, 1, 2}, 2, true, rng, 2);
    for (auto& a : bank.adapters) {
        for (auto& v : a.b.mutable_data()) {
            v = rng.normal();
        }
    }
    bank.gates->omega().mutable_data() = {0.0, 0.7, 0.0};
    bank.gates->freeze_and_disconnect(bank.adapters);

    const std::string path = ::testing::TempDir() + "/ckpt.json";
    save_checkpoint(bank, path);
    AdapterBank loaded = load_checkpoint(path);

    ASSERT_EQ(loaded.adapters.size(), bank.adapters.size());
    for (std::size_t i = 0; i < bank.adapters.size(); ++i) {
        EXPECT_EQ(loaded.adapters[i].a.data(), bank.adapters[i].a.data());
        EXPECT_EQ(loaded.adapters[i].b.data(), bank.adapters[i].b.data());
        EXPECT_EQ(loaded.adapters[i].active, bank.adapters[i].active);
        EXPECT_EQ(loaded.adapters[i].rank, bank.adapters[i].rank);
    }
    ASSERT_TRUE(loaded.gated());
    EXPECT_EQ(loaded.gates->omega().data(), bank.gates->omega().data());
    EXPECT_EQ(loaded.gates->active_set(), bank.gates->active_set());
}
