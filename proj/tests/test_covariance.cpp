#include "test_util.hpp"

using namespace covarnav;
using namespace covarnav::testing;

namespace {

MatrixXd diag_cov(std::initializer_list<double> values) {
    VectorXd v(values.size());
    int i = 0;
    for (double x : values) v[i++] = x;
    return v.asDiagonal();
}

MatrixXd random_low_rank(int d, int rank, int cols, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g;
    MatrixXd A(d, rank), B(rank, cols);
    for (int i = 0; i < A.size(); ++i) A.data()[i] = g(rng);
    for (int i = 0; i < B.size(); ++i) B.data()[i] = g(rng);
    return A * B;
}

// Null space of X X^T from the SVD of X itself.
MatrixXd svd_null_space(const MatrixXd& X) {
    Eigen::JacobiSVD<MatrixXd> svd(X, Eigen::ComputeFullU);
    const auto& s = svd.singularValues();
    int r = 0;
    while (r < s.size() && s[r] > 1e-9 * s[0]) ++r;
    return svd.matrixU().rightCols(X.rows() - r);
}

MislabeledForgetSet relabeled_blobs(const ModelSnapshot<double>& m, const LabeledDataset& ds, int cf) {
    return mislabel_largest_wrong_logit(m, ds.filter([cf](int y) { return y == cf; }, "D_f"));
}

}  // namespace

TEST(Covariance, ShapeAndDuplicateSampleDoubling) {
    const MatrixXd X = random_low_rank(5, 3, 4, 1);
    const auto c = uncentered_covariance(X);
    EXPECT_EQ(c.S.rows(), 5);
    EXPECT_EQ(c.columns, 4);
    MatrixXd XX(5, 8);
    XX << X, X;
    EXPECT_LE((uncentered_covariance(XX).S - 2 * c.S).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Covariance, IdentityAndOuterProduct) {
    EXPECT_TRUE(uncentered_covariance(MatrixXd::Identity(4, 4)).S.isApprox(MatrixXd::Identity(4, 4)));
    VectorXd v(3);
    v << 1, -2, 3;
    const MatrixXd S = uncentered_covariance(v).S;
    EXPECT_LE((S - v * v.transpose()).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Covariance, MatchesNaiveColumnLoop) {
    const MatrixXd X = random_low_rank(6, 6, 9, 2);
    MatrixXd S = MatrixXd::Zero(6, 6);
    for (int m = 0; m < X.cols(); ++m)
        for (int i = 0; i < 6; ++i)
            for (int j = 0; j < 6; ++j) S(i, j) += X(i, m) * X(j, m);
    EXPECT_LE((uncentered_covariance(X).S - S).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Covariance, NonFiniteActivationsAreRejected) {
    MatrixXd X = MatrixXd::Ones(2, 2);
    X(1, 0) = std::nan("");
    EXPECT_THROW(uncentered_covariance(X), ValidationError);
}

TEST(NullBasis, EnergyThresholdExamples) {
    const auto a = approximate_null_basis(diag_cov({3, 1, 0, 0}), 1.0);
    EXPECT_EQ(a.k, 2);
    EXPECT_EQ(a.null_dim(), 2);
    EXPECT_EQ(approximate_null_basis(diag_cov({3, 1, 0, 0}), 0.8).k, 2);
    const auto b = approximate_null_basis(diag_cov({8, 1, 1}), 0.8);
    EXPECT_EQ(b.k, 1);
    EXPECT_DOUBLE_EQ(b.rho, 0.8);
    EXPECT_EQ(approximate_null_basis(diag_cov({8, 1, 1}), 0.0).k, 0);
}

TEST(NullBasis, ZeroCovarianceIsAllNull) {
    const auto b = approximate_null_basis(MatrixXd::Zero(4, 4), 1.0);
    EXPECT_EQ(b.null_dim(), 4);
}

TEST(NullBasis, InvalidInputsThrow) {
    EXPECT_THROW(approximate_null_basis(MatrixXd::Zero(2, 3), 1.0), ShapeError);
    EXPECT_THROW(approximate_null_basis(MatrixXd::Zero(2, 2), 1.5), ValidationError);
}

TEST(NullBasis, EnergyRatiosAreMonotoneAndEndAtOne) {
    const MatrixXd X = random_low_rank(12, 7, 30, 3);
    const auto b = approximate_null_basis(uncentered_covariance(X).S, 1.0);
    const auto rho = energy_ratios(b);
    for (std::size_t k = 1; k < rho.size(); ++k) EXPECT_GE(rho[k], rho[k - 1] - 1e-15);
    EXPECT_NEAR(rho.back(), 1.0, 1e-12);
    int prev = -1;
    for (double p : {0.0, 0.5, 0.9, 0.99, 1.0}) {
        const int k = approximate_null_basis(uncentered_covariance(X).S, p).k;
        EXPECT_GE(k, prev);
        prev = k;
    }
}

class NullSpaceOracle : public ::testing::TestWithParam<std::pair<int, int>> {};

TEST_P(NullSpaceOracle, AgreesWithSvdWithinPrincipalAngleTolerance) {
    const auto [d, rank] = GetParam();
    const MatrixXd X = random_low_rank(d, rank, 2 * d, 100 + d);
    const auto b = approximate_null_basis(uncentered_covariance(X).S, 1.0);
    const MatrixXd U = svd_null_space(X);
    ASSERT_EQ(b.null_dim(), U.cols());
    ASSERT_EQ(b.null_dim(), d - rank);
    // Cosines of the principal angles are the singular values of U1^T U2.
    const VectorXd cosines = (b.basis.transpose() * U).jacobiSvd().singularValues();
    for (int i = 0; i < cosines.size(); ++i) EXPECT_LT(std::acos(std::min(1.0, cosines[i])), 1e-5);
}

INSTANTIATE_TEST_SUITE_P(RankDeficient, NullSpaceOracle,
                         ::testing::Values(std::pair{5, 2}, std::pair{16, 9}, std::pair{32, 5}, std::pair{64, 40}));

TEST(Projection, IdentityWhenAllNullAndZeroWhenNoneNull) {
    const MatrixXd dW = random_low_rank(3, 3, 4, 5);
    const auto all = approximate_null_basis(MatrixXd::Zero(4, 4), 1.0);
    EXPECT_EQ(project_update(dW, all), dW);
    const auto none = approximate_null_basis(MatrixXd::Identity(4, 4), 1.0);
    EXPECT_EQ(project_update(dW, none).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_THROW(project_update(MatrixXd::Zero(3, 5), none), ShapeError);
}

TEST(Projection, AnnihilatesRankTwoColumnsInR5AndIsIdempotent) {
    const MatrixXd X = random_low_rank(5, 2, 10, 8);
    const auto b = approximate_null_basis(uncentered_covariance(X).S, 1.0);
    ASSERT_EQ(b.null_dim(), 3);
    const MatrixXd dW = random_low_rank(4, 4, 5, 9);
    const MatrixXd P = project_update(dW, b);
    EXPECT_LE((P * X).cwiseAbs().maxCoeff(), 1e-8 * X.cwiseAbs().maxCoeff() * dW.cwiseAbs().maxCoeff());
    EXPECT_LE((project_update(P, b) - P).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(LayerCovariances, StreamingChunksEqualOneShot) {
    const auto m = perturbed_model(2);
    const auto ds = make_blobs(9);
    const auto a = accumulate_covariances(m, ds, {}, 4);
    const auto b = accumulate_covariances(m, ds, {}, 1000);
    ASSERT_EQ(a.size(), b.size());
    for (const auto& [l, c] : a) {
        EXPECT_EQ(c.columns, b.at(l).columns);
        EXPECT_LE((c.S - b.at(l).S).cwiseAbs().maxCoeff(), 1e-9 * (1 + c.S.cwiseAbs().maxCoeff()));
    }
}

TEST(LayerCovariances, MatchActivationColumnsAndDeterministic) {
    const auto m = perturbed_model(3);
    const auto ds = make_blobs(4);
    const auto cov = accumulate_covariances(m, ds, {}, 128);
    const auto cap = forward_with_activations(m, ds.batch_range<double>(0, ds.size()).images);
    for (const auto& [l, c] : cov) {
        std::vector<ActivationRecord<double>> recs;
        for (const auto& r : cap.records)
            if (r.layer == l) recs.push_back(r);
        const MatrixXd X = layer_input_matrix<double>(recs, m.architecture().layers[l].kind);
        EXPECT_EQ(c.S.rows(), m.architecture().layers[l].input_dim());
        EXPECT_LE((c.S - X * X.transpose()).cwiseAbs().maxCoeff(), 1e-9 * (1 + c.S.cwiseAbs().maxCoeff()));
        EXPECT_NEAR(c.S.trace(), X.squaredNorm(), 1e-9 * (1 + X.squaredNorm()));
    }
    const auto again = accumulate_covariances(m, ds, {}, 128);
    for (const auto& [l, c] : cov) EXPECT_EQ(c.S, again.at(l).S);
}

TEST(LayerCovariances, RejectsNonProjectableLayerAndEmptyProxy) {
    const auto m = perturbed_model();
    EXPECT_THROW(accumulate_covariances(m, make_blobs(2), {1}, 8), ValidationError);
    EXPECT_THROW(accumulate_covariances(m, LabeledDataset{}, {}, 8), ValidationError);
}

TEST(ProjectionSet, SaveLoadRoundTrip) {
    TempDir dir;
    const auto ps = build_projection_set(perturbed_model(), make_blobs(2), CovarNavConfig{});
    save_projection_set(ps, dir / "proj.json");
    const auto back = load_projection_set(dir / "proj.json");
    EXPECT_EQ(back.source_fingerprint, ps.source_fingerprint);
    ASSERT_EQ(back.bases.size(), ps.bases.size());
    for (const auto& [l, b] : ps.bases) {
        EXPECT_EQ(back.bases.at(l).k, b.k);
        EXPECT_EQ(back.bases.at(l).basis, b.basis);
    }
}

TEST(Navigate, ProjectedUnlearningPreservesProxyActivationsExactly) {
    const auto ds = make_blobs(20, 3, 1, 6, 4);
    TrainConfig tc;
    tc.epochs = 4;
    tc.batch_size = 16;
    const auto model = train_original<double>(ds, make_conv_net({1, 6, 6}, 3, {8, 12, 16}), tc).model;
    const auto proxy = make_blobs(2, 3, 1, 6, 77);  // 6 samples: every layer keeps a null space
    CovarNavConfig cfg;
    cfg.epochs = 5;
    cfg.lr = 1e-2;
    const auto out = navigate(model, relabeled_blobs(model, ds, 1), proxy, cfg);
    ASSERT_FALSE(out.projection->all_empty());
    const auto before = predict_logits(model, proxy), after = predict_logits(out.model, proxy);
    EXPECT_LE((before - after).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_FALSE(out.model.same_parameters(model));
    // Biases and BN stay at their trained values.
    for (std::size_t l = 0; l < model.state().params.size(); ++l) {
        EXPECT_EQ(out.model.state().params[l].bias, model.state().params[l].bias);
        if (model.architecture().layers[l].kind == LayerKind::batch_norm)
            EXPECT_EQ(out.model.state().params[l].weight, model.state().params[l].weight);
        EXPECT_EQ(out.model.state().params[l].running_mean, model.state().params[l].running_mean);
    }
}

TEST(Navigate, ProjectedUpdatesAnnihilateCollectedColumnsPerLayer) {
    const auto model = perturbed_model(5);
    const auto proxy = make_blobs(1, 3, 1, 6, 31);
    const auto ds = make_blobs(6, 3);
    CovarNavConfig cfg;
    cfg.epochs = 2;
    cfg.lr = 1e-2;
    const auto out = navigate(model, relabeled_blobs(model, ds, 0), proxy, cfg);
    const auto cap = forward_with_activations(model, proxy.batch_range<double>(0, proxy.size()).images);
    for (const auto& [l, b] : out.projection->bases) {
        std::vector<ActivationRecord<double>> recs;
        for (const auto& r : cap.records)
            if (r.layer == l) recs.push_back(r);
        const MatrixXd X = layer_input_matrix<double>(recs, model.architecture().layers[l].kind);
        const MatrixXd dW = out.model.state().params[l].weight - model.state().params[l].weight;
        const double scale = dW.norm() * X.norm();
        if (scale == 0) continue;
        EXPECT_LE((dW * X).norm() / scale, 1e-5) << "layer " << l;
    }
}

TEST(Navigate, ZeroEpochsIsIdentity) {
    const auto model = perturbed_model(1);
    CovarNavConfig cfg;
    cfg.epochs = 0;
    const auto out = navigate(model, relabeled_blobs(model, make_blobs(3), 2), make_blobs(1), cfg);
    EXPECT_TRUE(out.model.same_parameters(model));
}

TEST(Navigate, FullRankProxyReportsCannotForget) {
    const auto model = perturbed_model(1);
    const auto proxy = make_blobs(60, 3, 1, 6, 12);
    const auto out = navigate(model, relabeled_blobs(model, make_blobs(3), 2), proxy, CovarNavConfig{});
    if (!out.projection->all_empty()) GTEST_SKIP() << "proxy did not span every layer input";
    EXPECT_TRUE(out.model.same_parameters(model));
    ASSERT_EQ(out.report.diagnostics.size(), 1u);
    EXPECT_NE(out.report.diagnostics[0].find("cannot forget"), std::string::npos);
}

TEST(Navigate, SeedDeterministic) {
    const auto model = perturbed_model(2);
    const auto rel = relabeled_blobs(model, make_blobs(5), 1);
    CovarNavConfig cfg;
    cfg.epochs = 2;
    cfg.p = 0.95;
    const auto a = navigate(model, rel, make_blobs(2), cfg), b = navigate(model, rel, make_blobs(2), cfg);
    EXPECT_TRUE(a.model.same_parameters(b.model));
}

TEST(Navigate, ForgettingLossDoesNotRiseOverAWarmStart) {
    const auto ds = make_blobs(20, 3);
    TrainConfig tc;
    tc.epochs = 5;
    tc.batch_size = 16;
    const auto model = train_original<double>(ds, tiny_arch(), tc).model;
    const auto rel = relabeled_blobs(model, ds, 0);
    CovarNavConfig cfg;
    cfg.epochs = 10;
    cfg.p = 0.9;
    cfg.lr = 1e-2;
    const auto out = navigate(model, rel, make_blobs(3, 3, 1, 6, 8), cfg);
    EXPECT_LT(forgetting_loss(out.model, rel), forgetting_loss(model, rel));
}
