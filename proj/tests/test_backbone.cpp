#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "ltood/backbone.hpp"
#include "ltood/errors.hpp"
#include "test_util.hpp"

using namespace ltood;

namespace {

Mat mat2(std::initializer_list<std::initializer_list<double>> rows) {
    Mat m(static_cast<int>(rows.size()), static_cast<int>(rows.begin()->size()));
    int i = 0;
    for (const auto& row : rows) {
        int j = 0;
        for (double v : row) m(i, j++) = v;
        ++i;
    }
    return m;
}

/// Independent per-layer statistics of the post-normalization (pre-affine)
/// activations in EVAL mode; plain loops, no reuse of the forward pass.
struct XhatStats {
    std::vector<double> mean, var;
};
std::vector<XhatStats> bn_xhat_stats(const BackboneModel& model, const EmbeddingMatrix& data) {
    std::vector<XhatStats> out;
    Mat a = widen(data);
    for (int l = 0; l < model.hidden_layers(); ++l) {
        const auto& aff = model.affines[l];
        const auto& bn = model.bns[l];
        Mat z(a.rows, aff.w.cols);
        for (int i = 0; i < a.rows; ++i) {
            for (int j = 0; j < aff.w.cols; ++j) {
                double acc = aff.b[j];
                for (int k = 0; k < aff.w.rows; ++k) acc += a(i, k) * aff.w(k, j);
                z(i, j) = acc;
            }
        }
        XhatStats stats;
        stats.mean.assign(z.cols, 0.0);
        stats.var.assign(z.cols, 0.0);
        Mat act(z.rows, z.cols);
        for (int j = 0; j < z.cols; ++j) {
            const double denom = std::sqrt(bn.running_var[j] + bn.eps);
            double mu = 0.0;
            for (int i = 0; i < z.rows; ++i) {
                const double xh = (z(i, j) - bn.running_mean[j]) / denom;
                mu += xh;
                const double y = bn.gamma[j] * xh + bn.beta[j];
                act(i, j) = y > 0.0 ? y : 0.0;
            }
            mu /= z.rows;
            double v = 0.0;
            for (int i = 0; i < z.rows; ++i) {
                const double xh = (z(i, j) - bn.running_mean[j]) / denom;
                v += (xh - mu) * (xh - mu);
            }
            stats.mean[j] = mu;
            stats.var[j] = v / z.rows;
        }
        out.push_back(std::move(stats));
        a = std::move(act);
    }
    return out;
}

EmbeddingMatrix random_inputs(int rows, int cols, unsigned seed) {
    std::mt19937 rng(seed);
    std::normal_distribution<float> dist(0.0f, 2.0f);
    EmbeddingMatrix x(rows, cols);
    for (auto& v : x.values) v = dist(rng) + 0.5f;
    return x;
}

}  // namespace

TEST_CASE("EVAL-mode BN with unit statistics is identity up to eps") {
    BackboneModel m = make_backbone(2, {2}, 2, 0);
    m.affines[0].w = mat2({{1, 0}, {0, 1}});
    m.affines[0].b = {0, 0};
    m.affines[1].w = mat2({{1, 0}, {0, 1}});
    m.affines[1].b = {0, 0};
    const Mat batch = mat2({{0.5, 1.25}, {2.0, 0.75}});
    const auto out = backbone_forward(m, batch, Mode::kEval);
    for (int i = 0; i < 2; ++i) {
        for (int j = 0; j < 2; ++j) {
            CHECK(out.features(i, j) ==
                  doctest::Approx(batch(i, j) / std::sqrt(1.0 + 1e-5)).epsilon(1e-12));
        }
    }
}

TEST_CASE("zero-weight classifier yields all-zero logits") {
    BackboneModel m = make_backbone(3, {4}, 5, 1);
    for (auto& v : m.affines.back().w.a) v = 0.0;
    for (auto& v : m.affines.back().b) v = 0.0;
    const auto out = backbone_forward(m, mat2({{1, 2, 3}, {0, 1, 0}}), Mode::kEval);
    for (double v : out.logits.a) CHECK(v == 0.0);
}

TEST_CASE("two-layer EVAL forward matches a hand computation") {
    BackboneModel m = make_backbone(2, {2}, 2, 0);
    m.affines[0].w = mat2({{1.0, -0.5}, {0.25, 2.0}});
    m.affines[0].b = {0.1, -0.2};
    m.bns[0].gamma = {1.5, 0.5};
    m.bns[0].beta = {0.2, -0.1};
    m.bns[0].running_mean = {0.3, -0.4};
    m.bns[0].running_var = {4.0, 0.25};
    m.affines[1].w = mat2({{2.0, 1.0}, {-1.0, 0.5}});
    m.affines[1].b = {0.05, -0.05};

    const Mat batch = mat2({{1.0, 2.0}, {-0.5, 0.25}});
    const auto out = backbone_forward(m, batch, Mode::kEval);

    for (int i = 0; i < 2; ++i) {
        const double z0 = batch(i, 0) * 1.0 + batch(i, 1) * 0.25 + 0.1;
        const double z1 = batch(i, 0) * -0.5 + batch(i, 1) * 2.0 - 0.2;
        const double xh0 = (z0 - 0.3) / std::sqrt(4.0 + 1e-5);
        const double xh1 = (z1 + 0.4) / std::sqrt(0.25 + 1e-5);
        const double a0 = std::max(0.0, 1.5 * xh0 + 0.2);
        const double a1 = std::max(0.0, 0.5 * xh1 - 0.1);
        CHECK(out.features(i, 0) == doctest::Approx(a0).epsilon(1e-12));
        CHECK(out.features(i, 1) == doctest::Approx(a1).epsilon(1e-12));
        CHECK(out.logits(i, 0) == doctest::Approx(2.0 * a0 - 1.0 * a1 + 0.05).epsilon(1e-12));
        CHECK(out.logits(i, 1) == doctest::Approx(1.0 * a0 + 0.5 * a1 - 0.05).epsilon(1e-12));
    }
}

TEST_CASE("TRAIN-mode batch normalization standardizes each channel") {
    // beta shifted far positive so ReLU never clips; the features then expose
    // gamma * xhat + beta directly.
    BackboneModel m = make_backbone(3, {4}, 2, 7);
    for (auto& b : m.bns[0].beta) b = 10.0;
    const EmbeddingMatrix x = random_inputs(64, 3, 11);
    const auto out = backbone_forward(m, widen(x), Mode::kTrain);
    for (int j = 0; j < 4; ++j) {
        double mu = 0.0;
        for (int i = 0; i < 64; ++i) mu += out.features(i, j) - 10.0;
        mu /= 64;
        double var = 0.0;
        for (int i = 0; i < 64; ++i) {
            const double d = out.features(i, j) - 10.0 - mu;
            var += d * d;
        }
        var /= 64;
        CHECK(std::abs(mu) < 1e-6);
        CHECK(std::abs(var - 1.0) < 1e-3);  // gamma=1; eps shrinks it slightly
    }
}

TEST_CASE("TRAIN mode rejects single-row batches; shapes are checked") {
    BackboneModel m = make_backbone(3, {4}, 2, 7);
    CHECK_THROWS_AS(backbone_forward(m, mat2({{1, 2, 3}}), Mode::kTrain), SpecError);
    CHECK_THROWS_AS(backbone_forward(m, mat2({{1, 2}, {3, 4}}), Mode::kEval), ShapeError);
}

TEST_CASE("gaussianize: contract on random models and data") {
    std::mt19937 rng(21);
    for (int trial = 0; trial < 8; ++trial) {
        const int dim = 2 + static_cast<int>(rng() % 5);
        const int width = 2 + static_cast<int>(rng() % 6);
        const int layers = 1 + static_cast<int>(rng() % 3);
        BackboneModel m =
            make_backbone(dim, std::vector<int>(layers, width), 3, rng());
        const EmbeddingMatrix data = random_inputs(40 + rng() % 60, dim, rng());

        const BackboneModel g = gaussianize(m, data);
        const auto stats = bn_xhat_stats(g, data);
        for (const auto& layer : stats) {
            for (double mu : layer.mean) CHECK(std::abs(mu) < 1e-6);
            for (double var : layer.var) CHECK(std::abs(var - 1.0) < 1e-3);
        }

        // weights and affine BN parameters untouched
        for (std::size_t l = 0; l < m.affines.size(); ++l) {
            CHECK(g.affines[l].w.a == m.affines[l].w.a);
            CHECK(g.affines[l].b == m.affines[l].b);
        }
        for (int l = 0; l < m.hidden_layers(); ++l) {
            CHECK(g.bns[l].gamma == m.bns[l].gamma);
            CHECK(g.bns[l].beta == m.bns[l].beta);
        }

        // idempotence
        const BackboneModel g2 = gaussianize(g, data);
        for (int l = 0; l < g.hidden_layers(); ++l) {
            for (std::size_t c = 0; c < g.bns[l].running_mean.size(); ++c) {
                CHECK(std::abs(g2.bns[l].running_mean[c] - g.bns[l].running_mean[c]) < 1e-9);
                CHECK(std::abs(g2.bns[l].running_var[c] - g.bns[l].running_var[c]) < 1e-9);
            }
        }
    }
}

TEST_CASE("gaussianize: standardized data is a fixed point") {
    BackboneModel m = make_backbone(2, {2}, 2, 0);
    m.affines[0].w = mat2({{1, 0}, {0, 1}});
    m.affines[0].b = {0, 0};
    // exactly standardized columns
    EmbeddingMatrix data(4, 2);
    const float vals[4] = {-1.5f, -0.5f, 0.5f, 1.5f};
    for (int i = 0; i < 4; ++i) {
        data(i, 0) = vals[i] / std::sqrt(1.25f);
        data(i, 1) = vals[(i + 1) % 4] / std::sqrt(1.25f);
    }
    const auto g = gaussianize(m, data);
    for (std::size_t c = 0; c < 2; ++c) {
        CHECK(std::abs(g.bns[0].running_mean[c] - 0.0) < 1e-6);
        CHECK(std::abs(g.bns[0].running_var[c] - 1.0) < 1e-6);
    }
}

TEST_CASE("gaussianize: constant channel is eps-clamped to zero output") {
    BackboneModel m = make_backbone(2, {2}, 2, 0);
    m.affines[0].w = mat2({{1, 0}, {0, 1}});
    m.affines[0].b = {0, 0};
    EmbeddingMatrix data(5, 2);
    for (int i = 0; i < 5; ++i) {
        data(i, 0) = 3.0f;  // constant column
        data(i, 1) = static_cast<float>(i);
    }
    const auto g = gaussianize(m, data);
    CHECK(g.bns[0].running_var[0] == doctest::Approx(0.0));
    // normalized output of the constant channel is exactly zero everywhere
    BackboneModel local = g;
    const auto out = backbone_forward(local, widen(data), Mode::kEval);
    for (int i = 0; i < 5; ++i) CHECK(out.features(i, 0) == 0.0);
}

TEST_CASE("gaussianize: shifting the data shifts the first-layer mean by c") {
    BackboneModel m = make_backbone(3, {3}, 2, 5);
    m.affines[0].w = mat2({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
    m.affines[0].b = {0, 0, 0};
    const EmbeddingMatrix data = random_inputs(50, 3, 31);
    EmbeddingMatrix shifted = data;
    const float c = 2.75f;
    for (auto& v : shifted.values) v += c;

    const auto g1 = gaussianize(m, data);
    const auto g2 = gaussianize(m, shifted);
    for (int j = 0; j < 3; ++j) {
        CHECK(g2.bns[0].running_mean[j] - g1.bns[0].running_mean[j] ==
              doctest::Approx(c).epsilon(1e-9));
        CHECK(g2.bns[0].running_var[j] == doctest::Approx(g1.bns[0].running_var[j]).epsilon(1e-9));
    }
}

TEST_CASE("gaussianize_ema approaches the exact statistics") {
    BackboneModel m = make_backbone(4, {5}, 3, 9);
    const EmbeddingMatrix data = random_inputs(120, 4, 17);
    const auto exact = gaussianize(m, data);
    const auto ema = gaussianize_ema(m, data, 40, 32, 0.1, 3);
    for (std::size_t c = 0; c < 5; ++c) {
        CHECK(ema.bns[0].running_mean[c] ==
              doctest::Approx(exact.bns[0].running_mean[c]).epsilon(0.08));
        CHECK(ema.bns[0].running_var[c] ==
              doctest::Approx(exact.bns[0].running_var[c]).epsilon(0.15));
    }
}

TEST_CASE("EVAL forward is pure") {
    BackboneModel m = make_backbone(4, {6, 6}, 3, 13);
    const EmbeddingMatrix data = random_inputs(20, 4, 19);
    const auto a = extract_features(m, data);
    const auto b = extract_features(m, data);
    CHECK(a.values == b.values);
}

TEST_CASE("parameter gradients match central finite differences") {
    std::mt19937 rng(37);
    std::normal_distribution<double> dist;
    for (int trial = 0; trial < 6; ++trial) {
        const int dim = 2 + static_cast<int>(rng() % 3);
        const int layers = 1 + static_cast<int>(rng() % 3);
        const int width = 2 + static_cast<int>(rng() % 6);
        const int k = 2 + static_cast<int>(rng() % 3);
        const int rows = 5 + static_cast<int>(rng() % 6);
        BackboneModel model = make_backbone(dim, std::vector<int>(layers, width), k, rng());

        Mat batch(rows, dim);
        for (auto& v : batch.a) v = dist(rng);
        std::vector<std::int32_t> roles(rows);
        for (int i = 0; i < rows; ++i) {
            roles[i] = (rng() % 3 == 0) ? kRoleOe : static_cast<std::int32_t>(rng() % k);
        }
        roles[0] = 0;  // at least one ID row
        const double lambda = 0.5;

        BackboneModel work = model;
        const auto grads = detail::backbone_loss_and_gradients(work, batch, roles, lambda);

        double max_rel = 0.0;
        auto check_param = [&](double* p, double analytic) {
            const double saved = *p;
            const double step = 1e-5;
            *p = saved + step;
            BackboneModel plus = model;
            *p = saved - step;
            BackboneModel minus = model;
            *p = saved;
            const double lp =
                detail::backbone_loss_and_gradients(plus, batch, roles, lambda).loss;
            const double lm =
                detail::backbone_loss_and_gradients(minus, batch, roles, lambda).loss;
            const double numeric = (lp - lm) / (2.0 * step);
            if (std::abs(analytic) > 1e-10 || std::abs(numeric) > 1e-10) {
                max_rel = std::max(max_rel, ltood::test::rel_error(analytic, numeric));
            }
        };

        for (std::size_t l = 0; l < model.affines.size(); ++l) {
            for (std::size_t i = 0; i < model.affines[l].w.a.size(); ++i) {
                check_param(&model.affines[l].w.a[i], grads.dw[l].a[i]);
            }
            for (std::size_t i = 0; i < model.affines[l].b.size(); ++i) {
                check_param(&model.affines[l].b[i], grads.db[l][i]);
            }
        }
        for (int l = 0; l < model.hidden_layers(); ++l) {
            for (std::size_t c = 0; c < model.bns[l].gamma.size(); ++c) {
                check_param(&model.bns[l].gamma[c], grads.dgamma[l][c]);
                check_param(&model.bns[l].beta[c], grads.dbeta[l][c]);
            }
        }
        CHECK(max_rel < 1e-4);
    }
}

TEST_CASE("composite loss reduces to cross-entropy when lambda is 0 or no OE rows") {
    BackboneModel m = make_backbone(3, {4}, 3, 3);
    Mat batch = mat2({{1, 0, 2}, {0, 1, 1}, {2, 2, 0}});
    const std::vector<std::int32_t> roles = {0, 1, 2};

    BackboneModel w1 = m;
    const auto id_only = detail::backbone_loss_and_gradients(w1, batch, roles, 0.0);
    BackboneModel w2 = m;
    const auto id_lambda = detail::backbone_loss_and_gradients(w2, batch, roles, 0.5);
    CHECK(id_only.loss == id_lambda.loss);  // no OE rows: lambda is vacuous

    // loss equals the hand-computed mean CE over ID rows
    BackboneModel w3 = m;
    const auto fwd = backbone_forward(w3, batch, Mode::kTrain);
    double ce = 0.0;
    for (int i = 0; i < 3; ++i) {
        double mx = fwd.logits(i, 0);
        for (int j = 1; j < 3; ++j) mx = std::max(mx, fwd.logits(i, j));
        double lse = 0.0;
        for (int j = 0; j < 3; ++j) lse += std::exp(fwd.logits(i, j) - mx);
        ce += -(fwd.logits(i, roles[i]) - mx - std::log(lse));
    }
    ce /= 3.0;
    CHECK(id_only.loss == doctest::Approx(ce).epsilon(1e-12));
}

TEST_CASE("training: one-class dataset reaches full accuracy") {
    DatasetSpec spec;
    spec.k_classes = 1;
    spec.n_max = 30;
    spec.rho = 1.0;
    spec.dim = 4;
    spec.n_oe = 0;
    spec.n_ood_test = 0;
    spec.seed = 5;
    const auto data = sample_synthetic(spec);
    BackboneModel m = make_backbone(4, {8}, 1, 2);
    BackboneTrainConfig cfg;
    cfg.epochs = 5;
    cfg.batch_size = 16;
    cfg.seed = 2;
    const auto trained = train_backbone(m, data, cfg);
    const Mat logits = backbone_logits(trained, data.features);
    CHECK(logits.cols == 1);  // argmax is always class 0: accuracy 1.0
}

TEST_CASE("training: separable four-cluster dataset reaches 95% train accuracy") {
    DatasetSpec spec;
    spec.k_classes = 4;
    spec.n_max = 60;
    spec.rho = 2.0;
    spec.dim = 8;
    spec.n_oe = 30;
    spec.n_ood_test = 0;
    spec.seed = 77;
    const auto data = sample_synthetic(spec);
    BackboneModel m = make_backbone(8, {16, 16}, 4, 7);
    BackboneTrainConfig cfg;
    cfg.epochs = 50;
    cfg.batch_size = 32;
    cfg.lr = 0.05;
    cfg.lambda = 0.5;
    cfg.seed = 7;
    const auto trained = train_backbone(m, data, cfg);

    const Mat logits = backbone_logits(trained, data.features);
    int correct = 0, total = 0;
    for (int i = 0; i < data.rows(); ++i) {
        if (!is_id_role(data.roles[i])) continue;
        int best = 0;
        for (int j = 1; j < 4; ++j) {
            if (logits(i, j) > logits(i, best)) best = j;
        }
        correct += best == data.roles[i];
        ++total;
    }
    CHECK(static_cast<double>(correct) / total >= 0.95);
}

TEST_CASE("training: determinism and validation errors") {
    DatasetSpec spec;
    spec.k_classes = 3;
    spec.n_max = 20;
    spec.rho = 2.0;
    spec.dim = 5;
    spec.n_oe = 10;
    spec.n_ood_test = 0;
    spec.seed = 9;
    const auto data = sample_synthetic(spec);
    BackboneTrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 16;
    cfg.seed = 4;

    const auto m1 = train_backbone(make_backbone(5, {8}, 3, 1), data, cfg);
    const auto m2 = train_backbone(make_backbone(5, {8}, 3, 1), data, cfg);
    for (std::size_t l = 0; l < m1.affines.size(); ++l) {
        CHECK(m1.affines[l].w.a == m2.affines[l].w.a);
    }

    // a class with no samples is rejected
    BackboneModel wide = make_backbone(5, {8}, 7, 1);
    CHECK_THROWS_AS(train_backbone(wide, data, cfg), SpecError);
}

TEST_CASE("checkpoint roundtrip") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "ltood_test_backbone";
    fs::create_directories(dir);
    const auto path = (dir / "model.ckpt").string();

    BackboneModel m = make_backbone(6, {8, 8}, 4, 42);
    m.bns[0].running_mean[3] = 1.25;
    m.bns[1].running_var[2] = 0.75;
    save_backbone(path, m);
    const auto back = load_backbone(path);
    CHECK(back.input_dim == 6);
    CHECK(back.feature_dim == 8);
    CHECK(back.num_classes == 4);
    for (std::size_t l = 0; l < m.affines.size(); ++l) {
        CHECK(back.affines[l].w.a == m.affines[l].w.a);
        CHECK(back.affines[l].b == m.affines[l].b);
    }
    for (int l = 0; l < m.hidden_layers(); ++l) {
        CHECK(back.bns[l].running_mean == m.bns[l].running_mean);
        CHECK(back.bns[l].running_var == m.bns[l].running_var);
    }

    const EmbeddingMatrix data = random_inputs(10, 6, 23);
    CHECK(extract_features(back, data).values == extract_features(m, data).values);
}
