#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <set>

#include "ltood/dataset.hpp"
#include "ltood/errors.hpp"
#include "ltood/gcn.hpp"
#include "ltood/graph.hpp"
#include "test_util.hpp"

using namespace ltood;

namespace {

EmbeddingMatrix feat(std::initializer_list<std::initializer_list<float>> rows) {
    EmbeddingMatrix m(static_cast<int>(rows.size()),
                      static_cast<int>(rows.begin()->size()));
    int i = 0;
    for (const auto& row : rows) {
        int j = 0;
        for (float v : row) m(i, j++) = v;
        ++i;
    }
    return m;
}

NodeMasks all_id(std::initializer_list<int> labels) {
    NodeMasks masks;
    for (int label : labels) {
        masks.id_mask.push_back(1);
        masks.oe_mask.push_back(0);
        masks.labels.push_back(label);
    }
    return masks;
}

struct RandomInstance {
    NormalizedGraph graph;
    EmbeddingMatrix x;
    NodeMasks masks;
    GcnModel model;
    double lambda;
};

RandomInstance random_instance(std::mt19937& rng, int max_nodes, int max_layers) {
    std::normal_distribution<float> fdist;
    RandomInstance inst;
    const int n = 3 + static_cast<int>(rng() % (max_nodes - 2));
    const int dim = 2 + static_cast<int>(rng() % 3);
    const int k_classes = 2 + static_cast<int>(rng() % 3);

    inst.x = EmbeddingMatrix(n, dim);
    for (auto& v : inst.x.values) v = fdist(rng) + 0.3f;
    SparseAdjacency adj;
    adj.n = n;
    std::set<std::pair<int, int>> edges;
    for (int i = 0; i < n; ++i) {
        for (int j = i + 1; j < n; ++j) {
            if (rng() % 2 == 0) {
                edges.emplace(i, j);
                edges.emplace(j, i);
            }
        }
    }
    adj.edges.assign(edges.begin(), edges.end());
    inst.graph = normalize_adjacency(adj);

    inst.masks.id_mask.assign(n, 0);
    inst.masks.oe_mask.assign(n, 0);
    inst.masks.labels.assign(n, 0);
    for (int i = 0; i < n; ++i) {
        if (rng() % 4 == 0) {
            inst.masks.oe_mask[i] = 1;
        } else {
            inst.masks.id_mask[i] = 1;
            inst.masks.labels[i] = static_cast<int>(rng() % k_classes);
        }
    }
    inst.masks.id_mask[0] = 1;
    inst.masks.oe_mask[0] = 0;
    inst.masks.labels[0] = 0;

    GcnTrainConfig cfg;
    cfg.layers = 1 + static_cast<int>(rng() % max_layers);
    cfg.hidden_dim = 2 + static_cast<int>(rng() % 4);
    cfg.seed = rng();
    inst.model = make_gcn(dim, k_classes, cfg);
    inst.lambda = (rng() % 3) * 0.25;
    return inst;
}

double fd_gradcheck(const RandomInstance& inst) {
    GcnModel model = inst.model;
    const auto grads = gcn_backward(model, inst.graph, inst.x, inst.masks, inst.lambda);
    const double step = 1e-5;
    double max_rel = 0.0;
    auto probe = [&](double* p, double analytic) {
        const double saved = *p;
        *p = saved + step;
        const auto lp = oe_loss(gcn_forward(model, inst.graph, inst.x).logits, inst.masks,
                                inst.lambda);
        *p = saved - step;
        const auto lm = oe_loss(gcn_forward(model, inst.graph, inst.x).logits, inst.masks,
                                inst.lambda);
        *p = saved;
        const double numeric = (lp.total - lm.total) / (2.0 * step);
        if (std::abs(analytic) > 1e-10 || std::abs(numeric) > 1e-10) {
            max_rel = std::max(max_rel, ltood::test::rel_error(analytic, numeric));
        }
    };
    for (std::size_t l = 0; l < model.conv_weights.size(); ++l) {
        for (std::size_t i = 0; i < model.conv_weights[l].a.size(); ++i) {
            probe(&model.conv_weights[l].a[i], grads.dconv[l].a[i]);
        }
    }
    for (std::size_t i = 0; i < model.head_w.a.size(); ++i) {
        probe(&model.head_w.a[i], grads.dhead_w.a[i]);
    }
    for (std::size_t i = 0; i < model.head_b.size(); ++i) {
        probe(&model.head_b[i], grads.dhead_b[i]);
    }
    return max_rel;
}

}  // namespace

TEST_CASE("forward: single isolated node with identity weights") {
    GcnTrainConfig cfg;
    cfg.layers = 3;
    cfg.hidden_dim = 2;
    GcnModel m = make_gcn(2, 2, cfg);
    for (auto& w : m.conv_weights) {
        for (auto& v : w.a) v = 0.0;
        w(0, 0) = w(1, 1) = 1.0;
    }
    for (auto& v : m.head_w.a) v = 0.0;
    m.head_w(0, 0) = m.head_w(1, 1) = 1.0;
    m.head_b = {0.0, 0.0};

    const auto out = gcn_forward(m, identity_graph(1), feat({{0.5, 1.5}}));
    CHECK(out.logits(0, 0) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(out.logits(0, 1) == doctest::Approx(1.5).epsilon(1e-15));
}

TEST_CASE("forward: zero weights give zero logits") {
    GcnTrainConfig cfg;
    cfg.layers = 2;
    cfg.hidden_dim = 4;
    GcnModel m = make_gcn(3, 2, cfg);
    for (auto& w : m.conv_weights) {
        for (auto& v : w.a) v = 0.0;
    }
    for (auto& v : m.head_w.a) v = 0.0;
    SparseAdjacency adj;
    adj.n = 3;
    adj.edges = {{0, 1}, {1, 0}, {1, 2}, {2, 1}};
    const auto out = gcn_forward(m, normalize_adjacency(adj), feat({{1, 2, 3}, {4, 5, 6}, {7, 8, 9}}));
    for (double v : out.logits.a) CHECK(v == 0.0);
}

TEST_CASE("forward: two-node graph matches the dense hand computation") {
    // Normalized two-node graph has every entry 0.5, so the aggregated input
    // of each node is the average of the two rows.
    GcnTrainConfig cfg;
    cfg.layers = 2;
    cfg.hidden_dim = 2;
    cfg.head_bias = true;
    GcnModel m = make_gcn(2, 2, cfg);
    m.conv_weights[0] = Mat(2, 2);
    m.conv_weights[0](0, 0) = 1.0;
    m.conv_weights[0](0, 1) = -1.0;
    m.conv_weights[0](1, 0) = 0.5;
    m.conv_weights[0](1, 1) = 2.0;
    m.head_w = Mat(2, 2);
    m.head_w(0, 0) = 2.0;
    m.head_w(1, 1) = -1.0;
    m.head_b = {0.1, 0.2};

    SparseAdjacency adj;
    adj.n = 2;
    adj.edges = {{0, 1}, {1, 0}};
    const auto graph = normalize_adjacency(adj);
    const EmbeddingMatrix x = feat({{1.0, 2.0}, {3.0, -1.0}});
    const auto out = gcn_forward(m, graph, x);

    const double agg0[2] = {0.5 * (1.0 + 3.0), 0.5 * (2.0 - 1.0)};  // same for both nodes
    const double h0 = std::max(0.0, agg0[0] * 1.0 + agg0[1] * 0.5);
    const double h1 = std::max(0.0, agg0[0] * -1.0 + agg0[1] * 2.0);
    // hidden rows are equal, so the head aggregation averages equal rows
    const double logit0 = h0 * 2.0 + 0.1;
    const double logit1 = h1 * -1.0 + 0.2;
    for (int i = 0; i < 2; ++i) {
        CHECK(out.logits(i, 0) == doctest::Approx(logit0).epsilon(1e-12));
        CHECK(out.logits(i, 1) == doctest::Approx(logit1).epsilon(1e-12));
        CHECK(out.hidden(i, 0) == doctest::Approx(h0).epsilon(1e-12));
        CHECK(out.hidden(i, 1) == doctest::Approx(h1).epsilon(1e-12));
    }
}

TEST_CASE("oe_loss: uniform softmax has exactly zero KL") {
    Mat logits(2, 10);
    for (auto& v : logits.a) v = 1.7;  // equal logits, any constant
    NodeMasks masks;
    masks.id_mask = {1, 0};
    masks.oe_mask = {0, 1};
    masks.labels = {3, 0};
    const auto terms = oe_loss(logits, masks, 0.5);
    CHECK(terms.kl == 0.0);
}

TEST_CASE("oe_loss: lambda 0 ignores OE outputs") {
    std::mt19937 rng(5);
    std::normal_distribution<double> dist;
    Mat logits(4, 3);
    for (auto& v : logits.a) v = dist(rng);
    NodeMasks masks;
    masks.id_mask = {1, 1, 0, 0};
    masks.oe_mask = {0, 0, 1, 1};
    masks.labels = {0, 2, 0, 0};
    const auto terms = oe_loss(logits, masks, 0.0);
    CHECK(terms.total == terms.ce);
    const auto terms2 = oe_loss(logits, masks, 0.7);
    CHECK(terms2.ce == terms.ce);
    CHECK(terms2.total == doctest::Approx(terms.ce + 0.7 * terms2.kl).epsilon(1e-15));
}

TEST_CASE("oe_loss: K=2 with probabilities (0.75, 0.25)") {
    // one OE node plus the required ID node, identical logits
    Mat both(2, 2);
    both(0, 0) = both(1, 0) = std::log(0.75);
    both(0, 1) = both(1, 1) = std::log(0.25);
    NodeMasks m2;
    m2.id_mask = {0, 1};
    m2.oe_mask = {1, 0};
    m2.labels = {0, 0};
    const auto terms = oe_loss(both, m2, 1.0);
    const double expected = std::log(2.0) - (-0.75 * std::log(0.75) - 0.25 * std::log(0.25));
    CHECK(terms.kl == doctest::Approx(expected).epsilon(1e-12));
    CHECK(terms.kl == doctest::Approx(0.13081).epsilon(1e-4));
}

TEST_CASE("oe_loss: at least one ID node is required") {
    Mat logits(2, 3);
    NodeMasks masks;
    masks.id_mask = {0, 0};
    masks.oe_mask = {1, 1};
    masks.labels = {0, 0};
    CHECK_THROWS_AS(oe_loss(logits, masks, 0.5), SpecError);
}

TEST_CASE("oe_loss: KL identity against random probability vectors") {
    std::mt19937 rng(29);
    std::uniform_real_distribution<double> dist(0.05, 1.0);
    for (int trial = 0; trial < 200; ++trial) {
        const int k = 2 + static_cast<int>(rng() % 9);
        std::vector<double> p(k);
        double sum = 0.0;
        for (double& v : p) {
            v = dist(rng);
            sum += v;
        }
        for (double& v : p) v /= sum;
        Mat logits(2, k);
        for (int j = 0; j < k; ++j) logits(0, j) = logits(1, j) = std::log(p[j]);
        NodeMasks masks;
        masks.id_mask = {1, 0};
        masks.oe_mask = {0, 1};
        masks.labels = {0, 0};
        const auto terms = oe_loss(logits, masks, 1.0);
        double entropy = 0.0;
        for (double v : p) entropy -= v * std::log(v);
        CHECK(std::abs(terms.kl - (std::log(static_cast<double>(k)) - entropy)) < 1e-12);
    }
}

TEST_CASE("oe_loss: shift invariance of every term") {
    std::mt19937 rng(31);
    std::normal_distribution<double> dist;
    Mat logits(5, 4);
    for (auto& v : logits.a) v = dist(rng);
    NodeMasks masks;
    masks.id_mask = {1, 1, 1, 0, 0};
    masks.oe_mask = {0, 0, 0, 1, 1};
    masks.labels = {0, 1, 3, 0, 0};
    const auto base = oe_loss(logits, masks, 0.5);
    Mat shifted = logits;
    for (int i = 0; i < 5; ++i) {
        for (int j = 0; j < 4; ++j) shifted(i, j) += 123.456;
    }
    const auto moved = oe_loss(shifted, masks, 0.5);
    CHECK(std::abs(base.ce - moved.ce) < 1e-12);
    CHECK(std::abs(base.kl - moved.kl) < 1e-12);
    CHECK(std::abs(base.total - moved.total) < 1e-12);
}

TEST_CASE("gradients match central finite differences") {
    std::mt19937 rng(41);
    for (int trial = 0; trial < 12; ++trial) {
        const auto inst = random_instance(rng, 10, 3);
        CHECK(fd_gradcheck(inst) < 1e-4);
    }
}

TEST_CASE("gradients: lambda is vacuous without OE nodes") {
    std::mt19937 rng(43);
    auto inst = random_instance(rng, 8, 2);
    std::fill(inst.masks.oe_mask.begin(), inst.masks.oe_mask.end(), 0);
    for (std::size_t i = 0; i < inst.masks.id_mask.size(); ++i) inst.masks.id_mask[i] = 1;
    const auto g0 = gcn_backward(inst.model, inst.graph, inst.x, inst.masks, 0.0);
    const auto g5 = gcn_backward(inst.model, inst.graph, inst.x, inst.masks, 0.5);
    for (std::size_t l = 0; l < g0.dconv.size(); ++l) CHECK(g0.dconv[l].a == g5.dconv[l].a);
    CHECK(g0.dhead_w.a == g5.dhead_w.a);
}

TEST_CASE("permutation equivariance of the forward pass") {
    std::mt19937 rng(47);
    const auto inst = random_instance(rng, 9, 3);
    const int n = inst.x.rows;
    std::vector<int> perm(n);
    for (int i = 0; i < n; ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), rng);

    EmbeddingMatrix xp(n, inst.x.cols);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < inst.x.cols; ++j) xp(perm[i], j) = inst.x(i, j);
    }
    SparseAdjacency adj;
    adj.n = n;
    std::set<std::pair<int, int>> edges;
    for (const auto& [i, j, w] : inst.graph.entries()) {
        if (i != j) edges.emplace(perm[i], perm[j]);
    }
    adj.edges.assign(edges.begin(), edges.end());
    const auto graph_p = normalize_adjacency(adj);

    const auto base = gcn_forward(inst.model, inst.graph, inst.x);
    const auto permuted = gcn_forward(inst.model, graph_p, xp);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < base.logits.cols; ++j) {
            CHECK(permuted.logits(perm[i], j) == doctest::Approx(base.logits(i, j)).epsilon(1e-12));
        }
    }
}

TEST_CASE("mlp_forward equals gcn_forward on the identity graph") {
    std::mt19937 rng(53);
    const auto inst = random_instance(rng, 8, 3);
    const auto a = mlp_forward(inst.model, inst.x);
    const auto b = gcn_forward(inst.model, identity_graph(inst.x.rows), inst.x);
    CHECK(a.logits.a == b.logits.a);
    CHECK(a.hidden.a == b.hidden.a);
}

TEST_CASE("cosine learning rate schedule") {
    CHECK(cosine_lr(0, 200, 0.001) == doctest::Approx(0.001).epsilon(1e-15));
    CHECK(cosine_lr(200, 200, 0.001) == doctest::Approx(0.0).epsilon(1e-18));
    CHECK(cosine_lr(100, 200, 0.001) == doctest::Approx(0.0005).epsilon(1e-12));
    CHECK_THROWS_AS(cosine_lr(201, 200, 0.001), std::out_of_range);
    CHECK_THROWS_AS(cosine_lr(-1, 200, 0.001), std::out_of_range);
}

TEST_CASE("train_gcn: determinism, trace length, validation") {
    DatasetSpec spec;
    spec.k_classes = 3;
    spec.n_max = 15;
    spec.rho = 3.0;
    spec.dim = 4;
    spec.n_oe = 12;
    spec.n_ood_test = 0;
    spec.seed = 3;
    const auto data = sample_synthetic(spec);
    const auto graph = normalize_adjacency(knn_graph(cosine_similarity(data.features), 3));
    const auto masks = masks_from_roles(data.roles);

    GcnTrainConfig cfg;
    cfg.epochs = 5;
    cfg.seed = 11;
    cfg.hidden_dim = 8;
    const auto r1 = train_gcn(graph, data.features, masks, cfg);
    const auto r2 = train_gcn(graph, data.features, masks, cfg);
    CHECK(r1.model.head_w.a == r2.model.head_w.a);
    for (std::size_t l = 0; l < r1.model.conv_weights.size(); ++l) {
        CHECK(r1.model.conv_weights[l].a == r2.model.conv_weights[l].a);
    }
    CHECK(r1.trace.size() == 5);

    cfg.epochs = 1;
    CHECK(train_gcn(graph, data.features, masks, cfg).trace.size() == 1);
    cfg.epochs = 0;
    CHECK_THROWS_AS(train_gcn(graph, data.features, masks, cfg), SpecError);
}

TEST_CASE("train_gcn: loss decreases on the standard synthetic benchmark") {
    DatasetSpec spec;  // the frozen benchmark
    spec.k_classes = 10;
    spec.n_max = 500;
    spec.rho = 100.0;
    spec.dim = 32;
    spec.n_oe = 1000;
    spec.n_ood_test = 0;
    spec.seed = 0;
    const auto data = sample_synthetic(spec);
    const auto graph = normalize_adjacency(knn_graph(cosine_similarity(data.features), 7));
    const auto masks = masks_from_roles(data.roles);

    GcnTrainConfig cfg;
    cfg.epochs = 200;
    cfg.lr0 = 0.001;
    cfg.lambda = 0.5;
    cfg.seed = 0;
    const auto result = train_gcn(graph, data.features, masks, cfg);
    CHECK(result.trace.back().total <= result.trace.front().total);
    CHECK(result.trace.back().ce <= 0.5 * result.trace.front().ce);
}

TEST_CASE("train_gcn: diverging training raises TrainError with the epoch") {
    DatasetSpec spec;
    spec.k_classes = 2;
    spec.n_max = 10;
    spec.rho = 1.0;
    spec.dim = 3;
    spec.n_oe = 5;
    spec.n_ood_test = 0;
    spec.seed = 1;
    const auto data = sample_synthetic(spec);
    const auto graph = normalize_adjacency(knn_graph(cosine_similarity(data.features), 2));
    const auto masks = masks_from_roles(data.roles);
    GcnTrainConfig cfg;
    cfg.epochs = 50;
    cfg.lr0 = 1e160;  // one step throws the weights past double range
    cfg.seed = 1;
    CHECK_THROWS_AS(train_gcn(graph, data.features, masks, cfg), TrainError);
}

TEST_CASE("masks_from_roles splits roles consistently") {
    const std::vector<std::int32_t> roles = {2, kRoleOe, 0, kRoleTestOod, 1};
    const auto masks = masks_from_roles(roles);
    CHECK(masks.id_mask == std::vector<std::uint8_t>{1, 0, 1, 0, 1});
    CHECK(masks.oe_mask == std::vector<std::uint8_t>{0, 1, 0, 0, 0});
    CHECK(masks.labels[0] == 2);
    CHECK(masks.labels[2] == 0);
    CHECK(masks.labels[4] == 1);
}

TEST_CASE("gcn checkpoint roundtrip") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "ltood_test_gcn";
    fs::create_directories(dir);
    const auto path = (dir / "model.ckpt").string();

    GcnTrainConfig cfg;
    cfg.layers = 3;
    cfg.hidden_dim = 6;
    cfg.seed = 19;
    const GcnModel m = make_gcn(4, 3, cfg);
    save_gcn(path, m);
    const auto back = load_gcn(path);
    CHECK(back.input_dim == m.input_dim);
    CHECK(back.hidden_dim == m.hidden_dim);
    CHECK(back.num_classes == m.num_classes);
    CHECK(back.head_bias == m.head_bias);
    CHECK(back.head_w.a == m.head_w.a);
    CHECK(back.head_b == m.head_b);
    for (std::size_t l = 0; l < m.conv_weights.size(); ++l) {
        CHECK(back.conv_weights[l].a == m.conv_weights[l].a);
    }
}
