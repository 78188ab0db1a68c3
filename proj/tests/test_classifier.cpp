#include "incvae/classifier.hpp"

#include <doctest.h>

#include <cmath>

using namespace incvae;

namespace {

Vector vec(std::initializer_list<double> v) {
    Vector out(static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (double x : v) out(i++) = x;
    return out;
}

}  // namespace

TEST_CASE("softmax over cosine similarities") {
    CosineClassifier clf(2, 1.0);
    clf.add_class(3, vec({1.0, 0.0}));
    clf.add_class(1, vec({0.0, 2.0}));
    CHECK(clf.classes() == std::vector<ClassId>{1, 3});
    const auto p = clf.predict(vec({4.0, 0.0}));
    CHECK(p.label == 3);
    CHECK(p.probabilities[1] == doctest::Approx(std::exp(1.0) / (std::exp(1.0) + 1.0)).epsilon(1e-12));
    CHECK(p.probabilities[1] == doctest::Approx(0.73106).epsilon(1e-5));

    const Vector x = vec({0.3, -1.7});
    const auto a = clf.predict(x);
    const auto b = clf.predict(x * 123.0);
    CHECK(a.label == b.label);
    for (std::size_t k = 0; k < 2; ++k) CHECK(a.probabilities[k] == doctest::Approx(b.probabilities[k]));

    double last = 0.0;
    for (double beta : {2.0, 1.0, 0.5, 0.05}) {
        CosineClassifier c(2, beta);
        c.add_class(0, vec({1.0, 0.0}));
        c.add_class(1, vec({0.0, 1.0}));
        const double top = c.predict(vec({1.0, 0.0})).probabilities[0];
        CHECK(top > last);
        last = top;
    }
    CHECK_THROWS_AS(clf.predict(vec({0.0, 0.0})), Error);
    CHECK_THROWS_AS(clf.add_class(1, vec({1.0, 1.0})), Error);
    CHECK_THROWS_AS(clf.add_class(9, vec({0.0, 0.0})), Error);
    CHECK_THROWS_AS(CosineClassifier(2, 0.0), Error);
}

TEST_CASE("ties go to the lowest class id") {
    CosineClassifier clf(2, 1.0);
    clf.add_class(7, vec({1.0, 1.0}));
    clf.add_class(2, vec({1.0, 1.0}));
    CHECK(clf.predict(vec({1.0, 0.0})).label == 2);
    CHECK(clf.predict_rows(Matrix::Constant(3, 2, 1.0)) == std::vector<ClassId>{2, 2, 2});
}

TEST_CASE("fit separates a separable set and is reproducible") {
    Rng rng(3);
    Dataset d;
    d.features = standard_normal(200, 2, rng) * 0.2;
    for (Eigen::Index i = 0; i < 200; ++i) {
        const bool pos = i % 2 == 0;
        d.features(i, 0) += pos ? 1.0 : -1.0;
        d.features(i, 1) += 0.3;
        d.labels.push_back(pos ? 1 : 0);
    }
    ClassifierConfig cfg;
    cfg.epochs = 200;
    cfg.batch_size = 32;
    cfg.lr = 1e-2;
    TrainingSource src{&d, {}, {0, 1}, 0};
    CosineClassifier a(2, cfg.beta);
    const auto st = fit(a, {0, 1}, src, cfg, 5);
    CHECK(st.train_accuracy >= 0.99);
    CHECK(accuracy(a, d) >= 0.99);
    CosineClassifier b(2, cfg.beta);
    fit(b, {0, 1}, src, cfg, 5);
    CHECK(a.weights() == b.weights());
    CHECK_THROWS_AS(fit(b, {0, 1, 2}, src, cfg, 5), Error);
}

TEST_CASE("resampling source queries the sampler and is reproducible") {
    std::size_t calls = 0;
    FeatureSampler sampler = [&](ClassId y, std::size_t n, std::uint64_t seed) {
        ++calls;
        Rng rng(seed);
        Dataset out;
        out.features = standard_normal(static_cast<Eigen::Index>(n), 3, rng) * 0.1;
        out.features.col(static_cast<Eigen::Index>(y)).array() += 1.0;
        out.labels.assign(n, y);
        return out;
    };
    ClassifierConfig cfg;
    cfg.epochs = 60;
    cfg.batch_size = 30;
    cfg.lr = 1e-2;
    cfg.resample = true;
    TrainingSource src{nullptr, sampler, {0, 1, 2}, 40};
    CosineClassifier a(3, cfg.beta);
    const auto fs = fit(a, {0, 1, 2}, src, cfg, 8);
    CHECK(fs.train_accuracy >= 0.99);
    CHECK(calls > 0);
    CosineClassifier b(3, cfg.beta);
    fit(b, {0, 1, 2}, src, cfg, 8);
    CHECK(a.weights() == b.weights());
    const auto test = sampler(1, 100, 1234);
    CHECK(accuracy(a, test) >= 0.99);
}

TEST_CASE("random classifier sits at chance") {
    Rng rng(31);
    CosineClassifier clf(2, 0.05);
    for (ClassId y = 0; y < 4; ++y) clf.add_class(y, standard_normal(2, 1, rng));
    // Labels drawn independently of the inputs: any fixed classifier is right a quarter of the time.
    Dataset d;
    d.features = standard_normal(10000, 2, rng);
    std::uniform_int_distribution<ClassId> lab(0, 3);
    for (int i = 0; i < 10000; ++i) d.labels.push_back(lab(rng));
    CHECK(std::abs(accuracy(clf, d) - 0.25) <= 0.05);
}

TEST_CASE("evaluation rows compete over every class") {
    CosineClassifier clf(2, 1.0);
    clf.add_class(0, vec({1.0, 0.0}));
    clf.add_class(1, vec({0.0, 1.0}));
    std::vector<Dataset> tests(2);
    tests[0].features = Matrix::Identity(2, 2);
    tests[0].labels = {0, 0};
    tests[1].features = Matrix::Identity(2, 2);
    tests[1].labels = {1, 1};
    const auto row = evaluate(clf, tests, 1);
    CHECK(row == std::vector<double>{0.5, 0.5});
    tests[0].labels = {0, 1};
    CHECK(evaluate(clf, tests, 0) == std::vector<double>{1.0});
    CHECK_THROWS_AS(evaluate(clf, std::vector<Dataset>(1), 0), Error);
}

TEST_CASE("final and incremental accuracy arithmetic") {
    AccuracyMatrix m;
    m.rows = {{1.0}, {0.5, 0.7}};
    m.test_sizes = {10, 10};
    CHECK(faa(m) == doctest::Approx(0.6));
    CHECK(avg_incremental_accuracy(m) == doctest::Approx(0.8));
    CHECK(avg_incremental_accuracy(m, true) == doctest::Approx(0.8));
    m.test_sizes = {10, 30};
    CHECK(avg_incremental_accuracy(m) == doctest::Approx((1.0 + (5.0 + 21.0) / 40.0) / 2.0));
    CHECK(avg_incremental_accuracy(m, true) == doctest::Approx(0.8));

    AccuracyMatrix single;
    single.rows = {{0.42}};
    single.test_sizes = {5};
    CHECK(faa(single) == doctest::Approx(avg_incremental_accuracy(single)));

    AccuracyMatrix partial;
    partial.rows = {{1.0}};
    partial.test_sizes = {5, 5};
    CHECK_FALSE(partial.complete());
    CHECK_THROWS_AS(faa(partial), Error);
    partial.rows = {{1.0}, {0.5, 1.5}};
    CHECK_THROWS_AS(partial.validate(), Error);
}

TEST_CASE("memory accounting") {
    const VaeDims dims{64, 64, 16, 10};
    auto filled = [&](Variant v, std::size_t classes, bool with_stats) {
        VaeModel model(v, dims, 1);
        PriorBank bank(dims.latent);
        ClasswiseStats stats;
        CosineClassifier clf(dims.input, 0.05);
        Rng rng(2);
        Dataset d;
        d.features = standard_normal(static_cast<Eigen::Index>(classes * 3), dims.input, rng);
        for (std::size_t i = 0; i < classes * 3; ++i) d.labels.push_back(static_cast<ClassId>(i / 3));
        stats.update(d);
        std::vector<ClassId> ys;
        for (std::size_t y = 0; y < classes; ++y) ys.push_back(static_cast<ClassId>(y));
        init_means_random(bank, ys, PriorInit::normal, rng);
        for (auto y : ys) clf.add_class(y, Vector::Ones(dims.input));
        if (uses_embeddings(v)) add_embeddings(model, ys, rng);
        if (uses_task_heads(v)) {
            const std::size_t tasks = (classes + 4) / 5;
            for (TaskId t = 0; t < tasks; ++t) {
                DecoderHead h;
                h.last_weight = Matrix::Zero(model.decoder.layers().back().weight.rows(),
                                             model.decoder.layers().back().weight.cols());
                for (const auto& l : model.decoder.layers()) h.biases.push_back(Vector::Zero(l.out_dim()));
                model.heads.emplace(t, h);
            }
        }
        if (v == Variant::cgil_per_class)
            for (auto y : ys) model.class_decoders.emplace(y, model.decoder);
        return memory_account(model, bank, with_stats ? &stats : nullptr, clf, classes * 200);
    };

    const auto fo5 = filled(Variant::fo, 5, true);
    const auto fo6 = filled(Variant::fo, 6, true);
    CHECK(fo5.per_class == 16 + 128 + 64);
    CHECK(fo6.analytic_total - fo5.analytic_total == 208);
    for (auto v : {Variant::ceo, Variant::fo, Variant::fod, Variant::fodce, Variant::cgil_per_class}) {
        for (bool s : {false, true}) {
            const auto r = filled(v, 10, s);
            CHECK_MESSAGE(r.analytic_total == r.enumerated_total, to_string(v));
        }
    }
    const auto up = filled(Variant::upper_bound, 7, false);
    CHECK(up.analytic_total == 7 * 200 * 64);
}
