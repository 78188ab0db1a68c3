#include "incvae/cvae.hpp"

#include "oracles.hpp"

#include <doctest.h>

#include <cstring>
#include <sstream>

using namespace incvae;

namespace {

constexpr VaeDims kDims{8, 16, 4, 3};

struct Toy {
    Dataset task0;
    Dataset task1;
};

Toy toy_data() {
    const auto s = synth_clusters(4, 8, 40, 0.3, 13).data;
    const auto stream = split_tasks(s, {{0, 1}, {2, 3}});
    return {stream.tasks[0], stream.tasks[1]};
}

TrainConfig quick(std::size_t epochs = 20) {
    TrainConfig c;
    c.epochs = epochs;
    c.batch_size = 16;
    c.lr = 2e-3;
    c.lr_ortho = 2e-3;
    c.seed = 3;
    return c;
}

void place_priors(VaeModel& model, PriorBank& bank, const Dataset& d) {
    if (model.variant == Variant::ceo) {
        Rng rng(1);
        init_means_random(bank, d.classes(), PriorInit::zero, rng);
        return;
    }
    Rng rng(2);
    const auto classes = d.classes();
    add_embeddings(model, classes, rng);
    const auto anchors = class_anchors(model, d.features, d.labels);
    init_means(bank, anchors);
    FpiConfig fc;
    fc.lambda = 4.0;
    run_fpi(bank, anchors, fc);
}

// Trains task 0 and returns a null space built from its decoder inputs.
NullSpaceState first_task(VaeModel& model, PriorBank& bank, const Dataset& d, const TrainConfig& cfg) {
    place_priors(model, bank, d);
    train_task(model, d.features, d.labels, bank, 0, nullptr, cfg);
    bank.freeze_all();
    NullSpaceState ns(model.projected_input_dims());
    const auto inputs = collect_decoder_inputs(model, d.features, d.labels, bank, 0, 4, 11);
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        ns.accumulate(k, inputs[k]);
        ns.compute_projector(k);
    }
    return ns;
}

}  // namespace

TEST_CASE("architecture follows the variant") {
    const VaeModel fo(Variant::fo, kDims, 1);
    CHECK(fo.encoder.output_dim() == 2 * kDims.latent);
    CHECK(fo.decoder.input_dim() == kDims.latent);
    CHECK(fo.decoder.output_dim() == kDims.input);
    CHECK(fo.decoder.layers().size() == 3);
    CHECK(fo.cond_dim() == 0);
    CHECK(fo.projected_layers() == std::vector<std::size_t>{0, 1, 2});
    const VaeModel fod(Variant::fod, kDims, 1);
    CHECK(fod.projected_layers() == std::vector<std::size_t>{0, 1});
    const VaeModel ceo(Variant::ceo, kDims, 1);
    CHECK(ceo.cond_dim() == kDims.embed);
    CHECK(ceo.decoder.layers()[2].in_dim() == kDims.hidden + kDims.embed);
    CHECK_THROWS_AS(VaeModel(Variant::fo, VaeDims{0, 4, 2, 1}, 1), Error);
    for (auto v : {Variant::ceo, Variant::fo, Variant::fod, Variant::fodce, Variant::cgil_per_class, Variant::upper_bound})
        CHECK(variant_from_string(to_string(v)) == v);
    CHECK_THROWS_AS(variant_from_string("vae"), Error);
}

TEST_CASE("encoder split, clamp and label independence") {
    Matrix raw = Matrix::Zero(2, 4);
    raw(0, 2) = 50.0;
    raw(1, 3) = -50.0;
    const auto out = split_encoder_output(raw, 2);
    CHECK(out.logvar(0, 0) == kLogVarMax);
    CHECK(out.logvar(1, 1) == kLogVarMin);
    CHECK_THROWS_AS(split_encoder_output(raw, 3), Error);

    const VaeModel fo(Variant::fo, kDims, 2);
    Rng rng(4);
    const Matrix x = standard_normal(3, kDims.input, rng);
    const std::vector<ClassId> y1 = {0, 0, 0};
    const std::vector<ClassId> y2 = {5, 6, 7};
    const auto a = encode(fo, x, y1);
    const auto b = encode(fo, x, y2);
    CHECK(a.mu == b.mu);
    CHECK(a.logvar == b.logvar);
    const auto c = encode(fo, x, y1);
    CHECK(a.mu == c.mu);
}

TEST_CASE("reparameterization") {
    EncoderOutput e{Matrix::Constant(2, 3, 1.5), Matrix::Zero(2, 3)};
    CHECK(reparameterize(e, Matrix::Zero(2, 3)) == e.mu);
    const Matrix eps = Matrix::Constant(2, 3, 0.25);
    CHECK((reparameterize(e, eps) - (e.mu + eps)).norm() < 1e-15);
    CHECK_THROWS_AS(reparameterize(e, Matrix::Zero(3, 3)), Error);
}

TEST_CASE("prior matching divergence") {
    Matrix mu(1, 1), lv(1, 1), m(1, 1);
    mu << 0.3;
    m << 0.3;
    lv << 1.0;
    CHECK(prior_match_kld(mu, lv, m) == doctest::Approx((std::exp(1.0) - 2.0) / 2.0).epsilon(1e-12));
    lv << 0.0;
    CHECK(std::abs(prior_match_kld(mu, lv, m)) <= 1e-12);
    CHECK(reconstruction_error(mu, mu) == 0.0);

    Rng rng(6);
    for (int k = 0; k < 5; ++k) {
        const Matrix a = standard_normal(1, 3, rng);
        const Matrix l = standard_normal(1, 3, rng) * 0.5;
        const Matrix p = standard_normal(1, 3, rng);
        const double closed = prior_match_kld(a, l, p);
        CHECK(closed >= 0.0);
        const double mc = oracle::mc_kld_diag(a.row(0).transpose(), l.row(0).transpose(), p.row(0).transpose(), 100000,
                                              50 + k);
        CHECK(closed == doctest::Approx(mc).epsilon(0.02));
    }
}

TEST_CASE("training lowers the loss") {
    const auto d = toy_data();
    VaeModel model(Variant::fo, kDims, 7);
    PriorBank bank(kDims.latent);
    place_priors(model, bank, d.task0);
    const auto st = train_task(model, d.task0.features, d.task0.labels, bank, 0, nullptr, quick(40));
    REQUIRE(st.epoch_total.size() == 40);
    CHECK(st.epoch_total.back() < st.epoch_total.front());
    std::size_t rises = 0;
    for (std::size_t e = 1; e < st.epoch_total.size(); ++e)
        if (st.epoch_total[e] > st.epoch_total[e - 1]) ++rises;
    CHECK(rises <= 2 * st.epoch_total.size() / 5);
    CHECK(model.task_of(0) == 0);
    CHECK_THROWS_AS(train_task(model, d.task0.features, d.task0.labels, bank, 1, nullptr, quick(1)), Error);
}

TEST_CASE("frozen decoder stays bitwise identical on later tasks") {
    const auto d = toy_data();
    VaeModel model(Variant::fo, kDims, 8);
    PriorBank bank(kDims.latent);
    auto cfg = quick(5);
    place_priors(model, bank, d.task0);
    train_task(model, d.task0.features, d.task0.labels, bank, 0, nullptr, cfg);
    bank.freeze_all();
    const nn::Mlp before = model.decoder;
    const nn::Mlp enc_before = model.encoder;
    cfg.frozen_decoder = true;
    place_priors(model, bank, d.task1);
    train_task(model, d.task1.features, d.task1.labels, bank, 1, nullptr, cfg);
    CHECK(model.decoder == before);
    CHECK_FALSE(model.encoder == enc_before);
}

TEST_CASE("task heads are isolated and the shared decoder is task independent") {
    const auto d = toy_data();
    VaeModel model(Variant::fod, kDims, 9);
    PriorBank bank(kDims.latent);
    const auto cfg = quick(5);
    const auto ns = first_task(model, bank, d.task0, cfg);
    const DecoderHead head0 = model.heads.at(0);
    place_priors(model, bank, d.task1);
    train_task(model, d.task1.features, d.task1.labels, bank, 1, &ns, cfg);
    CHECK(model.heads.size() == 2);
    CHECK(model.heads.at(0) == head0);
    CHECK_THROWS_AS(model.decoder_for(5), Error);

    VaeModel fo(Variant::fo, kDims, 9);
    Rng rng(1);
    const Matrix z = standard_normal(3, kDims.latent, rng);
    const std::vector<ClassId> y = {0, 1, 2};
    CHECK(decode(fo, z, 0, y) == decode(fo, z, 3, y));
}

TEST_CASE("projected updates leave earlier inputs untouched") {
    const auto d = toy_data();
    VaeModel model(Variant::fo, kDims, 10);
    PriorBank bank(kDims.latent);
    auto cfg = quick(10);
    cfg.projection_stage = ProjectionStage::both;
    const auto ns = first_task(model, bank, d.task0, cfg);
    const nn::Mlp before = model.decoder;
    place_priors(model, bank, d.task1);
    const auto st = train_task(model, d.task1.features, d.task1.labels, bank, 1, &ns, cfg);
    CHECK(st.projected);
    for (std::size_t k = 0; k < 3; ++k) {
        const Matrix dw = model.decoder.layers()[k].weight - before.layers()[k].weight;
        CHECK(dw.norm() > 0.0);
        // Component of the update acting on the complement of the selected span.
        const Matrix leak = dw - project_gradient(dw, ns.layer(k).basis);
        CHECK(leak.norm() <= 1e-10 * dw.norm());
        CHECK(model.decoder.layers()[k].bias == before.layers()[k].bias);
    }
}

TEST_CASE("an identity projector reproduces the unprojected update") {
    const auto d = toy_data();
    VaeModel base(Variant::fod, kDims, 12);
    PriorBank bank(kDims.latent);
    const auto cfg = quick(3);
    first_task(base, bank, d.task0, cfg);
    bank.freeze_all();
    place_priors(base, bank, d.task1);

    NullSpaceState identity(base.projected_input_dims());
    for (std::size_t k = 0; k < identity.layer_count(); ++k) {
        const auto n = base.projected_input_dims()[k];
        identity.accumulate(k, Matrix::Identity(n, n));
        identity.compute_projector(k);
        REQUIRE(identity.layer(k).selected == static_cast<std::size_t>(n));
    }
    VaeModel plain = base;
    VaeModel projected = base;
    train_task(plain, d.task1.features, d.task1.labels, bank, 1, nullptr, cfg);
    train_task(projected, d.task1.features, d.task1.labels, bank, 1, &identity, cfg);
    for (std::size_t l = 0; l < 2; ++l)
        CHECK((plain.decoder.layers()[l].weight - projected.decoder.layers()[l].weight).norm() <= 1e-10);
    CHECK((plain.heads.at(1).last_weight - projected.heads.at(1).last_weight).norm() <= 1e-10);
}

TEST_CASE("generation is seeded and centred on the class prior") {
    const auto d = toy_data();
    VaeModel model(Variant::fo, kDims, 14);
    PriorBank bank(kDims.latent);
    place_priors(model, bank, d.task0);
    train_task(model, d.task0.features, d.task0.labels, bank, 0, nullptr, quick(2));
    const auto a = generate(model, bank, nullptr, 1, 50, 99);
    const auto b = generate(model, bank, nullptr, 1, 50, 99);
    CHECK(a.features == b.features);
    CHECK(a.labels == std::vector<ClassId>(50, 1));
    CHECK_THROWS_AS(generate(model, bank, nullptr, 3, 5, 1), Error);

    // An identity decoder exposes the latent draws.
    VaeModel lin(Variant::fo, VaeDims{4, 4, 4, 1}, 1);
    std::vector<nn::DenseLayer> layers(3);
    for (auto& l : layers) {
        l.weight = Matrix::Identity(4, 4);
        l.bias = Vector::Zero(4);
    }
    lin.decoder = nn::make_mlp(layers);
    lin.class_task[0] = 0;
    PriorBank pb(4);
    pb.add(0, Vector::LinSpaced(4, -3.0, 3.0));
    const auto draws = generate(lin, pb, nullptr, 0, 10000, 5);
    const Vector m = draws.features.colwise().mean().transpose();
    CHECK((m - pb.mean(0)).norm() <= 5.0 / 100.0 * 2.0);
}

TEST_CASE("model persistence round trips") {
    const auto d = toy_data();
    VaeModel model(Variant::fodce, kDims, 15);
    PriorBank bank(kDims.latent);
    first_task(model, bank, d.task0, quick(2));
    CHECK(model.embeddings.size() == 2);
    std::stringstream ss;
    model.save(ss, bank.content_hash());
    std::uint64_t hash = 0;
    const auto back = VaeModel::load(ss, "mem", &hash);
    CHECK(hash == bank.content_hash());
    CHECK(back.variant == model.variant);
    CHECK(back.decoder == model.decoder);
    CHECK(back.encoder == model.encoder);
    CHECK(back.heads.at(0) == model.heads.at(0));
    CHECK(back.embeddings.at(0) == model.embeddings.at(0));
    CHECK(back.class_task == model.class_task);
}
