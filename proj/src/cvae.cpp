#include "incvae/cvae.hpp"

#include "incvae/binio.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>

namespace incvae {

std::string to_string(Variant v) {
    switch (v) {
        case Variant::ceo: return "ceo";
        case Variant::fo: return "fo";
        case Variant::fod: return "fod";
        case Variant::fodce: return "fodce";
        case Variant::cgil_per_class: return "cgil";
        case Variant::upper_bound: return "upper";
    }
    return "?";
}

Variant variant_from_string(std::string_view s) {
    if (s == "ceo") return Variant::ceo;
    if (s == "fo") return Variant::fo;
    if (s == "fod") return Variant::fod;
    if (s == "fodce") return Variant::fodce;
    if (s == "cgil") return Variant::cgil_per_class;
    if (s == "upper") return Variant::upper_bound;
    throw Error("unknown variant '" + std::string(s) + "' (expected ceo, fo, fod, fodce, cgil, upper)");
}

bool uses_embeddings(Variant v) { return v == Variant::ceo || v == Variant::fodce; }
bool uses_task_heads(Variant v) { return v == Variant::fod || v == Variant::fodce; }
bool uses_multi_gaussian_prior(Variant v) { return v == Variant::fo || v == Variant::fod || v == Variant::fodce; }
bool is_generative(Variant v) { return v != Variant::upper_bound; }

std::string to_string(ProjectionStage s) {
    switch (s) {
        case ProjectionStage::pre_adam: return "pre_adam";
        case ProjectionStage::post_adam: return "post_adam";
        case ProjectionStage::both: return "both";
    }
    return "?";
}

ProjectionStage projection_stage_from_string(std::string_view s) {
    if (s == "pre_adam") return ProjectionStage::pre_adam;
    if (s == "post_adam") return ProjectionStage::post_adam;
    if (s == "both") return ProjectionStage::both;
    throw Error("unknown projection stage '" + std::string(s) + "'");
}

std::size_t DecoderHead::parameter_count() const {
    std::size_t n = static_cast<std::size_t>(last_weight.size());
    for (const auto& b : biases) n += static_cast<std::size_t>(b.size());
    return n;
}

bool DecoderHead::operator==(const DecoderHead& o) const {
    if (last_weight.rows() != o.last_weight.rows() || last_weight.cols() != o.last_weight.cols() ||
        biases.size() != o.biases.size() || last_weight != o.last_weight)
        return false;
    for (std::size_t i = 0; i < biases.size(); ++i)
        if (biases[i].size() != o.biases[i].size() || biases[i] != o.biases[i]) return false;
    return true;
}

namespace {

std::vector<Eigen::Index> encoder_sizes(const VaeDims& d) { return {d.input, d.hidden, d.hidden, 2 * d.latent}; }
std::vector<Eigen::Index> decoder_sizes(const VaeDims& d) { return {d.latent, d.hidden, d.hidden, d.input}; }

}  // namespace

VaeModel::VaeModel(Variant v, VaeDims d, std::uint64_t s) : variant(v), dims(d), seed(s) {
    if (d.input <= 0 || d.hidden <= 0 || d.latent <= 0 || d.embed <= 0) throw Error("vae dimensions must be positive");
    Rng rng(derive_seed(s, 0x11));
    const auto es = encoder_sizes(d);
    const auto ds = decoder_sizes(d);
    encoder = nn::Mlp(es, cond_dim(), rng);
    decoder = nn::Mlp(ds, cond_dim(), rng);
}

nn::Mlp VaeModel::decoder_for(TaskId task) const {
    if (!uses_task_heads(variant)) return decoder;
    const auto it = heads.find(task);
    if (it == heads.end()) throw Error("no decoder head for task " + std::to_string(task + 1));
    nn::Mlp out = decoder;
    auto& layers = out.layers();
    layers.back().weight = it->second.last_weight;
    for (std::size_t l = 0; l < layers.size(); ++l) layers[l].bias = it->second.biases[l];
    return out;
}

Matrix VaeModel::cond_rows(std::span<const ClassId> labels) const {
    if (!uses_embeddings(variant)) return {};
    Matrix c(static_cast<Eigen::Index>(labels.size()), dims.embed);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto it = embeddings.find(labels[i]);
        if (it == embeddings.end()) throw Error("no conditional embedding for class " + std::to_string(labels[i]));
        c.row(static_cast<Eigen::Index>(i)) = it->second.transpose();
    }
    return c;
}

TaskId VaeModel::task_of(ClassId y) const {
    const auto it = class_task.find(y);
    if (it == class_task.end()) throw Error("class " + std::to_string(y) + " was never trained");
    return it->second;
}

std::vector<std::size_t> VaeModel::projected_layers() const {
    const std::size_t n = decoder.layers().size();
    std::vector<std::size_t> out(uses_task_heads(variant) ? n - 1 : n);
    std::iota(out.begin(), out.end(), std::size_t{0});
    return out;
}

std::vector<Eigen::Index> VaeModel::projected_input_dims() const {
    std::vector<Eigen::Index> out;
    for (auto l : projected_layers()) out.push_back(decoder.layers()[l].in_dim());
    return out;
}

void VaeModel::save(std::ostream& out, std::uint64_t bank_hash) const {
    binio::Writer w(out);
    w.magic("VAE1");
    w.u32(1);
    w.str(to_string(variant));
    w.u32(static_cast<std::uint32_t>(dims.input));
    w.u32(static_cast<std::uint32_t>(dims.hidden));
    w.u32(static_cast<std::uint32_t>(dims.latent));
    w.u32(static_cast<std::uint32_t>(dims.embed));
    w.u64(seed);
    w.u64(bank_hash);
    encoder.save(out);
    decoder.save(out);
    w.u32(static_cast<std::uint32_t>(heads.size()));
    for (const auto& [t, h] : heads) {
        w.u32(t);
        w.matrix_f64(h.last_weight);
        w.u32(static_cast<std::uint32_t>(h.biases.size()));
        for (const auto& b : h.biases) w.matrix_f64(b);
    }
    w.u32(static_cast<std::uint32_t>(embeddings.size()));
    for (const auto& [y, e] : embeddings) {
        w.u32(y);
        w.matrix_f64(e);
    }
    w.u32(static_cast<std::uint32_t>(class_decoders.size()));
    for (const auto& [y, d] : class_decoders) {
        w.u32(y);
        d.save(out);
    }
    w.u32(static_cast<std::uint32_t>(class_task.size()));
    for (const auto& [y, t] : class_task) {
        w.u32(y);
        w.u32(t);
    }
}

VaeModel VaeModel::load(std::istream& in, const std::string& context, std::uint64_t* bank_hash) {
    binio::Reader r(in, context);
    r.expect_magic("VAE1");
    if (const auto v = r.u32(); v != 1) r.fail("unsupported model version " + std::to_string(v));
    VaeModel m;
    try {
        m.variant = variant_from_string(r.str());
    } catch (const Error& e) {
        r.fail(e.what());
    }
    m.dims.input = r.u32();
    m.dims.hidden = r.u32();
    m.dims.latent = r.u32();
    m.dims.embed = r.u32();
    m.seed = r.u64();
    const auto hash = r.u64();
    if (bank_hash != nullptr) *bank_hash = hash;
    m.encoder = nn::Mlp::load(in, context);
    m.decoder = nn::Mlp::load(in, context);
    const auto n_heads = r.u32();
    for (std::uint32_t i = 0; i < n_heads; ++i) {
        const TaskId t = r.u32();
        DecoderHead h;
        h.last_weight = r.matrix_f64();
        const auto nb = r.u32();
        if (nb > 64) r.fail("implausible bias count");
        for (std::uint32_t k = 0; k < nb; ++k) h.biases.emplace_back(r.matrix_f64());
        m.heads.emplace(t, std::move(h));
    }
    const auto n_emb = r.u32();
    for (std::uint32_t i = 0; i < n_emb; ++i) {
        const ClassId y = r.u32();
        m.embeddings.emplace(y, Vector(r.matrix_f64()));
    }
    const auto n_dec = r.u32();
    for (std::uint32_t i = 0; i < n_dec; ++i) {
        const ClassId y = r.u32();
        m.class_decoders.emplace(y, nn::Mlp::load(in, context));
    }
    const auto n_ct = r.u32();
    for (std::uint32_t i = 0; i < n_ct; ++i) {
        const ClassId y = r.u32();
        m.class_task[y] = r.u32();
    }
    return m;
}

void add_embeddings(VaeModel& model, std::span<const ClassId> classes, Rng& rng) {
    if (!uses_embeddings(model.variant)) return;
    for (auto y : classes)
        if (!model.embeddings.contains(y)) model.embeddings.emplace(y, uniform_matrix(model.dims.embed, 1, -0.1, 0.1, rng));
}

EncoderOutput split_encoder_output(const Matrix& raw, Eigen::Index latent) {
    if (raw.cols() != 2 * latent) throw Error("encoder output width is not 2 x latent");
    return {raw.leftCols(latent), raw.rightCols(latent).cwiseMax(kLogVarMin).cwiseMin(kLogVarMax)};
}

EncoderOutput encode(const VaeModel& model, const Matrix& x_norm, std::span<const ClassId> labels) {
    if (x_norm.cols() != model.dims.input) throw Error("encode: input dimension mismatch");
    if (static_cast<std::size_t>(x_norm.rows()) != labels.size()) throw Error("encode: label count mismatch");
    const Matrix cond = model.cond_rows(labels);
    const Matrix raw = model.encoder.predict(x_norm, cond.size() > 0 ? &cond : nullptr);
    return split_encoder_output(raw, model.dims.latent);
}

Matrix reparameterize(const EncoderOutput& out, const Matrix& eps) {
    if (eps.rows() != out.mu.rows() || eps.cols() != out.mu.cols() || out.logvar.rows() != out.mu.rows() ||
        out.logvar.cols() != out.mu.cols())
        throw Error("reparameterize: shape mismatch");
    return out.mu + ((0.5 * out.logvar.array()).exp() * eps.array()).matrix();
}

Matrix decode(const VaeModel& model, const Matrix& z, TaskId task, std::span<const ClassId> labels) {
    if (z.cols() != model.dims.latent) throw Error("decode: latent dimension mismatch");
    if (static_cast<std::size_t>(z.rows()) != labels.size()) throw Error("decode: label count mismatch");
    const Matrix cond = model.cond_rows(labels);
    const auto dec = model.decoder_for(task);
    return dec.predict(z, cond.size() > 0 ? &cond : nullptr);
}

double prior_match_kld(const Matrix& mu, const Matrix& logvar, const Matrix& prior_means) {
    if (mu.rows() != logvar.rows() || mu.cols() != logvar.cols() || prior_means.rows() != mu.rows() ||
        prior_means.cols() != mu.cols())
        throw Error("prior_match_kld: shape mismatch");
    if (mu.rows() == 0) return 0.0;
    const auto lv = logvar.array();
    const double s = 0.5 * (lv.exp() + (mu - prior_means).array().square() - 1.0 - lv).sum();
    return s / static_cast<double>(mu.rows());
}

double reconstruction_error(const Matrix& x, const Matrix& x_hat) {
    if (x.rows() != x_hat.rows() || x.cols() != x_hat.cols()) throw Error("reconstruction_error: shape mismatch");
    if (x.rows() == 0) return 0.0;
    return (x - x_hat).squaredNorm() / static_cast<double>(x.rows());
}

namespace {

Matrix prior_rows(const PriorBank& bank, std::span<const ClassId> labels, Eigen::Index latent) {
    Matrix p(static_cast<Eigen::Index>(labels.size()), latent);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (!bank.contains(labels[i])) throw Error("no prior mean for class " + std::to_string(labels[i]));
        p.row(static_cast<Eigen::Index>(i)) = bank.mean(labels[i]).transpose();
    }
    return p;
}

struct StepResult {
    VaeLossTerms terms;
    nn::Gradients enc;
    nn::Gradients dec;
};

// Forward and backward pass of the negative conditional ELBO for one batch.
StepResult vae_forward_backward(const nn::Mlp& enc, const nn::Mlp& dec, const Matrix& x, const Matrix* cond,
                                const Matrix& prior, const Matrix& eps, double kappa) {
    const Eigen::Index latent = prior.cols();
    const auto b = static_cast<double>(x.rows());
    const auto enc_trace = enc.forward(x, cond);
    const Matrix& raw = enc_trace.output;
    const auto out = split_encoder_output(raw, latent);
    const Matrix sigma = (0.5 * out.logvar.array()).exp().matrix();
    const Matrix z = out.mu + sigma.cwiseProduct(eps);
    const auto dec_trace = dec.forward(z, cond);
    const Matrix diff = dec_trace.output - x;

    StepResult r;
    r.terms.recon = diff.squaredNorm() / b;
    r.terms.prior_match = prior_match_kld(out.mu, out.logvar, prior);
    r.terms.total = r.terms.recon + kappa * r.terms.prior_match;

    r.dec = dec.backward(dec_trace, (2.0 / b) * diff);
    const Matrix& dz = r.dec.input;
    Matrix d_raw(x.rows(), 2 * latent);
    d_raw.leftCols(latent) = dz + (kappa / b) * (out.mu - prior);
    Matrix d_lv = 0.5 * dz.cwiseProduct(eps).cwiseProduct(sigma) +
                  (0.5 * kappa / b) * (out.logvar.array().exp() - 1.0).matrix();
    const auto raw_lv = raw.rightCols(latent).array();
    d_lv = (raw_lv < kLogVarMin || raw_lv > kLogVarMax).select(0.0, d_lv);
    d_raw.rightCols(latent) = d_lv;
    r.enc = enc.backward(enc_trace, d_raw);
    return r;
}

DecoderHead fresh_head(const nn::Mlp& decoder, Rng& rng) {
    DecoderHead h;
    const auto& last = decoder.layers().back();
    const double limit = std::sqrt(6.0 / static_cast<double>(last.in_dim() + last.out_dim()));
    h.last_weight = uniform_matrix(last.out_dim(), last.in_dim(), -limit, limit, rng);
    for (const auto& l : decoder.layers()) h.biases.push_back(Vector::Zero(l.out_dim()));
    return h;
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch, Rng& rng) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t at = 0; at < n; at += batch)
        out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(at),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n, at + batch)));
    return out;
}

Matrix gather_rows(const Matrix& m, const std::vector<std::size_t>& rows) { return m(rows, Eigen::all); }

std::vector<ClassId> gather_labels(std::span<const ClassId> labels, const std::vector<std::size_t>& rows) {
    std::vector<ClassId> out;
    out.reserve(rows.size());
    for (auto r : rows) out.push_back(labels[r]);
    return out;
}

// Unconditional VAE with a N(0, I) prior for a single class.
nn::Mlp train_class_vae(const VaeDims& dims, const Matrix& x, std::size_t epochs, const TrainConfig& config,
                        std::uint64_t seed) {
    Rng rng(seed);
    const auto es = encoder_sizes(dims);
    const auto ds = decoder_sizes(dims);
    nn::Mlp enc(es, 0, rng);
    nn::Mlp dec(ds, 0, rng);
    nn::AdamState enc_opt({config.lr});
    nn::AdamState dec_opt({config.lr});
    for (std::size_t e = 0; e < epochs; ++e) {
        for (const auto& rows : epoch_batches(static_cast<std::size_t>(x.rows()), config.batch_size, rng)) {
            const Matrix xb = gather_rows(x, rows);
            const Matrix prior = Matrix::Zero(xb.rows(), dims.latent);
            const Matrix eps = standard_normal(xb.rows(), dims.latent, rng);
            const auto step = vae_forward_backward(enc, dec, xb, nullptr, prior, eps, config.kappa);
            nn::adam_step(nn::mlp_slots(enc, step.enc), enc_opt);
            nn::adam_step(nn::mlp_slots(dec, step.dec), dec_opt);
        }
    }
    return dec;
}

}  // namespace

VaeLossTerms vae_loss(const VaeModel& model, const Matrix& x_norm, std::span<const ClassId> labels,
                      const PriorBank& bank, TaskId task, const Matrix& eps, double kappa) {
    const auto out = encode(model, x_norm, labels);
    const Matrix prior = prior_rows(bank, labels, model.dims.latent);
    const Matrix x_hat = decode(model, reparameterize(out, eps), task, labels);
    VaeLossTerms t;
    t.recon = reconstruction_error(x_norm, x_hat);
    t.prior_match = prior_match_kld(out.mu, out.logvar, prior);
    t.total = t.recon + kappa * t.prior_match;
    return t;
}

TrainStats train_task(VaeModel& model, const Matrix& x_norm, std::span<const ClassId> labels, const PriorBank& bank,
                      TaskId task, const NullSpaceState* nullspace, const TrainConfig& config) {
    if (x_norm.cols() != model.dims.input) throw Error("train_task: input dimension mismatch");
    if (static_cast<std::size_t>(x_norm.rows()) != labels.size()) throw Error("train_task: label count mismatch");
    if (labels.empty()) throw Error("train_task: empty task");
    if (config.batch_size == 0) throw Error("train_task: batch size must be positive");
    if (model.variant == Variant::upper_bound) throw Error("train_task: the upper-bound baseline has no model");

    std::vector<ClassId> task_classes(labels.begin(), labels.end());
    std::sort(task_classes.begin(), task_classes.end());
    task_classes.erase(std::unique(task_classes.begin(), task_classes.end()), task_classes.end());
    for (auto y : task_classes) {
        if (model.class_task.contains(y)) throw Error("class " + std::to_string(y) + " was already trained");
        if (model.variant != Variant::cgil_per_class && !bank.contains(y))
            throw Error("missing prior mean for class " + std::to_string(y) + " (run the prior step first)");
    }

    TrainStats stats;
    Rng rng(derive_seed(config.seed, 0x7a5c, task));

    if (model.variant == Variant::cgil_per_class) {
        const std::size_t epochs = std::max<std::size_t>(1, config.epochs / std::max<std::size_t>(1, config.cgil_epoch_divisor));
        for (auto y : task_classes) {
            std::vector<std::size_t> rows;
            for (std::size_t i = 0; i < labels.size(); ++i)
                if (labels[i] == y) rows.push_back(i);
            model.class_decoders.emplace(
                y, train_class_vae(model.dims, gather_rows(x_norm, rows), epochs, config, derive_seed(config.seed, y, 0xc61)));
            model.class_task[y] = task;
        }
        return stats;
    }

    if (uses_task_heads(model.variant)) {
        if (model.heads.contains(task)) throw Error("decoder head for task " + std::to_string(task + 1) + " exists");
        model.heads.emplace(task, fresh_head(model.decoder, rng));
    }
    add_embeddings(model, task_classes, rng);

    const auto projected = model.projected_layers();
    bool projecting = false;
    if (nullspace != nullptr) {
        if (nullspace->layer_count() != projected.size())
            throw Error("train_task: null space state does not match the decoder");
        for (std::size_t k = 0; k < projected.size(); ++k)
            projecting = projecting || nullspace->layer(k).has_projector;
    }
    stats.projected = projecting;
    const bool heads = uses_task_heads(model.variant);
    const bool decoder_frozen = config.frozen_decoder && task > 0;

    nn::Mlp dec = model.decoder_for(task);
    const std::size_t n_layers = dec.layers().size();
    // Shared biases cannot be protected by input-space projection, so a static
    // decoder keeps them fixed once projection starts.
    for (auto& l : dec.layers()) {
        l.train_weight = !decoder_frozen;
        l.train_bias = !decoder_frozen && (heads || !projecting);
    }

    nn::AdamState enc_opt({config.lr});
    nn::AdamState shared_opt({projecting ? config.lr_ortho : config.lr});
    nn::AdamState head_opt({config.lr});
    nn::AdamState emb_opt({config.lr});

    const bool project_pre = projecting && config.projection_stage != ProjectionStage::post_adam;
    const bool project_post = projecting && config.projection_stage != ProjectionStage::pre_adam;

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        double sum_total = 0.0;
        double sum_recon = 0.0;
        double sum_kld = 0.0;
        for (const auto& rows : epoch_batches(labels.size(), config.batch_size, rng)) {
            const Matrix xb = gather_rows(x_norm, rows);
            const auto yb = gather_labels(labels, rows);
            const Matrix cond = model.cond_rows(yb);
            const Matrix* cond_ptr = cond.size() > 0 ? &cond : nullptr;
            const Matrix prior = prior_rows(bank, yb, model.dims.latent);
            const Matrix eps = standard_normal(xb.rows(), model.dims.latent, rng);
            auto step = vae_forward_backward(model.encoder, dec, xb, cond_ptr, prior, eps, config.kappa);
            const auto bsz = static_cast<double>(rows.size());
            sum_total += step.terms.total * bsz;
            sum_recon += step.terms.recon * bsz;
            sum_kld += step.terms.prior_match * bsz;

            nn::adam_step(nn::mlp_slots(model.encoder, step.enc), enc_opt);

            if (!decoder_frozen) {
                if (project_pre) {
                    for (std::size_t k = 0; k < projected.size(); ++k) {
                        if (!nullspace->layer(k).has_projector) continue;
                        auto& g = step.dec.layers[projected[k]].weight;
                        g = project_gradient(g, nullspace->layer(k).basis);
                    }
                }
                // Shared group: weights of projected layers, plus biases for a static decoder.
                std::vector<nn::ParamSlot> shared;
                std::vector<std::size_t> shared_proj;  // projected-layer index per slot, or npos
                std::vector<nn::ParamSlot> head;
                auto& layers = dec.layers();
                for (std::size_t l = 0; l < n_layers; ++l) {
                    const bool is_head_weight = heads && l + 1 == n_layers;
                    auto w = nn::slot(layers[l].weight, step.dec.layers[l].weight, layers[l].train_weight);
                    auto b = nn::slot(layers[l].bias, step.dec.layers[l].bias, layers[l].train_bias);
                    if (is_head_weight) {
                        head.push_back(w);
                    } else {
                        shared.push_back(w);
                        const auto it = std::find(projected.begin(), projected.end(), l);
                        shared_proj.push_back(it == projected.end() ? std::string::npos
                                                                    : static_cast<std::size_t>(it - projected.begin()));
                    }
                    if (heads) {
                        head.push_back(b);
                    } else {
                        shared.push_back(b);
                        shared_proj.push_back(std::string::npos);
                    }
                }
                std::function<void(std::size_t, Eigen::Ref<Matrix>)> transform;
                if (project_post) {
                    transform = [&](std::size_t i, Eigen::Ref<Matrix> delta) {
                        const auto k = shared_proj[i];
                        if (k == std::string::npos || !nullspace->layer(k).has_projector) return;
                        delta = project_gradient(delta, nullspace->layer(k).basis);
                    };
                }
                nn::adam_step(shared, shared_opt, transform);
                if (heads) nn::adam_step(head, head_opt);
            }

            if (cond_ptr != nullptr) {
                const Matrix cg = step.enc.cond + step.dec.cond;
                std::map<ClassId, Vector> grads;
                for (auto y : task_classes) grads.emplace(y, Vector::Zero(model.dims.embed));
                for (std::size_t i = 0; i < yb.size(); ++i) grads.at(yb[i]) += cg.row(static_cast<Eigen::Index>(i)).transpose();
                std::vector<nn::ParamSlot> slots;
                for (auto y : task_classes) slots.push_back(nn::slot(model.embeddings.at(y), grads.at(y)));
                nn::adam_step(slots, emb_opt);
            }
        }
        const auto n = static_cast<double>(labels.size());
        stats.epoch_total.push_back(sum_total / n);
        stats.epoch_recon.push_back(sum_recon / n);
        stats.epoch_prior_match.push_back(sum_kld / n);
    }

    // Write the trained decoder back: shared weights to the static decoder,
    // head parameters to the task's head.
    auto& shared_layers = model.decoder.layers();
    for (std::size_t l = 0; l < n_layers; ++l) {
        if (heads) {
            if (l + 1 < n_layers) shared_layers[l].weight = dec.layers()[l].weight;
        } else {
            shared_layers[l].weight = dec.layers()[l].weight;
            shared_layers[l].bias = dec.layers()[l].bias;
        }
    }
    if (heads) {
        auto& h = model.heads.at(task);
        h.last_weight = dec.layers().back().weight;
        for (std::size_t l = 0; l < n_layers; ++l) h.biases[l] = dec.layers()[l].bias;
    }
    for (auto y : task_classes) model.class_task[y] = task;
    return stats;
}

AnchorMap class_anchors(const VaeModel& model, const Matrix& x_norm, std::span<const ClassId> labels) {
    if (uses_embeddings(model.variant)) {
        for (auto y : labels)
            if (!model.embeddings.contains(y)) throw Error("class_anchors: embedding missing for class " + std::to_string(y));
    }
    const auto out = encode(model, x_norm, labels);
    std::map<ClassId, std::pair<Vector, std::size_t>> acc;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        auto [it, inserted] = acc.try_emplace(labels[i], Vector::Zero(model.dims.latent), 0);
        it->second.first += out.mu.row(static_cast<Eigen::Index>(i)).transpose();
        ++it->second.second;
    }
    AnchorMap anchors;
    for (auto& [y, p] : acc) anchors.emplace(y, p.first / static_cast<double>(p.second));
    return anchors;
}

std::vector<Matrix> collect_decoder_inputs(const VaeModel& model, const Matrix& x_norm,
                                           std::span<const ClassId> labels, const PriorBank& bank, TaskId task,
                                           std::size_t passes, std::uint64_t seed) {
    Rng rng(seed);
    const auto out = encode(model, x_norm, labels);
    const auto n = static_cast<Eigen::Index>(labels.size());
    const Eigen::Index total = n * static_cast<Eigen::Index>(passes);
    Matrix z(2 * total, model.dims.latent);
    std::vector<ClassId> z_labels;
    z_labels.reserve(static_cast<std::size_t>(2 * total));
    const Matrix prior = prior_rows(bank, labels, model.dims.latent);
    for (std::size_t p = 0; p < passes; ++p) {
        const Matrix eps = standard_normal(n, model.dims.latent, rng);
        z.middleRows(static_cast<Eigen::Index>(p) * n, n) = reparameterize(out, eps);
        z_labels.insert(z_labels.end(), labels.begin(), labels.end());
    }
    for (std::size_t p = 0; p < passes; ++p) {
        const Matrix eps = standard_normal(n, model.dims.latent, rng);
        z.middleRows(total + static_cast<Eigen::Index>(p) * n, n) = prior + eps;
        z_labels.insert(z_labels.end(), labels.begin(), labels.end());
    }
    const Matrix cond = model.cond_rows(z_labels);
    const auto dec = model.decoder_for(task);
    const auto trace = dec.forward(z, cond.size() > 0 ? &cond : nullptr);
    std::vector<Matrix> inputs;
    for (auto l : model.projected_layers()) inputs.push_back(trace.layers[l].input);
    return inputs;
}

Matrix decode_class(const VaeModel& model, const Matrix& z, ClassId y) {
    if (model.variant == Variant::cgil_per_class) {
        const auto it = model.class_decoders.find(y);
        if (it == model.class_decoders.end()) throw Error("no decoder for class " + std::to_string(y));
        return it->second.predict(z);
    }
    const std::vector<ClassId> labels(static_cast<std::size_t>(z.rows()), y);
    return decode(model, z, model.task_of(y), labels);
}

Dataset generate(const VaeModel& model, const PriorBank& bank, const ClasswiseStats* stats, ClassId y, std::size_t n,
                 std::uint64_t seed) {
    if (!is_generative(model.variant)) throw Error("generate: variant has no generative model");
    if (!bank.contains(y)) throw Error("generate: class " + std::to_string(y) + " not in prior bank");
    if (stats != nullptr && !stats->contains(y)) throw Error("generate: no classwise statistics for class " + std::to_string(y));
    Rng rng(seed);
    const auto rows = static_cast<Eigen::Index>(n);
    Matrix z = standard_normal(rows, model.dims.latent, rng);
    z.rowwise() += bank.mean(y).transpose();
    Dataset out;
    out.features = decode_class(model, z, y);
    out.labels.assign(n, y);
    if (stats != nullptr) out.features = stats->denormalize_rows(out.features, out.labels);
    return out;
}

}  // namespace incvae
