#pragma once

// Conditional VAE over feature vectors with class-conditional gaussian priors.
//
// Variants:
//   ceo     single N(0, I) prior; class embeddings appended to every layer input
//   fo      FPI multi-gaussian prior; one static decoder
//   fod     fo + per-task decoder heads (last weight and all decoder biases)
//   fodce   fod + class embeddings in encoder and decoder
//   cgil    one unconditional VAE per class, decoders kept per class
//   upper   no generative model; all real features are kept

#include "incvae/common.hpp"
#include "incvae/dataio.hpp"
#include "incvae/nn.hpp"
#include "incvae/nullspace.hpp"
#include "incvae/priors.hpp"

#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace incvae {

enum class Variant { ceo, fo, fod, fodce, cgil_per_class, upper_bound };

std::string to_string(Variant v);
Variant variant_from_string(std::string_view s);
bool uses_embeddings(Variant v);
bool uses_task_heads(Variant v);
bool uses_multi_gaussian_prior(Variant v);
bool is_generative(Variant v);

struct VaeDims {
    Eigen::Index input = 64;
    Eigen::Index hidden = 64;
    Eigen::Index latent = 16;
    Eigen::Index embed = 10;
};

struct DecoderHead {
    Matrix last_weight;
    std::vector<Vector> biases;

    std::size_t parameter_count() const;
    bool operator==(const DecoderHead& o) const;
};

struct EncoderOutput {
    Matrix mu;      // batch x latent
    Matrix logvar;  // batch x latent, clamped to [kLogVarMin, kLogVarMax]
};

inline constexpr double kLogVarMin = -10.0;
inline constexpr double kLogVarMax = 10.0;

class VaeModel {
public:
    VaeModel() = default;
    VaeModel(Variant variant, VaeDims dims, std::uint64_t seed);

    Variant variant = Variant::fo;
    VaeDims dims;
    std::uint64_t seed = 0;
    nn::Mlp encoder;
    nn::Mlp decoder;
    std::map<TaskId, DecoderHead> heads;
    std::map<ClassId, Vector> embeddings;
    std::map<ClassId, nn::Mlp> class_decoders;
    std::map<ClassId, TaskId> class_task;

    Eigen::Index cond_dim() const { return uses_embeddings(variant) ? dims.embed : 0; }
    // Decoder with the task's head installed (static decoder for other variants).
    nn::Mlp decoder_for(TaskId task) const;
    // Embedding rows for a batch; empty matrix when the variant has none.
    Matrix cond_rows(std::span<const ClassId> labels) const;
    TaskId task_of(ClassId y) const;
    // Decoder layers whose weight gradients are null-space projected.
    std::vector<std::size_t> projected_layers() const;
    // Input widths of the projected layers, in projected_layers() order.
    std::vector<Eigen::Index> projected_input_dims() const;

    void save(std::ostream& out, std::uint64_t bank_hash) const;
    static VaeModel load(std::istream& in, const std::string& context, std::uint64_t* bank_hash = nullptr);
};

// Creates U(-0.1, 0.1) embeddings for classes that have none yet.
void add_embeddings(VaeModel& model, std::span<const ClassId> classes, Rng& rng);

// Splits raw encoder output (batch x 2*latent) into mean and clamped log-variance.
EncoderOutput split_encoder_output(const Matrix& raw, Eigen::Index latent);

EncoderOutput encode(const VaeModel& model, const Matrix& x_norm, std::span<const ClassId> labels);
Matrix reparameterize(const EncoderOutput& out, const Matrix& eps);
Matrix decode(const VaeModel& model, const Matrix& z, TaskId task, std::span<const ClassId> labels);

// Closed form KL(N(mu, diag exp(logvar)) || N(prior_mean, I)), averaged over rows.
double prior_match_kld(const Matrix& mu, const Matrix& logvar, const Matrix& prior_means);
// Squared error summed over features, averaged over rows.
double reconstruction_error(const Matrix& x, const Matrix& x_hat);

struct VaeLossTerms {
    double recon = 0.0;
    double prior_match = 0.0;
    double total = 0.0;
};

// Loss of a batch for the given noise draw (eps is batch x latent).
VaeLossTerms vae_loss(const VaeModel& model, const Matrix& x_norm, std::span<const ClassId> labels,
                      const PriorBank& bank, TaskId task, const Matrix& eps, double kappa = 1.0);

enum class ProjectionStage { pre_adam, post_adam, both };

std::string to_string(ProjectionStage s);
ProjectionStage projection_stage_from_string(std::string_view s);

struct TrainConfig {
    std::size_t epochs = 100;
    std::size_t batch_size = 64;
    double lr = 5e-4;
    double lr_ortho = 5e-5;
    double kappa = 1.0;
    bool frozen_decoder = false;
    ProjectionStage projection_stage = ProjectionStage::both;
    // CGIL per-class VAEs train for epochs / cgil_epoch_divisor epochs.
    std::size_t cgil_epoch_divisor = 4;
    std::uint64_t seed = 0;
};

struct TrainStats {
    std::vector<double> epoch_total;
    std::vector<double> epoch_recon;
    std::vector<double> epoch_prior_match;
    bool projected = false;
};

// Trains encoder and decoder on one task. `x_norm` holds the task's records in
// model space (normalized when classwise normalization is enabled). When
// `nullspace` carries projectors, shared decoder weight gradients are projected.
TrainStats train_task(VaeModel& model, const Matrix& x_norm, std::span<const ClassId> labels, const PriorBank& bank,
                      TaskId task, const NullSpaceState* nullspace, const TrainConfig& config);

// Mean encoder latent per class (the FPI anchors).
AnchorMap class_anchors(const VaeModel& model, const Matrix& x_norm, std::span<const ClassId> labels);

// Inputs of every projected decoder layer for one task: `passes` reparametrized
// posterior draws per record plus the same number of prior draws.
std::vector<Matrix> collect_decoder_inputs(const VaeModel& model, const Matrix& x_norm,
                                           std::span<const ClassId> labels, const PriorBank& bank, TaskId task,
                                           std::size_t passes, std::uint64_t seed);

// n samples of class y: z ~ N(mu_y, I), decoded with the class's task head and
// de-normalized when `stats` is given.
Dataset generate(const VaeModel& model, const PriorBank& bank, const ClasswiseStats* stats, ClassId y, std::size_t n,
                 std::uint64_t seed);

// Decoder output (model space) for fixed latents of class y.
Matrix decode_class(const VaeModel& model, const Matrix& z, ClassId y);

}  // namespace incvae
