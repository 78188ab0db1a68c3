#pragma once

// Small fully connected networks with hand-written forward/backward passes and
// an Adam optimizer. Batches are row-major in the logical sense: one sample
// per row.

#include "incvae/common.hpp"

#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

namespace incvae::nn {

enum class Activation { relu, identity };

struct DenseLayer {
    Matrix weight;  // out x in
    Vector bias;    // out
    Activation activation = Activation::identity;
    bool train_weight = true;
    bool train_bias = true;

    Eigen::Index in_dim() const { return weight.cols(); }
    Eigen::Index out_dim() const { return weight.rows(); }
    std::size_t parameter_count() const { return static_cast<std::size_t>(weight.size() + bias.size()); }
};

struct LayerTrace {
    Matrix input;  // batch x in (hidden state, then the conditioning block if any)
    Matrix pre;    // batch x out, before the activation
};

struct ForwardTrace {
    std::vector<LayerTrace> layers;
    Matrix output;
};

struct LayerGrad {
    Matrix weight;
    Vector bias;
};

struct Gradients {
    std::vector<LayerGrad> layers;
    Matrix input;  // dL/d(network input), batch x input_dim
    Matrix cond;   // dL/d(conditioning block) summed over layers, batch x cond_dim
};

// Stack of dense layers. When cond_dim > 0 the same per-sample conditioning
// vector is appended to the input of every layer.
class Mlp {
public:
    Mlp() = default;
    // sizes = {in, h1, ..., out}; hidden layers use relu, the output identity.
    // Weights ~ U(+-sqrt(6 / (fan_in + fan_out))), biases zero.
    Mlp(std::span<const Eigen::Index> sizes, Eigen::Index cond_dim, Rng& rng);

    const std::vector<DenseLayer>& layers() const { return layers_; }
    std::vector<DenseLayer>& layers() { return layers_; }
    Eigen::Index input_dim() const { return input_dim_; }
    Eigen::Index output_dim() const;
    Eigen::Index cond_dim() const { return cond_dim_; }
    std::size_t parameter_count() const;

    // Checks that consecutive layer shapes chain and every parameter is finite.
    void validate() const;

    ForwardTrace forward(const Matrix& x, const Matrix* cond = nullptr) const;
    Matrix predict(const Matrix& x, const Matrix* cond = nullptr) const { return forward(x, cond).output; }
    Gradients backward(const ForwardTrace& trace, const Matrix& grad_output) const;

    void save(std::ostream& out) const;
    static Mlp load(std::istream& in, const std::string& context);

    bool operator==(const Mlp& other) const;

private:
    Mlp(std::vector<DenseLayer> layers, Eigen::Index input_dim, Eigen::Index cond_dim);
    friend Mlp make_mlp(std::vector<DenseLayer> layers, Eigen::Index cond_dim);

    std::vector<DenseLayer> layers_;
    Eigen::Index input_dim_ = 0;
    Eigen::Index cond_dim_ = 0;
};

// Builds an Mlp from explicit layers; throws when shapes do not chain.
Mlp make_mlp(std::vector<DenseLayer> layers, Eigen::Index cond_dim = 0);

struct AdamConfig {
    double lr = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// One optimizable tensor: values and gradient, viewed as rows x cols.
struct ParamSlot {
    double* value = nullptr;
    const double* grad = nullptr;
    Eigen::Index rows = 0;
    Eigen::Index cols = 0;
    bool trainable = true;

    Eigen::Index size() const { return rows * cols; }
};

ParamSlot slot(Matrix& value, const Matrix& grad, bool trainable = true);
ParamSlot slot(Vector& value, const Vector& grad, bool trainable = true);

class AdamState {
public:
    explicit AdamState(AdamConfig config = {}) : config_(config) {}

    const AdamConfig& config() const { return config_; }
    AdamConfig& config() { return config_; }
    std::uint64_t step_count() const { return step_; }
    const std::vector<Matrix>& first_moments() const { return m_; }
    const std::vector<Matrix>& second_moments() const { return v_; }

private:
    friend void adam_step(std::span<const ParamSlot>, AdamState&,
                          const std::function<void(std::size_t, Eigen::Ref<Matrix>)>&);
    AdamConfig config_;
    std::vector<Matrix> m_;
    std::vector<Matrix> v_;
    std::uint64_t step_ = 0;
};

// Bias-corrected Adam update. Moments are allocated on the first call and the
// slot shapes are fixed from then on. `transform`, when set, receives each
// trainable slot's step (the delta about to be added) and may modify it in
// place. Non-trainable slots are left bitwise untouched.
void adam_step(std::span<const ParamSlot> slots, AdamState& state,
               const std::function<void(std::size_t, Eigen::Ref<Matrix>)>& transform = {});

// Slots for every weight and bias of an Mlp, in layer order (w0, b0, w1, ...).
std::vector<ParamSlot> mlp_slots(Mlp& mlp, const Gradients& grads);

}  // namespace incvae::nn
