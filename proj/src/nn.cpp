#include "incvae/nn.hpp"

#include "incvae/binio.hpp"

#include <cmath>
#include <istream>
#include <ostream>
#include <string>

namespace incvae::nn {

namespace {

Matrix with_cond(const Matrix& h, const Matrix* cond) {
    if (cond == nullptr || cond->cols() == 0) return h;
    Matrix in(h.rows(), h.cols() + cond->cols());
    in << h, *cond;
    return in;
}

}  // namespace

Mlp::Mlp(std::span<const Eigen::Index> sizes, Eigen::Index cond_dim, Rng& rng)
    : input_dim_(sizes.empty() ? 0 : sizes.front()), cond_dim_(cond_dim) {
    if (sizes.size() < 2) throw Error("mlp needs at least an input and an output size");
    if (cond_dim < 0) throw Error("negative conditioning dimension");
    for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
        const Eigen::Index fan_in = sizes[l] + cond_dim;
        const Eigen::Index fan_out = sizes[l + 1];
        if (sizes[l] <= 0 || fan_out <= 0) throw Error("mlp layer sizes must be positive");
        const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        DenseLayer layer;
        layer.weight = uniform_matrix(fan_out, fan_in, -limit, limit, rng);
        layer.bias = Vector::Zero(fan_out);
        layer.activation = (l + 2 == sizes.size()) ? Activation::identity : Activation::relu;
        layers_.push_back(std::move(layer));
    }
}

Mlp::Mlp(std::vector<DenseLayer> layers, Eigen::Index input_dim, Eigen::Index cond_dim)
    : layers_(std::move(layers)), input_dim_(input_dim), cond_dim_(cond_dim) {}

Mlp make_mlp(std::vector<DenseLayer> layers, Eigen::Index cond_dim) {
    if (layers.empty()) throw Error("mlp needs at least one layer");
    const Eigen::Index in = layers.front().in_dim() - cond_dim;
    Mlp mlp(std::move(layers), in, cond_dim);
    mlp.validate();
    return mlp;
}

Eigen::Index Mlp::output_dim() const { return layers_.empty() ? 0 : layers_.back().out_dim(); }

std::size_t Mlp::parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.parameter_count();
    return n;
}

void Mlp::validate() const {
    if (layers_.empty()) throw Error("mlp has no layers");
    Eigen::Index expected = input_dim_;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const auto& layer = layers_[l];
        if (layer.in_dim() != expected + cond_dim_)
            throw Error("mlp layer " + std::to_string(l) + " input width does not chain");
        if (layer.bias.size() != layer.out_dim())
            throw Error("mlp layer " + std::to_string(l) + " bias size mismatch");
        if (!layer.weight.allFinite() || !layer.bias.allFinite())
            throw Error("mlp layer " + std::to_string(l) + " has non-finite parameters");
        expected = layer.out_dim();
    }
    if (layers_.back().activation != Activation::identity) throw Error("mlp output layer must be identity");
}

ForwardTrace Mlp::forward(const Matrix& x, const Matrix* cond) const {
    if (x.cols() != input_dim_)
        throw Error("mlp forward: input has " + std::to_string(x.cols()) + " columns, expected " +
                    std::to_string(input_dim_));
    const Eigen::Index given_cond = cond == nullptr ? 0 : cond->cols();
    if (given_cond != cond_dim_) throw Error("mlp forward: conditioning width mismatch");
    if (cond != nullptr && cond->rows() != x.rows()) throw Error("mlp forward: conditioning rows mismatch");

    ForwardTrace trace;
    trace.layers.reserve(layers_.size());
    Matrix h = x;
    for (const auto& layer : layers_) {
        LayerTrace lt;
        lt.input = with_cond(h, cond);
        lt.pre = lt.input * layer.weight.transpose();
        lt.pre.rowwise() += layer.bias.transpose();
        h = layer.activation == Activation::relu ? Matrix(lt.pre.cwiseMax(0.0)) : lt.pre;
        trace.layers.push_back(std::move(lt));
    }
    trace.output = std::move(h);
    return trace;
}

Gradients Mlp::backward(const ForwardTrace& trace, const Matrix& grad_output) const {
    if (trace.layers.size() != layers_.size()) throw Error("mlp backward: trace does not match network depth");
    const Eigen::Index batch = trace.output.rows();
    if (grad_output.rows() != batch || grad_output.cols() != output_dim())
        throw Error("mlp backward: output gradient shape mismatch");

    Gradients g;
    g.layers.resize(layers_.size());
    g.cond = Matrix::Zero(batch, cond_dim_);
    Matrix delta = grad_output;
    for (std::size_t li = layers_.size(); li-- > 0;) {
        const auto& layer = layers_[li];
        const auto& lt = trace.layers[li];
        if (lt.input.cols() != layer.in_dim() || lt.pre.cols() != layer.out_dim() || lt.input.rows() != batch)
            throw Error("mlp backward: stale trace for layer " + std::to_string(li));
        if (layer.activation == Activation::relu) delta = (lt.pre.array() > 0.0).select(delta, 0.0);
        g.layers[li].weight = delta.transpose() * lt.input;
        g.layers[li].bias = delta.colwise().sum().transpose();
        Matrix d_in = delta * layer.weight;
        const Eigen::Index h_width = layer.in_dim() - cond_dim_;
        if (cond_dim_ > 0) g.cond += d_in.rightCols(cond_dim_);
        delta = d_in.leftCols(h_width);
    }
    g.input = std::move(delta);
    return g;
}

void Mlp::save(std::ostream& out) const {
    binio::Writer w(out);
    w.magic("MLP1");
    w.u32(1);
    w.u32(static_cast<std::uint32_t>(input_dim_));
    w.u32(static_cast<std::uint32_t>(cond_dim_));
    w.u32(static_cast<std::uint32_t>(layers_.size()));
    for (const auto& l : layers_) {
        w.u32(l.activation == Activation::relu ? 1U : 0U);
        w.u32((l.train_weight ? 1U : 0U) | (l.train_bias ? 2U : 0U));
        w.matrix_f64(l.weight);
        w.matrix_f64(l.bias);
    }
}

Mlp Mlp::load(std::istream& in, const std::string& context) {
    binio::Reader r(in, context);
    r.expect_magic("MLP1");
    if (const auto v = r.u32(); v != 1) r.fail("unsupported mlp version " + std::to_string(v));
    const auto input_dim = static_cast<Eigen::Index>(r.u32());
    const auto cond_dim = static_cast<Eigen::Index>(r.u32());
    const auto n = r.u32();
    if (n == 0 || n > 64) r.fail("implausible layer count");
    std::vector<DenseLayer> layers(n);
    for (auto& l : layers) {
        l.activation = r.u32() == 1U ? Activation::relu : Activation::identity;
        const auto flags = r.u32();
        l.train_weight = (flags & 1U) != 0;
        l.train_bias = (flags & 2U) != 0;
        l.weight = r.matrix_f64();
        l.bias = r.matrix_f64();
        if (l.bias.cols() != 1) r.fail("bias is not a column vector");
    }
    Mlp mlp(std::move(layers), input_dim, cond_dim);
    try {
        mlp.validate();
    } catch (const Error& e) {
        r.fail(e.what());
    }
    return mlp;
}

bool Mlp::operator==(const Mlp& other) const {
    if (input_dim_ != other.input_dim_ || cond_dim_ != other.cond_dim_ || layers_.size() != other.layers_.size())
        return false;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const auto& a = layers_[l];
        const auto& b = other.layers_[l];
        if (a.activation != b.activation || a.weight.rows() != b.weight.rows() || a.weight.cols() != b.weight.cols() ||
            a.weight != b.weight || a.bias != b.bias)
            return false;
    }
    return true;
}

ParamSlot slot(Matrix& value, const Matrix& grad, bool trainable) {
    if (value.rows() != grad.rows() || value.cols() != grad.cols()) throw Error("parameter/gradient shape mismatch");
    return {value.data(), grad.data(), value.rows(), value.cols(), trainable};
}

ParamSlot slot(Vector& value, const Vector& grad, bool trainable) {
    if (value.size() != grad.size()) throw Error("parameter/gradient shape mismatch");
    return {value.data(), grad.data(), value.size(), 1, trainable};
}

void adam_step(std::span<const ParamSlot> slots, AdamState& state,
               const std::function<void(std::size_t, Eigen::Ref<Matrix>)>& transform) {
    if (state.m_.empty()) {
        for (const auto& s : slots) {
            state.m_.push_back(Matrix::Zero(s.rows, s.cols));
            state.v_.push_back(Matrix::Zero(s.rows, s.cols));
        }
    }
    if (state.m_.size() != slots.size()) throw Error("adam: slot count changed between steps");
    for (std::size_t i = 0; i < slots.size(); ++i) {
        if (state.m_[i].rows() != slots[i].rows || state.m_[i].cols() != slots[i].cols)
            throw Error("adam: shape mismatch for slot " + std::to_string(i));
    }
    ++state.step_;
    const auto& c = state.config_;
    const double t = static_cast<double>(state.step_);
    const double bc1 = 1.0 - std::pow(c.beta1, t);
    const double bc2 = 1.0 - std::pow(c.beta2, t);
    for (std::size_t i = 0; i < slots.size(); ++i) {
        const auto& s = slots[i];
        if (!s.trainable) continue;
        Eigen::Map<const Matrix> g(s.grad, s.rows, s.cols);
        Eigen::Map<Matrix> p(s.value, s.rows, s.cols);
        auto& m = state.m_[i];
        auto& v = state.v_[i];
        m = c.beta1 * m + (1.0 - c.beta1) * g;
        v = c.beta2 * v + (1.0 - c.beta2) * g.cwiseAbs2();
        Matrix step = -c.lr * ((m.array() / bc1) / ((v.array() / bc2).sqrt() + c.eps)).matrix();
        if (transform) transform(i, step);
        p += step;
    }
}

std::vector<ParamSlot> mlp_slots(Mlp& mlp, const Gradients& grads) {
    auto& layers = mlp.layers();
    if (grads.layers.size() != layers.size()) throw Error("gradient depth does not match network");
    std::vector<ParamSlot> out;
    out.reserve(layers.size() * 2);
    for (std::size_t l = 0; l < layers.size(); ++l) {
        out.push_back(slot(layers[l].weight, grads.layers[l].weight, layers[l].train_weight));
        out.push_back(slot(layers[l].bias, grads.layers[l].bias, layers[l].train_bias));
    }
    return out;
}

}  // namespace incvae::nn
