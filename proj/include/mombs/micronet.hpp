#pragma once

// Miniature fully connected classifier with analytic backprop, SGD and a
// designated feature map that can be disturbed multiplicatively.
//
// Layer k maps activation a[k] (dims[k]) to a[k+1] (dims[k+1]):
//     z[k]   = W[k] a[k] + b[k]
//     a[k+1] = act(z[k])            for hidden layers
//     probs  = head(z[L-1])         for the last layer
// Activation index 0 is the input; index k >= 1 is the output of hidden
// layer k. The perturbation layer names one of those activations; when a
// disturbance t is supplied it is replaced by f * (1 + t) before the next
// layer consumes it.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "mombs/random.hpp"

namespace mombs {

enum class Head { sigmoid_binary, softmax_multiclass };
enum class Activation { tanh, relu };

inline constexpr double kProbabilityEpsilon = 1e-12;

inline std::string_view to_string(Head h) {
    return h == Head::sigmoid_binary ? "sigmoid" : "softmax";
}

inline Head parse_head(std::string_view s) {
    if (s == "sigmoid") return Head::sigmoid_binary;
    if (s == "softmax") return Head::softmax_multiclass;
    throw std::invalid_argument("unknown head '" + std::string(s) + "'");
}

inline std::string_view to_string(Activation a) { return a == Activation::tanh ? "tanh" : "relu"; }

inline Activation parse_activation(std::string_view s) {
    if (s == "tanh") return Activation::tanh;
    if (s == "relu") return Activation::relu;
    throw std::invalid_argument("unknown activation '" + std::string(s) + "'");
}

struct DenseLayer {
    Eigen::MatrixXd weights;  // out x in
    Eigen::VectorXd bias;     // out
};

struct MicroModel {
    std::vector<std::size_t> layer_dims;
    std::vector<DenseLayer> layers;
    std::size_t perturbation_layer = 0;
    Head head = Head::softmax_multiclass;
    Activation activation = Activation::tanh;

    std::size_t num_layers() const { return layers.size(); }
    std::size_t input_dim() const { return layer_dims.front(); }
    std::size_t feature_dim() const { return layer_dims[perturbation_layer]; }

    std::size_t num_classes() const {
        return head == Head::sigmoid_binary ? 2 : layer_dims.back();
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& l : layers) n += static_cast<std::size_t>(l.weights.size() + l.bias.size());
        return n;
    }
};

/// Same layout as the model parameters.
struct Gradients {
    std::vector<DenseLayer> layers;

    std::size_t size() const {
        std::size_t n = 0;
        for (const auto& l : layers) n += static_cast<std::size_t>(l.weights.size() + l.bias.size());
        return n;
    }

    /// Row-major weights then bias, layer by layer.
    std::vector<double> flatten() const {
        std::vector<double> out;
        out.reserve(size());
        for (const auto& l : layers) {
            for (Eigen::Index r = 0; r < l.weights.rows(); ++r)
                for (Eigen::Index c = 0; c < l.weights.cols(); ++c) out.push_back(l.weights(r, c));
            for (Eigen::Index r = 0; r < l.bias.size(); ++r) out.push_back(l.bias(r));
        }
        return out;
    }
};

struct ForwardTrace {
    std::vector<Eigen::VectorXd> pre_activations;  // z[k], one per layer
    std::vector<Eigen::VectorXd> activations;      // a[0..L-1]; a[pl] is post-disturbance
    Eigen::VectorXd features;                      // f at the perturbation layer, undisturbed
    std::optional<Eigen::VectorXd> disturbance;    // t, when supplied
    Eigen::VectorXd probs;                         // class probabilities, length C
    std::size_t perturbation_layer = 0;
    Head head = Head::softmax_multiclass;
};

struct PerturbationSpec {
    std::size_t draws = 8;  // G
    double gamma = 0.3;
    std::uint64_t rng_seed = 0;
};

inline void validate(const PerturbationSpec& spec) {
    if (spec.draws < 1) throw std::invalid_argument("perturbation needs at least one draw");
    if (!(spec.gamma >= 0.0) || !std::isfinite(spec.gamma))
        throw std::invalid_argument("perturbation gamma must be finite and >= 0");
}

namespace detail {

inline bool perturbation_layer_valid(std::size_t layer, std::size_t num_layers) {
    // A model without hidden layers only has its input to disturb.
    return num_layers == 1 ? layer == 0 : (layer >= 1 && layer < num_layers);
}

inline double sigmoid(double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

inline Eigen::VectorXd softmax(const Eigen::VectorXd& z) {
    const Eigen::VectorXd e = (z.array() - z.maxCoeff()).exp().matrix();
    return e / e.sum();
}

inline Eigen::VectorXd activate(const Eigen::VectorXd& z, Activation act) {
    if (act == Activation::tanh) return z.array().tanh().matrix();
    return z.cwiseMax(0.0);
}

/// d act / d z evaluated from z.
inline Eigen::VectorXd activation_slope(const Eigen::VectorXd& z, Activation act) {
    if (act == Activation::tanh) return (1.0 - z.array().tanh().square()).matrix();
    return (z.array() > 0.0).cast<double>().matrix();
}

}  // namespace detail

/// Throws std::invalid_argument when a model invariant is broken.
inline void validate(const MicroModel& m) {
    if (m.layer_dims.size() < 2) throw std::invalid_argument("layer_dims needs at least two entries");
    for (auto d : m.layer_dims)
        if (d == 0) throw std::invalid_argument("layer dimensions must be positive");
    if (m.layers.size() + 1 != m.layer_dims.size())
        throw std::invalid_argument("layer count does not match layer_dims");
    for (std::size_t k = 0; k < m.layers.size(); ++k) {
        const auto& l = m.layers[k];
        if (static_cast<std::size_t>(l.weights.rows()) != m.layer_dims[k + 1] ||
            static_cast<std::size_t>(l.weights.cols()) != m.layer_dims[k] ||
            static_cast<std::size_t>(l.bias.size()) != m.layer_dims[k + 1])
            throw std::invalid_argument("layer " + std::to_string(k) + " has the wrong shape");
        if (!l.weights.allFinite() || !l.bias.allFinite())
            throw std::invalid_argument("layer " + std::to_string(k) + " has non-finite parameters");
    }
    if (!detail::perturbation_layer_valid(m.perturbation_layer, m.layers.size()))
        throw std::invalid_argument("perturbation layer " + std::to_string(m.perturbation_layer) +
                                    " is not a hidden activation");
    if (m.head == Head::sigmoid_binary && m.layer_dims.back() != 1)
        throw std::invalid_argument("sigmoid head needs a single output unit");
    if (m.head == Head::softmax_multiclass && m.layer_dims.back() < 2)
        throw std::invalid_argument("softmax head needs at least two output units");
}

/// Weights ~ U[-sqrt(3/fan_in), +sqrt(3/fan_in)], biases zero.
/// `perturbation_layer` defaults to the first hidden activation.
inline MicroModel init_model(std::vector<std::size_t> layer_dims, Head head,
                             std::optional<std::size_t> perturbation_layer, std::uint64_t seed,
                             Activation activation = Activation::tanh) {
    if (layer_dims.size() < 2) throw std::invalid_argument("layer_dims needs at least two entries");
    MicroModel m;
    m.layer_dims = std::move(layer_dims);
    m.head = head;
    m.activation = activation;
    const std::size_t num_layers = m.layer_dims.size() - 1;
    m.perturbation_layer = perturbation_layer.value_or(num_layers == 1 ? 0 : 1);

    Rng rng(derive_seed(seed, stream::model_init));
    for (std::size_t k = 0; k < num_layers; ++k) {
        const auto in = static_cast<Eigen::Index>(m.layer_dims[k]);
        const auto out = static_cast<Eigen::Index>(m.layer_dims[k + 1]);
        const double limit = std::sqrt(3.0 / static_cast<double>(in));
        DenseLayer layer{Eigen::MatrixXd(out, in), Eigen::VectorXd::Zero(out)};
        for (Eigen::Index r = 0; r < out; ++r)
            for (Eigen::Index c = 0; c < in; ++c) layer.weights(r, c) = rng.uniform(-limit, limit);
        m.layers.push_back(std::move(layer));
    }
    validate(m);
    return m;
}

/// f * (1 + t), elementwise.
inline Eigen::VectorXd apply_disturbance(const Eigen::VectorXd& f, const Eigen::VectorXd& t) {
    if (f.size() != t.size()) throw std::invalid_argument("disturbance shape mismatch");
    return f.cwiseProduct((1.0 + t.array()).matrix());
}

/// t^g with entries i.i.d. U[-gamma, +gamma]; a pure function of (spec.rng_seed, g).
inline Eigen::VectorXd draw_disturbance(std::size_t dim, const PerturbationSpec& spec, std::size_t g) {
    Rng rng(derive_seed(spec.rng_seed, stream::perturbation, g));
    Eigen::VectorXd t(static_cast<Eigen::Index>(dim));
    for (Eigen::Index i = 0; i < t.size(); ++i) t(i) = rng.uniform(-spec.gamma, spec.gamma);
    return t;
}

inline Eigen::VectorXd perturb_features(const Eigen::VectorXd& f, const PerturbationSpec& spec,
                                        std::size_t g) {
    return apply_disturbance(f, draw_disturbance(static_cast<std::size_t>(f.size()), spec, g));
}

inline ForwardTrace forward(const MicroModel& m, const Eigen::VectorXd& x,
                            const std::optional<Eigen::VectorXd>& disturbance = std::nullopt) {
    if (static_cast<std::size_t>(x.size()) != m.input_dim())
        throw std::invalid_argument("input has " + std::to_string(x.size()) + " features, model expects " +
                                    std::to_string(m.input_dim()));
    if (disturbance && static_cast<std::size_t>(disturbance->size()) != m.feature_dim())
        throw std::invalid_argument("disturbance does not match the feature map shape");

    const std::size_t L = m.num_layers();
    ForwardTrace tr;
    tr.head = m.head;
    tr.perturbation_layer = m.perturbation_layer;
    tr.disturbance = disturbance;
    tr.pre_activations.reserve(L);
    tr.activations.reserve(L);

    Eigen::VectorXd a = x;
    for (std::size_t k = 0; k < L; ++k) {
        if (k == m.perturbation_layer) {
            tr.features = a;
            if (disturbance) a = apply_disturbance(a, *disturbance);
        }
        tr.activations.push_back(a);
        Eigen::VectorXd z = m.layers[k].weights * a + m.layers[k].bias;
        if (k + 1 < L) a = detail::activate(z, m.activation);
        tr.pre_activations.push_back(std::move(z));
    }

    const Eigen::VectorXd& logits = tr.pre_activations.back();
    if (m.head == Head::sigmoid_binary) {
        const double p = detail::sigmoid(logits(0));
        tr.probs.resize(2);
        tr.probs << 1.0 - p, p;
    } else {
        tr.probs = detail::softmax(logits);
    }
    return tr;
}

inline void check_label(std::size_t num_classes, int label) {
    if (label < 0 || static_cast<std::size_t>(label) >= num_classes)
        throw std::invalid_argument("label " + std::to_string(label) + " out of range for " +
                                    std::to_string(num_classes) + " classes");
}

/// -log p[label] with p clipped to [eps, 1 - eps]. For the sigmoid head the
/// two-entry vector [1 - p, p] gives the binary cross-entropy.
inline double ce_loss(const Eigen::VectorXd& probs, int label) {
    check_label(static_cast<std::size_t>(probs.size()), label);
    const double p = std::clamp(probs(label), kProbabilityEpsilon, 1.0 - kProbabilityEpsilon);
    return -std::log(p);
}

/// Binary form: -y log p - (1 - y) log(1 - p).
inline double ce_loss(double p_positive, int label) {
    check_label(2, label);
    const double p = std::clamp(p_positive, kProbabilityEpsilon, 1.0 - kProbabilityEpsilon);
    return label == 1 ? -std::log(p) : -std::log(1.0 - p);
}

/// dl/dz at the output layer: probs - onehot(label), or p - y for the sigmoid head.
inline Eigen::VectorXd output_error(const ForwardTrace& tr, int label) {
    check_label(static_cast<std::size_t>(tr.probs.size()), label);
    if (tr.head == Head::sigmoid_binary) {
        Eigen::VectorXd e(1);
        e(0) = tr.probs(1) - static_cast<double>(label);
        return e;
    }
    Eigen::VectorXd e = tr.probs;
    e(label) -= 1.0;
    return e;
}

inline Gradients zero_gradients(const MicroModel& m) {
    Gradients g;
    for (const auto& l : m.layers)
        g.layers.push_back({Eigen::MatrixXd::Zero(l.weights.rows(), l.weights.cols()),
                            Eigen::VectorXd::Zero(l.bias.size())});
    return g;
}

/// into += weight * g
inline void accumulate(Gradients& into, const Gradients& g, double weight = 1.0) {
    if (into.layers.size() != g.layers.size()) throw std::invalid_argument("gradient shape mismatch");
    for (std::size_t k = 0; k < g.layers.size(); ++k) {
        into.layers[k].weights.noalias() += weight * g.layers[k].weights;
        into.layers[k].bias.noalias() += weight * g.layers[k].bias;
    }
}

inline Gradients backward(const ForwardTrace& tr, int label, const MicroModel& m) {
    const std::size_t L = m.num_layers();
    if (tr.pre_activations.size() != L || tr.activations.size() != L ||
        tr.perturbation_layer != m.perturbation_layer)
        throw std::invalid_argument("trace does not belong to this model");
    for (std::size_t k = 0; k < L; ++k)
        if (static_cast<std::size_t>(tr.activations[k].size()) != m.layer_dims[k] ||
            static_cast<std::size_t>(tr.pre_activations[k].size()) != m.layer_dims[k + 1])
            throw std::invalid_argument("trace does not belong to this model");

    Gradients g;
    g.layers.resize(L);
    Eigen::VectorXd delta = output_error(tr, label);  // dl/dz[L-1]
    for (std::size_t k = L; k-- > 0;) {
        g.layers[k].weights = delta * tr.activations[k].transpose();
        g.layers[k].bias = delta;
        if (k == 0) break;
        Eigen::VectorXd da = m.layers[k].weights.transpose() * delta;  // dl/da[k]
        if (k == m.perturbation_layer && tr.disturbance)
            da = da.cwiseProduct((1.0 + tr.disturbance->array()).matrix());
        delta = da.cwiseProduct(detail::activation_slope(tr.pre_activations[k - 1], m.activation));
    }
    return g;
}

/// Every parameter minus eta * gradient.
inline MicroModel sgd_step(MicroModel m, const Gradients& g, double eta) {
    if (g.layers.size() != m.layers.size()) throw std::invalid_argument("gradient shape mismatch");
    for (std::size_t k = 0; k < g.layers.size(); ++k) {
        const auto& gl = g.layers[k];
        if (gl.weights.rows() != m.layers[k].weights.rows() || gl.weights.cols() != m.layers[k].weights.cols() ||
            gl.bias.size() != m.layers[k].bias.size())
            throw std::invalid_argument("gradient shape mismatch");
        if (!gl.weights.allFinite() || !gl.bias.allFinite())
            throw std::invalid_argument("non-finite gradient in layer " + std::to_string(k));
    }
    if (eta == 0.0) return m;
    for (std::size_t k = 0; k < g.layers.size(); ++k) {
        m.layers[k].weights.noalias() -= eta * g.layers[k].weights;
        m.layers[k].bias.noalias() -= eta * g.layers[k].bias;
    }
    return m;
}

inline double sample_loss(const MicroModel& m, const Eigen::VectorXd& x, int label) {
    return ce_loss(forward(m, x).probs, label);
}

/// Central differences over every parameter of `m` for an arbitrary scalar
/// objective `loss(const MicroModel&)`.
template <class LossFn>
Gradients finite_diff_gradient(const MicroModel& m, LossFn&& loss, double h) {
    if (!(h > 0.0)) throw std::invalid_argument("finite-difference step must be positive");
    MicroModel probe = m;
    Gradients g = zero_gradients(m);
    auto central = [&](double& param) {
        const double saved = param;
        param = saved + h;
        const double up = loss(static_cast<const MicroModel&>(probe));
        param = saved - h;
        const double down = loss(static_cast<const MicroModel&>(probe));
        param = saved;
        return (up - down) / (2.0 * h);
    };
    for (std::size_t k = 0; k < m.layers.size(); ++k) {
        auto& w = probe.layers[k].weights;
        for (Eigen::Index r = 0; r < w.rows(); ++r)
            for (Eigen::Index c = 0; c < w.cols(); ++c) g.layers[k].weights(r, c) = central(w(r, c));
        auto& b = probe.layers[k].bias;
        for (Eigen::Index r = 0; r < b.size(); ++r) g.layers[k].bias(r) = central(b(r));
    }
    return g;
}

inline Gradients finite_diff_gradient(const MicroModel& m, const Eigen::VectorXd& x, int label, double h) {
    return finite_diff_gradient(m, [&](const MicroModel& mm) { return sample_loss(mm, x, label); }, h);
}

}  // namespace mombs
