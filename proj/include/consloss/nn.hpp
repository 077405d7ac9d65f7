#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "consloss/tensor.hpp"

namespace consloss {

enum class LayerKind : std::uint32_t {
    Dense = 0,          // affine map over the last axis (per pixel for images)
    Conv3x3 = 1,        // zero padding 1, stride 1 or 2, H x W x Cin -> H' x W' x Cout
    ReLU = 2,
    Tanh = 3,
    Sigmoid = 4,
    SoftmaxPerPixel = 5,  // softmax over the last axis
    GaussianNoise = 6,    // additive N(0, noise_std^2) in training mode, identity in eval
};

std::string_view to_string(LayerKind kind);

struct LayerSpec {
    LayerKind kind = LayerKind::ReLU;
    std::size_t in = 0;
    std::size_t out = 0;
    std::size_t stride = 1;
    double noise_std = 0.0;

    static LayerSpec dense(std::size_t in, std::size_t out);
    static LayerSpec conv3x3(std::size_t in, std::size_t out, std::size_t stride = 1);
    static LayerSpec relu();
    static LayerSpec tanh();
    static LayerSpec sigmoid();
    static LayerSpec softmax();
    static LayerSpec gaussian_noise(double std);

    bool has_params() const noexcept { return kind == LayerKind::Dense || kind == LayerKind::Conv3x3; }

    friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

// Trainable tensor with its gradient accumulator and Adam moments.
struct Param {
    Tensor value;
    Tensor grad;
    Tensor adam_m;
    Tensor adam_v;
    std::uint64_t step_count = 0;

    Param() = default;
    explicit Param(Tensor v);
};

enum class Mode { Train, Eval };

// Whether backward() accumulates parameter gradients or only propagates to the input.
enum class ParamGrads { Accumulate, Skip };

struct ForwardTrace {
    Tensor input;
    std::vector<Tensor> activations;  // activations[i] is the output of layer i

    const Tensor& output() const { return activations.empty() ? input : activations.back(); }
};

struct AdamHyper {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps_hat = 1e-8;
};

class Network {
public:
    Network() = default;
    // Weights uniform in [-s, s], s = sqrt(6 / (fan_in + fan_out)); biases zero.
    Network(std::vector<LayerSpec> layers, std::uint64_t seed);
    // Rebuilds a network from explicit parameter values (checkpoint loading).
    Network(std::vector<LayerSpec> layers, std::vector<std::vector<Tensor>> values);

    const std::vector<LayerSpec>& layers() const noexcept { return layers_; }
    std::vector<Param>& layer_params(std::size_t i) { return params_.at(i); }
    const std::vector<Param>& layer_params(std::size_t i) const { return params_.at(i); }

    std::vector<Param*> params();
    std::vector<const Param*> params() const;
    std::size_t parameter_count() const;

    // Validates the layer chain against an input shape and returns the output shape.
    Shape output_shape(const Shape& input) const;

    // rng is required when mode == Train and the network contains GaussianNoise.
    ForwardTrace forward(const Tensor& input, Mode mode, Rng* rng = nullptr) const;

    // Reverse-mode pass. Returns d(objective)/d(input); accumulates parameter
    // gradients into Param::grad unless grads == ParamGrads::Skip.
    Tensor backward(const ForwardTrace& trace, const Tensor& output_grad,
                    ParamGrads grads = ParamGrads::Accumulate);

    void zero_grad();
    void adam_step(const AdamHyper& hyper);

    friend bool same_values(const Network& a, const Network& b);

private:
    std::vector<LayerSpec> layers_;
    std::vector<std::vector<Param>> params_;
};

// Bias-corrected Adam over a set of parameters; zeroes grads afterwards.
// Throws NumericError if any gradient is non-finite.
void adam_step(std::span<Param* const> params, const AdamHyper& hyper);

// Scalar objective on a network output with its gradient.
struct Objective {
    std::function<double(const Tensor&)> value;
    std::function<Tensor(const Tensor&)> gradient;
};

// Multiplies the analytic gradient entry of largest magnitude in params()[param]
// by factor before comparison (planted-fault detection).
struct GradFault {
    std::size_t param = 0;
    double factor = 2.0;
};

// Compares backward-mode parameter gradients with central differences, entry by
// entry, in eval mode. Relative error is |a - n| / max(|a|, |n|, 1e-3).
// Leaves the network's values and grads as they were.
double finite_diff_check(Network& net, const Tensor& input, const Objective& objective, double h,
                         std::optional<GradFault> fault = std::nullopt);

// Checkpoint: "CLNN" magic, u32 version, u32 layer count, then per layer its
// spec and parameter shapes followed by little-endian float64 values.
void save_network(const Network& net, const std::filesystem::path& path);
Network load_network(const std::filesystem::path& path);

}  // namespace consloss
