#include "consloss/nn.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>

#include <Eigen/Core>

#include "consloss/errors.hpp"

namespace consloss {

namespace {

constexpr std::array<char, 4> kMagic{'C', 'L', 'N', 'N'};
constexpr std::uint32_t kVersion = 1;

std::size_t conv_out(std::size_t n, std::size_t stride) { return (n - 1) / stride + 1; }

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using ConstVectorMap = Eigen::Map<const Eigen::RowVectorXd>;
using VectorMap = Eigen::Map<Eigen::RowVectorXd>;

// Unfolds zero-padded 3x3 neighbourhoods: one row of 9 * C per output pixel.
RowMatrix im2col(const Tensor& x, std::size_t stride) {
    const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
    const std::size_t ho = conv_out(h, stride), wo = conv_out(w, stride);
    RowMatrix cols = RowMatrix::Zero(static_cast<Eigen::Index>(ho * wo), static_cast<Eigen::Index>(9 * c));
    for (std::size_t oy = 0; oy < ho; ++oy) {
        for (std::size_t ox = 0; ox < wo; ++ox) {
            double* row = cols.data() + (oy * wo + ox) * 9 * c;
            for (std::size_t ky = 0; ky < 3; ++ky) {
                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - 1;
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                for (std::size_t kx = 0; kx < 3; ++kx) {
                    const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - 1;
                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                    const double* src = &x.data()[(static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * c];
                    std::copy(src, src + c, row + (ky * 3 + kx) * c);
                }
            }
        }
    }
    return cols;
}

void col2im(const RowMatrix& dcols, std::size_t stride, Tensor& dx) {
    const std::size_t h = dx.dim(0), w = dx.dim(1), c = dx.dim(2);
    const std::size_t ho = conv_out(h, stride), wo = conv_out(w, stride);
    for (std::size_t oy = 0; oy < ho; ++oy) {
        for (std::size_t ox = 0; ox < wo; ++ox) {
            const double* row = dcols.data() + (oy * wo + ox) * 9 * c;
            for (std::size_t ky = 0; ky < 3; ++ky) {
                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - 1;
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                for (std::size_t kx = 0; kx < 3; ++kx) {
                    const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - 1;
                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                    double* dst = &dx.data()[(static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * c];
                    const double* src = row + (ky * 3 + kx) * c;
                    for (std::size_t i = 0; i < c; ++i) dst[i] += src[i];
                }
            }
        }
    }
}

// y = x W^T + b over rows of x.
void affine_forward(const double* x, std::size_t rows, std::size_t in, const Param& weight, const Param& bias,
                    std::size_t out, double* y) {
    ConstMatrixMap xm(x, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(in));
    ConstMatrixMap wm(weight.value.data().data(), static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(in));
    ConstVectorMap bv(bias.value.data().data(), static_cast<Eigen::Index>(out));
    MatrixMap ym(y, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(out));
    ym.noalias() = xm * wm.transpose();
    ym.rowwise() += bv;
}

// Returns dx = dy W; accumulates dW += dy^T x and db += colsum(dy).
RowMatrix affine_backward(const double* x, const double* dy, std::size_t rows, std::size_t in, std::size_t out,
                          Param& weight, Param& bias, bool param_grads) {
    ConstMatrixMap xm(x, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(in));
    ConstMatrixMap gm(dy, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(out));
    ConstMatrixMap wm(weight.value.data().data(), static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(in));
    if (param_grads) {
        MatrixMap dw(weight.grad.data().data(), static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(in));
        VectorMap db(bias.grad.data().data(), static_cast<Eigen::Index>(out));
        dw.noalias() += gm.transpose() * xm;
        db += gm.colwise().sum();
    }
    RowMatrix dx(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(in));
    dx.noalias() = gm * wm;
    return dx;
}

Tensor conv_forward(const LayerSpec& spec, const std::vector<Param>& p, const Tensor& x) {
    const std::size_t ho = conv_out(x.dim(0), spec.stride), wo = conv_out(x.dim(1), spec.stride);
    Tensor y({ho, wo, spec.out});
    const RowMatrix cols = im2col(x, spec.stride);
    affine_forward(cols.data(), ho * wo, 9 * spec.in, p[0], p[1], spec.out, y.data().data());
    return y;
}

Tensor conv_backward(const LayerSpec& spec, std::vector<Param>& p, const Tensor& x, const Tensor& dy, bool param_grads) {
    const RowMatrix cols = im2col(x, spec.stride);
    const RowMatrix dcols = affine_backward(cols.data(), dy.data().data(), dy.dim(0) * dy.dim(1), 9 * spec.in,
                                            spec.out, p[0], p[1], param_grads);
    Tensor dx(x.shape(), 0.0);
    col2im(dcols, spec.stride, dx);
    return dx;
}

Tensor dense_forward(const LayerSpec& spec, const std::vector<Param>& p, const Tensor& x) {
    Shape shape = x.shape();
    shape.back() = spec.out;
    Tensor y(shape);
    affine_forward(x.data().data(), x.size() / spec.in, spec.in, p[0], p[1], spec.out, y.data().data());
    return y;
}

Tensor dense_backward(const LayerSpec& spec, std::vector<Param>& p, const Tensor& x, const Tensor& dy, bool param_grads) {
    const RowMatrix dx = affine_backward(x.data().data(), dy.data().data(), x.size() / spec.in, spec.in, spec.out,
                                         p[0], p[1], param_grads);
    return Tensor(x.shape(), std::vector<double>(dx.data(), dx.data() + dx.size()));
}

Shape layer_output_shape(const LayerSpec& spec, const Shape& in, std::size_t index) {
    auto fail = [&](const std::string& why) {
        throw StructuralError("layer " + std::to_string(index) + " (" + std::string(to_string(spec.kind)) +
                              "): " + why + ", input " + shape_string(in));
    };
    if (in.empty()) fail("empty input shape");
    switch (spec.kind) {
        case LayerKind::Dense: {
            if (in.back() != spec.in) fail("expected last axis " + std::to_string(spec.in));
            Shape out = in;
            out.back() = spec.out;
            return out;
        }
        case LayerKind::Conv3x3: {
            if (in.size() != 3 || in[2] != spec.in) fail("expected H x W x " + std::to_string(spec.in));
            return {conv_out(in[0], spec.stride), conv_out(in[1], spec.stride), spec.out};
        }
        default:
            return in;
    }
}

template <typename T>
void write_le(std::ostream& os, T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    std::uint64_t bits = 0;
    std::memcpy(&bits, &value, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T); ++i) os.put(static_cast<char>((bits >> (8 * i)) & 0xff));
}

template <typename T>
T read_le(std::istream& is) {
    std::uint64_t bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        const int c = is.get();
        if (c == EOF) throw StructuralError("checkpoint truncated");
        bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
    }
    T value;
    std::memcpy(&value, &bits, sizeof(T));
    return value;
}

std::vector<Param> make_params(const LayerSpec& spec, Rng& rng) {
    std::vector<Param> out;
    if (spec.kind == LayerKind::Dense) {
        const double s = std::sqrt(6.0 / static_cast<double>(spec.in + spec.out));
        Tensor w({spec.out, spec.in});
        for (auto& v : w.data()) v = rng.uniform(-s, s);
        out.emplace_back(std::move(w));
        out.emplace_back(Tensor({spec.out}, 0.0));
    } else if (spec.kind == LayerKind::Conv3x3) {
        const double s = std::sqrt(6.0 / static_cast<double>(9 * (spec.in + spec.out)));
        Tensor w({spec.out, 3, 3, spec.in});
        for (auto& v : w.data()) v = rng.uniform(-s, s);
        out.emplace_back(std::move(w));
        out.emplace_back(Tensor({spec.out}, 0.0));
    }
    return out;
}

void validate_spec(const LayerSpec& spec) {
    if (spec.has_params() && (spec.in == 0 || spec.out == 0)) {
        throw StructuralError(std::string(to_string(spec.kind)) + " needs positive in/out sizes");
    }
    if (spec.kind == LayerKind::Conv3x3 && spec.stride != 1 && spec.stride != 2) {
        throw StructuralError("Conv3x3 stride must be 1 or 2");
    }
    if (spec.kind == LayerKind::GaussianNoise && !(spec.noise_std >= 0.0)) {
        throw StructuralError("GaussianNoise std must be >= 0");
    }
}

}  // namespace

std::string_view to_string(LayerKind kind) {
    switch (kind) {
        case LayerKind::Dense: return "Dense";
        case LayerKind::Conv3x3: return "Conv3x3";
        case LayerKind::ReLU: return "ReLU";
        case LayerKind::Tanh: return "Tanh";
        case LayerKind::Sigmoid: return "Sigmoid";
        case LayerKind::SoftmaxPerPixel: return "SoftmaxPerPixel";
        case LayerKind::GaussianNoise: return "GaussianNoise";
    }
    return "?";
}

LayerSpec LayerSpec::dense(std::size_t in, std::size_t out) { return {LayerKind::Dense, in, out, 1, 0.0}; }
LayerSpec LayerSpec::conv3x3(std::size_t in, std::size_t out, std::size_t stride) {
    return {LayerKind::Conv3x3, in, out, stride, 0.0};
}
LayerSpec LayerSpec::relu() { return {LayerKind::ReLU}; }
LayerSpec LayerSpec::tanh() { return {LayerKind::Tanh}; }
LayerSpec LayerSpec::sigmoid() { return {LayerKind::Sigmoid}; }
LayerSpec LayerSpec::softmax() { return {LayerKind::SoftmaxPerPixel}; }
LayerSpec LayerSpec::gaussian_noise(double std) { return {LayerKind::GaussianNoise, 0, 0, 1, std}; }

Param::Param(Tensor v)
    : value(std::move(v)), grad(value.shape(), 0.0), adam_m(value.shape(), 0.0), adam_v(value.shape(), 0.0) {}

Network::Network(std::vector<LayerSpec> layers, std::uint64_t seed) : layers_(std::move(layers)) {
    Rng rng(seed);
    for (const auto& spec : layers_) {
        validate_spec(spec);
        params_.push_back(make_params(spec, rng));
    }
}

Network::Network(std::vector<LayerSpec> layers, std::vector<std::vector<Tensor>> values) : layers_(std::move(layers)) {
    if (values.size() != layers_.size()) throw StructuralError("parameter list does not match layer count");
    Rng unused(0);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        validate_spec(layers_[i]);
        auto expected = make_params(layers_[i], unused);
        if (expected.size() != values[i].size()) throw StructuralError("wrong parameter count for layer " + std::to_string(i));
        std::vector<Param> ps;
        for (std::size_t j = 0; j < expected.size(); ++j) {
            if (!expected[j].value.same_shape(values[i][j])) {
                throw StructuralError("parameter shape mismatch at layer " + std::to_string(i) + ": expected " +
                                      shape_string(expected[j].value.shape()) + ", got " +
                                      shape_string(values[i][j].shape()));
            }
            ps.emplace_back(std::move(values[i][j]));
        }
        params_.push_back(std::move(ps));
    }
}

std::vector<Param*> Network::params() {
    std::vector<Param*> out;
    for (auto& layer : params_)
        for (auto& p : layer) out.push_back(&p);
    return out;
}

std::vector<const Param*> Network::params() const {
    std::vector<const Param*> out;
    for (const auto& layer : params_)
        for (const auto& p : layer) out.push_back(&p);
    return out;
}

std::size_t Network::parameter_count() const {
    std::size_t n = 0;
    for (const auto* p : params()) n += p->value.size();
    return n;
}

Shape Network::output_shape(const Shape& input) const {
    Shape s = input;
    for (std::size_t i = 0; i < layers_.size(); ++i) s = layer_output_shape(layers_[i], s, i);
    return s;
}

ForwardTrace Network::forward(const Tensor& input, Mode mode, Rng* rng) const {
    output_shape(input.shape());
    ForwardTrace trace{input, {}};
    trace.activations.reserve(layers_.size());
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const LayerSpec& spec = layers_[i];
        const Tensor& x = i == 0 ? trace.input : trace.activations.back();
        Tensor y;
        switch (spec.kind) {
            case LayerKind::Dense:
                y = dense_forward(spec, params_[i], x);
                break;
            case LayerKind::Conv3x3:
                y = conv_forward(spec, params_[i], x);
                break;
            case LayerKind::ReLU:
                y = x;
                for (auto& v : y.data()) v = v > 0.0 ? v : 0.0;
                break;
            case LayerKind::Tanh:
                y = x;
                for (auto& v : y.data()) v = std::tanh(v);
                break;
            case LayerKind::Sigmoid:
                y = x;
                for (auto& v : y.data()) v = 1.0 / (1.0 + std::exp(-v));
                break;
            case LayerKind::SoftmaxPerPixel: {
                y = x;
                const std::size_t k = x.shape().back();
                for (std::size_t r = 0; r < y.size(); r += k) {
                    double mx = y[r];
                    for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, y[r + c]);
                    double total = 0.0;
                    for (std::size_t c = 0; c < k; ++c) {
                        y[r + c] = std::exp(y[r + c] - mx);
                        total += y[r + c];
                    }
                    for (std::size_t c = 0; c < k; ++c) y[r + c] /= total;
                }
                break;
            }
            case LayerKind::GaussianNoise:
                y = x;
                if (mode == Mode::Train && spec.noise_std > 0.0) {
                    if (rng == nullptr) throw StructuralError("GaussianNoise in training mode needs an rng");
                    for (auto& v : y.data()) v += spec.noise_std * rng->normal();
                }
                break;
        }
        trace.activations.push_back(std::move(y));
    }
    return trace;
}

Tensor Network::backward(const ForwardTrace& trace, const Tensor& output_grad, ParamGrads grads) {
    if (trace.activations.size() != layers_.size()) {
        throw StructuralError("trace has " + std::to_string(trace.activations.size()) + " activations for " +
                              std::to_string(layers_.size()) + " layers");
    }
    Shape s = trace.input.shape();
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        s = layer_output_shape(layers_[i], s, i);
        if (trace.activations[i].shape() != s) throw StructuralError("stale activation at layer " + std::to_string(i));
    }
    if (!output_grad.same_shape(trace.output())) {
        throw StructuralError("output gradient " + shape_string(output_grad.shape()) + " does not match output " +
                              shape_string(trace.output().shape()));
    }
    const bool param_grads = grads == ParamGrads::Accumulate;
    Tensor g = output_grad;
    for (std::size_t idx = layers_.size(); idx-- > 0;) {
        const LayerSpec& spec = layers_[idx];
        const Tensor& x = idx == 0 ? trace.input : trace.activations[idx - 1];
        const Tensor& y = trace.activations[idx];
        switch (spec.kind) {
            case LayerKind::Dense:
                g = dense_backward(spec, params_[idx], x, g, param_grads);
                break;
            case LayerKind::Conv3x3:
                g = conv_backward(spec, params_[idx], x, g, param_grads);
                break;
            case LayerKind::ReLU:
                for (std::size_t i = 0; i < g.size(); ++i)
                    if (!(x[i] > 0.0)) g[i] = 0.0;
                break;
            case LayerKind::Tanh:
                for (std::size_t i = 0; i < g.size(); ++i) g[i] *= 1.0 - y[i] * y[i];
                break;
            case LayerKind::Sigmoid:
                for (std::size_t i = 0; i < g.size(); ++i) g[i] *= y[i] * (1.0 - y[i]);
                break;
            case LayerKind::SoftmaxPerPixel: {
                const std::size_t k = y.shape().back();
                for (std::size_t r = 0; r < g.size(); r += k) {
                    double dot = 0.0;
                    for (std::size_t c = 0; c < k; ++c) dot += y[r + c] * g[r + c];
                    for (std::size_t c = 0; c < k; ++c) g[r + c] = y[r + c] * (g[r + c] - dot);
                }
                break;
            }
            case LayerKind::GaussianNoise:
                break;
        }
    }
    return g;
}

void Network::zero_grad() {
    for (auto* p : params()) p->grad.fill(0.0);
}

void Network::adam_step(const AdamHyper& hyper) {
    auto ps = params();
    consloss::adam_step(ps, hyper);
}

bool same_values(const Network& a, const Network& b) {
    if (a.layers_ != b.layers_) return false;
    auto pa = a.params();
    auto pb = b.params();
    for (std::size_t i = 0; i < pa.size(); ++i) {
        if (pa[i]->value.storage() != pb[i]->value.storage()) return false;
    }
    return true;
}

void adam_step(std::span<Param* const> params, const AdamHyper& hyper) {
    for (const Param* p : params) {
        if (!p->grad.all_finite()) throw NumericError("non-finite gradient reached the optimizer");
    }
    for (Param* p : params) {
        p->step_count += 1;
        const double t = static_cast<double>(p->step_count);
        const double c1 = 1.0 - std::pow(hyper.beta1, t);
        const double c2 = 1.0 - std::pow(hyper.beta2, t);
        for (std::size_t i = 0; i < p->value.size(); ++i) {
            const double g = p->grad[i];
            p->adam_m[i] = hyper.beta1 * p->adam_m[i] + (1.0 - hyper.beta1) * g;
            p->adam_v[i] = hyper.beta2 * p->adam_v[i] + (1.0 - hyper.beta2) * g * g;
            const double m_hat = p->adam_m[i] / c1;
            const double v_hat = p->adam_v[i] / c2;
            p->value[i] -= hyper.lr * m_hat / (std::sqrt(v_hat) + hyper.eps_hat);
        }
        p->grad.fill(0.0);
    }
}

double finite_diff_check(Network& net, const Tensor& input, const Objective& objective, double h,
                         std::optional<GradFault> fault) {
    auto ps = net.params();
    std::vector<Tensor> saved_grads;
    for (auto* p : ps) saved_grads.push_back(p->grad);
    net.zero_grad();
    const auto trace = net.forward(input, Mode::Eval);
    net.backward(trace, objective.gradient(trace.output()));
    std::vector<Tensor> analytic;
    for (auto* p : ps) analytic.push_back(p->grad);
    if (fault) {
        Tensor& g = analytic.at(fault->param);
        std::size_t worst = 0;
        for (std::size_t i = 1; i < g.size(); ++i)
            if (std::abs(g[i]) > std::abs(g[worst])) worst = i;
        g[worst] *= fault->factor;
    }
    double max_rel = 0.0;
    for (std::size_t pi = 0; pi < ps.size(); ++pi) {
        Tensor& value = ps[pi]->value;
        for (std::size_t i = 0; i < value.size(); ++i) {
            const double orig = value[i];
            value[i] = orig + h;
            const double plus = objective.value(net.forward(input, Mode::Eval).output());
            value[i] = orig - h;
            const double minus = objective.value(net.forward(input, Mode::Eval).output());
            value[i] = orig;
            const double numeric = (plus - minus) / (2.0 * h);
            const double a = analytic[pi][i];
            const double denom = std::max({std::abs(a), std::abs(numeric), 1e-3});
            max_rel = std::max(max_rel, std::abs(a - numeric) / denom);
        }
    }
    for (std::size_t pi = 0; pi < ps.size(); ++pi) ps[pi]->grad = saved_grads[pi];
    return max_rel;
}

void save_network(const Network& net, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write checkpoint " + path.string());
    os.write(kMagic.data(), kMagic.size());
    write_le<std::uint32_t>(os, kVersion);
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(net.layers().size()));
    for (std::size_t i = 0; i < net.layers().size(); ++i) {
        const LayerSpec& spec = net.layers()[i];
        write_le<std::uint32_t>(os, static_cast<std::uint32_t>(spec.kind));
        write_le<std::uint64_t>(os, spec.in);
        write_le<std::uint64_t>(os, spec.out);
        write_le<std::uint64_t>(os, spec.stride);
        write_le<double>(os, spec.noise_std);
        const auto& ps = net.layer_params(i);
        write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ps.size()));
        for (const auto& p : ps) {
            write_le<std::uint32_t>(os, static_cast<std::uint32_t>(p.value.rank()));
            for (auto d : p.value.shape()) write_le<std::uint64_t>(os, d);
            for (double v : p.value.data()) write_le<double>(os, v);
        }
    }
    if (!os) throw IoError("failed writing checkpoint " + path.string());
}

Network load_network(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint " + path.string());
    std::array<char, 4> magic{};
    is.read(magic.data(), magic.size());
    if (!is || magic != kMagic) throw StructuralError("not a network checkpoint: " + path.string());
    if (read_le<std::uint32_t>(is) != kVersion) throw StructuralError("unsupported checkpoint version");
    const auto n_layers = read_le<std::uint32_t>(is);
    std::vector<LayerSpec> layers;
    std::vector<std::vector<Tensor>> values;
    for (std::uint32_t i = 0; i < n_layers; ++i) {
        LayerSpec spec;
        const auto kind = read_le<std::uint32_t>(is);
        if (kind > static_cast<std::uint32_t>(LayerKind::GaussianNoise)) throw StructuralError("unknown layer kind");
        spec.kind = static_cast<LayerKind>(kind);
        spec.in = read_le<std::uint64_t>(is);
        spec.out = read_le<std::uint64_t>(is);
        spec.stride = read_le<std::uint64_t>(is);
        spec.noise_std = read_le<double>(is);
        const auto n_params = read_le<std::uint32_t>(is);
        std::vector<Tensor> layer_values;
        for (std::uint32_t j = 0; j < n_params; ++j) {
            const auto rank = read_le<std::uint32_t>(is);
            if (rank == 0 || rank > 8) throw StructuralError("bad parameter rank in checkpoint");
            Shape shape(rank);
            std::size_t count = 1;
            for (auto& d : shape) {
                d = read_le<std::uint64_t>(is);
                if (d == 0 || d > (1u << 24)) throw StructuralError("bad parameter dimension in checkpoint");
                count *= d;
            }
            std::vector<double> data(count);
            for (auto& v : data) v = read_le<double>(is);
            layer_values.emplace_back(std::move(shape), std::move(data));
        }
        layers.push_back(spec);
        values.push_back(std::move(layer_values));
    }
    return Network(std::move(layers), std::move(values));
}

}  // namespace consloss
