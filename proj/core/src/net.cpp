#include "inflight/net.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include <Eigen/Dense>

#include "inflight/errors.hpp"
#include "inflight/net_params.hpp"
#include "inflight/rng.hpp"

namespace inflight {

namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

constexpr int kConv1Channels = 6;
constexpr int kConv2Channels = 16;
constexpr int kKernel = 5;
constexpr int kFc1Width = 120;
constexpr int kFc2Width = 84;
constexpr int kMinSide = 16;     // smallest input that survives both conv+pool stages
constexpr int kEvalBatch = 64;   // internal batch size for inference paths

// Spatial geometry derived from the input size.
struct Geometry {
    int h0, w0, c0;
    int oh1, ow1;  // conv1 output
    int ph1, pw1;  // pool1 output
    int oh2, ow2;  // conv2 output
    int ph2, pw2;  // pool2 output
    int flat;      // flattened pool2 size

    Geometry(int h, int w, int c)
        : h0(h),
          w0(w),
          c0(c),
          oh1(h - kKernel + 1),
          ow1(w - kKernel + 1),
          ph1(oh1 / 2),
          pw1(ow1 / 2),
          oh2(ph1 - kKernel + 1),
          ow2(pw1 - kKernel + 1),
          ph2(oh2 / 2),
          pw2(ow2 / 2),
          flat(kConv2Channels * ph2 * pw2) {}
};

// Weights are stored row-major [out][in]; mapping that buffer column-major
// yields the transposed matrix Wt of shape [in, out]. All algebra below is
// phrased in terms of Wt: forward z = Wt^T x, backward dx = Wt dz,
// gradient dWt = x dz^T.
Eigen::Map<const MatrixXd> wt(const std::vector<double>& w, int in_dim, int out_dim) {
    return {w.data(), in_dim, out_dim};
}
Eigen::Map<MatrixXd> wt_mut(std::vector<double>& w, int in_dim, int out_dim) {
    return {w.data(), in_dim, out_dim};
}
Eigen::Map<const VectorXd> bias(const std::vector<double>& b) {
    return {b.data(), static_cast<Eigen::Index>(b.size())};
}
Eigen::Map<VectorXd> bias_mut(std::vector<double>& b) {
    return {b.data(), static_cast<Eigen::Index>(b.size())};
}

// Activation maps are [channels, H*W*B]: row = channel, column b*H*W + i*W + j.
// im2col turns such a map into patch columns for the conv GEMM; row layout
// (ci*k + ky)*k + kx matches the conv weight row layout.
void im2col(const MatrixXd& a, int h, int w, int oh, int ow, MatrixXd& p) {
    const int c = static_cast<int>(a.rows());
    const int hw = h * w, ohw = oh * ow;
    const int batch = static_cast<int>(a.cols()) / hw;
    for (int b = 0; b < batch; ++b)
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                double* dst = p.col(static_cast<Eigen::Index>(b) * ohw + oy * ow + ox).data();
                for (int ky = 0; ky < kKernel; ++ky)
                    for (int kx = 0; kx < kKernel; ++kx) {
                        const double* src = a.col(static_cast<Eigen::Index>(b) * hw + (oy + ky) * w + (ox + kx)).data();
                        for (int ci = 0; ci < c; ++ci) dst[(ci * kKernel + ky) * kKernel + kx] = src[ci];
                    }
            }
}

// Scatter-add transpose of im2col; `a` must be zero-initialized.
void col2im_add(const MatrixXd& p, int h, int w, int oh, int ow, MatrixXd& a) {
    const int c = static_cast<int>(a.rows());
    const int hw = h * w, ohw = oh * ow;
    const int batch = static_cast<int>(a.cols()) / hw;
    for (int b = 0; b < batch; ++b)
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                const double* src = p.col(static_cast<Eigen::Index>(b) * ohw + oy * ow + ox).data();
                for (int ky = 0; ky < kKernel; ++ky)
                    for (int kx = 0; kx < kKernel; ++kx) {
                        double* dst = a.col(static_cast<Eigen::Index>(b) * hw + (oy + ky) * w + (ox + kx)).data();
                        for (int ci = 0; ci < c; ++ci) dst[ci] += src[(ci * kKernel + ky) * kKernel + kx];
                    }
            }
}

// 2x2 average pooling, stride 2; trailing odd rows/columns are dropped.
void pool2(const MatrixXd& a, int h, int w, int ph, int pw, MatrixXd& ap) {
    const int hw = h * w, phw = ph * pw;
    const int batch = static_cast<int>(a.cols()) / hw;
    for (int b = 0; b < batch; ++b)
        for (int py = 0; py < ph; ++py)
            for (int px = 0; px < pw; ++px) {
                const Eigen::Index base = static_cast<Eigen::Index>(b) * hw + 2 * py * w + 2 * px;
                ap.col(static_cast<Eigen::Index>(b) * phw + py * pw + px) =
                    0.25 * (a.col(base) + a.col(base + 1) + a.col(base + w) + a.col(base + w + 1));
            }
}

void unpool2_add(const MatrixXd& dap, int h, int w, int ph, int pw, MatrixXd& da) {
    const int hw = h * w, phw = ph * pw;
    const int batch = static_cast<int>(da.cols()) / hw;
    for (int b = 0; b < batch; ++b)
        for (int py = 0; py < ph; ++py)
            for (int px = 0; px < pw; ++px) {
                const auto g = 0.25 * dap.col(static_cast<Eigen::Index>(b) * phw + py * pw + px);
                const Eigen::Index base = static_cast<Eigen::Index>(b) * hw + 2 * py * w + 2 * px;
                da.col(base) += g;
                da.col(base + 1) += g;
                da.col(base + w) += g;
                da.col(base + w + 1) += g;
            }
}

struct Forward {
    MatrixXd x0;   // [c0, h0*w0*B] input
    MatrixXd p1;   // conv1 patches
    MatrixXd a1;   // [c1, oh1*ow1*B] tanh(conv1)
    MatrixXd a1p;  // pooled
    MatrixXd p2;   // conv2 patches
    MatrixXd a2;   // [c2, oh2*ow2*B] tanh(conv2)
    MatrixXd f0;   // [flat, B] pooled conv2, flattened channel-major
    MatrixXd a3;   // [120, B]
    MatrixXd a4;   // [84, B] penultimate
    MatrixXd z5;   // [C, B] logits
};

void load_inputs(std::span<const Image> xs, const Geometry& g, MatrixXd& x0) {
    const int hw = g.h0 * g.w0;
    x0.resize(g.c0, static_cast<Eigen::Index>(hw) * xs.size());
    for (std::size_t b = 0; b < xs.size(); ++b) {
        const Image& img = xs[b];
        for (int i = 0; i < g.h0; ++i)
            for (int j = 0; j < g.w0; ++j)
                for (int c = 0; c < g.c0; ++c)
                    x0(c, static_cast<Eigen::Index>(b) * hw + i * g.w0 + j) = img.at(i, j, c);
    }
}

void check_input_shape(const ModelParams& m, const Image& x) {
    if (x.height != m.input_height || x.width != m.input_width || x.channels != m.input_channels)
        throw InterfaceError("model expects " + std::to_string(m.input_height) + "x" + std::to_string(m.input_width) +
                             "x" + std::to_string(m.input_channels) + " input, got " + std::to_string(x.height) + "x" +
                             std::to_string(x.width) + "x" + std::to_string(x.channels));
}

void forward_batch(const ModelParams& m, const Geometry& g, std::span<const Image> xs, Forward& fw) {
    const auto batch = static_cast<Eigen::Index>(xs.size());
    load_inputs(xs, g, fw.x0);

    fw.p1.resize(static_cast<Eigen::Index>(g.c0) * kKernel * kKernel, static_cast<Eigen::Index>(g.oh1) * g.ow1 * batch);
    im2col(fw.x0, g.h0, g.w0, g.oh1, g.ow1, fw.p1);
    fw.a1.noalias() = wt(m.conv1.weights, static_cast<int>(fw.p1.rows()), m.conv1.out_channels).transpose() * fw.p1;
    fw.a1.colwise() += bias(m.conv1.bias);
    fw.a1 = fw.a1.array().tanh();

    fw.a1p.resize(kConv1Channels, static_cast<Eigen::Index>(g.ph1) * g.pw1 * batch);
    pool2(fw.a1, g.oh1, g.ow1, g.ph1, g.pw1, fw.a1p);

    fw.p2.resize(static_cast<Eigen::Index>(kConv1Channels) * kKernel * kKernel,
                 static_cast<Eigen::Index>(g.oh2) * g.ow2 * batch);
    im2col(fw.a1p, g.ph1, g.pw1, g.oh2, g.ow2, fw.p2);
    fw.a2.noalias() = wt(m.conv2.weights, static_cast<int>(fw.p2.rows()), m.conv2.out_channels).transpose() * fw.p2;
    fw.a2.colwise() += bias(m.conv2.bias);
    fw.a2 = fw.a2.array().tanh();

    // Pool conv2 and flatten channel-major in one pass.
    const int p2hw = g.ph2 * g.pw2;
    const int o2hw = g.oh2 * g.ow2;
    fw.f0.resize(g.flat, batch);
    for (Eigen::Index b = 0; b < batch; ++b)
        for (int py = 0; py < g.ph2; ++py)
            for (int px = 0; px < g.pw2; ++px) {
                const Eigen::Index base = b * o2hw + 2 * py * g.ow2 + 2 * px;
                for (int c = 0; c < kConv2Channels; ++c)
                    fw.f0(c * p2hw + py * g.pw2 + px, b) =
                        0.25 * (fw.a2(c, base) + fw.a2(c, base + 1) + fw.a2(c, base + g.ow2) + fw.a2(c, base + g.ow2 + 1));
            }

    fw.a3.noalias() = wt(m.fc1.weights, m.fc1.in_dim, m.fc1.out_dim).transpose() * fw.f0;
    fw.a3.colwise() += bias(m.fc1.bias);
    fw.a3 = fw.a3.array().tanh();

    fw.a4.noalias() = wt(m.fc2.weights, m.fc2.in_dim, m.fc2.out_dim).transpose() * fw.a3;
    fw.a4.colwise() += bias(m.fc2.bias);
    fw.a4 = fw.a4.array().tanh();

    fw.z5.noalias() = wt(m.fc3.weights, m.fc3.in_dim, m.fc3.out_dim).transpose() * fw.a4;
    fw.z5.colwise() += bias(m.fc3.bias);
}

// Column-wise stable softmax.
MatrixXd softmax_cols(const MatrixXd& z) {
    MatrixXd p = z;
    for (Eigen::Index b = 0; b < p.cols(); ++b) {
        auto col = p.col(b);
        col.array() -= col.maxCoeff();
        col = col.array().exp();
        col /= col.sum();
    }
    return p;
}

double cross_entropy(const MatrixXd& z5, Eigen::Index b, int label) {
    const auto col = z5.col(b);
    const double m = col.maxCoeff();
    const double lse = m + std::log((col.array() - m).exp().sum());
    return lse - col(label);
}

struct ParamGrads {
    MatrixXd w1t, w2t, w3t, w4t, w5t;
    VectorXd b1, b2, b3, b4, b5;
};

// Reverse pass from dZ5. Fills param gradients and/or the input gradient.
void backward_batch(const ModelParams& m, const Geometry& g, const Forward& fw, const MatrixXd& dz5, ParamGrads* pg,
                    MatrixXd* dx0) {
    const Eigen::Index batch = fw.z5.cols();

    if (pg) {
        pg->w5t.noalias() = fw.a4 * dz5.transpose();
        pg->b5 = dz5.rowwise().sum();
    }
    MatrixXd da4 = wt(m.fc3.weights, m.fc3.in_dim, m.fc3.out_dim) * dz5;
    MatrixXd dz4 = da4.array() * (1.0 - fw.a4.array().square());

    if (pg) {
        pg->w4t.noalias() = fw.a3 * dz4.transpose();
        pg->b4 = dz4.rowwise().sum();
    }
    MatrixXd da3 = wt(m.fc2.weights, m.fc2.in_dim, m.fc2.out_dim) * dz4;
    MatrixXd dz3 = da3.array() * (1.0 - fw.a3.array().square());

    if (pg) {
        pg->w3t.noalias() = fw.f0 * dz3.transpose();
        pg->b3 = dz3.rowwise().sum();
    }
    MatrixXd df0 = wt(m.fc1.weights, m.fc1.in_dim, m.fc1.out_dim) * dz3;

    // Unflatten + unpool conv2 in one pass.
    const int p2hw = g.ph2 * g.pw2;
    const int o2hw = g.oh2 * g.ow2;
    MatrixXd da2 = MatrixXd::Zero(kConv2Channels, static_cast<Eigen::Index>(o2hw) * batch);
    for (Eigen::Index b = 0; b < batch; ++b)
        for (int py = 0; py < g.ph2; ++py)
            for (int px = 0; px < g.pw2; ++px) {
                const Eigen::Index base = b * o2hw + 2 * py * g.ow2 + 2 * px;
                for (int c = 0; c < kConv2Channels; ++c) {
                    const double v = 0.25 * df0(c * p2hw + py * g.pw2 + px, b);
                    da2(c, base) += v;
                    da2(c, base + 1) += v;
                    da2(c, base + g.ow2) += v;
                    da2(c, base + g.ow2 + 1) += v;
                }
            }

    MatrixXd dz2 = da2.array() * (1.0 - fw.a2.array().square());
    if (pg) {
        pg->w2t.noalias() = fw.p2 * dz2.transpose();
        pg->b2 = dz2.rowwise().sum();
    }
    MatrixXd dp2 = wt(m.conv2.weights, static_cast<int>(fw.p2.rows()), m.conv2.out_channels) * dz2;
    MatrixXd da1p = MatrixXd::Zero(kConv1Channels, static_cast<Eigen::Index>(g.ph1) * g.pw1 * batch);
    col2im_add(dp2, g.ph1, g.pw1, g.oh2, g.ow2, da1p);

    MatrixXd da1 = MatrixXd::Zero(kConv1Channels, static_cast<Eigen::Index>(g.oh1) * g.ow1 * batch);
    unpool2_add(da1p, g.oh1, g.ow1, g.ph1, g.pw1, da1);
    MatrixXd dz1 = da1.array() * (1.0 - fw.a1.array().square());
    if (pg) {
        pg->w1t.noalias() = fw.p1 * dz1.transpose();
        pg->b1 = dz1.rowwise().sum();
    }

    if (dx0) {
        MatrixXd dp1 = wt(m.conv1.weights, static_cast<int>(fw.p1.rows()), m.conv1.out_channels) * dz1;
        *dx0 = MatrixXd::Zero(g.c0, static_cast<Eigen::Index>(g.h0) * g.w0 * batch);
        col2im_add(dp1, g.h0, g.w0, g.oh1, g.ow1, *dx0);
    }
}

std::uint32_t read_be32(std::istream& in, const std::filesystem::path& path) {
    std::array<unsigned char, 4> b{};
    if (!in.read(reinterpret_cast<char*>(b.data()), 4)) throw FormatError(path.string() + ": truncated checkpoint");
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

void write_be32(std::ostream& out, std::uint32_t v) {
    std::array<unsigned char, 4> b{static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                                   static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    out.write(reinterpret_cast<const char*>(b.data()), 4);
}

void write_doubles(std::ostream& out, const std::vector<double>& v) {
    write_be32(out, static_cast<std::uint32_t>(v.size()));
    out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
}

std::vector<double> read_doubles(std::istream& in, const std::filesystem::path& path, std::size_t expect) {
    std::uint32_t n = read_be32(in, path);
    if (n != expect)
        throw FormatError(path.string() + ": tensor length " + std::to_string(n) + ", expected " + std::to_string(expect));
    std::vector<double> v(n);
    if (!in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double))))
        throw FormatError(path.string() + ": truncated tensor payload");
    return v;
}

constexpr std::uint32_t kCheckpointMagic = 0x49464E4D;  // "IFNM"
constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace

void TrainConfig::validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be positive");
    if (!(lr_decay_factor > 0.0 && lr_decay_factor <= 1.0)) throw ConfigError("lr_decay_factor must lie in (0,1]");
    if (lr_decay_period < 1) throw ConfigError("lr_decay_period must be >= 1");
}

Model Model::init(int height, int width, int channels, int num_classes, std::uint64_t seed) {
    if (height < kMinSide || width < kMinSide)
        throw ConfigError("model input must be at least " + std::to_string(kMinSide) + "x" + std::to_string(kMinSide) +
                          ", got " + std::to_string(height) + "x" + std::to_string(width));
    if (channels < 1) throw ConfigError("model input needs at least one channel");
    if (num_classes < 2) throw ConfigError("model needs at least two classes");

    auto p = std::make_shared<ModelParams>();
    p->input_height = height;
    p->input_width = width;
    p->input_channels = channels;
    p->num_classes = num_classes;
    Geometry g(height, width, channels);

    std::mt19937_64 gen(seed);
    auto fill_uniform = [&gen](std::vector<double>& v, std::size_t n, int fan_in) {
        const double a = 1.0 / std::sqrt(static_cast<double>(fan_in));
        v.resize(n);
        for (double& x : v) x = uniform_in(gen, -a, a);
    };

    auto init_conv = [&](ConvLayerParams& l, int cin, int cout) {
        l.in_channels = cin;
        l.out_channels = cout;
        l.kernel = kKernel;
        const int fan = cin * kKernel * kKernel;
        fill_uniform(l.weights, static_cast<std::size_t>(cout) * fan, fan);
        l.bias.assign(static_cast<std::size_t>(cout), 0.0);
    };
    auto init_dense = [&](DenseLayerParams& l, int in_dim, int out_dim) {
        l.in_dim = in_dim;
        l.out_dim = out_dim;
        fill_uniform(l.weights, static_cast<std::size_t>(out_dim) * in_dim, in_dim);
        l.bias.assign(static_cast<std::size_t>(out_dim), 0.0);
    };

    init_conv(p->conv1, channels, kConv1Channels);
    init_conv(p->conv2, kConv1Channels, kConv2Channels);
    init_dense(p->fc1, g.flat, kFc1Width);
    init_dense(p->fc2, kFc1Width, kFc2Width);
    init_dense(p->fc3, kFc2Width, num_classes);
    return Model(std::move(p));
}

int Model::input_height() const { return params().input_height; }
int Model::input_width() const { return params().input_width; }
int Model::input_channels() const { return params().input_channels; }
int Model::num_classes() const { return params().num_classes; }

std::vector<std::string> Model::taps() const { return {"penultimate", "conv_1", "conv_2"}; }

std::size_t Model::tap_dimension(std::string_view tap) const {
    if (tap == "penultimate") return static_cast<std::size_t>(params().fc2.out_dim);
    if (tap == "conv_1") return static_cast<std::size_t>(params().conv2.out_channels);
    if (tap == "conv_2") return static_cast<std::size_t>(params().conv1.out_channels);
    throw InterfaceError("unknown tap \"" + std::string(tap) + "\"");
}

std::vector<double> Model::logits(const Image& x) const {
    const ModelParams& m = params();
    check_input_shape(m, x);
    Geometry g(m.input_height, m.input_width, m.input_channels);
    Forward fw;
    forward_batch(m, g, std::span<const Image>(&x, 1), fw);
    return {fw.z5.col(0).data(), fw.z5.col(0).data() + m.num_classes};
}

std::vector<double> Model::posteriors(const Image& x) const {
    std::vector<double> z = logits(x);
    const double m = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (double& v : z) {
        v = std::exp(v - m);
        sum += v;
    }
    for (double& v : z) v /= sum;
    return z;
}

int Model::predict(const Image& x) const {
    std::vector<double> z = logits(x);
    int best = 0;
    for (int c = 1; c < static_cast<int>(z.size()); ++c)
        if (z[c] > z[best]) best = c;
    return best;
}

std::vector<int> Model::predict_batch(std::span<const Image> xs) const {
    const ModelParams& m = params();
    Geometry g(m.input_height, m.input_width, m.input_channels);
    std::vector<int> out;
    out.reserve(xs.size());
    Forward fw;
    for (std::size_t start = 0; start < xs.size(); start += kEvalBatch) {
        const std::size_t n = std::min<std::size_t>(kEvalBatch, xs.size() - start);
        for (std::size_t i = 0; i < n; ++i) check_input_shape(m, xs[start + i]);
        forward_batch(m, g, xs.subspan(start, n), fw);
        for (std::size_t b = 0; b < n; ++b) {
            int best = 0;
            for (int c = 1; c < m.num_classes; ++c)
                if (fw.z5(c, static_cast<Eigen::Index>(b)) > fw.z5(best, static_cast<Eigen::Index>(b))) best = c;
            out.push_back(best);
        }
    }
    return out;
}

std::vector<std::vector<double>> Model::posteriors_batch(std::span<const Image> xs) const {
    const ModelParams& m = params();
    Geometry g(m.input_height, m.input_width, m.input_channels);
    std::vector<std::vector<double>> out;
    out.reserve(xs.size());
    Forward fw;
    for (std::size_t start = 0; start < xs.size(); start += kEvalBatch) {
        const std::size_t n = std::min<std::size_t>(kEvalBatch, xs.size() - start);
        for (std::size_t i = 0; i < n; ++i) check_input_shape(m, xs[start + i]);
        forward_batch(m, g, xs.subspan(start, n), fw);
        MatrixXd p = softmax_cols(fw.z5);
        for (std::size_t b = 0; b < n; ++b)
            out.emplace_back(p.col(static_cast<Eigen::Index>(b)).data(),
                             p.col(static_cast<Eigen::Index>(b)).data() + m.num_classes);
    }
    return out;
}

FeatureVector Model::features(const Image& x, std::string_view tap) const {
    const ModelParams& m = params();
    check_input_shape(m, x);
    tap_dimension(tap);  // validates the tag
    Geometry g(m.input_height, m.input_width, m.input_channels);
    Forward fw;
    forward_batch(m, g, std::span<const Image>(&x, 1), fw);

    FeatureVector out;
    out.tap = std::string(tap);
    if (tap == "penultimate") {
        out.values.assign(fw.a4.col(0).data(), fw.a4.col(0).data() + m.fc2.out_dim);
    } else {
        // conv_1 = last conv layer, conv_2 = the one before it; global
        // average over the spatial grid leaves one value per channel.
        const MatrixXd& act = (tap == "conv_1") ? fw.a2 : fw.a1;
        VectorXd mean = act.rowwise().mean();
        out.values.assign(mean.data(), mean.data() + mean.size());
    }
    for (double v : out.values)
        if (!std::isfinite(v)) throw InterfaceError("non-finite feature value at tap \"" + std::string(tap) + "\"");
    return out;
}

Model::BatchLossGrad Model::input_loss_gradients(std::span<const Image> xs, const LossSpec& loss) const {
    const ModelParams& m = params();
    if (loss.target_class < 0 || loss.target_class >= m.num_classes)
        throw InterfaceError("loss target class " + std::to_string(loss.target_class) + " outside model range");
    Geometry g(m.input_height, m.input_width, m.input_channels);

    BatchLossGrad out;
    out.gradients.reserve(xs.size());
    double total = 0.0;
    Forward fw;
    const int hw = g.h0 * g.w0;
    for (std::size_t start = 0; start < xs.size(); start += kEvalBatch) {
        const std::size_t n = std::min<std::size_t>(kEvalBatch, xs.size() - start);
        for (std::size_t i = 0; i < n; ++i) check_input_shape(m, xs[start + i]);
        forward_batch(m, g, xs.subspan(start, n), fw);

        MatrixXd dz5 = softmax_cols(fw.z5);
        for (std::size_t b = 0; b < n; ++b) {
            total += cross_entropy(fw.z5, static_cast<Eigen::Index>(b), loss.target_class);
            dz5(loss.target_class, static_cast<Eigen::Index>(b)) -= 1.0;
            int best = 0;
            for (int c = 1; c < m.num_classes; ++c)
                if (fw.z5(c, static_cast<Eigen::Index>(b)) > fw.z5(best, static_cast<Eigen::Index>(b))) best = c;
            out.predictions.push_back(best);
        }
        MatrixXd dx0;
        backward_batch(m, g, fw, dz5, nullptr, &dx0);
        for (std::size_t b = 0; b < n; ++b) {
            RealGrid grad = RealGrid::zeros(g.h0, g.w0, g.c0);
            for (int i = 0; i < g.h0; ++i)
                for (int j = 0; j < g.w0; ++j)
                    for (int c = 0; c < g.c0; ++c)
                        grad.at(i, j, c) = dx0(c, static_cast<Eigen::Index>(b) * hw + i * g.w0 + j);
            out.gradients.push_back(std::move(grad));
        }
    }
    out.mean_loss = xs.empty() ? 0.0 : total / static_cast<double>(xs.size());
    return out;
}

RealGrid Model::input_gradient(const Image& x, const LossSpec& loss) const {
    return input_loss_gradients(std::span<const Image>(&x, 1), loss).gradients.front();
}

Model::BatchEval Model::batch_eval(std::span<const Image> xs, const LossSpec& loss) const {
    const ModelParams& m = params();
    if (loss.target_class < 0 || loss.target_class >= m.num_classes)
        throw InterfaceError("loss target class " + std::to_string(loss.target_class) + " outside model range");
    Geometry g(m.input_height, m.input_width, m.input_channels);
    BatchEval out;
    out.predictions.reserve(xs.size());
    double total = 0.0;
    Forward fw;
    for (std::size_t start = 0; start < xs.size(); start += kEvalBatch) {
        const std::size_t n = std::min<std::size_t>(kEvalBatch, xs.size() - start);
        for (std::size_t i = 0; i < n; ++i) check_input_shape(m, xs[start + i]);
        forward_batch(m, g, xs.subspan(start, n), fw);
        for (std::size_t b = 0; b < n; ++b) {
            total += cross_entropy(fw.z5, static_cast<Eigen::Index>(b), loss.target_class);
            int best = 0;
            for (int c = 1; c < m.num_classes; ++c)
                if (fw.z5(c, static_cast<Eigen::Index>(b)) > fw.z5(best, static_cast<Eigen::Index>(b))) best = c;
            out.predictions.push_back(best);
        }
    }
    out.mean_loss = xs.empty() ? 0.0 : total / static_cast<double>(xs.size());
    return out;
}

double Model::mean_loss(std::span<const Image> xs, const LossSpec& loss) const {
    const ModelParams& m = params();
    if (loss.target_class < 0 || loss.target_class >= m.num_classes)
        throw InterfaceError("loss target class " + std::to_string(loss.target_class) + " outside model range");
    if (xs.empty()) return 0.0;
    Geometry g(m.input_height, m.input_width, m.input_channels);
    Forward fw;
    double total = 0.0;
    for (std::size_t start = 0; start < xs.size(); start += kEvalBatch) {
        const std::size_t n = std::min<std::size_t>(kEvalBatch, xs.size() - start);
        for (std::size_t i = 0; i < n; ++i) check_input_shape(m, xs[start + i]);
        forward_batch(m, g, xs.subspan(start, n), fw);
        for (std::size_t b = 0; b < n; ++b)
            total += cross_entropy(fw.z5, static_cast<Eigen::Index>(b), loss.target_class);
    }
    return total / static_cast<double>(xs.size());
}

void Model::save(const std::filesystem::path& path) const {
    const ModelParams& m = params();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    write_be32(out, kCheckpointMagic);
    write_be32(out, kCheckpointVersion);
    write_be32(out, static_cast<std::uint32_t>(m.input_height));
    write_be32(out, static_cast<std::uint32_t>(m.input_width));
    write_be32(out, static_cast<std::uint32_t>(m.input_channels));
    write_be32(out, static_cast<std::uint32_t>(m.num_classes));
    for (const ConvLayerParams* l : {&m.conv1, &m.conv2}) {
        write_doubles(out, l->weights);
        write_doubles(out, l->bias);
    }
    for (const DenseLayerParams* l : {&m.fc1, &m.fc2, &m.fc3}) {
        write_doubles(out, l->weights);
        write_doubles(out, l->bias);
    }
    if (!out) throw IoError("write failed for " + path.string());
}

Model Model::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    if (read_be32(in, path) != kCheckpointMagic) throw FormatError(path.string() + ": not a model checkpoint");
    if (read_be32(in, path) != kCheckpointVersion)
        throw FormatError(path.string() + ": unsupported checkpoint version");
    int h = static_cast<int>(read_be32(in, path));
    int w = static_cast<int>(read_be32(in, path));
    int c = static_cast<int>(read_be32(in, path));
    int classes = static_cast<int>(read_be32(in, path));

    // Rebuild the skeleton via init (validates dims), then overwrite tensors.
    Model skeleton = Model::init(h, w, c, classes, 0);
    auto p = std::make_shared<ModelParams>(skeleton.params());
    for (ConvLayerParams* l : {&p->conv1, &p->conv2}) {
        l->weights = read_doubles(in, path, l->weights.size());
        l->bias = read_doubles(in, path, l->bias.size());
    }
    for (DenseLayerParams* l : {&p->fc1, &p->fc2, &p->fc3}) {
        l->weights = read_doubles(in, path, l->weights.size());
        l->bias = read_doubles(in, path, l->bias.size());
    }
    return Model(std::move(p));
}

bool Model::same_parameters(const Model& other) const {
    if (!valid() || !other.valid()) return valid() == other.valid();
    const ModelParams& a = params();
    const ModelParams& b = other.params();
    return a.input_height == b.input_height && a.input_width == b.input_width &&
           a.input_channels == b.input_channels && a.num_classes == b.num_classes &&
           a.conv1.weights == b.conv1.weights && a.conv1.bias == b.conv1.bias &&
           a.conv2.weights == b.conv2.weights && a.conv2.bias == b.conv2.bias &&
           a.fc1.weights == b.fc1.weights && a.fc1.bias == b.fc1.bias && a.fc2.weights == b.fc2.weights &&
           a.fc2.bias == b.fc2.bias && a.fc3.weights == b.fc3.weights && a.fc3.bias == b.fc3.bias;
}

// Train-loop access to Model's private constructor.
struct TrainRun {
    static Model wrap(std::shared_ptr<const ModelParams> p) { return Model(std::move(p)); }
};

TrainResult train(const LabeledDataset& train_set, const TrainConfig& cfg) {
    cfg.validate();
    train_set.validate();
    if (train_set.size() == 0) throw TrainError("training set is empty", 0);

    auto params = std::make_shared<ModelParams>(
        Model::init(train_set.height(), train_set.width(), train_set.channels(), train_set.num_classes,
                    derive_seed(cfg.seed, "train_init"))
            .params());
    ModelParams& m = *params;
    Geometry g(m.input_height, m.input_width, m.input_channels);

    std::mt19937_64 shuffle_gen(derive_seed(cfg.seed, "train_shuffle"));
    std::vector<std::size_t> order(train_set.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    TrainResult result;
    result.epoch_loss.reserve(static_cast<std::size_t>(cfg.epochs));

    std::vector<Image> batch_images;
    Forward fw;
    ParamGrads pg;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr =
            cfg.learning_rate * std::pow(cfg.lr_decay_factor, static_cast<double>(epoch / cfg.lr_decay_period));
        shuffle_in_place(order, shuffle_gen);

        double epoch_total = 0.0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), order.size() - start);
            batch_images.clear();
            for (std::size_t i = 0; i < n; ++i) batch_images.push_back(train_set.images[order[start + i]]);

            forward_batch(m, g, batch_images, fw);

            MatrixXd dz5 = softmax_cols(fw.z5);
            double batch_loss = 0.0;
            for (std::size_t b = 0; b < n; ++b) {
                const int label = train_set.labels[order[start + b]];
                batch_loss += cross_entropy(fw.z5, static_cast<Eigen::Index>(b), label);
                dz5(label, static_cast<Eigen::Index>(b)) -= 1.0;
            }
            batch_loss /= static_cast<double>(n);
            if (!std::isfinite(batch_loss))
                throw TrainError("training loss became non-finite at epoch " + std::to_string(epoch), epoch);
            epoch_total += batch_loss * static_cast<double>(n);
            dz5 /= static_cast<double>(n);

            backward_batch(m, g, fw, dz5, &pg, nullptr);

            const double step = lr;
            wt_mut(m.conv1.weights, static_cast<int>(pg.w1t.rows()), m.conv1.out_channels) -= step * pg.w1t;
            bias_mut(m.conv1.bias) -= step * pg.b1;
            wt_mut(m.conv2.weights, static_cast<int>(pg.w2t.rows()), m.conv2.out_channels) -= step * pg.w2t;
            bias_mut(m.conv2.bias) -= step * pg.b2;
            wt_mut(m.fc1.weights, m.fc1.in_dim, m.fc1.out_dim) -= step * pg.w3t;
            bias_mut(m.fc1.bias) -= step * pg.b3;
            wt_mut(m.fc2.weights, m.fc2.in_dim, m.fc2.out_dim) -= step * pg.w4t;
            bias_mut(m.fc2.bias) -= step * pg.b4;
            wt_mut(m.fc3.weights, m.fc3.in_dim, m.fc3.out_dim) -= step * pg.w5t;
            bias_mut(m.fc3.bias) -= step * pg.b5;
        }
        result.epoch_loss.push_back(epoch_total / static_cast<double>(order.size()));
    }

    result.model = TrainRun::wrap(std::move(params));
    return result;
}

}  // namespace inflight
