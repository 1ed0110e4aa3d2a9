#include "couplet/layers.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "couplet/error.hpp"

namespace couplet {

namespace {

// Row-wise masked softmax of `scores` in place. `visible(i, j)` selects keys;
// hidden entries become exactly 0.
template <typename Visible>
void masked_softmax(Mat& scores, Visible&& visible) {
    for (Eigen::Index i = 0; i < scores.rows(); ++i) {
        double max = -std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j < scores.cols(); ++j) {
            if (visible(i, j) && scores(i, j) > max) {
                max = scores(i, j);
            }
        }
        if (max == -std::numeric_limits<double>::infinity()) {
            throw Error("attention: query row " + std::to_string(i) + " has no visible key");
        }
        double sum = 0.0;
        for (Eigen::Index j = 0; j < scores.cols(); ++j) {
            if (visible(i, j)) {
                scores(i, j) = std::exp(scores(i, j) - max);
                sum += scores(i, j);
            } else {
                scores(i, j) = 0.0;
            }
        }
        scores.row(i) /= sum;
    }
}

}  // namespace

Mat positional_encoding(int length, int d_model) {
    if (d_model <= 0 || d_model % 2 != 0) {
        throw Error("positional_encoding: d_model must be even and positive, got " + std::to_string(d_model));
    }
    Mat pe(length, d_model);
    for (int p = 0; p < length; ++p) {
        pe.row(p) = positional_row(p, d_model);
    }
    return pe;
}

RowVec positional_row(int position, int d_model) {
    RowVec row(d_model);
    for (int i = 0; i < d_model / 2; ++i) {
        const double angle = position / std::pow(10000.0, (2.0 * i) / d_model);
        row[2 * i] = std::sin(angle);
        row[2 * i + 1] = std::cos(angle);
    }
    return row;
}

Mat scaled_dot_attention(const Mat& q, const Mat& k, const Mat& v, const BoolMat& mask) {
    if (q.cols() != k.cols() || k.rows() != v.rows() || mask.rows() != q.rows() || mask.cols() != k.rows()) {
        throw Error("scaled_dot_attention: shape mismatch");
    }
    Mat scores = (q * k.transpose()) / std::sqrt(static_cast<double>(q.cols()));
    masked_softmax(scores, [&](Eigen::Index i, Eigen::Index j) { return mask(i, j); });
    return scores * v;
}

void Linear::initialize(std::mt19937_64& gen) {
    std::normal_distribution<double> normal(0.0, 1.0);
    const double scale = 1.0 / std::sqrt(static_cast<double>(w.value.rows()));
    for (Eigen::Index i = 0; i < w.value.size(); ++i) {
        w.value.data()[i] = normal(gen) * scale;
    }
    b.value.setZero();
}

Mat Linear::forward(const Mat& x) const {
    Mat y(x.rows(), w.value.cols());
    y.noalias() = x * w.value;
    y.rowwise() += b.value.row(0);
    return y;
}

Mat Linear::backward(const Mat& x, const Mat& dy) {
    w.grad.noalias() += x.transpose() * dy;
    b.grad += dy.colwise().sum();
    Mat dx(dy.rows(), w.value.rows());
    dx.noalias() = dy * w.value.transpose();
    return dx;
}

Mat LayerNorm::forward(const Mat& x, Cache* cache) const {
    const Eigen::VectorXd mean = x.rowwise().mean();
    Mat xc = x.colwise() - mean;
    const Eigen::VectorXd var = xc.array().square().rowwise().mean();
    const Eigen::VectorXd inv_std = (var.array() + eps).rsqrt();
    Mat xhat = xc.array().colwise() * inv_std.array();
    Mat y = xhat.array().rowwise() * gamma.value.row(0).array();
    y.rowwise() += beta.value.row(0);
    if (cache != nullptr) {
        cache->xhat = std::move(xhat);
        cache->inv_std = inv_std;
    }
    return y;
}

Mat LayerNorm::backward(const Mat& dy, const Cache& cache) {
    gamma.grad += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
    beta.grad += dy.colwise().sum();
    const Mat dxhat = dy.array().rowwise() * gamma.value.row(0).array();
    const double n = static_cast<double>(dy.cols());
    const Eigen::VectorXd sum_dxhat = dxhat.rowwise().sum();
    const Eigen::VectorXd sum_dxhat_xhat = (dxhat.array() * cache.xhat.array()).rowwise().sum();
    Mat dx = (n * dxhat.array()).colwise() - sum_dxhat.array();
    dx.array() -= cache.xhat.array().colwise() * sum_dxhat_xhat.array();
    dx.array().colwise() *= cache.inv_std.array() / n;
    return dx;
}

Mat gelu(const Mat& x) {
    return x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0)); });
}

Mat gelu_backward(const Mat& x, const Mat& dy) {
    const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
    const Mat d = x.unaryExpr([inv_sqrt_2pi](double v) {
        const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
        return cdf + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
    });
    return d.cwiseProduct(dy);
}

Dropout Dropout::sample(Eigen::Index rows, Eigen::Index cols, double rate, std::mt19937_64& gen) {
    Dropout out;
    if (rate <= 0.0) {
        return out;
    }
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    const double keep_scale = 1.0 / (1.0 - rate);
    out.scale.resize(rows, cols);
    for (Eigen::Index i = 0; i < out.scale.size(); ++i) {
        out.scale.data()[i] = uniform(gen) < rate ? 0.0 : keep_scale;
    }
    return out;
}

Mat Dropout::apply(const Mat& x) const {
    if (scale.size() == 0) {
        return x;
    }
    return x.cwiseProduct(scale);
}

Segments Segments::from_lengths(std::span<const int> lengths) {
    Segments seg;
    for (int n : lengths) {
        seg.offset.push_back(seg.total);
        seg.length.push_back(n);
        seg.total += n;
    }
    return seg;
}

MultiHeadAttention::MultiHeadAttention(int d_model, int n_heads)
    : q(d_model, d_model), k(d_model, d_model), v(d_model, d_model), o(d_model, d_model), n_heads_(n_heads) {
    if (n_heads <= 0 || d_model % n_heads != 0) {
        throw Error("multi-head attention: d_model " + std::to_string(d_model) + " is not divisible by " +
                    std::to_string(n_heads) + " heads");
    }
}

void MultiHeadAttention::initialize(std::mt19937_64& gen) {
    q.initialize(gen);
    k.initialize(gen);
    v.initialize(gen);
    o.initialize(gen);
}

Mat MultiHeadAttention::forward(const Mat& x, const Mat* memory, const Segments& qseg, const Segments& kseg,
                                bool causal, Cache* cache) const {
    const Mat& kv_in = memory != nullptr ? *memory : x;
    Mat qp = q.forward(x);
    Mat kp = k.forward(kv_in);
    Mat vp = v.forward(kv_in);
    const auto d_model = static_cast<int>(qp.cols());
    const int dk = d_model / n_heads_;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dk));

    Mat heads = Mat::Zero(qp.rows(), d_model);
    std::vector<Mat> probs;
    if (cache != nullptr) {
        probs.reserve(static_cast<std::size_t>(qseg.count()) * n_heads_);
    }
    for (int s = 0; s < qseg.count(); ++s) {
        const int qo = qseg.offset[s];
        const int n = qseg.length[s];
        const int ko = kseg.offset[s];
        const int m = kseg.length[s];
        for (int h = 0; h < n_heads_; ++h) {
            const auto qh = qp.block(qo, h * dk, n, dk);
            const auto kh = kp.block(ko, h * dk, m, dk);
            const auto vh = vp.block(ko, h * dk, m, dk);
            Mat p(n, m);
            p.noalias() = qh * kh.transpose();
            p *= scale;
            if (causal) {
                masked_softmax(p, [](Eigen::Index i, Eigen::Index j) { return j <= i; });
            } else {
                masked_softmax(p, [](Eigen::Index, Eigen::Index) { return true; });
            }
            heads.block(qo, h * dk, n, dk).noalias() = p * vh;
            if (cache != nullptr) {
                probs.push_back(std::move(p));
            }
        }
    }
    Mat y = o.forward(heads);
    if (cache != nullptr) {
        cache->x_q = x;
        cache->x_kv = memory != nullptr ? *memory : Mat();
        cache->self_attention = memory == nullptr;
        cache->qp = std::move(qp);
        cache->kp = std::move(kp);
        cache->vp = std::move(vp);
        cache->heads = std::move(heads);
        cache->probs = std::move(probs);
    }
    return y;
}

MultiHeadAttention::Grads MultiHeadAttention::backward(const Mat& dy, const Segments& qseg, const Segments& kseg,
                                                       bool /*causal*/, const Cache& cache) {
    const Mat dheads = o.backward(cache.heads, dy);
    const auto d_model = static_cast<int>(cache.qp.cols());
    const int dk = d_model / n_heads_;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dk));

    Mat dq = Mat::Zero(cache.qp.rows(), d_model);
    Mat dk_all = Mat::Zero(cache.kp.rows(), d_model);
    Mat dv = Mat::Zero(cache.vp.rows(), d_model);
    for (int s = 0; s < qseg.count(); ++s) {
        const int qo = qseg.offset[s];
        const int n = qseg.length[s];
        const int ko = kseg.offset[s];
        const int m = kseg.length[s];
        for (int h = 0; h < n_heads_; ++h) {
            // Masked entries of P are exactly zero, so dS vanishes there too.
            const Mat& p = cache.probs[static_cast<std::size_t>(s) * n_heads_ + h];
            const auto doh = dheads.block(qo, h * dk, n, dk);
            const auto qh = cache.qp.block(qo, h * dk, n, dk);
            const auto kh = cache.kp.block(ko, h * dk, m, dk);
            const auto vh = cache.vp.block(ko, h * dk, m, dk);
            Mat dp(n, m);
            dp.noalias() = doh * vh.transpose();
            dv.block(ko, h * dk, m, dk).noalias() += p.transpose() * doh;
            const Eigen::VectorXd row_dot = (dp.array() * p.array()).rowwise().sum();
            Mat ds = p.array() * (dp.array().colwise() - row_dot.array());
            ds *= scale;
            dq.block(qo, h * dk, n, dk).noalias() += ds * kh;
            dk_all.block(ko, h * dk, m, dk).noalias() += ds.transpose() * qh;
        }
    }
    Grads grads;
    const bool self = cache.self_attention;
    const Mat& kv_in = self ? cache.x_q : cache.x_kv;
    grads.dx = q.backward(cache.x_q, dq);
    Mat dkv = k.backward(kv_in, dk_all);
    dkv += v.backward(kv_in, dv);
    if (self) {
        grads.dx += dkv;
    } else {
        grads.dmemory = std::move(dkv);
    }
    return grads;
}

}  // namespace couplet
