#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "couplet/tensor.hpp"

namespace couplet {

// Sinusoidal encoding: PE[p, 2i] = sin(p / 10000^(2i/d)), PE[p, 2i+1] = cos(...).
Mat positional_encoding(int length, int d_model);

// Row `p` of positional_encoding(·, d_model).
RowVec positional_row(int position, int d_model);

// softmax(Q Kᵀ / √d + mask) V, where mask(i, j) == false hides key j from
// query i. Throws when a query row has no visible key.
using BoolMat = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
Mat scaled_dot_attention(const Mat& q, const Mat& k, const Mat& v, const BoolMat& mask);

// y = x W + b with W: in × out.
struct Linear {
    Param w;
    Param b;

    Linear() = default;
    Linear(int in, int out) : w(in, out), b(1, out) {}

    // W ~ N(0, 1) / √in, b = 0.
    void initialize(std::mt19937_64& gen);

    Mat forward(const Mat& x) const;
    // Accumulates parameter gradients and returns dL/dx.
    Mat backward(const Mat& x, const Mat& dy);
};

struct LayerNorm {
    Param gamma;
    Param beta;
    double eps = 1e-5;

    struct Cache {
        Mat xhat;
        Eigen::VectorXd inv_std;
    };

    LayerNorm() = default;
    explicit LayerNorm(int dim) : gamma(Mat::Ones(1, dim)), beta(1, dim) {}

    Mat forward(const Mat& x, Cache* cache) const;
    Mat backward(const Mat& dy, const Cache& cache);
};

// Exact (erf) GELU.
Mat gelu(const Mat& x);
Mat gelu_backward(const Mat& x, const Mat& dy);

// Inverted dropout; an empty mask means identity.
struct Dropout {
    Mat scale;

    static Dropout sample(Eigen::Index rows, Eigen::Index cols, double rate, std::mt19937_64& gen);
    Mat apply(const Mat& x) const;
    Mat backward(const Mat& dy) const { return apply(dy); }
};

// Contiguous runs of packed rows, one run per sequence.
struct Segments {
    std::vector<int> offset;
    std::vector<int> length;
    int total = 0;

    static Segments from_lengths(std::span<const int> lengths);
    int count() const { return static_cast<int>(length.size()); }
};

class MultiHeadAttention {
public:
    Linear q;
    Linear k;
    Linear v;
    Linear o;

    struct Cache {
        Mat x_q;
        Mat x_kv;  // empty for self-attention
        bool self_attention = true;
        Mat qp;
        Mat kp;
        Mat vp;
        Mat heads;
        std::vector<Mat> probs;  // [sequence * n_heads + head]
    };

    MultiHeadAttention() = default;
    MultiHeadAttention(int d_model, int n_heads);

    int n_heads() const { return n_heads_; }
    void initialize(std::mt19937_64& gen);

    // Queries from `x` (segments `qseg`), keys/values from `memory` or `x`.
    // With `causal`, query i of a sequence sees keys 0..i.
    Mat forward(const Mat& x, const Mat* memory, const Segments& qseg, const Segments& kseg, bool causal,
                Cache* cache) const;

    struct Grads {
        Mat dx;
        Mat dmemory;  // empty for self-attention
    };
    Grads backward(const Mat& dy, const Segments& qseg, const Segments& kseg, bool causal, const Cache& cache);

private:
    int n_heads_ = 1;
};

}  // namespace couplet
