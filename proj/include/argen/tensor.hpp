#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace argen {

// Dense row-major tensor of 64-bit floats. Rank 1 or 2 is all the
// transformer needs; kernels reject anything else. Every kernel verifies its
// output is finite and throws NumericError otherwise.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> shape);
    Tensor(std::vector<std::size_t> shape, std::vector<double> data);

    static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<std::size_t> shape, double value);
    static Tensor vec(std::vector<double> data);
    static Tensor mat(std::size_t rows, std::size_t cols, std::vector<double> data);

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    // 2-D accessors; rank-1 tensors behave as a single row.
    std::size_t rows() const;
    std::size_t cols() const;

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    double& at(std::size_t r, std::size_t c);
    double at(std::size_t r, std::size_t c) const;

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    const std::vector<double>& values() const { return data_; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
    bool all_finite() const;
    bool bit_equal(const Tensor& o) const;
    std::string shape_str() const;

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

// ---- kernels ----
// Fixed reduction order throughout; results are bit-reproducible run to run.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& a, double s);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, std::vector<std::size_t> shape);
Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1);
Tensor slice_rows(const Tensor& a, std::size_t r0, std::size_t r1);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor gather_rows(const Tensor& table, const std::vector<int>& ids);

// Softmax along `axis` with max-subtraction; each slice sums to 1.
Tensor softmax(const Tensor& a, int axis);
// Log-sum-exp reduction along `axis`; result drops that axis (rank-1 output).
Tensor logsumexp(const Tensor& a, int axis);
// Per-row x / sqrt(mean(x^2) + eps) * gain. `gain` has length cols(a).
Tensor rms_norm(const Tensor& a, const Tensor& gain, double eps);
Tensor silu(const Tensor& a);

// -log softmax(logits)[target] via the log-sum-exp form. logits rank 1.
double cross_entropy_from_logits(const Tensor& logits, int target);

void check_finite(const Tensor& t, const char* what);

}  // namespace argen
