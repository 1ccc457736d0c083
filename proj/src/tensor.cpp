#include "argen/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

#define EIGEN_DONT_PARALLELIZE
#include <Eigen/Dense>

#include "argen/errors.hpp"

namespace argen {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const EMat>;
using MutMap = Eigen::Map<EMat>;

Tensor::Tensor(std::vector<std::size_t> shape) : shape_(std::move(shape)) {
    std::size_t n = 1;
    for (std::size_t d : shape_) {
        if (d == 0) throw std::invalid_argument("Tensor: zero-sized dimension");
        n *= d;
    }
    if (shape_.empty()) throw std::invalid_argument("Tensor: empty shape");
    data_.assign(n, 0.0);
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data) : Tensor(std::move(shape)) {
    if (data.size() != data_.size()) {
        throw std::invalid_argument("Tensor: data length does not match shape product");
    }
    data_ = std::move(data);
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
}

Tensor Tensor::vec(std::vector<double> data) {
    std::size_t n = data.size();
    return Tensor({n}, std::move(data));
}

Tensor Tensor::mat(std::size_t rows, std::size_t cols, std::vector<double> data) {
    return Tensor({rows, cols}, std::move(data));
}

std::size_t Tensor::rows() const { return rank() == 1 ? 1 : shape_[0]; }
std::size_t Tensor::cols() const { return rank() == 1 ? shape_[0] : shape_[1]; }

double& Tensor::at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
double Tensor::at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

bool Tensor::all_finite() const {
    for (double v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

bool Tensor::bit_equal(const Tensor& o) const {
    if (shape_ != o.shape_) return false;
    return std::memcmp(data_.data(), o.data_.data(), data_.size() * sizeof(double)) == 0;
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "x" : "") << shape_[i];
    os << "]";
    return os.str();
}

void check_finite(const Tensor& t, const char* what) {
    if (!t.all_finite()) {
        throw NumericError(std::string(what) + ": non-finite value in tensor " + t.shape_str());
    }
}

namespace {

void require_rank12(const Tensor& t, const char* what) {
    if (t.rank() < 1 || t.rank() > 2) {
        throw std::invalid_argument(std::string(what) + ": rank must be 1 or 2");
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b)) {
        throw std::invalid_argument(std::string(what) + ": shape mismatch " + a.shape_str() + " vs " +
                                    b.shape_str());
    }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
    check_finite(out, "add");
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
    check_finite(out, "sub");
    return out;
}

Tensor scalar_mul(const Tensor& a, double s) {
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= s;
    check_finite(out, "scalar_mul");
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
    check_finite(out, "mul");
    return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) throw std::invalid_argument("matmul: both operands must be rank 2");
    if (a.cols() != b.rows()) {
        throw std::invalid_argument("matmul: inner dimensions differ " + a.shape_str() + " vs " + b.shape_str());
    }
    Tensor out({a.rows(), b.cols()});
    ConstMap ma(a.data(), static_cast<Eigen::Index>(a.rows()), static_cast<Eigen::Index>(a.cols()));
    ConstMap mb(b.data(), static_cast<Eigen::Index>(b.rows()), static_cast<Eigen::Index>(b.cols()));
    MutMap mo(out.data(), static_cast<Eigen::Index>(out.rows()), static_cast<Eigen::Index>(out.cols()));
    mo.noalias() = ma * mb;
    check_finite(out, "matmul");
    return out;
}

Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw std::invalid_argument("transpose: rank must be 2");
    Tensor out({a.cols(), a.rows()});
    for (std::size_t r = 0; r < a.rows(); ++r) {
        for (std::size_t c = 0; c < a.cols(); ++c) out.at(c, r) = a.at(r, c);
    }
    return out;
}

Tensor reshape(const Tensor& a, std::vector<std::size_t> shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    if (n != a.size()) throw std::invalid_argument("reshape: element count mismatch");
    return Tensor(std::move(shape), a.values());
}

Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1) {
    if (a.rank() != 2) throw std::invalid_argument("slice_cols: rank must be 2");
    if (c0 >= c1 || c1 > a.cols()) throw std::invalid_argument("slice_cols: bad column range");
    Tensor out({a.rows(), c1 - c0});
    for (std::size_t r = 0; r < a.rows(); ++r) {
        for (std::size_t c = c0; c < c1; ++c) out.at(r, c - c0) = a.at(r, c);
    }
    return out;
}

Tensor slice_rows(const Tensor& a, std::size_t r0, std::size_t r1) {
    if (a.rank() != 2) throw std::invalid_argument("slice_rows: rank must be 2");
    if (r0 >= r1 || r1 > a.rows()) throw std::invalid_argument("slice_rows: bad row range");
    Tensor out({r1 - r0, a.cols()});
    std::copy(a.data() + r0 * a.cols(), a.data() + r1 * a.cols(), out.data());
    return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
    std::size_t rows = parts[0].rows();
    std::size_t total = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != 2 || p.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
        total += p.cols();
    }
    Tensor out({rows, total});
    for (std::size_t r = 0; r < rows; ++r) {
        std::size_t c = 0;
        for (const Tensor& p : parts) {
            for (std::size_t j = 0; j < p.cols(); ++j) out.at(r, c++) = p.at(r, j);
        }
    }
    return out;
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
    if (table.rank() != 2) throw std::invalid_argument("gather_rows: table must be rank 2");
    if (ids.empty()) throw std::invalid_argument("gather_rows: empty id list");
    Tensor out({ids.size(), table.cols()});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        int id = ids[i];
        if (id < 0 || static_cast<std::size_t>(id) >= table.rows()) {
            throw std::out_of_range("gather_rows: id " + std::to_string(id) + " out of range");
        }
        std::copy(table.data() + id * table.cols(), table.data() + (id + 1) * table.cols(),
                  out.data() + i * table.cols());
    }
    return out;
}

namespace {

// Applies fn(slice pointer, length, stride) over every slice along axis.
template <typename Fn>
void for_each_slice(const Tensor& t, int axis, Fn&& fn) {
    if (t.rank() == 1) {
        if (axis != 0) throw std::invalid_argument("axis out of range for rank-1 tensor");
        fn(0, t.size(), 1);
        return;
    }
    if (axis == 1) {
        for (std::size_t r = 0; r < t.rows(); ++r) fn(r * t.cols(), t.cols(), 1);
    } else if (axis == 0) {
        for (std::size_t c = 0; c < t.cols(); ++c) fn(c, t.rows(), t.cols());
    } else {
        throw std::invalid_argument("axis out of range for rank-2 tensor");
    }
}

}  // namespace

Tensor softmax(const Tensor& a, int axis) {
    require_rank12(a, "softmax");
    if (!a.all_finite()) throw NumericError("softmax: non-finite input");
    Tensor out = a;
    for_each_slice(a, axis, [&](std::size_t base, std::size_t n, std::size_t stride) {
        double mx = a[base];
        for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, a[base + i * stride]);
        double sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double e = std::exp(a[base + i * stride] - mx);
            out[base + i * stride] = e;
            sum += e;
        }
        for (std::size_t i = 0; i < n; ++i) out[base + i * stride] /= sum;
    });
    check_finite(out, "softmax");
    return out;
}

Tensor logsumexp(const Tensor& a, int axis) {
    require_rank12(a, "logsumexp");
    if (!a.all_finite()) throw NumericError("logsumexp: non-finite input");
    std::vector<double> vals;
    for_each_slice(a, axis, [&](std::size_t base, std::size_t n, std::size_t stride) {
        double mx = a[base];
        for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, a[base + i * stride]);
        double sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) sum += std::exp(a[base + i * stride] - mx);
        vals.push_back(mx + std::log(sum));
    });
    Tensor out = Tensor::vec(std::move(vals));
    check_finite(out, "logsumexp");
    return out;
}

Tensor rms_norm(const Tensor& a, const Tensor& gain, double eps) {
    require_rank12(a, "rms_norm");
    if (gain.rank() != 1 || gain.size() != a.cols()) {
        throw std::invalid_argument("rms_norm: gain length must equal column count");
    }
    Tensor out = a;
    for (std::size_t r = 0; r < a.rows(); ++r) {
        double ms = 0.0;
        for (std::size_t c = 0; c < a.cols(); ++c) ms += a.at(r, c) * a.at(r, c);
        ms /= static_cast<double>(a.cols());
        const double inv = 1.0 / std::sqrt(ms + eps);
        for (std::size_t c = 0; c < a.cols(); ++c) {
            out[r * a.cols() + c] = a.at(r, c) * inv * gain[c];
        }
    }
    check_finite(out, "rms_norm");
    return out;
}

Tensor silu(const Tensor& a) {
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = out[i];
        out[i] = x / (1.0 + std::exp(-x));
    }
    check_finite(out, "silu");
    return out;
}

double cross_entropy_from_logits(const Tensor& logits, int target) {
    if (logits.rank() != 1) throw std::invalid_argument("cross_entropy_from_logits: logits must be rank 1");
    if (!logits.all_finite()) throw NumericError("cross_entropy_from_logits: non-finite input");
    if (target < 0 || static_cast<std::size_t>(target) >= logits.size()) {
        throw std::out_of_range("cross_entropy_from_logits: target out of range");
    }
    const Tensor lse = logsumexp(logits, 0);
    return lse[0] - logits[static_cast<std::size_t>(target)];
}

}  // namespace argen
