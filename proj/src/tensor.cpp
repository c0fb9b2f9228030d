// SPDX-License-Identifier: Apache-2.0

#include "fedmoe/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include "fedmoe/rng.hpp"

namespace fedmoe {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

void check(bool cond, const std::string& msg) {
    if (!cond) fail(msg);
}

void check_finite(const char* op, const std::vector<double>& v) {
    for (double x : v) {
        if (!std::isfinite(x)) {
            throw std::runtime_error(std::string("op '") + op + "' produced a non-finite value");
        }
    }
}

int64_t norm_axis(int64_t axis, int64_t rank) {
    const int64_t a = axis < 0 ? axis + rank : axis;
    check(a >= 0 && a < rank, "axis out of range");
    return a;
}

// true when `small` equals the trailing suffix of `big`
bool is_suffix(const Shape& big, const Shape& small) {
    if (small.size() > big.size()) return false;
    return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

struct AxisSplit {
    int64_t outer, len, inner;
};

AxisSplit split_at(const Shape& s, int64_t axis) {
    AxisSplit r{1, s[axis], 1};
    for (int64_t i = 0; i < axis; ++i) r.outer *= s[i];
    for (size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

thread_local Graph* g_active_graph = nullptr;

bool should_record(std::initializer_list<const Tensor*> inputs) {
    if (g_active_graph == nullptr) return false;
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

}  // namespace

// ---- Tensor -----------------------------------------------------------------

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

Tensor::Impl& Tensor::impl() {
    if (!impl_) fail("use of undefined tensor");
    return *impl_;
}

const Tensor::Impl& Tensor::impl() const {
    if (!impl_) fail("use of undefined tensor");
    return *impl_;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    for (int64_t d : shape) check(d > 0, "tensor dims must be positive, got " + shape_str(shape));
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = std::move(shape);
    t.impl_->data.assign(shape_numel(t.impl_->shape), 0.0);
    t.impl_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.data().begin(), t.data().end(), value);
    return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    check(shape_numel(shape) == static_cast<int64_t>(data.size()),
          "data length does not match shape " + shape_str(shape));
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(data);
    t.impl_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_data({1}, {value}, requires_grad);
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (double& x : t.data()) x = rng.normal() * stddev;
    return t;
}

const Shape& Tensor::shape() const { return impl().shape; }
int64_t Tensor::rank() const { return static_cast<int64_t>(impl().shape.size()); }

int64_t Tensor::dim(int64_t i) const {
    return impl().shape[norm_axis(i, rank())];
}

int64_t Tensor::numel() const { return static_cast<int64_t>(impl().data.size()); }
bool Tensor::requires_grad() const { return impl().requires_grad; }

Tensor& Tensor::set_requires_grad(bool rg) {
    impl().requires_grad = rg;
    return *this;
}

std::vector<double>& Tensor::data() { return impl().data; }
const std::vector<double>& Tensor::data() const { return impl().data; }

double Tensor::item() const {
    check(numel() == 1, "item() requires a scalar tensor, shape is " + shape_str(shape()));
    return impl().data[0];
}

bool Tensor::has_grad() const { return !impl().grad.empty(); }

std::vector<double>& Tensor::grad() {
    Impl& im = impl();
    if (im.grad.empty()) im.grad.assign(im.data.size(), 0.0);
    return im.grad;
}

void Tensor::zero_grad() { impl().grad.clear(); }

Tensor Tensor::clone() const {
    return from_data(shape(), data(), false);
}

// ---- Graph ------------------------------------------------------------------

Graph::Graph() : prev_(g_active_graph) { g_active_graph = this; }
Graph::~Graph() { g_active_graph = prev_; }
Graph* Graph::current() { return g_active_graph; }

void Graph::record(const char* op, std::vector<Tensor> inputs, Tensor output,
                   std::function<void()> backward) {
    nodes_.push_back(Node{op, std::move(inputs), std::move(output), std::move(backward)});
}

void Graph::backward(const Tensor& root) {
    check(root.numel() == 1, "backward() requires a scalar root");
    if (!root.requires_grad()) return;  // constant root: nothing to do
    Tensor seed = root;
    seed.grad()[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        if (it->output.has_grad()) it->backward();
    }
}

void Graph::zero_all_grads() {
    std::unordered_set<const void*> seen;
    for (auto& node : nodes_) {
        for (auto& t : node.inputs) {
            if (seen.insert(t.storage_id()).second) t.zero_grad();
        }
        if (seen.insert(node.output.storage_id()).second) node.output.zero_grad();
    }
}

// ---- op helpers ---------------------------------------------------------------

namespace {

Tensor make_output(const char* op, Shape shape, std::vector<double> data,
                   std::initializer_list<const Tensor*> inputs) {
    check_finite(op, data);
    Tensor out = Tensor::from_data(std::move(shape), std::move(data));
    if (should_record(inputs)) out.set_requires_grad(true);
    return out;
}

void finish(const char* op, std::initializer_list<const Tensor*> inputs, const Tensor& out,
            std::function<void()> backward) {
    if (!out.requires_grad()) return;
    std::vector<Tensor> in;
    in.reserve(inputs.size());
    for (const Tensor* t : inputs) in.push_back(*t);
    Graph::current()->record(op, std::move(in), out, std::move(backward));
}

}  // namespace

// ---- arithmetic ---------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    const bool same = a.shape() == b.shape();
    check(same || is_suffix(a.shape(), b.shape()),
          "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const int64_t bn = b.numel();
    std::vector<double> out(a.data().size());
    const auto& av = a.data();
    const auto& bv = b.data();
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i % bn];
    Tensor y = make_output("add", a.shape(), std::move(out), {&a, &b});
    finish("add", {&a, &b}, y, [a = a, b = b, y]() mutable {
        const auto& gy = y.grad();
        if (a.requires_grad()) {
            auto& ga = a.grad();
            for (size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
        }
        if (b.requires_grad()) {
            auto& gb = b.grad();
            const int64_t bn = b.numel();
            for (size_t i = 0; i < gy.size(); ++i) gb[i % bn] += gy[i];
        }
    });
    return y;
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

Tensor mul(const Tensor& a, const Tensor& b) {
    check(a.shape() == b.shape(),
          "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<double> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    Tensor y = make_output("mul", a.shape(), std::move(out), {&a, &b});
    finish("mul", {&a, &b}, y, [a = a, b = b, y]() mutable {
        const auto& gy = y.grad();
        if (a.requires_grad()) {
            auto& ga = a.grad();
            for (size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * b.data()[i];
        }
        if (b.requires_grad()) {
            auto& gb = b.grad();
            for (size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i] * a.data()[i];
        }
    });
    return y;
}

Tensor scale(const Tensor& a, double c) {
    check(std::isfinite(c), "scale: non-finite constant");
    std::vector<double> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
    Tensor y = make_output("scale", a.shape(), std::move(out), {&a});
    finish("scale", {&a}, y, [a = a, y, c]() mutable {
        const auto& gy = y.grad();
        auto& ga = a.grad();
        for (size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * c;
    });
    return y;
}

// ---- matmul -------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    check(a.rank() >= 2, "matmul: lhs rank must be >= 2");
    check(b.rank() == 2 || b.rank() == a.rank(), "matmul: rhs rank must be 2 or match lhs");
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    const int64_t m = as[as.size() - 2];
    const int64_t kk = as[as.size() - 1];
    const bool batched_rhs = b.rank() != 2;
    if (batched_rhs) {
        check(std::equal(as.begin(), as.end() - 2, bs.begin()),
              "matmul: batch dims mismatch " + shape_str(as) + " vs " + shape_str(bs));
    }
    check(bs[bs.size() - 2] == kk,
          "matmul: inner dims mismatch " + shape_str(as) + " vs " + shape_str(bs));
    const int64_t n = bs[bs.size() - 1];
    int64_t batch = 1;
    for (size_t i = 0; i + 2 < as.size(); ++i) batch *= as[i];

    Shape out_shape(as.begin(), as.end() - 2);
    out_shape.push_back(m);
    out_shape.push_back(n);

    std::vector<double> out(batch * m * n, 0.0);
    const double* ap = a.data().data();
    const double* bp = b.data().data();
    for (int64_t t = 0; t < batch; ++t) {
        const double* A = ap + t * m * kk;
        const double* B = batched_rhs ? bp + t * kk * n : bp;
        double* C = out.data() + t * m * n;
        for (int64_t i = 0; i < m; ++i) {
            for (int64_t k = 0; k < kk; ++k) {
                const double aik = A[i * kk + k];
                if (aik == 0.0) continue;
                const double* Bk = B + k * n;
                double* Ci = C + i * n;
                for (int64_t j = 0; j < n; ++j) Ci[j] += aik * Bk[j];
            }
        }
    }
    Tensor y = make_output("matmul", std::move(out_shape), std::move(out), {&a, &b});
    finish("matmul", {&a, &b}, y, [a = a, b = b, y, batch, m, kk, n, batched_rhs]() mutable {
        const double* gy = y.grad().data();
        const double* ap = a.data().data();
        const double* bp = b.data().data();
        if (a.requires_grad()) {
            double* ga = a.grad().data();
            for (int64_t t = 0; t < batch; ++t) {
                const double* G = gy + t * m * n;
                const double* B = batched_rhs ? bp + t * kk * n : bp;
                double* GA = ga + t * m * kk;
                // dA[i,k] = sum_j G[i,j] * B[k,j]
                for (int64_t i = 0; i < m; ++i) {
                    for (int64_t k = 0; k < kk; ++k) {
                        const double* Gi = G + i * n;
                        const double* Bk = B + k * n;
                        double s = 0.0;
                        for (int64_t j = 0; j < n; ++j) s += Gi[j] * Bk[j];
                        GA[i * kk + k] += s;
                    }
                }
            }
        }
        if (b.requires_grad()) {
            double* gb = b.grad().data();
            for (int64_t t = 0; t < batch; ++t) {
                const double* G = gy + t * m * n;
                const double* A = ap + t * m * kk;
                double* GB = batched_rhs ? gb + t * kk * n : gb;
                // dB[k,j] += sum_i A[i,k] * G[i,j]
                for (int64_t i = 0; i < m; ++i) {
                    const double* Gi = G + i * n;
                    for (int64_t k = 0; k < kk; ++k) {
                        const double aik = A[i * kk + k];
                        if (aik == 0.0) continue;
                        double* GBk = GB + k * n;
                        for (int64_t j = 0; j < n; ++j) GBk[j] += aik * Gi[j];
                    }
                }
            }
        }
    });
    return y;
}

// ---- shape ops ------------------------------------------------------------------

Tensor transpose(const Tensor& a) {
    std::vector<int64_t> perm(a.rank());
    std::iota(perm.begin(), perm.end(), 0);
    std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
    return permute(a, perm);
}

namespace {

// copies src into dst where dst index = permuted src index
void permute_copy(const Shape& src_shape, const std::vector<int64_t>& perm,
                  const double* src, double* dst, bool invert) {
    const int64_t rank = static_cast<int64_t>(src_shape.size());
    Shape dst_shape(rank);
    for (int64_t i = 0; i < rank; ++i) dst_shape[i] = src_shape[perm[i]];
    std::vector<int64_t> src_strides(rank, 1), dst_strides(rank, 1);
    for (int64_t i = rank - 2; i >= 0; --i) {
        src_strides[i] = src_strides[i + 1] * src_shape[i + 1];
        dst_strides[i] = dst_strides[i + 1] * dst_shape[i + 1];
    }
    const int64_t n = shape_numel(src_shape);
    std::vector<int64_t> idx(rank, 0);
    for (int64_t flat = 0; flat < n; ++flat) {
        int64_t dst_off = 0;
        for (int64_t i = 0; i < rank; ++i) dst_off += idx[perm[i]] * dst_strides[i];
        if (invert) {
            dst[flat] += src[dst_off];  // dst is src-shaped accumulation
        } else {
            dst[dst_off] = src[flat];
        }
        for (int64_t i = rank - 1; i >= 0; --i) {
            if (++idx[i] < src_shape[i]) break;
            idx[i] = 0;
        }
    }
}

}  // namespace

Tensor permute(const Tensor& a, const std::vector<int64_t>& perm) {
    check(static_cast<int64_t>(perm.size()) == a.rank(), "permute: rank mismatch");
    std::vector<bool> seen(perm.size(), false);
    for (int64_t p : perm) {
        check(p >= 0 && p < a.rank() && !seen[p], "permute: invalid permutation");
        seen[p] = true;
    }
    Shape out_shape(a.rank());
    for (size_t i = 0; i < perm.size(); ++i) out_shape[i] = a.shape()[perm[i]];
    std::vector<double> out(a.data().size());
    permute_copy(a.shape(), perm, a.data().data(), out.data(), false);
    Tensor y = make_output("permute", std::move(out_shape), std::move(out), {&a});
    finish("permute", {&a}, y, [a = a, y, perm]() mutable {
        permute_copy(a.shape(), perm, y.grad().data(), a.grad().data(), true);
    });
    return y;
}

Tensor reshape(const Tensor& a, Shape shape) {
    check(shape_numel(shape) == a.numel(),
          "reshape: element count mismatch " + shape_str(a.shape()) + " -> " + shape_str(shape));
    Tensor y = make_output("reshape", std::move(shape), a.data(), {&a});
    finish("reshape", {&a}, y, [a = a, y]() mutable {
        const auto& gy = y.grad();
        auto& ga = a.grad();
        for (size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
    });
    return y;
}

Tensor concat(const std::vector<Tensor>& parts, int64_t axis) {
    check(!parts.empty(), "concat: no inputs");
    const int64_t ax = norm_axis(axis, parts[0].rank());
    Shape out_shape = parts[0].shape();
    int64_t total = 0;
    for (const Tensor& p : parts) {
        check(p.rank() == parts[0].rank(), "concat: rank mismatch");
        for (int64_t i = 0; i < p.rank(); ++i) {
            if (i != ax) check(p.shape()[i] == out_shape[i], "concat: shape mismatch off-axis");
        }
        total += p.shape()[ax];
    }
    out_shape[ax] = total;
    const AxisSplit os = split_at(out_shape, ax);
    std::vector<double> out(shape_numel(out_shape));
    int64_t offset = 0;
    for (const Tensor& p : parts) {
        const int64_t len = p.shape()[ax];
        const double* src = p.data().data();
        for (int64_t o = 0; o < os.outer; ++o) {
            std::copy(src + o * len * os.inner, src + (o + 1) * len * os.inner,
                      out.data() + (o * total + offset) * os.inner);
        }
        offset += len;
    }
    check_finite("concat", out);
    Tensor y = Tensor::from_data(std::move(out_shape), std::move(out));
    const bool rec = g_active_graph != nullptr &&
                     std::any_of(parts.begin(), parts.end(),
                                 [](const Tensor& t) { return t.requires_grad(); });
    if (rec) {
        y.set_requires_grad(true);
        Graph::current()->record("concat", parts, y, [parts = parts, y, os, total, ax]() mutable {
            const double* gy = y.grad().data();
            int64_t offset = 0;
            for (Tensor p : parts) {
                const int64_t len = p.shape()[ax];
                if (p.requires_grad()) {
                    double* gp = p.grad().data();
                    for (int64_t o = 0; o < os.outer; ++o) {
                        const double* src = gy + (o * total + offset) * os.inner;
                        double* dst = gp + o * len * os.inner;
                        for (int64_t i = 0; i < len * os.inner; ++i) dst[i] += src[i];
                    }
                }
                offset += len;
            }
        });
    }
    return y;
}

Tensor slice(const Tensor& a, int64_t axis, int64_t start, int64_t len) {
    const int64_t ax = norm_axis(axis, a.rank());
    check(start >= 0 && len > 0 && start + len <= a.shape()[ax], "slice: range out of bounds");
    Shape out_shape = a.shape();
    out_shape[ax] = len;
    const AxisSplit as = split_at(a.shape(), ax);
    std::vector<double> out(shape_numel(out_shape));
    const double* src = a.data().data();
    for (int64_t o = 0; o < as.outer; ++o) {
        std::copy(src + (o * as.len + start) * as.inner, src + (o * as.len + start + len) * as.inner,
                  out.data() + o * len * as.inner);
    }
    Tensor y = make_output("slice", std::move(out_shape), std::move(out), {&a});
    finish("slice", {&a}, y, [a = a, y, as, start, len]() mutable {
        const double* gy = y.grad().data();
        double* ga = a.grad().data();
        for (int64_t o = 0; o < as.outer; ++o) {
            double* dst = ga + (o * as.len + start) * as.inner;
            const double* src = gy + o * len * as.inner;
            for (int64_t i = 0; i < len * as.inner; ++i) dst[i] += src[i];
        }
    });
    return y;
}

Tensor segment_mean(const Tensor& a, int64_t axis, int64_t n_segments) {
    const int64_t ax = norm_axis(axis, a.rank());
    const int64_t t = a.shape()[ax];
    check(n_segments >= 1 && n_segments <= t,
          "segment_mean: need 1 <= segments <= axis length, got " + std::to_string(n_segments) +
              " for length " + std::to_string(t));
    Shape out_shape = a.shape();
    out_shape[ax] = n_segments;
    const AxisSplit as = split_at(a.shape(), ax);
    std::vector<int64_t> bounds(n_segments + 1);
    for (int64_t s = 0; s <= n_segments; ++s) bounds[s] = s * t / n_segments;
    std::vector<double> out(shape_numel(out_shape), 0.0);
    const double* src = a.data().data();
    for (int64_t o = 0; o < as.outer; ++o) {
        for (int64_t s = 0; s < n_segments; ++s) {
            const int64_t seg_len = bounds[s + 1] - bounds[s];
            double* dst = out.data() + (o * n_segments + s) * as.inner;
            for (int64_t p = bounds[s]; p < bounds[s + 1]; ++p) {
                const double* row = src + (o * t + p) * as.inner;
                for (int64_t i = 0; i < as.inner; ++i) dst[i] += row[i];
            }
            for (int64_t i = 0; i < as.inner; ++i) dst[i] /= static_cast<double>(seg_len);
        }
    }
    Tensor y = make_output("segment_mean", std::move(out_shape), std::move(out), {&a});
    finish("segment_mean", {&a}, y, [a = a, y, as, bounds, n_segments, t]() mutable {
        const double* gy = y.grad().data();
        double* ga = a.grad().data();
        for (int64_t o = 0; o < as.outer; ++o) {
            for (int64_t s = 0; s < n_segments; ++s) {
                const double inv = 1.0 / static_cast<double>(bounds[s + 1] - bounds[s]);
                const double* g = gy + (o * n_segments + s) * as.inner;
                for (int64_t p = bounds[s]; p < bounds[s + 1]; ++p) {
                    double* dst = ga + (o * t + p) * as.inner;
                    for (int64_t i = 0; i < as.inner; ++i) dst[i] += g[i] * inv;
                }
            }
        }
    });
    return y;
}

Tensor mean_all(const Tensor& a) {
    double s = 0.0;
    for (double x : a.data()) s += x;
    const double n = static_cast<double>(a.numel());
    Tensor y = make_output("mean_all", {1}, {s / n}, {&a});
    finish("mean_all", {&a}, y, [a = a, y, n]() mutable {
        const double g = y.grad()[0] / n;
        auto& ga = a.grad();
        for (double& x : ga) x += g;
    });
    return y;
}

Tensor row_scale(const Tensor& x, const Tensor& w) {
    check(x.rank() >= 1, "row_scale: rank must be >= 1");
    Shape lead(x.shape().begin(), x.shape().end() - 1);
    if (lead.empty()) lead.push_back(1);
    check(w.shape() == lead || (x.rank() == 1 && w.numel() == 1),
          "row_scale: weight shape " + shape_str(w.shape()) + " must match " + shape_str(lead));
    const int64_t d = x.shape().back();
    const int64_t rows = x.numel() / d;
    std::vector<double> out(x.data().size());
    for (int64_t r = 0; r < rows; ++r) {
        const double wv = w.data()[r];
        for (int64_t i = 0; i < d; ++i) out[r * d + i] = x.data()[r * d + i] * wv;
    }
    Tensor y = make_output("row_scale", x.shape(), std::move(out), {&x, &w});
    finish("row_scale", {&x, &w}, y, [x = x, w = w, y, rows, d]() mutable {
        const auto& gy = y.grad();
        if (x.requires_grad()) {
            auto& gx = x.grad();
            for (int64_t r = 0; r < rows; ++r) {
                const double wv = w.data()[r];
                for (int64_t i = 0; i < d; ++i) gx[r * d + i] += gy[r * d + i] * wv;
            }
        }
        if (w.requires_grad()) {
            auto& gw = w.grad();
            for (int64_t r = 0; r < rows; ++r) {
                double s = 0.0;
                for (int64_t i = 0; i < d; ++i) s += gy[r * d + i] * x.data()[r * d + i];
                gw[r] += s;
            }
        }
    });
    return y;
}

Tensor embedding_lookup(const Tensor& table, std::span<const int32_t> ids, const Shape& id_shape) {
    check(table.rank() == 2, "embedding_lookup: table must be [V, D]");
    check(shape_numel(id_shape) == static_cast<int64_t>(ids.size()),
          "embedding_lookup: id count does not match id_shape");
    const int64_t v = table.shape()[0];
    const int64_t d = table.shape()[1];
    for (int32_t id : ids) {
        if (id < 0 || id >= v) {
            throw std::out_of_range("embedding_lookup: token id " + std::to_string(id) +
                                    " out of range [0," + std::to_string(v) + ")");
        }
    }
    Shape out_shape = id_shape;
    out_shape.push_back(d);
    std::vector<double> out(ids.size() * d);
    for (size_t i = 0; i < ids.size(); ++i) {
        std::copy_n(table.data().data() + static_cast<int64_t>(ids[i]) * d, d, out.data() + i * d);
    }
    std::vector<int32_t> ids_copy(ids.begin(), ids.end());
    Tensor y = make_output("embedding_lookup", std::move(out_shape), std::move(out), {&table});
    finish("embedding_lookup", {&table}, y, [table = table, y, ids_copy, d]() mutable {
        const double* gy = y.grad().data();
        double* gt = table.grad().data();
        for (size_t i = 0; i < ids_copy.size(); ++i) {
            double* row = gt + static_cast<int64_t>(ids_copy[i]) * d;
            const double* g = gy + i * d;
            for (int64_t j = 0; j < d; ++j) row[j] += g[j];
        }
    });
    return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    const int64_t d = x.shape().back();
    check(gamma.numel() == d && beta.numel() == d, "layer_norm: gamma/beta must have last-axis size");
    const int64_t rows = x.numel() / d;
    std::vector<double> out(x.data().size());
    const double* xv = x.data().data();
    const double* gv = gamma.data().data();
    const double* bv = beta.data().data();
    for (int64_t r = 0; r < rows; ++r) {
        const double* row = xv + r * d;
        double mean = 0.0;
        for (int64_t i = 0; i < d; ++i) mean += row[i];
        mean /= d;
        double var = 0.0;
        for (int64_t i = 0; i < d; ++i) {
            const double c = row[i] - mean;
            var += c * c;
        }
        var /= d;
        const double inv_std = 1.0 / std::sqrt(var + eps);
        double* o = out.data() + r * d;
        for (int64_t i = 0; i < d; ++i) o[i] = (row[i] - mean) * inv_std * gv[i] + bv[i];
    }
    Tensor y = make_output("layer_norm", x.shape(), std::move(out), {&x, &gamma, &beta});
    finish("layer_norm", {&x, &gamma, &beta}, y, [x = x, gamma = gamma, beta = beta, y, rows, d, eps]() mutable {
        const double* gy = y.grad().data();
        const double* xv = x.data().data();
        const double* gv = gamma.data().data();
        std::vector<double> xhat(d), dyg(d);
        for (int64_t r = 0; r < rows; ++r) {
            const double* row = xv + r * d;
            const double* g = gy + r * d;
            double mean = 0.0;
            for (int64_t i = 0; i < d; ++i) mean += row[i];
            mean /= d;
            double var = 0.0;
            for (int64_t i = 0; i < d; ++i) {
                const double c = row[i] - mean;
                var += c * c;
            }
            var /= d;
            const double inv_std = 1.0 / std::sqrt(var + eps);
            for (int64_t i = 0; i < d; ++i) xhat[i] = (row[i] - mean) * inv_std;
            if (gamma.requires_grad()) {
                auto& gg = gamma.grad();
                for (int64_t i = 0; i < d; ++i) gg[i] += g[i] * xhat[i];
            }
            if (beta.requires_grad()) {
                auto& gb = beta.grad();
                for (int64_t i = 0; i < d; ++i) gb[i] += g[i];
            }
            if (x.requires_grad()) {
                double mean_dyg = 0.0, mean_dyg_xhat = 0.0;
                for (int64_t i = 0; i < d; ++i) {
                    dyg[i] = g[i] * gv[i];
                    mean_dyg += dyg[i];
                    mean_dyg_xhat += dyg[i] * xhat[i];
                }
                mean_dyg /= d;
                mean_dyg_xhat /= d;
                auto& gx = x.grad();
                for (int64_t i = 0; i < d; ++i) {
                    gx[r * d + i] += (dyg[i] - mean_dyg - xhat[i] * mean_dyg_xhat) * inv_std;
                }
            }
        }
    });
    return y;
}

Tensor gelu(const Tensor& x) {
    std::vector<double> out(x.data().size());
    for (size_t i = 0; i < out.size(); ++i) {
        const double v = x.data()[i];
        out[i] = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
    }
    Tensor y = make_output("gelu", x.shape(), std::move(out), {&x});
    finish("gelu", {&x}, y, [x = x, y]() mutable {
        const auto& gy = y.grad();
        auto& gx = x.grad();
        for (size_t i = 0; i < gy.size(); ++i) {
            const double v = x.data()[i];
            const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
            const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
            gx[i] += gy[i] * (cdf + v * pdf);
        }
    });
    return y;
}

namespace {

// shared softmax kernel: writes softmax along the decomposed axis into out
void softmax_lanes(const double* x, double* out, const AxisSplit& s) {
    for (int64_t o = 0; o < s.outer; ++o) {
        for (int64_t i = 0; i < s.inner; ++i) {
            const double* lane = x + (o * s.len) * s.inner + i;
            double* olane = out + (o * s.len) * s.inner + i;
            double mx = lane[0];
            for (int64_t j = 1; j < s.len; ++j) mx = std::max(mx, lane[j * s.inner]);
            double sum = 0.0;
            for (int64_t j = 0; j < s.len; ++j) {
                const double e = std::exp(lane[j * s.inner] - mx);
                olane[j * s.inner] = e;
                sum += e;
            }
            const double inv = 1.0 / sum;
            for (int64_t j = 0; j < s.len; ++j) olane[j * s.inner] *= inv;
        }
    }
}

}  // namespace

Tensor softmax(const Tensor& x, int64_t axis) {
    const int64_t ax = norm_axis(axis, x.rank());
    const AxisSplit s = split_at(x.shape(), ax);
    std::vector<double> out(x.data().size());
    softmax_lanes(x.data().data(), out.data(), s);
    Tensor y = make_output("softmax", x.shape(), std::move(out), {&x});
    finish("softmax", {&x}, y, [x = x, y, s]() mutable {
        const double* gy = y.grad().data();
        const double* yv = y.data().data();
        double* gx = x.grad().data();
        for (int64_t o = 0; o < s.outer; ++o) {
            for (int64_t i = 0; i < s.inner; ++i) {
                const int64_t base = o * s.len * s.inner + i;
                double dot = 0.0;
                for (int64_t j = 0; j < s.len; ++j) {
                    dot += gy[base + j * s.inner] * yv[base + j * s.inner];
                }
                for (int64_t j = 0; j < s.len; ++j) {
                    const int64_t k = base + j * s.inner;
                    gx[k] += yv[k] * (gy[k] - dot);
                }
            }
        }
    });
    return y;
}

Tensor log_softmax(const Tensor& x, int64_t axis) {
    const int64_t ax = norm_axis(axis, x.rank());
    const AxisSplit s = split_at(x.shape(), ax);
    std::vector<double> out(x.data().size());
    const double* xv = x.data().data();
    for (int64_t o = 0; o < s.outer; ++o) {
        for (int64_t i = 0; i < s.inner; ++i) {
            const int64_t base = o * s.len * s.inner + i;
            double mx = xv[base];
            for (int64_t j = 1; j < s.len; ++j) mx = std::max(mx, xv[base + j * s.inner]);
            double sum = 0.0;
            for (int64_t j = 0; j < s.len; ++j) sum += std::exp(xv[base + j * s.inner] - mx);
            const double lse = mx + std::log(sum);
            for (int64_t j = 0; j < s.len; ++j) {
                out[base + j * s.inner] = xv[base + j * s.inner] - lse;
            }
        }
    }
    Tensor y = make_output("log_softmax", x.shape(), std::move(out), {&x});
    finish("log_softmax", {&x}, y, [x = x, y, s]() mutable {
        const double* gy = y.grad().data();
        const double* yv = y.data().data();
        double* gx = x.grad().data();
        for (int64_t o = 0; o < s.outer; ++o) {
            for (int64_t i = 0; i < s.inner; ++i) {
                const int64_t base = o * s.len * s.inner + i;
                double gsum = 0.0;
                for (int64_t j = 0; j < s.len; ++j) gsum += gy[base + j * s.inner];
                for (int64_t j = 0; j < s.len; ++j) {
                    const int64_t k = base + j * s.inner;
                    gx[k] += gy[k] - std::exp(yv[k]) * gsum;
                }
            }
        }
    });
    return y;
}

Tensor cross_entropy_with_logits(const Tensor& logits, std::span<const int32_t> targets) {
    check(logits.rank() >= 1, "cross_entropy: logits rank must be >= 1");
    const int64_t v = logits.shape().back();
    const int64_t positions = logits.numel() / v;
    check(static_cast<int64_t>(targets.size()) == positions,
          "cross_entropy: expected " + std::to_string(positions) + " targets, got " +
              std::to_string(targets.size()));
    for (int32_t t : targets) {
        if (t < 0 || t >= v) {
            throw std::out_of_range("cross_entropy: target id " + std::to_string(t) + " out of range");
        }
    }
    const double* xv = logits.data().data();
    double total = 0.0;
    for (int64_t p = 0; p < positions; ++p) {
        const double* row = xv + p * v;
        double mx = row[0];
        for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int64_t j = 0; j < v; ++j) sum += std::exp(row[j] - mx);
        const double lse = mx + std::log(sum);
        total += lse - row[targets[p]];
    }
    std::vector<int32_t> tcopy(targets.begin(), targets.end());
    Tensor y = make_output("cross_entropy", {1}, {total / positions}, {&logits});
    finish("cross_entropy", {&logits}, y, [logits = logits, y, tcopy, v, positions]() mutable {
        const double g = y.grad()[0] / positions;
        const double* xv = logits.data().data();
        double* gx = logits.grad().data();
        for (int64_t p = 0; p < positions; ++p) {
            const double* row = xv + p * v;
            double mx = row[0];
            for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
            double sum = 0.0;
            for (int64_t j = 0; j < v; ++j) sum += std::exp(row[j] - mx);
            const double inv = 1.0 / sum;
            for (int64_t j = 0; j < v; ++j) {
                gx[p * v + j] += g * std::exp(row[j] - mx) * inv;
            }
            gx[p * v + tcopy[p]] -= g;
        }
    });
    return y;
}

Tensor mse(const Tensor& a, const Tensor& b) {
    check(a.shape() == b.shape(),
          "mse: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const int64_t n = a.numel();
    double total = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const double d = a.data()[i] - b.data()[i];
        total += d * d;
    }
    Tensor y = make_output("mse", {1}, {total / n}, {&a, &b});
    finish("mse", {&a, &b}, y, [a = a, b = b, y, n]() mutable {
        const double g = y.grad()[0] * 2.0 / n;
        if (a.requires_grad()) {
            auto& ga = a.grad();
            for (int64_t i = 0; i < n; ++i) ga[i] += g * (a.data()[i] - b.data()[i]);
        }
        if (b.requires_grad()) {
            auto& gb = b.grad();
            for (int64_t i = 0; i < n; ++i) gb[i] -= g * (a.data()[i] - b.data()[i]);
        }
    });
    return y;
}

}  // namespace fedmoe
