// SPDX-License-Identifier: Apache-2.0
//
// Dense 64-bit tensors with a reverse-mode gradient tape.
//
// Design notes:
//  * Tensors are cheap shared handles; every op returns a freshly allocated
//    tensor (no views, no aliasing).
//  * A Graph is a thread-confined tape. Constructing one makes it the active
//    tape for the current thread (restored on destruction). Ops record a node
//    when a tape is active and any input requires grad.
//  * Gradients accumulate additively across repeated uses of a tensor.
//  * Broadcasting is limited to bias-style addition where the rhs shape is a
//    trailing suffix of the lhs shape, plus row_scale; everything else is an
//    explicit reshape.
//  * Any non-finite value in an op output throws.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace fedmoe {

class Rng;

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor randn(Shape shape, Rng& rng, double stddev, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    int64_t rank() const;
    int64_t dim(int64_t i) const;  // negative indices count from the back
    int64_t numel() const;

    bool requires_grad() const;
    Tensor& set_requires_grad(bool rg);

    std::vector<double>& data();
    const std::vector<double>& data() const;
    double item() const;  // scalar tensors only

    bool has_grad() const;
    std::vector<double>& grad();  // allocates a zero buffer on first access
    void zero_grad();             // drops the grad buffer

    // Deep copy of values; the copy is a grad-less leaf.
    Tensor clone() const;

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
    const void* storage_id() const { return impl_.get(); }

private:
    struct Impl {
        Shape shape;
        std::vector<double> data;
        std::vector<double> grad;  // empty until touched
        bool requires_grad = false;
    };
    std::shared_ptr<Impl> impl_;
    Impl& impl();
    const Impl& impl() const;
};

// Reverse-mode tape. Nodes are recorded in execution order, so reversal is a
// valid topological order; backward() walks it once, deterministically.
class Graph {
public:
    Graph();
    ~Graph();
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    static Graph* current();

    // Seeds d(root)/d(root) = 1 and propagates to every requires_grad leaf.
    // root must be scalar. A root with no recorded history writes nothing.
    void backward(const Tensor& root);

    // Zeroes the grad of every tensor this tape has touched.
    void zero_all_grads();

    size_t node_count() const { return nodes_.size(); }

    struct Node {
        const char* op;
        std::vector<Tensor> inputs;
        Tensor output;
        std::function<void()> backward;
    };

    void record(const char* op, std::vector<Tensor> inputs, Tensor output,
                std::function<void()> backward);

private:
    std::vector<Node> nodes_;
    Graph* prev_ = nullptr;
};

// ---- ops -------------------------------------------------------------------

// elementwise add; b may be a trailing-suffix shape of a (bias add)
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
// elementwise product, shapes must match
Tensor mul(const Tensor& a, const Tensor& b);
// multiply by a constant
Tensor scale(const Tensor& a, double c);

// a: [..., M, K]; b: [K, N] or [..., K, N] with leading dims equal to a's
Tensor matmul(const Tensor& a, const Tensor& b);

// swap the last two axes
Tensor transpose(const Tensor& a);
// general axis permutation
Tensor permute(const Tensor& a, const std::vector<int64_t>& perm);
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, int64_t axis);
Tensor slice(const Tensor& a, int64_t axis, int64_t start, int64_t len);

// partition `axis` into n contiguous near-even segments and mean each
// (segment s covers [floor(s*T/n), floor((s+1)*T/n)))
Tensor segment_mean(const Tensor& a, int64_t axis, int64_t n_segments);
Tensor mean_all(const Tensor& a);

// y[..., d] = x[..., d] * w[...]; w's shape is x's shape minus the last axis
Tensor row_scale(const Tensor& x, const Tensor& w);

// table: [V, D]; ids laid out row-major with shape id_shape; out: id_shape + [D]
Tensor embedding_lookup(const Tensor& table, std::span<const int32_t> ids, const Shape& id_shape);

// normalization over the last axis
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

Tensor gelu(const Tensor& x);

Tensor softmax(const Tensor& x, int64_t axis);
// fused: x - max - log(sum exp(x - max)); never log(softmax(x))
Tensor log_softmax(const Tensor& x, int64_t axis);

// logits: [..., V]; targets: one id per leading position (row-major).
// Returns the scalar mean of -log softmax(logits)[target] over all positions.
Tensor cross_entropy_with_logits(const Tensor& logits, std::span<const int32_t> targets);

// scalar mean of squared differences
Tensor mse(const Tensor& a, const Tensor& b);

}  // namespace fedmoe
