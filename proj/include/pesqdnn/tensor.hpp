#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "pesqdnn/errors.hpp"

namespace pesqdnn {

enum class Precision { f64, f32 };

// Dense row-major tensor. Value and gradient live side by side; gradients are
// allocated lazily on first accumulation. requires_grad marks leaves (model
// parameters); flows_grad marks any tensor on a differentiable path.
class TensorData {
public:
    std::vector<std::size_t> shape;
    std::vector<double> value;
    std::vector<double> grad; // empty until first touched
    bool requires_grad = false;
    bool flows_grad = false;

    std::size_t size() const { return value.size(); }

    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), 0.0);
    }
    void zero_grad() {
        for (double& g : grad) g = 0.0;
    }
};

using Tensor = std::shared_ptr<TensorData>;

Tensor make_tensor(std::vector<std::size_t> shape, bool requires_grad = false);
Tensor make_tensor(std::vector<std::size_t> shape, std::vector<double> values,
                   bool requires_grad = false);
Tensor make_scalar(double v, bool requires_grad = false);

std::size_t shape_product(const std::vector<std::size_t>& shape);
std::string shape_str(const std::vector<std::size_t>& shape);

// Which statistic a 2-D axis reduction computes.
enum class Reduce { Mean, Std, Min, Max };

// Epsilon under the square root of the std reduction; keeps the gradient
// finite on constant inputs (silence blocks).
inline constexpr double kStdEpsilon = 1e-8;

// Reverse-mode computation tape. Ops append nodes; backward() replays them in
// reverse. Single-owner, not shared across threads. In f32 mode every op
// output is rounded to 32-bit precision, so results are reproducible for
// 32-bit stored weights.
class Graph {
public:
    explicit Graph(Precision prec = Precision::f64, bool record = true)
        : prec_(prec), record_(record) {}

    Precision precision() const { return prec_; }

    // --- binary / elementwise -------------------------------------------
    Tensor matmul(const Tensor& a, const Tensor& b);
    Tensor add(const Tensor& a, const Tensor& b);
    Tensor sub(const Tensor& a, const Tensor& b);
    Tensor mul(const Tensor& a, const Tensor& b);
    Tensor scale(const Tensor& a, double s);
    Tensor add_const(const Tensor& a, double c);
    // matrix [m x n] plus row vector [n], broadcast over rows (bias add)
    Tensor add_row(const Tensor& mat, const Tensor& row);

    // --- activations ----------------------------------------------------
    Tensor sigmoid(const Tensor& a);
    Tensor tanh(const Tensor& a);
    Tensor leaky_relu(const Tensor& a, double slope);
    // softmax over a flat 1-D tensor (or any shape treated as flat)
    Tensor softmax(const Tensor& a);

    // --- convolution / pooling (input H x T x C) ------------------------
    Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias,
                  std::size_t pad_h, std::size_t pad_w);
    Tensor maxpool2d(const Tensor& input, std::size_t ph, std::size_t pw);

    // --- reductions -----------------------------------------------------
    // 2-D input [m x n], reduce over axis 0 -> [1 x n]
    Tensor reduce_rows(const Tensor& a, Reduce kind);
    Tensor sum_all(const Tensor& a);  // -> scalar [1]
    Tensor mean_all(const Tensor& a); // -> scalar [1]

    // --- shape plumbing --------------------------------------------------
    Tensor reshape(const Tensor& a, std::vector<std::size_t> shape);
    Tensor concat_flat(const std::vector<Tensor>& parts); // 1-D concat
    Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t len);
    Tensor row(const Tensor& a, std::size_t i); // 2-D -> [1 x n]
    Tensor stack_rows(const std::vector<Tensor>& rows); // k x [1 x n] -> [k x n]

    // --- backward --------------------------------------------------------
    // Seeds d(loss)/d(loss) = 1 and replays the tape. Leaf gradients
    // accumulate across calls; intermediate gradients are reset each call.
    void backward(const Tensor& loss);
    void clear();
    std::size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        Tensor out;
        std::function<void()> bw;
    };

    Precision prec_;
    bool record_;
    std::vector<Node> nodes_;

    double q(double v) const {
        return prec_ == Precision::f32 ? static_cast<double>(static_cast<float>(v)) : v;
    }
    void quantize(Tensor& t) const;
    Tensor finish(Tensor out, bool flows, std::function<void()> bw);
};

// Round a tensor's values to 32-bit precision in place (checkpoint casts,
// f32-mode weight loading).
void round_to_f32(TensorData& t);

} // namespace pesqdnn
