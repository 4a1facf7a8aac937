#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <vector>

#include "demaformer/common.hpp"

namespace demaformer {

namespace detail {
struct TensorData {
    std::vector<std::size_t> shape;
    std::vector<double> values;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
    }
};
}  // namespace detail

// Dense row-major tensor of 64-bit reals with optional gradient storage.
// Copies share the underlying buffer; operations in ops.hpp treat tensors
// as immutable values and allocate fresh outputs.
class Tensor {
public:
    Tensor() = default;

    Tensor(std::vector<std::size_t> shape, double fill = 0.0, bool requires_grad = false)
        : data_(std::make_shared<detail::TensorData>()) {
        data_->shape = std::move(shape);
        data_->values.assign(count(data_->shape), fill);
        data_->requires_grad = requires_grad;
    }

    Tensor(std::vector<std::size_t> shape, std::vector<double> values, bool requires_grad = false)
        : data_(std::make_shared<detail::TensorData>()) {
        DMF_CHECK(count(shape) == values.size(), "tensor shape does not match value count");
        data_->shape = std::move(shape);
        data_->values = std::move(values);
        data_->requires_grad = requires_grad;
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return Tensor({1}, std::vector<double>{v}, requires_grad);
    }

    bool defined() const { return static_cast<bool>(data_); }

    const std::vector<std::size_t>& shape() const { return data_->shape; }
    std::size_t ndim() const { return data_->shape.size(); }
    std::size_t size() const { return data_->values.size(); }

    std::size_t rows() const {
        DMF_CHECK(ndim() == 2, "rows() requires a 2-d tensor");
        return data_->shape[0];
    }
    std::size_t cols() const {
        DMF_CHECK(ndim() == 2, "cols() requires a 2-d tensor");
        return data_->shape[1];
    }

    std::vector<double>& values() { return data_->values; }
    const std::vector<double>& values() const { return data_->values; }

    double& at(std::size_t i) { return data_->values[i]; }
    double at(std::size_t i) const { return data_->values[i]; }
    double& at(std::size_t r, std::size_t c) { return data_->values[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return data_->values[r * cols() + c]; }

    double item() const {
        DMF_CHECK(size() == 1, "item() requires a single-element tensor");
        return data_->values[0];
    }

    bool requires_grad() const { return data_->requires_grad; }
    void set_requires_grad(bool on) {
        data_->requires_grad = on;
        if (on) data_->ensure_grad();
    }

    const std::vector<double>& grad() const {
        data_->ensure_grad();
        return data_->grad;
    }
    std::vector<double>& grad() {
        data_->ensure_grad();
        return data_->grad;
    }
    void zero_grad() { data_->grad.assign(data_->values.size(), 0.0); }

    std::shared_ptr<detail::TensorData> handle() const { return data_; }

    static std::size_t count(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (std::size_t s : shape) n *= s;
        return n;
    }

private:
    std::shared_ptr<detail::TensorData> data_;
};

// Execution-ordered record of differentiable operations. Each recorded step
// is a closure that propagates the output gradient to the operand gradients;
// backward() replays the record once, in reverse, so every node is touched
// exactly once. A tape and the tensors recorded on it belong to one thread.
class Tape {
public:
    using Step = std::function<void()>;

    void record(Step step) { steps_.push_back(std::move(step)); }

    std::size_t size() const { return steps_.size(); }
    void clear() { steps_.clear(); }

    // Seeds d(loss)/d(loss) = 1 and accumulates gradients into every
    // requires_grad tensor that participated. loss must be scalar.
    void backward(const Tensor& loss) {
        DMF_CHECK(loss.size() == 1, "backward requires a scalar loss");
        DMF_CHECK(loss.requires_grad(), "loss was not produced through the tape");
        loss.handle()->ensure_grad();
        loss.handle()->grad[0] += 1.0;
        for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
    }

    static Tape* active() { return active_; }

    // RAII activation; ops record onto the innermost active tape.
    class Scope {
    public:
        explicit Scope(Tape* tape) : previous_(active_) { active_ = tape; }
        ~Scope() { active_ = previous_; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        Tape* previous_;
    };

private:
    std::vector<Step> steps_;
    static thread_local Tape* active_;
};

}  // namespace demaformer
