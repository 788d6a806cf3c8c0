#pragma once

// Dense f64 tensors with tape-based reverse-mode differentiation.
//
// Ops record onto the Tape installed for the calling thread (see
// Tape::Scope). With no active tape, ops run in inference mode and the
// results never require grad. Layout is row-major everywhere; reshape keeps
// the element order.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace fedmema {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty unless requires_grad
  bool requires_grad = false;
};

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  // Direct write access, meant for leaves (initialization, optimizer steps).
  std::span<double> mutable_data() { return node_->data; }
  double operator[](std::size_t i) const { return node_->data[i]; }
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on);
  std::span<const double> grad() const { return node_->grad; }
  // Grad accumulation goes through shared handles, so this is const.
  std::span<double> mutable_grad() const { return node_->grad; }
  void zero_grad();

  // Deep copy of the values; the copy does not require grad.
  Tensor detach() const;

  const TensorNode* id() const { return node_.get(); }
  const std::shared_ptr<TensorNode>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}
  friend Tensor make_result(std::string_view, Shape, std::vector<double>,
                            const std::vector<Tensor>&,
                            std::function<void(std::span<const double>)>);

  std::shared_ptr<TensorNode> node_;
};

class Tape {
 public:
  using BackwardFn = std::function<void(std::span<const double> out_grad)>;

  struct Record {
    std::string op;
    std::shared_ptr<TensorNode> output;
    std::vector<const TensorNode*> inputs;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void push(Record record) { records_.push_back(std::move(record)); }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  const std::vector<Record>& records() const { return records_; }
  void clear() { records_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and runs every recorded rule once in reverse
  // recording order, accumulating into input grads. Clears the tape.
  void backward(const Tensor& loss);

  // Tape that ops on this thread record onto, or nullptr.
  static Tape* active();

  class Scope {
   public:
    explicit Scope(Tape& tape);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

 private:
  std::vector<Record> records_;
};

// Builds an op output. Checks the values are finite (NumericError naming
// `op` otherwise) and, when a tape is active and some input requires grad,
// records `backward` so it runs during Tape::backward.
Tensor make_result(std::string_view op, Shape shape, std::vector<double> data,
                   const std::vector<Tensor>& inputs,
                   std::function<void(std::span<const double>)> backward);

// Throws NumericError if any value is NaN or Inf.
void check_finite(std::string_view op, std::span<const double> values);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor softmax(const Tensor& x, std::size_t axis);

// Cross-correlation. x is [C_in,H,W] or [N,C_in,H,W], w is [C_out,C_in,k,k],
// b is [C_out]. The output has the same rank as x.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b,
              std::size_t stride = 1, std::size_t pad = 0);

Tensor relu(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin,
             std::size_t end);

// Spatial ops act on the last two axes.
Tensor upsample_nearest2x(const Tensor& x);
Tensor avg_pool2x(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// While alive on a thread, relu folds its active/inactive pattern into a
// running hash. Finite-difference checks use it to tell when a perturbation
// crossed a relu kink.
class ActivationProbe {
 public:
  ActivationProbe();
  ~ActivationProbe();
  ActivationProbe(const ActivationProbe&) = delete;
  ActivationProbe& operator=(const ActivationProbe&) = delete;
  std::uint64_t signature() const { return hash_; }

 private:
  friend Tensor relu(const Tensor& x);
  ActivationProbe* previous_;
  std::uint64_t hash_ = 1469598103934665603ULL;
};

}  // namespace fedmema
