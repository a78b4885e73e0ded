#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include "hted/autodiff/tensor.hpp"

namespace hted::ad {

/// Handle to a value recorded on a Tape.
struct Slot {
  std::uint32_t index = 0;
  friend bool operator==(Slot, Slot) = default;
};

// The closed primitive set. Structural ops (select/replace/slice/concat rows
// and columns) only move data; every numeric primitive is listed first.
enum class OpKind : std::uint8_t {
  leaf,
  matmul,
  add,
  mul,
  scale,
  gelu,
  softmax,
  rms_norm,
  embedding,
  cross_entropy,
  select_rows,
  replace_row,
  slice_cols,
  concat_cols,
};

std::string_view op_name(OpKind kind) noexcept;

struct OpAttrs {
  bool trans_a = false;
  bool trans_b = false;
  bool causal = false;
  std::size_t groups = 1;
  std::size_t begin = 0;
  std::size_t end = 0;
  double scalar = 0.0;
  std::shared_ptr<const std::vector<std::int64_t>> ids;
};

class Gradients {
 public:
  void set(Slot slot, Tensor grad);
  bool contains(Slot slot) const;
  const Tensor& operator[](Slot slot) const;
  Tensor take(Slot slot);

 private:
  std::vector<std::pair<Slot, Tensor>> entries_;
};

// Records a computation as an ordered list of primitive applications.
// Every value is computed eagerly at record time; inputs of each node
// precede it, so reverse iteration is a valid backward schedule.
//
// Borrowed leaves refer to caller-owned tensors that must outlive the tape
// and stay unmodified while it is in use.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) noexcept = default;
  Tape& operator=(Tape&&) noexcept = default;

  Slot input(Tensor value);
  Slot constant(Tensor value);
  Slot borrow(const Tensor& value, bool differentiable = false);

  Slot matmul(Slot a, Slot b, bool trans_a = false, bool trans_b = false, std::size_t groups = 1);
  Slot add(Slot a, Slot b);
  Slot mul(Slot a, Slot b);
  Slot scale(Slot a, double factor);
  Slot gelu(Slot a);
  /// Row-wise softmax. With `causal`, row r may only see columns
  /// c <= r % cols (rows are stacked groups of cols-long sequences).
  Slot softmax(Slot a, bool causal = false);
  Slot rms_norm(Slot x, Slot gain, double eps = 1e-5);
  Slot embedding(Slot table, std::vector<std::int64_t> ids);
  /// Mean negative log-likelihood over rows whose target is >= 0.
  Slot cross_entropy(Slot logits, std::vector<std::int64_t> targets);
  Slot select_rows(Slot x, std::vector<std::int64_t> rows);
  Slot replace_row(Slot x, std::size_t row, Slot replacement);
  Slot slice_cols(Slot x, std::size_t begin, std::size_t end);
  Slot concat_cols(std::span<const Slot> parts);

  const Tensor& value(Slot slot) const;
  bool requires_grad(Slot slot) const;
  OpKind kind(Slot slot) const;

  /// Number of recorded operations (leaves excluded).
  std::size_t size() const noexcept { return op_count_; }
  std::size_t slot_count() const noexcept { return nodes_.size(); }

  /// Gradients of a scalar seed with respect to `wrt`.
  Gradients backward(Slot seed, std::span<const Slot> wrt) const;
  /// Vector-Jacobian product with an explicit cotangent for `seed`.
  Gradients backward(Slot seed, const Tensor& cotangent, std::span<const Slot> wrt) const;

  /// Recomputes every operation from the leaf values and returns the values
  /// of `outputs`. Bit-identical to the recorded values.
  std::vector<Tensor> replay(std::span<const Slot> outputs) const;

 private:
  struct Node {
    OpKind kind = OpKind::leaf;
    std::vector<Slot> inputs;
    OpAttrs attrs;
    bool needs_grad = false;
  };

  Slot push_leaf(std::shared_ptr<const Tensor> value, bool differentiable);
  Slot push_op(OpKind kind, std::vector<Slot> inputs, OpAttrs attrs);
  void check_slot(Slot slot) const;

  std::vector<Node> nodes_;
  std::vector<std::shared_ptr<const Tensor>> values_;
  std::size_t op_count_ = 0;
};

using Program = std::function<std::vector<Slot>(Tape&, std::span<const Slot>)>;

struct Recording {
  Tape tape;
  std::vector<Slot> inputs;
  std::vector<Slot> outputs;
  std::vector<Tensor> output_values;
};

/// Runs `program` on differentiable inputs, returning its outputs and tape.
Recording record_forward(const Program& program, std::vector<Tensor> inputs);

}  // namespace hted::ad
