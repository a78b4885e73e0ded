#include "hted/autodiff/tape.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include <Eigen/Dense>

#include "hted/common/errors.hpp"

namespace hted::ad {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

std::string describe(OpKind kind, const Tensor& a, const Tensor& b) {
  return std::string(op_name(kind)) + " of " + a.shape_string() + " and " + b.shape_string();
}

void require_matrix(OpKind kind, const Tensor& t) {
  if (t.rank() != 2) throw StructuralError(std::string(op_name(kind)) + " expects a matrix, got " + t.shape_string());
}

// C_g = op(A_g) * op(B_g) for G equal row-groups of the stored A and B.
Tensor grouped_product(const Tensor& a, const Tensor& b, bool ta, bool tb, std::size_t groups) {
  if (a.rank() != 2 || b.rank() != 2 || groups == 0 || a.rows() % groups != 0 || b.rows() % groups != 0) {
    throw StructuralError(describe(OpKind::matmul, a, b) + " with " + std::to_string(groups) + " groups");
  }
  const std::size_t ar = a.rows() / groups, ac = a.cols();
  const std::size_t br = b.rows() / groups, bc = b.cols();
  const std::size_t m = ta ? ac : ar, k1 = ta ? ar : ac;
  const std::size_t k2 = tb ? bc : br, n = tb ? br : bc;
  if (k1 != k2) throw StructuralError(describe(OpKind::matmul, a, b));
  Tensor out = Tensor::zeros(groups * m, n);
  for (std::size_t g = 0; g < groups; ++g) {
    ConstMap ma(a.data() + g * ar * ac, ar, ac);
    ConstMap mb(b.data() + g * br * bc, br, bc);
    MutMap mo(out.data() + g * m * n, m, n);
    if (!ta && !tb) mo.noalias() = ma * mb;
    else if (!ta && tb) mo.noalias() = ma * mb.transpose();
    else if (ta && !tb) mo.noalias() = ma.transpose() * mb;
    else mo.noalias() = ma.transpose() * mb.transpose();
  }
  return out;
}

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

double gelu_slope(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

std::size_t visible_columns(const OpAttrs& attrs, std::size_t row, std::size_t cols) {
  return attrs.causal ? (row % cols) + 1 : cols;
}

Tensor softmax_forward(const Tensor& x, const OpAttrs& attrs) {
  require_matrix(OpKind::softmax, x);
  Tensor out(x.shape());
  const std::size_t cols = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const std::size_t visible = visible_columns(attrs, r, cols);
    auto in = x.row(r);
    auto o = out.row(r);
    double mx = in[0];
    for (std::size_t c = 1; c < visible; ++c) mx = std::max(mx, in[c]);
    double total = 0.0;
    for (std::size_t c = 0; c < visible; ++c) {
      o[c] = std::exp(in[c] - mx);
      total += o[c];
    }
    for (std::size_t c = 0; c < visible; ++c) o[c] /= total;
  }
  return out;
}

Tensor rms_norm_forward(const Tensor& x, const Tensor& gain, double eps) {
  require_matrix(OpKind::rms_norm, x);
  if (gain.size() != x.cols()) throw StructuralError(describe(OpKind::rms_norm, x, gain));
  Tensor out(x.shape());
  const std::size_t d = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    auto o = out.row(r);
    double ms = 0.0;
    for (double v : in) ms += v * v;
    const double inv = 1.0 / std::sqrt(ms / static_cast<double>(d) + eps);
    for (std::size_t c = 0; c < d; ++c) o[c] = in[c] * inv * gain[c];
  }
  return out;
}

// Per-row log-sum-exp, used by the cross-entropy forward and backward.
double row_logsumexp(std::span<const double> row) {
  const double mx = *std::max_element(row.begin(), row.end());
  double total = 0.0;
  for (double v : row) total += std::exp(v - mx);
  return mx + std::log(total);
}

Tensor compute(OpKind kind, const OpAttrs& attrs, std::span<const Tensor* const> in) {
  switch (kind) {
    case OpKind::leaf:
      throw StructuralError("leaf nodes are not computed");
    case OpKind::matmul:
      return grouped_product(*in[0], *in[1], attrs.trans_a, attrs.trans_b, attrs.groups);
    case OpKind::add:
    case OpKind::mul: {
      const Tensor& a = *in[0];
      const Tensor& b = *in[1];
      if (a.shape() != b.shape()) throw StructuralError(describe(kind, a, b));
      Tensor out = a;
      if (kind == OpKind::add) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
      } else {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
      }
      return out;
    }
    case OpKind::scale: {
      Tensor out = *in[0];
      for (auto& v : out.values()) v *= attrs.scalar;
      return out;
    }
    case OpKind::gelu: {
      Tensor out = *in[0];
      for (auto& v : out.values()) v = gelu_value(v);
      return out;
    }
    case OpKind::softmax:
      return softmax_forward(*in[0], attrs);
    case OpKind::rms_norm:
      return rms_norm_forward(*in[0], *in[1], attrs.scalar);
    case OpKind::embedding: {
      const Tensor& table = *in[0];
      require_matrix(kind, table);
      const auto& ids = *attrs.ids;
      Tensor out = Tensor::zeros(ids.size(), table.cols());
      for (std::size_t r = 0; r < ids.size(); ++r) {
        if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= table.rows()) {
          throw StructuralError("embedding id " + std::to_string(ids[r]) + " outside table of " +
                                std::to_string(table.rows()) + " rows");
        }
        auto src = table.row(static_cast<std::size_t>(ids[r]));
        std::copy(src.begin(), src.end(), out.row(r).begin());
      }
      return out;
    }
    case OpKind::cross_entropy: {
      const Tensor& logits = *in[0];
      require_matrix(kind, logits);
      const auto& targets = *attrs.ids;
      if (targets.size() != logits.rows()) throw StructuralError("cross_entropy target count mismatch");
      double total = 0.0;
      std::size_t count = 0;
      for (std::size_t r = 0; r < targets.size(); ++r) {
        if (targets[r] < 0) continue;
        if (static_cast<std::size_t>(targets[r]) >= logits.cols()) {
          throw StructuralError("cross_entropy target outside vocabulary");
        }
        total += row_logsumexp(logits.row(r)) - logits.at(r, static_cast<std::size_t>(targets[r]));
        ++count;
      }
      if (count == 0) throw StructuralError("cross_entropy with no active targets");
      return Tensor::scalar(total / static_cast<double>(count));
    }
    case OpKind::select_rows: {
      const Tensor& x = *in[0];
      require_matrix(kind, x);
      const auto& rows = *attrs.ids;
      Tensor out = Tensor::zeros(rows.size(), x.cols());
      for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] < 0 || static_cast<std::size_t>(rows[r]) >= x.rows()) {
          throw StructuralError("select_rows index out of range");
        }
        auto src = x.row(static_cast<std::size_t>(rows[r]));
        std::copy(src.begin(), src.end(), out.row(r).begin());
      }
      return out;
    }
    case OpKind::replace_row: {
      const Tensor& x = *in[0];
      const Tensor& v = *in[1];
      require_matrix(kind, x);
      if (attrs.begin >= x.rows() || v.size() != x.cols()) throw StructuralError(describe(kind, x, v));
      Tensor out = x;
      std::copy(v.values().begin(), v.values().end(), out.row(attrs.begin).begin());
      return out;
    }
    case OpKind::slice_cols: {
      const Tensor& x = *in[0];
      require_matrix(kind, x);
      if (attrs.begin >= attrs.end || attrs.end > x.cols()) throw StructuralError("slice_cols range out of bounds");
      const std::size_t w = attrs.end - attrs.begin;
      Tensor out = Tensor::zeros(x.rows(), w);
      for (std::size_t r = 0; r < x.rows(); ++r) {
        auto src = x.row(r).subspan(attrs.begin, w);
        std::copy(src.begin(), src.end(), out.row(r).begin());
      }
      return out;
    }
    case OpKind::concat_cols: {
      if (in.empty()) throw StructuralError("concat_cols of nothing");
      std::size_t total = 0;
      for (const Tensor* p : in) {
        require_matrix(kind, *p);
        if (p->rows() != in[0]->rows()) throw StructuralError(describe(kind, *in[0], *p));
        total += p->cols();
      }
      Tensor out = Tensor::zeros(in[0]->rows(), total);
      for (std::size_t r = 0; r < out.rows(); ++r) {
        auto dst = out.row(r).begin();
        for (const Tensor* p : in) dst = std::copy(p->row(r).begin(), p->row(r).end(), dst);
      }
      return out;
    }
  }
  throw StructuralError("unknown operation");
}

void accumulate(std::vector<Tensor>& grads, std::vector<bool>& present, Slot slot, Tensor&& g) {
  if (!present[slot.index]) {
    grads[slot.index] = std::move(g);
    present[slot.index] = true;
    return;
  }
  auto dst = grads[slot.index].values();
  auto src = g.values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

std::string_view op_name(OpKind kind) noexcept {
  switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::gelu: return "gelu";
    case OpKind::softmax: return "softmax";
    case OpKind::rms_norm: return "rms_norm";
    case OpKind::embedding: return "embedding";
    case OpKind::cross_entropy: return "cross_entropy";
    case OpKind::select_rows: return "select_rows";
    case OpKind::replace_row: return "replace_row";
    case OpKind::slice_cols: return "slice_cols";
    case OpKind::concat_cols: return "concat_cols";
  }
  return "?";
}

void Gradients::set(Slot slot, Tensor grad) {
  for (auto& [s, g] : entries_) {
    if (s == slot) {
      g = std::move(grad);
      return;
    }
  }
  entries_.emplace_back(slot, std::move(grad));
}

bool Gradients::contains(Slot slot) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.first == slot; });
}

const Tensor& Gradients::operator[](Slot slot) const {
  for (const auto& [s, g] : entries_)
    if (s == slot) return g;
  throw StructuralError("no gradient recorded for slot " + std::to_string(slot.index));
}

Tensor Gradients::take(Slot slot) {
  for (auto& [s, g] : entries_)
    if (s == slot) return std::move(g);
  throw StructuralError("no gradient recorded for slot " + std::to_string(slot.index));
}

Slot Tape::push_leaf(std::shared_ptr<const Tensor> value, bool differentiable) {
  Node node;
  node.kind = OpKind::leaf;
  node.needs_grad = differentiable;
  nodes_.push_back(std::move(node));
  values_.push_back(std::move(value));
  return Slot{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Slot Tape::input(Tensor value) { return push_leaf(std::make_shared<const Tensor>(std::move(value)), true); }

Slot Tape::constant(Tensor value) { return push_leaf(std::make_shared<const Tensor>(std::move(value)), false); }

Slot Tape::borrow(const Tensor& value, bool differentiable) {
  // Aliasing constructor with an empty owner: a non-owning handle.
  return push_leaf(std::shared_ptr<const Tensor>(std::shared_ptr<const Tensor>{}, &value), differentiable);
}

void Tape::check_slot(Slot slot) const {
  if (slot.index >= nodes_.size()) {
    throw StructuralError("slot " + std::to_string(slot.index) + " is not on this tape");
  }
}

Slot Tape::push_op(OpKind kind, std::vector<Slot> inputs, OpAttrs attrs) {
  std::vector<const Tensor*> in;
  in.reserve(inputs.size());
  bool needs_grad = false;
  for (Slot s : inputs) {
    check_slot(s);
    in.push_back(values_[s.index].get());
    needs_grad = needs_grad || nodes_[s.index].needs_grad;
  }
  Tensor out = compute(kind, attrs, in);
  if (!out.all_finite()) {
    throw NumericError("operation #" + std::to_string(op_count_) + " (" + std::string(op_name(kind)) +
                       ") produced a non-finite value");
  }
  Node node;
  node.kind = kind;
  node.inputs = std::move(inputs);
  node.attrs = std::move(attrs);
  node.needs_grad = needs_grad;
  nodes_.push_back(std::move(node));
  values_.push_back(std::make_shared<const Tensor>(std::move(out)));
  ++op_count_;
  return Slot{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Slot Tape::matmul(Slot a, Slot b, bool trans_a, bool trans_b, std::size_t groups) {
  OpAttrs attrs;
  attrs.trans_a = trans_a;
  attrs.trans_b = trans_b;
  attrs.groups = groups;
  return push_op(OpKind::matmul, {a, b}, std::move(attrs));
}

Slot Tape::add(Slot a, Slot b) { return push_op(OpKind::add, {a, b}, {}); }

Slot Tape::mul(Slot a, Slot b) { return push_op(OpKind::mul, {a, b}, {}); }

Slot Tape::scale(Slot a, double factor) {
  OpAttrs attrs;
  attrs.scalar = factor;
  return push_op(OpKind::scale, {a}, std::move(attrs));
}

Slot Tape::gelu(Slot a) { return push_op(OpKind::gelu, {a}, {}); }

Slot Tape::softmax(Slot a, bool causal) {
  OpAttrs attrs;
  attrs.causal = causal;
  return push_op(OpKind::softmax, {a}, std::move(attrs));
}

Slot Tape::rms_norm(Slot x, Slot gain, double eps) {
  OpAttrs attrs;
  attrs.scalar = eps;
  return push_op(OpKind::rms_norm, {x, gain}, std::move(attrs));
}

Slot Tape::embedding(Slot table, std::vector<std::int64_t> ids) {
  OpAttrs attrs;
  attrs.ids = std::make_shared<const std::vector<std::int64_t>>(std::move(ids));
  return push_op(OpKind::embedding, {table}, std::move(attrs));
}

Slot Tape::cross_entropy(Slot logits, std::vector<std::int64_t> targets) {
  OpAttrs attrs;
  attrs.ids = std::make_shared<const std::vector<std::int64_t>>(std::move(targets));
  return push_op(OpKind::cross_entropy, {logits}, std::move(attrs));
}

Slot Tape::select_rows(Slot x, std::vector<std::int64_t> rows) {
  OpAttrs attrs;
  attrs.ids = std::make_shared<const std::vector<std::int64_t>>(std::move(rows));
  return push_op(OpKind::select_rows, {x}, std::move(attrs));
}

Slot Tape::replace_row(Slot x, std::size_t row, Slot replacement) {
  OpAttrs attrs;
  attrs.begin = row;
  return push_op(OpKind::replace_row, {x, replacement}, std::move(attrs));
}

Slot Tape::slice_cols(Slot x, std::size_t begin, std::size_t end) {
  OpAttrs attrs;
  attrs.begin = begin;
  attrs.end = end;
  return push_op(OpKind::slice_cols, {x}, std::move(attrs));
}

Slot Tape::concat_cols(std::span<const Slot> parts) {
  return push_op(OpKind::concat_cols, std::vector<Slot>(parts.begin(), parts.end()), {});
}

const Tensor& Tape::value(Slot slot) const {
  check_slot(slot);
  return *values_[slot.index];
}

bool Tape::requires_grad(Slot slot) const {
  check_slot(slot);
  return nodes_[slot.index].needs_grad;
}

OpKind Tape::kind(Slot slot) const {
  check_slot(slot);
  return nodes_[slot.index].kind;
}

Gradients Tape::backward(Slot seed, std::span<const Slot> wrt) const {
  check_slot(seed);
  if (value(seed).size() != 1) {
    throw StructuralError("backward from a non-scalar slot needs an explicit cotangent");
  }
  return backward(seed, Tensor(value(seed).shape(), {1.0}), wrt);
}

Gradients Tape::backward(Slot seed, const Tensor& cotangent, std::span<const Slot> wrt) const {
  check_slot(seed);
  if (cotangent.shape() != value(seed).shape()) {
    throw StructuralError("cotangent shape " + cotangent.shape_string() + " does not match seed " +
                          value(seed).shape_string());
  }
  for (Slot s : wrt) check_slot(s);

  std::vector<Tensor> grads(seed.index + 1);
  std::vector<bool> present(seed.index + 1, false);
  if (nodes_[seed.index].needs_grad) {
    grads[seed.index] = cotangent;
    present[seed.index] = true;
  }

  for (std::size_t i = seed.index + 1; i-- > 0;) {
    const Node& node = nodes_[i];
    if (node.kind == OpKind::leaf || !present[i] || !node.needs_grad) continue;
    const Tensor& g = grads[i];
    const Tensor& out = *values_[i];
    auto in_value = [&](std::size_t k) -> const Tensor& { return *values_[node.inputs[k].index]; };
    auto wants = [&](std::size_t k) { return nodes_[node.inputs[k].index].needs_grad; };
    auto give = [&](std::size_t k, Tensor&& t) { accumulate(grads, present, node.inputs[k], std::move(t)); };

    switch (node.kind) {
      case OpKind::leaf:
        break;
      case OpKind::matmul: {
        const auto& at = node.attrs;
        const Tensor& a = in_value(0);
        const Tensor& b = in_value(1);
        if (wants(0)) {
          give(0, at.trans_a ? grouped_product(b, g, at.trans_b, true, at.groups)
                             : grouped_product(g, b, false, !at.trans_b, at.groups));
        }
        if (wants(1)) {
          give(1, at.trans_b ? grouped_product(g, a, true, at.trans_a, at.groups)
                             : grouped_product(a, g, !at.trans_a, false, at.groups));
        }
        break;
      }
      case OpKind::add:
        if (wants(0)) give(0, Tensor(g));
        if (wants(1)) give(1, Tensor(g));
        break;
      case OpKind::mul: {
        const Tensor& a = in_value(0);
        const Tensor& b = in_value(1);
        if (wants(0)) {
          Tensor ga = g;
          for (std::size_t j = 0; j < ga.size(); ++j) ga[j] *= b[j];
          give(0, std::move(ga));
        }
        if (wants(1)) {
          Tensor gb = g;
          for (std::size_t j = 0; j < gb.size(); ++j) gb[j] *= a[j];
          give(1, std::move(gb));
        }
        break;
      }
      case OpKind::scale: {
        Tensor ga = g;
        for (auto& v : ga.values()) v *= node.attrs.scalar;
        give(0, std::move(ga));
        break;
      }
      case OpKind::gelu: {
        const Tensor& x = in_value(0);
        Tensor gx = g;
        for (std::size_t j = 0; j < gx.size(); ++j) gx[j] *= gelu_slope(x[j]);
        give(0, std::move(gx));
        break;
      }
      case OpKind::softmax: {
        Tensor gx(out.shape());
        for (std::size_t r = 0; r < out.rows(); ++r) {
          auto p = out.row(r);
          auto gp = g.row(r);
          double s = 0.0;
          for (std::size_t c = 0; c < p.size(); ++c) s += p[c] * gp[c];
          auto dst = gx.row(r);
          for (std::size_t c = 0; c < p.size(); ++c) dst[c] = p[c] * (gp[c] - s);
        }
        give(0, std::move(gx));
        break;
      }
      case OpKind::rms_norm: {
        const Tensor& x = in_value(0);
        const Tensor& gain = in_value(1);
        const std::size_t d = x.cols();
        Tensor gx(x.shape());
        Tensor gg(gain.shape());
        for (std::size_t r = 0; r < x.rows(); ++r) {
          auto xr = x.row(r);
          auto gr = g.row(r);
          double ms = 0.0;
          for (double v : xr) ms += v * v;
          const double inv = 1.0 / std::sqrt(ms / static_cast<double>(d) + node.attrs.scalar);
          double proj = 0.0;
          for (std::size_t c = 0; c < d; ++c) proj += gr[c] * gain[c] * xr[c] * inv;
          proj /= static_cast<double>(d);
          auto dst = gx.row(r);
          for (std::size_t c = 0; c < d; ++c) {
            const double xh = xr[c] * inv;
            gg[c] += gr[c] * xh;
            dst[c] = inv * (gr[c] * gain[c] - xh * proj);
          }
        }
        if (wants(0)) give(0, std::move(gx));
        if (wants(1)) give(1, std::move(gg));
        break;
      }
      case OpKind::embedding: {
        const Tensor& table = in_value(0);
        Tensor gt(table.shape());
        const auto& ids = *node.attrs.ids;
        for (std::size_t r = 0; r < ids.size(); ++r) {
          auto dst = gt.row(static_cast<std::size_t>(ids[r]));
          auto src = g.row(r);
          for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
        }
        give(0, std::move(gt));
        break;
      }
      case OpKind::cross_entropy: {
        const Tensor& logits = in_value(0);
        const auto& targets = *node.attrs.ids;
        std::size_t count = 0;
        for (auto t : targets) count += t >= 0 ? 1 : 0;
        const double factor = g.item() / static_cast<double>(count);
        Tensor gl(logits.shape());
        for (std::size_t r = 0; r < targets.size(); ++r) {
          if (targets[r] < 0) continue;
          auto row = logits.row(r);
          const double lse = row_logsumexp(row);
          auto dst = gl.row(r);
          for (std::size_t c = 0; c < row.size(); ++c) dst[c] = factor * std::exp(row[c] - lse);
          dst[static_cast<std::size_t>(targets[r])] -= factor;
        }
        give(0, std::move(gl));
        break;
      }
      case OpKind::select_rows: {
        const Tensor& x = in_value(0);
        Tensor gx(x.shape());
        const auto& rows = *node.attrs.ids;
        for (std::size_t r = 0; r < rows.size(); ++r) {
          auto dst = gx.row(static_cast<std::size_t>(rows[r]));
          auto src = g.row(r);
          for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
        }
        give(0, std::move(gx));
        break;
      }
      case OpKind::replace_row: {
        const std::size_t row = node.attrs.begin;
        if (wants(1)) {
          auto src = g.row(row);
          give(1, Tensor(in_value(1).shape(), std::vector<double>(src.begin(), src.end())));
        }
        if (wants(0)) {
          Tensor gx = g;
          for (auto& v : gx.row(row)) v = 0.0;
          give(0, std::move(gx));
        }
        break;
      }
      case OpKind::slice_cols: {
        const Tensor& x = in_value(0);
        Tensor gx(x.shape());
        for (std::size_t r = 0; r < x.rows(); ++r) {
          auto src = g.row(r);
          std::copy(src.begin(), src.end(), gx.row(r).begin() + static_cast<std::ptrdiff_t>(node.attrs.begin));
        }
        give(0, std::move(gx));
        break;
      }
      case OpKind::concat_cols: {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < node.inputs.size(); ++k) {
          const Tensor& part = in_value(k);
          if (wants(k)) {
            Tensor gp(part.shape());
            for (std::size_t r = 0; r < part.rows(); ++r) {
              auto src = g.row(r).subspan(offset, part.cols());
              std::copy(src.begin(), src.end(), gp.row(r).begin());
            }
            give(k, std::move(gp));
          }
          offset += part.cols();
        }
        break;
      }
    }
  }

  Gradients result;
  for (Slot s : wrt) {
    if (s.index <= seed.index && present[s.index]) {
      result.set(s, grads[s.index]);
    } else {
      result.set(s, Tensor(value(s).shape()));
    }
  }
  return result;
}

std::vector<Tensor> Tape::replay(std::span<const Slot> outputs) const {
  std::vector<std::shared_ptr<const Tensor>> vals(nodes_.size());
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const Node& node = nodes_[i];
    if (node.kind == OpKind::leaf) {
      vals[i] = values_[i];
      continue;
    }
    std::vector<const Tensor*> in;
    in.reserve(node.inputs.size());
    for (Slot s : node.inputs) in.push_back(vals[s.index].get());
    vals[i] = std::make_shared<const Tensor>(compute(node.kind, node.attrs, in));
  }
  std::vector<Tensor> out;
  out.reserve(outputs.size());
  for (Slot s : outputs) {
    check_slot(s);
    out.push_back(*vals[s.index]);
  }
  return out;
}

Recording record_forward(const Program& program, std::vector<Tensor> inputs) {
  Recording rec;
  for (auto& t : inputs) rec.inputs.push_back(rec.tape.input(std::move(t)));
  rec.outputs = program(rec.tape, rec.inputs);
  for (Slot s : rec.outputs) rec.output_values.push_back(rec.tape.value(s));
  return rec;
}

}  // namespace hted::ad
