#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "hted/autodiff/tape.hpp"
#include "hted/model/config.hpp"
#include "hted/model/corpus.hpp"
#include "hted/model/transformer.hpp"

namespace hted::testing {

using ad::Slot;
using ad::Tape;
using ad::Tensor;

inline Tensor random_tensor(ad::Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> n(0.0, scale);
  for (auto& v : t.values()) v = n(rng);
  return t;
}

inline Tensor random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double scale = 1.0) {
  return random_tensor({r, c}, rng, scale);
}

// Sum of w .* x for a fixed random weight w; reduces any matrix slot to 1x1.
inline Slot weighted_sum(Tape& tape, Slot x, std::mt19937_64& rng) {
  const Tensor& v = tape.value(x);
  if (v.rank() == 0) return tape.scale(x, std::uniform_real_distribution<double>(0.5, 1.5)(rng));
  const std::size_t r = v.rows();
  const std::size_t c = v.cols();
  Slot w = tape.constant(random_matrix(r, c, rng));
  Slot left = tape.constant(Tensor::matrix(1, r, std::vector<double>(r, 1.0)));
  Slot right = tape.constant(Tensor::matrix(c, 1, std::vector<double>(c, 1.0)));
  return tape.matmul(tape.matmul(left, tape.mul(x, w)), right);
}

// Normal-equation oracle for the edit solve, D (K K^T + lambda P P^T + ridge I)
// = (M - W K) K^T, assembled and solved by Gaussian elimination with partial
// pivoting in long double.
inline Tensor oracle_delta(const Tensor& w, const Tensor& keys, const Tensor& targets, const Tensor& preserved,
                           double lambda, double ridge) {
  using ld = long double;
  const std::size_t dk = keys.rows(), dm = w.rows(), n = keys.cols(), u = preserved.cols();
  std::vector<ld> c(dk * dk, 0.0L), b(dk * dm, 0.0L);
  for (std::size_t i = 0; i < dk; ++i)
    for (std::size_t j = 0; j < dk; ++j) {
      ld s = i == j ? ld(ridge) : 0.0L;
      for (std::size_t q = 0; q < n; ++q) s += ld(keys.at(i, q)) * keys.at(j, q);
      for (std::size_t q = 0; q < u; ++q) s += ld(lambda) * preserved.at(i, q) * preserved.at(j, q);
      c[i * dk + j] = s;
    }
  std::vector<ld> resid(dm * n);
  for (std::size_t r = 0; r < dm; ++r)
    for (std::size_t q = 0; q < n; ++q) {
      ld s = targets.at(r, q);
      for (std::size_t k = 0; k < dk; ++k) s -= ld(w.at(r, k)) * keys.at(k, q);
      resid[r * n + q] = s;
    }
  // C is symmetric, so C D^T = K R^T.
  for (std::size_t i = 0; i < dk; ++i)
    for (std::size_t r = 0; r < dm; ++r) {
      ld s = 0.0L;
      for (std::size_t q = 0; q < n; ++q) s += ld(keys.at(i, q)) * resid[r * n + q];
      b[i * dm + r] = s;
    }
  for (std::size_t col = 0; col < dk; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < dk; ++r)
      if (std::fabs(c[r * dk + col]) > std::fabs(c[piv * dk + col])) piv = r;
    if (piv != col) {
      for (std::size_t k = 0; k < dk; ++k) std::swap(c[col * dk + k], c[piv * dk + k]);
      for (std::size_t k = 0; k < dm; ++k) std::swap(b[col * dm + k], b[piv * dm + k]);
    }
    for (std::size_t r = col + 1; r < dk; ++r) {
      const ld f = c[r * dk + col] / c[col * dk + col];
      if (f == 0.0L) continue;
      for (std::size_t k = col; k < dk; ++k) c[r * dk + k] -= f * c[col * dk + k];
      for (std::size_t k = 0; k < dm; ++k) b[r * dm + k] -= f * b[col * dm + k];
    }
  }
  Tensor out({dm, dk});
  std::vector<ld> x(dk * dm);
  for (std::size_t i = dk; i-- > 0;)
    for (std::size_t r = 0; r < dm; ++r) {
      ld s = b[i * dm + r];
      for (std::size_t k = i + 1; k < dk; ++k) s -= c[i * dk + k] * x[k * dm + r];
      x[i * dm + r] = s / c[i * dk + i];
      out.at(r, i) = static_cast<double>(x[i * dm + r]);
    }
  return out;
}

struct PrimitiveCase {
  std::string name;
  Tensor x;
  ad::Program program;
};

// One seeded instance of every primitive, each reduced to a scalar. The
// differentiable input is the tensor the primitive's gradient flows into.
inline std::vector<PrimitiveCase> primitive_cases(std::uint64_t seed) {
  std::vector<PrimitiveCase> cases;
  auto add_case = [&](std::string name, Tensor x, std::function<Slot(Tape&, Slot, std::mt19937_64&)> body) {
    const std::uint64_t s = seed * 7919 + cases.size();
    ad::Program p = [body, s](Tape& tape, std::span<const Slot> in) {
      std::mt19937_64 rng(s);
      return std::vector<Slot>{weighted_sum(tape, body(tape, in[0], rng), rng)};
    };
    cases.push_back({std::move(name), std::move(x), std::move(p)});
  };
  std::mt19937_64 rng(seed);
  add_case("matmul_left", random_matrix(3, 4, rng), [](Tape& t, Slot x, std::mt19937_64& r) {
    return t.matmul(x, t.constant(random_matrix(4, 5, r)));
  });
  add_case("matmul_right", random_matrix(4, 5, rng), [](Tape& t, Slot x, std::mt19937_64& r) {
    return t.matmul(t.constant(random_matrix(3, 4, r)), x);
  });
  add_case("matmul_transposed", random_matrix(4, 3, rng), [](Tape& t, Slot x, std::mt19937_64& r) {
    return t.matmul(x, t.constant(random_matrix(5, 4, r)), true, true);
  });
  add_case("matmul_grouped", random_matrix(6, 2, rng), [](Tape& t, Slot x, std::mt19937_64& r) {
    return t.matmul(x, t.constant(random_matrix(6, 2, r)), false, true, 2);
  });
  add_case("add", random_matrix(3, 3, rng), [](Tape& t, Slot x, std::mt19937_64& r) {
    return t.add(x, t.mul(x, t.constant(random_matrix(3, 3, r))));
  });
  add_case("mul", random_matrix(3, 4, rng), [](Tape& t, Slot x, std::mt19937_64&) { return t.mul(x, x); });
  add_case("scale", random_matrix(2, 5, rng), [](Tape& t, Slot x, std::mt19937_64&) { return t.scale(x, -1.75); });
  add_case("gelu", random_matrix(3, 5, rng, 2.0), [](Tape& t, Slot x, std::mt19937_64&) { return t.gelu(x); });
  add_case("softmax", random_matrix(3, 4, rng), [](Tape& t, Slot x, std::mt19937_64&) { return t.softmax(x); });
  add_case("softmax_causal", random_matrix(8, 4, rng), [](Tape& t, Slot x, std::mt19937_64&) {
    return t.softmax(x, true);
  });
  add_case("rms_norm_input", random_matrix(3, 6, rng), [](Tape& t, Slot x, std::mt19937_64& r) {
    return t.rms_norm(x, t.constant(random_tensor({6}, r)));
  });
  add_case("rms_norm_gain", random_tensor({6}, rng), [](Tape& t, Slot g, std::mt19937_64& r) {
    return t.rms_norm(t.constant(random_matrix(3, 6, r)), g);
  });
  add_case("embedding", random_matrix(5, 3, rng), [](Tape& t, Slot table, std::mt19937_64&) {
    return t.embedding(table, {4, 0, 4, 2});
  });
  add_case("cross_entropy", random_matrix(4, 6, rng), [](Tape& t, Slot x, std::mt19937_64&) {
    return t.cross_entropy(x, {1, 5, -1, 0});
  });
  add_case("select_rows", random_matrix(5, 3, rng), [](Tape& t, Slot x, std::mt19937_64&) {
    return t.select_rows(x, {3, 1, 3});
  });
  add_case("replace_row_base", random_matrix(4, 3, rng), [](Tape& t, Slot x, std::mt19937_64& r) {
    return t.replace_row(x, 2, t.constant(random_tensor({3}, r)));
  });
  add_case("replace_row_value", random_tensor({3}, rng), [](Tape& t, Slot v, std::mt19937_64& r) {
    return t.gelu(t.replace_row(t.constant(random_matrix(4, 3, r)), 1, v));
  });
  add_case("slice_cols", random_matrix(3, 6, rng), [](Tape& t, Slot x, std::mt19937_64&) {
    return t.slice_cols(x, 2, 5);
  });
  add_case("concat_cols", random_matrix(3, 2, rng), [](Tape& t, Slot x, std::mt19937_64& r) {
    const Slot parts[] = {t.constant(random_matrix(3, 3, r)), x, t.gelu(x)};
    return t.concat_cols(parts);
  });
  return cases;
}

// Small enough for exhaustive checks in unit tests.
inline model::ModelConfig tiny_config(std::size_t vocab = 12) {
  model::ModelConfig c;
  c.vocab_size = vocab;
  c.d_model = 8;
  c.n_layers = 4;
  c.n_heads = 2;
  c.d_mlp = 16;
  c.max_seq_len = 10;
  c.decisive_layers = {1, 2, 3};
  c.seed = 5;
  return c;
}

inline model::CorpusParams tiny_corpus_params() {
  model::CorpusParams p;
  p.subjects = 12;
  p.subject_len = 2;
  p.subject_pool = 4;
  p.relations = 2;
  p.objects_per_relation = 5;
  p.templates_per_relation = 3;
  p.heldout_templates = 1;
  p.neighbors = 2;
  p.seed = 9;
  return p;
}

}  // namespace hted::testing
