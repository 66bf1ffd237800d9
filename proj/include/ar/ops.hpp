#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string_view>

#include "ar/rng.hpp"
#include "ar/tensor.hpp"

namespace ar {

namespace detail {

// c += a * b, all row-major. Exact zeros in a are skipped, so positions that
// a mask zeroed out contribute nothing, not even a signed zero.
template <typename T>
void mm_acc(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (int64_t p = 0; p < k; ++p) {
      T av = arow[p];
      if (av == T(0)) continue;
      const T* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
std::vector<T> transpose_copy(const T* a, int64_t rows, int64_t cols) {
  std::vector<T> t(static_cast<size_t>(rows * cols));
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < cols; ++c) t[static_cast<size_t>(c * rows + r)] = a[r * cols + c];
  return t;
}

template <typename T>
void accumulate(std::shared_ptr<TensorNode<T>>& p, const std::vector<T>& g) {
  if (!p->requires_grad) return;
  p->ensure_grad();
  for (size_t i = 0; i < g.size(); ++i) p->grad[i] += g[i];
}

inline void check_axis(int64_t axis, int64_t ndim, const char* op) {
  if (axis < 0 || axis >= ndim) {
    throw std::invalid_argument(std::string(op) + ": axis " + std::to_string(axis) +
                                " out of range for rank " + std::to_string(ndim));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  std::vector<T> out(a.values());
  const auto& bv = b.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return make_op<T>(a.shape(), std::move(out), {a, b}, [](TensorNode<T>& self) {
    detail::accumulate(self.parents[0], self.grad);
    detail::accumulate(self.parents[1], self.grad);
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument("elementwise-mul: shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
  std::vector<T> out(a.values());
  const auto& bv = b.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  std::vector<T> av = a.values();
  std::vector<T> bvv = b.values();
  return make_op<T>(a.shape(), std::move(out), {a, b},
                    [av = std::move(av), bvv = std::move(bvv)](TensorNode<T>& self) {
                      auto& pa = self.parents[0];
                      auto& pb = self.parents[1];
                      if (pa->requires_grad) {
                        pa->ensure_grad();
                        for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] * bvv[i];
                      }
                      if (pb->requires_grad) {
                        pb->ensure_grad();
                        for (size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] += self.grad[i] * av[i];
                      }
                    });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, double c) {
  const T cc = static_cast<T>(c);
  std::vector<T> out(x.values());
  for (auto& v : out) v *= cc;
  return make_op<T>(x.shape(), std::move(out), {x}, [cc](TensorNode<T>& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i] * cc;
  });
}

// x scaled by a learnable scalar tensor (shape [1]).
template <typename T>
Tensor<T> mul_scalar_tensor(const Tensor<T>& x, const Tensor<T>& s) {
  if (s.numel() != 1) {
    throw std::invalid_argument("mul_scalar_tensor: gate must be scalar, got " + shape_str(s.shape()));
  }
  const T sv = s.values()[0];
  std::vector<T> out(x.values());
  for (auto& v : out) v *= sv;
  std::vector<T> xv = x.values();
  return make_op<T>(x.shape(), std::move(out), {x, s},
                    [sv, xv = std::move(xv)](TensorNode<T>& self) {
                      auto& px = self.parents[0];
                      auto& ps = self.parents[1];
                      if (px->requires_grad) {
                        px->ensure_grad();
                        for (size_t i = 0; i < self.grad.size(); ++i) px->grad[i] += self.grad[i] * sv;
                      }
                      if (ps->requires_grad) {
                        ps->ensure_grad();
                        T acc = T(0);
                        for (size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * xv[i];
                        ps->grad[0] += acc;
                      }
                    });
}

// b broadcast over the last axis.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b) {
  int64_t d = x.dim(x.ndim() - 1);
  if (b.ndim() != 1 || b.dim(0) != d) {
    throw std::invalid_argument("add_bias: bias " + shape_str(b.shape()) + " does not match last axis of " +
                                shape_str(x.shape()));
  }
  std::vector<T> out(x.values());
  const auto& bv = b.values();
  int64_t rows = x.numel() / d;
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < d; ++j) out[static_cast<size_t>(r * d + j)] += bv[static_cast<size_t>(j)];
  return make_op<T>(x.shape(), std::move(out), {x, b}, [d, rows](TensorNode<T>& self) {
    detail::accumulate(self.parents[0], self.grad);
    auto& pb = self.parents[1];
    if (!pb->requires_grad) return;
    pb->ensure_grad();
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t j = 0; j < d; ++j) pb->grad[static_cast<size_t>(j)] += self.grad[static_cast<size_t>(r * d + j)];
  });
}

// r broadcast over the leading axis; r.shape == x.shape[1:].
template <typename T>
Tensor<T> add_broadcast_rows(const Tensor<T>& x, const Tensor<T>& r) {
  Shape rest(x.shape().begin() + 1, x.shape().end());
  if (r.shape() != rest) {
    throw std::invalid_argument("add_broadcast_rows: " + shape_str(r.shape()) + " vs trailing of " +
                                shape_str(x.shape()));
  }
  int64_t inner = r.numel();
  int64_t outer = x.dim(0);
  std::vector<T> out(x.values());
  const auto& rv = r.values();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t i = 0; i < inner; ++i) out[static_cast<size_t>(o * inner + i)] += rv[static_cast<size_t>(i)];
  return make_op<T>(x.shape(), std::move(out), {x, r}, [inner, outer](TensorNode<T>& self) {
    detail::accumulate(self.parents[0], self.grad);
    auto& pr = self.parents[1];
    if (!pr->requires_grad) return;
    pr->ensure_grad();
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t i = 0; i < inner; ++i) pr->grad[static_cast<size_t>(i)] += self.grad[static_cast<size_t>(o * inner + i)];
  });
}

// ---------------------------------------------------------------------------
// matmul / layout
// ---------------------------------------------------------------------------

// a: [..., M, K]; b: [K, N] (shared) or [..., K, N] with identical leading dims.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() < 2 || b.ndim() < 2) {
    throw std::invalid_argument("matmul: needs rank >= 2, got " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  }
  int64_t m = a.dim(a.ndim() - 2), k = a.dim(a.ndim() - 1);
  bool shared_b = (b.ndim() == 2);
  if (shared_b) {
    if (b.dim(0) != k) {
      throw std::invalid_argument("matmul: shape mismatch " + shape_str(a.shape()) + " x " +
                                  shape_str(b.shape()));
    }
  } else {
    Shape lead_a(a.shape().begin(), a.shape().end() - 2);
    Shape lead_b(b.shape().begin(), b.shape().end() - 2);
    if (lead_a != lead_b || b.dim(b.ndim() - 2) != k) {
      throw std::invalid_argument("matmul: shape mismatch " + shape_str(a.shape()) + " x " +
                                  shape_str(b.shape()));
    }
  }
  int64_t n = b.dim(b.ndim() - 1);
  int64_t batch = a.numel() / (m * k);
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);
  std::vector<T> out(static_cast<size_t>(batch * m * n), T(0));
  const T* av = a.values().data();
  const T* bv = b.values().data();
  for (int64_t i = 0; i < batch; ++i) {
    detail::mm_acc(av + i * m * k, shared_b ? bv : bv + i * k * n, out.data() + i * m * n, m, k, n);
  }
  std::vector<T> a_saved = a.values();
  std::vector<T> b_saved = b.values();
  return make_op<T>(std::move(out_shape), std::move(out), {a, b},
                    [m, k, n, batch, shared_b, a_saved = std::move(a_saved),
                     b_saved = std::move(b_saved)](TensorNode<T>& self) {
                      auto& pa = self.parents[0];
                      auto& pb = self.parents[1];
                      const T* g = self.grad.data();
                      if (pa->requires_grad) {
                        pa->ensure_grad();
                        for (int64_t i = 0; i < batch; ++i) {
                          const T* bmat = shared_b ? b_saved.data() : b_saved.data() + i * k * n;
                          auto bt = detail::transpose_copy(bmat, k, n);  // n x k
                          detail::mm_acc(g + i * m * n, bt.data(), pa->grad.data() + i * m * k, m, n, k);
                        }
                      }
                      if (pb->requires_grad) {
                        pb->ensure_grad();
                        for (int64_t i = 0; i < batch; ++i) {
                          auto at = detail::transpose_copy(a_saved.data() + i * m * k, m, k);  // k x m
                          T* db = shared_b ? pb->grad.data() : pb->grad.data() + i * k * n;
                          detail::mm_acc(at.data(), g + i * m * n, db, k, m, n);
                        }
                      }
                    });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int64_t>& perm) {
  int64_t nd = x.ndim();
  if (static_cast<int64_t>(perm.size()) != nd) {
    throw std::invalid_argument("transpose: permutation rank " + std::to_string(perm.size()) +
                                " vs tensor rank " + std::to_string(nd));
  }
  std::vector<bool> used(static_cast<size_t>(nd), false);
  for (int64_t p : perm) {
    if (p < 0 || p >= nd || used[static_cast<size_t>(p)]) {
      throw std::invalid_argument("transpose: invalid permutation");
    }
    used[static_cast<size_t>(p)] = true;
  }
  Shape out_shape(static_cast<size_t>(nd));
  for (int64_t d = 0; d < nd; ++d) out_shape[static_cast<size_t>(d)] = x.dim(perm[static_cast<size_t>(d)]);

  std::vector<int64_t> in_strides(static_cast<size_t>(nd), 1);
  for (int64_t d = nd - 2; d >= 0; --d)
    in_strides[static_cast<size_t>(d)] = in_strides[static_cast<size_t>(d + 1)] * x.dim(d + 1);
  // stride in the input for each output axis
  std::vector<int64_t> map_strides(static_cast<size_t>(nd));
  for (int64_t d = 0; d < nd; ++d) map_strides[static_cast<size_t>(d)] = in_strides[static_cast<size_t>(perm[static_cast<size_t>(d)])];

  int64_t total = x.numel();
  std::vector<T> out(static_cast<size_t>(total));
  const auto& xv = x.values();
  std::vector<int64_t> coord(static_cast<size_t>(nd), 0);
  int64_t src = 0;
  for (int64_t i = 0; i < total; ++i) {
    out[static_cast<size_t>(i)] = xv[static_cast<size_t>(src)];
    for (int64_t d = nd - 1; d >= 0; --d) {
      auto du = static_cast<size_t>(d);
      if (++coord[du] < out_shape[du]) {
        src += map_strides[du];
        break;
      }
      src -= map_strides[du] * (out_shape[du] - 1);
      coord[du] = 0;
    }
  }
  std::vector<int64_t> inv(static_cast<size_t>(nd));
  for (int64_t d = 0; d < nd; ++d) inv[static_cast<size_t>(perm[static_cast<size_t>(d)])] = d;
  Shape saved_out = out_shape;
  return make_op<T>(std::move(out_shape), std::move(out), {x},
                    [inv, saved_out, map_strides, nd](TensorNode<T>& self) {
                      auto& p = self.parents[0];
                      if (!p->requires_grad) return;
                      p->ensure_grad();
                      std::vector<int64_t> coord(static_cast<size_t>(nd), 0);
                      int64_t src = 0;
                      int64_t total = static_cast<int64_t>(self.grad.size());
                      for (int64_t i = 0; i < total; ++i) {
                        p->grad[static_cast<size_t>(src)] += self.grad[static_cast<size_t>(i)];
                        for (int64_t d = nd - 1; d >= 0; --d) {
                          auto du = static_cast<size_t>(d);
                          if (++coord[du] < saved_out[du]) {
                            src += map_strides[du];
                            break;
                          }
                          src -= map_strides[du] * (saved_out[du] - 1);
                          coord[du] = 0;
                        }
                      }
                    });
}

template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& x) {
  std::vector<int64_t> perm(static_cast<size_t>(x.ndim()));
  for (int64_t d = 0; d < x.ndim(); ++d) perm[static_cast<size_t>(d)] = d;
  std::swap(perm[static_cast<size_t>(x.ndim() - 2)], perm[static_cast<size_t>(x.ndim() - 1)]);
  return permute(x, perm);
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.numel()) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " +
                                shape_str(new_shape));
  }
  std::vector<T> out(x.values());
  return make_op<T>(std::move(new_shape), std::move(out), {x}, [](TensorNode<T>& self) {
    detail::accumulate(self.parents[0], self.grad);
  });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, int64_t axis) {
  if (xs.empty()) throw std::invalid_argument("concat: no inputs");
  int64_t nd = xs[0].ndim();
  detail::check_axis(axis, nd, "concat");
  Shape out_shape = xs[0].shape();
  int64_t axis_total = 0;
  for (const auto& x : xs) {
    if (x.ndim() != nd) throw std::invalid_argument("concat: rank mismatch");
    for (int64_t d = 0; d < nd; ++d) {
      if (d != axis && x.dim(d) != out_shape[static_cast<size_t>(d)]) {
        throw std::invalid_argument("concat: shape mismatch " + shape_str(x.shape()) + " vs " +
                                    shape_str(xs[0].shape()));
      }
    }
    axis_total += x.dim(axis);
  }
  out_shape[static_cast<size_t>(axis)] = axis_total;
  int64_t outer = 1, inner = 1;
  for (int64_t d = 0; d < axis; ++d) outer *= out_shape[static_cast<size_t>(d)];
  for (int64_t d = axis + 1; d < nd; ++d) inner *= out_shape[static_cast<size_t>(d)];

  std::vector<T> out(static_cast<size_t>(outer * axis_total * inner));
  int64_t offset = 0;
  std::vector<int64_t> extents;
  for (const auto& x : xs) {
    int64_t e = x.dim(axis);
    const auto& xv = x.values();
    for (int64_t o = 0; o < outer; ++o) {
      std::copy(xv.begin() + o * e * inner, xv.begin() + (o + 1) * e * inner,
                out.begin() + (o * axis_total + offset) * inner);
    }
    extents.push_back(e);
    offset += e;
  }
  return make_op<T>(std::move(out_shape), std::move(out), xs,
                    [outer, inner, axis_total, extents](TensorNode<T>& self) {
                      int64_t offset = 0;
                      for (size_t pi = 0; pi < self.parents.size(); ++pi) {
                        auto& p = self.parents[pi];
                        int64_t e = extents[pi];
                        if (p->requires_grad) {
                          p->ensure_grad();
                          for (int64_t o = 0; o < outer; ++o) {
                            const T* g = self.grad.data() + (o * axis_total + offset) * inner;
                            T* pg = p->grad.data() + o * e * inner;
                            for (int64_t i = 0; i < e * inner; ++i) pg[i] += g[i];
                          }
                        }
                        offset += e;
                      }
                    });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, int64_t axis, int64_t start, int64_t len) {
  detail::check_axis(axis, x.ndim(), "slice");
  if (start < 0 || len <= 0 || start + len > x.dim(axis)) {
    throw std::invalid_argument("slice: range [" + std::to_string(start) + "," +
                                std::to_string(start + len) + ") invalid for axis extent " +
                                std::to_string(x.dim(axis)));
  }
  Shape out_shape = x.shape();
  out_shape[static_cast<size_t>(axis)] = len;
  int64_t outer = 1, inner = 1;
  for (int64_t d = 0; d < axis; ++d) outer *= x.dim(d);
  for (int64_t d = axis + 1; d < x.ndim(); ++d) inner *= x.dim(d);
  int64_t e = x.dim(axis);
  std::vector<T> out(static_cast<size_t>(outer * len * inner));
  const auto& xv = x.values();
  for (int64_t o = 0; o < outer; ++o) {
    std::copy(xv.begin() + (o * e + start) * inner, xv.begin() + (o * e + start + len) * inner,
              out.begin() + o * len * inner);
  }
  return make_op<T>(std::move(out_shape), std::move(out), {x},
                    [outer, inner, e, start, len](TensorNode<T>& self) {
                      auto& p = self.parents[0];
                      if (!p->requires_grad) return;
                      p->ensure_grad();
                      for (int64_t o = 0; o < outer; ++o) {
                        const T* g = self.grad.data() + o * len * inner;
                        T* pg = p->grad.data() + (o * e + start) * inner;
                        for (int64_t i = 0; i < len * inner; ++i) pg[i] += g[i];
                      }
                    });
}

// ---------------------------------------------------------------------------
// lookups
// ---------------------------------------------------------------------------

// table: [V, H]; output shape: id_shape ++ [H].
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<int32_t>& ids, Shape id_shape) {
  if (table.ndim() != 2) {
    throw std::invalid_argument("embedding-gather: table must be rank 2, got " + shape_str(table.shape()));
  }
  if (shape_numel(id_shape) != static_cast<int64_t>(ids.size())) {
    throw std::invalid_argument("embedding-gather: id shape mismatch");
  }
  int64_t v = table.dim(0), h = table.dim(1);
  std::vector<T> out(ids.size() * static_cast<size_t>(h));
  const auto& tv = table.values();
  for (size_t i = 0; i < ids.size(); ++i) {
    int32_t id = ids[i];
    if (id < 0 || id >= v) {
      throw std::invalid_argument("embedding-gather: id " + std::to_string(id) + " out of range [0," +
                                  std::to_string(v) + ")");
    }
    std::copy(tv.begin() + static_cast<int64_t>(id) * h, tv.begin() + (static_cast<int64_t>(id) + 1) * h,
              out.begin() + static_cast<int64_t>(i) * h);
  }
  Shape out_shape = std::move(id_shape);
  out_shape.push_back(h);
  return make_op<T>(std::move(out_shape), std::move(out), {table}, [ids, h](TensorNode<T>& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (size_t i = 0; i < ids.size(); ++i) {
      const T* g = self.grad.data() + static_cast<int64_t>(i) * h;
      T* pg = p->grad.data() + static_cast<int64_t>(ids[i]) * h;
      for (int64_t j = 0; j < h; ++j) pg[j] += g[j];
    }
  });
}

// Mean of table rows per group; groups must be non-empty.
template <typename T>
Tensor<T> group_mean_embedding(const Tensor<T>& table, const std::vector<std::vector<int32_t>>& groups) {
  if (table.ndim() != 2) {
    throw std::invalid_argument("group_mean_embedding: table must be rank 2");
  }
  int64_t v = table.dim(0), h = table.dim(1);
  int64_t g_count = static_cast<int64_t>(groups.size());
  std::vector<T> out(static_cast<size_t>(g_count * h), T(0));
  const auto& tv = table.values();
  for (int64_t g = 0; g < g_count; ++g) {
    const auto& ids = groups[static_cast<size_t>(g)];
    if (ids.empty()) throw std::invalid_argument("group_mean_embedding: empty group");
    for (int32_t id : ids) {
      if (id < 0 || id >= v) throw std::invalid_argument("group_mean_embedding: id out of range");
      for (int64_t j = 0; j < h; ++j) out[static_cast<size_t>(g * h + j)] += tv[static_cast<size_t>(id * h + j)];
    }
    T inv = T(1) / static_cast<T>(ids.size());
    for (int64_t j = 0; j < h; ++j) out[static_cast<size_t>(g * h + j)] *= inv;
  }
  return make_op<T>({g_count, h}, std::move(out), {table}, [groups, h](TensorNode<T>& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (size_t g = 0; g < groups.size(); ++g) {
      const auto& ids = groups[g];
      T inv = T(1) / static_cast<T>(ids.size());
      const T* gr = self.grad.data() + static_cast<int64_t>(g) * h;
      for (int32_t id : ids) {
        T* pg = p->grad.data() + static_cast<int64_t>(id) * h;
        for (int64_t j = 0; j < h; ++j) pg[j] += gr[j] * inv;
      }
    }
  });
}

// x: [B, S, H], idx: [B, L] -> [B, L, H]
template <typename T>
Tensor<T> gather_axis1(const Tensor<T>& x, const std::vector<int32_t>& idx, int64_t l) {
  if (x.ndim() != 3) throw std::invalid_argument("gather_axis1: expected rank 3, got " + shape_str(x.shape()));
  int64_t b = x.dim(0), s = x.dim(1), h = x.dim(2);
  if (static_cast<int64_t>(idx.size()) != b * l) throw std::invalid_argument("gather_axis1: index count mismatch");
  std::vector<T> out(static_cast<size_t>(b * l * h));
  const auto& xv = x.values();
  for (int64_t i = 0; i < b; ++i) {
    for (int64_t j = 0; j < l; ++j) {
      int32_t k = idx[static_cast<size_t>(i * l + j)];
      if (k < 0 || k >= s) throw std::invalid_argument("gather_axis1: index out of range");
      std::copy(xv.begin() + (i * s + k) * h, xv.begin() + (i * s + k + 1) * h,
                out.begin() + (i * l + j) * h);
    }
  }
  return make_op<T>({b, l, h}, std::move(out), {x}, [idx, l, s, h, b](TensorNode<T>& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int64_t i = 0; i < b; ++i) {
      for (int64_t j = 0; j < l; ++j) {
        int32_t k = idx[static_cast<size_t>(i * l + j)];
        const T* g = self.grad.data() + (i * l + j) * h;
        T* pg = p->grad.data() + (i * s + k) * h;
        for (int64_t c = 0; c < h; ++c) pg[c] += g[c];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// nonlinearities / norms
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.values());
  for (auto& v : out) v = v > T(0) ? v : T(0);
  std::vector<T> xv = x.values();
  return make_op<T>(x.shape(), std::move(out), {x}, [xv = std::move(xv)](TensorNode<T>& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      if (xv[i] > T(0)) p->grad[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  std::vector<T> out(x.values());
  for (auto& v : out) {
    double xv = static_cast<double>(v);
    v = static_cast<T>(0.5 * xv * (1.0 + std::erf(xv * kInvSqrt2)));
  }
  std::vector<T> xv = x.values();
  return make_op<T>(x.shape(), std::move(out), {x}, [xv = std::move(xv)](TensorNode<T>& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      double v = static_cast<double>(xv[i]);
      double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
      double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
      p->grad[i] += self.grad[i] * static_cast<T>(cdf + v * pdf);
    }
  });
}

// Softmax over the last axis. Rows whose maximum is -inf (fully masked) come
// out as all zeros.
template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  int64_t d = x.dim(x.ndim() - 1);
  int64_t rows = x.numel() / d;
  std::vector<T> out(static_cast<size_t>(x.numel()));
  const auto& xv = x.values();
  const T neg_inf = -std::numeric_limits<T>::infinity();
  for (int64_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * d;
    T* o = out.data() + r * d;
    T mx = neg_inf;
    for (int64_t j = 0; j < d; ++j) mx = std::max(mx, in[j]);
    if (mx == neg_inf) {
      for (int64_t j = 0; j < d; ++j) o[j] = T(0);
      continue;
    }
    T sum = T(0);
    for (int64_t j = 0; j < d; ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    T inv = T(1) / sum;
    for (int64_t j = 0; j < d; ++j) o[j] *= inv;
  }
  std::vector<T> y = out;
  return make_op<T>(x.shape(), std::move(out), {x}, [y = std::move(y), d, rows](TensorNode<T>& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int64_t r = 0; r < rows; ++r) {
      const T* g = self.grad.data() + r * d;
      const T* yr = y.data() + r * d;
      T dot = T(0);
      for (int64_t j = 0; j < d; ++j) dot += g[j] * yr[j];
      T* pg = p->grad.data() + r * d;
      for (int64_t j = 0; j < d; ++j) pg[j] += yr[j] * (g[j] - dot);
    }
  });
}

// Key-padding mask: scores [B, ..., Lk], valid [B, Lk] with 1 = attendable.
template <typename T>
Tensor<T> masked_fill_keypad(const Tensor<T>& scores, const std::vector<uint8_t>& valid,
                             T fill = -std::numeric_limits<T>::infinity()) {
  int64_t b = scores.dim(0);
  int64_t lk = scores.dim(scores.ndim() - 1);
  if (static_cast<int64_t>(valid.size()) != b * lk) {
    throw std::invalid_argument("masked-fill: mask size " + std::to_string(valid.size()) +
                                " does not match " + shape_str(scores.shape()));
  }
  int64_t mid = scores.numel() / (b * lk);
  std::vector<T> out(scores.values());
  for (int64_t i = 0; i < b; ++i) {
    const uint8_t* mrow = valid.data() + i * lk;
    for (int64_t m = 0; m < mid; ++m) {
      T* row = out.data() + (i * mid + m) * lk;
      for (int64_t j = 0; j < lk; ++j) {
        if (!mrow[j]) row[j] = fill;
      }
    }
  }
  return make_op<T>(scores.shape(), std::move(out), {scores},
                    [valid, b, mid, lk](TensorNode<T>& self) {
                      auto& p = self.parents[0];
                      if (!p->requires_grad) return;
                      p->ensure_grad();
                      for (int64_t i = 0; i < b; ++i) {
                        const uint8_t* mrow = valid.data() + i * lk;
                        for (int64_t m = 0; m < mid; ++m) {
                          const T* g = self.grad.data() + (i * mid + m) * lk;
                          T* pg = p->grad.data() + (i * mid + m) * lk;
                          for (int64_t j = 0; j < lk; ++j) {
                            if (mrow[j]) pg[j] += g[j];
                          }
                        }
                      }
                    });
}

// Causal mask over the last two axes: position i may attend to j <= i.
template <typename T>
Tensor<T> causal_mask_fill(const Tensor<T>& scores,
                           T fill = -std::numeric_limits<T>::infinity()) {
  int64_t lk = scores.dim(scores.ndim() - 1);
  int64_t lq = scores.dim(scores.ndim() - 2);
  if (lq != lk) {
    throw std::invalid_argument("masked-fill(causal): expected square last axes, got " +
                                shape_str(scores.shape()));
  }
  int64_t mats = scores.numel() / (lq * lk);
  std::vector<T> out(scores.values());
  for (int64_t m = 0; m < mats; ++m) {
    T* mat = out.data() + m * lq * lk;
    for (int64_t i = 0; i < lq; ++i)
      for (int64_t j = i + 1; j < lk; ++j) mat[i * lk + j] = fill;
  }
  return make_op<T>(scores.shape(), std::move(out), {scores}, [mats, lq, lk](TensorNode<T>& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int64_t m = 0; m < mats; ++m) {
      const T* g = self.grad.data() + m * lq * lk;
      T* pg = p->grad.data() + m * lq * lk;
      for (int64_t i = 0; i < lq; ++i)
        for (int64_t j = 0; j <= i; ++j) pg[i * lk + j] += g[i * lk + j];
    }
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     double eps = 1e-5) {
  int64_t d = x.dim(x.ndim() - 1);
  if (gamma.numel() != d || beta.numel() != d) {
    throw std::invalid_argument("layer-norm: affine shapes " + shape_str(gamma.shape()) + "/" +
                                shape_str(beta.shape()) + " do not match last axis " + std::to_string(d));
  }
  int64_t rows = x.numel() / d;
  std::vector<T> out(static_cast<size_t>(x.numel()));
  std::vector<T> xhat(static_cast<size_t>(x.numel()));
  std::vector<T> inv_std(static_cast<size_t>(rows));
  const auto& xv = x.values();
  const auto& gv = gamma.values();
  const auto& bv = beta.values();
  for (int64_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * d;
    T mean = T(0);
    for (int64_t j = 0; j < d; ++j) mean += in[j];
    mean /= static_cast<T>(d);
    T var = T(0);
    for (int64_t j = 0; j < d; ++j) {
      T c = in[j] - mean;
      var += c * c;
    }
    var /= static_cast<T>(d);
    T is = T(1) / std::sqrt(var + static_cast<T>(eps));
    inv_std[static_cast<size_t>(r)] = is;
    for (int64_t j = 0; j < d; ++j) {
      T xh = (in[j] - mean) * is;
      xhat[static_cast<size_t>(r * d + j)] = xh;
      out[static_cast<size_t>(r * d + j)] = gv[static_cast<size_t>(j)] * xh + bv[static_cast<size_t>(j)];
    }
  }
  return make_op<T>(x.shape(), std::move(out), {x, gamma, beta},
                    [xhat = std::move(xhat), inv_std = std::move(inv_std), d, rows](TensorNode<T>& self) {
                      auto& px = self.parents[0];
                      auto& pg = self.parents[1];
                      auto& pb = self.parents[2];
                      const auto& gv = pg->value;
                      for (int64_t r = 0; r < rows; ++r) {
                        const T* g = self.grad.data() + r * d;
                        const T* xh = xhat.data() + r * d;
                        if (pb->requires_grad) {
                          pb->ensure_grad();
                          for (int64_t j = 0; j < d; ++j) pb->grad[static_cast<size_t>(j)] += g[j];
                        }
                        if (pg->requires_grad) {
                          pg->ensure_grad();
                          for (int64_t j = 0; j < d; ++j) pg->grad[static_cast<size_t>(j)] += g[j] * xh[j];
                        }
                        if (px->requires_grad) {
                          px->ensure_grad();
                          T sum_gg = T(0), sum_ggx = T(0);
                          for (int64_t j = 0; j < d; ++j) {
                            T gg = g[j] * gv[static_cast<size_t>(j)];
                            sum_gg += gg;
                            sum_ggx += gg * xh[j];
                          }
                          T inv_d = T(1) / static_cast<T>(d);
                          T is = inv_std[static_cast<size_t>(r)];
                          T* pxg = px->grad.data() + r * d;
                          for (int64_t j = 0; j < d; ++j) {
                            T gg = g[j] * gv[static_cast<size_t>(j)];
                            pxg[j] += is * (gg - sum_gg * inv_d - xh[j] * sum_ggx * inv_d);
                          }
                        }
                      }
                    });
}

// Inverted dropout: kept values scale by 1/(1-rate) at train time, so eval
// needs no rescaling. rate 0 is the identity. The drawn mask is recorded on
// the graph for the backward pass.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, RngStream& rng, bool train) {
  if (rate < 0.0 || rate >= 1.0) {
    throw std::invalid_argument("dropout: rate must be in [0,1), got " + std::to_string(rate));
  }
  if (!train || rate == 0.0) return x;
  std::vector<uint8_t> keep(static_cast<size_t>(x.numel()));
  const T scale_keep = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> out(x.values());
  for (size_t i = 0; i < out.size(); ++i) {
    keep[i] = rng.uniform() >= rate ? 1 : 0;
    out[i] = keep[i] ? out[i] * scale_keep : T(0);
  }
  return make_op<T>(x.shape(), std::move(out), {x},
                    [keep = std::move(keep), scale_keep](TensorNode<T>& self) {
                      auto& p = self.parents[0];
                      if (!p->requires_grad) return;
                      p->ensure_grad();
                      for (size_t i = 0; i < self.grad.size(); ++i) {
                        if (keep[i]) p->grad[i] += self.grad[i] * scale_keep;
                      }
                    });
}

// ---------------------------------------------------------------------------
// reductions / losses
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.values()) acc += v;
  return make_op<T>({1}, {acc}, {x}, [](TensorNode<T>& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (auto& g : p->grad) g += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.values()) acc += v;
  T inv = T(1) / static_cast<T>(x.numel());
  return make_op<T>({1}, {acc * inv}, {x}, [inv](TensorNode<T>& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (auto& g : p->grad) g += self.grad[0] * inv;
  });
}

// Mean over valid sequence positions: x [B, L, H], valid [B, L] -> [B, H].
template <typename T>
Tensor<T> masked_mean_seq(const Tensor<T>& x, const std::vector<uint8_t>& valid) {
  if (x.ndim() != 3) throw std::invalid_argument("masked_mean_seq: expected rank 3, got " + shape_str(x.shape()));
  int64_t b = x.dim(0), l = x.dim(1), h = x.dim(2);
  if (static_cast<int64_t>(valid.size()) != b * l) throw std::invalid_argument("masked_mean_seq: mask size mismatch");
  std::vector<T> out(static_cast<size_t>(b * h), T(0));
  std::vector<int64_t> counts(static_cast<size_t>(b), 0);
  const auto& xv = x.values();
  for (int64_t i = 0; i < b; ++i) {
    for (int64_t j = 0; j < l; ++j) {
      if (!valid[static_cast<size_t>(i * l + j)]) continue;
      ++counts[static_cast<size_t>(i)];
      const T* row = xv.data() + (i * l + j) * h;
      T* o = out.data() + i * h;
      for (int64_t c = 0; c < h; ++c) o[c] += row[c];
    }
    if (counts[static_cast<size_t>(i)] == 0) {
      throw std::invalid_argument("masked_mean_seq: batch element " + std::to_string(i) +
                                  " has no valid positions");
    }
    T inv = T(1) / static_cast<T>(counts[static_cast<size_t>(i)]);
    T* o = out.data() + i * h;
    for (int64_t c = 0; c < h; ++c) o[c] *= inv;
  }
  return make_op<T>({b, h}, std::move(out), {x}, [valid, counts, b, l, h](TensorNode<T>& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int64_t i = 0; i < b; ++i) {
      T inv = T(1) / static_cast<T>(counts[static_cast<size_t>(i)]);
      const T* g = self.grad.data() + i * h;
      for (int64_t j = 0; j < l; ++j) {
        if (!valid[static_cast<size_t>(i * l + j)]) continue;
        T* pg = p->grad.data() + (i * l + j) * h;
        for (int64_t c = 0; c < h; ++c) pg[c] += g[c] * inv;
      }
    }
  });
}

// Mean token cross-entropy from logits [N, V] at included positions.
template <typename T>
Tensor<T> cross_entropy_from_logits(const Tensor<T>& logits, const std::vector<int32_t>& targets,
                                    const std::vector<uint8_t>& include) {
  if (logits.ndim() != 2) {
    throw std::invalid_argument("cross-entropy-from-logits: expected rank 2 logits, got " +
                                shape_str(logits.shape()));
  }
  int64_t n = logits.dim(0), v = logits.dim(1);
  if (static_cast<int64_t>(targets.size()) != n || static_cast<int64_t>(include.size()) != n) {
    throw std::invalid_argument("cross-entropy-from-logits: targets/include size mismatch");
  }
  int64_t count = 0;
  for (uint8_t f : include) count += f ? 1 : 0;
  if (count == 0) {
    throw std::invalid_argument("cross-entropy-from-logits: no included positions");
  }
  const auto& zv = logits.values();
  std::vector<T> probs(static_cast<size_t>(n * v));
  T total = T(0);
  for (int64_t i = 0; i < n; ++i) {
    if (!include[static_cast<size_t>(i)]) continue;
    int32_t t = targets[static_cast<size_t>(i)];
    if (t < 0 || t >= v) {
      throw std::invalid_argument("cross-entropy-from-logits: target " + std::to_string(t) +
                                  " out of range [0," + std::to_string(v) + ")");
    }
    const T* z = zv.data() + i * v;
    T mx = z[0];
    for (int64_t j = 1; j < v; ++j) mx = std::max(mx, z[j]);
    T sum = T(0);
    T* p = probs.data() + i * v;
    for (int64_t j = 0; j < v; ++j) {
      p[j] = std::exp(z[j] - mx);
      sum += p[j];
    }
    T inv = T(1) / sum;
    for (int64_t j = 0; j < v; ++j) p[j] *= inv;
    total += std::log(sum) + mx - z[t];
  }
  T loss = total / static_cast<T>(count);
  return make_op<T>({1}, {loss}, {logits},
                    [probs = std::move(probs), targets, include, n, v, count](TensorNode<T>& self) {
                      auto& p = self.parents[0];
                      if (!p->requires_grad) return;
                      p->ensure_grad();
                      T g = self.grad[0] / static_cast<T>(count);
                      for (int64_t i = 0; i < n; ++i) {
                        if (!include[static_cast<size_t>(i)]) continue;
                        const T* pr = probs.data() + i * v;
                        T* pg = p->grad.data() + i * v;
                        for (int64_t j = 0; j < v; ++j) pg[j] += g * pr[j];
                        pg[targets[static_cast<size_t>(i)]] -= g;
                      }
                    });
}

// linear layer helper: x [..., In] * w [In, Out] + b
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return add_bias(matmul(x, w), b);
}

// ---------------------------------------------------------------------------
// name-based dispatch
// ---------------------------------------------------------------------------

template <typename T>
struct PrimitiveArgs {
  int64_t axis = 0;
  int64_t start = 0;
  int64_t len = 0;
  double scalar = 1.0;
  double rate = 0.0;
  double eps = 1e-5;
  bool train = true;
  RngStream* rng = nullptr;
  std::vector<int64_t> perm;
  Shape shape;
  std::vector<int32_t> ids;
  Shape id_shape;
  std::vector<uint8_t> mask;
  std::vector<int32_t> targets;
  std::vector<uint8_t> include;
};

// String-keyed front door over the primitive set; the typed functions above
// are the implementation. Useful for table-driven tests.
template <typename T>
Tensor<T> primitive_forward(std::string_view op, const std::vector<Tensor<T>>& in,
                            const PrimitiveArgs<T>& args = {}) {
  auto need = [&](size_t n) {
    if (in.size() != n) {
      throw std::invalid_argument(std::string(op) + ": expected " + std::to_string(n) + " inputs, got " +
                                  std::to_string(in.size()));
    }
  };
  if (op == "add") { need(2); return add(in[0], in[1]); }
  if (op == "scale") { need(1); return scale(in[0], args.scalar); }
  if (op == "elementwise-mul") { need(2); return mul(in[0], in[1]); }
  if (op == "matmul") { need(2); return matmul(in[0], in[1]); }
  if (op == "transpose") {
    need(1);
    return args.perm.empty() ? transpose_last2(in[0]) : permute(in[0], args.perm);
  }
  if (op == "concat") { return concat(in, args.axis); }
  if (op == "slice") { need(1); return slice(in[0], args.axis, args.start, args.len); }
  if (op == "embedding-gather") { need(1); return embedding(in[0], args.ids, args.id_shape); }
  if (op == "softmax-over-last-axis") { need(1); return softmax_lastdim(in[0]); }
  if (op == "layer-norm") { need(3); return layer_norm(in[0], in[1], in[2], args.eps); }
  if (op == "relu") { need(1); return relu(in[0]); }
  if (op == "gelu") { need(1); return gelu(in[0]); }
  if (op == "dropout") {
    need(1);
    if (!args.rng) throw std::invalid_argument("dropout: rng stream required");
    return dropout(in[0], args.rate, *args.rng, args.train);
  }
  if (op == "masked-fill") { need(1); return masked_fill_keypad(in[0], args.mask); }
  if (op == "cross-entropy-from-logits") {
    need(1);
    return cross_entropy_from_logits(in[0], args.targets, args.include);
  }
  if (op == "reshape") { need(1); return reshape(in[0], args.shape); }
  throw std::invalid_argument("unknown primitive op '" + std::string(op) + "'");
}

}  // namespace ar
