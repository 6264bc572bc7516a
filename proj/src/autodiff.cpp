#include "mtl/autodiff.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace mtl {

namespace {

VarPtr make_op(Tensor val, std::vector<VarPtr> inputs, std::function<void(Node&)> bw) {
  auto n = std::make_shared<Node>();
  n->val = std::move(val);
  n->inputs = std::move(inputs);
  for (const auto& in : n->inputs)
    if (in->requires_grad) n->requires_grad = true;
  if (n->requires_grad) n->backward_fn = std::move(bw);
  return n;
}

void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

// C[m,n] += A[m,k] * B[k,n]
void mm(double* c, const double* a, const double* b, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i)
    for (int64_t p = 0; p < k; ++p) {
      double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* br = b + p * n;
      double* cr = c + i * n;
      for (int64_t j = 0; j < n; ++j) cr[j] += av * br[j];
    }
}

// C[k,n] += A^T * B with A[m,k], B[m,n]
void mm_at_b(double* c, const double* a, const double* b, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i)
    for (int64_t p = 0; p < k; ++p) {
      double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* br = b + i * n;
      double* cr = c + p * n;
      for (int64_t j = 0; j < n; ++j) cr[j] += av * br[j];
    }
}

// C[m,k] += A[m,n] * B^T with B[k,n]
void mm_a_bt(double* c, const double* a, const double* b, int64_t m, int64_t n, int64_t k) {
  for (int64_t i = 0; i < m; ++i)
    for (int64_t p = 0; p < k; ++p) {
      const double* ar = a + i * n;
      const double* br = b + p * n;
      double s = 0.0;
      for (int64_t j = 0; j < n; ++j) s += ar[j] * br[j];
      c[i * k + p] += s;
    }
}

}  // namespace

VarPtr leaf(Tensor v, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->val = std::move(v);
  n->requires_grad = requires_grad;
  return n;
}

VarPtr constant(Tensor v) { return leaf(std::move(v), false); }

void backward(const VarPtr& root) {
  check(root->val.numel() == 1, "backward: root must be scalar");
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->inputs.size()) {
      Node* child = n->inputs[idx].get();
      ++idx;
      if (seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (Node* n : order)
    if (n->requires_grad) n->ensure_grad();
  if (!root->requires_grad) return;
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->requires_grad && n->backward_fn) n->backward_fn(*n);
  }
}

// ---------------- elementwise ----------------

VarPtr add(const VarPtr& a, const VarPtr& b) {
  check(a->val.same_shape(b->val), "add: shape mismatch " + shape_str(a->val.shape()) + " vs " + shape_str(b->val.shape()));
  Tensor out(a->val.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a->val[i] + b->val[i];
  return make_op(std::move(out), {a, b}, [](Node& n) {
    auto& a = *n.inputs[0];
    auto& b = *n.inputs[1];
    for (int64_t i = 0; i < n.val.numel(); ++i) {
      if (a.requires_grad) a.grad[i] += n.grad[i];
      if (b.requires_grad) b.grad[i] += n.grad[i];
    }
  });
}

VarPtr sub(const VarPtr& a, const VarPtr& b) {
  check(a->val.same_shape(b->val), "sub: shape mismatch");
  Tensor out(a->val.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a->val[i] - b->val[i];
  return make_op(std::move(out), {a, b}, [](Node& n) {
    auto& a = *n.inputs[0];
    auto& b = *n.inputs[1];
    for (int64_t i = 0; i < n.val.numel(); ++i) {
      if (a.requires_grad) a.grad[i] += n.grad[i];
      if (b.requires_grad) b.grad[i] -= n.grad[i];
    }
  });
}

VarPtr mul(const VarPtr& a, const VarPtr& b) {
  check(a->val.same_shape(b->val), "mul: shape mismatch");
  Tensor out(a->val.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a->val[i] * b->val[i];
  return make_op(std::move(out), {a, b}, [](Node& n) {
    auto& a = *n.inputs[0];
    auto& b = *n.inputs[1];
    for (int64_t i = 0; i < n.val.numel(); ++i) {
      if (a.requires_grad) a.grad[i] += n.grad[i] * b.val[i];
      if (b.requires_grad) b.grad[i] += n.grad[i] * a.val[i];
    }
  });
}

VarPtr neg(const VarPtr& a) { return scale(a, -1.0); }

VarPtr scale(const VarPtr& a, double s) {
  Tensor out(a->val.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a->val[i] * s;
  return make_op(std::move(out), {a}, [s](Node& n) {
    auto& a = *n.inputs[0];
    if (!a.requires_grad) return;
    for (int64_t i = 0; i < n.val.numel(); ++i) a.grad[i] += n.grad[i] * s;
  });
}

VarPtr add_scalar(const VarPtr& a, double s) {
  Tensor out(a->val.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a->val[i] + s;
  return make_op(std::move(out), {a}, [](Node& n) {
    auto& a = *n.inputs[0];
    if (!a.requires_grad) return;
    for (int64_t i = 0; i < n.val.numel(); ++i) a.grad[i] += n.grad[i];
  });
}

VarPtr add_constt(const VarPtr& a, Tensor c) {
  check(a->val.same_shape(c), "add_constt: shape mismatch");
  Tensor out(a->val.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a->val[i] + c[i];
  return make_op(std::move(out), {a}, [](Node& n) {
    auto& a = *n.inputs[0];
    if (!a.requires_grad) return;
    for (int64_t i = 0; i < n.val.numel(); ++i) a.grad[i] += n.grad[i];
  });
}

VarPtr mul_constt(const VarPtr& a, Tensor c) {
  check(a->val.same_shape(c), "mul_constt: shape mismatch");
  Tensor out(a->val.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a->val[i] * c[i];
  auto cp = std::make_shared<Tensor>(std::move(c));
  return make_op(std::move(out), {a}, [cp](Node& n) {
    auto& a = *n.inputs[0];
    if (!a.requires_grad) return;
    for (int64_t i = 0; i < n.val.numel(); ++i) a.grad[i] += n.grad[i] * (*cp)[i];
  });
}

VarPtr add_bcast(const VarPtr& a, const VarPtr& b) {
  const auto& as = a->val.shape();
  const auto& bs = b->val.shape();
  check(bs.size() <= as.size(), "add_bcast: b has more dims than a");
  for (size_t i = 0; i < bs.size(); ++i)
    check(bs[bs.size() - 1 - i] == as[as.size() - 1 - i], "add_bcast: b is not a suffix of a");
  int64_t bn = b->val.numel();
  Tensor out(a->val.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a->val[i] + b->val[i % bn];
  return make_op(std::move(out), {a, b}, [bn](Node& n) {
    auto& a = *n.inputs[0];
    auto& b = *n.inputs[1];
    for (int64_t i = 0; i < n.val.numel(); ++i) {
      if (a.requires_grad) a.grad[i] += n.grad[i];
      if (b.requires_grad) b.grad[i % bn] += n.grad[i];
    }
  });
}

namespace {

template <class F, class G>
VarPtr unary_op(const VarPtr& a, F fwd, G bw_factor_from_xy) {
  Tensor out(a->val.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = fwd(a->val[i]);
  return make_op(std::move(out), {a}, [bw_factor_from_xy](Node& n) {
    auto& a = *n.inputs[0];
    if (!a.requires_grad) return;
    for (int64_t i = 0; i < n.val.numel(); ++i)
      a.grad[i] += n.grad[i] * bw_factor_from_xy(a.val[i], n.val[i]);
  });
}

}  // namespace

VarPtr relu(const VarPtr& a) {
  return unary_op(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

VarPtr leaky_relu(const VarPtr& a, double slope) {
  return unary_op(
      a, [slope](double x) { return x > 0.0 ? x : slope * x; },
      [slope](double x, double) { return x > 0.0 ? 1.0 : slope; });
}

VarPtr sigmoid(const VarPtr& a) {
  return unary_op(
      a,
      [](double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
      [](double, double y) { return y * (1.0 - y); });
}

VarPtr tanh_v(const VarPtr& a) {
  return unary_op(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

VarPtr exp_v(const VarPtr& a) {
  return unary_op(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

VarPtr log_v(const VarPtr& a) {
  return unary_op(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

VarPtr softplus(const VarPtr& a) {
  return unary_op(
      a, [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x))); },
      [](double x, double) {
        return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      });
}

// ---------------- linear algebra ----------------

VarPtr matmul(const VarPtr& a, const VarPtr& b) {
  const auto& as = a->val.shape();
  const auto& bs = b->val.shape();
  check((as.size() == 2 || as.size() == 3) && (bs.size() == 2 || bs.size() == 3),
        "matmul: unsupported ranks");
  check(!(as.size() == 2 && bs.size() == 3), "matmul: 2D x 3D not supported");
  int64_t batch = as.size() == 3 ? as[0] : 1;
  int64_t m = as[as.size() - 2], k = as[as.size() - 1];
  int64_t kb = bs[bs.size() - 2], nn = bs[bs.size() - 1];
  check(k == kb, "matmul: inner dims differ " + shape_str(as) + " x " + shape_str(bs));
  bool b_batched = bs.size() == 3;
  if (b_batched) check(bs[0] == batch, "matmul: batch dims differ");
  Shape os = as.size() == 3 ? Shape{batch, m, nn} : Shape{m, nn};
  Tensor out(os);
  for (int64_t t = 0; t < batch; ++t)
    mm(out.data() + t * m * nn, a->val.data() + t * m * k,
       b->val.data() + (b_batched ? t * k * nn : 0), m, k, nn);
  return make_op(std::move(out), {a, b}, [batch, m, k, nn, b_batched](Node& n) {
    auto& a = *n.inputs[0];
    auto& b = *n.inputs[1];
    for (int64_t t = 0; t < batch; ++t) {
      const double* g = n.grad.data() + t * m * nn;
      const double* av = a.val.data() + t * m * k;
      const double* bv = b.val.data() + (b_batched ? t * k * nn : 0);
      if (a.requires_grad) mm_a_bt(a.grad.data() + t * m * k, g, bv, m, nn, k);
      if (b.requires_grad) mm_at_b(b.grad.data() + (b_batched ? t * k * nn : 0), av, g, m, k, nn);
    }
  });
}

VarPtr transpose_last2(const VarPtr& a) {
  const auto& s = a->val.shape();
  check(s.size() >= 2, "transpose_last2: rank < 2");
  int64_t m = s[s.size() - 2], n2 = s[s.size() - 1];
  int64_t batch = a->val.numel() / (m * n2);
  Shape os = s;
  std::swap(os[os.size() - 2], os[os.size() - 1]);
  Tensor out(os);
  for (int64_t t = 0; t < batch; ++t) {
    const double* src = a->val.data() + t * m * n2;
    double* dst = out.data() + t * m * n2;
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n2; ++j) dst[j * m + i] = src[i * n2 + j];
  }
  return make_op(std::move(out), {a}, [batch, m, n2](Node& n) {
    auto& a = *n.inputs[0];
    if (!a.requires_grad) return;
    for (int64_t t = 0; t < batch; ++t) {
      const double* g = n.grad.data() + t * m * n2;
      double* ga = a.grad.data() + t * m * n2;
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n2; ++j) ga[i * n2 + j] += g[j * m + i];
    }
  });
}

VarPtr permute(const VarPtr& a, const std::vector<int>& axes) {
  const auto& s = a->val.shape();
  int nd = static_cast<int>(s.size());
  check(static_cast<int>(axes.size()) == nd, "permute: axes size mismatch");
  Shape os(static_cast<size_t>(nd));
  for (int i = 0; i < nd; ++i) os[static_cast<size_t>(i)] = s[static_cast<size_t>(axes[static_cast<size_t>(i)])];
  // in-strides, then permuted
  std::vector<int64_t> ist(static_cast<size_t>(nd), 1);
  for (int i = nd - 2; i >= 0; --i) ist[static_cast<size_t>(i)] = ist[static_cast<size_t>(i + 1)] * s[static_cast<size_t>(i + 1)];
  std::vector<int64_t> pst(static_cast<size_t>(nd));
  for (int i = 0; i < nd; ++i) pst[static_cast<size_t>(i)] = ist[static_cast<size_t>(axes[static_cast<size_t>(i)])];
  Tensor out(os);
  int64_t total = out.numel();
  std::vector<int64_t> idx(static_cast<size_t>(nd), 0);
  for (int64_t lin = 0; lin < total; ++lin) {
    int64_t src = 0;
    for (int i = 0; i < nd; ++i) src += idx[static_cast<size_t>(i)] * pst[static_cast<size_t>(i)];
    out[lin] = a->val[src];
    for (int i = nd - 1; i >= 0; --i) {
      if (++idx[static_cast<size_t>(i)] < os[static_cast<size_t>(i)]) break;
      idx[static_cast<size_t>(i)] = 0;
    }
  }
  return make_op(std::move(out), {a}, [pst, os, nd](Node& n) {
    auto& a = *n.inputs[0];
    if (!a.requires_grad) return;
    int64_t total = n.val.numel();
    std::vector<int64_t> idx(static_cast<size_t>(nd), 0);
    for (int64_t lin = 0; lin < total; ++lin) {
      int64_t src = 0;
      for (int i = 0; i < nd; ++i) src += idx[static_cast<size_t>(i)] * pst[static_cast<size_t>(i)];
      a.grad[src] += n.grad[lin];
      for (int i = nd - 1; i >= 0; --i) {
        if (++idx[static_cast<size_t>(i)] < os[static_cast<size_t>(i)]) break;
        idx[static_cast<size_t>(i)] = 0;
      }
    }
  });
}

VarPtr reshape(const VarPtr& a, Shape s) {
  Tensor out = a->val.reshaped(std::move(s));
  return make_op(std::move(out), {a}, [](Node& n) {
    auto& a = *n.inputs[0];
    if (!a.requires_grad) return;
    for (int64_t i = 0; i < n.val.numel(); ++i) a.grad[i] += n.grad[i];
  });
}

VarPtr concat(const std::vector<VarPtr>& xs, int dim) {
  check(!xs.empty(), "concat: empty input list");
  const auto& s0 = xs[0]->val.shape();
  int nd = static_cast<int>(s0.size());
  if (dim < 0) dim += nd;
  check(dim >= 0 && dim < nd, "concat: bad dim");
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < dim; ++i) outer *= s0[static_cast<size_t>(i)];
  for (int i = dim + 1; i < nd; ++i) inner *= s0[static_cast<size_t>(i)];
  int64_t total_mid = 0;
  std::vector<int64_t> mids;
  for (const auto& x : xs) {
    const auto& s = x->val.shape();
    check(static_cast<int>(s.size()) == nd, "concat: rank mismatch");
    for (int i = 0; i < nd; ++i)
      if (i != dim) check(s[static_cast<size_t>(i)] == s0[static_cast<size_t>(i)], "concat: shape mismatch off-dim");
    mids.push_back(s[static_cast<size_t>(dim)]);
    total_mid += s[static_cast<size_t>(dim)];
  }
  Shape os = s0;
  os[static_cast<size_t>(dim)] = total_mid;
  Tensor out(os);
  int64_t off = 0;
  for (size_t xi = 0; xi < xs.size(); ++xi) {
    int64_t mid = mids[xi];
    const double* src = xs[xi]->val.data();
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t m2 = 0; m2 < mid; ++m2)
        for (int64_t i = 0; i < inner; ++i)
          out[(o * total_mid + off + m2) * inner + i] = src[(o * mid + m2) * inner + i];
    off += mid;
  }
  std::vector<VarPtr> ins = xs;
  return make_op(std::move(out), std::move(ins), [outer, inner, mids, total_mid](Node& n) {
    int64_t off = 0;
    for (size_t xi = 0; xi < n.inputs.size(); ++xi) {
      auto& x = *n.inputs[xi];
      int64_t mid = mids[xi];
      if (x.requires_grad) {
        for (int64_t o = 0; o < outer; ++o)
          for (int64_t m2 = 0; m2 < mid; ++m2)
            for (int64_t i = 0; i < inner; ++i)
              x.grad[(o * mid + m2) * inner + i] += n.grad[(o * total_mid + off + m2) * inner + i];
      }
      off += mid;
    }
  });
}

VarPtr slice(const VarPtr& a, int dim, int64_t start, int64_t len) {
  const auto& s = a->val.shape();
  int nd = static_cast<int>(s.size());
  if (dim < 0) dim += nd;
  check(dim >= 0 && dim < nd, "slice: bad dim");
  int64_t mid = s[static_cast<size_t>(dim)];
  check(start >= 0 && len >= 1 && start + len <= mid, "slice: out of range");
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < dim; ++i) outer *= s[static_cast<size_t>(i)];
  for (int i = dim + 1; i < nd; ++i) inner *= s[static_cast<size_t>(i)];
  Shape os = s;
  os[static_cast<size_t>(dim)] = len;
  Tensor out(os);
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t m2 = 0; m2 < len; ++m2)
      for (int64_t i = 0; i < inner; ++i)
        out[(o * len + m2) * inner + i] = a->val[(o * mid + start + m2) * inner + i];
  return make_op(std::move(out), {a}, [outer, inner, mid, start, len](Node& n) {
    auto& a = *n.inputs[0];
    if (!a.requires_grad) return;
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t m2 = 0; m2 < len; ++m2)
        for (int64_t i = 0; i < inner; ++i)
          a.grad[(o * mid + start + m2) * inner + i] += n.grad[(o * len + m2) * inner + i];
  });
}

VarPtr linear(const VarPtr& x, const VarPtr& w, const VarPtr& b) {
  return add_bcast(matmul(x, w), b);
}

// ---------------- reductions ----------------

VarPtr sum_all(const VarPtr& a) {
  double s = 0.0;
  for (int64_t i = 0; i < a->val.numel(); ++i) s += a->val[i];
  return make_op(Tensor::scalar(s), {a}, [](Node& n) {
    auto& a = *n.inputs[0];
    if (!a.requires_grad) return;
    double g = n.grad[0];
    for (int64_t i = 0; i < a.val.numel(); ++i) a.grad[i] += g;
  });
}

VarPtr mean_all(const VarPtr& a) { return scale(sum_all(a), 1.0 / static_cast<double>(a->val.numel())); }

VarPtr sum_lastdim(const VarPtr& a) {
  const auto& s = a->val.shape();
  check(s.size() >= 1, "sum_lastdim: rank 0");
  int64_t n2 = s.back();
  int64_t rows = a->val.numel() / n2;
  Shape os(s.begin(), s.end() - 1);
  if (os.empty()) os = {1};
  Tensor out(os);
  for (int64_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (int64_t c = 0; c < n2; ++c) acc += a->val[r * n2 + c];
    out[r] = acc;
  }
  return make_op(std::move(out), {a}, [rows, n2](Node& n) {
    auto& a = *n.inputs[0];
    if (!a.requires_grad) return;
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t c = 0; c < n2; ++c) a.grad[r * n2 + c] += n.grad[r];
  });
}

VarPtr logsumexp_lastdim(const VarPtr& a) {
  const auto& s = a->val.shape();
  int64_t n2 = s.back();
  int64_t rows = a->val.numel() / n2;
  Shape os(s.begin(), s.end() - 1);
  if (os.empty()) os = {1};
  Tensor out(os);
  for (int64_t r = 0; r < rows; ++r) {
    const double* row = a->val.data() + r * n2;
    double m = row[0];
    for (int64_t c = 1; c < n2; ++c) m = std::max(m, row[c]);
    double acc = 0.0;
    for (int64_t c = 0; c < n2; ++c) acc += std::exp(row[c] - m);
    out[r] = m + std::log(acc);
  }
  return make_op(std::move(out), {a}, [rows, n2](Node& n) {
    auto& a = *n.inputs[0];
    if (!a.requires_grad) return;
    for (int64_t r = 0; r < rows; ++r) {
      double g = n.grad[r];
      double lse = n.val[r];
      for (int64_t c = 0; c < n2; ++c) a.grad[r * n2 + c] += g * std::exp(a.val[r * n2 + c] - lse);
    }
  });
}

VarPtr softmax_lastdim(const VarPtr& a) {
  const auto& s = a->val.shape();
  int64_t n2 = s.back();
  int64_t rows = a->val.numel() / n2;
  Tensor out(s);
  for (int64_t r = 0; r < rows; ++r) {
    const double* row = a->val.data() + r * n2;
    double m = row[0];
    for (int64_t c = 1; c < n2; ++c) m = std::max(m, row[c]);
    double acc = 0.0;
    for (int64_t c = 0; c < n2; ++c) acc += std::exp(row[c] - m);
    for (int64_t c = 0; c < n2; ++c) out[r * n2 + c] = std::exp(row[c] - m) / acc;
  }
  return make_op(std::move(out), {a}, [rows, n2](Node& n) {
    auto& a = *n.inputs[0];
    if (!a.requires_grad) return;
    for (int64_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (int64_t c = 0; c < n2; ++c) dot += n.grad[r * n2 + c] * n.val[r * n2 + c];
      for (int64_t c = 0; c < n2; ++c)
        a.grad[r * n2 + c] += n.val[r * n2 + c] * (n.grad[r * n2 + c] - dot);
    }
  });
}

VarPtr log_softmax_lastdim(const VarPtr& a) {
  const auto& s = a->val.shape();
  int64_t n2 = s.back();
  int64_t rows = a->val.numel() / n2;
  Tensor out(s);
  for (int64_t r = 0; r < rows; ++r) {
    const double* row = a->val.data() + r * n2;
    double m = row[0];
    for (int64_t c = 1; c < n2; ++c) m = std::max(m, row[c]);
    double acc = 0.0;
    for (int64_t c = 0; c < n2; ++c) acc += std::exp(row[c] - m);
    double lse = m + std::log(acc);
    for (int64_t c = 0; c < n2; ++c) out[r * n2 + c] = row[c] - lse;
  }
  return make_op(std::move(out), {a}, [rows, n2](Node& n) {
    auto& a = *n.inputs[0];
    if (!a.requires_grad) return;
    for (int64_t r = 0; r < rows; ++r) {
      double gsum = 0.0;
      for (int64_t c = 0; c < n2; ++c) gsum += n.grad[r * n2 + c];
      for (int64_t c = 0; c < n2; ++c)
        a.grad[r * n2 + c] += n.grad[r * n2 + c] - std::exp(n.val[r * n2 + c]) * gsum;
    }
  });
}

VarPtr sub_lastdim_bcast(const VarPtr& a, const VarPtr& v) {
  const auto& s = a->val.shape();
  int64_t n2 = s.back();
  int64_t rows = a->val.numel() / n2;
  check(v->val.numel() == rows, "sub_lastdim_bcast: size mismatch");
  Tensor out(s);
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < n2; ++c) out[r * n2 + c] = a->val[r * n2 + c] - v->val[r];
  return make_op(std::move(out), {a, v}, [rows, n2](Node& n) {
    auto& a = *n.inputs[0];
    auto& v = *n.inputs[1];
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t c = 0; c < n2; ++c) {
        if (a.requires_grad) a.grad[r * n2 + c] += n.grad[r * n2 + c];
        if (v.requires_grad) v.grad[r] -= n.grad[r * n2 + c];
      }
  });
}

VarPtr layer_norm(const VarPtr& x, const VarPtr& gain, const VarPtr& bias, double eps) {
  const auto& s = x->val.shape();
  int64_t n2 = s.back();
  check(gain->val.numel() == n2 && bias->val.numel() == n2, "layer_norm: gain/bias size");
  int64_t rows = x->val.numel() / n2;
  Tensor out(s);
  for (int64_t r = 0; r < rows; ++r) {
    const double* row = x->val.data() + r * n2;
    double mu = 0.0;
    for (int64_t c = 0; c < n2; ++c) mu += row[c];
    mu /= static_cast<double>(n2);
    double var = 0.0;
    for (int64_t c = 0; c < n2; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<double>(n2);
    double inv = 1.0 / std::sqrt(var + eps);
    for (int64_t c = 0; c < n2; ++c)
      out[r * n2 + c] = (row[c] - mu) * inv * gain->val[c] + bias->val[c];
  }
  return make_op(std::move(out), {x, gain, bias}, [rows, n2, eps](Node& n) {
    auto& x = *n.inputs[0];
    auto& gain = *n.inputs[1];
    auto& bias = *n.inputs[2];
    std::vector<double> xhat(static_cast<size_t>(n2)), dxhat(static_cast<size_t>(n2));
    for (int64_t r = 0; r < rows; ++r) {
      const double* row = x.val.data() + r * n2;
      const double* g = n.grad.data() + r * n2;
      double mu = 0.0;
      for (int64_t c = 0; c < n2; ++c) mu += row[c];
      mu /= static_cast<double>(n2);
      double var = 0.0;
      for (int64_t c = 0; c < n2; ++c) var += (row[c] - mu) * (row[c] - mu);
      var /= static_cast<double>(n2);
      double inv = 1.0 / std::sqrt(var + eps);
      double m1 = 0.0, m2 = 0.0;
      for (int64_t c = 0; c < n2; ++c) {
        xhat[static_cast<size_t>(c)] = (row[c] - mu) * inv;
        dxhat[static_cast<size_t>(c)] = g[c] * gain.val[c];
        m1 += dxhat[static_cast<size_t>(c)];
        m2 += dxhat[static_cast<size_t>(c)] * xhat[static_cast<size_t>(c)];
      }
      m1 /= static_cast<double>(n2);
      m2 /= static_cast<double>(n2);
      if (x.requires_grad)
        for (int64_t c = 0; c < n2; ++c)
          x.grad[r * n2 + c] += inv * (dxhat[static_cast<size_t>(c)] - m1 - xhat[static_cast<size_t>(c)] * m2);
      if (gain.requires_grad)
        for (int64_t c = 0; c < n2; ++c) gain.grad[c] += g[c] * xhat[static_cast<size_t>(c)];
      if (bias.requires_grad)
        for (int64_t c = 0; c < n2; ++c) bias.grad[c] += g[c];
    }
  });
}

VarPtr l2_normalize_rows(const VarPtr& x, double eps) {
  const auto& s = x->val.shape();
  check(s.size() == 2, "l2_normalize_rows: expects 2D");
  int64_t rows = s[0], d = s[1];
  Tensor out(s);
  std::vector<double> norms(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (int64_t c = 0; c < d; ++c) acc += x->val[r * d + c] * x->val[r * d + c];
    double nr = std::sqrt(acc);
    if (nr < eps) nr = eps;
    norms[static_cast<size_t>(r)] = nr;
    for (int64_t c = 0; c < d; ++c) out[r * d + c] = x->val[r * d + c] / nr;
  }
  return make_op(std::move(out), {x}, [rows, d, norms](Node& n) {
    auto& x = *n.inputs[0];
    if (!x.requires_grad) return;
    for (int64_t r = 0; r < rows; ++r) {
      double nr = norms[static_cast<size_t>(r)];
      double dot = 0.0;
      for (int64_t c = 0; c < d; ++c) dot += n.grad[r * d + c] * n.val[r * d + c];
      for (int64_t c = 0; c < d; ++c)
        x.grad[r * d + c] += (n.grad[r * d + c] - n.val[r * d + c] * dot) / nr;
    }
  });
}

// ---------------- structured ----------------

VarPtr embedding(const VarPtr& table, const std::vector<int64_t>& ids, Shape id_shape) {
  const auto& ts = table->val.shape();
  check(ts.size() == 2, "embedding: table must be 2D");
  int64_t v = ts[0], d = ts[1];
  check(shape_numel(id_shape) == static_cast<int64_t>(ids.size()), "embedding: ids/shape mismatch");
  for (int64_t id : ids) check(id >= 0 && id < v, "embedding: id out of range");
  Shape os = id_shape;
  os.push_back(d);
  Tensor out(os);
  for (size_t i = 0; i < ids.size(); ++i)
    for (int64_t c = 0; c < d; ++c) out[static_cast<int64_t>(i) * d + c] = table->val[ids[i] * d + c];
  return make_op(std::move(out), {table}, [ids, d](Node& n) {
    auto& t = *n.inputs[0];
    if (!t.requires_grad) return;
    for (size_t i = 0; i < ids.size(); ++i)
      for (int64_t c = 0; c < d; ++c) t.grad[ids[i] * d + c] += n.grad[static_cast<int64_t>(i) * d + c];
  });
}

VarPtr gather_rows(const VarPtr& x, const std::vector<int64_t>& idx) {
  const auto& s = x->val.shape();
  check(s.size() == 2, "gather_rows: expects 2D");
  int64_t rows = s[0], d = s[1];
  for (int64_t i : idx) check(i >= 0 && i < rows, "gather_rows: index out of range");
  Tensor out({static_cast<int64_t>(idx.size()), d});
  for (size_t i = 0; i < idx.size(); ++i)
    for (int64_t c = 0; c < d; ++c) out[static_cast<int64_t>(i) * d + c] = x->val[idx[i] * d + c];
  return make_op(std::move(out), {x}, [idx, d](Node& n) {
    auto& x = *n.inputs[0];
    if (!x.requires_grad) return;
    for (size_t i = 0; i < idx.size(); ++i)
      for (int64_t c = 0; c < d; ++c) x.grad[idx[i] * d + c] += n.grad[static_cast<int64_t>(i) * d + c];
  });
}

VarPtr scatter_add_rows(const VarPtr& x, const std::vector<int64_t>& dst, int64_t n_rows) {
  const auto& s = x->val.shape();
  check(s.size() == 2, "scatter_add_rows: expects 2D");
  check(static_cast<int64_t>(dst.size()) == s[0], "scatter_add_rows: dst size mismatch");
  int64_t d = s[1];
  for (int64_t i : dst) check(i >= 0 && i < n_rows, "scatter_add_rows: dst out of range");
  Tensor out({n_rows, d});
  for (size_t e = 0; e < dst.size(); ++e)
    for (int64_t c = 0; c < d; ++c) out[dst[e] * d + c] += x->val[static_cast<int64_t>(e) * d + c];
  return make_op(std::move(out), {x}, [dst, d](Node& n) {
    auto& x = *n.inputs[0];
    if (!x.requires_grad) return;
    for (size_t e = 0; e < dst.size(); ++e)
      for (int64_t c = 0; c < d; ++c) x.grad[static_cast<int64_t>(e) * d + c] += n.grad[dst[e] * d + c];
  });
}

VarPtr mul_rows(const VarPtr& x, const VarPtr& w) {
  const auto& s = x->val.shape();
  check(s.size() == 2, "mul_rows: expects 2D");
  int64_t rows = s[0], d = s[1];
  check(w->val.numel() == rows, "mul_rows: weight size mismatch");
  Tensor out(s);
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < d; ++c) out[r * d + c] = x->val[r * d + c] * w->val[r];
  return make_op(std::move(out), {x, w}, [rows, d](Node& n) {
    auto& x = *n.inputs[0];
    auto& w = *n.inputs[1];
    for (int64_t r = 0; r < rows; ++r) {
      if (x.requires_grad)
        for (int64_t c = 0; c < d; ++c) x.grad[r * d + c] += n.grad[r * d + c] * w.val[r];
      if (w.requires_grad) {
        double acc = 0.0;
        for (int64_t c = 0; c < d; ++c) acc += n.grad[r * d + c] * x.val[r * d + c];
        w.grad[r] += acc;
      }
    }
  });
}

VarPtr segment_softmax(const VarPtr& scores, const std::vector<int64_t>& seg, int64_t n_seg) {
  check(scores->val.ndim() == 1, "segment_softmax: expects 1D scores");
  int64_t e = scores->val.numel();
  check(static_cast<int64_t>(seg.size()) == e, "segment_softmax: seg size mismatch");
  std::vector<double> mx(static_cast<size_t>(n_seg), -1e300), den(static_cast<size_t>(n_seg), 0.0);
  for (int64_t i = 0; i < e; ++i) mx[static_cast<size_t>(seg[static_cast<size_t>(i)])] =
      std::max(mx[static_cast<size_t>(seg[static_cast<size_t>(i)])], scores->val[i]);
  Tensor out({e});
  for (int64_t i = 0; i < e; ++i) {
    out[i] = std::exp(scores->val[i] - mx[static_cast<size_t>(seg[static_cast<size_t>(i)])]);
    den[static_cast<size_t>(seg[static_cast<size_t>(i)])] += out[i];
  }
  for (int64_t i = 0; i < e; ++i) out[i] /= den[static_cast<size_t>(seg[static_cast<size_t>(i)])];
  return make_op(std::move(out), {scores}, [seg, n_seg](Node& n) {
    auto& s = *n.inputs[0];
    if (!s.requires_grad) return;
    std::vector<double> dot(static_cast<size_t>(n_seg), 0.0);
    int64_t e = n.val.numel();
    for (int64_t i = 0; i < e; ++i) dot[static_cast<size_t>(seg[static_cast<size_t>(i)])] += n.grad[i] * n.val[i];
    for (int64_t i = 0; i < e; ++i)
      s.grad[i] += n.val[i] * (n.grad[i] - dot[static_cast<size_t>(seg[static_cast<size_t>(i)])]);
  });
}

VarPtr tile_rows(const VarPtr& m, int64_t b) {
  const auto& s = m->val.shape();
  check(s.size() == 2, "tile_rows: expects 2D");
  int64_t rows = s[0], d = s[1];
  Tensor out({b, rows, d});
  for (int64_t t = 0; t < b; ++t)
    for (int64_t i = 0; i < rows * d; ++i) out[t * rows * d + i] = m->val[i];
  return make_op(std::move(out), {m}, [b, rows, d](Node& n) {
    auto& m = *n.inputs[0];
    if (!m.requires_grad) return;
    for (int64_t t = 0; t < b; ++t)
      for (int64_t i = 0; i < rows * d; ++i) m.grad[i] += n.grad[t * rows * d + i];
  });
}

VarPtr pad_pack_rows(const VarPtr& x, const std::vector<int64_t>& sizes, int64_t rmax) {
  const auto& s = x->val.shape();
  check(s.size() == 2, "pad_pack_rows: expects 2D");
  int64_t d = s[1];
  int64_t total = 0;
  for (int64_t sz : sizes) {
    check(sz >= 0 && sz <= rmax, "pad_pack_rows: group size out of range");
    total += sz;
  }
  check(total == s[0], "pad_pack_rows: sizes do not cover rows");
  int64_t b = static_cast<int64_t>(sizes.size());
  Tensor out({b, rmax, d});
  int64_t off = 0;
  for (int64_t g = 0; g < b; ++g) {
    for (int64_t r = 0; r < sizes[static_cast<size_t>(g)]; ++r)
      for (int64_t c = 0; c < d; ++c) out[(g * rmax + r) * d + c] = x->val[(off + r) * d + c];
    off += sizes[static_cast<size_t>(g)];
  }
  return make_op(std::move(out), {x}, [sizes, rmax, d](Node& n) {
    auto& x = *n.inputs[0];
    if (!x.requires_grad) return;
    int64_t off = 0;
    for (size_t g = 0; g < sizes.size(); ++g) {
      for (int64_t r = 0; r < sizes[g]; ++r)
        for (int64_t c = 0; c < d; ++c)
          x.grad[(off + r) * d + c] += n.grad[(static_cast<int64_t>(g) * rmax + r) * d + c];
      off += sizes[g];
    }
  });
}

// ---------------- conv ----------------

VarPtr conv2d(const VarPtr& x, const VarPtr& w, const VarPtr& b, int stride, int pad) {
  const auto& xs = x->val.shape();
  const auto& ws = w->val.shape();
  check(xs.size() == 4 && ws.size() == 4, "conv2d: expects 4D input and weight");
  int64_t n = xs[0], ci = xs[1], h = xs[2], wd = xs[3];
  int64_t co = ws[0], kh = ws[2], kw = ws[3];
  check(ws[1] == ci, "conv2d: channel mismatch");
  check(b->val.numel() == co, "conv2d: bias size");
  int64_t ho = (h + 2 * pad - kh) / stride + 1;
  int64_t wo = (wd + 2 * pad - kw) / stride + 1;
  check(ho >= 1 && wo >= 1, "conv2d: output would be empty");
  Tensor out({n, co, ho, wo});
  for (int64_t in = 0; in < n; ++in)
    for (int64_t oc = 0; oc < co; ++oc)
      for (int64_t oh = 0; oh < ho; ++oh)
        for (int64_t ow = 0; ow < wo; ++ow) {
          double acc = b->val[oc];
          for (int64_t ic = 0; ic < ci; ++ic)
            for (int64_t u = 0; u < kh; ++u) {
              int64_t ih = oh * stride - pad + u;
              if (ih < 0 || ih >= h) continue;
              for (int64_t v = 0; v < kw; ++v) {
                int64_t iw = ow * stride - pad + v;
                if (iw < 0 || iw >= wd) continue;
                acc += x->val[((in * ci + ic) * h + ih) * wd + iw] *
                       w->val[((oc * ci + ic) * kh + u) * kw + v];
              }
            }
          out[((in * co + oc) * ho + oh) * wo + ow] = acc;
        }
  return make_op(std::move(out), {x, w, b}, [n, ci, h, wd, co, kh, kw, ho, wo, stride, pad](Node& nd) {
    auto& x = *nd.inputs[0];
    auto& w = *nd.inputs[1];
    auto& b = *nd.inputs[2];
    for (int64_t in = 0; in < n; ++in)
      for (int64_t oc = 0; oc < co; ++oc)
        for (int64_t oh = 0; oh < ho; ++oh)
          for (int64_t ow = 0; ow < wo; ++ow) {
            double g = nd.grad[((in * co + oc) * ho + oh) * wo + ow];
            if (g == 0.0) continue;
            if (b.requires_grad) b.grad[oc] += g;
            for (int64_t ic = 0; ic < ci; ++ic)
              for (int64_t u = 0; u < kh; ++u) {
                int64_t ih = oh * stride - pad + u;
                if (ih < 0 || ih >= h) continue;
                for (int64_t v = 0; v < kw; ++v) {
                  int64_t iw = ow * stride - pad + v;
                  if (iw < 0 || iw >= wd) continue;
                  int64_t xi = ((in * ci + ic) * h + ih) * wd + iw;
                  int64_t wi = ((oc * ci + ic) * kh + u) * kw + v;
                  if (x.requires_grad) x.grad[xi] += g * w.val[wi];
                  if (w.requires_grad) w.grad[wi] += g * x.val[xi];
                }
              }
          }
  });
}

VarPtr depthwise_conv_const(const VarPtr& x, Tensor kernel) {
  const auto& xs = x->val.shape();
  check(xs.size() == 4, "depthwise_conv_const: expects 4D input");
  check(kernel.ndim() == 2 && kernel.size(0) == kernel.size(1) && kernel.size(0) % 2 == 1,
        "depthwise_conv_const: kernel must be odd square");
  int64_t n = xs[0], c = xs[1], h = xs[2], w = xs[3];
  int64_t k = kernel.size(0);
  int64_t r = k / 2;
  check(h >= k && w >= k, "depthwise_conv_const: feature map smaller than kernel");
  Tensor out(xs);
  for (int64_t in = 0; in < n; ++in)
    for (int64_t ic = 0; ic < c; ++ic) {
      const double* plane = x->val.data() + (in * c + ic) * h * w;
      double* oplane = out.data() + (in * c + ic) * h * w;
      for (int64_t i = 0; i < h; ++i)
        for (int64_t j = 0; j < w; ++j) {
          double acc = 0.0;
          for (int64_t u = 0; u < k; ++u) {
            int64_t ii = i + u - r;
            if (ii < 0 || ii >= h) continue;
            for (int64_t v = 0; v < k; ++v) {
              int64_t jj = j + v - r;
              if (jj < 0 || jj >= w) continue;
              acc += plane[ii * w + jj] * kernel[u * k + v];
            }
          }
          oplane[i * w + j] = acc;
        }
    }
  auto kp = std::make_shared<Tensor>(std::move(kernel));
  return make_op(std::move(out), {x}, [n, c, h, w, kp](Node& nd) {
    auto& x = *nd.inputs[0];
    if (!x.requires_grad) return;
    int64_t k = kp->size(0), r = k / 2;
    for (int64_t in = 0; in < n; ++in)
      for (int64_t ic = 0; ic < c; ++ic) {
        const double* gplane = nd.grad.data() + (in * c + ic) * h * w;
        double* xg = x.grad.data() + (in * c + ic) * h * w;
        for (int64_t i = 0; i < h; ++i)
          for (int64_t j = 0; j < w; ++j) {
            double g = gplane[i * w + j];
            if (g == 0.0) continue;
            for (int64_t u = 0; u < k; ++u) {
              int64_t ii = i + u - r;
              if (ii < 0 || ii >= h) continue;
              for (int64_t v = 0; v < k; ++v) {
                int64_t jj = j + v - r;
                if (jj < 0 || jj >= w) continue;
                xg[ii * w + jj] += g * (*kp)[u * k + v];
              }
            }
          }
      }
  });
}

VarPtr global_avg_pool(const VarPtr& x) {
  const auto& s = x->val.shape();
  check(s.size() == 4, "global_avg_pool: expects 4D");
  int64_t n = s[0], c = s[1], hw = s[2] * s[3];
  Tensor out({n, c});
  for (int64_t i = 0; i < n * c; ++i) {
    double acc = 0.0;
    for (int64_t p = 0; p < hw; ++p) acc += x->val[i * hw + p];
    out[i] = acc / static_cast<double>(hw);
  }
  return make_op(std::move(out), {x}, [n, c, hw](Node& nd) {
    auto& x = *nd.inputs[0];
    if (!x.requires_grad) return;
    for (int64_t i = 0; i < n * c; ++i) {
      double g = nd.grad[i] / static_cast<double>(hw);
      for (int64_t p = 0; p < hw; ++p) x.grad[i * hw + p] += g;
    }
  });
}

// ---------------- fused losses ----------------

VarPtr softmax_ce_mean(const VarPtr& logits, const std::vector<int64_t>& targets,
                       const std::vector<uint8_t>& mask) {
  const auto& s = logits->val.shape();
  check(s.size() == 2, "softmax_ce_mean: expects 2D logits");
  int64_t rows = s[0], v = s[1];
  check(static_cast<int64_t>(targets.size()) == rows && static_cast<int64_t>(mask.size()) == rows,
        "softmax_ce_mean: target/mask size mismatch");
  int64_t cnt = 0;
  for (auto m : mask) cnt += m ? 1 : 0;
  check(cnt > 0, "softmax_ce_mean: all positions masked");
  double loss = 0.0;
  for (int64_t r = 0; r < rows; ++r) {
    if (!mask[static_cast<size_t>(r)]) continue;
    check(targets[static_cast<size_t>(r)] >= 0 && targets[static_cast<size_t>(r)] < v,
          "softmax_ce_mean: target out of range");
    const double* row = logits->val.data() + r * v;
    double m = row[0];
    for (int64_t c = 1; c < v; ++c) m = std::max(m, row[c]);
    double acc = 0.0;
    for (int64_t c = 0; c < v; ++c) acc += std::exp(row[c] - m);
    loss += m + std::log(acc) - row[targets[static_cast<size_t>(r)]];
  }
  loss /= static_cast<double>(cnt);
  return make_op(Tensor::scalar(loss), {logits}, [targets, mask, rows, v, cnt](Node& n) {
    auto& lg = *n.inputs[0];
    if (!lg.requires_grad) return;
    double g = n.grad[0] / static_cast<double>(cnt);
    for (int64_t r = 0; r < rows; ++r) {
      if (!mask[static_cast<size_t>(r)]) continue;
      const double* row = lg.val.data() + r * v;
      double m = row[0];
      for (int64_t c = 1; c < v; ++c) m = std::max(m, row[c]);
      double acc = 0.0;
      for (int64_t c = 0; c < v; ++c) acc += std::exp(row[c] - m);
      for (int64_t c = 0; c < v; ++c) {
        double p = std::exp(row[c] - m) / acc;
        lg.grad[r * v + c] += g * (p - (c == targets[static_cast<size_t>(r)] ? 1.0 : 0.0));
      }
    }
  });
}

VarPtr bce_logits_mean(const VarPtr& logits, Tensor targets) {
  check(logits->val.same_shape(targets), "bce_logits_mean: shape mismatch");
  int64_t n = logits->val.numel();
  double loss = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    double x = logits->val[i], y = targets[i];
    loss += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::fabs(x)));
  }
  loss /= static_cast<double>(n);
  auto tp = std::make_shared<Tensor>(std::move(targets));
  return make_op(Tensor::scalar(loss), {logits}, [tp, n](Node& nd) {
    auto& lg = *nd.inputs[0];
    if (!lg.requires_grad) return;
    double g = nd.grad[0] / static_cast<double>(n);
    for (int64_t i = 0; i < n; ++i) {
      double x = lg.val[i];
      double sig = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      lg.grad[i] += g * (sig - (*tp)[i]);
    }
  });
}

}  // namespace mtl
