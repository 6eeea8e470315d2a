#include "brainseg/nn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>

#include "brainseg/nn/kernels.hpp"

namespace brainseg::nn {

namespace {

using kernels::Trans;

[[noreturn]] void shape_error(const std::string& op, const std::string& what) {
  throw ValidationError(op + ": " + what);
}

template <typename T>
bool wants_grad(const std::shared_ptr<Node<T>>& n) {
  return n && n->requires_grad;
}

}  // namespace

template <typename T>
void backward(const Var<T>& root) {
  if (root.value().size() != 1) {
    throw ValidationError("backward: root must hold exactly one element, got shape " +
                          shape_str(root.shape()));
  }
  if (!root.requires_grad()) return;

  // Post-order DFS gives parents before children; walk it in reverse.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node<T>* n : order) {
    if (!n->leaf) n->grad = Tensor<T>();
  }
  root.node()->grad_buffer()[0] += T{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->leaf || !n->backward || n->grad.shape() != n->value.shape()) continue;
    n->backward(*n);
  }
}

// ---------------------------------------------------------------- conv2d

template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& weight, const Var<T>& bias, int stride,
              int padding) {
  const Shape& xs = input.shape();
  const Shape& ws = weight.shape();
  if (xs.size() != 3 && xs.size() != 4) {
    shape_error("conv2d", "input must be [C,H,W] or [N,C,H,W], got " + shape_str(xs));
  }
  if (ws.size() != 4 || ws[2] != ws[3] || ws[2] % 2 == 0) {
    shape_error("conv2d", "weight must be [C_out,C_in,k,k] with odd k, got " + shape_str(ws));
  }
  if (stride < 1 || padding < 0) shape_error("conv2d", "stride must be >= 1 and padding >= 0");
  const bool batched = xs.size() == 4;
  const int batch = batched ? xs[0] : 1;
  const int c_in = xs[batched ? 1 : 0];
  const int h = xs[batched ? 2 : 1];
  const int w = xs[batched ? 3 : 2];
  const int c_out = ws[0];
  const int k = ws[2];
  if (ws[1] != c_in) {
    shape_error("conv2d", "weight expects " + std::to_string(ws[1]) + " input channels, input has " +
                              std::to_string(c_in) + " (input " + shape_str(xs) + ")");
  }
  if (bias.defined() && (bias.shape().size() != 1 || bias.shape()[0] != c_out)) {
    shape_error("conv2d", "bias must be [" + std::to_string(c_out) + "], got " + shape_str(bias.shape()));
  }
  const int out_h = (h + 2 * padding - k) / stride + 1;
  const int out_w = (w + 2 * padding - k) / stride + 1;
  if (h + 2 * padding < k || w + 2 * padding < k || out_h <= 0 || out_w <= 0) {
    shape_error("conv2d", "kernel " + std::to_string(k) + " does not fit input " + shape_str(xs));
  }

  const std::size_t plane = static_cast<std::size_t>(out_h) * out_w;
  const int ckk = c_in * k * k;
  const bool pointwise = k == 1 && stride == 1 && padding == 0;
  const std::size_t in_size = static_cast<std::size_t>(c_in) * h * w;
  const std::size_t col_size = static_cast<std::size_t>(ckk) * plane;

  Shape out_shape = batched ? Shape{batch, c_out, out_h, out_w} : Shape{c_out, out_h, out_w};
  Tensor<T> out(out_shape);

  const bool record = grad_mode() && (input.requires_grad() || weight.requires_grad() ||
                                      (bias.defined() && bias.requires_grad()));
  const bool keep_cols = record && weight.requires_grad() && !pointwise;
  auto cols = std::make_shared<std::vector<T>>();
  std::vector<T> scratch;
  if (!pointwise) {
    if (keep_cols) {
      cols->resize(col_size * batch);
    } else {
      scratch.resize(col_size);
    }
  }

  const T* wp = weight.value().data();
  for (int n = 0; n < batch; ++n) {
    const T* x = input.value().data() + n * in_size;
    const T* col = x;
    if (!pointwise) {
      T* buf = keep_cols ? cols->data() + n * col_size : scratch.data();
      kernels::im2col(x, c_in, h, w, k, stride, padding, out_h, out_w, buf);
      col = buf;
    }
    T* y = out.data() + static_cast<std::size_t>(n) * c_out * plane;
    kernels::gemm(Trans::kNo, Trans::kNo, c_out, static_cast<int>(plane), ckk, wp, ckk, col,
                  static_cast<int>(plane), T{0}, y, static_cast<int>(plane));
    if (bias.defined()) {
      const T* b = bias.value().data();
      for (int co = 0; co < c_out; ++co) {
        T* row = y + static_cast<std::size_t>(co) * plane;
        for (std::size_t i = 0; i < plane; ++i) row[i] += b[co];
      }
    }
  }

  std::vector<Var<T>> parents{input, weight};
  if (bias.defined()) parents.push_back(bias);
  return make_result<T>(std::move(out), parents, [=](Node<T>& self) {
    const auto& xn = self.parents[0];
    const auto& wn = self.parents[1];
    const std::shared_ptr<Node<T>> bn = self.parents.size() > 2 ? self.parents[2] : nullptr;
    const T* dy_all = self.grad.data();
    std::vector<T> dcol(pointwise ? 0 : col_size);
    std::vector<T> tmp_col;
    for (int n = 0; n < batch; ++n) {
      const T* dy = dy_all + static_cast<std::size_t>(n) * c_out * plane;
      if (wants_grad(wn)) {
        const T* col;
        if (pointwise) {
          col = xn->value.data() + n * in_size;
        } else if (keep_cols) {
          col = cols->data() + n * col_size;
        } else {
          tmp_col.resize(col_size);
          kernels::im2col(xn->value.data() + n * in_size, c_in, h, w, k, stride, padding, out_h,
                          out_w, tmp_col.data());
          col = tmp_col.data();
        }
        kernels::gemm(Trans::kNo, Trans::kYes, c_out, ckk, static_cast<int>(plane), dy,
                      static_cast<int>(plane), col, static_cast<int>(plane), T{1},
                      wn->grad_buffer().data(), ckk);
      }
      if (wants_grad(bn)) {
        T* db = bn->grad_buffer().data();
        for (int co = 0; co < c_out; ++co) {
          double acc = 0.0;
          const T* row = dy + static_cast<std::size_t>(co) * plane;
          for (std::size_t i = 0; i < plane; ++i) acc += row[i];
          db[co] += static_cast<T>(acc);
        }
      }
      if (wants_grad(xn)) {
        T* dx = xn->grad_buffer().data() + n * in_size;
        if (pointwise) {
          kernels::gemm(Trans::kYes, Trans::kNo, ckk, static_cast<int>(plane), c_out,
                        wn->value.data(), ckk, dy, static_cast<int>(plane), T{1}, dx,
                        static_cast<int>(plane));
        } else {
          kernels::gemm(Trans::kYes, Trans::kNo, ckk, static_cast<int>(plane), c_out,
                        wn->value.data(), ckk, dy, static_cast<int>(plane), T{0}, dcol.data(),
                        static_cast<int>(plane));
          kernels::col2im(dcol.data(), c_in, h, w, k, stride, padding, out_h, out_w, dx);
        }
      }
    }
  });
}

// ------------------------------------------------------------ resample2d

template <typename T>
Var<T> resample2d(const Var<T>& input, ResampleMode mode) {
  const Shape& xs = input.shape();
  if (xs.size() != 3 && xs.size() != 4) {
    shape_error("resample2d", "input must be rank 3 or 4, got " + shape_str(xs));
  }
  const int h = xs[xs.size() - 2];
  const int w = xs[xs.size() - 1];
  std::size_t planes = 1;
  for (std::size_t i = 0; i + 2 < xs.size(); ++i) planes *= xs[i];

  if (mode == ResampleMode::kMaxPool2x2) {
    if (h % 2 != 0 || w % 2 != 0) {
      shape_error("resample2d", "max pooling needs even extents, got " + shape_str(xs));
    }
    const int oh = h / 2;
    const int ow = w / 2;
    Shape os = xs;
    os[os.size() - 2] = oh;
    os[os.size() - 1] = ow;
    Tensor<T> out(os);
    auto argmax = std::make_shared<std::vector<std::uint32_t>>(out.size());
    const T* x = input.value().data();
    for (std::size_t p = 0; p < planes; ++p) {
      for (int i = 0; i < oh; ++i) {
        for (int j = 0; j < ow; ++j) {
          std::size_t best = p * h * w + static_cast<std::size_t>(2 * i) * w + 2 * j;
          for (int di = 0; di < 2; ++di) {
            for (int dj = 0; dj < 2; ++dj) {
              const std::size_t idx = p * h * w + static_cast<std::size_t>(2 * i + di) * w + 2 * j + dj;
              if (x[idx] > x[best]) best = idx;
            }
          }
          const std::size_t o = p * oh * ow + static_cast<std::size_t>(i) * ow + j;
          out[o] = x[best];
          (*argmax)[o] = static_cast<std::uint32_t>(best);
        }
      }
    }
    return make_result<T>(std::move(out), {input}, [argmax](Node<T>& self) {
      T* dx = self.parents[0]->grad_buffer().data();
      for (std::size_t o = 0; o < argmax->size(); ++o) dx[(*argmax)[o]] += self.grad[o];
    });
  }

  const int oh = h * 2;
  const int ow = w * 2;
  Shape os = xs;
  os[os.size() - 2] = oh;
  os[os.size() - 1] = ow;
  Tensor<T> out(os);
  const T* x = input.value().data();
  for (std::size_t p = 0; p < planes; ++p) {
    for (int i = 0; i < oh; ++i) {
      const T* src = x + p * h * w + static_cast<std::size_t>(i / 2) * w;
      T* dst = out.data() + p * oh * ow + static_cast<std::size_t>(i) * ow;
      for (int j = 0; j < ow; ++j) dst[j] = src[j / 2];
    }
  }
  return make_result<T>(std::move(out), {input}, [=](Node<T>& self) {
    T* dx = self.parents[0]->grad_buffer().data();
    for (std::size_t p = 0; p < planes; ++p) {
      for (int i = 0; i < oh; ++i) {
        const T* g = self.grad.data() + p * oh * ow + static_cast<std::size_t>(i) * ow;
        T* dst = dx + p * h * w + static_cast<std::size_t>(i / 2) * w;
        for (int j = 0; j < ow; ++j) dst[j / 2] += g[j];
      }
    }
  });
}

// ----------------------------------------------------------------- dense

template <typename T>
Var<T> dense(const Var<T>& input, const Var<T>& weight, const Var<T>& bias) {
  const Shape& xs = input.shape();
  const Shape& ws = weight.shape();
  if (xs.size() != 2 || ws.size() != 2 || xs[1] != ws[0]) {
    shape_error("dense", "cannot multiply " + shape_str(xs) + " by " + shape_str(ws));
  }
  const int n = xs[0];
  const int d = xs[1];
  const int k = ws[1];
  if (bias.defined() && (bias.shape().size() != 1 || bias.shape()[0] != k)) {
    shape_error("dense", "bias must be [" + std::to_string(k) + "], got " + shape_str(bias.shape()));
  }
  Tensor<T> out({n, k});
  kernels::gemm(Trans::kNo, Trans::kNo, n, k, d, input.value().data(), d, weight.value().data(), k,
                T{0}, out.data(), k);
  if (bias.defined()) {
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < k; ++j) out[static_cast<std::size_t>(i) * k + j] += bias.value()[j];
    }
  }
  std::vector<Var<T>> parents{input, weight};
  if (bias.defined()) parents.push_back(bias);
  return make_result<T>(std::move(out), parents, [=](Node<T>& self) {
    const auto& xn = self.parents[0];
    const auto& wn = self.parents[1];
    const T* dy = self.grad.data();
    if (wants_grad(xn)) {
      kernels::gemm(Trans::kNo, Trans::kYes, n, d, k, dy, k, wn->value.data(), k, T{1},
                    xn->grad_buffer().data(), d);
    }
    if (wants_grad(wn)) {
      kernels::gemm(Trans::kYes, Trans::kNo, d, k, n, xn->value.data(), d, dy, k, T{1},
                    wn->grad_buffer().data(), k);
    }
    if (self.parents.size() > 2 && wants_grad(self.parents[2])) {
      T* db = self.parents[2]->grad_buffer().data();
      for (int j = 0; j < k; ++j) {
        double acc = 0.0;
        for (int i = 0; i < n; ++i) acc += dy[static_cast<std::size_t>(i) * k + j];
        db[j] += static_cast<T>(acc);
      }
    }
  });
}

// ------------------------------------------------------------ activation

template <typename T>
Var<T> activation(const Var<T>& input, Activation mode) {
  const Tensor<T>& x = input.value();
  Tensor<T> out(x.shape());
  switch (mode) {
    case Activation::kRelu: {
      for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T{0} ? x[i] : T{0};
      return make_result<T>(std::move(out), {input}, [](Node<T>& self) {
        T* dx = self.parents[0]->grad_buffer().data();
        const Tensor<T>& xv = self.parents[0]->value;
        for (std::size_t i = 0; i < xv.size(); ++i) {
          if (xv[i] > T{0}) dx[i] += self.grad[i];
        }
      });
    }
    case Activation::kSigmoid: {
      for (std::size_t i = 0; i < x.size(); ++i) {
        const T v = x[i];
        if (v >= T{0}) {
          out[i] = T{1} / (T{1} + std::exp(-v));
        } else {
          const T e = std::exp(v);
          out[i] = e / (T{1} + e);
        }
      }
      return make_result<T>(std::move(out), {input}, [](Node<T>& self) {
        T* dx = self.parents[0]->grad_buffer().data();
        for (std::size_t i = 0; i < self.value.size(); ++i) {
          const T y = self.value[i];
          dx[i] += self.grad[i] * y * (T{1} - y);
        }
      });
    }
    case Activation::kSoftmaxRows: {
      if (x.rank() != 2) shape_error("softmax_rows", "input must be rank 2, got " + shape_str(x.shape()));
      const int rows = x.dim(0);
      const int cols = x.dim(1);
      for (int r = 0; r < rows; ++r) {
        const T* in = x.data() + static_cast<std::size_t>(r) * cols;
        T* o = out.data() + static_cast<std::size_t>(r) * cols;
        const T mx = *std::max_element(in, in + cols);
        double total = 0.0;
        for (int c = 0; c < cols; ++c) total += std::exp(static_cast<double>(in[c] - mx));
        for (int c = 0; c < cols; ++c) {
          o[c] = static_cast<T>(std::exp(static_cast<double>(in[c] - mx)) / total);
        }
      }
      return make_result<T>(std::move(out), {input}, [rows, cols](Node<T>& self) {
        T* dx = self.parents[0]->grad_buffer().data();
        for (int r = 0; r < rows; ++r) {
          const std::size_t base = static_cast<std::size_t>(r) * cols;
          double dot = 0.0;
          for (int c = 0; c < cols; ++c) {
            dot += static_cast<double>(self.grad[base + c]) * self.value[base + c];
          }
          for (int c = 0; c < cols; ++c) {
            dx[base + c] += static_cast<T>(self.value[base + c] * (self.grad[base + c] - dot));
          }
        }
      });
    }
  }
  shape_error("activation", "unknown mode");
}

// ------------------------------------------------------ elementwise/shape

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) {
    shape_error("add", "shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    for (const auto& p : self.parents) {
      if (!wants_grad(p)) continue;
      T* d = p->grad_buffer().data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, double factor) {
  Tensor<T> out = a.value();
  const T f = static_cast<T>(factor);
  for (auto& v : out.values()) v *= f;
  return make_result<T>(std::move(out), {a}, [f](Node<T>& self) {
    T* d = self.parents[0]->grad_buffer().data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += f * self.grad[i];
  });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  double acc = 0.0;
  for (T v : a.value().values()) acc += v;
  return make_result<T>(Tensor<T>({1}, static_cast<T>(acc)), {a}, [](Node<T>& self) {
    T* d = self.parents[0]->grad_buffer().data();
    const T g = self.grad[0];
    for (std::size_t i = 0; i < self.parents[0]->value.size(); ++i) d[i] += g;
  });
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  return make_result<T>(std::move(out), {a}, [](Node<T>& self) {
    T* d = self.parents[0]->grad_buffer().data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i];
  });
}

template <typename T>
Var<T> gather(const Var<T>& a, std::vector<std::int64_t> indices, Shape shape) {
  if (shape_size(shape) != indices.size()) {
    shape_error("gather", std::to_string(indices.size()) + " indices cannot fill shape " + shape_str(shape));
  }
  const auto n = static_cast<std::int64_t>(a.value().size());
  Tensor<T> out(std::move(shape));
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= n) {
      shape_error("gather", "index " + std::to_string(indices[i]) + " out of range for " +
                                shape_str(a.shape()));
    }
    out[i] = a.value()[static_cast<std::size_t>(indices[i])];
  }
  auto idx = std::make_shared<std::vector<std::int64_t>>(std::move(indices));
  return make_result<T>(std::move(out), {a}, [idx](Node<T>& self) {
    T* d = self.parents[0]->grad_buffer().data();
    for (std::size_t i = 0; i < idx->size(); ++i) d[(*idx)[i]] += self.grad[i];
  });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) shape_error("concat_rows", "no inputs");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  int rows = 0;
  for (const auto& p : parts) {
    Shape pt(p.shape().begin() + 1, p.shape().end());
    if (p.shape().empty() || pt != tail) {
      shape_error("concat_rows", "trailing extents differ: " + shape_str(p.shape()) + " vs " +
                                     shape_str(parts[0].shape()));
    }
    rows += p.shape()[0];
  }
  Shape os = parts[0].shape();
  os[0] = rows;
  Tensor<T> out(os);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data(), p.value().data() + p.value().size(), out.data() + offset);
    offset += p.value().size();
  }
  return make_result<T>(std::move(out), parts, [](Node<T>& self) {
    std::size_t off = 0;
    for (const auto& p : self.parents) {
      const std::size_t n = p->value.size();
      if (wants_grad(p)) {
        T* d = p->grad_buffer().data();
        for (std::size_t i = 0; i < n; ++i) d[i] += self.grad[off + i];
      }
      off += n;
    }
  });
}

template <typename T>
Var<T> anchor_rows(const Var<T>& map, int group) {
  const Shape& s = map.shape();
  if (s.size() != 3 || group < 1 || s[0] % group != 0) {
    shape_error("anchor_rows", "map " + shape_str(s) + " is not divisible into groups of " +
                                   std::to_string(group));
  }
  const int per_cell = s[0] / group;
  const int h = s[1];
  const int w = s[2];
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Tensor<T> out({static_cast<int>(plane) * per_cell, group});
  const T* x = map.value().data();
  for (std::size_t cell = 0; cell < plane; ++cell) {
    for (int a = 0; a < per_cell; ++a) {
      for (int g = 0; g < group; ++g) {
        out[(cell * per_cell + a) * group + g] = x[static_cast<std::size_t>(a * group + g) * plane + cell];
      }
    }
  }
  return make_result<T>(std::move(out), {map}, [=](Node<T>& self) {
    T* d = self.parents[0]->grad_buffer().data();
    for (std::size_t cell = 0; cell < plane; ++cell) {
      for (int a = 0; a < per_cell; ++a) {
        for (int g = 0; g < group; ++g) {
          d[static_cast<std::size_t>(a * group + g) * plane + cell] +=
              self.grad[(cell * per_cell + a) * group + g];
        }
      }
    }
  });
}

template <typename T>
Var<T> frozen_affine(const Var<T>& x, const Tensor<T>& scale_t, const Tensor<T>& shift_t) {
  const Shape& s = x.shape();
  if (s.size() != 3 && s.size() != 4) {
    shape_error("frozen_affine", "input must be rank 3 or 4, got " + shape_str(s));
  }
  const int ch_axis = s.size() == 4 ? 1 : 0;
  const int channels = s[ch_axis];
  if (scale_t.size() != static_cast<std::size_t>(channels) || shift_t.size() != scale_t.size()) {
    shape_error("frozen_affine", "coefficients do not match " + std::to_string(channels) + " channels");
  }
  const bool identity =
      std::all_of(scale_t.values().begin(), scale_t.values().end(), [](T v) { return v == T{1}; }) &&
      std::all_of(shift_t.values().begin(), shift_t.values().end(), [](T v) { return v == T{0}; });
  if (identity) return x;

  const std::size_t plane = static_cast<std::size_t>(s[s.size() - 2]) * s[s.size() - 1];
  const int batch = s.size() == 4 ? s[0] : 1;
  Tensor<T> out = x.value();
  for (int n = 0; n < batch; ++n) {
    for (int c = 0; c < channels; ++c) {
      T* p = out.data() + (static_cast<std::size_t>(n) * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) p[i] = p[i] * scale_t[c] + shift_t[c];
    }
  }
  Tensor<T> sc = scale_t;
  return make_result<T>(std::move(out), {x}, [sc, batch, channels, plane](Node<T>& self) {
    T* d = self.parents[0]->grad_buffer().data();
    for (int n = 0; n < batch; ++n) {
      for (int c = 0; c < channels; ++c) {
        const std::size_t base = (static_cast<std::size_t>(n) * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) d[base + i] += self.grad[base + i] * sc[c];
      }
    }
  });
}

// ---------------------------------------------------------------- losses

template <typename T>
Var<T> cross_entropy(const Var<T>& probs, std::span<const int> labels, double normalizer) {
  const Shape& s = probs.shape();
  if (s.size() != 2 || static_cast<std::size_t>(s[0]) != labels.size()) {
    shape_error("cross_entropy", "probabilities " + shape_str(s) + " do not match " +
                                     std::to_string(labels.size()) + " labels");
  }
  if (!(normalizer > 0.0)) shape_error("cross_entropy", "normalizer must be positive");
  constexpr double kFloor = 1e-12;
  const int cols = s[1];
  double acc = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= cols) shape_error("cross_entropy", "label out of range");
    const double p = probs.value()[i * cols + labels[i]];
    acc -= std::log(std::max(p, kFloor));
  }
  std::vector<int> lab(labels.begin(), labels.end());
  return make_result<T>(Tensor<T>({1}, static_cast<T>(acc / normalizer)), {probs},
                        [lab, cols, normalizer](Node<T>& self) {
                          T* d = self.parents[0]->grad_buffer().data();
                          const Tensor<T>& p = self.parents[0]->value;
                          const double g = self.grad[0] / normalizer;
                          for (std::size_t i = 0; i < lab.size(); ++i) {
                            const std::size_t idx = i * cols + lab[i];
                            if (p[idx] > kFloor) d[idx] -= static_cast<T>(g / p[idx]);
                          }
                        });
}

template <typename T>
Var<T> smooth_l1(const Var<T>& pred, const Tensor<T>& target, double normalizer) {
  if (pred.shape() != target.shape()) {
    shape_error("smooth_l1", "prediction " + shape_str(pred.shape()) + " vs target " +
                                 shape_str(target.shape()));
  }
  if (!(normalizer > 0.0)) shape_error("smooth_l1", "normalizer must be positive");
  double acc = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double x = static_cast<double>(pred.value()[i]) - target[i];
    const double ax = std::abs(x);
    acc += ax < 1.0 ? 0.5 * x * x : ax - 0.5;
  }
  Tensor<T> tgt = target;
  return make_result<T>(Tensor<T>({1}, static_cast<T>(acc / normalizer)), {pred},
                        [tgt, normalizer](Node<T>& self) {
                          T* d = self.parents[0]->grad_buffer().data();
                          const Tensor<T>& p = self.parents[0]->value;
                          const double g = self.grad[0] / normalizer;
                          for (std::size_t i = 0; i < tgt.size(); ++i) {
                            const double x = static_cast<double>(p[i]) - tgt[i];
                            d[i] += static_cast<T>(g * std::clamp(x, -1.0, 1.0));
                          }
                        });
}

template <typename T>
Var<T> binary_cross_entropy(const Var<T>& probs, const Tensor<T>& target) {
  if (probs.shape() != target.shape()) {
    shape_error("binary_cross_entropy", "prediction " + shape_str(probs.shape()) + " vs target " +
                                            shape_str(target.shape()));
  }
  if (target.empty()) shape_error("binary_cross_entropy", "empty input");
  constexpr double kFloor = 1e-12;
  double acc = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double p = probs.value()[i];
    const double t = target[i];
    if (t > 0.0) acc -= t * std::log(std::max(p, kFloor));
    if (t < 1.0) acc -= (1.0 - t) * std::log(std::max(1.0 - p, kFloor));
  }
  const double count = static_cast<double>(target.size());
  Tensor<T> tgt = target;
  return make_result<T>(Tensor<T>({1}, static_cast<T>(acc / count)), {probs},
                        [tgt, count](Node<T>& self) {
                          T* d = self.parents[0]->grad_buffer().data();
                          const Tensor<T>& pv = self.parents[0]->value;
                          const double g = self.grad[0] / count;
                          for (std::size_t i = 0; i < tgt.size(); ++i) {
                            const double p = pv[i];
                            const double t = tgt[i];
                            double dp = 0.0;
                            if (t > 0.0 && p > kFloor) dp -= t / p;
                            if (t < 1.0 && 1.0 - p > kFloor) dp += (1.0 - t) / (1.0 - p);
                            d[i] += static_cast<T>(g * dp);
                          }
                        });
}

#define BRAINSEG_INSTANTIATE_OPS(T)                                                        \
  template void backward<T>(const Var<T>&);                                                \
  template Var<T> conv2d<T>(const Var<T>&, const Var<T>&, const Var<T>&, int, int);        \
  template Var<T> resample2d<T>(const Var<T>&, ResampleMode);                              \
  template Var<T> dense<T>(const Var<T>&, const Var<T>&, const Var<T>&);                   \
  template Var<T> activation<T>(const Var<T>&, Activation);                                \
  template Var<T> add<T>(const Var<T>&, const Var<T>&);                                    \
  template Var<T> scale<T>(const Var<T>&, double);                                         \
  template Var<T> sum<T>(const Var<T>&);                                                   \
  template Var<T> reshape<T>(const Var<T>&, Shape);                                        \
  template Var<T> gather<T>(const Var<T>&, std::vector<std::int64_t>, Shape);              \
  template Var<T> concat_rows<T>(const std::vector<Var<T>>&);                              \
  template Var<T> anchor_rows<T>(const Var<T>&, int);                                      \
  template Var<T> frozen_affine<T>(const Var<T>&, const Tensor<T>&, const Tensor<T>&);     \
  template Var<T> cross_entropy<T>(const Var<T>&, std::span<const int>, double);           \
  template Var<T> smooth_l1<T>(const Var<T>&, const Tensor<T>&, double);                   \
  template Var<T> binary_cross_entropy<T>(const Var<T>&, const Tensor<T>&);

BRAINSEG_INSTANTIATE_OPS(float)
BRAINSEG_INSTANTIATE_OPS(double)

}  // namespace brainseg::nn
