#include "metadcseg/diffcore.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>

namespace metadcseg::diff {

namespace {

std::atomic<std::size_t> g_current_bytes{0};
std::atomic<std::size_t> g_peak_bytes{0};

template <typename Real>
std::size_t first_non_finite(const std::vector<Real>& v) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) return i;
  }
  return v.size();
}

}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ShapeError("negative dimension in " + to_string(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string to_string(const Shape& shape) {
  std::string s = "{";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "}";
}

NumericFault::NumericFault(std::string op, std::size_t index)
    : std::runtime_error("non-finite value in op '" + op + "' at index " + std::to_string(index)),
      op_(std::move(op)),
      index_(index) {}

const Segment& ParamVector::add(std::string name, Shape shape) {
  for (const auto& s : segments_) {
    if (s.name == name) throw std::invalid_argument("duplicate segment " + name);
  }
  Segment seg{std::move(name), std::move(shape), values_.size(), 0};
  seg.size = numel(seg.shape);
  values_.resize(values_.size() + seg.size, 0.0);
  segments_.push_back(std::move(seg));
  return segments_.back();
}

const Segment& ParamVector::segment(std::string_view name) const {
  for (const auto& s : segments_) {
    if (s.name == name) return s;
  }
  throw std::out_of_range("no parameter segment named " + std::string(name));
}

bool ParamVector::same_layout(const ParamVector& other) const {
  if (segments_.size() != other.segments_.size()) return false;
  for (std::size_t i = 0; i < segments_.size(); ++i) {
    const auto& a = segments_[i];
    const auto& b = other.segments_[i];
    if (a.name != b.name || a.shape != b.shape || a.offset != b.offset) return false;
  }
  return values_.size() == other.values_.size();
}

std::size_t ArenaStats::current_bytes() { return g_current_bytes.load(); }
std::size_t ArenaStats::peak_bytes() { return g_peak_bytes.load(); }
void ArenaStats::reset_peak() { g_peak_bytes.store(g_current_bytes.load()); }

// --- Tape ---------------------------------------------------------------------

template <typename Real>
Tape<Real>::~Tape() {
  g_current_bytes.fetch_sub(bytes_);
}

template <typename Real>
void Tape<Real>::account(std::ptrdiff_t bytes) {
  bytes_ = static_cast<std::size_t>(static_cast<std::ptrdiff_t>(bytes_) + bytes);
  const std::size_t now =
      static_cast<std::size_t>(static_cast<std::ptrdiff_t>(g_current_bytes.fetch_add(bytes)) + bytes);
  std::size_t peak = g_peak_bytes.load();
  while (now > peak && !g_peak_bytes.compare_exchange_weak(peak, now)) {
  }
}

template <typename Real>
std::size_t Tape<Real>::check(Var v) const {
  if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
    throw std::out_of_range("invalid tape variable");
  }
  return static_cast<std::size_t>(v.id);
}

template <typename Real>
Var Tape<Real>::constant(Shape shape, Buffer value) {
  return record("constant", std::move(shape), std::move(value), {}, nullptr, nullptr);
}

template <typename Real>
Var Tape<Real>::variable(Shape shape, Buffer value) {
  Var v = record("variable", std::move(shape), std::move(value), {}, nullptr, nullptr);
  nodes_.back().requires_grad = true;
  nodes_.back().is_variable = true;
  return v;
}

template <typename Real>
Var Tape<Real>::record(std::string_view op, Shape shape, Buffer value, std::vector<Var> inputs,
                       Hook backward, Hook jvp) {
  if (numel(shape) != value.size()) {
    throw ShapeError(std::string(op) + ": value size " + std::to_string(value.size()) +
                     " does not match shape " + to_string(shape));
  }
  if (const auto bad = first_non_finite(value); bad != value.size()) {
    throw NumericFault(std::string(op), bad);
  }
  Node n;
  n.op = op;
  n.shape = std::move(shape);
  n.value = std::move(value);
  n.inputs = std::move(inputs);
  for (Var in : n.inputs) {
    check(in);
    n.requires_grad = n.requires_grad || nodes_[static_cast<std::size_t>(in.id)].requires_grad;
  }
  n.backward = std::move(backward);
  n.jvp = std::move(jvp);
  account(static_cast<std::ptrdiff_t>(n.value.size() * sizeof(Real)));
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size() - 1)};
}

template <typename Real>
Real Tape<Real>::scalar(Var v) const {
  const auto& n = nodes_[check(v)];
  if (n.value.size() != 1) throw ShapeError("scalar(): node has shape " + to_string(n.shape));
  return n.value[0];
}

template <typename Real>
typename Tape<Real>::Buffer Tape<Real>::grad(Var v) const {
  const auto& n = nodes_[check(v)];
  return n.grad.empty() ? Buffer(n.value.size(), Real(0)) : n.grad;
}

template <typename Real>
typename Tape<Real>::Buffer Tape<Real>::tangent(Var v) const {
  const auto& n = nodes_[check(v)];
  return n.tangent.empty() ? Buffer(n.value.size(), Real(0)) : n.tangent;
}

template <typename Real>
const Real* Tape<Real>::grad_ptr(int id) const {
  const auto& n = nodes_[static_cast<std::size_t>(id)];
  return n.grad.empty() ? nullptr : n.grad.data();
}

template <typename Real>
Real* Tape<Real>::grad_acc(Var v) {
  auto& n = nodes_[check(v)];
  if (!n.requires_grad) return nullptr;
  if (n.grad.empty()) {
    n.grad.assign(n.value.size(), Real(0));
    account(static_cast<std::ptrdiff_t>(n.grad.size() * sizeof(Real)));
  }
  return n.grad.data();
}

template <typename Real>
const Real* Tape<Real>::tangent_ptr(Var v) const {
  const auto& n = nodes_[check(v)];
  return n.tangent.empty() ? nullptr : n.tangent.data();
}

template <typename Real>
Real* Tape<Real>::tangent_out(int id) {
  auto& n = nodes_[static_cast<std::size_t>(id)];
  if (n.tangent.empty()) {
    n.tangent.assign(n.value.size(), Real(0));
    account(static_cast<std::ptrdiff_t>(n.tangent.size() * sizeof(Real)));
  }
  return n.tangent.data();
}

template <typename Real>
void Tape<Real>::zero_grads() {
  for (auto& n : nodes_) {
    account(-static_cast<std::ptrdiff_t>(n.grad.size() * sizeof(Real)));
    Buffer().swap(n.grad);
  }
}

template <typename Real>
void Tape<Real>::backward(Var output) {
  const auto& n = nodes_[check(output)];
  if (n.value.size() != 1) throw ShapeError("backward(Var): output must have one element");
  const Seed seed{output, Buffer{Real(1)}};
  backward(std::span<const Seed>(&seed, 1));
}

template <typename Real>
void Tape<Real>::backward(std::span<const Seed> seeds) {
  zero_grads();
  for (const auto& s : seeds) {
    Real* g = grad_acc(s.var);
    if (!g) continue;
    if (s.values.size() != nodes_[check(s.var)].value.size()) {
      throw ShapeError("backward: seed size mismatch");
    }
    for (std::size_t i = 0; i < s.values.size(); ++i) g[i] += s.values[i];
  }
  run_backward();
}

template <typename Real>
void Tape<Real>::run_backward() {
  visits_ = 0;
  for (std::size_t k = nodes_.size(); k-- > 0;) {
    Node& n = nodes_[k];
    if (n.grad.empty() || !n.backward) continue;
    if (const auto bad = first_non_finite(n.grad); bad != n.grad.size()) {
      throw NumericFault(std::string(n.op) + ":grad", bad);
    }
    ++visits_;
    n.backward(*this, static_cast<int>(k));
  }
  for (auto& n : nodes_) {
    if (n.is_variable && !n.grad.empty()) {
      if (const auto bad = first_non_finite(n.grad); bad != n.grad.size()) {
        throw NumericFault("variable:grad", bad);
      }
    }
  }
}

template <typename Real>
void Tape<Real>::forward_tangents(std::span<const Seed> seeds) {
  for (auto& n : nodes_) {
    account(-static_cast<std::ptrdiff_t>(n.tangent.size() * sizeof(Real)));
    Buffer().swap(n.tangent);
  }
  for (const auto& s : seeds) {
    auto& n = nodes_[check(s.var)];
    if (!n.is_variable) throw std::invalid_argument("forward_tangents: seeds must be variables");
    if (s.values.size() != n.value.size()) throw ShapeError("forward_tangents: seed size mismatch");
    Real* t = tangent_out(s.var.id);
    std::copy(s.values.begin(), s.values.end(), t);
  }
  for (std::size_t k = 0; k < nodes_.size(); ++k) {
    Node& n = nodes_[k];
    if (!n.jvp) continue;
    bool any = false;
    for (Var in : n.inputs) any = any || !nodes_[static_cast<std::size_t>(in.id)].tangent.empty();
    if (!any) continue;
    n.jvp(*this, static_cast<int>(k));
    if (const auto bad = first_non_finite(nodes_[k].tangent); bad != nodes_[k].tangent.size()) {
      throw NumericFault(std::string(nodes_[k].op) + ":tangent", bad);
    }
  }
}

template class Tape<float>;
template class Tape<double>;

// --- ops ----------------------------------------------------------------------

namespace {

template <typename Real>
void require_rank(const Tape<Real>& t, Var v, std::size_t rank, const char* op) {
  if (t.shape(v).size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     to_string(t.shape(v)));
  }
}

template <typename Real>
void require_same(const Tape<Real>& t, Var a, Var b, const char* op) {
  if (t.shape(a) != t.shape(b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(t.shape(a)) + " vs " +
                     to_string(t.shape(b)));
  }
}

// out += conv(in, w); in {H,W,Ci}, w {3,3,Ci,Co}, out {H,W,Co}.
template <typename Real>
void conv3x3_accumulate(const Real* in, const Real* w, Real* out, int H, int W, int Ci, int Co) {
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      Real* op = out + (static_cast<std::size_t>(y) * W + x) * Co;
      for (int ky = 0; ky < 3; ++ky) {
        const int yy = y + ky - 1;
        if (yy < 0 || yy >= H) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int xx = x + kx - 1;
          if (xx < 0 || xx >= W) continue;
          const Real* ip = in + (static_cast<std::size_t>(yy) * W + xx) * Ci;
          const Real* wk = w + static_cast<std::size_t>(ky * 3 + kx) * Ci * Co;
          for (int i = 0; i < Ci; ++i) {
            const Real a = ip[i];
            if (a == Real(0)) continue;
            const Real* wr = wk + static_cast<std::size_t>(i) * Co;
            for (int o = 0; o < Co; ++o) op[o] += a * wr[o];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename Real>
Var slice(Tape<Real>& t, Var x, std::size_t offset, Shape shape) {
  const std::size_t n = numel(shape);
  const auto& xv = t.value(x);
  if (offset + n > xv.size()) throw ShapeError("slice: out of range");
  typename Tape<Real>::Buffer out(xv.begin() + static_cast<std::ptrdiff_t>(offset),
                                  xv.begin() + static_cast<std::ptrdiff_t>(offset + n));
  return t.record(
      "slice", std::move(shape), std::move(out), {x},
      [x, offset, n](Tape<Real>& tp, int self) {
        const Real* g = tp.grad_ptr(self);
        if (Real* gx = tp.grad_acc(x)) {
          for (std::size_t i = 0; i < n; ++i) gx[offset + i] += g[i];
        }
      },
      [x, offset, n](Tape<Real>& tp, int self) {
        const Real* tx = tp.tangent_ptr(x);
        Real* to = tp.tangent_out(self);
        for (std::size_t i = 0; i < n; ++i) to[i] = tx[offset + i];
      });
}

template <typename Real>
Var conv3x3(Tape<Real>& t, Var x, Var w) {
  require_rank(t, x, 3, "conv3x3");
  require_rank(t, w, 4, "conv3x3");
  const Shape xs = t.shape(x);
  const Shape ws = t.shape(w);
  const int H = xs[0], W = xs[1], Ci = xs[2];
  if (ws[0] != 3 || ws[1] != 3 || ws[2] != Ci) {
    throw ShapeError("conv3x3: weight " + to_string(ws) + " incompatible with input " + to_string(xs));
  }
  const int Co = ws[3];
  typename Tape<Real>::Buffer out(static_cast<std::size_t>(H) * W * Co, Real(0));
  conv3x3_accumulate(t.value(x).data(), t.value(w).data(), out.data(), H, W, Ci, Co);
  return t.record(
      "conv3x3", {H, W, Co}, std::move(out), {x, w},
      [=](Tape<Real>& tp, int self) {
        const Real* g = tp.grad_ptr(self);
        const Real* in = tp.value(x).data();
        const Real* wt = tp.value(w).data();
        Real* gin = tp.grad_acc(x);
        Real* gw = tp.grad_acc(w);
        for (int y = 0; y < H; ++y) {
          for (int xq = 0; xq < W; ++xq) {
            const Real* gp = g + (static_cast<std::size_t>(y) * W + xq) * Co;
            for (int ky = 0; ky < 3; ++ky) {
              const int yy = y + ky - 1;
              if (yy < 0 || yy >= H) continue;
              for (int kx = 0; kx < 3; ++kx) {
                const int xx = xq + kx - 1;
                if (xx < 0 || xx >= W) continue;
                const std::size_t ipos = (static_cast<std::size_t>(yy) * W + xx) * Ci;
                const std::size_t kpos = static_cast<std::size_t>(ky * 3 + kx) * Ci * Co;
                for (int i = 0; i < Ci; ++i) {
                  const std::size_t row = kpos + static_cast<std::size_t>(i) * Co;
                  if (gw) {
                    const Real a = in[ipos + i];
                    if (a != Real(0)) {
                      Real* gwr = gw + row;
                      for (int o = 0; o < Co; ++o) gwr[o] += a * gp[o];
                    }
                  }
                  if (gin) {
                    const Real* wr = wt + row;
                    Real s = 0;
                    for (int o = 0; o < Co; ++o) s += gp[o] * wr[o];
                    gin[ipos + i] += s;
                  }
                }
              }
            }
          }
        }
      },
      [=](Tape<Real>& tp, int self) {
        Real* to = tp.tangent_out(self);
        if (const Real* tx = tp.tangent_ptr(x)) {
          conv3x3_accumulate(tx, tp.value(w).data(), to, H, W, Ci, Co);
        }
        if (const Real* tw = tp.tangent_ptr(w)) {
          conv3x3_accumulate(tp.value(x).data(), tw, to, H, W, Ci, Co);
        }
      });
}

template <typename Real>
Var bias_add(Tape<Real>& t, Var x, Var b) {
  require_rank(t, b, 1, "bias_add");
  const int C = t.shape(b)[0];
  if (t.shape(x).empty() || t.shape(x).back() != C) throw ShapeError("bias_add: channel mismatch");
  auto out = t.value(x);
  const auto& bv = t.value(b);
  const std::size_t pixels = out.size() / static_cast<std::size_t>(C);
  for (std::size_t p = 0; p < pixels; ++p) {
    for (int c = 0; c < C; ++c) out[p * C + c] += bv[c];
  }
  return t.record(
      "bias_add", t.shape(x), std::move(out), {x, b},
      [=](Tape<Real>& tp, int self) {
        const Real* g = tp.grad_ptr(self);
        if (Real* gx = tp.grad_acc(x)) {
          for (std::size_t i = 0; i < pixels * C; ++i) gx[i] += g[i];
        }
        if (Real* gb = tp.grad_acc(b)) {
          for (std::size_t p = 0; p < pixels; ++p) {
            for (int c = 0; c < C; ++c) gb[c] += g[p * C + c];
          }
        }
      },
      [=](Tape<Real>& tp, int self) {
        Real* to = tp.tangent_out(self);
        if (const Real* tx = tp.tangent_ptr(x)) {
          for (std::size_t i = 0; i < pixels * C; ++i) to[i] += tx[i];
        }
        if (const Real* tb = tp.tangent_ptr(b)) {
          for (std::size_t p = 0; p < pixels; ++p) {
            for (int c = 0; c < C; ++c) to[p * C + c] += tb[c];
          }
        }
      });
}

template <typename Real>
Var relu(Tape<Real>& t, Var x) {
  auto out = t.value(x);
  for (auto& v : out) v = v > Real(0) ? v : Real(0);
  const std::size_t n = out.size();
  return t.record(
      "relu", t.shape(x), std::move(out), {x},
      [x, n](Tape<Real>& tp, int self) {
        const Real* g = tp.grad_ptr(self);
        const Real* in = tp.value(x).data();
        if (Real* gx = tp.grad_acc(x)) {
          for (std::size_t i = 0; i < n; ++i) {
            if (in[i] > Real(0)) gx[i] += g[i];
          }
        }
      },
      [x, n](Tape<Real>& tp, int self) {
        const Real* tx = tp.tangent_ptr(x);
        const Real* in = tp.value(x).data();
        Real* to = tp.tangent_out(self);
        for (std::size_t i = 0; i < n; ++i) to[i] = in[i] > Real(0) ? tx[i] : Real(0);
      });
}

template <typename Real>
Var downsample2(Tape<Real>& t, Var x) {
  require_rank(t, x, 3, "downsample2");
  const Shape xs = t.shape(x);
  const int H = xs[0], W = xs[1], C = xs[2];
  if (H % 2 || W % 2) throw ShapeError("downsample2: odd spatial size " + to_string(xs));
  const int h = H / 2, w = W / 2;
  const auto& in = t.value(x);
  typename Tape<Real>::Buffer out(static_cast<std::size_t>(h) * w * C);
  auto src = [=](int y, int xq, int c) {
    return (static_cast<std::size_t>(2 * y) * W + 2 * xq) * C + c;
  };
  for (int y = 0; y < h; ++y)
    for (int xq = 0; xq < w; ++xq)
      for (int c = 0; c < C; ++c) out[(static_cast<std::size_t>(y) * w + xq) * C + c] = in[src(y, xq, c)];
  return t.record(
      "downsample2", {h, w, C}, std::move(out), {x},
      [=](Tape<Real>& tp, int self) {
        const Real* g = tp.grad_ptr(self);
        if (Real* gx = tp.grad_acc(x)) {
          for (int y = 0; y < h; ++y)
            for (int xq = 0; xq < w; ++xq)
              for (int c = 0; c < C; ++c) gx[src(y, xq, c)] += g[(static_cast<std::size_t>(y) * w + xq) * C + c];
        }
      },
      [=](Tape<Real>& tp, int self) {
        const Real* tx = tp.tangent_ptr(x);
        Real* to = tp.tangent_out(self);
        for (int y = 0; y < h; ++y)
          for (int xq = 0; xq < w; ++xq)
            for (int c = 0; c < C; ++c) to[(static_cast<std::size_t>(y) * w + xq) * C + c] = tx[src(y, xq, c)];
      });
}

template <typename Real>
Var upsample2(Tape<Real>& t, Var x) {
  require_rank(t, x, 3, "upsample2");
  const Shape xs = t.shape(x);
  const int h = xs[0], w = xs[1], C = xs[2];
  const int H = 2 * h, W = 2 * w;
  const auto& in = t.value(x);
  typename Tape<Real>::Buffer out(static_cast<std::size_t>(H) * W * C);
  auto src = [=](int y, int xq, int c) {
    return (static_cast<std::size_t>(y / 2) * w + xq / 2) * C + c;
  };
  for (int y = 0; y < H; ++y)
    for (int xq = 0; xq < W; ++xq)
      for (int c = 0; c < C; ++c) out[(static_cast<std::size_t>(y) * W + xq) * C + c] = in[src(y, xq, c)];
  return t.record(
      "upsample2", {H, W, C}, std::move(out), {x},
      [=](Tape<Real>& tp, int self) {
        const Real* g = tp.grad_ptr(self);
        if (Real* gx = tp.grad_acc(x)) {
          for (int y = 0; y < H; ++y)
            for (int xq = 0; xq < W; ++xq)
              for (int c = 0; c < C; ++c) gx[src(y, xq, c)] += g[(static_cast<std::size_t>(y) * W + xq) * C + c];
        }
      },
      [=](Tape<Real>& tp, int self) {
        const Real* tx = tp.tangent_ptr(x);
        Real* to = tp.tangent_out(self);
        for (int y = 0; y < H; ++y)
          for (int xq = 0; xq < W; ++xq)
            for (int c = 0; c < C; ++c) to[(static_cast<std::size_t>(y) * W + xq) * C + c] = tx[src(y, xq, c)];
      });
}

template <typename Real>
Var pixel_affine(Tape<Real>& t, Var x, Var w, Var b) {
  require_rank(t, w, 2, "pixel_affine");
  require_rank(t, b, 1, "pixel_affine");
  const Shape xs = t.shape(x);
  const int D = t.shape(w)[0], L = t.shape(w)[1];
  if (xs.empty() || xs.back() != D || t.shape(b)[0] != L) {
    throw ShapeError("pixel_affine: incompatible shapes " + to_string(xs) + " " + to_string(t.shape(w)));
  }
  const std::size_t P = t.value(x).size() / static_cast<std::size_t>(D);
  Shape os = xs;
  os.back() = L;
  const auto& in = t.value(x);
  const auto& wv = t.value(w);
  const auto& bv = t.value(b);
  typename Tape<Real>::Buffer out(P * L);
  for (std::size_t p = 0; p < P; ++p) {
    for (int l = 0; l < L; ++l) {
      Real s = bv[l];
      for (int d = 0; d < D; ++d) s += in[p * D + d] * wv[static_cast<std::size_t>(d) * L + l];
      out[p * L + l] = s;
    }
  }
  return t.record(
      "pixel_affine", std::move(os), std::move(out), {x, w, b},
      [=](Tape<Real>& tp, int self) {
        const Real* g = tp.grad_ptr(self);
        const Real* iv = tp.value(x).data();
        const Real* wt = tp.value(w).data();
        Real* gx = tp.grad_acc(x);
        Real* gw = tp.grad_acc(w);
        Real* gb = tp.grad_acc(b);
        for (std::size_t p = 0; p < P; ++p) {
          for (int l = 0; l < L; ++l) {
            const Real gl = g[p * L + l];
            if (gb) gb[l] += gl;
            for (int d = 0; d < D; ++d) {
              if (gx) gx[p * D + d] += gl * wt[static_cast<std::size_t>(d) * L + l];
              if (gw) gw[static_cast<std::size_t>(d) * L + l] += gl * iv[p * D + d];
            }
          }
        }
      },
      [=](Tape<Real>& tp, int self) {
        Real* to = tp.tangent_out(self);
        const Real* iv = tp.value(x).data();
        const Real* wt = tp.value(w).data();
        const Real* tx = tp.tangent_ptr(x);
        const Real* tw = tp.tangent_ptr(w);
        const Real* tb = tp.tangent_ptr(b);
        for (std::size_t p = 0; p < P; ++p) {
          for (int l = 0; l < L; ++l) {
            Real s = tb ? tb[l] : Real(0);
            for (int d = 0; d < D; ++d) {
              const std::size_t wi = static_cast<std::size_t>(d) * L + l;
              if (tx) s += tx[p * D + d] * wt[wi];
              if (tw) s += iv[p * D + d] * tw[wi];
            }
            to[p * L + l] = s;
          }
        }
      });
}

namespace {

template <typename Real>
void softmax_row(const Real* z, Real* p, int L) {
  Real m = z[0];
  for (int l = 1; l < L; ++l) m = std::max(m, z[l]);
  Real s = 0;
  for (int l = 0; l < L; ++l) {
    p[l] = std::exp(z[l] - m);
    s += p[l];
  }
  for (int l = 0; l < L; ++l) p[l] /= s;
}

}  // namespace

template <typename Real>
Var softmax(Tape<Real>& t, Var logits) {
  const Shape zs = t.shape(logits);
  if (zs.empty()) throw ShapeError("softmax: scalar input");
  const int L = zs.back();
  const auto& z = t.value(logits);
  const std::size_t P = z.size() / static_cast<std::size_t>(L);
  typename Tape<Real>::Buffer p(z.size());
  for (std::size_t i = 0; i < P; ++i) softmax_row(z.data() + i * L, p.data() + i * L, L);
  return t.record(
      "softmax", zs, std::move(p), {logits},
      [=](Tape<Real>& tp, int self) {
        const Real* g = tp.grad_ptr(self);
        const Real* pv = tp.value(Var{self}).data();
        if (Real* gz = tp.grad_acc(logits)) {
          for (std::size_t i = 0; i < P; ++i) {
            Real dot = 0;
            for (int l = 0; l < L; ++l) dot += g[i * L + l] * pv[i * L + l];
            for (int l = 0; l < L; ++l) gz[i * L + l] += pv[i * L + l] * (g[i * L + l] - dot);
          }
        }
      },
      [=](Tape<Real>& tp, int self) {
        const Real* tz = tp.tangent_ptr(logits);
        const Real* pv = tp.value(Var{self}).data();
        Real* to = tp.tangent_out(self);
        for (std::size_t i = 0; i < P; ++i) {
          Real dot = 0;
          for (int l = 0; l < L; ++l) dot += tz[i * L + l] * pv[i * L + l];
          for (int l = 0; l < L; ++l) to[i * L + l] = pv[i * L + l] * (tz[i * L + l] - dot);
        }
      });
}

template <typename Real>
Var cross_entropy(Tape<Real>& t, Var logits, std::span<const int> labels) {
  const Shape zs = t.shape(logits);
  if (zs.size() < 2) throw ShapeError("cross_entropy: expected {..., L} logits");
  const int L = zs.back();
  const auto& z = t.value(logits);
  const std::size_t P = z.size() / static_cast<std::size_t>(L);
  if (labels.size() != P) throw ShapeError("cross_entropy: label count does not match pixels");
  std::vector<int> lab(labels.begin(), labels.end());
  for (std::size_t i = 0; i < P; ++i) {
    if (lab[i] < 0 || lab[i] >= L) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(lab[i]) + " at pixel " +
                              std::to_string(i) + " outside [0," + std::to_string(L) + ")");
    }
  }
  // Softmax cached for the adjoints.
  auto probs = std::make_shared<std::vector<Real>>(z.size());
  typename Tape<Real>::Buffer out(P);
  for (std::size_t i = 0; i < P; ++i) {
    const Real* zr = z.data() + i * L;
    Real m = zr[0];
    for (int l = 1; l < L; ++l) m = std::max(m, zr[l]);
    Real s = 0;
    for (int l = 0; l < L; ++l) s += std::exp(zr[l] - m);
    out[i] = (m + std::log(s)) - zr[lab[i]];
    for (int l = 0; l < L; ++l) (*probs)[i * L + l] = std::exp(zr[l] - m) / s;
  }
  Shape os(zs.begin(), zs.end() - 1);
  return t.record(
      "cross_entropy", std::move(os), std::move(out), {logits},
      [=](Tape<Real>& tp, int self) {
        const Real* g = tp.grad_ptr(self);
        if (Real* gz = tp.grad_acc(logits)) {
          for (std::size_t i = 0; i < P; ++i) {
            for (int l = 0; l < L; ++l) gz[i * L + l] += g[i] * (*probs)[i * L + l];
            gz[i * L + lab[i]] -= g[i];
          }
        }
      },
      [=](Tape<Real>& tp, int self) {
        const Real* tz = tp.tangent_ptr(logits);
        Real* to = tp.tangent_out(self);
        for (std::size_t i = 0; i < P; ++i) {
          Real s = 0;
          for (int l = 0; l < L; ++l) s += (*probs)[i * L + l] * tz[i * L + l];
          to[i] = s - tz[i * L + lab[i]];
        }
      });
}

template <typename Real>
Var channel(Tape<Real>& t, Var x, int c) {
  const Shape xs = t.shape(x);
  if (xs.size() < 2) throw ShapeError("channel: expected {..., L}");
  const int L = xs.back();
  if (c < 0 || c >= L) throw std::out_of_range("channel: index out of range");
  const auto& in = t.value(x);
  const std::size_t P = in.size() / static_cast<std::size_t>(L);
  typename Tape<Real>::Buffer out(P);
  for (std::size_t i = 0; i < P; ++i) out[i] = in[i * L + c];
  return t.record(
      "channel", Shape(xs.begin(), xs.end() - 1), std::move(out), {x},
      [=](Tape<Real>& tp, int self) {
        const Real* g = tp.grad_ptr(self);
        if (Real* gx = tp.grad_acc(x)) {
          for (std::size_t i = 0; i < P; ++i) gx[i * L + c] += g[i];
        }
      },
      [=](Tape<Real>& tp, int self) {
        const Real* tx = tp.tangent_ptr(x);
        Real* to = tp.tangent_out(self);
        for (std::size_t i = 0; i < P; ++i) to[i] = tx[i * L + c];
      });
}

namespace {

enum class Binary { kAdd, kSub, kMul, kDiv };

template <typename Real>
Var binary(Tape<Real>& t, Var a, Var b, Binary kind, const char* name) {
  require_same(t, a, b, name);
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  const std::size_t n = av.size();
  typename Tape<Real>::Buffer out(n);
  for (std::size_t i = 0; i < n; ++i) {
    switch (kind) {
      case Binary::kAdd: out[i] = av[i] + bv[i]; break;
      case Binary::kSub: out[i] = av[i] - bv[i]; break;
      case Binary::kMul: out[i] = av[i] * bv[i]; break;
      case Binary::kDiv: out[i] = av[i] / bv[i]; break;
    }
  }
  return t.record(
      name, t.shape(a), std::move(out), {a, b},
      [=](Tape<Real>& tp, int self) {
        const Real* g = tp.grad_ptr(self);
        const Real* x = tp.value(a).data();
        const Real* y = tp.value(b).data();
        Real* ga = tp.grad_acc(a);
        Real* gb = tp.grad_acc(b);
        for (std::size_t i = 0; i < n; ++i) {
          switch (kind) {
            case Binary::kAdd:
              if (ga) ga[i] += g[i];
              if (gb) gb[i] += g[i];
              break;
            case Binary::kSub:
              if (ga) ga[i] += g[i];
              if (gb) gb[i] -= g[i];
              break;
            case Binary::kMul:
              if (ga) ga[i] += g[i] * y[i];
              if (gb) gb[i] += g[i] * x[i];
              break;
            case Binary::kDiv:
              if (ga) ga[i] += g[i] / y[i];
              if (gb) gb[i] -= g[i] * x[i] / (y[i] * y[i]);
              break;
          }
        }
      },
      [=](Tape<Real>& tp, int self) {
        const Real* x = tp.value(a).data();
        const Real* y = tp.value(b).data();
        const Real* ta = tp.tangent_ptr(a);
        const Real* tb = tp.tangent_ptr(b);
        Real* to = tp.tangent_out(self);
        for (std::size_t i = 0; i < n; ++i) {
          const Real da = ta ? ta[i] : Real(0);
          const Real db = tb ? tb[i] : Real(0);
          switch (kind) {
            case Binary::kAdd: to[i] = da + db; break;
            case Binary::kSub: to[i] = da - db; break;
            case Binary::kMul: to[i] = da * y[i] + x[i] * db; break;
            case Binary::kDiv: to[i] = (da * y[i] - x[i] * db) / (y[i] * y[i]); break;
          }
        }
      });
}

}  // namespace

template <typename Real>
Var add(Tape<Real>& t, Var a, Var b) { return binary(t, a, b, Binary::kAdd, "add"); }
template <typename Real>
Var sub(Tape<Real>& t, Var a, Var b) { return binary(t, a, b, Binary::kSub, "sub"); }
template <typename Real>
Var mul(Tape<Real>& t, Var a, Var b) { return binary(t, a, b, Binary::kMul, "mul"); }
template <typename Real>
Var div(Tape<Real>& t, Var a, Var b) { return binary(t, a, b, Binary::kDiv, "div"); }

template <typename Real>
Var affine(Tape<Real>& t, Var x, double scale, double shift) {
  auto out = t.value(x);
  const Real s = static_cast<Real>(scale);
  const Real c = static_cast<Real>(shift);
  for (auto& v : out) v = s * v + c;
  const std::size_t n = out.size();
  return t.record(
      "affine", t.shape(x), std::move(out), {x},
      [=](Tape<Real>& tp, int self) {
        const Real* g = tp.grad_ptr(self);
        if (Real* gx = tp.grad_acc(x)) {
          for (std::size_t i = 0; i < n; ++i) gx[i] += s * g[i];
        }
      },
      [=](Tape<Real>& tp, int self) {
        const Real* tx = tp.tangent_ptr(x);
        Real* to = tp.tangent_out(self);
        for (std::size_t i = 0; i < n; ++i) to[i] = s * tx[i];
      });
}

template <typename Real>
Var sum(Tape<Real>& t, Var x) {
  const auto& in = t.value(x);
  Real s = 0;
  for (Real v : in) s += v;
  const std::size_t n = in.size();
  return t.record(
      "sum", {1}, {s}, {x},
      [=](Tape<Real>& tp, int self) {
        const Real g = tp.grad_ptr(self)[0];
        if (Real* gx = tp.grad_acc(x)) {
          for (std::size_t i = 0; i < n; ++i) gx[i] += g;
        }
      },
      [=](Tape<Real>& tp, int self) {
        const Real* tx = tp.tangent_ptr(x);
        Real s2 = 0;
        for (std::size_t i = 0; i < n; ++i) s2 += tx[i];
        tp.tangent_out(self)[0] = s2;
      });
}

template <typename Real>
Var gather(Tape<Real>& t, Var x, std::vector<std::size_t> indices) {
  const auto& in = t.value(x);
  typename Tape<Real>::Buffer out(indices.size());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] >= in.size()) throw std::out_of_range("gather: index out of range");
    out[k] = in[indices[k]];
  }
  const auto idx = std::make_shared<const std::vector<std::size_t>>(std::move(indices));
  return t.record(
      "gather", {static_cast<int>(idx->size())}, std::move(out), {x},
      [=](Tape<Real>& tp, int self) {
        const Real* g = tp.grad_ptr(self);
        if (Real* gx = tp.grad_acc(x)) {
          for (std::size_t k = 0; k < idx->size(); ++k) gx[(*idx)[k]] += g[k];
        }
      },
      [=](Tape<Real>& tp, int self) {
        const Real* tx = tp.tangent_ptr(x);
        Real* to = tp.tangent_out(self);
        for (std::size_t k = 0; k < idx->size(); ++k) to[k] = tx[(*idx)[k]];
      });
}

template <typename Real>
Var norm(Tape<Real>& t, Var x) {
  const auto& in = t.value(x);
  Real ss = 0;
  for (Real v : in) ss += v * v;
  const Real nrm = std::sqrt(ss);
  const std::size_t n = in.size();
  return t.record(
      "norm", {1}, {nrm}, {x},
      [=](Tape<Real>& tp, int self) {
        if (nrm == Real(0)) return;
        const Real g = tp.grad_ptr(self)[0];
        const Real* v = tp.value(x).data();
        if (Real* gx = tp.grad_acc(x)) {
          for (std::size_t i = 0; i < n; ++i) gx[i] += g * v[i] / nrm;
        }
      },
      [=](Tape<Real>& tp, int self) {
        Real* to = tp.tangent_out(self);
        if (nrm == Real(0)) return;
        const Real* tx = tp.tangent_ptr(x);
        const Real* v = tp.value(x).data();
        Real s = 0;
        for (std::size_t i = 0; i < n; ++i) s += v[i] * tx[i];
        to[0] = s / nrm;
      });
}

// --- function-level API -------------------------------------------------------

template <typename Real>
ValueAndGrad value_and_grad(const ScalarFn<Real>& f, std::span<const double> theta) {
  Tape<Real> tape;
  const Var th = tape.variable({static_cast<int>(theta.size())},
                               typename Tape<Real>::Buffer(theta.begin(), theta.end()));
  const Var out = f(tape, th);
  tape.backward(out);
  ValueAndGrad r;
  r.value = static_cast<double>(tape.scalar(out));
  const auto g = tape.grad(th);
  r.grad.assign(g.begin(), g.end());
  return r;
}

template <typename Real>
double evaluate(const ScalarFn<Real>& f, std::span<const double> theta) {
  Tape<Real> tape;
  const Var th = tape.variable({static_cast<int>(theta.size())},
                               typename Tape<Real>::Buffer(theta.begin(), theta.end()));
  return static_cast<double>(tape.scalar(f(tape, th)));
}

std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                                     std::span<const double> theta, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_grad: step must be positive");
  std::vector<double> th(theta.begin(), theta.end());
  std::vector<double> g(th.size());
  for (std::size_t k = 0; k < th.size(); ++k) {
    const double saved = th[k];
    th[k] = saved + h;
    const double fp = f(th);
    th[k] = saved - h;
    const double fm = f(th);
    th[k] = saved;
    g[k] = (fp - fm) / (2.0 * h);
  }
  return g;
}

std::vector<double> finite_diff_grad(const ScalarFn<double>& f, std::span<const double> theta,
                                     double h) {
  return finite_diff_grad([&f](std::span<const double> th) { return evaluate<double>(f, th); },
                          theta, h);
}

double relative_error(std::span<const double> a, std::span<const double> b, double floor) {
  if (a.size() != b.size()) throw ShapeError("relative_error: size mismatch");
  double diff = 0.0;
  double scale = floor;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max({scale, std::abs(a[i]), std::abs(b[i])});
  }
  return diff / scale;
}

#define METADCSEG_INSTANTIATE_OPS(R)                                                  \
  template Var slice<R>(Tape<R>&, Var, std::size_t, Shape);                           \
  template Var conv3x3<R>(Tape<R>&, Var, Var);                                        \
  template Var bias_add<R>(Tape<R>&, Var, Var);                                       \
  template Var relu<R>(Tape<R>&, Var);                                                \
  template Var downsample2<R>(Tape<R>&, Var);                                         \
  template Var upsample2<R>(Tape<R>&, Var);                                           \
  template Var pixel_affine<R>(Tape<R>&, Var, Var, Var);                              \
  template Var softmax<R>(Tape<R>&, Var);                                             \
  template Var cross_entropy<R>(Tape<R>&, Var, std::span<const int>);                 \
  template Var channel<R>(Tape<R>&, Var, int);                                        \
  template Var add<R>(Tape<R>&, Var, Var);                                            \
  template Var sub<R>(Tape<R>&, Var, Var);                                            \
  template Var mul<R>(Tape<R>&, Var, Var);                                            \
  template Var div<R>(Tape<R>&, Var, Var);                                            \
  template Var affine<R>(Tape<R>&, Var, double, double);                              \
  template Var sum<R>(Tape<R>&, Var);                                                 \
  template Var gather<R>(Tape<R>&, Var, std::vector<std::size_t>);                    \
  template Var norm<R>(Tape<R>&, Var);                                                \
  template ValueAndGrad value_and_grad<R>(const ScalarFn<R>&, std::span<const double>); \
  template double evaluate<R>(const ScalarFn<R>&, std::span<const double>);

METADCSEG_INSTANTIATE_OPS(float)
METADCSEG_INSTANTIATE_OPS(double)

#undef METADCSEG_INSTANTIATE_OPS

}  // namespace metadcseg::diff
