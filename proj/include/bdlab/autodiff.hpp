#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "bdlab/errors.hpp"
#include "bdlab/tensor.hpp"

namespace bdlab {

enum class Padding { Same, Valid };

// Static computation graph with reverse-mode differentiation. Nodes are
// created in topological order (an op may only consume already-created
// nodes); forward/backward walk that order. All reductions use a fixed
// summation order, so results are bit-identical across runs for the same
// inputs and seed.
//
// Leaf kinds: Input (bindable, no grad), Frozen (bindable, no grad; model
// weights under inspection), Param (trainable, grad accumulated).
template <typename T>
class GraphT {
 public:
  enum class Op {
    Input,
    Frozen,
    Param,
    Conv2d,
    Dense,
    Relu,
    MaxPool2,
    Softmax,
    CrossEntropy,
    SelectClass,
    Blend,
    Sigmoid,
    Add,
    Mul,
    Scale,
    RowScale,
    Sum,
    Mean,
  };

  int input(const std::string& name) { return add_leaf(Op::Input, name, false); }

  int frozen(const std::string& name, TensorT<T> value) {
    int id = add_leaf(Op::Frozen, name, false);
    nodes_[id].t = std::move(value);
    nodes_[id].t.requires_grad = false;
    return id;
  }

  int param(const std::string& name, TensorT<T> init) {
    int id = add_leaf(Op::Param, name, true);
    nodes_[id].t = std::move(init);
    nodes_[id].t.requires_grad = true;
    return id;
  }

  int conv2d(int x, int w, int b, Padding pad, const std::string& name = "") {
    int id = add_op(Op::Conv2d, {x, w, b}, name.empty() ? auto_name("conv2d") : name);
    nodes_[id].pad = pad;
    return id;
  }

  int dense(int x, int w, int b, const std::string& name = "") {
    return add_op(Op::Dense, {x, w, b}, name.empty() ? auto_name("dense") : name);
  }

  int relu(int x) { return add_op(Op::Relu, {x}, auto_name("relu")); }

  int max_pool2(int x) { return add_op(Op::MaxPool2, {x}, auto_name("max_pool2")); }

  int softmax(int x) { return add_op(Op::Softmax, {x}, auto_name("softmax")); }

  // Mean over the batch of -log(clamped p[i, label_i]). Labels are bound
  // separately via bind_labels.
  int cross_entropy(int probs) { return add_op(Op::CrossEntropy, {probs}, auto_name("cross_entropy")); }

  int select_class(int probs, int class_index) {
    int id = add_op(Op::SelectClass, {probs}, auto_name("select_class"));
    nodes_[id].class_index = class_index;
    return id;
  }

  // out = x*(1-m) + v*m with x:[N,H,W,C], v:[H,W,C], m:[H,W].
  int blend(int x, int v, int m) { return add_op(Op::Blend, {x, v, m}, auto_name("blend")); }

  int sigmoid(int x) { return add_op(Op::Sigmoid, {x}, auto_name("sigmoid")); }

  int add(int a, int b) { return add_op(Op::Add, {a, b}, auto_name("add")); }

  int mul(int a, int b) { return add_op(Op::Mul, {a, b}, auto_name("mul")); }

  int scale(int x, T c) {
    int id = add_op(Op::Scale, {x}, auto_name("scale"));
    nodes_[id].scalar = c;
    return id;
  }

  // out[n,j] = x[n,j] * s[j] with x [N,J] (or flattened to that), s [J].
  int row_scale(int x, int s) { return add_op(Op::RowScale, {x, s}, auto_name("row_scale")); }

  int sum(int x) { return add_op(Op::Sum, {x}, auto_name("sum")); }

  int mean(int x) { return add_op(Op::Mean, {x}, auto_name("mean")); }

  void bind(int id, const TensorT<T>& v) {
    Node& n = node(id);
    if (n.op != Op::Input && n.op != Op::Frozen)
      throw ComputeError("bind: node '" + n.name + "' is not a bindable leaf");
    n.t.shape = v.shape;
    n.t.data = v.data;
    forward_done_ = false;
  }

  // Bind without copying shape-vector churn for hot loops; data must match
  // the currently bound shape.
  void bind_values(int id, const T* data, size_t count) {
    Node& n = node(id);
    if (n.t.data.size() != count) throw ShapeError("bind_values: size mismatch on '" + n.name + "'");
    std::copy(data, data + count, n.t.data.begin());
    forward_done_ = false;
  }

  void bind_labels(int ce_id, std::vector<int> labels) {
    Node& n = node(ce_id);
    if (n.op != Op::CrossEntropy) throw ComputeError("bind_labels: node is not cross_entropy");
    n.labels = std::move(labels);
    forward_done_ = false;
  }

  const TensorT<T>& forward(int out) {
    ensure_reachable(out);
    for (int id = 0; id <= out; ++id) {
      if (!reach_[static_cast<size_t>(id)]) continue;
      eval(id);
    }
    forward_done_ = true;
    forward_out_ = out;
    return nodes_[out].t;
  }

  // Accumulates d(out)/d(leaf) into every reachable Param leaf's grad.
  void backward(int out) {
    if (!forward_done_ || forward_out_ != out)
      throw ComputeError("backward: forward has not been run for this output");
    Node& o = node(out);
    if (o.t.numel() != 1) throw ComputeError("backward: output '" + o.name + "' is not scalar");
    for (int id = 0; id <= out; ++id) {
      if (!reach_[static_cast<size_t>(id)]) continue;
      Node& n = nodes_[id];
      if (n.needs_grad) n.t.zero_grad();
    }
    o.t.grad.assign(1, T(1));
    for (int id = out; id >= 0; --id) {
      if (!reach_[static_cast<size_t>(id)] || !nodes_[id].needs_grad) continue;
      if (nodes_[id].op == Op::Input || nodes_[id].op == Op::Frozen || nodes_[id].op == Op::Param)
        continue;
      propagate(id);
    }
  }

  TensorT<T>& tensor(int id) { return node(id).t; }
  const TensorT<T>& tensor(int id) const { return nodes_.at(static_cast<size_t>(id)).t; }

  const std::vector<T>& grad(int id) const { return nodes_.at(static_cast<size_t>(id)).t.grad; }

  std::vector<int> param_ids() const {
    std::vector<int> out;
    for (size_t i = 0; i < nodes_.size(); ++i)
      if (nodes_[i].op == Op::Param) out.push_back(static_cast<int>(i));
    return out;
  }

  const std::string& name_of(int id) const { return nodes_.at(static_cast<size_t>(id)).name; }
  int size() const { return static_cast<int>(nodes_.size()); }

 private:
  struct Node {
    Op op;
    std::string name;
    std::vector<int> in;
    TensorT<T> t;
    bool needs_grad = false;   // any requires_grad leaf upstream
    Padding pad = Padding::Valid;
    int class_index = -1;
    T scalar = T(0);
    std::vector<int> labels;   // CrossEntropy
    std::vector<int32_t> aux;  // MaxPool2 argmax cache
  };

  std::vector<Node> nodes_;
  std::vector<char> reach_;
  int reach_out_ = -1;
  bool forward_done_ = false;
  int forward_out_ = -1;
  int counter_ = 0;

  Node& node(int id) {
    if (id < 0 || id >= static_cast<int>(nodes_.size())) throw ComputeError("bad node id");
    return nodes_[static_cast<size_t>(id)];
  }

  std::string auto_name(const char* base) { return std::string(base) + "#" + std::to_string(counter_++); }

  int add_leaf(Op op, const std::string& name, bool requires_grad) {
    Node n;
    n.op = op;
    n.name = name;
    n.needs_grad = requires_grad;
    nodes_.push_back(std::move(n));
    reach_out_ = -1;
    return static_cast<int>(nodes_.size()) - 1;
  }

  int add_op(Op op, std::vector<int> in, const std::string& name) {
    Node n;
    n.op = op;
    n.name = name;
    for (int i : in) {
      if (i < 0 || i >= static_cast<int>(nodes_.size()))
        throw ComputeError("op '" + name + "' consumes unknown node");
      n.needs_grad = n.needs_grad || nodes_[static_cast<size_t>(i)].needs_grad;
    }
    n.in = std::move(in);
    nodes_.push_back(std::move(n));
    reach_out_ = -1;
    return static_cast<int>(nodes_.size()) - 1;
  }

  void ensure_reachable(int out) {
    node(out);
    if (reach_out_ == out && reach_.size() == nodes_.size()) return;
    reach_.assign(nodes_.size(), 0);
    std::vector<int> stack{out};
    while (!stack.empty()) {
      int id = stack.back();
      stack.pop_back();
      if (reach_[static_cast<size_t>(id)]) continue;
      reach_[static_cast<size_t>(id)] = 1;
      for (int i : nodes_[static_cast<size_t>(id)].in) stack.push_back(i);
    }
    reach_out_ = out;
  }

  [[noreturn]] void shape_fail(const Node& n, const std::string& why) const {
    throw ShapeError("node '" + n.name + "': " + why);
  }

  void set_shape(Node& n, std::vector<int> shape) {
    size_t need = static_cast<size_t>(TensorT<T>::numel_of(shape));
    n.t.shape = std::move(shape);
    n.t.data.resize(need);
  }

  void eval(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    switch (n.op) {
      case Op::Input:
      case Op::Frozen:
      case Op::Param:
        if (n.t.data.empty()) throw ComputeError("leaf '" + n.name + "' has no bound value");
        return;
      case Op::Conv2d: return eval_conv2d(n);
      case Op::Dense: return eval_dense(n);
      case Op::Relu: return eval_relu(n);
      case Op::MaxPool2: return eval_max_pool2(n);
      case Op::Softmax: return eval_softmax(n);
      case Op::CrossEntropy: return eval_cross_entropy(n);
      case Op::SelectClass: return eval_select_class(n);
      case Op::Blend: return eval_blend(n);
      case Op::Sigmoid: return eval_sigmoid(n);
      case Op::Add: return eval_add(n);
      case Op::Mul: return eval_mul(n);
      case Op::Scale: return eval_scale(n);
      case Op::RowScale: return eval_row_scale(n);
      case Op::Sum: return eval_sum(n);
      case Op::Mean: return eval_mean(n);
    }
  }

  void propagate(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    switch (n.op) {
      case Op::Conv2d: return back_conv2d(n);
      case Op::Dense: return back_dense(n);
      case Op::Relu: return back_relu(n);
      case Op::MaxPool2: return back_max_pool2(n);
      case Op::Softmax: return back_softmax(n);
      case Op::CrossEntropy: return back_cross_entropy(n);
      case Op::SelectClass: return back_select_class(n);
      case Op::Blend: return back_blend(n);
      case Op::Sigmoid: return back_sigmoid(n);
      case Op::Add: return back_add(n);
      case Op::Mul: return back_mul(n);
      case Op::Scale: return back_scale(n);
      case Op::RowScale: return back_row_scale(n);
      case Op::Sum: return back_sum(n);
      case Op::Mean: return back_mean(n);
      default: return;
    }
  }

  Node& in(const Node& n, int i) { return nodes_[static_cast<size_t>(n.in[static_cast<size_t>(i)])]; }

  // ---- conv2d: x [N,H,W,Ci], w [kh,kw,Ci,Co], b [Co], stride 1 ----

  void eval_conv2d(Node& n) {
    Node& xn = in(n, 0);
    Node& wn = in(n, 1);
    Node& bn = in(n, 2);
    const auto& xs = xn.t.shape;
    const auto& ws = wn.t.shape;
    if (xs.size() != 4) shape_fail(n, "conv2d input must be [N,H,W,C], got " + shape_str(xs));
    if (ws.size() != 4) shape_fail(n, "conv2d weight must be [kh,kw,Cin,Cout], got " + shape_str(ws));
    if (xs[3] != ws[2])
      shape_fail(n, "conv2d channel mismatch: input " + shape_str(xs) + " weight " + shape_str(ws));
    const int N = xs[0], H = xs[1], W = xs[2], Ci = xs[3];
    const int kh = ws[0], kw = ws[1], Co = ws[3];
    if (bn.t.shape != std::vector<int>{Co}) shape_fail(n, "conv2d bias must be [Cout]");
    const int ph = n.pad == Padding::Same ? (kh - 1) / 2 : 0;
    const int pw = n.pad == Padding::Same ? (kw - 1) / 2 : 0;
    const int Ho = n.pad == Padding::Same ? H : H - kh + 1;
    const int Wo = n.pad == Padding::Same ? W : W - kw + 1;
    if (Ho <= 0 || Wo <= 0) shape_fail(n, "conv2d kernel larger than input");
    set_shape(n, {N, Ho, Wo, Co});

    const T* x = xn.t.data.data();
    const T* w = wn.t.data.data();
    const T* b = bn.t.data.data();
    T* y = n.t.data.data();
    std::vector<T> acc(static_cast<size_t>(Co));
    for (int nn = 0; nn < N; ++nn) {
      const T* xb = x + static_cast<size_t>(nn) * H * W * Ci;
      T* yb = y + static_cast<size_t>(nn) * Ho * Wo * Co;
      for (int ho = 0; ho < Ho; ++ho) {
        for (int wo = 0; wo < Wo; ++wo) {
          std::copy(b, b + Co, acc.begin());
          for (int dh = 0; dh < kh; ++dh) {
            const int hi = ho + dh - ph;
            if (hi < 0 || hi >= H) continue;
            for (int dw = 0; dw < kw; ++dw) {
              const int wi = wo + dw - pw;
              if (wi < 0 || wi >= W) continue;
              const T* xp = xb + (static_cast<size_t>(hi) * W + wi) * Ci;
              const T* wp = w + (static_cast<size_t>(dh) * kw + dw) * Ci * Co;
              for (int ci = 0; ci < Ci; ++ci) {
                const T xv = xp[ci];
                const T* wr = wp + static_cast<size_t>(ci) * Co;
                for (int co = 0; co < Co; ++co) acc[static_cast<size_t>(co)] += xv * wr[co];
              }
            }
          }
          std::copy(acc.begin(), acc.end(), yb + (static_cast<size_t>(ho) * Wo + wo) * Co);
        }
      }
    }
  }

  void back_conv2d(Node& n) {
    Node& xn = in(n, 0);
    Node& wn = in(n, 1);
    Node& bn = in(n, 2);
    const auto& xs = xn.t.shape;
    const auto& ws = wn.t.shape;
    const int N = xs[0], H = xs[1], W = xs[2], Ci = xs[3];
    const int kh = ws[0], kw = ws[1], Co = ws[3];
    const int ph = n.pad == Padding::Same ? (kh - 1) / 2 : 0;
    const int pw = n.pad == Padding::Same ? (kw - 1) / 2 : 0;
    const int Ho = n.t.shape[1], Wo = n.t.shape[2];
    const T* gy = n.t.grad.data();
    const T* x = xn.t.data.data();
    const T* w = wn.t.data.data();

    if (bn.needs_grad) {
      T* gb = bn.t.grad.data();
      for (int64_t i = 0; i < n.t.numel(); ++i) gb[i % Co] += gy[i];
    }
    if (wn.needs_grad) {
      T* gw = wn.t.grad.data();
      for (int nn = 0; nn < N; ++nn) {
        const T* xb = x + static_cast<size_t>(nn) * H * W * Ci;
        const T* gyb = gy + static_cast<size_t>(nn) * Ho * Wo * Co;
        for (int ho = 0; ho < Ho; ++ho) {
          for (int wo = 0; wo < Wo; ++wo) {
            const T* gr = gyb + (static_cast<size_t>(ho) * Wo + wo) * Co;
            for (int dh = 0; dh < kh; ++dh) {
              const int hi = ho + dh - ph;
              if (hi < 0 || hi >= H) continue;
              for (int dw = 0; dw < kw; ++dw) {
                const int wi = wo + dw - pw;
                if (wi < 0 || wi >= W) continue;
                const T* xp = xb + (static_cast<size_t>(hi) * W + wi) * Ci;
                T* gwp = gw + (static_cast<size_t>(dh) * kw + dw) * Ci * Co;
                for (int ci = 0; ci < Ci; ++ci) {
                  const T xv = xp[ci];
                  T* gwr = gwp + static_cast<size_t>(ci) * Co;
                  for (int co = 0; co < Co; ++co) gwr[co] += xv * gr[co];
                }
              }
            }
          }
        }
      }
    }
    if (xn.needs_grad) {
      T* gx = xn.t.grad.data();
      for (int nn = 0; nn < N; ++nn) {
        T* gxb = gx + static_cast<size_t>(nn) * H * W * Ci;
        const T* gyb = gy + static_cast<size_t>(nn) * Ho * Wo * Co;
        for (int ho = 0; ho < Ho; ++ho) {
          for (int wo = 0; wo < Wo; ++wo) {
            const T* gr = gyb + (static_cast<size_t>(ho) * Wo + wo) * Co;
            for (int dh = 0; dh < kh; ++dh) {
              const int hi = ho + dh - ph;
              if (hi < 0 || hi >= H) continue;
              for (int dw = 0; dw < kw; ++dw) {
                const int wi = wo + dw - pw;
                if (wi < 0 || wi >= W) continue;
                T* gxp = gxb + (static_cast<size_t>(hi) * W + wi) * Ci;
                const T* wp = w + (static_cast<size_t>(dh) * kw + dw) * Ci * Co;
                for (int ci = 0; ci < Ci; ++ci) {
                  const T* wr = wp + static_cast<size_t>(ci) * Co;
                  T s = T(0);
                  for (int co = 0; co < Co; ++co) s += gr[co] * wr[co];
                  gxp[ci] += s;
                }
              }
            }
          }
        }
      }
    }
  }

  // ---- dense: x [N, ...] flattened to [N, In], w [In, Out], b [Out] ----

  void eval_dense(Node& n) {
    Node& xn = in(n, 0);
    Node& wn = in(n, 1);
    Node& bn = in(n, 2);
    if (xn.t.rank() < 2) shape_fail(n, "dense input must have a batch dimension");
    const int N = xn.t.shape[0];
    const int64_t In = xn.t.numel() / N;
    const auto& ws = wn.t.shape;
    if (ws.size() != 2 || ws[0] != In)
      shape_fail(n, "dense weight " + shape_str(ws) + " incompatible with input " +
                        shape_str(xn.t.shape));
    const int Out = ws[1];
    if (bn.t.shape != std::vector<int>{Out}) shape_fail(n, "dense bias must be [Out]");
    set_shape(n, {N, Out});
    const T* x = xn.t.data.data();
    const T* w = wn.t.data.data();
    const T* b = bn.t.data.data();
    T* y = n.t.data.data();
    for (int nn = 0; nn < N; ++nn) {
      T* yr = y + static_cast<size_t>(nn) * Out;
      std::copy(b, b + Out, yr);
      const T* xr = x + static_cast<size_t>(nn) * In;
      for (int64_t i = 0; i < In; ++i) {
        const T xv = xr[i];
        const T* wr = w + static_cast<size_t>(i) * Out;
        for (int o = 0; o < Out; ++o) yr[o] += xv * wr[o];
      }
    }
  }

  void back_dense(Node& n) {
    Node& xn = in(n, 0);
    Node& wn = in(n, 1);
    Node& bn = in(n, 2);
    const int N = xn.t.shape[0];
    const int64_t In = xn.t.numel() / N;
    const int Out = wn.t.shape[1];
    const T* gy = n.t.grad.data();
    const T* x = xn.t.data.data();
    const T* w = wn.t.data.data();
    if (bn.needs_grad) {
      T* gb = bn.t.grad.data();
      for (int nn = 0; nn < N; ++nn) {
        const T* gr = gy + static_cast<size_t>(nn) * Out;
        for (int o = 0; o < Out; ++o) gb[o] += gr[o];
      }
    }
    if (wn.needs_grad) {
      T* gw = wn.t.grad.data();
      for (int nn = 0; nn < N; ++nn) {
        const T* xr = x + static_cast<size_t>(nn) * In;
        const T* gr = gy + static_cast<size_t>(nn) * Out;
        for (int64_t i = 0; i < In; ++i) {
          const T xv = xr[i];
          T* gwr = gw + static_cast<size_t>(i) * Out;
          for (int o = 0; o < Out; ++o) gwr[o] += xv * gr[o];
        }
      }
    }
    if (xn.needs_grad) {
      T* gx = xn.t.grad.data();
      for (int nn = 0; nn < N; ++nn) {
        T* gxr = gx + static_cast<size_t>(nn) * In;
        const T* gr = gy + static_cast<size_t>(nn) * Out;
        for (int64_t i = 0; i < In; ++i) {
          const T* wr = w + static_cast<size_t>(i) * Out;
          T s = T(0);
          for (int o = 0; o < Out; ++o) s += gr[o] * wr[o];
          gxr[i] += s;
        }
      }
    }
  }

  void eval_relu(Node& n) {
    Node& xn = in(n, 0);
    set_shape(n, xn.t.shape);
    const T* x = xn.t.data.data();
    T* y = n.t.data.data();
    const int64_t m = xn.t.numel();
    for (int64_t i = 0; i < m; ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  }

  void back_relu(Node& n) {
    Node& xn = in(n, 0);
    if (!xn.needs_grad) return;
    const T* x = xn.t.data.data();
    const T* gy = n.t.grad.data();
    T* gx = xn.t.grad.data();
    const int64_t m = xn.t.numel();
    for (int64_t i = 0; i < m; ++i)
      if (x[i] > T(0)) gx[i] += gy[i];
  }

  // ---- 2x2 max pool, stride 2; trailing odd row/col dropped. Ties route
  // the gradient to the first maximal element in scan order. ----

  void eval_max_pool2(Node& n) {
    Node& xn = in(n, 0);
    const auto& xs = xn.t.shape;
    if (xs.size() != 4) shape_fail(n, "max_pool2 input must be [N,H,W,C]");
    const int N = xs[0], H = xs[1], W = xs[2], C = xs[3];
    const int Ho = H / 2, Wo = W / 2;
    if (Ho == 0 || Wo == 0) shape_fail(n, "max_pool2 input too small");
    set_shape(n, {N, Ho, Wo, C});
    n.aux.resize(n.t.data.size());
    const T* x = xn.t.data.data();
    T* y = n.t.data.data();
    int32_t* am = n.aux.data();
    for (int nn = 0; nn < N; ++nn) {
      for (int ho = 0; ho < Ho; ++ho) {
        for (int wo = 0; wo < Wo; ++wo) {
          for (int c = 0; c < C; ++c) {
            T best = -std::numeric_limits<T>::infinity();
            int32_t besti = 0;
            for (int dh = 0; dh < 2; ++dh) {
              for (int dw = 0; dw < 2; ++dw) {
                const size_t idx =
                    ((static_cast<size_t>(nn) * H + (2 * ho + dh)) * W + (2 * wo + dw)) * C + c;
                if (x[idx] > best) {
                  best = x[idx];
                  besti = static_cast<int32_t>(idx);
                }
              }
            }
            const size_t oidx = ((static_cast<size_t>(nn) * Ho + ho) * Wo + wo) * C + c;
            y[oidx] = best;
            am[oidx] = besti;
          }
        }
      }
    }
  }

  void back_max_pool2(Node& n) {
    Node& xn = in(n, 0);
    if (!xn.needs_grad) return;
    const T* gy = n.t.grad.data();
    T* gx = xn.t.grad.data();
    const int64_t m = n.t.numel();
    for (int64_t i = 0; i < m; ++i) gx[n.aux[static_cast<size_t>(i)]] += gy[i];
  }

  // ---- softmax over the last dim of [N,K]; max-subtracted ----

  void eval_softmax(Node& n) {
    Node& xn = in(n, 0);
    const auto& xs = xn.t.shape;
    if (xs.size() != 2) shape_fail(n, "softmax input must be [N,K]");
    const int N = xs[0], K = xs[1];
    if (K < 2) shape_fail(n, "softmax needs K >= 2");
    set_shape(n, xs);
    const T* x = xn.t.data.data();
    T* y = n.t.data.data();
    for (int nn = 0; nn < N; ++nn) {
      const T* xr = x + static_cast<size_t>(nn) * K;
      T* yr = y + static_cast<size_t>(nn) * K;
      T mx = xr[0];
      for (int k = 0; k < K; ++k) {
        if (std::isnan(static_cast<double>(xr[k])))
          throw ComputeError("node '" + n.name + "': NaN logit");
        mx = std::max(mx, xr[k]);
      }
      T z = T(0);
      for (int k = 0; k < K; ++k) {
        yr[k] = std::exp(xr[k] - mx);
        z += yr[k];
      }
      for (int k = 0; k < K; ++k) yr[k] /= z;
    }
  }

  void back_softmax(Node& n) {
    Node& xn = in(n, 0);
    if (!xn.needs_grad) return;
    const int N = n.t.shape[0], K = n.t.shape[1];
    const T* y = n.t.data.data();
    const T* gy = n.t.grad.data();
    T* gx = xn.t.grad.data();
    for (int nn = 0; nn < N; ++nn) {
      const T* yr = y + static_cast<size_t>(nn) * K;
      const T* gr = gy + static_cast<size_t>(nn) * K;
      T* gxr = gx + static_cast<size_t>(nn) * K;
      T dot = T(0);
      for (int k = 0; k < K; ++k) dot += gr[k] * yr[k];
      for (int k = 0; k < K; ++k) gxr[k] += yr[k] * (gr[k] - dot);
    }
  }

  // ---- cross entropy: probs [N,K] + labels -> [N]; p clamped at 1e-12 ----

  static constexpr double kProbClamp = 1e-12;

  void eval_cross_entropy(Node& n) {
    Node& pn = in(n, 0);
    const auto& ps = pn.t.shape;
    if (ps.size() != 2) shape_fail(n, "cross_entropy input must be [N,K]");
    const int N = ps[0], K = ps[1];
    if (static_cast<int>(n.labels.size()) != N)
      throw ComputeError("node '" + n.name + "': " + std::to_string(n.labels.size()) +
                         " labels bound for batch of " + std::to_string(N));
    for (int i = 0; i < N; ++i)
      if (n.labels[static_cast<size_t>(i)] < 0 || n.labels[static_cast<size_t>(i)] >= K)
        throw ComputeError("node '" + n.name + "': label out of range");
    set_shape(n, {N});
    const T* p = pn.t.data.data();
    T* y = n.t.data.data();
    for (int i = 0; i < N; ++i) {
      const T pi = p[static_cast<size_t>(i) * K + n.labels[static_cast<size_t>(i)]];
      y[i] = static_cast<T>(-std::log(std::max(static_cast<double>(pi), kProbClamp)));
    }
  }

  void back_cross_entropy(Node& n) {
    Node& pn = in(n, 0);
    if (!pn.needs_grad) return;
    const int N = n.t.shape[0], K = pn.t.shape[1];
    const T* p = pn.t.data.data();
    const T* gy = n.t.grad.data();
    T* gp = pn.t.grad.data();
    for (int i = 0; i < N; ++i) {
      const size_t idx = static_cast<size_t>(i) * K + n.labels[static_cast<size_t>(i)];
      if (static_cast<double>(p[idx]) > kProbClamp) gp[idx] += -gy[i] / p[idx];
    }
  }

  void eval_select_class(Node& n) {
    Node& pn = in(n, 0);
    const auto& ps = pn.t.shape;
    if (ps.size() != 2) shape_fail(n, "select_class input must be [N,K]");
    if (n.class_index < 0 || n.class_index >= ps[1]) shape_fail(n, "class index out of range");
    const int N = ps[0], K = ps[1];
    set_shape(n, {N});
    for (int i = 0; i < N; ++i)
      n.t.data[static_cast<size_t>(i)] = pn.t.data[static_cast<size_t>(i) * K + n.class_index];
  }

  void back_select_class(Node& n) {
    Node& pn = in(n, 0);
    if (!pn.needs_grad) return;
    const int N = n.t.shape[0], K = pn.t.shape[1];
    for (int i = 0; i < N; ++i)
      pn.t.grad[static_cast<size_t>(i) * K + n.class_index] += n.t.grad[static_cast<size_t>(i)];
  }

  // ---- blend: out = x*(1-m) + v*m; x [N,H,W,C], v [H,W,C], m [H,W] ----

  void eval_blend(Node& n) {
    Node& xn = in(n, 0);
    Node& vn = in(n, 1);
    Node& mn = in(n, 2);
    const auto& xs = xn.t.shape;
    if (xs.size() != 4) shape_fail(n, "blend image must be [N,H,W,C]");
    const int N = xs[0], H = xs[1], W = xs[2], C = xs[3];
    if (vn.t.shape != std::vector<int>{H, W, C})
      shape_fail(n, "blend pattern must be [H,W,C] matching image");
    if (mn.t.shape != std::vector<int>{H, W}) shape_fail(n, "blend mask must be [H,W]");
    set_shape(n, xs);
    const T* x = xn.t.data.data();
    const T* v = vn.t.data.data();
    const T* m = mn.t.data.data();
    T* y = n.t.data.data();
    for (int nn = 0; nn < N; ++nn) {
      const T* xb = x + static_cast<size_t>(nn) * H * W * C;
      T* yb = y + static_cast<size_t>(nn) * H * W * C;
      for (int p = 0; p < H * W; ++p) {
        const T mv = m[p];
        const T* xr = xb + static_cast<size_t>(p) * C;
        const T* vr = v + static_cast<size_t>(p) * C;
        T* yr = yb + static_cast<size_t>(p) * C;
        for (int c = 0; c < C; ++c) yr[c] = xr[c] * (T(1) - mv) + vr[c] * mv;
      }
    }
  }

  void back_blend(Node& n) {
    Node& xn = in(n, 0);
    Node& vn = in(n, 1);
    Node& mn = in(n, 2);
    const int N = n.t.shape[0], H = n.t.shape[1], W = n.t.shape[2], C = n.t.shape[3];
    const T* gy = n.t.grad.data();
    const T* m = mn.t.data.data();
    if (xn.needs_grad) {
      T* gx = xn.t.grad.data();
      for (int nn = 0; nn < N; ++nn) {
        const size_t base = static_cast<size_t>(nn) * H * W * C;
        for (int p = 0; p < H * W; ++p) {
          const T om = T(1) - m[p];
          for (int c = 0; c < C; ++c) gx[base + p * C + c] += gy[base + p * C + c] * om;
        }
      }
    }
    if (vn.needs_grad) {
      T* gv = vn.t.grad.data();
      for (int nn = 0; nn < N; ++nn) {
        const size_t base = static_cast<size_t>(nn) * H * W * C;
        for (int p = 0; p < H * W; ++p) {
          const T mv = m[p];
          if (mv == T(0)) continue;
          for (int c = 0; c < C; ++c) gv[p * C + c] += gy[base + p * C + c] * mv;
        }
      }
    }
    if (mn.needs_grad) {
      const T* x = xn.t.data.data();
      const T* v = vn.t.data.data();
      T* gm = mn.t.grad.data();
      for (int nn = 0; nn < N; ++nn) {
        const size_t base = static_cast<size_t>(nn) * H * W * C;
        for (int p = 0; p < H * W; ++p) {
          T s = T(0);
          for (int c = 0; c < C; ++c)
            s += (v[p * C + c] - x[base + p * C + c]) * gy[base + p * C + c];
          gm[p] += s;
        }
      }
    }
  }

  void eval_sigmoid(Node& n) {
    Node& xn = in(n, 0);
    set_shape(n, xn.t.shape);
    const int64_t m = xn.t.numel();
    for (int64_t i = 0; i < m; ++i)
      n.t.data[static_cast<size_t>(i)] =
          T(1) / (T(1) + std::exp(-xn.t.data[static_cast<size_t>(i)]));
  }

  void back_sigmoid(Node& n) {
    Node& xn = in(n, 0);
    if (!xn.needs_grad) return;
    const int64_t m = n.t.numel();
    for (int64_t i = 0; i < m; ++i) {
      const T y = n.t.data[static_cast<size_t>(i)];
      xn.t.grad[static_cast<size_t>(i)] += n.t.grad[static_cast<size_t>(i)] * y * (T(1) - y);
    }
  }

  void eval_add(Node& n) {
    Node& an = in(n, 0);
    Node& bn = in(n, 1);
    if (an.t.shape != bn.t.shape) shape_fail(n, "add operands differ in shape");
    set_shape(n, an.t.shape);
    const int64_t m = an.t.numel();
    for (int64_t i = 0; i < m; ++i) n.t.data[i] = an.t.data[i] + bn.t.data[i];
  }

  void back_add(Node& n) {
    for (int k = 0; k < 2; ++k) {
      Node& a = in(n, k);
      if (!a.needs_grad) continue;
      const int64_t m = n.t.numel();
      for (int64_t i = 0; i < m; ++i) a.t.grad[i] += n.t.grad[i];
    }
  }

  void eval_mul(Node& n) {
    Node& an = in(n, 0);
    Node& bn = in(n, 1);
    if (an.t.shape != bn.t.shape) shape_fail(n, "mul operands differ in shape");
    set_shape(n, an.t.shape);
    const int64_t m = an.t.numel();
    for (int64_t i = 0; i < m; ++i) n.t.data[i] = an.t.data[i] * bn.t.data[i];
  }

  void back_mul(Node& n) {
    Node& an = in(n, 0);
    Node& bn = in(n, 1);
    const int64_t m = n.t.numel();
    if (an.needs_grad)
      for (int64_t i = 0; i < m; ++i) an.t.grad[i] += n.t.grad[i] * bn.t.data[i];
    if (bn.needs_grad)
      for (int64_t i = 0; i < m; ++i) bn.t.grad[i] += n.t.grad[i] * an.t.data[i];
  }

  void eval_scale(Node& n) {
    Node& xn = in(n, 0);
    set_shape(n, xn.t.shape);
    const int64_t m = xn.t.numel();
    for (int64_t i = 0; i < m; ++i) n.t.data[i] = xn.t.data[i] * n.scalar;
  }

  void back_scale(Node& n) {
    Node& xn = in(n, 0);
    if (!xn.needs_grad) return;
    const int64_t m = n.t.numel();
    for (int64_t i = 0; i < m; ++i) xn.t.grad[i] += n.t.grad[i] * n.scalar;
  }

  void eval_row_scale(Node& n) {
    Node& xn = in(n, 0);
    Node& sn = in(n, 1);
    if (xn.t.rank() < 2) shape_fail(n, "row_scale input must have a batch dimension");
    const int N = xn.t.shape[0];
    const int64_t J = xn.t.numel() / N;
    if (sn.t.rank() != 1 || sn.t.shape[0] != J)
      shape_fail(n, "row_scale factor must be [J] matching the row width");
    set_shape(n, xn.t.shape);
    const T* x = xn.t.data.data();
    const T* s = sn.t.data.data();
    T* y = n.t.data.data();
    for (int nn = 0; nn < N; ++nn)
      for (int64_t j = 0; j < J; ++j)
        y[static_cast<size_t>(nn) * J + j] = x[static_cast<size_t>(nn) * J + j] * s[j];
  }

  void back_row_scale(Node& n) {
    Node& xn = in(n, 0);
    Node& sn = in(n, 1);
    const int N = xn.t.shape[0];
    const int64_t J = xn.t.numel() / N;
    const T* gy = n.t.grad.data();
    if (xn.needs_grad) {
      const T* s = sn.t.data.data();
      T* gx = xn.t.grad.data();
      for (int nn = 0; nn < N; ++nn)
        for (int64_t j = 0; j < J; ++j)
          gx[static_cast<size_t>(nn) * J + j] += gy[static_cast<size_t>(nn) * J + j] * s[j];
    }
    if (sn.needs_grad) {
      const T* x = xn.t.data.data();
      T* gs = sn.t.grad.data();
      for (int nn = 0; nn < N; ++nn)
        for (int64_t j = 0; j < J; ++j)
          gs[j] += gy[static_cast<size_t>(nn) * J + j] * x[static_cast<size_t>(nn) * J + j];
    }
  }

  void eval_sum(Node& n) {
    Node& xn = in(n, 0);
    set_shape(n, {1});
    T s = T(0);
    for (T v : xn.t.data) s += v;
    n.t.data[0] = s;
  }

  void back_sum(Node& n) {
    Node& xn = in(n, 0);
    if (!xn.needs_grad) return;
    const T g = n.t.grad[0];
    for (auto& gv : xn.t.grad) gv += g;
  }

  void eval_mean(Node& n) {
    Node& xn = in(n, 0);
    set_shape(n, {1});
    T s = T(0);
    for (T v : xn.t.data) s += v;
    n.t.data[0] = s / static_cast<T>(xn.t.numel());
  }

  void back_mean(Node& n) {
    Node& xn = in(n, 0);
    if (!xn.needs_grad) return;
    const T g = n.t.grad[0] / static_cast<T>(xn.t.numel());
    for (auto& gv : xn.t.grad) gv += g;
  }
};

using Graph = GraphT<float>;
using DGraph = GraphT<double>;

}  // namespace bdlab
