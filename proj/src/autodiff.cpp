// Copyright (C) 2026 The MGD Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include "mgd/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "mgd/error.hpp"

namespace mgd::ad {

namespace {

#ifdef __GLIBC__
// Graphs allocate and free the same large buffers every step. Keeping them in
// the heap avoids an mmap/munmap pair (and fresh page faults) per buffer.
[[maybe_unused]] const bool kHeapTuned = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    mallopt(M_TOP_PAD, 64 << 20);
    return true;
}();
#endif

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

std::size_t product(const std::vector<int>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           [](std::size_t acc, int d) { return acc * static_cast<std::size_t>(d); });
}

Var make(NdArray value, std::vector<std::shared_ptr<Node>> parents, std::function<void(Node&)> fn) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->requires_grad = std::any_of(parents.begin(), parents.end(),
                                      [](const auto& p) { return p->requires_grad; });
    if (node->requires_grad) {
        node->parents = std::move(parents);
        node->backward = std::move(fn);
    }
    return Var(std::move(node));
}

void check_same(const Var& a, const Var& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw InputError(std::string(op) + ": shape mismatch " + a.value().shape_string() + " vs " +
                         b.value().shape_string());
    }
}

// [C,H,W] -> [C*k*k, Ho*Wo]
void im2col(const double* x, int channels, int h, int w, int k, int stride, int pad, int ho, int wo,
            double* cols) {
    const std::size_t plane = static_cast<std::size_t>(ho) * wo;
    for (int c = 0; c < channels; ++c) {
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                double* row = cols + ((static_cast<std::size_t>(c) * k + ky) * k + kx) * plane;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        row[oy * wo + ox] = (iy >= 0 && iy < h && ix >= 0 && ix < w)
                                                ? x[(static_cast<std::size_t>(c) * h + iy) * w + ix]
                                                : 0.0;
                    }
                }
            }
        }
    }
}

void col2im(const double* cols, int channels, int h, int w, int k, int stride, int pad, int ho, int wo,
            double* dx) {
    const std::size_t plane = static_cast<std::size_t>(ho) * wo;
    for (int c = 0; c < channels; ++c) {
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const double* row = cols + ((static_cast<std::size_t>(c) * k + ky) * k + kx) * plane;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        if (ix < 0 || ix >= w) continue;
                        dx[(static_cast<std::size_t>(c) * h + iy) * w + ix] += row[oy * wo + ox];
                    }
                }
            }
        }
    }
}

}  // namespace

NdArray::NdArray(std::vector<int> s, double fill) : shape(std::move(s)) {
    data.assign(product(shape), fill);
}

NdArray::NdArray(std::vector<int> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    require(data.size() == product(shape), "array data length does not match shape");
}

std::string NdArray::shape_string() const {
    std::ostringstream out;
    out << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        out << (i ? "," : "") << shape[i];
    }
    out << "]";
    return out.str();
}

NdArray& Node::grad_buffer() {
    if (grad.data.size() != value.data.size()) {
        grad.shape = value.shape;
        grad.data.assign(value.data.size(), 0.0);
    }
    return grad;
}

void Node::accumulate(std::span<const double> g) {
    auto& buf = grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
        buf.data[i] += g[i];
    }
}

double Var::item() const {
    require(node_ && node_->value.numel() == 1, "item() on a non-scalar");
    return node_->value.data[0];
}

Var constant(NdArray value) { return make(std::move(value), {}, nullptr); }

Var parameter(NdArray value) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->requires_grad = true;
    return Var(std::move(node));
}

void backward(const Var& loss) {
    require(loss.value().numel() == 1, "backward() needs a scalar loss");
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    // Iterative post-order DFS.
    std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* parent = node->parents[next++].get();
            if (parent->requires_grad && seen.insert(parent).second) {
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    loss.node()->accumulate(std::vector<double>{1.0});
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->backward && !node->grad.data.empty()) {
            node->backward(*node);
        }
    }
}

Var add(const Var& a, const Var& b) {
    check_same(a, b, "add");
    NdArray out = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += b.value().data[i];
    return make(std::move(out), {a.node(), b.node()}, [](Node& self) {
        for (auto& p : self.parents) {
            if (p->requires_grad) p->accumulate(self.grad.data);
        }
    });
}

Var sub(const Var& a, const Var& b) {
    check_same(a, b, "sub");
    NdArray out = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] -= b.value().data[i];
    return make(std::move(out), {a.node(), b.node()}, [](Node& self) {
        if (self.parents[0]->requires_grad) self.parents[0]->accumulate(self.grad.data);
        if (self.parents[1]->requires_grad) {
            auto& g = self.parents[1]->grad_buffer().data;
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad.data[i];
        }
    });
}

Var mul(const Var& a, const Var& b) {
    check_same(a, b, "mul");
    NdArray out = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] *= b.value().data[i];
    return make(std::move(out), {a.node(), b.node()}, [](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        if (pa.requires_grad) {
            auto& g = pa.grad_buffer().data;
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad.data[i] * pb.value.data[i];
        }
        if (pb.requires_grad) {
            auto& g = pb.grad_buffer().data;
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad.data[i] * pa.value.data[i];
        }
    });
}

Var scale(const Var& a, double s) {
    NdArray out = a.value();
    for (auto& v : out.data) v *= s;
    return make(std::move(out), {a.node()}, [s](Node& self) {
        auto& g = self.parents[0]->grad_buffer().data;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad.data[i];
    });
}

Var silu(const Var& a) {
    NdArray out = a.value();
    for (auto& v : out.data) v = v / (1.0 + std::exp(-v));
    return make(std::move(out), {a.node()}, [](Node& self) {
        Node& p = *self.parents[0];
        auto& g = p.grad_buffer().data;
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double x = p.value.data[i];
            const double sig = 1.0 / (1.0 + std::exp(-x));
            g[i] += self.grad.data[i] * sig * (1.0 + x * (1.0 - sig));
        }
    });
}

Var clamp(const Var& a, double lo, double hi) {
    NdArray out = a.value();
    for (auto& v : out.data) v = std::clamp(v, lo, hi);
    return make(std::move(out), {a.node()}, [lo, hi](Node& self) {
        Node& p = *self.parents[0];
        auto& g = p.grad_buffer().data;
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double x = p.value.data[i];
            if (x >= lo && x <= hi) g[i] += self.grad.data[i];
        }
    });
}

Var add_channel_bias(const Var& x, const Var& bias) {
    require(x.value().rank() == 3 && bias.value().rank() == 1 && bias.value().dim(0) == x.value().dim(0),
            "add_channel_bias: expected [C,H,W] + [C], got " + x.value().shape_string() + " + " +
                bias.value().shape_string());
    const int channels = x.value().dim(0);
    const std::size_t plane = static_cast<std::size_t>(x.value().dim(1)) * x.value().dim(2);
    NdArray out = x.value();
    for (int c = 0; c < channels; ++c) {
        for (std::size_t i = 0; i < plane; ++i) out.data[c * plane + i] += bias.value().data[c];
    }
    return make(std::move(out), {x.node(), bias.node()}, [channels, plane](Node& self) {
        if (self.parents[0]->requires_grad) self.parents[0]->accumulate(self.grad.data);
        if (self.parents[1]->requires_grad) {
            auto& g = self.parents[1]->grad_buffer().data;
            for (int c = 0; c < channels; ++c) {
                double acc = 0.0;
                for (std::size_t i = 0; i < plane; ++i) acc += self.grad.data[c * plane + i];
                g[c] += acc;
            }
        }
    });
}

Var add_row_bias(const Var& x, const Var& bias) {
    require(x.value().rank() == 2 && bias.value().rank() == 1 && bias.value().dim(0) == x.value().dim(1),
            "add_row_bias: expected [N,M] + [M], got " + x.value().shape_string() + " + " +
                bias.value().shape_string());
    const int rows = x.value().dim(0);
    const int cols = x.value().dim(1);
    NdArray out = x.value();
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) out.data[r * cols + c] += bias.value().data[c];
    }
    return make(std::move(out), {x.node(), bias.node()}, [rows, cols](Node& self) {
        if (self.parents[0]->requires_grad) self.parents[0]->accumulate(self.grad.data);
        if (self.parents[1]->requires_grad) {
            auto& g = self.parents[1]->grad_buffer().data;
            for (int r = 0; r < rows; ++r) {
                for (int c = 0; c < cols; ++c) g[c] += self.grad.data[r * cols + c];
            }
        }
    });
}

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int padding) {
    const NdArray& xv = x.value();
    const NdArray& wv = weight.value();
    require(xv.rank() == 3 && wv.rank() == 4 && wv.dim(1) == xv.dim(0) && wv.dim(2) == wv.dim(3),
            "conv2d: input " + xv.shape_string() + " incompatible with kernel " + wv.shape_string());
    const int in_c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
    const int out_c = wv.dim(0), k = wv.dim(2);
    const int ho = (h + 2 * padding - k) / stride + 1;
    const int wo = (w + 2 * padding - k) / stride + 1;
    require(ho > 0 && wo > 0, "conv2d: empty output for input " + xv.shape_string());
    const int patch = in_c * k * k;
    const int positions = ho * wo;

    auto cols = std::make_shared<std::vector<double>>(static_cast<std::size_t>(patch) * positions);
    im2col(xv.data.data(), in_c, h, w, k, stride, padding, ho, wo, cols->data());

    NdArray out({out_c, ho, wo});
    MatMap out_m(out.data.data(), out_c, positions);
    out_m.noalias() = ConstMatMap(wv.data.data(), out_c, patch) * ConstMatMap(cols->data(), patch, positions);
    if (bias.defined()) {
        require(bias.value().numel() == static_cast<std::size_t>(out_c), "conv2d: bias size mismatch");
        for (int o = 0; o < out_c; ++o) out_m.row(o).array() += bias.value().data[o];
    }

    std::vector<std::shared_ptr<Node>> parents{x.node(), weight.node()};
    if (bias.defined()) parents.push_back(bias.node());
    return make(std::move(out), std::move(parents),
                [=](Node& self) {
                    ConstMatMap grad_out(self.grad.data.data(), out_c, positions);
                    Node& px = *self.parents[0];
                    Node& pw = *self.parents[1];
                    if (pw.requires_grad) {
                        MatMap gw(pw.grad_buffer().data.data(), out_c, patch);
                        gw.noalias() += grad_out * ConstMatMap(cols->data(), patch, positions).transpose();
                    }
                    if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
                        auto& gb = self.parents[2]->grad_buffer().data;
                        // Plain loop: Eigen's vectorized sum over a Map depends on the
                        // buffer's alignment, which breaks run-to-run reproducibility.
                        const double* g = self.grad.data.data();
                        for (int o = 0; o < out_c; ++o) {
                            double acc = 0.0;
                            for (int p = 0; p < positions; ++p) acc += g[static_cast<std::size_t>(o) * positions + p];
                            gb[o] += acc;
                        }
                    }
                    if (px.requires_grad) {
                        std::vector<double> dcols(static_cast<std::size_t>(patch) * positions);
                        MatMap dcols_m(dcols.data(), patch, positions);
                        dcols_m.noalias() = ConstMatMap(pw.value.data.data(), out_c, patch).transpose() * grad_out;
                        col2im(dcols.data(), in_c, h, w, k, stride, padding, ho, wo,
                               px.grad_buffer().data.data());
                    }
                });
}

Var upsample2x(const Var& x, int out_h, int out_w) {
    const NdArray& xv = x.value();
    require(xv.rank() == 3, "upsample2x expects [C,H,W]");
    const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
    require(out_h <= 2 * h && out_w <= 2 * w, "upsample2x: target larger than 2x input");
    NdArray out({c, out_h, out_w});
    for (int ch = 0; ch < c; ++ch) {
        for (int y = 0; y < out_h; ++y) {
            for (int xx = 0; xx < out_w; ++xx) {
                out.data[(static_cast<std::size_t>(ch) * out_h + y) * out_w + xx] =
                    xv.data[(static_cast<std::size_t>(ch) * h + y / 2) * w + xx / 2];
            }
        }
    }
    return make(std::move(out), {x.node()}, [=](Node& self) {
        auto& g = self.parents[0]->grad_buffer().data;
        for (int ch = 0; ch < c; ++ch) {
            for (int y = 0; y < out_h; ++y) {
                for (int xx = 0; xx < out_w; ++xx) {
                    g[(static_cast<std::size_t>(ch) * h + y / 2) * w + xx / 2] +=
                        self.grad.data[(static_cast<std::size_t>(ch) * out_h + y) * out_w + xx];
                }
            }
        }
    });
}

Var concat(const std::vector<Var>& parts) {
    require(!parts.empty(), "concat of nothing");
    std::vector<int> shape = parts.front().shape();
    shape[0] = 0;
    std::vector<std::size_t> sizes;
    std::vector<std::shared_ptr<Node>> parents;
    NdArray out;
    for (const auto& p : parts) {
        auto tail = p.shape();
        require(tail.size() == shape.size() && std::equal(tail.begin() + 1, tail.end(), shape.begin() + 1),
                "concat: trailing dims mismatch " + p.value().shape_string());
        shape[0] += tail[0];
        sizes.push_back(p.value().numel());
        out.data.insert(out.data.end(), p.value().data.begin(), p.value().data.end());
        parents.push_back(p.node());
    }
    out.shape = shape;
    return make(std::move(out), std::move(parents), [sizes](Node& self) {
        std::size_t offset = 0;
        for (std::size_t i = 0; i < sizes.size(); ++i) {
            if (self.parents[i]->requires_grad) {
                self.parents[i]->accumulate(std::span<const double>(self.grad.data).subspan(offset, sizes[i]));
            }
            offset += sizes[i];
        }
    });
}

Var slice(const Var& x, int begin, int count) {
    const NdArray& xv = x.value();
    require(begin >= 0 && count >= 0 && begin + count <= xv.dim(0), "slice out of range");
    const std::size_t inner = xv.numel() / static_cast<std::size_t>(std::max(1, xv.dim(0)));
    std::vector<int> shape = xv.shape;
    shape[0] = count;
    NdArray out(shape, std::vector<double>(xv.data.begin() + begin * inner,
                                           xv.data.begin() + (begin + count) * inner));
    return make(std::move(out), {x.node()}, [begin, inner](Node& self) {
        auto& g = self.parents[0]->grad_buffer().data;
        for (std::size_t i = 0; i < self.grad.data.size(); ++i) g[begin * inner + i] += self.grad.data[i];
    });
}

Var reshape(const Var& x, std::vector<int> shape) {
    require(product(shape) == x.value().numel(), "reshape: element count mismatch");
    NdArray out(std::move(shape), x.value().data);
    return make(std::move(out), {x.node()}, [](Node& self) { self.parents[0]->accumulate(self.grad.data); });
}

Var matmul(const Var& a, const Var& b) {
    const NdArray& av = a.value();
    const NdArray& bv = b.value();
    require(av.rank() == 2 && bv.rank() == 2 && av.dim(1) == bv.dim(0),
            "matmul: " + av.shape_string() + " x " + bv.shape_string());
    const int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    NdArray out({m, n});
    MatMap(out.data.data(), m, n).noalias() = ConstMatMap(av.data.data(), m, k) * ConstMatMap(bv.data.data(), k, n);
    return make(std::move(out), {a.node(), b.node()}, [m, k, n](Node& self) {
        ConstMatMap g(self.grad.data.data(), m, n);
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        if (pa.requires_grad) {
            MatMap(pa.grad_buffer().data.data(), m, k).noalias() +=
                g * ConstMatMap(pb.value.data.data(), k, n).transpose();
        }
        if (pb.requires_grad) {
            MatMap(pb.grad_buffer().data.data(), k, n).noalias() +=
                ConstMatMap(pa.value.data.data(), m, k).transpose() * g;
        }
    });
}

Var transpose(const Var& a) {
    const NdArray& av = a.value();
    require(av.rank() == 2, "transpose expects a matrix");
    const int m = av.dim(0), n = av.dim(1);
    NdArray out({n, m});
    MatMap(out.data.data(), n, m) = ConstMatMap(av.data.data(), m, n).transpose();
    return make(std::move(out), {a.node()}, [m, n](Node& self) {
        MatMap(self.parents[0]->grad_buffer().data.data(), m, n) +=
            ConstMatMap(self.grad.data.data(), n, m).transpose();
    });
}

Var softmax_rows(const Var& a) {
    const NdArray& av = a.value();
    require(av.rank() == 2, "softmax_rows expects a matrix");
    const int m = av.dim(0), n = av.dim(1);
    NdArray out = av;
    for (int r = 0; r < m; ++r) {
        double* row = out.data.data() + static_cast<std::size_t>(r) * n;
        const double peak = *std::max_element(row, row + n);
        double total = 0.0;
        for (int c = 0; c < n; ++c) total += (row[c] = std::exp(row[c] - peak));
        for (int c = 0; c < n; ++c) row[c] /= total;
    }
    return make(std::move(out), {a.node()}, [m, n](Node& self) {
        auto& g = self.parents[0]->grad_buffer().data;
        for (int r = 0; r < m; ++r) {
            const double* y = self.value.data.data() + static_cast<std::size_t>(r) * n;
            const double* gy = self.grad.data.data() + static_cast<std::size_t>(r) * n;
            double dot = 0.0;
            for (int c = 0; c < n; ++c) dot += y[c] * gy[c];
            for (int c = 0; c < n; ++c) g[static_cast<std::size_t>(r) * n + c] += y[c] * (gy[c] - dot);
        }
    });
}

Var normalize_columns(const Var& x, double eps) {
    const NdArray& xv = x.value();
    require(xv.rank() == 2, "normalize_columns expects a matrix");
    const int rows = xv.dim(0), cols = xv.dim(1);
    std::vector<double> norms(cols, 0.0);
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) norms[c] += xv.data[r * cols + c] * xv.data[r * cols + c];
    }
    for (auto& v : norms) v = std::sqrt(v + eps);
    NdArray out = xv;
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) out.data[r * cols + c] /= norms[c];
    }
    return make(std::move(out), {x.node()}, [rows, cols, norms](Node& self) {
        auto& g = self.parents[0]->grad_buffer().data;
        for (int c = 0; c < cols; ++c) {
            double dot = 0.0;
            for (int r = 0; r < rows; ++r) dot += self.value.data[r * cols + c] * self.grad.data[r * cols + c];
            for (int r = 0; r < rows; ++r) {
                const std::size_t i = static_cast<std::size_t>(r) * cols + c;
                g[i] += (self.grad.data[i] - self.value.data[i] * dot) / norms[c];
            }
        }
    });
}

Var sum(const Var& a) {
    double total = 0.0;
    for (double v : a.value().data) total += v;
    return make(NdArray({1}, std::vector<double>{total}), {a.node()}, [](Node& self) {
        auto& g = self.parents[0]->grad_buffer().data;
        for (auto& v : g) v += self.grad.data[0];
    });
}

Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().numel())); }

Var mse(const Var& a, const Var& b) {
    const Var diff = sub(a, b);
    return mean(mul(diff, diff));
}

Var l1(const Var& a, const Var& b) {
    check_same(a, b, "l1");
    const std::size_t n = a.value().numel();
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += std::abs(a.value().data[i] - b.value().data[i]);
    return make(NdArray({1}, std::vector<double>{total / static_cast<double>(n)}), {a.node(), b.node()},
                [n](Node& self) {
                    Node& pa = *self.parents[0];
                    Node& pb = *self.parents[1];
                    const double scale = self.grad.data[0] / static_cast<double>(n);
                    for (std::size_t i = 0; i < n; ++i) {
                        const double d = pa.value.data[i] - pb.value.data[i];
                        const double s = d > 0 ? scale : (d < 0 ? -scale : 0.0);
                        if (pa.requires_grad) pa.grad_buffer().data[i] += s;
                        if (pb.requires_grad) pb.grad_buffer().data[i] -= s;
                    }
                });
}

}  // namespace mgd::ad
