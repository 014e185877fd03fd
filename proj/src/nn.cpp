#include "motionforge/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "motionforge/error.hpp"

namespace motionforge::nn {

std::size_t element_count(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        require(d >= 0, ErrorKind::shape, "negative tensor dimension");
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

Tensor::Tensor(std::vector<int> shape_, double fill) : shape(std::move(shape_)) {
    data.assign(element_count(shape), fill);
}

Tensor::Tensor(std::vector<int> shape_, std::vector<double> data_) : shape(std::move(shape_)), data(std::move(data_)) {
    require(data.size() == element_count(shape), ErrorKind::shape, "tensor data does not match its shape");
}

Var Tape::constant(Tensor value) {
    nodes_.push_back({std::move(value), {}, false, {}});
    return nodes_.size() - 1;
}

Var Tape::parameter(Tensor value) {
    nodes_.push_back({std::move(value), {}, record_, {}});
    return nodes_.size() - 1;
}

Var Tape::push(Tensor value, std::initializer_list<Var> inputs, std::function<void(Tape&, Var)> back) {
    bool needs = false;
    if (record_) {
        for (Var v : inputs) {
            needs = needs || nodes_[v].needs_grad;
        }
    }
    nodes_.push_back({std::move(value), {}, needs, needs ? std::move(back) : nullptr});
    return nodes_.size() - 1;
}

std::vector<double>& Tape::grad_buffer(Var v) {
    Node& n = nodes_[v];
    if (n.grad.empty()) {
        n.grad.assign(n.value.size(), 0.0);
    }
    return n.grad;
}

void Tape::backward(Var root) {
    require(record_, ErrorKind::state, "backward on a non-recording tape");
    require(nodes_[root].value.size() == 1, ErrorKind::shape, "backward root must be a scalar");
    grad_buffer(root)[0] = 1.0;
    for (Var i = root + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (n.back && !n.grad.empty()) {
            n.back(*this, i);
        }
    }
}

namespace {

void expect_rank(const Tensor& t, std::size_t rank, const char* op) {
    require(t.shape.size() == rank, ErrorKind::shape, std::string(op) + ": unexpected tensor rank");
}

}  // namespace

Var conv2d(Tape& t, Var xv, Var wv, Var bv, int stride, int pad) {
    const Tensor& x = t.value(xv);
    const Tensor& w = t.value(wv);
    const Tensor& b = t.value(bv);
    expect_rank(x, 4, "conv2d");
    expect_rank(w, 4, "conv2d");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int O = w.dim(0), k = w.dim(2);
    require(w.dim(1) == C && w.dim(3) == k, ErrorKind::shape, "conv2d: weight shape mismatch");
    require(b.size() == static_cast<std::size_t>(O), ErrorKind::shape, "conv2d: bias shape mismatch");
    const int OH = (H + 2 * pad - k) / stride + 1;
    const int OW = (W + 2 * pad - k) / stride + 1;
    require(OH > 0 && OW > 0, ErrorKind::shape, "conv2d: input smaller than kernel");

    // Valid output column range for a given kernel column offset.
    auto floor_div = [](int a, int b) { return a >= 0 ? a / b : -((-a + b - 1) / b); };
    auto col_range = [=](int kx, int& lo, int& hi) {
        lo = std::max(0, -floor_div(kx - pad, stride));
        hi = std::min(OW, floor_div(W - 1 + pad - kx, stride) + 1);
    };

    Tensor out({N, O, OH, OW});
    for (int n = 0; n < N; ++n) {
        for (int o = 0; o < O; ++o) {
            double* op = &out.data[((static_cast<std::size_t>(n) * O + o) * OH) * OW];
            std::fill(op, op + static_cast<std::size_t>(OH) * OW, b.data[o]);
            for (int c = 0; c < C; ++c) {
                const double* xp = &x.data[((static_cast<std::size_t>(n) * C + c) * H) * W];
                const double* wp = &w.data[((static_cast<std::size_t>(o) * C + c) * k) * k];
                for (int ky = 0; ky < k; ++ky) {
                    for (int kx = 0; kx < k; ++kx) {
                        const double wgt = wp[ky * k + kx];
                        int lo, hi;
                        col_range(kx, lo, hi);
                        for (int oy = 0; oy < OH; ++oy) {
                            const int iy = oy * stride + ky - pad;
                            if (iy < 0 || iy >= H) continue;
                            const double* xrow = xp + static_cast<std::size_t>(iy) * W;
                            double* orow = op + static_cast<std::size_t>(oy) * OW;
                            const int shift = kx - pad;
                            for (int ox = lo; ox < hi; ++ox) {
                                orow[ox] += wgt * xrow[ox * stride + shift];
                            }
                        }
                    }
                }
            }
        }
    }

    return t.push(std::move(out), {xv, wv, bv}, [=](Tape& tp, Var self) {
        const Tensor& x = tp.value(xv);
        const Tensor& w = tp.value(wv);
        const std::vector<double>& g = tp.grad(self);
        const bool gx_on = tp.needs_grad(xv);
        const bool gw_on = tp.needs_grad(wv);
        const bool gb_on = tp.needs_grad(bv);
        double* gx = gx_on ? tp.grad_buffer(xv).data() : nullptr;
        double* gw = gw_on ? tp.grad_buffer(wv).data() : nullptr;
        double* gb = gb_on ? tp.grad_buffer(bv).data() : nullptr;
        for (int n = 0; n < N; ++n) {
            for (int o = 0; o < O; ++o) {
                const double* gp = &g[((static_cast<std::size_t>(n) * O + o) * OH) * OW];
                if (gb) {
                    gb[o] += std::accumulate(gp, gp + static_cast<std::size_t>(OH) * OW, 0.0);
                }
                for (int c = 0; c < C; ++c) {
                    const std::size_t xoff = ((static_cast<std::size_t>(n) * C + c) * H) * W;
                    const std::size_t woff = ((static_cast<std::size_t>(o) * C + c) * k) * k;
                    for (int ky = 0; ky < k; ++ky) {
                        for (int kx = 0; kx < k; ++kx) {
                            const double wgt = w.data[woff + ky * k + kx];
                            double acc = 0.0;
                            int lo, hi;
                            col_range(kx, lo, hi);
                            for (int oy = 0; oy < OH; ++oy) {
                                const int iy = oy * stride + ky - pad;
                                if (iy < 0 || iy >= H) continue;
                                const std::size_t xrow = xoff + static_cast<std::size_t>(iy) * W;
                                const int shift = kx - pad;
                                const double* grow = gp + static_cast<std::size_t>(oy) * OW;
                                if (gx) {
                                    double* gxr = gx + xrow;
                                    for (int ox = lo; ox < hi; ++ox) {
                                        gxr[ox * stride + shift] += wgt * grow[ox];
                                    }
                                }
                                if (gw) {
                                    const double* xr = x.data.data() + xrow;
                                    for (int ox = lo; ox < hi; ++ox) {
                                        acc += grow[ox] * xr[ox * stride + shift];
                                    }
                                }
                            }
                            if (gw) {
                                gw[woff + ky * k + kx] += acc;
                            }
                        }
                    }
                }
            }
        }
    });
}

Var add(Tape& t, Var a, Var b) {
    const Tensor& x = t.value(a);
    const Tensor& y = t.value(b);
    require(x.shape == y.shape, ErrorKind::shape, "add: shape mismatch");
    Tensor out = x;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += y.data[i];
    return t.push(std::move(out), {a, b}, [=](Tape& tp, Var self) {
        const std::vector<double>& g = tp.grad(self);
        for (Var v : {a, b}) {
            if (!tp.needs_grad(v)) continue;
            auto& gv = tp.grad_buffer(v);
            for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
        }
    });
}

Var silu(Tape& t, Var xv) {
    Tensor out = t.value(xv);
    for (double& v : out.data) v = v / (1.0 + std::exp(-v));
    return t.push(std::move(out), {xv}, [=](Tape& tp, Var self) {
        const Tensor& x = tp.value(xv);
        const auto& g = tp.grad(self);
        auto& gx = tp.grad_buffer(xv);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double s = 1.0 / (1.0 + std::exp(-x.data[i]));
            gx[i] += g[i] * s * (1.0 + x.data[i] * (1.0 - s));
        }
    });
}

Var add_channel_bias(Tape& t, Var xv, Var bv) {
    const Tensor& x = t.value(xv);
    const Tensor& b = t.value(bv);
    expect_rank(x, 4, "add_channel_bias");
    const int N = x.dim(0), C = x.dim(1);
    const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
    require(b.shape == std::vector<int>{N, C}, ErrorKind::shape, "add_channel_bias: bias must be [N,C]");
    Tensor out = x;
    for (std::size_t nc = 0; nc < static_cast<std::size_t>(N) * C; ++nc) {
        for (std::size_t i = 0; i < plane; ++i) out.data[nc * plane + i] += b.data[nc];
    }
    return t.push(std::move(out), {xv, bv}, [=](Tape& tp, Var self) {
        const std::vector<double>& g = tp.grad(self);
        if (tp.needs_grad(xv)) {
            auto& gx = tp.grad_buffer(xv);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        if (tp.needs_grad(bv)) {
            auto& gb = tp.grad_buffer(bv);
            for (std::size_t nc = 0; nc < gb.size(); ++nc) {
                gb[nc] += std::accumulate(g.begin() + nc * plane, g.begin() + (nc + 1) * plane, 0.0);
            }
        }
    });
}

Var linear(Tape& t, Var xv, Var wv, Var bv) {
    const Tensor& x = t.value(xv);
    const Tensor& w = t.value(wv);
    expect_rank(x, 2, "linear");
    const int B = x.dim(0), D = x.dim(1), O = w.dim(0);
    require(w.shape == std::vector<int>{O, D} && t.value(bv).size() == static_cast<std::size_t>(O), ErrorKind::shape,
            "linear: weight shape mismatch");
    Tensor out({B, O});
    for (int i = 0; i < B; ++i) {
        for (int o = 0; o < O; ++o) {
            double s = t.value(bv).data[o];
            for (int d = 0; d < D; ++d) s += w.data[o * D + d] * x.data[i * D + d];
            out.data[i * O + o] = s;
        }
    }
    return t.push(std::move(out), {xv, wv, bv}, [=](Tape& tp, Var self) {
        const Tensor& x = tp.value(xv);
        const Tensor& w = tp.value(wv);
        const std::vector<double>& g = tp.grad(self);
        double* gx = tp.needs_grad(xv) ? tp.grad_buffer(xv).data() : nullptr;
        double* gw = tp.needs_grad(wv) ? tp.grad_buffer(wv).data() : nullptr;
        double* gb = tp.needs_grad(bv) ? tp.grad_buffer(bv).data() : nullptr;
        for (int i = 0; i < B; ++i) {
            for (int o = 0; o < O; ++o) {
                const double go = g[i * O + o];
                if (gb) gb[o] += go;
                for (int d = 0; d < D; ++d) {
                    if (gx) gx[i * D + d] += go * w.data[o * D + d];
                    if (gw) gw[o * D + d] += go * x.data[i * D + d];
                }
            }
        }
    });
}

Var repeat_rows(Tape& t, Var xv, int r) {
    const Tensor& x = t.value(xv);
    expect_rank(x, 2, "repeat_rows");
    const int B = x.dim(0), D = x.dim(1);
    Tensor out({B * r, D});
    for (int i = 0; i < B; ++i) {
        for (int j = 0; j < r; ++j) {
            std::copy_n(&x.data[i * D], D, &out.data[(i * r + j) * D]);
        }
    }
    return t.push(std::move(out), {xv}, [=](Tape& tp, Var self) {
        const std::vector<double>& g = tp.grad(self);
        auto& gx = tp.grad_buffer(xv);
        for (int i = 0; i < B; ++i) {
            for (int j = 0; j < r; ++j) {
                for (int d = 0; d < D; ++d) gx[i * D + d] += g[(i * r + j) * D + d];
            }
        }
    });
}

Var upsample2(Tape& t, Var xv) {
    const Tensor& x = t.value(xv);
    expect_rank(x, 4, "upsample2");
    const int NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor out({x.dim(0), x.dim(1), 2 * H, 2 * W});
    for (int p = 0; p < NC; ++p) {
        for (int y = 0; y < 2 * H; ++y) {
            for (int xx = 0; xx < 2 * W; ++xx) {
                out.data[(static_cast<std::size_t>(p) * 2 * H + y) * 2 * W + xx] =
                    x.data[(static_cast<std::size_t>(p) * H + y / 2) * W + xx / 2];
            }
        }
    }
    return t.push(std::move(out), {xv}, [=](Tape& tp, Var self) {
        const std::vector<double>& g = tp.grad(self);
        auto& gx = tp.grad_buffer(xv);
        for (int p = 0; p < NC; ++p) {
            for (int y = 0; y < 2 * H; ++y) {
                for (int xx = 0; xx < 2 * W; ++xx) {
                    gx[(static_cast<std::size_t>(p) * H + y / 2) * W + xx / 2] +=
                        g[(static_cast<std::size_t>(p) * 2 * H + y) * 2 * W + xx];
                }
            }
        }
    });
}

Var concat_channels(Tape& t, Var av, Var bv) {
    const Tensor& a = t.value(av);
    const Tensor& b = t.value(bv);
    expect_rank(a, 4, "concat_channels");
    expect_rank(b, 4, "concat_channels");
    require(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3), ErrorKind::shape,
            "concat_channels: shape mismatch");
    const int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1);
    const std::size_t plane = static_cast<std::size_t>(a.dim(2)) * a.dim(3);
    Tensor out({N, Ca + Cb, a.dim(2), a.dim(3)});
    for (int n = 0; n < N; ++n) {
        std::copy_n(&a.data[n * Ca * plane], Ca * plane, &out.data[n * (Ca + Cb) * plane]);
        std::copy_n(&b.data[n * Cb * plane], Cb * plane, &out.data[(n * (Ca + Cb) + Ca) * plane]);
    }
    return t.push(std::move(out), {av, bv}, [=](Tape& tp, Var self) {
        const std::vector<double>& g = tp.grad(self);
        if (tp.needs_grad(av)) {
            auto& ga = tp.grad_buffer(av);
            for (int n = 0; n < N; ++n) {
                for (std::size_t i = 0; i < Ca * plane; ++i) ga[n * Ca * plane + i] += g[n * (Ca + Cb) * plane + i];
            }
        }
        if (tp.needs_grad(bv)) {
            auto& gb = tp.grad_buffer(bv);
            for (int n = 0; n < N; ++n) {
                for (std::size_t i = 0; i < Cb * plane; ++i) {
                    gb[n * Cb * plane + i] += g[(n * (Ca + Cb) + Ca) * plane + i];
                }
            }
        }
    });
}

Var group_mean(Tape& t, Var xv, int group) {
    const Tensor& x = t.value(xv);
    expect_rank(x, 4, "group_mean");
    const int N = x.dim(0);
    require(group > 0 && N % group == 0, ErrorKind::shape, "group_mean: batch not divisible by group");
    const std::size_t per = x.size() / N;
    Tensor out(x.shape);
    for (int g0 = 0; g0 < N; g0 += group) {
        for (std::size_t i = 0; i < per; ++i) {
            double s = 0.0;
            for (int l = 0; l < group; ++l) s += x.data[(g0 + l) * per + i];
            s /= group;
            for (int l = 0; l < group; ++l) out.data[(g0 + l) * per + i] = s;
        }
    }
    return t.push(std::move(out), {xv}, [=](Tape& tp, Var self) {
        const std::vector<double>& g = tp.grad(self);
        auto& gx = tp.grad_buffer(xv);
        for (int g0 = 0; g0 < N; g0 += group) {
            for (std::size_t i = 0; i < per; ++i) {
                double s = 0.0;
                for (int l = 0; l < group; ++l) s += g[(g0 + l) * per + i];
                s /= group;
                for (int l = 0; l < group; ++l) gx[(g0 + l) * per + i] += s;
            }
        }
    });
}

void attention_forward(std::span<const double> z, std::span<const double> zm, int n, int c, int cm,
                       std::span<const double> wq, std::span<const double> wk, std::span<const double> wv, int d,
                       int dv, std::span<double> out, std::span<double> attn) {
    std::vector<double> q(static_cast<std::size_t>(n) * d), k(static_cast<std::size_t>(n) * d),
        v(static_cast<std::size_t>(n) * dv);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < d; ++j) {
            double sq = 0.0, sk = 0.0;
            for (int a = 0; a < c; ++a) {
                sq += wq[j * c + a] * z[i * c + a];
                sk += wk[j * c + a] * z[i * c + a];
            }
            q[i * d + j] = sq;
            k[i * d + j] = sk;
        }
        for (int j = 0; j < dv; ++j) {
            double s = 0.0;
            for (int a = 0; a < cm; ++a) s += wv[j * cm + a] * zm[i * cm + a];
            v[i * dv + j] = s;
        }
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    for (int i = 0; i < n; ++i) {
        double* row = &attn[static_cast<std::size_t>(i) * n];
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < n; ++j) {
            double s = 0.0;
            for (int a = 0; a < d; ++a) s += q[i * d + a] * k[j * d + a];
            row[j] = s * scale;
            mx = std::max(mx, row[j]);
        }
        double total = 0.0;
        for (int j = 0; j < n; ++j) {
            row[j] = std::exp(row[j] - mx);
            total += row[j];
        }
        for (int j = 0; j < n; ++j) row[j] /= total;
        for (int a = 0; a < dv; ++a) {
            double s = 0.0;
            for (int j = 0; j < n; ++j) s += row[j] * v[j * dv + a];
            out[i * dv + a] = s;
        }
    }
}

namespace {

// Gathers the tokens of one group into [n, c] row-major order (token = frame * hw + pixel).
void gather_tokens(const Tensor& x, int first_image, int group, std::vector<double>& tok) {
    const int C = x.dim(1);
    const int hw = x.dim(2) * x.dim(3);
    tok.resize(static_cast<std::size_t>(group) * hw * C);
    for (int l = 0; l < group; ++l) {
        for (int ch = 0; ch < C; ++ch) {
            const double* src = &x.data[(static_cast<std::size_t>(first_image + l) * C + ch) * hw];
            for (int p = 0; p < hw; ++p) tok[(static_cast<std::size_t>(l) * hw + p) * C + ch] = src[p];
        }
    }
}

void scatter_add_tokens(std::vector<double>& x, const std::vector<int>& shape, int first_image, int group,
                        const std::vector<double>& tok) {
    const int C = shape[1];
    const int hw = shape[2] * shape[3];
    for (int l = 0; l < group; ++l) {
        for (int ch = 0; ch < C; ++ch) {
            double* dst = &x[(static_cast<std::size_t>(first_image + l) * C + ch) * hw];
            for (int p = 0; p < hw; ++p) dst[p] += tok[(static_cast<std::size_t>(l) * hw + p) * C + ch];
        }
    }
}

}  // namespace

Var motion_attention(Tape& t, Var zv, Var zmv, Var wqv, Var wkv, Var wvv, int group) {
    const Tensor& z = t.value(zv);
    const Tensor& zm = t.value(zmv);
    expect_rank(z, 4, "motion_attention");
    expect_rank(zm, 4, "motion_attention");
    const int N = z.dim(0), C = z.dim(1), h = z.dim(2), w = z.dim(3), Cm = zm.dim(1);
    const int d = t.value(wqv).dim(0), dv = t.value(wvv).dim(0);
    require(zm.dim(0) == N && zm.dim(2) == h && zm.dim(3) == w, ErrorKind::shape,
            "motion_attention: latent and motion token grids differ");
    require(t.value(wqv).shape == std::vector<int>{d, C} && t.value(wkv).shape == std::vector<int>{d, C} &&
                t.value(wvv).shape == std::vector<int>{dv, Cm},
            ErrorKind::shape, "motion_attention: projection shape mismatch");
    require(group > 0 && N % group == 0, ErrorKind::shape, "motion_attention: batch not divisible by group");
    const int hw = h * w;
    const int n = group * hw;

    Tensor out({N, dv, h, w});
    std::vector<double> zt, zmt, o(static_cast<std::size_t>(n) * dv), attn(static_cast<std::size_t>(n) * n);
    for (int g0 = 0; g0 < N; g0 += group) {
        gather_tokens(z, g0, group, zt);
        gather_tokens(zm, g0, group, zmt);
        attention_forward(zt, zmt, n, C, Cm, t.value(wqv).data, t.value(wkv).data, t.value(wvv).data, d, dv, o, attn);
        for (int l = 0; l < group; ++l) {
            for (int a = 0; a < dv; ++a) {
                for (int p = 0; p < hw; ++p) {
                    out.data[(static_cast<std::size_t>(g0 + l) * dv + a) * hw + p] = o[(l * hw + p) * dv + a];
                }
            }
        }
    }

    return t.push(std::move(out), {zv, zmv, wqv, wkv, wvv}, [=](Tape& tp, Var self) {
        const Tensor& z = tp.value(zv);
        const Tensor& zm = tp.value(zmv);
        const auto& wq = tp.value(wqv).data;
        const auto& wk = tp.value(wkv).data;
        const auto& wvw = tp.value(wvv).data;
        const std::vector<double>& g = tp.grad(self);
        const double scale = 1.0 / std::sqrt(static_cast<double>(d));
        std::vector<double> zt, zmt;
        std::vector<double> q(n * d), k(n * d), v(n * dv), a(static_cast<std::size_t>(n) * n);
        std::vector<double> go(n * dv), ga(static_cast<std::size_t>(n) * n), gq(n * d), gk(n * d), gvv(n * dv);
        for (int g0 = 0; g0 < N; g0 += group) {
            gather_tokens(z, g0, group, zt);
            gather_tokens(zm, g0, group, zmt);
            // Recompute projections and attention for this group.
            for (int i = 0; i < n; ++i) {
                for (int j = 0; j < d; ++j) {
                    double sq = 0.0, sk = 0.0;
                    for (int c = 0; c < C; ++c) {
                        sq += wq[j * C + c] * zt[i * C + c];
                        sk += wk[j * C + c] * zt[i * C + c];
                    }
                    q[i * d + j] = sq;
                    k[i * d + j] = sk;
                }
                for (int j = 0; j < dv; ++j) {
                    double s = 0.0;
                    for (int c = 0; c < Cm; ++c) s += wvw[j * Cm + c] * zmt[i * Cm + c];
                    v[i * dv + j] = s;
                }
            }
            for (int i = 0; i < n; ++i) {
                double mx = -std::numeric_limits<double>::infinity();
                for (int j = 0; j < n; ++j) {
                    double s = 0.0;
                    for (int c = 0; c < d; ++c) s += q[i * d + c] * k[j * d + c];
                    a[i * n + j] = s * scale;
                    mx = std::max(mx, a[i * n + j]);
                }
                double total = 0.0;
                for (int j = 0; j < n; ++j) {
                    a[i * n + j] = std::exp(a[i * n + j] - mx);
                    total += a[i * n + j];
                }
                for (int j = 0; j < n; ++j) a[i * n + j] /= total;
            }
            for (int l = 0; l < group; ++l) {
                for (int c = 0; c < dv; ++c) {
                    for (int p = 0; p < hw; ++p) {
                        go[(l * hw + p) * dv + c] = g[(static_cast<std::size_t>(g0 + l) * dv + c) * hw + p];
                    }
                }
            }
            // dA = dO V^T, dV = A^T dO, dS = A * (dA - rowsum(dA * A)).
            std::fill(gvv.begin(), gvv.end(), 0.0);
            for (int i = 0; i < n; ++i) {
                double dot = 0.0;
                for (int j = 0; j < n; ++j) {
                    double s = 0.0;
                    for (int c = 0; c < dv; ++c) s += go[i * dv + c] * v[j * dv + c];
                    ga[i * n + j] = s;
                    dot += s * a[i * n + j];
                    const double aij = a[i * n + j];
                    for (int c = 0; c < dv; ++c) gvv[j * dv + c] += aij * go[i * dv + c];
                }
                for (int j = 0; j < n; ++j) ga[i * n + j] = a[i * n + j] * (ga[i * n + j] - dot) * scale;
            }
            std::fill(gq.begin(), gq.end(), 0.0);
            std::fill(gk.begin(), gk.end(), 0.0);
            for (int i = 0; i < n; ++i) {
                for (int j = 0; j < n; ++j) {
                    const double s = ga[i * n + j];
                    if (s == 0.0) continue;
                    for (int c = 0; c < d; ++c) {
                        gq[i * d + c] += s * k[j * d + c];
                        gk[j * d + c] += s * q[i * d + c];
                    }
                }
            }
            if (tp.needs_grad(wqv) || tp.needs_grad(wkv)) {
                for (int j = 0; j < d; ++j) {
                    for (int c = 0; c < C; ++c) {
                        double sq = 0.0, sk = 0.0;
                        for (int i = 0; i < n; ++i) {
                            sq += gq[i * d + j] * zt[i * C + c];
                            sk += gk[i * d + j] * zt[i * C + c];
                        }
                        if (tp.needs_grad(wqv)) tp.grad_buffer(wqv)[j * C + c] += sq;
                        if (tp.needs_grad(wkv)) tp.grad_buffer(wkv)[j * C + c] += sk;
                    }
                }
            }
            if (tp.needs_grad(wvv)) {
                auto& gw = tp.grad_buffer(wvv);
                for (int j = 0; j < dv; ++j) {
                    for (int c = 0; c < Cm; ++c) {
                        double s = 0.0;
                        for (int i = 0; i < n; ++i) s += gvv[i * dv + j] * zmt[i * Cm + c];
                        gw[j * Cm + c] += s;
                    }
                }
            }
            if (tp.needs_grad(zv)) {
                std::vector<double> gz(static_cast<std::size_t>(n) * C, 0.0);
                for (int i = 0; i < n; ++i) {
                    for (int j = 0; j < d; ++j) {
                        const double a1 = gq[i * d + j], a2 = gk[i * d + j];
                        for (int c = 0; c < C; ++c) gz[i * C + c] += a1 * wq[j * C + c] + a2 * wk[j * C + c];
                    }
                }
                scatter_add_tokens(tp.grad_buffer(zv), z.shape, g0, group, gz);
            }
            if (tp.needs_grad(zmv)) {
                std::vector<double> gzm(static_cast<std::size_t>(n) * Cm, 0.0);
                for (int i = 0; i < n; ++i) {
                    for (int j = 0; j < dv; ++j) {
                        const double s = gvv[i * dv + j];
                        for (int c = 0; c < Cm; ++c) gzm[i * Cm + c] += s * wvw[j * Cm + c];
                    }
                }
                scatter_add_tokens(tp.grad_buffer(zmv), zm.shape, g0, group, gzm);
            }
        }
    });
}

Var affine_combine(Tape& t, Var xv, const Tensor& z, std::span<const double> a, std::span<const double> b) {
    const Tensor& x = t.value(xv);
    require(x.shape == z.shape, ErrorKind::shape, "affine_combine: shape mismatch");
    const int N = x.dim(0);
    require(a.size() == static_cast<std::size_t>(N) && b.size() == static_cast<std::size_t>(N), ErrorKind::shape,
            "affine_combine: coefficient count mismatch");
    const std::size_t per = x.size() / N;
    Tensor out(x.shape);
    for (int n = 0; n < N; ++n) {
        for (std::size_t i = 0; i < per; ++i) {
            out.data[n * per + i] = a[n] * z.data[n * per + i] - b[n] * x.data[n * per + i];
        }
    }
    std::vector<double> bc(b.begin(), b.end());
    return t.push(std::move(out), {xv}, [=](Tape& tp, Var self) {
        const std::vector<double>& g = tp.grad(self);
        auto& gx = tp.grad_buffer(xv);
        for (int n = 0; n < N; ++n) {
            for (std::size_t i = 0; i < per; ++i) gx[n * per + i] -= bc[n] * g[n * per + i];
        }
    });
}

Var squared_error(Tape& t, Var pv, const Tensor& target, double divisor) {
    const Tensor& p = t.value(pv);
    require(p.size() == target.size(), ErrorKind::shape, "squared_error: size mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double e = p.data[i] - target.data[i];
        s += e * e;
    }
    std::vector<double> tgt = target.data;
    return t.push(Tensor({1}, {s / divisor}), {pv}, [=, tgt = std::move(tgt)](Tape& tp, Var self) {
        const double g = tp.grad(self)[0];
        const Tensor& p = tp.value(pv);
        auto& gp = tp.grad_buffer(pv);
        for (std::size_t i = 0; i < p.size(); ++i) gp[i] += g * 2.0 * (p.data[i] - tgt[i]) / divisor;
    });
}

}  // namespace motionforge::nn
