#include "bdforge/kernels.hpp"

#include <algorithm>

// Each parallel kernel distributes whole output elements across threads;
// the per-element accumulation order matches the serial reference exactly,
// so serial and parallel results are bit-identical.

namespace bdforge::kernels::parallel {

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_matmul_shapes(a, b);
    const int m = a.extent(0), k = a.extent(1), n = b.extent(1);
    if (b.extent(0) != k) {
        throw ShapeError("matmul inner extents differ: " + a.shape_str() + " vs " + b.shape_str());
    }
    Tensor c({m, n});
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += a.at(i, p) * b.at(p, j);
            c.at(i, j) = acc;
        }
    }
    return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    check_matmul_shapes(a, b);
    const int m = a.extent(0), k = a.extent(1), n = b.extent(0);
    if (b.extent(1) != k) {
        throw ShapeError("matmul_nt inner extents differ: " + a.shape_str() + " vs " +
                         b.shape_str());
    }
    Tensor c({m, n});
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += a.at(i, p) * b.at(j, p);
            c.at(i, j) = acc;
        }
    }
    return c;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    check_matmul_shapes(a, b);
    const int m = a.extent(0), k = a.extent(1), n = b.extent(1);
    if (b.extent(0) != m) {
        throw ShapeError("matmul_tn leading extents differ: " + a.shape_str() + " vs " +
                         b.shape_str());
    }
    Tensor c({k, n});
#pragma omp parallel for schedule(static)
    for (int i = 0; i < k; ++i) {
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int p = 0; p < m; ++p) acc += a.at(p, i) * b.at(p, j);
            c.at(i, j) = acc;
        }
    }
    return c;
}

Tensor conv2d(const Tensor& x, const Tensor& k) {
    check_conv2d_shapes(x, k);
    const int B = x.extent(0), H = x.extent(1), W = x.extent(2), Ci = x.extent(3);
    const int KH = k.extent(0), KW = k.extent(1), Co = k.extent(3);
    const int OH = H - KH + 1, OW = W - KW + 1;
    (void)H;
    Tensor y({B, OH, OW, Co});
#pragma omp parallel for schedule(static)
    for (int b = 0; b < B; ++b) {
        for (int oh = 0; oh < OH; ++oh) {
            for (int ow = 0; ow < OW; ++ow) {
                for (int co = 0; co < Co; ++co) {
                    double acc = 0.0;
                    for (int kh = 0; kh < KH; ++kh) {
                        for (int kw = 0; kw < KW; ++kw) {
                            for (int ci = 0; ci < Ci; ++ci) {
                                acc += x.at(b, oh + kh, ow + kw, ci) * k.at(kh, kw, ci, co);
                            }
                        }
                    }
                    y.at(b, oh, ow, co) = acc;
                }
            }
        }
    }
    return y;
}

Tensor conv2d_grad_input(const Tensor& dy, const Tensor& k, const std::vector<int>& x_shape) {
    const int B = x_shape[0], H = x_shape[1], W = x_shape[2], Ci = x_shape[3];
    const int KH = k.extent(0), KW = k.extent(1), Co = k.extent(3);
    const int OH = dy.extent(1), OW = dy.extent(2);
    Tensor dx({B, H, W, Ci});
#pragma omp parallel for schedule(static)
    for (int b = 0; b < B; ++b) {
        for (int h = 0; h < H; ++h) {
            for (int w = 0; w < W; ++w) {
                for (int ci = 0; ci < Ci; ++ci) {
                    double acc = 0.0;
                    for (int kh = 0; kh < KH; ++kh) {
                        const int oh = h - kh;
                        if (oh < 0 || oh >= OH) continue;
                        for (int kw = 0; kw < KW; ++kw) {
                            const int ow = w - kw;
                            if (ow < 0 || ow >= OW) continue;
                            for (int co = 0; co < Co; ++co) {
                                acc += dy.at(b, oh, ow, co) * k.at(kh, kw, ci, co);
                            }
                        }
                    }
                    dx.at(b, h, w, ci) = acc;
                }
            }
        }
    }
    return dx;
}

Tensor conv2d_grad_kernel(const Tensor& x, const Tensor& dy, const std::vector<int>& k_shape) {
    const int B = x.extent(0);
    const int KH = k_shape[0], KW = k_shape[1], Ci = k_shape[2], Co = k_shape[3];
    const int OH = dy.extent(1), OW = dy.extent(2);
    Tensor dk({KH, KW, Ci, Co});
    const int elems = KH * KW * Ci * Co;
#pragma omp parallel for schedule(static)
    for (int e = 0; e < elems; ++e) {
        const int co = e % Co;
        const int ci = (e / Co) % Ci;
        const int kw = (e / (Co * Ci)) % KW;
        const int kh = e / (Co * Ci * KW);
        double acc = 0.0;
        for (int b = 0; b < B; ++b) {
            for (int oh = 0; oh < OH; ++oh) {
                for (int ow = 0; ow < OW; ++ow) {
                    acc += x.at(b, oh + kh, ow + kw, ci) * dy.at(b, oh, ow, co);
                }
            }
        }
        dk[static_cast<std::size_t>(e)] = acc;
    }
    return dk;
}

Tensor conv1d(const Tensor& x, const Tensor& k) {
    check_conv1d_shapes(x, k);
    const int B = x.extent(0), T = x.extent(1), Ci = x.extent(2);
    const int K = k.extent(0), Co = k.extent(2);
    const int OT = T - K + 1;
    Tensor y({B, OT, Co});
#pragma omp parallel for schedule(static)
    for (int b = 0; b < B; ++b) {
        for (int ot = 0; ot < OT; ++ot) {
            for (int co = 0; co < Co; ++co) {
                double acc = 0.0;
                for (int kk = 0; kk < K; ++kk) {
                    for (int ci = 0; ci < Ci; ++ci) {
                        acc += x.at(b, ot + kk, ci) * k.at(kk, ci, co);
                    }
                }
                y.at(b, ot, co) = acc;
            }
        }
    }
    return y;
}

Tensor conv1d_grad_input(const Tensor& dy, const Tensor& k, const std::vector<int>& x_shape) {
    const int B = x_shape[0], T = x_shape[1], Ci = x_shape[2];
    const int K = k.extent(0), Co = k.extent(2);
    const int OT = dy.extent(1);
    Tensor dx({B, T, Ci});
#pragma omp parallel for schedule(static)
    for (int b = 0; b < B; ++b) {
        for (int t = 0; t < T; ++t) {
            for (int ci = 0; ci < Ci; ++ci) {
                double acc = 0.0;
                for (int kk = 0; kk < K; ++kk) {
                    const int ot = t - kk;
                    if (ot < 0 || ot >= OT) continue;
                    for (int co = 0; co < Co; ++co) {
                        acc += dy.at(b, ot, co) * k.at(kk, ci, co);
                    }
                }
                dx.at(b, t, ci) = acc;
            }
        }
    }
    return dx;
}

Tensor conv1d_grad_kernel(const Tensor& x, const Tensor& dy, const std::vector<int>& k_shape) {
    const int B = x.extent(0);
    const int K = k_shape[0], Ci = k_shape[1], Co = k_shape[2];
    const int OT = dy.extent(1);
    Tensor dk({K, Ci, Co});
    const int elems = K * Ci * Co;
#pragma omp parallel for schedule(static)
    for (int e = 0; e < elems; ++e) {
        const int co = e % Co;
        const int ci = (e / Co) % Ci;
        const int kk = e / (Co * Ci);
        double acc = 0.0;
        for (int b = 0; b < B; ++b) {
            for (int ot = 0; ot < OT; ++ot) {
                acc += x.at(b, ot + kk, ci) * dy.at(b, ot, co);
            }
        }
        dk[static_cast<std::size_t>(e)] = acc;
    }
    return dk;
}

std::pair<Tensor, std::vector<std::uint32_t>> maxpool2(const Tensor& x) {
    if (x.rank() != 4) throw ShapeError("maxpool2 expects x[B,H,W,C], got " + x.shape_str());
    const int B = x.extent(0), H = x.extent(1), W = x.extent(2), C = x.extent(3);
    const int OH = H / 2, OW = W / 2;
    if (OH == 0 || OW == 0) throw ShapeError("maxpool2 input too small: " + x.shape_str());
    Tensor y({B, OH, OW, C});
    std::vector<std::uint32_t> argmax(y.size());
#pragma omp parallel for schedule(static)
    for (int b = 0; b < B; ++b) {
        std::size_t out = static_cast<std::size_t>(b) * OH * OW * C;
        for (int oh = 0; oh < OH; ++oh) {
            for (int ow = 0; ow < OW; ++ow) {
                for (int c = 0; c < C; ++c) {
                    double best = x.at(b, 2 * oh, 2 * ow, c);
                    int bi = 2 * oh, bj = 2 * ow;
                    for (int di = 0; di < 2; ++di) {
                        for (int dj = 0; dj < 2; ++dj) {
                            const double v = x.at(b, 2 * oh + di, 2 * ow + dj, c);
                            if (v > best) {
                                best = v;
                                bi = 2 * oh + di;
                                bj = 2 * ow + dj;
                            }
                        }
                    }
                    y.at(b, oh, ow, c) = best;
                    const std::size_t flat =
                        ((static_cast<std::size_t>(b) * H + bi) * W + bj) * C + c;
                    argmax[out++] = static_cast<std::uint32_t>(flat);
                }
            }
        }
    }
    return {std::move(y), std::move(argmax)};
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (a.same_shape(b)) {
        Tensor c = a;
        const long long n = static_cast<long long>(c.size());
#pragma omp parallel for schedule(static)
        for (long long i = 0; i < n; ++i) c[static_cast<std::size_t>(i)] += b[static_cast<std::size_t>(i)];
        return c;
    }
    if (b.rank() == 1 && a.rank() >= 1 && a.extent(a.rank() - 1) == b.extent(0)) {
        Tensor c = a;
        const std::size_t bn = static_cast<std::size_t>(b.extent(0));
        const long long n = static_cast<long long>(c.size());
#pragma omp parallel for schedule(static)
        for (long long i = 0; i < n; ++i) {
            c[static_cast<std::size_t>(i)] += b[static_cast<std::size_t>(i) % bn];
        }
        return c;
    }
    throw ShapeError("add shapes incompatible: " + a.shape_str() + " vs " + b.shape_str());
}

Tensor mul(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) {
        throw ShapeError("mul shapes differ: " + a.shape_str() + " vs " + b.shape_str());
    }
    Tensor c = a;
    const long long n = static_cast<long long>(c.size());
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < n; ++i) c[static_cast<std::size_t>(i)] *= b[static_cast<std::size_t>(i)];
    return c;
}

Tensor relu(const Tensor& a) {
    Tensor c = a;
    const long long n = static_cast<long long>(c.size());
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < n; ++i) {
        c[static_cast<std::size_t>(i)] = std::max(0.0, c[static_cast<std::size_t>(i)]);
    }
    return c;
}

}  // namespace bdforge::kernels::parallel
