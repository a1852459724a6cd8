#include "bdforge/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>

#include "bdforge/common.hpp"

namespace bdforge {

const Tensor& Var::val() const {
    if (tape == nullptr || id < 0) {
        throw Error("Var::val: unbound variable");
    }
    return tape->value(id);
}

namespace {

void require_same_tape(Var a, Var b, const char* op) {
    if (a.tape == nullptr || b.tape == nullptr) {
        throw Error(std::string(op) + ": unbound operand");
    }
    if (a.tape != b.tape) {
        throw Error(std::string(op) + ": operands recorded on different tapes");
    }
}

}  // namespace

Var Tape::leaf(Tensor value) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = true;
    n.is_leaf = true;
    nodes_.push_back(std::move(n));
    const int id = static_cast<int>(nodes_.size()) - 1;
    leaves_.push_back(id);
    return Var{this, id};
}

Var Tape::constant(Tensor value) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = false;
    n.is_leaf = false;
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::record(Tensor value, std::vector<int> parents, BackwardFn fn) {
    Node n;
    n.value = std::move(value);
    n.parents = std::move(parents);
    n.backward = std::move(fn);
    for (int p : n.parents) {
        if (p < 0 || p >= static_cast<int>(nodes_.size())) {
            throw Error("Tape::record: parent id out of range");
        }
        if (nodes_[static_cast<std::size_t>(p)].needs_grad) {
            n.needs_grad = true;
        }
    }
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
}

GradMap Tape::backward(Var loss) const {
    if (loss.tape != this) {
        throw Error("Tape::backward: loss recorded on a different tape");
    }
    const Tensor& loss_val = value(loss.id);
    if (!loss_val.is_scalar()) {
        throw ShapeError("Tape::backward: loss must be scalar, got shape " + loss_val.shape_str());
    }

    std::vector<std::optional<Tensor>> grads(nodes_.size());
    grads[static_cast<std::size_t>(loss.id)] = Tensor::scalar(1.0);

    for (int id = loss.id; id >= 0; --id) {
        const Node& node = nodes_[static_cast<std::size_t>(id)];
        auto& g = grads[static_cast<std::size_t>(id)];
        if (!g.has_value() || node.is_leaf || !node.needs_grad || !node.backward) {
            continue;
        }
        const AccumFn accumulate = [&](int parent_slot, Tensor grad) {
            const int pid = node.parents[static_cast<std::size_t>(parent_slot)];
            const Node& parent = nodes_[static_cast<std::size_t>(pid)];
            if (!parent.needs_grad) {
                return;
            }
            if (grad.shape() != parent.value.shape()) {
                throw ShapeError("Tape::backward: gradient shape " + grad.shape_str() +
                                 " does not match parent shape " + parent.value.shape_str());
            }
            auto& pg = grads[static_cast<std::size_t>(pid)];
            if (!pg.has_value()) {
                pg = std::move(grad);
            } else {
                Tensor& acc = *pg;
                for (std::size_t i = 0; i < acc.size(); ++i) {
                    acc.data()[i] += grad.data()[i];
                }
            }
        };
        node.backward(*g, accumulate);
        if (id != loss.id) {
            g.reset();  // interior gradient no longer needed
        }
    }

    GradMap out;
    for (int lid : leaves_) {
        if (lid > loss.id || !grads[static_cast<std::size_t>(lid)].has_value()) {
            out.emplace(lid, Tensor::zeros(value(lid).shape()));
        } else {
            out.emplace(lid, std::move(*grads[static_cast<std::size_t>(lid)]));
        }
    }
    return out;
}

namespace ops {

Var add(Var a, Var b) {
    require_same_tape(a, b, "add");
    Tape& t = *a.tape;
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    Tensor y = kernels::add(av, bv);
    const bool bias = !av.same_shape(bv);
    Tape* tp = &t;
    const int aid = a.id;
    const int bid = b.id;
    return t.record(std::move(y), {a.id, b.id},
                    [tp, aid, bid, bias](const Tensor& dy, const Tape::AccumFn& acc) {
                        acc(0, dy);
                        if (!bias) {
                            acc(1, dy);
                        } else {
                            const Tensor& bv2 = tp->value(bid);
                            const int d = bv2.shape()[0];
                            Tensor db = Tensor::zeros({d});
                            const std::size_t rows = dy.size() / static_cast<std::size_t>(d);
                            for (std::size_t r = 0; r < rows; ++r) {
                                for (int j = 0; j < d; ++j) {
                                    db.data()[static_cast<std::size_t>(j)] +=
                                        dy.data()[r * static_cast<std::size_t>(d) +
                                                  static_cast<std::size_t>(j)];
                                }
                            }
                            (void)aid;
                            acc(1, std::move(db));
                        }
                    });
}

Var mul(Var a, Var b) {
    require_same_tape(a, b, "mul");
    Tape& t = *a.tape;
    Tensor y = kernels::mul(t.value(a), t.value(b));
    Tape* tp = &t;
    const int aid = a.id;
    const int bid = b.id;
    return t.record(std::move(y), {a.id, b.id},
                    [tp, aid, bid](const Tensor& dy, const Tape::AccumFn& acc) {
                        const Tensor& av = tp->value(aid);
                        const Tensor& bv = tp->value(bid);
                        Tensor da = Tensor::zeros(av.shape());
                        Tensor db = Tensor::zeros(bv.shape());
                        for (std::size_t i = 0; i < dy.size(); ++i) {
                            da.data()[i] = dy.data()[i] * bv.data()[i];
                            db.data()[i] = dy.data()[i] * av.data()[i];
                        }
                        acc(0, std::move(da));
                        acc(1, std::move(db));
                    });
}

Var scale(Var a, double c) {
    if (a.tape == nullptr) {
        throw Error("scale: unbound operand");
    }
    Tape& t = *a.tape;
    const Tensor& av = t.value(a);
    Tensor y = av;
    for (std::size_t i = 0; i < y.size(); ++i) {
        y.data()[i] *= c;
    }
    return t.record(std::move(y), {a.id}, [c](const Tensor& dy, const Tape::AccumFn& acc) {
        Tensor da = dy;
        for (std::size_t i = 0; i < da.size(); ++i) {
            da.data()[i] *= c;
        }
        acc(0, std::move(da));
    });
}

Var matmul(Var a, Var b) {
    require_same_tape(a, b, "matmul");
    Tape& t = *a.tape;
    Tensor y = kernels::matmul(t.value(a), t.value(b));
    Tape* tp = &t;
    const int aid = a.id;
    const int bid = b.id;
    return t.record(std::move(y), {a.id, b.id},
                    [tp, aid, bid](const Tensor& dy, const Tape::AccumFn& acc) {
                        // dA = dY . B^T ; dB = A^T . dY
                        acc(0, kernels::matmul_nt(dy, tp->value(bid)));
                        acc(1, kernels::matmul_tn(tp->value(aid), dy));
                    });
}

Var conv2d(Var x, Var k) {
    require_same_tape(x, k, "conv2d");
    Tape& t = *x.tape;
    Tensor y = kernels::conv2d(t.value(x), t.value(k));
    Tape* tp = &t;
    const int xid = x.id;
    const int kid = k.id;
    return t.record(std::move(y), {x.id, k.id},
                    [tp, xid, kid](const Tensor& dy, const Tape::AccumFn& acc) {
                        acc(0, kernels::conv2d_grad_input(dy, tp->value(kid),
                                                          tp->value(xid).shape()));
                        acc(1, kernels::conv2d_grad_kernel(tp->value(xid), dy,
                                                           tp->value(kid).shape()));
                    });
}

Var conv1d(Var x, Var k) {
    require_same_tape(x, k, "conv1d");
    Tape& t = *x.tape;
    Tensor y = kernels::conv1d(t.value(x), t.value(k));
    Tape* tp = &t;
    const int xid = x.id;
    const int kid = k.id;
    return t.record(std::move(y), {x.id, k.id},
                    [tp, xid, kid](const Tensor& dy, const Tape::AccumFn& acc) {
                        acc(0, kernels::conv1d_grad_input(dy, tp->value(kid),
                                                          tp->value(xid).shape()));
                        acc(1, kernels::conv1d_grad_kernel(tp->value(xid), dy,
                                                           tp->value(kid).shape()));
                    });
}

Var pad2d(Var x, int top, int bottom, int left, int right) {
    if (x.tape == nullptr) {
        throw Error("pad2d: unbound operand");
    }
    if (top < 0 || bottom < 0 || left < 0 || right < 0) {
        throw ShapeError("pad2d: negative padding");
    }
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    if (xv.rank() != 4) {
        throw ShapeError("pad2d: expected rank-4 input, got shape " + xv.shape_str());
    }
    const int B = xv.shape()[0], H = xv.shape()[1], W = xv.shape()[2], C = xv.shape()[3];
    const int OH = H + top + bottom;
    const int OW = W + left + right;
    Tensor y = Tensor::zeros({B, OH, OW, C});
    for (int b = 0; b < B; ++b) {
        for (int h = 0; h < H; ++h) {
            for (int w = 0; w < W; ++w) {
                for (int c = 0; c < C; ++c) {
                    y.at(b, h + top, w + left, c) = xv.at(b, h, w, c);
                }
            }
        }
    }
    return t.record(std::move(y), {x.id},
                    [B, H, W, C, top, left](const Tensor& dy, const Tape::AccumFn& acc) {
                        Tensor dx = Tensor::zeros({B, H, W, C});
                        for (int b = 0; b < B; ++b) {
                            for (int h = 0; h < H; ++h) {
                                for (int w = 0; w < W; ++w) {
                                    for (int c = 0; c < C; ++c) {
                                        dx.at(b, h, w, c) = dy.at(b, h + top, w + left, c);
                                    }
                                }
                            }
                        }
                        acc(0, std::move(dx));
                    });
}

Var maxpool2(Var x) {
    if (x.tape == nullptr) {
        throw Error("maxpool2: unbound operand");
    }
    Tape& t = *x.tape;
    auto [y, argmax] = kernels::maxpool2(t.value(x));
    const std::vector<int> in_shape = t.value(x).shape();
    auto arg = std::make_shared<std::vector<std::uint32_t>>(std::move(argmax));
    return t.record(std::move(y), {x.id},
                    [in_shape, arg](const Tensor& dy, const Tape::AccumFn& acc) {
                        acc(0, kernels::maxpool2_backward(dy, *arg, in_shape));
                    });
}

Var relu(Var a) {
    if (a.tape == nullptr) {
        throw Error("relu: unbound operand");
    }
    Tape& t = *a.tape;
    Tensor y = kernels::relu(t.value(a));
    Tape* tp = &t;
    const int aid = a.id;
    return t.record(std::move(y), {a.id},
                    [tp, aid](const Tensor& dy, const Tape::AccumFn& acc) {
                        const Tensor& av = tp->value(aid);
                        Tensor da = Tensor::zeros(av.shape());
                        for (std::size_t i = 0; i < da.size(); ++i) {
                            da.data()[i] = av.data()[i] > 0.0 ? dy.data()[i] : 0.0;
                        }
                        acc(0, std::move(da));
                    });
}

Var sigmoid(Var a) {
    if (a.tape == nullptr) {
        throw Error("sigmoid: unbound operand");
    }
    Tape& t = *a.tape;
    const Tensor& av = t.value(a);
    Tensor y = Tensor::zeros(av.shape());
    for (std::size_t i = 0; i < y.size(); ++i) {
        y.data()[i] = 1.0 / (1.0 + std::exp(-av.data()[i]));
    }
    Tensor y_copy = y;
    auto yv = std::make_shared<Tensor>(std::move(y_copy));
    return t.record(std::move(y), {a.id}, [yv](const Tensor& dy, const Tape::AccumFn& acc) {
        Tensor da = Tensor::zeros(yv->shape());
        for (std::size_t i = 0; i < da.size(); ++i) {
            const double s = yv->data()[i];
            da.data()[i] = dy.data()[i] * s * (1.0 - s);
        }
        acc(0, std::move(da));
    });
}

Var reshape(Var a, std::vector<int> shape) {
    if (a.tape == nullptr) {
        throw Error("reshape: unbound operand");
    }
    Tape& t = *a.tape;
    const Tensor& av = t.value(a);
    if (shape_product(shape) != static_cast<std::int64_t>(av.size())) {
        throw ShapeError("reshape: cannot reshape " + av.shape_str() + " into " +
                         Tensor::zeros(shape).shape_str());
    }
    Tensor y(shape, av.values());
    const std::vector<int> in_shape = av.shape();
    return t.record(std::move(y), {a.id},
                    [in_shape](const Tensor& dy, const Tape::AccumFn& acc) {
                        acc(0, Tensor(in_shape, dy.values()));
                    });
}

Var embedding(Var table, const std::vector<std::vector<int>>& ids) {
    if (table.tape == nullptr) {
        throw Error("embedding: unbound operand");
    }
    Tape& t = *table.tape;
    const Tensor& tab = t.value(table);
    if (tab.rank() != 2) {
        throw ShapeError("embedding: table must be rank 2, got shape " + tab.shape_str());
    }
    const int V = tab.shape()[0];
    const int D = tab.shape()[1];
    const int B = static_cast<int>(ids.size());
    if (B == 0) {
        throw ShapeError("embedding: empty batch");
    }
    int Tmax = 1;
    for (const auto& seq : ids) {
        Tmax = std::max(Tmax, static_cast<int>(seq.size()));
        for (int id : seq) {
            if (id < 0 || id >= V) {
                throw ShapeError("embedding: token id " + std::to_string(id) +
                                 " outside table of " + std::to_string(V) + " rows");
            }
        }
    }
    Tensor y = Tensor::zeros({B, Tmax, D});
    for (int b = 0; b < B; ++b) {
        for (int tok = 0; tok < static_cast<int>(ids[static_cast<std::size_t>(b)].size()); ++tok) {
            const int row = ids[static_cast<std::size_t>(b)][static_cast<std::size_t>(tok)];
            for (int d = 0; d < D; ++d) {
                y.at(b, tok, d) = tab.at(row, d);
            }
        }
    }
    auto ids_copy = std::make_shared<std::vector<std::vector<int>>>(ids);
    return t.record(std::move(y), {table.id},
                    [ids_copy, V, D](const Tensor& dy, const Tape::AccumFn& acc) {
                        Tensor dt = Tensor::zeros({V, D});
                        const int Bn = static_cast<int>(ids_copy->size());
                        for (int b = 0; b < Bn; ++b) {
                            const auto& seq = (*ids_copy)[static_cast<std::size_t>(b)];
                            for (int tok = 0; tok < static_cast<int>(seq.size()); ++tok) {
                                const int row = seq[static_cast<std::size_t>(tok)];
                                for (int d = 0; d < D; ++d) {
                                    dt.at(row, d) += dy.at(b, tok, d);
                                }
                            }
                        }
                        acc(0, std::move(dt));
                    });
}

Var mean_tokens(Var emb, const std::vector<int>& lengths) {
    if (emb.tape == nullptr) {
        throw Error("mean_tokens: unbound operand");
    }
    Tape& t = *emb.tape;
    const Tensor& ev = t.value(emb);
    if (ev.rank() != 3) {
        throw ShapeError("mean_tokens: expected rank-3 input, got shape " + ev.shape_str());
    }
    const int B = ev.shape()[0], Tmax = ev.shape()[1], D = ev.shape()[2];
    if (static_cast<int>(lengths.size()) != B) {
        throw ShapeError("mean_tokens: " + std::to_string(lengths.size()) + " lengths for batch of " +
                         std::to_string(B));
    }
    for (int b = 0; b < B; ++b) {
        if (lengths[static_cast<std::size_t>(b)] < 1 ||
            lengths[static_cast<std::size_t>(b)] > Tmax) {
            throw ShapeError("mean_tokens: length " +
                             std::to_string(lengths[static_cast<std::size_t>(b)]) +
                             " outside [1, " + std::to_string(Tmax) + "]");
        }
    }
    Tensor y = Tensor::zeros({B, D});
    for (int b = 0; b < B; ++b) {
        const int len = lengths[static_cast<std::size_t>(b)];
        for (int tok = 0; tok < len; ++tok) {
            for (int d = 0; d < D; ++d) {
                y.at(b, d) += ev.at(b, tok, d);
            }
        }
        for (int d = 0; d < D; ++d) {
            y.at(b, d) /= static_cast<double>(len);
        }
    }
    auto lens = std::make_shared<std::vector<int>>(lengths);
    return t.record(std::move(y), {emb.id},
                    [lens, B, Tmax, D](const Tensor& dy, const Tape::AccumFn& acc) {
                        Tensor de = Tensor::zeros({B, Tmax, D});
                        for (int b = 0; b < B; ++b) {
                            const int len = (*lens)[static_cast<std::size_t>(b)];
                            for (int tok = 0; tok < len; ++tok) {
                                for (int d = 0; d < D; ++d) {
                                    de.at(b, tok, d) = dy.at(b, d) / static_cast<double>(len);
                                }
                            }
                        }
                        acc(0, std::move(de));
                    });
}

Var mean_axis(Var a, int axis) {
    if (a.tape == nullptr) {
        throw Error("mean_axis: unbound operand");
    }
    Tape& t = *a.tape;
    const Tensor& av = t.value(a);
    if (axis < 0 || axis >= av.rank()) {
        throw ShapeError("mean_axis: axis " + std::to_string(axis) + " outside rank " +
                         std::to_string(av.rank()));
    }
    const std::vector<int>& in_shape = av.shape();
    std::vector<int> out_shape;
    for (int i = 0; i < av.rank(); ++i) {
        if (i != axis) {
            out_shape.push_back(in_shape[static_cast<std::size_t>(i)]);
        }
    }
    if (out_shape.empty()) {
        out_shape.push_back(1);  // rank-1 input collapses to a single element
    }
    // outer = product of dims before axis, inner = product after.
    std::size_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) {
        outer *= static_cast<std::size_t>(in_shape[static_cast<std::size_t>(i)]);
    }
    for (int i = axis + 1; i < av.rank(); ++i) {
        inner *= static_cast<std::size_t>(in_shape[static_cast<std::size_t>(i)]);
    }
    const std::size_t n = static_cast<std::size_t>(in_shape[static_cast<std::size_t>(axis)]);
    Tensor y = Tensor::zeros(out_shape);
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t k = 0; k < n; ++k) {
            for (std::size_t i = 0; i < inner; ++i) {
                y.data()[o * inner + i] += av.data()[(o * n + k) * inner + i];
            }
        }
    }
    for (std::size_t i = 0; i < y.size(); ++i) {
        y.data()[i] /= static_cast<double>(n);
    }
    const std::vector<int> in_copy = in_shape;
    return t.record(std::move(y), {a.id},
                    [in_copy, outer, inner, n](const Tensor& dy, const Tape::AccumFn& acc) {
                        Tensor da = Tensor::zeros(in_copy);
                        for (std::size_t o = 0; o < outer; ++o) {
                            for (std::size_t k = 0; k < n; ++k) {
                                for (std::size_t i = 0; i < inner; ++i) {
                                    da.data()[(o * n + k) * inner + i] =
                                        dy.data()[o * inner + i] / static_cast<double>(n);
                                }
                            }
                        }
                        acc(0, std::move(da));
                    });
}

Var sum_all(Var a) {
    if (a.tape == nullptr) {
        throw Error("sum_all: unbound operand");
    }
    Tape& t = *a.tape;
    const Tensor& av = t.value(a);
    double s = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) {
        s += av.data()[i];
    }
    const std::vector<int> in_shape = av.shape();
    return t.record(Tensor::scalar(s), {a.id},
                    [in_shape](const Tensor& dy, const Tape::AccumFn& acc) {
                        acc(0, Tensor::full(in_shape, dy.scalar_value()));
                    });
}

Var mean_all(Var a) {
    if (a.tape == nullptr) {
        throw Error("mean_all: unbound operand");
    }
    Tape& t = *a.tape;
    const Tensor& av = t.value(a);
    const double n = static_cast<double>(av.size());
    double s = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) {
        s += av.data()[i];
    }
    const std::vector<int> in_shape = av.shape();
    return t.record(Tensor::scalar(s / n), {a.id},
                    [in_shape, n](const Tensor& dy, const Tape::AccumFn& acc) {
                        acc(0, Tensor::full(in_shape, dy.scalar_value() / n));
                    });
}

Tensor softmax_rows(const Tensor& logits) {
    if (logits.rank() != 2) {
        throw ShapeError("softmax_rows: expected rank-2 input, got shape " + logits.shape_str());
    }
    const int B = logits.shape()[0], K = logits.shape()[1];
    Tensor probs = Tensor::zeros({B, K});
    for (int b = 0; b < B; ++b) {
        double mx = logits.at(b, 0);
        for (int k = 1; k < K; ++k) {
            mx = std::max(mx, logits.at(b, k));
        }
        double z = 0.0;
        for (int k = 0; k < K; ++k) {
            const double e = std::exp(logits.at(b, k) - mx);
            probs.at(b, k) = e;
            z += e;
        }
        for (int k = 0; k < K; ++k) {
            probs.at(b, k) /= z;
        }
    }
    return probs;
}

Var softmax_xent(Var logits, const std::vector<int>& labels) {
    if (logits.tape == nullptr) {
        throw Error("softmax_xent: unbound operand");
    }
    Tape& t = *logits.tape;
    const Tensor& lv = t.value(logits);
    if (lv.rank() != 2) {
        throw ShapeError("softmax_xent: logits must be rank 2, got shape " + lv.shape_str());
    }
    const int B = lv.shape()[0], K = lv.shape()[1];
    if (static_cast<int>(labels.size()) != B) {
        throw ShapeError("softmax_xent: " + std::to_string(labels.size()) +
                         " labels for batch of " + std::to_string(B));
    }
    for (int lab : labels) {
        if (lab < 0 || lab >= K) {
            throw ShapeError("softmax_xent: label " + std::to_string(lab) + " outside [0, " +
                             std::to_string(K) + ")");
        }
    }
    Tensor probs = softmax_rows(lv);
    Tensor losses = Tensor::zeros({B});
    for (int b = 0; b < B; ++b) {
        const double p = probs.at(b, labels[static_cast<std::size_t>(b)]);
        losses.at(b) = -std::log(std::max(p, 1e-300));
    }
    auto probs_sp = std::make_shared<Tensor>(std::move(probs));
    auto labels_sp = std::make_shared<std::vector<int>>(labels);
    return t.record(std::move(losses), {logits.id},
                    [probs_sp, labels_sp, B, K](const Tensor& dy, const Tape::AccumFn& acc) {
                        // d loss_b / d logit_bk = p_bk - [k == y_b], scaled by dy_b.
                        Tensor dl = Tensor::zeros({B, K});
                        for (int b = 0; b < B; ++b) {
                            const int y = (*labels_sp)[static_cast<std::size_t>(b)];
                            for (int k = 0; k < K; ++k) {
                                const double ind = (k == y) ? 1.0 : 0.0;
                                dl.at(b, k) = dy.at(b) * (probs_sp->at(b, k) - ind);
                            }
                        }
                        acc(0, std::move(dl));
                    });
}

Var mask_blend(Var x, Var m, Var p) {
    require_same_tape(x, m, "mask_blend");
    require_same_tape(x, p, "mask_blend");
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    const Tensor& mv = t.value(m);
    const Tensor& pv = t.value(p);
    if (xv.rank() != 4) {
        throw ShapeError("mask_blend: input must be rank 4, got shape " + xv.shape_str());
    }
    const int B = xv.shape()[0], H = xv.shape()[1], W = xv.shape()[2], C = xv.shape()[3];
    if (mv.shape() != std::vector<int>{H, W}) {
        throw ShapeError("mask_blend: mask shape " + mv.shape_str() + " does not match input " +
                         xv.shape_str());
    }
    if (pv.shape() != std::vector<int>{H, W, C}) {
        throw ShapeError("mask_blend: pattern shape " + pv.shape_str() + " does not match input " +
                         xv.shape_str());
    }
    Tensor y = Tensor::zeros({B, H, W, C});
    for (int b = 0; b < B; ++b) {
        for (int h = 0; h < H; ++h) {
            for (int w = 0; w < W; ++w) {
                const double mm = mv.at(h, w);
                for (int c = 0; c < C; ++c) {
                    y.at(b, h, w, c) = (1.0 - mm) * xv.at(b, h, w, c) + mm * pv.at(h, w, c);
                }
            }
        }
    }
    Tape* tp = &t;
    const int xid = x.id, mid = m.id, pid = p.id;
    return t.record(std::move(y), {x.id, m.id, p.id},
                    [tp, xid, mid, pid, B, H, W, C](const Tensor& dy, const Tape::AccumFn& acc) {
                        const Tensor& xv2 = tp->value(xid);
                        const Tensor& mv2 = tp->value(mid);
                        const Tensor& pv2 = tp->value(pid);
                        Tensor dx = Tensor::zeros({B, H, W, C});
                        Tensor dm = Tensor::zeros({H, W});
                        Tensor dp = Tensor::zeros({H, W, C});
                        for (int b = 0; b < B; ++b) {
                            for (int h = 0; h < H; ++h) {
                                for (int w = 0; w < W; ++w) {
                                    const double mm = mv2.at(h, w);
                                    for (int c = 0; c < C; ++c) {
                                        const double g = dy.at(b, h, w, c);
                                        dx.at(b, h, w, c) = g * (1.0 - mm);
                                        dm.at(h, w) += g * (pv2.at(h, w, c) - xv2.at(b, h, w, c));
                                        dp.at(h, w, c) += g * mm;
                                    }
                                }
                            }
                        }
                        acc(0, std::move(dx));
                        acc(1, std::move(dm));
                        acc(2, std::move(dp));
                    });
}

Tensor forward_primitive(const std::string& name, const std::vector<Tensor>& inputs) {
    const auto want = [&](std::size_t n) {
        if (inputs.size() != n) {
            throw ShapeError("forward_primitive: '" + name + "' takes " + std::to_string(n) +
                             " inputs, got " + std::to_string(inputs.size()));
        }
    };
    if (name == "add") {
        want(2);
        return kernels::add(inputs[0], inputs[1]);
    }
    if (name == "multiply") {
        want(2);
        return kernels::mul(inputs[0], inputs[1]);
    }
    if (name == "matmul") {
        want(2);
        return kernels::matmul(inputs[0], inputs[1]);
    }
    if (name == "conv2d") {
        want(2);
        return kernels::conv2d(inputs[0], inputs[1]);
    }
    if (name == "conv1d") {
        want(2);
        return kernels::conv1d(inputs[0], inputs[1]);
    }
    if (name == "maxpool2") {
        want(1);
        return kernels::maxpool2(inputs[0]).first;
    }
    if (name == "relu") {
        want(1);
        return kernels::relu(inputs[0]);
    }
    throw Error("forward_primitive: unknown primitive '" + name + "'");
}

}  // namespace ops

double finite_diff_check(const std::function<Var(Tape&, Var)>& build, const Tensor& point,
                         double epsilon) {
    if (!(epsilon > 0.0) || epsilon > 1e-2) {
        throw Error("finite_diff_check: epsilon must lie in (0, 1e-2]");
    }
    const auto eval = [&](const Tensor& x) {
        Tape t;
        Var loss = build(t, t.leaf(x));
        const Tensor& lv = t.value(loss);
        if (!lv.is_scalar()) {
            throw ShapeError("finite_diff_check: builder must produce a scalar, got shape " +
                             lv.shape_str());
        }
        const double v = lv.scalar_value();
        if (!std::isfinite(v)) {
            throw PipelineError("finite_diff_check: non-finite loss value");
        }
        return v;
    };

    Tape t;
    Var x = t.leaf(point);
    Var loss = build(t, x);
    if (!t.value(loss).is_scalar()) {
        throw ShapeError("finite_diff_check: builder must produce a scalar, got shape " +
                         t.value(loss).shape_str());
    }
    GradMap grads = t.backward(loss);
    const Tensor& analytic = grads.at(x.id);
    if (!analytic.all_finite()) {
        throw PipelineError("finite_diff_check: non-finite analytic gradient");
    }

    double max_err = 0.0;
    for (std::size_t i = 0; i < point.size(); ++i) {
        Tensor plus = point;
        Tensor minus = point;
        plus.data()[i] += epsilon;
        minus.data()[i] -= epsilon;
        const double numeric = (eval(plus) - eval(minus)) / (2.0 * epsilon);
        const double a = analytic.data()[i];
        const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
        max_err = std::max(max_err, err);
    }
    return max_err;
}

}  // namespace bdforge
