#include "fet/nn/autodiff.hpp"

#include "fet/errors.hpp"

#include <cmath>
#include <string>
#include <unordered_set>

namespace fet::nn {
namespace {

thread_local bool g_grad_enabled = true;

void require(bool cond, const char* op, const std::string& what) {
    if (!cond) throw ShapeError(std::string(op) + ": " + what);
}

std::string dims(const Matrix& m) { return std::to_string(m.rows()) + "x" + std::to_string(m.cols()); }

void require_same(const Var& a, const Var& b, const char* op) {
    require(a.rows() == b.rows() && a.cols() == b.cols(), op,
            "shape mismatch " + dims(a.value()) + " vs " + dims(b.value()));
}

}  // namespace

void Node::accumulate(const Matrix& g) {
    if (!requires_grad) return;
    if (grad.size() == 0)
        grad = g;
    else
        grad += g;
}

Var parameter(Matrix value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = true;
    return Var(std::move(n));
}

Var constant(Matrix value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    return Var(std::move(n));
}

Var make_op(Matrix value, std::vector<Var> parents, std::function<void(Node&)> backward) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    if (!g_grad_enabled) return Var(std::move(n));
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (any) {
        n->requires_grad = true;
        n->parents.reserve(parents.size());
        for (auto& p : parents) n->parents.push_back(p.shared());
        n->backward = std::move(backward);
    }
    return Var(std::move(n));
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void backward(const Var& out) {
    require(out.rows() == 1 && out.cols() == 1, "backward", "output must be a scalar");
    if (!out.requires_grad()) return;

    // Iterative post-order DFS gives a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack{{out.node(), 0}};
    visited.insert(out.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    out.node()->accumulate(Matrix::Ones(1, 1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward && n->grad.size() != 0) n->backward(*n);
    }
}

Var matmul(const Var& a, const Var& b) {
    require(a.cols() == b.rows(), "matmul", dims(a.value()) + " * " + dims(b.value()));
    return make_op(a.value() * b.value(), {a, b}, [](Node& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        if (pa.requires_grad) pa.accumulate(n.grad * pb.value.transpose());
        if (pb.requires_grad) pb.accumulate(pa.value.transpose() * n.grad);
    });
}

Var add(const Var& a, const Var& b) {
    require_same(a, b, "add");
    return make_op(a.value() + b.value(), {a, b}, [](Node& n) {
        n.parents[0]->accumulate(n.grad);
        n.parents[1]->accumulate(n.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    require_same(a, b, "sub");
    return make_op(a.value() - b.value(), {a, b}, [](Node& n) {
        n.parents[0]->accumulate(n.grad);
        n.parents[1]->accumulate(-n.grad);
    });
}

Var hadamard(const Var& a, const Var& b) {
    require_same(a, b, "hadamard");
    return make_op(a.value().cwiseProduct(b.value()), {a, b}, [](Node& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        if (pa.requires_grad) pa.accumulate(n.grad.cwiseProduct(pb.value));
        if (pb.requires_grad) pb.accumulate(n.grad.cwiseProduct(pa.value));
    });
}

Var scale(const Var& a, double s) {
    return make_op(a.value() * s, {a}, [s](Node& n) { n.parents[0]->accumulate(n.grad * s); });
}

Var add_row(const Var& a, const Var& row) {
    require(row.rows() == 1 && row.cols() == a.cols(), "add_row", dims(a.value()) + " + " + dims(row.value()));
    Matrix v = a.value();
    v.rowwise() += row.value().row(0);
    return make_op(std::move(v), {a, row}, [](Node& n) {
        n.parents[0]->accumulate(n.grad);
        if (n.parents[1]->requires_grad) n.parents[1]->accumulate(n.grad.colwise().sum());
    });
}

Var add_tiled(const Var& a, const Var& tile) {
    const auto m = tile.rows();
    require(m > 0 && a.rows() % m == 0 && a.cols() == tile.cols(), "add_tiled",
            dims(a.value()) + " + tile " + dims(tile.value()));
    Matrix v = a.value();
    for (Eigen::Index r = 0; r < v.rows(); ++r) v.row(r) += tile.value().row(r % m);
    return make_op(std::move(v), {a, tile}, [m](Node& n) {
        n.parents[0]->accumulate(n.grad);
        if (!n.parents[1]->requires_grad) return;
        Matrix g = Matrix::Zero(m, n.grad.cols());
        for (Eigen::Index r = 0; r < n.grad.rows(); ++r) g.row(r % m) += n.grad.row(r);
        n.parents[1]->accumulate(g);
    });
}

Var gelu(const Var& a) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    Matrix v = a.value().unaryExpr([](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); });
    return make_op(std::move(v), {a}, [](Node& n) {
        constexpr double inv_sqrt2pi = 0.39894228040143267794;
        const Matrix& x = n.parents[0]->value;
        Matrix d = x.unaryExpr([](double t) {
            return 0.5 * (1.0 + std::erf(t * inv_sqrt2)) + t * inv_sqrt2pi * std::exp(-0.5 * t * t);
        });
        n.parents[0]->accumulate(n.grad.cwiseProduct(d));
    });
}

Var exp(const Var& a) {
    Matrix v = a.value().array().exp().matrix();
    return make_op(v, {a}, [v](Node& n) { n.parents[0]->accumulate(n.grad.cwiseProduct(v)); });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
    const auto d = x.cols();
    require(gamma.rows() == 1 && gamma.cols() == d && beta.rows() == 1 && beta.cols() == d, "layer_norm",
            "gain/bias must be 1x" + std::to_string(d));
    const Matrix& xv = x.value();
    Matrix xhat(xv.rows(), d);
    Eigen::VectorXd inv_std(xv.rows());
    for (Eigen::Index r = 0; r < xv.rows(); ++r) {
        const double mu = xv.row(r).mean();
        const double var = (xv.row(r).array() - mu).square().mean();
        inv_std(r) = 1.0 / std::sqrt(var + eps);
        xhat.row(r) = (xv.row(r).array() - mu) * inv_std(r);
    }
    Matrix y = xhat.array().rowwise() * gamma.value().row(0).array();
    y.rowwise() += beta.value().row(0);
    return make_op(std::move(y), {x, gamma, beta}, [xhat, inv_std](Node& n) {
        auto& px = *n.parents[0];
        auto& pg = *n.parents[1];
        auto& pb = *n.parents[2];
        if (pg.requires_grad) pg.accumulate(n.grad.cwiseProduct(xhat).colwise().sum());
        if (pb.requires_grad) pb.accumulate(n.grad.colwise().sum());
        if (!px.requires_grad) return;
        const Matrix dxhat = n.grad.array().rowwise() * pg.value.row(0).array();
        Matrix dx(dxhat.rows(), dxhat.cols());
        for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
            const double m1 = dxhat.row(r).mean();
            const double m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).mean();
            dx.row(r) = inv_std(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
        }
        px.accumulate(dx);
    });
}

Var concat_cols(const std::vector<Var>& parts) {
    require(!parts.empty(), "concat_cols", "no inputs");
    const auto rows = parts.front().rows();
    Eigen::Index total = 0;
    for (const auto& p : parts) {
        require(p.rows() == rows, "concat_cols", "row count mismatch");
        total += p.cols();
    }
    Matrix v(rows, total);
    Eigen::Index off = 0;
    for (const auto& p : parts) {
        v.middleCols(off, p.cols()) = p.value();
        off += p.cols();
    }
    return make_op(std::move(v), parts, [](Node& n) {
        Eigen::Index off = 0;
        for (auto& p : n.parents) {
            const auto c = p->value.cols();
            if (p->requires_grad) p->accumulate(n.grad.middleCols(off, c));
            off += c;
        }
    });
}

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
    require(start >= 0 && count >= 0 && start + count <= a.cols(), "slice_cols", "range out of bounds");
    return make_op(a.value().middleCols(start, count), {a}, [start, count](Node& n) {
        Matrix g = Matrix::Zero(n.parents[0]->value.rows(), n.parents[0]->value.cols());
        g.middleCols(start, count) = n.grad;
        n.parents[0]->accumulate(g);
    });
}

Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count) {
    require(start >= 0 && count >= 0 && start + count <= a.rows(), "slice_rows", "range out of bounds");
    return make_op(a.value().middleRows(start, count), {a}, [start, count](Node& n) {
        Matrix g = Matrix::Zero(n.parents[0]->value.rows(), n.parents[0]->value.cols());
        g.middleRows(start, count) = n.grad;
        n.parents[0]->accumulate(g);
    });
}

Var group_concat_rows(const Var& a, Eigen::Index ma, const Var& b, Eigen::Index mb) {
    require(ma > 0 && mb > 0 && a.rows() % ma == 0 && b.rows() % mb == 0 && a.rows() / ma == b.rows() / mb,
            "group_concat_rows", "group counts differ");
    require(a.cols() == b.cols(), "group_concat_rows", "column count mismatch");
    const auto groups = a.rows() / ma;
    Matrix v(groups * (ma + mb), a.cols());
    for (Eigen::Index g = 0; g < groups; ++g) {
        v.middleRows(g * (ma + mb), ma) = a.value().middleRows(g * ma, ma);
        v.middleRows(g * (ma + mb) + ma, mb) = b.value().middleRows(g * mb, mb);
    }
    return make_op(std::move(v), {a, b}, [groups, ma, mb](Node& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        Matrix ga(groups * ma, n.grad.cols()), gb(groups * mb, n.grad.cols());
        for (Eigen::Index g = 0; g < groups; ++g) {
            ga.middleRows(g * ma, ma) = n.grad.middleRows(g * (ma + mb), ma);
            gb.middleRows(g * mb, mb) = n.grad.middleRows(g * (ma + mb) + ma, mb);
        }
        pa.accumulate(ga);
        pb.accumulate(gb);
    });
}

Var group_mean_rows(const Var& a, Eigen::Index group) {
    require(group > 0 && a.rows() % group == 0, "group_mean_rows", "rows not divisible by group size");
    const auto groups = a.rows() / group;
    Matrix v(groups, a.cols());
    for (Eigen::Index g = 0; g < groups; ++g) v.row(g) = a.value().middleRows(g * group, group).colwise().mean();
    return make_op(std::move(v), {a}, [group](Node& n) {
        Matrix g(n.grad.rows() * group, n.grad.cols());
        for (Eigen::Index r = 0; r < g.rows(); ++r) g.row(r) = n.grad.row(r / group) / static_cast<double>(group);
        n.parents[0]->accumulate(g);
    });
}

Var repeat_rows(const Var& a, Eigen::Index times) {
    require(times > 0, "repeat_rows", "times must be positive");
    Matrix v(a.rows() * times, a.cols());
    for (Eigen::Index r = 0; r < v.rows(); ++r) v.row(r) = a.value().row(r / times);
    return make_op(std::move(v), {a}, [times](Node& n) {
        Matrix g = Matrix::Zero(n.grad.rows() / times, n.grad.cols());
        for (Eigen::Index r = 0; r < n.grad.rows(); ++r) g.row(r / times) += n.grad.row(r);
        n.parents[0]->accumulate(g);
    });
}

Var attention(const Var& q, const Var& k, const Var& v, Eigen::Index mq, Eigen::Index mk, int heads) {
    const auto d = q.cols();
    require(heads > 0 && d % heads == 0, "attention", "model dim not divisible by heads");
    require(k.cols() == d && v.cols() == d, "attention", "q/k/v widths differ");
    require(q.rows() % mq == 0 && k.rows() % mk == 0 && k.rows() == v.rows() && q.rows() / mq == k.rows() / mk,
            "attention", "query and key groups differ");
    const auto groups = q.rows() / mq;
    const auto dh = d / heads;
    const double s = 1.0 / std::sqrt(static_cast<double>(dh));

    auto probs = std::make_shared<std::vector<Matrix>>(static_cast<std::size_t>(groups * heads));
    Matrix out(q.rows(), d);
    for (Eigen::Index g = 0; g < groups; ++g) {
        for (int h = 0; h < heads; ++h) {
            const auto qb = q.value().block(g * mq, h * dh, mq, dh);
            const auto kb = k.value().block(g * mk, h * dh, mk, dh);
            const auto vb = v.value().block(g * mk, h * dh, mk, dh);
            Matrix scores = s * (qb * kb.transpose());
            for (Eigen::Index r = 0; r < mq; ++r) {
                const double mx = scores.row(r).maxCoeff();
                scores.row(r) = (scores.row(r).array() - mx).exp();
                scores.row(r) /= scores.row(r).sum();
            }
            out.block(g * mq, h * dh, mq, dh) = scores * vb;
            (*probs)[static_cast<std::size_t>(g * heads + h)] = std::move(scores);
        }
    }
    return make_op(std::move(out), {q, k, v}, [probs, groups, heads, mq, mk, dh, s](Node& n) {
        auto& pq = *n.parents[0];
        auto& pk = *n.parents[1];
        auto& pv = *n.parents[2];
        Matrix dq = Matrix::Zero(pq.value.rows(), pq.value.cols());
        Matrix dk = Matrix::Zero(pk.value.rows(), pk.value.cols());
        Matrix dv = Matrix::Zero(pv.value.rows(), pv.value.cols());
        for (Eigen::Index g = 0; g < groups; ++g) {
            for (int h = 0; h < heads; ++h) {
                const Matrix& p = (*probs)[static_cast<std::size_t>(g * heads + h)];
                const auto qb = pq.value.block(g * mq, h * dh, mq, dh);
                const auto kb = pk.value.block(g * mk, h * dh, mk, dh);
                const auto vb = pv.value.block(g * mk, h * dh, mk, dh);
                const auto dob = n.grad.block(g * mq, h * dh, mq, dh);
                dv.block(g * mk, h * dh, mk, dh) += p.transpose() * dob;
                const Matrix dp = dob * vb.transpose();
                Matrix ds = p.cwiseProduct(dp);
                const Eigen::VectorXd row_dot = ds.rowwise().sum();
                ds -= (p.array().colwise() * row_dot.array()).matrix();
                dq.block(g * mq, h * dh, mq, dh) += s * (ds * kb);
                dk.block(g * mk, h * dh, mk, dh) += s * (ds.transpose() * qb);
            }
        }
        pq.accumulate(dq);
        pk.accumulate(dk);
        pv.accumulate(dv);
    });
}

Var sum(const Var& a) {
    return make_op(Matrix::Constant(1, 1, a.value().sum()), {a}, [](Node& n) {
        const auto& pv = n.parents[0]->value;
        n.parents[0]->accumulate(Matrix::Constant(pv.rows(), pv.cols(), n.grad(0, 0)));
    });
}

Var mean(const Var& a) {
    const double count = static_cast<double>(a.value().size());
    return make_op(Matrix::Constant(1, 1, a.value().mean()), {a}, [count](Node& n) {
        const auto& pv = n.parents[0]->value;
        n.parents[0]->accumulate(Matrix::Constant(pv.rows(), pv.cols(), n.grad(0, 0) / count));
    });
}

Var mse(const Var& a, const Matrix& target) {
    require(a.rows() == target.rows() && a.cols() == target.cols(), "mse",
            dims(a.value()) + " vs target " + dims(target));
    Matrix diff = a.value() - target;
    const double count = static_cast<double>(diff.size());
    const double value = diff.squaredNorm() / count;
    return make_op(Matrix::Constant(1, 1, value), {a}, [diff = std::move(diff), count](Node& n) {
        n.parents[0]->accumulate(diff * (2.0 * n.grad(0, 0) / count));
    });
}

Var kl_divergence(const Var& mu, const Var& logvar) {
    require_same(mu, logvar, "kl_divergence");
    const Matrix var = logvar.value().array().exp().matrix();
    const double value = 0.5 * (var.array() + mu.value().array().square() - 1.0 - logvar.value().array()).sum();
    return make_op(Matrix::Constant(1, 1, value), {mu, logvar}, [var](Node& n) {
        const double g = n.grad(0, 0);
        auto& pm = *n.parents[0];
        auto& pl = *n.parents[1];
        if (pm.requires_grad) pm.accumulate(pm.value * g);
        if (pl.requires_grad) pl.accumulate(((var.array() - 1.0) * (0.5 * g)).matrix());
    });
}

}  // namespace fet::nn
