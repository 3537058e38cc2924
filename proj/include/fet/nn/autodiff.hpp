#pragma once

#include <Eigen/Core>

#include <functional>
#include <memory>
#include <vector>

// Minimal reverse-mode automatic differentiation over dense double matrices.
//
// Token batches are stored as stacked rows: a batch of B samples with m
// tokens each is a (B*m)×d matrix, and ops that mix tokens (attention,
// pooling) take the per-sample group size explicitly.
namespace fet::nn {

using Matrix = Eigen::MatrixXd;

struct Node {
    Matrix value;
    Matrix grad;  // empty until something flows into it
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    void accumulate(const Matrix& g);
};

class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    bool defined() const { return node_ != nullptr; }
    const Matrix& value() const { return node_->value; }
    Matrix& mutable_value() { return node_->value; }
    Matrix& grad() { return node_->grad; }
    const Matrix& grad() const { return node_->grad; }
    bool requires_grad() const { return node_->requires_grad; }
    Eigen::Index rows() const { return node_->value.rows(); }
    Eigen::Index cols() const { return node_->value.cols(); }
    double scalar() const { return node_->value(0, 0); }

    Node* node() const { return node_.get(); }
    const std::shared_ptr<Node>& shared() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

Var parameter(Matrix value);
Var constant(Matrix value);

// Builds a node from an explicit value and backward rule. The rule receives
// the node itself; parents are node.parents in the order given here.
Var make_op(Matrix value, std::vector<Var> parents, std::function<void(Node&)> backward);

// Accumulates d(output)/d(leaf) into every reachable leaf's grad.
void backward(const Var& scalar_output);

bool grad_enabled();

// Disables graph construction in scope (evaluation passes).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var hadamard(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_row(const Var& a, const Var& row);    // broadcast a 1×d row over every row
Var add_tiled(const Var& a, const Var& tile);  // row r gets tile.row(r % tile.rows())
Var gelu(const Var& a);
Var exp(const Var& a);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps);
Var concat_cols(const std::vector<Var>& parts);
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count);
Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count);

// Per sample, stacks a's ma rows followed by b's mb rows.
Var group_concat_rows(const Var& a, Eigen::Index ma, const Var& b, Eigen::Index mb);
// Mean over each consecutive block of `group` rows.
Var group_mean_rows(const Var& a, Eigen::Index group);
// Each row repeated `times` consecutive times.
Var repeat_rows(const Var& a, Eigen::Index times);

// Multi-head scaled dot-product attention applied independently per sample:
// sample g's mq query rows attend over its mk key/value rows.
Var attention(const Var& q, const Var& k, const Var& v, Eigen::Index mq, Eigen::Index mk, int heads);

Var sum(const Var& a);
Var mean(const Var& a);
Var mse(const Var& a, const Matrix& target);
// 0.5 Σ (exp(logvar) + mu² - 1 - logvar), summed over every element.
Var kl_divergence(const Var& mu, const Var& logvar);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }

}  // namespace fet::nn
