#include "trv/autodiff.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>

namespace trv {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double norm_cdf(double x) { return 0.5 * (1.0 + std::erf(x * kInvSqrt2)); }
double norm_pdf(double x) { return kInvSqrt2Pi * std::exp(-0.5 * x * x); }

}  // namespace

// ---------------------------------------------------------------------------
// eager kernels

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() > 2 || b.ndim() > 2)
        throw std::invalid_argument("matmul: operands must be rank <= 2");
    if (a.cols() != b.rows())
        throw std::invalid_argument("matmul: inner dims disagree, " + shape_str(a.shape()) +
                                    " x " + shape_str(b.shape()));
    Tensor out({a.rows(), b.cols()});
    out.mat().noalias() = a.mat() * b.mat();
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    if (eps < 0) throw std::invalid_argument("layer_norm: eps must be >= 0");
    const long d = x.cols();
    if (gamma.size() != d || beta.size() != d)
        throw std::invalid_argument("layer_norm: gamma/beta size " + std::to_string(gamma.size()) +
                                    "/" + std::to_string(beta.size()) + " != last dim " +
                                    std::to_string(d));
    const long n = x.size() / d;
    Tensor out(x.shape());
    Eigen::Map<const Mat> xm(x.data(), n, d);
    Eigen::Map<Mat> om(out.data(), n, d);
    Eigen::Map<const Eigen::RowVectorXd> g(gamma.data(), d), b(beta.data(), d);
    for (long i = 0; i < n; ++i) {
        double mean = xm.row(i).mean();
        double var = (xm.row(i).array() - mean).square().mean();  // population variance
        double inv = 1.0 / std::sqrt(var + eps);
        om.row(i) = (((xm.row(i).array() - mean) * inv) * g.array() + b.array()).matrix();
    }
    return out;
}

Tensor softmax_lastdim(const Tensor& x) {
    const long d = x.cols();
    const long n = x.size() / d;
    Tensor out(x.shape());
    Eigen::Map<const Mat> xm(x.data(), n, d);
    Eigen::Map<Mat> om(out.data(), n, d);
    for (long i = 0; i < n; ++i) {
        double mx = xm.row(i).maxCoeff();
        om.row(i) = (xm.row(i).array() - mx).exp().matrix();
        om.row(i) /= om.row(i).sum();
    }
    return out;
}

Tensor silu(const Tensor& x) {
    Tensor out(x.shape());
    for (long i = 0; i < x.size(); ++i) out[i] = x[i] * sigmoid(x[i]);
    return out;
}

Tensor gelu(const Tensor& x) {
    Tensor out(x.shape());
    for (long i = 0; i < x.size(); ++i) out[i] = x[i] * norm_cdf(x[i]);
    return out;
}

// ---------------------------------------------------------------------------
// tape

Tape::Node& Tape::node(Value v) {
    if (!v.valid() || v.id >= size()) throw std::invalid_argument("Tape: value not on tape");
    return nodes_[static_cast<size_t>(v.id)];
}

const Tape::Node& Tape::node(Value v) const {
    if (!v.valid() || v.id >= size()) throw std::invalid_argument("Tape: value not on tape");
    return nodes_[static_cast<size_t>(v.id)];
}

Value Tape::push(Tensor val, std::function<void(Tape&)> back) {
    Node n;
    n.grad = Tensor(val.shape());
    n.val = std::move(val);
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Value{static_cast<int>(nodes_.size()) - 1};
}

Value Tape::leaf(const Tensor& t) { return push(t, nullptr); }

Value Tape::add(Value a, Value b) {
    check_same_shape(value(a), value(b), "add");
    Tensor outv = value(a);
    outv.vec() += value(b).vec();
    Value out = push(std::move(outv), nullptr);
    nodes_.back().back = [out, a, b](Tape& t) {
        const Vec& g = t.node(out).grad.vec();
        t.node(a).grad.vec() += g;
        t.node(b).grad.vec() += g;
    };
    return out;
}

Value Tape::sub(Value a, Value b) {
    check_same_shape(value(a), value(b), "sub");
    Tensor outv = value(a);
    outv.vec() -= value(b).vec();
    Value out = push(std::move(outv), nullptr);
    nodes_.back().back = [out, a, b](Tape& t) {
        const Vec& g = t.node(out).grad.vec();
        t.node(a).grad.vec() += g;
        t.node(b).grad.vec() -= g;
    };
    return out;
}

Value Tape::mul(Value a, Value b) {
    check_same_shape(value(a), value(b), "mul");
    Tensor outv = value(a);
    outv.vec().array() *= value(b).vec().array();
    Value out = push(std::move(outv), nullptr);
    nodes_.back().back = [out, a, b](Tape& t) {
        const Vec& g = t.node(out).grad.vec();
        t.node(a).grad.vec().array() += g.array() * t.node(b).val.vec().array();
        t.node(b).grad.vec().array() += g.array() * t.node(a).val.vec().array();
    };
    return out;
}

Value Tape::scale(Value a, double c) {
    Tensor outv = value(a);
    outv.vec() *= c;
    Value out = push(std::move(outv), nullptr);
    nodes_.back().back = [out, a, c](Tape& t) {
        t.node(a).grad.vec() += c * t.node(out).grad.vec();
    };
    return out;
}

Value Tape::matmul(Value a, Value b) {
    Value out = push(trv::matmul(value(a), value(b)), nullptr);
    nodes_.back().back = [out, a, b](Tape& t) {
        const Tensor& g = t.node(out).grad;
        t.node(a).grad.mat().noalias() += g.mat() * t.node(b).val.mat().transpose();
        t.node(b).grad.mat().noalias() += t.node(a).val.mat().transpose() * g.mat();
    };
    return out;
}

Value Tape::add_rowvec(Value x, Value b) {
    const Tensor& xv = value(x);
    const Tensor& bv = value(b);
    if (bv.size() != xv.cols())
        throw std::invalid_argument("add_rowvec: bias size " + std::to_string(bv.size()) +
                                    " != cols " + std::to_string(xv.cols()));
    Tensor outv = xv;
    Eigen::Map<const Eigen::RowVectorXd> br(bv.data(), bv.size());
    outv.mat().rowwise() += br;
    Value out = push(std::move(outv), nullptr);
    nodes_.back().back = [out, x, b](Tape& t) {
        const Tensor& g = t.node(out).grad;
        t.node(x).grad.vec() += g.vec();
        Eigen::Map<Eigen::RowVectorXd> bg(t.node(b).grad.data(), t.node(b).grad.size());
        bg += g.mat().colwise().sum();
    };
    return out;
}

Value Tape::layer_norm(Value x, Value gamma, Value beta, double eps) {
    const Tensor& xv = value(x);
    const long d = xv.cols();
    const long n = xv.size() / d;
    Tensor outv = trv::layer_norm(xv, value(gamma), value(beta), eps);

    // save normalized rows and 1/sigma for the backward pass
    Tensor xhat({n, d});
    Tensor inv_sigma({n});
    {
        Eigen::Map<const Mat> xm(xv.data(), n, d);
        for (long i = 0; i < n; ++i) {
            double mean = xm.row(i).mean();
            double var = (xm.row(i).array() - mean).square().mean();
            double inv = 1.0 / std::sqrt(var + eps);
            inv_sigma[i] = inv;
            xhat.mat().row(i) = ((xm.row(i).array() - mean) * inv).matrix();
        }
    }
    Value out = push(std::move(outv), nullptr);
    nodes_.back().back = [out, x, gamma, beta, xhat, inv_sigma, n, d](Tape& t) {
        Eigen::Map<const Mat> g(t.node(out).grad.data(), n, d);
        Eigen::Map<const Eigen::RowVectorXd> gam(t.node(gamma).val.data(), d);
        Eigen::Map<Mat> gx(t.node(x).grad.data(), n, d);
        Eigen::Map<Eigen::RowVectorXd> ggam(t.node(gamma).grad.data(), d);
        Eigen::Map<Eigen::RowVectorXd> gbeta(t.node(beta).grad.data(), d);
        for (long i = 0; i < n; ++i) {
            Eigen::RowVectorXd gy = g.row(i).cwiseProduct(gam);
            double m1 = gy.mean();
            double m2 = gy.cwiseProduct(xhat.mat().row(i)).mean();
            gx.row(i) += inv_sigma[i] *
                         (gy.array() - m1 - xhat.mat().row(i).array() * m2).matrix();
            ggam += g.row(i).cwiseProduct(xhat.mat().row(i));
            gbeta += g.row(i);
        }
    };
    return out;
}

Value Tape::softmax_rows(Value x) {
    Tensor outv = softmax_lastdim(value(x));
    Value out = push(std::move(outv), nullptr);
    nodes_.back().back = [out, x](Tape& t) {
        const Tensor& y = t.node(out).val;
        const long d = y.cols();
        const long n = y.size() / d;
        Eigen::Map<const Mat> ym(y.data(), n, d);
        Eigen::Map<const Mat> g(t.node(out).grad.data(), n, d);
        Eigen::Map<Mat> gx(t.node(x).grad.data(), n, d);
        for (long i = 0; i < n; ++i) {
            double dot = g.row(i).dot(ym.row(i));
            gx.row(i) += ym.row(i).cwiseProduct(g.row(i)).matrix() - dot * ym.row(i);
        }
    };
    return out;
}

Value Tape::silu(Value x) {
    Value out = push(trv::silu(value(x)), nullptr);
    nodes_.back().back = [out, x](Tape& t) {
        const Tensor& xv = t.node(x).val;
        const Vec& g = t.node(out).grad.vec();
        Vec& gx = t.node(x).grad.vec();
        for (long i = 0; i < xv.size(); ++i) {
            double s = sigmoid(xv[i]);
            gx[i] += g[i] * s * (1.0 + xv[i] * (1.0 - s));
        }
    };
    return out;
}

Value Tape::gelu(Value x) {
    Value out = push(trv::gelu(value(x)), nullptr);
    nodes_.back().back = [out, x](Tape& t) {
        const Tensor& xv = t.node(x).val;
        const Vec& g = t.node(out).grad.vec();
        Vec& gx = t.node(x).grad.vec();
        for (long i = 0; i < xv.size(); ++i)
            gx[i] += g[i] * (norm_cdf(xv[i]) + xv[i] * norm_pdf(xv[i]));
    };
    return out;
}

Value Tape::sum(Value x) {
    Value out = push(Tensor::scalar(value(x).vec().sum()), nullptr);
    nodes_.back().back = [out, x](Tape& t) {
        t.node(x).grad.vec().array() += t.node(out).grad[0];
    };
    return out;
}

Value Tape::transpose(Value x) {
    const Tensor& xv = value(x);
    Tensor outv({xv.cols(), xv.rows()});
    outv.mat() = xv.mat().transpose();
    Value out = push(std::move(outv), nullptr);
    nodes_.back().back = [out, x](Tape& t) {
        t.node(x).grad.mat() += t.node(out).grad.mat().transpose();
    };
    return out;
}

Value Tape::reshape(Value x, std::vector<long> shape) {
    const Tensor& xv = value(x);
    Tensor outv(shape);
    if (outv.size() != xv.size())
        throw std::invalid_argument("reshape: size mismatch " + shape_str(xv.shape()) + " -> " +
                                    shape_str(shape));
    outv.vec() = xv.vec();
    Value out = push(std::move(outv), nullptr);
    nodes_.back().back = [out, x](Tape& t) {
        t.node(x).grad.vec() += t.node(out).grad.vec();
    };
    return out;
}

Value Tape::slice_cols(Value x, long c0, long len) {
    const Tensor& xv = value(x);
    if (c0 < 0 || len <= 0 || c0 + len > xv.cols())
        throw std::invalid_argument("slice_cols: range [" + std::to_string(c0) + "," +
                                    std::to_string(c0 + len) + ") outside " +
                                    std::to_string(xv.cols()) + " cols");
    Tensor outv({xv.rows(), len});
    outv.mat() = xv.mat().middleCols(c0, len);
    Value out = push(std::move(outv), nullptr);
    nodes_.back().back = [out, x, c0, len](Tape& t) {
        t.node(x).grad.mat().middleCols(c0, len) += t.node(out).grad.mat();
    };
    return out;
}

Value Tape::concat_cols(const std::vector<Value>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_cols: empty input");
    long rows = value(xs[0]).rows();
    long cols = 0;
    for (Value v : xs) {
        if (value(v).rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
        cols += value(v).cols();
    }
    Tensor outv({rows, cols});
    long c = 0;
    for (Value v : xs) {
        outv.mat().middleCols(c, value(v).cols()) = value(v).mat();
        c += value(v).cols();
    }
    Value out = push(std::move(outv), nullptr);
    nodes_.back().back = [out, xs](Tape& t) {
        long c = 0;
        for (Value v : xs) {
            long w = t.node(v).val.cols();
            t.node(v).grad.mat() += t.node(out).grad.mat().middleCols(c, w);
            c += w;
        }
    };
    return out;
}

Value Tape::select_rows(Value x, std::vector<long> idx) {
    const Tensor& xv = value(x);
    for (long i : idx)
        if (i < 0 || i >= xv.rows())
            throw std::out_of_range("select_rows: row " + std::to_string(i) + " outside " +
                                    std::to_string(xv.rows()));
    Tensor outv({static_cast<long>(idx.size()), xv.cols()});
    for (size_t i = 0; i < idx.size(); ++i) outv.mat().row(static_cast<long>(i)) = xv.mat().row(idx[i]);
    Value out = push(std::move(outv), nullptr);
    nodes_.back().back = [out, x, idx = std::move(idx)](Tape& t) {
        for (size_t i = 0; i < idx.size(); ++i)
            t.node(x).grad.mat().row(idx[i]) += t.node(out).grad.mat().row(static_cast<long>(i));
    };
    return out;
}

Value Tape::replace_rows(Value x, Value row, std::vector<long> idx) {
    const Tensor& xv = value(x);
    const Tensor& rv = value(row);
    if (rv.size() != xv.cols())
        throw std::invalid_argument("replace_rows: row size != cols");
    Tensor outv = xv;
    Eigen::Map<const Eigen::RowVectorXd> r(rv.data(), rv.size());
    for (long i : idx) {
        if (i < 0 || i >= xv.rows())
            throw std::out_of_range("replace_rows: row " + std::to_string(i) + " outside " +
                                    std::to_string(xv.rows()));
        outv.mat().row(i) = r;
    }
    Value out = push(std::move(outv), nullptr);
    nodes_.back().back = [out, x, row, idx = std::move(idx)](Tape& t) {
        Mat g = t.node(out).grad.mat();
        std::vector<bool> is_masked(static_cast<size_t>(g.rows()), false);
        for (long i : idx) is_masked[static_cast<size_t>(i)] = true;
        Eigen::Map<Eigen::RowVectorXd> gr(t.node(row).grad.data(), t.node(row).grad.size());
        for (long i = 0; i < g.rows(); ++i) {
            if (is_masked[static_cast<size_t>(i)])
                gr += g.row(i);
            else
                t.node(x).grad.mat().row(i) += g.row(i);
        }
    };
    return out;
}

Value Tape::rope(Value x, const RopeTable* table, std::vector<GridPos> positions) {
    Tensor outv = apply_rope(value(x), *table, positions);
    Value out = push(std::move(outv), nullptr);
    nodes_.back().back = [out, x, table, positions = std::move(positions)](Tape& t) {
        // rotation is orthogonal, so the adjoint is the inverse rotation
        Tensor g = t.node(out).grad;
        const long hd = g.cols();
        for (long i = 0; i < g.rows(); ++i)
            table->rotate(g.data() + i * hd, positions[static_cast<size_t>(i)], -1);
        t.node(x).grad.vec() += g.vec();
    };
    return out;
}

Value Tape::neg_cosine_sum(Value pred, Tensor target, double eps) {
    const Tensor& p = value(pred);
    check_same_shape(p, target, "neg_cosine_sum");
    const long n = p.rows(), d = p.cols();
    double total = 0;
    for (long i = 0; i < n; ++i) {
        double s = p.mat().row(i).dot(target.mat().row(i));
        double np = p.mat().row(i).norm();
        double nt = target.mat().row(i).norm();
        total += -s / (np * nt + eps);
    }
    Value out = push(Tensor::scalar(total), nullptr);
    nodes_.back().back = [out, pred, target = std::move(target), eps, n, d](Tape& t) {
        double g = t.node(out).grad[0];
        Eigen::Map<const Mat> p(t.node(pred).val.data(), n, d);
        Eigen::Map<Mat> gp(t.node(pred).grad.data(), n, d);
        for (long i = 0; i < n; ++i) {
            double s = p.row(i).dot(target.mat().row(i));
            double np = p.row(i).norm();
            double nt = target.mat().row(i).norm();
            double denom = np * nt + eps;
            double np_safe = std::max(np, 1e-12);
            gp.row(i) += g * (-target.mat().row(i) / denom +
                              (s * nt / (np_safe * denom * denom)) * p.row(i));
        }
    };
    return out;
}

std::vector<Tensor> Tape::gradient(Value loss, const std::vector<Value>& params) {
    if (value(loss).size() != 1)
        throw std::invalid_argument("gradient: loss must be scalar");
    for (Value p : params) node(p);  // validates membership
    for (Node& n : nodes_) n.grad.vec().setZero();
    node(loss).grad[0] = 1.0;
    for (long i = loss.id; i >= 0; --i) {
        Node& n = nodes_[static_cast<size_t>(i)];
        if (n.back) n.back(*this);
    }
    std::vector<Tensor> out;
    out.reserve(params.size());
    for (Value p : params) out.push_back(node(p).grad);
    return out;
}

// ---------------------------------------------------------------------------

std::vector<Tensor> finite_diff_grad(const std::function<double(const std::vector<Tensor>&)>& f,
                                     const std::vector<Tensor>& params, double h) {
    if (h <= 0) throw std::invalid_argument("finite_diff_grad: h must be > 0");
    std::vector<Tensor> work = params;
    std::vector<Tensor> grads;
    grads.reserve(params.size());
    for (size_t p = 0; p < work.size(); ++p) {
        Tensor g(work[p].shape());
        for (long i = 0; i < work[p].size(); ++i) {
            double orig = work[p][i];
            work[p][i] = orig + h;
            double fp = f(work);
            work[p][i] = orig - h;
            double fm = f(work);
            work[p][i] = orig;
            g[i] = (fp - fm) / (2.0 * h);
        }
        grads.push_back(std::move(g));
    }
    return grads;
}

double max_rel_err(const std::vector<Tensor>& a, const std::vector<Tensor>& b, double floor) {
    if (a.size() != b.size()) throw std::invalid_argument("max_rel_err: list size mismatch");
    double worst = 0;
    for (size_t p = 0; p < a.size(); ++p) {
        check_same_shape(a[p], b[p], "max_rel_err");
        for (long i = 0; i < a[p].size(); ++i) {
            double denom = std::max({std::abs(a[p][i]), std::abs(b[p][i]), floor});
            worst = std::max(worst, std::abs(a[p][i] - b[p][i]) / denom);
        }
    }
    return worst;
}

}  // namespace trv
