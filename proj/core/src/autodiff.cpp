#include "facecom/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "facecom/errors.hpp"

namespace facecom::ad {

namespace {

std::string shape_str(const Matrix& m) {
  std::ostringstream os;
  os << '(' << m.rows() << 'x' << m.cols() << ')';
  return os.str();
}

[[noreturn]] void shape_error(const char* op, const Matrix& a, const Matrix& b) {
  throw NumericError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

void require_same_shape(const char* op, Var a, Var b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_error(op, a.value(), b.value());
}

Tape& tape_of(Var a) {
  if (!a.valid()) throw NumericError("operation on an unbound Var");
  return *a.tape();
}

Tape& common_tape(Var a, Var b) {
  if (a.tape() != b.tape()) throw NumericError("operands live on different tapes");
  return tape_of(a);
}

Matrix scalar_matrix(double v) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return m;
}

}  // namespace

// ---- SparseMat --------------------------------------------------------------

SparseMat::SparseMat(int rows, int cols, std::vector<Triplet> triplets)
    : rows_(rows), cols_(cols), triplets_(std::move(triplets)) {
  std::sort(triplets_.begin(), triplets_.end(), [](const Triplet& a, const Triplet& b) {
    return a.row < b.row || (a.row == b.row && a.col < b.col);
  });
  std::vector<Eigen::Triplet<double>> eig;
  eig.reserve(triplets_.size());
  for (std::size_t i = 0; i < triplets_.size(); ++i) {
    const Triplet& t = triplets_[i];
    if (t.row < 0 || t.row >= rows_ || t.col < 0 || t.col >= cols_)
      throw NumericError("SparseMat: triplet index out of range");
    if (i > 0 && triplets_[i - 1].row == t.row && triplets_[i - 1].col == t.col)
      throw NumericError("SparseMat: duplicate (row, col) entry");
    eig.emplace_back(t.row, t.col, t.weight);
  }
  csr_.resize(rows_, cols_);
  csr_.setFromTriplets(eig.begin(), eig.end());
  csr_t_ = csr_.transpose();
}

SparseMat SparseMat::identity(int n) {
  std::vector<Triplet> t;
  t.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) t.push_back({i, i, 1.0});
  return SparseMat(n, n, std::move(t));
}

Matrix SparseMat::multiply(const Matrix& x) const {
  if (x.rows() != cols_) throw NumericError("spmm: sparse cols " + std::to_string(cols_) + " vs " + shape_str(x));
  return csr_ * x;
}

Matrix SparseMat::multiply_transposed(const Matrix& x) const {
  if (x.rows() != rows_) throw NumericError("spmm^T: sparse rows " + std::to_string(rows_) + " vs " + shape_str(x));
  return csr_t_ * x;
}

Matrix SparseMat::to_dense() const { return Matrix(csr_); }

// ---- Parameter / Var / Tape ------------------------------------------------

Parameter::Parameter(std::string n, Matrix v) : name(std::move(n)), value(std::move(v)) {
  grad = Matrix::Zero(value.rows(), value.cols());
}

const Matrix& Var::value() const { return tape_->value(id_); }
const Matrix& Var::grad() const { return tape_->grad(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

double Var::scalar() const {
  const Matrix& v = value();
  if (v.size() != 1) throw NumericError("scalar() on non-scalar " + shape_str(v));
  return v(0, 0);
}

Var Tape::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::leaf(Matrix value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::param(Parameter& p, bool trainable) {
  Node n;
  n.ref = &p.value;
  n.requires_grad = trainable;
  n.param = trainable ? &p : nullptr;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::reference(const Matrix& m) {
  Node n;
  n.ref = &m;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::record(std::vector<Var> inputs, Matrix value, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  for (const Var& v : inputs) {
    if (v.tape() != this) throw NumericError("input Var belongs to another tape");
    n.requires_grad = n.requires_grad || requires_grad(v.id());
  }
  if (n.requires_grad) {
    n.inputs.reserve(inputs.size());
    for (const Var& v : inputs) n.inputs.push_back(v.id());
    n.backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Matrix& Tape::ensure_grad(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.rows() != n.val().rows() || n.grad.cols() != n.val().cols())
    n.grad = Matrix::Zero(n.val().rows(), n.val().cols());
  return n.grad;
}

const Matrix& Tape::grad(int id) const {
  const Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.rows() != n.val().rows() || n.grad.cols() != n.val().cols())
    n.grad = Matrix::Zero(n.val().rows(), n.val().cols());
  return n.grad;
}

void Tape::zero_grad() {
  for (Node& n : nodes_) {
    if (n.grad.size() > 0) n.grad.setZero();
  }
}

void Tape::backward(Var loss) {
  if (loss.tape() != this) throw NumericError("backward: loss on another tape");
  if (loss.value().size() != 1) throw NumericError("backward: loss must be scalar, got " + shape_str(loss.value()));
  if (nodes_.empty()) throw NumericError("backward: empty tape");
  ensure_grad(loss.id())(0, 0) += 1.0;

  std::vector<Matrix*> in_grads;
  for (int id = loss.id(); id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    if (n.backward) {
      in_grads.clear();
      for (int in : n.inputs) in_grads.push_back(requires_grad(in) ? &ensure_grad(in) : nullptr);
      n.backward(n.grad, in_grads);
    }
    if (n.param) {
      if (n.param->grad.rows() != n.val().rows() || n.param->grad.cols() != n.val().cols())
        n.param->grad = Matrix::Zero(n.val().rows(), n.val().cols());
      n.param->grad += n.grad;
    }
  }
}

// ---- operations -----------------------------------------------------------

Var matmul(Var a, Var b) {
  Tape& t = common_tape(a, b);
  if (a.cols() != b.rows()) shape_error("matmul", a.value(), b.value());
  // Node values live in a deque and are never modified, so pointers stay valid.
  const Matrix* av = &a.value();
  const Matrix* bv = &b.value();
  Matrix out = (*av) * (*bv);
  return t.record({a, b}, std::move(out), [av, bv](const Matrix& g, std::span<Matrix* const> gi) {
    if (gi[0]) gi[0]->noalias() += g * bv->transpose();
    if (gi[1]) gi[1]->noalias() += av->transpose() * g;
  });
}

Var spmm(const SparseMat& s, Var x) {
  Tape& t = tape_of(x);
  Matrix out = s.multiply(x.value());
  return t.record({x}, std::move(out), [&s](const Matrix& g, std::span<Matrix* const> gi) {
    if (gi[0]) *gi[0] += s.multiply_transposed(g);
  });
}

Var spmm_batched(const SparseMat& s, Var x, int batch) {
  Tape& t = tape_of(x);
  if (batch < 1 || x.rows() != static_cast<Eigen::Index>(batch) * s.cols())
    throw NumericError("spmm_batched: sparse cols " + std::to_string(s.cols()) + " x batch " +
                       std::to_string(batch) + " vs " + shape_str(x.value()));
  const Eigen::Index in_rows = s.cols();
  const Eigen::Index out_rows = s.rows();
  Matrix out(out_rows * batch, x.cols());
  for (int b = 0; b < batch; ++b)
    out.middleRows(b * out_rows, out_rows) = s.multiply(x.value().middleRows(b * in_rows, in_rows));
  return t.record({x}, std::move(out), [&s, batch, in_rows, out_rows](const Matrix& g, std::span<Matrix* const> gi) {
    if (!gi[0]) return;
    for (int b = 0; b < batch; ++b)
      gi[0]->middleRows(b * in_rows, in_rows) += s.multiply_transposed(g.middleRows(b * out_rows, out_rows));
  });
}

Var add(Var a, Var b) {
  Tape& t = common_tape(a, b);
  require_same_shape("add", a, b);
  return t.record({a, b}, a.value() + b.value(), [](const Matrix& g, std::span<Matrix* const> gi) {
    if (gi[0]) *gi[0] += g;
    if (gi[1]) *gi[1] += g;
  });
}

Var sub(Var a, Var b) {
  Tape& t = common_tape(a, b);
  require_same_shape("sub", a, b);
  return t.record({a, b}, a.value() - b.value(), [](const Matrix& g, std::span<Matrix* const> gi) {
    if (gi[0]) *gi[0] += g;
    if (gi[1]) *gi[1] -= g;
  });
}

Var hadamard(Var a, Var b) {
  Tape& t = common_tape(a, b);
  require_same_shape("hadamard", a, b);
  const Matrix* av = &a.value();
  const Matrix* bv = &b.value();
  return t.record({a, b}, av->cwiseProduct(*bv), [av, bv](const Matrix& g, std::span<Matrix* const> gi) {
    if (gi[0]) *gi[0] += g.cwiseProduct(*bv);
    if (gi[1]) *gi[1] += g.cwiseProduct(*av);
  });
}

Var scale(Var a, double factor) {
  return tape_of(a).record({a}, a.value() * factor, [factor](const Matrix& g, std::span<Matrix* const> gi) {
    if (gi[0]) *gi[0] += g * factor;
  });
}

Var add_scalar(Var a, double c) {
  return tape_of(a).record({a}, a.value().array() + c, [](const Matrix& g, std::span<Matrix* const> gi) {
    if (gi[0]) *gi[0] += g;
  });
}

Var add_row(Var a, Var row) {
  Tape& t = common_tape(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) shape_error("add_row", a.value(), row.value());
  Matrix out = a.value().rowwise() + row.value().row(0);
  return t.record({a, row}, std::move(out), [](const Matrix& g, std::span<Matrix* const> gi) {
    if (gi[0]) *gi[0] += g;
    if (gi[1]) *gi[1] += g.colwise().sum();
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw NumericError("concat_cols: no inputs");
  Tape& t = tape_of(parts[0]);
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  std::vector<Eigen::Index> offsets;
  for (const Var& p : parts) {
    if (p.rows() != rows) shape_error("concat_cols", parts[0].value(), p.value());
    offsets.push_back(cols);
    cols += p.cols();
  }
  Matrix out(rows, cols);
  for (std::size_t i = 0; i < parts.size(); ++i) out.middleCols(offsets[i], parts[i].cols()) = parts[i].value();
  std::vector<Var> inputs(parts.begin(), parts.end());
  std::vector<Eigen::Index> widths;
  for (const Var& p : parts) widths.push_back(p.cols());
  return t.record(inputs, std::move(out), [offsets, widths](const Matrix& g, std::span<Matrix* const> gi) {
    for (std::size_t i = 0; i < gi.size(); ++i)
      if (gi[i]) *gi[i] += g.middleCols(offsets[i], widths[i]);
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw NumericError("concat_rows: no inputs");
  Tape& t = tape_of(parts[0]);
  const Eigen::Index cols = parts[0].cols();
  Eigen::Index rows = 0;
  std::vector<Eigen::Index> offsets;
  std::vector<Eigen::Index> heights;
  for (const Var& p : parts) {
    if (p.cols() != cols) shape_error("concat_rows", parts[0].value(), p.value());
    offsets.push_back(rows);
    heights.push_back(p.rows());
    rows += p.rows();
  }
  Matrix out(rows, cols);
  for (std::size_t i = 0; i < parts.size(); ++i) out.middleRows(offsets[i], heights[i]) = parts[i].value();
  std::vector<Var> inputs(parts.begin(), parts.end());
  return t.record(inputs, std::move(out), [offsets, heights](const Matrix& g, std::span<Matrix* const> gi) {
    for (std::size_t i = 0; i < gi.size(); ++i)
      if (gi[i]) *gi[i] += g.middleRows(offsets[i], heights[i]);
  });
}

Var slice_rows(Var a, Eigen::Index begin, Eigen::Index count) {
  if (begin < 0 || count < 0 || begin + count > a.rows())
    throw NumericError("slice_rows: range [" + std::to_string(begin) + ", +" + std::to_string(count) +
                       ") outside " + shape_str(a.value()));
  return tape_of(a).record({a}, a.value().middleRows(begin, count),
                           [begin, count](const Matrix& g, std::span<Matrix* const> gi) {
                             if (gi[0]) gi[0]->middleRows(begin, count) += g;
                           });
}

Var slice_cols(Var a, Eigen::Index begin, Eigen::Index count) {
  if (begin < 0 || count < 0 || begin + count > a.cols())
    throw NumericError("slice_cols: range outside " + shape_str(a.value()));
  return tape_of(a).record({a}, a.value().middleCols(begin, count),
                           [begin, count](const Matrix& g, std::span<Matrix* const> gi) {
                             if (gi[0]) gi[0]->middleCols(begin, count) += g;
                           });
}

Var reshape(Var a, Eigen::Index rows, Eigen::Index cols) {
  if (rows * cols != a.value().size())
    throw NumericError("reshape: " + shape_str(a.value()) + " to (" + std::to_string(rows) + "x" +
                       std::to_string(cols) + ")");
  const Eigen::Index in_rows = a.rows();
  const Eigen::Index in_cols = a.cols();
  Matrix out = Eigen::Map<const Matrix>(a.value().data(), rows, cols);
  return tape_of(a).record({a}, std::move(out), [in_rows, in_cols](const Matrix& g, std::span<Matrix* const> gi) {
    if (gi[0]) *gi[0] += Eigen::Map<const Matrix>(g.data(), in_rows, in_cols);
  });
}

Var elu(Var a, double alpha) {
  const Matrix* x = &a.value();
  Matrix out = x->unaryExpr([alpha](double v) { return v > 0.0 ? v : alpha * std::expm1(v); });
  return tape_of(a).record({a}, std::move(out), [x, alpha](const Matrix& g, std::span<Matrix* const> gi) {
    if (!gi[0]) return;
    *gi[0] += g.cwiseProduct(x->unaryExpr([alpha](double v) { return v > 0.0 ? 1.0 : alpha * std::exp(v); }));
  });
}

Var softmax_rows(Var a) {
  const Matrix& x = a.value();
  Matrix y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mx = x.row(r).maxCoeff();
    y.row(r) = (x.row(r).array() - mx).exp();
    y.row(r) /= y.row(r).sum();
  }
  Matrix yc = y;
  return tape_of(a).record({a}, std::move(y), [yc](const Matrix& g, std::span<Matrix* const> gi) {
    if (!gi[0]) return;
    const Eigen::VectorXd dots = g.cwiseProduct(yc).rowwise().sum();
    *gi[0] += yc.cwiseProduct(g.colwise() - dots);
  });
}

Var sum(Var a) {
  return tape_of(a).record({a}, scalar_matrix(a.value().sum()), [](const Matrix& g, std::span<Matrix* const> gi) {
    if (gi[0]) gi[0]->array() += g(0, 0);
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  if (n == 0) throw NumericError("mean of empty matrix");
  return tape_of(a).record({a}, scalar_matrix(a.value().sum() / n), [n](const Matrix& g, std::span<Matrix* const> gi) {
    if (gi[0]) gi[0]->array() += g(0, 0) / n;
  });
}

Var sumsq(Var a) {
  const Matrix* x = &a.value();
  return tape_of(a).record({a}, scalar_matrix(x->squaredNorm()), [x](const Matrix& g, std::span<Matrix* const> gi) {
    if (gi[0]) *gi[0] += 2.0 * g(0, 0) * (*x);
  });
}

Var sqrt(Var a) {
  const Matrix y = a.value().cwiseSqrt();
  Matrix out = y;
  return tape_of(a).record({a}, std::move(out), [y](const Matrix& g, std::span<Matrix* const> gi) {
    if (gi[0]) *gi[0] += g.cwiseQuotient(2.0 * y);
  });
}

Var mse(Var a, Var b) {
  Tape& t = common_tape(a, b);
  require_same_shape("mse", a, b);
  const Matrix diff = a.value() - b.value();
  const double n = static_cast<double>(diff.size());
  if (n == 0) throw NumericError("mse of empty matrices");
  return t.record({a, b}, scalar_matrix(diff.squaredNorm() / n), [diff, n](const Matrix& g, std::span<Matrix* const> gi) {
    const double s = 2.0 * g(0, 0) / n;
    if (gi[0]) *gi[0] += s * diff;
    if (gi[1]) *gi[1] -= s * diff;
  });
}

Var vecnorm(Var a, double eps) {
  const Matrix* x = &a.value();
  const double norm = std::sqrt(x->squaredNorm() + eps);
  return tape_of(a).record({a}, scalar_matrix(norm), [x, norm](const Matrix& g, std::span<Matrix* const> gi) {
    if (gi[0] && norm > 0.0) *gi[0] += (g(0, 0) / norm) * (*x);
  });
}

// ---- gradient checking ------------------------------------------------------

double grad_check(const ScalarFn& f, const Matrix& x, double step, std::span<const Eigen::Index> coordinates) {
  Tape tape;
  Var xv = tape.leaf(x, true);
  Var out = f(tape, xv);
  tape.backward(out);
  const Matrix analytic = xv.grad();

  auto eval = [&](const Matrix& at) {
    Tape t;
    return f(t, t.leaf(at, false)).scalar();
  };

  std::vector<Eigen::Index> coords(coordinates.begin(), coordinates.end());
  if (coords.empty()) {
    coords.resize(static_cast<std::size_t>(x.size()));
    for (Eigen::Index i = 0; i < x.size(); ++i) coords[static_cast<std::size_t>(i)] = i;
  }
  double worst = 0.0;
  for (Eigen::Index i : coords) {
    Matrix xp = x;
    Matrix xm = x;
    xp.data()[i] += step;
    xm.data()[i] -= step;
    const double numeric = (eval(xp) - eval(xm)) / (2.0 * step);
    const double err = std::abs(analytic.data()[i] - numeric) / std::max(1.0, std::abs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

// ---- optimizer ----------------------------------------------------------

void adam_step(std::span<Parameter* const> params, AdamState& state, double lr) {
  if (state.m.size() != params.size()) {
    state.m.clear();
    state.v.clear();
    for (const Parameter* p : params) {
      state.m.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
      state.v.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols()) continue;
    Matrix& m = state.m[i];
    Matrix& v = state.v[i];
    m = state.beta1 * m + (1.0 - state.beta1) * p.grad;
    v = state.beta2 * v + (1.0 - state.beta2) * p.grad.cwiseAbs2();
    p.value.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + state.eps);
  }
}

}  // namespace facecom::ad
