#pragma once

// Reverse-mode differentiation over dense row-major matrices and constant
// sparse matrices. A Tape is built per forward pass (define-by-run); trainable
// Parameters live outside the tape and receive gradients on backward().

#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/SparseCore>

namespace facecom::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class SparseMat {
 public:
  struct Triplet {
    int row = 0;
    int col = 0;
    double weight = 0.0;
  };

  SparseMat() = default;
  // Sorts triplets row-major; throws on duplicates or out-of-range indices.
  SparseMat(int rows, int cols, std::vector<Triplet> triplets);

  static SparseMat identity(int n);

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  const std::vector<Triplet>& triplets() const { return triplets_; }
  std::size_t nonzeros() const { return triplets_.size(); }

  Matrix multiply(const Matrix& x) const;             // S * x
  Matrix multiply_transposed(const Matrix& x) const;  // S^T * x
  Matrix to_dense() const;

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<Triplet> triplets_;
  Eigen::SparseMatrix<double, Eigen::RowMajor> csr_;
  Eigen::SparseMatrix<double, Eigen::RowMajor> csr_t_;
};

// A trainable array that outlives tapes.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;

  Parameter() = default;
  Parameter(std::string n, Matrix v);
  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while its tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  const Matrix& grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  bool requires_grad() const;
  double scalar() const;
  int id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

// Receives the output gradient and one pointer per input; pointers are null
// for inputs that do not require gradients. Implementations accumulate (+=).
using BackwardFn = std::function<void(const Matrix& grad_out, std::span<Matrix* const> grad_in)>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  Var leaf(Matrix value, bool requires_grad = true);
  // References p.value without copying; it must stay unchanged while the
  // tape lives. When trainable, the gradient is added to p.grad on backward().
  Var param(Parameter& p, bool trainable = true);
  // Constant that references external storage; `m` must outlive the tape.
  Var reference(const Matrix& m);

  // Records an operation. If no input requires gradients the backward
  // function is discarded and the node is a constant.
  Var record(std::vector<Var> inputs, Matrix value, BackwardFn backward);

  // Populates gradients of every node reachable from `loss` (1x1).
  void backward(Var loss);
  void zero_grad();

  std::size_t size() const { return nodes_.size(); }
  const Matrix& value(int id) const { return nodes_[static_cast<std::size_t>(id)].val(); }
  const Matrix& grad(int id) const;
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  const std::vector<int>& inputs(int id) const { return nodes_[static_cast<std::size_t>(id)].inputs; }

 private:
  struct Node {
    Matrix value;
    mutable Matrix grad;  // allocated lazily, zero until backward
    bool requires_grad = false;
    std::vector<int> inputs;
    BackwardFn backward;
    Parameter* param = nullptr;
    const Matrix* ref = nullptr;  // external storage instead of `value`
    const Matrix& val() const { return ref ? *ref : value; }
  };
  Matrix& ensure_grad(int id);

  std::deque<Node> nodes_;
};

// ---- operations -----------------------------------------------------------

Var matmul(Var a, Var b);
Var spmm(const SparseMat& s, Var x);
// x stacks `batch` blocks of s.cols() rows; s is applied to each block.
Var spmm_batched(const SparseMat& s, Var x, int batch);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var hadamard(Var a, Var b);
Var scale(Var a, double factor);
Var add_scalar(Var a, double c);
// a (r x c) + row (1 x c) broadcast over rows.
Var add_row(Var a, Var row);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var slice_rows(Var a, Eigen::Index begin, Eigen::Index count);
Var slice_cols(Var a, Eigen::Index begin, Eigen::Index count);
// Row-major reinterpretation; the element count must match.
Var reshape(Var a, Eigen::Index rows, Eigen::Index cols);
Var elu(Var a, double alpha = 1.0);
Var softmax_rows(Var a);
Var sum(Var a);
Var mean(Var a);
Var sumsq(Var a);
Var sqrt(Var a);
Var mse(Var a, Var b);
// sqrt(sum of squares + eps); eps guards the gradient at zero.
Var vecnorm(Var a, double eps = 0.0);

// ---- gradient checking ------------------------------------------------------

using ScalarFn = std::function<Var(Tape&, Var)>;

// Max over checked coordinates of |analytic - central| / max(1, |central|).
// When `coordinates` is empty every coordinate of x is checked.
double grad_check(const ScalarFn& f, const Matrix& x, double step,
                  std::span<const Eigen::Index> coordinates = {});

// ---- optimizer ----------------------------------------------------------

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step = 0;
  std::vector<Matrix> m;
  std::vector<Matrix> v;
};

void adam_step(std::span<Parameter* const> params, AdamState& state, double lr);

// ---- serialization ------------------------------------------------------

// Named arrays in a flat binary container: "FCPK", u32 version, u64 header
// length, a JSON header (names, dtypes, shapes, offsets, metadata) and the
// raw little-endian payload.
struct PackArray {
  enum class DType { F64, I64 };

  std::string name;
  DType dtype = DType::F64;
  std::vector<std::int64_t> shape;
  std::vector<double> f64;
  std::vector<std::int64_t> i64;

  std::int64_t element_count() const;
  static PackArray from_matrix(std::string name, const Matrix& m);
  static PackArray from_ints(std::string name, std::vector<std::int64_t> values,
                             std::vector<std::int64_t> shape);
  Matrix to_matrix() const;
};

struct Pack {
  std::string metadata_json = "{}";
  std::vector<PackArray> arrays;
  const PackArray& at(const std::string& name) const;
  bool contains(const std::string& name) const;
};

inline constexpr std::uint32_t kPackVersion = 1;

void write_pack(const std::filesystem::path& path, const Pack& pack);
Pack read_pack(const std::filesystem::path& path);

void save_parameters(const std::filesystem::path& path, std::span<const Parameter* const> params,
                     const std::string& metadata_json = "{}");
// Loads values into params by name; throws on missing names or shape mismatch.
std::string load_parameters(const std::filesystem::path& path, std::span<Parameter* const> params);

}  // namespace facecom::ad
