#pragma once

#include <Eigen/Core>
#include <functional>
#include <string>
#include <vector>

namespace ac3d::ag {

using Mat = Eigen::MatrixXd;

/// Trainable tensor with its accumulated gradient.
struct Parameter {
  std::string name;
  Mat value;
  Mat grad;
  bool frozen = false;  // enters tapes as a constant

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Mat& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

/// Reverse-mode tape. With recording off, ops only compute values.
class Tape {
 public:
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var constant(Mat value);
  /// Reads the parameter in place; it must not change until the tape is gone.
  Var param(Parameter& p);

  /// Seeds d(loss)/d(loss) = 1 for a 1x1 node and runs the recorded closures.
  void backward(Var loss);

  const Mat& value(Var v) const;
  bool needs_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].needs_grad; }
  /// Gradient buffer of a node, allocated as zeros on first use.
  Mat& grad(Var v);

  /// Appends a node. `backward` runs only when some input needs a gradient.
  Var push(Mat value, bool needs_grad, std::function<void()> backward = {});

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool needs_grad = false;
    std::function<void()> backward;
    Parameter* param = nullptr;
    const Mat* param_value = nullptr;  // parameters are read in place
  };
  bool record_;
  std::vector<Node> nodes_;
};

/// Index map for gather_rows: output row r is the concatenation over
/// k < blocks of input row index[r * blocks + k] (-1 yields zeros).
struct GatherMap {
  std::vector<int> index;
  std::size_t blocks = 1;
  std::size_t rows() const { return index.size() / blocks; }
};

/// Cos/sin tables for rotary embedding, one row per token, one column per
/// rotated pair within a head.
struct RopeTable {
  Mat cos, sin;
};

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var scale(Var a, double s);
/// a + 1 * row (row is 1 x cols).
Var add_row(Var a, Var row);
/// a * row elementwise per row.
Var mul_row(Var a, Var row);
/// x * (1 + scale) + shift, with shift and scale 1 x cols.
Var modulate(Var x, Var shift, Var scale);
Var linear(Var x, Var w, Var b);
Var silu(Var a);
/// Row-wise normalization to zero mean and unit variance, no affine.
Var layer_norm(Var a, double eps = 1e-6);
/// RMS normalization of each head's slice, times a gain shared by heads.
Var rms_norm_heads(Var a, Var gain, std::size_t heads, double eps = 1e-6);
Var rope(Var a, const RopeTable& table, std::size_t heads);
/// Multi-head softmax attention; q is Nq x d, k and v are Nk x d.
Var attention(Var q, Var k, Var v, std::size_t heads);
Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);
Var gather_rows(Var a, const GatherMap& map);
/// Mean squared difference to a constant target, as a 1 x 1 node.
Var mse(Var a, const Mat& target);

}  // namespace ac3d::ag
