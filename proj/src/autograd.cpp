#include "ac3d/autograd.hpp"

#include <cmath>
#include <stdexcept>

namespace ac3d::ag {

const Mat& Var::value() const { return tape->value(*this); }

const Mat& Tape::value(Var v) const {
  const Node& n = nodes_[static_cast<std::size_t>(v.id)];
  return n.param_value ? *n.param_value : n.value;
}

Var Tape::constant(Mat value) {
  nodes_.push_back({std::move(value), {}, false, {}, nullptr});
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::param(Parameter& p) {
  const bool live = record_ && !p.frozen;
  nodes_.push_back({Mat(), {}, live, {}, live ? &p : nullptr, &p.value});
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::push(Mat value, bool needs_grad, std::function<void()> backward) {
  const bool keep = record_ && needs_grad;
  nodes_.push_back({std::move(value), {}, keep, keep ? std::move(backward) : std::function<void()>{}, nullptr});
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Mat& Tape::grad(Var v) {
  Node& n = nodes_[static_cast<std::size_t>(v.id)];
  if (n.grad.size() == 0) {
    const Mat& v = n.param_value ? *n.param_value : n.value;
    n.grad.setZero(v.rows(), v.cols());
  }
  return n.grad;
}

void Tape::backward(Var loss) {
  if (!record_) throw std::logic_error("backward on a non-recording tape");
  if (value(loss).size() != 1) throw std::invalid_argument("backward needs a scalar node");
  grad(loss)(0, 0) += 1.0;
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.needs_grad || n.grad.size() == 0) continue;
    if (n.backward) n.backward();
    if (n.param) {
      if (n.param->grad.size() == 0) n.param->zero_grad();
      n.param->grad += n.grad;
    }
  }
}

namespace {

Tape& tape_of(std::initializer_list<Var> vs) {
  Tape* t = vs.begin()->tape;
  for (const Var& v : vs)
    if (v.tape != t) throw std::invalid_argument("vars from different tapes");
  return *t;
}

// Pushes `value`; `make` receives the output handle and returns the closure.
template <class Make>
Var record(Tape& t, Mat value, std::initializer_list<Var> inputs, Make&& make) {
  bool needs = false;
  for (const Var& v : inputs) needs = needs || t.needs_grad(v);
  if (!needs || !t.recording()) return t.push(std::move(value), false);
  const Var out{&t, static_cast<int>(t.size())};
  return t.push(std::move(value), true, make(out));
}

void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = tape_of({a, b});
  require(a.cols() == b.rows(), "matmul: inner dimensions differ");
  return record(t, a.value() * b.value(), {a, b}, [&t, a, b](Var out) {
    return [&t, a, b, out] {
      const Mat& g = t.grad(out);
      if (t.needs_grad(a)) t.grad(a).noalias() += g * t.value(b).transpose();
      if (t.needs_grad(b)) t.grad(b).noalias() += t.value(a).transpose() * g;
    };
  });
}

Var add(Var a, Var b) {
  Tape& t = tape_of({a, b});
  require(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
  return record(t, a.value() + b.value(), {a, b}, [&t, a, b](Var out) {
    return [&t, a, b, out] {
      const Mat& g = t.grad(out);
      if (t.needs_grad(a)) t.grad(a) += g;
      if (t.needs_grad(b)) t.grad(b) += g;
    };
  });
}

Var scale(Var a, double s) {
  Tape& t = *a.tape;
  return record(t, a.value() * s, {a}, [&t, a, s](Var out) {
    return [&t, a, s, out] { t.grad(a) += s * t.grad(out); };
  });
}

Var add_row(Var a, Var row) {
  Tape& t = tape_of({a, row});
  require(row.rows() == 1 && row.cols() == a.cols(), "add_row: shape mismatch");
  Mat v = a.value();
  v.rowwise() += row.value().row(0);
  return record(t, std::move(v), {a, row}, [&t, a, row](Var out) {
    return [&t, a, row, out] {
      const Mat& g = t.grad(out);
      if (t.needs_grad(a)) t.grad(a) += g;
      if (t.needs_grad(row)) t.grad(row) += g.colwise().sum();
    };
  });
}

Var mul_row(Var a, Var row) {
  Tape& t = tape_of({a, row});
  require(row.rows() == 1 && row.cols() == a.cols(), "mul_row: shape mismatch");
  Mat v = a.value().array().rowwise() * row.value().row(0).array();
  return record(t, std::move(v), {a, row}, [&t, a, row](Var out) {
    return [&t, a, row, out] {
      const Mat& g = t.grad(out);
      if (t.needs_grad(a)) t.grad(a).array() += g.array().rowwise() * t.value(row).row(0).array();
      if (t.needs_grad(row)) t.grad(row) += (g.array() * t.value(a).array()).colwise().sum().matrix();
    };
  });
}

Var modulate(Var x, Var shift, Var scl) {
  Tape& t = tape_of({x, shift, scl});
  require(shift.rows() == 1 && scl.rows() == 1 && shift.cols() == x.cols() && scl.cols() == x.cols(),
          "modulate: shape mismatch");
  Mat v = x.value().array().rowwise() * (1.0 + scl.value().row(0).array());
  v.rowwise() += shift.value().row(0);
  return record(t, std::move(v), {x, shift, scl}, [&t, x, shift, scl](Var out) {
    return [&t, x, shift, scl, out] {
      const Mat& g = t.grad(out);
      if (t.needs_grad(x)) t.grad(x).array() += g.array().rowwise() * (1.0 + t.value(scl).row(0).array());
      if (t.needs_grad(shift)) t.grad(shift) += g.colwise().sum();
      if (t.needs_grad(scl)) t.grad(scl) += (g.array() * t.value(x).array()).colwise().sum().matrix();
    };
  });
}

Var linear(Var x, Var w, Var b) { return add_row(matmul(x, w), b); }

Var silu(Var a) {
  Tape& t = *a.tape;
  Eigen::ArrayXXd sig = 1.0 / (1.0 + (-a.value().array()).exp());
  Mat v = a.value().array() * sig;
  return record(t, std::move(v), {a}, [&t, a, sig = std::move(sig)](Var out) {
    return [&t, a, sig, out] {
      const Eigen::ArrayXXd x = t.value(a).array();
      t.grad(a).array() += t.grad(out).array() * (sig * (1.0 + x * (1.0 - sig)));
    };
  });
}

Var layer_norm(Var a, double eps) {
  Tape& t = *a.tape;
  const Mat& x = a.value();
  const Eigen::Index d = x.cols();
  const Eigen::VectorXd mean = x.rowwise().mean();
  Mat xc = x.colwise() - mean;
  const Eigen::VectorXd inv = ((xc.array().square().rowwise().sum() / static_cast<double>(d)) + eps).rsqrt();
  Mat y = xc.array().colwise() * inv.array();
  Mat ycopy = t.recording() ? y : Mat();
  return record(t, std::move(y), {a}, [&t, a, inv, ycopy = std::move(ycopy), d](Var out) {
    return [&t, a, inv, ycopy, d, out] {
      const Mat& g = t.grad(out);
      const Eigen::VectorXd gm = g.rowwise().mean();
      const Eigen::VectorXd gy = (g.array() * ycopy.array()).rowwise().sum() / static_cast<double>(d);
      Mat dx = g.colwise() - gm;
      dx -= (ycopy.array().colwise() * gy.array()).matrix();
      t.grad(a).array() += dx.array().colwise() * inv.array();
    };
  });
}

Var rms_norm_heads(Var a, Var gain, std::size_t heads, double eps) {
  Tape& t = tape_of({a, gain});
  const Eigen::Index n = a.rows(), d = a.cols(), h = static_cast<Eigen::Index>(heads);
  require(heads > 0 && d % h == 0, "rms_norm_heads: width not divisible by heads");
  const Eigen::Index dh = d / h;
  require(gain.rows() == 1 && gain.cols() == dh, "rms_norm_heads: gain must be 1 x head_dim");
  Mat inv(n, h);
  Mat y(n, d);
  for (Eigen::Index k = 0; k < h; ++k) {
    auto x = a.value().middleCols(k * dh, dh);
    inv.col(k) = ((x.array().square().rowwise().sum() / static_cast<double>(dh)) + eps).rsqrt();
    y.middleCols(k * dh, dh) = (x.array().colwise() * inv.col(k).array()).rowwise() * gain.value().row(0).array();
  }
  return record(t, std::move(y), {a, gain}, [&t, a, gain, inv, h, dh](Var out) {
    return [&t, a, gain, inv, h, dh, out] {
      const Mat& g = t.grad(out);
      const auto gn = t.value(gain).row(0).array();
      for (Eigen::Index k = 0; k < h; ++k) {
        const auto x = t.value(a).middleCols(k * dh, dh).array();
        const Eigen::ArrayXXd xhat = x.colwise() * inv.col(k).array();
        const Eigen::ArrayXXd gk = g.middleCols(k * dh, dh).array();
        if (t.needs_grad(gain)) t.grad(gain).row(0) += (gk * xhat).colwise().sum().matrix();
        if (t.needs_grad(a)) {
          const Eigen::ArrayXXd gx = gk.rowwise() * gn;
          const Eigen::ArrayXd dot = (gx * xhat).rowwise().sum() / static_cast<double>(dh);
          t.grad(a).middleCols(k * dh, dh).array() +=
              (gx - xhat.colwise() * dot).colwise() * inv.col(k).array();
        }
      }
    };
  });
}

Var rope(Var a, const RopeTable& table, std::size_t heads) {
  Tape& t = *a.tape;
  const Eigen::Index n = a.rows(), d = a.cols(), h = static_cast<Eigen::Index>(heads);
  require(heads > 0 && d % h == 0 && (d / h) % 2 == 0, "rope: bad head layout");
  const Eigen::Index half = d / h / 2;
  require(table.cos.rows() == n && table.cos.cols() == half, "rope: table does not match tokens");
  Mat y(n, d);
  for (Eigen::Index k = 0; k < h; ++k)
    for (Eigen::Index p = 0; p < half; ++p) {
      const Eigen::Index c0 = k * half * 2 + 2 * p;
      const auto x0 = a.value().col(c0).array(), x1 = a.value().col(c0 + 1).array();
      const auto c = table.cos.col(p).array(), s = table.sin.col(p).array();
      y.col(c0) = (x0 * c - x1 * s).matrix();
      y.col(c0 + 1) = (x0 * s + x1 * c).matrix();
    }
  return record(t, std::move(y), {a}, [&t, a, table, h, half](Var out) {
    return [&t, a, table, h, half, out] {
      const Mat& g = t.grad(out);
      Mat& ga = t.grad(a);
      for (Eigen::Index k = 0; k < h; ++k)
        for (Eigen::Index p = 0; p < half; ++p) {
          const Eigen::Index c0 = k * half * 2 + 2 * p;
          const auto g0 = g.col(c0).array(), g1 = g.col(c0 + 1).array();
          const auto c = table.cos.col(p).array(), s = table.sin.col(p).array();
          ga.col(c0).array() += g0 * c + g1 * s;
          ga.col(c0 + 1).array() += g1 * c - g0 * s;
        }
    };
  });
}

Var attention(Var q, Var k, Var v, std::size_t heads) {
  Tape& t = tape_of({q, k, v});
  const Eigen::Index d = q.cols(), h = static_cast<Eigen::Index>(heads);
  require(k.cols() == d && v.cols() == d && k.rows() == v.rows(), "attention: shape mismatch");
  require(heads > 0 && d % h == 0, "attention: width not divisible by heads");
  const Eigen::Index dh = d / h, nq = q.rows();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const bool keep = t.recording() && (t.needs_grad(q) || t.needs_grad(k) || t.needs_grad(v));

  // Probabilities are stored transposed (nk x nq) so the softmax runs down columns.
  std::vector<Mat> probs(keep ? static_cast<std::size_t>(h) : 0);
  Mat out(nq, d);
  Mat a;
  for (Eigen::Index j = 0; j < h; ++j) {
    a.noalias() = k.value().middleCols(j * dh, dh) * q.value().middleCols(j * dh, dh).transpose();
    a *= inv_sqrt;
    const Eigen::RowVectorXd mx = a.colwise().maxCoeff();
    a.rowwise() -= mx;
    a = a.array().exp();
    const Eigen::RowVectorXd sum = a.colwise().sum();
    a.array().rowwise() /= sum.array();
    out.middleCols(j * dh, dh).noalias() = a.transpose() * v.value().middleCols(j * dh, dh);
    if (keep) probs[static_cast<std::size_t>(j)] = a;
  }
  return record(t, std::move(out), {q, k, v}, [&t, q, k, v, h, dh, inv_sqrt, probs = std::move(probs)](Var o) mutable {
    return [&t, q, k, v, h, dh, inv_sqrt, probs = std::move(probs), o] {
      const Mat& g = t.grad(o);
      Mat da, ds;
      for (Eigen::Index j = 0; j < h; ++j) {
        const Mat& p = probs[static_cast<std::size_t>(j)];
        const auto gj = g.middleCols(j * dh, dh);
        if (t.needs_grad(v)) t.grad(v).middleCols(j * dh, dh).noalias() += p * gj;
        if (!t.needs_grad(q) && !t.needs_grad(k)) continue;
        da.noalias() = t.value(v).middleCols(j * dh, dh) * gj.transpose();
        const Eigen::RowVectorXd dot = (da.array() * p.array()).colwise().sum();
        ds = (p.array() * (da.array().rowwise() - dot.array())) * inv_sqrt;
        if (t.needs_grad(q)) t.grad(q).middleCols(j * dh, dh).noalias() += ds.transpose() * t.value(k).middleCols(j * dh, dh);
        if (t.needs_grad(k)) t.grad(k).middleCols(j * dh, dh).noalias() += ds * t.value(q).middleCols(j * dh, dh);
      }
    };
  });
}

Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  Tape& t = *a.tape;
  require(start >= 0 && count >= 0 && start + count <= a.cols(), "slice_cols: out of range");
  return record(t, a.value().middleCols(start, count), {a}, [&t, a, start, count](Var out) {
    return [&t, a, start, count, out] { t.grad(a).middleCols(start, count) += t.grad(out); };
  });
}

Var gather_rows(Var a, const GatherMap& map) {
  Tape& t = *a.tape;
  require(map.blocks > 0 && map.index.size() % map.blocks == 0, "gather_rows: bad map");
  const Mat& src = a.value();
  const Eigen::Index rows = static_cast<Eigen::Index>(map.rows()), c = src.cols();
  const Eigen::Index blocks = static_cast<Eigen::Index>(map.blocks);
  for (int i : map.index) require(i < src.rows(), "gather_rows: index out of range");
  Mat dst(rows, blocks * c);
  for (Eigen::Index b = 0; b < blocks; ++b)
    for (Eigen::Index j = 0; j < c; ++j) {
      const double* in = src.col(j).data();
      double* out = dst.col(b * c + j).data();
      for (Eigen::Index r = 0; r < rows; ++r) {
        const int i = map.index[static_cast<std::size_t>(r * blocks + b)];
        out[r] = i < 0 ? 0.0 : in[i];
      }
    }
  return record(t, std::move(dst), {a}, [&t, a, map](Var out) {
    return [&t, a, map, out] {
      const Mat& g = t.grad(out);
      Mat& acc = t.grad(a);
      const Eigen::Index c = acc.cols(), blocks = static_cast<Eigen::Index>(map.blocks), rows = g.rows();
      for (Eigen::Index b = 0; b < blocks; ++b)
        for (Eigen::Index j = 0; j < c; ++j) {
          const double* in = g.col(b * c + j).data();
          double* dst = acc.col(j).data();
          for (Eigen::Index r = 0; r < rows; ++r) {
            const int i = map.index[static_cast<std::size_t>(r * blocks + b)];
            if (i >= 0) dst[i] += in[r];
          }
        }
    };
  });
}

Var mse(Var a, const Mat& target) {
  Tape& t = *a.tape;
  require(a.rows() == target.rows() && a.cols() == target.cols(), "mse: shape mismatch");
  const double n = static_cast<double>(target.size());
  Mat diff = a.value() - target;
  Mat v(1, 1);
  v(0, 0) = diff.squaredNorm() / n;
  return record(t, std::move(v), {a}, [&t, a, diff = std::move(diff), n](Var out) {
    return [&t, a, diff, n, out] { t.grad(a) += (2.0 * t.grad(out)(0, 0) / n) * diff; };
  });
}

}  // namespace ac3d::ag
