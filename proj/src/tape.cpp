#include "grecall/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "grecall/errors.hpp"

namespace grecall::nn {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::runtime_error(msg);
}

double logsumexp(const double* x, const int* idx, int n) {
  double m = x[idx[0]];
  for (int i = 1; i < n; ++i) m = std::max(m, x[idx[i]]);
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += std::exp(x[idx[i]] - m);
  return m + std::log(s);
}

constexpr double kLnEps = 1e-5;        // layer norm variance floor
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

}  // namespace

int Tape::push(Tensor val, std::function<void(Tape&)> back, Parameter* bound) {
  Node n;
  n.val = std::move(val);
  n.back = std::move(back);
  n.bound = bound;
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

Var Tape::constant(Tensor t) { return {push(std::move(t), nullptr)}; }

Var Tape::param(Parameter& p) { return {push(p.value, nullptr, &p)}; }

double Tape::scalar(Var x) const {
  require(v(x.id).size() == 1, "scalar(): tensor is not scalar");
  return v(x.id).data[0];
}

Var Tape::add(Var a, Var b) {
  require(v(a.id).same_shape(v(b.id)), "add: shape mismatch " +
          v(a.id).shape_str() + " vs " + v(b.id).shape_str());
  Tensor out = v(a.id);
  const Tensor& tb = v(b.id);
  for (int64_t i = 0; i < out.size(); ++i) out.at(i) += tb.at(i);
  int ai = a.id, bi = b.id;
  int id = push(std::move(out), nullptr);
  nodes_[static_cast<size_t>(id)].back = [ai, bi, id](Tape& t) {
    const Tensor& gout = t.g(id);
    Tensor& ga = t.g(ai);
    Tensor& gb = t.g(bi);
    for (int64_t i = 0; i < gout.size(); ++i) {
      ga.at(i) += gout.at(i);
      gb.at(i) += gout.at(i);
    }
  };
  return {id};
}

Var Tape::sub(Var a, Var b) {
  require(v(a.id).same_shape(v(b.id)), "sub: shape mismatch " +
          v(a.id).shape_str() + " vs " + v(b.id).shape_str());
  Tensor out = v(a.id);
  const Tensor& tb = v(b.id);
  for (int64_t i = 0; i < out.size(); ++i) out.at(i) -= tb.at(i);
  int ai = a.id, bi = b.id;
  int id = push(std::move(out), nullptr);
  nodes_[static_cast<size_t>(id)].back = [ai, bi, id](Tape& t) {
    const Tensor& gout = t.g(id);
    Tensor& ga = t.g(ai);
    Tensor& gb = t.g(bi);
    for (int64_t i = 0; i < gout.size(); ++i) {
      ga.at(i) += gout.at(i);
      gb.at(i) -= gout.at(i);
    }
  };
  return {id};
}

Var Tape::mul(Var a, Var b) {
  require(v(a.id).same_shape(v(b.id)), "mul: shape mismatch");
  Tensor out = v(a.id);
  const Tensor& tb = v(b.id);
  for (int64_t i = 0; i < out.size(); ++i) out.at(i) *= tb.at(i);
  int ai = a.id, bi = b.id;
  int id = push(std::move(out), nullptr);
  nodes_[static_cast<size_t>(id)].back = [ai, bi, id](Tape& t) {
    const Tensor& gout = t.g(id);
    const Tensor& va = t.v(ai);
    const Tensor& vb = t.v(bi);
    Tensor& ga = t.g(ai);
    Tensor& gb = t.g(bi);
    for (int64_t i = 0; i < gout.size(); ++i) {
      ga.at(i) += gout.at(i) * vb.at(i);
      gb.at(i) += gout.at(i) * va.at(i);
    }
  };
  return {id};
}

Var Tape::scale(Var a, double c) {
  Tensor out = v(a.id);
  for (double& x : out.data) x *= c;
  int ai = a.id;
  int id = push(std::move(out), nullptr);
  nodes_[static_cast<size_t>(id)].back = [ai, c, id](Tape& t) {
    const Tensor& gout = t.g(id);
    Tensor& ga = t.g(ai);
    for (int64_t i = 0; i < gout.size(); ++i) ga.at(i) += c * gout.at(i);
  };
  return {id};
}

Var Tape::add_bias(Var x, Var bias) {
  const Tensor& tx = v(x.id);
  const Tensor& tb = v(bias.id);
  require(tb.rank() == 1 && tb.dim(0) == tx.cols(),
          "add_bias: bias length " + tb.shape_str() + " vs x " + tx.shape_str());
  Tensor out = tx;
  int64_t n = tx.cols(), rows = tx.rows();
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < n; ++j) out.at(r * n + j) += tb.at(j);
  int xi = x.id, bi = bias.id;
  int id = push(std::move(out), nullptr);
  nodes_[static_cast<size_t>(id)].back = [xi, bi, n, rows, id](Tape& t) {
    const Tensor& gout = t.g(id);
    Tensor& gx = t.g(xi);
    Tensor& gb = t.g(bi);
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t j = 0; j < n; ++j) {
        gx.at(r * n + j) += gout.at(r * n + j);
        gb.at(j) += gout.at(r * n + j);
      }
  };
  return {id};
}

Var Tape::reshape(Var x, std::vector<int> shape) {
  require(Tensor::numel(shape) == v(x.id).size(), "reshape: size mismatch");
  Tensor out(std::move(shape), v(x.id).data);
  int xi = x.id;
  int id = push(std::move(out), nullptr);
  nodes_[static_cast<size_t>(id)].back = [xi, id](Tape& t) {
    const Tensor& gout = t.g(id);
    Tensor& gx = t.g(xi);
    for (int64_t i = 0; i < gout.size(); ++i) gx.at(i) += gout.at(i);
  };
  return {id};
}

Var Tape::relu(Var x) {
  Tensor out = v(x.id);
  for (double& e : out.data) e = e > 0.0 ? e : 0.0;
  int xi = x.id;
  int id = push(std::move(out), nullptr);
  nodes_[static_cast<size_t>(id)].back = [xi, id](Tape& t) {
    const Tensor& gout = t.g(id);
    const Tensor& vx = t.v(xi);
    Tensor& gx = t.g(xi);
    for (int64_t i = 0; i < gout.size(); ++i)
      if (vx.at(i) > 0.0) gx.at(i) += gout.at(i);
  };
  return {id};
}

Var Tape::tanh_act(Var x) {
  Tensor out = v(x.id);
  for (double& e : out.data) e = std::tanh(e);
  int xi = x.id;
  int id = push(std::move(out), nullptr);
  nodes_[static_cast<size_t>(id)].back = [xi, id](Tape& t) {
    const Tensor& gout = t.g(id);
    const Tensor& vy = t.v(id);
    Tensor& gx = t.g(xi);
    for (int64_t i = 0; i < gout.size(); ++i)
      gx.at(i) += gout.at(i) * (1.0 - vy.at(i) * vy.at(i));
  };
  return {id};
}

Var Tape::gelu(Var x) {
  // tanh approximation; smooth enough for finite-difference checks.
  Tensor out = v(x.id);
  for (double& e : out.data) {
    double u = kGeluC * (e + 0.044715 * e * e * e);
    e = 0.5 * e * (1.0 + std::tanh(u));
  }
  int xi = x.id;
  int id = push(std::move(out), nullptr);
  nodes_[static_cast<size_t>(id)].back = [xi, id](Tape& t) {
    const Tensor& gout = t.g(id);
    const Tensor& vx = t.v(xi);
    Tensor& gx = t.g(xi);
    for (int64_t i = 0; i < gout.size(); ++i) {
      double e = vx.at(i);
      double u = kGeluC * (e + 0.044715 * e * e * e);
      double th = std::tanh(u);
      double du = kGeluC * (1.0 + 3.0 * 0.044715 * e * e);
      double d = 0.5 * (1.0 + th) + 0.5 * e * (1.0 - th * th) * du;
      gx.at(i) += gout.at(i) * d;
    }
  };
  return {id};
}

Var Tape::stop_gradient(Var x) {
  return {push(v(x.id), nullptr)};  // plain copy, no back edge
}

Var Tape::rows_select(Var x, std::vector<int64_t> rows) {
  const Tensor& tx = v(x.id);
  int64_t n = tx.cols();
  Tensor out({static_cast<int>(rows.size()), static_cast<int>(n)});
  for (size_t r = 0; r < rows.size(); ++r) {
    require(rows[r] >= 0 && rows[r] < tx.rows(), "rows_select: row out of range");
    std::memcpy(&out.at(static_cast<int64_t>(r) * n), &tx.at(rows[r] * n),
                sizeof(double) * static_cast<size_t>(n));
  }
  int xi = x.id;
  int id = push(std::move(out), nullptr);
  nodes_[static_cast<size_t>(id)].back = [xi, rows = std::move(rows), n, id](Tape& t) {
    const Tensor& gout = t.g(id);
    Tensor& gx = t.g(xi);
    for (size_t r = 0; r < rows.size(); ++r)
      for (int64_t j = 0; j < n; ++j)
        gx.at(rows[r] * n + j) += gout.at(static_cast<int64_t>(r) * n + j);
  };
  return {id};
}

Var Tape::matmul(Var a, Var b, bool trans_b) {
  const Tensor& ta = v(a.id);
  const Tensor& tb = v(b.id);
  require(tb.rank() == 2, "matmul: b must be 2-D");
  int64_t m = ta.rows(), k = ta.cols();
  int64_t bk = trans_b ? tb.dim(1) : tb.dim(0);
  int64_t n = trans_b ? tb.dim(0) : tb.dim(1);
  require(k == bk, "matmul: inner dims " + ta.shape_str() + " vs " + tb.shape_str());
  std::vector<int> oshape(ta.shape);
  if (oshape.empty()) oshape = {1};
  oshape.back() = static_cast<int>(n);
  Tensor out(oshape);
  nn::matmul(ta.data.data(), tb.data.data(), out.data.data(), m, k, n, false,
             trans_b, false);
  int ai = a.id, bi = b.id;
  int id = push(std::move(out), nullptr);
  nodes_[static_cast<size_t>(id)].back = [ai, bi, m, k, n, trans_b, id](Tape& t) {
    const Tensor& gout = t.g(id);
    const Tensor& va = t.v(ai);
    const Tensor& vb = t.v(bi);
    // dA = G B^T (or G B when trans_b)
    nn::matmul(gout.data.data(), vb.data.data(), t.g(ai).data.data(), m, n, k,
               false, !trans_b, true);
    if (trans_b) {
      // y = A B^T, dB = G^T A
      nn::matmul(gout.data.data(), va.data.data(), t.g(bi).data.data(), n, m, k,
                 true, false, true);
    } else {
      // dB = A^T G
      nn::matmul(va.data.data(), gout.data.data(), t.g(bi).data.data(), k, m, n,
                 true, false, true);
    }
  };
  return {id};
}

Var Tape::bmm(Var a, Var b, bool trans_b) {
  const Tensor& ta = v(a.id);
  const Tensor& tb = v(b.id);
  require(ta.rank() == 3 && tb.rank() == 3 && ta.dim(0) == tb.dim(0),
          "bmm: need matching [N,...] batches");
  int64_t N = ta.dim(0), p = ta.dim(1), q = ta.dim(2);
  int64_t bq = trans_b ? tb.dim(2) : tb.dim(1);
  int64_t r = trans_b ? tb.dim(1) : tb.dim(2);
  require(q == bq, "bmm: inner dims " + ta.shape_str() + " vs " + tb.shape_str());
  Tensor out({static_cast<int>(N), static_cast<int>(p), static_cast<int>(r)});
  int64_t bstride = tb.dim(1) * static_cast<int64_t>(tb.dim(2));
  for (int64_t i = 0; i < N; ++i) {
    nn::matmul(&ta.at(i * p * q), &tb.at(i * bstride), &out.at(i * p * r), p, q,
               r, false, trans_b, false);
  }
  int ai = a.id, bi = b.id;
  int id = push(std::move(out), nullptr);
  nodes_[static_cast<size_t>(id)].back = [ai, bi, N, p, q, r, bstride, trans_b,
                                          id](Tape& t) {
    const Tensor& gout = t.g(id);
    const Tensor& va = t.v(ai);
    const Tensor& vb = t.v(bi);
    Tensor& ga = t.g(ai);
    Tensor& gb = t.g(bi);
    for (int64_t i = 0; i < N; ++i) {
      const double* gi = &gout.at(i * p * r);
      nn::matmul(gi, &vb.at(i * bstride), &ga.at(i * p * q), p, r, q, false,
                 !trans_b, true);
      if (trans_b) {
        nn::matmul(gi, &va.at(i * p * q), &gb.at(i * bstride), r, p, q, true,
                   false, true);
      } else {
        nn::matmul(&va.at(i * p * q), gi, &gb.at(i * bstride), q, p, r, true,
                   false, true);
      }
    }
  };
  return {id};
}

Var Tape::split_heads(Var x, int heads) {
  const Tensor& tx = v(x.id);
  require(tx.rank() == 3, "split_heads: need [B,T,d]");
  int B = tx.dim(0), T = tx.dim(1), d = tx.dim(2);
  require(d % heads == 0, "split_heads: d not divisible by heads");
  int dh = d / heads;
  Tensor out({B * heads, T, dh});
  for (int b = 0; b < B; ++b)
    for (int h = 0; h < heads; ++h)
      for (int t = 0; t < T; ++t)
        std::memcpy(&out.at(((static_cast<int64_t>(b) * heads + h) * T + t) * dh),
                    &tx.at((static_cast<int64_t>(b) * T + t) * d + h * dh),
                    sizeof(double) * static_cast<size_t>(dh));
  int xi = x.id;
  int id = push(std::move(out), nullptr);
  nodes_[static_cast<size_t>(id)].back = [xi, B, T, d, heads, dh, id](Tape& t) {
    const Tensor& gout = t.g(id);
    Tensor& gx = t.g(xi);
    for (int b = 0; b < B; ++b)
      for (int h = 0; h < heads; ++h)
        for (int tt = 0; tt < T; ++tt) {
          const double* src =
              &gout.at(((static_cast<int64_t>(b) * heads + h) * T + tt) * dh);
          double* dst = &gx.at((static_cast<int64_t>(b) * T + tt) * d + h * dh);
          for (int j = 0; j < dh; ++j) dst[j] += src[j];
        }
  };
  return {id};
}

Var Tape::merge_heads(Var x, int batch) {
  const Tensor& tx = v(x.id);
  require(tx.rank() == 3 && tx.dim(0) % batch == 0, "merge_heads: bad shape");
  int heads = tx.dim(0) / batch, T = tx.dim(1), dh = tx.dim(2);
  int d = heads * dh;
  Tensor out({batch, T, d});
  for (int b = 0; b < batch; ++b)
    for (int h = 0; h < heads; ++h)
      for (int t = 0; t < T; ++t)
        std::memcpy(&out.at((static_cast<int64_t>(b) * T + t) * d + h * dh),
                    &tx.at(((static_cast<int64_t>(b) * heads + h) * T + t) * dh),
                    sizeof(double) * static_cast<size_t>(dh));
  int xi = x.id;
  int id = push(std::move(out), nullptr);
  nodes_[static_cast<size_t>(id)].back = [xi, batch, heads, T, dh, d, id](Tape& t) {
    const Tensor& gout = t.g(id);
    Tensor& gx = t.g(xi);
    for (int b = 0; b < batch; ++b)
      for (int h = 0; h < heads; ++h)
        for (int tt = 0; tt < T; ++tt) {
          const double* src =
              &gout.at((static_cast<int64_t>(b) * T + tt) * d + h * dh);
          double* dst =
              &gx.at(((static_cast<int64_t>(b) * heads + h) * T + tt) * dh);
          for (int j = 0; j < dh; ++j) dst[j] += src[j];
        }
  };
  return {id};
}

Var Tape::layer_norm(Var x, Var gain, Var bias) {
  const Tensor& tx = v(x.id);
  const Tensor& tg = v(gain.id);
  const Tensor& tb = v(bias.id);
  int64_t n = tx.cols(), rows = tx.rows();
  require(tg.size() == n && tb.size() == n, "layer_norm: gain/bias length");
  Tensor out = tx;
  Tensor xhat({static_cast<int>(rows), static_cast<int>(n)});
  std::vector<double> inv_sigma(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = &tx.at(r * n);
    double mu = 0.0;
    for (int64_t j = 0; j < n; ++j) mu += xr[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (int64_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(n);
    double is = 1.0 / std::sqrt(var + kLnEps);
    inv_sigma[static_cast<size_t>(r)] = is;
    for (int64_t j = 0; j < n; ++j) {
      double xh = (xr[j] - mu) * is;
      xhat.at(r * n + j) = xh;
      out.at(r * n + j) = tg.at(j) * xh + tb.at(j);
    }
  }
  int xi = x.id, gi = gain.id, bi = bias.id;
  int id = push(std::move(out), nullptr);
  nodes_[static_cast<size_t>(id)].back = [xi, gi, bi, rows, n,
                                          xhat = std::move(xhat),
                                          inv_sigma = std::move(inv_sigma),
                                          id](Tape& t) {
    const Tensor& gout = t.g(id);
    const Tensor& vg = t.v(gi);
    Tensor& gx = t.g(xi);
    Tensor& gg = t.g(gi);
    Tensor& gb = t.g(bi);
    for (int64_t r = 0; r < rows; ++r) {
      const double* go = &gout.at(r * n);
      const double* xh = &xhat.at(r * n);
      double sum_d = 0.0, sum_dx = 0.0;
      for (int64_t j = 0; j < n; ++j) {
        double dj = go[j] * vg.at(j);
        sum_d += dj;
        sum_dx += dj * xh[j];
        gg.at(j) += go[j] * xh[j];
        gb.at(j) += go[j];
      }
      double is = inv_sigma[static_cast<size_t>(r)];
      double inv_n = 1.0 / static_cast<double>(n);
      for (int64_t j = 0; j < n; ++j) {
        double dj = go[j] * vg.at(j);
        gx.at(r * n + j) += is * (dj - inv_n * sum_d - xh[j] * inv_n * sum_dx);
      }
    }
  };
  return {id};
}

Var Tape::causal_softmax(Var scores) {
  const Tensor& ts = v(scores.id);
  require(ts.rank() == 3 && ts.dim(1) == ts.dim(2), "causal_softmax: need [N,T,T]");
  int64_t N = ts.dim(0), T = ts.dim(1);
  Tensor out({static_cast<int>(N), static_cast<int>(T), static_cast<int>(T)});
  for (int64_t b = 0; b < N; ++b)
    for (int64_t i = 0; i < T; ++i) {
      const double* row = &ts.at((b * T + i) * T);
      double* orow = &out.at((b * T + i) * T);
      double m = row[0];
      for (int64_t j = 1; j <= i; ++j) m = std::max(m, row[j]);
      double s = 0.0;
      for (int64_t j = 0; j <= i; ++j) {
        orow[j] = std::exp(row[j] - m);
        s += orow[j];
      }
      for (int64_t j = 0; j <= i; ++j) orow[j] /= s;
      for (int64_t j = i + 1; j < T; ++j) orow[j] = 0.0;
    }
  int si = scores.id;
  int id = push(std::move(out), nullptr);
  nodes_[static_cast<size_t>(id)].back = [si, N, T, id](Tape& t) {
    const Tensor& gout = t.g(id);
    const Tensor& vy = t.v(id);
    Tensor& gs = t.g(si);
    for (int64_t b = 0; b < N; ++b)
      for (int64_t i = 0; i < T; ++i) {
        const double* y = &vy.at((b * T + i) * T);
        const double* go = &gout.at((b * T + i) * T);
        double dot = 0.0;
        for (int64_t j = 0; j <= i; ++j) dot += y[j] * go[j];
        double* gr = &gs.at((b * T + i) * T);
        for (int64_t j = 0; j <= i; ++j) gr[j] += y[j] * (go[j] - dot);
      }
  };
  return {id};
}

Var Tape::embedding(Var table, std::vector<int> ids) {
  const Tensor& tt = v(table.id);
  require(tt.rank() == 2, "embedding: table must be [V,d]");
  int64_t V = tt.dim(0), d = tt.dim(1);
  Tensor out({static_cast<int>(ids.size()), static_cast<int>(d)});
  for (size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] >= 0 && ids[i] < V, "embedding: id out of range");
    std::memcpy(&out.at(static_cast<int64_t>(i) * d), &tt.at(ids[i] * d),
                sizeof(double) * static_cast<size_t>(d));
  }
  int ti = table.id;
  int id = push(std::move(out), nullptr);
  nodes_[static_cast<size_t>(id)].back = [ti, ids = std::move(ids), d, id](Tape& t) {
    const Tensor& gout = t.g(id);
    Tensor& gt = t.g(ti);
    for (size_t i = 0; i < ids.size(); ++i)
      for (int64_t j = 0; j < d; ++j)
        gt.at(ids[i] * d + j) += gout.at(static_cast<int64_t>(i) * d + j);
  };
  return {id};
}

Var Tape::l2_normalize_rows(Var x) {
  const Tensor& tx = v(x.id);
  int64_t n = tx.cols(), rows = tx.rows();
  Tensor out = tx;
  std::vector<double> inv_norm(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (int64_t j = 0; j < n; ++j) s += tx.at(r * n + j) * tx.at(r * n + j);
    double inv = 1.0 / std::max(std::sqrt(s), 1e-12);
    inv_norm[static_cast<size_t>(r)] = inv;
    for (int64_t j = 0; j < n; ++j) out.at(r * n + j) *= inv;
  }
  int xi = x.id;
  int id = push(std::move(out), nullptr);
  nodes_[static_cast<size_t>(id)].back = [xi, rows, n, inv_norm = std::move(inv_norm),
                                          id](Tape& t) {
    const Tensor& gout = t.g(id);
    const Tensor& vy = t.v(id);
    Tensor& gx = t.g(xi);
    for (int64_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (int64_t j = 0; j < n; ++j) dot += vy.at(r * n + j) * gout.at(r * n + j);
      double inv = inv_norm[static_cast<size_t>(r)];
      for (int64_t j = 0; j < n; ++j)
        gx.at(r * n + j) += inv * (gout.at(r * n + j) - vy.at(r * n + j) * dot);
    }
  };
  return {id};
}

Var Tape::sum_all(Var x) {
  double s = 0.0;
  for (double e : v(x.id).data) s += e;
  int xi = x.id;
  int id = push(Tensor({1}, {s}), nullptr);
  nodes_[static_cast<size_t>(id)].back = [xi, id](Tape& t) {
    double go = t.g(id).at(0);
    Tensor& gx = t.g(xi);
    for (double& e : gx.data) e += go;
  };
  return {id};
}

Var Tape::sum_squares(Var x) {
  double s = 0.0;
  for (double e : v(x.id).data) s += e * e;
  int xi = x.id;
  int id = push(Tensor({1}, {s}), nullptr);
  nodes_[static_cast<size_t>(id)].back = [xi, id](Tape& t) {
    double go = t.g(id).at(0);
    const Tensor& vx = t.v(xi);
    Tensor& gx = t.g(xi);
    for (int64_t i = 0; i < vx.size(); ++i) gx.at(i) += 2.0 * vx.at(i) * go;
  };
  return {id};
}

Var Tape::softmax_cross_entropy(Var logits, std::vector<int> targets,
                                std::vector<uint8_t> row_mask) {
  const Tensor& tl = v(logits.id);
  int64_t Vn = tl.cols(), rows = tl.rows();
  require(static_cast<int64_t>(targets.size()) == rows, "cross_entropy: target count");
  require(row_mask.empty() || static_cast<int64_t>(row_mask.size()) == rows,
          "cross_entropy: mask length");
  int64_t active = 0;
  double total = 0.0;
  for (int64_t r = 0; r < rows; ++r) {
    if (!row_mask.empty() && !row_mask[static_cast<size_t>(r)]) continue;
    ++active;
    const double* row = &tl.at(r * Vn);
    double m = row[0];
    for (int64_t j = 1; j < Vn; ++j) m = std::max(m, row[j]);
    double s = 0.0;
    for (int64_t j = 0; j < Vn; ++j) s += std::exp(row[j] - m);
    total += m + std::log(s) - row[targets[static_cast<size_t>(r)]];
  }
  double denom = active > 0 ? static_cast<double>(active) : 1.0;
  int li = logits.id;
  int id = push(Tensor({1}, {total / denom}), nullptr);
  nodes_[static_cast<size_t>(id)].back = [li, targets = std::move(targets),
                                          row_mask = std::move(row_mask), rows, Vn,
                                          denom, id](Tape& t) {
    double go = t.g(id).at(0) / denom;
    const Tensor& vl = t.v(li);
    Tensor& gl = t.g(li);
    for (int64_t r = 0; r < rows; ++r) {
      if (!row_mask.empty() && !row_mask[static_cast<size_t>(r)]) continue;
      const double* row = &vl.at(r * Vn);
      double m = row[0];
      for (int64_t j = 1; j < Vn; ++j) m = std::max(m, row[j]);
      double s = 0.0;
      for (int64_t j = 0; j < Vn; ++j) s += std::exp(row[j] - m);
      for (int64_t j = 0; j < Vn; ++j) {
        double p = std::exp(row[j] - m) / s;
        gl.at(r * Vn + j) +=
            go * (p - (j == targets[static_cast<size_t>(r)] ? 1.0 : 0.0));
      }
    }
  };
  return {id};
}

Var Tape::constrained_logprob(Var logits, std::vector<std::vector<int>> allowed,
                              std::vector<int> targets) {
  const Tensor& tl = v(logits.id);
  int64_t Vn = tl.cols(), rows = tl.rows();
  require(static_cast<int64_t>(allowed.size()) == rows &&
              static_cast<int64_t>(targets.size()) == rows,
          "constrained_logprob: row count mismatch");
  Tensor out({static_cast<int>(rows)});
  for (int64_t r = 0; r < rows; ++r) {
    const auto& al = allowed[static_cast<size_t>(r)];
    require(!al.empty(), "constrained_logprob: empty allowed set");
    bool found = false;
    for (int j : al) {
      require(j >= 0 && j < Vn, "constrained_logprob: token out of vocabulary");
      if (j == targets[static_cast<size_t>(r)]) found = true;
    }
    require(found, "constrained_logprob: target not in allowed set");
    double lse = logsumexp(&tl.at(r * Vn), al.data(), static_cast<int>(al.size()));
    out.at(r) = tl.at(r * Vn + targets[static_cast<size_t>(r)]) - lse;
  }
  int li = logits.id;
  int id = push(std::move(out), nullptr);
  nodes_[static_cast<size_t>(id)].back = [li, allowed = std::move(allowed),
                                          targets = std::move(targets), rows, Vn,
                                          id](Tape& t) {
    const Tensor& gout = t.g(id);
    const Tensor& vl = t.v(li);
    Tensor& gl = t.g(li);
    for (int64_t r = 0; r < rows; ++r) {
      const auto& al = allowed[static_cast<size_t>(r)];
      double lse = logsumexp(&vl.at(r * Vn), al.data(), static_cast<int>(al.size()));
      double go = gout.at(r);
      for (int j : al) {
        double p = std::exp(vl.at(r * Vn + j) - lse);
        gl.at(r * Vn + j) +=
            go * ((j == targets[static_cast<size_t>(r)] ? 1.0 : 0.0) - p);
      }
    }
  };
  return {id};
}

Var Tape::segment_sum(Var x, int seg) {
  const Tensor& tx = v(x.id);
  require(seg > 0 && tx.size() % seg == 0, "segment_sum: size not divisible");
  int64_t groups = tx.size() / seg;
  Tensor out({static_cast<int>(groups)});
  for (int64_t gi = 0; gi < groups; ++gi) {
    double s = 0.0;
    for (int j = 0; j < seg; ++j) s += tx.at(gi * seg + j);
    out.at(gi) = s;
  }
  int xi = x.id;
  int id = push(std::move(out), nullptr);
  nodes_[static_cast<size_t>(id)].back = [xi, seg, groups, id](Tape& t) {
    const Tensor& gout = t.g(id);
    Tensor& gx = t.g(xi);
    for (int64_t gi = 0; gi < groups; ++gi)
      for (int j = 0; j < seg; ++j) gx.at(gi * seg + j) += gout.at(gi);
  };
  return {id};
}

Var Tape::grpo_loss(Var new_lp, std::vector<double> old_lp,
                    std::vector<double> ref_lp, std::vector<double> advantages,
                    std::vector<int> group_offsets, double eps_clip,
                    double kl_weight, bool clip) {
  const Tensor& tn = v(new_lp.id);
  int64_t n = tn.size();
  require(static_cast<int64_t>(old_lp.size()) == n &&
              static_cast<int64_t>(ref_lp.size()) == n &&
              static_cast<int64_t>(advantages.size()) == n,
          "grpo_loss: aligned lists required");
  require(group_offsets.size() >= 2 && group_offsets.front() == 0 &&
              group_offsets.back() == n,
          "grpo_loss: bad group offsets");
  int groups = static_cast<int>(group_offsets.size()) - 1;
  double total = 0.0;
  for (int g = 0; g < groups; ++g) {
    int lo = group_offsets[static_cast<size_t>(g)];
    int hi = group_offsets[static_cast<size_t>(g) + 1];
    double inv = 1.0 / static_cast<double>(hi - lo);
    double surr = 0.0, kl = 0.0;
    for (int i = lo; i < hi; ++i) {
      double rho = std::exp(tn.at(i) - old_lp[static_cast<size_t>(i)]);
      if (!std::isfinite(rho)) throw NumericError("grpo_loss: NaN/Inf ratio");
      double a = advantages[static_cast<size_t>(i)];
      double s;
      if (clip) {
        double clipped = std::clamp(rho, 1.0 - eps_clip, 1.0 + eps_clip);
        s = std::min(rho * a, clipped * a);
      } else {
        s = rho * a;
      }
      surr += s;
      double delta = ref_lp[static_cast<size_t>(i)] - tn.at(i);
      kl += std::exp(delta) - delta - 1.0;
    }
    total += -inv * surr + kl_weight * inv * kl;
  }
  total /= static_cast<double>(groups);
  int ni = new_lp.id;
  int id = push(Tensor({1}, {total}), nullptr);
  nodes_[static_cast<size_t>(id)].back =
      [ni, old_lp = std::move(old_lp), ref_lp = std::move(ref_lp),
       advantages = std::move(advantages), group_offsets = std::move(group_offsets),
       eps_clip, kl_weight, clip, groups, id](Tape& t) {
        double go = t.g(id).at(0) / static_cast<double>(groups);
        const Tensor& vn = t.v(ni);
        Tensor& gn = t.g(ni);
        for (int g = 0; g < groups; ++g) {
          int lo = group_offsets[static_cast<size_t>(g)];
          int hi = group_offsets[static_cast<size_t>(g) + 1];
          double inv = 1.0 / static_cast<double>(hi - lo);
          for (int i = lo; i < hi; ++i) {
            double rho = std::exp(vn.at(i) - old_lp[static_cast<size_t>(i)]);
            double a = advantages[static_cast<size_t>(i)];
            // d/d new of min(rho*a, clip(rho)*a): the unclipped branch is
            // active exactly when it attains the min (ties -> unclipped).
            double dsurr;
            if (clip) {
              double clipped = std::clamp(rho, 1.0 - eps_clip, 1.0 + eps_clip);
              dsurr = (rho * a <= clipped * a) ? rho * a : 0.0;
            } else {
              dsurr = rho * a;
            }
            double delta = ref_lp[static_cast<size_t>(i)] - vn.at(i);
            double dkl = 1.0 - std::exp(delta);
            gn.at(i) += go * inv * (-dsurr + kl_weight * dkl);
          }
        }
      };
  return {id};
}

void Tape::backward(Var loss) {
  if (backward_done_) {
    throw std::runtime_error("backward: already called on this tape");
  }
  backward_done_ = true;
  require(loss.valid() && loss.id < static_cast<int>(nodes_.size()),
          "backward: invalid loss var");
  require(v(loss.id).size() == 1, "backward: loss must be scalar");
  for (auto& n : nodes_) {
    n.grad = Tensor(n.val.shape);
  }
  nodes_[static_cast<size_t>(loss.id)].grad.at(0) = 1.0;
  for (int i = loss.id; i >= 0; --i) {
    auto& n = nodes_[static_cast<size_t>(i)];
    if (n.back) n.back(*this);
  }
  for (auto& n : nodes_) {
    if (n.bound) {
      for (int64_t i = 0; i < n.grad.size(); ++i)
        n.bound->grad.at(i) += n.grad.at(i);
    }
  }
}

}  // namespace grecall::nn
