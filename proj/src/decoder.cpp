#include "grecall/decoder.hpp"

#include <cmath>
#include <stdexcept>

namespace grecall::nn {

namespace {

std::string lname(const std::string& prefix, int layer, const char* part) {
  return prefix + ".l" + std::to_string(layer) + "." + part;
}

Var activate(Tape& tape, Act act, Var x) {
  switch (act) {
    case Act::Tanh: return tape.tanh_act(x);
    case Act::Relu: return tape.relu(x);
    case Act::Gelu: return tape.gelu(x);
  }
  throw std::runtime_error("unknown activation");
}

}  // namespace

void mlp_init(ParameterSet& ps, const MlpSpec& spec, uint64_t seed,
              double init_std) {
  if (spec.dims.size() < 2) throw std::runtime_error(spec.prefix + ": mlp needs >=2 dims");
  for (size_t i = 0; i + 1 < spec.dims.size(); ++i) {
    std::string idx = std::to_string(i);
    ps.add_normal(spec.prefix + ".w" + idx, {spec.dims[i], spec.dims[i + 1]},
                  seed, init_std);
    ps.add(spec.prefix + ".b" + idx, {spec.dims[i + 1]});
  }
}

Var mlp_forward(Tape& tape, ParameterSet& ps, const MlpSpec& spec, Var x) {
  if (tape.value(x).cols() != spec.dims.front()) {
    throw std::runtime_error(spec.prefix + ": input width " +
                             std::to_string(tape.value(x).cols()) + " != " +
                             std::to_string(spec.dims.front()));
  }
  Var h = x;
  for (size_t i = 0; i + 1 < spec.dims.size(); ++i) {
    std::string idx = std::to_string(i);
    h = tape.matmul(h, tape.param(ps.at(spec.prefix + ".w" + idx)));
    h = tape.add_bias(h, tape.param(ps.at(spec.prefix + ".b" + idx)));
    if (i + 2 < spec.dims.size()) h = activate(tape, spec.act, h);
  }
  return h;
}

void decoder_init(ParameterSet& ps, const DecoderSpec& spec, uint64_t seed,
                  double init_std) {
  const std::string& p = spec.prefix;
  ps.add_normal(p + ".wte", {spec.vocab, spec.d_model}, seed, init_std);
  ps.add_normal(p + ".wpe", {spec.max_seq, spec.d_model}, seed, init_std);
  for (int l = 0; l < spec.n_layers; ++l) {
    auto ones = [&](const std::string& n) {
      Parameter& prm = ps.add(n, {spec.d_model});
      std::fill(prm.value.data.begin(), prm.value.data.end(), 1.0);
    };
    ones(lname(p, l, "ln1.g"));
    ps.add(lname(p, l, "ln1.b"), {spec.d_model});
    for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"}) {
      ps.add_normal(lname(p, l, w), {spec.d_model, spec.d_model}, seed, init_std);
    }
    for (const char* b : {"attn.bq", "attn.bk", "attn.bv", "attn.bo"}) {
      ps.add(lname(p, l, b), {spec.d_model});
    }
    ones(lname(p, l, "ln2.g"));
    ps.add(lname(p, l, "ln2.b"), {spec.d_model});
    int dh = spec.d_model * spec.mlp_mult;
    ps.add_normal(lname(p, l, "mlp.w1"), {spec.d_model, dh}, seed, init_std);
    ps.add(lname(p, l, "mlp.b1"), {dh});
    ps.add_normal(lname(p, l, "mlp.w2"), {dh, spec.d_model}, seed, init_std);
    ps.add(lname(p, l, "mlp.b2"), {spec.d_model});
  }
  Parameter& gf = ps.add(p + ".lnf.g", {spec.d_model});
  std::fill(gf.value.data.begin(), gf.value.data.end(), 1.0);
  ps.add(p + ".lnf.b", {spec.d_model});
  ps.add_normal(p + ".head.w", {spec.d_model, spec.vocab}, seed, init_std);
  ps.add(p + ".head.b", {spec.vocab});
}

Var decoder_hidden(Tape& tape, ParameterSet& ps, const DecoderSpec& spec,
                   const std::vector<int>& tokens, int batch, int seq_len) {
  if (static_cast<int>(tokens.size()) != batch * seq_len) {
    throw std::runtime_error(spec.prefix + ": token buffer is not batch*seq_len");
  }
  if (seq_len > spec.max_seq) {
    throw std::runtime_error(spec.prefix + ": sequence length " +
                             std::to_string(seq_len) + " exceeds max_seq " +
                             std::to_string(spec.max_seq));
  }
  const std::string& p = spec.prefix;
  Var wte = tape.param(ps.at(p + ".wte"));
  Var wpe = tape.param(ps.at(p + ".wpe"));
  std::vector<int> pos(tokens.size());
  for (int b = 0; b < batch; ++b)
    for (int t = 0; t < seq_len; ++t) pos[static_cast<size_t>(b) * seq_len + t] = t;
  Var x = tape.add(tape.embedding(wte, tokens), tape.embedding(wpe, pos));
  x = tape.reshape(x, {batch, seq_len, spec.d_model});

  double scale = 1.0 / std::sqrt(static_cast<double>(spec.d_model / spec.n_heads));
  for (int l = 0; l < spec.n_layers; ++l) {
    Var h = tape.layer_norm(x, tape.param(ps.at(lname(p, l, "ln1.g"))),
                            tape.param(ps.at(lname(p, l, "ln1.b"))));
    Var q = tape.add_bias(tape.matmul(h, tape.param(ps.at(lname(p, l, "attn.wq")))),
                          tape.param(ps.at(lname(p, l, "attn.bq"))));
    Var k = tape.add_bias(tape.matmul(h, tape.param(ps.at(lname(p, l, "attn.wk")))),
                          tape.param(ps.at(lname(p, l, "attn.bk"))));
    Var v = tape.add_bias(tape.matmul(h, tape.param(ps.at(lname(p, l, "attn.wv")))),
                          tape.param(ps.at(lname(p, l, "attn.bv"))));
    Var qh = tape.split_heads(q, spec.n_heads);
    Var kh = tape.split_heads(k, spec.n_heads);
    Var vh = tape.split_heads(v, spec.n_heads);
    Var scores = tape.scale(tape.bmm(qh, kh, /*trans_b=*/true), scale);
    Var attn = tape.causal_softmax(scores);
    Var ctx = tape.merge_heads(tape.bmm(attn, vh), batch);
    Var proj = tape.add_bias(
        tape.matmul(ctx, tape.param(ps.at(lname(p, l, "attn.wo")))),
        tape.param(ps.at(lname(p, l, "attn.bo"))));
    x = tape.add(x, proj);

    Var h2 = tape.layer_norm(x, tape.param(ps.at(lname(p, l, "ln2.g"))),
                             tape.param(ps.at(lname(p, l, "ln2.b"))));
    Var m1 = tape.gelu(tape.add_bias(
        tape.matmul(h2, tape.param(ps.at(lname(p, l, "mlp.w1")))),
        tape.param(ps.at(lname(p, l, "mlp.b1")))));
    Var m2 = tape.add_bias(tape.matmul(m1, tape.param(ps.at(lname(p, l, "mlp.w2")))),
                           tape.param(ps.at(lname(p, l, "mlp.b2"))));
    x = tape.add(x, m2);
  }
  return tape.layer_norm(x, tape.param(ps.at(p + ".lnf.g")),
                         tape.param(ps.at(p + ".lnf.b")));
}

Var decoder_logits_at(Tape& tape, ParameterSet& ps, const DecoderSpec& spec,
                      Var hidden, std::vector<int64_t> flat_rows) {
  const Tensor& h = tape.value(hidden);
  Var flat = tape.reshape(hidden, {static_cast<int>(h.rows()), spec.d_model});
  Var rows = tape.rows_select(flat, std::move(flat_rows));
  Var logits = tape.matmul(rows, tape.param(ps.at(spec.prefix + ".head.w")));
  return tape.add_bias(logits, tape.param(ps.at(spec.prefix + ".head.b")));
}

namespace {

void ln_row(const double* x, const double* g, const double* b, double* y, int n) {
  double mu = 0.0;
  for (int j = 0; j < n; ++j) mu += x[j];
  mu /= n;
  double var = 0.0;
  for (int j = 0; j < n; ++j) var += (x[j] - mu) * (x[j] - mu);
  var /= n;
  double is = 1.0 / std::sqrt(var + 1e-5);
  for (int j = 0; j < n; ++j) y[j] = g[j] * (x[j] - mu) * is + b[j];
}

// y[j] = sum_p x[p] W[p][j] + b[j], accumulation order matching the tape's
// matmul kernel so both paths produce identical doubles.
void affine_row(const double* x, const Tensor& w, const Tensor& b, double* y) {
  int64_t in = w.dim(0), out = w.dim(1);
  for (int64_t j = 0; j < out; ++j) y[j] = 0.0;
  for (int64_t p = 0; p < in; ++p) {
    double xv = x[p];
    if (xv == 0.0) continue;
    const double* wp = &w.at(p * out);
    for (int64_t j = 0; j < out; ++j) y[j] += xv * wp[j];
  }
  for (int64_t j = 0; j < out; ++j) y[j] += b.at(j);
}

}  // namespace

std::vector<double> decoder_step(const ParameterSet& ps, const DecoderSpec& spec,
                                 KvCache& cache, int token) {
  const std::string& p = spec.prefix;
  int d = spec.d_model, nh = spec.n_heads, dh = d / nh;
  if (cache.k.empty()) {
    cache.k.assign(static_cast<size_t>(spec.n_layers), {});
    cache.v.assign(static_cast<size_t>(spec.n_layers), {});
  }
  if (cache.len >= spec.max_seq) {
    throw std::runtime_error(spec.prefix + ": cache full (max_seq reached)");
  }
  if (token < 0 || token >= spec.vocab) {
    throw std::runtime_error(spec.prefix + ": token id out of vocabulary");
  }
  const Tensor& wte = ps.at(p + ".wte").value;
  const Tensor& wpe = ps.at(p + ".wpe").value;
  std::vector<double> x(static_cast<size_t>(d));
  for (int j = 0; j < d; ++j)
    x[static_cast<size_t>(j)] = wte.at(static_cast<int64_t>(token) * d + j) +
                                wpe.at(static_cast<int64_t>(cache.len) * d + j);

  std::vector<double> h(static_cast<size_t>(d)), q(static_cast<size_t>(d)),
      kn(static_cast<size_t>(d)), vn(static_cast<size_t>(d)),
      ctx(static_cast<size_t>(d)), tmp(static_cast<size_t>(d));
  int prev = cache.len;
  double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int l = 0; l < spec.n_layers; ++l) {
    ln_row(x.data(), ps.at(lname(p, l, "ln1.g")).value.data.data(),
           ps.at(lname(p, l, "ln1.b")).value.data.data(), h.data(), d);
    affine_row(h.data(), ps.at(lname(p, l, "attn.wq")).value,
               ps.at(lname(p, l, "attn.bq")).value, q.data());
    affine_row(h.data(), ps.at(lname(p, l, "attn.wk")).value,
               ps.at(lname(p, l, "attn.bk")).value, kn.data());
    affine_row(h.data(), ps.at(lname(p, l, "attn.wv")).value,
               ps.at(lname(p, l, "attn.bv")).value, vn.data());
    auto& kl = cache.k[static_cast<size_t>(l)];
    auto& vl = cache.v[static_cast<size_t>(l)];
    kl.insert(kl.end(), kn.begin(), kn.end());
    vl.insert(vl.end(), vn.begin(), vn.end());
    int total = prev + 1;
    for (int hh = 0; hh < nh; ++hh) {
      const double* qh = q.data() + hh * dh;
      // scores over all cached positions for this head
      std::vector<double> w(static_cast<size_t>(total));
      double mx = -1e300;
      for (int t = 0; t < total; ++t) {
        const double* kt = kl.data() + static_cast<size_t>(t) * d + hh * dh;
        double acc = 0.0;
        for (int j = 0; j < dh; ++j) acc += qh[j] * kt[j];
        acc *= scale;
        w[static_cast<size_t>(t)] = acc;
        mx = std::max(mx, acc);
      }
      double s = 0.0;
      for (int t = 0; t < total; ++t) {
        w[static_cast<size_t>(t)] = std::exp(w[static_cast<size_t>(t)] - mx);
        s += w[static_cast<size_t>(t)];
      }
      double* ch = ctx.data() + hh * dh;
      for (int j = 0; j < dh; ++j) ch[j] = 0.0;
      for (int t = 0; t < total; ++t) {
        double wt = w[static_cast<size_t>(t)] / s;
        const double* vt = vl.data() + static_cast<size_t>(t) * d + hh * dh;
        for (int j = 0; j < dh; ++j) ch[j] += wt * vt[j];
      }
    }
    affine_row(ctx.data(), ps.at(lname(p, l, "attn.wo")).value,
               ps.at(lname(p, l, "attn.bo")).value, tmp.data());
    for (int j = 0; j < d; ++j) x[static_cast<size_t>(j)] += tmp[static_cast<size_t>(j)];

    ln_row(x.data(), ps.at(lname(p, l, "ln2.g")).value.data.data(),
           ps.at(lname(p, l, "ln2.b")).value.data.data(), h.data(), d);
    const Tensor& w1 = ps.at(lname(p, l, "mlp.w1")).value;
    const Tensor& b1 = ps.at(lname(p, l, "mlp.b1")).value;
    std::vector<double> mid(static_cast<size_t>(w1.dim(1)));
    affine_row(h.data(), w1, b1, mid.data());
    for (double& e : mid) {
      double u = 0.7978845608028654 * (e + 0.044715 * e * e * e);
      e = 0.5 * e * (1.0 + std::tanh(u));
    }
    affine_row(mid.data(), ps.at(lname(p, l, "mlp.w2")).value,
               ps.at(lname(p, l, "mlp.b2")).value, tmp.data());
    for (int j = 0; j < d; ++j) x[static_cast<size_t>(j)] += tmp[static_cast<size_t>(j)];
  }
  ln_row(x.data(), ps.at(p + ".lnf.g").value.data.data(),
         ps.at(p + ".lnf.b").value.data.data(), h.data(), d);
  std::vector<double> logits(static_cast<size_t>(spec.vocab));
  affine_row(h.data(), ps.at(p + ".head.w").value, ps.at(p + ".head.b").value,
             logits.data());
  cache.len = prev + 1;
  return logits;
}

std::vector<double> decoder_prefill(const ParameterSet& ps,
                                    const DecoderSpec& spec, KvCache& cache,
                                    const std::vector<int>& tokens) {
  std::vector<double> logits;
  for (int tok : tokens) logits = decoder_step(ps, spec, cache, tok);
  return logits;
}

}  // namespace grecall::nn
