#include "dagmesh/ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "dagmesh/catalog.hpp"
#include "dagmesh/kernels.hpp"

namespace dagmesh::ops {

std::uint64_t fnv1a(std::string_view text, std::uint64_t basis) {
  std::uint64_t h = basis;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

Stream::Stream(std::uint64_t seed) : state_(seed) {}

// splitmix64
std::uint64_t Stream::next() {
  std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double Stream::uniform(double lo, double hi) {
  const double u = static_cast<double>(next() >> 11) * 0x1.0p-53;
  return lo + (hi - lo) * u;
}

namespace {

using kernels::active;
using Inputs = std::vector<const Tensor*>;

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluK = 0.044715;

[[noreturn]] void fail(const OpNode& n, const std::string& what) { throw std::invalid_argument(n.name + ": " + what); }

std::size_t sz(std::int64_t v) { return static_cast<std::size_t>(v); }

const Tensor& param(const OpNode& n, const Params& p, const char* key) {
  auto it = p.find(key);
  if (it == p.end()) fail(n, std::string("missing parameter '") + key + "'");
  return it->second;
}

std::int64_t ikw(const OpNode& n, const char* key, double fallback) {
  return static_cast<std::int64_t>(n.kwarg(key, fallback));
}

void check_inputs(const OpNode& n, const Inputs& in) {
  if (in.size() != n.args.size()) fail(n, "expected " + std::to_string(n.args.size()) + " inputs");
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (!in[i]) fail(n, "missing input value for '" + n.args[i] + "'");
    if (i < n.input_shapes.size() && in[i]->shape != n.input_shapes[i])
      fail(n, "input " + n.args[i] + " has shape " + shape_to_string(in[i]->shape) + ", expected " +
                  shape_to_string(n.input_shapes[i]));
  }
}

// ---- dense helpers -------------------------------------------------------

std::size_t rows_of(const Tensor& t) { return t.shape.empty() ? 1 : t.size() / sz(t.shape.back()); }

/// y[rows, out] = x[rows, in] * w[in, out] + b
Tensor linear_fwd(const Tensor& x, const Tensor& w, const Tensor& b) {
  const std::size_t in = sz(w.shape[0]), out = sz(w.shape[1]), rows = x.size() / in;
  Shape s = x.shape;
  s.back() = w.shape[1];
  Tensor y(s);
  active().gemm_nn(x.data.data(), w.data.data(), y.data.data(), rows, in, out, false);
  for (std::size_t r = 0; r < rows; ++r) active().add(y.data.data() + r * out, b.data.data(), y.data.data() + r * out, out);
  return y;
}

/// Accumulates weight/bias gradients and returns dx.
Tensor linear_bwd(const Tensor& x, const Tensor& w, const Tensor& g, Tensor& dw, Tensor& db) {
  const std::size_t in = sz(w.shape[0]), out = sz(w.shape[1]), rows = x.size() / in;
  dw = Tensor(w.shape);
  db = Tensor(Shape{w.shape[1]});
  active().gemm_tn(x.data.data(), g.data.data(), dw.data.data(), in, rows, out, false);
  active().col_sum(g.data.data(), db.data.data(), rows, out, false);
  Tensor dx(x.shape);
  active().gemm_nt(g.data.data(), w.data.data(), dx.data.data(), rows, out, in, false);
  return dx;
}

void softmax_rows(const double* x, double* y, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * cols;
    double* yr = y + r * cols;
    const double m = *std::max_element(xr, xr + cols);
    double sum = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      yr[c] = std::exp(xr[c] - m);
      sum += yr[c];
    }
    for (std::size_t c = 0; c < cols; ++c) yr[c] /= sum;
  }
}

/// dx = y * (g - sum(g * y)) per row.
void softmax_rows_bwd(const double* y, const double* g, double* dx, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* yr = y + r * cols;
    const double* gr = g + r * cols;
    double dot = 0.0;
    for (std::size_t c = 0; c < cols; ++c) dot += gr[c] * yr[c];
    for (std::size_t c = 0; c < cols; ++c) dx[r * cols + c] = yr[c] * (gr[c] - dot);
  }
}

double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluK * x * x * x))); }

double gelu_grad(double x) {
  const double t = std::tanh(kGeluC * (x + kGeluK * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluK * x * x);
}

// ---- convolution via im2col ---------------------------------------------

struct ConvGeom {
  std::size_t n, c, h, w, cout, k, stride, pad, ho, wo;
};

ConvGeom conv_geom(const OpNode& node, const Tensor& x) {
  ConvGeom g{};
  g.n = sz(x.shape[0]);
  g.c = sz(x.shape[1]);
  g.h = sz(x.shape[2]);
  g.w = sz(x.shape[3]);
  g.cout = sz(ikw(node, "out_channels", 0));
  g.k = sz(ikw(node, "kernel", 3));
  g.stride = sz(ikw(node, "stride", 1));
  g.pad = sz(ikw(node, "padding", 0));
  g.ho = (g.h + 2 * g.pad - g.k) / g.stride + 1;
  g.wo = (g.w + 2 * g.pad - g.k) / g.stride + 1;
  return g;
}

/// cols[c*k*k, ho*wo] for sample `s`.
void im2col(const ConvGeom& g, const double* x, double* cols) {
  for (std::size_t ch = 0; ch < g.c; ++ch)
    for (std::size_t ki = 0; ki < g.k; ++ki)
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        const std::size_t row = (ch * g.k + ki) * g.k + kj;
        for (std::size_t oi = 0; oi < g.ho; ++oi)
          for (std::size_t oj = 0; oj < g.wo; ++oj) {
            const auto ii = static_cast<std::int64_t>(oi * g.stride + ki) - static_cast<std::int64_t>(g.pad);
            const auto jj = static_cast<std::int64_t>(oj * g.stride + kj) - static_cast<std::int64_t>(g.pad);
            const bool inside = ii >= 0 && jj >= 0 && ii < static_cast<std::int64_t>(g.h) &&
                                jj < static_cast<std::int64_t>(g.w);
            cols[row * g.ho * g.wo + oi * g.wo + oj] = inside ? x[(ch * g.h + sz(ii)) * g.w + sz(jj)] : 0.0;
          }
      }
}

void col2im_add(const ConvGeom& g, const double* cols, double* dx) {
  for (std::size_t ch = 0; ch < g.c; ++ch)
    for (std::size_t ki = 0; ki < g.k; ++ki)
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        const std::size_t row = (ch * g.k + ki) * g.k + kj;
        for (std::size_t oi = 0; oi < g.ho; ++oi)
          for (std::size_t oj = 0; oj < g.wo; ++oj) {
            const auto ii = static_cast<std::int64_t>(oi * g.stride + ki) - static_cast<std::int64_t>(g.pad);
            const auto jj = static_cast<std::int64_t>(oj * g.stride + kj) - static_cast<std::int64_t>(g.pad);
            if (ii < 0 || jj < 0 || ii >= static_cast<std::int64_t>(g.h) || jj >= static_cast<std::int64_t>(g.w))
              continue;
            dx[(ch * g.h + sz(ii)) * g.w + sz(jj)] += cols[row * g.ho * g.wo + oi * g.wo + oj];
          }
      }
}

Tensor conv_fwd(const OpNode& node, const Tensor& x, const Tensor& w, const Tensor& b) {
  const ConvGeom g = conv_geom(node, x);
  const std::size_t patch = g.c * g.k * g.k, pix = g.ho * g.wo;
  Tensor y(Shape{x.shape[0], static_cast<std::int64_t>(g.cout), static_cast<std::int64_t>(g.ho),
                 static_cast<std::int64_t>(g.wo)});
  std::vector<double> cols(patch * pix);
  for (std::size_t s = 0; s < g.n; ++s) {
    im2col(g, x.data.data() + s * g.c * g.h * g.w, cols.data());
    double* ys = y.data.data() + s * g.cout * pix;
    active().gemm_nn(w.data.data(), cols.data(), ys, g.cout, patch, pix, false);
    for (std::size_t o = 0; o < g.cout; ++o)
      for (std::size_t p = 0; p < pix; ++p) ys[o * pix + p] += b.data[o];
  }
  return y;
}

Gradients conv_bwd(const OpNode& node, const Tensor& x, const Tensor& w, const Tensor& gy) {
  const ConvGeom g = conv_geom(node, x);
  const std::size_t patch = g.c * g.k * g.k, pix = g.ho * g.wo;
  Gradients out;
  Tensor dx(x.shape), dw(w.shape), db(Shape{static_cast<std::int64_t>(g.cout)});
  std::vector<double> cols(patch * pix), dcols(patch * pix);
  for (std::size_t s = 0; s < g.n; ++s) {
    im2col(g, x.data.data() + s * g.c * g.h * g.w, cols.data());
    const double* gs = gy.data.data() + s * g.cout * pix;
    active().gemm_nt(gs, cols.data(), dw.data.data(), g.cout, pix, patch, s > 0);
    for (std::size_t o = 0; o < g.cout; ++o) {
      double sum = 0.0;
      for (std::size_t p = 0; p < pix; ++p) sum += gs[o * pix + p];
      db.data[o] += sum;
    }
    active().gemm_tn(w.data.data(), gs, dcols.data(), patch, g.cout, pix, false);
    col2im_add(g, dcols.data(), dx.data.data() + s * g.c * g.h * g.w);
  }
  out.inputs.push_back(std::move(dx));
  out.params["weight"] = std::move(dw);
  out.params["bias"] = std::move(db);
  return out;
}

// ---- attention ------------------------------------------------------------

struct AttnGeom {
  std::size_t b, s, h, heads, dh;
};

AttnGeom attn_geom(const OpNode& n, const Tensor& x) {
  AttnGeom g{sz(x.shape[0]), sz(x.shape[1]), sz(x.shape[2]), sz(ikw(n, "heads", 1)), 0};
  g.dh = g.h / g.heads;
  return g;
}

/// [b, s, h] -> [b*heads, s, dh]
std::vector<double> split_heads(const AttnGeom& g, const Tensor& t) {
  std::vector<double> out(t.size());
  for (std::size_t bi = 0; bi < g.b; ++bi)
    for (std::size_t si = 0; si < g.s; ++si)
      for (std::size_t hh = 0; hh < g.heads; ++hh)
        for (std::size_t d = 0; d < g.dh; ++d)
          out[((bi * g.heads + hh) * g.s + si) * g.dh + d] = t.data[(bi * g.s + si) * g.h + hh * g.dh + d];
  return out;
}

Tensor merge_heads(const AttnGeom& g, const std::vector<double>& v) {
  Tensor t(Shape{static_cast<std::int64_t>(g.b), static_cast<std::int64_t>(g.s), static_cast<std::int64_t>(g.h)});
  for (std::size_t bi = 0; bi < g.b; ++bi)
    for (std::size_t si = 0; si < g.s; ++si)
      for (std::size_t hh = 0; hh < g.heads; ++hh)
        for (std::size_t d = 0; d < g.dh; ++d)
          t.data[(bi * g.s + si) * g.h + hh * g.dh + d] = v[((bi * g.heads + hh) * g.s + si) * g.dh + d];
  return t;
}

struct AttnCache {
  Tensor q, k, v;
  std::vector<double> qh, kh, vh, probs, oh;
  Tensor o;
  Tensor y;
};

AttnCache attn_fwd(const OpNode& n, const Tensor& x, const Params& p) {
  const AttnGeom g = attn_geom(n, x);
  AttnCache c;
  c.q = linear_fwd(x, param(n, p, "wq"), param(n, p, "bq"));
  c.k = linear_fwd(x, param(n, p, "wk"), param(n, p, "bk"));
  c.v = linear_fwd(x, param(n, p, "wv"), param(n, p, "bv"));
  c.qh = split_heads(g, c.q);
  c.kh = split_heads(g, c.k);
  c.vh = split_heads(g, c.v);
  const std::size_t bh = g.b * g.heads, ss = g.s * g.s, sd = g.s * g.dh;
  const double scale = 1.0 / std::sqrt(static_cast<double>(g.dh));
  std::vector<double> scores(bh * ss);
  c.probs.resize(bh * ss);
  c.oh.resize(bh * sd);
  for (std::size_t i = 0; i < bh; ++i)
    active().gemm_nt(c.qh.data() + i * sd, c.kh.data() + i * sd, scores.data() + i * ss, g.s, g.dh, g.s, false);
  active().scale(scale, scores.data(), scores.data(), scores.size());
  softmax_rows(scores.data(), c.probs.data(), bh * g.s, g.s);
  for (std::size_t i = 0; i < bh; ++i)
    active().gemm_nn(c.probs.data() + i * ss, c.vh.data() + i * sd, c.oh.data() + i * sd, g.s, g.s, g.dh, false);
  c.o = merge_heads(g, c.oh);
  c.y = linear_fwd(c.o, param(n, p, "wo"), param(n, p, "bo"));
  active().add(c.y.data.data(), x.data.data(), c.y.data.data(), x.size());
  return c;
}

Gradients attn_bwd(const OpNode& n, const Tensor& x, const Params& p, const Tensor& gy) {
  const AttnGeom g = attn_geom(n, x);
  const AttnCache c = attn_fwd(n, x, p);
  Gradients out;
  const std::size_t bh = g.b * g.heads, ss = g.s * g.s, sd = g.s * g.dh;
  const double scale = 1.0 / std::sqrt(static_cast<double>(g.dh));

  Tensor dwo, dbo;
  const Tensor d_o = linear_bwd(c.o, param(n, p, "wo"), gy, dwo, dbo);
  const std::vector<double> d_oh = split_heads(g, d_o);
  std::vector<double> dprobs(bh * ss), dscores(bh * ss), dqh(bh * sd), dkh(bh * sd), dvh(bh * sd);
  for (std::size_t i = 0; i < bh; ++i) {
    active().gemm_nt(d_oh.data() + i * sd, c.vh.data() + i * sd, dprobs.data() + i * ss, g.s, g.dh, g.s, false);
    active().gemm_tn(c.probs.data() + i * ss, d_oh.data() + i * sd, dvh.data() + i * sd, g.s, g.s, g.dh, false);
  }
  softmax_rows_bwd(c.probs.data(), dprobs.data(), dscores.data(), bh * g.s, g.s);
  active().scale(scale, dscores.data(), dscores.data(), dscores.size());
  for (std::size_t i = 0; i < bh; ++i) {
    active().gemm_nn(dscores.data() + i * ss, c.kh.data() + i * sd, dqh.data() + i * sd, g.s, g.s, g.dh, false);
    active().gemm_tn(dscores.data() + i * ss, c.qh.data() + i * sd, dkh.data() + i * sd, g.s, g.s, g.dh, false);
  }
  Tensor dwq, dbq, dwk, dbk, dwv, dbv;
  const Tensor dxq = linear_bwd(x, param(n, p, "wq"), merge_heads(g, dqh), dwq, dbq);
  const Tensor dxk = linear_bwd(x, param(n, p, "wk"), merge_heads(g, dkh), dwk, dbk);
  const Tensor dxv = linear_bwd(x, param(n, p, "wv"), merge_heads(g, dvh), dwv, dbv);
  Tensor dx = gy;  // residual path
  active().add(dx.data.data(), dxq.data.data(), dx.data.data(), dx.size());
  active().add(dx.data.data(), dxk.data.data(), dx.data.data(), dx.size());
  active().add(dx.data.data(), dxv.data.data(), dx.data.data(), dx.size());
  out.inputs.push_back(std::move(dx));
  out.params = {{"wq", dwq}, {"bq", dbq}, {"wk", dwk}, {"bk", dbk},
                {"wv", dwv}, {"bv", dbv}, {"wo", dwo}, {"bo", dbo}};
  return out;
}

// ---- feed-forward block ---------------------------------------------------

Tensor ffn_fwd(const OpNode& n, const Tensor& x, const Params& p, Tensor* a1_out = nullptr) {
  Tensor a1 = linear_fwd(x, param(n, p, "w1"), param(n, p, "b1"));
  Tensor h1 = a1;
  for (auto& v : h1.data) v = gelu(v);
  Tensor y = linear_fwd(h1, param(n, p, "w2"), param(n, p, "b2"));
  active().add(y.data.data(), x.data.data(), y.data.data(), x.size());
  if (a1_out) *a1_out = std::move(a1);
  return y;
}

Gradients ffn_bwd(const OpNode& n, const Tensor& x, const Params& p, const Tensor& gy) {
  Tensor a1;
  ffn_fwd(n, x, p, &a1);
  Tensor h1 = a1;
  for (auto& v : h1.data) v = gelu(v);
  Gradients out;
  Tensor dw2, db2, dw1, db1;
  Tensor dh1 = linear_bwd(h1, param(n, p, "w2"), gy, dw2, db2);
  for (std::size_t i = 0; i < dh1.size(); ++i) dh1.data[i] *= gelu_grad(a1.data[i]);
  const Tensor dx1 = linear_bwd(x, param(n, p, "w1"), dh1, dw1, db1);
  Tensor dx = gy;
  active().add(dx.data.data(), dx1.data.data(), dx.data.data(), dx.size());
  out.inputs.push_back(std::move(dx));
  out.params = {{"w1", dw1}, {"b1", db1}, {"w2", dw2}, {"b2", db2}};
  return out;
}

// ---- batched matmul -------------------------------------------------------

struct MatGeom {
  std::size_t batch, m, k, n;
};

MatGeom mat_geom(const Tensor& a, const Tensor& b) {
  const std::size_t r = a.shape.size();
  MatGeom g{1, sz(a.shape[r - 2]), sz(a.shape[r - 1]), sz(b.shape[r - 1])};
  for (std::size_t i = 0; i + 2 < r; ++i) g.batch *= sz(a.shape[i]);
  return g;
}

}  // namespace

Tensor forward(const OpNode& n, const Inputs& in, const Params& params) {
  if (n.op_class == OpClass::Variable) return param(n, params, "value");
  if (n.op_class == OpClass::Placeholder) fail(n, "placeholders are fed, not computed");
  check_inputs(n, in);
  const Tensor& x = *in[0];
  switch (n.op_class) {
    case OpClass::Conv:
      return conv_fwd(n, x, param(n, params, "weight"), param(n, params, "bias"));
    case OpClass::Add: {
      Tensor y(x.shape);
      if (in.size() == 2) {
        active().add(x.data.data(), in[1]->data.data(), y.data.data(), x.size());
      } else {
        const double c = n.kwarg("value", 0.0);
        for (std::size_t i = 0; i < x.size(); ++i) y.data[i] = x.data[i] + c;
      }
      return y;
    }
    case OpClass::Multiply: {
      Tensor y(x.shape);
      if (in.size() == 2)
        active().mul(x.data.data(), in[1]->data.data(), y.data.data(), x.size());
      else
        active().scale(n.kwarg("value", 1.0), x.data.data(), y.data.data(), x.size());
      return y;
    }
    case OpClass::Pool: {
      const std::size_t k = sz(ikw(n, "kernel", 2));
      const std::size_t nc = sz(x.shape[0] * x.shape[1]), h = sz(x.shape[2]), w = sz(x.shape[3]);
      const std::size_t ho = h / k, wo = w / k;
      Tensor y(n.output_shape);
      const double inv = 1.0 / static_cast<double>(k * k);
      for (std::size_t p = 0; p < nc; ++p)
        for (std::size_t i = 0; i < ho; ++i)
          for (std::size_t j = 0; j < wo; ++j) {
            double s = 0.0;
            for (std::size_t a = 0; a < k; ++a)
              for (std::size_t b = 0; b < k; ++b) s += x.data[(p * h + i * k + a) * w + j * k + b];
            y.data[(p * ho + i) * wo + j] = s * inv;
          }
      return y;
    }
    case OpClass::Concat: {
      Tensor y(n.output_shape);
      const std::size_t batch = sz(y.shape[0]), width = sz(y.shape[1]);
      std::size_t offset = 0;
      for (const Tensor* t : in) {
        const std::size_t part = t->size() / batch;
        for (std::size_t s = 0; s < batch; ++s)
          std::copy_n(t->data.data() + s * part, part, y.data.data() + s * width + offset);
        offset += part;
      }
      return y;
    }
    case OpClass::Linear:
      return linear_fwd(x, param(n, params, "weight"), param(n, params, "bias"));
    case OpClass::Matmul: {
      const Tensor& b = *in[1];
      const MatGeom g = mat_geom(x, b);
      Tensor y(n.output_shape);
      for (std::size_t i = 0; i < g.batch; ++i)
        active().gemm_nn(x.data.data() + i * g.m * g.k, b.data.data() + i * g.k * g.n, y.data.data() + i * g.m * g.n,
                         g.m, g.k, g.n, false);
      return y;
    }
    case OpClass::Softmax: {
      Tensor y(x.shape);
      softmax_rows(x.data.data(), y.data.data(), rows_of(x), sz(x.shape.back()));
      return y;
    }
    case OpClass::Gelu: {
      Tensor y(x.shape);
      for (std::size_t i = 0; i < x.size(); ++i) y.data[i] = gelu(x.data[i]);
      return y;
    }
    case OpClass::CrossEntropy: {
      // args: (labels, logits)
      const Tensor& y = x;
      const Tensor& z = *in[1];
      const std::size_t cols = sz(z.shape.back()), rows = rows_of(z);
      std::vector<double> sm(z.size());
      softmax_rows(z.data.data(), sm.data(), rows, cols);
      double total = 0.0;
      for (std::size_t i = 0; i < z.size(); ++i)
        if (y.data[i] != 0.0) total -= y.data[i] * std::log(sm[i]);
      return Tensor::scalar(n.kwarg("weight", 1.0) / static_cast<double>(rows) * total);
    }
    case OpClass::Embedding: {
      const Tensor& table = param(n, params, "table");
      const std::size_t hidden = sz(table.shape[1]);
      const auto vocab = table.shape[0];
      Tensor y(n.output_shape);
      for (std::size_t i = 0; i < x.size(); ++i) {
        const auto id = static_cast<std::int64_t>(x.data[i]);
        if (id < 0 || id >= vocab) fail(n, "token id " + std::to_string(id) + " outside the vocabulary");
        std::copy_n(table.data.data() + sz(id) * hidden, hidden, y.data.data() + i * hidden);
      }
      return y;
    }
    case OpClass::AttentionBlock:
      return attn_fwd(n, x, params).y;
    case OpClass::FfnBlock:
      return ffn_fwd(n, x, params);
    case OpClass::Placeholder:
    case OpClass::Variable:
      break;
  }
  fail(n, "no forward rule");
}

Gradients backward(const OpNode& n, const Inputs& in, const Params& params, const Tensor& gy) {
  Gradients out;
  if (n.op_class == OpClass::Variable) {
    out.params["value"] = gy;
    return out;
  }
  if (n.op_class == OpClass::Placeholder) return out;
  check_inputs(n, in);
  if (gy.shape != n.output_shape)
    fail(n, "output gradient has shape " + shape_to_string(gy.shape) + ", expected " + shape_to_string(n.output_shape));
  const Tensor& x = *in[0];
  switch (n.op_class) {
    case OpClass::Conv:
      return conv_bwd(n, x, param(n, params, "weight"), gy);
    case OpClass::Add:
      out.inputs.push_back(gy);
      if (in.size() == 2) out.inputs.push_back(gy);
      return out;
    case OpClass::Multiply: {
      Tensor dx(x.shape);
      if (in.size() == 2) {
        Tensor dy(x.shape);
        active().mul(gy.data.data(), in[1]->data.data(), dx.data.data(), x.size());
        active().mul(gy.data.data(), x.data.data(), dy.data.data(), x.size());
        out.inputs.push_back(std::move(dx));
        out.inputs.push_back(std::move(dy));
      } else {
        active().scale(n.kwarg("value", 1.0), gy.data.data(), dx.data.data(), x.size());
        out.inputs.push_back(std::move(dx));
      }
      return out;
    }
    case OpClass::Pool: {
      const std::size_t k = sz(ikw(n, "kernel", 2));
      const std::size_t nc = sz(x.shape[0] * x.shape[1]), h = sz(x.shape[2]), w = sz(x.shape[3]);
      const std::size_t ho = h / k, wo = w / k;
      const double inv = 1.0 / static_cast<double>(k * k);
      Tensor dx(x.shape);
      for (std::size_t p = 0; p < nc; ++p)
        for (std::size_t i = 0; i < ho; ++i)
          for (std::size_t j = 0; j < wo; ++j) {
            const double g = gy.data[(p * ho + i) * wo + j] * inv;
            for (std::size_t a = 0; a < k; ++a)
              for (std::size_t b = 0; b < k; ++b) dx.data[(p * h + i * k + a) * w + j * k + b] = g;
          }
      out.inputs.push_back(std::move(dx));
      return out;
    }
    case OpClass::Concat: {
      const std::size_t batch = sz(gy.shape[0]), width = sz(gy.shape[1]);
      std::size_t offset = 0;
      for (const Tensor* t : in) {
        Tensor d(t->shape);
        const std::size_t part = t->size() / batch;
        for (std::size_t s = 0; s < batch; ++s)
          std::copy_n(gy.data.data() + s * width + offset, part, d.data.data() + s * part);
        offset += part;
        out.inputs.push_back(std::move(d));
      }
      return out;
    }
    case OpClass::Linear: {
      Tensor dw, db;
      out.inputs.push_back(linear_bwd(x, param(n, params, "weight"), gy, dw, db));
      out.params["weight"] = std::move(dw);
      out.params["bias"] = std::move(db);
      return out;
    }
    case OpClass::Matmul: {
      const Tensor& b = *in[1];
      const MatGeom g = mat_geom(x, b);
      Tensor da(x.shape), dbm(b.shape);
      for (std::size_t i = 0; i < g.batch; ++i) {
        const double* gi = gy.data.data() + i * g.m * g.n;
        active().gemm_nt(gi, b.data.data() + i * g.k * g.n, da.data.data() + i * g.m * g.k, g.m, g.n, g.k, false);
        active().gemm_tn(x.data.data() + i * g.m * g.k, gi, dbm.data.data() + i * g.k * g.n, g.k, g.m, g.n, false);
      }
      out.inputs.push_back(std::move(da));
      out.inputs.push_back(std::move(dbm));
      return out;
    }
    case OpClass::Softmax: {
      Tensor y(x.shape), dx(x.shape);
      const std::size_t rows = rows_of(x), cols = sz(x.shape.back());
      softmax_rows(x.data.data(), y.data.data(), rows, cols);
      softmax_rows_bwd(y.data.data(), gy.data.data(), dx.data.data(), rows, cols);
      out.inputs.push_back(std::move(dx));
      return out;
    }
    case OpClass::Gelu: {
      Tensor dx(x.shape);
      for (std::size_t i = 0; i < x.size(); ++i) dx.data[i] = gy.data[i] * gelu_grad(x.data[i]);
      out.inputs.push_back(std::move(dx));
      return out;
    }
    case OpClass::CrossEntropy: {
      const Tensor& y = x;
      const Tensor& z = *in[1];
      const std::size_t cols = sz(z.shape.back()), rows = rows_of(z);
      const double coef = gy.data[0] * n.kwarg("weight", 1.0) / static_cast<double>(rows);
      std::vector<double> sm(z.size());
      softmax_rows(z.data.data(), sm.data(), rows, cols);
      Tensor dy(y.shape), dz(z.shape);
      for (std::size_t r = 0; r < rows; ++r) {
        double ysum = 0.0;
        for (std::size_t c = 0; c < cols; ++c) ysum += y.data[r * cols + c];
        for (std::size_t c = 0; c < cols; ++c) {
          const std::size_t i = r * cols + c;
          dz.data[i] = coef * (sm[i] * ysum - y.data[i]);
          dy.data[i] = -coef * std::log(sm[i]);
        }
      }
      out.inputs.push_back(std::move(dy));
      out.inputs.push_back(std::move(dz));
      return out;
    }
    case OpClass::Embedding: {
      const Tensor& table = param(n, params, "table");
      const std::size_t hidden = sz(table.shape[1]);
      Tensor dt(table.shape);
      for (std::size_t i = 0; i < x.size(); ++i) {
        const auto id = sz(static_cast<std::int64_t>(x.data[i]));
        active().axpy(1.0, gy.data.data() + i * hidden, dt.data.data() + id * hidden, hidden);
      }
      out.inputs.push_back(Tensor(x.shape));  // ids are not differentiable
      out.params["table"] = std::move(dt);
      return out;
    }
    case OpClass::AttentionBlock:
      return attn_bwd(n, x, params, gy);
    case OpClass::FfnBlock:
      return ffn_bwd(n, x, params, gy);
    case OpClass::Placeholder:
    case OpClass::Variable:
      break;
  }
  fail(n, "no backward rule");
}

Params init_params(const OpNode& n, std::uint64_t seed) {
  Params out;
  for (const auto& spec : catalog::param_specs(n)) {
    Stream rng(fnv1a(n.name + "/" + spec.name, fnv1a(std::to_string(seed))));
    Tensor t(spec.shape);
    // Fan-in scaled uniform for matrices, small uniform for vectors.
    double bound = 0.5;
    if (spec.shape.size() == 2 && n.op_class != OpClass::Embedding)
      bound = 1.0 / std::sqrt(static_cast<double>(n.op_class == OpClass::Conv ? spec.shape[1] : spec.shape[0]));
    if (spec.shape.size() == 1) bound = 0.1;
    for (auto& v : t.data) v = rng.uniform(-bound, bound);
    out.emplace(spec.name, std::move(t));
  }
  return out;
}

}  // namespace dagmesh::ops
