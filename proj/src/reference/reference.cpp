#include "balr/reference.hpp"

#include <algorithm>
#include <cmath>

namespace balr::reference {
namespace {

double phi(double z) { return z > 0 ? z + 1.0 : std::exp(z); }

double gelu(double z) { return 0.5 * z * (1.0 + std::erf(z / std::sqrt(2.0))); }

}  // namespace

std::vector<double> conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::int64_t stride,
                           std::int64_t padding, std::int64_t groups) {
  const auto n = x.size(0), c_in = x.size(1), h = x.size(2), w = x.size(3);
  const auto c_out = weight.size(0), kh = weight.size(2), kw = weight.size(3);
  const auto cin_g = c_in / groups, cout_g = c_out / groups;
  const auto ho = (h + 2 * padding - kh) / stride + 1;
  const auto wo = (w + 2 * padding - kw) / stride + 1;
  const auto xd = x.data();
  const auto wd = weight.data();
  std::vector<double> out(static_cast<std::size_t>(n * c_out * ho * wo), 0.0);
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t co = 0; co < c_out; ++co) {
      const auto g = co / cout_g;
      for (std::int64_t oy = 0; oy < ho; ++oy)
        for (std::int64_t ox = 0; ox < wo; ++ox) {
          double acc = bias.defined() ? bias.data()[static_cast<std::size_t>(co)] : 0.0;
          for (std::int64_t ci = 0; ci < cin_g; ++ci)
            for (std::int64_t ky = 0; ky < kh; ++ky)
              for (std::int64_t kx = 0; kx < kw; ++kx) {
                const auto iy = oy * stride - padding + ky;
                const auto ix = ox * stride - padding + kx;
                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                const auto c = g * cin_g + ci;
                acc += xd[static_cast<std::size_t>(((b * c_in + c) * h + iy) * w + ix)] *
                       wd[static_cast<std::size_t>(((co * cin_g + ci) * kh + ky) * kw + kx)];
              }
          out[static_cast<std::size_t>(((b * c_out + co) * ho + oy) * wo + ox)] = acc;
        }
    }
  return out;
}

std::vector<double> matmul(const std::vector<double>& a, const std::vector<double>& b, std::int64_t m,
                           std::int64_t k, std::int64_t n) {
  std::vector<double> c(static_cast<std::size_t>(m * n), 0.0);
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) {
      double s = 0;
      for (std::int64_t p = 0; p < k; ++p) s += a[static_cast<std::size_t>(i * k + p)] * b[static_cast<std::size_t>(p * n + j)];
      c[static_cast<std::size_t>(i * n + j)] = s;
    }
  return c;
}

std::vector<double> lowrank_dense(const Tensor& x, const Tensor& u, const Tensor& v) {
  const auto m = u.size(0), r = u.size(1), n = v.size(0);
  std::vector<double> w(static_cast<std::size_t>(m * n), 0.0);
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j)
      for (std::int64_t p = 0; p < r; ++p)
        w[static_cast<std::size_t>(i * n + j)] +=
            u.data()[static_cast<std::size_t>(i * r + p)] * v.data()[static_cast<std::size_t>(j * r + p)];
  const auto rows = x.numel() / n;
  std::vector<double> y(static_cast<std::size_t>(rows * m), 0.0);
  for (std::int64_t t = 0; t < rows; ++t)
    for (std::int64_t i = 0; i < m; ++i) {
      double s = 0;
      for (std::int64_t j = 0; j < n; ++j)
        s += w[static_cast<std::size_t>(i * n + j)] * x.data()[static_cast<std::size_t>(t * n + j)];
      y[static_cast<std::size_t>(t * m + i)] = s;
    }
  return y;
}

std::vector<double> adapter_dense(const Tensor& x, const Tensor& u_down, const Tensor& v_down, const Tensor& u_up,
                                  const Tensor& v_up, double s) {
  auto hidden = lowrank_dense(x, u_down, v_down);
  for (auto& h : hidden) h = gelu(h);
  auto hidden_t = Tensor::from_vector({static_cast<std::int64_t>(hidden.size()) / u_down.size(0), u_down.size(0)}, hidden);
  auto y = lowrank_dense(hidden_t, u_up, v_up);
  for (auto& v : y) v *= s;
  return y;
}

std::vector<double> reconstruct_sum(const Tensor& a, const Tensor& b) {
  const auto n = a.size(0), rank = a.size(1), d = b.size(0);
  std::vector<double> m(static_cast<std::size_t>(n * d), 0.0);
  for (std::int64_t t = 0; t < n; ++t)
    for (std::int64_t r = 0; r < rank; ++r)
      for (std::int64_t c = 0; c < d; ++c)
        m[static_cast<std::size_t>(t * d + c)] +=
            a.data()[static_cast<std::size_t>(t * rank + r)] * b.data()[static_cast<std::size_t>(c * rank + r)];
  for (auto& v : m) v /= static_cast<double>(rank);
  return m;
}

std::vector<double> rope_row(const std::vector<double>& row, std::int64_t position, double base) {
  const auto r = static_cast<std::int64_t>(row.size());
  std::vector<double> out(row);
  for (std::int64_t j = 0; j < r / 2; ++j) {
    const double theta = static_cast<double>(position) * std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(r));
    const double u = row[static_cast<std::size_t>(2 * j)];
    const double v = row[static_cast<std::size_t>(2 * j + 1)];
    out[static_cast<std::size_t>(2 * j)] = u * std::cos(theta) - v * std::sin(theta);
    out[static_cast<std::size_t>(2 * j + 1)] = u * std::sin(theta) + v * std::cos(theta);
  }
  return out;
}

DenseAttention factored_attention_dense(const Tensor& a_q, const Tensor& a_k, const Tensor& a_v, const Tensor& b_q,
                                        const Tensor& b_k, const Tensor& b_v) {
  const auto nq = a_q.size(0), nk = a_k.size(0), d = b_q.size(0);
  const auto rq = a_q.size(1), rk = a_k.size(1), rv = a_v.size(1);
  const auto aq = a_q.data(), ak = a_k.data(), av = a_v.data();
  const auto bq = b_q.data(), bk = b_k.data(), bv = b_v.data();

  std::vector<double> g(static_cast<std::size_t>(rq * rk), 0.0);
  for (std::int64_t i = 0; i < rq; ++i)
    for (std::int64_t j = 0; j < rk; ++j) {
      double s = 0;
      for (std::int64_t c = 0; c < d; ++c) s += bq[static_cast<std::size_t>(c * rq + i)] * bk[static_cast<std::size_t>(c * rk + j)];
      g[static_cast<std::size_t>(i * rk + j)] = s / static_cast<double>(rq * rk);
    }
  std::vector<double> u(static_cast<std::size_t>(nq * rk));
  for (std::int64_t t = 0; t < nq; ++t)
    for (std::int64_t j = 0; j < rk; ++j) {
      double s = 0;
      for (std::int64_t i = 0; i < rq; ++i) s += aq[static_cast<std::size_t>(t * rq + i)] * g[static_cast<std::size_t>(i * rk + j)];
      u[static_cast<std::size_t>(t * rk + j)] = phi(s);
    }
  std::vector<double> kf(static_cast<std::size_t>(nk * rk));
  for (std::size_t i = 0; i < kf.size(); ++i) kf[i] = phi(ak[i]);

  DenseAttention out;
  out.values.assign(static_cast<std::size_t>(nk * d), 0.0);
  for (std::int64_t s = 0; s < nk; ++s)
    for (std::int64_t c = 0; c < d; ++c) {
      double acc = 0;
      for (std::int64_t r = 0; r < rv; ++r) acc += av[static_cast<std::size_t>(s * rv + r)] * bv[static_cast<std::size_t>(c * rv + r)];
      out.values[static_cast<std::size_t>(s * d + c)] = acc / static_cast<double>(rv);
    }
  out.weights.assign(static_cast<std::size_t>(nq * nk), 0.0);
  out.output.assign(static_cast<std::size_t>(nq * d), 0.0);
  for (std::int64_t t = 0; t < nq; ++t) {
    double total = 0;
    for (std::int64_t s = 0; s < nk; ++s) {
      double sim = 0;
      for (std::int64_t j = 0; j < rk; ++j) sim += u[static_cast<std::size_t>(t * rk + j)] * kf[static_cast<std::size_t>(s * rk + j)];
      out.weights[static_cast<std::size_t>(t * nk + s)] = sim;
      total += sim;
    }
    for (std::int64_t s = 0; s < nk; ++s) {
      const double wts = out.weights[static_cast<std::size_t>(t * nk + s)] / total;
      out.weights[static_cast<std::size_t>(t * nk + s)] = wts;
      for (std::int64_t c = 0; c < d; ++c)
        out.output[static_cast<std::size_t>(t * d + c)] += wts * out.values[static_cast<std::size_t>(s * d + c)];
    }
  }
  return out;
}

std::vector<double> mhsa(const Tensor& x, const Tensor& w_q, const Tensor& w_k, const Tensor& w_v, const Tensor& w_o,
                         std::int64_t heads) {
  const auto n = x.size(-2), d = x.size(-1), dh = d / heads;
  const std::vector<double> xv(x.data().begin(), x.data().end());
  auto as_vec = [](const Tensor& t) { return std::vector<double>(t.data().begin(), t.data().end()); };
  const auto q = matmul(xv, as_vec(w_q), n, d, d);
  const auto k = matmul(xv, as_vec(w_k), n, d, d);
  const auto v = matmul(xv, as_vec(w_v), n, d, d);
  std::vector<double> concat(static_cast<std::size_t>(n * d), 0.0);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::int64_t h = 0; h < heads; ++h)
    for (std::int64_t i = 0; i < n; ++i) {
      std::vector<double> scores(static_cast<std::size_t>(n));
      double mx = -1e300;
      for (std::int64_t j = 0; j < n; ++j) {
        double s = 0;
        for (std::int64_t c = 0; c < dh; ++c) s += q[static_cast<std::size_t>(i * d + h * dh + c)] * k[static_cast<std::size_t>(j * d + h * dh + c)];
        scores[static_cast<std::size_t>(j)] = s * scale;
        mx = std::max(mx, s * scale);
      }
      double z = 0;
      for (auto& s : scores) z += (s = std::exp(s - mx));
      for (std::int64_t j = 0; j < n; ++j)
        for (std::int64_t c = 0; c < dh; ++c)
          concat[static_cast<std::size_t>(i * d + h * dh + c)] +=
              scores[static_cast<std::size_t>(j)] / z * v[static_cast<std::size_t>(j * d + h * dh + c)];
    }
  return matmul(concat, as_vec(w_o), n, d, d);
}

}  // namespace balr::reference
