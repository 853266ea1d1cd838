#pragma once

// Straightforward double-precision reference implementations, written
// independently of the library kernels so tests can check them.

#include <cmath>
#include <optional>
#include <set>
#include <vector>

#include "cdt/model.hpp"

namespace oracle {

using Mat = std::vector<std::vector<double>>;
using Vec = std::vector<double>;

inline Mat to_mat(const cdt::Tensor& t) {
  Mat m(t.rows(), Vec(t.cols()));
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m[i][j] = t(i, j);
  return m;
}

inline Vec to_vec(const cdt::Tensor& t) { return Vec(t.data().begin(), t.data().end()); }

inline Mat matmul(const Mat& a, const Mat& b) {
  Mat out(a.size(), Vec(b.empty() ? 0 : b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < out[i].size(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < b.size(); ++k) s += a[i][k] * b[k][j];
      out[i][j] = s;
    }
  return out;
}

inline Mat transpose(const Mat& a) {
  Mat out(a.empty() ? 0 : a[0].size(), Vec(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) out[j][i] = a[i][j];
  return out;
}

inline Mat add(Mat a, const Mat& b) {
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) a[i][j] += b[i][j];
  return a;
}

inline Mat add_bias(Mat a, const Vec& b) {
  for (auto& row : a)
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += b[j];
  return a;
}

inline Mat scale(Mat a, double s) {
  for (auto& row : a)
    for (double& v : row) v *= s;
  return a;
}

inline Vec softmax(const Vec& x, std::size_t n_keep) {
  Vec out(x.size(), 0.0);
  double mx = -INFINITY;
  for (std::size_t j = 0; j < n_keep; ++j) mx = std::max(mx, x[j]);
  double z = 0.0;
  for (std::size_t j = 0; j < n_keep; ++j) z += std::exp(x[j] - mx);
  for (std::size_t j = 0; j < n_keep; ++j) out[j] = std::exp(x[j] - mx) / z;
  return out;
}

inline Mat softmax_rows(const Mat& s, bool causal) {
  Mat out;
  for (std::size_t i = 0; i < s.size(); ++i) out.push_back(softmax(s[i], causal ? i + 1 : s[i].size()));
  return out;
}

inline Mat layer_norm(const Mat& x, const Vec& w, const Vec& b, double eps) {
  Mat out = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double mean = 0.0;
    for (double v : x[i]) mean += v;
    mean /= static_cast<double>(x[i].size());
    double var = 0.0;
    for (double v : x[i]) var += (v - mean) * (v - mean);
    var /= static_cast<double>(x[i].size());
    for (std::size_t j = 0; j < x[i].size(); ++j) out[i][j] = (x[i][j] - mean) / std::sqrt(var + eps) * w[j] + b[j];
  }
  return out;
}

inline double gelu(double x) {
  const double k = std::sqrt(2.0 / M_PI);
  return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

struct Forward {
  std::vector<Mat> resid_pre, resid_mid, resid_post;
  std::vector<std::vector<Mat>> head_out;  // [layer][head]
  std::vector<std::vector<Mat>> pattern;
  Mat logits;
};

// zeroed: heads whose output is replaced by zeros.
inline Forward forward(const cdt::Model& model, const std::vector<int>& tokens,
                       const std::set<std::pair<int, int>>& zeroed = {}) {
  const auto& c = model.config();
  const auto& w = model.weights();
  const std::size_t seq = tokens.size();
  Mat x(seq, Vec(static_cast<std::size_t>(c.d_model)));
  for (std::size_t t = 0; t < seq; ++t)
    for (std::size_t j = 0; j < x[t].size(); ++j)
      x[t][j] = static_cast<double>(w.W_E(static_cast<std::size_t>(tokens[t]), j)) + w.W_pos(t, j);
  Forward f;
  for (int l = 0; l < c.n_layers; ++l) {
    const auto& lw = model.layer(l);
    f.resid_pre.push_back(x);
    const Mat ln = layer_norm(x, to_vec(lw.ln1_w), to_vec(lw.ln1_b), c.ln_eps);
    f.head_out.emplace_back();
    f.pattern.emplace_back();
    Mat attn(seq, Vec(static_cast<std::size_t>(c.d_model), 0.0));
    for (int h = 0; h < c.n_heads; ++h) {
      const auto& hw = model.head(l, h);
      const Mat q = add_bias(matmul(ln, to_mat(hw.W_Q)), to_vec(hw.b_Q));
      const Mat k = add_bias(matmul(ln, to_mat(hw.W_K)), to_vec(hw.b_K));
      const Mat v = add_bias(matmul(ln, to_mat(hw.W_V)), to_vec(hw.b_V));
      const Mat p = softmax_rows(scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(c.d_head))),
                                 c.causal());
      Mat out = matmul(matmul(p, v), to_mat(hw.W_O));
      Vec share = to_vec(lw.b_O);
      for (double& s : share) s /= c.n_heads;
      out = add_bias(out, share);
      if (zeroed.contains({l, h})) out = Mat(seq, Vec(static_cast<std::size_t>(c.d_model), 0.0));
      attn = add(attn, out);
      f.head_out.back().push_back(out);
      f.pattern.back().push_back(p);
    }
    x = add(x, attn);
    f.resid_mid.push_back(x);
    if (c.has_mlp()) {
      const Mat ln2 = layer_norm(x, to_vec(lw.ln2_w), to_vec(lw.ln2_b), c.ln_eps);
      Mat pre = add_bias(matmul(ln2, to_mat(lw.W_in)), to_vec(lw.b_in));
      for (auto& row : pre)
        for (double& v : row) v = gelu(v);
      x = add(x, add_bias(matmul(pre, to_mat(lw.W_out)), to_vec(lw.b_out)));
    }
    f.resid_post.push_back(x);
  }
  if (c.has_final_ln) x = layer_norm(x, to_vec(w.ln_final_w), to_vec(w.ln_final_b), c.ln_eps);
  f.logits = matmul(x, to_mat(w.W_U));
  return f;
}

// max |a - b| / max(max |b|, floor)
inline double rel_err(const cdt::Tensor& a, const Mat& b, double floor = 1e-6) {
  double num = 0.0, den = floor;
  for (std::size_t i = 0; i < b.size(); ++i)
    for (std::size_t j = 0; j < b[i].size(); ++j) {
      num = std::max(num, std::fabs(static_cast<double>(a(i, j)) - b[i][j]));
      den = std::max(den, std::fabs(b[i][j]));
    }
  return num / den;
}

}  // namespace oracle
