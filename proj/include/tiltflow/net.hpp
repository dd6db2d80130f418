#pragma once

// Small feed-forward models with hand-rolled backprop: forward, input
// cotangent products and parameter gradients. Parameters live in one flat
// vector, per layer the weight matrix (fan_out x fan_in, row-major) followed
// by the bias. Hidden layers share one C1 activation, the output is linear.

#include <cstdint>
#include <fstream>
#include <vector>

#include "tiltflow/common.hpp"
#include "tiltflow/grid.hpp"
#include "tiltflow/rng.hpp"

namespace tiltflow {

enum class Activation : std::uint32_t { tanh_act = 0, softplus = 1 };

inline double act_eval(Activation a, double z) {
  if (a == Activation::tanh_act) return std::tanh(z);
  return z > 30.0 ? z : std::log1p(std::exp(z));
}

inline double act_deriv(Activation a, double z) {
  if (a == Activation::tanh_act) {
    const double th = std::tanh(z);
    return 1.0 - th * th;
  }
  return 1.0 / (1.0 + std::exp(-z));
}

struct Mlp {
  std::vector<std::uint32_t> widths;  // input, hidden..., output
  Activation act = Activation::tanh_act;
  std::vector<double> params;

  std::size_t layers() const { return widths.size() - 1; }
  std::uint32_t d_in() const { return widths.front(); }
  std::uint32_t d_out() const { return widths.back(); }

  static std::size_t param_count(const std::vector<std::uint32_t>& widths) {
    std::size_t n = 0;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l)
      n += (static_cast<std::size_t>(widths[l]) + 1) * widths[l + 1];
    return n;
  }

  std::size_t layer_offset(std::size_t layer) const {
    std::size_t off = 0;
    for (std::size_t l = 0; l < layer; ++l)
      off += (static_cast<std::size_t>(widths[l]) + 1) * widths[l + 1];
    return off;
  }
};

// Fan-in-scaled uniform weights, zero biases; zero_final makes the output
// layer identically zero (useful to start a velocity field at the identity).
inline void init_params(Mlp& net, Rng& rng, bool zero_final = false) {
  net.params.assign(Mlp::param_count(net.widths), 0.0);
  std::size_t off = 0;
  for (std::size_t l = 0; l + 1 < net.widths.size(); ++l) {
    const std::size_t fi = net.widths[l], fo = net.widths[l + 1];
    const double bound = 1.0 / std::sqrt(static_cast<double>(fi));
    const bool last = l + 2 == net.widths.size();
    for (std::size_t i = 0; i < fo * fi; ++i)
      net.params[off + i] = (last && zero_final) ? 0.0 : rng.uniform(-bound, bound);
    off += fo * fi + fo;  // biases stay zero
  }
}

// Scratch for one forward/backward pass; reusable across calls.
struct MlpCache {
  std::vector<std::vector<double>> acts;  // acts[l] = input to layer l; back = output
  std::vector<std::vector<double>> pre;   // pre-activations per layer
  std::vector<double> delta, delta_next;
};

inline const std::vector<double>& forward_cached(const Mlp& net, const std::vector<double>& x,
                                                 MlpCache& c) {
  if (x.size() != net.d_in()) fail("input dimension mismatch");
  const std::size_t L = net.layers();
  c.acts.resize(L + 1);
  c.pre.resize(L);
  c.acts[0] = x;
  std::size_t off = 0;
  for (std::size_t l = 0; l < L; ++l) {
    const std::size_t fi = net.widths[l], fo = net.widths[l + 1];
    const double* W = net.params.data() + off;
    const double* b = W + fo * fi;
    c.pre[l].assign(fo, 0.0);
    const std::vector<double>& in = c.acts[l];
    for (std::size_t i = 0; i < fo; ++i) {
      double acc = b[i];
      const double* row = W + i * fi;
      for (std::size_t j = 0; j < fi; ++j) acc += row[j] * in[j];
      c.pre[l][i] = acc;
    }
    c.acts[l + 1].resize(fo);
    const bool last = l + 1 == L;
    for (std::size_t i = 0; i < fo; ++i)
      c.acts[l + 1][i] = last ? c.pre[l][i] : act_eval(net.act, c.pre[l][i]);
    off += fo * fi + fo;
  }
  return c.acts[L];
}

inline std::vector<double> forward(const Mlp& net, const std::vector<double>& x) {
  MlpCache c;
  return forward_cached(net, x, c);
}

// Reverse pass over a cache produced by forward_cached. Adds parameter
// gradients into param_grad (if given) and writes cot^T dOut/dIn into
// input_grad (if given).
inline void backprop(const Mlp& net, MlpCache& c, const std::vector<double>& cot,
                     std::vector<double>* param_grad, std::vector<double>* input_grad) {
  if (cot.size() != net.d_out()) fail("cotangent dimension mismatch");
  if (param_grad && param_grad->size() != net.params.size())
    fail("parameter gradient size mismatch");
  const std::size_t L = net.layers();
  c.delta = cot;
  std::size_t off = net.params.size();
  for (std::size_t l = L; l-- > 0;) {
    const std::size_t fi = net.widths[l], fo = net.widths[l + 1];
    off -= fo * fi + fo;
    const double* W = net.params.data() + off;
    const std::vector<double>& in = c.acts[l];
    if (param_grad) {
      double* gW = param_grad->data() + off;
      double* gb = gW + fo * fi;
      for (std::size_t i = 0; i < fo; ++i) {
        const double d = c.delta[i];
        double* grow = gW + i * fi;
        for (std::size_t j = 0; j < fi; ++j) grow[j] += d * in[j];
        gb[i] += d;
      }
    }
    const bool need_input = l > 0 || input_grad;
    if (!need_input) break;
    c.delta_next.assign(fi, 0.0);
    for (std::size_t i = 0; i < fo; ++i) {
      const double d = c.delta[i];
      const double* row = W + i * fi;
      for (std::size_t j = 0; j < fi; ++j) c.delta_next[j] += d * row[j];
    }
    if (l > 0)
      for (std::size_t j = 0; j < fi; ++j)
        c.delta_next[j] *= act_deriv(net.act, c.pre[l - 1][j]);
    std::swap(c.delta, c.delta_next);
  }
  if (input_grad) *input_grad = c.delta;
}

inline std::vector<double> vjp_input(const Mlp& net, const std::vector<double>& x,
                                     const std::vector<double>& cot) {
  MlpCache c;
  forward_cached(net, x, c);
  std::vector<double> g;
  backprop(net, c, cot, nullptr, &g);
  return g;
}

inline std::vector<double> grad_params(const Mlp& net, const std::vector<double>& x,
                                       const std::vector<double>& cot) {
  MlpCache c;
  forward_cached(net, x, c);
  std::vector<double> g(net.params.size(), 0.0);
  backprop(net, c, cot, &g, nullptr);
  return g;
}

// Bias-corrected adaptive moment update.
struct TrainState {
  double lr = 1e-3;
  double beta1 = 0.9, beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<double> m, v;
};

inline void train_step(Mlp& net, TrainState& st, const std::vector<double>& grads) {
  if (grads.size() != net.params.size()) fail("gradient size mismatch");
  for (double g : grads)
    if (!std::isfinite(g)) fail("gradient overflow");
  if (st.m.size() != grads.size()) {
    st.m.assign(grads.size(), 0.0);
    st.v.assign(grads.size(), 0.0);
  }
  st.step += 1;
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < grads.size(); ++i) {
    st.m[i] = st.beta1 * st.m[i] + (1.0 - st.beta1) * grads[i];
    st.v[i] = st.beta2 * st.v[i] + (1.0 - st.beta2) * grads[i] * grads[i];
    const double mhat = st.m[i] / c1;
    const double vhat = st.v[i] / c2;
    net.params[i] -= st.lr * mhat / (std::sqrt(vhat) + st.eps);
  }
}

// Scalar conditioner: raw value plus sin/cos features on a geometric
// frequency ladder. Used for t and for ln(lambda).
struct ScalarEmbedding {
  std::uint32_t n_freq = 4;
  double omega0 = 1.5;
  double growth = 2.0;

  std::size_t dim() const { return 2 * static_cast<std::size_t>(n_freq) + 1; }

  void embed(double u, double* out) const {
    out[0] = u;
    double w = omega0;
    for (std::uint32_t j = 0; j < n_freq; ++j) {
      out[1 + 2 * j] = std::sin(w * u);
      out[2 + 2 * j] = std::cos(w * u);
      w *= growth;
    }
  }
};

// --- checkpoints --------------------------------------------------------------

struct NetCheckpoint {
  std::uint32_t kind = 0;  // 0 velocity field, 1 cost predictor
  Mlp net;
  ScalarEmbedding emb;
  double lambda_min = 0.0, lambda_max = 0.0;  // cost predictors only
};

inline void save_net(const NetCheckpoint& ck, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail("cannot open for writing: " + path);
  os.write("TFNN", 4);
  detail::put_u32(os, 1);  // version
  detail::put_u32(os, ck.kind);
  detail::put_u32(os, static_cast<std::uint32_t>(ck.net.widths.size()));
  for (std::uint32_t w : ck.net.widths) detail::put_u32(os, w);
  detail::put_u32(os, static_cast<std::uint32_t>(ck.net.act));
  detail::put_u32(os, ck.emb.n_freq);
  detail::put_f64(os, ck.emb.omega0);
  detail::put_f64(os, ck.emb.growth);
  detail::put_f64(os, ck.lambda_min);
  detail::put_f64(os, ck.lambda_max);
  detail::put_u32(os, static_cast<std::uint32_t>(ck.net.params.size()));
  for (double p : ck.net.params) detail::put_f64(os, p);
  if (!os) fail("write failed: " + path);
}

inline NetCheckpoint load_net(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail("cannot open for reading: " + path);
  char magic[4];
  is.read(magic, 4);
  if (std::string(magic, 4) != "TFNN") fail("bad magic in " + path);
  if (detail::get_u32(is) != 1) fail("unsupported version in " + path);
  NetCheckpoint ck;
  ck.kind = detail::get_u32(is);
  ck.net.widths.resize(detail::get_u32(is));
  for (auto& w : ck.net.widths) w = detail::get_u32(is);
  ck.net.act = static_cast<Activation>(detail::get_u32(is));
  ck.emb.n_freq = detail::get_u32(is);
  ck.emb.omega0 = detail::get_f64(is);
  ck.emb.growth = detail::get_f64(is);
  ck.lambda_min = detail::get_f64(is);
  ck.lambda_max = detail::get_f64(is);
  ck.net.params.resize(detail::get_u32(is));
  for (double& p : ck.net.params) p = detail::get_f64(is);
  if (!is) fail("truncated file: " + path);
  if (ck.net.params.size() != Mlp::param_count(ck.net.widths))
    fail("parameter count mismatch in " + path);
  return ck;
}

}  // namespace tiltflow
