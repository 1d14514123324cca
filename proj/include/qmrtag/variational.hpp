#pragma once

// Semi-supervised variational training of the noisy-or parameters with a
// logistic-regression recognition model. Gradients for the recognition model
// are score-function estimates with NVIL-style variance reduction (running
// signal centering/normalization and an input-dependent baseline network);
// gradients for the generative model are exact at the sampled y.

#include <cmath>
#include <bit>
#include <cstring>
#include <filesystem>
#include <functional>
#include <numeric>
#include <ostream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "qmrtag/dataset.hpp"
#include "qmrtag/inference.hpp"
#include "qmrtag/model.hpp"
#include "qmrtag/model_io.hpp"

namespace qmrtag {

struct RecognitionParams {
  std::size_t m = 0;
  std::size_t n = 0;
  std::vector<double> weights;   // m x (n + 1); last column is the bias
  std::vector<double> aux_bias;  // m, anchor-prediction offsets

  RecognitionParams() = default;
  RecognitionParams(std::size_t m_, std::size_t n_)
      : m(m_), n(n_), weights(m_ * (n_ + 1), 0.0), aux_bias(m_, 0.0) {}

  std::size_t stride() const { return n + 1; }
  double& w(std::size_t i, std::size_t k) { return weights[i * stride() + k]; }
  double w(std::size_t i, std::size_t k) const {
    return weights[i * stride() + k];
  }

  static RecognitionParams random(std::size_t m, std::size_t n, Rng& rng,
                                  double scale = 0.1) {
    RecognitionParams p(m, n);
    for (double& v : p.weights) {
      v = rng.uniform(-scale, scale);
    }
    return p;
  }

  bool operator==(const RecognitionParams&) const = default;
};

// x - mean, padded with a trailing 1.
inline std::vector<double> centered_padded(BinarySpan x,
                                           std::span<const double> means) {
  std::vector<double> out(x.size() + 1);
  for (std::size_t j = 0; j < x.size(); ++j) {
    out[j] = static_cast<double>(x[j]) - means[j];
  }
  out[x.size()] = 1.0;
  return out;
}

// Copy of the centered input with anchor columns set to 0.
inline std::vector<double> censor_anchors(std::vector<double> xbar,
                                          const std::vector<std::size_t>& anchors) {
  for (std::size_t col : anchors) {
    xbar[col] = 0.0;
  }
  return xbar;
}

inline std::vector<double> recognition_logits(const RecognitionParams& phi,
                                              std::span<const double> xbar) {
  if (xbar.size() != phi.stride()) {
    throw std::invalid_argument("recognition input has length " +
                                std::to_string(xbar.size()) + ", expected " +
                                std::to_string(phi.stride()));
  }
  std::vector<double> z(phi.m, 0.0);
  for (std::size_t i = 0; i < phi.m; ++i) {
    const double* row = &phi.weights[i * phi.stride()];
    double s = 0.0;
    for (std::size_t k = 0; k < xbar.size(); ++k) {
      s += row[k] * xbar[k];
    }
    z[i] = s;
  }
  return z;
}

// q(Y_i = 1 | x) = sigmoid(phi_i . xbar)
inline std::vector<double> recognition_posterior(const RecognitionParams& phi,
                                                 std::span<const double> xbar) {
  auto z = recognition_logits(phi, xbar);
  for (double& v : z) {
    v = sigmoid(v);
  }
  return z;
}

inline double recognition_logprob(BinarySpan y, std::span<const double> logits) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    s += y[i] ? log_sigmoid(logits[i]) : log_sigmoid(-logits[i]);
  }
  return s;
}

// Log loss of the anchor predictions from the censored input.
inline double supervised_term(const RecognitionParams& phi,
                              std::span<const double> xtilde, BinarySpan a) {
  const auto z = recognition_logits(phi, xtilde);
  double loss = 0.0;
  for (std::size_t i = 0; i < phi.m; ++i) {
    const double t = z[i] + phi.aux_bias[i];
    loss -= a[i] ? std::max(log_sigmoid(t), std::log(kProbFloor))
                 : std::max(log_sigmoid(-t), std::log(kProbFloor));
  }
  return loss;
}

namespace detail {

// Sparse complete log-likelihood for y given by its active set; optionally
// accumulates weight * d/d(logit) into failure and leak gradient buffers.
inline double loglik_active(const ModelParams& theta, BinarySpan x,
                            BinarySpan y, const std::vector<std::size_t>& active,
                            double weight, double* grad_fail,
                            double* grad_leak) {
  const std::size_t m = theta.m();
  const std::size_t n = theta.n();
  double ll = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    ll += clamped_log(y[i] ? theta.priors[i] : 1.0 - theta.priors[i]);
  }
  for (std::size_t j = 0; j < n; ++j) {
    double q = 1.0 - theta.leaks[j];
    for (std::size_t i : active) {
      q *= theta.failures[i * n + j];
    }
    const double qc = clamp_prob(q);
    ll += x[j] ? std::log1p(-qc) : std::log(qc);
    if (grad_fail) {
      const double common = x[j] ? -qc / (1.0 - qc) : 1.0;
      for (std::size_t i : active) {
        grad_fail[i * n + j] += weight * (1.0 - theta.failures[i * n + j]) * common;
      }
      grad_leak[j] -= weight * theta.leaks[j] * common;
    }
  }
  return ll;
}

inline std::vector<std::size_t> active_set(BinarySpan y) {
  std::vector<std::size_t> act;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i]) {
      act.push_back(i);
    }
  }
  return act;
}

}  // namespace detail

// Monte Carlo ELBO: mean over S draws y ~ q of log P(x, y) - log q(y | x).
inline double elbo_estimate(const ModelParams& theta,
                            const RecognitionParams& phi, BinarySpan x,
                            std::span<const double> xbar, std::size_t samples,
                            Rng& rng) {
  if (samples == 0) {
    throw std::invalid_argument("elbo_estimate needs at least one sample");
  }
  const auto z = recognition_logits(phi, xbar);
  BinaryVector y(phi.m);
  double total = 0.0;
  for (std::size_t s = 0; s < samples; ++s) {
    for (std::size_t i = 0; i < phi.m; ++i) {
      y[i] = rng.uniform() < sigmoid(z[i]) ? 1 : 0;
    }
    total += complete_loglik(x, y, theta) - recognition_logprob(y, z);
  }
  return total / static_cast<double>(samples);
}

// Plain score-function estimate of d ELBO / d phi (weights only) with a
// constant baseline subtracted from the learning signal.
inline std::vector<double> score_function_gradient(
    const ModelParams& theta, const RecognitionParams& phi, BinarySpan x,
    std::span<const double> xbar, std::size_t samples, Rng& rng,
    double baseline = 0.0) {
  const auto z = recognition_logits(phi, xbar);
  std::vector<double> q(phi.m);
  for (std::size_t i = 0; i < phi.m; ++i) {
    q[i] = sigmoid(z[i]);
  }
  std::vector<double> grad(phi.weights.size(), 0.0);
  BinaryVector y(phi.m);
  for (std::size_t s = 0; s < samples; ++s) {
    for (std::size_t i = 0; i < phi.m; ++i) {
      y[i] = rng.uniform() < q[i] ? 1 : 0;
    }
    const auto act = detail::active_set(y);
    const double signal =
        detail::loglik_active(theta, x, y, act, 0.0, nullptr, nullptr) -
        recognition_logprob(y, z) - baseline;
    for (std::size_t i = 0; i < phi.m; ++i) {
      const double d = signal * (y[i] - q[i]);
      double* row = &grad[i * phi.stride()];
      for (std::size_t k = 0; k < xbar.size(); ++k) {
        row[k] += d * xbar[k];
      }
    }
  }
  for (double& g : grad) {
    g /= static_cast<double>(samples);
  }
  return grad;
}

// One-hidden-layer tanh network mapping the centered input to a scalar
// baseline for the learning signal.
class BaselineNet {
 public:
  BaselineNet() = default;
  BaselineNet(std::size_t inputs, std::size_t hidden, Rng& rng)
      : inputs_(inputs),
        hidden_(hidden),
        w1_(hidden * inputs),
        b1_(hidden, 0.0),
        w2_(hidden),
        b2_(0.0) {
    const double s1 = 1.0 / std::sqrt(static_cast<double>(inputs));
    for (double& v : w1_) {
      v = rng.uniform(-s1, s1);
    }
    const double s2 = 1.0 / std::sqrt(static_cast<double>(hidden));
    for (double& v : w2_) {
      v = rng.uniform(-s2, s2);
    }
  }

  std::size_t parameter_count() const { return w1_.size() + b1_.size() + w2_.size() + 1; }

  double forward(std::span<const double> in, std::vector<double>* act = nullptr) const {
    std::vector<double> h(hidden_);
    for (std::size_t u = 0; u < hidden_; ++u) {
      const double* row = &w1_[u * inputs_];
      double s = b1_[u];
      for (std::size_t k = 0; k < inputs_; ++k) {
        s += row[k] * in[k];
      }
      h[u] = std::tanh(s);
    }
    double out = b2_;
    for (std::size_t u = 0; u < hidden_; ++u) {
      out += w2_[u] * h[u];
    }
    if (act) {
      *act = std::move(h);
    }
    return out;
  }

  // Accumulates d(0.5 (out - target)^2)/d(params) scaled by `scale`, given
  // the cached hidden activations; layout matches parameters().
  void backward(std::span<const double> in, const std::vector<double>& h,
                double residual, double scale, std::vector<double>& grad) const {
    const std::size_t o_b1 = w1_.size();
    const std::size_t o_w2 = o_b1 + b1_.size();
    const std::size_t o_b2 = o_w2 + w2_.size();
    const double r = residual * scale;
    for (std::size_t u = 0; u < hidden_; ++u) {
      grad[o_w2 + u] += r * h[u];
      const double dh = r * w2_[u] * (1.0 - h[u] * h[u]);
      grad[o_b1 + u] += dh;
      double* row = &grad[u * inputs_];
      for (std::size_t k = 0; k < inputs_; ++k) {
        row[k] += dh * in[k];
      }
    }
    grad[o_b2] += r;
  }

  // Applies delta to the flattened parameter vector.
  void apply(const std::vector<double>& delta) {
    std::size_t k = 0;
    for (double& v : w1_) v += delta[k++];
    for (double& v : b1_) v += delta[k++];
    for (double& v : w2_) v += delta[k++];
    b2_ += delta[k];
  }

  std::vector<double> parameters() const {
    std::vector<double> out;
    out.reserve(parameter_count());
    out.insert(out.end(), w1_.begin(), w1_.end());
    out.insert(out.end(), b1_.begin(), b1_.end());
    out.insert(out.end(), w2_.begin(), w2_.end());
    out.push_back(b2_);
    return out;
  }

 private:
  std::size_t inputs_ = 0;
  std::size_t hidden_ = 0;
  std::vector<double> w1_, b1_, w2_;
  double b2_ = 0.0;
};

// RMSprop: per-parameter scaling by the root mean square of recent gradients.
class RmsProp {
 public:
  RmsProp() = default;
  RmsProp(std::size_t size, double decay = 0.95, double eps = 1e-6)
      : ms_(size, 0.0), decay_(decay), eps_(eps) {}

  // Returns the update lr * g / (sqrt(ms) + eps) for gradient g.
  std::vector<double> delta(const std::vector<double>& g, double lr) {
    std::vector<double> d(g.size());
    for (std::size_t k = 0; k < g.size(); ++k) {
      ms_[k] = decay_ * ms_[k] + (1.0 - decay_) * g[k] * g[k];
      d[k] = lr * g[k] / (std::sqrt(ms_[k]) + eps_);
    }
    return d;
  }

 private:
  std::vector<double> ms_;
  double decay_ = 0.95;
  double eps_ = 1e-6;
};

struct TrainConfig {
  double lambda = 0.01;
  std::size_t samples = 10;
  double lr_phi = 3e-3;
  double lr_theta_ratio = 0.2;
  std::size_t burn_in_epochs = 50;
  std::size_t epochs = 150;  // total, burn-in included
  std::size_t minibatch = 64;
  double weight_decay = 0.0;
  std::size_t baseline_hidden = 100;
  double signal_decay = 0.9;
  std::size_t validation_size = 1000;
  std::size_t validate_every = 1;
  GibbsConfig validation_gibbs{1, 50, 200, 1, 0, 1};
  std::uint64_t seed = 0;
  unsigned threads = 1;

  void validate() const {
    if (lambda < 0.0) {
      throw ConfigError("lambda must be non-negative");
    }
    if (samples == 0 || minibatch == 0 || epochs == 0 || baseline_hidden == 0 ||
        validate_every == 0) {
      throw ConfigError("training counts must be positive");
    }
    if (!(lr_phi > 0.0) || !(lr_theta_ratio >= 0.0) || weight_decay < 0.0) {
      throw ConfigError("learning rates must be positive, weight decay >= 0");
    }
    validation_gibbs.validate();
  }
};

struct Checkpoint {
  std::size_t epoch = 0;
  ModelParams theta;
  RecognitionParams phi;
  double validation_score = 0.0;
};

struct EpochLog {
  std::size_t epoch = 0;
  double elbo = 0.0;             // mean ELBO estimate per record
  double supervised_loss = 0.0;  // mean anchor log loss per record
  double validation_score = 0.0;
  std::size_t skipped_steps = 0;
};

// Mutable optimizer state for one training run.
class NvilTrainer {
 public:
  NvilTrainer(ModelParams theta0, const NoiseModel& noise,
              std::vector<double> means, const TrainConfig& cfg,
              std::optional<RecognitionParams> phi0 = std::nullopt)
      : cfg_(cfg), noise_(noise), means_(std::move(means)), theta_(std::move(theta0)) {
    cfg_.validate();
    const std::size_t m = theta_.m();
    const std::size_t n = theta_.n();
    Rng rng(derive_seed(cfg_.seed, 0x70686930ULL));
    phi_ = phi0 ? *phi0 : RecognitionParams::random(m, n, rng);
    baseline_ = BaselineNet(n + 1, cfg_.baseline_hidden, rng);
    const auto mask = theta_.anchor_mask();
    for (std::size_t j = 0; j < n; ++j) {
      if (!mask[j]) {
        free_columns_.push_back(j);
      }
    }
    fail_logit_.assign(m * n, 0.0);
    leak_logit_.assign(n, 0.0);
    for (std::size_t j : free_columns_) {
      leak_logit_[j] = std::clamp(logit(theta_.leaks[j]), -kLogitCap, kLogitCap);
      for (std::size_t i = 0; i < m; ++i) {
        fail_logit_[i * n + j] =
            std::clamp(logit(theta_.failure(i, j)), -kLogitCap, kLogitCap);
      }
    }
    phi_opt_ = RmsProp(phi_.weights.size() + phi_.aux_bias.size());
    theta_opt_ = RmsProp(free_columns_.size() * (m + 1));
    base_opt_ = RmsProp(baseline_.parameter_count());
  }

  const ModelParams& theta() const { return theta_; }
  const RecognitionParams& phi() const { return phi_; }

  // One update on the given records. Returns false (and leaves parameters
  // untouched) when a non-finite gradient appears.
  bool step(const Dataset& ds, std::span<const std::size_t> batch,
            bool update_theta, std::uint64_t step_seed, double* elbo_sum,
            double* sup_sum) {
    const std::size_t m = theta_.m();
    const std::size_t n = theta_.n();
    const std::size_t S = cfg_.samples;
    const std::size_t B = batch.size();

    struct RecordWork {
      std::vector<double> xbar, xtilde, hidden, q;
      double base = 0.0;
      std::vector<double> signal;           // S
      std::vector<BinaryVector> ys;         // S
      std::vector<double> grad_fail, grad_leak;
      double sup = 0.0;
    };
    std::vector<RecordWork> work(B);
    parallel_for(B, cfg_.threads, [&](std::size_t b) {
      const PatientRecord& rec = ds.records[batch[b]];
      RecordWork& w = work[b];
      w.xbar = centered_padded(rec.x, means_);
      w.xtilde = censor_anchors(w.xbar, theta_.anchor_index);
      w.base = baseline_.forward(w.xbar, &w.hidden);
      const auto z = recognition_logits(phi_, w.xbar);
      w.q.resize(m);
      for (std::size_t i = 0; i < m; ++i) {
        w.q[i] = sigmoid(z[i]);
      }
      if (update_theta) {
        w.grad_fail.assign(m * n, 0.0);
        w.grad_leak.assign(n, 0.0);
      }
      Rng rng(derive_seed(step_seed, batch[b]));
      w.signal.resize(S);
      w.ys.assign(S, BinaryVector(m));
      for (std::size_t s = 0; s < S; ++s) {
        BinaryVector& y = w.ys[s];
        for (std::size_t i = 0; i < m; ++i) {
          y[i] = rng.uniform() < w.q[i] ? 1 : 0;
        }
        const auto act = detail::active_set(y);
        const double ll = detail::loglik_active(
            theta_, rec.x, y, act, 1.0 / static_cast<double>(S),
            update_theta ? w.grad_fail.data() : nullptr,
            update_theta ? w.grad_leak.data() : nullptr);
        w.signal[s] = ll - recognition_logprob(y, z);
      }
      w.sup = supervised_term(phi_, w.xtilde, rec.a);
    });

    // Signal centering and normalization.
    double mean = 0.0;
    for (const auto& w : work) {
      for (double l : w.signal) {
        mean += l - w.base;
      }
      if (elbo_sum) {
        for (double l : w.signal) {
          *elbo_sum += l / static_cast<double>(S);
        }
      }
      if (sup_sum) {
        *sup_sum += w.sup;
      }
    }
    mean /= static_cast<double>(B * S);
    const double new_mean =
        cfg_.signal_decay * signal_mean_ + (1.0 - cfg_.signal_decay) * mean;
    double var = 0.0;
    for (const auto& w : work) {
      for (double l : w.signal) {
        const double c = l - w.base - new_mean;
        var += c * c;
      }
    }
    var /= static_cast<double>(B * S);
    const double new_var =
        cfg_.signal_decay * signal_var_ + (1.0 - cfg_.signal_decay) * var;
    const double scale = 1.0 / std::max(1.0, std::sqrt(new_var));

    const std::size_t stride = phi_.stride();
    std::vector<double> g_phi(phi_.weights.size() + m, 0.0);
    std::vector<double> g_base(baseline_.parameter_count(), 0.0);
    const double inv_bs = 1.0 / static_cast<double>(B * S);
    const double inv_b = 1.0 / static_cast<double>(B);
    for (const auto& w : work) {
      double target = 0.0;
      for (std::size_t s = 0; s < S; ++s) {
        const double a = (w.signal[s] - w.base - new_mean) * scale;
        target += w.signal[s] - new_mean;
        for (std::size_t i = 0; i < m; ++i) {
          const double d = a * (w.ys[s][i] - w.q[i]) * inv_bs;
          if (d == 0.0) {
            continue;
          }
          double* row = &g_phi[i * stride];
          for (std::size_t k = 0; k < stride; ++k) {
            row[k] += d * w.xbar[k];
          }
        }
      }
      target /= static_cast<double>(S);
      baseline_.backward(w.xbar, w.hidden, w.base - target, inv_b, g_base);
    }
    // Supervised anchor term.
    if (cfg_.lambda > 0.0) {
      for (std::size_t b = 0; b < B; ++b) {
        const auto& w = work[b];
        const PatientRecord& rec = ds.records[batch[b]];
        const auto z = recognition_logits(phi_, w.xtilde);
        for (std::size_t i = 0; i < m; ++i) {
          const double r = cfg_.lambda * (rec.a[i] - sigmoid(z[i] + phi_.aux_bias[i])) * inv_b;
          double* row = &g_phi[i * stride];
          for (std::size_t k = 0; k < stride; ++k) {
            row[k] += r * w.xtilde[k];
          }
          g_phi[phi_.weights.size() + i] += r;
        }
      }
    }
    if (cfg_.weight_decay > 0.0) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t k = 0; k + 1 < stride; ++k) {
          g_phi[i * stride + k] -= cfg_.weight_decay * phi_.w(i, k);
        }
      }
    }

    std::vector<double> g_theta;
    if (update_theta) {
      g_theta.assign(free_columns_.size() * (m + 1), 0.0);
      for (const auto& w : work) {
        for (std::size_t c = 0; c < free_columns_.size(); ++c) {
          const std::size_t j = free_columns_[c];
          for (std::size_t i = 0; i < m; ++i) {
            g_theta[c * (m + 1) + i] += w.grad_fail[i * n + j] * inv_b;
          }
          g_theta[c * (m + 1) + m] += w.grad_leak[j] * inv_b;
        }
      }
    }

    auto finite = [](const std::vector<double>& v) {
      for (double x : v) {
        if (!std::isfinite(x)) {
          return false;
        }
      }
      return true;
    };
    if (!finite(g_phi) || !finite(g_base) || !finite(g_theta) ||
        !std::isfinite(new_var)) {
      return false;
    }

    signal_mean_ = new_mean;
    signal_var_ = new_var;
    const auto d_phi = phi_opt_.delta(g_phi, cfg_.lr_phi);
    for (std::size_t k = 0; k < phi_.weights.size(); ++k) {
      phi_.weights[k] += d_phi[k];
    }
    for (std::size_t i = 0; i < m; ++i) {
      phi_.aux_bias[i] += d_phi[phi_.weights.size() + i];
    }
    // Baseline regression is a descent step.
    auto d_base = base_opt_.delta(g_base, cfg_.lr_phi);
    for (double& v : d_base) {
      v = -v;
    }
    baseline_.apply(d_base);

    if (update_theta) {
      const auto d_theta =
          theta_opt_.delta(g_theta, cfg_.lr_phi * cfg_.lr_theta_ratio);
      for (std::size_t c = 0; c < free_columns_.size(); ++c) {
        const std::size_t j = free_columns_[c];
        for (std::size_t i = 0; i < m; ++i) {
          double& t = fail_logit_[i * n + j];
          t += d_theta[c * (m + 1) + i];
          theta_.failure(i, j) = sigmoid(t);
        }
        double& u = leak_logit_[j];
        u += d_theta[c * (m + 1) + m];
        theta_.leaks[j] = sigmoid(u);
      }
    }
    return true;
  }

 private:
  static constexpr double kLogitCap = 10.0;

  TrainConfig cfg_;
  NoiseModel noise_;
  std::vector<double> means_;
  ModelParams theta_;
  RecognitionParams phi_;
  BaselineNet baseline_;
  std::vector<std::size_t> free_columns_;
  std::vector<double> fail_logit_;
  std::vector<double> leak_logit_;
  RmsProp phi_opt_, theta_opt_, base_opt_;
  double signal_mean_ = 0.0;
  double signal_var_ = 1.0;
};

struct TrainResult {
  Checkpoint best;
  std::vector<Checkpoint> checkpoints;
  std::vector<EpochLog> log;
  std::vector<double> feature_means;
};

// Splits off the validation records: the last `validation_size` rows after a
// seeded shuffle.
inline std::pair<Dataset, Dataset> split_validation(const Dataset& ds,
                                                    std::size_t validation_size,
                                                    std::uint64_t seed) {
  if (ds.empty()) {
    throw DataError("training dataset is empty");
  }
  if (validation_size >= ds.size()) {
    throw DataError("validation split (" + std::to_string(validation_size) +
                    ") must be smaller than the dataset (" +
                    std::to_string(ds.size()) + ")");
  }
  std::vector<std::size_t> rows(ds.size());
  std::iota(rows.begin(), rows.end(), 0);
  Rng rng(derive_seed(seed, 0x76616c69ULL));
  rng.shuffle(rows);
  const std::size_t cut = ds.size() - validation_size;
  std::vector<std::size_t> train(rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(cut));
  std::vector<std::size_t> val(rows.begin() + static_cast<std::ptrdiff_t>(cut), rows.end());
  std::sort(train.begin(), train.end());
  std::sort(val.begin(), val.end());
  return {ds.subset(train), ds.subset(val)};
}

using EpochCallback = std::function<void(const EpochLog&, const Checkpoint&)>;

// Optimizes ELBO + lambda * R over `train_set` starting from theta0 and
// returns the checkpoint with the best held-out anchor score on
// `validation`. Epoch 0 is theta0 itself. Theta is frozen for the first
// burn_in_epochs epochs.
inline TrainResult train(const Dataset& train_set, const Dataset& validation,
                         const ModelParams& theta0, const NoiseModel& noise,
                         const TrainConfig& cfg,
                         const EpochCallback& on_epoch = {},
                         std::optional<RecognitionParams> phi0 = std::nullopt) {
  cfg.validate();
  if (train_set.empty()) {
    throw DataError("training dataset is empty");
  }
  if (validation.empty()) {
    throw DataError("validation dataset is empty");
  }
  TrainResult result;
  result.feature_means = column_means(train_set);
  NvilTrainer trainer(theta0, noise, result.feature_means, cfg, std::move(phi0));

  auto score = [&](const ModelParams& theta) {
    return heldout_anchor_score(theta, validation, noise, cfg.validation_gibbs,
                                derive_seed(cfg.seed, 0x7363ULL), cfg.threads);
  };

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  double last_score = score(trainer.theta());

  auto record = [&](std::size_t epoch, const EpochLog& entry) {
    Checkpoint cp{epoch, trainer.theta(), trainer.phi(), entry.validation_score};
    if (on_epoch) {
      on_epoch(entry, cp);
    }
    if (result.checkpoints.empty() ||
        cp.validation_score > result.best.validation_score) {
      result.best = cp;
    }
    result.checkpoints.push_back(std::move(cp));
    result.log.push_back(entry);
  };
  record(0, EpochLog{0, 0.0, 0.0, last_score, 0});

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const bool update_theta = epoch > cfg.burn_in_epochs;
    Rng shuffler(derive_seed(cfg.seed, 0x65706f63ULL, epoch));
    shuffler.shuffle(order);
    EpochLog entry;
    entry.epoch = epoch;
    double elbo_sum = 0.0;
    double sup_sum = 0.0;
    for (std::size_t start = 0, step = 0; start < order.size();
         start += cfg.minibatch, ++step) {
      const std::size_t end = std::min(order.size(), start + cfg.minibatch);
      const std::span<const std::size_t> batch(order.data() + start, end - start);
      const bool ok = trainer.step(train_set, batch, update_theta,
                                   derive_seed(cfg.seed, epoch, step, 0x73ULL),
                                   &elbo_sum, &sup_sum);
      if (!ok) {
        ++entry.skipped_steps;
      }
    }
    entry.elbo = elbo_sum / static_cast<double>(train_set.size());
    entry.supervised_loss = sup_sum / static_cast<double>(train_set.size());
    const bool due = epoch % cfg.validate_every == 0 || epoch == cfg.epochs;
    if (update_theta && due) {
      last_score = score(trainer.theta());
    }
    entry.validation_score = last_score;
    if (due || !update_theta) {
      record(epoch, entry);
    } else {
      result.log.push_back(entry);
    }
  }
  return result;
}

// Fresh theta for the random-initialization ablation: priors and anchor
// columns from the noise model, everything else uniform.
inline ModelParams random_theta(const Dataset& ds, const NoiseModel& noise,
                                std::uint64_t seed) {
  ModelParams p(ds.m(), ds.n());
  p.anchor_index = ds.anchor_index;
  p.condition_names = ds.condition_names;
  p.feature_names = ds.feature_names;
  Rng rng(derive_seed(seed, 0x72616e64ULL));
  std::vector<double> anchor_rate(ds.m(), 0.0);
  for (const auto& r : ds.records) {
    for (std::size_t i = 0; i < ds.m(); ++i) {
      anchor_rate[i] += r.a[i];
    }
  }
  for (std::size_t i = 0; i < ds.m(); ++i) {
    p.priors[i] = std::clamp(
        (anchor_rate[i] / std::max<std::size_t>(1, ds.size()) - noise[i].p_a1_y0) /
            (noise[i].p_a1_y1 - noise[i].p_a1_y0),
        0.0, 1.0);
  }
  const auto mask = p.anchor_mask();
  for (std::size_t j = 0; j < ds.n(); ++j) {
    if (mask[j]) {
      continue;
    }
    p.leaks[j] = rng.uniform(0.0, 0.5);
    for (std::size_t i = 0; i < ds.m(); ++i) {
      p.failure(i, j) = rng.uniform();
    }
  }
  p.set_anchor_columns(noise);
  return p;
}

// Best run over a grid of weight-decay values, chosen by validation score.
struct GridResult {
  TrainResult best;
  double best_weight_decay = 0.0;
  std::vector<std::pair<double, double>> scores;  // (weight decay, score)
};

inline GridResult train_weight_decay_grid(const Dataset& train_set,
                                          const Dataset& validation,
                                          const ModelParams& theta0,
                                          const NoiseModel& noise,
                                          TrainConfig cfg,
                                          const std::vector<double>& grid = {0.0, 0.1, 0.01, 0.001}) {
  if (grid.empty()) {
    throw ConfigError("weight-decay grid is empty");
  }
  GridResult out;
  bool first = true;
  for (double wd : grid) {
    cfg.weight_decay = wd;
    TrainResult r = train(train_set, validation, theta0, noise, cfg);
    out.scores.emplace_back(wd, r.best.validation_score);
    if (first || r.best.validation_score > out.best.best.validation_score) {
      out.best = std::move(r);
      out.best_weight_decay = wd;
      first = false;
    }
  }
  return out;
}

inline void write_training_log(std::ostream& out, const std::vector<EpochLog>& log) {
  out << "epoch,elbo,supervised_loss,validation_score,skipped_steps\n";
  out.precision(17);
  for (const auto& e : log) {
    out << e.epoch << ',' << e.elbo << ',' << e.supervised_loss << ','
        << e.validation_score << ',' << e.skipped_steps << '\n';
  }
}

// Recognition weights as little-endian IEEE doubles: weights, then aux_bias.
inline std::string phi_to_blob(const RecognitionParams& phi) {
  std::string out;
  out.reserve((phi.weights.size() + phi.aux_bias.size()) * 8);
  auto put = [&](double v) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    for (int k = 0; k < 8; ++k) {
      out.push_back(static_cast<char>((bits >> (8 * k)) & 0xff));
    }
  };
  for (double v : phi.weights) put(v);
  for (double v : phi.aux_bias) put(v);
  return out;
}

inline RecognitionParams phi_from_blob(std::size_t m, std::size_t n,
                                       const std::string& blob) {
  RecognitionParams phi(m, n);
  if (blob.size() != (phi.weights.size() + phi.aux_bias.size()) * 8) {
    throw DataError("recognition blob has " + std::to_string(blob.size()) +
                    " bytes, expected " +
                    std::to_string((phi.weights.size() + m) * 8));
  }
  std::size_t pos = 0;
  auto get = [&] {
    std::uint64_t bits = 0;
    for (int k = 0; k < 8; ++k) {
      bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(blob[pos++]))
              << (8 * k);
    }
    return std::bit_cast<double>(bits);
  };
  for (double& v : phi.weights) v = get();
  for (double& v : phi.aux_bias) v = get();
  return phi;
}

inline constexpr int kCheckpointVersion = 1;

// Writes <stem>.json and <stem>.phi.bin.
inline void save_checkpoint(const std::string& stem, const Checkpoint& cp,
                            const NoiseModel& noise) {
  const std::string blob_path = stem + ".phi.bin";
  nlohmann::json j{{"format", "qmrtag-checkpoint"},
                   {"version", kCheckpointVersion},
                   {"epoch", cp.epoch},
                   {"validation_score", cp.validation_score},
                   {"model", model_to_json(cp.theta, noise)},
                   {"phi", {{"m", cp.phi.m},
                            {"n", cp.phi.n},
                            {"blob", std::filesystem::path(blob_path).filename().string()}}}};
  write_file(stem + ".json", j.dump(1));
  write_file(blob_path, phi_to_blob(cp.phi));
}

struct LoadedCheckpoint {
  Checkpoint checkpoint;
  NoiseModel noise;
};

inline LoadedCheckpoint load_checkpoint(const std::string& json_path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(json_path));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint " + json_path + " is not JSON: " + e.what());
  }
  LoadedCheckpoint out;
  try {
    if (j.value("format", "") != "qmrtag-checkpoint" ||
        j.at("version").get<int>() != kCheckpointVersion) {
      throw DataError(json_path + " is not a version-1 checkpoint");
    }
    auto model = model_from_json(j.at("model"));
    out.checkpoint.theta = std::move(model.params);
    out.noise = std::move(model.noise);
    out.checkpoint.epoch = j.at("epoch").get<std::size_t>();
    out.checkpoint.validation_score = j.at("validation_score").get<double>();
    const auto& pj = j.at("phi");
    const auto blob_path = std::filesystem::path(json_path).parent_path() /
                           pj.at("blob").get<std::string>();
    out.checkpoint.phi = phi_from_blob(pj.at("m").get<std::size_t>(),
                                       pj.at("n").get<std::size_t>(),
                                       read_file(blob_path.string()));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed checkpoint " + json_path + ": " + e.what());
  }
  return out;
}

}  // namespace qmrtag
