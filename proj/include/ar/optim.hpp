#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "ar/errors.hpp"
#include "ar/tensor.hpp"

namespace ar {

// Bias-corrected AdamW with decoupled weight decay:
//   m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2
//   p <- p - lr * ( m_hat / (sqrt(v_hat) + eps) + wd * p )
template <typename T>
class AdamW {
 public:
  struct Hyper {
    double lr = 0.2e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.05;
  };

  AdamW(std::vector<std::pair<std::string, Tensor<T>>>& params, Hyper hyper)
      : params_(params), hyper_(hyper) {
    for (auto& [name, p] : params_) {
      m_.emplace_back(p.numel(), 0.0);
      v_.emplace_back(p.numel(), 0.0);
    }
  }

  double lr() const { return hyper_.lr; }
  void set_lr(double lr) { hyper_.lr = lr; }
  const Hyper& hyper() const { return hyper_; }
  int64_t step_count() const { return step_; }

  void step() {
    for (auto& [name, p] : params_) {
      for (T g : p.grad()) {
        if (!std::isfinite(static_cast<double>(g))) {
          throw NumericError("adamw_step refused: non-finite gradient in " + name);
        }
      }
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(hyper_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(hyper_.beta2, static_cast<double>(step_));
    for (size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i].second;
      auto& vals = p.values();
      const auto& grads = p.grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (size_t j = 0; j < vals.size(); ++j) {
        double g = static_cast<double>(grads[j]);
        m[j] = hyper_.beta1 * m[j] + (1.0 - hyper_.beta1) * g;
        v[j] = hyper_.beta2 * v[j] + (1.0 - hyper_.beta2) * g * g;
        double m_hat = m[j] / bc1;
        double v_hat = v[j] / bc2;
        double update = m_hat / (std::sqrt(v_hat) + hyper_.eps) +
                        hyper_.weight_decay * static_cast<double>(vals[j]);
        vals[j] = static_cast<T>(static_cast<double>(vals[j]) - hyper_.lr * update);
      }
    }
  }

  // serialization access
  std::vector<std::vector<double>>& moment1() { return m_; }
  std::vector<std::vector<double>>& moment2() { return v_; }
  void set_step_count(int64_t s) { step_ = s; }

 private:
  std::vector<std::pair<std::string, Tensor<T>>>& params_;
  Hyper hyper_;
  int64_t step_ = 0;
  std::vector<std::vector<double>> m_, v_;  // moments kept in double
};

template <typename T>
double global_grad_norm(std::vector<std::pair<std::string, Tensor<T>>>& params) {
  double acc = 0.0;
  for (auto& [name, p] : params) {
    for (T g : p.grad()) acc += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(acc);
}

// Scales all gradients by threshold/norm when the global L2 norm exceeds the
// threshold; returns the pre-clip norm.
template <typename T>
double clip_global_norm(std::vector<std::pair<std::string, Tensor<T>>>& params, double threshold) {
  if (threshold <= 0.0) throw std::invalid_argument("clip_global_norm: threshold must be positive");
  double norm = global_grad_norm(params);
  if (norm > threshold) {
    double s = threshold / norm;
    for (auto& [name, p] : params) {
      for (T& g : p.grad()) g = static_cast<T>(static_cast<double>(g) * s);
    }
  }
  return norm;
}

// Reduce-on-plateau (mode min): after `patience` consecutive calls without
// improvement the lr halves (by `factor`), floored at min_lr.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, double factor = 0.5, int64_t patience = 60, double min_lr = 1.5e-4)
      : lr_(lr), factor_(factor), patience_(patience), min_lr_(min_lr) {}

  // Returns true when the lr was reduced by this call.
  bool step(double metric) {
    if (!std::isfinite(metric)) throw NumericError("plateau_step: non-finite validation metric");
    if (metric < best_) {
      best_ = metric;
      bad_count_ = 0;
      return false;
    }
    if (++bad_count_ >= patience_) {
      lr_ = std::max(lr_ * factor_, min_lr_);
      bad_count_ = 0;
      return true;
    }
    return false;
  }

  double lr() const { return lr_; }
  double best() const { return best_; }
  int64_t bad_count() const { return bad_count_; }
  void restore(double lr, double best, int64_t bad_count) {
    lr_ = lr;
    best_ = best;
    bad_count_ = bad_count;
  }

 private:
  double lr_;
  double factor_;
  int64_t patience_;
  double min_lr_;
  double best_ = std::numeric_limits<double>::infinity();
  int64_t bad_count_ = 0;
};

struct LrFindResult {
  std::vector<std::pair<double, double>> curve;  // (lr, smoothed loss)
  double suggestion_min_loss = 0.0;              // lr at minimal smoothed loss / 10
  double suggestion_steepest = 0.0;              // lr at steepest smoothed descent
  bool diverged = false;
  double divergence_lr = 0.0;
};

// Exponential lr sweep: lr_k = lr_min * (lr_max/lr_min)^(k/(steps-1)).
// train_step(lr) performs one optimization step and returns its loss.
// Smoothing is a bias-corrected exponential moving average; the sweep stops
// early once the smoothed loss exceeds 4x the best seen.
inline LrFindResult lr_range_test(const std::function<double(double)>& train_step, double lr_min,
                                  double lr_max, int64_t steps, double smooth_beta = 0.98) {
  if (!(lr_min < lr_max)) throw std::invalid_argument("lr_range_test: lr_min must be below lr_max");
  if (steps < 10) throw std::invalid_argument("lr_range_test: needs at least 10 steps");
  LrFindResult out;
  const double ratio = lr_max / lr_min;
  double avg = 0.0;
  double best = std::numeric_limits<double>::infinity();
  for (int64_t k = 0; k < steps; ++k) {
    double lr = lr_min * std::pow(ratio, static_cast<double>(k) / static_cast<double>(steps - 1));
    double loss = train_step(lr);
    if (!std::isfinite(loss)) {
      out.diverged = true;
      out.divergence_lr = lr;
      break;
    }
    avg = smooth_beta * avg + (1.0 - smooth_beta) * loss;
    double smoothed = avg / (1.0 - std::pow(smooth_beta, static_cast<double>(k + 1)));
    out.curve.emplace_back(lr, smoothed);
    best = std::min(best, smoothed);
    if (smoothed > 4.0 * best) {
      out.diverged = true;
      out.divergence_lr = lr;
      break;
    }
  }
  if (out.curve.empty()) {
    throw NumericError("lr_range_test: immediate divergence at lr " + std::to_string(lr_min));
  }
  // first index within rounding noise of the minimum, so a flat curve
  // degenerates to the first step
  double min_loss = out.curve[0].second;
  for (const auto& [lr, loss] : out.curve) min_loss = std::min(min_loss, loss);
  size_t best_idx = 0;
  for (size_t i = 0; i < out.curve.size(); ++i) {
    if (out.curve[i].second <= min_loss + std::abs(min_loss) * 1e-9) {
      best_idx = i;
      break;
    }
  }
  out.suggestion_min_loss = out.curve[best_idx].first / 10.0;

  size_t steep_idx = 0;
  double steepest = 0.0;
  for (size_t i = 1; i < out.curve.size(); ++i) {
    double slope = (out.curve[i].second - out.curve[i - 1].second) /
                   (std::log(out.curve[i].first) - std::log(out.curve[i - 1].first));
    if (slope < steepest) {
      steepest = slope;
      steep_idx = i;
    }
  }
  out.suggestion_steepest = out.curve[steep_idx].first;
  return out;
}

}  // namespace ar
