#pragma once

#include <cmath>
#include <vector>

#include "uaseg/nn/layers.hpp"

namespace uaseg::nn {

// Adam (Kingma & Ba). Owns first/second moment estimates per parameter, keyed
// by position in the ParamSet it was constructed with.
template <typename T>
class Adam {
public:
    Adam() = default;
    explicit Adam(const ParamSet<T>& params, T lr, T beta1 = T(0.9), T beta2 = T(0.999),
                  T eps = T(1e-8))
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        m_.reserve(params.size());
        v_.reserve(params.size());
        for (const auto& p : params) {
            m_.emplace_back(p.value->n(), p.value->c(), p.value->h(), p.value->w());
            v_.emplace_back(p.value->n(), p.value->c(), p.value->h(), p.value->w());
        }
    }

    void step(ParamSet<T>& params) {
        ++t_;
        const double bc1 = 1.0 - std::pow(static_cast<double>(beta1_), t_);
        const double bc2 = 1.0 - std::pow(static_cast<double>(beta2_), t_);
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (!params[i].grad) continue;
            T* w = params[i].value->ptr();
            const T* g = params[i].grad->ptr();
            T* m = m_[i].ptr();
            T* v = v_[i].ptr();
            const std::size_t n = params[i].value->size();
            for (std::size_t j = 0; j < n; ++j) {
                m[j] = beta1_ * m[j] + (T(1) - beta1_) * g[j];
                v[j] = beta2_ * v[j] + (T(1) - beta2_) * g[j] * g[j];
                const double mhat = m[j] / bc1;
                const double vhat = v[j] / bc2;
                w[j] -= static_cast<T>(lr_ * mhat / (std::sqrt(vhat) + eps_));
            }
        }
    }

    T lr() const { return lr_; }
    void set_lr(T lr) { lr_ = lr; }

private:
    T lr_ = T(1e-3), beta1_ = T(0.9), beta2_ = T(0.999), eps_ = T(1e-8);
    long long t_ = 0;
    std::vector<Tensor<T>> m_, v_;
};

// Reduce-on-plateau: multiply the LR by `factor` once the monitored loss has
// failed to improve for `patience` consecutive epochs. "Improve" means
// dropping below best - min_delta. The first observed value only establishes
// the baseline.
class PlateauScheduler {
public:
    PlateauScheduler(double factor = 0.1, int patience = 5, double min_delta = 1e-4)
        : factor_(factor), patience_(patience), min_delta_(min_delta) {}

    // Returns true when this epoch triggered an LR reduction.
    bool observe(double loss) {
        if (!has_best_) {
            best_ = loss;
            has_best_ = true;
            return false;
        }
        if (loss < best_ - min_delta_) {
            best_ = loss;
            bad_epochs_ = 0;
            return false;
        }
        if (++bad_epochs_ >= patience_) {
            bad_epochs_ = 0;
            return true;
        }
        return false;
    }

    double factor() const { return factor_; }

private:
    double factor_;
    int patience_;
    double min_delta_;
    double best_ = 0.0;
    bool has_best_ = false;
    int bad_epochs_ = 0;
};

}  // namespace uaseg::nn
