#pragma once

#include <cmath>
#include <vector>

namespace refgeo {

// Adam with decoupled weight decay over a flat list of parameter buffers.
class AdamW {
   public:
    struct Options {
        double lr = 1e-3;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double weight_decay = 0.0;
    };

    AdamW() = default;
    explicit AdamW(Options opt) : opt_(opt) {}

    double lr() const { return opt_.lr; }
    void set_lr(double lr) { opt_.lr = lr; }
    long steps() const { return t_; }

    // params[i] and grads[i] are parallel buffers of equal length.
    void step(const std::vector<std::vector<double>*>& params, const std::vector<std::vector<double>>& grads) {
        if (m_.empty()) {
            for (const auto* p : params) {
                m_.emplace_back(p->size(), 0.0);
                v_.emplace_back(p->size(), 0.0);
            }
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
        for (std::size_t k = 0; k < params.size(); ++k) {
            auto& p = *params[k];
            const auto& g = grads[k];
            auto& m = m_[k];
            auto& v = v_[k];
            for (std::size_t i = 0; i < p.size(); ++i) {
                m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * g[i];
                v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * g[i] * g[i];
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                p[i] -= opt_.lr * (mhat / (std::sqrt(vhat) + opt_.eps) + opt_.weight_decay * p[i]);
            }
        }
    }

   private:
    Options opt_;
    std::vector<std::vector<double>> m_, v_;
    long t_ = 0;
};

}  // namespace refgeo
