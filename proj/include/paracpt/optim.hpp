#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "paracpt/common.hpp"
#include "paracpt/model.hpp"

namespace paracpt {

enum class ScheduleKind { cosine, inverse_sqrt };

inline std::string schedule_name(ScheduleKind k) { return k == ScheduleKind::cosine ? "cosine" : "inverse_sqrt"; }

inline ScheduleKind parse_schedule(const std::string& s)
{
    if (s == "cosine") {
        return ScheduleKind::cosine;
    }
    if (s == "inverse_sqrt" || s == "inv_sqrt") {
        return ScheduleKind::inverse_sqrt;
    }
    throw Error("unknown schedule: " + s);
}

/// Linear warmup over ceil(warmup_ratio * total) steps, then cosine decay
/// to zero at `total`, or inverse-square-root decay.
class LrSchedule {
public:
    LrSchedule(ScheduleKind kind, double peak, double warmup_ratio, std::size_t total_steps)
        : kind_(kind), peak_(peak), total_(total_steps)
    {
        if (!(peak > 0.0)) {
            throw Error("peak learning rate must be positive");
        }
        if (!(warmup_ratio >= 0.0 && warmup_ratio < 1.0)) {
            throw Error("warmup ratio must lie in [0, 1)");
        }
        warmup_ = warmup_ratio > 0.0 ? std::max<std::size_t>(1, fraction_count(warmup_ratio, total_steps)) : 0;
    }

    std::size_t warmup_steps() const { return warmup_; }
    std::size_t total_steps() const { return total_; }

    double at(std::size_t step) const
    {
        if (step < warmup_) {
            return peak_ * static_cast<double>(step) / static_cast<double>(warmup_);
        }
        if (kind_ == ScheduleKind::cosine) {
            if (total_ <= warmup_) {
                return peak_;
            }
            const double progress = std::min(1.0, static_cast<double>(step - warmup_) /
                                                      static_cast<double>(total_ - warmup_));
            return peak_ * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
        }
        const double w = static_cast<double>(std::max<std::size_t>(warmup_, 1));
        return peak_ * std::sqrt(w / std::max(w, static_cast<double>(step)));
    }

private:
    ScheduleKind kind_;
    double peak_;
    std::size_t total_;
    std::size_t warmup_ = 0;
};

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

/// Adam with decoupled weight decay over the trainable tensors of a model.
template <class T>
class AdamW {
public:
    AdamW(const Transformer<T>& model, AdamWConfig cfg) : cfg_(cfg)
    {
        for (const auto& p : model.params()) {
            if (p.trainable) {
                m_.push_back(Matrix<T>::Zero(p.value.rows(), p.value.cols()));
                v_.push_back(Matrix<T>::Zero(p.value.rows(), p.value.cols()));
            } else {
                m_.emplace_back();
                v_.emplace_back();
            }
        }
    }

    void step(Transformer<T>& model, const Gradients<T>& grads, double lr)
    {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        const T b1 = static_cast<T>(cfg_.beta1);
        const T b2 = static_cast<T>(cfg_.beta2);
        const T step_size = static_cast<T>(lr / bc1);
        const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
        const T eps = static_cast<T>(cfg_.eps);
        auto& params = model.params();
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& p = params[i];
            if (!p.trainable) {
                continue;
            }
            if (p.decay && cfg_.weight_decay > 0.0) {
                p.value *= static_cast<T>(1.0 - lr * cfg_.weight_decay);
            }
            m_[i] = b1 * m_[i] + (T(1) - b1) * grads[i];
            v_[i] = b2 * v_[i] + (T(1) - b2) * grads[i].cwiseProduct(grads[i]);
            p.value.array() -= step_size * m_[i].array() / (v_[i].array().sqrt() * inv_sqrt_bc2 + eps);
        }
    }

private:
    AdamWConfig cfg_;
    std::vector<Matrix<T>> m_;
    std::vector<Matrix<T>> v_;
    std::size_t t_ = 0;
};

/// Scales gradients so their global L2 norm is at most max_norm. Returns
/// the norm before clipping.
template <class T>
double clip_grad_norm(Gradients<T>& grads, double max_norm)
{
    double sq = 0.0;
    for (const auto& g : grads) {
        if (g.size() > 0) {
            sq += static_cast<double>(g.template cast<double>().squaredNorm());
        }
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm) {
        const T factor = static_cast<T>(max_norm / (norm + 1e-6));
        for (auto& g : grads) {
            g *= factor;
        }
    }
    return norm;
}

} // namespace paracpt
