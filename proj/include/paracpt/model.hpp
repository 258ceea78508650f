#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "paracpt/common.hpp"

namespace paracpt {

template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;

struct ModelConfig {
    std::size_t vocab_size = 259;
    std::size_t context_len = 64;
    std::size_t embed_dim = 64;
    std::size_t n_layers = 2;
    std::size_t n_heads = 4;
    std::size_t ffn_dim = 256;
    std::uint64_t seed = 0;

    void validate() const
    {
        if (vocab_size == 0 || context_len == 0 || embed_dim == 0 || n_layers == 0 || n_heads == 0 || ffn_dim == 0) {
            throw Error("model dimensions must all be >= 1");
        }
        if (embed_dim % n_heads != 0) {
            throw Error("embed_dim must be divisible by n_heads");
        }
    }

    bool operator==(const ModelConfig&) const = default;
};

/// Linear maps that can carry a low-rank adapter.
enum class MatrixRole { query, key, value, output, ffn_up, ffn_down };

inline std::string role_name(MatrixRole r)
{
    switch (r) {
    case MatrixRole::query: return "q";
    case MatrixRole::key: return "k";
    case MatrixRole::value: return "v";
    case MatrixRole::output: return "o";
    case MatrixRole::ffn_up: return "ffn_up";
    case MatrixRole::ffn_down: return "ffn_down";
    }
    return "?";
}

inline MatrixRole parse_role(const std::string& s)
{
    for (auto r : {MatrixRole::query, MatrixRole::key, MatrixRole::value, MatrixRole::output, MatrixRole::ffn_up,
                   MatrixRole::ffn_down}) {
        if (role_name(r) == s) {
            return r;
        }
    }
    throw Error("unknown adapter target role: " + s);
}

struct AdapterSpec {
    std::size_t rank = 16;
    double alpha = 32.0;
    double dropout = 0.05;
    std::set<MatrixRole> targets{MatrixRole::query, MatrixRole::key, MatrixRole::value};

    bool operator==(const AdapterSpec&) const = default;
};

/// One next-token training sequence: weight[i] scales the loss of
/// predicting target[i] from input[0..i].
struct TrainingExample {
    std::vector<TokenId> input;
    std::vector<TokenId> target;
    std::vector<float> weight;

    double weight_sum() const
    {
        double s = 0.0;
        for (float w : weight) {
            s += w;
        }
        return s;
    }
};

template <class T>
struct Param {
    std::string name;
    Matrix<T> value;
    bool trainable = true;
    bool decay = true;
};

template <class T>
using Gradients = std::vector<Matrix<T>>;

/// Decoder-only pre-LayerNorm transformer with learned positions, GELU
/// feed-forward blocks and an untied output projection.
template <class T>
class Transformer {
public:
    enum Slot : std::size_t { ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2, kPerLayer };

    static constexpr std::size_t kTokEmb = 0;
    static constexpr std::size_t kPosEmb = 1;

    explicit Transformer(const ModelConfig& cfg) : cfg_(cfg)
    {
        cfg_.validate();
        const auto d = static_cast<Eigen::Index>(cfg_.embed_dim);
        const auto f = static_cast<Eigen::Index>(cfg_.ffn_dim);
        const auto v = static_cast<Eigen::Index>(cfg_.vocab_size);
        const auto c = static_cast<Eigen::Index>(cfg_.context_len);

        Rng rng(cfg_.seed);
        const double std_w = 0.02;
        const double std_resid = 0.02 / std::sqrt(2.0 * static_cast<double>(cfg_.n_layers));
        auto normal = [&](Eigen::Index r, Eigen::Index cc, double sd) {
            Matrix<T> m(r, cc);
            for (Eigen::Index i = 0; i < m.size(); ++i) {
                m.data()[i] = static_cast<T>(rng.normal(0.0, sd));
            }
            return m;
        };
        auto add = [&](std::string name, Matrix<T> value, bool decay) {
            params_.push_back(Param<T>{std::move(name), std::move(value), true, decay});
        };

        add("tok_emb", normal(v, d, std_w), true);
        add("pos_emb", normal(c, d, std_w), true);
        for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
            const std::string p = "layer" + std::to_string(l) + ".";
            add(p + "ln1_g", Matrix<T>::Ones(1, d), false);
            add(p + "ln1_b", Matrix<T>::Zero(1, d), false);
            add(p + "wq", normal(d, d, std_w), true);
            add(p + "wk", normal(d, d, std_w), true);
            add(p + "wv", normal(d, d, std_w), true);
            add(p + "wo", normal(d, d, std_resid), true);
            add(p + "ln2_g", Matrix<T>::Ones(1, d), false);
            add(p + "ln2_b", Matrix<T>::Zero(1, d), false);
            add(p + "w1", normal(d, f, std_w), true);
            add(p + "b1", Matrix<T>::Zero(1, f), false);
            add(p + "w2", normal(f, d, std_resid), true);
            add(p + "b2", Matrix<T>::Zero(1, d), false);
        }
        add("lnf_g", Matrix<T>::Ones(1, d), false);
        add("lnf_b", Matrix<T>::Zero(1, d), false);
        add("w_out", normal(d, v, std_w), true);
        base_count_ = params_.size();
        adapter_of_.assign(base_count_, -1);
    }

    const ModelConfig& config() const { return cfg_; }
    std::size_t max_context() const { return cfg_.context_len; }

    std::vector<Param<T>>& params() { return params_; }
    const std::vector<Param<T>>& params() const { return params_; }

    std::size_t base_param_tensor_count() const { return base_count_; }

    std::size_t layer_index(std::size_t layer, Slot slot) const { return 2 + layer * kPerLayer + slot; }
    std::size_t lnf_g_index() const { return 2 + cfg_.n_layers * kPerLayer; }
    std::size_t lnf_b_index() const { return lnf_g_index() + 1; }
    std::size_t w_out_index() const { return lnf_g_index() + 2; }

    static Slot slot_for(MatrixRole r)
    {
        switch (r) {
        case MatrixRole::query: return wq;
        case MatrixRole::key: return wk;
        case MatrixRole::value: return wv;
        case MatrixRole::output: return wo;
        case MatrixRole::ffn_up: return w1;
        case MatrixRole::ffn_down: return w2;
        }
        throw Error("bad role");
    }

    bool has_adapters() const { return adapter_spec_.has_value(); }
    const std::optional<AdapterSpec>& adapter_spec() const { return adapter_spec_; }

    /// Freezes the base weights and attaches rank-r adapters to every
    /// targeted matrix in every layer: W_eff = W + (alpha/r) * B * A with
    /// A ~ U(-1/sqrt(d_in), 1/sqrt(d_in)) and B = 0.
    void apply_adapters(const AdapterSpec& spec, std::uint64_t seed)
    {
        if (spec.rank < 1) {
            throw Error("adapter rank must be >= 1");
        }
        if (spec.targets.empty()) {
            throw Error("adapter targets must be non-empty");
        }
        if (!(spec.dropout >= 0.0 && spec.dropout < 1.0)) {
            throw Error("adapter dropout must lie in [0, 1)");
        }
        if (adapter_spec_) {
            throw Error("adapters already applied");
        }
        for (std::size_t i = 0; i < base_count_; ++i) {
            params_[i].trainable = false;
        }
        Rng rng(seed);
        const auto r = static_cast<Eigen::Index>(spec.rank);
        for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
            for (MatrixRole role : spec.targets) {
                const std::size_t base = layer_index(l, slot_for(role));
                const auto d_in = params_[base].value.rows();
                const auto d_out = params_[base].value.cols();
                const double bound = 1.0 / std::sqrt(static_cast<double>(d_in));
                Matrix<T> a(r, d_in);
                for (Eigen::Index i = 0; i < a.size(); ++i) {
                    a.data()[i] = static_cast<T>((2.0 * rng.uniform01() - 1.0) * bound);
                }
                adapter_of_[base] = static_cast<int>(adapters_.size());
                adapters_.push_back({base, params_.size(), params_.size() + 1});
                params_.push_back(Param<T>{params_[base].name + ".lora_a", std::move(a), true, true});
                params_.push_back(Param<T>{params_[base].name + ".lora_b", Matrix<T>::Zero(d_out, r), true, true});
            }
        }
        adapter_spec_ = spec;
        adapter_scale_ = static_cast<T>(spec.alpha / static_cast<double>(spec.rank));
    }

    std::size_t total_parameter_count() const
    {
        std::size_t n = 0;
        for (std::size_t i = 0; i < base_count_; ++i) {
            n += static_cast<std::size_t>(params_[i].value.size());
        }
        return n;
    }

    std::size_t trainable_parameter_count() const
    {
        std::size_t n = 0;
        for (const auto& p : params_) {
            if (p.trainable) {
                n += static_cast<std::size_t>(p.value.size());
            }
        }
        return n;
    }

    Gradients<T> zero_gradients() const
    {
        Gradients<T> g;
        g.reserve(params_.size());
        for (const auto& p : params_) {
            if (p.trainable) {
                g.push_back(Matrix<T>::Zero(p.value.rows(), p.value.cols()));
            } else {
                g.emplace_back();
            }
        }
        return g;
    }

    /// Logits (n x vocab) for every input position.
    Matrix<T> logits(std::span<const TokenId> ids) const
    {
        Forward fw;
        run_forward(std::vector<std::span<const TokenId>>{ids}, fw, nullptr);
        return std::move(fw.logits);
    }

    /// Weighted NLL sum (no gradient).
    double nll(const TrainingExample& ex) const { return nll(std::span<const TrainingExample>(&ex, 1)); }

    /// Weighted NLL summed over a batch (no gradient).
    double nll(std::span<const TrainingExample> batch) const
    {
        Forward fw;
        run_forward(batch_inputs(batch), fw, nullptr);
        double total = 0.0;
        Eigen::Index row = 0;
        for (const auto& ex : batch) {
            for (std::size_t i = 0; i < ex.input.size(); ++i, ++row) {
                if (ex.weight[i] != 0.0f) {
                    total += static_cast<double>(ex.weight[i]) * row_nll(fw.logits, row, ex.target[i]);
                }
            }
        }
        return total;
    }

    double accumulate_gradients(const TrainingExample& ex, T scale, Gradients<T>& grads, Rng* dropout_rng = nullptr) const
    {
        return accumulate_gradients(std::span<const TrainingExample>(&ex, 1), scale, grads, dropout_rng);
    }

    /// Adds scale * d(weighted NLL)/d(theta) over the batch into `grads` and
    /// returns the weighted NLL sum. Adapter dropout is active iff
    /// `dropout_rng` is set.
    double accumulate_gradients(std::span<const TrainingExample> batch, T scale, Gradients<T>& grads,
                                Rng* dropout_rng = nullptr) const
    {
        Forward fw;
        run_forward(batch_inputs(batch), fw, dropout_rng);

        const auto vocab = static_cast<Eigen::Index>(cfg_.vocab_size);
        Matrix<T> dlogits = Matrix<T>::Zero(fw.logits.rows(), vocab);
        double total = 0.0;
        Eigen::Index row = 0;
        for (const auto& ex : batch) {
            for (std::size_t i = 0; i < ex.input.size(); ++i, ++row) {
                const float w = ex.weight[i];
                if (w == 0.0f) {
                    continue;
                }
                const auto t = static_cast<Eigen::Index>(ex.target[i]);
                auto logit_row = fw.logits.row(row);
                const T mx = logit_row.maxCoeff();
                RowVector<T> e = (logit_row.array() - mx).exp().matrix();
                const T sum = e.sum();
                total += static_cast<double>(w) * (static_cast<double>(mx) + std::log(static_cast<double>(sum)) -
                                                   static_cast<double>(logit_row(t)));
                const T coef = scale * static_cast<T>(w);
                dlogits.row(row) = e * (coef / sum);
                dlogits(row, t) -= coef;
            }
        }
        backward(fw, dlogits, grads);
        return total;
    }

    // ---------------------------------------------------------- decoding

    /// Key/value cache for incremental decoding.
    struct DecodeState {
        std::vector<Matrix<T>> keys;
        std::vector<Matrix<T>> values;
        std::size_t length = 0;
    };

    DecodeState start_decoding() const
    {
        DecodeState s;
        const auto c = static_cast<Eigen::Index>(cfg_.context_len);
        const auto d = static_cast<Eigen::Index>(cfg_.embed_dim);
        for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
            s.keys.push_back(Matrix<T>::Zero(c, d));
            s.values.push_back(Matrix<T>::Zero(c, d));
        }
        return s;
    }

    /// Feeds one token and returns the logits for the next position.
    RowVector<T> decode_step(DecodeState& s, TokenId id) const
    {
        if (s.length >= cfg_.context_len) {
            throw Error("decode_step: context length exceeded");
        }
        if (id >= cfg_.vocab_size) {
            throw Error("decode_step: token id out of range");
        }
        const auto pos = static_cast<Eigen::Index>(s.length);
        const auto d = static_cast<Eigen::Index>(cfg_.embed_dim);
        const auto dh = static_cast<Eigen::Index>(cfg_.embed_dim / cfg_.n_heads);
        const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

        Matrix<T> x = params_[kTokEmb].value.row(static_cast<Eigen::Index>(id)) + params_[kPosEmb].value.row(pos);
        for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
            Matrix<T> h = layer_norm(x, layer_index(l, ln1_g), nullptr);
            Matrix<T> q = linear(layer_index(l, wq), h, nullptr, nullptr);
            s.keys[l].row(pos) = linear(layer_index(l, wk), h, nullptr, nullptr);
            s.values[l].row(pos) = linear(layer_index(l, wv), h, nullptr, nullptr);
            Matrix<T> ctx(1, d);
            for (std::size_t head = 0; head < cfg_.n_heads; ++head) {
                const auto off = static_cast<Eigen::Index>(head) * dh;
                RowVector<T> sc = (q.middleCols(off, dh) *
                                   s.keys[l].block(0, off, pos + 1, dh).transpose()) * scale;
                const T mx = sc.maxCoeff();
                sc = (sc.array() - mx).exp().matrix();
                sc /= sc.sum();
                ctx.middleCols(off, dh) = sc * s.values[l].block(0, off, pos + 1, dh);
            }
            x += linear(layer_index(l, wo), ctx, nullptr, nullptr);
            Matrix<T> h2 = layer_norm(x, layer_index(l, ln2_g), nullptr);
            Matrix<T> u = linear(layer_index(l, w1), h2, nullptr, nullptr);
            u.rowwise() += params_[layer_index(l, b1)].value.row(0);
            Matrix<T> act = u.unaryExpr([](T z) { return gelu(z); });
            x += linear(layer_index(l, w2), act, nullptr, nullptr);
            x.rowwise() += params_[layer_index(l, b2)].value.row(0);
        }
        Matrix<T> hf = layer_norm(x, lnf_g_index(), nullptr);
        ++s.length;
        return hf * params_[w_out_index()].value;
    }

private:
    struct LnCache {
        Matrix<T> xhat;
        Eigen::Matrix<T, Eigen::Dynamic, 1> rstd;
    };

    struct LinearCache {
        Matrix<T> adapter_in; // input after adapter dropout
        Matrix<T> low;        // adapter_in * A^T
        Matrix<T> keep;       // dropout mask scaled by 1/(1-p); empty when no dropout
    };

    struct LayerCache {
        Matrix<T> x_in;
        LnCache ln1;
        Matrix<T> h1;
        LinearCache cq, ck, cv, co, c1, c2;
        Matrix<T> q, k, v;
        std::vector<Matrix<T>> probs; // [segment * n_heads + head], lower-triangular
        Matrix<T> ctx;
        Matrix<T> x_mid;
        LnCache ln2;
        Matrix<T> h2;
        Matrix<T> u;
        Matrix<T> tanh_u;
        Matrix<T> act;
    };

    struct Segment {
        Eigen::Index offset;
        Eigen::Index length;
    };

    struct Forward {
        std::vector<TokenId> ids;
        std::vector<Segment> segments;
        std::vector<LayerCache> layers;
        Matrix<T> x_final;
        LnCache lnf;
        Matrix<T> hf;
        Matrix<T> logits;
    };

    struct AdapterSlot {
        std::size_t base;
        std::size_t a;
        std::size_t b;
    };

    static constexpr T kGeluK = static_cast<T>(0.7978845608028654); // sqrt(2/pi)
    static constexpr T kGeluC = static_cast<T>(0.044715);

    static T gelu_tanh(T z) { return std::tanh(kGeluK * (z + kGeluC * z * z * z)); }

    static T gelu(T z) { return T(0.5) * z * (T(1) + gelu_tanh(z)); }

    // Derivative given the cached tanh term.
    static T gelu_grad(T z, T t)
    {
        return T(0.5) * (T(1) + t) + T(0.5) * z * (T(1) - t * t) * kGeluK * (T(1) + T(3) * kGeluC * z * z);
    }

    std::vector<std::span<const TokenId>> batch_inputs(std::span<const TrainingExample> batch) const
    {
        std::vector<std::span<const TokenId>> out;
        out.reserve(batch.size());
        for (const auto& ex : batch) {
            const std::size_t n = ex.input.size();
            if (n == 0 || ex.target.size() != n || ex.weight.size() != n) {
                throw Error("training example: input, target and weight lengths must match and be non-zero");
            }
            for (std::size_t i = 0; i < n; ++i) {
                if (ex.target[i] >= cfg_.vocab_size) {
                    throw Error("token id " + std::to_string(ex.target[i]) + " >= vocab size " +
                                std::to_string(cfg_.vocab_size));
                }
            }
            out.emplace_back(ex.input);
        }
        return out;
    }

    static double row_nll(const Matrix<T>& logits, Eigen::Index i, TokenId t)
    {
        const auto row = logits.row(i);
        const double mx = static_cast<double>(row.maxCoeff());
        double sum = 0.0;
        for (Eigen::Index j = 0; j < row.size(); ++j) {
            sum += std::exp(static_cast<double>(row(j)) - mx);
        }
        return mx + std::log(sum) - static_cast<double>(row(static_cast<Eigen::Index>(t)));
    }

    Matrix<T> layer_norm(const Matrix<T>& x, std::size_t gain_index, LnCache* cache) const
    {
        constexpr double eps = 1e-5;
        const auto& g = params_[gain_index].value;
        const auto& b = params_[gain_index + 1].value;
        const Eigen::Index n = x.rows();
        const Eigen::Index d = x.cols();
        Matrix<T> xhat(n, d);
        Eigen::Matrix<T, Eigen::Dynamic, 1> rstd(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            const T mean = x.row(i).mean();
            const T var = (x.row(i).array() - mean).square().mean();
            rstd(i) = static_cast<T>(1.0 / std::sqrt(static_cast<double>(var) + eps));
            xhat.row(i) = (x.row(i).array() - mean) * rstd(i);
        }
        Matrix<T> y = (xhat.array().rowwise() * g.row(0).array()).rowwise() + b.row(0).array();
        if (cache != nullptr) {
            cache->xhat = std::move(xhat);
            cache->rstd = std::move(rstd);
        }
        return y;
    }

    Matrix<T> layer_norm_backward(const Matrix<T>& dy, const LnCache& c, std::size_t gain_index, Gradients<T>& grads) const
    {
        const auto& g = params_[gain_index].value;
        if (params_[gain_index].trainable) {
            grads[gain_index].row(0) += (dy.array() * c.xhat.array()).colwise().sum().matrix();
            grads[gain_index + 1].row(0) += dy.colwise().sum();
        }
        Matrix<T> dxhat = dy.array().rowwise() * g.row(0).array();
        Matrix<T> dx(dy.rows(), dy.cols());
        for (Eigen::Index i = 0; i < dy.rows(); ++i) {
            const T m1 = dxhat.row(i).mean();
            const T m2 = (dxhat.row(i).array() * c.xhat.row(i).array()).mean();
            dx.row(i) = ((dxhat.row(i).array() - m1 - c.xhat.row(i).array() * m2) * c.rstd(i)).matrix();
        }
        return dx;
    }

    Matrix<T> linear(std::size_t index, const Matrix<T>& x, LinearCache* cache, Rng* dropout_rng) const
    {
        Matrix<T> y;
        y.noalias() = x * params_[index].value;
        const int slot = adapter_of_[index];
        if (slot < 0) {
            return y;
        }
        const auto& ad = adapters_[static_cast<std::size_t>(slot)];
        const double p = adapter_spec_->dropout;
        Matrix<T> in;
        Matrix<T> keep;
        if (dropout_rng != nullptr && p > 0.0) {
            keep.resize(x.rows(), x.cols());
            const T kept = static_cast<T>(1.0 / (1.0 - p));
            for (Eigen::Index i = 0; i < keep.size(); ++i) {
                keep.data()[i] = dropout_rng->uniform01() < p ? T(0) : kept;
            }
            in = x.cwiseProduct(keep);
        } else {
            in = x;
        }
        Matrix<T> low;
        low.noalias() = in * params_[ad.a].value.transpose();
        y.noalias() += adapter_scale_ * (low * params_[ad.b].value.transpose());
        if (cache != nullptr) {
            cache->adapter_in = std::move(in);
            cache->low = std::move(low);
            cache->keep = std::move(keep);
        }
        return y;
    }

    Matrix<T> linear_backward(std::size_t index, const Matrix<T>& x, const LinearCache& c, const Matrix<T>& dy,
                              Gradients<T>& grads) const
    {
        if (params_[index].trainable) {
            grads[index].noalias() += x.transpose() * dy;
        }
        Matrix<T> dx;
        dx.noalias() = dy * params_[index].value.transpose();
        const int slot = adapter_of_[index];
        if (slot >= 0) {
            const auto& ad = adapters_[static_cast<std::size_t>(slot)];
            grads[ad.b].noalias() += adapter_scale_ * (dy.transpose() * c.low);
            Matrix<T> dlow = adapter_scale_ * (dy * params_[ad.b].value);
            grads[ad.a].noalias() += dlow.transpose() * c.adapter_in;
            Matrix<T> din = dlow * params_[ad.a].value;
            if (c.keep.size() > 0) {
                din = din.cwiseProduct(c.keep);
            }
            dx += din;
        }
        return dx;
    }

    static constexpr Eigen::Index kAttnBlock = 32;

    // Causal softmax attention for one segment and head, computed in row
    // blocks so only the lower triangle is touched.
    void attend(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v, Eigen::Index o, Eigen::Index n,
                Eigen::Index off, Eigen::Index dh, T scale, Matrix<T>& probs, Matrix<T>& ctx) const
    {
        probs.setZero(n, n);
        const auto Q = q.block(o, off, n, dh);
        const auto K = k.block(o, off, n, dh);
        const auto V = v.block(o, off, n, dh);
        for (Eigen::Index r0 = 0; r0 < n; r0 += kAttnBlock) {
            const Eigen::Index r1 = std::min(n, r0 + kAttnBlock);
            const Eigen::Index rows = r1 - r0;
            auto P = probs.block(r0, 0, rows, r1);
            P.noalias() = Q.middleRows(r0, rows) * K.topRows(r1).transpose();
            for (Eigen::Index ii = 0; ii < rows; ++ii) {
                const Eigen::Index width = r0 + ii + 1;
                auto row = P.row(ii).head(width);
                const T mx = row.maxCoeff();
                row = ((row.array() - mx) * scale).exp().matrix();
                row /= row.sum();
                P.row(ii).tail(r1 - width).setZero();
            }
            ctx.block(o + r0, off, rows, dh).noalias() = P * V.topRows(r1);
        }
    }

    void attend_backward(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v, const Matrix<T>& probs,
                         const Matrix<T>& dctx, Eigen::Index o, Eigen::Index n, Eigen::Index off, Eigen::Index dh,
                         T scale, Matrix<T>& dq, Matrix<T>& dk, Matrix<T>& dv) const
    {
        const auto Q = q.block(o, off, n, dh);
        const auto K = k.block(o, off, n, dh);
        const auto V = v.block(o, off, n, dh);
        dk.block(o, off, n, dh).setZero();
        dv.block(o, off, n, dh).setZero();
        for (Eigen::Index r0 = 0; r0 < n; r0 += kAttnBlock) {
            const Eigen::Index r1 = std::min(n, r0 + kAttnBlock);
            const Eigen::Index rows = r1 - r0;
            const auto P = probs.block(r0, 0, rows, r1);
            const auto dC = dctx.block(o + r0, off, rows, dh);
            dv.block(o, off, r1, dh).noalias() += P.transpose() * dC;
            Matrix<T> dP;
            dP.noalias() = dC * V.topRows(r1).transpose();
            const Eigen::Matrix<T, Eigen::Dynamic, 1> rowdot = (dP.array() * P.array()).rowwise().sum();
            Matrix<T> dS = (P.array() * (dP.array().colwise() - rowdot.array())).matrix() * scale;
            dq.block(o + r0, off, rows, dh).noalias() = dS * K.topRows(r1);
            dk.block(o, off, r1, dh).noalias() += dS.transpose() * Q.middleRows(r0, rows);
        }
    }

    void run_forward(const std::vector<std::span<const TokenId>>& seqs, Forward& fw, Rng* dropout_rng) const
    {
        const auto d = static_cast<Eigen::Index>(cfg_.embed_dim);
        const auto dh = static_cast<Eigen::Index>(cfg_.embed_dim / cfg_.n_heads);
        const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

        fw.ids.clear();
        fw.segments.clear();
        for (const auto& ids : seqs) {
            if (ids.empty() || ids.size() > cfg_.context_len) {
                throw Error("forward: sequence length must be in [1, context_len]");
            }
            fw.segments.push_back({static_cast<Eigen::Index>(fw.ids.size()), static_cast<Eigen::Index>(ids.size())});
            fw.ids.insert(fw.ids.end(), ids.begin(), ids.end());
        }
        const auto total = static_cast<Eigen::Index>(fw.ids.size());
        Matrix<T> x(total, d);
        for (const auto& seg : fw.segments) {
            for (Eigen::Index i = 0; i < seg.length; ++i) {
                const auto id = fw.ids[static_cast<std::size_t>(seg.offset + i)];
                if (id >= cfg_.vocab_size) {
                    throw Error("token id " + std::to_string(id) + " >= vocab size");
                }
                x.row(seg.offset + i) =
                    params_[kTokEmb].value.row(static_cast<Eigen::Index>(id)) + params_[kPosEmb].value.row(i);
            }
        }

        fw.layers.resize(cfg_.n_layers);
        for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
            auto& lc = fw.layers[l];
            lc.x_in = x;
            lc.h1 = layer_norm(x, layer_index(l, ln1_g), &lc.ln1);
            lc.q = linear(layer_index(l, wq), lc.h1, &lc.cq, dropout_rng);
            lc.k = linear(layer_index(l, wk), lc.h1, &lc.ck, dropout_rng);
            lc.v = linear(layer_index(l, wv), lc.h1, &lc.cv, dropout_rng);
            lc.ctx.resize(total, d);
            lc.probs.resize(fw.segments.size() * cfg_.n_heads);
            for (std::size_t s = 0; s < fw.segments.size(); ++s) {
                for (std::size_t head = 0; head < cfg_.n_heads; ++head) {
                    attend(lc.q, lc.k, lc.v, fw.segments[s].offset, fw.segments[s].length,
                           static_cast<Eigen::Index>(head) * dh, dh, scale, lc.probs[s * cfg_.n_heads + head], lc.ctx);
                }
            }
            x += linear(layer_index(l, wo), lc.ctx, &lc.co, dropout_rng);
            lc.x_mid = x;
            lc.h2 = layer_norm(x, layer_index(l, ln2_g), &lc.ln2);
            lc.u = linear(layer_index(l, w1), lc.h2, &lc.c1, dropout_rng);
            lc.u.rowwise() += params_[layer_index(l, b1)].value.row(0);
            lc.tanh_u = lc.u.unaryExpr([](T z) { return gelu_tanh(z); });
            lc.act = (T(0.5) * lc.u.array() * (T(1) + lc.tanh_u.array())).matrix();
            x += linear(layer_index(l, w2), lc.act, &lc.c2, dropout_rng);
            x.rowwise() += params_[layer_index(l, b2)].value.row(0);
        }
        fw.x_final = x;
        fw.hf = layer_norm(x, lnf_g_index(), &fw.lnf);
        fw.logits.noalias() = fw.hf * params_[w_out_index()].value;
    }

    void backward(const Forward& fw, const Matrix<T>& dlogits, Gradients<T>& grads) const
    {
        const auto total = static_cast<Eigen::Index>(fw.ids.size());
        const auto dh = static_cast<Eigen::Index>(cfg_.embed_dim / cfg_.n_heads);
        const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

        const std::size_t out = w_out_index();
        if (params_[out].trainable) {
            grads[out].noalias() += fw.hf.transpose() * dlogits;
        }
        Matrix<T> dhf;
        dhf.noalias() = dlogits * params_[out].value.transpose();
        Matrix<T> dx = layer_norm_backward(dhf, fw.lnf, lnf_g_index(), grads);

        for (std::size_t l = cfg_.n_layers; l-- > 0;) {
            const auto& lc = fw.layers[l];
            // feed-forward block
            if (params_[layer_index(l, b2)].trainable) {
                grads[layer_index(l, b2)].row(0) += dx.colwise().sum();
            }
            Matrix<T> dact = linear_backward(layer_index(l, w2), lc.act, lc.c2, dx, grads);
            Matrix<T> du = dact.cwiseProduct(lc.u.binaryExpr(lc.tanh_u, [](T z, T t) { return gelu_grad(z, t); }));
            if (params_[layer_index(l, b1)].trainable) {
                grads[layer_index(l, b1)].row(0) += du.colwise().sum();
            }
            Matrix<T> dh2 = linear_backward(layer_index(l, w1), lc.h2, lc.c1, du, grads);
            dx += layer_norm_backward(dh2, lc.ln2, layer_index(l, ln2_g), grads);

            // attention block
            Matrix<T> dctx = linear_backward(layer_index(l, wo), lc.ctx, lc.co, dx, grads);
            Matrix<T> dq(total, lc.q.cols());
            Matrix<T> dk(total, lc.k.cols());
            Matrix<T> dv(total, lc.v.cols());
            for (std::size_t s = 0; s < fw.segments.size(); ++s) {
                for (std::size_t head = 0; head < cfg_.n_heads; ++head) {
                    attend_backward(lc.q, lc.k, lc.v, lc.probs[s * cfg_.n_heads + head], dctx, fw.segments[s].offset,
                                    fw.segments[s].length, static_cast<Eigen::Index>(head) * dh, dh, scale, dq, dk, dv);
                }
            }
            Matrix<T> dh1 = linear_backward(layer_index(l, wq), lc.h1, lc.cq, dq, grads);
            dh1 += linear_backward(layer_index(l, wk), lc.h1, lc.ck, dk, grads);
            dh1 += linear_backward(layer_index(l, wv), lc.h1, lc.cv, dv, grads);
            dx += layer_norm_backward(dh1, lc.ln1, layer_index(l, ln1_g), grads);
        }

        if (params_[kTokEmb].trainable) {
            for (Eigen::Index i = 0; i < total; ++i) {
                grads[kTokEmb].row(static_cast<Eigen::Index>(fw.ids[static_cast<std::size_t>(i)])) += dx.row(i);
            }
        }
        if (params_[kPosEmb].trainable) {
            for (const auto& seg : fw.segments) {
                grads[kPosEmb].topRows(seg.length) += dx.middleRows(seg.offset, seg.length);
            }
        }
    }

    ModelConfig cfg_;
    std::vector<Param<T>> params_;
    std::size_t base_count_ = 0;
    std::vector<int> adapter_of_;
    std::vector<AdapterSlot> adapters_;
    std::optional<AdapterSpec> adapter_spec_;
    T adapter_scale_ = T(0);
};

/// Converts a model to another scalar type (used to run float-trained
/// weights through double-precision checks).
template <class To, class From>
Transformer<To> cast_model(const Transformer<From>& src)
{
    Transformer<To> dst(src.config());
    if (src.adapter_spec()) {
        dst.apply_adapters(*src.adapter_spec(), 0);
    }
    for (std::size_t i = 0; i < src.params().size(); ++i) {
        dst.params()[i].value = src.params()[i].value.template cast<To>();
    }
    return dst;
}

} // namespace paracpt
