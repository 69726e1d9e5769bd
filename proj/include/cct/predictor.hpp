#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cct/core.hpp"
#include "cct/random.hpp"
#include "cct/systems.hpp"

namespace cct {

enum class PredictorFamily { zero, linear_features, mlp };

inline std::string to_string(PredictorFamily f) {
    switch (f) {
        case PredictorFamily::zero: return "zero";
        case PredictorFamily::linear_features: return "linear_features";
        case PredictorFamily::mlp: return "mlp";
    }
    return "unknown";
}

inline PredictorFamily predictor_family_from_string(const std::string& s) {
    if (s == "zero") return PredictorFamily::zero;
    if (s == "linear_features" || s == "linear") return PredictorFamily::linear_features;
    if (s == "mlp") return PredictorFamily::mlp;
    throw ConfigError("unknown predictor family '" + s + "'");
}

/// All monomials of total degree <= degree in `vars` variables, constant term first.
inline std::vector<std::vector<int>> monomial_exponents(int vars, int degree) {
    std::vector<std::vector<int>> out;
    std::vector<int> cur(static_cast<std::size_t>(vars), 0);
    for (int d = 0; d <= degree; ++d) {
        // Enumerate compositions of d into `vars` parts in lexicographic order.
        auto rec = [&](auto&& self, int pos, int left) -> void {
            if (pos == vars - 1) {
                cur[static_cast<std::size_t>(pos)] = left;
                out.push_back(cur);
                return;
            }
            for (int e = left; e >= 0; --e) {
                cur[static_cast<std::size_t>(pos)] = e;
                self(self, pos + 1, left - e);
            }
        };
        if (vars > 0) rec(rec, 0, d);
    }
    return out;
}

/// Learned model zeta_hat(x, u; theta) of the plant uncertainty.
class UncertaintyPredictor {
public:
    UncertaintyPredictor() = default;

    static UncertaintyPredictor zero(Eigen::Index n, Eigen::Index m) {
        UncertaintyPredictor p;
        p.family_ = PredictorFamily::zero;
        p.n_ = n;
        p.m_ = m;
        return p;
    }

    /// Linear-in-parameters model on polynomial features of (x, u); theta is row-major (n x features).
    static UncertaintyPredictor linear_features(Eigen::Index n, Eigen::Index m, int degree, Vector theta = {}) {
        UncertaintyPredictor p;
        p.family_ = PredictorFamily::linear_features;
        p.n_ = n;
        p.m_ = m;
        p.degree_ = degree;
        p.exponents_ = monomial_exponents(static_cast<int>(n + m), degree);
        const auto count = static_cast<Eigen::Index>(p.exponents_.size()) * n;
        p.theta_ = theta.size() == 0 ? Vector::Zero(count) : std::move(theta);
        if (p.theta_.size() != count) throw DimensionMismatch("linear_features: theta has the wrong length");
        return p;
    }

    /// Fully connected tanh network with a linear output layer. Inputs are standardized with
    /// (input_shift, input_scale) and outputs multiplied by output_scale.
    static UncertaintyPredictor mlp(Eigen::Index n, Eigen::Index m, std::vector<int> hidden, Vector theta = {}) {
        UncertaintyPredictor p;
        p.family_ = PredictorFamily::mlp;
        p.n_ = n;
        p.m_ = m;
        p.layers_.push_back(static_cast<int>(n + m));
        for (int h : hidden) p.layers_.push_back(h);
        p.layers_.push_back(static_cast<int>(n));
        Eigen::Index count = 0;
        for (std::size_t l = 0; l + 1 < p.layers_.size(); ++l) count += (p.layers_[l] + 1) * p.layers_[l + 1];
        p.theta_ = theta.size() == 0 ? Vector::Zero(count) : std::move(theta);
        if (p.theta_.size() != count) throw DimensionMismatch("mlp: theta has the wrong length");
        p.input_shift_ = Vector::Zero(n + m);
        p.input_scale_ = Vector::Ones(n + m);
        p.output_scale_ = Vector::Ones(n);
        return p;
    }

    PredictorFamily family() const { return family_; }
    Eigen::Index state_dim() const { return n_; }
    Eigen::Index input_dim() const { return m_; }
    int degree() const { return degree_; }
    const std::vector<std::vector<int>>& exponents() const { return exponents_; }
    const std::vector<int>& layers() const { return layers_; }
    const Vector& theta() const { return theta_; }
    Vector& theta() { return theta_; }
    const Vector& input_shift() const { return input_shift_; }
    const Vector& input_scale() const { return input_scale_; }
    const Vector& output_scale() const { return output_scale_; }

    void set_normalization(Vector shift, Vector scale, Vector out_scale) {
        input_shift_ = std::move(shift);
        input_scale_ = std::move(scale);
        output_scale_ = std::move(out_scale);
    }

    /// Free-form metadata carried into serialization (seed, final loss, ...).
    nlohmann::json metadata = nlohmann::json::object();

    Vector features(const Vector& x, const Vector& u) const {
        Vector z(n_ + m_);
        z << x, u;
        Vector phi(static_cast<Eigen::Index>(exponents_.size()));
        for (std::size_t k = 0; k < exponents_.size(); ++k) {
            double v = 1.0;
            for (std::size_t i = 0; i < exponents_[k].size(); ++i)
                for (int e = 0; e < exponents_[k][i]; ++e) v *= z[static_cast<Eigen::Index>(i)];
            phi[static_cast<Eigen::Index>(k)] = v;
        }
        return phi;
    }

    Vector predict(const Vector& x, const Vector& u) const {
        if (x.size() != n_ || u.size() != m_)
            throw DimensionMismatch("predict: expected (x, u) of sizes (" + std::to_string(n_) + ", " +
                                    std::to_string(m_) + ")");
        switch (family_) {
            case PredictorFamily::zero: return Vector::Zero(n_);
            case PredictorFamily::linear_features: {
                const Vector phi = features(x, u);
                const auto f = phi.size();
                return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
                           theta_.data(), n_, f) *
                       phi;
            }
            case PredictorFamily::mlp: {
                Vector z(n_ + m_);
                z << x, u;
                return mlp_forward(z);
            }
        }
        return Vector::Zero(n_);
    }

    Vector operator()(const Vector& x, const Vector& u) const { return predict(x, u); }

    /// Network output for a raw (x, u) stacked input.
    Vector mlp_forward(const Vector& z) const {
        Vector a = (z - input_shift_).cwiseQuotient(input_scale_);
        Eigen::Index off = 0;
        for (std::size_t l = 0; l + 1 < layers_.size(); ++l) {
            const int in = layers_[l], out = layers_[l + 1];
            Eigen::Map<const Matrix> w(theta_.data() + off, out, in);
            off += static_cast<Eigen::Index>(in) * out;
            Eigen::Map<const Vector> b(theta_.data() + off, out);
            off += out;
            Vector h = w * a + b;
            if (l + 2 < layers_.size()) h = h.array().tanh();
            a = std::move(h);
        }
        return a.cwiseProduct(output_scale_);
    }

    /// d zeta_hat / d(x, u) as an n x (n + m) matrix.
    Matrix jacobian(const Vector& x, const Vector& u) const {
        if (x.size() != n_ || u.size() != m_) throw DimensionMismatch("jacobian: input dimensions");
        Matrix j = Matrix::Zero(n_, n_ + m_);
        if (family_ == PredictorFamily::zero) return j;
        Vector z(n_ + m_);
        z << x, u;
        if (family_ == PredictorFamily::linear_features) {
            const auto nf = static_cast<Eigen::Index>(exponents_.size());
            Matrix dphi = Matrix::Zero(nf, n_ + m_);
            for (Eigen::Index k = 0; k < nf; ++k) {
                const auto& ex = exponents_[static_cast<std::size_t>(k)];
                for (Eigen::Index v = 0; v < n_ + m_; ++v) {
                    const int ev = ex[static_cast<std::size_t>(v)];
                    if (ev == 0) continue;
                    double d = ev;
                    for (Eigen::Index i = 0; i < n_ + m_; ++i) {
                        const int e = ex[static_cast<std::size_t>(i)] - (i == v ? 1 : 0);
                        for (int p = 0; p < e; ++p) d *= z[i];
                    }
                    dphi(k, v) = d;
                }
            }
            return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
                       theta_.data(), n_, nf) *
                   dphi;
        }
        Vector a = (z - input_shift_).cwiseQuotient(input_scale_);
        Matrix t = input_scale_.cwiseInverse().asDiagonal();
        Eigen::Index off = 0;
        for (std::size_t l = 0; l + 1 < layers_.size(); ++l) {
            const int in = layers_[l], out = layers_[l + 1];
            Eigen::Map<const Matrix> w(theta_.data() + off, out, in);
            off += static_cast<Eigen::Index>(in) * out;
            Eigen::Map<const Vector> b(theta_.data() + off, out);
            off += out;
            Vector h = w * a + b;
            t = w * t;
            if (l + 2 < layers_.size()) {
                h = h.array().tanh();
                t = (1.0 - h.array().square()).matrix().asDiagonal() * t;
            }
            a = std::move(h);
        }
        return output_scale_.asDiagonal() * t;
    }

    /// Short content hash used to tie calibration results to the predictor that produced them.
    std::string id() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        auto feed = [&](const void* p, std::size_t len) {
            const auto* c = static_cast<const unsigned char*>(p);
            for (std::size_t i = 0; i < len; ++i) {
                h ^= c[i];
                h *= 0x100000001b3ULL;
            }
        };
        const int fam = static_cast<int>(family_);
        feed(&fam, sizeof fam);
        feed(theta_.data(), static_cast<std::size_t>(theta_.size()) * sizeof(double));
        feed(input_shift_.data(), static_cast<std::size_t>(input_shift_.size()) * sizeof(double));
        feed(input_scale_.data(), static_cast<std::size_t>(input_scale_.size()) * sizeof(double));
        feed(output_scale_.data(), static_cast<std::size_t>(output_scale_.size()) * sizeof(double));
        std::ostringstream os;
        os << to_string(family_) << '-' << std::hex << std::setw(16) << std::setfill('0') << h;
        return os.str();
    }

private:
    PredictorFamily family_ = PredictorFamily::zero;
    Eigen::Index n_ = 0, m_ = 0;
    int degree_ = 0;
    std::vector<std::vector<int>> exponents_;
    std::vector<int> layers_;
    Vector theta_;
    Vector input_shift_, input_scale_, output_scale_;
};

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

enum class SplitTag { train, cal };

inline std::string to_string(SplitTag s) { return s == SplitTag::train ? "train" : "cal"; }

struct DatasetRecord {
    std::size_t id = 0;  // index of the reference sample the record was generated from
    TrajectoryRecord trajectory;
};

struct TrainingDataset {
    SplitTag split = SplitTag::train;
    std::vector<DatasetRecord> records;

    void validate() const {
        for (const auto& r : records) {
            r.trajectory.validate();
            if (r.trajectory.uncertainties.size() != r.trajectory.size())
                throw Error("dataset record " + std::to_string(r.id) + " has incomplete uncertainty samples");
        }
    }
};

/// mean over records of sup_t |zeta_t - zeta_hat(x_t, u_t)|.
inline double sup_error_loss(const UncertaintyPredictor& p, const TrainingDataset& data) {
    if (data.records.empty()) return 0.0;
    double total = 0.0;
    for (const auto& r : data.records) {
        const auto& tr = r.trajectory;
        double sup = 0.0;
        for (std::size_t k = 0; k < tr.size(); ++k)
            sup = std::max(sup, (tr.uncertainties[k] - p.predict(tr.states[k], tr.inputs[k])).norm());
        total += sup;
    }
    return total / static_cast<double>(data.records.size());
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainingConfig {
    PredictorFamily family = PredictorFamily::mlp;
    int degree = 2;                      // linear_features
    double ridge = 1e-10;                // linear_features least squares
    bool linear_surrogate = false;       // train linear_features on the surrogate instead of LS
    std::vector<int> hidden = {32, 32};  // mlp
    int epochs = 300;
    double learning_rate = 0.05;
    double temperature = 20.0;           // softmax surrogate of the sup over time
    std::size_t stride = 1;              // use every stride-th time sample
    std::uint64_t seed = 1;
};

struct TrainingResult {
    UncertaintyPredictor predictor;
    std::vector<double> surrogate_history;  // one entry per accepted epoch
    double final_loss = 0.0;                // sup-error loss on the training set
};

namespace detail {

struct Samples {
    std::vector<std::vector<Vector>> x, u, zeta;  // per record
};

inline Samples collect(const TrainingDataset& data, std::size_t stride) {
    Samples s;
    stride = std::max<std::size_t>(stride, 1);
    for (const auto& r : data.records) {
        const auto& tr = r.trajectory;
        std::vector<Vector> xs, us, zs;
        for (std::size_t k = 0; k < tr.size(); k += stride) {
            xs.push_back(tr.states[k]);
            us.push_back(tr.inputs[k]);
            zs.push_back(tr.uncertainties[k]);
        }
        s.x.push_back(std::move(xs));
        s.u.push_back(std::move(us));
        s.zeta.push_back(std::move(zs));
    }
    return s;
}

// Softmax-weighted aggregate of per-timestep errors for every record, and d loss / d prediction.
// Returns the mean surrogate over records.
inline double surrogate(const Samples& s, const std::vector<std::vector<Vector>>& pred, double tau,
                        std::vector<std::vector<Vector>>* dpred) {
    double total = 0.0;
    const auto nrec = static_cast<double>(s.x.size());
    if (dpred) dpred->assign(s.x.size(), {});
    for (std::size_t r = 0; r < s.x.size(); ++r) {
        const std::size_t t = s.x[r].size();
        std::vector<double> e(t), w(t);
        std::vector<Vector> diff(t);
        double emax = 0.0;
        for (std::size_t k = 0; k < t; ++k) {
            diff[k] = s.zeta[r][k] - pred[r][k];
            e[k] = std::sqrt(diff[k].squaredNorm() + 1e-16);
            emax = std::max(emax, e[k]);
        }
        double z = 0.0;
        for (std::size_t k = 0; k < t; ++k) z += (w[k] = std::exp(tau * (e[k] - emax)));
        double agg = 0.0;
        for (std::size_t k = 0; k < t; ++k) agg += (w[k] /= z) * e[k];
        total += agg;
        if (dpred) {
            auto& d = (*dpred)[r];
            d.resize(t);
            for (std::size_t k = 0; k < t; ++k) {
                const double de = w[k] * (1.0 + tau * (e[k] - agg)) / nrec;
                d[k] = -de * diff[k] / e[k];
            }
        }
    }
    return total / nrec;
}

inline Vector mlp_backprop(const UncertaintyPredictor& p, const Samples& s,
                           const std::vector<std::vector<Vector>>& dpred) {
    const auto& layers = p.layers();
    const Vector& theta = p.theta();
    Vector grad = Vector::Zero(theta.size());
    std::vector<Eigen::Index> woff, boff;
    Eigen::Index off = 0;
    for (std::size_t l = 0; l + 1 < layers.size(); ++l) {
        woff.push_back(off);
        off += static_cast<Eigen::Index>(layers[l]) * layers[l + 1];
        boff.push_back(off);
        off += layers[l + 1];
    }
    const std::size_t nl = layers.size() - 1;
    std::vector<Vector> acts(nl + 1);
    for (std::size_t r = 0; r < s.x.size(); ++r) {
        for (std::size_t k = 0; k < s.x[r].size(); ++k) {
            Vector z(p.state_dim() + p.input_dim());
            z << s.x[r][k], s.u[r][k];
            acts[0] = (z - p.input_shift()).cwiseQuotient(p.input_scale());
            for (std::size_t l = 0; l < nl; ++l) {
                Eigen::Map<const Matrix> w(theta.data() + woff[l], layers[l + 1], layers[l]);
                Eigen::Map<const Vector> b(theta.data() + boff[l], layers[l + 1]);
                Vector h = w * acts[l] + b;
                if (l + 1 < nl) h = h.array().tanh();
                acts[l + 1] = std::move(h);
            }
            Vector delta = dpred[r][k].cwiseProduct(p.output_scale());
            for (std::size_t l = nl; l-- > 0;) {
                Eigen::Map<Matrix> gw(grad.data() + woff[l], layers[l + 1], layers[l]);
                Eigen::Map<Vector> gb(grad.data() + boff[l], layers[l + 1]);
                gw.noalias() += delta * acts[l].transpose();
                gb += delta;
                if (l == 0) break;
                Eigen::Map<const Matrix> w(theta.data() + woff[l], layers[l + 1], layers[l]);
                Vector back = w.transpose() * delta;
                delta = back.cwiseProduct((1.0 - acts[l].array().square()).matrix());
            }
        }
    }
    return grad;
}

inline std::vector<std::vector<Vector>> predict_all(const UncertaintyPredictor& p, const Samples& s) {
    std::vector<std::vector<Vector>> out(s.x.size());
    for (std::size_t r = 0; r < s.x.size(); ++r) {
        out[r].reserve(s.x[r].size());
        for (std::size_t k = 0; k < s.x[r].size(); ++k) out[r].push_back(p.predict(s.x[r][k], s.u[r][k]));
    }
    return out;
}

inline Vector linear_backprop(const UncertaintyPredictor& p, const Samples& s,
                              const std::vector<std::vector<Vector>>& dpred) {
    const auto nf = static_cast<Eigen::Index>(p.exponents().size());
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> g =
        Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>::Zero(p.state_dim(), nf);
    for (std::size_t r = 0; r < s.x.size(); ++r)
        for (std::size_t k = 0; k < s.x[r].size(); ++k)
            g.noalias() += dpred[r][k] * p.features(s.x[r][k], s.u[r][k]).transpose();
    return Eigen::Map<const Vector>(g.data(), g.size());
}

}  // namespace detail

/// Fits zeta_hat on an open-loop training split. The sup-over-time loss is trained through a
/// softmax-weighted surrogate with step halving on any increase, so the recorded surrogate
/// history never goes up; linear features default to per-timestep least squares.
inline TrainingResult train(const TrainingDataset& data, const TrainingConfig& cfg) {
    if (data.split != SplitTag::train) throw Error("train: dataset split must be 'train'");
    if (data.records.empty()) throw Error("train: empty dataset");
    data.validate();
    const Eigen::Index n = data.records.front().trajectory.state_dim();
    const Eigen::Index m = data.records.front().trajectory.input_dim();
    const detail::Samples s = detail::collect(data, cfg.stride);

    TrainingResult res;
    auto finish = [&](UncertaintyPredictor p) {
        res.final_loss = sup_error_loss(p, data);
        if (!std::isfinite(res.final_loss)) throw NonFiniteLoss("train: final loss is not finite");
        p.metadata["seed"] = cfg.seed;
        p.metadata["final_loss"] = res.final_loss;
        p.metadata["epochs"] = res.surrogate_history.size();
        p.metadata["temperature"] = cfg.temperature;
        res.predictor = std::move(p);
        return res;
    };

    if (cfg.family == PredictorFamily::zero) return finish(UncertaintyPredictor::zero(n, m));

    UncertaintyPredictor p;
    if (cfg.family == PredictorFamily::linear_features) {
        p = UncertaintyPredictor::linear_features(n, m, cfg.degree);
        if (!cfg.linear_surrogate) {
            const auto nf = static_cast<Eigen::Index>(p.exponents().size());
            Matrix ata = Matrix::Zero(nf, nf), atb = Matrix::Zero(nf, n);
            for (std::size_t r = 0; r < s.x.size(); ++r)
                for (std::size_t k = 0; k < s.x[r].size(); ++k) {
                    const Vector phi = p.features(s.x[r][k], s.u[r][k]);
                    ata.noalias() += phi * phi.transpose();
                    atb.noalias() += phi * s.zeta[r][k].transpose();
                }
            ata.diagonal().array() += cfg.ridge * std::max(1.0, ata.diagonal().maxCoeff());
            const Matrix coef = ata.ldlt().solve(atb);  // nf x n
            Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> th = coef.transpose();
            p.theta() = Eigen::Map<const Vector>(th.data(), th.size());
            if (!p.theta().allFinite()) throw NonFiniteLoss("train: least-squares solution is not finite");
            return finish(std::move(p));
        }
    } else {
        p = UncertaintyPredictor::mlp(n, m, cfg.hidden);
        // Standardize inputs and scale outputs from the training data.
        Vector mean = Vector::Zero(n + m), sq = Vector::Zero(n + m), zs = Vector::Zero(n);
        double count = 0.0;
        for (std::size_t r = 0; r < s.x.size(); ++r)
            for (std::size_t k = 0; k < s.x[r].size(); ++k) {
                Vector z(n + m);
                z << s.x[r][k], s.u[r][k];
                mean += z;
                sq += z.cwiseProduct(z);
                zs += s.zeta[r][k].cwiseProduct(s.zeta[r][k]);
                count += 1.0;
            }
        mean /= count;
        Vector stdev = (sq / count - mean.cwiseProduct(mean)).cwiseMax(0.0).cwiseSqrt();
        for (Eigen::Index i = 0; i < stdev.size(); ++i)
            if (stdev[i] < 1e-12) stdev[i] = 1.0;
        Vector out = (zs / count).cwiseSqrt();
        for (Eigen::Index i = 0; i < out.size(); ++i)
            if (out[i] < 1e-12) out[i] = 1.0;
        p.set_normalization(mean, stdev, out);
        CounterRng rng = CounterRng::stream(cfg.seed, "mlp-init");
        const auto& layers = p.layers();
        Eigen::Index off = 0;
        for (std::size_t l = 0; l + 1 < layers.size(); ++l) {
            const double sd = std::sqrt(2.0 / layers[l]);
            for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(layers[l]) * layers[l + 1]; ++i)
                p.theta()[off + i] = sd * rng.normal();
            off += static_cast<Eigen::Index>(layers[l]) * layers[l + 1] + layers[l + 1];
        }
    }

    auto loss_grad = [&](const UncertaintyPredictor& q, bool want_grad, Vector* grad) {
        const auto pred = detail::predict_all(q, s);
        std::vector<std::vector<Vector>> dpred;
        const double l = detail::surrogate(s, pred, cfg.temperature, want_grad ? &dpred : nullptr);
        if (want_grad)
            *grad = q.family() == PredictorFamily::mlp ? detail::mlp_backprop(q, s, dpred)
                                                       : detail::linear_backprop(q, s, dpred);
        return l;
    };

    Vector grad;
    double loss = loss_grad(p, true, &grad);
    if (!std::isfinite(loss)) throw NonFiniteLoss("train: initial surrogate loss is not finite");
    res.surrogate_history.push_back(loss);
    double step = cfg.learning_rate;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        bool accepted = false;
        for (int tries = 0; tries < 30; ++tries) {
            UncertaintyPredictor cand = p;
            cand.theta() -= step * grad;
            const double l = loss_grad(cand, false, nullptr);
            if (!std::isfinite(l) && tries == 29)
                throw NonFiniteLoss("train: surrogate loss became non-finite at epoch " + std::to_string(epoch));
            if (std::isfinite(l) && l <= loss) {
                p = std::move(cand);
                loss = l;
                accepted = true;
                step *= 1.2;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) break;
        res.surrogate_history.push_back(loss);
        loss_grad(p, true, &grad);
    }
    return finish(std::move(p));
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const UncertaintyPredictor& p) {
    nlohmann::json j;
    j["family"] = to_string(p.family());
    j["id"] = p.id();
    j["state_dim"] = p.state_dim();
    j["input_dim"] = p.input_dim();
    j["theta"] = to_std(p.theta());
    nlohmann::json feat;
    if (p.family() == PredictorFamily::linear_features) {
        feat["degree"] = p.degree();
        feat["terms"] = p.exponents();
    } else if (p.family() == PredictorFamily::mlp) {
        feat["layers"] = p.layers();
        feat["activation"] = "tanh";
        feat["input_shift"] = to_std(p.input_shift());
        feat["input_scale"] = to_std(p.input_scale());
        feat["output_scale"] = to_std(p.output_scale());
    }
    j["feature_spec"] = feat;
    j["training"] = p.metadata;
    return j;
}

inline UncertaintyPredictor predictor_from_json(const nlohmann::json& j) {
    const auto fam = predictor_family_from_string(j.at("family").get<std::string>());
    const auto n = j.at("state_dim").get<Eigen::Index>();
    const auto m = j.at("input_dim").get<Eigen::Index>();
    const Vector theta = from_std(j.at("theta").get<std::vector<double>>());
    UncertaintyPredictor p;
    const auto& feat = j.at("feature_spec");
    switch (fam) {
        case PredictorFamily::zero: p = UncertaintyPredictor::zero(n, m); break;
        case PredictorFamily::linear_features:
            p = UncertaintyPredictor::linear_features(n, m, feat.at("degree").get<int>(), theta);
            break;
        case PredictorFamily::mlp: {
            auto layers = feat.at("layers").get<std::vector<int>>();
            std::vector<int> hidden(layers.begin() + 1, layers.end() - 1);
            p = UncertaintyPredictor::mlp(n, m, hidden, theta);
            p.set_normalization(from_std(feat.at("input_shift").get<std::vector<double>>()),
                                from_std(feat.at("input_scale").get<std::vector<double>>()),
                                from_std(feat.at("output_scale").get<std::vector<double>>()));
            break;
        }
    }
    if (j.contains("training")) p.metadata = j.at("training");
    return p;
}

}  // namespace cct
