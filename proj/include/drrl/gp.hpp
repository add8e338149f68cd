#pragma once

#include "drrl/common.hpp"
#include "drrl/kernels.hpp"

#include <Eigen/Cholesky>

#include <functional>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace drrl {

// ---------------------------------------------------------------------------
// Transition data
// ---------------------------------------------------------------------------

struct Transition {
    Vector state;
    Vector action;
    Vector next_state;
};

enum class DataSource { Simulator, File };

/// Ordered (s, a, s') triples. Position in `entries` is the sampling iteration.
struct TransitionDataset {
    std::size_t state_dim = 0;
    std::size_t action_dim = 0;
    std::size_t output_dim = 0;
    std::vector<Transition> entries;
    std::uint64_t rng_seed = 0;
    DataSource source = DataSource::Simulator;

    TransitionDataset() = default;
    TransitionDataset(std::size_t ds, std::size_t da, std::size_t d) : state_dim(ds), action_dim(da), output_dim(d) {}

    std::size_t size() const { return entries.size(); }
    bool empty() const { return entries.empty(); }

    void add(Vector s, Vector a, Vector sp) {
        if (static_cast<std::size_t>(s.size()) != state_dim ||
            static_cast<std::size_t>(a.size()) != action_dim ||
            static_cast<std::size_t>(sp.size()) != output_dim)
            throw DimensionError("TransitionDataset::add: dimension mismatch");
        if (!sp.allFinite()) throw NumericalError("TransitionDataset::add: non-finite next state");
        entries.push_back({std::move(s), std::move(a), std::move(sp)});
    }
};

/// CSV with header s_0..,a_0..,sp_0.., 17 significant digits per value.
inline void write_dataset_csv(std::ostream& os, const TransitionDataset& data) {
    std::vector<std::string> header;
    for (std::size_t i = 0; i < data.state_dim; ++i) header.push_back("s_" + std::to_string(i));
    for (std::size_t i = 0; i < data.action_dim; ++i) header.push_back("a_" + std::to_string(i));
    for (std::size_t i = 0; i < data.output_dim; ++i) header.push_back("sp_" + std::to_string(i));
    for (std::size_t i = 0; i < header.size(); ++i) os << (i ? "," : "") << header[i];
    os << "\n";
    for (const auto& t : data.entries) {
        bool first = true;
        auto emit = [&](const Vector& v) {
            for (Eigen::Index i = 0; i < v.size(); ++i) {
                os << (first ? "" : ",") << format_double(v[i]);
                first = false;
            }
        };
        emit(t.state);
        emit(t.action);
        emit(t.next_state);
        os << "\n";
    }
}

inline TransitionDataset read_dataset_csv(std::istream& is) {
    std::string line;
    if (!std::getline(is, line)) throw ConfigError("dataset csv: missing header");
    const auto header = split_csv_line(line);
    TransitionDataset data;
    data.source = DataSource::File;
    std::size_t expect = 0;
    for (const auto& h : header) {
        auto check = [&](const std::string& prefix, std::size_t& counter) {
            if (h.rfind(prefix, 0) != 0) return false;
            if (h != prefix + std::to_string(counter))
                throw ConfigError("dataset csv: unexpected column '" + h + "'");
            ++counter;
            return true;
        };
        if (h.rfind("sp_", 0) == 0) {
            if (!check("sp_", data.output_dim)) throw ConfigError("dataset csv: bad column " + h);
        } else if (h.rfind("s_", 0) == 0) {
            if (data.action_dim || data.output_dim) throw ConfigError("dataset csv: columns out of order");
            check("s_", data.state_dim);
        } else if (h.rfind("a_", 0) == 0) {
            if (data.output_dim) throw ConfigError("dataset csv: columns out of order");
            check("a_", data.action_dim);
        } else {
            throw ConfigError("dataset csv: unknown column '" + h + "'");
        }
        ++expect;
    }
    if (data.output_dim == 0) throw ConfigError("dataset csv: no sp_ columns");
    std::size_t row = 0;
    while (std::getline(is, line)) {
        ++row;
        if (line.empty() || line == "\r") continue;
        const auto fields = split_csv_line(line);
        if (fields.size() != expect)
            throw ConfigError("dataset csv: row " + std::to_string(row) + " has " +
                              std::to_string(fields.size()) + " fields, expected " + std::to_string(expect));
        Vector s(static_cast<Eigen::Index>(data.state_dim));
        Vector a(static_cast<Eigen::Index>(data.action_dim));
        Vector sp(static_cast<Eigen::Index>(data.output_dim));
        std::size_t k = 0;
        try {
            for (Eigen::Index i = 0; i < s.size(); ++i) s[i] = parse_double(fields[k++]);
            for (Eigen::Index i = 0; i < a.size(); ++i) a[i] = parse_double(fields[k++]);
            for (Eigen::Index i = 0; i < sp.size(); ++i) sp[i] = parse_double(fields[k++]);
        } catch (const ConfigError& e) {
            throw ConfigError("dataset csv: row " + std::to_string(row) + ": " + e.what());
        }
        data.add(std::move(s), std::move(a), std::move(sp));
    }
    return data;
}

// ---------------------------------------------------------------------------
// Posterior model
// ---------------------------------------------------------------------------

/// Maps observed next states to regression targets and back.
///
/// With `residual` set the model regresses s' - s. Dimensions listed in
/// `wrapped_dims` are angles: their residuals and predicted means are wrapped
/// into (-pi, pi].
struct TargetTransform {
    bool residual = false;
    std::vector<std::size_t> wrapped_dims;
};

struct Posterior {
    Vector mean;
    Vector std;
};

/// Diagonal jitter added to K + lambda I before factorization.
inline constexpr double kGramJitter = 1e-10;
/// Raw posterior variances below this are treated as bugs instead of being clamped.
inline constexpr double kNegativeVarianceTolerance = -1e-10;

/// Multi-output GP posterior with a zero-mean prior.
///
/// Under Independent coupling all outputs share one n x n factor of
/// K + lambda I; under SharedLengthscale the factor covers every
/// (input, output index) pair. The model is immutable: `append` returns an
/// extended copy built by a rank-one Cholesky extension.
class GpModel {
public:
    static GpModel prior(const KernelSpec& spec, std::size_t state_dim, std::size_t action_dim,
                         std::size_t output_dim, TargetTransform transform = {}) {
        spec.validate();
        GpModel m;
        m.spec_ = spec;
        m.data_ = TransitionDataset(state_dim, action_dim, output_dim);
        m.transform_ = std::move(transform);
        m.check_transform();
        m.jitter_ = kGramJitter;
        m.chol_ = Matrix(0, 0);
        m.targets_ = Matrix(0, m.target_cols());
        m.alpha_ = m.targets_;
        return m;
    }

    /// Conditions on the full dataset. An empty dataset yields the prior.
    static GpModel fit(const KernelSpec& spec, const TransitionDataset& data, TargetTransform transform = {});

    std::size_t size() const { return data_.size(); }
    const KernelSpec& spec() const { return spec_; }
    const TransitionDataset& data() const { return data_; }
    const TargetTransform& transform() const { return transform_; }
    std::size_t state_dim() const { return data_.state_dim; }
    std::size_t action_dim() const { return data_.action_dim; }
    std::size_t output_dim() const { return data_.output_dim; }
    double jitter() const { return jitter_; }
    bool independent() const { return spec_.coupling == OutputCoupling::Independent; }

    /// Lower Cholesky factor of K + (lambda + jitter) I over the training rows.
    const Matrix& cholesky() const { return chol_; }
    const std::vector<AugmentedPoint>& training_rows() const { return rows_; }

    /// Kernel between two training/query rows as used by this model. Under
    /// Independent coupling output indices are ignored: each output block is
    /// the same kernel on (state, action).
    double row_kernel(const AugmentedPoint& a, const AugmentedPoint& b) const {
        if (independent()) return spec_.base(a.input(), b.input());
        return eval_kernel(spec_, a, b);
    }

    /// Query rows for one (state, action): one row when outputs are
    /// independent, otherwise one per output index.
    std::vector<AugmentedPoint> query_rows(const Vector& s, const Vector& a) const {
        check_query(s, a);
        std::vector<AugmentedPoint> q;
        const int count = independent() ? 1 : static_cast<int>(output_dim());
        for (int l = 1; l <= count; ++l) q.push_back({s, a, l});
        return q;
    }

    Posterior posterior(const Vector& s, const Vector& a) const {
        check_query(s, a);
        const auto d = static_cast<Eigen::Index>(output_dim());
        Posterior out{Vector::Zero(d), Vector::Zero(d)};
        const auto q = query_rows(s, a);
        for (std::size_t r = 0; r < q.size(); ++r) {
            const Vector kv = kernel_vector(q[r]);
            const double prior_var = row_kernel(q[r], q[r]);
            double var = prior_var;
            if (kv.size() > 0) {
                const Vector v = chol_.triangularView<Eigen::Lower>().solve(kv);
                var = prior_var - v.squaredNorm();
            }
            const double sd = std::sqrt(clamp_variance(var));
            if (independent()) {
                out.std.setConstant(sd);
                if (kv.size() > 0) out.mean = (kv.transpose() * alpha_).transpose();
            } else {
                out.std[static_cast<Eigen::Index>(r)] = sd;
                if (kv.size() > 0) out.mean[static_cast<Eigen::Index>(r)] = kv.dot(alpha_.col(0));
            }
        }
        out.mean = from_target(s, out.mean);
        return out;
    }

    /// Posterior mean of the next state (the dynamics estimate).
    Vector mean(const Vector& s, const Vector& a) const { return posterior(s, a).mean; }

    GpModel append(const Vector& s, const Vector& a, const Vector& sp) const {
        GpModel m = *this;
        m.data_.add(s, a, sp);
        const Vector y = to_target(s, sp);
        const auto new_rows = query_rows(s, a);
        for (std::size_t r = 0; r < new_rows.size(); ++r) {
            if (!m.extend_factor(new_rows[r])) {
                // Lost positive definiteness: fall back to a full refit with jitter escalation.
                return fit(spec_, m.data_, transform_);
            }
            m.rows_.push_back(new_rows[r]);
        }
        if (independent()) {
            m.targets_.conservativeResize(m.targets_.rows() + 1, Eigen::NoChange);
            m.targets_.row(m.targets_.rows() - 1) = y.transpose();
        } else {
            const auto old = m.targets_.rows();
            m.targets_.conservativeResize(old + y.size(), Eigen::NoChange);
            m.targets_.block(old, 0, y.size(), 1) = y;
        }
        m.solve_alpha();
        return m;
    }

    /// ||L L^T - (K + (lambda + jitter) I)||_F / ||K + (lambda + jitter) I||_F.
    double reconstruction_error() const {
        if (rows_.empty()) return 0.0;
        const Matrix a = regularized_gram();
        return (chol_ * chol_.transpose() - a).norm() / a.norm();
    }

    /// 0.5 * logdet(I + K / lambda) over all augmented training points
    /// (every output index), read off the Cholesky diagonal.
    double information_gain() const {
        double logdet = 0.0;
        const double lam = spec_.noise_variance + jitter_;
        for (Eigen::Index i = 0; i < chol_.rows(); ++i) logdet += 2.0 * std::log(chol_(i, i)) - std::log(lam);
        const double blocks = independent() ? static_cast<double>(output_dim()) : 1.0;
        return 0.5 * blocks * logdet;
    }

    Vector kernel_vector(const AugmentedPoint& q) const {
        Vector kv(static_cast<Eigen::Index>(rows_.size()));
        for (std::size_t i = 0; i < rows_.size(); ++i) kv[static_cast<Eigen::Index>(i)] = row_kernel(rows_[i], q);
        return kv;
    }

    static double clamp_variance(double var) {
        if (var < kNegativeVarianceTolerance)
            throw NumericalError("posterior variance " + format_double(var) + " is negative beyond tolerance");
        return std::max(var, 0.0);
    }

    Vector to_target(const Vector& s, const Vector& sp) const {
        Vector y = sp;
        if (transform_.residual) y -= s;
        for (auto i : transform_.wrapped_dims) y[static_cast<Eigen::Index>(i)] = wrap_angle(y[static_cast<Eigen::Index>(i)]);
        return y;
    }

    Vector from_target(const Vector& s, const Vector& y) const {
        Vector out = y;
        if (transform_.residual) out += s;
        if (transform_.residual)
            for (auto i : transform_.wrapped_dims) out[static_cast<Eigen::Index>(i)] = wrap_angle(out[static_cast<Eigen::Index>(i)]);
        return out;
    }

private:

    KernelSpec spec_;
    TransitionDataset data_;
    TargetTransform transform_;
    double jitter_ = kGramJitter;
    std::vector<AugmentedPoint> rows_;
    Matrix chol_;
    Matrix targets_;
    Matrix alpha_;

    Eigen::Index target_cols() const { return independent() ? static_cast<Eigen::Index>(output_dim()) : 1; }

    void check_transform() const {
        if (transform_.residual && data_.state_dim != data_.output_dim)
            throw DimensionError("residual targets need next-state dimension equal to state dimension");
        for (auto i : transform_.wrapped_dims)
            if (i >= data_.output_dim) throw DimensionError("wrapped dimension out of range");
    }

    void check_query(const Vector& s, const Vector& a) const {
        if (static_cast<std::size_t>(s.size()) != state_dim() || static_cast<std::size_t>(a.size()) != action_dim())
            throw DimensionError("GpModel: query dimension mismatch");
    }

    Matrix regularized_gram() const {
        const auto n = static_cast<Eigen::Index>(rows_.size());
        Matrix k(n, n);
        for (Eigen::Index i = 0; i < n; ++i)
            for (Eigen::Index j = i; j < n; ++j) {
                const double v = row_kernel(rows_[static_cast<std::size_t>(i)], rows_[static_cast<std::size_t>(j)]);
                k(i, j) = v;
                k(j, i) = v;
            }
        k.diagonal().array() += spec_.noise_variance + jitter_;
        return k;
    }

    bool extend_factor(const AugmentedPoint& row) {
        const Vector kv = kernel_vector(row);
        const auto n = chol_.rows();
        Vector l = kv;
        if (n > 0) l = chol_.triangularView<Eigen::Lower>().solve(kv);
        const double d2 = row_kernel(row, row) + spec_.noise_variance + jitter_ - (n > 0 ? l.squaredNorm() : 0.0);
        if (!(d2 > 0.0) || !std::isfinite(d2)) return false;
        chol_.conservativeResize(n + 1, n + 1);
        chol_.row(n).head(n) = l.transpose();
        chol_.col(n).head(n).setZero();
        chol_(n, n) = std::sqrt(d2);
        return true;
    }

    void solve_alpha() {
        if (chol_.rows() == 0) {
            alpha_ = targets_;
            return;
        }
        alpha_ = chol_.triangularView<Eigen::Lower>().solve(targets_);
        alpha_ = chol_.transpose().triangularView<Eigen::Upper>().solve(alpha_);
    }

    friend class PosteriorVarianceTracker;
};

inline GpModel GpModel::fit(const KernelSpec& spec, const TransitionDataset& data, TargetTransform transform) {
    GpModel m = prior(spec, data.state_dim, data.action_dim, data.output_dim, std::move(transform));
    m.data_ = data;
    if (data.empty()) return m;
    const std::size_t n = data.size();
    const auto d = static_cast<Eigen::Index>(data.output_dim);
    for (const auto& t : data.entries)
        if (!t.next_state.allFinite()) throw NumericalError("GpModel::fit: NaN target");

    if (m.independent()) {
        m.targets_.resize(static_cast<Eigen::Index>(n), d);
        for (std::size_t i = 0; i < n; ++i) {
            const auto& t = data.entries[i];
            m.rows_.push_back({t.state, t.action, 1});
            m.targets_.row(static_cast<Eigen::Index>(i)) = m.to_target(t.state, t.next_state).transpose();
        }
    } else {
        m.targets_.resize(static_cast<Eigen::Index>(n) * d, 1);
        Eigen::Index r = 0;
        for (const auto& t : data.entries) {
            const Vector y = m.to_target(t.state, t.next_state);
            for (int l = 1; l <= d; ++l) {
                m.rows_.push_back({t.state, t.action, l});
                m.targets_(r++, 0) = y[l - 1];
            }
        }
    }

    // Factorize, escalating the jitter by 10x at most twice.
    for (int attempt = 0; attempt < 3; ++attempt) {
        Eigen::LLT<Matrix> llt(m.regularized_gram());
        if (llt.info() == Eigen::Success) {
            m.chol_ = llt.matrixL();
            m.solve_alpha();
            if (m.alpha_.allFinite()) return m;
        }
        m.jitter_ *= 10.0;
    }
    throw NumericalError("GpModel::fit: Cholesky factorization failed after jitter escalation");
}

/// Keeps posterior variances of a fixed query set in sync with a growing
/// model in O(n * queries) per appended row.
class PosteriorVarianceTracker {
public:
    PosteriorVarianceTracker(const GpModel& model, const std::vector<std::pair<Vector, Vector>>& queries)
        : per_query_(model.independent() ? 1 : model.output_dim()), output_dim_(model.output_dim()) {
        for (const auto& [s, a] : queries)
            for (auto& row : model.query_rows(s, a)) rows_.push_back(std::move(row));
        prior_.resize(static_cast<Eigen::Index>(rows_.size()));
        for (std::size_t j = 0; j < rows_.size(); ++j) prior_[static_cast<Eigen::Index>(j)] = model.row_kernel(rows_[j], rows_[j]);
        proj_ = Matrix(0, static_cast<Eigen::Index>(rows_.size()));
        sync(model);
    }

    /// Absorbs the training rows appended to `model` since the last sync.
    void sync(const GpModel& model) {
        const Matrix& l = model.cholesky();
        const auto n_old = proj_.rows();
        const auto n_new = l.rows();
        if (n_new < n_old) throw std::logic_error("PosteriorVarianceTracker: model shrank");
        proj_.conservativeResize(n_new, Eigen::NoChange);
        for (Eigen::Index i = n_old; i < n_new; ++i) {
            const auto& train = model.training_rows()[static_cast<std::size_t>(i)];
            for (Eigen::Index j = 0; j < proj_.cols(); ++j) {
                double v = model.row_kernel(train, rows_[static_cast<std::size_t>(j)]);
                if (i > 0) v -= l.row(i).head(i).dot(proj_.col(j).head(i));
                proj_(i, j) = v / l(i, i);
            }
        }
    }

    std::size_t query_count() const { return rows_.size() / per_query_; }

    /// Posterior variance of output `l` (0-based) at query `q`.
    double variance(std::size_t q, std::size_t l) const {
        const std::size_t r = per_query_ == 1 ? q : q * per_query_ + l;
        const auto j = static_cast<Eigen::Index>(r);
        return GpModel::clamp_variance(prior_[j] - proj_.col(j).squaredNorm());
    }

    /// ||sigma(q)||_2 over all outputs.
    double sigma_norm(std::size_t q) const {
        double s = 0.0;
        for (std::size_t l = 0; l < output_dim_; ++l) s += variance(q, l);
        return std::sqrt(s);
    }

private:
    std::size_t per_query_;
    std::size_t output_dim_;
    std::vector<AugmentedPoint> rows_;
    Vector prior_;
    Matrix proj_;
};

// ---------------------------------------------------------------------------
// Confidence widths and model error
// ---------------------------------------------------------------------------

struct ConfidenceWidth {
    double beta = 0.0;
    double delta = 0.0;
    std::size_t n = 0;
};

/// Pointwise width beta(delta) = B + (sigma / lambda) sqrt(2 log(2 / delta)).
///
/// With `uniform_cardinality` set, returns the discretized uniform width
/// 2B + beta(delta / (3 |D|)), where |D| is the caller-supplied size of the
/// discretization the bound must hold on.
inline ConfidenceWidth confidence_width(const KernelSpec& spec, std::size_t n, double delta, double noise_sigma,
                                        std::optional<double> uniform_cardinality = std::nullopt) {
    if (!(delta > 0.0 && delta <= 1.0)) throw std::invalid_argument("confidence_width: delta must lie in (0, 1]");
    if (!(noise_sigma >= 0.0)) throw std::invalid_argument("confidence_width: noise sigma must be >= 0");
    const double b = spec.rkhs_bound;
    auto pointwise = [&](double dl) {
        return b + (noise_sigma / spec.noise_variance) * std::sqrt(2.0 * std::log(2.0 / dl));
    };
    ConfidenceWidth w{0.0, delta, n};
    if (uniform_cardinality) {
        if (!(*uniform_cardinality >= 1.0))
            throw std::invalid_argument("confidence_width: discretization cardinality must be >= 1");
        w.beta = 2.0 * b + pointwise(delta / (3.0 * *uniform_cardinality));
    } else {
        w.beta = pointwise(delta);
    }
    return w;
}

using DynamicsFn = std::function<Vector(const Vector&, const Vector&)>;

/// max over the grid of ||mu_n(s, a) - f(s, a)||_2.
inline double model_error_certificate(const GpModel& model, const DynamicsFn& truth,
                                      const std::vector<std::pair<Vector, Vector>>& grid) {
    if (grid.empty()) throw std::invalid_argument("model_error_certificate: empty grid");
    double worst = 0.0;
    for (const auto& [s, a] : grid) {
        const Vector f = truth(s, a);
        const Vector mu = model.mean(s, a);
        if (f.size() != mu.size()) throw DimensionError("model_error_certificate: output dimension mismatch");
        worst = std::max(worst, (mu - f).norm());
    }
    return worst;
}

} // namespace drrl
