#pragma once

#include "drrl/dro_oracle.hpp"
#include "drrl/envs.hpp"
#include "drrl/mvr.hpp"
#include "drrl/rmdp.hpp"

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

namespace drrl {

// ---------------------------------------------------------------------------
// Content hashing
// ---------------------------------------------------------------------------

inline std::string sha1_hex(std::string_view data) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha1(), nullptr) != 1)
        throw std::runtime_error("sha1: digest failed");
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
    return os.str();
}

/// Same digest as `git hash-object`.
inline std::string git_blob_hash(std::string_view content) {
    std::string blob = "blob " + std::to_string(content.size());
    blob.push_back('\0');
    blob.append(content);
    return sha1_hex(blob);
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("cannot open " + path.string());
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& content) {
    std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ConfigError("cannot write " + path.string());
    os << content;
}

// ---------------------------------------------------------------------------
// Strict JSON reading
// ---------------------------------------------------------------------------

/// Reads one JSON object, remembering which keys were consumed so that
/// `finish` can reject everything else. Errors carry the dotted field path.
class ConfigReader {
public:
    ConfigReader(nlohmann::json j, std::string path) : j_(std::move(j)), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError((path_.empty() ? "config" : path_) + ": expected an object");
    }

    std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    bool has(const std::string& key) const { return j_.contains(key); }

    template <typename T>
    T get(const std::string& key, const T& fallback) {
        seen_.insert(key);
        if (!j_.contains(key)) return fallback;
        return convert<T>(j_.at(key), field(key));
    }

    ConfigReader child(const std::string& key) {
        seen_.insert(key);
        return ConfigReader(j_.contains(key) ? j_.at(key) : nlohmann::json::object(), field(key));
    }

    const nlohmann::json* raw(const std::string& key) {
        seen_.insert(key);
        return j_.contains(key) ? &j_.at(key) : nullptr;
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key())) throw ConfigError(field(it.key()) + ": unknown key");
    }

    template <typename T>
    static T convert(const nlohmann::json& v, const std::string& where) {
        if constexpr (std::is_same_v<T, bool>) {
            if (!v.is_boolean()) throw ConfigError(where + ": expected a boolean");
            return v.get<bool>();
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (!v.is_string()) throw ConfigError(where + ": expected a string");
            return v.get<std::string>();
        } else if constexpr (std::is_same_v<T, double>) {
            if (!v.is_number()) throw ConfigError(where + ": expected a number");
            return v.get<double>();
        } else if constexpr (std::is_same_v<T, std::uint64_t>) {
            if (!v.is_number_integer() || v.get<std::int64_t>() < 0)
                throw ConfigError(where + ": expected a non-negative integer");
            return v.get<std::uint64_t>();
        } else if constexpr (std::is_same_v<T, int>) {
            if (!v.is_number_integer()) throw ConfigError(where + ": expected an integer");
            return v.get<int>();
        } else {
            using E = typename T::value_type;
            if (!v.is_array()) throw ConfigError(where + ": expected an array");
            T out;
            for (std::size_t i = 0; i < v.size(); ++i)
                out.push_back(convert<E>(v[i], where + "[" + std::to_string(i) + "]"));
            return out;
        }
    }

private:
    nlohmann::json j_;
    std::string path_;
    std::set<std::string> seen_;
};

inline void require(bool ok, const std::string& field, const std::string& what) {
    if (!ok) throw ConfigError(field + ": " + what);
}

// ---------------------------------------------------------------------------
// Pipeline configuration
// ---------------------------------------------------------------------------

enum class EnvKind { Pendulum, Rkhs };

struct PerturbationSweep {
    PerturbationKnob knob = PerturbationKnob::Length;
    std::vector<double> magnitudes;
};

struct PipelineConfig {
    // env
    EnvKind env = EnvKind::Pendulum;
    PendulumLiteParams pendulum = [] {
        PendulumLiteParams p;
        p.noise_sigma = 0.02;
        return p;
    }();
    bool model_residuals = true;
    double rkhs_noise_sigma = 0.1;
    std::size_t rkhs_anchors = 10;
    // kernel
    KernelSpec kernel = [] {
        KernelSpec k;
        k.noise_variance = 1e-4;
        return k;
    }();
    // mvr
    std::size_t budget = 60;
    std::string strategy = "mvr";
    std::string pool_construction = "grid";
    std::vector<std::uint64_t> pool_points_per_dim{9, 9, 5};
    std::uint64_t pool_count = 0;
    // dro
    Divergence divergence = Divergence::TV;
    std::vector<double> rhos{0.0, 0.1, 0.3, 0.5};
    // rmdp
    std::vector<std::uint64_t> cells{31, 31};
    std::uint64_t n_actions = 5;
    double gamma = 0.95;
    double tol = 1e-8;
    std::uint64_t max_iter = 0;
    double transition_sigma = 0.1;
    BoundaryMode boundary = BoundaryMode::Reflect;
    int quadrature_order = 16;
    std::uint64_t mc_samples = 4096;
    // eval
    std::vector<PerturbationSweep> perturbations{{PerturbationKnob::Length, {0.0, 20.0, 40.0, 60.0}}};
    std::uint64_t episodes = 20;
    std::uint64_t horizon = 100;
    std::vector<std::uint64_t> eval_seeds{0, 1, 2};
    bool paired_seeds = false;
    PendulumStart start;
    // run
    std::uint64_t seed = 0;
    std::string output_dir = "out";
};

inline std::string to_string(EnvKind k) { return k == EnvKind::Pendulum ? "pendulum" : "rkhs"; }

namespace detail {

inline void parse_env(ConfigReader r, PipelineConfig& c) {
    const auto kind = r.get<std::string>("kind", "pendulum");
    if (kind == "pendulum") {
        c.env = EnvKind::Pendulum;
        auto& p = c.pendulum;
        p.length = r.get("length", p.length);
        p.gravity = r.get("gravity", p.gravity);
        p.mass = r.get("mass", p.mass);
        p.dt = r.get("dt", p.dt);
        p.max_torque = r.get("max_torque", p.max_torque);
        p.max_speed = r.get("max_speed", p.max_speed);
        p.noise_sigma = r.get("noise_sigma", p.noise_sigma);
        p.action_noise = r.get("action_noise", p.action_noise);
        p.angle_weight = r.get("angle_weight", p.angle_weight);
        p.speed_weight = r.get("speed_weight", p.speed_weight);
        p.torque_weight = r.get("torque_weight", p.torque_weight);
        c.model_residuals = r.get("model_residuals", true);
        try {
            p.validate();
        } catch (const ConfigError& e) {
            throw ConfigError(r.field("") + " " + e.what());
        }
    } else if (kind == "rkhs") {
        c.env = EnvKind::Rkhs;
        c.rkhs_noise_sigma = r.get("noise_sigma", c.rkhs_noise_sigma);
        c.rkhs_anchors = r.get<std::uint64_t>("anchors", c.rkhs_anchors);
        c.model_residuals = r.get("model_residuals", false);
        require(c.rkhs_noise_sigma >= 0.0, r.field("noise_sigma"), "must be >= 0");
        require(c.rkhs_anchors >= 1, r.field("anchors"), "must be >= 1");
        if (c.pool_points_per_dim == std::vector<std::uint64_t>{9, 9, 5}) c.pool_points_per_dim = {15, 15};
    } else {
        throw ConfigError(r.field("kind") + ": expected 'pendulum' or 'rkhs'");
    }
    r.finish();
}

inline void parse_kernel(ConfigReader r, KernelSpec& k) {
    try {
        k.family = kernel_family_from_string(r.get<std::string>("family", to_string(k.family)));
    } catch (const std::invalid_argument& e) {
        throw ConfigError(r.field("family") + ": " + e.what());
    }
    try {
        k.coupling = coupling_from_string(r.get<std::string>("coupling", to_string(k.coupling)));
    } catch (const std::invalid_argument& e) {
        throw ConfigError(r.field("coupling") + ": " + e.what());
    }
    k.lengthscales = r.get("lengthscales", k.lengthscales);
    k.noise_variance = r.get("lambda", k.noise_variance);
    k.rkhs_bound = r.get("rkhs_bound", k.rkhs_bound);
    k.output_lengthscale = r.get("output_lengthscale", k.output_lengthscale);
    require(!k.lengthscales.empty(), r.field("lengthscales"), "must be nonempty");
    for (double l : k.lengthscales) require(l > 0.0 && std::isfinite(l), r.field("lengthscales"), "entries must be positive");
    require(k.noise_variance > 0.0, r.field("lambda"), "must be positive");
    require(k.rkhs_bound > 0.0, r.field("rkhs_bound"), "must be positive");
    require(k.output_lengthscale > 0.0, r.field("output_lengthscale"), "must be positive");
    r.finish();
}

inline void parse_mvr(ConfigReader r, PipelineConfig& c) {
    c.budget = r.get<std::uint64_t>("budget", c.budget);
    c.strategy = r.get<std::string>("strategy", c.strategy);
    require(c.budget >= 1, r.field("budget"), "must be >= 1");
    require(c.strategy == "mvr" || c.strategy == "random", r.field("strategy"), "expected 'mvr' or 'random'");
    auto pool = r.child("pool");
    c.pool_construction = pool.get<std::string>("construction", c.pool_construction);
    if (c.pool_construction == "grid") {
        c.pool_points_per_dim = pool.get("points_per_dim", c.pool_points_per_dim);
        for (auto n : c.pool_points_per_dim) require(n >= 1, pool.field("points_per_dim"), "entries must be >= 1");
    } else if (c.pool_construction == "lhs") {
        c.pool_count = pool.get<std::uint64_t>("count", 200);
        require(c.pool_count >= 1, pool.field("count"), "must be >= 1");
    } else {
        throw ConfigError(pool.field("construction") + ": expected 'grid' or 'lhs'");
    }
    pool.finish();
    r.finish();
}

inline void parse_dro(ConfigReader r, PipelineConfig& c) {
    try {
        c.divergence = divergence_from_string(r.get<std::string>("divergence", to_string(c.divergence)));
    } catch (const std::invalid_argument& e) {
        throw ConfigError(r.field("divergence") + ": " + e.what());
    }
    if (const auto* rho = r.raw("rho")) {
        c.rhos = rho->is_number() ? std::vector<double>{ConfigReader::convert<double>(*rho, r.field("rho"))}
                                  : ConfigReader::convert<std::vector<double>>(*rho, r.field("rho"));
    }
    require(!c.rhos.empty(), r.field("rho"), "must be nonempty");
    for (double x : c.rhos) require(x >= 0.0 && std::isfinite(x), r.field("rho"), "radii must be finite and >= 0");
    r.finish();
}

inline void parse_rmdp(ConfigReader r, PipelineConfig& c) {
    c.cells = r.get("cells", c.cells);
    c.n_actions = r.get<std::uint64_t>("actions", c.n_actions);
    c.gamma = r.get("gamma", c.gamma);
    c.tol = r.get("tol", c.tol);
    c.max_iter = r.get<std::uint64_t>("max_iter", c.max_iter);
    c.transition_sigma = r.get("transition_sigma", c.transition_sigma);
    c.quadrature_order = r.get("quadrature_order", c.quadrature_order);
    c.mc_samples = r.get<std::uint64_t>("mc_samples", c.mc_samples);
    try {
        c.boundary = boundary_mode_from_string(r.get<std::string>("boundary", to_string(c.boundary)));
    } catch (const std::invalid_argument& e) {
        throw ConfigError(r.field("boundary") + ": " + e.what());
    }
    require(c.cells.size() == 2, r.field("cells"), "expected two entries (angle, speed)");
    for (auto n : c.cells) require(n >= 2, r.field("cells"), "entries must be >= 2");
    require(c.n_actions >= 2, r.field("actions"), "must be >= 2");
    require(c.gamma >= 0.0 && c.gamma < 1.0, r.field("gamma"), "must lie in [0, 1)");
    require(c.tol > 0.0, r.field("tol"), "must be positive");
    require(c.transition_sigma >= 0.0, r.field("transition_sigma"), "must be >= 0");
    require(c.quadrature_order >= 1 && c.quadrature_order <= 64, r.field("quadrature_order"), "must lie in [1, 64]");
    require(c.mc_samples >= 1, r.field("mc_samples"), "must be >= 1");
    r.finish();
}

inline void parse_eval(ConfigReader r, PipelineConfig& c) {
    if (const auto* sweeps = r.raw("perturbations")) {
        const std::string where = r.field("perturbations");
        if (!sweeps->is_array()) throw ConfigError(where + ": expected an array");
        c.perturbations.clear();
        for (std::size_t i = 0; i < sweeps->size(); ++i) {
            ConfigReader s((*sweeps)[i], where + "[" + std::to_string(i) + "]");
            PerturbationSweep sweep;
            try {
                sweep.knob = knob_from_string(s.get<std::string>("knob", "length"));
            } catch (const ConfigError& e) {
                throw ConfigError(s.field("knob") + ": " + e.what());
            }
            sweep.magnitudes = s.get<std::vector<double>>("magnitudes", {});
            require(!sweep.magnitudes.empty(), s.field("magnitudes"), "must be nonempty");
            for (double m : sweep.magnitudes) {
                try {
                    (void)perturb(PendulumLiteParams{}, sweep.knob, m);
                } catch (const ConfigError& e) {
                    throw ConfigError(s.field("magnitudes") + ": " + e.what());
                }
            }
            s.finish();
            c.perturbations.push_back(std::move(sweep));
        }
    }
    c.episodes = r.get<std::uint64_t>("episodes", c.episodes);
    c.horizon = r.get<std::uint64_t>("horizon", c.horizon);
    c.eval_seeds = r.get("seeds", c.eval_seeds);
    c.paired_seeds = r.get("paired_seeds", c.paired_seeds);
    c.start.angle_spread = r.get("start_angle_spread", c.start.angle_spread);
    c.start.speed_spread = r.get("start_speed_spread", c.start.speed_spread);
    require(c.episodes >= 1, r.field("episodes"), "must be >= 1");
    require(c.horizon >= 1, r.field("horizon"), "must be >= 1");
    require(!c.eval_seeds.empty(), r.field("seeds"), "must be nonempty");
    require(c.start.angle_spread >= 0.0 && c.start.speed_spread >= 0.0, r.field("start_angle_spread"),
            "start spreads must be >= 0");
    r.finish();
}

} // namespace detail

/// Parses and fully validates a config document. Absent sections take defaults.
inline PipelineConfig parse_config(const nlohmann::json& j) {
    ConfigReader r(j, "");
    PipelineConfig c;
    detail::parse_env(r.child("env"), c);
    detail::parse_kernel(r.child("kernel"), c.kernel);
    detail::parse_mvr(r.child("mvr"), c);
    detail::parse_dro(r.child("dro"), c);
    detail::parse_rmdp(r.child("rmdp"), c);
    detail::parse_eval(r.child("eval"), c);
    c.seed = r.get<std::uint64_t>("seed", c.seed);
    c.output_dir = r.get<std::string>("output_dir", c.output_dir);
    r.finish();

    const std::size_t input_dim = c.env == EnvKind::Pendulum ? 3 : 2;
    require(c.kernel.lengthscales.size() == 1 || c.kernel.lengthscales.size() == input_dim, "kernel.lengthscales",
            "expected 1 or " + std::to_string(input_dim) + " entries");
    if (c.pool_construction == "grid") {
        require(c.pool_points_per_dim.size() == input_dim, "mvr.pool.points_per_dim",
                "expected " + std::to_string(input_dim) + " entries");
        std::size_t total = 1;
        for (auto n : c.pool_points_per_dim) total *= n;
        require(c.budget <= total || c.strategy == "mvr", "mvr.budget", "exceeds the pool size");
    } else {
        require(c.budget <= c.pool_count || c.strategy == "mvr", "mvr.budget", "exceeds the pool size");
    }
    return c;
}

inline PipelineConfig load_config(const std::filesystem::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return parse_config(j);
}

/// Resolved config with every default expanded. The output directory is a
/// location, not content, and is left out so that runs into different
/// directories hash identically.
inline nlohmann::json to_json(const PipelineConfig& c) {
    using nlohmann::json;
    json env;
    env["kind"] = to_string(c.env);
    env["model_residuals"] = c.model_residuals;
    if (c.env == EnvKind::Pendulum) {
        const auto& p = c.pendulum;
        env["length"] = p.length;
        env["gravity"] = p.gravity;
        env["mass"] = p.mass;
        env["dt"] = p.dt;
        env["max_torque"] = p.max_torque;
        env["max_speed"] = p.max_speed;
        env["noise_sigma"] = p.noise_sigma;
        env["action_noise"] = p.action_noise;
        env["angle_weight"] = p.angle_weight;
        env["speed_weight"] = p.speed_weight;
        env["torque_weight"] = p.torque_weight;
    } else {
        env["noise_sigma"] = c.rkhs_noise_sigma;
        env["anchors"] = c.rkhs_anchors;
    }
    json kernel = {{"family", to_string(c.kernel.family)},
                   {"coupling", to_string(c.kernel.coupling)},
                   {"lengthscales", c.kernel.lengthscales},
                   {"lambda", c.kernel.noise_variance},
                   {"rkhs_bound", c.kernel.rkhs_bound},
                   {"output_lengthscale", c.kernel.output_lengthscale}};
    json pool = {{"construction", c.pool_construction}};
    if (c.pool_construction == "grid")
        pool["points_per_dim"] = c.pool_points_per_dim;
    else
        pool["count"] = c.pool_count;
    json mvr = {{"budget", c.budget}, {"strategy", c.strategy}, {"pool", pool}};
    json dro = {{"divergence", to_string(c.divergence)}, {"rho", c.rhos}};
    json rmdp = {{"cells", c.cells},
                 {"actions", c.n_actions},
                 {"gamma", c.gamma},
                 {"tol", c.tol},
                 {"max_iter", c.max_iter},
                 {"transition_sigma", c.transition_sigma},
                 {"boundary", to_string(c.boundary)},
                 {"quadrature_order", c.quadrature_order},
                 {"mc_samples", c.mc_samples}};
    json sweeps = json::array();
    for (const auto& s : c.perturbations) sweeps.push_back({{"knob", to_string(s.knob)}, {"magnitudes", s.magnitudes}});
    json eval = {{"perturbations", sweeps},
                 {"episodes", c.episodes},
                 {"horizon", c.horizon},
                 {"seeds", c.eval_seeds},
                 {"paired_seeds", c.paired_seeds},
                 {"start_angle_spread", c.start.angle_spread},
                 {"start_speed_spread", c.start.speed_spread}};
    return {{"env", env}, {"kernel", kernel}, {"mvr", mvr}, {"dro", dro},
            {"rmdp", rmdp}, {"eval", eval}, {"seed", c.seed}};
}

// ---------------------------------------------------------------------------
// Seeds, stage keys, manifest
// ---------------------------------------------------------------------------

/// Every random stream of a run, derived from the base seed.
inline std::map<std::string, std::uint64_t> seed_registry(const PipelineConfig& c) {
    std::map<std::string, std::uint64_t> s;
    for (const char* name : {"simulator", "pool", "baseline", "rkhs_target", "quadrature", "evaluation"})
        s[name] = derive_seed({c.seed, hash_string(name)});
    s["base"] = c.seed;
    return s;
}

struct StageKeys {
    std::string learn, solve, evaluate, info_gain;
};

/// Each stage key covers its own config sections plus the upstream key.
inline StageKeys stage_keys(const PipelineConfig& c) {
    const auto j = to_json(c);
    StageKeys k;
    k.learn = sha1_hex(nlohmann::json{{"env", j["env"]}, {"kernel", j["kernel"]}, {"mvr", j["mvr"]}, {"seed", c.seed}}.dump());
    k.solve = sha1_hex(nlohmann::json{{"learn", k.learn}, {"dro", j["dro"]}, {"rmdp", j["rmdp"]}}.dump());
    k.evaluate = sha1_hex(nlohmann::json{{"solve", k.solve}, {"eval", j["eval"]}}.dump());
    k.info_gain = sha1_hex(nlohmann::json{{"env", j["env"]}, {"kernel", j["kernel"]}, {"mvr", j["mvr"]}}.dump());
    return k;
}

struct StageRecord {
    std::string name;
    std::string key;
    double seconds = 0.0;
    bool cached = false;
};

struct RunManifest {
    std::string command;
    std::string config_hash;
    std::map<std::string, std::string> files; ///< path relative to the output dir -> git blob hash
    std::vector<StageRecord> stages;
    std::map<std::string, std::uint64_t> seeds;

    nlohmann::json to_json() const {
        nlohmann::json stage_list = nlohmann::json::array();
        for (const auto& s : stages)
            stage_list.push_back({{"name", s.name}, {"key", s.key}, {"seconds", s.seconds}, {"cached", s.cached}});
        return {{"command", command}, {"config_hash", config_hash}, {"files", files},
                {"stages", stage_list}, {"seeds", seeds}};
    }
};

// ---------------------------------------------------------------------------
// Environment plumbing
// ---------------------------------------------------------------------------

/// "rho0.3" style label used in file names and result rows.
inline std::string rho_label(double rho) {
    std::ostringstream os;
    os << "rho" << rho;
    return os.str();
}

inline std::pair<Vector, Vector> input_box(const PipelineConfig& c) {
    if (c.env == EnvKind::Pendulum) {
        Vector lo(3), hi(3);
        const double pi = std::numbers::pi;
        lo << -pi, -c.pendulum.max_speed, -c.pendulum.max_torque;
        hi << pi, c.pendulum.max_speed, c.pendulum.max_torque;
        return {lo, hi};
    }
    return {Vector::Constant(2, -1.0), Vector::Constant(2, 1.0)};
}

inline CandidatePool make_pool(const PipelineConfig& c) {
    const auto [lo, hi] = input_box(c);
    const std::size_t state_dim = c.env == EnvKind::Pendulum ? 2 : 1;
    if (c.pool_construction == "grid") {
        std::vector<std::size_t> per(c.pool_points_per_dim.begin(), c.pool_points_per_dim.end());
        return make_uniform_grid_pool(lo, hi, per, state_dim);
    }
    return make_latin_hypercube_pool(lo, hi, c.pool_count, state_dim, seed_registry(c).at("pool"));
}

inline TargetTransform make_transform(const PipelineConfig& c) {
    TargetTransform t;
    t.residual = c.model_residuals;
    if (c.env == EnvKind::Pendulum) t.wrapped_dims = {0};
    return t;
}

inline SyntheticRkhsTarget make_pipeline_rkhs_target(const PipelineConfig& c) {
    const auto [lo, hi] = input_box(c);
    return make_rkhs_target(c.kernel, c.rkhs_anchors, c.kernel.rkhs_bound, seed_registry(c).at("rkhs_target"), 1, 1, 1,
                            lo, hi);
}

/// Ground-truth mean dynamics of the configured environment.
inline DynamicsFn true_dynamics(const PipelineConfig& c) {
    if (c.env == EnvKind::Pendulum) {
        const auto p = c.pendulum;
        return [p](const Vector& s, const Vector& a) { return pendulum_step(p, s, a); };
    }
    const auto target = make_pipeline_rkhs_target(c);
    return [target](const Vector& s, const Vector& a) { return target(s, a); };
}

inline GenerativeSimulator make_simulator(const PipelineConfig& c) {
    const double sigma = c.env == EnvKind::Pendulum ? c.pendulum.noise_sigma : c.rkhs_noise_sigma;
    return {true_dynamics(c), sigma, seed_registry(c).at("simulator")};
}

/// Largest model error over the given points; angle differences are wrapped.
inline double wrapped_model_error(const GpModel& model, const DynamicsFn& truth,
                                  const std::vector<std::pair<Vector, Vector>>& points,
                                  const std::vector<std::size_t>& wrapped_dims) {
    double worst = 0.0;
    for (const auto& [s, a] : points) {
        Vector d = model.mean(s, a) - truth(s, a);
        for (auto w : wrapped_dims) d[static_cast<Eigen::Index>(w)] = wrap_angle(d[static_cast<Eigen::Index>(w)]);
        worst = std::max(worst, d.norm());
    }
    return worst;
}

inline std::vector<double> action_torques(const PipelineConfig& c) {
    std::vector<double> u(c.n_actions);
    for (std::size_t i = 0; i < u.size(); ++i)
        u[i] = -c.pendulum.max_torque + 2.0 * c.pendulum.max_torque * double(i) / double(u.size() - 1);
    return u;
}

inline StateGrid pendulum_grid(const PipelineConfig& c) {
    Vector lo(2), hi(2);
    const double pi = std::numbers::pi;
    lo << -pi, -c.pendulum.max_speed;
    hi << pi, c.pendulum.max_speed;
    return StateGrid(lo, hi, {c.cells[0], c.cells[1]}, {0});
}

inline RobustMdp build_pendulum_mdp(const PipelineConfig& c, const GpModel& model, double rho) {
    DiscretizationSpec spec;
    spec.grid = pendulum_grid(c);
    for (double u : action_torques(c)) spec.actions.push_back(Vector::Constant(1, u));
    spec.noise_sigma = c.transition_sigma;
    spec.quadrature.order = c.quadrature_order;
    spec.quadrature.mc_samples = c.mc_samples;
    spec.quadrature.seed = seed_registry(c).at("quadrature");
    spec.boundary = c.boundary;
    const auto p = c.pendulum;
    return discretize_continuous([&model](const Vector& s, const Vector& a) { return model.mean(s, a); },
                                 [p](const Vector& s, const Vector& a) { return pendulum_reward(p, s, a[0]); }, spec,
                                 c.gamma, {c.divergence, rho});
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

/// Executes stages into one output directory, reusing any stage whose
/// recorded key and file hashes still match.
class Pipeline {
public:
    Pipeline(PipelineConfig cfg, std::filesystem::path out, std::string command)
        : cfg_(std::move(cfg)), out_(std::move(out)), keys_(stage_keys(cfg_)) {
        manifest_.command = std::move(command);
        manifest_.config_hash = sha1_hex(to_json(cfg_).dump());
        manifest_.seeds = seed_registry(cfg_);
    }

    const PipelineConfig& config() const { return cfg_; }
    const std::filesystem::path& out() const { return out_; }
    const RunManifest& manifest() const { return manifest_; }
    const StageKeys& keys() const { return keys_; }

    /// Extra policy files for the evaluation stage; the name is the file stem.
    void add_policy_file(const std::filesystem::path& path) {
        extra_policies_.emplace_back(path.stem().string(), read_file(path));
    }

    void learn_model() {
        run_stage("learn", keys_.learn, [&] { return do_learn(); });
    }

    void solve_robust() {
        require_pendulum("solve-robust");
        learn_model();
        run_stage("solve", keys_.solve, [&] { return do_solve(); });
    }

    void evaluate() {
        require_pendulum("evaluate");
        solve_robust();
        std::string key = keys_.evaluate;
        for (const auto& [name, content] : extra_policies_) key = sha1_hex(key + name + git_blob_hash(content));
        run_stage("eval", key, [&] { return do_evaluate(); });
    }

    void info_gain() {
        run_stage("info_gain", keys_.info_gain, [&] { return do_info_gain(); });
    }

    /// Writes resolved_config.json and manifest.json; returns the manifest.
    const RunManifest& finish() {
        const std::string resolved = to_json(cfg_).dump(2) + "\n";
        write_file(out_ / "resolved_config.json", resolved);
        manifest_.files["resolved_config.json"] = git_blob_hash(resolved);
        write_file(out_ / "manifest.json", manifest_.to_json().dump(2) + "\n");
        return manifest_;
    }

    std::vector<std::string> plan(const std::string& command) const {
        std::vector<std::string> stages;
        if (command == "learn-model") stages = {"learn"};
        if (command == "solve-robust") stages = {"learn", "solve"};
        if (command == "evaluate") stages = {"learn", "solve", "eval"};
        if (command == "info-gain") stages = {"info_gain"};
        std::vector<std::string> lines;
        for (const auto& s : stages) {
            const std::string key = s == "learn" ? keys_.learn : s == "solve" ? keys_.solve
                                  : s == "eval"  ? keys_.evaluate
                                                 : keys_.info_gain;
            lines.push_back("stage " + s + " key=" + key.substr(0, 12) + " -> " + (out_ / s).string() +
                            (cache_valid(s, key) ? " (cached)" : " (run)"));
        }
        return lines;
    }

private:
    using Files = std::map<std::string, std::string>; ///< relative path -> content

    void require_pendulum(const std::string& what) const {
        if (cfg_.env != EnvKind::Pendulum) throw ConfigError("env.kind: " + what + " requires the pendulum environment");
    }

    bool cache_valid(const std::string& stage, const std::string& key) const {
        const auto record = out_ / stage / "stage.json";
        if (!std::filesystem::exists(record)) return false;
        try {
            const auto j = nlohmann::json::parse(read_file(record));
            if (j.at("key").get<std::string>() != key) return false;
            for (auto it = j.at("files").begin(); it != j.at("files").end(); ++it) {
                const auto path = out_ / it.key();
                if (!std::filesystem::exists(path) || git_blob_hash(read_file(path)) != it.value().get<std::string>())
                    return false;
            }
            return true;
        } catch (const std::exception&) {
            return false;
        }
    }

    template <typename Fn>
    void run_stage(const std::string& stage, const std::string& key, Fn&& body) {
        for (const auto& s : manifest_.stages)
            if (s.name == stage) return;
        const auto t0 = std::chrono::steady_clock::now();
        StageRecord rec{stage, key, 0.0, false};
        nlohmann::json hashes = nlohmann::json::object();
        if (cache_valid(stage, key)) {
            rec.cached = true;
            const auto j = nlohmann::json::parse(read_file(out_ / stage / "stage.json"));
            for (auto it = j.at("files").begin(); it != j.at("files").end(); ++it)
                manifest_.files[it.key()] = it.value().get<std::string>();
        } else {
            std::filesystem::remove_all(out_ / stage);
            const Files files = body();
            for (const auto& [name, content] : files) {
                const std::string rel = stage + "/" + name;
                write_file(out_ / rel, content);
                hashes[rel] = git_blob_hash(content);
                manifest_.files[rel] = hashes[rel];
            }
            write_file(out_ / stage / "stage.json", nlohmann::json{{"key", key}, {"files", hashes}}.dump(2) + "\n");
        }
        rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        manifest_.stages.push_back(rec);
    }

    TransitionDataset load_dataset() const {
        std::istringstream is(read_file(out_ / "learn" / "dataset.csv"));
        return read_dataset_csv(is);
    }

    Files do_learn() const {
        const auto pool = make_pool(cfg_);
        const auto sim = make_simulator(cfg_);
        const auto transform = make_transform(cfg_);
        const MvrResult r = cfg_.strategy == "mvr"
                                ? run_mvr(cfg_.kernel, sim, pool, cfg_.budget, transform)
                                : random_baseline(cfg_.kernel, sim, pool, cfg_.budget,
                                                  seed_registry(cfg_).at("baseline"), transform);
        Files files;
        std::ostringstream data, trace;
        write_dataset_csv(data, r.data);
        write_trace_csv(trace, r.trace);
        files["dataset.csv"] = data.str();
        files["trace.csv"] = trace.str();

        double max_sigma = 0.0;
        for (const auto& [s, a] : pool.points) max_sigma = std::max(max_sigma, r.model.posterior(s, a).std.norm());
        nlohmann::json summary = {
            {"strategy", cfg_.strategy},
            {"samples", r.data.size()},
            {"pool_size", pool.size()},
            {"pool_construction", cfg_.pool_construction},
            {"final_max_sigma_norm", format_double(max_sigma)},
            {"info_gain", format_double(r.model.information_gain())},
            {"model_error_certificate",
             format_double(wrapped_model_error(r.model, true_dynamics(cfg_), pool.points, make_transform(cfg_).wrapped_dims))}};
        files["model_summary.json"] = summary.dump(2) + "\n";
        return files;
    }

    Files do_solve() const {
        const auto model = GpModel::fit(cfg_.kernel, load_dataset(), make_transform(cfg_));
        Files files;
        nlohmann::json summary = nlohmann::json::object();
        for (double rho : cfg_.rhos) {
            const auto mdp = build_pendulum_mdp(cfg_, model, rho);
            ValueIterationOptions opt;
            opt.tol = cfg_.tol;
            opt.max_iter = cfg_.max_iter;
            const auto vi = robust_value_iteration(mdp, opt);
            const std::string tag = rho_label(rho);
            std::ostringstream value, policy, residuals;
            write_value_csv(value, vi.value);
            write_policy_csv(policy, vi.policy);
            residuals << "iter,residual\n";
            for (std::size_t i = 0; i < vi.residuals.size(); ++i)
                residuals << i + 1 << "," << format_double(vi.residuals[i]) << "\n";
            files["value_" + tag + ".csv"] = value.str();
            files["policy_" + tag + ".csv"] = policy.str();
            files["residuals_" + tag + ".csv"] = residuals.str();
            summary[tag] = {{"rho", rho}, {"iterations", vi.iterations},
                            {"final_residual", format_double(vi.residuals.empty() ? 0.0 : vi.residuals.back())}};
        }
        files["summary.json"] = summary.dump(2) + "\n";
        return files;
    }

    Files do_evaluate() const {
        std::vector<std::pair<std::string, Policy>> policies;
        for (double rho : cfg_.rhos) {
            std::istringstream is(read_file(out_ / "solve" / ("policy_" + rho_label(rho) + ".csv")));
            policies.emplace_back(rho_label(rho), read_policy_csv(is));
        }
        for (const auto& [name, content] : extra_policies_) {
            std::istringstream is(content);
            policies.emplace_back(name, read_policy_csv(is));
        }
        const StateGrid grid = pendulum_grid(cfg_);
        const auto torques = action_torques(cfg_);
        for (const auto& [name, pol] : policies) {
            if (pol.size() != grid.size()) throw ConfigError("policy " + name + ": expected " + std::to_string(grid.size()) + " states");
            for (auto a : pol)
                if (a >= torques.size()) throw ConfigError("policy " + name + ": action index out of range");
        }

        struct Job {
            std::size_t policy;
            PerturbationKnob knob;
            double magnitude;
            std::uint64_t seed;
        };
        std::vector<Job> jobs;
        for (std::size_t pi = 0; pi < policies.size(); ++pi)
            for (const auto& sweep : cfg_.perturbations)
                for (double m : sweep.magnitudes)
                    for (auto seed : cfg_.eval_seeds) jobs.push_back({pi, sweep.knob, m, seed});

        const std::uint64_t base = seed_registry(cfg_).at("evaluation");
        std::vector<double> means(jobs.size());
        parallel_for(jobs.size(), [&](std::size_t j) {
            const auto& job = jobs[j];
            const auto params = perturb(cfg_.pendulum, job.knob, job.magnitude);
            const GridPolicy policy{grid, policies[job.policy].second, torques};
            const std::uint64_t who = cfg_.paired_seeds ? 0 : hash_string(policies[job.policy].first);
            double total = 0.0;
            for (std::uint64_t e = 0; e < cfg_.episodes; ++e) {
                const auto seed = derive_seed({base, job.seed, who, hash_string(to_string(job.knob)),
                                               hash_double(job.magnitude), e});
                total += pendulum_rollout(params, policy, cfg_.horizon, seed, cfg_.start);
            }
            means[j] = total / double(cfg_.episodes);
        });

        std::ostringstream os;
        os << "policy,knob,magnitude,seed,mean_return\n";
        for (std::size_t j = 0; j < jobs.size(); ++j)
            os << policies[jobs[j].policy].first << "," << to_string(jobs[j].knob) << ","
               << format_double(jobs[j].magnitude) << "," << jobs[j].seed << "," << format_double(means[j]) << "\n";
        return {{"results.csv", os.str()}};
    }

    Files do_info_gain() const {
        const auto pool = make_pool(cfg_);
        if (cfg_.budget > pool.size()) throw ConfigError("mvr.budget: exceeds the pool size");
        std::vector<AugmentedPoint> candidates;
        for (const auto& [s, a] : pool.points) candidates.push_back({s, a, 1});
        const auto greedy = greedy_max_info_gain(cfg_.kernel, candidates, cfg_.budget);
        std::ostringstream os;
        os << "n,point_idx,greedy_info_gain,per_point\n";
        std::vector<AugmentedPoint> chosen;
        for (std::size_t i = 0; i < greedy.indices.size(); ++i) {
            chosen.push_back(candidates[greedy.indices[i]]);
            const double g = information_gain(cfg_.kernel, chosen);
            os << i + 1 << "," << greedy.indices[i] << "," << format_double(g) << "," << format_double(g / double(i + 1))
               << "\n";
        }
        return {{"info_gain.csv", os.str()}};
    }

    PipelineConfig cfg_;
    std::filesystem::path out_;
    StageKeys keys_;
    RunManifest manifest_;
    std::vector<std::pair<std::string, std::string>> extra_policies_;
};

// ---------------------------------------------------------------------------
// Dual-primal certification of CSV instances
// ---------------------------------------------------------------------------

struct DroCheckRow {
    std::size_t row = 0;
    Divergence divergence = Divergence::TV;
    double rho = 0.0;
    double dual = 0.0;
    double primal = 0.0;
    double abs_err = 0.0;
    double tolerance = 0.0;
    bool pass = false;
};

/// Certification tolerance: 1e-4 M (KL), 1e-3 M (chi-square), 1e-8 (TV).
inline double certification_tolerance(Divergence d, double m) {
    switch (d) {
    case Divergence::KL: return 1e-4 * m;
    case Divergence::Chi2: return 1e-3 * m;
    case Divergence::TV: return 1e-8;
    }
    return 0.0;
}

/// Dual and primal for one instance. Values are shifted to start at 0, the
/// ceiling is M = max(1, range), and the TV bracket uses gamma = 1 - 1/M.
inline DroCheckRow certify_instance(const DiscreteDistribution& d, const UncertaintySet& set) {
    const auto values = d.values();
    const double lo = *std::min_element(values.begin(), values.end());
    const double hi = *std::max_element(values.begin(), values.end());
    const double m = std::max(1.0, hi - lo);
    DiscreteDistribution shifted = d;
    for (auto& a : shifted.atoms) a.value -= lo;
    DroCheckRow r;
    r.divergence = set.divergence;
    r.rho = set.radius;
    r.dual = worst_case(shifted, set, 1.0 - 1.0 / m, m).value + lo;
    r.primal = primal_oracle(shifted, set) + lo;
    r.abs_err = std::abs(r.dual - r.primal);
    r.tolerance = certification_tolerance(set.divergence, m);
    r.pass = r.abs_err <= r.tolerance;
    return r;
}

/// Reads `prob_0..prob_k,val_0..val_k,divergence,rho` rows (1-based row numbers
/// in errors) and certifies each one.
inline std::vector<DroCheckRow> dro_check(std::istream& is) {
    std::string line;
    if (!std::getline(is, line)) throw ConfigError("dro-check: empty input");
    const auto header = split_csv_line(line);
    std::size_t k = 0;
    while (k < header.size() && header[k] == "prob_" + std::to_string(k)) ++k;
    bool ok = k > 0 && header.size() == 2 * k + 2;
    for (std::size_t i = 0; ok && i < k; ++i) ok = header[k + i] == "val_" + std::to_string(i);
    if (!ok || header[2 * k] != "divergence" || header[2 * k + 1] != "rho")
        throw ConfigError("dro-check: header must be prob_0..prob_k,val_0..val_k,divergence,rho");

    std::vector<DroCheckRow> out;
    std::size_t row = 0;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        ++row;
        const std::string where = "dro-check row " + std::to_string(row);
        try {
            const auto f = split_csv_line(line);
            if (f.size() != header.size()) throw ConfigError("expected " + std::to_string(header.size()) + " fields");
            std::vector<double> p, v;
            for (std::size_t i = 0; i < k; ++i) {
                if (f[i].empty() && f[k + i].empty()) continue; // shorter instance, padded
                p.push_back(parse_double(f[i]));
                v.push_back(parse_double(f[k + i]));
            }
            const UncertaintySet set{divergence_from_string(f[2 * k]), parse_double(f[2 * k + 1])};
            set.validate();
            for (double x : v)
                if (!std::isfinite(x)) throw ConfigError("values must be finite");
            auto r = certify_instance(DiscreteDistribution::normalized(p, v), set);
            r.row = row;
            out.push_back(r);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(where + ": " + e.what());
        }
    }
    return out;
}

inline void write_dro_check_csv(std::ostream& os, const std::vector<DroCheckRow>& rows) {
    os << "row,divergence,rho,dual,primal,abs_err,tolerance,pass\n";
    for (const auto& r : rows)
        os << r.row << "," << to_string(r.divergence) << "," << format_double(r.rho) << "," << format_double(r.dual)
           << "," << format_double(r.primal) << "," << format_double(r.abs_err) << "," << format_double(r.tolerance)
           << "," << (r.pass ? "true" : "false") << "\n";
}

} // namespace drrl
