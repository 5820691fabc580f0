#pragma once

// Scenario files: a flat `key = value` text schema with units in the key
// names, plus two binary sidecar files for the policy-weight base
// distribution (mean vector and lower-Cholesky covariance factor, both
// little-endian doubles behind an 8-byte magic). Parsing validates every
// field, rejects unknown keys, and resolves sidecar paths relative to the
// scenario file.

#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "rarecast/expfam.hpp"
#include "rarecast/sha256.hpp"
#include "rarecast/sim.hpp"

namespace rarecast::scenario {

inline constexpr int kFormatVersion = 1;
inline constexpr char kVectorMagic[8] = {'R', 'C', 'V', 'E', 'C', '0', '0', '1'};
inline constexpr char kCholMagic[8] = {'R', 'C', 'C', 'H', 'L', '0', '0', '1'};
inline constexpr char kThetaMagic[8] = {'R', 'C', 'T', 'H', 'T', '0', '0', '1'};

struct parse_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct BetaInit {
    double lo = 0.0;
    double hi = 1.0;
    double alpha = 2.0;
    double beta = 2.0;
};

struct ScenarioSpec {
    int format_version = kFormatVersion;
    std::size_t vehicle_count = 6;
    sim::RoadGeometry road;
    BetaInit init_s{80.0, 120.0, 2.0, 2.0};   // longitudinal position, m
    BetaInit init_t{-0.25, 0.25, 2.0, 2.0};   // offset from lane center, m
    BetaInit init_w{-3.6, 3.6, 2.0, 2.0};     // heading, degrees
    BetaInit init_v{10.0, 20.0, 2.0, 2.0};    // speed, m/s
    std::size_t policy_dim = 32;
    std::string mu0_path;
    std::string sigma0_path;
    double policy_box = 0.01;
    sim::MeasureConfig measure;
    double dt = 0.1;
    double horizon_s = 60.0;
    std::uint64_t seed_base = 0;
    std::string ego_policy = "lane_keep";  // lane_keep | constant
    std::size_t ego_lane = 2;
    double ego_x = 60.0;
    double ego_t = 0.0;
    double ego_heading_deg = 0.0;
    double ego_speed = 18.0;
    double ego_length = 4.8;
    double ego_width = 1.9;
    std::vector<std::size_t> env_lanes;
    double env_length = 4.8;
    double env_width = 1.9;

    // sidecar payloads, filled by load()
    std::vector<double> mu0;
    std::vector<double> sigma_chol;
};

// -- binary sidecars --------------------------------------------------------

inline void write_vector_file(const std::string& path, std::span<const double> values) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out.write(kVectorMagic, 8);
    const std::uint64_t n = values.size();
    out.write(reinterpret_cast<const char*>(&n), 8);
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size() * sizeof(double)));
}

inline std::vector<double> read_payload(const std::string& path, const char magic[8],
                                        const char* what) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw parse_error(std::string(what) + ": cannot open " + path);
    char got[8];
    if (!in.read(got, 8) || std::memcmp(got, magic, 8) != 0)
        throw parse_error(std::string(what) + ": bad magic in " + path);
    std::uint64_t n = 0;
    if (!in.read(reinterpret_cast<char*>(&n), 8))
        throw parse_error(std::string(what) + ": truncated header in " + path);
    std::vector<double> values(n);
    if (!in.read(reinterpret_cast<char*>(values.data()),
                 static_cast<std::streamsize>(n * sizeof(double))))
        throw parse_error(std::string(what) + ": truncated payload in " + path);
    return values;
}

inline std::vector<double> read_vector_file(const std::string& path) {
    return read_payload(path, kVectorMagic, "vector file");
}

inline void write_chol_file(const std::string& path, std::span<const double> packed,
                            std::size_t dim) {
    if (packed.size() != linalg::packed_size(dim))
        throw std::invalid_argument("packed Cholesky size does not match dim");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out.write(kCholMagic, 8);
    const std::uint64_t n = dim;
    out.write(reinterpret_cast<const char*>(&n), 8);
    out.write(reinterpret_cast<const char*>(packed.data()),
              static_cast<std::streamsize>(packed.size() * sizeof(double)));
}

inline std::vector<double> read_chol_file(const std::string& path, std::size_t& dim) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw parse_error("cholesky file: cannot open " + path);
    char got[8];
    if (!in.read(got, 8) || std::memcmp(got, kCholMagic, 8) != 0)
        throw parse_error("cholesky file: bad magic in " + path);
    std::uint64_t n = 0;
    if (!in.read(reinterpret_cast<char*>(&n), 8))
        throw parse_error("cholesky file: truncated header in " + path);
    dim = n;
    std::vector<double> packed(linalg::packed_size(dim));
    if (!in.read(reinterpret_cast<char*>(packed.data()),
                 static_cast<std::streamsize>(packed.size() * sizeof(double))))
        throw parse_error("cholesky file: truncated payload in " + path);
    return packed;
}

/// Serialized parameter point: magic, block count, then per block a kind tag
/// (0 = Beta with two shapes, 1 = Gaussian with u64 dim and the mean vector).
inline void write_theta_file(const std::string& path, const expfam::ParamPoint& theta) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out.write(kThetaMagic, 8);
    const std::uint64_t blocks = theta.blocks.size();
    out.write(reinterpret_cast<const char*>(&blocks), 8);
    for (const auto& b : theta.blocks) {
        if (const auto* beta = std::get_if<expfam::BetaParams>(&b)) {
            const std::uint8_t kind = 0;
            out.write(reinterpret_cast<const char*>(&kind), 1);
            out.write(reinterpret_cast<const char*>(&beta->alpha), 8);
            out.write(reinterpret_cast<const char*>(&beta->beta), 8);
        } else {
            const auto& g = std::get<expfam::GaussianParams>(b);
            const std::uint8_t kind = 1;
            out.write(reinterpret_cast<const char*>(&kind), 1);
            const std::uint64_t dim = g.mu.size();
            out.write(reinterpret_cast<const char*>(&dim), 8);
            out.write(reinterpret_cast<const char*>(g.mu.data()),
                      static_cast<std::streamsize>(dim * sizeof(double)));
        }
    }
}

inline expfam::ParamPoint read_theta_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw parse_error("theta file: cannot open " + path);
    char magic[8];
    if (!in.read(magic, 8) || std::memcmp(magic, kThetaMagic, 8) != 0)
        throw parse_error("theta file: bad magic in " + path);
    std::uint64_t blocks = 0;
    if (!in.read(reinterpret_cast<char*>(&blocks), 8))
        throw parse_error("theta file: truncated header in " + path);
    expfam::ParamPoint theta;
    for (std::uint64_t i = 0; i < blocks; ++i) {
        std::uint8_t kind = 0;
        if (!in.read(reinterpret_cast<char*>(&kind), 1))
            throw parse_error("theta file: truncated block in " + path);
        if (kind == 0) {
            expfam::BetaParams p;
            if (!in.read(reinterpret_cast<char*>(&p.alpha), 8) ||
                !in.read(reinterpret_cast<char*>(&p.beta), 8))
                throw parse_error("theta file: truncated Beta block in " + path);
            theta.blocks.emplace_back(p);
        } else if (kind == 1) {
            std::uint64_t dim = 0;
            if (!in.read(reinterpret_cast<char*>(&dim), 8))
                throw parse_error("theta file: truncated Gaussian block in " + path);
            expfam::GaussianParams p;
            p.mu.resize(dim);
            if (!in.read(reinterpret_cast<char*>(p.mu.data()),
                         static_cast<std::streamsize>(dim * sizeof(double))))
                throw parse_error("theta file: truncated Gaussian block in " + path);
            theta.blocks.emplace_back(std::move(p));
        } else {
            throw parse_error("theta file: unknown block kind in " + path);
        }
    }
    return theta;
}

// -- text schema -------------------------------------------------------------

namespace detail {

struct RawEntry {
    std::string value;
    int line = 0;
    bool used = false;
};

class KeyMap {
  public:
    KeyMap(std::map<std::string, RawEntry> entries, std::string source)
        : entries_(std::move(entries)), source_(std::move(source)) {}

    [[noreturn]] void fail(const std::string& msg, int line = 0) const {
        if (line > 0) throw parse_error(source_ + ":" + std::to_string(line) + ": " + msg);
        throw parse_error(msg);
    }

    const RawEntry& require(const std::string& key) {
        auto it = entries_.find(key);
        if (it == entries_.end()) fail("missing key: " + key);
        it->second.used = true;
        return it->second;
    }

    double get_real(const std::string& key) {
        const auto& e = require(key);
        try {
            std::size_t pos = 0;
            const double v = std::stod(e.value, &pos);
            if (pos != e.value.size()) throw std::invalid_argument("");
            return v;
        } catch (...) {
            fail("key " + key + ": not a real number: '" + e.value + "'", e.line);
        }
    }

    std::int64_t get_int(const std::string& key) {
        const auto& e = require(key);
        std::int64_t v = 0;
        const auto* first = e.value.data();
        const auto* last = first + e.value.size();
        const auto res = std::from_chars(first, last, v);
        if (res.ec != std::errc{} || res.ptr != last)
            fail("key " + key + ": not an integer: '" + e.value + "'", e.line);
        return v;
    }

    std::string get_string(const std::string& key) { return require(key).value; }

    std::vector<std::size_t> get_index_list(const std::string& key) {
        const auto& e = require(key);
        std::vector<std::size_t> out;
        std::stringstream ss(e.value);
        std::string item;
        while (std::getline(ss, item, ',')) {
            const auto begin = item.find_first_not_of(" \t");
            const auto end = item.find_last_not_of(" \t");
            if (begin == std::string::npos) fail("key " + key + ": empty list entry", e.line);
            item = item.substr(begin, end - begin + 1);
            std::size_t v = 0;
            const auto res = std::from_chars(item.data(), item.data() + item.size(), v);
            if (res.ec != std::errc{} || res.ptr != item.data() + item.size())
                fail("key " + key + ": not an index: '" + item + "'", e.line);
            out.push_back(v);
        }
        return out;
    }

    void reject_unused() const {
        for (const auto& [key, entry] : entries_)
            if (!entry.used) fail("unknown key '" + key + "'", entry.line);
    }

  private:
    std::map<std::string, RawEntry> entries_;
    std::string source_;
};

inline KeyMap tokenize(std::istream& in, const std::string& source) {
    std::map<std::string, RawEntry> entries;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const auto begin = line.find_first_not_of(" \t\r");
        if (begin == std::string::npos) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw parse_error(source + ":" + std::to_string(lineno) + ": expected 'key = value'");
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            if (b == std::string::npos) return std::string{};
            const auto e = s.find_last_not_of(" \t\r");
            return s.substr(b, e - b + 1);
        };
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty())
            throw parse_error(source + ":" + std::to_string(lineno) + ": empty key");
        if (entries.count(key))
            throw parse_error(source + ":" + std::to_string(lineno) + ": duplicate key '" + key +
                              "'");
        entries[key] = RawEntry{value, lineno, false};
    }
    return KeyMap(std::move(entries), source);
}

inline BetaInit read_beta(KeyMap& keys, const std::string& prefix, const std::string& unit) {
    BetaInit b;
    b.lo = keys.get_real(prefix + ".lo_" + unit);
    b.hi = keys.get_real(prefix + ".hi_" + unit);
    b.alpha = keys.get_real(prefix + ".alpha");
    b.beta = keys.get_real(prefix + ".beta");
    if (!(b.hi > b.lo)) keys.fail("key " + prefix + ": hi must exceed lo");
    if (!(b.alpha > 0.0) || !(b.beta > 0.0)) keys.fail("key " + prefix + ": shapes must be > 0");
    return b;
}

}  // namespace detail

/// Parse the text schema only; sidecar payloads are loaded by load().
inline ScenarioSpec parse_stream(std::istream& in, const std::string& source) {
    auto keys = detail::tokenize(in, source);
    ScenarioSpec s;
    const auto m = keys.get_int("vehicle_count");
    if (m < 2) keys.fail("vehicle_count must be >= 2 (ego plus environment)");
    s.vehicle_count = static_cast<std::size_t>(m);
    const auto version = keys.get_int("format_version");
    if (version != kFormatVersion)
        keys.fail("format_version " + std::to_string(version) + " is not supported");

    s.road.length_m = keys.get_real("road.length_m");
    if (!(s.road.length_m > 0)) keys.fail("road.length_m must be > 0");
    const auto lanes = keys.get_int("road.lane_count");
    if (lanes < 1) keys.fail("road.lane_count must be >= 1");
    s.road.lane_count = static_cast<std::size_t>(lanes);
    s.road.lane_width_m = keys.get_real("road.lane_width_m");
    if (!(s.road.lane_width_m > 0)) keys.fail("road.lane_width_m must be > 0");

    s.init_s = detail::read_beta(keys, "init.s", "m");
    s.init_t = detail::read_beta(keys, "init.t", "m");
    s.init_w = detail::read_beta(keys, "init.w", "deg");
    s.init_v = detail::read_beta(keys, "init.v", "mps");
    if (s.init_v.lo < 0) keys.fail("init.v: negative speeds are not modeled");

    const auto dim = keys.get_int("policy.dim");
    if (dim < 0) keys.fail("policy.dim must be >= 0");
    s.policy_dim = static_cast<std::size_t>(dim);
    sim::policy_beams_for_dim(s.policy_dim);  // validates the decomposition
    s.mu0_path = keys.get_string("policy.mu0_path");
    s.sigma0_path = keys.get_string("policy.sigma0_path");
    s.policy_box = keys.get_real("policy.box");
    if (!(s.policy_box >= 0)) keys.fail("policy.box must be >= 0");

    const auto beams = keys.get_int("measure.n_beams");
    if (beams < 4) keys.fail("measure.n_beams must be >= 4");
    s.measure.n_beams = static_cast<std::size_t>(beams);
    s.measure.max_range = keys.get_real("measure.max_range_m");
    if (!(s.measure.max_range > 0)) keys.fail("measure.max_range_m must be > 0");
    s.measure.gamma = keys.get_real("measure.gamma_s");

    s.dt = keys.get_real("sim.dt_s");
    if (!(s.dt > 0)) keys.fail("sim.dt_s must be > 0");
    s.horizon_s = keys.get_real("sim.horizon_s");
    if (!(s.horizon_s > 0)) keys.fail("sim.horizon_s must be > 0");
    s.seed_base = static_cast<std::uint64_t>(keys.get_int("seed_base"));

    s.ego_policy = keys.get_string("ego.policy");
    if (s.ego_policy != "lane_keep" && s.ego_policy != "constant")
        keys.fail("ego.policy must be lane_keep or constant");
    const auto ego_lane = keys.get_int("ego.lane");
    if (ego_lane < 0 || ego_lane >= lanes) keys.fail("ego.lane out of range");
    s.ego_lane = static_cast<std::size_t>(ego_lane);
    s.ego_x = keys.get_real("ego.x_m");
    s.ego_t = keys.get_real("ego.t_m");
    s.ego_heading_deg = keys.get_real("ego.heading_deg");
    s.ego_speed = keys.get_real("ego.speed_mps");
    if (!(s.ego_speed >= 0)) keys.fail("ego.speed_mps must be >= 0");
    s.ego_length = keys.get_real("ego.length_m");
    s.ego_width = keys.get_real("ego.width_m");
    if (!(s.ego_length > 0) || !(s.ego_width > 0)) keys.fail("ego dimensions must be > 0");

    s.env_lanes = keys.get_index_list("env.lanes");
    if (s.env_lanes.size() != s.vehicle_count - 1)
        keys.fail("env.lanes must list exactly vehicle_count - 1 lanes, got " +
                  std::to_string(s.env_lanes.size()));
    for (auto l : s.env_lanes)
        if (l >= s.road.lane_count) keys.fail("env.lanes entry out of range");
    s.env_length = keys.get_real("env.length_m");
    s.env_width = keys.get_real("env.width_m");
    if (!(s.env_length > 0) || !(s.env_width > 0)) keys.fail("env dimensions must be > 0");

    keys.reject_unused();
    return s;
}

inline ScenarioSpec parse(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw parse_error("cannot open scenario file " + path);
    return parse_stream(in, path);
}

namespace detail {
inline std::string real17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}
}  // namespace detail

/// Canonical text form; parse(serialize(s)) is the identity on all fields.
/// The sidecar paths are included unless include_paths is false (used by the
/// content hash, which folds in the payloads instead).
inline std::string serialize(const ScenarioSpec& s, bool include_paths = true) {
    using detail::real17;
    std::ostringstream out;
    out << "format_version = " << s.format_version << "\n";
    out << "vehicle_count = " << s.vehicle_count << "\n";
    out << "road.length_m = " << real17(s.road.length_m) << "\n";
    out << "road.lane_count = " << s.road.lane_count << "\n";
    out << "road.lane_width_m = " << real17(s.road.lane_width_m) << "\n";
    auto beta = [&](const char* prefix, const char* unit, const BetaInit& b) {
        out << prefix << ".lo_" << unit << " = " << real17(b.lo) << "\n";
        out << prefix << ".hi_" << unit << " = " << real17(b.hi) << "\n";
        out << prefix << ".alpha = " << real17(b.alpha) << "\n";
        out << prefix << ".beta = " << real17(b.beta) << "\n";
    };
    beta("init.s", "m", s.init_s);
    beta("init.t", "m", s.init_t);
    beta("init.w", "deg", s.init_w);
    beta("init.v", "mps", s.init_v);
    out << "policy.dim = " << s.policy_dim << "\n";
    if (include_paths) {
        out << "policy.mu0_path = " << s.mu0_path << "\n";
        out << "policy.sigma0_path = " << s.sigma0_path << "\n";
    }
    out << "policy.box = " << real17(s.policy_box) << "\n";
    out << "measure.n_beams = " << s.measure.n_beams << "\n";
    out << "measure.max_range_m = " << real17(s.measure.max_range) << "\n";
    out << "measure.gamma_s = " << real17(s.measure.gamma) << "\n";
    out << "sim.dt_s = " << real17(s.dt) << "\n";
    out << "sim.horizon_s = " << real17(s.horizon_s) << "\n";
    out << "seed_base = " << s.seed_base << "\n";
    out << "ego.policy = " << s.ego_policy << "\n";
    out << "ego.lane = " << s.ego_lane << "\n";
    out << "ego.x_m = " << real17(s.ego_x) << "\n";
    out << "ego.t_m = " << real17(s.ego_t) << "\n";
    out << "ego.heading_deg = " << real17(s.ego_heading_deg) << "\n";
    out << "ego.speed_mps = " << real17(s.ego_speed) << "\n";
    out << "ego.length_m = " << real17(s.ego_length) << "\n";
    out << "ego.width_m = " << real17(s.ego_width) << "\n";
    out << "env.lanes = ";
    for (std::size_t i = 0; i < s.env_lanes.size(); ++i)
        out << (i ? "," : "") << s.env_lanes[i];
    out << "\n";
    out << "env.length_m = " << real17(s.env_length) << "\n";
    out << "env.width_m = " << real17(s.env_width) << "\n";
    return out.str();
}

/// Parse plus sidecar loading and cross-validation of the policy dimension.
inline ScenarioSpec load(const std::string& path) {
    ScenarioSpec s = parse(path);
    const auto dir = std::filesystem::path(path).parent_path();
    auto resolve = [&](const std::string& p) {
        const std::filesystem::path fp(p);
        return fp.is_absolute() ? fp.string() : (dir / fp).string();
    };
    s.mu0 = read_vector_file(resolve(s.mu0_path));
    if (s.mu0.size() != s.policy_dim)
        throw parse_error("policy.mu0_path: dimension mismatch: policy.dim = " +
                          std::to_string(s.policy_dim) + " but " + s.mu0_path + " holds " +
                          std::to_string(s.mu0.size()) + " values");
    std::size_t chol_dim = 0;
    s.sigma_chol = read_chol_file(resolve(s.sigma0_path), chol_dim);
    if (chol_dim != s.policy_dim)
        throw parse_error("policy.sigma0_path: dimension mismatch: policy.dim = " +
                          std::to_string(s.policy_dim) + " but " + s.sigma0_path +
                          " is for dimension " + std::to_string(chol_dim));
    return s;
}

inline void save(const ScenarioSpec& s, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << serialize(s);
}

/// Content digest: the canonical text without the sidecar path names, plus
/// the sidecar payloads themselves.
inline sha256::Digest content_hash(const ScenarioSpec& s) {
    sha256::Hasher h;
    h.update(serialize(s, false));
    h.update(s.mu0.data(), s.mu0.size() * sizeof(double));
    h.update(s.sigma_chol.data(), s.sigma_chol.size() * sizeof(double));
    return h.finish();
}

/// Importance-sampling family for a scenario: per environment vehicle one
/// scaled-Beta block each for S, T, W and V (grouped by quantity), then the
/// Gaussian policy-weight block. theta0 carries the base shapes and mu0.
inline std::pair<expfam::FamilySpec, expfam::ParamPoint> base_family(const ScenarioSpec& s) {
    expfam::FamilySpec family;
    expfam::ParamPoint theta0;
    const std::size_t env = s.vehicle_count - 1;
    for (const auto* init : {&s.init_s, &s.init_t, &s.init_w, &s.init_v}) {
        for (std::size_t i = 0; i < env; ++i) {
            family.blocks.emplace_back(expfam::BetaBlock{init->lo, init->hi});
            theta0.blocks.emplace_back(expfam::BetaParams{init->alpha, init->beta});
        }
    }
    expfam::GaussianBlock g;
    g.dim = s.policy_dim;
    g.mu0 = s.mu0;
    g.chol = s.sigma_chol;
    g.box = s.policy_box;
    family.blocks.emplace_back(std::move(g));
    theta0.blocks.emplace_back(expfam::GaussianParams{s.mu0});
    return {std::move(family), std::move(theta0)};
}

}  // namespace rarecast::scenario
