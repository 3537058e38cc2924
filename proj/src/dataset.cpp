#include "fet/dataset.hpp"

#include "fet/errors.hpp"
#include "fet/random.hpp"
#include "fet/tensor_archive.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>

namespace fet {

namespace {

using nlohmann::json;

// Generated values are rounded to float32 so the on-disk archive stores them exactly.
double q(double x) { return static_cast<double>(static_cast<float>(x)); }

Eigen::MatrixXd quantized(Eigen::MatrixXd m) { return m.unaryExpr(&q); }

Eigen::VectorXd gaussian_vector(Eigen::Index n, double stddev, Rng& rng) {
    std::normal_distribution<double> dist(0.0, 1.0);
    Eigen::VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = stddev * dist(rng);
    return v;
}

double min_center_distance(const Eigen::MatrixXd& c, int* ia = nullptr, int* ib = nullptr) {
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index a = 0; a < c.rows(); ++a) {
        for (Eigen::Index b = a + 1; b < c.rows(); ++b) {
            const double d = (c.row(a) - c.row(b)).norm();
            if (d < best) {
                best = d;
                if (ia) *ia = static_cast<int>(a);
                if (ib) *ib = static_cast<int>(b);
            }
        }
    }
    return best;
}

// Pushes the closest pair apart until every pair clears `min_dist`.
void repel(Eigen::MatrixXd& c, double min_dist, Rng& rng) {
    const double target = min_dist * 1.05;
    for (int iter = 0; iter < 10000; ++iter) {
        int a = 0, b = 0;
        if (min_center_distance(c, &a, &b) >= target) return;
        Eigen::RowVectorXd d = c.row(a) - c.row(b);
        double n = d.norm();
        if (n < 1e-12) {
            d = gaussian_vector(c.cols(), 1.0, rng).transpose();
            n = d.norm();
        }
        const double push = 0.5 * (target - n) + 1e-9;
        c.row(a) += push * d / n;
        c.row(b) -= push * d / n;
    }
    throw ConfigError("could not separate class centers");
}

Eigen::MatrixXd combined_centers(const Eigen::MatrixXd& e, const Eigen::MatrixXd& jaw) {
    Eigen::MatrixXd c(e.rows(), e.cols() + jaw.cols());
    c << e, jaw;
    return c;
}

std::string sample_context(std::size_t i, const Sample& s) {
    std::string ctx = "sample " + std::to_string(i);
    if (!s.subject_id.empty()) ctx += " (subject " + s.subject_id + ")";
    if (!s.instruction.text.empty()) ctx += " \"" + s.instruction.text + "\"";
    return ctx;
}

void check_vector(const Eigen::VectorXd& v, Eigen::Index expected, const std::string& what, const std::string& ctx) {
    if (v.size() != expected)
        throw ValidationError(ctx + ": " + what + " has " + std::to_string(v.size()) + " entries, expected " +
                              std::to_string(expected));
    if (!v.allFinite()) throw ValidationError(ctx + ": " + what + " has non-finite entries");
}

std::string hex64(std::uint64_t h) {
    std::ostringstream os;
    os << std::hex << h;
    return os.str();
}

// Allocates `total` units across weights by largest remainder, breaking ties by `order`.
std::vector<int> largest_remainder(const std::vector<double>& quotas, long total, const std::vector<int>& caps,
                                   const std::vector<std::size_t>& order) {
    std::vector<int> out(quotas.size());
    long used = 0;
    for (std::size_t i = 0; i < quotas.size(); ++i) {
        out[i] = std::min(static_cast<int>(std::floor(quotas[i] + 1e-9)), caps[i]);
        used += out[i];
    }
    std::vector<std::size_t> idx(order);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        return quotas[a] - std::floor(quotas[a] + 1e-9) > quotas[b] - std::floor(quotas[b] + 1e-9);
    });
    while (used < total) {
        bool placed = false;
        for (std::size_t i : idx) {
            if (used >= total) break;
            if (out[i] < caps[i] && out[i] <= std::floor(quotas[i] + 1e-9)) {
                ++out[i];
                ++used;
                placed = true;
            }
        }
        if (!placed) {
            for (std::size_t i : idx) {
                if (used >= total) break;
                if (out[i] < caps[i]) {
                    ++out[i];
                    ++used;
                    placed = true;
                }
            }
        }
        if (!placed) break;
    }
    return out;
}

const json& need(const json& j, const char* key, const std::string& ctx) {
    auto it = j.find(key);
    if (it == j.end()) throw ParseError(ctx + ": missing key '" + key + "'");
    return *it;
}

Eigen::VectorXd json_vector(const json& j, const std::string& ctx) {
    if (!j.is_array()) throw ParseError(ctx + ": expected an array of numbers");
    Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i) {
        if (!j[i].is_number()) throw ParseError(ctx + "[" + std::to_string(i) + "]: expected a number");
        v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
    }
    return v;
}

json vector_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

std::size_t line_of(const std::string& text, std::size_t byte) {
    byte = std::min(byte, text.size());
    return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<long>(byte), '\n'));
}

}  // namespace

const char* split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
        default: return "unassigned";
    }
}

Split parse_split(const std::string& name) {
    if (name == "train") return Split::train;
    if (name == "val") return Split::val;
    if (name == "test") return Split::test;
    if (name == "unassigned" || name.empty()) return Split::unassigned;
    throw ValidationError("unknown split '" + name + "'");
}

json SyntheticGenConfig::to_json() const {
    json j = {{"vocab", vocab.labels()},
              {"samples_per_pair", samples_per_pair},
              {"expr_dim", expr_dim},
              {"shape_dim", shape_dim},
              {"n_subjects", n_subjects},
              {"center_scale", center_scale},
              {"jaw_center_scale", jaw_center_scale},
              {"noise_std", noise_std},
              {"global_pose_jitter_std", global_pose_jitter_std},
              {"shape_std", shape_std},
              {"class_multipliers", class_multipliers},
              {"embedding", embedding},
              {"seed", seed}};
    if (expr_centers.size() > 0) {
        json e = json::array(), jw = json::array();
        for (Eigen::Index r = 0; r < expr_centers.rows(); ++r) e.push_back(vector_json(expr_centers.row(r).transpose()));
        for (Eigen::Index r = 0; r < jaw_centers.rows(); ++r) jw.push_back(vector_json(jaw_centers.row(r).transpose()));
        j["expr_centers"] = e;
        j["jaw_centers"] = jw;
    }
    return j;
}

SyntheticGenConfig SyntheticGenConfig::from_json(const json& j) {
    SyntheticGenConfig c;
    if (j.contains("vocab")) {
        const auto& v = j.at("vocab");
        c.vocab = v.is_string() ? ExpressionVocabulary::named(v.get<std::string>())
                                : ExpressionVocabulary(v.get<std::vector<std::string>>());
    }
    c.samples_per_pair = j.value("samples_per_pair", c.samples_per_pair);
    c.expr_dim = j.value("expr_dim", c.expr_dim);
    c.shape_dim = j.value("shape_dim", c.shape_dim);
    c.n_subjects = j.value("n_subjects", c.n_subjects);
    c.center_scale = j.value("center_scale", c.center_scale);
    c.jaw_center_scale = j.value("jaw_center_scale", c.jaw_center_scale);
    c.noise_std = j.value("noise_std", c.noise_std);
    c.global_pose_jitter_std = j.value("global_pose_jitter_std", c.global_pose_jitter_std);
    c.shape_std = j.value("shape_std", c.shape_std);
    if (j.contains("class_multipliers")) c.class_multipliers = j.at("class_multipliers").get<std::map<std::string, double>>();
    if (j.contains("embedding")) c.embedding = j.at("embedding");
    c.seed = j.value("seed", c.seed);
    if (j.contains("expr_centers")) {
        const auto& e = j.at("expr_centers");
        const auto& jw = need(j, "jaw_centers", "config");
        c.expr_centers.resize(static_cast<Eigen::Index>(e.size()), c.expr_dim);
        c.jaw_centers.resize(static_cast<Eigen::Index>(jw.size()), 3);
        for (std::size_t r = 0; r < e.size(); ++r) {
            auto v = json_vector(e[r], "expr_centers");
            if (v.size() != c.expr_dim) throw ConfigError("expr_centers row has wrong width");
            c.expr_centers.row(static_cast<Eigen::Index>(r)) = v.transpose();
        }
        for (std::size_t r = 0; r < jw.size(); ++r) {
            auto v = json_vector(jw[r], "jaw_centers");
            if (v.size() != 3) throw ConfigError("jaw_centers row must have 3 entries");
            c.jaw_centers.row(static_cast<Eigen::Index>(r)) = v.transpose();
        }
    }
    return c;
}

std::vector<std::size_t> DatasetManifest::indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < samples.size(); ++i)
        if (i < splits.size() && splits[i] == s) out.push_back(i);
    return out;
}

void DatasetManifest::validate() const {
    if (vocab.size() < 1) throw ValidationError("dataset vocabulary is empty");
    if (splits.size() != samples.size()) throw ValidationError("split list does not match sample count");
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const Sample& s = samples[i];
        const std::string ctx = sample_context(i, s);
        if (!vocab.contains(s.label_from()))
            throw ValidationError(ctx + ": unknown expression label '" + s.label_from() + "'");
        if (!vocab.contains(s.label_to())) throw ValidationError(ctx + ": unknown expression label '" + s.label_to() + "'");
        if (s.instruction.template_id < 1 || s.instruction.template_id > kTemplateCount)
            throw ValidationError(ctx + ": template id out of range");
        if (s.instruction.text.empty()) throw ValidationError(ctx + ": empty instruction text");
        check_vector(s.anchors.e0, expr_dim, "e0", ctx);
        check_vector(s.anchors.e1, expr_dim, "e1", ctx);
        check_vector(s.anchors.theta0, pose_dim, "theta0", ctx);
        check_vector(s.anchors.theta1, pose_dim, "theta1", ctx);
        if (s.shape.size() != 0) check_vector(s.shape, shape_dim, "shape", ctx);
    }
    if (has_centers() && (expr_centers.rows() != vocab.size() || expr_centers.cols() != expr_dim ||
                          jaw_centers.rows() != vocab.size() || jaw_centers.cols() != 3))
        throw ValidationError("class centers do not match vocabulary and dims");
}

std::vector<std::vector<int>> pair_counts(const SyntheticGenConfig& config) {
    const int c = config.vocab.size();
    if (c < 2) throw ConfigError("vocabulary needs at least two labels");
    if (config.samples_per_pair < 1) throw ConfigError("samples_per_pair must be >= 1");
    std::vector<double> mult(static_cast<std::size_t>(c), 1.0);
    for (const auto& [label, m] : config.class_multipliers) {
        if (!config.vocab.contains(label)) throw ConfigError("class multiplier for unknown label '" + label + "'");
        if (!(m > 0.0) || !std::isfinite(m)) throw ConfigError("class multiplier for '" + label + "' must be positive");
        mult[static_cast<std::size_t>(config.vocab.index_of(label))] = m;
    }
    std::vector<std::vector<int>> counts(c, std::vector<int>(c, 0));
    const bool uniform = std::all_of(mult.begin(), mult.end(), [&](double m) { return m == mult[0]; });
    if (uniform) {
        for (int a = 0; a < c; ++a)
            for (int b = 0; b < c; ++b)
                if (a != b) counts[a][b] = config.samples_per_pair;
        return counts;
    }

    // A label's share of anchor occurrences is g_a (G - g_a) / Σ_b g_b (G - g_b) when
    // pair (a, b) gets weight g_a g_b; fit g so the shares follow the multipliers.
    const double msum = std::accumulate(mult.begin(), mult.end(), 0.0);
    std::vector<double> target(mult.size());
    for (std::size_t a = 0; a < mult.size(); ++a) {
        target[a] = mult[a] / msum;
        if (target[a] >= 0.5)
            throw ConfigError("class multipliers infeasible: one label cannot appear in half of all anchors");
    }
    std::vector<double> g(target);
    bool converged = false;
    for (int iter = 0; iter < 20000 && !converged; ++iter) {
        const double gs = std::accumulate(g.begin(), g.end(), 0.0);
        std::vector<double> share(g.size());
        double tot = 0.0;
        for (std::size_t a = 0; a < g.size(); ++a) tot += share[a] = g[a] * (gs - g[a]);
        double err = 0.0;
        for (std::size_t a = 0; a < g.size(); ++a) {
            share[a] /= tot;
            err = std::max(err, std::abs(share[a] / target[a] - 1.0));
            g[a] *= std::sqrt(target[a] / share[a]);
        }
        const double ns = std::accumulate(g.begin(), g.end(), 0.0);
        for (auto& x : g) x /= ns;
        converged = err < 1e-12;
    }
    if (!converged) throw ConfigError("class multipliers could not be realized");

    std::vector<double> quotas;
    std::vector<int> caps;
    double wsum = 0.0;
    for (int a = 0; a < c; ++a)
        for (int b = 0; b < c; ++b)
            if (a != b) wsum += g[a] * g[b];
    const long total = static_cast<long>(c) * (c - 1) * config.samples_per_pair;
    for (int a = 0; a < c; ++a)
        for (int b = 0; b < c; ++b)
            if (a != b) {
                quotas.push_back(static_cast<double>(total) * g[a] * g[b] / wsum);
                caps.push_back(std::numeric_limits<int>::max());
            }
    std::vector<std::size_t> order(quotas.size());
    std::iota(order.begin(), order.end(), 0);
    auto alloc = largest_remainder(quotas, total, caps, order);
    std::size_t k = 0;
    for (int a = 0; a < c; ++a)
        for (int b = 0; b < c; ++b)
            if (a != b) counts[a][b] = alloc[k++];
    return counts;
}

DatasetManifest generate_synthetic(const SyntheticGenConfig& config) {
    const int c = config.vocab.size();
    if (config.expr_dim < 1 || config.shape_dim < 0 || config.n_subjects < 1)
        throw ConfigError("synthetic dataset dims must be positive");
    if (!(config.noise_std > 0.0) || config.global_pose_jitter_std < 0.0)
        throw ConfigError("noise_std must be positive and jitter non-negative");
    const auto counts = pair_counts(config);
    const double min_sep = 6.0 * config.noise_std;

    DatasetManifest m;
    m.vocab = config.vocab;
    m.expr_dim = config.expr_dim;
    m.pose_dim = 6;
    m.shape_dim = config.shape_dim;
    m.noise_std = config.noise_std;
    m.embedding = config.embedding;

    if (config.expr_centers.size() == 0) {
        Rng rng(derive_seed(config.seed, {1}));
        Eigen::MatrixXd e = config.center_scale * standard_normal(c, config.expr_dim, rng);
        Eigen::MatrixXd jaw = config.jaw_center_scale * standard_normal(c, 3, rng);
        Eigen::MatrixXd all = combined_centers(e, jaw);
        repel(all, min_sep, rng);
        all = quantized(all);
        m.expr_centers = all.leftCols(config.expr_dim);
        m.jaw_centers = all.rightCols(3);
    } else {
        if (config.expr_centers.rows() != c || config.expr_centers.cols() != config.expr_dim ||
            config.jaw_centers.rows() != c || config.jaw_centers.cols() != 3)
            throw ConfigError("class centers must be C x expr_dim and C x 3");
        m.expr_centers = quantized(config.expr_centers);
        m.jaw_centers = quantized(config.jaw_centers);
    }
    int ia = 0, ib = 0;
    const double sep = min_center_distance(combined_centers(m.expr_centers, m.jaw_centers), &ia, &ib);
    if (sep < min_sep)
        throw ConfigError("class centers '" + config.vocab.label(ia) + "' and '" + config.vocab.label(ib) +
                          "' are closer than 6 noise standard deviations");

    Rng subject_rng(derive_seed(config.seed, {2}));
    Eigen::MatrixXd shapes = quantized(config.shape_std * standard_normal(config.n_subjects, config.shape_dim, subject_rng));

    std::uint64_t index = 0;
    for (int a = 0; a < c; ++a) {
        for (int b = 0; b < c; ++b) {
            if (a == b) continue;
            for (int k = 0; k < counts[a][b]; ++k, ++index) {
                Rng rng(derive_seed(config.seed, {3, index}));
                std::uniform_int_distribution<int> tmpl(1, kTemplateCount);
                std::uniform_int_distribution<int> subj(0, config.n_subjects - 1);
                const int template_id = tmpl(rng);
                const int subject = subj(rng);
                auto anchor = [&](int cls, Eigen::VectorXd& e, Eigen::VectorXd& theta) {
                    e = m.expr_centers.row(cls).transpose() + gaussian_vector(config.expr_dim, config.noise_std, rng);
                    Eigen::VectorXd jaw =
                        m.jaw_centers.row(cls).transpose() + gaussian_vector(3, config.noise_std, rng);
                    theta.resize(6);
                    theta << gaussian_vector(3, config.global_pose_jitter_std, rng), jaw;
                    e = e.unaryExpr(&q);
                    theta = theta.unaryExpr(&q);
                };
                Sample s;
                anchor(a, s.anchors.e0, s.anchors.theta0);
                anchor(b, s.anchors.e1, s.anchors.theta1);
                s.instruction = render_instruction(template_id, config.vocab.label(a), config.vocab.label(b), config.vocab);
                s.embedding_key = canonical_instruction_text(s.instruction.text);
                char id[16];
                std::snprintf(id, sizeof id, "s%03d", subject);
                s.subject_id = id;
                s.shape = shapes.row(subject).transpose();
                m.samples.push_back(std::move(s));
            }
        }
    }
    m.splits.assign(m.samples.size(), Split::unassigned);
    const json cfg = config.to_json();
    m.provenance = {{"generator", "synthetic"}, {"config_hash", hex64(hash_string(cfg.dump()))}, {"config", cfg}};
    return m;
}

DatasetManifest split(const DatasetManifest& manifest, double test_frac, double val_frac_of_train, std::uint64_t seed) {
    if (!(test_frac > 0.0 && test_frac < 1.0) || !(val_frac_of_train > 0.0 && val_frac_of_train < 1.0))
        throw ConfigError("split fractions must lie in (0, 1)");
    const std::size_t n = manifest.size();
    std::map<std::pair<std::string, std::string>, std::vector<std::size_t>> by_pair;
    for (std::size_t i = 0; i < n; ++i)
        by_pair[{manifest.samples[i].label_from(), manifest.samples[i].label_to()}].push_back(i);

    Rng rng(seed);
    std::vector<std::vector<std::size_t>> groups;
    for (auto& [key, idx] : by_pair) {
        std::shuffle(idx.begin(), idx.end(), rng);
        groups.push_back(idx);
    }
    std::vector<std::size_t> order(groups.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);

    const long n_test = std::lround(test_frac * static_cast<double>(n));
    if (n_test < 1) throw ValidationError("too few samples to split off a test set");
    std::vector<double> quotas;
    std::vector<int> caps;
    for (const auto& g : groups) {
        quotas.push_back(test_frac * static_cast<double>(g.size()));
        caps.push_back(static_cast<int>(g.size()) - 1);
    }
    const auto t = largest_remainder(quotas, n_test, caps, order);
    if (std::accumulate(t.begin(), t.end(), 0L) != n_test)
        throw ValidationError("too few samples per expression pair to stratify the test split");

    const long n_val = std::lround(val_frac_of_train * static_cast<double>(static_cast<long>(n) - n_test));
    if (n_val < 1) throw ValidationError("too few samples to split off a validation set");
    quotas.clear();
    caps.clear();
    for (std::size_t g = 0; g < groups.size(); ++g) {
        const double rest = static_cast<double>(groups[g].size()) - t[g];
        quotas.push_back(val_frac_of_train * rest);
        caps.push_back(static_cast<int>(rest) - 1);
    }
    const auto v = largest_remainder(quotas, n_val, caps, order);
    if (std::accumulate(v.begin(), v.end(), 0L) != n_val)
        throw ValidationError("too few samples per expression pair to stratify the validation split");

    DatasetManifest out = manifest;
    out.splits.assign(n, Split::train);
    for (std::size_t g = 0; g < groups.size(); ++g) {
        for (std::size_t k = 0; k < groups[g].size(); ++k) {
            const auto i = groups[g][k];
            if (k < static_cast<std::size_t>(t[g]))
                out.splits[i] = Split::test;
            else if (k < static_cast<std::size_t>(t[g] + v[g]))
                out.splits[i] = Split::val;
        }
    }
    out.provenance["split"] = {{"test_frac", test_frac}, {"val_frac_of_train", val_frac_of_train}, {"seed", seed}};
    return out;
}

std::map<std::string, int> class_histogram(const DatasetManifest& manifest) {
    std::map<std::string, int> h;
    for (const auto& label : manifest.vocab.labels()) h[label] = 0;
    for (const auto& s : manifest.samples) {
        ++h[s.label_from()];
        ++h[s.label_to()];
    }
    return h;
}

void save_dataset(const DatasetManifest& manifest, const std::filesystem::path& dir) {
    manifest.validate();
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

    const auto n = static_cast<Eigen::Index>(manifest.size());
    Eigen::MatrixXd shape(n, manifest.shape_dim), e0(n, manifest.expr_dim), e1(n, manifest.expr_dim),
        t0(n, manifest.pose_dim), t1(n, manifest.pose_dim);
    json samples = json::array();
    for (Eigen::Index i = 0; i < n; ++i) {
        const Sample& s = manifest.samples[static_cast<std::size_t>(i)];
        if (s.shape.size() != manifest.shape_dim) throw ValidationError("cannot save samples without shape vectors");
        shape.row(i) = s.shape.transpose();
        e0.row(i) = s.anchors.e0.transpose();
        e1.row(i) = s.anchors.e1.transpose();
        t0.row(i) = s.anchors.theta0.transpose();
        t1.row(i) = s.anchors.theta1.transpose();
        samples.push_back({{"subject_id", s.subject_id},
                           {"template_id", s.instruction.template_id},
                           {"expr_from", s.instruction.expr_from},
                           {"expr_to", s.instruction.expr_to},
                           {"text", s.instruction.text},
                           {"embedding_key", s.embedding_key},
                           {"split", split_name(manifest.splits[static_cast<std::size_t>(i)])}});
    }
    TensorArchive ar;
    ar.put("shape", shape);
    ar.put("e0", e0);
    ar.put("e1", e1);
    ar.put("theta0", t0);
    ar.put("theta1", t1);
    if (manifest.has_centers()) {
        ar.put("expr_centers", manifest.expr_centers);
        ar.put("jaw_centers", manifest.jaw_centers);
    }
    ar.meta() = {{"kind", "dataset"}};
    ar.save(dir / "tensors");

    json doc = {{"format", "fet-dataset"},
                {"version", 1},
                {"vocab", manifest.vocab.labels()},
                {"dims", {{"expr", manifest.expr_dim}, {"pose", manifest.pose_dim}, {"shape", manifest.shape_dim}}},
                {"noise_std", manifest.noise_std},
                {"embedding", manifest.embedding},
                {"provenance", manifest.provenance},
                {"class_histogram", class_histogram(manifest)},
                {"tensors", "tensors"},
                {"samples", samples}};
    std::ofstream out(dir / "dataset.json");
    if (!out) throw IoError("cannot write " + (dir / "dataset.json").string());
    out << doc.dump(1) << '\n';
    if (!out) throw IoError("failed writing " + (dir / "dataset.json").string());
}

DatasetManifest load_params_dataset(const std::filesystem::path& path) {
    std::filesystem::path dir = path, file = path / "dataset.json";
    if (std::filesystem::is_regular_file(path)) {
        file = path;
        dir = path.parent_path();
    }
    std::ifstream in(file);
    if (!in) throw IoError("cannot open " + file.string());
    std::stringstream buf;
    buf << in.rdbuf();
    const std::string text = buf.str();
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ParseError(file.string() + ": line " + std::to_string(line_of(text, e.byte)) + ": " + e.what());
    }

    const std::string ctx = file.filename().string();
    DatasetManifest m;
    try {
        const json& vocab = need(doc, "vocab", ctx);
        m.vocab = vocab.is_string() ? ExpressionVocabulary::named(vocab.get<std::string>())
                                    : ExpressionVocabulary(vocab.get<std::vector<std::string>>());
        if (doc.contains("dims")) {
            const json& d = doc.at("dims");
            m.expr_dim = d.value("expr", m.expr_dim);
            m.pose_dim = d.value("pose", m.pose_dim);
            m.shape_dim = d.value("shape", m.shape_dim);
        }
        m.noise_std = doc.value("noise_std", 0.0);
        m.embedding = doc.value("embedding", json{{"provider", "hash"}});
        if (m.embedding.value("provider", "") == "lookup" && m.embedding.contains("archive")) {
            std::filesystem::path a = m.embedding.at("archive").get<std::string>();
            if (a.is_relative()) m.embedding["archive"] = (dir / a).string();
        }
        m.provenance = doc.value("provenance", json::object());
        if (!m.provenance.contains("source")) m.provenance["source"] = file.string();

        const json& samples = need(doc, "samples", ctx);
        if (!samples.is_array()) throw ParseError(ctx + ": 'samples' must be an array");
        std::optional<TensorArchive> ar;
        if (doc.contains("tensors")) ar = TensorArchive::load(dir / doc.at("tensors").get<std::string>());
        Eigen::MatrixXd shape, e0, e1, t0, t1;
        if (ar) {
            auto get = [&](const char* name) {
                Eigen::MatrixXd x = ar->matrix(name);
                if (x.rows() != static_cast<Eigen::Index>(samples.size()))
                    throw ValidationError(std::string("tensor '") + name + "' has " + std::to_string(x.rows()) +
                                          " rows for " + std::to_string(samples.size()) + " samples");
                return x;
            };
            shape = get("shape");
            e0 = get("e0");
            e1 = get("e1");
            t0 = get("theta0");
            t1 = get("theta1");
            if (ar->contains("expr_centers")) {
                m.expr_centers = ar->matrix("expr_centers");
                m.jaw_centers = ar->matrix("jaw_centers");
            }
        }

        for (std::size_t i = 0; i < samples.size(); ++i) {
            const json& js = samples[i];
            const std::string sctx = ctx + ": samples[" + std::to_string(i) + "]";
            Sample s;
            s.subject_id = js.value("subject_id", "");
            s.instruction.expr_from = need(js, "expr_from", sctx).get<std::string>();
            s.instruction.expr_to = need(js, "expr_to", sctx).get<std::string>();
            s.instruction.template_id = js.value("template_id", 0);
            if (js.contains("text"))
                s.instruction.text = js.at("text").get<std::string>();
            else if (m.vocab.contains(s.instruction.expr_from) && m.vocab.contains(s.instruction.expr_to) &&
                     s.instruction.template_id >= 1 && s.instruction.template_id <= kTemplateCount)
                s.instruction = render_instruction(s.instruction.template_id, s.instruction.expr_from,
                                                   s.instruction.expr_to, m.vocab);
            s.embedding_key = js.value("embedding_key", canonical_instruction_text(s.instruction.text));
            const auto r = static_cast<Eigen::Index>(i);
            if (js.contains("params")) {
                const json& p = js.at("params");
                if (p.contains("shape")) s.shape = json_vector(p.at("shape"), sctx + ".params.shape");
                s.anchors.e0 = json_vector(need(p, "e0", sctx + ".params"), sctx + ".params.e0");
                s.anchors.e1 = json_vector(need(p, "e1", sctx + ".params"), sctx + ".params.e1");
                s.anchors.theta0 = json_vector(need(p, "theta0", sctx + ".params"), sctx + ".params.theta0");
                s.anchors.theta1 = json_vector(need(p, "theta1", sctx + ".params"), sctx + ".params.theta1");
            } else if (ar) {
                s.shape = shape.row(r).transpose();
                s.anchors.e0 = e0.row(r).transpose();
                s.anchors.e1 = e1.row(r).transpose();
                s.anchors.theta0 = t0.row(r).transpose();
                s.anchors.theta1 = t1.row(r).transpose();
            } else {
                throw ParseError(sctx + ": no 'params' and no tensor archive");
            }
            m.samples.push_back(std::move(s));
            m.splits.push_back(parse_split(js.value("split", "unassigned")));
        }
    } catch (const json::exception& e) {
        throw ParseError(ctx + ": " + e.what());
    }
    m.validate();
    return m;
}

std::unique_ptr<EmbeddingProvider> dataset_provider(const DatasetManifest& manifest, const std::filesystem::path& base) {
    json d = manifest.embedding.is_null() ? json{{"provider", "hash"}} : manifest.embedding;
    if (d.value("provider", "") == "lookup" && d.contains("archive") && !base.empty()) {
        std::filesystem::path a = d.at("archive").get<std::string>();
        if (a.is_relative()) d["archive"] = (base / a).string();
    }
    return make_provider(d);
}

void save_dataset_embeddings(const DatasetManifest& manifest, const EmbeddingProvider& provider,
                             const std::filesystem::path& dir) {
    std::map<std::string, TextEmbedding> table;
    for (const auto& s : manifest.samples)
        if (!table.count(s.embedding_key)) table[s.embedding_key] = provider.embed(s.embedding_key);
    save_embedding_archive(table, dir);
}

NeutralSet generate_neutral_samples(int n, int expr_dim, int pose_dim, double noise_std, std::uint64_t seed, int factors) {
    if (n < 1 || expr_dim < 1 || pose_dim < 1 || factors < 1 || !(noise_std > 0.0))
        throw ConfigError("invalid neutral sample configuration");
    const int d = expr_dim + pose_dim;
    Rng rng(derive_seed(seed, {11}));
    NeutralSet set;
    set.expr_dim = expr_dim;
    set.pose_dim = pose_dim;
    set.noise_std = noise_std;
    set.center = Eigen::VectorXd::Zero(d);
    set.center.head(expr_dim) = gaussian_vector(expr_dim, noise_std, rng);
    // Loadings scaled so every coordinate has variance ≈ noise_std².
    Eigen::MatrixXd loadings = standard_normal(d, factors, rng) * (noise_std / std::sqrt(static_cast<double>(factors)));
    Eigen::MatrixXd u = standard_normal(n, factors, rng);
    Eigen::MatrixXd iso = standard_normal(n, d, rng) * (0.1 * noise_std);
    set.params = (u * loadings.transpose() + iso).rowwise() + set.center.transpose();
    return set;
}

}  // namespace fet
