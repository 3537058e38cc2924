// Acceptance suite: one PASS/FAIL line per headline criterion. argv[1] is the
// fet executable (used for the replay check); an optional argv[2] restricts the
// run to criteria whose name contains it.
#include "fet/dataset.hpp"
#include "fet/errors.hpp"
#include "fet/eval_harness.hpp"
#include "fet/head_model.hpp"
#include "fet/i2fet.hpp"
#include "fet/ifed.hpp"
#include "fet/ned.hpp"
#include "fet/trajectory.hpp"
#include "lbs_oracle.hpp"
#include "support.hpp"

#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <sys/wait.h>

using namespace fet;
using nn::Var;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

double median3(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
}

// ------------------------------------------------------------------ geometry

Outcome lbs_oracle() {
    const auto start = std::chrono::steady_clock::now();
    double worst = 0;
    for (std::uint64_t c = 0; c < 100; ++c) {
        const HeadModel m = synth_model(16, 10, 12, 2, c);
        Rng rng(1000 + c);
        const FaceParams p = testing::random_params(m, rng, 0.6);
        worst = std::max(worst, (compute_vertices(m, p) - testing::brute_force_lbs(m, p)).cwiseAbs().maxCoeff());
    }
    const double secs = seconds_since(start);
    return {worst <= 1e-6 && secs < 10.0, fmt("100 cases, max |diff| %.3g (tol 1e-6), %.2f s (limit 10 s)", worst, secs)};
}

Outcome skinning_identities() {
    const HeadModel m = synth_model(5023, 100, 50, 2, 1);
    const FaceParams zero = FaceParams::zeros(m);
    const bool exact = compute_vertices(m, zero) == m.base_vertices;

    Rng rng(2);
    double worst = 0;
    for (int trial = 0; trial < 10; ++trial) {
        FaceParams a = zero, b = zero, ab = zero;
        a.shape = standard_normal(100, 1, rng);
        a.expression = standard_normal(50, 1, rng);
        b.shape = standard_normal(100, 1, rng);
        b.expression = standard_normal(50, 1, rng);
        ab.shape = a.shape + b.shape;
        ab.expression = a.expression + b.expression;
        const Eigen::MatrixXd lhs = compute_vertices(m, ab) - m.base_vertices;
        const Eigen::MatrixXd rhs = (compute_vertices(m, a) - m.base_vertices) + (compute_vertices(m, b) - m.base_vertices);
        worst = std::max(worst, (lhs - rhs).cwiseAbs().maxCoeff());
    }
    return {exact && worst <= 1e-9,
            fmt("zero params return the rest mesh %s; superposition max |diff| %.3g (tol 1e-9)",
                exact ? "bit-exactly" : "INEXACTLY", worst)};
}

Outcome obj_round_trip() {
    testing::TempDir dir("accept_obj");
    const HeadModel m = synth_model(5023, 100, 50, 2, 3);
    Rng rng(4);
    const FaceParams p = testing::random_params(m, rng, 0.3);
    const VertexArray v = compute_vertices(m, p);
    export_obj(v, m.faces, dir / "head.obj");
    const ObjMesh back = parse_obj(dir / "head.obj");
    const bool counts = back.vertices.rows() == v.rows() && back.faces.size() == m.faces.size();
    const bool faces = counts && back.faces == m.faces;
    const double worst = counts ? (back.vertices - v).cwiseAbs().maxCoeff() : INFINITY;
    return {counts && faces && worst <= 1e-6,
            fmt("%d vertices, %zu faces %s, max position error %.3g (tol 1e-6)", static_cast<int>(back.vertices.rows()),
                back.faces.size(), faces ? "identical" : "DIFFER", worst)};
}

// ---------------------------------------------------------------------- VAE

Outcome kl_closed_form() {
    const double at_prior = kl_term(Eigen::MatrixXd::Zero(4, 16), Eigen::MatrixXd::Ones(4, 16));
    Rng rng(5);
    std::uniform_real_distribution<double> s(0.05, 3.0);
    double worst = 0;
    for (int i = 0; i < 1000; ++i) {
        const Eigen::MatrixXd mu = standard_normal(2, 16, rng);
        Eigen::MatrixXd sg(2, 16);
        for (Eigen::Index k = 0; k < sg.size(); ++k) sg.data()[k] = s(rng);
        long double direct = 0;
        for (Eigen::Index k = 0; k < sg.size(); ++k) {
            const long double v = static_cast<long double>(sg.data()[k]) * sg.data()[k];
            direct += 0.5L * (v + static_cast<long double>(mu.data()[k]) * mu.data()[k] - 1.0L - std::log(v));
        }
        worst = std::max(worst, std::abs(kl_term(mu, sg) - static_cast<double>(direct)));
    }
    return {std::abs(at_prior) <= 1e-12 && worst <= 1e-10,
            fmt("KL(N(0,1)||N(0,1)) = %.3g (tol 1e-12); 1000 random inputs max |diff| %.3g (tol 1e-10)", at_prior, worst)};
}

IfedConfig grad_ifed_config() {
    IfedConfig c;
    c.facial_width = 5;
    c.text_dim = 6;
    c.model_dim = 4;
    c.heads = 2;
    c.n_facial_layers = 2;
    c.n_text_layers = 1;
    c.n_caft_layers = 2;
    c.expr_dim = 3;
    c.pose_dim = 2;
    return c;
}

Outcome gradient_suite() {
    const auto start = std::chrono::steady_clock::now();
    std::vector<std::pair<std::string, testing::GradCheck>> results;

    {
        const IfedConfig c = grad_ifed_config();
        Rng rng(42);
        const Ifed ifed(c, rng);
        const Eigen::Index b = 2, len = 3;
        Var x_f = nn::parameter(standard_normal(b * c.m_tokens, c.facial_width, rng));
        Var x_t = nn::parameter(standard_normal(b * len, c.text_dim, rng));
        Var f = nn::parameter(standard_normal(b * c.m_tokens, c.facial_width, rng));
        Var t = nn::parameter(standard_normal(b * c.m_tokens, c.text_dim, rng));
        auto weigh = [](const Var& y, std::uint64_t seed) {
            Rng r(seed);
            return nn::sum(nn::hadamard(y, nn::constant(standard_normal(y.rows(), y.cols(), r))));
        };
        auto params = [&](std::vector<nn::NamedParam> extra) {
            nn::ParamList ps;
            ifed.collect("ifed", ps);
            for (auto& e : extra) ps.push_back(e);
            return ps;
        };
        results.emplace_back("facial encoder", testing::grad_check(params({{"x_f", x_f}}),
                                                                   [&] { return weigh(ifed.facial_encoder(x_f), 1); }, 30));
        results.emplace_back("text encoder", testing::grad_check(params({{"x_t", x_t}}),
                                                                 [&] { return weigh(ifed.text_encoder(x_t, len), 2); }, 30));
        results.emplace_back("cross-attention fusion", testing::grad_check(params({{"f", f}, {"t", t}}), [&] {
                                 auto [of, ot] = ifed.caft(f, t);
                                 return weigh(of, 3) + weigh(ot, 4);
                             }, 30));
        results.emplace_back("fusion + decomposition", testing::grad_check(params({{"f", f}, {"t", t}}), [&] {
                                 auto out = ifed.fuse_and_decompose(f, t);
                                 return weigh(out.expr_cond, 5) + weigh(out.pose_cond, 6);
                             }, 30));
        results.emplace_back("IFED end to end", testing::grad_check(params({{"x_f", x_f}, {"x_t", x_t}}), [&] {
                                 auto out = ifed.forward(x_f, x_t, len);
                                 return weigh(out.expr_cond, 7) + weigh(out.pose_cond, 8);
                             }, 30));
    }
    {
        I2fetConfig c;
        c.expr_dim = 3;
        c.pose_dim = 6;
        c.latent_dim = 2;
        c.hidden = 5;
        c.text_dim = 4;
        c.model_dim = 4;
        c.heads = 2;
        c.n_facial_layers = 1;
        c.n_text_layers = 1;
        c.n_caft_layers = 1;
        const HeadModel head = synth_model(8, 4, c.expr_dim, 2, 1);
        Rng rng(8);
        I2fetBatch batch;
        batch.length = 3;
        batch.expr = 0.5 * standard_normal(8, c.expr_dim, rng);
        batch.pose = 0.2 * standard_normal(8, c.pose_dim, rng);
        batch.shape = standard_normal(4, head.n_shape(), rng);
        batch.text = standard_normal(12, c.text_dim, rng);
        const I2fetModel m(c, 8);
        auto loss = [&](bool pose, bool vertex) {
            Rng r(99);
            return loss_total(m, batch, &head, LossFlags{pose, vertex}, r).total;
        };
        const nn::ParamList ps = m.parameters();
        results.emplace_back("L_e", testing::grad_check(ps, [&] { return loss(false, false); }, 12));
        results.emplace_back("L_p", testing::grad_check(ps, [&] { return loss(true, false) - loss(false, false); }, 12));
        results.emplace_back("L_v", testing::grad_check(ps, [&] { return loss(true, true) - loss(true, false); }, 12));
        results.emplace_back("total", testing::grad_check(ps, [&] { return loss(true, true); }, 12));
    }

    const double secs = seconds_since(start);
    bool ok = secs < 120.0;
    double worst = 0;
    std::string worst_name, failed;
    int checked = 0;
    for (const auto& [name, r] : results) {
        checked += r.checked;
        if (r.max_rel_error >= 1e-4) {
            ok = false;
            failed += " " + name + "(" + r.worst + ")";
        }
        if (r.max_rel_error >= worst) {
            worst = r.max_rel_error;
            worst_name = name;
        }
    }
    return {ok, fmt("%zu checks, %d entries, worst rel error %.3g in %s (tol 1e-4), %.1f s (limit 120 s)", results.size(),
                    checked, worst, worst_name.c_str(), secs) +
                    (failed.empty() ? "" : "; failing:" + failed)};
}

// --------------------------------------------------------------- trajectory

Outcome interpolation() {
    const HeadModel m = synth_model(10, 6, 50, 2, 3);
    Rng rng(6);
    FaceParams src = FaceParams::zeros(m);
    src.shape = standard_normal(6, 1, rng);
    auto anchor = [&] {
        return ExpressionAnchor{standard_normal(50, 1, rng), 0.3 * Eigen::VectorXd(standard_normal(6, 1, rng))};
    };
    auto frame = [&](const ExpressionAnchor& a) {
        ExpressionFrame f{src, FrameRole::anchor};
        f.params.expression = a.expression;
        f.params.pose = a.pose;
        return f;
    };
    bool endpoints = true;
    double mid_err = 0, affine_err = 0;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int i = 0; i < 100; ++i) {
        const ExpressionAnchor a = anchor(), b = anchor();
        const ExpressionFrame l = frame(a), n = frame(b);
        endpoints &= interpolate(l, n, 1.0).params.expression == a.expression &&
                     interpolate(l, n, 1.0).params.pose == a.pose &&
                     interpolate(l, n, 0.0).params.expression == b.expression &&
                     interpolate(l, n, 0.0).params.pose == b.pose;
        const ExpressionFrame mid = interpolate(l, n, 0.5);
        mid_err = std::max(mid_err, (mid.params.expression - 0.5 * (a.expression + b.expression)).cwiseAbs().maxCoeff());
        mid_err = std::max(mid_err, (mid.params.pose - 0.5 * (a.pose + b.pose)).cwiseAbs().maxCoeff());
        const double d = u(rng);
        const ExpressionFrame q = interpolate(l, n, d);
        affine_err = std::max(affine_err,
                              (q.params.expression - (d * a.expression + (1 - d) * b.expression)).cwiseAbs().maxCoeff());
        affine_err = std::max(affine_err, (q.params.pose - (d * a.pose + (1 - d) * b.pose)).cwiseAbs().maxCoeff());
    }
    bool counts = true;
    for (int n = 1; n <= 4; ++n)
        for (int f = 0; f <= 12; ++f) {
            std::vector<ExpressionAnchor> as;
            for (int i = 0; i < n; ++i) as.push_back(anchor());
            const Trajectory t = build_trajectory(src, as, f);
            counts &= static_cast<int>(t.frames.size()) == (n + 1) + n * f;
            for (int i = 0; i <= n; ++i) counts &= t.anchor_indices[static_cast<std::size_t>(i)] == i * (f + 1);
        }
    const Trajectory t = build_trajectory(src, {anchor(), anchor()}, 10);
    counts &= t.frames.size() == 23 && t.anchor_indices == std::vector<int>{0, 11, 22};
    return {endpoints && mid_err <= 1e-12 && affine_err <= 1e-12 && counts,
            fmt("endpoints %s; midpoint max err %.3g, affinity max err %.3g (tol 1e-12); frame counts %s",
                endpoints ? "exact" : "NOT exact", mid_err, affine_err, counts ? "exact" : "WRONG")};
}

// ------------------------------------------------------------------ metrics

Outcome metric_identities() {
    Rng rng(7);
    std::uniform_int_distribution<int> label(0, 6), length(1, 50);
    bool ordered = true;
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<LabelPair> pred, truth;
        const int n = length(rng);
        for (int i = 0; i < n; ++i) {
            truth.emplace_back(label(rng), label(rng));
            pred.push_back(rng() % 2 ? truth.back() : LabelPair{label(rng), label(rng)});
        }
        const auto [a1, a2] = acc_metrics(pred, truth);
        ordered &= a2 <= a1;
    }
    const bool gm = gmean({1.0, 1.0, 1.0, 1.0}) == 1.0 && gmean({0.9, 0.0, 1.0}) == 0.0;

    double ce_err = 0;
    for (int trial = 0; trial < 50; ++trial) {
        const Eigen::MatrixXd logits = 3.0 * standard_normal(8, 7, rng);
        std::vector<int> y;
        for (int i = 0; i < 8; ++i) y.push_back(label(rng));
        long double ce = 0;
        for (Eigen::Index i = 0; i < 8; ++i) {
            long double s = 0;
            for (Eigen::Index j = 0; j < 7; ++j) s += std::exp(static_cast<long double>(logits(i, j)));
            ce += std::log(s) - logits(i, y[static_cast<std::size_t>(i)]);
        }
        const double ref = static_cast<double>(ce / 8.0L);
        ce_err = std::max(ce_err, std::abs(cb_focal_loss(logits, y, CBFocalConfig{0.9999, 0.0, std::vector<int>(7, 30)}) - ref));
    }

    const auto w = effective_number_weights({10, 100}, 0.99);
    const double ratio = w[0] / w[1];
    const double closed = static_cast<double>((1.0L - std::pow(0.99L, 100)) / (1.0L - std::pow(0.99L, 10)));
    const bool ratio_ok = std::abs(ratio - 6.629) <= 1e-3;
    return {ordered && gm && ce_err <= 1e-10 && ratio_ok,
            fmt("acc2<=acc1 on 1000 sets %s; G-mean 0/1 cases %s; gamma=0 vs cross-entropy max err %.3g (tol 1e-10); "
                "beta=0.99 ratio %.6f vs stated 6.629 +/- 1e-3 (|diff| %.2e)%s",
                ordered ? "holds" : "VIOLATED", gm ? "hold" : "WRONG", ce_err, ratio, std::abs(ratio - 6.629),
                ratio_ok ? ""
                         : fmt("; the implementation matches the long-double evaluation %.6f of the same formula to "
                               "%.1e, so the stated constant itself is off",
                               closed, std::abs(ratio - closed))
                               .c_str())};
}

// ------------------------------------------------------------ end to end

struct Bench {
    DatasetManifest data;
    std::unique_ptr<EmbeddingProvider> provider;
    HeadModel head;
    NearestCenterOracle oracle;

    static Bench make() {
        SyntheticGenConfig g;  // 7 labels × 42 pairs × 50 = 2100 samples, 16×64 hashed text
        DatasetManifest data = split(generate_synthetic(g), 0.1, 0.1, 0);
        auto provider = dataset_provider(data);
        HeadModel head = synth_model(32, data.shape_dim, data.expr_dim, 2, 0);
        NearestCenterOracle oracle(data);
        return {std::move(data), std::move(provider), std::move(head), std::move(oracle)};
    }

    ExperimentResult run(TrainConfig tc, const char* tag) const {
        I2fetConfig mc;  // model_dim 64
        return run_experiment(data, *provider, &head, mc, tc, oracle, 99, [tag](const EpochRecord& e) {
            if (e.epoch % 10 == 0)
                std::cerr << "  [" << tag << "] epoch " << e.epoch << " train " << e.train_total << " val " << e.val_total
                          << std::endl;
        });
    }
};

const Bench& bench() {
    static const Bench b = Bench::make();
    return b;
}

Outcome end_to_end(EpochRecord* last_record) {
    const auto start = std::chrono::steady_clock::now();
    const Bench& b = bench();
    TrainConfig tc;
    tc.epochs = 50;
    tc.seed = 0;
    const ExperimentResult r = b.run(tc, "e2e");
    const double secs = seconds_since(start);
    *last_record = r.log.epochs.back();
    const auto& g = r.eval.generated;
    const double ceiling = r.eval.ground_truth.acc1;
    const bool ok = b.data.vocab.size() == 7 && b.data.size() == 2100 && g.acc1 >= 0.90 && g.acc2 >= 0.80 &&
                    g.gmean >= 0.85 && ceiling >= 0.999 && secs < 900.0;
    return {ok, fmt("7 classes, %zu samples, %zu test, 50 epochs: Acc1 %.4f (>=0.90), Acc2 %.4f (>=0.80), G-mean %.4f "
                    "(>=0.85), ground-truth ceiling %.4f (>=0.999), %.0f s (limit 900 s)",
                    b.data.size(), b.data.indices(Split::test).size(), g.acc1, g.acc2, g.gmean, ceiling, secs)};
}

// Ablation runs share the benchmark but train for 30 epochs without the vertex term.
struct Ablations {
    std::vector<double> ifed_on, ifed_off, le_only;
};

TrainConfig ablation_config(std::uint64_t seed) {
    TrainConfig tc;
    tc.epochs = 30;
    tc.seed = seed;
    tc.flags.use_vertex_loss = false;
    return tc;
}

Outcome ifed_ablation(Ablations& ab) {
    for (std::uint64_t s = 0; s < 3; ++s) {
        TrainConfig on = ablation_config(s);
        ab.ifed_on.push_back(bench().run(on, "ifed on").eval.generated.acc1);
        TrainConfig off = on;
        off.ifed_enabled = false;
        ab.ifed_off.push_back(bench().run(off, "ifed off").eval.generated.acc1);
    }
    const double on = median3(ab.ifed_on), off = median3(ab.ifed_off);
    return {on > off, fmt("median Acc1 over 3 seeds (30 epochs): with IFED %.4f [%.4f %.4f %.4f], without %.4f "
                          "[%.4f %.4f %.4f]",
                          on, ab.ifed_on[0], ab.ifed_on[1], ab.ifed_on[2], off, ab.ifed_off[0], ab.ifed_off[1],
                          ab.ifed_off[2])};
}

Outcome loss_ablation(Ablations& ab, const EpochRecord& with_vertex) {
    if (ab.ifed_on.size() != 3) {
        for (std::uint64_t s = 0; s < 3; ++s) ab.ifed_on.push_back(bench().run(ablation_config(s), "L_e+L_p").eval.generated.acc1);
    }
    for (std::uint64_t s = 0; s < 3; ++s) {
        TrainConfig tc = ablation_config(s);
        tc.flags.use_pose_loss = false;
        ab.le_only.push_back(bench().run(tc, "L_e").eval.generated.acc1);
    }
    const double both = median3(ab.ifed_on), le = median3(ab.le_only);
    const EpochRecord& r = with_vertex;
    const bool reported = r.epoch > 0 && std::isfinite(r.train_e) && std::isfinite(r.train_p) &&
                          std::isfinite(r.train_v) && r.train_e > 0 && r.train_p > 0 && r.train_v > 0;
    return {both >= le && reported,
            fmt("median Acc1: L_e+L_p %.4f >= L_e %.4f [%.4f %.4f %.4f]; L_v run reports L_e %.5f, L_p %.5f, L_v %.5f "
                "at epoch %d",
                both, le, ab.le_only[0], ab.le_only[1], ab.le_only[2], r.train_e, r.train_p, r.train_v, r.epoch)};
}

// ------------------------------------------------------------ determinism

int shell(const std::string& cmd) {
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome determinism(const std::string& fet) {
    if (fet.empty()) return {false, "no fet executable given"};
    testing::TempDir dir("accept_det");
    const std::string q = "'" + fet + "' ";
    auto p = [&](const char* sub) { return "'" + (dir / sub).string() + "'"; };
    const std::string quiet = " > /dev/null 2> " + p("err.txt");
    std::vector<std::string> problems;
    auto step = [&](const std::string& args) {
        if (shell(q + args + quiet) != 0) problems.push_back("'" + args + "' failed: " + slurp(dir / "err.txt"));
    };
    step("synth-data --pairs 6 --seed 4 --out " + p("data_a"));
    step("train --quiet --epochs 3 --model-dim 16 --heads 2 --data " + p("data_a") + " --out " + p("model_a"));
    step("eval --model " + p("model_a") + " --repeats 2 --out " + p("eval_a"));
    step("gen --model " + p("model_a") + " --from fear --to anger --frames 4 --seed 2 --out " + p("gen_a/t.json"));
    // Replays: every command again from its own resolved config, into fresh directories.
    step("synth-data --config " + p("data_a/resolved_config.json") + " --out " + p("data_b"));
    step("train --config " + p("model_a/resolved_config.json") + " --out " + p("model_b"));
    step("eval --config " + p("eval_a/resolved_config.json") + " --out " + p("eval_b"));
    step("gen --config " + p("gen_a/resolved_config.json") + " --out " + p("gen_b/t.json"));
    if (!problems.empty()) return {false, problems.front()};

    // Every artifact except the resolved config itself (it records the output path).
    int files = 0;
    std::string diff;
    for (const auto& [a, b] : std::vector<std::pair<std::string, std::string>>{
             {"data_a", "data_b"}, {"model_a", "model_b"}, {"eval_a", "eval_b"}, {"gen_a", "gen_b"}}) {
        for (const auto& e : fs::recursive_directory_iterator(dir / a)) {
            if (!e.is_regular_file() || e.path().filename() == "resolved_config.json") continue;
            const fs::path rel = fs::relative(e.path(), dir / a);
            ++files;
            if (slurp(e.path()) != slurp(dir / b / rel)) diff += " " + (fs::path(a) / rel).string();
        }
    }
    return {files > 0 && diff.empty(),
            fmt("synth-data, train, eval and gen replayed from resolved configs; %d artifacts compared byte for byte",
                files) +
                (diff.empty() ? "" : "; differing:" + diff)};
}

// --------------------------------------------------------------------- NED

Outcome ned() {
    const NeutralSet set = generate_neutral_samples(500, 50, 6, 0.05, 2);
    NedConfig cfg;
    cfg.epochs = 100;
    NedTrainLog log;
    const NedModel m = train_ned(set.params, cfg, &log);
    const double drop = 1.0 - log.epoch_mse.back() / log.epoch_mse.front();
    int inside = 0;
    for (std::uint64_t s = 0; s < 100; ++s) {
        const NeutralFace f = generate_neutral(m, s);
        Eigen::VectorXd x(56);
        x << f.expression, f.pose;
        inside += std::sqrt((x - set.center).squaredNorm() / 56.0) <= 3.0 * set.noise_std;
    }
    return {drop >= 0.90 && inside >= 95,
            fmt("MSE %.4g -> %.4g (%.1f%% drop, need >=90%%); %d/100 generated neutrals within 3 sigma (need >=95)",
                log.epoch_mse.front(), log.epoch_mse.back(), 100 * drop, inside)};
}

}  // namespace

int main(int argc, char** argv) {
    const std::string fet = argc > 1 ? argv[1] : "";
    const std::string only = argc > 2 ? argv[2] : "";
    EpochRecord vertex_run;
    Ablations ab;

    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"LBS oracle equivalence", lbs_oracle},
        {"Skinning identities", skinning_identities},
        {"KL closed form", kl_closed_form},
        {"Gradient suite", gradient_suite},
        {"Interpolation", interpolation},
        {"Metric identities", metric_identities},
        {"End-to-end synthetic benchmark", [&] { return end_to_end(&vertex_run); }},
        {"IFED ablation direction", [&] { return ifed_ablation(ab); }},
        {"Loss ablation direction", [&] { return loss_ablation(ab, vertex_run); }},
        {"Determinism", [&] { return determinism(fet); }},
        {"NED", ned},
        {"OBJ round trip", obj_round_trip},
    };

    int failed = 0, ran = 0;
    for (const auto& [name, check] : criteria) {
        if (!only.empty() && name.find(only) == std::string::npos) continue;
        ++ran;
        Outcome o;
        try {
            o = check();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        failed += !o.pass;
        std::cout << (o.pass ? "PASS  " : "FAIL  ") << name << ": " << o.detail << std::endl;
    }
    std::cout << ran - failed << "/" << ran << " criteria passed" << std::endl;
    return failed == 0 ? 0 : 1;
}
