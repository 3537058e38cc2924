#include "fet/cli.hpp"

#include "fet/dataset.hpp"
#include "fet/errors.hpp"
#include "fet/eval_harness.hpp"
#include "fet/head_model.hpp"
#include "fet/i2fet.hpp"
#include "fet/ned.hpp"
#include "fet/trajectory.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <sstream>

namespace fet::cli {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

// Binds CLI flags to variables and records them under stable keys, so a run
// can be re-created from its resolved config: defaults < --config file < flags.
class Options {
public:
    explicit Options(CLI::App* app) : app_(app) {
        app_->add_option("--config", config_path_, "JSON config file; explicit flags override its values");
    }

    template <class T>
    CLI::Option* add(const std::string& key, const std::string& flag, T& var, const std::string& desc) {
        CLI::Option* opt = app_->add_option(flag, var, desc)->capture_default_str();
        fields_.push_back({key, opt, [&var] { return json(var); }, [&var](const json& j) { var = j.get<T>(); }});
        return opt;
    }

    CLI::Option* flag(const std::string& key, const std::string& flag, bool& var, const std::string& desc) {
        CLI::Option* opt = app_->add_flag(flag, var, desc);
        fields_.push_back({key, opt, [&var] { return json(var); }, [&var](const json& j) { var = j.get<bool>(); }});
        return opt;
    }

    void apply_config(const std::string& command) {
        if (config_path_.empty()) return;
        std::ifstream in(config_path_);
        if (!in) throw IoError("cannot open config " + config_path_);
        json j;
        try {
            j = json::parse(in);
        } catch (const json::parse_error& e) {
            throw ParseError(config_path_ + ": " + e.what());
        }
        if (!j.is_object()) throw ValidationError(config_path_ + ": config must be a JSON object");
        if (j.contains("command") && j.at("command") != command)
            throw ValidationError(config_path_ + ": config is for '" + j.at("command").get<std::string>() + "', not '" +
                                  command + "'");
        for (const auto& [key, value] : j.items()) {
            if (key == "command") continue;
            auto it = std::find_if(fields_.begin(), fields_.end(), [&](const Field& f) { return f.key == key; });
            if (it == fields_.end()) throw ValidationError(config_path_ + ": unknown key '" + key + "'");
            if (it->opt->count() == 0) {
                try {
                    it->set(value);
                } catch (const json::exception&) {
                    throw ValidationError(config_path_ + ": key '" + key + "' has the wrong type");
                }
            }
        }
    }

    json resolved(const std::string& command) const {
        json j = {{"command", command}};
        for (const auto& f : fields_) j[f.key] = f.get();
        return j;
    }

private:
    struct Field {
        std::string key;
        CLI::Option* opt;
        std::function<json()> get;
        std::function<void(const json&)> set;
    };
    CLI::App* app_;
    std::string config_path_;
    std::vector<Field> fields_;
};

std::string default_data_root() {
    const char* env = std::getenv("FET_DATA_ROOT");
    return env && *env ? env : "data";
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) ensure_dir(path.parent_path());
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("failed writing " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
}

std::string absolute_string(const fs::path& p) { return fs::absolute(p).lexically_normal().string(); }

// A trained generator plus everything needed to use it without the dataset.
struct ModelBundle {
    I2fetModel model;
    HeadModel head;
    ExpressionVocabulary vocab;
    json embedding;
    json meta;
};

void save_bundle(const fs::path& dir, const I2fetModel& model, const HeadModel& head, const DatasetManifest& data,
                 const json& embedding, const json& extra) {
    ensure_dir(dir);
    model.save(dir / "i2fet");
    save_head_model(head, dir / "head_model");
    json meta = {{"format", "fet-model"},
                 {"version", 1},
                 {"vocab", data.vocab.labels()},
                 {"embedding", embedding},
                 {"i2fet", "i2fet"},
                 {"head_model", "head_model"}};
    for (const auto& [k, v] : extra.items()) meta[k] = v;
    write_json(dir / "model.json", meta);
}

ModelBundle load_bundle(const fs::path& dir) {
    json meta = read_json(dir / "model.json");
    if (meta.value("format", "") != "fet-model") throw ValidationError(dir.string() + " is not a model directory");
    ModelBundle b;
    b.model = I2fetModel::load(dir / meta.value("i2fet", "i2fet"));
    b.head = load_head_model(dir / meta.value("head_model", "head_model"));
    b.vocab = ExpressionVocabulary(meta.at("vocab").get<std::vector<std::string>>());
    b.embedding = meta.at("embedding");
    b.meta = meta;
    return b;
}

// Lookup archives are stored with absolute paths so models stay usable elsewhere.
json portable_embedding(const DatasetManifest& data) {
    json e = data.embedding;
    if (e.value("provider", "") == "lookup" && e.contains("archive"))
        e["archive"] = absolute_string(e.at("archive").get<std::string>());
    return e;
}

HeadModel make_head(const std::string& path, int vertices, std::uint64_t seed, const DatasetManifest& data) {
    if (!path.empty()) {
        HeadModel h = load_head_model(path);
        if (h.n_expr() != data.expr_dim || h.n_shape() != data.shape_dim)
            throw ValidationError("head model dims do not match the dataset");
        return h;
    }
    return synth_model(vertices, data.shape_dim, data.expr_dim, 2, seed);
}

Split split_from(const std::string& s) {
    Split sp = parse_split(s);
    if (sp == Split::unassigned) throw ValidationError("choose a split: train, val or test");
    return sp;
}

void print_epoch(const EpochRecord& r) {
    std::cerr << "epoch " << r.epoch << " train " << r.train_total << " (e " << r.train_e << ", p " << r.train_p
              << ", v " << r.train_v << ") val " << r.val_total << '\n';
}

// ---------------------------------------------------------------- synth-data

struct SynthArgs {
    std::string vocab = "ck";
    int pairs = 50;
    std::uint64_t seed = 0;
    std::string out;
    int expr_dim = 50;
    int shape_dim = 100;
    int subjects = 20;
    double noise = 0.05;
    double jitter = 0.02;
    double center_scale = 0.3;
    double jaw_center_scale = 0.1;
    std::vector<std::string> multipliers;
    int emb_length = 16;
    int emb_dim = 64;
    std::uint64_t emb_seed = 0;
    double test_frac = 0.1;
    double val_frac = 0.1;
    std::uint64_t split_seed = 0;
    bool write_embeddings = false;
};

int cmd_synth(const SynthArgs& a, const json& resolved) {
    SyntheticGenConfig g;
    g.vocab = ExpressionVocabulary::named(a.vocab);
    g.samples_per_pair = a.pairs;
    g.seed = a.seed;
    g.expr_dim = a.expr_dim;
    g.shape_dim = a.shape_dim;
    g.n_subjects = a.subjects;
    g.noise_std = a.noise;
    g.global_pose_jitter_std = a.jitter;
    g.center_scale = a.center_scale;
    g.jaw_center_scale = a.jaw_center_scale;
    for (const auto& m : a.multipliers) {
        const auto eq = m.find('=');
        if (eq == std::string::npos) throw ValidationError("multiplier must be label=value, got '" + m + "'");
        try {
            g.class_multipliers[m.substr(0, eq)] = std::stod(m.substr(eq + 1));
        } catch (const std::exception&) {
            throw ValidationError("bad multiplier value in '" + m + "'");
        }
    }
    g.embedding = {{"provider", "hash"}, {"seed", a.emb_seed}, {"length", a.emb_length}, {"dim", a.emb_dim}};
    const fs::path out = a.out.empty() ? fs::path(default_data_root()) : fs::path(a.out);

    DatasetManifest m = split(generate_synthetic(g), a.test_frac, a.val_frac, a.split_seed);
    if (a.write_embeddings) {
        auto provider = dataset_provider(m);
        save_dataset_embeddings(m, *provider, out / "embeddings");
        m.embedding = {{"provider", "lookup"}, {"archive", "embeddings"}};
    }
    save_dataset(m, out);
    write_json(out / "resolved_config.json", resolved);
    json summary = {{"dataset", (out / "dataset.json").string()},
                    {"samples", m.size()},
                    {"train", m.indices(Split::train).size()},
                    {"val", m.indices(Split::val).size()},
                    {"test", m.indices(Split::test).size()},
                    {"class_histogram", class_histogram(m)}};
    std::cout << summary.dump(2) << '\n';
    return 0;
}

// --------------------------------------------------------------------- train

struct ModelArgs {
    int model_dim = 64;
    int heads = 4;
    int facial_layers = 2;
    int text_layers = 1;
    int caft_layers = 1;
    int latent = 16;
    int hidden = 256;
    bool positional = true;

    void bind(Options& o) {
        o.add("model_dim", "--model-dim", model_dim, "IFED attention width");
        o.add("heads", "--heads", heads, "attention heads");
        o.add("facial_layers", "--facial-layers", facial_layers, "facial-branch transformer layers (N)");
        o.add("text_layers", "--text-layers", text_layers, "text-branch transformer layers (M)");
        o.add("caft_layers", "--caft-layers", caft_layers, "stacked cross-attention fusion layers");
        o.add("latent", "--latent", latent, "latent width");
        o.add("hidden", "--hidden", hidden, "encoder/decoder MLP hidden width");
        o.flag("positional", "--positional,!--no-positional", positional, "learned positional embedding over tokens");
    }

    I2fetConfig config() const {
        I2fetConfig c;
        c.model_dim = model_dim;
        c.heads = heads;
        c.n_facial_layers = facial_layers;
        c.n_text_layers = text_layers;
        c.n_caft_layers = caft_layers;
        c.latent_dim = latent;
        c.hidden = hidden;
        c.use_positional_embedding = positional;
        return c;
    }
};

struct TrainArgs {
    std::string data;
    std::string out;
    int epochs = 200;
    int batch_size = 128;
    double lr = 8e-4;
    std::uint64_t seed = 0;
    bool pose_loss = true;
    bool vertex_loss = true;
    bool ifed = true;
    ModelArgs model;
    std::string head_model;
    int head_vertices = 32;
    std::uint64_t head_seed = 0;
    bool quiet = false;

    TrainConfig train_config() const {
        TrainConfig t;
        t.epochs = epochs;
        t.batch_size = batch_size;
        t.learning_rate = lr;
        t.seed = seed;
        t.flags.use_pose_loss = pose_loss;
        t.flags.use_vertex_loss = vertex_loss;
        t.ifed_enabled = ifed;
        return t;
    }
};

int cmd_train(const TrainArgs& a, const json& resolved) {
    const fs::path data_dir = a.data.empty() ? fs::path(default_data_root()) : fs::path(a.data);
    if (a.out.empty()) throw ValidationError("--out is required");
    DatasetManifest data = load_params_dataset(data_dir);
    auto provider = dataset_provider(data, data_dir);
    HeadModel head = make_head(a.head_model, a.head_vertices, a.head_seed, data);

    I2fetConfig mc = a.model.config();
    mc.ifed_enabled = a.ifed;
    mc.expr_dim = data.expr_dim;
    mc.pose_dim = data.pose_dim;
    mc.text_dim = provider->dim();
    TrainConfig tc = a.train_config();
    I2fetModel model(mc, derive_seed(tc.seed, {0x1f2e}));
    EpochCallback cb;
    if (!a.quiet) cb = print_epoch;
    TrainingLog log = train(model, data, *provider, &head, tc, cb);

    const fs::path out(a.out);
    save_bundle(out, model, head, data, portable_embedding(data),
                {{"data", absolute_string(data_dir)}, {"best_epoch", log.best_epoch}, {"train", tc.to_json()}});
    log.write_csv(out / "training_log.csv");
    write_json(out / "resolved_config.json", resolved);
    const auto& last = log.epochs.back();
    std::cout << json{{"model", out.string()},
                      {"epochs", log.epochs.size()},
                      {"best_epoch", log.best_epoch},
                      {"final_train_total", last.train_total},
                      {"final_val_total", last.val_total}}
                     .dump(2)
              << '\n';
    return 0;
}

// ----------------------------------------------------------------- train-ned

struct NedArgs {
    std::string out;
    int samples = 500;
    int epochs = 100;
    int batch_size = 64;
    double lr = 1e-3;
    std::uint64_t seed = 0;
    double noise = 0.05;
    int expr_dim = 50;
    int pose_dim = 6;
    int latent = 16;
    std::string neutral_file;
};

int cmd_train_ned(const NedArgs& a, const json& resolved) {
    if (a.out.empty()) throw ValidationError("--out is required");
    NedConfig c;
    c.expr_dim = a.expr_dim;
    c.pose_dim = a.pose_dim;
    c.latent_dim = a.latent;
    c.epochs = a.epochs;
    c.batch_size = a.batch_size;
    c.learning_rate = a.lr;
    c.seed = a.seed;
    Eigen::MatrixXd samples;
    json source;
    if (!a.neutral_file.empty()) {
        // {"samples": [[e..., θ...], ...]}
        json j = read_json(a.neutral_file);
        const auto rows = j.at("samples").get<std::vector<std::vector<double>>>();
        samples.resize(static_cast<Eigen::Index>(rows.size()), a.expr_dim + a.pose_dim);
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (static_cast<int>(rows[i].size()) != a.expr_dim + a.pose_dim)
                throw ValidationError("neutral sample " + std::to_string(i) + " has " + std::to_string(rows[i].size()) +
                                      " entries, expected " + std::to_string(a.expr_dim + a.pose_dim));
            for (std::size_t k = 0; k < rows[i].size(); ++k)
                samples(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = rows[i][k];
        }
        source = {{"file", absolute_string(a.neutral_file)}};
    } else {
        NeutralSet set = generate_neutral_samples(a.samples, a.expr_dim, a.pose_dim, a.noise, a.seed);
        samples = set.params;
        source = {{"synthetic", true},
                  {"center", std::vector<double>(set.center.data(), set.center.data() + set.center.size())},
                  {"noise_std", a.noise}};
    }
    NedTrainLog log;
    NedModel ned = train_ned(samples, c, &log);
    const fs::path out(a.out);
    ensure_dir(out);
    ned.save(out / "ned");
    std::ostringstream csv;
    csv.precision(17);
    csv << "epoch,mse\n";
    for (std::size_t i = 0; i < log.epoch_mse.size(); ++i) csv << i + 1 << ',' << log.epoch_mse[i] << '\n';
    write_text(out / "ned_log.csv", csv.str());
    const double first = log.epoch_mse.front(), last = log.epoch_mse.back();
    json info = {{"source", source},
                 {"epoch1_mse", first},
                 {"final_mse", last},
                 {"reduction", 1.0 - last / first},
                 {"ned", "ned"}};
    write_json(out / "ned.json", info);
    write_json(out / "resolved_config.json", resolved);
    std::cout << info.dump(2) << '\n';
    return 0;
}

// ----------------------------------------------------------------------- gen

struct GenArgs {
    std::string model;
    std::string text;
    std::string from;
    std::string to;
    int template_id = 1;
    std::string source;
    int frames = 10;
    std::uint64_t seed = 0;
    std::string obj;
    std::string out;
    std::string ned;
    std::uint64_t ned_seed = 0;
};

int cmd_gen(const GenArgs& a, const json& resolved) {
    if (a.model.empty()) throw ValidationError("--model is required");
    ModelBundle b = load_bundle(a.model);
    std::string text = a.text;
    if (text.empty()) {
        if (a.from.empty() || a.to.empty()) throw ValidationError("give --text or both --from and --to");
        text = render_instruction(a.template_id, a.from, a.to, b.vocab).text;
    } else if (!a.from.empty() || !a.to.empty()) {
        throw ValidationError("--text cannot be combined with --from/--to");
    }
    auto provider = make_provider(b.embedding);
    const TextEmbedding x_t = provider->embed(canonical_instruction_text(text));
    const AnchorPair anchors = generate(b.model, x_t, a.seed);

    FaceParams source = a.source.empty() ? FaceParams::zeros(b.head) : load_face_params(a.source, b.head);
    std::vector<ExpressionAnchor> list = {{anchors.e0, anchors.theta0}, {anchors.e1, anchors.theta1}};
    Trajectory traj;
    if (a.ned.empty()) {
        traj = build_trajectory(source, list, a.frames);
    } else {
        NedModel ned = NedModel::load(fs::path(a.ned) / "ned");
        traj = insert_neutral(source, list, a.frames, ned, a.ned_seed);
    }

    fs::path out = a.out.empty() ? (a.obj.empty() ? fs::path("trajectory.json") : fs::path(a.obj) / "trajectory.json")
                                 : fs::path(a.out);
    json tj = trajectory_to_json(traj);
    tj["instruction"] = text;
    tj["seed"] = a.seed;
    write_json(out, tj);
    int written = 0;
    if (!a.obj.empty()) written = write_obj_sequence(traj, b.head, a.obj);
    write_json(out.parent_path().empty() ? fs::path("resolved_config.json") : out.parent_path() / "resolved_config.json",
               resolved);
    std::cout << json{{"instruction", text},
                      {"frames", traj.frames.size()},
                      {"anchor_indices", traj.anchor_indices},
                      {"obj_files", written},
                      {"trajectory", out.string()}}
                     .dump(2)
              << '\n';
    return 0;
}

// ---------------------------------------------------------------------- eval

struct EvalArgs {
    std::string model;
    std::string data;
    int repeats = 1;
    std::uint64_t seed = 0;
    std::string classifier = "oracle";
    std::string split = "test";
    std::string out;
    int clf_epochs = 40;
    std::uint64_t clf_seed = 0;
};

std::unique_ptr<ExpressionClassifier> make_classifier(const std::string& kind, const DatasetManifest& data,
                                                      int epochs, std::uint64_t seed) {
    if (kind == "oracle") return std::make_unique<NearestCenterOracle>(data);
    if (kind == "mlp") {
        auto [x, y] = classification_examples(data, data.indices(Split::train));
        ClassifierConfig cfg;
        cfg.epochs = epochs;
        cfg.seed = seed;
        return std::make_unique<ClassifierModel>(train_classifier(x, y, data.vocab.size(), cfg));
    }
    throw ValidationError("unknown classifier '" + kind + "' (use oracle or mlp)");
}

int cmd_eval(const EvalArgs& a, const json& resolved) {
    if (a.model.empty()) throw ValidationError("--model is required");
    if (a.repeats < 1) throw ValidationError("--repeats must be >= 1");
    ModelBundle b = load_bundle(a.model);
    const fs::path data_dir = !a.data.empty() ? fs::path(a.data)
                              : b.meta.contains("data") ? fs::path(b.meta.at("data").get<std::string>())
                                                        : fs::path(default_data_root());
    DatasetManifest data = load_params_dataset(data_dir);
    if (data.vocab != b.vocab) throw ValidationError("dataset vocabulary differs from the model's");
    auto provider = dataset_provider(data, data_dir);
    auto clf = make_classifier(a.classifier, data, a.clf_epochs, a.clf_seed);
    const auto indices = data.indices(split_from(a.split));

    std::vector<MetricsReport> gen, gt;
    json runs = json::array();
    std::ostringstream csv;
    csv.precision(17);
    csv << "repeat,acc1,acc2,gmean\n";
    for (int r = 0; r < a.repeats; ++r) {
        GenerationEval e = evaluate_generation(b.model, data, indices, *provider, *clf, a.seed, r);
        runs.push_back(e.generated.to_json(data.vocab));
        csv << r << ',' << e.generated.acc1 << ',' << e.generated.acc2 << ',' << e.generated.gmean << '\n';
        gen.push_back(e.generated);
        gt.push_back(e.ground_truth);
    }
    const fs::path out = a.out.empty() ? fs::path(a.model) / "eval" : fs::path(a.out);
    json metrics = summarize_repeats(gen);
    metrics["ground_truth"] = gt.front().to_json(data.vocab);
    metrics["classifier"] = a.classifier;
    metrics["split"] = a.split;
    metrics["samples"] = indices.size();
    metrics["runs"] = runs;
    write_json(out / "metrics.json", metrics);
    write_text(out / "metrics.csv", csv.str());
    write_text(out / "confusion.csv", gen.front().confusion_csv(data.vocab));
    write_json(out / "resolved_config.json", resolved);
    json brief = summarize_repeats(gen);
    brief["ground_truth_acc1"] = gt.front().acc1;
    brief["metrics"] = (out / "metrics.json").string();
    std::cout << brief.dump(2) << '\n';
    return 0;
}

// -------------------------------------------------------------------- ablate

struct AblateArgs {
    std::string data;
    std::string out;
    std::string grid = "all";
    int seeds = 3;
    std::uint64_t seed = 0;
    int epochs = 50;
    int batch_size = 128;
    double lr = 8e-4;
    ModelArgs model;
    std::uint64_t eval_seed = 0;
    int head_vertices = 32;
    std::uint64_t head_seed = 0;
    bool quiet = false;
};

struct Setting {
    std::string group, name;
    I2fetConfig model;
    TrainConfig train;
};

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

int cmd_ablate(const AblateArgs& a, const json& resolved) {
    if (a.out.empty()) throw ValidationError("--out is required");
    if (a.seeds < 1) throw ValidationError("--seeds must be >= 1");
    const fs::path data_dir = a.data.empty() ? fs::path(default_data_root()) : fs::path(a.data);
    DatasetManifest data = load_params_dataset(data_dir);
    auto provider = dataset_provider(data, data_dir);
    HeadModel head = synth_model(a.head_vertices, data.shape_dim, data.expr_dim, 2, a.head_seed);
    NearestCenterOracle oracle(data);

    TrainConfig base;
    base.epochs = a.epochs;
    base.batch_size = a.batch_size;
    base.learning_rate = a.lr;
    base.flags.use_vertex_loss = false;
    const I2fetConfig mbase = a.model.config();

    const std::vector<std::string> known = {"ifed", "loss", "caft", "layers"};
    std::vector<std::string> groups;
    if (a.grid == "all")
        groups = known;
    else if (std::find(known.begin(), known.end(), a.grid) != known.end())
        groups = {a.grid};
    else
        throw ValidationError("unknown grid '" + a.grid + "' (ifed, loss, caft, layers, all)");

    std::vector<Setting> settings;
    for (const auto& g : groups) {
        if (g == "ifed") {
            for (bool on : {false, true}) {
                Setting s{g, on ? "with_ifed" : "without_ifed", mbase, base};
                s.train.ifed_enabled = on;
                settings.push_back(s);
            }
        } else if (g == "loss") {
            for (int k = 0; k < 3; ++k) {
                Setting s{g, k == 0 ? "L_e" : k == 1 ? "L_e+L_p" : "L_e+L_p+L_v", mbase, base};
                s.train.flags.use_pose_loss = k >= 1;
                s.train.flags.use_vertex_loss = k == 2;
                settings.push_back(s);
            }
        } else if (g == "caft") {
            for (int n : {1, 2, 3}) {
                Setting s{g, "caft_" + std::to_string(n), mbase, base};
                s.model.n_caft_layers = n;
                settings.push_back(s);
            }
        } else {
            for (auto [n, m] : std::vector<std::pair<int, int>>{{1, 1}, {2, 1}, {2, 2}, {3, 1}}) {
                Setting s{g, "N" + std::to_string(n) + "_M" + std::to_string(m), mbase, base};
                s.model.n_facial_layers = n;
                s.model.n_text_layers = m;
                settings.push_back(s);
            }
        }
    }

    json rows = json::array();
    std::ostringstream csv;
    csv.precision(17);
    csv << "group,setting,seed,acc1,acc2,gmean,train_seconds\n";
    for (const auto& s : settings) {
        std::vector<double> acc1, acc2, gm;
        json runs = json::array();
        for (int k = 0; k < a.seeds; ++k) {
            TrainConfig tc = s.train;
            tc.seed = a.seed + static_cast<std::uint64_t>(k);
            if (!a.quiet) std::cerr << s.group << '/' << s.name << " seed " << tc.seed << '\n';
            ExperimentResult r = run_experiment(data, *provider, &head, s.model, tc, oracle, a.eval_seed);
            const auto& m = r.eval.generated;
            acc1.push_back(m.acc1);
            acc2.push_back(m.acc2);
            gm.push_back(m.gmean);
            const auto& last = r.log.epochs.back();
            runs.push_back({{"seed", tc.seed},
                            {"acc1", m.acc1},
                            {"acc2", m.acc2},
                            {"gmean", m.gmean},
                            {"train_seconds", r.train_seconds},
                            {"final_val_e", last.val_e},
                            {"final_val_p", last.val_p},
                            {"final_val_v", last.val_v}});
            csv << s.group << ',' << s.name << ',' << tc.seed << ',' << m.acc1 << ',' << m.acc2 << ',' << m.gmean << ','
                << r.train_seconds << '\n';
        }
        rows.push_back({{"group", s.group},
                        {"setting", s.name},
                        {"model", s.model.to_json()},
                        {"train", s.train.to_json()},
                        {"median_acc1", median(acc1)},
                        {"median_acc2", median(acc2)},
                        {"median_gmean", median(gm)},
                        {"runs", runs}});
    }
    const fs::path out(a.out);
    write_json(out / "ablation.json", {{"data", absolute_string(data_dir)}, {"settings", rows}});
    write_text(out / "ablation.csv", csv.str());
    write_json(out / "resolved_config.json", resolved);
    json brief = json::array();
    for (const auto& r : rows)
        brief.push_back({{"group", r["group"]}, {"setting", r["setting"]}, {"median_acc1", r["median_acc1"]}});
    std::cout << brief.dump(2) << '\n';
    return 0;
}

// ------------------------------------------------------------ export-latents

struct LatentArgs {
    std::string model;
    std::string data;
    std::string split = "test";
    std::string out;
};

int cmd_export_latents(const LatentArgs& a, const json& resolved) {
    if (a.model.empty() || a.out.empty()) throw ValidationError("--model and --out are required");
    ModelBundle b = load_bundle(a.model);
    const fs::path data_dir = !a.data.empty() ? fs::path(a.data)
                              : b.meta.contains("data") ? fs::path(b.meta.at("data").get<std::string>())
                                                        : fs::path(default_data_root());
    DatasetManifest data = load_params_dataset(data_dir);
    auto provider = dataset_provider(data, data_dir);
    const fs::path out(a.out);
    if (out.has_parent_path()) ensure_dir(out.parent_path());
    const auto indices = data.indices(split_from(a.split));
    export_latents(b.model, data, indices, *provider, out);
    write_json(out.parent_path().empty() ? fs::path("resolved_config.json") : out.parent_path() / "resolved_config.json",
               resolved);
    std::cout << json{{"latents", out.string()}, {"samples", indices.size()}}.dump(2) << '\n';
    return 0;
}

int dispatch(std::vector<std::string> args) {
    CLI::App app{"Instruction-driven 3D facial expression transition toolkit", "fet"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Show help for every subcommand");

    SynthArgs synth;
    auto* c_synth = app.add_subcommand("synth-data", "Generate a synthetic instruction dataset");
    Options o_synth(c_synth);
    o_synth.add("vocab", "--vocab", synth.vocab, "vocabulary: ck, celebv or a JSON file");
    o_synth.add("pairs", "--pairs", synth.pairs, "samples per ordered expression pair");
    o_synth.add("seed", "--seed", synth.seed, "generator seed");
    o_synth.add("out", "--out", synth.out, "output directory (default $FET_DATA_ROOT or ./data)");
    o_synth.add("expr_dim", "--expr-dim", synth.expr_dim, "expression coefficients");
    o_synth.add("shape_dim", "--shape-dim", synth.shape_dim, "shape coefficients");
    o_synth.add("subjects", "--subjects", synth.subjects, "distinct identities");
    o_synth.add("noise", "--noise", synth.noise, "anchor noise std around class centers");
    o_synth.add("jitter", "--jitter", synth.jitter, "global rotation jitter std (radians)");
    o_synth.add("center_scale", "--center-scale", synth.center_scale, "expression center std");
    o_synth.add("jaw_center_scale", "--jaw-center-scale", synth.jaw_center_scale, "jaw center std");
    o_synth.add("multipliers", "--multiplier", synth.multipliers, "label=factor class frequency skew (repeatable)");
    o_synth.add("emb_length", "--emb-length", synth.emb_length, "embedding rows per instruction");
    o_synth.add("emb_dim", "--emb-dim", synth.emb_dim, "embedding width");
    o_synth.add("emb_seed", "--emb-seed", synth.emb_seed, "hashing embedding seed");
    o_synth.add("test_frac", "--test-frac", synth.test_frac, "test fraction");
    o_synth.add("val_frac", "--val-frac", synth.val_frac, "validation fraction of the remainder");
    o_synth.add("split_seed", "--split-seed", synth.split_seed, "split shuffle seed");
    o_synth.flag("write_embeddings", "--write-embeddings", synth.write_embeddings,
                 "store an embedding archive and reference it from the dataset");

    TrainArgs tr;
    auto* c_train = app.add_subcommand("train", "Train the generator");
    Options o_train(c_train);
    o_train.add("data", "--data", tr.data, "dataset directory (default $FET_DATA_ROOT or ./data)");
    o_train.add("out", "--out", tr.out, "model output directory");
    o_train.add("epochs", "--epochs", tr.epochs, "training epochs");
    o_train.add("batch_size", "--batch-size", tr.batch_size, "minibatch size");
    o_train.add("lr", "--lr", tr.lr, "Adam learning rate");
    o_train.add("seed", "--seed", tr.seed, "training seed");
    o_train.flag("pose_loss", "--pose-loss,!--no-pose-loss", tr.pose_loss, "include the pose term");
    o_train.flag("vertex_loss", "--vertex-loss,!--no-vertex-loss", tr.vertex_loss, "include the vertex term");
    o_train.flag("ifed", "--ifed,!--no-ifed", tr.ifed, "use the decomposer for conditioning");
    tr.model.bind(o_train);
    o_train.add("head_model", "--head-model", tr.head_model, "head model archive (default: synthetic)");
    o_train.add("head_vertices", "--head-vertices", tr.head_vertices, "vertices of the synthetic head model");
    o_train.add("head_seed", "--head-seed", tr.head_seed, "synthetic head model seed");
    o_train.flag("quiet", "--quiet", tr.quiet, "suppress per-epoch progress");

    NedArgs ned;
    auto* c_ned = app.add_subcommand("train-ned", "Train the neutral encoder-decoder");
    Options o_ned(c_ned);
    o_ned.add("out", "--out", ned.out, "output directory");
    o_ned.add("samples", "--samples", ned.samples, "synthetic neutral samples");
    o_ned.add("epochs", "--epochs", ned.epochs, "training epochs");
    o_ned.add("batch_size", "--batch-size", ned.batch_size, "minibatch size");
    o_ned.add("lr", "--lr", ned.lr, "Adam learning rate");
    o_ned.add("seed", "--seed", ned.seed, "seed");
    o_ned.add("noise", "--noise", ned.noise, "synthetic neutral spread");
    o_ned.add("expr_dim", "--expr-dim", ned.expr_dim, "expression coefficients");
    o_ned.add("pose_dim", "--pose-dim", ned.pose_dim, "pose coefficients");
    o_ned.add("latent", "--latent", ned.latent, "latent width");
    o_ned.add("neutral_file", "--neutral-file", ned.neutral_file, "JSON {\"samples\": [[e..., theta...], ...]}");

    GenArgs gen;
    auto* c_gen = app.add_subcommand("gen", "Generate an expression trajectory and meshes");
    Options o_gen(c_gen);
    o_gen.add("model", "--model", gen.model, "model directory");
    o_gen.add("text", "--text", gen.text, "instruction text");
    o_gen.add("from", "--from", gen.from, "source expression label");
    o_gen.add("to", "--to", gen.to, "target expression label");
    o_gen.add("template", "--template", gen.template_id, "instruction template 1-5");
    o_gen.add("source", "--source", gen.source, "source face parameters JSON");
    o_gen.add("frames", "--frames", gen.frames, "interpolated frames per segment");
    o_gen.add("seed", "--seed", gen.seed, "latent sampling seed");
    o_gen.add("obj", "--obj", gen.obj, "directory for the OBJ sequence");
    o_gen.add("out", "--out", gen.out, "trajectory JSON path (default <obj>/trajectory.json)");
    o_gen.add("ned", "--ned", gen.ned, "NED directory; inserts a neutral between anchors");
    o_gen.add("ned_seed", "--ned-seed", gen.ned_seed, "neutral sampling seed");

    EvalArgs ev;
    auto* c_eval = app.add_subcommand("eval", "Score generated anchors against instruction labels");
    Options o_eval(c_eval);
    o_eval.add("model", "--model", ev.model, "model directory");
    o_eval.add("data", "--data", ev.data, "dataset directory (default: the training dataset)");
    o_eval.add("repeats", "--repeats", ev.repeats, "repetitions with distinct latent draws");
    o_eval.add("seed", "--seed", ev.seed, "evaluation seed");
    o_eval.add("classifier", "--classifier", ev.classifier, "oracle (nearest class center) or mlp");
    o_eval.add("split", "--split", ev.split, "train, val or test");
    o_eval.add("out", "--out", ev.out, "output directory (default <model>/eval)");
    o_eval.add("clf_epochs", "--clf-epochs", ev.clf_epochs, "classifier epochs (mlp)");
    o_eval.add("clf_seed", "--clf-seed", ev.clf_seed, "classifier seed (mlp)");

    AblateArgs ab;
    auto* c_ablate = app.add_subcommand("ablate", "Run ablation grids");
    Options o_ablate(c_ablate);
    o_ablate.add("data", "--data", ab.data, "dataset directory");
    o_ablate.add("out", "--out", ab.out, "output directory");
    o_ablate.add("grid", "--grid", ab.grid, "ifed, loss, caft, layers or all");
    o_ablate.add("seeds", "--seeds", ab.seeds, "seeds per setting");
    o_ablate.add("seed", "--seed", ab.seed, "first seed");
    o_ablate.add("epochs", "--epochs", ab.epochs, "training epochs");
    o_ablate.add("batch_size", "--batch-size", ab.batch_size, "minibatch size");
    o_ablate.add("lr", "--lr", ab.lr, "Adam learning rate");
    ab.model.bind(o_ablate);
    o_ablate.add("eval_seed", "--eval-seed", ab.eval_seed, "evaluation seed");
    o_ablate.add("head_vertices", "--head-vertices", ab.head_vertices, "vertices of the synthetic head model");
    o_ablate.add("head_seed", "--head-seed", ab.head_seed, "synthetic head model seed");
    o_ablate.flag("quiet", "--quiet", ab.quiet, "suppress progress");

    LatentArgs lat;
    auto* c_lat = app.add_subcommand("export-latents", "Write posterior means per sample as CSV");
    Options o_lat(c_lat);
    o_lat.add("model", "--model", lat.model, "model directory");
    o_lat.add("data", "--data", lat.data, "dataset directory (default: the training dataset)");
    o_lat.add("split", "--split", lat.split, "train, val or test");
    o_lat.add("out", "--out", lat.out, "CSV path");

    std::reverse(args.begin(), args.end());
    try {
        app.parse(args);
    } catch (const CLI::CallForHelp&) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        std::cout << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n";
        const CLI::App* sub = nullptr;
        for (const auto* s : app.get_subcommands()) sub = s;
        std::cerr << (sub ? sub->help() : app.help());
        return 1;
    }

    if (c_synth->parsed()) {
        o_synth.apply_config("synth-data");
        return cmd_synth(synth, o_synth.resolved("synth-data"));
    }
    if (c_train->parsed()) {
        o_train.apply_config("train");
        return cmd_train(tr, o_train.resolved("train"));
    }
    if (c_ned->parsed()) {
        o_ned.apply_config("train-ned");
        return cmd_train_ned(ned, o_ned.resolved("train-ned"));
    }
    if (c_gen->parsed()) {
        o_gen.apply_config("gen");
        return cmd_gen(gen, o_gen.resolved("gen"));
    }
    if (c_eval->parsed()) {
        o_eval.apply_config("eval");
        return cmd_eval(ev, o_eval.resolved("eval"));
    }
    if (c_ablate->parsed()) {
        o_ablate.apply_config("ablate");
        return cmd_ablate(ab, o_ablate.resolved("ablate"));
    }
    o_lat.apply_config("export-latents");
    return cmd_export_latents(lat, o_lat.resolved("export-latents"));
}

}  // namespace

int run(const std::vector<std::string>& args) {
    try {
        return dispatch(args);
    } catch (const IoError& e) {
        std::cerr << "I/O error: " << e.what() << '\n';
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}

int run(int argc, char** argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run(args);
}

}  // namespace fet::cli
