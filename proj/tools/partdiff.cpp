#include <CLI11.hpp>
#include <json.hpp>

#include "partdiff/dataset.hpp"
#include "partdiff/metrics.hpp"
#include "partdiff/pipeline.hpp"
#include "partdiff/service.hpp"
#include "partdiff/train.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <thread>

namespace fs = std::filesystem;
using namespace partdiff;
using nlohmann::json;

namespace {

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    return json::parse(in);
}

void write_json(const fs::path& path, const json& j) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << j.dump(2) << "\n";
}

std::vector<SegmentedCloud> read_record_dir(const fs::path& dir, int m) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().extension() == ".txt") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    std::vector<SegmentedCloud> out;
    for (const auto& f : files) out.push_back(read_shape_record(f, m));
    return out;
}

void write_record(const fs::path& path, const SegmentedCloud& cloud) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    write_shape_record(path, cloud);
}

std::string numbered(const std::string& stem, std::size_t i) {
    std::ostringstream s;
    s << stem << "_" << std::setw(3) << std::setfill('0') << i << ".txt";
    return s.str();
}

std::vector<int> parse_parts(const std::string& text) {
    std::vector<int> parts;
    std::stringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
        if (!item.empty()) parts.push_back(std::stoi(item));
    }
    return parts;
}

int component_index(const std::string& name) {
    static const std::vector<std::string> names{"shift_x", "shift_y", "shift_z", "scale_x", "scale_y", "scale_z"};
    auto it = std::find(names.begin(), names.end(), name);
    if (it != names.end()) return static_cast<int>(it - names.begin());
    return std::stoi(name);
}

/// "part:component:value", component a name like scale_y or an index 0..5.
TransformConstraint parse_constraint(const std::string& text) {
    const auto a = text.find(':');
    const auto b = text.find(':', a + 1);
    if (a == std::string::npos || b == std::string::npos) throw std::invalid_argument("constraint must be part:component:value");
    return {std::stoi(text.substr(0, a)), component_index(text.substr(a + 1, b - a - 1)), std::stod(text.substr(b + 1))};
}

struct TrainFlags {
    std::string config_path;
    std::string profile = "desk";
    std::optional<int> batch_size, epochs, recache_every, candidates;
    std::optional<double> lr, lr_final, lambda1, lambda2, clip_norm;
};

TrainConfig resolve_train_config(const TrainFlags& f, int stage, const std::string& class_id, std::uint64_t seed) {
    json j = f.config_path.empty() ? json{{"profile", f.profile}} : read_json(f.config_path);
    if (!j.contains("profile")) j["profile"] = f.profile;
    auto cfg = TrainConfig::from_json(j, class_id);
    if (f.batch_size) cfg.batch_size = *f.batch_size;
    if (f.epochs) (stage == 1 ? cfg.stage1_epochs : cfg.stage2_epochs) = *f.epochs;
    if (f.lr) (stage == 1 ? cfg.lr : cfg.stage2_lr) = *f.lr;
    if (f.lr_final) cfg.lr_final = *f.lr_final;
    if (f.lambda1) cfg.lambda1 = *f.lambda1;
    if (f.lambda2) cfg.lambda2 = *f.lambda2;
    if (f.recache_every) cfg.recache_every = *f.recache_every;
    if (f.candidates) cfg.candidates = *f.candidates;
    if (f.clip_norm) cfg.clip_norm = *f.clip_norm;
    cfg.seed = seed;
    return TrainConfig::from_json(cfg.to_json(), class_id);
}

}  // namespace

int main(int argc, char** argv) {
    torch::set_num_threads(1);
    CLI::App app{"Part-based point cloud generation: data, training, sampling, editing, evaluation and serving"};
    app.require_subcommand(1);

    // make-data
    auto* make_data = app.add_subcommand("make-data", "Synthesize the two-mode box-furniture dataset");
    std::string data_out;
    std::uint64_t data_seed = 0;
    int n_train = 256, n_test = 64, data_points = 512;
    bool with_arms = false;
    double mode1 = 0.5;
    make_data->add_option("--out", data_out, "Output directory")->required();
    make_data->add_option("--seed", data_seed, "Random seed")->required();
    make_data->add_option("--train", n_train, "Training shapes")->capture_default_str();
    make_data->add_option("--test", n_test, "Test shapes")->capture_default_str();
    make_data->add_option("--points", data_points, "Points per shape")->capture_default_str();
    make_data->add_option("--mode1-probability", mode1, "Share of low-back, tall-leg shapes")->capture_default_str();
    make_data->add_flag("--arms", with_arms, "Add an optional arms part");

    // train
    auto* train = app.add_subcommand("train", "Train stage 1 (stylizers, priors, denoiser) or stage 2 (sampler)");
    int stage = 1;
    std::string manifest, train_out, init_ckpt, model_config_path, log_path;
    std::uint64_t train_seed = 0;
    std::optional<int> point_budget;
    std::optional<double> amplifier;
    bool regression = false;
    int log_every = 10;
    TrainFlags tf;
    train->add_option("--stage", stage, "1 or 2")->required()->check(CLI::IsMember({1, 2}));
    train->add_option("--data", manifest, "Dataset manifest.json")->required()->check(CLI::ExistingFile);
    train->add_option("--out", train_out, "Output checkpoint")->required();
    train->add_option("--ckpt", init_ckpt, "Stage-1 checkpoint (stage 2)")->check(CLI::ExistingFile);
    train->add_option("--seed", train_seed, "Random seed")->required();
    train->add_option("--config", tf.config_path, "TrainConfig JSON")->check(CLI::ExistingFile);
    train->add_option("--profile", tf.profile, "desk or paper")->check(CLI::IsMember({"desk", "paper"}))->capture_default_str();
    train->add_option("--model-config", model_config_path, "ModelConfig JSON (stage 1)")->check(CLI::ExistingFile);
    train->add_option("--points", point_budget, "Points per training shape (default: model point budget)");
    train->add_option("--noise-amplifier", amplifier, "Sampler noise amplifier (default by class)");
    train->add_option("--batch-size", tf.batch_size);
    train->add_option("--epochs", tf.epochs, "Epochs of the selected stage");
    train->add_option("--lr", tf.lr, "Learning rate of the selected stage");
    train->add_option("--lr-final", tf.lr_final);
    train->add_option("--lambda1", tf.lambda1);
    train->add_option("--lambda2", tf.lambda2);
    train->add_option("--recache-every", tf.recache_every);
    train->add_option("--candidates", tf.candidates);
    train->add_option("--clip-norm", tf.clip_norm);
    train->add_flag("--regression", regression, "Stage 2 as direct regression (ablation)");
    train->add_option("--log-every", log_every, "Epochs between log lines")->capture_default_str();
    train->add_option("--log", log_path, "Also write per-epoch JSON lines here");

    // sample
    auto* sample = app.add_subcommand("sample", "Generate shapes");
    std::string sample_ckpt, sample_out;
    int sample_n = 8;
    std::uint64_t sample_seed = 0;
    std::vector<int> sample_counts;
    sample->add_option("--ckpt", sample_ckpt)->required()->check(CLI::ExistingFile);
    sample->add_option("--n", sample_n)->capture_default_str();
    sample->add_option("--out", sample_out, "Output directory")->required();
    sample->add_option("--seed", sample_seed)->required();
    sample->add_option("--part-counts", sample_counts, "Points per part")->delimiter(',');

    // encode
    auto* encode = app.add_subcommand("encode", "Encode a labeled shape into an edit session");
    std::string enc_ckpt, enc_shape, enc_out;
    encode->add_option("--ckpt", enc_ckpt)->required()->check(CLI::ExistingFile);
    encode->add_option("--shape", enc_shape, "Shape record (x y z label lines)")->required()->check(CLI::ExistingFile);
    encode->add_option("--out", enc_out, "Session JSON")->required();

    // edit
    auto* edit = app.add_subcommand("edit", "Edit an encoded shape");
    edit->require_subcommand(1);
    std::string edit_ckpt, edit_session, edit_out;
    std::uint64_t edit_seed = 0;
    edit->add_option("--ckpt", edit_ckpt)->required()->check(CLI::ExistingFile);
    edit->add_option("--session", edit_session, "Session JSON")->required()->check(CLI::ExistingFile);
    edit->add_option("--out", edit_out, "Output record (directory for interp)")->required();
    edit->add_option("--seed", edit_seed)->capture_default_str();
    auto* e_resample = edit->add_subcommand("resample", "Resample part styles");
    std::string parts_text;
    e_resample->add_option("--parts", parts_text, "Comma-separated part indices; empty reconstructs");
    auto* e_mix = edit->add_subcommand("mix", "Take parts from donor sessions");
    std::vector<std::string> donors, assigns;
    e_mix->add_option("--donor", donors, "Donor session JSON (repeatable)")->required()->check(CLI::ExistingFile);
    e_mix->add_option("--assign", assigns, "part=donor, donor indexing --donor from 0 (repeatable)");
    auto* e_interp = edit->add_subcommand("interp", "Interpolate one part's style toward a target session");
    std::string target_session;
    int interp_part = 0, interp_steps = 10;
    e_interp->add_option("--target", target_session, "Target session JSON")->required()->check(CLI::ExistingFile);
    e_interp->add_option("--part", interp_part)->required();
    e_interp->add_option("--steps", interp_steps)->capture_default_str();
    auto* e_transform = edit->add_subcommand("transform", "Optimize the sampler code toward transform targets");
    std::vector<std::string> constraint_text;
    int max_iters = 200;
    e_transform->add_option("--constraint", constraint_text, "part:component:value, component shift_x..scale_z")->required();
    e_transform->add_option("--max-iters", max_iters)->capture_default_str();

    // eval
    auto* eval = app.add_subcommand("eval", "Score generated shapes against references");
    std::string gen_dir, ref_dir, conn_path, eval_out;
    int eval_m = 4, eval_points = 512, workers = 1;
    eval->add_option("--generated", gen_dir)->required()->check(CLI::ExistingDirectory);
    eval->add_option("--reference", ref_dir)->required()->check(CLI::ExistingDirectory);
    eval->add_option("--connections", conn_path, "JSON: {\"connections\": [[part, partner], ...]} or a manifest")->required()->check(CLI::ExistingFile);
    eval->add_option("--m", eval_m, "Parts per shape")->capture_default_str();
    eval->add_option("--points-per-part", eval_points)->capture_default_str();
    eval->add_option("--workers", workers)->capture_default_str();
    eval->add_option("--out", eval_out, "JSON report");

    // serve
    auto* serve = app.add_subcommand("serve", "Serve the editing API over HTTP");
    std::string serve_ckpt, host = "127.0.0.1";
    int port = 8080, point_cap = 4096;
    std::size_t max_sessions = 64;
    serve->add_option("--ckpt", serve_ckpt)->required()->check(CLI::ExistingFile);
    serve->add_option("--host", host)->capture_default_str();
    serve->add_option("--port", port)->capture_default_str();
    serve->add_option("--max-sessions", max_sessions)->capture_default_str();
    serve->add_option("--point-cap", point_cap)->capture_default_str();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*make_data) {
            SynthTemplate tmpl;
            tmpl.points_per_shape = data_points;
            tmpl.with_arms = with_arms;
            tmpl.mode1_probability = mode1;
            std::vector<int> modes;
            auto data = synthesize_dataset(data_seed, n_train, tmpl, n_test, &modes);
            save_dataset(data_out, data);
            write_json(fs::path(data_out) / "modes.json", {{"modes", modes}});
            std::cout << "wrote " << data.train.size() << " train and " << data.test.size() << " test shapes to " << data_out << "\n";
        } else if (*train) {
            auto ds_manifest = read_manifest(manifest);
            std::unique_ptr<PartModel> model;
            if (stage == 1) {
                const double lambda = amplifier.value_or(default_noise_amplifier(ds_manifest.class_id));
                ModelConfig mc;
                if (!model_config_path.empty()) {
                    mc = ModelConfig::from_json(read_json(model_config_path));
                } else {
                    mc = tf.profile == "paper" ? ModelConfig::paper(ds_manifest.m, lambda) : ModelConfig::desk(ds_manifest.m, lambda);
                }
                if (amplifier) mc.sampler.lambda = *amplifier;
                mc.class_id = ds_manifest.class_id;
                mc.m = ds_manifest.m;
                mc.part_names = ds_manifest.part_names;
                if (point_budget) mc.point_budget = *point_budget;
                mc.sync();
                torch::manual_seed(train_seed);
                model = std::make_unique<PartModel>(mc);
            } else {
                if (init_ckpt.empty()) throw std::invalid_argument("stage 2 needs --ckpt");
                model = load_checkpoint(init_ckpt);
                if (model->config.m != ds_manifest.m) throw std::invalid_argument("checkpoint and dataset disagree on m");
            }
            auto data = load_dataset(manifest, point_budget.value_or(model->config.point_budget), train_seed);
            auto cfg = resolve_train_config(tf, stage, ds_manifest.class_id, train_seed);
            std::ofstream log_file;
            if (!log_path.empty()) log_file.open(log_path);
            const int total = stage == 1 ? cfg.stage1_epochs : cfg.stage2_epochs;
            auto log = [&](const EpochStats& s) {
                if (log_file) {
                    log_file << json{{"epoch", s.epoch}, {"recon", s.recon}, {"kl", s.kl}, {"fit", s.fit}, {"lr", s.lr}}.dump() << "\n";
                }
                if (s.epoch % std::max(log_every, 1) == 0 || s.epoch + 1 == total) {
                    std::cout << "epoch " << s.epoch;
                    if (stage == 1) std::cout << " recon " << s.recon << " kl " << s.kl << " lr " << s.lr;
                    else std::cout << " fit " << s.fit;
                    std::cout << std::endl;
                }
            };
            if (stage == 1) train_stage1(*model, data.train, cfg, log);
            else if (regression) train_direct_regression(*model, data.train, cfg, log);
            else train_stage2(*model, data.train, cfg, log);
            save_checkpoint(*model, train_out);
            std::cout << "saved " << train_out << "\n";
        } else if (*sample) {
            auto model = load_checkpoint(sample_ckpt);
            GenerateOptions o;
            o.n = sample_n;
            o.part_counts = sample_counts;
            for (int c : sample_counts) o.present.push_back(c > 0);
            auto gen = make_generator(sample_seed);
            auto result = generate(*model, o, gen);
            for (std::size_t i = 0; i < result.clouds.size(); ++i) write_record(fs::path(sample_out) / numbered("sample", i), result.clouds[i]);
            std::cout << "wrote " << result.clouds.size() << " shapes to " << sample_out << "\n";
        } else if (*encode) {
            auto model = load_checkpoint(enc_ckpt);
            auto shape = read_shape_record(enc_shape, model->config.m, model->config.class_id);
            write_json(enc_out, encode_shape(*model, shape).to_json());
        } else if (*edit) {
            auto model = load_checkpoint(edit_ckpt);
            auto session = EditSession::from_json(read_json(edit_session));
            auto gen = make_generator(edit_seed);
            if (*e_resample) {
                write_record(edit_out, resample_parts(*model, session, parse_parts(parts_text), gen).cloud);
            } else if (*e_mix) {
                std::vector<EditSession> donor_sessions;
                for (const auto& d : donors) donor_sessions.push_back(EditSession::from_json(read_json(d)));
                std::vector<const EditSession*> all{&session};
                for (const auto& d : donor_sessions) all.push_back(&d);
                std::map<int, int> assignment;
                for (const auto& a : assigns) {
                    const auto eq = a.find('=');
                    if (eq == std::string::npos) throw std::invalid_argument("--assign expects part=donor");
                    assignment[std::stoi(a.substr(0, eq))] = std::stoi(a.substr(eq + 1)) + 1;
                }
                write_record(edit_out, mix_parts(*model, all, assignment, gen).cloud);
            } else if (*e_interp) {
                auto target = EditSession::from_json(read_json(target_session));
                if (interp_part < 0 || interp_part >= target.part_count()) throw std::invalid_argument("part out of range");
                auto frames = interpolate_part(*model, session, interp_part, target.latents[interp_part], interp_steps, edit_seed);
                for (std::size_t k = 0; k < frames.size(); ++k) write_record(fs::path(edit_out) / numbered("frame", k), frames[k].cloud);
            } else if (*e_transform) {
                std::vector<TransformConstraint> cs;
                for (const auto& c : constraint_text) cs.push_back(parse_constraint(c));
                TransformEditOptions opt;
                opt.max_iters = max_iters;
                opt.seed = edit_seed;
                auto r = edit_transform(*model, session, cs, opt);
                write_record(edit_out, r.result.cloud);
                std::cout << "residual " << r.residual << (r.converged ? "" : " (not converged)") << "\n";
            }
        } else if (*eval) {
            auto conn = read_json(conn_path);
            const auto pairs = conn.at("connections").get<std::vector<std::pair<int, int>>>();
            auto generated = read_record_dir(gen_dir, eval_m);
            auto reference = read_record_dir(ref_dir, eval_m);
            EvaluationOptions opt;
            opt.points_per_part = eval_points;
            opt.workers = workers;
            auto report = evaluate(generated, reference, ConnectionSpec::from_pairs(pairs), opt);
            std::cout << format_report(report);
            if (!eval_out.empty()) {
                json parts = json::array();
                for (const auto& p : report.parts) {
                    parts.push_back({{"part", p.part}, {"reference_count", p.reference_count}, {"mmd_p", p.mmd}, {"cov_p", p.cov}, {"one_nna_p", p.nna}});
                }
                write_json(eval_out, {{"mmd_p", report.mmd},
                                      {"cov_p", report.cov},
                                      {"one_nna_p", report.nna},
                                      {"snap", report.snap},
                                      {"snap_connections", report.snap_connections},
                                      {"snap_skipped", report.snap_skipped},
                                      {"parts", parts}});
            }
        } else if (*serve) {
            ServiceOptions opt;
            opt.max_sessions = max_sessions;
            opt.point_cap = point_cap;
            Service service(opt);
            HttpServer server(service);
            if (server.bind(host, port) < 0) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
            std::thread loader([&] {
                // requests get 503 until this finishes
                service.set_model(std::shared_ptr<PartModel>(load_checkpoint(serve_ckpt)));
                std::cout << "serving " << serve_ckpt << " on http://" << host << ":" << port << std::endl;
            });
            server.listen();
            loader.join();
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
