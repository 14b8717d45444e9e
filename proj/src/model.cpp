#include "partdiff/model.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace partdiff {

static_assert(std::endian::native == std::endian::little, "checkpoint arrays are written in host order");

double default_noise_amplifier(const std::string& class_id) {
    if (class_id == "chair") return 100.0;
    if (class_id == "airplane" || class_id == "car") return 50.0;
    return 10.0;
}

ModelConfig ModelConfig::paper(int m, double lambda) {
    ModelConfig c;
    c.profile = "paper";
    c.m = m;
    c.point_budget = 2048;
    c.sampler.lambda = lambda;
    c.sync();
    return c;
}

ModelConfig ModelConfig::desk(int m, double lambda) {
    ModelConfig c;
    c.profile = "desk";
    c.m = m;
    c.point_budget = 256;
    c.stylizer.latent_dim = 64;
    c.stylizer.point_widths = {64, 128, 256};
    c.stylizer.head_widths = {128, 128};
    c.stylizer.flow_layers = 6;
    c.stylizer.flow_hidden = {128, 128};
    c.sampler.token_dim = 128;
    c.sampler.layers = 3;
    c.sampler.heads = 4;
    c.sampler.head_dim = 32;
    c.sampler.ff_dim = 256;
    c.sampler.lambda = lambda;
    c.denoiser.point_dim = 64;
    c.denoiser.layers = 3;
    c.denoiser.heads = 4;
    c.denoiser.head_dim = 16;
    c.denoiser.ff_dim = 128;
    c.denoiser.time_dim = 32;
    c.denoiser.dropout = 0.1;
    c.sync();
    return c;
}

void ModelConfig::sync() {
    stylizer.m = m;
    sampler.m = m;
    denoiser.m = m;
    sampler.latent_dim = stylizer.latent_dim;
    denoiser.latent_dim = stylizer.latent_dim;
    if (part_names.empty()) {
        for (int j = 0; j < m; ++j) part_names.push_back("part" + std::to_string(j));
    }
}

nlohmann::json ModelConfig::to_json() const {
    return {
        {"profile", profile},
        {"class_id", class_id},
        {"m", m},
        {"part_names", part_names},
        {"point_budget", point_budget},
        {"steps", steps},
        {"alpha_start", alpha_start},
        {"alpha_end", alpha_end},
        {"stylizer",
         {{"latent_dim", stylizer.latent_dim},
          {"point_widths", stylizer.point_widths},
          {"head_widths", stylizer.head_widths},
          {"flow_layers", stylizer.flow_layers},
          {"flow_hidden", stylizer.flow_hidden},
          {"bn_momentum", stylizer.bn_momentum},
          {"bn_eps", stylizer.bn_eps}}},
        {"sampler",
         {{"noise_dim", sampler.noise_dim},
          {"token_dim", sampler.token_dim},
          {"layers", sampler.layers},
          {"heads", sampler.heads},
          {"head_dim", sampler.head_dim},
          {"ff_dim", sampler.ff_dim},
          {"dropout", sampler.dropout},
          {"lambda", sampler.lambda}}},
        {"denoiser",
         {{"point_dim", denoiser.point_dim},
          {"layers", denoiser.layers},
          {"heads", denoiser.heads},
          {"head_dim", denoiser.head_dim},
          {"ff_dim", denoiser.ff_dim},
          {"time_dim", denoiser.time_dim},
          {"dropout", denoiser.dropout}}},
    };
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig c;
    const std::string profile = j.value("profile", std::string("desk"));
    const int m = j.value("m", 4);
    if (m < 1) throw std::invalid_argument("model config: m must be positive");
    c = profile == "paper" ? paper(m) : desk(m);
    c.part_names.clear();
    c.class_id = j.value("class_id", c.class_id);
    c.part_names = j.value("part_names", std::vector<std::string>{});
    c.point_budget = j.value("point_budget", c.point_budget);
    c.steps = j.value("steps", c.steps);
    c.alpha_start = j.value("alpha_start", c.alpha_start);
    c.alpha_end = j.value("alpha_end", c.alpha_end);
    if (j.contains("stylizer")) {
        const auto& s = j["stylizer"];
        c.stylizer.latent_dim = s.value("latent_dim", c.stylizer.latent_dim);
        c.stylizer.point_widths = s.value("point_widths", c.stylizer.point_widths);
        c.stylizer.head_widths = s.value("head_widths", c.stylizer.head_widths);
        c.stylizer.flow_layers = s.value("flow_layers", c.stylizer.flow_layers);
        c.stylizer.flow_hidden = s.value("flow_hidden", c.stylizer.flow_hidden);
        c.stylizer.bn_momentum = s.value("bn_momentum", c.stylizer.bn_momentum);
        c.stylizer.bn_eps = s.value("bn_eps", c.stylizer.bn_eps);
    }
    if (j.contains("sampler")) {
        const auto& s = j["sampler"];
        c.sampler.noise_dim = s.value("noise_dim", c.sampler.noise_dim);
        c.sampler.token_dim = s.value("token_dim", c.sampler.token_dim);
        c.sampler.layers = s.value("layers", c.sampler.layers);
        c.sampler.heads = s.value("heads", c.sampler.heads);
        c.sampler.head_dim = s.value("head_dim", c.sampler.head_dim);
        c.sampler.ff_dim = s.value("ff_dim", c.sampler.ff_dim);
        c.sampler.dropout = s.value("dropout", c.sampler.dropout);
        c.sampler.lambda = s.value("lambda", c.sampler.lambda);
    }
    if (j.contains("denoiser")) {
        const auto& s = j["denoiser"];
        c.denoiser.point_dim = s.value("point_dim", c.denoiser.point_dim);
        c.denoiser.layers = s.value("layers", c.denoiser.layers);
        c.denoiser.heads = s.value("heads", c.denoiser.heads);
        c.denoiser.head_dim = s.value("head_dim", c.denoiser.head_dim);
        c.denoiser.ff_dim = s.value("ff_dim", c.denoiser.ff_dim);
        c.denoiser.time_dim = s.value("time_dim", c.denoiser.time_dim);
        c.denoiser.dropout = s.value("dropout", c.denoiser.dropout);
    }
    if (c.sampler.lambda <= 0.0) throw std::invalid_argument("model config: lambda must be positive");
    c.sync();
    return c;
}

PartModel::PartModel(const ModelConfig& cfg)
    : config(cfg), schedule(DiffusionSchedule::linear(cfg.steps, cfg.alpha_start, cfg.alpha_end)) {
    config.sync();
    stylizer = Stylizer(config.stylizer);
    sampler = TransformSampler(config.sampler);
    denoiser = CrossDenoiser(config.denoiser);
}

void PartModel::train(bool on) {
    stylizer->train(on);
    sampler->train(on);
    denoiser->train(on);
}

void PartModel::to(torch::Dtype dtype) {
    stylizer->to(dtype);
    sampler->to(dtype);
    denoiser->to(dtype);
}

std::vector<std::pair<std::string, torch::Tensor>> PartModel::named_tensors() const {
    std::vector<std::pair<std::string, torch::Tensor>> out;
    auto add = [&](const std::string& prefix, const torch::nn::Module& module) {
        for (const auto& item : module.named_parameters(true)) out.emplace_back(prefix + item.key(), item.value());
        for (const auto& item : module.named_buffers(true)) out.emplace_back(prefix + item.key(), item.value());
    };
    add("stylizer.", *stylizer);
    add("sampler.", *sampler);
    add("denoiser.", *denoiser);
    return out;
}

ShapeBatch ShapeBatch::select(const torch::Tensor& index) const {
    return {world.index_select(0, index), canonical.index_select(0, index), labels.index_select(0, index),
            tau.index_select(0, index), present.index_select(0, index)};
}

ShapeBatch make_batch(const std::vector<SegmentedCloud>& shapes, torch::Dtype dtype) {
    if (shapes.empty()) throw std::invalid_argument("empty shape batch");
    const auto n = static_cast<int64_t>(shapes.front().size());
    const int m = shapes.front().part_count();
    const auto b = static_cast<int64_t>(shapes.size());
    auto f64 = torch::TensorOptions().dtype(torch::kFloat64);
    auto world = torch::empty({b, n, 3}, f64);
    auto canonical = torch::empty({b, n, 3}, f64);
    auto labels = torch::empty({b, n}, torch::TensorOptions().dtype(torch::kInt64));
    auto tau = torch::zeros({b, m, 6}, f64);
    auto present = torch::zeros({b, m}, torch::TensorOptions().dtype(torch::kBool));
    auto w = world.accessor<double, 3>();
    auto c = canonical.accessor<double, 3>();
    auto l = labels.accessor<int64_t, 2>();
    auto t = tau.accessor<double, 3>();
    for (int64_t s = 0; s < b; ++s) {
        const auto& shape = shapes[static_cast<std::size_t>(s)];
        if (static_cast<int64_t>(shape.size()) != n || shape.part_count() != m) {
            throw std::invalid_argument("shapes in a batch need equal point counts and part counts");
        }
        for (int64_t i = 0; i < n; ++i) {
            const auto& p = shape.points()[static_cast<std::size_t>(i)];
            for (int a = 0; a < 3; ++a) w[s][i][a] = p[a];
            l[s][i] = shape.labels()[static_cast<std::size_t>(i)];
        }
        for (int j = 0; j < m; ++j) {
            std::vector<int64_t> members;
            for (int64_t i = 0; i < n; ++i) {
                if (l[s][i] == j) members.push_back(i);
            }
            if (members.empty()) continue;
            const auto part = canonicalize_part(shape.part(j));
            for (std::size_t k = 0; k < members.size(); ++k) {
                for (int a = 0; a < 3; ++a) c[s][members[k]][a] = part.points[k][a];
            }
            for (int a = 0; a < 3; ++a) {
                t[s][j][a] = part.transform.shift[a];
                t[s][j][3 + a] = std::log(part.transform.scale[a]);
            }
            present[s][j] = true;
        }
    }
    return {world.to(dtype), canonical.to(dtype), labels, tau.to(dtype), present};
}

SegmentedCloud to_cloud(const torch::Tensor& points, const torch::Tensor& labels, int64_t b, int m,
                        const std::string& class_id) {
    auto p = points[b].to(torch::kFloat64).contiguous();
    auto l = labels[b].to(torch::kInt64).contiguous();
    auto pa = p.accessor<double, 2>();
    auto la = l.accessor<int64_t, 1>();
    PointSet out(static_cast<std::size_t>(p.size(0)));
    std::vector<int> lab(out.size());
    for (int64_t i = 0; i < p.size(0); ++i) {
        out[static_cast<std::size_t>(i)] = {pa[i][0], pa[i][1], pa[i][2]};
        lab[static_cast<std::size_t>(i)] = static_cast<int>(la[i]);
    }
    return SegmentedCloud(std::move(out), std::move(lab), m, class_id);
}

at::Generator make_generator(std::uint64_t seed) {
    return at::detail::createCPUGenerator(seed);
}

std::uint64_t fnv1a(const std::string& bytes) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : bytes) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    return h;
}

namespace {

constexpr char kMagic[8] = {'P', 'A', 'R', 'T', 'D', 'I', 'F', 'F'};

template <typename T>
void put(std::string& out, T value) {
    char buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    out.append(buf, sizeof(T));
}

template <typename T>
T get(const std::string& in, std::size_t offset) {
    if (offset + sizeof(T) > in.size()) throw std::runtime_error("truncated checkpoint");
    T value;
    std::memcpy(&value, in.data() + offset, sizeof(T));
    return value;
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

}  // namespace

std::string checkpoint_bytes(const PartModel& model) {
    const auto config = model.config.to_json();
    nlohmann::json header;
    header["config"] = config;
    header["config_hash"] = hex64(fnv1a(config.dump()));
    header["schedule"] = {{"steps", model.schedule.steps()},
                          {"alpha_start", model.config.alpha_start},
                          {"alpha_end", model.config.alpha_end}};
    header["metadata"] = {{"class_id", model.config.class_id},
                          {"m", model.config.m},
                          {"lambda", model.config.sampler.lambda},
                          {"point_budget", model.config.point_budget},
                          {"part_names", model.config.part_names}};
    header["provenance"] = model.provenance;

    std::string data;
    auto arrays = nlohmann::json::array();
    for (const auto& [name, tensor] : model.named_tensors()) {
        auto t = tensor.detach().to(torch::kFloat32).contiguous();
        arrays.push_back({{"name", name}, {"shape", t.sizes().vec()}, {"offset", data.size()}});
        data.append(static_cast<const char*>(t.data_ptr()), static_cast<std::size_t>(t.numel()) * sizeof(float));
    }
    header["arrays"] = arrays;

    const std::string text = header.dump();
    std::string out(kMagic, sizeof(kMagic));
    put<std::uint32_t>(out, kCheckpointVersion);
    put<std::uint64_t>(out, text.size());
    out += text;
    out += data;
    return out;
}

void save_checkpoint(const PartModel& model, const std::filesystem::path& path) {
    const auto bytes = checkpoint_bytes(model);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write checkpoint " + path.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("failed writing checkpoint " + path.string());
}

std::unique_ptr<PartModel> checkpoint_from_bytes(const std::string& bytes) {
    if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
        throw std::runtime_error("not a checkpoint file");
    }
    const auto version = get<std::uint32_t>(bytes, 8);
    if (version != kCheckpointVersion) {
        throw std::runtime_error("checkpoint version mismatch: file " + std::to_string(version) + ", expected " +
                                 std::to_string(kCheckpointVersion));
    }
    const auto header_len = get<std::uint64_t>(bytes, 12);
    const std::size_t header_start = 20;
    if (header_start + header_len > bytes.size()) throw std::runtime_error("truncated checkpoint");
    const auto header = nlohmann::json::parse(bytes.substr(header_start, header_len));
    const std::size_t data_start = header_start + header_len;

    auto model = std::make_unique<PartModel>(ModelConfig::from_json(header.at("config")));
    model->provenance = header.value("provenance", nlohmann::json::object());

    std::map<std::string, const nlohmann::json*> directory;
    for (const auto& entry : header.at("arrays")) directory[entry.at("name").get<std::string>()] = &entry;

    torch::NoGradGuard guard;
    for (auto& [name, tensor] : model->named_tensors()) {
        auto it = directory.find(name);
        if (it == directory.end()) throw std::runtime_error("checkpoint lacks array " + name);
        const auto shape = it->second->at("shape").get<std::vector<int64_t>>();
        if (shape != tensor.sizes().vec()) throw std::runtime_error("checkpoint shape mismatch for " + name);
        const auto offset = it->second->at("offset").get<std::size_t>();
        const auto count = static_cast<std::size_t>(tensor.numel());
        if (data_start + offset + count * sizeof(float) > bytes.size()) throw std::runtime_error("truncated checkpoint");
        auto src = torch::empty(shape, torch::TensorOptions().dtype(torch::kFloat32));
        std::memcpy(src.data_ptr(), bytes.data() + data_start + offset, count * sizeof(float));
        tensor.copy_(src);
    }
    model->train(false);
    return model;
}

std::unique_ptr<PartModel> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return checkpoint_from_bytes(ss.str());
}

}  // namespace partdiff
