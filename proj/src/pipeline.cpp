#include "partdiff/pipeline.hpp"

#include "partdiff/tensor_kernel.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace partdiff {

namespace {

constexpr std::uint64_t kEncodeCodeSeed = 0x5eedc0deULL;

/// Broadcasts a per-shape tensor (rank `rank`) or a single one (rank - 1) to n rows.
torch::Tensor rows(const torch::Tensor& t, int64_t n, int64_t rank) {
    auto f = t.to(torch::kFloat32);
    if (f.dim() == rank - 1) f = f.unsqueeze(0);
    if (f.dim() != rank) throw std::invalid_argument("fixed tensor has the wrong rank");
    if (f.size(0) == 1 && n > 1) {
        auto sizes = f.sizes().vec();
        sizes[0] = n;
        f = f.expand(sizes);
    }
    if (f.size(0) != n) throw std::invalid_argument("fixed tensor has the wrong batch size");
    return f.contiguous();
}

std::vector<int> even_counts(const std::vector<bool>& present, int budget) {
    const int k = static_cast<int>(std::count(present.begin(), present.end(), true));
    std::vector<int> out(present.size(), 0);
    int extra = budget % std::max(k, 1);
    for (std::size_t j = 0; j < present.size(); ++j) {
        if (!present[j]) continue;
        out[j] = budget / std::max(k, 1) + (extra > 0 ? 1 : 0);
        if (extra > 0) --extra;
    }
    return out;
}

torch::Tensor flat_labels(const std::vector<int>& counts) {
    std::vector<int64_t> labels;
    for (std::size_t j = 0; j < counts.size(); ++j) labels.insert(labels.end(), static_cast<std::size_t>(counts[j]), static_cast<int64_t>(j));
    return torch::tensor(labels, torch::TensorOptions().dtype(torch::kInt64));
}

void check_part(int part, int m) {
    if (part < 0 || part >= m) throw std::invalid_argument("unknown part index " + std::to_string(part));
}

}  // namespace

GenerateResult generate(PartModel& model, const GenerateOptions& o, at::Generator& gen) {
    torch::NoGradGuard guard;
    const int m = model.config.m;
    const int64_t n = o.n;
    const auto d = model.config.stylizer.latent_dim;
    const auto nd = model.config.sampler.noise_dim;
    if (n < 1) throw std::invalid_argument("generate needs n >= 1");

    auto present = o.present.empty() ? std::vector<bool>(static_cast<std::size_t>(m), true) : o.present;
    if (static_cast<int>(present.size()) != m) throw std::invalid_argument("presence mask has the wrong length");
    auto counts = o.part_counts.empty() ? even_counts(present, model.config.point_budget) : o.part_counts;
    if (static_cast<int>(counts.size()) != m) throw std::invalid_argument("part counts have the wrong length");
    for (int j = 0; j < m; ++j) {
        if (counts[static_cast<std::size_t>(j)] < 0 || (present[static_cast<std::size_t>(j)] != (counts[static_cast<std::size_t>(j)] > 0))) {
            throw std::invalid_argument("part counts must be positive exactly for present parts");
        }
    }

    auto f32 = torch::TensorOptions().dtype(torch::kFloat32);
    auto labels = flat_labels(counts).unsqueeze(0).expand({n, -1}).contiguous();
    const auto points = labels.size(1);
    auto present_t = presence_tensor(present).unsqueeze(0).expand({n, m}).contiguous();

    auto xi = torch::randn({n, m, d}, gen, f32);
    auto y = torch::randn({n, nd}, gen, f32);
    auto z = prior_sample(model.stylizer, xi, present_t);
    if (o.latents.defined()) {
        auto fixed = rows(o.latents, n, 3);
        auto mask = o.latent_mask.defined() ? o.latent_mask.to(torch::kBool).view({1, m, 1})
                                            : torch::ones({1, m, 1}, torch::TensorOptions().dtype(torch::kBool));
        z = torch::where(mask & present_t.unsqueeze(-1), fixed, z);
    }
    if (o.codes.defined()) y = rows(o.codes, n, 2);
    auto tau = o.tau.defined() ? rows(o.tau, n, 3) : model.sampler->forward(z, y, present_t);

    auto [mu, sd] = point_kernel(tau, labels);
    auto x = mu + sd * torch::randn({n, points, 3}, gen, f32);
    NoisePredictor predict = o.predictor ? o.predictor : NoisePredictor([&](const torch::Tensor& x_t, const torch::Tensor& t) {
        return model.denoiser->forward(x_t, labels, tau, z, present_t, t);
    });
    for (int t = model.schedule.steps(); t >= 1; --t) {
        auto tv = torch::full({n}, t, torch::TensorOptions().dtype(torch::kInt64));
        auto eps = predict(x, tv);
        if (o.x0_clip > 0) eps = clip_noise(x, eps, t, mu, sd, model.schedule, o.x0_clip);
        auto noise = t > 1 ? torch::randn({n, points, 3}, gen, f32) : torch::Tensor();
        x = reverse_step(x, eps, t, mu, sd, model.schedule, noise);
    }

    GenerateResult out;
    for (int64_t b = 0; b < n; ++b) out.clouds.push_back(to_cloud(x, labels, b, m, model.config.class_id));
    out.latents = z;
    out.codes = y;
    out.tau = tau;
    return out;
}

nlohmann::json EditSession::to_json() const {
    nlohmann::json j;
    auto lat = latents.to(torch::kFloat64).contiguous();
    std::vector<std::vector<double>> rows_out;
    for (int64_t r = 0; r < lat.size(0); ++r) {
        auto row = lat[r];
        rows_out.emplace_back(row.data_ptr<double>(), row.data_ptr<double>() + row.numel());
    }
    j["latents"] = rows_out;
    j["present"] = present;
    auto tr = nlohmann::json::array();
    for (int p = 0; p < transforms.size(); ++p) {
        const auto& t = transforms.transforms[static_cast<std::size_t>(p)];
        tr.push_back({{"shift", t.shift}, {"scale", t.scale}, {"present", static_cast<bool>(transforms.present[static_cast<std::size_t>(p)])}});
    }
    j["transforms"] = tr;
    j["part_counts"] = part_counts;
    if (code.defined()) {
        auto c = code.to(torch::kFloat64).contiguous();
        j["code"] = std::vector<double>(c.data_ptr<double>(), c.data_ptr<double>() + c.numel());
    } else {
        j["code"] = nullptr;
    }
    j["class_id"] = class_id;
    return j;
}

EditSession EditSession::from_json(const nlohmann::json& j) {
    EditSession s;
    const auto lat = j.at("latents").get<std::vector<std::vector<double>>>();
    if (lat.empty()) throw std::invalid_argument("session has no latents");
    const auto d = static_cast<int64_t>(lat.front().size());
    s.latents = torch::empty({static_cast<int64_t>(lat.size()), d}, torch::TensorOptions().dtype(torch::kFloat64));
    for (std::size_t r = 0; r < lat.size(); ++r) {
        if (static_cast<int64_t>(lat[r].size()) != d) throw std::invalid_argument("ragged session latents");
        s.latents[static_cast<int64_t>(r)] = torch::tensor(lat[r], torch::TensorOptions().dtype(torch::kFloat64));
    }
    s.latents = s.latents.to(torch::kFloat32);
    s.present = j.at("present").get<std::vector<bool>>();
    const int m = static_cast<int>(s.present.size());
    if (static_cast<int>(lat.size()) != m) throw std::invalid_argument("session latents and presence disagree");
    s.transforms = TransformSet(m);
    const auto& tr = j.at("transforms");
    if (!tr.is_array() || static_cast<int>(tr.size()) != m) throw std::invalid_argument("session transforms have the wrong length");
    for (int p = 0; p < m; ++p) {
        auto& t = s.transforms.transforms[static_cast<std::size_t>(p)];
        t.shift = tr[static_cast<std::size_t>(p)].at("shift").get<Vec3>();
        t.scale = tr[static_cast<std::size_t>(p)].at("scale").get<Vec3>();
        s.transforms.present[static_cast<std::size_t>(p)] = tr[static_cast<std::size_t>(p)].at("present").get<bool>();
    }
    s.part_counts = j.at("part_counts").get<std::vector<int>>();
    if (static_cast<int>(s.part_counts.size()) != m) throw std::invalid_argument("session part counts have the wrong length");
    if (j.contains("code") && !j["code"].is_null()) {
        s.code = torch::tensor(j["code"].get<std::vector<double>>(), torch::TensorOptions().dtype(torch::kFloat64)).to(torch::kFloat32);
    }
    s.class_id = j.value("class_id", std::string());
    return s;
}

EditSession encode_shape(PartModel& model, const SegmentedCloud& shape) {
    if (shape.size() == 0) throw std::invalid_argument("cannot encode a shape without points");
    if (shape.part_count() != model.config.m) throw std::invalid_argument("shape part count does not match the model");
    torch::NoGradGuard guard;
    const auto batch = make_batch({shape});
    auto [mu, sigma] = model.stylizer->encoder->forward(batch.canonical, batch.labels, batch.present);
    auto gen = make_generator(kEncodeCodeSeed);
    auto sel = cimle_select(model.sampler, mu, batch.present, batch.tau, kCimleCandidates, gen);

    EditSession s;
    s.latents = mu[0].clone();
    s.present = shape.presence();
    s.transforms = observed_transforms(shape);
    s.part_counts = shape.part_sizes();
    s.code = sel.codes[0].clone();
    s.class_id = shape.class_id();
    return s;
}

namespace {

GenerateOptions session_options(const EditSession& s) {
    GenerateOptions o;
    o.n = 1;
    o.present = s.present;
    o.part_counts = s.part_counts;
    o.latents = s.latents;
    return o;
}

EditResult single(GenerateResult&& r, const std::vector<bool>& present) {
    return {std::move(r.clouds.front()), r.latents[0], r.codes[0], transform_set(r.tau[0], present)};
}

}  // namespace

EditResult resample_parts(PartModel& model, const EditSession& session, const std::vector<int>& parts,
                          at::Generator& gen) {
    const int m = session.part_count();
    auto o = session_options(session);
    if (parts.empty()) {
        o.tau = tau_tensor(session.transforms);
        return single(generate(model, o, gen), session.present);
    }
    auto keep = torch::ones({m}, torch::TensorOptions().dtype(torch::kBool));
    for (int p : parts) {
        check_part(p, m);
        if (!session.present[static_cast<std::size_t>(p)]) throw std::invalid_argument("part " + std::to_string(p) + " is absent");
        keep[p] = false;
    }
    o.latent_mask = keep;
    return single(generate(model, o, gen), session.present);
}

EditResult mix_parts(PartModel& model, const std::vector<const EditSession*>& sessions,
                     const std::map<int, int>& assignment, at::Generator& gen) {
    if (sessions.empty()) throw std::invalid_argument("mix needs at least one session");
    const int m = sessions.front()->part_count();
    for (const auto* s : sessions) {
        if (s->part_count() != m) throw std::invalid_argument("sessions have different part counts");
    }
    for (const auto& [part, source] : assignment) {
        check_part(part, m);
        if (source < 0 || source >= static_cast<int>(sessions.size())) {
            throw std::invalid_argument("unknown source session " + std::to_string(source));
        }
    }
    EditSession mixed = *sessions.front();
    mixed.latents = sessions.front()->latents.clone();
    for (const auto& [part, source] : assignment) {
        const auto& donor = *sessions[static_cast<std::size_t>(source)];
        const auto p = static_cast<std::size_t>(part);
        mixed.latents[part] = donor.latents[part];
        mixed.present[p] = donor.present[p];
        mixed.part_counts[p] = donor.part_counts[p];
    }
    if (std::none_of(mixed.present.begin(), mixed.present.end(), [](bool b) { return b; })) {
        throw std::invalid_argument("mix selects no present part");
    }
    return single(generate(model, session_options(mixed), gen), mixed.present);
}

std::vector<EditResult> interpolate_part(PartModel& model, const EditSession& session, int part,
                                         const torch::Tensor& target, int steps, std::uint64_t seed) {
    const int m = session.part_count();
    check_part(part, m);
    if (!session.present[static_cast<std::size_t>(part)]) throw std::invalid_argument("part " + std::to_string(part) + " is absent");
    if (steps < 1) throw std::invalid_argument("interpolation needs steps >= 1");
    if (target.numel() != session.latents.size(1)) throw std::invalid_argument("target latent has the wrong size");

    auto code = session.code;
    if (!code.defined()) {
        auto gen = make_generator(seed);
        code = torch::randn({model.config.sampler.noise_dim}, gen, torch::TensorOptions().dtype(torch::kFloat32));
    }
    const auto from = session.latents[part];
    const auto to = target.to(torch::kFloat32).reshape({-1});
    std::vector<EditResult> frames;
    for (int k = 0; k <= steps; ++k) {
        const double w = static_cast<double>(k) / steps;
        auto o = session_options(session);
        o.latents = session.latents.clone();
        o.latents[part] = k == 0 ? from : k == steps ? to : (1.0 - w) * from + w * to;
        o.codes = code;
        auto gen = make_generator(seed);
        frames.push_back(single(generate(model, o, gen), session.present));
    }
    return frames;
}

TransformEditResult edit_transform(PartModel& model, const EditSession& session,
                                   const std::vector<TransformConstraint>& constraints,
                                   const TransformEditOptions& options) {
    const int m = session.part_count();
    std::vector<int64_t> index;
    std::vector<double> target;
    for (const auto& c : constraints) {
        check_part(c.part, m);
        if (!session.present[static_cast<std::size_t>(c.part)]) throw std::invalid_argument("part " + std::to_string(c.part) + " is absent");
        if (c.component < 0 || c.component > 5) throw std::invalid_argument("transform component must be in [0, 6)");
        if (c.component >= 3 && !(c.value > 0.0)) throw std::invalid_argument("scale targets must be positive");
        if (!std::isfinite(c.value)) throw std::invalid_argument("constraint value must be finite");
        index.push_back(c.part * kTauDim + c.component);
        target.push_back(c.component >= 3 ? std::log(c.value) : c.value);
    }
    auto idx = torch::tensor(index, torch::TensorOptions().dtype(torch::kInt64));
    auto goal = torch::tensor(target, torch::TensorOptions().dtype(torch::kFloat32));
    auto z = session.latents.to(torch::kFloat32).unsqueeze(0);
    auto present = presence_tensor(session.present).unsqueeze(0);
    const auto nd = model.config.sampler.noise_dim;

    auto evaluate = [&](const torch::Tensor& y) {
        auto tau = model.sampler->forward(z, y.unsqueeze(0), present).reshape({-1});
        auto residual = idx.numel() > 0 ? (tau.index_select(0, idx) - goal).pow(2).sum() : torch::zeros({});
        return std::make_pair(residual + options.regularizer * y.pow(2).sum(), residual);
    };

    TransformEditResult out;
    torch::Tensor y = session.code.defined() ? session.code.to(torch::kFloat32).clone() : torch::zeros({nd});
    double lr = options.lr;
    auto m1 = torch::zeros_like(y);
    auto m2 = torch::zeros_like(y);
    const double b1 = 0.9, b2 = 0.999;
    double objective, residual;
    {
        torch::NoGradGuard guard;
        auto [o, r] = evaluate(y);
        objective = o.item<double>();
        residual = r.item<double>();
    }
    out.objective.push_back(objective);
    out.converged = residual <= options.tolerance;
    for (int it = 1; it <= options.max_iters && !out.converged; ++it) {
        auto yg = y.clone().requires_grad_(true);
        auto grad = torch::autograd::grad({evaluate(yg).first}, {yg})[0];
        m1 = b1 * m1 + (1 - b1) * grad;
        m2 = b2 * m2 + (1 - b2) * grad * grad;
        auto step = (m1 / (1 - std::pow(b1, it))) / (torch::sqrt(m2 / (1 - std::pow(b2, it))) + 1e-8);
        auto candidate = (y - lr * step).detach();
        torch::NoGradGuard guard;
        auto [o, r] = evaluate(candidate);
        if (o.item<double>() < objective) {
            y = candidate;
            objective = o.item<double>();
            residual = r.item<double>();
            out.objective.push_back(objective);
            out.converged = residual <= options.tolerance;
        } else {
            lr *= 0.5;
        }
    }
    out.residual = residual;

    torch::NoGradGuard guard;
    auto o = session_options(session);
    o.codes = y;
    o.tau = model.sampler->forward(z, y.unsqueeze(0), present);
    auto gen = make_generator(options.seed);
    out.result = single(generate(model, o, gen), session.present);
    return out;
}

}  // namespace partdiff
