#include "partdiff/train.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace partdiff {

double default_lambda1(const std::string& class_id) {
    return class_id == "chair" ? 5e-4 : 1e-3;
}

TrainConfig TrainConfig::paper(const std::string& class_id) {
    TrainConfig c;
    c.profile = "paper";
    c.lambda1 = default_lambda1(class_id);
    return c;
}

TrainConfig TrainConfig::desk(const std::string& class_id) {
    TrainConfig c;
    c.profile = "desk";
    c.lambda1 = default_lambda1(class_id);
    c.batch_size = 16;
    c.stage1_epochs = 300;
    c.stage2_epochs = 400;
    c.stage2_lr = 1e-3;
    return c;
}

nlohmann::json TrainConfig::to_json() const {
    return {{"profile", profile},
            {"batch_size", batch_size},
            {"stage1_epochs", stage1_epochs},
            {"lr", lr},
            {"lr_final", lr_final},
            {"lambda1", lambda1},
            {"stage2_epochs", stage2_epochs},
            {"stage2_lr", stage2_lr},
            {"lambda2", lambda2},
            {"recache_every", recache_every},
            {"candidates", candidates},
            {"clip_norm", clip_norm},
            {"adam_beta1", adam_beta1},
            {"adam_beta2", adam_beta2},
            {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j, const std::string& class_id) {
    TrainConfig c = j.value("profile", std::string("desk")) == "paper" ? paper(class_id) : desk(class_id);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.stage1_epochs = j.value("stage1_epochs", c.stage1_epochs);
    c.lr = j.value("lr", c.lr);
    c.lr_final = j.value("lr_final", c.lr_final);
    c.lambda1 = j.value("lambda1", c.lambda1);
    c.stage2_epochs = j.value("stage2_epochs", c.stage2_epochs);
    c.stage2_lr = j.value("stage2_lr", c.stage2_lr);
    c.lambda2 = j.value("lambda2", c.lambda2);
    c.recache_every = j.value("recache_every", c.recache_every);
    c.candidates = j.value("candidates", c.candidates);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
    c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
    c.seed = j.value("seed", c.seed);
    if (c.batch_size < 1 || c.stage1_epochs < 0 || c.stage2_epochs < 0 || c.recache_every < 1 || c.candidates < 1 ||
        c.lr <= 0 || c.lr_final <= 0 || c.stage2_lr <= 0 || c.lambda1 < 0 || c.lambda2 < 0 || c.clip_norm <= 0) {
        throw std::invalid_argument("invalid training config");
    }
    return c;
}

double stage1_learning_rate(const TrainConfig& cfg, int epoch) {
    const int half = cfg.stage1_epochs / 2;
    const int last = cfg.stage1_epochs - 1;
    if (epoch < half || last <= half) return cfg.lr;
    const double frac = static_cast<double>(epoch - half) / static_cast<double>(last - half);
    return cfg.lr + (cfg.lr_final - cfg.lr) * std::min(1.0, frac);
}

namespace {

torch::optim::Adam make_adam(const std::vector<torch::Tensor>& params, double lr, const TrainConfig& cfg) {
    return torch::optim::Adam(params, torch::optim::AdamOptions(lr).betas({cfg.adam_beta1, cfg.adam_beta2}).weight_decay(0.0));
}

void set_lr(torch::optim::Adam& opt, double lr) {
    for (auto& group : opt.param_groups()) static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
}

void check_finite(double value, const char* what, int epoch) {
    if (!std::isfinite(value)) {
        throw std::runtime_error(std::string("training diverged: non-finite ") + what + " at epoch " + std::to_string(epoch));
    }
}

std::vector<torch::Tensor> chunks(const torch::Tensor& perm, int batch_size) {
    std::vector<torch::Tensor> out;
    for (int64_t start = 0; start < perm.size(0); start += batch_size) {
        out.push_back(perm.narrow(0, start, std::min<int64_t>(batch_size, perm.size(0) - start)));
    }
    return out;
}

torch::Tensor mask_latents(const torch::Tensor& z, const torch::Tensor& present) {
    return torch::where(present.unsqueeze(-1), z, torch::zeros_like(z));
}

void freeze(torch::nn::Module& module) {
    for (auto& p : module.parameters()) p.set_requires_grad(false);
}

}  // namespace

std::vector<EpochStats> train_stage1(PartModel& model, const std::vector<SegmentedCloud>& shapes,
                                     const TrainConfig& cfg, const TrainLog& log) {
    if (shapes.empty()) throw std::invalid_argument("training needs a non-empty dataset");
    torch::manual_seed(cfg.seed);
    auto gen = make_generator(cfg.seed);
    const auto data = make_batch(shapes);

    model.train(true);
    model.sampler->train(false);
    std::vector<torch::Tensor> params;
    for (auto& p : model.stylizer->parameters()) params.push_back(p);
    for (auto& p : model.denoiser->parameters()) params.push_back(p);
    auto opt = make_adam(params, cfg.lr, cfg);

    std::vector<EpochStats> history;
    for (int epoch = 0; epoch < cfg.stage1_epochs; ++epoch) {
        EpochStats stats;
        stats.epoch = epoch;
        stats.lr = stage1_learning_rate(cfg, epoch);
        set_lr(opt, stats.lr);
        auto perm = torch::randperm(data.size(), gen, torch::TensorOptions().dtype(torch::kInt64));
        int batches = 0;
        for (const auto& idx : chunks(perm, cfg.batch_size)) {
            const auto b = data.select(idx);
            auto [mu, sigma] = model.stylizer->encoder->forward(b.canonical, b.labels, b.present);
            auto noise = torch::randn(mu.sizes(), gen, mu.options());
            auto z = mask_latents(reparam_sample(mu, sigma, noise), b.present);
            auto kl = kl_loss(model.stylizer, mu, sigma, b.present, noise);
            NoisePredictor predict = [&](const torch::Tensor& x_t, const torch::Tensor& t) {
                return model.denoiser->forward(x_t, b.labels, b.tau, z, b.present, t);
            };
            auto recon = diffusion_loss(predict, b.world, b.labels, b.tau, b.present, model.schedule, gen);
            auto loss = recon + cfg.lambda1 * kl;
            opt.zero_grad();
            loss.backward();
            torch::nn::utils::clip_grad_norm_(params, cfg.clip_norm);
            opt.step();
            stats.recon += recon.item<double>();
            stats.kl += kl.item<double>();
            ++batches;
        }
        stats.recon /= batches;
        stats.kl /= batches;
        check_finite(stats.recon, "reconstruction loss", epoch);
        check_finite(stats.kl, "KL loss", epoch);
        history.push_back(stats);
        if (log) log(stats);
    }
    model.train(false);
    model.provenance["stage1"] = {{"epochs", cfg.stage1_epochs},
                                  {"shapes", shapes.size()},
                                  {"final_recon", history.empty() ? 0.0 : history.back().recon},
                                  {"train_config", cfg.to_json()}};
    return history;
}

namespace {

enum class SamplerObjective { Cimle, Regression };

std::vector<EpochStats> train_sampler(PartModel& model, const std::vector<SegmentedCloud>& shapes,
                                      const TrainConfig& cfg, const TrainLog& log, SamplerObjective objective) {
    if (shapes.empty()) throw std::invalid_argument("training needs a non-empty dataset");
    torch::manual_seed(cfg.seed);
    auto gen = make_generator(cfg.seed);
    const auto data = make_batch(shapes);

    model.train(false);
    freeze(*model.stylizer);
    freeze(*model.denoiser);
    torch::Tensor mu, sigma;
    {
        torch::NoGradGuard guard;
        std::tie(mu, sigma) = model.stylizer->encoder->forward(data.canonical, data.labels, data.present);
    }
    const auto noise_dim = model.config.sampler.noise_dim;
    auto sample_z = [&](const torch::Tensor& idx) {
        auto m = mu.index_select(0, idx);
        auto noise = torch::randn(m.sizes(), gen, m.options());
        return mask_latents(reparam_sample(m, sigma.index_select(0, idx), noise), data.present.index_select(0, idx));
    };

    model.sampler->train(true);
    auto opt = make_adam(model.sampler->parameters(), cfg.stage2_lr, cfg);
    torch::Tensor codes;
    std::vector<EpochStats> history;
    for (int epoch = 0; epoch < cfg.stage2_epochs; ++epoch) {
        if (objective == SamplerObjective::Cimle && epoch % cfg.recache_every == 0) {
            model.sampler->train(false);
            auto all = torch::arange(data.size(), torch::TensorOptions().dtype(torch::kInt64));
            codes = cimle_select(model.sampler, sample_z(all), data.present, data.tau, cfg.candidates, gen).codes;
            model.sampler->train(true);
        }
        EpochStats stats;
        stats.epoch = epoch;
        stats.lr = cfg.stage2_lr;
        auto perm = torch::randperm(data.size(), gen, torch::TensorOptions().dtype(torch::kInt64));
        int batches = 0;
        for (const auto& idx : chunks(perm, cfg.batch_size)) {
            auto z = sample_z(idx);
            auto y = objective == SamplerObjective::Cimle
                         ? codes.index_select(0, idx)
                         : torch::randn({idx.size(0), noise_dim}, gen, z.options());
            auto present = data.present.index_select(0, idx);
            auto tau = model.sampler->forward(z, y, present);
            auto fit = fit_loss(tau, data.tau.index_select(0, idx), present).mean();
            opt.zero_grad();
            (cfg.lambda2 * fit).backward();
            torch::nn::utils::clip_grad_norm_(model.sampler->parameters(), cfg.clip_norm);
            opt.step();
            stats.fit += fit.item<double>();
            ++batches;
        }
        stats.fit /= batches;
        check_finite(stats.fit, "fit loss", epoch);
        history.push_back(stats);
        if (log) log(stats);
    }
    model.train(false);
    for (auto& p : model.stylizer->parameters()) p.set_requires_grad(true);
    for (auto& p : model.denoiser->parameters()) p.set_requires_grad(true);
    model.provenance[objective == SamplerObjective::Cimle ? "stage2" : "direct_regression"] = {
        {"epochs", cfg.stage2_epochs},
        {"final_fit", history.empty() ? 0.0 : history.back().fit},
        {"train_config", cfg.to_json()}};
    return history;
}

}  // namespace

std::vector<EpochStats> train_stage2(PartModel& model, const std::vector<SegmentedCloud>& shapes,
                                     const TrainConfig& cfg, const TrainLog& log) {
    return train_sampler(model, shapes, cfg, log, SamplerObjective::Cimle);
}

std::vector<EpochStats> train_direct_regression(PartModel& model, const std::vector<SegmentedCloud>& shapes,
                                                const TrainConfig& cfg, const TrainLog& log) {
    return train_sampler(model, shapes, cfg, log, SamplerObjective::Regression);
}

double mean_best_fit(PartModel& model, const ShapeBatch& batch, int k, std::uint64_t seed) {
    torch::NoGradGuard guard;
    model.train(false);
    auto gen = make_generator(seed);
    auto [mu, sigma] = model.stylizer->encoder->forward(batch.canonical, batch.labels, batch.present);
    auto sel = cimle_select(model.sampler, mu, batch.present, batch.tau, k, gen);
    return std::get<0>(sel.losses.min(0)).mean().item<double>();
}

}  // namespace partdiff
