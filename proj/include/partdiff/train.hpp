#pragma once

#include <json.hpp>

#include "partdiff/model.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace partdiff {

struct TrainConfig {
    std::string profile = "desk";
    int batch_size = 128;
    int stage1_epochs = 8000;
    double lr = 2e-3;
    double lr_final = 1e-4;
    double lambda1 = 5e-4;
    int stage2_epochs = 4000;
    double stage2_lr = 2e-4;
    double lambda2 = 1.0;
    int recache_every = 50;
    int candidates = kCimleCandidates;
    double clip_norm = 10.0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    std::uint64_t seed = 0;

    static TrainConfig paper(const std::string& class_id);
    static TrainConfig desk(const std::string& class_id);

    nlohmann::json to_json() const;
    /// Starts from the named profile ("profile" key) and overrides present keys.
    static TrainConfig from_json(const nlohmann::json& j, const std::string& class_id);
};

/// KL weight: 5e-4 for chairs, 1e-3 for every other class.
double default_lambda1(const std::string& class_id);

/// Constant, then linear decay from the midpoint to lr_final at the last epoch.
double stage1_learning_rate(const TrainConfig& cfg, int epoch);

struct EpochStats {
    int epoch = 0;
    double recon = 0.0;
    double kl = 0.0;
    double fit = 0.0;
    double lr = 0.0;
};

using TrainLog = std::function<void(const EpochStats&)>;

/// Stylizers, prior flows and denoiser on recon + lambda1 * KL, conditioned on
/// the observed transforms. The sampler is untouched.
std::vector<EpochStats> train_stage1(PartModel& model, const std::vector<SegmentedCloud>& shapes,
                                     const TrainConfig& cfg, const TrainLog& log = {});

/// Sampler only, by cIMLE: codes are recached every cfg.recache_every epochs
/// and the sampler fits the observed transforms from its cached codes.
std::vector<EpochStats> train_stage2(PartModel& model, const std::vector<SegmentedCloud>& shapes,
                                     const TrainConfig& cfg, const TrainLog& log = {});

/// Ablation: the sampler regresses the observed transforms from a fresh code
/// each step, without selection.
std::vector<EpochStats> train_direct_regression(PartModel& model, const std::vector<SegmentedCloud>& shapes,
                                                const TrainConfig& cfg, const TrainLog& log = {});

/// Mean over shapes of the best-of-K fit loss, z at the posterior mean.
double mean_best_fit(PartModel& model, const ShapeBatch& batch, int k, std::uint64_t seed);

}  // namespace partdiff
