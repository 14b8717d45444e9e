#pragma once

#include "partdiff/dataset.hpp"
#include "partdiff/model.hpp"
#include "support.hpp"

namespace testing_support {

using namespace partdiff;

inline ModelConfig tiny_config(int steps = 10) {
    auto c = ModelConfig::desk(4);
    c.point_budget = 64;
    c.steps = steps;
    c.stylizer.latent_dim = 8;
    c.stylizer.point_widths = {16, 32};
    c.stylizer.head_widths = {16};
    c.stylizer.flow_layers = 2;
    c.stylizer.flow_hidden = {16};
    c.sampler.noise_dim = 4;
    c.sampler.token_dim = 16;
    c.sampler.layers = 1;
    c.sampler.heads = 2;
    c.sampler.head_dim = 8;
    c.sampler.ff_dim = 32;
    c.denoiser.point_dim = 16;
    c.denoiser.layers = 1;
    c.denoiser.heads = 2;
    c.denoiser.head_dim = 8;
    c.denoiser.ff_dim = 32;
    c.denoiser.time_dim = 8;
    c.sync();
    return c;
}

/// Randomly initialized model with non-trivial flows, in evaluation mode.
inline std::unique_ptr<PartModel> tiny_model(uint64_t seed, int steps = 10) {
    torch::manual_seed(seed);
    auto model = std::make_unique<PartModel>(tiny_config(steps));
    for (auto& flow : model->stylizer->flows) perturb(*flow, 0.1, seed + 1);
    model->train(false);
    return model;
}

inline std::vector<SegmentedCloud> synthetic_shapes(int n, int points = 64, uint64_t seed = 3) {
    SynthTemplate tmpl;
    tmpl.points_per_shape = points;
    return synthesize_dataset(seed, n, tmpl).train;
}

}  // namespace testing_support
