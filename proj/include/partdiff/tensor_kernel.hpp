#pragma once

#include <torch/torch.h>

#include "partdiff/kernel.hpp"

namespace partdiff {

// Batched forms of the kernel in kernel.hpp. Points are [B,N,3]; mu and sd
// broadcast against them; t holds one timestep per shape.

/// Forward marginal with per-shape timesteps t [B] (int64, 1..T).
torch::Tensor q_sample(const torch::Tensor& x0, const torch::Tensor& t, const torch::Tensor& mu,
                       const torch::Tensor& sd, const DiffusionSchedule& sched, const torch::Tensor& noise);

/// Mean of the reverse kernel from a noise estimate, one timestep for the batch.
torch::Tensor noise_to_mean(const torch::Tensor& xt, const torch::Tensor& eps_hat, int t, const torch::Tensor& mu,
                            const torch::Tensor& sd, const DiffusionSchedule& sched);

/// Ancestral step; noise is ignored at t = 1.
torch::Tensor reverse_step(const torch::Tensor& xt, const torch::Tensor& eps_hat, int t, const torch::Tensor& mu,
                           const torch::Tensor& sd, const DiffusionSchedule& sched, const torch::Tensor& noise);

/// The noise that produced xt from x0 under q_sample (inverse of q_sample in eps).
torch::Tensor true_noise(const torch::Tensor& xt, const torch::Tensor& x0, int t, const torch::Tensor& mu,
                         const torch::Tensor& sd, const DiffusionSchedule& sched);

/// eps_hat where its implied x0 lies within mu +- bound * sd on every axis;
/// elsewhere the noise that implies x0 clamped into that box.
torch::Tensor clip_noise(const torch::Tensor& xt, const torch::Tensor& eps_hat, int t, const torch::Tensor& mu,
                         const torch::Tensor& sd, const DiffusionSchedule& sched, double bound);

}  // namespace partdiff
