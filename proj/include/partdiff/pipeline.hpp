#pragma once

#include <torch/torch.h>

#include <json.hpp>

#include "partdiff/model.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <vector>

namespace partdiff {

// All functions here expect the model in evaluation mode (as left by training
// and by load_checkpoint) and do not change it, so a loaded model can serve
// concurrent callers.

struct GenerateOptions {
    int n = 1;
    /// Points per part; empty splits the model's point budget evenly over present parts.
    std::vector<int> part_counts;
    /// Empty means every part is present.
    std::vector<bool> present;
    /// Fixed style latents [n,m,d] or [m,d]; latent_mask [m] (bool) selects
    /// the fixed parts, all of them when undefined.
    torch::Tensor latents;
    torch::Tensor latent_mask;
    /// Fixed noise codes [n,noise_dim] or [noise_dim].
    torch::Tensor codes;
    /// Fixed transforms [n,m,6] or [m,6]; overrides the sampler.
    torch::Tensor tau;
    /// Replaces the denoiser (oracle and ablation studies).
    NoisePredictor predictor;
    /// Each step's implied x0 is kept within this many part standard
    /// deviations of the part shift, per axis; 0 disables.
    double x0_clip = 5.0;
};

struct GenerateResult {
    std::vector<SegmentedCloud> clouds;
    torch::Tensor latents;  // [n,m,d]
    torch::Tensor codes;    // [n,noise_dim]
    torch::Tensor tau;      // [n,m,6]
};

/// Ancestral sampling. Draws from `gen` in a fixed order whatever the options:
/// xi [n,m,d], y [n,noise_dim], x_T [n,N,3], then one [n,N,3] per step t >= 2.
GenerateResult generate(PartModel& model, const GenerateOptions& options, at::Generator& gen);

/// Encoded state of a shape that edits start from.
struct EditSession {
    torch::Tensor latents;  // [m,d] posterior means, zero for absent parts
    std::vector<bool> present;
    TransformSet transforms;  // observed
    std::vector<int> part_counts;
    torch::Tensor code;  // [noise_dim] best-fitting sampler code, may be undefined
    std::string class_id;

    int part_count() const { return static_cast<int>(present.size()); }
    nlohmann::json to_json() const;
    static EditSession from_json(const nlohmann::json& j);
};

/// Deterministic: z = posterior mean, tau = observed transforms. The cached
/// code comes from a cIMLE selection with a fixed internal seed.
EditSession encode_shape(PartModel& model, const SegmentedCloud& shape);

struct EditResult {
    SegmentedCloud cloud;
    torch::Tensor latents;  // [m,d]
    torch::Tensor code;     // [noise_dim]
    TransformSet transforms;
};

/// Regenerates with fresh prior latents for `parts` and transforms from the
/// sampler at a fresh code. An empty subset reconstructs the session with its
/// own transforms. With every part listed this equals generate() with n = 1
/// and the session's part counts.
EditResult resample_parts(PartModel& model, const EditSession& session, const std::vector<int>& parts,
                          at::Generator& gen);

/// Part j's latent comes from sessions[assignment[j]], unlisted parts from
/// sessions[0]; transforms are sampled afresh.
EditResult mix_parts(PartModel& model, const std::vector<const EditSession*>& sessions,
                     const std::map<int, int>& assignment, at::Generator& gen);

/// Frames k = 0..steps with z_j = (1 - k/steps) z_j + (k/steps) target. The
/// code is fixed (session code, else one draw from seed) and every frame uses
/// the same generation seed.
std::vector<EditResult> interpolate_part(PartModel& model, const EditSession& session, int part,
                                         const torch::Tensor& target, int steps, std::uint64_t seed);

struct TransformConstraint {
    int part = 0;
    /// 0..2 shift x,y,z; 3..5 scale x,y,z (matched in log space).
    int component = 0;
    double value = 0.0;
};

struct TransformEditOptions {
    int max_iters = 200;
    double lr = 0.05;
    double regularizer = 0.01;
    double tolerance = 1e-4;
    std::uint64_t seed = 0;
};

struct TransformEditResult {
    EditResult result;
    /// Sum of squared constraint errors at the returned code.
    double residual = 0.0;
    /// Objective (errors + regularizer) after every accepted iterate; non-increasing.
    std::vector<double> objective;
    bool converged = false;
};

/// Optimizes the sampler code y so T(z, y) meets the constraints, starting at
/// the session code (else 0). Stops once the residual is within tolerance;
/// otherwise returns the best iterate with converged = false.
TransformEditResult edit_transform(PartModel& model, const EditSession& session,
                                   const std::vector<TransformConstraint>& constraints,
                                   const TransformEditOptions& options = {});

}  // namespace partdiff
