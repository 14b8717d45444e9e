#pragma once

#include <torch/torch.h>

#include <json.hpp>

#include "partdiff/data.hpp"
#include "partdiff/denoiser.hpp"
#include "partdiff/kernel.hpp"
#include "partdiff/sampler.hpp"
#include "partdiff/stylizer.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

namespace partdiff {

struct ModelConfig {
    std::string profile = "desk";
    std::string class_id = "boxchair";
    int m = 4;
    std::vector<std::string> part_names;
    int point_budget = 512;
    int steps = 100;
    double alpha_start = 0.9999;
    double alpha_end = 0.08;
    StylizerConfig stylizer;
    SamplerConfig sampler;
    DenoiserConfig denoiser;

    /// Architecture sizes of the published models (256-d latents, 14 couplings).
    static ModelConfig paper(int m, double lambda = 10.0);
    /// Reduced sizes that train on one CPU core in minutes.
    static ModelConfig desk(int m, double lambda = 10.0);

    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
    /// Propagates m and latent_dim into the sub-configs.
    void sync();
};

/// Sampler noise amplifier: 100 for chairs, 50 for airplanes and cars, 10 otherwise.
double default_noise_amplifier(const std::string& class_id);

/// Candidate codes per shape in cIMLE selection.
inline constexpr int kCimleCandidates = 20;

/// All learned components plus the diffusion schedule.
class PartModel {
public:
    explicit PartModel(const ModelConfig& config);

    ModelConfig config;
    DiffusionSchedule schedule;
    Stylizer stylizer{nullptr};
    TransformSampler sampler{nullptr};
    CrossDenoiser denoiser{nullptr};
    /// Free-form training record carried through checkpoints unchanged.
    nlohmann::json provenance = nlohmann::json::object();

    void train(bool on);
    void to(torch::Dtype dtype);
    /// Parameters and buffers of all modules, prefixed by module name, in a
    /// fixed order.
    std::vector<std::pair<std::string, torch::Tensor>> named_tensors() const;
};

/// Tensor view of equally sized shapes.
struct ShapeBatch {
    torch::Tensor world;      // [B,N,3]
    torch::Tensor canonical;  // [B,N,3], each point in its part's canonical frame
    torch::Tensor labels;     // [B,N] int64
    torch::Tensor tau;        // [B,m,6] observed transforms, absent rows 0
    torch::Tensor present;    // [B,m] bool

    int64_t size() const { return world.size(0); }
    ShapeBatch select(const torch::Tensor& index) const;
};

/// Throws std::invalid_argument if the shapes differ in point count or m.
ShapeBatch make_batch(const std::vector<SegmentedCloud>& shapes, torch::Dtype dtype = torch::kFloat32);

/// Shape b of world-space points [B,N,3] with labels [B,N].
SegmentedCloud to_cloud(const torch::Tensor& points, const torch::Tensor& labels, int64_t b, int m,
                        const std::string& class_id = {});

at::Generator make_generator(std::uint64_t seed);

/// FNV-1a 64-bit.
std::uint64_t fnv1a(const std::string& bytes);

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Single-file container: "PARTDIFF", u32 version, u64 header length, JSON
/// header (config, schedule, array directory, provenance), then raw
/// little-endian float32 arrays.
std::string checkpoint_bytes(const PartModel& model);
void save_checkpoint(const PartModel& model, const std::filesystem::path& path);
std::unique_ptr<PartModel> checkpoint_from_bytes(const std::string& bytes);
std::unique_ptr<PartModel> load_checkpoint(const std::filesystem::path& path);

}  // namespace partdiff
