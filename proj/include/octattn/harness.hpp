#pragma once

#include "octattn/dense_oracle.hpp"
#include "octattn/octattn.hpp"

#include <json.hpp>

#include <string>

namespace octattn {

using Json = nlohmann::json;

inline constexpr const char* kReportSchemaId = "octattn-report/1";
inline constexpr Index kOracleVoxelLimit = 512;

struct RunConfig {
  Vec3 voxel_size{0.05, 0.05, 0.125};
  Vec3 range_min{0.0, -40.0, -3.0};
  Vec3 range_max{70.4, 40.0, 1.0};
  std::vector<int> otb_heights{4, 3};
  Index d = 64;
  int heads = 2;
  Index head_dim = 32;
  Index k = 8;
  Index K = 32;
  Scalar tau = 1.0;
  Scalar gamma = 10000;
  Scalar delta_q = 0.05;
  Scalar delta_k = 0.2;
  std::uint64_t seed = 0;
  SelectMode mode = SelectMode::Infer;

  void validate() const;
  SamConfig sam() const { return {delta_q, delta_k, gamma}; }
};

// strict parse: unknown keys are an error
RunConfig config_from_json(const Json& j);
Json config_to_json(const RunConfig& cfg);
void apply_wod_preset(RunConfig& cfg);  // WOD voxel size

struct SynthSpec {
  std::uint64_t seed = 0;
  int n_objects = 3;
  int points_per_object = 400;
  int background_points = 3000;
  int scene_id = 0;
};

struct Scene {
  PointCloud cloud;
  std::vector<Box> boxes;
};

// Gaussian clusters confined to random axis-aligned boxes plus uniform
// background, deterministic under the spec seed.
Scene synth_scene(const SynthSpec& spec, const Vec3& range_min, const Vec3& range_max);

// near-solid cuboid cloud tuned until the non-empty voxel count lands
// within 5% of the target
PointCloud synth_dense_cloud(std::uint64_t seed, Index target_voxels, const RunConfig& cfg);

void save_points(const std::string& path, const PointCloud& cloud, PointFormat format);

struct BackboneParams {
  EmbedParams embed;
  SegParams seg;
  std::vector<OtbParams> otbs;  // one per entry of otb_heights
};
BackboneParams make_backbone_params(Rng& rng, const RunConfig& cfg);

struct LayerTrace {
  std::vector<Index> level_sizes;
  std::vector<Scalar> omega;
};

struct BackboneResult {
  Tensor output;
  SparseVoxelGrid embedded;
  std::vector<LayerTrace> layers;
};

// embed -> seg branch -> OTB (height[0]) -> 2x max-pool -> OTB (height[1])
BackboneResult backbone_forward(const SparseVoxelGrid& raw_grid, const BackboneParams& params,
                                const RunConfig& cfg, Rng* rng = nullptr,
                                MacCounter* macs = nullptr);

std::string checksum_hex(const Tensor& t);

// closed-form attention MAC count for one OTB pass over this pyramid
std::uint64_t predict_attention_macs(const FeaturePyramid& pyramid, Index m_top_padded,
                                     Index scenes, Index K, int heads, Index head_dim);

// Dense multi-head self-attention baseline over all rows of feats, evaluated
// in row blocks so large token counts stay in memory; MACs are tallied at
// the same counter sites as the sparse path.
Matrix dense_mhsa_reference(const Matrix& feats, const LevelAttnParams& params,
                            MacCounter* macs = nullptr, Index block = 1024);

Json run_forward(const RunConfig& cfg, const std::vector<PointCloud>& clouds);
Json run_oracle(const RunConfig& cfg, const std::vector<PointCloud>& clouds);
Json run_bench(const RunConfig& cfg, const std::vector<Index>& sizes);
Json run_trainseg(const RunConfig& cfg, const SynthSpec& spec, int steps, Scalar lr);
Json run_synth(const RunConfig& cfg, const SynthSpec& spec, const std::string& points_path,
               const std::string& boxes_path, PointFormat format);

// Structural validation against the shipped report schema (subset of JSON
// Schema: type/properties/required/additionalProperties/items/enum/const/
// oneOf/minItems). Returns human-readable problems, empty when valid.
std::vector<std::string> validate_json(const Json& value, const Json& schema);

}  // namespace octattn
