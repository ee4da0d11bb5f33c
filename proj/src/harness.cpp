#include "octattn/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace octattn {

namespace {

double ms_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
      .count();
}

Vec3 vec3_from(const Json& j, const std::string& key) {
  if (!j.is_array() || j.size() != 3)
    throw std::runtime_error("config: '" + key + "' must be an array of 3 numbers");
  return Vec3(j[0].get<Scalar>(), j[1].get<Scalar>(), j[2].get<Scalar>());
}

Json vec3_to(const Vec3& v) { return Json::array({v(0), v(1), v(2)}); }

// least-squares slope of ln(y) against ln(x)
Scalar loglog_slope(const std::vector<Scalar>& x, const std::vector<Scalar>& y) {
  const Index n = static_cast<Index>(x.size());
  Scalar sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (Index i = 0; i < n; ++i) {
    const Scalar lx = std::log(x[static_cast<size_t>(i)]);
    const Scalar ly = std::log(y[static_cast<size_t>(i)]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

SparseVoxelGrid voxelize_batch(const RunConfig& cfg, const std::vector<PointCloud>& clouds,
                               VoxelizeReport* total_report = nullptr) {
  std::vector<SparseVoxelGrid> grids;
  VoxelizeReport total;
  for (const PointCloud& cloud : clouds) {
    VoxelizeReport rep;
    SparseVoxelGrid g = voxelize(cloud, cfg.voxel_size, cfg.range_min, cfg.range_max, &rep);
    total.points_in += rep.points_in;
    total.points_kept += rep.points_kept;
    total.points_dropped += rep.points_dropped;
    if (g.size() > 0) grids.push_back(std::move(g));
  }
  if (total_report) *total_report = total;
  if (grids.empty()) throw std::runtime_error("no non-empty voxels after voxelization");
  return merge_scenes(grids);
}

Json trace_json(const LayerTrace& trace) {
  Json j;
  j["m_per_level"] = trace.level_sizes;
  j["omega"] = trace.omega;
  return j;
}

LayerTrace trace_of(const FeaturePyramid& pyr) {
  LayerTrace t;
  for (const auto& level : pyr.levels) t.level_sizes.push_back(level.size());
  t.omega = pyr.down_ratio;
  return t;
}

}  // namespace

void RunConfig::validate() const {
  for (int a = 0; a < 3; ++a) {
    if (!(voxel_size(a) > 0)) throw std::runtime_error("config: voxel_size must be positive");
    if (!(range_min(a) < range_max(a)))
      throw std::runtime_error("config: range_min must be below range_max");
  }
  if (otb_heights.empty()) throw std::runtime_error("config: otb_heights must not be empty");
  for (int h : otb_heights)
    if (h < 1) throw std::runtime_error("config: every OTB height must be >= 1");
  if (heads < 1 || head_dim < 1 || d != heads * head_dim)
    throw std::runtime_error("config: d must equal heads * head_dim");
  if (k < 1 || K < 1) throw std::runtime_error("config: k and K must be positive");
  if (!(tau > 0)) throw std::runtime_error("config: tau must be positive");
  if (!(gamma > 0)) throw std::runtime_error("config: gamma must be positive");
  if (delta_q < 0 || delta_q > 1 || delta_k < 0 || delta_k > 1)
    throw std::runtime_error("config: thresholds must be in [0, 1]");
}

RunConfig config_from_json(const Json& j) {
  RunConfig cfg;
  bool k_given = false, cap_given = false;
  for (const auto& [key, value] : j.items()) {
    if (key == "voxel_size") cfg.voxel_size = vec3_from(value, key);
    else if (key == "range_min") cfg.range_min = vec3_from(value, key);
    else if (key == "range_max") cfg.range_max = vec3_from(value, key);
    else if (key == "otb_heights") cfg.otb_heights = value.get<std::vector<int>>();
    else if (key == "d") cfg.d = value.get<Index>();
    else if (key == "heads") cfg.heads = value.get<int>();
    else if (key == "head_dim") cfg.head_dim = value.get<Index>();
    else if (key == "k") { cfg.k = value.get<Index>(); k_given = true; }
    else if (key == "K") { cfg.K = value.get<Index>(); cap_given = true; }
    else if (key == "tau") cfg.tau = value.get<Scalar>();
    else if (key == "gamma") cfg.gamma = value.get<Scalar>();
    else if (key == "delta_q") cfg.delta_q = value.get<Scalar>();
    else if (key == "delta_k") cfg.delta_k = value.get<Scalar>();
    else if (key == "seed") cfg.seed = value.get<std::uint64_t>();
    else if (key == "mode") {
      const std::string m = value.get<std::string>();
      if (m == "train") cfg.mode = SelectMode::Train;
      else if (m == "infer") cfg.mode = SelectMode::Infer;
      else throw std::runtime_error("config: mode must be 'train' or 'infer'");
    } else {
      throw std::runtime_error("config: unknown key '" + key + "'");
    }
  }
  if (k_given && !cap_given) cfg.K = 4 * cfg.k;
  cfg.validate();
  return cfg;
}

Json config_to_json(const RunConfig& cfg) {
  Json j;
  j["voxel_size"] = vec3_to(cfg.voxel_size);
  j["range_min"] = vec3_to(cfg.range_min);
  j["range_max"] = vec3_to(cfg.range_max);
  j["otb_heights"] = cfg.otb_heights;
  j["d"] = cfg.d;
  j["heads"] = cfg.heads;
  j["head_dim"] = cfg.head_dim;
  j["k"] = cfg.k;
  j["K"] = cfg.K;
  j["tau"] = cfg.tau;
  j["gamma"] = cfg.gamma;
  j["delta_q"] = cfg.delta_q;
  j["delta_k"] = cfg.delta_k;
  j["seed"] = cfg.seed;
  j["mode"] = cfg.mode == SelectMode::Train ? "train" : "infer";
  return j;
}

void apply_wod_preset(RunConfig& cfg) { cfg.voxel_size = Vec3(0.1, 0.1, 0.1875); }

Scene synth_scene(const SynthSpec& spec, const Vec3& range_min, const Vec3& range_max) {
  if (spec.n_objects < 0 || spec.points_per_object < 0 || spec.background_points < 0)
    throw std::invalid_argument("synth_scene: counts must be non-negative");
  Rng rng(spec.seed);
  Scene scene;
  scene.cloud.scene_id = spec.scene_id;
  const Vec3 extent = range_max - range_min;
  for (int o = 0; o < spec.n_objects; ++o) {
    Vec3 size;
    size(0) = rng.uniform(0.8, std::min(3.2, 0.8 * extent(0)));
    size(1) = rng.uniform(0.8, std::min(3.2, 0.8 * extent(1)));
    size(2) = rng.uniform(0.5, std::min(1.6, 0.8 * extent(2)));
    Vec3 lo;
    for (int a = 0; a < 3; ++a) lo(a) = range_min(a) + rng.uniform01() * (extent(a) - size(a));
    Box box{spec.scene_id, lo, lo + size};
    scene.boxes.push_back(box);
    const Vec3 center = lo + size / 2;
    for (int p = 0; p < spec.points_per_object; ++p) {
      Vec3 pos;
      do {
        for (int a = 0; a < 3; ++a) pos(a) = center(a) + rng.normal() * size(a) / 6;
      } while (!box.contains(pos));
      scene.cloud.points.push_back({pos(0), pos(1), pos(2), rng.uniform01()});
    }
  }
  for (int p = 0; p < spec.background_points; ++p) {
    Vec3 pos;
    for (int a = 0; a < 3; ++a) pos(a) = range_min(a) + rng.uniform01() * extent(a);
    scene.cloud.points.push_back({pos(0), pos(1), pos(2), rng.uniform01()});
  }
  return scene;
}

PointCloud synth_dense_cloud(std::uint64_t seed, Index target_voxels, const RunConfig& cfg) {
  if (target_voxels < 1) throw std::invalid_argument("synth_dense_cloud: target must be >= 1");
  Eigen::Vector3i dims;
  for (int a = 0; a < 3; ++a)
    dims(a) = static_cast<int>(
        std::floor((cfg.range_max(a) - cfg.range_min(a)) / cfg.voxel_size(a)));
  const Scalar fill = 0.92;
  Index lz = std::min<Index>(dims(2), static_cast<Index>(std::ceil(
                                          std::cbrt(static_cast<Scalar>(target_voxels) / fill))));
  Index lxy = static_cast<Index>(
      std::ceil(std::sqrt(static_cast<Scalar>(target_voxels) / (fill * static_cast<Scalar>(lz)))));
  if (lxy > dims(0) || lxy > dims(1))
    throw std::runtime_error("synth_dense_cloud: target does not fit in the configured range");
  const Scalar cells = static_cast<Scalar>(lxy) * static_cast<Scalar>(lxy) * static_cast<Scalar>(lz);
  Scalar p = std::min(Scalar(0.95), static_cast<Scalar>(target_voxels) / cells);
  Scalar n_points = -std::log1p(-p) * cells;

  PointCloud best;
  Index best_gap = std::numeric_limits<Index>::max();
  const Vec3 span(lxy * cfg.voxel_size(0), lxy * cfg.voxel_size(1), lz * cfg.voxel_size(2));
  for (int iter = 0; iter < 40; ++iter) {
    Rng rng(splitmix64(seed ^ (0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(iter + 1))));
    PointCloud cloud;
    const Index n = std::max<Index>(1, static_cast<Index>(std::llround(n_points)));
    cloud.points.reserve(static_cast<size_t>(n));
    for (Index i = 0; i < n; ++i) {
      Vec3 pos;
      for (int a = 0; a < 3; ++a) pos(a) = cfg.range_min(a) + rng.uniform01() * span(a);
      cloud.points.push_back({pos(0), pos(1), pos(2), rng.uniform01()});
    }
    const SparseVoxelGrid grid = voxelize(cloud, cfg.voxel_size, cfg.range_min, cfg.range_max);
    const Index count = grid.size();
    const Index gap = std::abs(count - target_voxels);
    if (gap < best_gap) {
      best_gap = gap;
      best = cloud;
    }
    if (gap * 20 <= target_voxels) return best;  // within 5%
    n_points = std::max(Scalar(1), n_points * static_cast<Scalar>(target_voxels) /
                                       static_cast<Scalar>(std::max<Index>(count, 1)));
  }
  return best;
}

void save_points(const std::string& path, const PointCloud& cloud, PointFormat format) {
  if (format == PointFormat::BinF32x4) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path);
    for (const Point& p : cloud.points) {
      const float f[4] = {static_cast<float>(p.x), static_cast<float>(p.y),
                          static_cast<float>(p.z), static_cast<float>(p.intensity)};
      out.write(reinterpret_cast<const char*>(f), 16);
    }
    return;
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path);
  out << "x,y,z,intensity\n";
  out.precision(9);
  for (const Point& p : cloud.points)
    out << p.x << ',' << p.y << ',' << p.z << ',' << p.intensity << '\n';
}

BackboneParams make_backbone_params(Rng& rng, const RunConfig& cfg) {
  BackboneParams bp;
  Rng embed_rng = rng.fork(0x11);
  Rng seg_rng = rng.fork(0x22);
  bp.embed = make_embed_params(embed_rng, 4, cfg.d);
  bp.seg = make_seg_params(seg_rng, cfg.d);
  for (size_t layer = 0; layer < cfg.otb_heights.size(); ++layer) {
    Rng otb_rng = rng.fork(0x33 + layer);
    bp.otbs.push_back(make_otb_params(otb_rng, cfg.otb_heights[layer], cfg.d, cfg.heads,
                                      cfg.head_dim, cfg.k, cfg.K, cfg.tau));
  }
  return bp;
}

BackboneResult backbone_forward(const SparseVoxelGrid& raw_grid, const BackboneParams& params,
                                const RunConfig& cfg, Rng* rng, MacCounter* macs) {
  if (params.otbs.size() != cfg.otb_heights.size())
    throw std::invalid_argument("backbone_forward: one OTB parameter set per layer required");
  BackboneResult res;
  SparseVoxelGrid grid = embed(raw_grid, params.embed);
  res.embedded = grid;
  Vector scores = seg_branch(grid, params.seg).scores.mat().col(0);
  for (size_t layer = 0; layer < params.otbs.size(); ++layer) {
    const OtbParams& otb = params.otbs[layer];
    FeaturePyramid pyr = build_pyramid(grid, cfg.otb_heights[layer], otb.pyramid);
    res.layers.push_back(trace_of(pyr));
    OtbOptions opt;
    opt.mode = cfg.mode;
    opt.rng = rng;
    opt.seg_scores = &scores;
    opt.sam = cfg.sam();
    opt.macs = macs;
    OtbResult out = otb_forward(pyr, otb, opt);
    if (layer + 1 == params.otbs.size()) {
      res.output = out.output;
      break;
    }
    SparseVoxelGrid pooled = max_pool2(grid.with_features(out.output));
    // pooled segmentation scores: mean over merged voxels
    Vector pooled_scores = Vector::Zero(pooled.size());
    std::vector<Index> count(static_cast<size_t>(pooled.size()), 0);
    for (Index i = 0; i < grid.size(); ++i) {
      const Index p = pooled.find(grid.batch_ids()[static_cast<size_t>(i)],
                                  grid.coords()(i, 0) / 2, grid.coords()(i, 1) / 2,
                                  grid.coords()(i, 2) / 2);
      pooled_scores(p) += scores(i);
      ++count[static_cast<size_t>(p)];
    }
    for (Index p = 0; p < pooled.size(); ++p)
      pooled_scores(p) /= static_cast<Scalar>(count[static_cast<size_t>(p)]);
    grid = std::move(pooled);
    scores = std::move(pooled_scores);
  }
  return res;
}

std::string checksum_hex(const Tensor& t) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* data, size_t bytes) {
    const auto* b = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < bytes; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  for (Index dim : t.shape()) {
    const std::int64_t v = dim;
    mix(&v, sizeof(v));
  }
  mix(t.array().data(), static_cast<size_t>(t.size()) * sizeof(Scalar));
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::uint64_t predict_attention_macs(const FeaturePyramid& pyramid, Index m_top_padded,
                                     Index scenes, Index K, int heads, Index head_dim) {
  std::uint64_t per_head = 2ULL * static_cast<std::uint64_t>(scenes) *
                           static_cast<std::uint64_t>(m_top_padded) *
                           static_cast<std::uint64_t>(m_top_padded) *
                           static_cast<std::uint64_t>(head_dim);
  for (int n = 0; n + 1 < pyramid.height(); ++n)
    per_head += 2ULL * static_cast<std::uint64_t>(pyramid.levels[static_cast<size_t>(n)].size()) *
                static_cast<std::uint64_t>(K) * static_cast<std::uint64_t>(head_dim);
  return per_head * static_cast<std::uint64_t>(heads);
}

Matrix dense_mhsa_reference(const Matrix& feats, const LevelAttnParams& params,
                            MacCounter* macs, Index block) {
  const Index m = feats.rows();
  const Index d = feats.cols();
  const Index dh = params.wq[0].cols();
  const Scalar inv_sqrt_d = Scalar(1) / std::sqrt(static_cast<Scalar>(d));
  Matrix out = Matrix::Zero(m, d);
  for (size_t h = 0; h < params.wq.size(); ++h) {
    const Matrix q = feats * params.wq[h].mat();
    const Matrix kmat = feats * params.wk[h].mat();
    const Matrix v = feats * params.wv[h].mat();
    if (macs) macs->proj += 3ULL * static_cast<std::uint64_t>(m * d * dh);
    for (Index q0 = 0; q0 < m; q0 += block) {
      const Index qn = std::min(block, m - q0);
      Matrix s = q.middleRows(q0, qn) * kmat.transpose() * inv_sqrt_d;
      if (macs) macs->score += static_cast<std::uint64_t>(qn * m * dh);
      for (Index i = 0; i < qn; ++i) {
        const Scalar mx = s.row(i).maxCoeff();
        Eigen::RowVectorXd e = (s.row(i).array() - mx).exp();
        s.row(i) = e / e.sum();
      }
      out.middleRows(q0, qn) += s * v * params.wh[h].mat();
      if (macs) {
        macs->av += static_cast<std::uint64_t>(qn * m * dh);
        macs->proj += static_cast<std::uint64_t>(qn * dh * d);
      }
    }
  }
  return out;
}

Json run_forward(const RunConfig& cfg, const std::vector<PointCloud>& clouds) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  VoxelizeReport rep;
  SparseVoxelGrid grid = voxelize_batch(cfg, clouds, &rep);
  Rng master(cfg.seed);
  BackboneParams params = make_backbone_params(master, cfg);
  Rng select = master.fork(0x7e1);
  MacCounter macs;
  BackboneResult out = backbone_forward(grid, params, cfg, &select, &macs);

  Json report;
  report["input"] = {{"points", rep.points_in},
                     {"points_dropped", rep.points_dropped},
                     {"voxels", grid.size()}};
  report["output"] = {{"rows", out.output.rows()},
                      {"cols", out.output.cols()},
                      {"checksum", checksum_hex(out.output)}};
  Json layers = Json::array();
  for (const auto& trace : out.layers) layers.push_back(trace_json(trace));
  report["layers"] = layers;
  report["macs"] = {{"attention", macs.attention()},
                    {"score", macs.score},
                    {"av", macs.av},
                    {"projection", macs.proj}};
  report["wall_ms"] = ms_since(t0);

  Json j;
  j["schema"] = kReportSchemaId;
  j["command"] = "forward";
  j["config"] = config_to_json(cfg);
  j["report"] = report;
  return j;
}

Json run_oracle(const RunConfig& cfg, const std::vector<PointCloud>& clouds) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  SparseVoxelGrid raw = voxelize_batch(cfg, clouds);
  if (raw.size() > kOracleVoxelLimit)
    throw std::runtime_error("oracle: scene has " + std::to_string(raw.size()) +
                             " voxels; the dense reference is limited to " +
                             std::to_string(kOracleVoxelLimit));
  Rng master(cfg.seed);
  BackboneParams params = make_backbone_params(master, cfg);
  SparseVoxelGrid grid = embed(raw, params.embed);
  OtbParams otb = params.otbs[0];
  FeaturePyramid pyr = build_pyramid(grid, cfg.otb_heights[0], otb.pyramid);
  const auto [k_all, cap_all] = exhaustive_selection(pyr);
  otb.k = k_all;
  otb.K = cap_all;
  OtbOptions opt;  // infer, no semantic path: validates the raw recursion
  OtbResult got = otb_forward(pyr, otb, opt);
  oracle::DenseReference ref = oracle::dense_reference(pyr, otb);

  const Scalar tolerance = 1e-9;
  std::vector<Scalar> per_level;
  Scalar worst = 0;
  for (int n = 0; n < pyr.height(); ++n) {
    const Scalar dev = (got.level_feats[static_cast<size_t>(n)].mat() -
                        ref.level_feats[static_cast<size_t>(n)])
                           .cwiseAbs()
                           .maxCoeff();
    per_level.push_back(dev);
    worst = std::max(worst, dev);
  }
  const Scalar final_dev = (got.output.mat() - ref.output).cwiseAbs().maxCoeff();
  worst = std::max(worst, final_dev);

  Json report;
  report["voxels"] = raw.size();
  report["m_per_level"] = trace_of(pyr).level_sizes;
  report["max_abs_dev_per_level"] = per_level;
  report["final_abs_dev"] = final_dev;
  report["max_abs_dev"] = worst;
  report["tolerance"] = tolerance;
  report["pass"] = worst < tolerance;
  report["wall_ms"] = ms_since(t0);

  Json j;
  j["schema"] = kReportSchemaId;
  j["command"] = "oracle";
  j["config"] = config_to_json(cfg);
  j["report"] = report;
  return j;
}

Json run_bench(const RunConfig& cfg, const std::vector<Index>& sizes) {
  cfg.validate();
  if (sizes.empty()) throw std::runtime_error("bench: no scene sizes given");
  for (size_t i = 1; i < sizes.size(); ++i)
    if (sizes[i] <= sizes[i - 1]) throw std::runtime_error("bench: sizes must be ascending");

  Rng master(cfg.seed);
  BackboneParams params = make_backbone_params(master, cfg);
  const OtbParams& otb = params.otbs[0];

  Json entries = Json::array();
  std::vector<Scalar> m_actual, macs_dense, macs_oct;
  for (Index target : sizes) {
    PointCloud cloud = synth_dense_cloud(cfg.seed ^ static_cast<std::uint64_t>(target), target, cfg);
    SparseVoxelGrid grid = embed(voxelize(cloud, cfg.voxel_size, cfg.range_min, cfg.range_max),
                                 params.embed);
    FeaturePyramid pyr = build_pyramid(grid, cfg.otb_heights[0], otb.pyramid);

    MacCounter oct;
    auto t_oct = std::chrono::steady_clock::now();
    OtbOptions opt;
    opt.macs = &oct;
    otb_forward(pyr, otb, opt);
    const double wall_oct = ms_since(t_oct);

    const Index m_top = pyr.levels.back().size();
    const std::uint64_t predicted =
        predict_attention_macs(pyr, m_top, 1, cfg.K, cfg.heads, cfg.head_dim);

    MacCounter dense;
    auto t_dense = std::chrono::steady_clock::now();
    dense_mhsa_reference(grid.features().mat(), otb.levels[0], &dense);
    const double wall_dense = ms_since(t_dense);

    Json e;
    e["M_target"] = target;
    e["M"] = grid.size();
    e["m_per_level"] = trace_of(pyr).level_sizes;
    e["omega"] = pyr.down_ratio;
    e["octattn_macs"] = oct.attention();
    e["octattn_macs_predicted"] = predicted;
    e["octattn_proj_macs"] = oct.proj;
    e["dense_macs"] = dense.attention();
    e["dense_proj_macs"] = dense.proj;
    e["wall_ms_octattn"] = wall_oct;
    e["wall_ms_dense"] = wall_dense;
    e["predicted_matches"] = oct.attention() == predicted;
    entries.push_back(e);

    m_actual.push_back(static_cast<Scalar>(grid.size()));
    macs_dense.push_back(static_cast<Scalar>(dense.attention()));
    macs_oct.push_back(static_cast<Scalar>(oct.attention()));
  }

  Json report;
  report["entries"] = entries;
  report["slopes"] = {{"dense", loglog_slope(m_actual, macs_dense)},
                      {"octattn", loglog_slope(m_actual, macs_oct)}};

  Json j;
  j["schema"] = kReportSchemaId;
  j["command"] = "bench";
  j["config"] = config_to_json(cfg);
  j["report"] = report;
  return j;
}

Json run_trainseg(const RunConfig& cfg, const SynthSpec& spec, int steps, Scalar lr) {
  cfg.validate();
  if (steps < 1) throw std::runtime_error("train-seg: steps must be >= 1");
  Scene scene = synth_scene(spec, cfg.range_min, cfg.range_max);
  SparseVoxelGrid raw = voxelize(scene.cloud, cfg.voxel_size, cfg.range_min, cfg.range_max);
  if (raw.size() == 0) throw std::runtime_error("train-seg: scene voxelized to nothing");
  Rng master(cfg.seed);
  Rng embed_rng = master.fork(0x11);
  Rng seg_rng = master.fork(0x22);
  SparseVoxelGrid grid = embed(raw, make_embed_params(embed_rng, 4, cfg.d));
  const auto labels = label_voxels(grid, scene.boxes);

  SegParams proto = make_seg_params(seg_rng, cfg.d);
  ArrayX kernel = proto.conv.kernel.array();
  ArrayX bias = proto.conv.bias.array();
  ArrayX w = proto.w.array();
  ArrayX b = proto.b.array();
  const Shape kernel_shape = proto.conv.kernel.shape();

  std::vector<Scalar> losses;
  for (int step = 0; step <= steps; ++step) {
    Tape tape;
    SegParams p;
    p.conv.kernel = Tensor::leaf(tape, kernel_shape, kernel);
    p.conv.bias = Tensor::leaf(tape, {cfg.d}, bias);
    p.w = Tensor::leaf(tape, {cfg.d, 1}, w);
    p.b = Tensor::leaf(tape, {1}, b);
    SegScores seg = seg_branch(grid, p);
    Tensor loss = focal_loss(seg.scores, labels);
    losses.push_back(loss.value());
    if (step == steps) break;  // final entry is evaluation only
    tape.backward(loss);
    kernel -= lr * tape.grad(p.conv.kernel);
    bias -= lr * tape.grad(p.conv.bias);
    w -= lr * tape.grad(p.w);
    b -= lr * tape.grad(p.b);
  }

  Json report;
  report["steps"] = steps;
  report["lr"] = lr;
  report["voxels"] = grid.size();
  report["foreground"] = static_cast<Index>(std::count(labels.begin(), labels.end(), 1));
  report["loss"] = losses;
  report["initial_loss"] = losses.front();
  report["final_loss"] = losses.back();
  report["reduction"] = 1.0 - losses.back() / losses.front();

  Json j;
  j["schema"] = kReportSchemaId;
  j["command"] = "train-seg";
  j["config"] = config_to_json(cfg);
  j["report"] = report;
  return j;
}

Json run_synth(const RunConfig& cfg, const SynthSpec& spec, const std::string& points_path,
               const std::string& boxes_path, PointFormat format) {
  cfg.validate();
  Scene scene = synth_scene(spec, cfg.range_min, cfg.range_max);
  save_points(points_path, scene.cloud, format);
  save_boxes(boxes_path, scene.boxes);

  Json report;
  report["points"] = scene.cloud.points.size();
  report["boxes"] = scene.boxes.size();
  report["points_file"] = points_path;
  report["boxes_file"] = boxes_path;
  report["format"] = format == PointFormat::Csv ? "csv" : "bin_f32x4";

  Json j;
  j["schema"] = kReportSchemaId;
  j["command"] = "synth";
  j["config"] = config_to_json(cfg);
  j["report"] = report;
  return j;
}

// ---- minimal structural JSON-schema validation

namespace {

bool type_matches(const Json& value, const std::string& type) {
  if (type == "object") return value.is_object();
  if (type == "array") return value.is_array();
  if (type == "string") return value.is_string();
  if (type == "boolean") return value.is_boolean();
  if (type == "integer") return value.is_number_integer() || value.is_number_unsigned();
  if (type == "number") return value.is_number();
  if (type == "null") return value.is_null();
  return false;
}

void validate_node(const Json& value, const Json& schema, const std::string& path,
                   std::vector<std::string>& errors) {
  if (schema.contains("type")) {
    const Json& t = schema["type"];
    bool ok = false;
    if (t.is_string()) ok = type_matches(value, t.get<std::string>());
    else
      for (const auto& alt : t) ok = ok || type_matches(value, alt.get<std::string>());
    if (!ok) {
      errors.push_back(path + ": type mismatch");
      return;
    }
  }
  if (schema.contains("const") && value != schema["const"])
    errors.push_back(path + ": does not equal the required constant");
  if (schema.contains("enum")) {
    bool ok = false;
    for (const auto& alt : schema["enum"]) ok = ok || value == alt;
    if (!ok) errors.push_back(path + ": not one of the allowed values");
  }
  if (schema.contains("oneOf")) {
    int matched = 0;
    for (const auto& alt : schema["oneOf"]) {
      std::vector<std::string> sub;
      validate_node(value, alt, path, sub);
      if (sub.empty()) ++matched;
    }
    if (matched != 1)
      errors.push_back(path + ": matched " + std::to_string(matched) +
                       " of the oneOf alternatives, expected exactly 1");
  }
  if (value.is_object()) {
    const Json props = schema.value("properties", Json::object());
    if (schema.contains("required"))
      for (const auto& req : schema["required"])
        if (!value.contains(req.get<std::string>()))
          errors.push_back(path + ": missing required key '" + req.get<std::string>() + "'");
    for (const auto& [key, sub] : value.items()) {
      if (props.contains(key)) {
        validate_node(sub, props[key], path + "/" + key, errors);
      } else if (schema.value("additionalProperties", Json(true)) == Json(false)) {
        errors.push_back(path + ": unexpected key '" + key + "'");
      }
    }
  }
  if (value.is_array()) {
    if (schema.contains("minItems") && value.size() < schema["minItems"].get<size_t>())
      errors.push_back(path + ": fewer items than minItems");
    if (schema.contains("maxItems") && value.size() > schema["maxItems"].get<size_t>())
      errors.push_back(path + ": more items than maxItems");
    if (schema.contains("items")) {
      size_t i = 0;
      for (const auto& item : value)
        validate_node(item, schema["items"], path + "/" + std::to_string(i++), errors);
    }
  }
}

}  // namespace

std::vector<std::string> validate_json(const Json& value, const Json& schema) {
  std::vector<std::string> errors;
  validate_node(value, schema, "$", errors);
  return errors;
}

}  // namespace octattn
