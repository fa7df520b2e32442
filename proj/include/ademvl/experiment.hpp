#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ademvl/decoder.hpp"
#include "ademvl/flops.hpp"
#include "ademvl/heatmap.hpp"
#include "ademvl/task.hpp"
#include "ademvl/tensor_io.hpp"
#include "ademvl/train.hpp"

namespace ademvl {

using nlohmann::json;

// Everything needed to reproduce a run. JSON keys mirror the field names.
struct ExperimentConfig {
  ModelConfig model;
  TrainConfig train;
  std::size_t colors = 8;
  std::size_t n_train = 4096;
  std::size_t n_test = 1024;
  std::size_t heatmap_samples = 256;
  std::string label = "default";

  std::uint64_t seed() const { return model.seed; }

  void finalize() {
    model.vocab_size = vocab::size(colors);
    model.validate();
  }
};

inline json to_json(const ExperimentConfig& c) {
  const auto& m = c.model;
  return json{
      {"label", c.label},
      {"seed", m.seed},
      {"n_blocks", m.n_blocks},
      {"d", m.d},
      {"d_vis", m.d_vis},
      {"rank", m.rank},
      {"max_seq_len", m.max_seq_len},
      {"placement",
       {{"query_from", std::string(to_string(m.placement.query_from))},
        {"add_to", std::string(to_string(m.placement.add_to))}}},
      {"alpha", m.fusion.alpha},
      {"beta", m.fusion.beta},
      {"gamma", m.fusion.gamma},
      {"phi", std::string(to_string(m.fusion.phi))},
      {"pos_init_std", m.fusion.pos_init_std},
      {"scales", m.scales},
      {"pool", std::string(to_string(m.pool))},
      {"colors", c.colors},
      {"n_train", c.n_train},
      {"n_test", c.n_test},
      {"heatmap_samples", c.heatmap_samples},
      {"steps", c.train.steps},
      {"batch_size", c.train.batch_size},
      {"lr", c.train.lr},
      {"momentum", c.train.momentum},
      {"optimizer", std::string(to_string(c.train.optimizer))},
  };
}

namespace detail {
template <typename T>
void read_key(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

inline const std::vector<std::string>& known_keys() {
  static const std::vector<std::string> keys = {
      "label", "seed",  "n_blocks", "d",      "d_vis",   "rank",    "max_seq_len",
      "placement", "alpha", "beta", "gamma", "phi", "pos_init_std", "scales", "pool", "colors",
      "n_train", "n_test", "heatmap_samples", "steps", "batch_size", "lr", "momentum",
      "optimizer"};
  return keys;
}
}  // namespace detail

// Missing keys keep their defaults; unknown keys are rejected.
inline ExperimentConfig config_from_json(const json& j, ExperimentConfig c = {}) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [k, _] : j.items()) {
    const auto& keys = detail::known_keys();
    if (std::find(keys.begin(), keys.end(), k) == keys.end()) {
      throw ConfigError("unknown config key '" + k + "'");
    }
  }
  auto& m = c.model;
  detail::read_key(j, "label", c.label);
  detail::read_key(j, "seed", m.seed);
  detail::read_key(j, "n_blocks", m.n_blocks);
  detail::read_key(j, "d", m.d);
  detail::read_key(j, "d_vis", m.d_vis);
  detail::read_key(j, "rank", m.rank);
  detail::read_key(j, "max_seq_len", m.max_seq_len);
  if (j.contains("placement")) {
    const auto& p = j.at("placement");
    std::string q = std::string(to_string(m.placement.query_from));
    std::string a = std::string(to_string(m.placement.add_to));
    detail::read_key(p, "query_from", q);
    detail::read_key(p, "add_to", a);
    m.placement = {parse_site(q), parse_site(a)};
  }
  detail::read_key(j, "alpha", m.fusion.alpha);
  detail::read_key(j, "beta", m.fusion.beta);
  detail::read_key(j, "gamma", m.fusion.gamma);
  detail::read_key(j, "pos_init_std", m.fusion.pos_init_std);
  if (j.contains("phi")) m.fusion.phi = parse_activation(j.at("phi").get<std::string>());
  detail::read_key(j, "scales", m.scales);
  if (j.contains("pool")) m.pool = parse_pool(j.at("pool").get<std::string>());
  detail::read_key(j, "colors", c.colors);
  detail::read_key(j, "n_train", c.n_train);
  detail::read_key(j, "n_test", c.n_test);
  detail::read_key(j, "heatmap_samples", c.heatmap_samples);
  detail::read_key(j, "steps", c.train.steps);
  detail::read_key(j, "batch_size", c.train.batch_size);
  detail::read_key(j, "lr", c.train.lr);
  detail::read_key(j, "momentum", c.train.momentum);
  if (j.contains("optimizer")) {
    c.train.optimizer = parse_optimizer(j.at("optimizer").get<std::string>());
  }
  c.finalize();
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path.string());
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

// ADEMVL_SEED, when set, replaces the configured seed.
inline void apply_seed_override(ExperimentConfig& c) {
  if (const char* s = std::getenv("ADEMVL_SEED"); s && *s) {
    try {
      std::size_t used = 0;
      if (s[0] < '0' || s[0] > '9') throw std::invalid_argument(s);
      const std::uint64_t seed = std::stoull(s, &used);
      if (used != std::string(s).size()) throw std::invalid_argument(s);
      c.model.seed = seed;
    } catch (const std::exception&) {
      throw ConfigError(std::string("ADEMVL_SEED is not an unsigned integer: ") + s);
    }
  }
}

// ---------------------------------------------------------------------------

struct RunReport {
  ExperimentConfig config;
  Real accuracy = 0.0;
  std::vector<Real> loss_curve;
  FlopsReport flops;
  std::optional<DropHeatmap> heatmap;
  std::size_t trainable_params = 0;
  double wall_clock_s = 0.0;
  std::optional<std::string> error;  // set when the run failed
};

inline json tensor_grid_json(const Tensor& g) {
  json rows = json::array();
  for (std::size_t r = 0; r < g.dim(0); ++r) rows.push_back(std::vector<Real>(g.row(r).begin(), g.row(r).end()));
  return rows;
}

inline json to_json(const FlopsReport& f) {
  json j{{"L", f.L},
         {"N", f.N},
         {"d", f.d},
         {"flops_standard", to_string_wide(f.standard)},
         {"flops_param_free", to_string_wide(f.param_free)},
         {"savings", to_string_wide(f.savings())},
         {"ratio", f.ratio()},
         {"ratio_rational", to_string_wide(f.ratio_num) + "/" + to_string_wide(f.ratio_den)}};
  j["measured_ns_standard"] = f.measured_ns_standard ? json(*f.measured_ns_standard) : json(nullptr);
  j["measured_ns_param_free"] =
      f.measured_ns_param_free ? json(*f.measured_ns_param_free) : json(nullptr);
  return j;
}

inline json to_json(const DropHeatmap& h) {
  json grids = json::array();
  for (const auto& g : h.grids) {
    grids.push_back({{"scale", g.scale},
                     {"side", g.side},
                     {"frequency", tensor_grid_json(g.frequency)},
                     {"normalized", tensor_grid_json(g.normalized)},
                     {"kept_counts", tensor_grid_json(g.kept_counts)}});
  }
  json j{{"samples", h.samples},
         {"decisions_per_row", h.decisions_per_row},
         {"mean_kept", h.mean_kept},
         {"expected_mean_kept", h.expected_mean_kept},
         {"gamma_zero", h.gamma_zero},
         {"grids", grids}};
  j["queried_top_decile_rate"] =
      h.queried_top_decile_rate ? json(*h.queried_top_decile_rate) : json(nullptr);
  return j;
}

inline json to_json(const RunReport& r) {
  json j{{"config", to_json(r.config)},
         {"seed", r.config.seed()},
         {"accuracy", r.accuracy},
         {"loss_curve", r.loss_curve},
         {"flops", to_json(r.flops)},
         {"trainable_params", r.trainable_params},
         {"wall_clock_s", r.wall_clock_s}};
  j["heatmap"] = r.heatmap ? to_json(*r.heatmap) : json(nullptr);
  j["error"] = r.error ? json(*r.error) : json(nullptr);
  return j;
}

// ---------------------------------------------------------------------------

struct TrainedRun {
  RunReport report;
  std::optional<DecoderModel> model;
};

inline SyntheticEncoder make_encoder(const ExperimentConfig& c) {
  return SyntheticEncoder(c.colors, c.model.d_vis, derive_seed(c.seed(), 300));
}

inline TrainedRun run_experiment_full(ExperimentConfig cfg, const ProgressFn& progress = {}) {
  cfg.finalize();
  const auto start = std::chrono::steady_clock::now();
  TrainedRun out;
  out.report.config = cfg;
  const GridVqaDataset data = gen_dataset(cfg.seed(), cfg.n_train, cfg.n_test, cfg.colors);
  const SyntheticEncoder enc = make_encoder(cfg);
  DecoderModel model(cfg.model);
  out.report.trainable_params = model.fusion().trainable_count();

  const TrainMetrics tm = train(model, enc, data.train, cfg.train, cfg.seed(), progress);
  out.report.loss_curve = tm.loss_curve;
  out.report.accuracy = evaluate(model, enc, data.test);

  const std::size_t stream_rows = GridVqaSample{}.question().size() + 1;
  out.report.flops = flops(stream_rows, cfg.model.visual_rows(), cfg.model.d);

  const std::size_t hm = std::min(cfg.heatmap_samples, data.test.size());
  out.report.heatmap = drop_heatmap(model, enc, std::span(data.test).subspan(0, hm));

  out.report.wall_clock_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  out.model.emplace(std::move(model));
  return out;
}

inline RunReport run_experiment(const ExperimentConfig& cfg, const ProgressFn& progress = {}) {
  return run_experiment_full(cfg, progress).report;
}

// ---------------------------------------------------------------------------
// Ablation sweeps

inline const std::vector<std::string>& ablation_axes() {
  static const std::vector<std::string> axes = {"projection", "placement", "pooling",
                                                "alpha",      "beta",      "gamma"};
  return axes;
}

inline std::string pooling_label(const std::vector<std::size_t>& scales, PoolKind pool) {
  std::ostringstream os;
  os << (pool == PoolKind::avg ? "avg " : "max ");
  if (scales.size() == 1) {
    os << prompt_rows(scales);
    return os.str();
  }
  os << "concat(";
  for (std::size_t i = 0; i < scales.size(); ++i)
    os << (i ? "," : "") << grid_side(scales[i]) * grid_side(scales[i]);
  os << ')';
  return os.str();
}

// One config per grid point, seeded base_seed + index.
inline std::vector<ExperimentConfig> ablation_configs(const std::string& axis,
                                                      const ExperimentConfig& base) {
  std::vector<ExperimentConfig> out;
  auto push = [&](ExperimentConfig c, std::string label) {
    c.model.seed = base.seed() + out.size();
    c.label = axis + ":" + label;
    c.finalize();
    out.push_back(std::move(c));
  };
  if (axis == "projection") {
    for (Activation a : kAllActivations) {
      ExperimentConfig c = base;
      c.model.fusion.phi = a;
      push(c, std::string(to_string(a)));
    }
  } else if (axis == "placement") {
    for (const auto& p : kPlacements) {
      ExperimentConfig c = base;
      c.model.placement = p;
      push(c, p.name());
    }
  } else if (axis == "pooling") {
    const std::vector<std::pair<std::vector<std::size_t>, PoolKind>> rows = {
        {{1}, PoolKind::avg},       {{2}, PoolKind::avg},    {{4}, PoolKind::avg},
        {{2, 4}, PoolKind::avg},    {{1, 4}, PoolKind::avg}, {{1, 2}, PoolKind::avg},
        {{1, 2, 4}, PoolKind::avg}, {{1, 2}, PoolKind::max}};
    for (const auto& [scales, pool] : rows) {
      ExperimentConfig c = base;
      c.model.scales = scales;
      c.model.pool = pool;
      push(c, pooling_label(scales, pool));
    }
  } else if (axis == "alpha" || axis == "beta" || axis == "gamma") {
    const std::vector<Real> grid = axis == "alpha"  ? std::vector<Real>{0.01, 0.05, 0.1, 0.5, 1.0}
                                   : axis == "beta" ? std::vector<Real>{0.001, 0.005, 0.01, 0.05, 0.1}
                                                    : std::vector<Real>{0.0, 0.1, 0.2, 0.3, 0.4};
    for (Real v : grid) {
      ExperimentConfig c = base;
      (axis == "alpha" ? c.model.fusion.alpha : axis == "beta" ? c.model.fusion.beta
                                                               : c.model.fusion.gamma) = v;
      std::ostringstream os;
      os << axis << '=' << v;
      push(c, os.str());
    }
  } else {
    throw ConfigError("unknown ablation axis '" + axis +
                      "' (expected projection|placement|pooling|alpha|beta|gamma)");
  }
  return out;
}

// Runs every grid point; a failing run is recorded and the sweep continues.
// Reports come back sorted by accuracy, best first.
inline std::vector<RunReport> ablate(const std::string& axis, const ExperimentConfig& base,
                                     const std::function<void(const RunReport&)>& on_run = {}) {
  std::vector<RunReport> reports;
  for (const ExperimentConfig& c : ablation_configs(axis, base)) {
    RunReport r;
    try {
      r = run_experiment(c);
    } catch (const Error& e) {
      r.config = c;
      r.error = e.kind() + ": " + e.what();
    }
    if (on_run) on_run(r);
    reports.push_back(std::move(r));
  }
  std::stable_sort(reports.begin(), reports.end(),
                   [](const RunReport& a, const RunReport& b) { return a.accuracy > b.accuracy; });
  return reports;
}

inline std::string markdown_table(const std::vector<RunReport>& reports) {
  std::ostringstream os;
  os << "| run | seed | accuracy | final loss | trainable | wall (s) | status |\n";
  os << "|---|---:|---:|---:|---:|---:|---|\n";
  for (const auto& r : reports) {
    os << "| " << r.config.label << " | " << r.config.seed() << " | " << std::fixed
       << std::setprecision(4) << r.accuracy << " | ";
    if (r.loss_curve.empty()) os << "-";
    else os << r.loss_curve.back();
    os << " | " << r.trainable_params << " | " << std::setprecision(1) << r.wall_clock_s << " | "
       << (r.error ? *r.error : "ok") << " |\n";
  }
  return os.str();
}

inline std::string heatmap_csv(const ScaleHeatmap& g) {
  std::ostringstream os;
  os << std::setprecision(17);
  for (std::size_t r = 0; r < g.side; ++r) {
    for (std::size_t c = 0; c < g.side; ++c) os << (c ? "," : "") << g.frequency(r, c);
    os << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Checkpoints: a directory of tensor files plus manifest.json. The frozen base
// model is regenerated from the config seed.

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream os(p);
  if (!os) throw IoError("cannot write " + p.string());
  os << s;
}

inline void save_checkpoint(const std::filesystem::path& dir, const DecoderModel& model,
                            const RunReport& report) {
  std::filesystem::create_directories(dir);
  const FusionParams& f = model.fusion();
  json tensors = json::array();
  for (const auto& [name, t] : {std::pair<const char*, const Tensor*>{"a_feat", &f.a_feat},
                                {"b_feat", &f.b_feat},
                                {"a_cls", &f.a_cls},
                                {"b_cls", &f.b_cls},
                                {"pos_embed", &f.pos_embed}}) {
    const std::string file = std::string(name) + ".admt";
    save_tensor(dir / file, *t);
    tensors.push_back({{"name", name}, {"file", file}, {"shape", t->shape()}});
  }
  json manifest{{"config", to_json(report.config)},
                {"step", report.loss_curve.size()},
                {"metrics",
                 {{"accuracy", report.accuracy},
                  {"final_loss", report.loss_curve.empty() ? 0.0 : report.loss_curve.back()}}},
                {"tensors", tensors}};
  write_text(dir / "manifest.json", manifest.dump(2));
}

struct Checkpoint {
  ExperimentConfig config;
  DecoderModel model;
  json manifest;
};

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw IoError("no manifest.json in " + dir.string());
  json manifest;
  try {
    is >> manifest;
  } catch (const json::exception& e) {
    throw IoError("manifest.json is not valid JSON: " + std::string(e.what()));
  }
  ExperimentConfig cfg = config_from_json(manifest.at("config"));
  DecoderModel model(cfg.model);
  FusionParams& f = model.fusion();
  for (const auto& t : manifest.at("tensors")) {
    const std::string name = t.at("name").get<std::string>();
    Tensor value = load_tensor(dir / t.at("file").get<std::string>());
    Tensor* slot = name == "a_feat"      ? &f.a_feat
                   : name == "b_feat"    ? &f.b_feat
                   : name == "a_cls"     ? &f.a_cls
                   : name == "b_cls"     ? &f.b_cls
                   : name == "pos_embed" ? &f.pos_embed
                                         : nullptr;
    if (!slot) throw IoError("checkpoint has unknown tensor '" + name + "'");
    if (value.shape() != slot->shape()) {
      throw ShapeError("checkpoint tensor " + name + " has shape " + shape_str(value.shape()) +
                       ", model expects " + shape_str(slot->shape()));
    }
    *slot = std::move(value);
  }
  return {cfg, std::move(model), manifest};
}

}  // namespace ademvl
