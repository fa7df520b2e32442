// ademvl: command-line harness for the fusion kernels, training runs,
// ablation sweeps and drop heatmaps.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "ademvl/ademvl.hpp"

namespace fs = std::filesystem;
using namespace ademvl;

namespace {

enum class Format { text, json };

void emit_error(const std::string& kind, const std::string& message) {
  std::cerr << json{{"error", {{"kind", kind}, {"message", message}}}}.dump() << '\n';
}

// A --seed flag wins; otherwise ADEMVL_SEED; otherwise the fallback.
std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag, std::uint64_t fallback) {
  if (flag) return *flag;
  ExperimentConfig probe;
  probe.model.seed = fallback;
  apply_seed_override(probe);
  return probe.model.seed;
}

ExperimentConfig config_for(const std::string& path, const std::optional<std::size_t>& steps) {
  ExperimentConfig c = path.empty() ? ExperimentConfig{} : load_config(path);
  if (steps) c.train.steps = *steps;
  apply_seed_override(c);
  c.finalize();
  return c;
}

void write_run_outputs(const fs::path& dir, const RunReport& r) {
  fs::create_directories(dir);
  write_text(dir / "report.json", to_json(r).dump(2));
  write_text(dir / "report.md", markdown_table({r}));
  if (r.heatmap) {
    for (const auto& g : r.heatmap->grids) {
      write_text(dir / ("heatmap_scale" + std::to_string(g.scale) + ".csv"), heatmap_csv(g));
    }
  }
}

ProgressFn progress_printer(std::size_t total, bool quiet) {
  if (quiet) return {};
  const std::size_t every = std::max<std::size_t>(1, total / 20);
  return [=](std::size_t step, Real loss, Real lr) {
    if (step % every == 0 || step + 1 == total) {
      std::cerr << "step " << step << "/" << total << "  loss " << loss << "  lr " << lr << '\n';
    }
  };
}

void print_heatmap_text(const DropHeatmap& h) {
  std::cout << "samples " << h.samples << ", decisions per row " << h.decisions_per_row << '\n';
  std::cout << std::setprecision(15) << "mean kept " << h.mean_kept << " (expected " << h.expected_mean_kept
            << ")\n";
  if (h.queried_top_decile_rate) {
    std::cout << "queried patch in top decile: " << *h.queried_top_decile_rate << '\n';
  }
  for (const auto& g : h.grids) {
    std::cout << "\nscale " << g.scale << " (" << g.side << "x" << g.side << ", normalized)\n";
    for (std::size_t r = 0; r < g.side; ++r) {
      for (std::size_t c = 0; c < g.side; ++c) {
        std::cout << std::fixed << std::setprecision(2) << std::setw(5) << g.normalized(r, c);
      }
      std::cout << '\n';
    }
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ADEM-VL style parameter-free fusion: kernels, toy training, ablations"};
  app.require_subcommand(1);
  app.fallthrough();
  Format format = Format::text;
  const std::map<std::string, Format> formats{{"text", Format::text}, {"json", Format::json}};
  app.add_option("--format", format, "Output format")->transform(CLI::CheckedTransformer(formats))
      ->capture_default_str();

  // flops
  auto* flops_cmd = app.add_subcommand("flops", "Exact FLOPs of standard vs parameter-free cross-attention");
  std::uint64_t fl_L = 0, fl_N = 0, fl_d = 0;
  bool fl_bench = false;
  flops_cmd->add_option("--L", fl_L, "Text tokens")->required();
  flops_cmd->add_option("--N", fl_N, "Visual rows")->required();
  flops_cmd->add_option("--d", fl_d, "Hidden width")->required();
  flops_cmd->add_flag("--bench", fl_bench, "Also time both kernels (median of 11)");

  // gradcheck
  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of the fusion backward pass");
  std::optional<std::uint64_t> gc_seed;
  std::size_t gc_trials = 20;
  grad_cmd->add_option("--seed", gc_seed, "Base seed");
  grad_cmd->add_option("--trials", gc_trials, "Instances per (projection, gamma)")->capture_default_str();

  // train
  auto* train_cmd = app.add_subcommand("train", "Train the fusion parameters on the grid task");
  std::string tr_config;
  std::optional<std::size_t> tr_steps;
  std::string tr_out;
  bool tr_quiet = false;
  train_cmd->add_option("--config", tr_config, "JSON config file")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--steps", tr_steps, "Override the configured step count");
  train_cmd->add_option("--out", tr_out, "Checkpoint directory");
  train_cmd->add_flag("--quiet", tr_quiet, "No progress on stderr");

  // ablate
  auto* ablate_cmd = app.add_subcommand("ablate", "Sweep one axis and report every run");
  std::string ab_axis, ab_config, ab_out;
  std::optional<std::size_t> ab_steps;
  ablate_cmd->add_option("--axis", ab_axis, "projection|placement|pooling|alpha|beta|gamma")->required();
  ablate_cmd->add_option("--config", ab_config, "Base JSON config (defaults if omitted)")
      ->check(CLI::ExistingFile);
  ablate_cmd->add_option("--steps", ab_steps, "Override the configured step count");
  ablate_cmd->add_option("--out", ab_out, "Directory for reports.json and reports.md");

  // heatmap
  auto* heat_cmd = app.add_subcommand("heatmap", "Drop-decision frequency grids of a checkpoint");
  std::string hm_ckpt, hm_out;
  std::optional<std::size_t> hm_samples;
  heat_cmd->add_option("--checkpoint", hm_ckpt, "Checkpoint directory")->required();
  heat_cmd->add_option("--samples", hm_samples, "Test samples to scan (default: config heatmap_samples)");
  heat_cmd->add_option("--out", hm_out, "Directory for CSV grids");

  // dump-prompt
  auto* dump_cmd = app.add_subcommand("dump-prompt", "Write the multiscale prompt of one synthetic image");
  std::optional<std::uint64_t> dp_seed;
  std::string dp_out = "prompt.admt";
  std::size_t dp_colors = 8, dp_dvis = 32;
  std::vector<std::size_t> dp_scales{1, 2};
  std::string dp_pool = "avg";
  dump_cmd->add_option("--seed", dp_seed, "Sample and encoder seed");
  dump_cmd->add_option("--out", dp_out, "Tensor file; a .json sidecar is written next to it")
      ->capture_default_str();
  dump_cmd->add_option("--colors", dp_colors, "Colors in the grid")->capture_default_str();
  dump_cmd->add_option("--d-vis", dp_dvis, "Encoder width")->capture_default_str();
  dump_cmd->add_option("--scales", dp_scales, "Prompt scales")->capture_default_str();
  dump_cmd->add_option("--pool", dp_pool, "avg|max")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    emit_error("usage", e.what());
    return 2;
  }

  try {
    if (*flops_cmd) {
      FlopsReport r = flops(fl_L, fl_N, fl_d);
      if (fl_bench) benchmark(r);
      if (format == Format::json) std::cout << to_json(r).dump(2) << '\n';
      else std::cout << format_table(r);
      return 0;
    }

    if (*grad_cmd) {
      const std::uint64_t seed = resolve_seed(gc_seed, 0);
      json rows = json::array();
      Real worst = 0.0;
      for (Activation phi : kAllActivations) {
        for (Real gamma : {0.0, 0.2}) {
          FuseGradReport agg;
          for (std::size_t t = 0; t < gc_trials; ++t) {
            const auto r = check_fuse_gradients(random_fuse_instance(derive_seed(seed, t), gamma, phi));
            agg.a_feat = std::max(agg.a_feat, r.a_feat);
            agg.b_feat = std::max(agg.b_feat, r.b_feat);
            agg.pos_embed = std::max(agg.pos_embed, r.pos_embed);
            agg.text = std::max(agg.text, r.text);
          }
          worst = std::max(worst, agg.worst());
          rows.push_back({{"phi", std::string(to_string(phi))},
                          {"gamma", gamma},
                          {"a_feat", agg.a_feat},
                          {"b_feat", agg.b_feat},
                          {"pos_embed", agg.pos_embed},
                          {"text", agg.text}});
        }
      }
      const bool ok = worst <= 1e-4;
      if (format == Format::json) {
        std::cout << json{{"seed", seed}, {"trials", gc_trials}, {"worst", worst}, {"ok", ok}, {"checks", rows}}
                         .dump(2)
                  << '\n';
      } else {
        std::cout << std::left << std::setw(15) << "phi" << std::setw(7) << "gamma" << std::right;
        for (const char* h : {"A_feat", "B_feat", "E", "X_l"}) std::cout << std::setw(11) << h;
        std::cout << '\n';
        for (const auto& r : rows) {
          std::cout << std::left << std::setw(15) << r["phi"].get<std::string>() << std::setw(7)
                    << r["gamma"].get<Real>() << std::right << std::scientific << std::setprecision(2);
          for (const char* k : {"a_feat", "b_feat", "pos_embed", "text"})
            std::cout << std::setw(11) << r[k].get<Real>();
          std::cout << std::defaultfloat << '\n';
        }
        std::cout << "worst relative error " << worst << (ok ? " (ok)" : " (exceeds 1e-4)") << '\n';
      }
      if (!ok) {
        emit_error("gradcheck", "worst relative error " + std::to_string(worst) + " exceeds 1e-4");
        return 1;
      }
      return 0;
    }

    if (*train_cmd) {
      const ExperimentConfig cfg = config_for(tr_config, tr_steps);
      TrainedRun run = run_experiment_full(cfg, progress_printer(cfg.train.steps, tr_quiet));
      if (!tr_out.empty()) {
        save_checkpoint(tr_out, *run.model, run.report);
        write_run_outputs(tr_out, run.report);
      }
      if (format == Format::json) std::cout << to_json(run.report).dump(2) << '\n';
      else std::cout << markdown_table({run.report});
      return 0;
    }

    if (*ablate_cmd) {
      const ExperimentConfig base = config_for(ab_config, ab_steps);
      const auto reports = ablate(ab_axis, base, [](const RunReport& r) {
        std::cerr << r.config.label << ": " << (r.error ? *r.error : "accuracy " + std::to_string(r.accuracy))
                  << '\n';
      });
      json all = json::array();
      for (const auto& r : reports) all.push_back(to_json(r));
      if (!ab_out.empty()) {
        fs::create_directories(ab_out);
        write_text(fs::path(ab_out) / "reports.json", all.dump(2));
        write_text(fs::path(ab_out) / "reports.md", markdown_table(reports));
      }
      if (format == Format::json) std::cout << all.dump(2) << '\n';
      else std::cout << markdown_table(reports);
      return 0;
    }

    if (*heat_cmd) {
      const Checkpoint ck = load_checkpoint(hm_ckpt);
      const ExperimentConfig& cfg = ck.config;
      const GridVqaDataset data = gen_dataset(cfg.seed(), 0, cfg.n_test, cfg.colors);
      const std::size_t n = std::min(hm_samples.value_or(cfg.heatmap_samples), data.test.size());
      const DropHeatmap h = drop_heatmap(ck.model, make_encoder(cfg), std::span(data.test).subspan(0, n));
      if (h.gamma_zero) {
        std::cerr << "warning: gamma keeps every visual row; all frequencies are 1\n";
      }
      if (!hm_out.empty()) {
        fs::create_directories(hm_out);
        for (const auto& g : h.grids) {
          write_text(fs::path(hm_out) / ("heatmap_scale" + std::to_string(g.scale) + ".csv"), heatmap_csv(g));
        }
      }
      if (format == Format::json) std::cout << to_json(h).dump(2) << '\n';
      else print_heatmap_text(h);
      return 0;
    }

    if (*dump_cmd) {
      const std::uint64_t seed = resolve_seed(dp_seed, 0);
      const GridVqaSample s = gen_dataset(seed, 1, 0, dp_colors).train.front();
      const SyntheticEncoder enc(dp_colors, dp_dvis, derive_seed(seed, 300));
      const EncoderOutput out = enc.encode(one_hot_image(s.cells, dp_colors));
      const MultiscalePrompt p = build_prompt(out, dp_scales, parse_pool(dp_pool));
      save_tensor(dp_out, p.features);
      fs::path sidecar(dp_out);
      sidecar.replace_extension(".json");
      save_tensor(fs::path(dp_out).replace_extension(".cls.admt"), out.cls);
      json positions = json::array();
      for (const auto& g : p.grid_pos_of_row) positions.push_back({g.row, g.col});
      const json meta{{"seed", seed},
                      {"rows", p.rows()},
                      {"d_vis", dp_dvis},
                      {"scales", p.scales},
                      {"pool", std::string(to_string(p.pool))},
                      {"scale_of_row", p.scale_of_row},
                      {"grid_pos_of_row", positions},
                      {"question", s.question()},
                      {"answer", s.answer},
                      {"query", {s.row, s.col}}};
      write_text(sidecar, meta.dump(2));
      if (format == Format::json) {
        std::cout << json{{"tensor", dp_out}, {"metadata", sidecar.string()}, {"rows", p.rows()}}.dump(2) << '\n';
      } else {
        std::cout << "wrote " << p.rows() << "x" << dp_dvis << " prompt to " << dp_out << " (metadata "
                  << sidecar.string() << ")\n";
      }
      return 0;
    }
  } catch (const Error& e) {
    emit_error(e.kind(), e.what());
    return 1;
  } catch (const std::exception& e) {
    emit_error("internal", e.what());
    return 1;
  }
  return 0;
}
