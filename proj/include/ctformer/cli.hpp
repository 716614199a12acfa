// Copyright 2026 The ctformer Authors
// SPDX-License-Identifier: Apache-2.0

// Command-line front end: gen, train, denoise, eval, attn, graph, params,
// shapes. Configuration comes from an optional key = value file, then
// --set overrides, then --seed.

#pragma once

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ctformer/error.hpp"
#include "ctformer/interpret.hpp"
#include "ctformer/io.hpp"
#include "ctformer/key_value.hpp"
#include "ctformer/metrics.hpp"
#include "ctformer/model.hpp"
#include "ctformer/phantom.hpp"
#include "ctformer/tiled_inference.hpp"
#include "ctformer/trainer.hpp"

namespace ctformer {

namespace cli_detail {

struct Settings {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;

  // Applies the config file, overrides and seed.
  void resolve(ModelConfig& model, TrainConfig& train) const {
    KeyValues kv;
    if (!config_path.empty()) {
      std::ifstream is(config_path);
      if (!is) throw DataError("cannot open config '" + config_path + "'");
      std::stringstream ss;
      ss << is.rdbuf();
      kv = parse_key_values(ss.str());
    }
    for (const std::string& o : overrides) {
      const auto parsed = parse_key_values(o);
      kv.insert(kv.end(), parsed.begin(), parsed.end());
    }
    for (const auto& [k, v] : kv) {
      if (!apply_model_key(model, k, v) && !apply_train_key(train, k, v)) {
        throw ConfigError("unknown config key '" + k + "'");
      }
    }
    if (seed) {
      model.seed = *seed;
      train.seed = *seed;
    }
    train.patch_size = model.patch_size;
  }
};

inline void add_settings(CLI::App* app, Settings& s) {
  app->add_option("--config", s.config_path, "key = value configuration file")->check(CLI::ExistingFile);
  app->add_option("--set", s.overrides, "override one key: --set key=value (repeatable)");
  app->add_option("--seed", s.seed, "seed for initialization, sampling and generation");
}

inline Tensor load_image(const std::string& path) {
  Tensor t = load_tensor(path);
  if (t.rank() == 4 && t.dim(0) == 1 && t.dim(1) == 1) t = Tensor(Shape{t.dim(2), t.dim(3)}, t.values());
  if (t.rank() != 2) throw DataError("'" + path + "' is not a 2-D image");
  return t;
}

inline Tensor central_crop(const Tensor& img, std::int64_t p) {
  const std::int64_t h = img.dim(0), w = img.dim(1);
  if (h < p || w < p) throw DataError("image smaller than the model patch " + std::to_string(p));
  const std::int64_t y0 = (h - p) / 2, x0 = (w - p) / 2;
  Tensor out(Shape{1, 1, p, p});
  for (std::int64_t y = 0; y < p; ++y) {
    for (std::int64_t x = 0; x < p; ++x) out.at(0, 0, y, x) = img.at(y0 + y, x0 + x);
  }
  return out;
}

inline CTformerModel model_from(const std::string& checkpoint, const ModelConfig& cfg) {
  return checkpoint.empty() ? CTformerModel::build(cfg) : load_model(checkpoint);
}

}  // namespace cli_detail

/// Runs the command line; returns the process exit code.
inline int run_cli(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  using cli_detail::Settings;
  CLI::App app{"ctformer: low-dose CT denoising with a dilated token-to-token transformer"};
  app.require_subcommand(1);
  Settings settings;

  // gen
  auto* gen = app.add_subcommand("gen", "write synthetic phantom pairs and a manifest");
  int gen_count = 8;
  std::int64_t gen_size = 64;
  std::string gen_out;
  PhantomSpec phantom_spec;
  gen->add_option("--count", gen_count, "number of phantoms")->check(CLI::PositiveNumber);
  gen->add_option("--size", gen_size, "image side in pixels")->check(CLI::PositiveNumber);
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--sigma-lo", phantom_spec.noise.sigma_lo, "lower Gaussian noise level");
  gen->add_option("--sigma-hi", phantom_spec.noise.sigma_hi, "upper Gaussian noise level");
  add_settings(gen, settings);

  // train
  auto* train_cmd = app.add_subcommand("train", "train on a manifest");
  std::string train_manifest, train_out, train_log, train_resume, train_ckpt_dir;
  std::optional<int> train_steps;
  train_cmd->add_option("--manifest", train_manifest, "dataset manifest")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--out", train_out, "final checkpoint path")->required();
  train_cmd->add_option("--steps", train_steps, "optimizer steps (overrides epochs)");
  train_cmd->add_option("--log", train_log, "loss log path (step, loss, lr)");
  train_cmd->add_option("--checkpoint-dir", train_ckpt_dir, "directory for periodic checkpoints");
  train_cmd->add_option("--resume", train_resume, "checkpoint to resume from (reads <path>.adam if present)")
      ->check(CLI::ExistingFile);
  add_settings(train_cmd, settings);

  // denoise
  auto* denoise = app.add_subcommand("denoise", "denoise an image with overlapped patches");
  std::string dn_model, dn_input, dn_output, dn_view;
  std::int64_t dn_margin = 16;
  std::vector<double> dn_window{-160.0, 240.0};
  std::vector<double> dn_hu{-1024.0, 3072.0};
  denoise->add_option("--model", dn_model, "checkpoint (default: freshly initialized model)")->check(CLI::ExistingFile);
  denoise->add_option("--input", dn_input, "input tensor file")->required()->check(CLI::ExistingFile);
  denoise->add_option("--output", dn_output, "output tensor file")->required();
  denoise->add_option("--margin", dn_margin, "discarded margin per patch side")->check(CLI::NonNegativeNumber);
  denoise->add_option("--view", dn_view, "also write a windowed graymap here");
  denoise->add_option("--window", dn_window, "display window in HU")->expected(2);
  denoise->add_option("--hu-range", dn_hu, "HU bounds that map to [0, 1]")->expected(2);
  add_settings(denoise, settings);

  // eval
  auto* eval = app.add_subcommand("eval", "SSIM / RMSE table over a manifest");
  std::string ev_manifest, ev_model;
  std::int64_t ev_margin = 16;
  eval->add_option("--manifest", ev_manifest, "dataset manifest")->required()->check(CLI::ExistingFile);
  eval->add_option("--model", ev_model, "also evaluate this checkpoint's output")->check(CLI::ExistingFile);
  eval->add_option("--margin", ev_margin, "margin for tiled inference")->check(CLI::NonNegativeNumber);
  add_settings(eval, settings);

  // attn
  auto* attn = app.add_subcommand("attn", "write attention saliency overlays");
  std::string at_model, at_input, at_out;
  attn->add_option("--model", at_model, "checkpoint")->check(CLI::ExistingFile);
  attn->add_option("--input", at_input, "input tensor file")->required()->check(CLI::ExistingFile);
  attn->add_option("--out-dir", at_out, "output directory")->required();
  add_settings(attn, settings);

  // graph
  auto* graph = app.add_subcommand("graph", "build an explanatory graph");
  std::string gr_model, gr_input, gr_out, gr_method = "topk";
  GraphOptions gr_opt;
  graph->add_option("--model", gr_model, "checkpoint")->check(CLI::ExistingFile);
  graph->add_option("--input", gr_input, "input tensor file")->required()->check(CLI::ExistingFile);
  graph->add_option("--method", gr_method, "node selection")->check(CLI::IsMember({"topk", "lm"}));
  graph->add_option("--k", gr_opt.k, "nodes per layer")->check(CLI::PositiveNumber);
  graph->add_option("--mask-radius", gr_opt.mask_radius, "masking window radius in token cells");
  graph->add_option("--out", gr_out, "DOT output path (default: stdout)");
  add_settings(graph, settings);

  // params
  auto* params = app.add_subcommand("params", "parameter and MAC counts");
  add_settings(params, settings);

  // shapes
  auto* shapes = app.add_subcommand("shapes", "token counts per attention layer");
  bool shapes_verbose = false;
  shapes->add_flag("--verbose", shapes_verbose, "name every stage");
  add_settings(shapes, settings);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    ModelConfig mcfg;
    TrainConfig tcfg;
    settings.resolve(mcfg, tcfg);
    out << std::fixed;

    if (gen->parsed()) {
      phantom_spec.size = gen_size;
      const auto manifest = make_phantoms(gen_count, phantom_spec, tcfg.seed, gen_out);
      out << "wrote " << gen_count << " pairs, manifest " << manifest.string() << '\n';
    } else if (train_cmd->parsed()) {
      if (train_steps) tcfg.epochs = *train_steps;
      const Dataset ds = load_dataset(train_manifest);
      CTformerModel model = train_resume.empty() ? CTformerModel::build(mcfg) : load_model(train_resume);
      tcfg.patch_size = model.patch_size();
      AdamState adam;
      if (!train_resume.empty() && std::filesystem::exists(train_resume + ".adam")) {
        adam = load_adam_state(train_resume + ".adam");
      }
      TrainOptions opt;
      opt.log_path = train_log;
      opt.checkpoint_dir = train_ckpt_dir;
      const TrainResult r = train(model, ds, tcfg, adam, opt);
      save_model(train_out, model);
      save_adam_state(train_out + ".adam", adam);
      out << std::setprecision(6);
      if (!r.log.empty()) {
        out << "steps " << r.log.size() << "  first loss " << r.log.front().loss << "  last loss " << r.log.back().loss
            << '\n';
      }
    } else if (denoise->parsed()) {
      const CTformerModel model = cli_detail::model_from(dn_model, mcfg);
      const Tensor img = cli_detail::load_image(dn_input);
      out << std::setprecision(4) << "sigma = "
          << cost_ratio(img.dim(0), model.patch_size(), dn_margin) << '\n';
      const Tensor result = denoise_image(model, img, dn_margin);
      save_tensor(dn_output, result);
      if (!dn_view.empty()) {
        Tensor hu = result.clone();
        for (float& v : hu.data()) v = unit_to_hu(v, dn_hu[0], dn_hu[1]);
        export_view(dn_view, hu, dn_window[0], dn_window[1]);
      }
    } else if (eval->parsed()) {
      const Dataset ds = load_dataset(ev_manifest);
      std::optional<CTformerModel> model;
      if (!ev_model.empty()) model.emplace(load_model(ev_model));
      out << std::setprecision(4) << std::left << std::setw(16) << "id" << std::setw(10) << "SSIM" << std::setw(10)
          << "RMSE";
      if (model) out << std::setw(10) << "SSIM_out" << std::setw(10) << "RMSE_out";
      out << "  (normalized units)\n";
      for (const SlicePair& s : ds) {
        out << std::setw(16) << s.id << std::setw(10) << ssim(s.ld, s.nd) << std::setw(10) << rmse(s.ld, s.nd);
        if (model) {
          const Tensor d = denoise_image(*model, s.ld, ev_margin);
          out << std::setw(10) << ssim(d, s.nd) << std::setw(10) << rmse(d, s.nd);
        }
        out << '\n';
      }
    } else if (attn->parsed()) {
      const CTformerModel model = cli_detail::model_from(at_model, mcfg);
      const Tensor img = cli_detail::load_image(at_input);
      const Tensor patch = cli_detail::central_crop(img, model.patch_size());
      Tape::Pause pause;
      const ForwardResult r = model.forward(patch, true);
      std::filesystem::create_directories(at_out);
      const Tensor base(Shape{patch.dim(2), patch.dim(3)}, patch.values());
      const Image8 gray = window_image(base, 0.0, 1.0);
      write_pnm(std::filesystem::path(at_out) / "input.pgm", gray);
      for (const AttentionRecord& rec : r.records) {
        const SaliencyMap m = saliency(rec, base.dim(0), base.dim(1));
        const auto stem = std::filesystem::path(at_out) / ("layer" + std::to_string(rec.layer_id));
        save_tensor(stem.string() + ".ctf", m.values);
        write_pnm(stem.string() + ".ppm", overlay(gray, m.values, m.alpha));
        out << "layer " << rec.layer_id << ": " << rec.att.dim(2) << " tokens -> " << stem.string() << ".ppm\n";
      }
    } else if (graph->parsed()) {
      const CTformerModel model = cli_detail::model_from(gr_model, mcfg);
      const Tensor img = cli_detail::load_image(gr_input);
      gr_opt.method = gr_method == "lm" ? NodeMethod::kLocalMax : NodeMethod::kTopK;
      const ExplanatoryGraph g = build_graph(model, cli_detail::central_crop(img, model.patch_size()), gr_opt);
      if (gr_out.empty()) {
        write_dot(out, g);
      } else {
        std::ofstream os(gr_out);
        if (!os) throw DataError("cannot open '" + gr_out + "'");
        write_dot(os, g);
        for (std::size_t l = 0; l < model.layers(); ++l) {
          out << "layer " << l + 1 << ": " << g.layer_nodes(static_cast<int>(l) + 1).size() << " nodes\n";
        }
        out << "edges: " << g.edges.size() << '\n';
      }
    } else if (params->parsed()) {
      const CTformerModel model = CTformerModel::build(mcfg);
      const std::int64_t n_params = count_params(model);
      const std::int64_t macs = count_macs(model);
      out << std::setprecision(3);
      out << "parameters  " << n_params << "  (" << static_cast<double>(n_params) / 1e6
          << "M; reported for the published model: 1.45M)\n";
      out << "MACs/patch  " << macs << "  (" << static_cast<double>(macs) / 1e9
          << "G; reported for the published model: 0.86G)\n";
      out << "stored tensors " << model.parameters().size() << ", stored values " << model.stored_parameter_count()
          << '\n';
    } else if (shapes->parsed()) {
      const ShapePlan plan = plan_shapes(mcfg);
      if (shapes_verbose) {
        for (const StagePlan& s : plan.trace()) out << s.name << ' ' << s.tokens << '\n';
      } else {
        for (std::size_t i = 0; i < plan.layer_tokens.size(); ++i) out << (i ? " " : "") << plan.layer_tokens[i];
        out << '\n';
      }
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace ctformer
