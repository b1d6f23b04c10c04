/*
 * Copyright 2026 The bevtune Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <iostream>

#include "CLI11.hpp"

#include "bevtune/cli.hpp"
#include "bevtune/errors.hpp"

int main(int argc, char** argv) {
  CLI::App app{"2D-supervised fine-tuning toolkit for camera-based 3D detection"};
  app.require_subcommand(1);

  bevtune::cli::GenOptions gen;
  CLI::App* sub_gen = app.add_subcommand("gen", "Generate a synthetic multi-camera dataset");
  sub_gen->add_option("--out", gen.out_dir, "Output directory")->required();
  sub_gen->add_option("--config", gen.config_file, "JSON config file (dataset section)");
  sub_gen->add_option("--seed", gen.seed, "Master seed");
  sub_gen->add_option("--scenes", gen.scenes, "Number of scenes");
  sub_gen->add_option("--split", gen.split, "Fraction of scenes keeping 3D labels");
  sub_gen->add_option("--rig", gen.rig, "Camera rig preset: surround6 or waymo5");
  sub_gen->add_option("--width", gen.image_width, "Image width in pixels");
  sub_gen->add_option("--height", gen.image_height, "Image height in pixels");

  bevtune::cli::StageOptions project, match, loss;
  auto add_stage_flags = [](CLI::App* sub, bevtune::cli::StageOptions& opt) {
    sub->add_option("--dataset", opt.dataset_dir, "Dataset directory")->required();
    sub->add_option("--scene", opt.scene, "Scene id");
    sub->add_option("--camera", opt.camera, "Camera id, or \"all\"");
  };
  CLI::App* sub_project =
      app.add_subcommand("project", "Project a scene's 3D boxes to per-camera 2D hulls");
  add_stage_flags(sub_project, project);
  sub_project->add_option("--source", project.source, "Boxes to project: preds or gt");
  CLI::App* sub_match =
      app.add_subcommand("match", "Match projected predictions to 2D annotations");
  add_stage_flags(sub_match, match);
  CLI::App* sub_loss = app.add_subcommand("loss", "Per-camera and scene loss breakdown");
  add_stage_flags(sub_loss, loss);

  bevtune::cli::GradCheckOptions gc;
  CLI::App* sub_gc =
      app.add_subcommand("grad-check", "Audit analytic gradients against finite differences");
  sub_gc->add_option("--trials", gc.trials, "Number of random configurations");
  sub_gc->add_option("--seed", gc.seed, "Master seed");
  sub_gc->add_option("--tol-3d", gc.tol_3d, "Relative tolerance through the projection");
  sub_gc->add_option("--tol-2d", gc.tol_2d, "Relative tolerance in the image plane");

  bevtune::cli::FinetuneOptions ft;
  CLI::App* sub_ft = app.add_subcommand("finetune", "Fine-tune the toy detector");
  sub_ft->add_option("--dataset", ft.dataset_dir, "Dataset directory")->required();
  sub_ft->add_option("--out", ft.out_dir, "Output directory for reports")->required();
  sub_ft->add_option("--config", ft.config_file, "JSON config file (train section)");
  sub_ft->add_option("--lr", ft.lr, "Base learning rate");
  sub_ft->add_option("--epochs", ft.epochs, "Training epochs (0 = evaluate only)");
  sub_ft->add_option("--mix", ft.mix, "Fraction of steps drawn from full3d scenes");
  sub_ft->add_option("--max-steps", ft.max_steps, "Cap on total update steps (0 = none)");
  sub_ft->add_option("--grad-clip", ft.grad_clip, "Per-box gradient norm cap (0 = off)");
  sub_ft->add_option("--seed", ft.seed, "Shuffle seed");
  sub_ft->add_flag_callback(
      "--cosine", [&ft] { ft.cosine = true; }, "Cosine learning-rate schedule (default)");
  sub_ft->add_flag_callback(
      "--no-cosine", [&ft] { ft.cosine = false; }, "Constant learning rate");
  sub_ft->add_flag_callback(
      "--no-overlays", [&ft] { ft.overlays = false; }, "Skip the SVG overlays");

  bevtune::cli::EvalOptions ev;
  CLI::App* sub_eval = app.add_subcommand("eval", "Detection metrics over the full3d slice");
  sub_eval->add_option("--dataset", ev.dataset_dir, "Dataset directory")->required();
  sub_eval->add_option("--params", ev.params_file,
                       "Detector params JSON (default: score-initialized)");
  sub_eval->add_option("--config", ev.config_file, "JSON config file (metrics section)");
  sub_eval->add_option("--out", ev.out_csv, "Also write the report as CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (sub_gen->parsed()) return bevtune::cli::cmd_gen(gen, std::cout);
    if (sub_project->parsed()) return bevtune::cli::cmd_project(project, std::cout);
    if (sub_match->parsed()) return bevtune::cli::cmd_match(match, std::cout);
    if (sub_loss->parsed()) return bevtune::cli::cmd_loss(loss, std::cout);
    if (sub_gc->parsed()) return bevtune::cli::cmd_grad_check(gc, std::cout);
    if (sub_ft->parsed()) return bevtune::cli::cmd_finetune(ft, std::cout);
    if (sub_eval->parsed()) return bevtune::cli::cmd_eval(ev, std::cout);
  } catch (const bevtune::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const bevtune::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
