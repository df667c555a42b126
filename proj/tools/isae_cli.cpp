#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "isae/checkpoint.hpp"
#include "isae/config.hpp"
#include "isae/dataset_io.hpp"
#include "isae/eval.hpp"
#include "isae/sprites.hpp"
#include "isae/train.hpp"

namespace {

constexpr int kExitIo = 2;
constexpr int kExitConfig = 3;
constexpr int kExitDiverged = 4;

isae::Model<isae::real> load_model(const std::string& ckpt_path) {
  return std::move(isae::load_checkpoint<isae::real>(ckpt_path).model);
}

std::vector<isae::Sprite> load_data(const std::string& data_path) {
  return isae::read_dataset(data_path);
}

void check_index(long long index, std::size_t size) {
  if (index < 0 || static_cast<std::size_t>(index) >= size)
    throw isae::ConfigError("sprite index " + std::to_string(index) +
                            " out of range for dataset of " + std::to_string(size));
}

int run(int argc, char** argv) {
  CLI::App app{"independent-subspace autoencoder pipeline"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "render a sprite dataset");
  std::string gen_out;
  int gen_count = 4096;
  std::uint64_t gen_seed = 1;
  gen->add_option("--out", gen_out, "output dataset path")->required();
  gen->add_option("--count", gen_count, "number of sprites");
  gen->add_option("--seed", gen_seed, "generator seed");
  gen->callback([&] {
    isae::GenParams gp;
    gp.seed = gen_seed;
    gp.count = gen_count;
    isae::write_dataset(isae::generate(gp), gen_out);
  });

  auto* train = app.add_subcommand("train", "train a model on a dataset");
  std::string train_config, train_data, train_out;
  bool no_isa = false;
  std::uint64_t train_seed = 0;
  int train_epochs = -1;
  train->add_option("--config", train_config, "JSON training config");
  train->add_option("--data", train_data, "dataset path")->required();
  train->add_option("--out", train_out, "output directory")->required();
  train->add_flag("--no-isa", no_isa, "ablation: train without the mixing layer");
  train->add_option("--seed", train_seed, "override the config seed");
  train->add_option("--epochs", train_epochs, "override the config epoch count");
  train->callback([&] {
    isae::TrainConfig cfg;
    if (!train_config.empty()) cfg = isae::load_train_config(train_config);
    if (no_isa) cfg.enable_isa = false;
    if (train->count("--seed") > 0) cfg.seed = train_seed;
    if (train->count("--epochs") > 0) cfg.epochs = train_epochs;

    std::filesystem::create_directories(train_out);
    cfg.dataset_path = train_data;
    cfg.checkpoint_path = (std::filesystem::path(train_out) / "model.sdck").string();
    cfg.metrics_path = (std::filesystem::path(train_out) / "metrics.jsonl").string();

    const auto resolved = (std::filesystem::path(train_out) / "config.json").string();
    std::ofstream cj(resolved);
    if (!cj) throw isae::IoError("train: cannot write '" + resolved + "'");
    cj << isae::train_config_to_json(cfg).dump(2) << '\n';

    isae::train<isae::real>(cfg, load_data(train_data));
  });

  auto* mix = app.add_subcommand("eval-mixing", "per-subspace mixing error report");
  std::string mix_ckpt, mix_data, mix_out;
  int mix_groups = 64;
  std::uint64_t mix_seed = 1;
  mix->add_option("--ckpt", mix_ckpt, "checkpoint path")->required();
  mix->add_option("--data", mix_data, "dataset path")->required();
  mix->add_option("--groups", mix_groups, "number of five-sprite groups");
  mix->add_option("--seed", mix_seed, "group sampling seed");
  mix->add_option("--out", mix_out, "report JSON path")->required();
  mix->callback([&] {
    auto model = load_model(mix_ckpt);
    const auto report = isae::mixing_error(model, load_data(mix_data), mix_groups, mix_seed);
    isae::write_mixing_report(report, mix_out);
  });

  auto* ana = app.add_subcommand("analyze-subspaces", "per-subspace PCA attribute distances");
  std::string ana_ckpt, ana_data, ana_out;
  ana->add_option("--ckpt", ana_ckpt, "checkpoint path")->required();
  ana->add_option("--data", ana_data, "dataset path")->required();
  ana->add_option("--out", ana_out, "report JSON path")->required();
  ana->callback([&] {
    auto model = load_model(ana_ckpt);
    const auto analysis = isae::attribute_separation(model, load_data(ana_data));
    isae::write_analysis_report(analysis, ana_out);
  });

  auto* edit = app.add_subcommand("edit-attribute", "move one sprite along an attribute");
  std::string edit_ckpt, edit_data, edit_attr, edit_out;
  long long edit_index = 0;
  double edit_strength = 1.0;
  edit->add_option("--ckpt", edit_ckpt, "checkpoint path")->required();
  edit->add_option("--data", edit_data, "dataset path")->required();
  edit->add_option("--attr", edit_attr, "attribute name")->required();
  edit->add_option("--index", edit_index, "sprite index into the dataset");
  edit->add_option("--strength", edit_strength, "edit strength (0 = plain reconstruction)");
  edit->add_option("--out", edit_out, "output PPM path")->required();
  edit->callback([&] {
    auto model = load_model(edit_ckpt);
    const auto data = load_data(edit_data);
    check_index(edit_index, data.size());
    const auto img = isae::attribute_edit(model, data, edit_attr,
                                          data[static_cast<std::size_t>(edit_index)].image,
                                          edit_strength);
    isae::export_ppm(img, edit_out);
  });

  auto* grid = app.add_subcommand("mix-grid", "grid of subspace swaps between sprites");
  std::string grid_ckpt, grid_data, grid_out;
  std::vector<long long> grid_indices;
  grid->add_option("--ckpt", grid_ckpt, "checkpoint path")->required();
  grid->add_option("--data", grid_data, "dataset path")->required();
  grid->add_option("--indices", grid_indices, "2-3 sprite indices, comma separated")
      ->required()
      ->delimiter(',');
  grid->add_option("--out", grid_out, "output PPM path")->required();
  grid->callback([&] {
    auto model = load_model(grid_ckpt);
    const auto data = load_data(grid_data);
    if (grid_indices.size() < 2 || grid_indices.size() > 3)
      throw isae::ConfigError("mix-grid: need 2 or 3 indices, got " +
                              std::to_string(grid_indices.size()));
    std::vector<isae::Tensor<isae::real>> images;
    for (long long idx : grid_indices) {
      check_index(idx, data.size());
      images.push_back(data[static_cast<std::size_t>(idx)].image);
    }
    // one single-subspace swap per part and per extra source image
    std::vector<isae::MixSpec> specs;
    for (std::size_t src = 1; src < images.size(); ++src)
      for (int m = 0; m < model.layout.count(); ++m) {
        std::vector<int> assign(static_cast<std::size_t>(model.layout.count()), 0);
        assign[static_cast<std::size_t>(m)] = static_cast<int>(src);
        specs.push_back(isae::MixSpec::multi(std::move(assign)));
      }
    const int cells = 1 + static_cast<int>(specs.size() + images.size()) - 1;
    const int cols = 4;
    const int rows = (cells + cols - 1) / cols;
    isae::export_ppm(isae::mix_grid(model, images, specs, rows, cols), grid_out);
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);  // prints the one-line diagnostic
    return kExitConfig;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const isae::IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const isae::DivergedError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitDiverged;
  } catch (const isae::ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const isae::ShapeError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
