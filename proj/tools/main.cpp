#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "metadcseg/config.hpp"
#include "metadcseg/datakit.hpp"
#include "metadcseg/experiments.hpp"
#include "metadcseg/noisegen.hpp"
#include "metadcseg/trainer.hpp"
#include "metadcseg/verify.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace metadcseg;

namespace {

void emit(const json& j, const std::string& out_file) {
  if (out_file.empty()) {
    std::cout << j.dump(2) << '\n';
    return;
  }
  std::ofstream os(out_file);
  if (!os) throw std::runtime_error("cannot write " + out_file);
  os << j.dump(2) << '\n';
}

SplitTag parse_split(const std::string& s) {
  if (s == "train") return SplitTag::kTrain;
  if (s == "metaval") return SplitTag::kMetaVal;
  if (s == "test") return SplitTag::kTest;
  throw std::invalid_argument("unknown split '" + s + "'");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Pixel-reweighted segmentation training on noisy masks"};
  app.require_subcommand(1);

  int n = 100, h = 32, w = 32;
  std::uint64_t seed = 0;
  double metaval_frac = 0.02, test_frac = 0.2;
  std::string out_dir, data_dir, config_file, ckpt_file, out_file, split_name = "test";
  int level = 40;

  auto* gen = app.add_subcommand("gen-data", "Generate and split a synthetic shapes dataset");
  gen->set_help_flag("--help", "Print this help message and exit");
  gen->add_option("--n", n, "Number of images")->check(CLI::PositiveNumber);
  gen->add_option("--h", h, "Image height")->check(CLI::PositiveNumber);
  gen->add_option("--w", w, "Image width")->check(CLI::PositiveNumber);
  gen->add_option("--seed", seed, "Generator and split seed");
  gen->add_option("--metaval-frac", metaval_frac, "Fraction of clean meta-validation images");
  gen->add_option("--test-frac", test_frac, "Fraction of test images");
  gen->add_option("--out", out_dir, "Output directory")->required();

  auto* cor = app.add_subcommand("corrupt", "Write noisy masks for the train split");
  cor->add_option("--level", level, "Noise level")->check(CLI::IsMember({20, 40, 60}));
  cor->add_option("--seed", seed, "Noise seed");
  cor->add_option("--data", data_dir, "Dataset directory")->required()->check(CLI::ExistingDirectory);

  auto* trn = app.add_subcommand("train", "Train a model");
  trn->add_option("--config", config_file, "Config JSON")->required()->check(CLI::ExistingFile);
  trn->add_option("--out", out_dir, "Run directory")->required();

  auto* evl = app.add_subcommand("eval", "Evaluate a checkpoint against clean masks");
  evl->add_option("--ckpt", ckpt_file, "Checkpoint file")->required()->check(CLI::ExistingFile);
  evl->add_option("--data", data_dir, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  evl->add_option("--split", split_name, "train, metaval or test");

  int seeds = 3;
  bool no_baseline = false;
  auto* abl = app.add_subcommand("ablate", "Module ablation over several seeds");
  abl->add_option("--config", config_file, "Config JSON")->required()->check(CLI::ExistingFile);
  abl->add_option("--seeds", seeds, "Seeds per row")->check(CLI::PositiveNumber);
  abl->add_flag("--no-baseline", no_baseline, "Skip the all-off baseline row");
  abl->add_option("--out", out_file, "Write the table here instead of stdout");

  std::vector<double> fracs{0.01, 0.02, 0.05, 0.10};
  auto* msz = app.add_subcommand("meta-size", "Meta-validation set size study");
  msz->add_option("--config", config_file, "Config JSON")->required()->check(CLI::ExistingFile);
  msz->add_option("--fracs", fracs, "Meta-validation fractions");
  msz->add_option("--out", out_file, "Write the table here instead of stdout");

  check::Options vopt;
  bool quick = false;
  auto* ver = app.add_subcommand("verify", "Run the invariant and stability checks");
  ver->add_option("--seed", vopt.seed, "Seed for random cases");
  ver->add_option("--descent-factor", vopt.descent_lambda_factor, "lambda as a multiple of the descent bound");
  ver->add_flag("--quick", quick, "Fewer cases, 3x3 morphology grid");
  ver->add_option("--out", out_file, "Write the report here instead of stdout");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      Dataset ds = split(gen_synthetic(n, h, w, seed), metaval_frac, test_frac, seed);
      save_dataset(out_dir, ds);
      std::cout << json{{"items", ds.size()},
                        {"train", ds.indices(SplitTag::kTrain).size()},
                        {"metaval", ds.indices(SplitTag::kMetaVal).size()},
                        {"test", ds.indices(SplitTag::kTest).size()}}
                       .dump()
                << '\n';
    } else if (*cor) {
      Dataset ds = load_dataset(data_dir);
      const CorruptionReport rep = corrupt_dataset(ds, level, seed);
      save_dataset(data_dir, ds);
      std::cout << json{{"level", level},
                        {"masks", rep.rates.size()},
                        {"mean_rate", rep.mean_rate},
                        {"target", rep.target},
                        {"within_tolerance", rep.within_tolerance}}
                       .dump()
                << '\n';
    } else if (*trn) {
      const TrainConfig cfg = load_config(config_file);
      const Dataset ds = prepare_dataset(cfg);
      const TrainResult res = train_to_dir(cfg, ds, out_dir);
      json summary{{"steps", res.steps}, {"wall_seconds", res.wall_seconds}, {"out", out_dir}};
      if (!ds.indices(SplitTag::kTest).empty()) {
        const EvalSummary ev = evaluate(res.checkpoint, ds);
        summary["test"] = {{"miou", ev.mean_miou}, {"dsc", ev.mean_dsc}, {"hd", ev.mean_hd}};
      }
      std::cout << summary.dump() << '\n';
    } else if (*evl) {
      const Checkpoint ckpt = load_checkpoint(ckpt_file);
      const Dataset ds = load_dataset(data_dir);
      const EvalSummary ev = evaluate(ckpt, ds, parse_split(split_name));
      for (const auto& r : ev.records) write_jsonl(std::cout, r);
      std::cout << json{{"mean_miou", ev.mean_miou}, {"mean_dsc", ev.mean_dsc}, {"mean_hd", ev.mean_hd},
                        {"images", ev.records.size()}}
                       .dump()
                << '\n';
    } else if (*abl) {
      const TrainConfig cfg = load_config(config_file);
      const Dataset ds = prepare_dataset(cfg);
      emit(to_json(ablate(cfg, ds, AblationOptions{seeds, !no_baseline})), out_file);
    } else if (*msz) {
      const TrainConfig cfg = load_config(config_file);
      const Dataset pool = prepare_dataset(cfg);
      emit(to_json(meta_size_study(cfg, pool, fracs)), out_file);
    } else if (*ver) {
      if (quick) {
        vopt.grad_cases = 2;
        vopt.primitive_cases = 1;
        vopt.meta_cases = 1;
        vopt.dcd_fields = 100;
        vopt.exhaustive_morphology = false;
      }
      const check::Report rep = check::run_all(vopt);
      emit(rep.to_json(), out_file);
      return rep.passed() ? 0 : 1;
    }
  } catch (const TrainingAborted& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
