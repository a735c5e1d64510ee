// skd: config-driven experiment runner for the SelectiveKD training lab.

#include <iostream>

#include <CLI11.hpp>

#include "skd/harness.hpp"

using namespace skd;

int main(int argc, char** argv) {
  CLI::App app{"SelectiveKD semi-supervised training lab"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset directory");
  std::string gen_config, gen_out;
  uint64_t gen_seed = 1;
  gen->add_option("--config", gen_config, "experiment config JSON (synth section used)");
  gen->add_option("--seed", gen_seed, "generation seed");
  gen->add_option("--out", gen_out, "output dataset directory")->required();

  // train
  auto* train = app.add_subcommand("train", "run one experiment setting");
  std::string tr_setting = "baseline", tr_data, tr_config, tr_out, tr_teacher;
  uint64_t tr_seed = 0;
  bool tr_seed_set = false;
  train->add_option("--setting", tr_setting,
                    "baseline|kd|kd-weak|selective|selective-weak");
  train->add_option("--data", tr_data, "dataset directory")->required();
  train->add_option("--config", tr_config, "experiment config JSON");
  train->add_option_function<uint64_t>(
      "--seed", [&](uint64_t s) { tr_seed = s; tr_seed_set = true; }, "run seed");
  train->add_option("--out", tr_out, "run output directory")->required();
  train->add_option("--teacher", tr_teacher, "existing baseline run directory to use as teacher");

  // eval
  auto* ev = app.add_subcommand("eval", "re-evaluate a run's checkpoint on a dataset");
  std::string ev_run, ev_data, ev_split = "test";
  ev->add_option("--run", ev_run, "run directory")->required();
  ev->add_option("--data", ev_data, "dataset directory")->required();
  ev->add_option("--split", ev_split, "train|val|test");

  // compare
  auto* cmp = app.add_subcommand("compare", "tabulate runs with paired DeLong tests");
  std::vector<std::string> cmp_runs;
  std::string cmp_csv;
  cmp->add_option("runs", cmp_runs, "run directories")->required();
  cmp->add_option("--csv", cmp_csv, "also write the table to this CSV file");

  // sweep
  auto* sw = app.add_subcommand("sweep", "annotation-fraction sweep");
  std::string sw_config, sw_out, sw_data;
  std::string sw_fractions = "0.1..1.0";
  int sw_seeds = 5;
  sw->add_option("--config", sw_config, "experiment config JSON");
  sw->add_option("--data", sw_data, "dataset directory (generated from config if omitted)");
  sw->add_option("--fractions", sw_fractions, "range lo..hi in 0.1 steps, or comma list");
  sw->add_option("--seeds", sw_seeds, "number of seeds");
  sw->add_option("--out", sw_out, "sweep output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      ExperimentConfig cfg;
      if (!gen_config.empty()) cfg = load_experiment_config(gen_config);
      SynthConfig synth = cfg.synth ? *cfg.synth : default_synth_config();
      Dataset ds = generate_dataset(synth, gen_seed);
      save_dataset(ds, gen_out);
      std::cout << "wrote " << ds.stacks.size() << " stacks to " << gen_out << "\n";
    } else if (*train) {
      ExperimentConfig cfg;
      if (!tr_config.empty()) cfg = load_experiment_config(tr_config);
      cfg.setting = setting_from_string(tr_setting);
      if (tr_seed_set) cfg.seed = tr_seed;
      auto out = run_setting(cfg, tr_data, tr_out, tr_teacher);
      std::cout << "run " << tr_out << " all-domain AUC "
                << (out.eval.pooled.defined ? std::to_string(out.eval.pooled.auc) : "undefined")
                << "\n";
    } else if (*ev) {
      DualHeadModel model = load_checkpoint(fs::path(ev_run) / "checkpoint.ckpt");
      model.frozen = true;
      Dataset ds = load_dataset(ev_data);
      EvalResult res = evaluate(model, ds, split_from_string(ev_split));
      std::cout << eval_result_to_json(res).dump(2) << "\n";
    } else if (*cmp) {
      std::vector<fs::path> dirs(cmp_runs.begin(), cmp_runs.end());
      auto rows = compare_runs(dirs);
      std::string table = comparison_table_text(rows);
      std::cout << table;
      if (!cmp_csv.empty()) {
        std::ofstream out(cmp_csv);
        out << table;
      }
    } else if (*sw) {
      ExperimentConfig cfg;
      if (!sw_config.empty()) cfg = load_experiment_config(sw_config);
      Dataset ds;
      uint64_t h = 0;
      if (!sw_data.empty()) {
        ds = load_dataset(sw_data);
        h = dataset_hash(sw_data);
      } else {
        SynthConfig synth = cfg.synth ? *cfg.synth : default_synth_config();
        ds = generate_dataset(synth, cfg.seed);
        fs::path ddir = fs::path(sw_out) / "dataset";
        save_dataset(ds, ddir);
        h = dataset_hash(ddir);
      }
      std::vector<double> fractions;
      if (sw_fractions.find("..") != std::string::npos) {
        double lo = std::stod(sw_fractions.substr(0, sw_fractions.find("..")));
        double hi = std::stod(sw_fractions.substr(sw_fractions.find("..") + 2));
        for (double f = lo; f <= hi + 1e-9; f += 0.1) fractions.push_back(std::round(f * 10) / 10);
      } else {
        std::stringstream ss(sw_fractions);
        std::string tok;
        while (std::getline(ss, tok, ',')) fractions.push_back(std::stod(tok));
      }
      std::vector<uint64_t> seeds;
      for (int s = 1; s <= sw_seeds; ++s) seeds.push_back(static_cast<uint64_t>(s));
      auto res = run_sweep(cfg, ds, h, fractions, seeds, sw_out);
      int failed = 0;
      for (const auto& c : res.cells)
        if (!c.ok) ++failed;
      std::cout << "sweep complete: " << res.cells.size() << " cells, " << failed
                << " failed; results in " << sw_out << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
