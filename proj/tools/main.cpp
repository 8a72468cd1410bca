// Command-line front end for the continual-learning lab: run experiments,
// evaluate checkpoints against stream manifests, export streams, and
// aggregate finished runs into a per-method report.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mlcl/benchmark.hpp"
#include "mlcl/config.hpp"
#include "mlcl/runner.hpp"
#include "mlcl/vit.hpp"

namespace fs = std::filesystem;

namespace {

int cmd_run(const std::string& config_path, std::uint64_t seed, const std::string& out_dir,
            bool resume) {
  const mlcl::ExperimentConfig config = mlcl::load_config(config_path);
  const mlcl::RunRecord rec = mlcl::run_experiment<double>(config, seed, out_dir, resume);
  std::printf("method       %s\n", rec.method.c_str());
  std::printf("seed         %llu\n", static_cast<unsigned long long>(rec.seed));
  std::printf("pretext pwjs %.4f -> %.4f\n", rec.pretrain.untrained_pwjs,
              rec.pretrain.trained_pwjs);
  std::printf("AR_f         %.4f\n", rec.ar_f);
  if (rec.fg_f) {
    std::printf("FG_f         %.4f\n", *rec.fg_f);
  } else {
    std::printf("FG_f         n/a (single task)\n");
  }
  double total_seconds = 0.0;
  for (double s : rec.task_seconds) total_seconds += s;
  std::printf("train time   %.1fs over %zu tasks\n", total_seconds, rec.task_seconds.size());
  if (!rec.out_dir.empty()) std::printf("artifacts    %s\n", rec.out_dir.c_str());
  return 0;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& manifest_path,
             double threshold, int batch) {
  const mlcl::TaskStream<double> stream = mlcl::load_manifest<double>(manifest_path);
  const mlcl::Vit<double> model = mlcl::load_checkpoint<double>(checkpoint_path);
  const std::vector<double> scores = mlcl::evaluate_tasks(model, stream, threshold, batch);
  double mean = 0.0;
  for (std::size_t k = 0; k < scores.size(); ++k) {
    std::printf("task %zu pwjs %.4f\n", k + 1, scores[k]);
    mean += scores[k];
  }
  mean /= static_cast<double>(scores.size());
  std::printf("mean pwjs %.4f\n", mean);
  return 0;
}

int cmd_gen_stream(const std::string& config_path, const std::string& out_dir) {
  const mlcl::ExperimentConfig config = mlcl::load_config(config_path);
  const mlcl::TaskStream<double> stream = mlcl::build_stream<double>(config.stream);
  mlcl::export_stream(stream, out_dir);
  std::size_t train = 0;
  std::size_t test = 0;
  for (const auto& t : stream.tasks) {
    train += t.train.size();
    test += t.test.size();
  }
  std::printf("wrote %zu tasks (%zu train / %zu test samples, %d labels) to %s\n",
              stream.tasks.size(), train, test, stream.num_labels, out_dir.c_str());
  return 0;
}

struct MethodAgg {
  std::vector<double> ar;
  std::vector<double> fg;
};

int cmd_report(const std::vector<std::string>& run_dirs) {
  std::map<std::string, MethodAgg> by_method;
  std::size_t found = 0;
  for (const std::string& root : run_dirs) {
    if (!fs::exists(root)) {
      std::fprintf(stderr, "report: %s does not exist\n", root.c_str());
      return 1;
    }
    std::vector<fs::path> summaries;
    if (fs::is_regular_file(root)) {
      summaries.push_back(root);
    } else {
      for (const auto& de : fs::recursive_directory_iterator(root)) {
        if (de.is_regular_file() && de.path().filename() == "summary.json") {
          summaries.push_back(de.path());
        }
      }
    }
    std::sort(summaries.begin(), summaries.end());
    for (const fs::path& p : summaries) {
      std::ifstream is(p);
      nlohmann::json j = nlohmann::json::parse(is, nullptr, /*allow_exceptions=*/false);
      if (j.is_discarded() || !j.contains("method") || !j.contains("ar_f")) {
        std::fprintf(stderr, "report: skipping malformed %s\n", p.string().c_str());
        continue;
      }
      MethodAgg& agg = by_method[j["method"].get<std::string>()];
      agg.ar.push_back(j["ar_f"].get<double>());
      if (j.contains("fg_f") && j["fg_f"].is_number()) {
        agg.fg.push_back(j["fg_f"].get<double>());
      }
      ++found;
    }
  }
  if (found == 0) {
    std::fprintf(stderr, "report: no summary.json files found\n");
    return 1;
  }
  std::printf("method,n,ar_f_mean,ar_f_std,fg_f_mean,fg_f_std\n");
  for (const auto& [method, agg] : by_method) {
    const mlcl::MeanStd ar = mlcl::mean_and_std(agg.ar);
    std::printf("%s,%d,%.4f,%.4f", method.c_str(), ar.n, ar.mean, ar.stddev);
    if (!agg.fg.empty()) {
      const mlcl::MeanStd fg = mlcl::mean_and_std(agg.fg);
      std::printf(",%.4f,%.4f\n", fg.mean, fg.stddev);
    } else {
      std::printf(",,\n");
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale multi-label continual-learning lab"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  bool resume = false;
  CLI::App* run = app.add_subcommand("run", "Train one method on the stream and write artifacts");
  run->add_option("--config", config_path, "Experiment config file")->required();
  run->add_option("--seed", seed, "Experiment seed (default 0)");
  run->add_option("--out", out_dir, "Output directory for artifacts")->required();
  run->add_flag("--resume", resume, "Continue from the latest snapshot in --out");

  std::string checkpoint_path;
  std::string manifest_path;
  double threshold = 0.5;
  int eval_batch = 32;
  CLI::App* eval = app.add_subcommand("eval", "Score a checkpoint against a stream manifest");
  eval->add_option("--checkpoint", checkpoint_path, "Model checkpoint file")->required();
  eval->add_option("--stream", manifest_path, "Stream manifest file")->required();
  eval->add_option("--threshold", threshold, "Prediction threshold (default 0.5)");
  eval->add_option("--batch", eval_batch, "Evaluation batch size (default 32)");

  std::string gen_config;
  std::string gen_out;
  CLI::App* gen = app.add_subcommand("gen-stream", "Build a stream and export its manifest");
  gen->add_option("--config", gen_config, "Experiment config file")->required();
  gen->add_option("--out", gen_out, "Directory to export the stream into")->required();

  std::vector<std::string> run_dirs;
  CLI::App* report = app.add_subcommand("report", "Aggregate finished runs per method");
  report->add_option("--runs", run_dirs, "Run directories (searched recursively)")
      ->required()
      ->expected(-1);

  CLI11_PARSE(app, argc, argv);

  try {
    if (app.got_subcommand(run)) return cmd_run(config_path, seed, out_dir, resume);
    if (app.got_subcommand(eval)) return cmd_eval(checkpoint_path, manifest_path, threshold, eval_batch);
    if (app.got_subcommand(gen)) return cmd_gen_stream(gen_config, gen_out);
    if (app.got_subcommand(report)) return cmd_report(run_dirs);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
