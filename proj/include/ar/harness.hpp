#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "ar/checkpoint.hpp"
#include "ar/config.hpp"
#include "ar/metrics.hpp"

namespace ar {

struct TrainOutcome {
  std::string checkpoint_path;
  std::vector<double> losses;  // per-step totals
  int64_t steps = 0;
  double seconds = 0.0;
  int64_t params = 0;
};

// Full training loop: batch -> forward -> combined loss -> backward ->
// clip -> optimizer step, with plateau scheduling on the validation loss.
// Writes out_dir/{model.ckpt, train_log.txt, config.txt, char_vocab.txt,
// word_vocab.txt}. Resuming from a checkpoint continues the trajectory
// bitwise.
TrainOutcome run_train(const RunConfig& config, std::ostream& info,
                       const std::string& resume_from = "");

// Teacher-forced perplexity plus metrics over nucleus-sampled generations
// for every session in data_path; writes out_dir/metrics.txt.
MetricsReport run_eval(const std::string& checkpoint_path, const std::string& data_path,
                       std::ostream& info, const RunConfig* expected_config = nullptr);

struct AblationRow {
  std::string name;
  MetricsReport metrics;
};

// Trains and evaluates the config with exactly one improvement disabled
// (or the full set when toggle == "all"), everything else equal, and
// prints a side-by-side table.
std::vector<AblationRow> run_ablation(const RunConfig& config, const std::string& toggle,
                                      std::ostream& info);

// One seeded nucleus-sampled response per session, written one per line.
void run_generate(const std::string& checkpoint_path, const std::string& sessions_path,
                  const std::string& out_path, std::ostream& info);

struct LrFindOutcome {
  double suggestion = 0.0;
  double suggestion_steepest = 0.0;
  std::string curve_path;
  bool diverged = false;
  double divergence_lr = 0.0;
};

LrFindOutcome run_lr_find(const RunConfig& config, std::ostream& info);

// The five ablation axes, in reference-table order.
const std::vector<std::string>& ablation_toggles();

}  // namespace ar
