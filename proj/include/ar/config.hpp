#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "ar/dataset.hpp"

namespace ar {

// Architecture hyperparameters plus the five improvement toggles. Defaults
// are the full-scale training configuration.
struct ModelConfig {
  int64_t vocab_size = 9489;        // characters, specials included
  int64_t word_vocab_size = 10004;  // persona words
  int64_t embed_size = 200;         // E, used by the factorized embedding
  int64_t hidden_size = 512;        // H
  int64_t layers = 6;               // N
  int64_t heads = 8;
  int64_t ff_size = 2048;           // F
  int64_t ff_rank = 128;            // R, low-rank feed-forward factor
  double dropout = 0.1;

  bool use_rezero = true;
  bool use_albert = true;     // factorized embedding + cross-layer sharing
  bool use_factor_ff = true;
  bool use_memn2n = true;
  bool use_bart_mlm = true;   // masked LM auxiliary task; off = causal LM

  double routing_weight_a = 1.0;  // persona/context routing weight
  double fix_attention_b = 0.1;   // constant bypass outside the ReZero gate
  int64_t memory_hops = 3;        // K
  bool memory_adjacent_share = true;

  std::string activation = "gelu";  // or "relu"
  bool tie_head = false;

  DatasetLimits limits;

  void validate() const;
};

struct RunConfig {
  ModelConfig model;

  uint64_t seed = 1;
  std::string data_path;
  std::string out_dir = "out";
  int64_t train_size = 0;  // 0 = everything not claimed by valid/test
  int64_t valid_size = 0;
  int64_t test_size = 0;

  double lr = 0.2e-2;
  double weight_decay = 0.05;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 1.0;

  double lambda_lm = 0.5;
  double mlm_rate = 0.15;

  int64_t batch_size = 64;
  int64_t epochs = 3;
  int64_t valid_interval = 50;
  int64_t max_steps = 0;  // 0 = no cap; handy for toy runs

  double plateau_factor = 0.5;
  int64_t plateau_patience = 60;
  double plateau_min_lr = 1.5e-4;

  double temperature = 0.7;
  int64_t top_k = 0;
  double top_p = 0.9;

  double lr_find_min = 1e-7;
  double lr_find_max = 1.0;
  int64_t lr_find_steps = 100;

  void validate() const;
};

// Flat key registry over RunConfig; one entry per `key = value` line, in
// canonical serialization order.
struct ConfigField {
  enum class Kind { Int, Uint, Real, Bool, Str };
  std::string name;
  Kind kind;
  std::string (*get)(const RunConfig&);
  void (*set)(RunConfig&, const std::string&);
};

const std::vector<ConfigField>& config_fields();

// `key = value` text, unknown keys rejected, '#' starts a comment.
RunConfig parse_config_text(const std::string& text);
RunConfig load_config_file(const std::string& path);
void apply_config_override(RunConfig& config, const std::string& key, const std::string& value);
std::string serialize_config(const RunConfig& config);

}  // namespace ar
