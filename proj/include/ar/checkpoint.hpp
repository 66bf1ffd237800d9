#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ar/config.hpp"
#include "ar/tensor.hpp"

namespace ar {

// Everything a training process needs to continue bitwise: the effective
// run config, both vocabularies, parameters, optimizer moments, scheduler
// state and the loop counters the derived RNG streams key on.
struct CheckpointState {
  RunConfig config;
  std::string char_vocab_text;  // one token per line, line number = id
  std::string word_vocab_text;

  int64_t step = 0;          // global optimizer steps taken
  int64_t epoch = 0;         // current epoch index
  int64_t epoch_offset = 0;  // batches consumed within the current epoch
  double train_seconds = 0.0;

  double sched_lr = 0.0;
  double sched_best = 0.0;
  int64_t sched_bad_count = 0;
  int64_t optim_step = 0;

  struct ParamEntry {
    std::string name;
    Shape shape;
    std::vector<float> values;
    std::vector<double> m1, m2;  // optimizer moments
  };
  std::vector<ParamEntry> params;

  int64_t tensor_value_count() const {
    int64_t n = 0;
    for (const auto& p : params) n += static_cast<int64_t>(p.values.size());
    return n;
  }
};

inline constexpr uint32_t kCheckpointVersion = 1;

uint32_t crc32(const void* data, size_t len, uint32_t seed = 0);

// Little-endian binary, trailing CRC32 digest; the write is atomic
// (temp file + rename). Saving the same state twice produces byte-identical
// files.
void save_checkpoint(const std::string& path, const CheckpointState& state);
CheckpointState load_checkpoint(const std::string& path);

}  // namespace ar
