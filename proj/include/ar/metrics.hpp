#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ar/config.hpp"

namespace ar {

// Corpus-level character BLEU up to max_order with brevity penalty; zero
// match counts are smoothed by eps, orders with no n-grams anywhere are
// dropped from the geometric mean.
double bleu_corpus(const std::vector<std::string>& hypotheses,
                   const std::vector<std::string>& references, int max_order = 4,
                   double eps = 1e-9);

// Multiset character overlap F1; 0 when both sides are empty.
double overlap_f1(const std::string& hypothesis, const std::string& reference);

// Distinct character n-grams pooled over all responses, divided by the
// total n-gram count; 0 on an empty pool.
double distinct_n(const std::vector<std::string>& responses, int n);

// Per-response distinct-n averaged over the corpus (the pooled variant
// above is the reported convention).
double distinct_n_per_response(const std::vector<std::string>& responses, int n);

struct MetricsReport {
  double bleu = 0.0;
  double f1 = 0.0;
  double ppl = 0.0;
  double dist1 = 0.0;
  double dist2 = 0.0;
  int64_t params = 0;
  int64_t peak_memory_estimate = 0;  // bytes
  double train_time = 0.0;           // seconds
};

// Fixed-key `key = value` document.
std::string serialize_metrics(const MetricsReport& report);
void write_metrics_report(const std::string& path, const MetricsReport& report);

// Analytic training-memory estimate in bytes: parameter values + gradients
// + two optimizer moments, plus the recorded activations (values and their
// backward buffers) of one forward pass at the given batch shape. Exactly
// linear in the batch size.
int64_t estimate_peak_memory_bytes(const ModelConfig& config, int64_t batch, int64_t ctx_len,
                                   int64_t tgt_len, int64_t persona_len);

}  // namespace ar
