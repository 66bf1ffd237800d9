#include "ar/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "ar/errors.hpp"
#include "ar/model.hpp"
#include "ar/vocab.hpp"

namespace ar {

namespace {

std::vector<std::string> ngrams(const std::vector<std::string>& toks, int n) {
  std::vector<std::string> out;
  if (static_cast<int>(toks.size()) < n) return out;
  for (size_t i = 0; i + static_cast<size_t>(n) <= toks.size(); ++i) {
    std::string g;
    for (int j = 0; j < n; ++j) {
      g += toks[i + static_cast<size_t>(j)];
      g += '\x1f';
    }
    out.push_back(std::move(g));
  }
  return out;
}

}  // namespace

double bleu_corpus(const std::vector<std::string>& hypotheses,
                   const std::vector<std::string>& references, int max_order, double eps) {
  if (hypotheses.empty() || hypotheses.size() != references.size()) {
    throw DataError("bleu_corpus: needs equal-length non-empty hypothesis/reference lists");
  }
  std::vector<int64_t> matches(static_cast<size_t>(max_order), 0);
  std::vector<int64_t> totals(static_cast<size_t>(max_order), 0);
  int64_t hyp_len = 0, ref_len = 0;
  for (size_t i = 0; i < hypotheses.size(); ++i) {
    auto hyp = utf8_chars(hypotheses[i]);
    auto ref = utf8_chars(references[i]);
    hyp_len += static_cast<int64_t>(hyp.size());
    ref_len += static_cast<int64_t>(ref.size());
    for (int n = 1; n <= max_order; ++n) {
      auto hg = ngrams(hyp, n);
      auto rg = ngrams(ref, n);
      std::map<std::string, int64_t> ref_counts;
      for (auto& g : rg) ++ref_counts[g];
      std::map<std::string, int64_t> hyp_counts;
      for (auto& g : hg) ++hyp_counts[g];
      for (auto& [g, c] : hyp_counts) {
        auto it = ref_counts.find(g);
        if (it != ref_counts.end()) matches[static_cast<size_t>(n - 1)] += std::min(c, it->second);
      }
      totals[static_cast<size_t>(n - 1)] += static_cast<int64_t>(hg.size());
    }
  }
  double log_precision = 0.0;
  int used = 0;
  for (int n = 0; n < max_order; ++n) {
    if (totals[static_cast<size_t>(n)] == 0) continue;  // no n-grams of this order anywhere
    double m = matches[static_cast<size_t>(n)] > 0 ? static_cast<double>(matches[static_cast<size_t>(n)]) : eps;
    log_precision += std::log(m / static_cast<double>(totals[static_cast<size_t>(n)]));
    ++used;
  }
  if (used == 0 || hyp_len == 0) return 0.0;
  double bp = hyp_len < ref_len
                  ? std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len))
                  : 1.0;
  return bp * std::exp(log_precision / used);
}

double overlap_f1(const std::string& hypothesis, const std::string& reference) {
  auto hyp = utf8_chars(hypothesis);
  auto ref = utf8_chars(reference);
  if (hyp.empty() && ref.empty()) return 0.0;
  if (hyp.empty() || ref.empty()) return 0.0;
  std::map<std::string, int64_t> ref_counts;
  for (auto& c : ref) ++ref_counts[c];
  int64_t overlap = 0;
  for (auto& c : hyp) {
    auto it = ref_counts.find(c);
    if (it != ref_counts.end() && it->second > 0) {
      ++overlap;
      --it->second;
    }
  }
  if (overlap == 0) return 0.0;
  double p = static_cast<double>(overlap) / static_cast<double>(hyp.size());
  double r = static_cast<double>(overlap) / static_cast<double>(ref.size());
  return 2.0 * p * r / (p + r);
}

double distinct_n(const std::vector<std::string>& responses, int n) {
  std::set<std::string> distinct;
  int64_t total = 0;
  for (const auto& r : responses) {
    for (auto& g : ngrams(utf8_chars(r), n)) {
      distinct.insert(std::move(g));
      ++total;
    }
  }
  if (total == 0) return 0.0;
  return static_cast<double>(distinct.size()) / static_cast<double>(total);
}

double distinct_n_per_response(const std::vector<std::string>& responses, int n) {
  double acc = 0.0;
  int64_t counted = 0;
  for (const auto& r : responses) {
    auto grams = ngrams(utf8_chars(r), n);
    if (grams.empty()) continue;
    std::set<std::string> distinct(grams.begin(), grams.end());
    acc += static_cast<double>(distinct.size()) / static_cast<double>(grams.size());
    ++counted;
  }
  return counted == 0 ? 0.0 : acc / static_cast<double>(counted);
}

std::string serialize_metrics(const MetricsReport& report) {
  auto real = [](double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };
  std::ostringstream out;
  out << "bleu = " << real(report.bleu) << "\n";
  out << "f1 = " << real(report.f1) << "\n";
  out << "ppl = " << real(report.ppl) << "\n";
  out << "dist1 = " << real(report.dist1) << "\n";
  out << "dist2 = " << real(report.dist2) << "\n";
  out << "params = " << report.params << "\n";
  out << "peak_memory_estimate = " << report.peak_memory_estimate << "\n";
  out << "train_time = " << real(report.train_time) << "\n";
  return out.str();
}

void write_metrics_report(const std::string& path, const MetricsReport& report) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write metrics report: " + path);
  f << serialize_metrics(report);
}

namespace {

// Recorded elements of one forward pass, mirroring the op graph the model
// builds. Every recorded node later carries a same-sized gradient buffer.
int64_t activation_elems_per_example(const ModelConfig& c, int64_t lc, int64_t lt, int64_t lp) {
  const int64_t h = c.hidden_size, heads = c.heads, v = c.vocab_size;
  auto attention = [&](int64_t lq, int64_t lk) {
    int64_t projections = 4 * lq * h + 2 * 4 * lk * h;  // linear + reshape/permute per q,k,v
    int64_t score_maps = 4 * heads * lq * lk;           // scores, scale, mask, softmax
    int64_t outputs = 5 * lq * h;                       // apply, merge, out projection
    return projections + score_maps + outputs;
  };
  auto feed_forward = [&](int64_t l) {
    if (c.use_factor_ff) return l * (2 * c.ff_rank + 3 * c.ff_size + 2 * c.ff_rank + 2 * h);
    return l * (3 * c.ff_size + 2 * h);
  };
  auto norms_and_residuals = [&](int64_t l) { return 6 * l * h; };

  int64_t embed = 3 * (lc + lt) * h + 2 * lp * h;
  int64_t encoder = c.layers * (attention(lc, lc) + feed_forward(lc) + norms_and_residuals(lc));
  int64_t persona;
  if (c.use_memn2n) {
    persona = c.memory_hops * 8 * h;  // slots, addressing, readout on a handful of items
  } else {
    persona = c.layers * (attention(lp, lp) + feed_forward(lp) + norms_and_residuals(lp));
  }
  int64_t decoder = c.layers * (attention(lt, lt) + attention(lt, lc) + attention(lt, lp) +
                                4 * lt * h + feed_forward(lt) + norms_and_residuals(lt));
  int64_t heads_out = 2 * lt * v;
  // auxiliary LM pass over the context (masked or causal flavor)
  int64_t aux = encoder + 2 * lc * v;
  return embed + encoder + persona + decoder + heads_out + aux;
}

}  // namespace

int64_t estimate_peak_memory_bytes(const ModelConfig& config, int64_t batch, int64_t ctx_len,
                                   int64_t tgt_len, int64_t persona_len) {
  const int64_t fp = 4;  // float32 values and gradients
  int64_t params = count_parameters(config).total;
  int64_t param_bytes = params * (fp + fp) + params * 16;  // values+grads, two double moments
  int64_t act_elems = batch * activation_elems_per_example(config, ctx_len, tgt_len, persona_len);
  int64_t act_bytes = act_elems * fp * 2;  // value + backward buffer
  return param_bytes + act_bytes;
}

}  // namespace ar
