#include "ar/model.hpp"

namespace ar {

ParamCountBreakdown count_parameters(const ModelConfig& config) {
  config.validate();
  const int64_t v = config.vocab_size, e = config.embed_size, h = config.hidden_size;
  const int64_t f = config.ff_size, r = config.ff_rank, w = config.word_vocab_size;
  const int64_t k = config.memory_hops;

  ParamCountBreakdown out;
  out.embedding = config.use_albert ? v * e + e * h : v * h;

  int64_t attn = 8 * h * h + 8 * h;  // q, 3x(k,v), o projections with biases
  int64_t norms = 4 * h;             // two affine layer norms
  int64_t ff = config.use_factor_ff ? (h * r + r) + (r * f + f) + (f * r + r) + (r * h + h)
                                    : (h * f + f) + (f * h + h);
  int64_t gates = config.use_rezero ? 2 : 0;
  out.layer_block = attn + norms + ff + gates;
  out.physical_layers = config.use_albert ? 1 : config.layers;
  out.layer_total = out.layer_block * out.physical_layers;

  out.final_norm = config.use_rezero ? 2 * h : 0;
  out.head = config.tie_head ? v : h * v + v;
  out.persona_memory =
      config.use_memn2n ? (config.memory_adjacent_share ? (k + 1) * w * h : 2 * k * w * h) : 0;

  out.total = out.embedding + out.layer_total + out.final_norm + out.head + out.persona_memory;
  return out;
}

}  // namespace ar
