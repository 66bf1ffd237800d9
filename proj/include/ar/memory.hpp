#pragma once

#include <algorithm>
#include <vector>

#include "ar/ops.hpp"
#include "ar/tensor.hpp"
#include "ar/vocab.hpp"

namespace ar {

// K-hop end-to-end memory weights over the persona word vocabulary.
// With adjacent sharing A[k+1] aliases C[k] (same node), so K hops cost
// K+1 physical matrices.
template <typename T>
struct MemoryWeights {
  std::vector<Tensor<T>> input_mats;   // A^1..A^K, each W x H
  std::vector<Tensor<T>> output_mats;  // C^1..C^K, each W x H
};

// Canonical item order: persona key-value items are unordered, so slots are
// built from lexicographically sorted word-id lists. This makes the read
// output bitwise invariant under any permutation of the items.
inline std::vector<std::vector<int32_t>> canonical_items(std::vector<std::vector<int32_t>> items) {
  std::sort(items.begin(), items.end());
  return items;
}

struct MemoryLayout {
  std::vector<std::vector<int32_t>> groups;  // B*S word-id groups; {PAD} placeholders
  std::vector<uint8_t> slot_mask;            // B*S, 1 = addressable slot
  int64_t batch = 0;
  int64_t slots = 0;
};

// Slot layout shared by every hop. A session with zero items gets a single
// addressable null slot backed by the PAD row.
inline MemoryLayout memory_layout(const std::vector<std::vector<std::vector<int32_t>>>& per_session_items) {
  MemoryLayout lay;
  lay.batch = static_cast<int64_t>(per_session_items.size());
  std::vector<std::vector<std::vector<int32_t>>> sorted;
  sorted.reserve(per_session_items.size());
  for (const auto& items : per_session_items) {
    sorted.push_back(canonical_items(items));
    lay.slots = std::max(lay.slots, static_cast<int64_t>(items.size()));
  }
  lay.slots = std::max<int64_t>(lay.slots, 1);
  for (const auto& items : sorted) {
    for (int64_t s = 0; s < lay.slots; ++s) {
      bool real = s < static_cast<int64_t>(items.size());
      bool null_slot = items.empty() && s == 0;
      if (real && !items[static_cast<size_t>(s)].empty()) {
        lay.groups.push_back(items[static_cast<size_t>(s)]);
        lay.slot_mask.push_back(1);
      } else {
        lay.groups.push_back({WordVocab::kPad});
        lay.slot_mask.push_back(null_slot ? 1 : 0);
      }
    }
  }
  return lay;
}

// Slot s = mean of its word embeddings; no positional encoding across slots.
template <typename T>
Tensor<T> build_memory_slots(const Tensor<T>& embed_matrix, const MemoryLayout& lay) {
  auto flat = group_mean_embedding(embed_matrix, lay.groups);  // [B*S, H]
  return reshape(flat, {lay.batch, lay.slots, embed_matrix.dim(1)});
}

// K addressing/readout hops: p = softmax(u . A-slots), o = sum p . C-slots,
// u <- u + o. Returns the final u as a length-1 sequence [B, 1, H].
template <typename T>
Tensor<T> memn2n_read(const Tensor<T>& query, const std::vector<std::vector<std::vector<int32_t>>>& items,
                      const MemoryWeights<T>& weights, int64_t hops) {
  if (query.ndim() != 2) {
    throw std::invalid_argument("memn2n_read: query must be [B, H], got " + shape_str(query.shape()));
  }
  if (hops < 1 || hops > static_cast<int64_t>(weights.input_mats.size())) {
    throw std::invalid_argument("memn2n_read: hop count " + std::to_string(hops) +
                                " outside available matrices");
  }
  int64_t b = query.dim(0), h = query.dim(1);
  auto lay = memory_layout(items);
  if (lay.batch != b) throw std::invalid_argument("memn2n_read: batch size mismatch");

  Tensor<T> u = reshape(query, {b, 1, h});
  for (int64_t k = 0; k < hops; ++k) {
    auto a_slots = build_memory_slots(weights.input_mats[static_cast<size_t>(k)], lay);   // [B,S,H]
    auto c_slots = build_memory_slots(weights.output_mats[static_cast<size_t>(k)], lay);  // [B,S,H]
    auto scores = matmul(u, permute(a_slots, {0, 2, 1}));  // [B,1,S]
    auto p = softmax_lastdim(masked_fill_keypad(scores, lay.slot_mask));
    auto o = matmul(p, c_slots);  // [B,1,H]
    u = add(u, o);
  }
  return u;
}

// Hop attention weights for one hop, exposed for tests.
template <typename T>
Tensor<T> memn2n_hop_weights(const Tensor<T>& u, const Tensor<T>& a_mat,
                             const std::vector<std::vector<std::vector<int32_t>>>& items) {
  auto lay = memory_layout(items);
  auto a_slots = build_memory_slots(a_mat, lay);
  auto scores = matmul(u, permute(a_slots, {0, 2, 1}));
  return softmax_lastdim(masked_fill_keypad(scores, lay.slot_mask));
}

}  // namespace ar
