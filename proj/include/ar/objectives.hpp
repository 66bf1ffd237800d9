#pragma once

#include <iostream>

#include "ar/model.hpp"
#include "ar/ops.hpp"

namespace ar {

template <typename T>
struct LossBreakdown {
  Tensor<T> dialogue;  // L_D, mean over supervised target tokens
  Tensor<T> lm;        // auxiliary language-model loss
  Tensor<T> total;     // L_D + lambda * L_LM
  double lambda = 0.0;
  int64_t lm_positions = 0;
};

// Mean token-level cross-entropy over non-pad target positions.
template <typename T>
Tensor<T> dialogue_loss(const Tensor<T>& logits, const Batch& batch) {
  auto flat = reshape(logits, {batch.size * batch.tgt_len, logits.dim(logits.ndim() - 1)});
  return cross_entropy_from_logits(flat, batch.dec_target, batch.dec_mask);
}

// Mean cross-entropy at the corrupted encoder positions only. A batch with
// no corrupted positions contributes zero (with a warning).
template <typename T>
Tensor<T> mlm_loss(const Tensor<T>& encoder_logits, const Batch& batch) {
  if (batch.mlm_label_count == 0) {
    std::cerr << "warning: mlm_loss over a batch with no corrupted positions contributes 0\n";
    return Tensor<T>::scalar(T(0));
  }
  std::vector<int32_t> targets(batch.mlm_labels.size(), 0);
  std::vector<uint8_t> include(batch.mlm_labels.size(), 0);
  for (size_t i = 0; i < batch.mlm_labels.size(); ++i) {
    if (batch.mlm_labels[i] >= 0) {
      targets[i] = batch.mlm_labels[i];
      include[i] = 1;
    }
  }
  auto flat = reshape(encoder_logits, {batch.size * batch.ctx_len, encoder_logits.dim(encoder_logits.ndim() - 1)});
  return cross_entropy_from_logits(flat, targets, include);
}

// Left-to-right character LM over the spliced context: position t predicts
// token t+1; pads excluded.
template <typename T>
Tensor<T> causal_lm_loss(const Tensor<T>& lm_logits, const Batch& batch) {
  std::vector<int32_t> targets(batch.ctx_ids.size(), 0);
  std::vector<uint8_t> include(batch.ctx_ids.size(), 0);
  int64_t count = 0;
  for (int64_t i = 0; i < batch.size; ++i) {
    for (int64_t t = 0; t + 1 < batch.ctx_len; ++t) {
      size_t at = static_cast<size_t>(i * batch.ctx_len + t);
      if (batch.ctx_mask[at] && batch.ctx_mask[at + 1]) {
        targets[at] = batch.ctx_ids[at + 1];
        include[at] = 1;
        ++count;
      }
    }
  }
  if (count == 0) {
    std::cerr << "warning: causal_lm_loss over single-token contexts contributes 0\n";
    return Tensor<T>::scalar(T(0));
  }
  auto flat = reshape(lm_logits, {batch.size * batch.ctx_len, lm_logits.dim(lm_logits.ndim() - 1)});
  return cross_entropy_from_logits(flat, targets, include);
}

template <typename T>
Tensor<T> combined_loss(const Tensor<T>& l_d, const Tensor<T>& l_lm, double lambda) {
  if (lambda < 0.0) throw std::invalid_argument("combined_loss: lambda must be non-negative");
  return add(l_d, scale(l_lm, lambda));
}

// Full multitask forward: dialogue generation cross-entropy plus the
// auxiliary LM flavor the config selects (masked LM on the corrupted
// context, or a causal LM on the clean context).
template <typename T>
LossBreakdown<T> model_loss(Model<T>& model, const Batch& batch, double lambda, bool train,
                            RngStream* drop) {
  LossBreakdown<T> out;
  out.lambda = lambda;

  auto ctx_enc = model.encode_context(batch, batch.ctx_ids, train, drop);
  auto persona = model.persona_representation(batch, ctx_enc, train, drop);
  auto logits = model.decode_logits(batch, ctx_enc, persona, train, drop);
  out.dialogue = dialogue_loss(logits, batch);

  if (lambda > 0.0) {
    if (model.config().use_bart_mlm) {
      auto enc_logits = model.encoder_lm_logits(batch, batch.mlm_ids, train, drop);
      out.lm = mlm_loss(enc_logits, batch);
      out.lm_positions = batch.mlm_label_count;
    } else {
      auto lm_logits = model.causal_lm_logits(batch, train, drop);
      out.lm = causal_lm_loss(lm_logits, batch);
    }
  } else {
    out.lm = Tensor<T>::scalar(T(0));
  }
  out.total = combined_loss(out.dialogue, out.lm, lambda);
  return out;
}

}  // namespace ar
