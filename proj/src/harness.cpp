#include "ar/harness.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "ar/decode.hpp"
#include "ar/errors.hpp"
#include "ar/model.hpp"
#include "ar/objectives.hpp"
#include "ar/optim.hpp"

namespace ar {

namespace {

namespace fs = std::filesystem;

void write_text_atomic(const std::string& path, const std::string& content) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot write " + tmp);
    f << content;
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw DataError("cannot move " + path + " into place");
}

std::string fmt_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct Prepared {
  RunConfig config;  // effective: vocab sizes reflect the built vocabularies
  CharVocab chars;
  WordVocab words;
  std::vector<Session> train, valid, test;
};

std::vector<std::string> vocab_corpus(const std::vector<Session>& sessions) {
  std::vector<std::string> texts;
  for (const auto& s : sessions) {
    for (const auto& t : s.turns) texts.push_back(t.text);
    texts.push_back(s.response);
    for (const auto& [speaker, profile] : s.profiles) {
      for (auto& item : render_persona_items(profile)) texts.push_back(std::move(item));
    }
  }
  return texts;
}

std::vector<Session> truncate_all(std::vector<Session> sessions, const DatasetLimits& limits) {
  for (auto& s : sessions) s = truncate_session(s, limits);
  return sessions;
}

Prepared prepare(const RunConfig& config) {
  config.validate();
  if (config.data_path.empty()) throw DataError("config: data_path is required");
  Prepared out;
  out.config = config;

  auto sessions = truncate_all(dedup_sessions(load_sessions(config.data_path)), config.model.limits);
  SplitSizes sizes;
  sizes.valid = config.valid_size;
  sizes.test = config.test_size;
  sizes.train = config.train_size > 0
                    ? config.train_size
                    : static_cast<int64_t>(sessions.size()) - config.valid_size - config.test_size;
  auto splits = sample_splits(sessions, sizes, config.seed);
  out.train = std::move(splits.train);
  out.valid = std::move(splits.valid);
  out.test = std::move(splits.test);
  if (out.train.empty()) throw DataError("no training sessions after splitting");

  auto corpus = vocab_corpus(out.train);
  out.chars = CharVocab::build(corpus, config.model.vocab_size);
  std::vector<std::string> persona_texts;
  for (const auto& s : out.train) {
    for (const auto& [speaker, profile] : s.profiles) {
      for (auto& item : render_persona_items(profile)) persona_texts.push_back(std::move(item));
    }
  }
  if (persona_texts.empty()) persona_texts.push_back("");
  out.words = WordVocab::build(persona_texts, config.model.word_vocab_size);

  out.config.model.vocab_size = out.chars.size();
  out.config.model.word_vocab_size = out.words.size();
  return out;
}

std::string vocab_to_text(const CharVocab& v) {
  std::string s;
  for (int32_t i = 0; i < v.size(); ++i) {
    s += v.token(i);
    s += '\n';
  }
  return s;
}

std::string vocab_to_text(const WordVocab& v) {
  std::string s;
  for (int32_t i = 0; i < v.size(); ++i) {
    s += v.token(i);
    s += '\n';
  }
  return s;
}

std::vector<std::string> vocab_lines(const std::string& text) {
  std::vector<std::string> tokens;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) tokens.push_back(line);
  return tokens;
}

// Token-weighted dialogue loss over a session list; teacher forcing, no
// dropout.
double eval_dialogue_loss(Model<float>& model, const std::vector<Session>& sessions,
                          const Prepared& p) {
  NoGradGuard no_grad;
  double total = 0.0;
  int64_t tokens = 0;
  for (size_t at = 0; at < sessions.size(); at += static_cast<size_t>(p.config.batch_size)) {
    size_t end = std::min(sessions.size(), at + static_cast<size_t>(p.config.batch_size));
    std::vector<Session> part(sessions.begin() + static_cast<int64_t>(at),
                              sessions.begin() + static_cast<int64_t>(end));
    Batch batch = collate_batch(part, p.chars, p.words, p.config.model.limits);
    auto ctx_enc = model.encode_context(batch, batch.ctx_ids, false, nullptr);
    auto persona = model.persona_representation(batch, ctx_enc, false, nullptr);
    auto logits = model.decode_logits(batch, ctx_enc, persona, false, nullptr);
    double loss = static_cast<double>(dialogue_loss(logits, batch).item());
    int64_t count = 0;
    for (uint8_t m : batch.dec_mask) count += m;
    total += loss * static_cast<double>(count);
    tokens += count;
  }
  return tokens > 0 ? total / static_cast<double>(tokens) : 0.0;
}

MetricsReport eval_model(Model<float>& model, const std::vector<Session>& sessions, const Prepared& p,
                         double train_seconds) {
  MetricsReport report;
  report.params = model.parameter_count();
  const auto& limits = p.config.model.limits;
  report.peak_memory_estimate = estimate_peak_memory_bytes(
      model.config(), p.config.batch_size, limits.max_context_ids(), limits.max_response_chars + 1, 48);
  report.train_time = train_seconds;
  if (sessions.empty()) return report;

  report.ppl = std::exp(eval_dialogue_loss(model, sessions, p));

  SamplerConfig sampler;
  sampler.temperature = p.config.temperature;
  sampler.top_k = p.config.top_k;
  sampler.top_p = p.config.top_p;
  sampler.max_chars = limits.max_response_chars;

  Rng rng(p.config.seed);
  std::vector<std::string> hyps, refs;
  double f1_sum = 0.0;
  for (size_t i = 0; i < sessions.size(); ++i) {
    auto stream = rng.stream("sampling", i);
    auto hyp = generate_response(model, sessions[i], p.chars, p.words, sampler, stream);
    f1_sum += overlap_f1(hyp, sessions[i].response);
    hyps.push_back(std::move(hyp));
    refs.push_back(sessions[i].response);
  }
  report.bleu = bleu_corpus(hyps, refs);
  report.f1 = f1_sum / static_cast<double>(sessions.size());
  report.dist1 = distinct_n(hyps, 1);
  report.dist2 = distinct_n(hyps, 2);
  return report;
}

CheckpointState snapshot(const Prepared& p, Model<float>& model, AdamW<float>& opt,
                         const PlateauScheduler& sched, int64_t step, int64_t epoch,
                         int64_t epoch_offset, double seconds) {
  CheckpointState st;
  st.config = p.config;
  st.char_vocab_text = vocab_to_text(p.chars);
  st.word_vocab_text = vocab_to_text(p.words);
  st.step = step;
  st.epoch = epoch;
  st.epoch_offset = epoch_offset;
  st.train_seconds = seconds;
  st.sched_lr = sched.lr();
  st.sched_best = sched.best();
  st.sched_bad_count = sched.bad_count();
  st.optim_step = opt.step_count();
  auto& params = model.parameters();
  for (size_t i = 0; i < params.size(); ++i) {
    CheckpointState::ParamEntry e;
    e.name = params[i].first;
    e.shape = params[i].second.shape();
    e.values = params[i].second.values();
    e.m1 = opt.moment1()[i];
    e.m2 = opt.moment2()[i];
    st.params.push_back(std::move(e));
  }
  return st;
}

void restore_model(Model<float>& model, const CheckpointState& st, AdamW<float>* opt) {
  auto& params = model.parameters();
  if (params.size() != st.params.size()) {
    throw DataError("checkpoint holds " + std::to_string(st.params.size()) + " tensors, model expects " +
                    std::to_string(params.size()));
  }
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& e = st.params[i];
    if (params[i].first != e.name || params[i].second.shape() != e.shape) {
      throw DataError("checkpoint tensor " + e.name + " does not match model tensor " + params[i].first);
    }
    params[i].second.values() = e.values;
    if (opt) {
      opt->moment1()[i] = e.m1;
      opt->moment2()[i] = e.m2;
    }
  }
  if (opt) opt->set_step_count(st.optim_step);
}

struct LoadedModel {
  Prepared p;  // config + vocabs (no data splits)
  std::optional<Model<float>> model;
  CheckpointState state;
};

LoadedModel load_model(const std::string& checkpoint_path) {
  LoadedModel out;
  out.state = load_checkpoint(checkpoint_path);
  out.p.config = out.state.config;
  out.p.chars = CharVocab::from_tokens(vocab_lines(out.state.char_vocab_text));
  out.p.words = WordVocab::from_tokens(vocab_lines(out.state.word_vocab_text));
  Rng rng(out.p.config.seed);
  out.model.emplace(out.p.config.model, rng.stream("init"));
  restore_model(*out.model, out.state, nullptr);
  return out;
}

std::string param_summary(const ModelConfig& cfg) {
  auto c = count_parameters(cfg);
  std::ostringstream os;
  os << "parameters: total " << c.total << " (embedding " << c.embedding << ", layers "
     << c.layer_total << " = " << c.physical_layers << " x " << c.layer_block << ", final norm "
     << c.final_norm << ", head " << c.head << ", persona memory " << c.persona_memory << ")";
  return os.str();
}

}  // namespace

const std::vector<std::string>& ablation_toggles() {
  static const std::vector<std::string> toggles{"rezero", "albert", "factor_ff", "memn2n", "bart_mlm"};
  return toggles;
}

TrainOutcome run_train(const RunConfig& user_config, std::ostream& info,
                       const std::string& resume_from) {
  RunConfig config = user_config;
  std::optional<CheckpointState> resume;
  if (!resume_from.empty()) {
    resume = load_checkpoint(resume_from);
    // the model/data definition comes from the checkpoint; only the
    // training-duration knobs and output location follow the caller
    RunConfig merged = resume->config;
    merged.epochs = user_config.epochs;
    merged.max_steps = user_config.max_steps;
    merged.out_dir = user_config.out_dir;
    config = merged;
  }
  config.validate();

  Prepared p = prepare(config);
  if (resume) {
    // the checkpoint's vocabularies are authoritative
    p.chars = CharVocab::from_tokens(vocab_lines(resume->char_vocab_text));
    p.words = WordVocab::from_tokens(vocab_lines(resume->word_vocab_text));
    p.config.model.vocab_size = p.chars.size();
    p.config.model.word_vocab_size = p.words.size();
  }

  fs::create_directories(p.config.out_dir);
  Rng rng(p.config.seed);
  Model<float> model(p.config.model, rng.stream("init"));
  AdamW<float> opt(model.parameters(),
                   {p.config.lr, p.config.adam_beta1, p.config.adam_beta2, p.config.adam_eps,
                    p.config.weight_decay});
  PlateauScheduler sched(p.config.lr, p.config.plateau_factor, p.config.plateau_patience,
                         p.config.plateau_min_lr);

  int64_t global_step = 0, start_epoch = 0, start_offset = 0;
  double seconds = 0.0;
  if (resume) {
    restore_model(model, *resume, &opt);
    sched.restore(resume->sched_lr, resume->sched_best, resume->sched_bad_count);
    global_step = resume->step;
    start_epoch = resume->epoch;
    start_offset = resume->epoch_offset;
    seconds = resume->train_seconds;
  }

  info << param_summary(p.config.model) << "\n";
  info << "train " << p.train.size() << " / valid " << p.valid.size() << " / test " << p.test.size()
       << " sessions, batch " << p.config.batch_size << ", epochs " << p.config.epochs << "\n";

  write_text_atomic(p.config.out_dir + "/config.txt", serialize_config(p.config));
  p.chars.save(p.config.out_dir + "/char_vocab.txt");
  p.words.save(p.config.out_dir + "/word_vocab.txt");

  std::ofstream log(p.config.out_dir + "/train_log.txt",
                    resume ? std::ios::app : std::ios::trunc);
  if (!log) throw DataError("cannot write training log in " + p.config.out_dir);

  TrainOutcome outcome;
  outcome.params = model.parameter_count();

  const int64_t batches_per_epoch =
      (static_cast<int64_t>(p.train.size()) + p.config.batch_size - 1) / p.config.batch_size;
  int64_t epoch = start_epoch, offset = start_offset;
  bool done = false;

  for (; epoch < p.config.epochs && !done; ++epoch) {
    std::vector<int64_t> perm(p.train.size());
    for (size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int64_t>(i);
    auto shuffle_stream = rng.stream("shuffle", static_cast<uint64_t>(epoch));
    shuffle(perm, shuffle_stream);

    for (int64_t bi = (epoch == start_epoch ? start_offset : 0); bi < batches_per_epoch; ++bi) {
      if (p.config.max_steps > 0 && global_step >= p.config.max_steps) {
        offset = bi;
        done = true;
        break;
      }
      auto t0 = std::chrono::steady_clock::now();

      std::vector<Session> part;
      for (int64_t j = bi * p.config.batch_size;
           j < std::min<int64_t>((bi + 1) * p.config.batch_size, static_cast<int64_t>(p.train.size()));
           ++j) {
        part.push_back(p.train[static_cast<size_t>(perm[static_cast<size_t>(j)])]);
      }
      Batch batch = collate_batch(part, p.chars, p.words, p.config.model.limits);
      if (p.config.model.use_bart_mlm && p.config.lambda_lm > 0.0) {
        auto mlm_stream = rng.stream("mlm", static_cast<uint64_t>(global_step));
        apply_mlm_corruption(batch, p.config.mlm_rate, p.chars, mlm_stream);
      }

      model.zero_grads();
      auto drop = rng.stream("dropout", static_cast<uint64_t>(global_step));
      auto losses = model_loss(model, batch, p.config.lambda_lm, true, &drop);
      double total = static_cast<double>(losses.total.item());
      double ld = static_cast<double>(losses.dialogue.item());
      double llm = static_cast<double>(losses.lm.item());
      if (!std::isfinite(total)) {
        throw NumericError("non-finite loss at step " + std::to_string(global_step + 1) + " (ld=" +
                           fmt_real(ld) + ", llm=" + fmt_real(llm) + ")");
      }
      losses.total.backward();
      double gnorm = clip_global_norm(model.parameters(), p.config.clip_norm);
      opt.set_lr(sched.lr());
      opt.step();
      ++global_step;
      offset = bi + 1;

      seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      log << "step=" << global_step << " epoch=" << epoch << " loss=" << fmt_real(total)
          << " ld=" << fmt_real(ld) << " llm=" << fmt_real(llm) << " lr=" << fmt_real(sched.lr())
          << " gnorm=" << fmt_real(gnorm) << "\n";
      outcome.losses.push_back(total);

      if (!p.valid.empty() && global_step % p.config.valid_interval == 0) {
        double vloss = eval_dialogue_loss(model, p.valid, p);
        sched.step(vloss);
        log << "valid step=" << global_step << " ld=" << fmt_real(vloss) << " lr=" << fmt_real(sched.lr())
            << "\n";
      }
    }
    if (!done && offset >= batches_per_epoch) offset = 0;
  }
  if (!done) {
    epoch = p.config.epochs;
    offset = 0;
  } else {
    --epoch;  // the loop increment overshoots when max_steps fires mid-epoch
  }

  outcome.steps = global_step;
  outcome.seconds = seconds;
  outcome.checkpoint_path = p.config.out_dir + "/model.ckpt";
  save_checkpoint(outcome.checkpoint_path, snapshot(p, model, opt, sched, global_step, epoch, offset, seconds));
  info << "trained " << global_step << " steps in " << fmt_real(seconds) << "s; checkpoint at "
       << outcome.checkpoint_path << "\n";
  return outcome;
}

MetricsReport run_eval(const std::string& checkpoint_path, const std::string& data_path,
                       std::ostream& info, const RunConfig* expected_config) {
  auto loaded = load_model(checkpoint_path);
  if (expected_config) {
    static const std::vector<std::string> structural{
        "vocab_size", "word_vocab_size", "embed_size", "hidden_size", "layers", "heads",
        "ff_size", "ff_rank", "use_rezero", "use_albert", "use_factor_ff", "use_memn2n",
        "use_bart_mlm", "routing_weight_a", "fix_attention_b", "memory_hops",
        "memory_adjacent_share", "activation", "tie_head", "max_turn_chars",
        "max_context_turns", "max_response_chars"};
    std::string differing;
    for (const auto& f : config_fields()) {
      if (std::find(structural.begin(), structural.end(), f.name) == structural.end()) continue;
      if (f.get(*expected_config) != f.get(loaded.p.config)) {
        differing += (differing.empty() ? "" : ", ") + f.name;
      }
    }
    if (!differing.empty()) {
      throw DataError("config/checkpoint mismatch on keys: " + differing);
    }
  }

  auto sessions = truncate_all(load_sessions(data_path), loaded.p.config.model.limits);
  auto report = eval_model(*loaded.model, sessions, loaded.p, loaded.state.train_seconds);
  fs::create_directories(loaded.p.config.out_dir);
  write_text_atomic(loaded.p.config.out_dir + "/metrics.txt", serialize_metrics(report));
  info << serialize_metrics(report);
  return report;
}

std::vector<AblationRow> run_ablation(const RunConfig& config, const std::string& toggle,
                                      std::ostream& info) {
  std::vector<std::string> names;
  if (toggle == "all") {
    names = ablation_toggles();
  } else {
    if (std::find(ablation_toggles().begin(), ablation_toggles().end(), toggle) ==
        ablation_toggles().end()) {
      throw DataError("unknown ablation toggle '" + toggle + "' (expected one of rezero, albert, "
                      "factor_ff, memn2n, bart_mlm, all)");
    }
    names = {toggle};
  }

  auto disable = [](RunConfig c, const std::string& name) {
    if (name == "rezero") c.model.use_rezero = false;
    if (name == "albert") c.model.use_albert = false;
    if (name == "factor_ff") c.model.use_factor_ff = false;
    if (name == "memn2n") c.model.use_memn2n = false;
    if (name == "bart_mlm") c.model.use_bart_mlm = false;
    return c;
  };

  // shared eval split, written once so every variant sees identical data
  Prepared base = prepare(config);
  fs::create_directories(config.out_dir);
  std::string eval_path = config.out_dir + "/ablation_eval.jsonl";
  save_sessions(eval_path, base.test.empty() ? base.train : base.test);

  std::vector<AblationRow> rows;
  auto run_variant = [&](const std::string& name, RunConfig variant) {
    variant.out_dir = config.out_dir + "/" + name;
    info << "=== " << name << " ===\n";
    auto outcome = run_train(variant, info);
    auto metrics = run_eval(outcome.checkpoint_path, eval_path, info);
    metrics.train_time = outcome.seconds;
    rows.push_back({name, metrics});
  };

  run_variant("full", config);
  for (const auto& name : names) run_variant("minus_" + name, disable(config, name));

  std::ostringstream table;
  table << "variant        bleu        f1          ppl         dist1   dist2   params      mem(MB)  time(s)\n";
  for (const auto& row : rows) {
    char line[256];
    std::snprintf(line, sizeof(line), "%-14s %-11.5g %-11.5g %-11.5g %-7.3f %-7.3f %-11lld %-8lld %.1f\n",
                  row.name.c_str(), row.metrics.bleu, row.metrics.f1, row.metrics.ppl,
                  row.metrics.dist1, row.metrics.dist2,
                  static_cast<long long>(row.metrics.params),
                  static_cast<long long>(row.metrics.peak_memory_estimate / (1024 * 1024)),
                  row.metrics.train_time);
    table << line;
  }
  info << table.str();
  write_text_atomic(config.out_dir + "/ablation_table.txt", table.str());
  return rows;
}

void run_generate(const std::string& checkpoint_path, const std::string& sessions_path,
                  const std::string& out_path, std::ostream& info) {
  auto loaded = load_model(checkpoint_path);
  auto sessions = load_sessions(sessions_path);

  SamplerConfig sampler;
  sampler.temperature = loaded.p.config.temperature;
  sampler.top_k = loaded.p.config.top_k;
  sampler.top_p = loaded.p.config.top_p;
  sampler.max_chars = loaded.p.config.model.limits.max_response_chars;

  Rng rng(loaded.p.config.seed);
  std::string out;
  for (size_t i = 0; i < sessions.size(); ++i) {
    auto stream = rng.stream("sampling", i);
    out += generate_response(*loaded.model, sessions[i], loaded.p.chars, loaded.p.words, sampler, stream);
    out += '\n';
  }
  write_text_atomic(out_path, out);
  info << "wrote " << sessions.size() << " responses to " << out_path << "\n";
}

LrFindOutcome run_lr_find(const RunConfig& config, std::ostream& info) {
  Prepared p = prepare(config);
  fs::create_directories(p.config.out_dir);
  Rng rng(p.config.seed);
  Model<float> model(p.config.model, rng.stream("init"));
  AdamW<float> opt(model.parameters(),
                   {config.lr_find_min, p.config.adam_beta1, p.config.adam_beta2, p.config.adam_eps,
                    p.config.weight_decay});

  const int64_t batches_per_epoch =
      (static_cast<int64_t>(p.train.size()) + p.config.batch_size - 1) / p.config.batch_size;
  int64_t step = 0;
  auto train_step = [&](double lr) {
    int64_t epoch = step / batches_per_epoch;
    int64_t bi = step % batches_per_epoch;
    std::vector<int64_t> perm(p.train.size());
    for (size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int64_t>(i);
    auto shuffle_stream = rng.stream("shuffle", static_cast<uint64_t>(epoch));
    shuffle(perm, shuffle_stream);

    std::vector<Session> part;
    for (int64_t j = bi * p.config.batch_size;
         j < std::min<int64_t>((bi + 1) * p.config.batch_size, static_cast<int64_t>(p.train.size()));
         ++j) {
      part.push_back(p.train[static_cast<size_t>(perm[static_cast<size_t>(j)])]);
    }
    Batch batch = collate_batch(part, p.chars, p.words, p.config.model.limits);
    if (p.config.model.use_bart_mlm && p.config.lambda_lm > 0.0) {
      auto mlm_stream = rng.stream("mlm", static_cast<uint64_t>(step));
      apply_mlm_corruption(batch, p.config.mlm_rate, p.chars, mlm_stream);
    }
    model.zero_grads();
    auto drop = rng.stream("dropout", static_cast<uint64_t>(step));
    auto losses = model_loss(model, batch, p.config.lambda_lm, true, &drop);
    double total = static_cast<double>(losses.total.item());
    if (std::isfinite(total)) {
      losses.total.backward();
      clip_global_norm(model.parameters(), p.config.clip_norm);
      opt.set_lr(lr);
      opt.step();
    }
    ++step;
    return total;
  };

  auto result = lr_range_test(train_step, config.lr_find_min, config.lr_find_max,
                              config.lr_find_steps);

  LrFindOutcome out;
  out.suggestion = result.suggestion_min_loss;
  out.suggestion_steepest = result.suggestion_steepest;
  out.diverged = result.diverged;
  out.divergence_lr = result.divergence_lr;
  out.curve_path = p.config.out_dir + "/lr_curve.txt";
  std::string curve;
  for (const auto& [lr, loss] : result.curve) {
    curve += fmt_real(lr);
    curve += ' ';
    curve += fmt_real(loss);
    curve += '\n';
  }
  write_text_atomic(out.curve_path, curve);
  info << "lr curve written to " << out.curve_path << "\n";
  info << "suggested lr (min-loss/10): " << fmt_real(out.suggestion)
       << ", steepest-slope: " << fmt_real(out.suggestion_steepest) << "\n";
  if (out.diverged) info << "diverged at lr " << fmt_real(out.divergence_lr) << "\n";
  return out;
}

}  // namespace ar
