#include "ar/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "ar/errors.hpp"

namespace ar {

void ModelConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw DataError("config: " + what);
  };
  require(vocab_size > specials::kCount, "vocab_size must exceed the special block");
  require(word_vocab_size > 2, "word_vocab_size must exceed the special block");
  require(hidden_size > 0 && embed_size > 0 && layers > 0 && heads > 0 && ff_size > 0 && ff_rank > 0,
          "all sizes must be positive");
  require(embed_size <= hidden_size, "embed_size must not exceed hidden_size");
  require(ff_rank < std::min(hidden_size, ff_size), "ff_rank must be below min(hidden_size, ff_size)");
  require(hidden_size % heads == 0, "hidden_size must be divisible by heads");
  require(dropout >= 0.0 && dropout < 1.0, "dropout must be in [0,1)");
  require(memory_hops >= 1, "memory_hops must be at least 1");
  require(activation == "relu" || activation == "gelu", "activation must be relu or gelu");
  require(!(tie_head && use_albert),
          "tie_head requires the unfactorized embedding (tying across the E->H factorization is ambiguous)");
}

void RunConfig::validate() const {
  model.validate();
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw DataError("config: " + what);
  };
  require(lr > 0.0, "lr must be positive");
  require(batch_size > 0 && epochs >= 0, "batch_size/epochs invalid");
  require(lambda_lm >= 0.0, "lambda_lm must be non-negative");
  require(mlm_rate > 0.0 && mlm_rate < 1.0, "mlm_rate must be in (0,1)");
  require(clip_norm > 0.0, "clip_norm must be positive");
  require(valid_interval > 0, "valid_interval must be positive");
  require(plateau_factor > 0.0 && plateau_factor < 1.0, "plateau_factor must be in (0,1)");
  require(plateau_patience > 0, "plateau_patience must be positive");
  require(temperature > 0.0, "temperature must be positive");
  require(top_p > 0.0 && top_p <= 1.0, "top_p must be in (0,1]");
  require(top_k >= 0, "top_k must be non-negative");
  require(lr_find_min < lr_find_max, "lr_find_min must be below lr_find_max");
  require(lr_find_steps >= 10, "lr_find_steps must be at least 10");
}

namespace {

std::string real_str(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

int64_t parse_int(const std::string& s) {
  int64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw DataError("config: bad integer '" + s + "'");
  return v;
}

uint64_t parse_uint(const std::string& s) {
  uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw DataError("config: bad integer '" + s + "'");
  return v;
}

double parse_real(const std::string& s) {
  try {
    size_t pos = 0;
    double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError("config: bad number '" + s + "'");
  }
}

bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw DataError("config: bad boolean '" + s + "' (use true/false)");
}

#define AR_FIELD_INT(key, expr)                                             \
  ConfigField{key, ConfigField::Kind::Int,                                  \
              [](const RunConfig& c) { return std::to_string(c.expr); },    \
              [](RunConfig& c, const std::string& v) { c.expr = parse_int(v); }}
#define AR_FIELD_UINT(key, expr)                                            \
  ConfigField{key, ConfigField::Kind::Uint,                                 \
              [](const RunConfig& c) { return std::to_string(c.expr); },    \
              [](RunConfig& c, const std::string& v) { c.expr = parse_uint(v); }}
#define AR_FIELD_REAL(key, expr)                                            \
  ConfigField{key, ConfigField::Kind::Real,                                 \
              [](const RunConfig& c) { return real_str(c.expr); },          \
              [](RunConfig& c, const std::string& v) { c.expr = parse_real(v); }}
#define AR_FIELD_BOOL(key, expr)                                            \
  ConfigField{key, ConfigField::Kind::Bool,                                 \
              [](const RunConfig& c) { return c.expr ? std::string("true") : std::string("false"); }, \
              [](RunConfig& c, const std::string& v) { c.expr = parse_bool(v); }}
#define AR_FIELD_STR(key, expr)                                             \
  ConfigField{key, ConfigField::Kind::Str,                                  \
              [](const RunConfig& c) { return c.expr; },                    \
              [](RunConfig& c, const std::string& v) { c.expr = v; }}

}  // namespace

const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields{
      AR_FIELD_UINT("seed", seed),
      AR_FIELD_STR("data_path", data_path),
      AR_FIELD_STR("out_dir", out_dir),
      AR_FIELD_INT("train_size", train_size),
      AR_FIELD_INT("valid_size", valid_size),
      AR_FIELD_INT("test_size", test_size),

      AR_FIELD_INT("vocab_size", model.vocab_size),
      AR_FIELD_INT("word_vocab_size", model.word_vocab_size),
      AR_FIELD_INT("embed_size", model.embed_size),
      AR_FIELD_INT("hidden_size", model.hidden_size),
      AR_FIELD_INT("layers", model.layers),
      AR_FIELD_INT("heads", model.heads),
      AR_FIELD_INT("ff_size", model.ff_size),
      AR_FIELD_INT("ff_rank", model.ff_rank),
      AR_FIELD_REAL("dropout", model.dropout),

      AR_FIELD_BOOL("use_rezero", model.use_rezero),
      AR_FIELD_BOOL("use_albert", model.use_albert),
      AR_FIELD_BOOL("use_factor_ff", model.use_factor_ff),
      AR_FIELD_BOOL("use_memn2n", model.use_memn2n),
      AR_FIELD_BOOL("use_bart_mlm", model.use_bart_mlm),

      AR_FIELD_REAL("routing_weight_a", model.routing_weight_a),
      AR_FIELD_REAL("fix_attention_b", model.fix_attention_b),
      AR_FIELD_INT("memory_hops", model.memory_hops),
      AR_FIELD_BOOL("memory_adjacent_share", model.memory_adjacent_share),
      AR_FIELD_STR("activation", model.activation),
      AR_FIELD_BOOL("tie_head", model.tie_head),

      AR_FIELD_INT("max_turn_chars", model.limits.max_turn_chars),
      AR_FIELD_INT("max_context_turns", model.limits.max_context_turns),
      AR_FIELD_INT("max_response_chars", model.limits.max_response_chars),

      AR_FIELD_REAL("lr", lr),
      AR_FIELD_REAL("weight_decay", weight_decay),
      AR_FIELD_REAL("adam_beta1", adam_beta1),
      AR_FIELD_REAL("adam_beta2", adam_beta2),
      AR_FIELD_REAL("adam_eps", adam_eps),
      AR_FIELD_REAL("clip_norm", clip_norm),
      AR_FIELD_REAL("lambda_lm", lambda_lm),
      AR_FIELD_REAL("mlm_rate", mlm_rate),

      AR_FIELD_INT("batch_size", batch_size),
      AR_FIELD_INT("epochs", epochs),
      AR_FIELD_INT("valid_interval", valid_interval),
      AR_FIELD_INT("max_steps", max_steps),

      AR_FIELD_REAL("plateau_factor", plateau_factor),
      AR_FIELD_INT("plateau_patience", plateau_patience),
      AR_FIELD_REAL("plateau_min_lr", plateau_min_lr),

      AR_FIELD_REAL("temperature", temperature),
      AR_FIELD_INT("top_k", top_k),
      AR_FIELD_REAL("top_p", top_p),

      AR_FIELD_REAL("lr_find_min", lr_find_min),
      AR_FIELD_REAL("lr_find_max", lr_find_max),
      AR_FIELD_INT("lr_find_steps", lr_find_steps),
  };
  return fields;
}

void apply_config_override(RunConfig& config, const std::string& key, const std::string& value) {
  for (const auto& f : config_fields()) {
    if (f.name == key) {
      f.set(config, value);
      return;
    }
  }
  throw DataError("config: unknown key '" + key + "'");
}

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

RunConfig parse_config_text(const std::string& text) {
  RunConfig config;
  std::istringstream in(text);
  std::string line;
  int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw DataError("config line " + std::to_string(line_no) + ": expected key = value");
    }
    apply_config_override(config, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return config;
}

RunConfig load_config_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot read config file: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str());
}

std::string serialize_config(const RunConfig& config) {
  std::ostringstream out;
  for (const auto& f : config_fields()) out << f.name << " = " << f.get(config) << "\n";
  return out.str();
}

}  // namespace ar
