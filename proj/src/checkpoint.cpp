#include "ar/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "ar/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace ar {

uint32_t crc32(const void* data, size_t len, uint32_t seed) {
  static const auto table = [] {
    std::array<uint32_t, 256> t{};
    for (uint32_t i = 0; i < 256; ++i) {
      uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  uint32_t c = seed ^ 0xFFFFFFFFu;
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < len; ++i) c = table[(c ^ p[i]) & 0xFFu] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

namespace {

constexpr char kMagic[4] = {'A', 'R', 'C', 'K'};

struct Writer {
  std::string buf;
  void raw(const void* p, size_t n) { buf.append(static_cast<const char*>(p), n); }
  template <typename T>
  void pod(T v) {
    raw(&v, sizeof(v));
  }
  void str(const std::string& s) {
    pod<uint64_t>(s.size());
    raw(s.data(), s.size());
  }
  template <typename T>
  void vec(const std::vector<T>& v) {
    pod<uint64_t>(v.size());
    raw(v.data(), v.size() * sizeof(T));
  }
};

struct Reader {
  const std::string& buf;
  size_t at = 0;
  void raw(void* p, size_t n) {
    if (at + n > buf.size()) throw DataError("checkpoint truncated");
    std::memcpy(p, buf.data() + at, n);
    at += n;
  }
  template <typename T>
  T pod() {
    T v;
    raw(&v, sizeof(v));
    return v;
  }
  std::string str() {
    uint64_t n = pod<uint64_t>();
    if (at + n > buf.size()) throw DataError("checkpoint truncated");
    std::string s(buf.data() + at, n);
    at += n;
    return s;
  }
  template <typename T>
  std::vector<T> vec() {
    uint64_t n = pod<uint64_t>();
    std::vector<T> v(n);
    raw(v.data(), n * sizeof(T));
    return v;
  }
};

}  // namespace

void save_checkpoint(const std::string& path, const CheckpointState& state) {
  Writer w;
  w.raw(kMagic, sizeof(kMagic));
  w.pod<uint32_t>(kCheckpointVersion);
  w.str(serialize_config(state.config));
  w.str(state.char_vocab_text);
  w.str(state.word_vocab_text);
  w.pod<int64_t>(state.step);
  w.pod<int64_t>(state.epoch);
  w.pod<int64_t>(state.epoch_offset);
  w.pod<double>(state.train_seconds);
  w.pod<double>(state.sched_lr);
  w.pod<double>(state.sched_best);
  w.pod<int64_t>(state.sched_bad_count);
  w.pod<int64_t>(state.optim_step);
  w.pod<uint64_t>(state.params.size());
  for (const auto& p : state.params) {
    w.str(p.name);
    w.pod<uint32_t>(static_cast<uint32_t>(p.shape.size()));
    for (int64_t d : p.shape) w.pod<int64_t>(d);
    w.vec(p.values);
    w.vec(p.m1);
    w.vec(p.m2);
  }
  uint32_t digest = crc32(w.buf.data(), w.buf.size());
  w.pod<uint32_t>(digest);

  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot write checkpoint: " + tmp);
    f.write(w.buf.data(), static_cast<std::streamsize>(w.buf.size()));
    if (!f) throw DataError("short write on checkpoint: " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw DataError("cannot move checkpoint into place: " + path);
  }
}

CheckpointState load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot read checkpoint: " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < sizeof(kMagic) + sizeof(uint32_t) * 2) throw DataError("checkpoint truncated");

  uint32_t stored;
  std::memcpy(&stored, buf.data() + buf.size() - sizeof(uint32_t), sizeof(uint32_t));
  uint32_t actual = crc32(buf.data(), buf.size() - sizeof(uint32_t));
  if (stored != actual) {
    throw DataError("checkpoint integrity digest mismatch for " + path);
  }

  Reader r{buf};
  char magic[4];
  r.raw(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw DataError("not a checkpoint file: " + path);
  uint32_t version = r.pod<uint32_t>();
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                    std::to_string(kCheckpointVersion) + ")");
  }

  CheckpointState state;
  state.config = parse_config_text(r.str());
  state.char_vocab_text = r.str();
  state.word_vocab_text = r.str();
  state.step = r.pod<int64_t>();
  state.epoch = r.pod<int64_t>();
  state.epoch_offset = r.pod<int64_t>();
  state.train_seconds = r.pod<double>();
  state.sched_lr = r.pod<double>();
  state.sched_best = r.pod<double>();
  state.sched_bad_count = r.pod<int64_t>();
  state.optim_step = r.pod<int64_t>();
  uint64_t count = r.pod<uint64_t>();
  for (uint64_t i = 0; i < count; ++i) {
    CheckpointState::ParamEntry p;
    p.name = r.str();
    uint32_t nd = r.pod<uint32_t>();
    for (uint32_t d = 0; d < nd; ++d) p.shape.push_back(r.pod<int64_t>());
    p.values = r.vec<float>();
    p.m1 = r.vec<double>();
    p.m2 = r.vec<double>();
    if (shape_numel(p.shape) != static_cast<int64_t>(p.values.size())) {
      throw DataError("checkpoint parameter " + p.name + " has inconsistent shape");
    }
    state.params.push_back(std::move(p));
  }
  return state;
}

}  // namespace ar
