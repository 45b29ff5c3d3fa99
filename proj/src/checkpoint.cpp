#include "fgl/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fgl/error.hpp"
#include "fgl/text.hpp"

namespace fgl {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

template <typename U>
void put(std::string& out, U v) {
  char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  out.append(buf, sizeof(U));
}

void put_tensor(std::string& out, const std::string& name, const Tensor<float>& t) {
  put<std::uint64_t>(out, name.size());
  out += name;
  put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
  for (std::size_t d : t.shape) put<std::uint64_t>(out, d);
  out.append(reinterpret_cast<const char*>(t.values.data()), t.values.size() * sizeof(float));
}

class Reader {
 public:
  Reader(const std::string& bytes, std::size_t end, std::string source)
      : bytes_(bytes), end_(end), source_(std::move(source)) {}

  template <typename U>
  U get() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }

  std::string take(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  void read_floats(AlignedVector<float>& out, std::size_t n) {
    if (n > (end_ - pos_) / sizeof(float)) fail("truncated tensor data");
    out.resize(n);
    std::memcpy(out.data(), bytes_.data() + pos_, n * sizeof(float));
    pos_ += n * sizeof(float);
  }

  bool done() const { return pos_ == end_; }
  [[noreturn]] void fail(const std::string& what) const { throw Error("corrupt checkpoint " + source_ + ": " + what); }

 private:
  void need(std::size_t n) const {
    if (n > end_ - pos_) fail("truncated");
  }

  const std::string& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
  std::string source_;
};

const std::string kAdamM = "adam.m/";
const std::string kAdamV = "adam.v/";

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json meta;
  meta["config"] = ckpt.config;
  meta["plan"] = ckpt.plan;
  meta["epoch"] = ckpt.epoch;
  meta["step"] = ckpt.step;
  meta["vocab_checksum"] = ckpt.vocab_checksum;
  meta["rng_state"] = ckpt.rng_state;
  meta["metrics"] = ckpt.metrics;
  meta["train_state"] = ckpt.train_state ? nlohmann::json(*ckpt.train_state) : nlohmann::json();
  if (ckpt.optimizer) {
    const auto& o = *ckpt.optimizer;
    ckpt.params.check_compatible(o.m);
    ckpt.params.check_compatible(o.v);
    meta["optimizer"] = {{"beta1", o.settings.beta1},
                         {"beta2", o.settings.beta2},
                         {"eps", o.settings.eps},
                         {"step", o.step}};
  } else {
    meta["optimizer"] = nullptr;
  }
  const std::string meta_text = meta.dump();

  std::string out(kCheckpointMagic, 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, meta_text.size());
  out += meta_text;
  const std::size_t count = ckpt.params.tensors.size() * (ckpt.optimizer ? 3 : 1);
  put<std::uint64_t>(out, count);
  for (const auto& [name, t] : ckpt.params.tensors) put_tensor(out, name, t);
  if (ckpt.optimizer) {
    for (const auto& [name, t] : ckpt.optimizer->m.tensors) put_tensor(out, kAdamM + name, t);
    for (const auto& [name, t] : ckpt.optimizer->v.tensors) put_tensor(out, kAdamV + name, t);
  }
  put<std::uint64_t>(out, text::fnv1a(out));
  return out;
}

Checkpoint parse_checkpoint(const std::string& bytes, const std::string& source) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw Error(source + ": not a checkpoint (bad magic)");
  }
  if (bytes.size() < 4 + 4 + 8) throw Error("corrupt checkpoint " + source + ": truncated");
  const std::size_t body = bytes.size() - 8;
  Reader r(bytes, body, source);
  r.take(4);
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw Error(source + ": unsupported checkpoint version " + std::to_string(version));
  }
  std::uint64_t stored_hash;
  std::memcpy(&stored_hash, bytes.data() + body, 8);
  if (stored_hash != text::fnv1a(std::string_view(bytes.data(), body))) r.fail("checksum mismatch");

  const auto meta_len = r.get<std::uint64_t>();
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(r.take(meta_len));
  } catch (const nlohmann::json::exception&) {
    r.fail("malformed metadata");
  }

  Checkpoint ckpt;
  try {
    ckpt.config = meta.at("config").get<TransformerConfig>();
    ckpt.plan = meta.at("plan");
    ckpt.epoch = meta.at("epoch").get<std::size_t>();
    ckpt.step = meta.at("step").get<std::uint64_t>();
    ckpt.vocab_checksum = meta.at("vocab_checksum").get<std::string>();
    ckpt.rng_state = meta.at("rng_state").get<std::string>();
    ckpt.metrics = meta.at("metrics");
    if (!meta.at("train_state").is_null()) ckpt.train_state = meta["train_state"].get<TrainState>();
    if (!meta.at("optimizer").is_null()) {
      const auto& o = meta["optimizer"];
      OptimizerState<float> opt;
      opt.settings = AdamSettings{o.at("beta1").get<double>(), o.at("beta2").get<double>(), o.at("eps").get<double>()};
      opt.step = o.at("step").get<std::uint64_t>();
      ckpt.optimizer = std::move(opt);
    }
  } catch (const nlohmann::json::exception& e) {
    r.fail(std::string("bad metadata: ") + e.what());
  }

  const auto count = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string name = r.take(r.get<std::uint64_t>());
    Tensor<float> t;
    const auto rank = r.get<std::uint32_t>();
    std::size_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      t.shape.push_back(r.get<std::uint64_t>());
      n *= t.shape.back();
    }
    r.read_floats(t.values, n);
    NamedTensors<float>* dest = &ckpt.params;
    std::string key = name;
    if (name.rfind(kAdamM, 0) == 0 || name.rfind(kAdamV, 0) == 0) {
      if (!ckpt.optimizer) r.fail("optimizer tensor without optimizer metadata");
      const bool is_m = name.rfind(kAdamM, 0) == 0;
      dest = is_m ? &ckpt.optimizer->m : &ckpt.optimizer->v;
      key = name.substr(is_m ? kAdamM.size() : kAdamV.size());
    }
    if (!dest->tensors.emplace(key, std::move(t)).second) r.fail("duplicate tensor " + name);
  }
  if (!r.done()) r.fail("trailing bytes");
  if (ckpt.optimizer) {
    try {
      ckpt.params.check_compatible(ckpt.optimizer->m);
      ckpt.params.check_compatible(ckpt.optimizer->v);
    } catch (const Error& e) {
      r.fail(std::string("optimizer state: ") + e.what());
    }
  }
  return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  const std::string bytes = serialize_checkpoint(ckpt);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_checkpoint(ss.str(), path);
}

void require_vocab(const Checkpoint& ckpt, const std::string& vocab_checksum) {
  if (ckpt.vocab_checksum != vocab_checksum) {
    throw Error("vocabulary checksum mismatch: checkpoint " + ckpt.vocab_checksum + ", current " + vocab_checksum);
  }
}

}  // namespace fgl
