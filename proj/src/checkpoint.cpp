#include "laqt/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "laqt/config.hpp"
#include "laqt/errors.hpp"

namespace laqt {

namespace {

class Writer {
 public:
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void f64(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    le(bits, 8);
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_ += s;
  }
  std::string take() { return std::move(out_); }

 private:
  void le(std::uint64_t v, int bytes) {
    for (int i = 0; i < bytes; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  std::string out_;
};

class Reader {
 public:
  explicit Reader(const std::string& bytes) : b_(bytes) {}
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  double f64() {
    const std::uint64_t bits = le(8);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::string raw(std::size_t n, const char* what) {
    need(n, what);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string str(const char* what) { return raw(u32(), what); }
  bool done() const { return pos_ == b_.size(); }
  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (b_.size() - pos_ < n) {
      throw FormatError(std::string("checkpoint truncated while reading ") + what + " at byte " + std::to_string(pos_));
    }
  }
  std::uint64_t le(int bytes) {
    need(static_cast<std::size_t>(bytes), "an integer");
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(bytes);
    return v;
  }
  const std::string& b_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const Checkpoint& c) {
  std::string out = "LAQT";
  Writer body;
  body.u32(kCheckpointVersion);
  body.str(c.meta.mixer_kind);
  body.str(c.meta.agent_kind);
  body.u64(c.meta.config_hash);
  body.u64(c.meta.env_steps);
  body.str(c.meta.architecture);
  body.u64(c.params.size());
  for (const ParamRecord& p : c.params) {
    if (numel(p.shape) != p.values.size()) throw ShapeError("checkpoint: value count mismatch for " + p.name);
    body.str(p.name);
    body.u32(static_cast<std::uint32_t>(p.shape.size()));
    for (std::size_t d : p.shape) body.u64(d);
    for (double v : p.values) body.f64(v);
  }
  return out + body.take();
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 4 || bytes.compare(0, 4, "LAQT") != 0) throw FormatError("checkpoint: bad magic (expected LAQT)");
  const std::string rest = bytes.substr(4);
  Reader r(rest);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: format version " + std::to_string(version) + " unsupported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint c;
  c.meta.mixer_kind = r.str("mixer kind");
  c.meta.agent_kind = r.str("agent kind");
  c.meta.config_hash = r.u64();
  c.meta.env_steps = r.u64();
  c.meta.architecture = r.str("architecture");
  const std::uint64_t count = r.u64();
  for (std::uint64_t k = 0; k < count; ++k) {
    ParamRecord p;
    p.name = r.str("parameter name");
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw FormatError("checkpoint: implausible rank " + std::to_string(rank) + " for " + p.name);
    std::size_t n = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      p.shape.push_back(static_cast<std::size_t>(r.u64()));
      n *= p.shape.back();
    }
    if (n > r.remaining() / 8) throw FormatError("checkpoint truncated in values of " + p.name);
    p.values.resize(n);
    for (double& v : p.values) v = r.f64();
    c.params.push_back(std::move(p));
  }
  if (!r.done()) throw FormatError("checkpoint: trailing bytes after parameter table");
  return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  const std::string bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("checkpoint: cannot write '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("checkpoint: write failed for '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("checkpoint: cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

std::string encode_architecture(const Architecture& a) {
  std::ostringstream os;
  os << "agent.kind=" << to_string(a.agent.kind) << "\n"
     << "agent.model_dim=" << a.agent.model_dim << "\n"
     << "agent.num_heads=" << a.agent.num_heads << "\n"
     << "agent.ffn_dim=" << a.agent.ffn_dim << "\n"
     << "agent.hidden_dim=" << a.agent.hidden_dim << "\n"
     << "mixer.kind=" << to_string(a.mixer.kind) << "\n"
     << "mixer.model_dim=" << a.mixer.model_dim << "\n"
     << "mixer.num_heads=" << a.mixer.num_heads << "\n"
     << "mixer.ffn_dim=" << a.mixer.ffn_dim << "\n"
     << "mixer.fc_mul_dim=" << a.mixer.fc_mul_dim << "\n"
     << "mixer.fc_add_dim=" << a.mixer.fc_add_dim << "\n"
     << "mixer.levels=" << a.mixer.levels << "\n"
     << "mixer.stack_depth=" << a.mixer.stack_depth << "\n"
     << "mixer.qmix_embed_dim=" << a.mixer.qmix_embed_dim << "\n"
     << "n_allies=" << a.n_allies << "\n"
     << "n_enemies=" << a.n_enemies << "\n";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", a.mixer.gumbel_temperature);
  os << "mixer.gumbel_temperature=" << buf << "\n";
  return os.str();
}

Architecture decode_architecture(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("checkpoint architecture: malformed line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto get = [&](const std::string& k) -> const std::string& {
    auto it = kv.find(k);
    if (it == kv.end()) throw FormatError("checkpoint architecture: missing " + k);
    return it->second;
  };
  auto num = [&](const std::string& k) -> std::size_t {
    try {
      return static_cast<std::size_t>(std::stoull(get(k)));
    } catch (const std::logic_error&) {
      throw FormatError("checkpoint architecture: bad value for " + k);
    }
  };
  Architecture a;
  try {
    a.agent.kind = parse_agent_kind(get("agent.kind"));
    a.mixer.kind = parse_mixer_kind(get("mixer.kind"));
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint architecture: ") + e.what());
  }
  a.agent.model_dim = num("agent.model_dim");
  a.agent.num_heads = num("agent.num_heads");
  a.agent.ffn_dim = num("agent.ffn_dim");
  a.agent.hidden_dim = num("agent.hidden_dim");
  a.mixer.model_dim = num("mixer.model_dim");
  a.mixer.num_heads = num("mixer.num_heads");
  a.mixer.ffn_dim = num("mixer.ffn_dim");
  a.mixer.fc_mul_dim = num("mixer.fc_mul_dim");
  a.mixer.fc_add_dim = num("mixer.fc_add_dim");
  a.mixer.levels = num("mixer.levels");
  a.mixer.stack_depth = num("mixer.stack_depth");
  a.mixer.qmix_embed_dim = num("mixer.qmix_embed_dim");
  a.mixer.gumbel_temperature = std::stod(get("mixer.gumbel_temperature"));
  a.n_allies = num("n_allies");
  a.n_enemies = num("n_enemies");
  return a;
}

Checkpoint capture_checkpoint(Learner& learner, const TrainConfig& config) {
  Checkpoint c;
  c.meta.mixer_kind = to_string(learner.online.mixer->kind());
  c.meta.agent_kind = to_string(learner.online.agent->kind());
  c.meta.config_hash = config_hash(config);
  c.meta.env_steps = learner.env_steps;
  c.meta.architecture = encode_architecture({config.agent, config.mixer, learner.n_allies, learner.n_enemies});
  for (auto& p : named_params(learner.online)) {
    auto v = p.tensor.data();
    c.params.push_back({p.name, p.tensor.shape(), std::vector<double>(v.begin(), v.end())});
  }
  return c;
}

void load_params(const Checkpoint& ckpt, Networks& nets) {
  std::map<std::string, const ParamRecord*> table;
  for (const ParamRecord& p : ckpt.params) table.emplace(p.name, &p);
  auto params = named_params(nets);
  if (params.size() != table.size()) {
    throw IncompatibleError("checkpoint has " + std::to_string(table.size()) + " parameters, model has " +
                            std::to_string(params.size()));
  }
  for (auto& p : params) {
    auto it = table.find(p.name);
    if (it == table.end()) throw IncompatibleError("checkpoint lacks parameter " + p.name);
    if (it->second->shape != p.tensor.shape()) {
      throw IncompatibleError("parameter " + p.name + ": checkpoint shape " + shape_str(it->second->shape) +
                              " vs model shape " + shape_str(p.tensor.shape()));
    }
    std::copy(it->second->values.begin(), it->second->values.end(), p.tensor.mutable_data().begin());
  }
}

std::unique_ptr<Learner> restore_learner(const Checkpoint& ckpt, const TrainConfig& config) {
  const Architecture a = decode_architecture(ckpt.meta.architecture);
  if (ckpt.meta.mixer_kind != to_string(a.mixer.kind) || ckpt.meta.agent_kind != to_string(a.agent.kind)) {
    throw FormatError("checkpoint: metadata kinds disagree with the architecture record");
  }
  auto l = std::make_unique<Learner>();
  std::mt19937_64 rng(0);
  l->n_allies = a.n_allies;
  l->n_enemies = a.n_enemies;
  l->online = make_networks(a.agent, a.mixer, a.n_allies, a.n_enemies, rng);
  l->target = make_networks(a.agent, a.mixer, a.n_allies, a.n_enemies, rng);
  load_params(ckpt, l->online);
  l->sync_target();
  l->env_steps = ckpt.meta.env_steps;
  std::vector<Tensor> params;
  for (auto& p : named_params(l->online)) params.push_back(p.tensor);
  l->optimizer = Adam(std::move(params), config.lr, config.grad_clip);
  return l;
}

}  // namespace laqt
