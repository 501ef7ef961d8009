#include "wiflex/model.hpp"

#include <cmath>
#include <random>

#include "wiflex/binary_io.hpp"

namespace wiflex {

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* what) {
    if (v < 1) throw ConfigError(std::string("model config: ") + what + " must be >= 1");
  };
  positive(in_channels, "in_channels");
  positive(in_freq, "in_freq");
  positive(seq_len, "seq_len");
  positive(d_model, "d_model");
  positive(encoder_layers, "encoder_layers");
  positive(heads, "heads");
  positive(ffn_dim, "ffn_dim");
  positive(classes, "classes");
  positive(gauss_count, "gauss_count");
  if (d_model % heads != 0) {
    throw ConfigError("model config: d_model " + std::to_string(d_model) +
                      " not divisible by heads " + std::to_string(heads));
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("model config: dropout must be in [0, 1)");
  if (!(bn_momentum >= 0.0 && bn_momentum <= 1.0))
    throw ConfigError("model config: bn_momentum must be in [0, 1]");
  if (!(bn_eps > 0.0) || !(ln_eps > 0.0)) throw ConfigError("model config: eps must be > 0");
}

// ---------------------------------------------------------------------------
// ParamSet

template <class T>
void ParamSet<T>::add(std::string name, Tensor<T> value, ParamKind kind) {
  if (index_.count(name)) throw ValidationError("duplicate parameter " + name);
  index_.emplace(name, entries_.size());
  entries_.push_back(ParamEntry<T>{std::move(name), std::move(value), kind});
}

template <class T>
Tensor<T>& ParamSet<T>::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ValidationError("unknown parameter " + name);
  return entries_[it->second].value;
}

template <class T>
const Tensor<T>& ParamSet<T>::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ValidationError("unknown parameter " + name);
  return entries_[it->second].value;
}

template <class T>
std::size_t ParamSet<T>::learnable_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_)
    if (e.kind != ParamKind::buffer) n += e.value.size();
  return n;
}

// ---------------------------------------------------------------------------
// layout and initialization

std::vector<ParamSpec> param_layout(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.d_model;
  std::vector<ParamSpec> out;
  auto weight = [&](std::string n, Shape s, std::size_t fan_in) {
    out.push_back({std::move(n), std::move(s), ParamKind::weight, fan_in});
  };
  auto other = [&](std::string n, Shape s, ParamKind k) {
    out.push_back({std::move(n), std::move(s), k, 0});
  };

  if (cfg.has_stem2d()) {
    const std::size_t C = cfg.in_channels;
    weight("stem2d.conv1.K", {C, C, 1, 3}, C * 3);
    other("stem2d.conv1.b", {C}, ParamKind::bias);
    weight("stem2d.conv2.K", {1, C, 1, 3}, C * 3);
    other("stem2d.conv2.b", {1}, ParamKind::bias);
  }
  for (int blk = 1; blk <= 2; ++blk) {
    const std::string c = "stem1d.conv" + std::to_string(blk);
    const std::string bn = "stem1d.bn" + std::to_string(blk);
    const std::size_t in = blk == 1 ? cfg.in_freq : d;
    weight(c + ".K", {d, in, 3}, in * 3);
    other(c + ".b", {d}, ParamKind::bias);
    other(bn + ".gamma", {d}, ParamKind::norm);
    other(bn + ".beta", {d}, ParamKind::norm);
    other(bn + ".running_mean", {d}, ParamKind::buffer);
    other(bn + ".running_var", {d}, ParamKind::buffer);
  }
  other("pos.mu", {cfg.gauss_count}, ParamKind::positional);
  other("pos.sigma", {cfg.gauss_count}, ParamKind::positional);
  other("pos.E", {cfg.gauss_count, d}, ParamKind::positional);
  other("class_token", {d}, ParamKind::token);
  for (std::size_t l = 0; l < cfg.encoder_layers; ++l) {
    const std::string e = "enc." + std::to_string(l) + ".";
    weight(e + "attn.qkv.W", {d, 3 * d}, d);
    other(e + "attn.qkv.b", {3 * d}, ParamKind::bias);
    weight(e + "attn.out.W", {d, d}, d);
    other(e + "attn.out.b", {d}, ParamKind::bias);
    other(e + "ln1.gamma", {d}, ParamKind::norm);
    other(e + "ln1.beta", {d}, ParamKind::norm);
    weight(e + "ffn.W1", {d, cfg.ffn_dim}, d);
    other(e + "ffn.b1", {cfg.ffn_dim}, ParamKind::bias);
    weight(e + "ffn.W2", {cfg.ffn_dim, d}, cfg.ffn_dim);
    other(e + "ffn.b2", {d}, ParamKind::bias);
    other(e + "ln2.gamma", {d}, ParamKind::norm);
    other(e + "ln2.beta", {d}, ParamKind::norm);
  }
  weight("head.W", {d, cfg.classes}, d);
  other("head.b", {cfg.classes}, ParamKind::bias);
  return out;
}

std::size_t param_count(const ModelConfig& cfg) {
  std::size_t n = 0;
  for (const ParamSpec& s : param_layout(cfg))
    if (s.kind != ParamKind::buffer) n += shape_size(s.shape);
  return n;
}

template <class T>
ParamSet<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  auto uniform = [&](double bound) {
    return std::uniform_real_distribution<double>(-bound, bound)(gen);
  };
  const std::size_t tokens = cfg.pe_includes_cls ? cfg.token_count() : cfg.seq_len;
  const std::size_t K = cfg.gauss_count;

  ParamSet<T> params;
  for (const ParamSpec& s : param_layout(cfg)) {
    Tensor<T> t(s.shape);
    const std::string& n = s.name;
    auto ends_with = [&](const char* suffix) {
      const std::string sfx(suffix);
      return n.size() >= sfx.size() && n.compare(n.size() - sfx.size(), sfx.size(), sfx) == 0;
    };
    if (s.kind == ParamKind::weight) {
      const double bound = std::sqrt(1.0 / double(s.fan_in));
      for (T& v : t.values()) v = T(uniform(bound));
    } else if (ends_with(".gamma") || ends_with(".running_var")) {
      t.fill(T(1));
    } else if (n == "pos.mu") {
      for (std::size_t k = 0; k < K; ++k)
        t[k] = K == 1 ? T(0) : T(double(tokens) * double(k) / double(K - 1));
    } else if (n == "pos.sigma") {
      t.fill(T(double(tokens) / double(K)));
    } else if (n == "pos.E" || n == "class_token") {
      for (T& v : t.values()) v = T(uniform(0.02));
    }
    params.add(s.name, std::move(t), s.kind);
  }
  return params;
}

// ---------------------------------------------------------------------------
// binding

template <class T>
BoundParams<T>::BoundParams(GradTape<T>& tape, ParamSet<T>& params)
    : tape_(&tape), params_(&params) {
  for (auto& e : params.entries())
    if (e.kind != ParamKind::buffer) vars_.emplace(e.name, tape.leaf(e.value));
}

template <class T>
BoundParams<T>::BoundParams(GradTape<T>& tape, ParamSet<T>& params,
                            const std::vector<Var<T>>& learnable)
    : tape_(&tape), params_(&params) {
  std::size_t i = 0;
  for (auto& e : params.entries()) {
    if (e.kind == ParamKind::buffer) continue;
    if (i >= learnable.size()) throw ValidationError("too few variables to bind parameters");
    if (learnable[i].shape() != e.value.shape())
      throw ValidationError("variable shape mismatch binding " + e.name);
    vars_.emplace(e.name, learnable[i++]);
  }
  if (i != learnable.size()) throw ValidationError("too many variables to bind parameters");
}

template <class T>
Var<T> BoundParams<T>::operator[](const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw ValidationError("parameter not bound: " + name);
  return it->second;
}

template <class T>
RunningStats<T> BoundParams<T>::running(const std::string& prefix) const {
  return {&params_->at(prefix + ".running_mean"), &params_->at(prefix + ".running_var")};
}

template <class T>
std::map<std::string, Tensor<T>> BoundParams<T>::gradients() const {
  std::map<std::string, Tensor<T>> out;
  for (const auto& [name, v] : vars_) out.emplace(name, tape_->grad(v));
  return out;
}

// ---------------------------------------------------------------------------
// forward

template <class T>
Var<T> stem2d_forward(const BoundParams<T>& p, Var<T> x) {
  if (x.value().rank() != 4 || x.value().dim(1) < 2) {
    throw ValidationError("stem2d: expects [B, C, F, T] with C > 1, got " +
                          shape_string(x.value().shape()));
  }
  Var<T> h = gelu(conv2d_1x3(x, p["stem2d.conv1.K"], p["stem2d.conv1.b"]));
  h = gelu(conv2d_1x3(h, p["stem2d.conv2.K"], p["stem2d.conv2.b"]));
  const Shape& s = h.value().shape();
  return reshape(h, {s[0], s[2], s[3]});
}

template <class T>
Var<T> stem1d_forward(const BoundParams<T>& p, const ModelConfig& cfg, Var<T> x, Mode mode) {
  if (x.value().rank() != 3 || x.value().dim(1) != cfg.in_freq) {
    throw ValidationError("stem1d: expects [B, " + std::to_string(cfg.in_freq) + ", T], got " +
                          shape_string(x.value().shape()));
  }
  const T momentum = T(cfg.bn_momentum), eps = T(cfg.bn_eps), rate = T(cfg.dropout);
  Var<T> h = x;
  for (int blk = 1; blk <= 2; ++blk) {
    const std::string c = "stem1d.conv" + std::to_string(blk);
    const std::string bn = "stem1d.bn" + std::to_string(blk);
    h = conv1d(h, p[c + ".K"], p[c + ".b"], 1);
    h = batch_norm_1d(h, p[bn + ".gamma"], p[bn + ".beta"], p.running(bn), mode, momentum, eps);
    h = dropout(gelu(h), rate, mode);
  }
  return h;
}

template <class T>
Var<T> encoder_forward(const BoundParams<T>& p, const ModelConfig& cfg, Var<T> tokens, Mode mode) {
  const T rate = cfg.encoder_dropout ? T(cfg.dropout) : T(0);
  const T eps = T(cfg.ln_eps);
  Var<T> h = tokens;
  for (std::size_t l = 0; l < cfg.encoder_layers; ++l) {
    const std::string e = "enc." + std::to_string(l) + ".";
    AttentionParams<T> ap{p[e + "attn.qkv.W"], p[e + "attn.qkv.b"], p[e + "attn.out.W"],
                          p[e + "attn.out.b"]};
    Var<T> a = multi_head_attention(h, ap, cfg.heads, rate, mode);
    h = layer_norm(add(h, a), p[e + "ln1.gamma"], p[e + "ln1.beta"], eps);
    Var<T> f = gelu(linear(h, p[e + "ffn.W1"], p[e + "ffn.b1"]));
    f = dropout(linear(f, p[e + "ffn.W2"], p[e + "ffn.b2"]), rate, mode);
    h = layer_norm(add(h, f), p[e + "ln2.gamma"], p[e + "ln2.beta"], eps);
  }
  return h;
}

template <class T>
Var<T> forward(const BoundParams<T>& p, const ModelConfig& cfg, Var<T> x, Mode mode) {
  const Shape& s = x.value().shape();
  if (s.size() != 4 || s[1] != cfg.in_channels || s[2] != cfg.in_freq || s[3] != cfg.seq_len) {
    throw ValidationError("forward: expected input [B, " + std::to_string(cfg.in_channels) + ", " +
                          std::to_string(cfg.in_freq) + ", " + std::to_string(cfg.seq_len) +
                          "], got " + shape_string(s));
  }
  Var<T> h = cfg.has_stem2d() ? stem2d_forward(p, x) : reshape(x, {s[0], s[2], s[3]});
  h = transpose_last2(stem1d_forward(p, cfg, h, mode));  // [B, T, d]
  if (cfg.pe_includes_cls) {
    h = prepend_token(h, p["class_token"]);
    h = gaussian_positional_encoding(h, p["pos.mu"], p["pos.sigma"], p["pos.E"]);
  } else {
    h = gaussian_positional_encoding(h, p["pos.mu"], p["pos.sigma"], p["pos.E"]);
    h = prepend_token(h, p["class_token"]);
  }
  h = encoder_forward(p, cfg, h, mode);
  Var<T> logits = linear(select_position(h, 0), p["head.W"], p["head.b"]);
  for (T v : logits.value().values())
    if (!std::isfinite(v)) throw NumericError("forward: non-finite logits");
  return logits;
}

template <class T>
Tensor<T> predict(ParamSet<T>& params, const ModelConfig& cfg, const Tensor<T>& x) {
  GradTape<T> tape(false);
  BoundParams<T> bound(tape, params);
  return forward(bound, cfg, tape.constant(x), Mode::eval).value();
}

// ---------------------------------------------------------------------------
// checkpoint

namespace {

constexpr char kCkptMagic[4] = {'W', 'F', 'L', 'X'};
constexpr std::uint16_t kCkptVersion = 1;
constexpr std::size_t kConfigFields = 16;  // 9 sizes, 4 reals, 2 flags, step

void put_config(io::ByteWriter& w, const ModelConfig& c, std::uint32_t step) {
  for (std::size_t v : {c.in_channels, c.in_freq, c.seq_len, c.d_model, c.encoder_layers, c.heads,
                        c.ffn_dim, c.classes, c.gauss_count})
    w.put(std::uint32_t(v));
  for (double v : {c.dropout, c.bn_momentum, c.bn_eps, c.ln_eps}) w.put(float(v));
  w.put(std::uint32_t(c.pe_includes_cls));
  w.put(std::uint32_t(c.encoder_dropout));
  w.put(step);
}

ModelConfig get_config(io::ByteReader& r, std::uint32_t& step) {
  ModelConfig c;
  for (std::size_t* f : {&c.in_channels, &c.in_freq, &c.seq_len, &c.d_model, &c.encoder_layers,
                         &c.heads, &c.ffn_dim, &c.classes, &c.gauss_count})
    *f = r.get<std::uint32_t>();
  for (double* f : {&c.dropout, &c.bn_momentum, &c.bn_eps, &c.ln_eps}) *f = r.get<float>();
  c.pe_includes_cls = r.get<std::uint32_t>() != 0;
  c.encoder_dropout = r.get<std::uint32_t>() != 0;
  step = r.get<std::uint32_t>();
  return c;
}

void put_tensor(io::ByteWriter& w, const std::string& name, const Tensor<float>& t) {
  if (name.size() > 0xFFFF) throw ValidationError("tensor name too long: " + name);
  if (t.rank() > 0xFF) throw ValidationError("tensor rank too large: " + name);
  w.put(std::uint16_t(name.size()));
  w.put_bytes(name.data(), name.size());
  w.put(std::uint8_t(t.rank()));
  for (std::size_t d : t.shape()) w.put(std::uint32_t(d));
  for (float v : t.values()) w.put(v);
}

}  // namespace

std::size_t checkpoint_header_size() { return 4 + 2 + kConfigFields * 4 + 4; }

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  ckpt.config.validate();
  io::ByteWriter w;
  w.put_bytes(kCkptMagic, 4);
  w.put(kCkptVersion);
  put_config(w, ckpt.config, ckpt.step);
  w.put(std::uint32_t(ckpt.params.entries().size() + ckpt.extras.size()));
  for (const auto& e : ckpt.params.entries()) put_tensor(w, e.name, e.value);
  for (const auto& x : ckpt.extras) {
    if (x.name.rfind("aux.", 0) != 0)
      throw ValidationError("auxiliary tensor names must start with 'aux.': " + x.name);
    put_tensor(w, x.name, x.value);
  }
  io::write_file(path, w.bytes());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  io::ByteReader r(io::read_file(path));
  if (r.remaining() < 4 || r.get_string(4) != std::string(kCkptMagic, 4))
    throw FormatError(path.string() + ": not a WFLX checkpoint");
  if (const auto v = r.get<std::uint16_t>(); v != kCkptVersion)
    throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(v));

  Checkpoint ck;
  ck.config = get_config(r, ck.step);
  try {
    ck.config.validate();
  } catch (const ConfigError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  const std::vector<ParamSpec> layout = param_layout(ck.config);
  const auto count = r.get<std::uint32_t>();

  std::map<std::string, Tensor<float>> found;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint16_t>();
    std::string name = r.get_string(name_len);
    const auto rank = r.get<std::uint8_t>();
    Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint32_t>();
    Tensor<float> t(shape);
    for (float& v : t.values()) v = r.get<float>();
    if (name.rfind("aux.", 0) == 0) {
      ck.extras.push_back({std::move(name), std::move(t)});
    } else if (!found.emplace(name, std::move(t)).second) {
      throw FormatError(path.string() + ": duplicate tensor " + name);
    }
  }
  if (r.remaining() != 0) throw CorruptionError(path.string() + ": trailing bytes after tensors");

  for (const ParamSpec& s : layout) {
    auto it = found.find(s.name);
    if (it == found.end()) throw FormatError(path.string() + ": missing tensor " + s.name);
    if (it->second.shape() != s.shape) {
      throw FormatError(path.string() + ": tensor " + s.name + " has shape " +
                        shape_string(it->second.shape()) + ", expected " + shape_string(s.shape));
    }
    ck.params.add(s.name, std::move(it->second), s.kind);
    found.erase(it);
  }
  if (!found.empty()) throw FormatError(path.string() + ": unexpected tensor " + found.begin()->first);
  return ck;
}

#define WIFLEX_INSTANTIATE_MODEL(T)                                                           \
  template class ParamSet<T>;                                                                 \
  template class BoundParams<T>;                                                              \
  template ParamSet<T> init_params<T>(const ModelConfig&, std::uint64_t);                     \
  template Var<T> stem2d_forward<T>(const BoundParams<T>&, Var<T>);                           \
  template Var<T> stem1d_forward<T>(const BoundParams<T>&, const ModelConfig&, Var<T>, Mode); \
  template Var<T> encoder_forward<T>(const BoundParams<T>&, const ModelConfig&, Var<T>, Mode); \
  template Var<T> forward<T>(const BoundParams<T>&, const ModelConfig&, Var<T>, Mode);        \
  template Tensor<T> predict<T>(ParamSet<T>&, const ModelConfig&, const Tensor<T>&);

WIFLEX_INSTANTIATE_MODEL(float)
WIFLEX_INSTANTIATE_MODEL(double)

}  // namespace wiflex
