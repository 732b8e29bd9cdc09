#include "tempose/model.hpp"

#include <fmt/format.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "binary_io.hpp"

namespace tempose::model {

namespace {

std::string layer_name(int layer, const char* suffix) { return fmt::format("decoder.layer{}.{}", layer, suffix); }

Tensor uniform_weight(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<Scalar> v(fan_in * fan_out);
  for (auto& x : v) x = static_cast<Scalar>(dist(rng));
  return Tensor({fan_in, fan_out}, std::move(v), true);
}

Tensor linear(const Tensor& x, const ParamStore& p, const std::string& prefix) {
  return ad::add(ad::matmul(x, p.get(prefix + ".w")), p.get(prefix + ".b"));
}

}  // namespace

FeatureSeq FeatureSeq::make(Tensor values, FeatureKind kind) {
  if (values.rank() != 4) {
    throw ShapeError("feature sequence must be [b,t,n,d], got " + ad::shape_str(values.shape()));
  }
  return {std::move(values), kind};
}

// -- config ------------------------------------------------------------------

void DecoderConfig::validate() const {
  if (d_model <= 0 || n_heads <= 0 || n_layers <= 0 || mlp_multiple <= 0 || max_context <= 0) {
    throw ConfigError("decoder sizes must all be positive");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError(fmt::format("d_model {} is not divisible by n_heads {}", d_model, n_heads));
  }
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError(fmt::format("dropout {} outside [0,1)", dropout));
  if (attention_window < 0) throw ConfigError("attention_window must be >= 0");
}

nlohmann::ordered_json DecoderConfig::to_json() const {
  nlohmann::ordered_json j;
  j["d_model"] = d_model;
  j["n_heads"] = n_heads;
  j["n_layers"] = n_layers;
  j["mlp_multiple"] = mlp_multiple;
  j["max_context"] = max_context;
  j["dropout"] = dropout;
  j["attention_window"] = attention_window;
  return j;
}

DecoderConfig DecoderConfig::from_json(const nlohmann::json& j) {
  DecoderConfig c;
  c.d_model = j.at("d_model").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.mlp_multiple = j.at("mlp_multiple").get<int>();
  c.max_context = j.at("max_context").get<int>();
  c.dropout = j.at("dropout").get<double>();
  c.attention_window = j.value("attention_window", 0);
  c.validate();
  return c;
}

// -- parameters ----------------------------------------------------------------

Tensor& ParamStore::add(const std::string& name, Tensor value) {
  if (contains(name)) throw Error("duplicate parameter " + name);
  index_[name] = entries_.size();
  entries_.emplace_back(name, std::move(value));
  return entries_.back().second;
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error("unknown parameter " + name);
  return entries_[it->second].second;
}

Tensor& ParamStore::get(const std::string& name) {
  return const_cast<Tensor&>(static_cast<const ParamStore&>(*this).get(name));
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : entries_) n += t.size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [_, t] : entries_) t.zero_grad();
}

ParamStore ParamStore::clone() const {
  ParamStore out;
  for (const auto& [name, t] : entries_) {
    Tensor copy = t.detach();
    copy.set_requires_grad(t.requires_grad());
    out.add(name, std::move(copy));
  }
  return out;
}

ParamStore init_params(const DecoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto hidden = d * static_cast<std::size_t>(cfg.mlp_multiple);
  auto zeros = [](std::size_t n) { return Tensor::zeros({n}, true); };
  auto ones = [](std::size_t n) { return Tensor::full({n}, Scalar(1), true); };

  ParamStore p;
  p.add("decoder.pos_emb", Tensor::zeros({static_cast<std::size_t>(cfg.max_context), d}, true));
  for (int l = 0; l < cfg.n_layers; ++l) {
    p.add(layer_name(l, "ln1.gamma"), ones(d));
    p.add(layer_name(l, "ln1.beta"), zeros(d));
    for (const char* proj : {"attn.q", "attn.k", "attn.v", "attn.o"}) {
      p.add(layer_name(l, proj) + ".w", uniform_weight(d, d, rng));
      p.add(layer_name(l, proj) + ".b", zeros(d));
    }
    p.add(layer_name(l, "ln2.gamma"), ones(d));
    p.add(layer_name(l, "ln2.beta"), zeros(d));
    p.add(layer_name(l, "mlp.fc1.w"), uniform_weight(d, hidden, rng));
    p.add(layer_name(l, "mlp.fc1.b"), zeros(hidden));
    p.add(layer_name(l, "mlp.fc2.w"), uniform_weight(hidden, d, rng));
    p.add(layer_name(l, "mlp.fc2.b"), zeros(d));
  }
  p.add("decoder.ln_f.gamma", ones(d));
  p.add("decoder.ln_f.beta", zeros(d));

  p.add("pose_head.shared.w", uniform_weight(d, d, rng));
  p.add("pose_head.shared.b", zeros(d));
  p.add("pose_head.rotation.w", uniform_weight(d, 3, rng));
  p.add("pose_head.rotation.b", zeros(3));
  p.add("pose_head.center.w", uniform_weight(d, 2, rng));
  p.add("pose_head.center.b", zeros(2));
  p.add("pose_head.depth.w", uniform_weight(d, 1, rng));
  p.add("pose_head.depth.b", zeros(1));

  p.add("future_head.fc1.w", uniform_weight(d, d, rng));
  p.add("future_head.fc1.b", zeros(d));
  p.add("future_head.fc2.w", uniform_weight(d, d, rng));
  p.add("future_head.fc2.b", zeros(d));
  return p;
}

// -- attention mask ------------------------------------------------------------

AttentionMask::AttentionMask(std::size_t frames, std::size_t objects_per_frame, int window)
    : frames_(frames), objects_(objects_per_frame) {
  if (frames == 0 || objects_per_frame == 0) throw ShapeError("attention mask needs t >= 1 and n >= 1");
  const std::size_t n = tokens();
  blocked_.assign(n * n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t fi = i / objects_;
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t fj = j / objects_;
      const bool visible = fj <= fi && (window <= 0 || fi - fj < static_cast<std::size_t>(window));
      blocked_[i * n + j] = visible ? 0 : 1;
    }
  }
}

bool AttentionMask::open(std::size_t query_token, std::size_t key_token) const {
  return blocked_.at(query_token * tokens() + key_token) == 0;
}

AttentionMask causal_mask(std::size_t frames, std::size_t objects_per_frame, int window) {
  return AttentionMask(frames, objects_per_frame, window);
}

// -- decoder ---------------------------------------------------------------------

FeatureSeq decode(const FeatureSeq& features, const DecoderConfig& cfg, const ParamStore& params,
                  const RunOptions& opts) {
  cfg.validate();
  const Tensor& in = features.values;
  if (in.rank() != 4) throw ShapeError("decode: expected [b,t,n,d], got " + ad::shape_str(in.shape()));
  const std::size_t B = in.dim(0), T = in.dim(1), n = in.dim(2), D = in.dim(3);
  if (D != static_cast<std::size_t>(cfg.d_model)) {
    throw ShapeError(fmt::format("decode: feature dim {} does not match d_model {}", D, cfg.d_model));
  }
  if (T > static_cast<std::size_t>(cfg.max_context)) {
    throw ContextOverflowError(
        fmt::format("decode: {} frames exceed the maximum context of {}", T, cfg.max_context));
  }
  const std::size_t L = T * n;
  const std::size_t H = static_cast<std::size_t>(cfg.n_heads);
  const std::size_t hd = D / H;
  const Scalar attn_scale = Scalar(1) / std::sqrt(static_cast<Scalar>(hd));
  const bool drop = opts.training && cfg.dropout > 0.0;
  if (drop && opts.rng == nullptr) throw Error("decode: dropout in training mode needs an rng");
  auto maybe_drop = [&](const Tensor& t) {
    return drop ? ad::dropout(t, static_cast<Scalar>(cfg.dropout), *opts.rng) : t;
  };

  // One-hot expansion of frame positions onto object tokens.
  std::vector<Scalar> expand(B * L * T, Scalar(0));
  for (std::size_t row = 0; row < B * L; ++row) expand[row * T + (row % L) / n] = Scalar(1);
  const Tensor pos = ad::slice(params.get("decoder.pos_emb"), 0, 0, T);
  Tensor x = ad::add(ad::reshape(in, {B * L, D}), ad::matmul(Tensor({B * L, T}, std::move(expand)), pos));

  const AttentionMask mask(T, n, cfg.attention_window);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const Tensor h = ad::layer_norm(x, params.get(layer_name(l, "ln1.gamma")), params.get(layer_name(l, "ln1.beta")));
    const Tensor q = linear(h, params, layer_name(l, "attn.q"));
    const Tensor k = linear(h, params, layer_name(l, "attn.k"));
    const Tensor v = linear(h, params, layer_name(l, "attn.v"));
    std::vector<Tensor> samples;
    samples.reserve(B);
    for (std::size_t b = 0; b < B; ++b) {
      const Tensor qb = B == 1 ? q : ad::slice(q, 0, b * L, (b + 1) * L);
      const Tensor kb = B == 1 ? k : ad::slice(k, 0, b * L, (b + 1) * L);
      const Tensor vb = B == 1 ? v : ad::slice(v, 0, b * L, (b + 1) * L);
      std::vector<Tensor> heads;
      heads.reserve(H);
      for (std::size_t hh = 0; hh < H; ++hh) {
        const Tensor qh = H == 1 ? qb : ad::slice(qb, 1, hh * hd, (hh + 1) * hd);
        const Tensor kh = H == 1 ? kb : ad::slice(kb, 1, hh * hd, (hh + 1) * hd);
        const Tensor vh = H == 1 ? vb : ad::slice(vb, 1, hh * hd, (hh + 1) * hd);
        const Tensor scores = ad::scale(ad::matmul(qh, ad::transpose(kh)), attn_scale);
        const Tensor weights = ad::softmax(ad::masked_fill(scores, mask.blocked()));
        heads.push_back(ad::matmul(weights, vh));
      }
      samples.push_back(H == 1 ? heads.front() : ad::concat(heads, 1));
    }
    const Tensor attended = B == 1 ? samples.front() : ad::concat(samples, 0);
    x = ad::add(x, maybe_drop(linear(attended, params, layer_name(l, "attn.o"))));

    const Tensor h2 = ad::layer_norm(x, params.get(layer_name(l, "ln2.gamma")), params.get(layer_name(l, "ln2.beta")));
    const Tensor mlp = linear(ad::gelu(linear(h2, params, layer_name(l, "mlp.fc1"))), params, layer_name(l, "mlp.fc2"));
    x = ad::add(x, maybe_drop(mlp));
  }
  x = ad::layer_norm(x, params.get("decoder.ln_f.gamma"), params.get("decoder.ln_f.beta"));
  return FeatureSeq::make(ad::reshape(x, {B, T, n, D}), FeatureKind::decoded);
}

PoseHeadOutput pose_head(const Tensor& z, const ParamStore& params) {
  const std::size_t d = params.get("pose_head.shared.w").dim(0);
  if (z.rank() != 2 || z.dim(1) != d) {
    throw ShapeError(fmt::format("pose_head: expected [N,{}], got {}", d, ad::shape_str(z.shape())));
  }
  const Tensor h = ad::gelu(linear(z, params, "pose_head.shared"));
  PoseHeadOutput out;
  out.quat_xyz = linear(h, params, "pose_head.rotation");
  out.delta_c = linear(h, params, "pose_head.center");
  out.t_z = ad::exp(linear(h, params, "pose_head.depth"));
  return out;
}

FeatureSeq future_head(const FeatureSeq& z_tilde, const ParamStore& params) {
  const Tensor& v = z_tilde.values;
  const std::size_t d = params.get("future_head.fc1.w").dim(0);
  if (v.rank() != 4 || v.dim(3) != d) {
    throw ShapeError(fmt::format("future_head: expected [b,t,n,{}], got {}", d, ad::shape_str(v.shape())));
  }
  const Tensor flat = ad::reshape(v, {v.size() / d, d});
  const Tensor out = linear(ad::gelu(linear(flat, params, "future_head.fc1")), params, "future_head.fc2");
  return FeatureSeq::make(ad::reshape(out, v.shape()), FeatureKind::predicted);
}

Tensor complete_quaternions(const Tensor& quat_xyz) {
  if (quat_xyz.rank() != 2 || quat_xyz.dim(1) != 3) {
    throw ShapeError("complete_quaternions: expected [N,3], got " + ad::shape_str(quat_xyz.shape()));
  }
  const Tensor w = ad::add_scalar(ad::neg(ad::sqrt(ad::sum_last(ad::power(quat_xyz, 2)))), Scalar(1));
  return ad::concat({w, quat_xyz}, 1);
}

Tensor recover_translations(const Tensor& delta_c, const Tensor& t_z, std::span<const ObjectView> views) {
  const std::size_t n = views.size();
  if (delta_c.shape() != ad::Shape{n, 2} || t_z.shape() != ad::Shape{n, 1}) {
    throw ShapeError(fmt::format("recover_translations: {} views vs delta_c {} and t_z {}", n,
                                 ad::shape_str(delta_c.shape()), ad::shape_str(t_z.shape())));
  }
  std::vector<Scalar> cx(n), cy(n), px(n), py(n), fx(n), fy(n);
  for (std::size_t i = 0; i < n; ++i) {
    views[i].intrinsics.validate();
    cx[i] = static_cast<Scalar>(views[i].bbox_center.x());
    cy[i] = static_cast<Scalar>(views[i].bbox_center.y());
    px[i] = static_cast<Scalar>(views[i].intrinsics.px);
    py[i] = static_cast<Scalar>(views[i].intrinsics.py);
    fx[i] = static_cast<Scalar>(views[i].intrinsics.fx);
    fy[i] = static_cast<Scalar>(views[i].intrinsics.fy);
  }
  auto col = [n](std::vector<Scalar>& v) { return Tensor({n, 1}, std::move(v)); };
  // T_x = (c_x + dc_x - p_x) * T_z / f_x, likewise for y.
  const Tensor tx = ad::div(ad::mul(ad::sub(ad::add(col(cx), ad::slice(delta_c, 1, 0, 1)), col(px)), t_z), col(fx));
  const Tensor ty = ad::div(ad::mul(ad::sub(ad::add(col(cy), ad::slice(delta_c, 1, 1, 2)), col(py)), t_z), col(fy));
  return ad::concat({tx, ty, t_z}, 1);
}

ForwardOutput forward(const FeatureSeq& features, std::span<const ObjectView> views,
                      const DecoderConfig& cfg, const ParamStore& params, const RunOptions& opts) {
  ForwardOutput out;
  out.z_tilde = decode(features, cfg, params, opts);
  const std::size_t d = out.z_tilde.dim();
  const std::size_t rows = out.z_tilde.values.size() / d;
  if (views.size() != rows) {
    throw ShapeError(fmt::format("forward: {} object views for {} object tokens", views.size(), rows));
  }
  out.head = pose_head(ad::reshape(out.z_tilde.values, {rows, d}), params);
  out.z_hat = future_head(out.z_tilde, params);
  out.quaternion = complete_quaternions(out.head.quat_xyz);
  out.translation = recover_translations(out.head.delta_c, out.head.t_z, views);
  return out;
}

geom::Pose pose_at(const ForwardOutput& out, std::size_t row) {
  const auto q = out.quaternion.data();
  const auto t = out.translation.data();
  geom::Pose p;
  p.rotation = {q[row * 4], q[row * 4 + 1], q[row * 4 + 2], q[row * 4 + 3]};
  p.translation = {t[row * 3], t[row * 3 + 1], t[row * 3 + 2]};
  return p;
}

// -- checkpoints ------------------------------------------------------------------

namespace {
constexpr std::uint32_t kCheckpointVersion = 1;
constexpr const char* kParamPrefix = "param/";
}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

std::string serialize_checkpoint(const Checkpoint& ck) {
  std::ostringstream out(std::ios::binary);
  io::write_magic(out, "VPCK");
  io::write_le<std::uint32_t>(out, kCheckpointVersion);
  nlohmann::ordered_json header;
  header["decoder"] = ck.config.to_json();
  header["meta"] = ck.meta;
  const std::string blob = header.dump();
  io::write_le<std::uint64_t>(out, blob.size());
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& [name, t] : ck.tensors) {
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    ad::write_tnsr(out, t);
  }
  return out.str();
}

Checkpoint parse_checkpoint(const std::string& bytes) {
  std::istringstream in(bytes, std::ios::binary);
  io::expect_magic(in, "VPCK");
  const auto version = io::read_le<std::uint32_t>(in);
  if (version != kCheckpointVersion) {
    throw VersionError(fmt::format("unsupported checkpoint version {}", version));
  }
  const auto blob_len = io::read_le<std::uint64_t>(in);
  if (blob_len > bytes.size()) throw IoError("checkpoint header length exceeds file size");
  std::string blob(blob_len, '\0');
  in.read(blob.data(), static_cast<std::streamsize>(blob_len));
  if (!in) throw IoError("truncated checkpoint header");
  Checkpoint ck;
  try {
    const auto header = nlohmann::ordered_json::parse(blob);
    ck.config = DecoderConfig::from_json(header.at("decoder"));
    ck.meta = header.value("meta", nlohmann::ordered_json::object());
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed checkpoint header: ") + e.what());
  }
  const auto count = io::read_le<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = io::read_le<std::uint32_t>(in);
    if (len > bytes.size()) throw IoError("checkpoint tensor name too long");
    std::string name(len, '\0');
    in.read(name.data(), len);
    if (!in) throw IoError("truncated checkpoint tensor name");
    ck.tensors.emplace_back(std::move(name), ad::read_tnsr(in));
  }
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const std::string bytes = serialize_checkpoint(ck);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing checkpoint " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_checkpoint(ss.str());
}

Checkpoint make_checkpoint(const DecoderConfig& cfg, const ParamStore& params) {
  Checkpoint ck;
  ck.config = cfg;
  for (const auto& [name, t] : params) ck.tensors.emplace_back(kParamPrefix + name, t.detach());
  return ck;
}

ParamStore params_from_checkpoint(const Checkpoint& ck) {
  ParamStore reference = init_params(ck.config, 0);
  ParamStore out;
  for (const auto& [name, ref] : reference) {
    const Tensor* t = ck.find(kParamPrefix + name);
    if (t == nullptr) throw IoError("checkpoint is missing parameter " + name);
    if (t->shape() != ref.shape()) {
      throw ShapeError(fmt::format("checkpoint parameter {} has shape {}, expected {}", name,
                                   ad::shape_str(t->shape()), ad::shape_str(ref.shape())));
    }
    Tensor copy = t->detach();
    copy.set_requires_grad(true);
    out.add(name, std::move(copy));
  }
  return out;
}

}  // namespace tempose::model
