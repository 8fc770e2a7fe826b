#include "poselatent/model.hpp"

#include <cmath>
#include <numbers>

#include "poselatent/errors.hpp"
#include "poselatent/fta.hpp"
#include "poselatent/random.hpp"

namespace poselatent {

std::string to_string(BlockVariant v) {
  switch (v) {
    case BlockVariant::bilinear: return "bilinear";
    case BlockVariant::mlp_concat: return "mlp_concat";
    case BlockVariant::mlp_nocond: return "mlp_nocond";
  }
  return "bilinear";
}

BlockVariant block_variant_from_string(const std::string& s) {
  if (s == "bilinear") return BlockVariant::bilinear;
  if (s == "mlp_concat") return BlockVariant::mlp_concat;
  if (s == "mlp_nocond") return BlockVariant::mlp_nocond;
  throw ValidationError("variant", "unknown block variant '" + s + "' (bilinear, mlp_concat, mlp_nocond)");
}

void ArchConfig::validate() const {
  if (d < 1) throw ValidationError("d", "latent size must be positive");
  if (hsh_dim < 1) throw ValidationError("hsh_dim", "hsh_dim must be positive");
  if (enc_channels.empty()) throw ValidationError("enc_channels", "encoder needs at least one stage");
  if (dec_channels.empty()) throw ValidationError("dec_channels", "decoder needs at least one stage");
  for (int c : enc_channels) {
    if (c < 1) throw ValidationError("enc_channels", "channel counts must be positive");
  }
  for (int c : dec_channels) {
    if (c < 1) throw ValidationError("dec_channels", "channel counts must be positive");
  }
  for (int c : mlp_hidden) {
    if (c < 1) throw ValidationError("mlp_hidden", "widths must be positive");
  }
  if (dec_base_channels < 1) throw ValidationError("dec_base_channels", "must be positive");
  if (image_h < 1 || image_w < 1 || image_h % dec_stride_factor() != 0 || image_w % dec_stride_factor() != 0) {
    throw ValidationError("image", "image size " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                                       " must be a positive multiple of " + std::to_string(dec_stride_factor()));
  }
  if (!(z_ref > 0)) throw ValidationError("z_ref", "z_ref must be positive");
}

nlohmann::json to_json(const ArchConfig& a) {
  return {{"image_h", a.image_h},
          {"image_w", a.image_w},
          {"d", a.d},
          {"hsh_max_n", a.hsh_max_n},
          {"hsh_dim", a.hsh_dim},
          {"enc_channels", a.enc_channels},
          {"dec_base_channels", a.dec_base_channels},
          {"dec_channels", a.dec_channels},
          {"mlp_hidden", a.mlp_hidden},
          {"variant", to_string(a.variant)},
          {"depth_head", a.depth_head},
          {"z_ref", a.z_ref},
          {"object_ids", a.object_ids}};
}

ArchConfig arch_from_json(const nlohmann::json& j) {
  ArchConfig a;
  a.image_h = j.value("image_h", a.image_h);
  a.image_w = j.value("image_w", a.image_w);
  a.d = j.value("d", a.d);
  a.hsh_max_n = j.value("hsh_max_n", a.hsh_max_n);
  a.hsh_dim = j.value("hsh_dim", a.hsh_dim);
  a.enc_channels = j.value("enc_channels", a.enc_channels);
  a.dec_base_channels = j.value("dec_base_channels", a.dec_base_channels);
  a.dec_channels = j.value("dec_channels", a.dec_channels);
  a.mlp_hidden = j.value("mlp_hidden", a.mlp_hidden);
  a.variant = block_variant_from_string(j.value("variant", std::string("bilinear")));
  a.depth_head = j.value("depth_head", a.depth_head);
  a.z_ref = j.value("z_ref", a.z_ref);
  a.object_ids = j.value("object_ids", a.object_ids);
  a.validate();
  return a;
}

template <typename T>
void Network<T>::add(const std::string& name, Shape shape, double stddev, double fill, std::uint64_t seed) {
  std::vector<T> v(shape_numel(shape));
  if (stddev > 0) {
    Rng rng(mix_seed(seed, params_.size()));
    for (auto& x : v) x = static_cast<T>(stddev * rng.normal());
  } else {
    std::fill(v.begin(), v.end(), static_cast<T>(fill));
  }
  params_.emplace_back(name, Tensor<T>::from(std::move(shape), std::move(v), true));
}

template <typename T>
Network<T>::Network(const ArchConfig& arch, std::uint64_t seed) : arch_(arch) {
  arch_.validate();
  const std::size_t d = arch_.d;
  auto he = [](std::size_t fan_in) { return std::sqrt(2.0 / static_cast<double>(fan_in)); };
  auto lecun = [](std::size_t fan_in) { return std::sqrt(1.0 / static_cast<double>(fan_in)); };

  std::size_t c_in = 3;
  for (std::size_t i = 0; i < arch_.enc_channels.size(); ++i) {
    const std::size_t c = arch_.enc_channels[i];
    add("enc.conv" + std::to_string(i) + ".w", {c, c_in, 3, 3}, he(c_in * 9), 0, seed);
    add("enc.conv" + std::to_string(i) + ".b", {c}, 0, 0, seed);
    c_in = c;
  }
  std::size_t eh = arch_.image_h, ew = arch_.image_w;
  for (std::size_t i = 0; i < arch_.enc_channels.size(); ++i) eh = (eh + 1) / 2, ew = (ew + 1) / 2;
  const std::size_t flat = c_in * eh * ew;
  add("enc.fc.w", {flat, 2 * d}, lecun(flat), 0, seed);
  add("enc.fc.b", {2 * d}, 0, 0, seed);

  const std::size_t base = arch_.dec_base_channels;
  const std::size_t h0 = arch_.image_h / arch_.dec_stride_factor(), w0 = arch_.image_w / arch_.dec_stride_factor();
  add("dec.fc.w", {d, base * h0 * w0}, he(d), 0, seed);
  add("dec.fc.b", {base * h0 * w0}, 0, 0, seed);
  c_in = base;
  for (std::size_t i = 0; i < arch_.dec_channels.size(); ++i) {
    const std::size_t c = arch_.dec_channels[i];
    const std::string p = "dec.block" + std::to_string(i);
    add(p + ".conv.w", {c, c_in, 3, 3}, he(c_in * 9), 0, seed);
    add(p + ".adain.w", {d, 2 * c}, 0.5 * lecun(d), 0, seed);
    // (g_s, g_b) start at (1, 0)
    std::vector<T> bias(2 * c, T(0));
    std::fill(bias.begin(), bias.begin() + c, T(1));
    params_.emplace_back(p + ".adain.b", Tensor<T>::from({2 * c}, std::move(bias), true));
    c_in = c;
  }
  add("dec.rgb.w", {3, c_in, 3, 3}, lecun(c_in * 9), 0, seed);
  add("dec.rgb.b", {3}, 0, 0, seed);
  if (arch_.depth_head) {
    add("dec.depth.w", {1, c_in, 3, 3}, lecun(c_in * 9), 0, seed);
    add("dec.depth.b", {1}, 0, 0, seed);
  }

  const std::size_t hd = arch_.hsh_dim;
  // HSH entries have RMS 1/sqrt(2 pi^2) over the sphere.
  add("block.fc_h.w", {hd, d}, std::sqrt(2 * std::numbers::pi * std::numbers::pi / static_cast<double>(hd)), 0, seed);
  add("block.fc_h.b", {d}, 0, 0, seed);
  if (arch_.variant != BlockVariant::mlp_nocond) {
    add("block.fc_c.w", {d, d}, lecun(d), 0, seed);
    add("block.fc_c.b", {d}, 0, 0, seed);
  }
  if (arch_.variant == BlockVariant::bilinear) {
    add("block.w3", {d, d, d}, 1.0 / static_cast<double>(d), 0, seed);
    add("block.ffn.a1.w", {d, 2 * d}, he(d), 0, seed);
    add("block.ffn.a1.b", {2 * d}, 0, 0, seed);
    add("block.ffn.a2.w", {2 * d, d}, 0.5 * lecun(2 * d), 0, seed);
    add("block.ffn.a2.b", {d}, 0, 0, seed);
  } else {
    std::size_t in = arch_.variant == BlockVariant::mlp_concat ? 2 * d : d;
    const std::size_t layers = arch_.mlp_hidden.size() + 1;
    for (std::size_t k = 0; k < layers; ++k) {
      const std::size_t out = k + 1 < layers ? static_cast<std::size_t>(arch_.mlp_hidden[k]) : d;
      add("block.mlp" + std::to_string(k) + ".w", {in, out}, k + 1 < layers ? he(in) : lecun(in), 0, seed);
      add("block.mlp" + std::to_string(k) + ".b", {out}, 0, 0, seed);
      in = out;
    }
  }
}

template <typename T>
std::vector<Tensor<T>> Network<T>::param_tensors() const {
  std::vector<Tensor<T>> out;
  for (const auto& p : params_) out.push_back(p.second);
  return out;
}

template <typename T>
const Tensor<T>& Network<T>::param(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.first == name) return p.second;
  }
  throw ArgumentError("network has no parameter '" + name + "'");
}

template <typename T>
Tensor<T>& Network<T>::param(const std::string& name) {
  for (auto& p : params_) {
    if (p.first == name) return p.second;
  }
  throw ArgumentError("network has no parameter '" + name + "'");
}

template <typename T>
bool Network<T>::has_param(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.first == name) return true;
  }
  return false;
}

template <typename T>
std::size_t Network<T>::param_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.second.numel();
  return n;
}

template <typename T>
void Network<T>::zero_grad() {
  for (auto& p : params_) p.second.zero_grad();
}

template <typename T>
LatentPair<T> Network<T>::encode(const Tensor<T>& images) const {
  if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != static_cast<std::size_t>(arch_.image_h) ||
      images.dim(3) != static_cast<std::size_t>(arch_.image_w)) {
    throw DimensionError("encode: expected [B,3," + std::to_string(arch_.image_h) + "," +
                         std::to_string(arch_.image_w) + "], got " + shape_str(images.shape()));
  }
  Tensor<T> x = images;
  for (std::size_t i = 0; i < arch_.enc_channels.size(); ++i) {
    const std::string p = "enc.conv" + std::to_string(i);
    x = leaky_relu(conv2d(x, param(p + ".w"), 2, param(p + ".b")));
  }
  const std::size_t b = x.dim(0);
  x = reshape(x, {b, x.numel() / b});
  const Tensor<T> z = affine(x, param("enc.fc.w"), param("enc.fc.b"));
  const std::size_t d = arch_.d;
  return {slice_cols(z, 0, d), slice_cols(z, d, 2 * d)};
}

template <typename T>
Reconstruction<T> Network<T>::decode(const Tensor<T>& z_o, const Tensor<T>& z_p) const {
  const std::size_t d = arch_.d;
  if (z_o.rank() != 2 || z_p.rank() != 2 || z_o.dim(1) != d || z_p.dim(1) != d || z_o.dim(0) != z_p.dim(0)) {
    throw DimensionError("decode: expected z_o and z_p of shape [B," + std::to_string(d) + "], got " +
                         shape_str(z_o.shape()) + " and " + shape_str(z_p.shape()));
  }
  const std::size_t b = z_p.dim(0);
  const std::size_t h0 = arch_.image_h / arch_.dec_stride_factor(), w0 = arch_.image_w / arch_.dec_stride_factor();
  Tensor<T> x = leaky_relu(affine(z_p, param("dec.fc.w"), param("dec.fc.b")));
  x = reshape(x, {b, static_cast<std::size_t>(arch_.dec_base_channels), h0, w0});
  for (std::size_t i = 0; i < arch_.dec_channels.size(); ++i) {
    const std::string p = "dec.block" + std::to_string(i);
    const std::size_t c = arch_.dec_channels[i];
    x = conv2d(upsample2x_nearest(x), param(p + ".conv.w"), 1);
    const Tensor<T> g = affine(z_o, param(p + ".adain.w"), param(p + ".adain.b"));
    x = leaky_relu(adain_modulate(x, slice_cols(g, 0, c), slice_cols(g, c, 2 * c)));
  }
  Reconstruction<T> r;
  r.rgb = sigmoid(conv2d(x, param("dec.rgb.w"), 1, param("dec.rgb.b")));
  if (arch_.depth_head) {
    r.depth = scale(softplus(conv2d(x, param("dec.depth.w"), 1, param("dec.depth.b"))), static_cast<T>(arch_.z_ref));
  }
  return r;
}

template <typename T>
Tensor<T> Network<T>::rotation_features(const Tensor<T>& h) const {
  if (h.rank() != 2 || h.dim(1) != static_cast<std::size_t>(arch_.hsh_dim)) {
    throw DimensionError("rotation encoding must be [N," + std::to_string(arch_.hsh_dim) + "], got " +
                         shape_str(h.shape()));
  }
  return affine(h, param("block.fc_h.w"), param("block.fc_h.b"));
}

template <typename T>
Tensor<T> Network<T>::mlp(const Tensor<T>& x) const {
  Tensor<T> y = x;
  const std::size_t layers = arch_.mlp_hidden.size() + 1;
  for (std::size_t k = 0; k < layers; ++k) {
    const std::string p = "block.mlp" + std::to_string(k);
    y = affine(y, param(p + ".w"), param(p + ".b"));
    if (k + 1 < layers) y = leaky_relu(y);
  }
  return y;
}

template <typename T>
Tensor<T> Network<T>::condition_features(const Tensor<T>& c_o, const Tensor<T>& features) const {
  const std::size_t d = arch_.d;
  if (features.rank() != 2 || features.dim(1) != d) {
    throw DimensionError("rotation features must be [N," + std::to_string(d) + "], got " +
                         shape_str(features.shape()));
  }
  if (arch_.variant == BlockVariant::mlp_nocond) return mlp(features);
  if (c_o.rank() != 2 || c_o.dim(1) != d || (c_o.dim(0) != 1 && c_o.dim(0) != features.dim(0))) {
    throw DimensionError("shape code must be [1," + std::to_string(d) + "] or [N," + std::to_string(d) + "], got " +
                         shape_str(c_o.shape()));
  }
  const Tensor<T> a = affine(stop_gradient(c_o), param("block.fc_c.w"), param("block.fc_c.b"));
  if (arch_.variant == BlockVariant::mlp_concat) {
    Tensor<T> rows = a;
    if (a.dim(0) != features.dim(0)) rows = matmul(Tensor<T>::full({features.dim(0), 1}, T(1)), a);
    return mlp(concat_cols(rows, features));
  }
  const Tensor<T> z = bilinear_contract(param("block.w3"), a, features);
  const Tensor<T> hidden = leaky_relu(affine(z, param("block.ffn.a1.w"), param("block.ffn.a1.b")));
  return poselatent::add(z, affine(hidden, param("block.ffn.a2.w"), param("block.ffn.a2.b")));
}

template class Network<float>;
template class Network<double>;

ShapeCodebook ShapeCodebook::init(std::size_t n_objects, std::size_t d, std::uint64_t seed, double decay, double tau) {
  if (n_objects == 0 || d == 0) throw ArgumentError("shape codebook needs objects and d > 0");
  Rng rng(mix_seed(seed, 0xc0de));
  std::vector<float> v(n_objects * d);
  for (std::size_t i = 0; i < n_objects; ++i) {
    double norm = 0;
    std::vector<double> row(d);
    for (auto& x : row) x = rng.normal(), norm += x * x;
    norm = std::sqrt(norm);
    for (std::size_t k = 0; k < d; ++k) v[i * d + k] = static_cast<float>(row[k] / norm);
  }
  ShapeCodebook cb;
  cb.rows = TensorF::from({n_objects, d}, std::move(v));
  cb.decay = decay;
  cb.tau = tau;
  return cb;
}

std::vector<float> ShapeCodebook::row(std::size_t i) const {
  const std::size_t d = rows.dim(1);
  if (i >= size()) throw ArgumentError("shape codebook row " + std::to_string(i) + " out of range");
  return {rows.data().begin() + i * d, rows.data().begin() + (i + 1) * d};
}

template <typename T>
Tensor<T> shape_logits(const Tensor<T>& z_o, const TensorF& codebook, double tau) {
  if (!(tau > 0)) throw ArgumentError("temperature must be positive");
  const std::size_t n = codebook.dim(0), d = codebook.dim(1);
  if (z_o.rank() != 2 || z_o.dim(1) != d) {
    throw DimensionError("shape code " + shape_str(z_o.shape()) + " does not match codebook " +
                         shape_str(codebook.shape()));
  }
  std::vector<T> ct(d * n);
  for (std::size_t i = 0; i < n; ++i) {
    double norm = 0;
    for (std::size_t k = 0; k < d; ++k) norm += static_cast<double>(codebook[i * d + k]) * codebook[i * d + k];
    norm = std::sqrt(norm);
    if (!(norm > kNormGuard)) throw NumericError("shape codebook row " + std::to_string(i) + " has zero norm");
    for (std::size_t k = 0; k < d; ++k) ct[k * n + i] = static_cast<T>(codebook[i * d + k] / norm);
  }
  return scale(matmul(normalize_rows(z_o), Tensor<T>::from({d, n}, std::move(ct))), static_cast<T>(1.0 / tau));
}

template TensorF shape_logits(const TensorF&, const TensorF&, double);
template TensorD shape_logits(const TensorD&, const TensorF&, double);

std::vector<double> shape_probabilities(std::span<const double> z_o, const TensorF& codebook, double tau) {
  NoGradGuard guard;
  const auto z = TensorD::from({1, z_o.size()}, std::vector<double>(z_o.begin(), z_o.end()));
  const auto logits = shape_logits(z, codebook, tau);
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : logits.data()) mx = std::max(mx, v);
  std::vector<double> p(logits.numel());
  double total = 0;
  for (std::size_t i = 0; i < p.size(); ++i) total += p[i] = std::exp(logits[i] - mx);
  for (auto& v : p) v /= total;
  return p;
}

void save_checkpoint(const std::filesystem::path& path, const Network<float>& net, const ShapeCodebook& cb,
                     const nlohmann::json& meta, const AdamState<float>* adam) {
  Archive a;
  a.put_json("arch.json", to_json(net.arch()));
  nlohmann::json m = meta;
  m["format"] = "poselatent-checkpoint/1";
  m["decay"] = cb.decay;
  m["tau"] = cb.tau;
  if (adam) {
    m["adam"] = {{"t", adam->t},
                 {"lr", adam->config.lr},
                 {"beta1", adam->config.beta1},
                 {"beta2", adam->config.beta2},
                 {"eps", adam->config.eps}};
  }
  a.put_json("meta.json", m);
  for (const auto& [name, t] : net.params()) a.put(name, t);
  a.put("C_O", cb.rows);
  if (adam && !adam->m.empty()) {
    const auto& ps = net.params();
    if (adam->m.size() != ps.size()) throw ArgumentError("optimizer state does not match the parameter list");
    for (std::size_t i = 0; i < ps.size(); ++i) {
      if (adam->m[i].empty()) continue;
      a.put("adam.m." + ps[i].first, ps[i].second.shape(), adam->m[i]);
      a.put("adam.v." + ps[i].first, ps[i].second.shape(), adam->v[i]);
    }
  }
  a.save(path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const Archive a = Archive::load(path);
  if (!a.contains("arch.json") || !a.contains("C_O")) {
    throw IoError("'" + path.string() + "' is not a checkpoint (missing arch.json or C_O)");
  }
  Checkpoint ck;
  ck.net = Network<float>(arch_from_json(a.json("arch.json")), 0);
  for (auto& [name, t] : ck.net.params()) {
    if (!a.contains(name)) throw IoError("checkpoint is missing parameter '" + name + "'");
    const auto& e = a.at(name);
    if (e.shape != t.shape()) {
      throw IoError("parameter '" + name + "' has shape " + shape_str(e.shape) + ", expected " + shape_str(t.shape()));
    }
    t = TensorF::from(e.shape, e.values, true);
  }
  ck.meta = a.contains("meta.json") ? a.json("meta.json") : nlohmann::json::object();
  ck.codebook.rows = a.tensor("C_O");
  ck.codebook.decay = ck.meta.value("decay", 0.999);
  ck.codebook.tau = ck.meta.value("tau", 0.07);
  if (ck.meta.contains("adam")) {
    const auto& j = ck.meta["adam"];
    ck.adam.t = j.value("t", std::uint64_t{0});
    ck.adam.config.lr = j.value("lr", ck.adam.config.lr);
    ck.adam.config.beta1 = j.value("beta1", ck.adam.config.beta1);
    ck.adam.config.beta2 = j.value("beta2", ck.adam.config.beta2);
    ck.adam.config.eps = j.value("eps", ck.adam.config.eps);
    const auto& ps = ck.net.params();
    bool any = false;
    for (const auto& p : ps) any = any || a.contains("adam.m." + p.first);
    if (any) {
      ck.adam.m.resize(ps.size());
      ck.adam.v.resize(ps.size());
      for (std::size_t i = 0; i < ps.size(); ++i) {
        if (!a.contains("adam.m." + ps[i].first)) continue;
        ck.adam.m[i] = a.at("adam.m." + ps[i].first).values;
        ck.adam.v[i] = a.at("adam.v." + ps[i].first).values;
      }
    }
  }
  return ck;
}

}  // namespace poselatent
