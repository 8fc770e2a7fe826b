#include "poselatent/training.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "poselatent/errors.hpp"
#include "poselatent/hsh.hpp"

namespace poselatent {

namespace {

void require_positive(double v, const char* field) {
  if (!(v > 0) || !std::isfinite(v)) throw ValidationError(field, std::string(field) + " must be positive");
}

void require_channels(const std::vector<int>& v, const char* field) {
  if (v.empty()) throw ValidationError(field, std::string(field) + " must not be empty");
  for (int c : v) {
    if (c < 1) throw ValidationError(field, std::string(field) + " entries must be positive");
  }
}

template <typename T>
Tensor<T> gather_rows(const TensorF& table, std::span<const std::size_t> ids) {
  const std::size_t d = table.dim(1);
  std::vector<T> v(ids.size() * d);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    for (std::size_t k = 0; k < d; ++k) v[r * d + k] = static_cast<T>(table[ids[r] * d + k]);
  }
  return Tensor<T>::from({ids.size(), d}, std::move(v));
}

void check_ids(std::span<const std::size_t> ids, std::size_t n) {
  for (auto id : ids) {
    if (id >= n) throw ArgumentError("object id " + std::to_string(id) + " out of range for " + std::to_string(n) + " objects");
  }
}

}  // namespace

void TrainConfig::validate() const {
  require_positive(lambda1, "lambda1");
  require_positive(lambda2, "lambda2");
  require_positive(tau, "tau");
  require_positive(lr, "lr");
  if (!(decay > 0 && decay < 1)) throw ValidationError("decay", "decay must lie in (0, 1)");
  if (batch < 1) throw ValidationError("batch", "batch must be positive");
  if (iters < 1) throw ValidationError("iters", "iters must be positive");
  if (d < 1) throw ValidationError("d", "d must be positive");
  if (log_every < 1) throw ValidationError("log_every", "log_every must be positive");
  if (checkpoint_every < 1) throw ValidationError("checkpoint_every", "checkpoint_every must be positive");
  require_channels(enc_channels, "enc_channels");
  require_channels(dec_channels, "dec_channels");
  require_channels(mlp_hidden, "mlp_hidden");
}

ArchConfig TrainConfig::arch(const Dataset& ds) const {
  ArchConfig a;
  a.image_h = ds.camera.height;
  a.image_w = ds.camera.width;
  a.d = d;
  a.enc_channels = enc_channels;
  a.dec_channels = dec_channels;
  a.mlp_hidden = mlp_hidden;
  a.variant = variant;
  a.depth_head = depth_head;
  a.z_ref = ds.camera.z_ref;
  for (const auto& o : ds.objects) a.object_ids.push_back(o.id);
  a.validate();
  return a;
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"lambda1", c.lambda1},
          {"lambda2", c.lambda2},
          {"tau", c.tau},
          {"decay", c.decay},
          {"lr", c.lr},
          {"batch", c.batch},
          {"iters", c.iters},
          {"d", c.d},
          {"seed", c.seed},
          {"variant", to_string(c.variant)},
          {"shape_space", c.shape_space},
          {"depth_head", c.depth_head},
          {"augment", c.augment},
          {"log_every", c.log_every},
          {"checkpoint_every", c.checkpoint_every},
          {"enc_channels", c.enc_channels},
          {"dec_channels", c.dec_channels},
          {"mlp_hidden", c.mlp_hidden}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("$", "training config must be a JSON object");
  TrainConfig c;
  const nlohmann::json defaults = to_json(c);
  for (const auto& [key, value] : j.items()) {
    if (!defaults.contains(key)) throw ValidationError(key, "unknown training config key '" + key + "'");
    const auto& ref = defaults[key];
    const bool ok = (ref.is_number_float() && value.is_number()) ||
                    (ref.is_number_integer() && value.is_number_integer()) ||
                    (ref.is_number_unsigned() && value.is_number_unsigned()) ||
                    (ref.is_boolean() && value.is_boolean()) || (ref.is_string() && value.is_string()) ||
                    (ref.is_array() && value.is_array());
    if (!ok) throw ValidationError(key, "'" + key + "' has the wrong type (expected " + ref.type_name() + ")");
  }
  auto get = [&](const char* key, auto& dst) {
    if (j.contains(key)) dst = j[key].get<std::decay_t<decltype(dst)>>();
  };
  get("lambda1", c.lambda1);
  get("lambda2", c.lambda2);
  get("tau", c.tau);
  get("decay", c.decay);
  get("lr", c.lr);
  get("batch", c.batch);
  get("iters", c.iters);
  get("d", c.d);
  get("seed", c.seed);
  if (j.contains("variant")) c.variant = block_variant_from_string(j["variant"].get<std::string>());
  get("shape_space", c.shape_space);
  get("depth_head", c.depth_head);
  get("augment", c.augment);
  get("log_every", c.log_every);
  get("checkpoint_every", c.checkpoint_every);
  try {
    get("enc_channels", c.enc_channels);
    get("dec_channels", c.dec_channels);
    get("mlp_hidden", c.mlp_hidden);
  } catch (const nlohmann::json::exception&) {
    throw ValidationError("channels", "channel lists must contain integers");
  }
  c.validate();
  return c;
}

template <typename T>
Tensor<T> loss_recon(const Tensor<T>& rgb_hat, const Tensor<T>& depth_hat, const Tensor<T>& rgb_gt,
                     const Tensor<T>& depth_gt, double z_ref) {
  if (rgb_hat.shape() != rgb_gt.shape()) {
    throw DimensionError("loss_recon: rgb " + shape_str(rgb_hat.shape()) + " vs target " + shape_str(rgb_gt.shape()));
  }
  Tensor<T> loss = mse(rgb_hat, rgb_gt);
  if (depth_hat.defined()) {
    if (!depth_gt.defined() || depth_hat.shape() != depth_gt.shape()) {
      throw DimensionError("loss_recon: depth prediction and target shapes differ");
    }
    const T s = static_cast<T>(1.0 / z_ref);
    loss = add(loss, mse(scale(depth_hat, s), scale(depth_gt, s)));
  }
  return loss;
}

template <typename T>
Tensor<T> loss_shape(const Tensor<T>& z_o, std::span<const std::size_t> ids, const TensorF& codebook, double tau) {
  if (ids.size() != z_o.dim(0)) throw DimensionError("loss_shape: one id per row required");
  check_ids(ids, codebook.dim(0));
  return cross_entropy(shape_logits(z_o, codebook, tau), ids);
}

template <typename T>
Tensor<T> loss_pose(const Tensor<T>& z_op, const Tensor<T>& z_p) {
  if (z_op.shape() != z_p.shape()) {
    throw DimensionError("loss_pose: " + shape_str(z_op.shape()) + " vs " + shape_str(z_p.shape()));
  }
  return scale(mean(row_dot(normalize_rows(z_op), normalize_rows(z_p))), T(-1));
}

template <typename T>
Tensor<T> total_loss(const Tensor<T>& recon, const Tensor<T>& shape, const Tensor<T>& pose, double lambda1,
                     double lambda2) {
  return add(recon, add(scale(shape, static_cast<T>(lambda1)), scale(pose, static_cast<T>(lambda2))));
}

void ema_update(ShapeCodebook& cb, std::span<const float> z_o, std::span<const std::size_t> ids, double decay) {
  if (!(decay > 0 && decay < 1)) throw ArgumentError("EMA decay must lie in (0, 1)");
  const std::size_t n = cb.size(), d = cb.rows.dim(1);
  if (z_o.size() != ids.size() * d) throw DimensionError("ema_update: z_o must hold one row per id");
  check_ids(ids, n);
  auto rows = cb.rows.mutable_data();
  for (std::size_t r = 0; r < ids.size(); ++r) {
    float* row = rows.data() + ids[r] * d;
    for (std::size_t k = 0; k < d; ++k) {
      row[k] = static_cast<float>(decay * row[k] + (1 - decay) * z_o[r * d + k]);
    }
  }
}

template <typename T>
BatchLosses<T> batch_losses(const Network<T>& net, const ShapeCodebook& cb, const TrainConfig& cfg,
                            const Tensor<T>& input, const Tensor<T>& rgb_gt, const Tensor<T>& depth_gt,
                            const Tensor<T>& hsh, std::span<const std::size_t> ids) {
  BatchLosses<T> out;
  const auto lat = net.encode(input);
  const auto rec = net.decode(lat.z_o, lat.z_p);
  out.z_o = lat.z_o;
  out.recon = loss_recon(rec.rgb, rec.depth, rgb_gt, depth_gt, net.arch().z_ref);
  Tensor<T> c_o;
  if (cfg.shape_space) {
    out.shape = loss_shape(lat.z_o, ids, cb.rows, cb.tau);
    c_o = normalize_rows(gather_rows<T>(cb.rows, ids));
  } else {
    out.shape = Tensor<T>::scalar(T(0));
    c_o = normalize_rows(lat.z_o);
  }
  out.pose = loss_pose(net.condition_pose(c_o, hsh), lat.z_p);
  out.total = total_loss(out.recon, out.shape, out.pose, cfg.lambda1, cfg.lambda2);
  return out;
}

#define POSELATENT_TRAIN_INSTANTIATE(T)                                                                          \
  template Tensor<T> loss_recon(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double); \
  template Tensor<T> loss_shape(const Tensor<T>&, std::span<const std::size_t>, const TensorF&, double);          \
  template Tensor<T> loss_pose(const Tensor<T>&, const Tensor<T>&);                                             \
  template Tensor<T> total_loss(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double, double);          \
  template BatchLosses<T> batch_losses(const Network<T>&, const ShapeCodebook&, const TrainConfig&,             \
                                       const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,  \
                                       std::span<const std::size_t>);

POSELATENT_TRAIN_INSTANTIATE(float)
POSELATENT_TRAIN_INSTANTIATE(double)

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossLogEntry>& log) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write loss log '" + path.string() + "'");
  out << "iter,recon,shape,pose,total\n";
  out.precision(9);
  for (const auto& e : log) out << e.iter << ',' << e.recon << ',' << e.shape << ',' << e.pose << ',' << e.total << '\n';
}

TrainResult train(const Dataset& ds, const TrainConfig& cfg, const TrainOptions& opts) {
  cfg.validate();
  const auto train_idx = ds.indices(Split::train);
  if (train_idx.empty()) throw ArgumentError("dataset has no training samples");
  if (opts.out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(*opts.out_dir, ec);
    if (ec) throw IoError("cannot create output directory '" + opts.out_dir->string() + "'");
  }

  const ArchConfig arch = cfg.arch(ds);
  TrainResult res;
  res.net = Network<float>(arch, mix_seed(cfg.seed, 1));
  res.codebook = ShapeCodebook::init(ds.objects.size(), static_cast<std::size_t>(cfg.d), cfg.seed, cfg.decay, cfg.tau);
  res.adam.config.lr = cfg.lr;

  const HshConfig hcfg{arch.hsh_max_n, arch.hsh_dim};
  const std::vector<float> hsh_table = encode_rotations(ds.rotations, hcfg);
  const std::size_t hd = static_cast<std::size_t>(arch.hsh_dim);

  const int H = ds.camera.height, W = ds.camera.width;
  const std::size_t P = ds.camera.pixels(), B = static_cast<std::size_t>(cfg.batch);
  Rng rng(mix_seed(cfg.seed, 2));
  auto params = res.net.param_tensors();

  LossLogEntry window;
  int window_n = 0;
  auto meta = [&](int iter) {
    std::ostringstream rs;
    rs << rng.engine();
    return nlohmann::json{{"config", to_json(cfg)}, {"iteration", iter}, {"rng", rs.str()}};
  };

  std::vector<float> input(B * 3 * P), rgb(B * 3 * P), depth(B * P), hsh(B * hd);
  std::vector<std::size_t> ids(B);
  for (int it = 1; it <= cfg.iters; ++it) {
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t n = train_idx[rng.below(train_idx.size())];
      ids[b] = static_cast<std::size_t>(ds.object[n]);
      const std::vector<float> src(ds.rgb.begin() + n * 3 * P, ds.rgb.begin() + (n + 1) * 3 * P);
      const std::vector<float> dsrc(ds.depth.begin() + n * P, ds.depth.begin() + (n + 1) * P);
      std::copy(src.begin(), src.end(), rgb.begin() + b * 3 * P);
      std::copy(dsrc.begin(), dsrc.end(), depth.begin() + b * P);
      if (cfg.augment) {
        Rng arng(mix_seed(ds.seed[n], static_cast<std::uint64_t>(it)));
        const auto aug = augment(src, dsrc, H, W, arng);
        std::copy(aug.begin(), aug.end(), input.begin() + b * 3 * P);
      } else {
        std::copy(src.begin(), src.end(), input.begin() + b * 3 * P);
      }
      const std::size_t r = ds.rotation_index[n];
      std::copy(hsh_table.begin() + r * hd, hsh_table.begin() + (r + 1) * hd, hsh.begin() + b * hd);
    }
    const auto hw = Shape{B, 3, static_cast<std::size_t>(H), static_cast<std::size_t>(W)};
    const auto x = TensorF::from(hw, input);
    const auto gt = TensorF::from(hw, rgb);
    const auto gd = TensorF::from({B, 1, static_cast<std::size_t>(H), static_cast<std::size_t>(W)}, depth);
    const auto h = TensorF::from({B, hd}, hsh);

    res.net.zero_grad();
    const auto losses = batch_losses(res.net, res.codebook, cfg, x, gt, arch.depth_head ? gd : TensorF{}, h, ids);
    const double lr_ = losses.recon.item(), ls = losses.shape.item(), lp = losses.pose.item(),
                 lt = losses.total.item();
    if (!std::isfinite(lt) || !std::isfinite(lr_) || !std::isfinite(ls) || !std::isfinite(lp)) {
      std::ostringstream msg;
      msg << "non-finite loss at iteration " << it << ": recon=" << lr_ << " shape=" << ls << " pose=" << lp;
      throw NumericError(msg.str());
    }
    losses.total.backward();
    adam_step<float>(params, res.adam);
    ema_update(res.codebook, losses.z_o.data(), ids, cfg.decay);

    window.recon += lr_, window.shape += ls, window.pose += lp, window.total += lt;
    ++window_n;
    if (it % cfg.log_every == 0 || it == cfg.iters) {
      LossLogEntry e{it, window.recon / window_n, window.shape / window_n, window.pose / window_n,
                     window.total / window_n};
      res.log.push_back(e);
      if (opts.on_log) opts.on_log(e);
      window = {};
      window_n = 0;
    }
    if (opts.out_dir && it % cfg.checkpoint_every == 0 && it != cfg.iters) {
      char name[40];
      std::snprintf(name, sizeof(name), "checkpoint_%06d.fta", it);
      save_checkpoint(*opts.out_dir / name, res.net, res.codebook, meta(it), &res.adam);
    }
  }
  res.iterations = cfg.iters;
  if (opts.out_dir) {
    save_checkpoint(*opts.out_dir / "final.fta", res.net, res.codebook, meta(cfg.iters), &res.adam);
    write_loss_csv(*opts.out_dir / "loss.csv", res.log);
  }
  res.net.zero_grad();
  return res;
}

}  // namespace poselatent
