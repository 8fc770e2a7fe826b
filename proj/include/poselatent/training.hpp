#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "poselatent/model.hpp"
#include "poselatent/synthscene.hpp"

namespace poselatent {

struct TrainConfig {
  double lambda1 = 0.004;
  double lambda2 = 0.002;
  double tau = 0.07;
  double decay = 0.999;
  double lr = 0.0002;
  int batch = 32;
  int iters = 3000;
  int d = 64;
  std::uint64_t seed = 0;
  BlockVariant variant = BlockVariant::bilinear;
  // Off: L_shape is dropped and the live z_o conditions the block.
  bool shape_space = true;
  bool depth_head = true;
  bool augment = true;
  int log_every = 50;
  int checkpoint_every = 500;
  std::vector<int> enc_channels{32, 64, 128, 256};
  std::vector<int> dec_channels{128, 64, 32, 16};
  std::vector<int> mlp_hidden{1024, 1024, 1024};

  // Throws ValidationError naming the offending field.
  void validate() const;
  ArchConfig arch(const Dataset& ds) const;
};

nlohmann::json to_json(const TrainConfig& c);
// Rejects unknown keys and wrongly typed or out-of-range values.
TrainConfig train_config_from_json(const nlohmann::json& j);

template <typename T>
Tensor<T> loss_recon(const Tensor<T>& rgb_hat, const Tensor<T>& depth_hat, const Tensor<T>& rgb_gt,
                     const Tensor<T>& depth_gt, double z_ref);
template <typename T>
Tensor<T> loss_shape(const Tensor<T>& z_o, std::span<const std::size_t> ids, const TensorF& codebook, double tau);
template <typename T>
Tensor<T> loss_pose(const Tensor<T>& z_op, const Tensor<T>& z_p);
template <typename T>
Tensor<T> total_loss(const Tensor<T>& recon, const Tensor<T>& shape, const Tensor<T>& pose, double lambda1,
                     double lambda2);

// row[id] <- d_s row[id] + (1 - d_s) z for each batch row, in batch order.
void ema_update(ShapeCodebook& cb, std::span<const float> z_o, std::span<const std::size_t> ids, double decay);

struct LossLogEntry {
  int iter = 0;
  double recon = 0, shape = 0, pose = 0, total = 0;
};

struct TrainResult {
  Network<float> net;
  ShapeCodebook codebook;
  AdamState<float> adam;
  std::vector<LossLogEntry> log;
  int iterations = 0;
};

struct TrainOptions {
  // Loss log CSV and checkpoints are written here when set.
  std::optional<std::filesystem::path> out_dir;
  std::function<void(const LossLogEntry&)> on_log;
};

// Everything the loss needs for one batch, shared with the gradient checks.
template <typename T>
struct BatchLosses {
  Tensor<T> recon, shape, pose, total;
  Tensor<T> z_o;
};

template <typename T>
BatchLosses<T> batch_losses(const Network<T>& net, const ShapeCodebook& cb, const TrainConfig& cfg,
                            const Tensor<T>& input, const Tensor<T>& rgb_gt, const Tensor<T>& depth_gt,
                            const Tensor<T>& hsh, std::span<const std::size_t> ids);

TrainResult train(const Dataset& ds, const TrainConfig& cfg, const TrainOptions& opts = {});

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossLogEntry>& log);

}  // namespace poselatent
