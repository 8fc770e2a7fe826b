#pragma once

// Rotation accuracy, visible surface discrepancy, PCA of codebooks and the
// shape-space clustering check, plus the end-to-end evaluation report.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "poselatent/inference.hpp"
#include "poselatent/model.hpp"
#include "poselatent/synthscene.hpp"

namespace poselatent {

// 5, 10, 15, 20, 30 and 60 degrees.
std::vector<double> default_ap_thresholds_deg();

// Fraction of errors <= each threshold (both in radians). An empty error
// list yields NaN for every threshold.
std::vector<double> angular_ap(std::span<const double> errors, std::span<const double> thresholds);

// Step-cost VSD over the union of the visibility masks: a pixel costs 0 when
// visible in both maps with |d_est - d_gt| < tol_mm, 1 otherwise. Two empty
// masks give 0.
double vsd(std::span<const float> depth_est, std::span<const float> depth_gt, std::span<const std::uint8_t> visib_est,
           std::span<const std::uint8_t> visib_gt, double tol_mm = 20);
// Visibility is depth > 0 (unoccluded renders).
double vsd(std::span<const float> depth_est, std::span<const float> depth_gt, double tol_mm = 20);

// Fraction of scores strictly below threshold; NaN for an empty list.
double vsd_recall(std::span<const double> scores, double threshold = 0.3);

struct PcaResult {
  std::size_t n = 0, dims = 0;
  std::vector<double> projections;  // row-major [n, dims]
  std::vector<double> explained;    // top `dims` covariance eigenvalues, descending
  std::vector<double> eigenvalues;  // all of them, descending
  std::vector<double> components;   // row-major [dims, d]
  std::vector<double> mean;         // [d]
};

// Covariance is normalized by n. Each component's largest-magnitude entry is
// positive. Throws ArgumentError when n <= out_dims.
PcaResult pca_project(std::span<const float> codes, std::size_t n, std::size_t d, std::size_t out_dims = 3);

struct ClusterReport {
  double accuracy = 0;
  std::vector<std::vector<std::size_t>> confusion;  // [true object][predicted object]
};

// Nearest-centroid (cosine) classification of holdout shape codes against
// centroids of the unit-normalized training codes. Ties go to the lowest
// object index. Throws ArgumentError with fewer than 2 objects or when an
// object has no training codes.
ClusterReport shape_cluster_report(std::span<const float> train_codes, std::span<const int> train_ids,
                                   std::span<const float> holdout_codes, std::span<const int> holdout_ids,
                                   std::size_t n_objects, std::size_t d);

struct EvalConfig {
  CodebookMode mode = CodebookMode::conditioned;
  int level = 3;  // 642 views
  int n_inplane = 12;
  std::vector<double> thresholds_deg = default_ap_thresholds_deg();
  double vsd_tol_mm = 20;
  double vsd_threshold = 0.3;
  std::size_t max_holdout = 0;  // 0 = every holdout sample
  std::size_t train_codes_per_object = 200;
  std::vector<std::string> objects;  // empty = all

  void validate() const;
};

nlohmann::json to_json(const EvalConfig& c);
EvalConfig eval_config_from_json(const nlohmann::json& j);

struct SampleEval {
  std::size_t index = 0;  // dataset sample
  int object = -1;
  std::size_t retrieved = 0;  // codebook row
  double error = 0;           // symmetry-aware, radians
  double vsd = 0;
  double score = 0;
};

struct ObjectEval {
  std::string id;
  std::size_t n = 0;
  std::vector<double> ap;
  double median_error_deg = 0;
  double vsd_recall = 0;
};

struct EvalReport {
  EvalConfig config;
  std::vector<ObjectEval> objects;
  std::vector<double> ap;  // macro average over objects
  double median_error_deg = 0;
  double vsd_recall = 0;  // macro average over objects
  ClusterReport shape;
  std::vector<SampleEval> samples;
  std::vector<std::string> warnings;

  // Samples of one object, in dataset order.
  std::vector<SampleEval> samples_of(int object) const;
};

// Retrieves every selected holdout sample against a reference set of
// `level` views x `n_inplane` rotations.
EvalReport evaluate(const Network<float>& net, const Dataset& ds, const EvalConfig& cfg);

double median(std::vector<double> v);

nlohmann::json to_json(const EvalReport& r);
// object,n,ap...,median_error_deg,vsd_recall with an "all" row of aggregates.
void write_report_csv(const std::filesystem::path& path, const EvalReport& r);
// index,pc1,pc2,pc3,beta,theta,phi for every codebook row.
void write_pca_csv(const std::filesystem::path& path, const PoseCodebook& cb, const PcaResult& pca);

}  // namespace poselatent
