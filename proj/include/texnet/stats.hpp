#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace texnet {

// Class convention across the toolkit: 0 = benign, 1 = malignant.
// Malignant is the positive class for sensitivity/specificity.
inline constexpr int kBenign = 0;
inline constexpr int kMalignant = 1;

struct PredictionRecord {
  std::string image_id;
  std::string patient_id;
  int true_class = 0;
  int predicted_class = 0;
  double probability = 0;  // probability assigned to the predicted class
};

struct PatientAccuracy {
  std::vector<std::pair<std::string, double>> per_patient;  // patient id -> correct ratio
  double mean = 0;
};

// Mean over patients of each patient's per-image correct-classification
// ratio (the dataset baseline's patient-score protocol).
PatientAccuracy patient_level_accuracy(const std::vector<PredictionRecord>& predictions);

// Fraction of all images classified correctly, ignoring patient grouping.
double pooled_image_accuracy(const std::vector<PredictionRecord>& predictions);

struct ConfusionCounts {
  long tp = 0, fn = 0, tn = 0, fp = 0;
};

ConfusionCounts confusion(const std::vector<PredictionRecord>& predictions);

struct SensitivitySpecificity {
  // Unset when the corresponding class is absent (division by zero) rather
  // than silently reported as 0.
  std::optional<double> sensitivity;
  std::optional<double> specificity;
  ConfusionCounts counts;
};

// Pooled over images: sensitivity = TP/(TP+FN), specificity = TN/(TN+FP).
SensitivitySpecificity sensitivity_specificity(const std::vector<PredictionRecord>& predictions);

// Patient-level variants: the per-patient correct ratio averaged over
// malignant patients (sensitivity) and over benign patients (specificity).
SensitivitySpecificity patient_sensitivity_specificity(
    const std::vector<PredictionRecord>& predictions);

struct FoldMetrics {
  double accuracy_patient = 0;
  double accuracy_image = 0;
  std::optional<double> sensitivity;
  std::optional<double> specificity;
  std::optional<double> sensitivity_patient;
  std::optional<double> specificity_patient;
};

FoldMetrics compute_fold_metrics(const std::vector<PredictionRecord>& predictions);

struct MetricsReport {
  std::string model;
  int aug_factor = 1;
  std::vector<FoldMetrics> folds;
  FoldMetrics mean;
  FoldMetrics sd;
};

// Arithmetic mean and sample standard deviation (n-1 denominator) per metric.
MetricsReport aggregate_folds(const std::string& model, int aug_factor,
                              const std::vector<FoldMetrics>& folds);

nlohmann::json to_json(const MetricsReport& report);
MetricsReport metrics_report_from_json(const nlohmann::json& j);

struct RankMatrix {
  std::vector<std::string> models;
  std::vector<std::vector<double>> accuracies;  // folds x models
  std::vector<std::vector<double>> ranks;       // folds x models, 1 = best, midranks on ties
  std::vector<double> average_ranks;
};

RankMatrix friedman_ranks(const std::vector<std::string>& models,
                          const std::vector<std::vector<double>>& fold_accuracies);

// CD = q_alpha(k) * sqrt(k(k+1)/(6n)); q from the embedded two-tailed Nemenyi
// table, k in [2,20], alpha in {0.05, 0.10}.
double nemenyi_critical_distance(int k_models, int n_folds, double alpha = 0.05);

// Groups of models closer than CD: connected runs along the rank ordering
// (the transitive closure of the pairwise |rank difference| <= CD relation).
// Indices returned refer to models sorted by average rank, inclusive ranges;
// only groups of two or more models are reported.
std::vector<std::pair<int, int>> cd_groups(const std::vector<double>& sorted_ranks, double cd);

// Standalone SVG critical-distance diagram: a rank number line with models at
// their average ranks, a CD ruler and connector bars per group.
std::string cd_diagram_svg(const std::vector<std::string>& models,
                           const std::vector<double>& average_ranks, double cd);

nlohmann::json to_json(const RankMatrix& ranks, double cd, double alpha);

}  // namespace texnet
