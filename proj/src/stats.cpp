#include "texnet/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace texnet {

namespace {

std::map<std::string, std::pair<long, long>> per_patient_counts(
    const std::vector<PredictionRecord>& predictions) {
  std::map<std::string, std::pair<long, long>> counts;  // patient -> (correct, total)
  for (const auto& p : predictions) {
    auto& [correct, total] = counts[p.patient_id];
    correct += (p.predicted_class == p.true_class);
    total += 1;
  }
  return counts;
}

}  // namespace

PatientAccuracy patient_level_accuracy(const std::vector<PredictionRecord>& predictions) {
  if (predictions.empty()) throw std::invalid_argument("patient_level_accuracy: no predictions");
  PatientAccuracy result;
  double sum = 0;
  for (const auto& [patient, counts] : per_patient_counts(predictions)) {
    const double score = static_cast<double>(counts.first) / static_cast<double>(counts.second);
    result.per_patient.emplace_back(patient, score);
    sum += score;
  }
  result.mean = sum / static_cast<double>(result.per_patient.size());
  return result;
}

double pooled_image_accuracy(const std::vector<PredictionRecord>& predictions) {
  if (predictions.empty()) throw std::invalid_argument("pooled_image_accuracy: no predictions");
  long correct = 0;
  for (const auto& p : predictions) correct += (p.predicted_class == p.true_class);
  return static_cast<double>(correct) / static_cast<double>(predictions.size());
}

ConfusionCounts confusion(const std::vector<PredictionRecord>& predictions) {
  ConfusionCounts c;
  for (const auto& p : predictions) {
    if (p.true_class == kMalignant)
      (p.predicted_class == kMalignant ? c.tp : c.fn) += 1;
    else
      (p.predicted_class == kBenign ? c.tn : c.fp) += 1;
  }
  return c;
}

SensitivitySpecificity sensitivity_specificity(const std::vector<PredictionRecord>& predictions) {
  SensitivitySpecificity result;
  result.counts = confusion(predictions);
  const auto& c = result.counts;
  if (c.tp + c.fn > 0)
    result.sensitivity = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  if (c.tn + c.fp > 0)
    result.specificity = static_cast<double>(c.tn) / static_cast<double>(c.tn + c.fp);
  return result;
}

SensitivitySpecificity patient_sensitivity_specificity(
    const std::vector<PredictionRecord>& predictions) {
  std::map<std::string, int> patient_class;
  for (const auto& p : predictions) patient_class[p.patient_id] = p.true_class;

  SensitivitySpecificity result;
  result.counts = confusion(predictions);
  double sens_sum = 0, spec_sum = 0;
  long sens_n = 0, spec_n = 0;
  for (const auto& [patient, counts] : per_patient_counts(predictions)) {
    const double score = static_cast<double>(counts.first) / static_cast<double>(counts.second);
    if (patient_class[patient] == kMalignant) {
      sens_sum += score;
      ++sens_n;
    } else {
      spec_sum += score;
      ++spec_n;
    }
  }
  if (sens_n > 0) result.sensitivity = sens_sum / static_cast<double>(sens_n);
  if (spec_n > 0) result.specificity = spec_sum / static_cast<double>(spec_n);
  return result;
}

FoldMetrics compute_fold_metrics(const std::vector<PredictionRecord>& predictions) {
  FoldMetrics m;
  m.accuracy_patient = patient_level_accuracy(predictions).mean;
  m.accuracy_image = pooled_image_accuracy(predictions);
  const auto pooled = sensitivity_specificity(predictions);
  m.sensitivity = pooled.sensitivity;
  m.specificity = pooled.specificity;
  const auto patient = patient_sensitivity_specificity(predictions);
  m.sensitivity_patient = patient.sensitivity;
  m.specificity_patient = patient.specificity;
  return m;
}

namespace {

using MetricField = std::optional<double> FoldMetrics::*;

struct NamedField {
  const char* name;
  bool optional;
  double FoldMetrics::*plain = nullptr;
  MetricField opt = nullptr;
};

const NamedField kFields[] = {
    {"accuracy_patient", false, &FoldMetrics::accuracy_patient, nullptr},
    {"accuracy_image", false, &FoldMetrics::accuracy_image, nullptr},
    {"sensitivity", true, nullptr, &FoldMetrics::sensitivity},
    {"specificity", true, nullptr, &FoldMetrics::specificity},
    {"sensitivity_patient", true, nullptr, &FoldMetrics::sensitivity_patient},
    {"specificity_patient", true, nullptr, &FoldMetrics::specificity_patient},
};

std::vector<double> collect(const std::vector<FoldMetrics>& folds, const NamedField& field) {
  std::vector<double> values;
  for (const auto& f : folds) {
    if (field.optional) {
      const auto& v = f.*(field.opt);
      if (v) values.push_back(*v);
    } else {
      values.push_back(f.*(field.plain));
    }
  }
  return values;
}

double mean_of(const std::vector<double>& values) {
  return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

double sample_sd(const std::vector<double>& values) {
  if (values.size() < 2) return 0;
  const double m = mean_of(values);
  double ss = 0;
  for (const double v : values) ss += (v - m) * (v - m);
  return std::sqrt(ss / static_cast<double>(values.size() - 1));
}

// gcc 11 misfires -Wstringop-overflow on optional writes through member
// pointers at -O2+
#pragma GCC diagnostic push
#pragma GCC diagnostic ignored "-Wstringop-overflow"
void assign(FoldMetrics& target, const NamedField& field, const std::optional<double>& value) {
  if (field.optional && field.opt != nullptr) {
    auto& slot = target.*(field.opt);
    if (value)
      slot = *value;
    else
      slot.reset();
  } else if (field.plain != nullptr) {
    target.*(field.plain) = value.value_or(0);
  }
}
#pragma GCC diagnostic pop

nlohmann::json fold_to_json(const FoldMetrics& m) {
  nlohmann::json j;
  for (const auto& field : kFields) {
    if (field.optional) {
      const auto& v = m.*(field.opt);
      j[field.name] = v ? nlohmann::json(*v) : nlohmann::json(nullptr);
    } else {
      j[field.name] = m.*(field.plain);
    }
  }
  return j;
}

FoldMetrics fold_from_json(const nlohmann::json& j) {
  FoldMetrics m;
  for (const auto& field : kFields) {
    if (!j.contains(field.name) || j[field.name].is_null()) {
      assign(m, field, std::nullopt);
      continue;
    }
    assign(m, field, j[field.name].get<double>());
  }
  return m;
}

}  // namespace

MetricsReport aggregate_folds(const std::string& model, int aug_factor,
                              const std::vector<FoldMetrics>& folds) {
  if (folds.size() < 2) throw std::invalid_argument("aggregate_folds: need at least 2 folds");
  MetricsReport report;
  report.model = model;
  report.aug_factor = aug_factor;
  report.folds = folds;
  for (const auto& field : kFields) {
    const auto values = collect(folds, field);
    if (values.empty()) {
      assign(report.mean, field, std::nullopt);
      assign(report.sd, field, std::nullopt);
      continue;
    }
    if (field.optional && values.size() != folds.size())
      throw std::invalid_argument(std::string("aggregate_folds: metric ") + field.name +
                                  " defined for only some folds");
    assign(report.mean, field, mean_of(values));
    assign(report.sd, field, sample_sd(values));
  }
  return report;
}

nlohmann::json to_json(const MetricsReport& report) {
  nlohmann::json folds = nlohmann::json::array();
  for (const auto& f : report.folds) folds.push_back(fold_to_json(f));
  return nlohmann::json{{"model", report.model},
                        {"aug_factor", report.aug_factor},
                        {"folds", folds},
                        {"mean", fold_to_json(report.mean)},
                        {"sd", fold_to_json(report.sd)}};
}

MetricsReport metrics_report_from_json(const nlohmann::json& j) {
  MetricsReport report;
  report.model = j.at("model").get<std::string>();
  report.aug_factor = j.at("aug_factor").get<int>();
  for (const auto& f : j.at("folds")) report.folds.push_back(fold_from_json(f));
  report.mean = fold_from_json(j.at("mean"));
  report.sd = fold_from_json(j.at("sd"));
  return report;
}

RankMatrix friedman_ranks(const std::vector<std::string>& models,
                          const std::vector<std::vector<double>>& fold_accuracies) {
  const std::size_t k = models.size();
  const std::size_t n = fold_accuracies.size();
  if (k < 2) throw std::invalid_argument("friedman_ranks: need at least 2 models");
  if (n < 2) throw std::invalid_argument("friedman_ranks: need at least 2 folds");

  RankMatrix result;
  result.models = models;
  result.accuracies = fold_accuracies;
  result.average_ranks.assign(k, 0.0);
  for (const auto& row : fold_accuracies) {
    if (row.size() != k)
      throw std::invalid_argument("friedman_ranks: ragged accuracy matrix");
    for (const double a : row)
      if (!std::isfinite(a)) throw std::invalid_argument("friedman_ranks: non-finite accuracy");

    // rank 1 = best accuracy; tied values share the midrank
    std::vector<std::size_t> order(k);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
    std::vector<double> ranks(k, 0.0);
    std::size_t i = 0;
    while (i < k) {
      std::size_t j = i;
      while (j + 1 < k && row[order[j + 1]] == row[order[i]]) ++j;
      const double midrank = 0.5 * static_cast<double>(i + j) + 1.0;
      for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = midrank;
      i = j + 1;
    }
    for (std::size_t m = 0; m < k; ++m) result.average_ranks[m] += ranks[m];
    result.ranks.push_back(std::move(ranks));
  }
  for (double& r : result.average_ranks) r /= static_cast<double>(n);
  return result;
}

double nemenyi_critical_distance(int k_models, int n_folds, double alpha) {
  // Two-tailed Nemenyi critical values (studentized range / sqrt(2)),
  // k = 2..20.
  static const double q05[] = {1.959964, 2.343701, 2.569032, 2.727774, 2.849705, 2.948320,
                               3.030879, 3.101730, 3.163684, 3.218654, 3.268004, 3.312739,
                               3.353618, 3.391230, 3.426041, 3.458425, 3.488685, 3.517073,
                               3.543799};
  static const double q10[] = {1.644854, 2.051965, 2.291341, 2.459516, 2.588521, 2.692732,
                               2.779884, 2.854606, 2.919889, 2.977768, 3.029694, 3.076733,
                               3.119693, 3.159199, 3.195743, 3.229723, 3.261461, 3.291224,
                               3.319233};
  if (k_models < 2 || k_models > 20)
    throw std::invalid_argument("nemenyi_critical_distance: k must be in [2,20]");
  if (n_folds < 1) throw std::invalid_argument("nemenyi_critical_distance: n must be >= 1");
  const double* table;
  if (alpha == 0.05)
    table = q05;
  else if (alpha == 0.10)
    table = q10;
  else
    throw std::invalid_argument("nemenyi_critical_distance: alpha must be 0.05 or 0.10");
  const double q = table[k_models - 2];
  const double k = static_cast<double>(k_models);
  return q * std::sqrt(k * (k + 1.0) / (6.0 * static_cast<double>(n_folds)));
}

std::vector<std::pair<int, int>> cd_groups(const std::vector<double>& sorted_ranks, double cd) {
  std::vector<std::pair<int, int>> groups;
  const int k = static_cast<int>(sorted_ranks.size());
  int begin = 0;
  for (int i = 1; i <= k; ++i) {
    const bool break_here = (i == k) || (sorted_ranks[i] - sorted_ranks[i - 1] > cd);
    if (!break_here) continue;
    if (i - begin >= 2) groups.emplace_back(begin, i - 1);
    begin = i;
  }
  return groups;
}

std::string cd_diagram_svg(const std::vector<std::string>& models,
                           const std::vector<double>& average_ranks, double cd) {
  if (models.size() != average_ranks.size() || models.size() < 2)
    throw std::invalid_argument("cd_diagram_svg: need >= 2 models with ranks");
  for (const double r : average_ranks)
    if (!std::isfinite(r)) throw std::invalid_argument("cd_diagram_svg: non-finite rank");

  const int k = static_cast<int>(models.size());
  std::vector<std::size_t> order(models.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return average_ranks[a] < average_ranks[b]; });
  std::vector<double> sorted_ranks;
  for (const std::size_t i : order) sorted_ranks.push_back(average_ranks[i]);
  const auto groups = cd_groups(sorted_ranks, cd);

  const double width = 640.0, margin = 70.0;
  const double axis_y = 70.0;
  const double bar_gap = 12.0;
  const double label_row = 26.0;
  const int left_count = (k + 1) / 2;
  const double labels_top = axis_y + bar_gap * (static_cast<double>(groups.size()) + 1.0) + 18.0;
  const double height = labels_top + label_row * static_cast<double>(left_count) + 20.0;
  const auto x_of = [&](double rank) {
    return margin + (rank - 1.0) / (static_cast<double>(k) - 1.0) * (width - 2.0 * margin);
  };

  std::ostringstream svg;
  svg.setf(std::ios::fixed);
  svg.precision(2);
  svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
  svg << "<style>text{font-family:sans-serif;font-size:12px;}</style>\n";

  // CD ruler
  const double ruler_y = 28.0;
  svg << "<line x1=\"" << x_of(1.0) << "\" y1=\"" << ruler_y << "\" x2=\"" << x_of(1.0 + cd)
      << "\" y2=\"" << ruler_y << "\" stroke=\"black\" stroke-width=\"2\"/>\n";
  for (const double rank : {1.0, 1.0 + cd})
    svg << "<line x1=\"" << x_of(rank) << "\" y1=\"" << ruler_y - 4 << "\" x2=\"" << x_of(rank)
        << "\" y2=\"" << ruler_y + 4 << "\" stroke=\"black\"/>\n";
  svg << "<text x=\"" << x_of(1.0 + 0.5 * cd) << "\" y=\"" << ruler_y - 8
      << "\" text-anchor=\"middle\">CD = " << cd << "</text>\n";

  // rank axis with integer ticks
  svg << "<line x1=\"" << x_of(1.0) << "\" y1=\"" << axis_y << "\" x2=\""
      << x_of(static_cast<double>(k)) << "\" y2=\"" << axis_y
      << "\" stroke=\"black\" stroke-width=\"1.5\"/>\n";
  for (int t = 1; t <= k; ++t) {
    svg << "<line x1=\"" << x_of(t) << "\" y1=\"" << axis_y - 5 << "\" x2=\"" << x_of(t)
        << "\" y2=\"" << axis_y << "\" stroke=\"black\"/>\n";
    svg << "<text x=\"" << x_of(t) << "\" y=\"" << axis_y - 9 << "\" text-anchor=\"middle\">" << t
        << "</text>\n";
  }

  // connector bars for groups not separated by more than CD
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const double y = axis_y + bar_gap * (static_cast<double>(g) + 1.0);
    svg << "<line x1=\"" << x_of(sorted_ranks[static_cast<std::size_t>(groups[g].first)]) - 3
        << "\" y1=\"" << y << "\" x2=\""
        << x_of(sorted_ranks[static_cast<std::size_t>(groups[g].second)]) + 3 << "\" y2=\"" << y
        << "\" stroke=\"black\" stroke-width=\"4\"/>\n";
  }

  // model labels, best ranks on the left column
  for (int i = 0; i < k; ++i) {
    const std::size_t model = order[static_cast<std::size_t>(i)];
    const double rank_x = x_of(sorted_ranks[static_cast<std::size_t>(i)]);
    const bool left = i < left_count;
    const double label_y =
        labels_top + label_row * static_cast<double>(left ? i : (k - 1 - i));
    const double label_x = left ? margin - 60.0 : width - margin + 60.0;
    svg << "<path d=\"M " << rank_x << " " << axis_y << " V " << label_y - 4 << " H " << label_x
        << "\" fill=\"none\" stroke=\"black\"/>\n";
    svg << "<text x=\"" << label_x + (left ? -4.0 : 4.0) << "\" y=\"" << label_y - 8
        << "\" text-anchor=\"" << (left ? "end" : "start") << "\">" << models[model] << " ("
        << average_ranks[model] << ")</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

nlohmann::json to_json(const RankMatrix& ranks, double cd, double alpha) {
  std::vector<std::size_t> order(ranks.models.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return ranks.average_ranks[a] < ranks.average_ranks[b];
  });
  std::vector<double> sorted_ranks;
  for (const std::size_t i : order) sorted_ranks.push_back(ranks.average_ranks[i]);
  nlohmann::json groups = nlohmann::json::array();
  for (const auto& [lo, hi] : cd_groups(sorted_ranks, cd)) {
    nlohmann::json group = nlohmann::json::array();
    for (int i = lo; i <= hi; ++i) group.push_back(ranks.models[order[static_cast<std::size_t>(i)]]);
    groups.push_back(group);
  }
  return nlohmann::json{{"models", ranks.models},   {"accuracies", ranks.accuracies},
                        {"ranks", ranks.ranks},     {"average_ranks", ranks.average_ranks},
                        {"critical_distance", cd},  {"alpha", alpha},
                        {"indistinguishable_groups", groups}};
}

}  // namespace texnet
