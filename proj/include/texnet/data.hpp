#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace texnet {

enum class TumorClass { benign, malignant };

enum class Subtype {
  adenosis,
  fibroadenoma,
  phyllodes,
  tubular_adenoma,
  ductal,
  lobular,
  mucinous,
  papillary
};

TumorClass subtype_class(Subtype subtype);
const char* to_string(TumorClass c);
const char* to_string(Subtype s);
std::optional<TumorClass> tumor_class_from_string(const std::string& s);
std::optional<Subtype> subtype_from_string(const std::string& s);

inline int class_index(TumorClass c) { return c == TumorClass::benign ? 0 : 1; }

struct ImageRecord {
  std::string path;
  std::string patient_id;
  TumorClass tumor_class = TumorClass::benign;
  Subtype subtype = Subtype::adenosis;
  int magnification = 0;  // one of 40, 100, 200, 400
  int sequence = 0;
};

// Parses the dataset release convention
//   SOB_<B|M>_<SUBTYPE>-<slide-id>-<magnification>-<seq>.<ext>
// e.g. "SOB_B_TA-14-4659-40-001.png". Returns the parse error on failure.
std::optional<ImageRecord> parse_filename(const std::string& filename, std::string* error = nullptr);

class Manifest {
 public:
  Manifest() = default;
  explicit Manifest(std::vector<ImageRecord> records);

  const std::vector<ImageRecord>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }

  // Patient ids in sorted order, with their record indices.
  const std::map<std::string, std::vector<std::size_t>>& by_patient() const { return by_patient_; }
  std::vector<std::string> patient_ids() const;

  // A patient's class, derived from its records; throws on mixed classes.
  TumorClass patient_class(const std::string& patient_id) const;

 private:
  std::vector<ImageRecord> records_;
  std::map<std::string, std::vector<std::size_t>> by_patient_;
};

struct ManifestLoadOptions {
  bool strict = false;        // malformed names are errors instead of skipped
  bool verify_counts = false; // assert the published dataset distribution
  bool check_files = true;    // CSV records must point at existing files
};

// Accepts either a dataset directory tree (scanned recursively) or a manifest
// CSV with header: path,patient_id,class,subtype,magnification,seq
Manifest load_manifest(const std::string& source, const ManifestLoadOptions& options = {});

void write_manifest_csv(const Manifest& manifest, const std::string& path);

struct CountCheck {
  bool ok = true;
  std::string message;
};

// Compares per-subtype image and patient counts with the published dataset
// distribution (444/4 adenosis ... 5,429/58 malignant total).
CountCheck verify_breakhis_counts(const Manifest& manifest);

Manifest filter_magnification(const Manifest& manifest, int factor);

struct FoldSets {
  std::vector<std::string> train;
  std::vector<std::string> validation;
  std::vector<std::string> test;
};

struct FoldPlan {
  std::uint64_t seed = 0;
  std::vector<FoldSets> folds;
};

// Five (by default) independent patient-wise hold-outs. Per fold and tumor
// class: ~30% of patients go to test; of the remainder ~15% to validation,
// the rest to train. Image-count proportions are not enforced; patient
// disjointness is.
FoldPlan make_folds(const Manifest& manifest, int n_folds = 5, double test_fraction = 0.3,
                    double validation_fraction = 0.15, std::uint64_t seed = 0);

nlohmann::json to_json(const FoldPlan& plan);
FoldPlan fold_plan_from_json(const nlohmann::json& j);
void write_fold_plan(const FoldPlan& plan, const std::string& path);
FoldPlan load_fold_plan(const std::string& path);

// Record indices of the manifest whose patients belong to the given role.
std::vector<std::size_t> records_for_patients(const Manifest& manifest,
                                              const std::vector<std::string>& patients);

}  // namespace texnet
