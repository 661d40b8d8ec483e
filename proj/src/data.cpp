#include "texnet/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "texnet/random.hpp"

namespace texnet {

namespace fs = std::filesystem;

TumorClass subtype_class(Subtype subtype) {
  switch (subtype) {
    case Subtype::adenosis:
    case Subtype::fibroadenoma:
    case Subtype::phyllodes:
    case Subtype::tubular_adenoma:
      return TumorClass::benign;
    default:
      return TumorClass::malignant;
  }
}

const char* to_string(TumorClass c) { return c == TumorClass::benign ? "benign" : "malignant"; }

const char* to_string(Subtype s) {
  switch (s) {
    case Subtype::adenosis: return "adenosis";
    case Subtype::fibroadenoma: return "fibroadenoma";
    case Subtype::phyllodes: return "phyllodes";
    case Subtype::tubular_adenoma: return "tubular_adenoma";
    case Subtype::ductal: return "ductal";
    case Subtype::lobular: return "lobular";
    case Subtype::mucinous: return "mucinous";
    case Subtype::papillary: return "papillary";
  }
  return "?";
}

std::optional<TumorClass> tumor_class_from_string(const std::string& s) {
  if (s == "benign") return TumorClass::benign;
  if (s == "malignant") return TumorClass::malignant;
  return std::nullopt;
}

std::optional<Subtype> subtype_from_string(const std::string& s) {
  static const std::map<std::string, Subtype> names = {
      {"adenosis", Subtype::adenosis},     {"fibroadenoma", Subtype::fibroadenoma},
      {"phyllodes", Subtype::phyllodes},   {"tubular_adenoma", Subtype::tubular_adenoma},
      {"ductal", Subtype::ductal},         {"lobular", Subtype::lobular},
      {"mucinous", Subtype::mucinous},     {"papillary", Subtype::papillary}};
  const auto it = names.find(s);
  if (it == names.end()) return std::nullopt;
  return it->second;
}

namespace {

std::vector<std::string> split(const std::string& s, char delim) {
  std::vector<std::string> parts;
  std::string part;
  std::istringstream stream(s);
  while (std::getline(stream, part, delim)) parts.push_back(part);
  return parts;
}

bool parse_int(const std::string& s, int& out) {
  if (s.empty()) return false;
  for (const char c : s)
    if (!std::isdigit(static_cast<unsigned char>(c))) return false;
  try {
    out = std::stoi(s);
  } catch (...) {
    return false;
  }
  return true;
}

std::optional<ImageRecord> fail(std::string* error, const std::string& message) {
  if (error) *error = message;
  return std::nullopt;
}

}  // namespace

std::optional<ImageRecord> parse_filename(const std::string& filename, std::string* error) {
  const std::string base = fs::path(filename).filename().string();
  const auto dot = base.rfind('.');
  const std::string stem = dot == std::string::npos ? base : base.substr(0, dot);

  const auto parts = split(stem, '-');
  if (parts.size() < 4) return fail(error, base + ": expected SOB_<B|M>_<SUBTYPE>-<slide>-<mag>-<seq>");

  const auto head = split(parts[0], '_');
  if (head.size() != 3 || head[0] != "SOB")
    return fail(error, base + ": prefix must be SOB_<B|M>_<SUBTYPE>");

  TumorClass tumor_class;
  if (head[1] == "B")
    tumor_class = TumorClass::benign;
  else if (head[1] == "M")
    tumor_class = TumorClass::malignant;
  else
    return fail(error, base + ": class marker must be B or M");

  static const std::map<std::string, Subtype> codes = {
      {"A", Subtype::adenosis},  {"F", Subtype::fibroadenoma}, {"PT", Subtype::phyllodes},
      {"TA", Subtype::tubular_adenoma}, {"DC", Subtype::ductal},  {"LC", Subtype::lobular},
      {"MC", Subtype::mucinous}, {"PC", Subtype::papillary}};
  const auto code = codes.find(head[2]);
  if (code == codes.end()) return fail(error, base + ": unknown subtype code " + head[2]);
  const Subtype subtype = code->second;
  if (subtype_class(subtype) != tumor_class)
    return fail(error, base + ": subtype " + to_string(subtype) + " contradicts class marker");

  int magnification = 0, sequence = 0;
  if (!parse_int(parts[parts.size() - 2], magnification) ||
      (magnification != 40 && magnification != 100 && magnification != 200 &&
       magnification != 400))
    return fail(error, base + ": magnification must be one of 40/100/200/400");
  if (!parse_int(parts.back(), sequence)) return fail(error, base + ": bad sequence number");

  std::string patient_id = parts[1];
  for (std::size_t i = 2; i + 2 < parts.size(); ++i) patient_id += "-" + parts[i];
  if (patient_id.empty()) return fail(error, base + ": empty slide id");

  ImageRecord record;
  record.path = filename;
  record.patient_id = patient_id;
  record.tumor_class = tumor_class;
  record.subtype = subtype;
  record.magnification = magnification;
  record.sequence = sequence;
  return record;
}

Manifest::Manifest(std::vector<ImageRecord> records) : records_(std::move(records)) {
  for (std::size_t i = 0; i < records_.size(); ++i) {
    if (records_[i].patient_id.empty())
      throw std::invalid_argument("manifest record " + std::to_string(i) + " has empty patient id");
    by_patient_[records_[i].patient_id].push_back(i);
  }
}

std::vector<std::string> Manifest::patient_ids() const {
  std::vector<std::string> ids;
  ids.reserve(by_patient_.size());
  for (const auto& [id, _] : by_patient_) ids.push_back(id);
  return ids;
}

TumorClass Manifest::patient_class(const std::string& patient_id) const {
  const auto it = by_patient_.find(patient_id);
  if (it == by_patient_.end())
    throw std::invalid_argument("unknown patient id: " + patient_id);
  const TumorClass c = records_[it->second.front()].tumor_class;
  for (const std::size_t i : it->second)
    if (records_[i].tumor_class != c)
      throw std::runtime_error("patient " + patient_id + " has records in both classes");
  return c;
}

namespace {

Manifest load_manifest_dir(const std::string& dir, const ManifestLoadOptions& options) {
  std::vector<ImageRecord> records;
  std::size_t skipped = 0;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    std::string error;
    auto record = parse_filename(entry.path().string(), &error);
    if (!record) {
      if (options.strict) throw std::runtime_error("manifest scan: " + error);
      std::cerr << "warning: skipping " << error << "\n";
      ++skipped;
      continue;
    }
    records.push_back(std::move(*record));
  }
  if (skipped > 0) std::cerr << "warning: skipped " << skipped << " non-matching files\n";
  std::sort(records.begin(), records.end(),
            [](const ImageRecord& a, const ImageRecord& b) { return a.path < b.path; });
  return Manifest(std::move(records));
}

Manifest load_manifest_csv(const std::string& path, const ManifestLoadOptions& options) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read manifest: " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty manifest: " + path);
  if (line != "path,patient_id,class,subtype,magnification,seq")
    throw std::runtime_error("manifest header must be path,patient_id,class,subtype,magnification,seq");
  std::vector<ImageRecord> records;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto fields = split(line, ',');
    if (fields.size() != 6)
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": expected 6 fields");
    ImageRecord record;
    record.path = fields[0];
    record.patient_id = fields[1];
    const auto cls = tumor_class_from_string(fields[2]);
    const auto sub = subtype_from_string(fields[3]);
    if (!cls || !sub)
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": bad class or subtype");
    record.tumor_class = *cls;
    record.subtype = *sub;
    if (subtype_class(*sub) != *cls)
      throw std::runtime_error(path + ":" + std::to_string(line_no) +
                               ": subtype inconsistent with class");
    if (!parse_int(fields[4], record.magnification) || !parse_int(fields[5], record.sequence))
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": bad magnification or seq");
    if (options.check_files && !fs::exists(record.path))
      throw std::runtime_error(path + ":" + std::to_string(line_no) +
                               ": file does not exist: " + record.path);
    records.push_back(std::move(record));
  }
  return Manifest(std::move(records));
}

}  // namespace

Manifest load_manifest(const std::string& source, const ManifestLoadOptions& options) {
  if (!fs::exists(source)) throw std::runtime_error("manifest source does not exist: " + source);
  Manifest manifest = fs::is_directory(source) ? load_manifest_dir(source, options)
                                               : load_manifest_csv(source, options);
  if (options.verify_counts) {
    const CountCheck check = verify_breakhis_counts(manifest);
    if (!check.ok) throw std::runtime_error("dataset count verification failed:\n" + check.message);
  }
  return manifest;
}

void write_manifest_csv(const Manifest& manifest, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write manifest: " + path);
  out << "path,patient_id,class,subtype,magnification,seq\n";
  for (const auto& r : manifest.records())
    out << r.path << ',' << r.patient_id << ',' << to_string(r.tumor_class) << ','
        << to_string(r.subtype) << ',' << r.magnification << ',' << r.sequence << '\n';
}

CountCheck verify_breakhis_counts(const Manifest& manifest) {
  struct Expected {
    Subtype subtype;
    std::size_t images;
    std::size_t patients;
  };
  static const Expected expected[] = {
      {Subtype::adenosis, 444, 4},   {Subtype::fibroadenoma, 1014, 10},
      {Subtype::phyllodes, 453, 3},  {Subtype::tubular_adenoma, 569, 7},
      {Subtype::ductal, 3451, 38},   {Subtype::lobular, 626, 5},
      {Subtype::mucinous, 792, 9},   {Subtype::papillary, 560, 6}};

  std::map<Subtype, std::size_t> images;
  std::map<Subtype, std::set<std::string>> patients;
  for (const auto& r : manifest.records()) {
    ++images[r.subtype];
    patients[r.subtype].insert(r.patient_id);
  }

  CountCheck check;
  std::ostringstream message;
  std::size_t benign_images = 0, malignant_images = 0;
  for (const auto& e : expected) {
    const std::size_t got_images = images[e.subtype];
    const std::size_t got_patients = patients[e.subtype].size();
    (subtype_class(e.subtype) == TumorClass::benign ? benign_images : malignant_images) +=
        got_images;
    if (got_images != e.images || got_patients != e.patients) {
      check.ok = false;
      message << to_string(e.subtype) << ": expected " << e.images << " images / " << e.patients
              << " patients, got " << got_images << " / " << got_patients << "\n";
    }
  }
  if (benign_images != 2368) {
    check.ok = false;
    message << "benign total: expected 2368 images, got " << benign_images << "\n";
  }
  if (malignant_images != 5429) {
    check.ok = false;
    message << "malignant total: expected 5429 images, got " << malignant_images << "\n";
  }
  check.message = message.str();
  return check;
}

Manifest filter_magnification(const Manifest& manifest, int factor) {
  if (factor != 40 && factor != 100 && factor != 200 && factor != 400)
    throw std::invalid_argument("magnification must be one of 40/100/200/400");
  std::vector<ImageRecord> kept;
  for (const auto& r : manifest.records())
    if (r.magnification == factor) kept.push_back(r);
  return Manifest(std::move(kept));
}

namespace {

// round-half-away-from-zero count clamped so every role keeps at least one
// patient and train is never emptied
std::size_t role_count(std::size_t pool, double fraction, std::size_t keep_at_least) {
  const auto raw = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(pool)));
  return std::clamp<std::size_t>(raw, 1, pool - keep_at_least);
}

}  // namespace

FoldPlan make_folds(const Manifest& manifest, int n_folds, double test_fraction,
                    double validation_fraction, std::uint64_t seed) {
  if (n_folds < 1) throw std::invalid_argument("n_folds must be >= 1");
  if (test_fraction <= 0 || test_fraction >= 1 || validation_fraction <= 0 ||
      validation_fraction >= 1)
    throw std::invalid_argument("fractions must lie strictly between 0 and 1");

  std::map<TumorClass, std::vector<std::string>> by_class;
  for (const auto& id : manifest.patient_ids())
    by_class[manifest.patient_class(id)].push_back(id);
  for (const TumorClass c : {TumorClass::benign, TumorClass::malignant})
    if (by_class[c].size() < 3)
      throw std::invalid_argument(std::string("need at least 3 ") + to_string(c) +
                                  " patients to populate train/validation/test");

  FoldPlan plan;
  plan.seed = seed;
  for (int fold = 0; fold < n_folds; ++fold) {
    RandomStream stream(derive_seed(seed, "split", static_cast<std::uint64_t>(fold)));
    FoldSets sets;
    for (auto& [cls, ids] : by_class) {
      std::vector<std::string> pool = ids;
      stream.shuffle(pool);
      const std::size_t n_test = role_count(pool.size(), test_fraction, 2);
      const std::size_t remaining = pool.size() - n_test;
      const std::size_t n_val = role_count(remaining, validation_fraction, 1);
      for (std::size_t i = 0; i < pool.size(); ++i) {
        if (i < n_test)
          sets.test.push_back(pool[i]);
        else if (i < n_test + n_val)
          sets.validation.push_back(pool[i]);
        else
          sets.train.push_back(pool[i]);
      }
    }
    std::sort(sets.train.begin(), sets.train.end());
    std::sort(sets.validation.begin(), sets.validation.end());
    std::sort(sets.test.begin(), sets.test.end());
    plan.folds.push_back(std::move(sets));
  }
  return plan;
}

nlohmann::json to_json(const FoldPlan& plan) {
  nlohmann::json folds = nlohmann::json::array();
  for (const auto& f : plan.folds)
    folds.push_back(nlohmann::json{
        {"train", f.train}, {"validation", f.validation}, {"test", f.test}});
  return nlohmann::json{{"seed", plan.seed}, {"folds", folds}};
}

FoldPlan fold_plan_from_json(const nlohmann::json& j) {
  FoldPlan plan;
  plan.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& f : j.at("folds")) {
    FoldSets sets;
    sets.train = f.at("train").get<std::vector<std::string>>();
    sets.validation = f.at("validation").get<std::vector<std::string>>();
    sets.test = f.at("test").get<std::vector<std::string>>();
    plan.folds.push_back(std::move(sets));
  }
  return plan;
}

void write_fold_plan(const FoldPlan& plan, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write fold plan: " + path);
  out << to_json(plan).dump(2) << '\n';
}

FoldPlan load_fold_plan(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read fold plan: " + path);
  nlohmann::json j;
  in >> j;
  return fold_plan_from_json(j);
}

std::vector<std::size_t> records_for_patients(const Manifest& manifest,
                                              const std::vector<std::string>& patients) {
  std::vector<std::size_t> indices;
  for (const auto& id : patients) {
    const auto it = manifest.by_patient().find(id);
    if (it == manifest.by_patient().end()) continue;  // patient has no images at this filter
    indices.insert(indices.end(), it->second.begin(), it->second.end());
  }
  std::sort(indices.begin(), indices.end());
  return indices;
}

}  // namespace texnet
