#pragma once

#include <string>
#include <utility>
#include <vector>

#include "texnet/augment.hpp"
#include "texnet/data.hpp"
#include "texnet/image.hpp"
#include "texnet/optim.hpp"

namespace texnet {

// Sample source over manifest records with a frozen augmentation plan.
// Images are decoded (and warped) on access, so memory stays flat no matter
// how large the augmentation factor is.
template <typename Scalar>
class ImageSource final : public SampleSource<Scalar> {
 public:
  ImageSource(const Manifest& manifest, std::vector<std::size_t> record_indices,
              std::vector<AugmentedItem> items, LoadImageOptions load_options = {})
      : manifest_(&manifest), record_indices_(std::move(record_indices)),
        items_(std::move(items)), load_options_(load_options) {}

  Index size() const override { return static_cast<Index>(items_.size()); }

  Sample<Scalar> get(Index i) const override {
    const AugmentedItem& item = items_[static_cast<std::size_t>(i)];
    const ImageRecord& record = manifest_->records()[record_indices_[item.record_index]];
    Sample<Scalar> sample;
    sample.image = load_image<Scalar>(record.path, load_options_);
    if (!item.params.is_identity()) sample.image = apply_affine(sample.image, item.params);
    sample.label = class_index(record.tumor_class);
    sample.image_id = record.path + "#v" + std::to_string(item.variant);
    sample.patient_id = record.patient_id;
    return sample;
  }

  const std::vector<AugmentedItem>& items() const { return items_; }

 private:
  const Manifest* manifest_;
  std::vector<std::size_t> record_indices_;
  std::vector<AugmentedItem> items_;
  LoadImageOptions load_options_;
};

// Train role: originals plus (factor-1) affine variants per image.
template <typename Scalar>
ImageSource<Scalar> make_train_source(const Manifest& manifest,
                                      const std::vector<std::string>& patients,
                                      const AugmentConfig& augment,
                                      LoadImageOptions load_options = {}) {
  auto records = records_for_patients(manifest, patients);
  auto items = augment_plan(records.size(), augment);
  return ImageSource<Scalar>(manifest, std::move(records), std::move(items), load_options);
}

// Validation and test roles: originals only, never augmented.
template <typename Scalar>
ImageSource<Scalar> make_eval_source(const Manifest& manifest,
                                     const std::vector<std::string>& patients,
                                     LoadImageOptions load_options = {}) {
  auto records = records_for_patients(manifest, patients);
  AugmentConfig originals_only;
  auto items = augment_plan(records.size(), originals_only);
  return ImageSource<Scalar>(manifest, std::move(records), std::move(items), load_options);
}

}  // namespace texnet
