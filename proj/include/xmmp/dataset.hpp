#pragma once

#include <filesystem>
#include <optional>
#include <vector>

#include "json.hpp"
#include "xmmp/preprocess.hpp"
#include "xmmp/record.hpp"

namespace xmmp::data {

inline constexpr int kDatasetVersion = 1;

struct Dataset {
  std::vector<MultimodalRecord> records;
  Vocabulary vocabulary;
  NormalValueTable table = NormalValueTable::defaults();
  // True when event and vitals values are already z-scores (synthetic data);
  // otherwise training fits a Normalizer on its training split.
  bool normalized = false;
  // Planted-signal description for synthetic datasets.
  nlohmann::json ground_truth;

  std::vector<int> labels() const;
  std::vector<MultimodalRecord> subset(std::span<const std::size_t> indices) const;
};

void save_dataset(const std::filesystem::path& path, const Dataset& dataset);
// Throws DataError on a malformed or mismatched file.
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace xmmp::data
