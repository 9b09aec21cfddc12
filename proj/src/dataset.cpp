#include "xmmp/dataset.hpp"

#include "xmmp/util.hpp"

namespace xmmp::data {

using ad::Tensor;

std::vector<int> Dataset::labels() const {
  std::vector<int> y;
  y.reserve(records.size());
  for (const auto& r : records) y.push_back(r.label);
  return y;
}

std::vector<MultimodalRecord> Dataset::subset(std::span<const std::size_t> indices) const {
  std::vector<MultimodalRecord> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(records.at(i));
  return out;
}

void save_dataset(const std::filesystem::path& path, const Dataset& d) {
  Container c;
  c.header["kind"] = "dataset";
  c.header["format_version"] = kDatasetVersion;
  c.header["normalized"] = d.normalized;
  c.header["vocabulary"] = d.vocabulary.words();
  c.header["table"] = d.table.to_json();
  c.header["ground_truth"] = d.ground_truth;
  nlohmann::json meta = nlohmann::json::array();
  for (std::size_t i = 0; i < d.records.size(); ++i) {
    const auto& r = d.records[i];
    meta.push_back({{"id", r.id}, {"label", r.label}});
    const std::string p = "r" + std::to_string(i) + ".";
    c.tensors.emplace_back(p + "events", r.events.values);
    c.tensors.emplace_back(p + "mask", r.events.mask);
    Tensor ids({r.notes.ids.size()});
    for (std::size_t k = 0; k < r.notes.ids.size(); ++k) ids[k] = r.notes.ids[k];
    c.tensors.emplace_back(p + "notes", std::move(ids));
    c.tensors.emplace_back(p + "vitals", r.vitals.values);
  }
  c.header["records"] = std::move(meta);
  write_container(path, c);
}

Dataset load_dataset(const std::filesystem::path& path) {
  Container c;
  try {
    c = read_container(path);
  } catch (const ContainerError& e) {
    throw DataError(e.what());
  }
  if (c.header.value("kind", "") != "dataset") throw DataError("'" + path.string() + "' is not a dataset file");
  if (c.header.value("format_version", -1) != kDatasetVersion) {
    throw DataError("unsupported dataset format version in '" + path.string() + "'");
  }
  Dataset d;
  try {
    d.normalized = c.header.at("normalized").get<bool>();
    d.vocabulary = Vocabulary::from_words(c.header.at("vocabulary").get<std::vector<std::string>>());
    d.table = NormalValueTable::from_json(c.header.at("table"));
    d.ground_truth = c.header.value("ground_truth", nlohmann::json());
    const auto& meta = c.header.at("records");
    if (c.tensors.size() != 4 * meta.size()) throw DataError("dataset tensor count does not match record count");
    for (std::size_t i = 0; i < meta.size(); ++i) {
      MultimodalRecord r;
      r.id = meta[i].at("id").get<std::int64_t>();
      r.label = meta[i].at("label").get<int>();
      const std::string p = "r" + std::to_string(i) + ".";
      auto take = [&](std::size_t k, const std::string& name) -> Tensor& {
        auto& [n, t] = c.tensors[4 * i + k];
        if (n != p + name) throw DataError("expected tensor '" + p + name + "', found '" + n + "'");
        return t;
      };
      r.events.values = std::move(take(0, "events"));
      r.events.mask = std::move(take(1, "mask"));
      for (double v : take(2, "notes").values()) r.notes.ids.push_back(static_cast<std::int32_t>(v));
      r.vitals.values = std::move(take(3, "vitals"));
      d.records.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed dataset header in '" + path.string() + "': " + e.what());
  }
  return d;
}

}  // namespace xmmp::data
