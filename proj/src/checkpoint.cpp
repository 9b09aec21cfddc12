#include "xmmp/model.hpp"
#include "xmmp/util.hpp"

namespace xmmp::model {

void save_checkpoint(const XmmpModel& model, const std::filesystem::path& path, const nlohmann::json& vocabulary,
                     const nlohmann::json& preprocessing) {
  Container c;
  c.header["kind"] = "checkpoint";
  c.header["format_version"] = kCheckpointVersion;
  c.header["config"] = model.config();
  c.header["vocabulary"] = vocabulary;
  c.header["preprocessing"] = preprocessing;
  for (const auto& [name, t] : model.parameters().all()) c.tensors.emplace_back(name, t);
  write_container(path, c);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  Container c;
  try {
    c = read_container(path);
  } catch (const ContainerError& e) {
    throw CheckpointError(e.what());
  }
  if (c.header.value("kind", "") != "checkpoint") {
    throw CheckpointError("'" + path.string() + "' is not a model checkpoint");
  }
  const int version = c.header.value("format_version", -1);
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint format version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint cp;
  try {
    cp.config = c.header.at("config").get<ModelConfig>();
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("bad model config in checkpoint: ") + e.what());
  }
  cp.vocabulary = c.header.value("vocabulary", nlohmann::json::array());
  cp.preprocessing = c.header.value("preprocessing", nlohmann::json::object());
  for (auto& [name, t] : c.tensors) cp.parameters.add(name, std::move(t));
  return cp;
}

XmmpModel load_model(const std::filesystem::path& path) {
  Checkpoint cp = load_checkpoint(path);
  return XmmpModel(cp.config, std::move(cp.parameters));
}

}  // namespace xmmp::model
