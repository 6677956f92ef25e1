#pragma once

#include <cstdio>
#include <filesystem>
#include <string>
#include <type_traits>

#include "json.hpp"
#include "kpred/nets.hpp"
#include "kpred/storage.hpp"

namespace kpred::store {

namespace detail {

template <class T>
RawTensor raw_from(const ad::Shape& shape, const std::vector<T>& v) {
  std::vector<uint32_t> dims(shape.dims.begin(), shape.dims.end());
  if constexpr (std::is_same_v<T, float>) return RawTensor::from_f32(std::move(dims), v);
  else return RawTensor::from_f64(std::move(dims), v);
}

template <class T>
std::vector<T> raw_values(const RawTensor& t) {
  if constexpr (std::is_same_v<T, float>) return t.to_f32();
  else return t.to_f64();
}

inline std::string fingerprint_hex(uint64_t fp) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fp));
  return buf;
}

}  // namespace detail

template <class T>
constexpr const char* dtype_name() {
  if constexpr (std::is_same_v<T, float>) return "f32";
  else return "f64";
}

// Layout: arch.json, manifest.json, blobs/p####[_m|_v].kprd per parameter.
template <class T>
void save_checkpoint(const nets::NetBundle<T>& bundle, const std::string& dir) {
  namespace fs = std::filesystem;
  if (bundle.arch.dtype != dtype_name<T>())
    throw std::runtime_error("checkpoint: bundle dtype does not match arch.json dtype");
  fs::create_directories(fs::path(dir) / "blobs");

  nlohmann::json manifest;
  manifest["version"] = 1;
  manifest["dtype"] = bundle.arch.dtype;
  manifest["step"] = bundle.params.step_count();
  manifest["fingerprint"] = detail::fingerprint_hex(bundle.fingerprint());
  nlohmann::json params = nlohmann::json::array();
  int idx = 0;
  for (const std::string& name : bundle.params.names()) {
    const auto& p = bundle.params.at(name);
    char stem[32];
    std::snprintf(stem, sizeof(stem), "blobs/p%04d", idx++);
    nlohmann::json entry;
    entry["name"] = name;
    entry["shape"] = p.shape.dims;
    entry["value"] = std::string(stem) + ".kprd";
    entry["adam_m"] = std::string(stem) + "_m.kprd";
    entry["adam_v"] = std::string(stem) + "_v.kprd";
    write_blob(detail::raw_from<T>(p.shape, p.value), (fs::path(dir) / (std::string(stem) + ".kprd")).string());
    write_blob(detail::raw_from<T>(p.shape, p.m), (fs::path(dir) / (std::string(stem) + "_m.kprd")).string());
    write_blob(detail::raw_from<T>(p.shape, p.v), (fs::path(dir) / (std::string(stem) + "_v.kprd")).string());
    params.push_back(entry);
  }
  manifest["params"] = params;
  write_text_file((fs::path(dir) / "manifest.json").string(), manifest.dump(2) + "\n");
  write_text_file((fs::path(dir) / "arch.json").string(), bundle.arch.to_json().dump(2) + "\n");
}

inline nets::NetArch load_checkpoint_arch(const std::string& dir) {
  namespace fs = std::filesystem;
  return nets::NetArch::from_json(
      nlohmann::json::parse(read_text_file((fs::path(dir) / "arch.json").string())));
}

template <class T>
nets::NetBundle<T> load_checkpoint(const std::string& dir) {
  namespace fs = std::filesystem;
  nets::NetBundle<T> bundle;
  bundle.arch = load_checkpoint_arch(dir);
  if (bundle.arch.dtype != dtype_name<T>())
    throw std::runtime_error("checkpoint '" + dir + "' holds dtype " + bundle.arch.dtype +
                             ", not " + dtype_name<T>());
  const nlohmann::json manifest =
      nlohmann::json::parse(read_text_file((fs::path(dir) / "manifest.json").string()));
  if (manifest.at("dtype").get<std::string>() != bundle.arch.dtype)
    throw std::runtime_error("checkpoint manifest dtype disagrees with arch.json");
  for (const nlohmann::json& entry : manifest.at("params")) {
    const std::string name = entry.at("name").get<std::string>();
    const RawTensor value = read_blob((fs::path(dir) / entry.at("value").get<std::string>()).string());
    ad::Shape shape(std::vector<int>(value.dims.begin(), value.dims.end()));
    bundle.params.add(name, shape, detail::raw_values<T>(value));
    auto& p = bundle.params.at(name);
    p.m = detail::raw_values<T>(read_blob((fs::path(dir) / entry.at("adam_m").get<std::string>()).string()));
    p.v = detail::raw_values<T>(read_blob((fs::path(dir) / entry.at("adam_v").get<std::string>()).string()));
    if (p.m.size() != p.value.size() || p.v.size() != p.value.size())
      throw std::runtime_error("checkpoint: optimizer state shape mismatch for '" + name + "'");
  }
  bundle.params.set_step_count(manifest.at("step").get<int64_t>());
  return bundle;
}

}  // namespace kpred::store
