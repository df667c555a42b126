#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "isae/adam.hpp"
#include "isae/errors.hpp"
#include "isae/model.hpp"

namespace isae {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are little-endian and written via memcpy");

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kArchTag[] = "rae32-v1";

namespace ckpt_detail {

template <typename T>
const char* dtype_name() {
  if constexpr (sizeof(T) == 4) return "f32";
  else return "f64";
}

inline void write_u32(std::ostream& os, std::uint32_t v) {
  char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
               static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(b, 4);
}

inline std::uint32_t read_u32(std::istream& is, const std::string& what) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4))
    throw IoError("checkpoint: truncated while reading " + what);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace ckpt_detail

// Layout on disk: "SDCK", u32 version, u32 header length, JSON header, then
// raw array payloads at the offsets the directory records. Model parameters
// are stored as "p.<name>"; optimizer moments, when present, as "m.<name>"
// and "v.<name>" in optimizer slot order.
template <typename T>
void save_checkpoint(Model<T>& model, const std::string& path,
                     const AdamState<T>* adam = nullptr,
                     const std::vector<Parameter<T>*>* adam_params = nullptr) {
  std::vector<std::pair<std::string, const Tensor<T>*>> arrays;
  for (auto* p : model.params()) arrays.emplace_back("p." + p->name, &p->value);
  if (adam) {
    if (!adam_params || adam->m.size() != adam_params->size())
      throw ConfigError("save_checkpoint: optimizer state without a matching parameter list");
    for (std::size_t i = 0; i < adam_params->size(); ++i)
      arrays.emplace_back("m." + (*adam_params)[i]->name, &adam->m[i]);
    for (std::size_t i = 0; i < adam_params->size(); ++i)
      arrays.emplace_back("v." + (*adam_params)[i]->name, &adam->v[i]);
  }

  nlohmann::json dir = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, tensor] : arrays) {
    dir.push_back({{"name", name},
                   {"dtype", ckpt_detail::dtype_name<T>()},
                   {"shape", tensor->shape},
                   {"offset", offset}});
    offset += tensor->data.size() * sizeof(T);
  }
  nlohmann::json header = {{"arch", kArchTag}, {"layout", model.layout.dims}, {"arrays", dir}};
  if (adam) header["adam_step"] = adam->step;
  const std::string header_str = header.dump();

  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("save_checkpoint: cannot open '" + path + "' for writing");
  os.write("SDCK", 4);
  ckpt_detail::write_u32(os, kCheckpointVersion);
  ckpt_detail::write_u32(os, static_cast<std::uint32_t>(header_str.size()));
  os.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
  for (const auto& [name, tensor] : arrays)
    os.write(reinterpret_cast<const char*>(tensor->data.data()),
             static_cast<std::streamsize>(tensor->data.size() * sizeof(T)));
  if (!os) throw IoError("save_checkpoint: write failed for '" + path + "'");
}

template <typename T>
struct LoadedCheckpoint {
  Model<T> model;
  bool has_adam = false;
  AdamState<T> adam;
  std::vector<std::string> adam_param_names;  // optimizer slot order
};

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path,
                                    const SubspaceLayout* expected_layout = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("load_checkpoint: cannot open '" + path + "'");
  char magic[4];
  if (!is.read(magic, 4) || std::string(magic, 4) != "SDCK")
    throw IoError("load_checkpoint: '" + path + "' is not a checkpoint (bad magic)");
  const std::uint32_t version = ckpt_detail::read_u32(is, "version");
  if (version != kCheckpointVersion)
    throw IoError("load_checkpoint: unsupported version " + std::to_string(version));
  const std::uint32_t header_len = ckpt_detail::read_u32(is, "header length");
  std::string header_str(header_len, '\0');
  if (!is.read(header_str.data(), header_len))
    throw IoError("load_checkpoint: truncated header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_str);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("load_checkpoint: malformed header: ") + e.what());
  }
  if (header.value("arch", "") != kArchTag)
    throw IoError("load_checkpoint: architecture tag mismatch");
  const auto dims = header.at("layout").get<std::vector<int>>();
  if (expected_layout && dims != expected_layout->dims)
    throw ConfigError("load_checkpoint: checkpoint layout " + shape_str(dims) +
                      " does not match configured layout " + shape_str(expected_layout->dims));

  LoadedCheckpoint<T> out{Model<T>(SubspaceLayout(dims), 0)};
  const std::streampos payload_start = is.tellg();

  std::size_t params_seen = 0;
  for (const auto& entry : header.at("arrays")) {
    const std::string name = entry.at("name").get<std::string>();
    const std::string dtype = entry.at("dtype").get<std::string>();
    const auto shape = entry.at("shape").get<std::vector<int>>();
    const std::uint64_t offset = entry.at("offset").get<std::uint64_t>();
    if (dtype != ckpt_detail::dtype_name<T>())
      throw IoError("load_checkpoint: array '" + name + "' has dtype " + dtype);

    Tensor<T> buf(shape);
    is.seekg(payload_start + static_cast<std::streamoff>(offset));
    if (!is.read(reinterpret_cast<char*>(buf.data.data()),
                 static_cast<std::streamsize>(buf.data.size() * sizeof(T))))
      throw IoError("load_checkpoint: truncated payload for array '" + name + "'");

    if (name.rfind("p.", 0) == 0) {
      Parameter<T>* p = out.model.find(name.substr(2));
      if (!p) throw IoError("load_checkpoint: unknown parameter '" + name + "'");
      if (p->value.shape != shape)
        throw IoError("load_checkpoint: parameter '" + name + "' has shape " + shape_str(shape) +
                      ", model expects " + shape_str(p->value.shape));
      p->value = std::move(buf);
      ++params_seen;
    } else if (name.rfind("m.", 0) == 0) {
      out.adam.m.push_back(std::move(buf));
      out.adam_param_names.push_back(name.substr(2));
    } else if (name.rfind("v.", 0) == 0) {
      out.adam.v.push_back(std::move(buf));
    } else {
      throw IoError("load_checkpoint: unrecognized array '" + name + "'");
    }
  }

  if (params_seen != out.model.params().size())
    throw IoError("load_checkpoint: file holds " + std::to_string(params_seen) +
                  " parameters, model expects " + std::to_string(out.model.params().size()));
  out.has_adam = !out.adam.m.empty();
  if (out.has_adam) {
    if (out.adam.m.size() != out.adam.v.size())
      throw IoError("load_checkpoint: optimizer moment arrays are unpaired");
    if (!header.contains("adam_step")) throw IoError("load_checkpoint: missing adam_step");
    out.adam.step = header.at("adam_step").get<long long>();
    for (const auto& name : out.adam_param_names)
      if (!out.model.find(name))
        throw IoError("load_checkpoint: optimizer slot for unknown parameter '" + name + "'");
  }
  out.model.mixing.refresh_inverse();
  return out;
}

}  // namespace isae
