#include "moedt/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "moedt/hash.hpp"

namespace moedt {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is written in host order, which must be little-endian");

namespace {

constexpr char kMagic[8] = {'M', 'O', 'E', 'D', 'T', 'C', 'K', 'P'};

template <typename U>
void put(std::string& out, U v) {
  char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  out.append(buf, sizeof(U));
}

template <typename U>
U get(const std::string& in, size_t at) {
  U v;
  std::memcpy(&v, in.data() + at, sizeof(U));
  return v;
}

}  // namespace

std::string encode_checkpoint(const ParamSet<float>& params, const CheckpointMeta& meta) {
  std::string payload;
  nlohmann::ordered_json tensors = nlohmann::ordered_json::array();
  for (const auto& [name, e] : params) {
    const auto values = e.tensor.data();
    const size_t bytes = values.size() * sizeof(float);
    nlohmann::ordered_json t;
    t["name"] = name;
    t["shape"] = e.tensor.shape();
    t["offset"] = payload.size();
    t["length"] = bytes;
    t["component"] = e.component.str();
    t["trainable"] = e.trainable;
    tensors.push_back(t);
    payload.append(reinterpret_cast<const char*>(values.data()), bytes);
  }
  nlohmann::ordered_json header;
  header["metadata"] = {{"config_hash", meta.config_hash}, {"stage", meta.stage}, {"step", meta.step}};
  header["payload_bytes"] = payload.size();
  header["payload_fnv1a64"] = hex64(fnv1a64(payload));
  header["tensors"] = tensors;
  const std::string h = header.dump();

  std::string out(kMagic, sizeof(kMagic));
  put<uint32_t>(out, kCheckpointVersion);
  put<uint64_t>(out, h.size());
  out += h;
  out += payload;
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  constexpr size_t prefix = sizeof(kMagic) + sizeof(uint32_t) + sizeof(uint64_t);
  if (bytes.size() < prefix) throw CheckpointTruncatedError("checkpoint: file shorter than its preamble");
  if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) throw Error("checkpoint: bad magic");
  const auto version = get<uint32_t>(bytes, sizeof(kMagic));
  if (version != kCheckpointVersion) {
    throw CheckpointVersionError("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto header_len = get<uint64_t>(bytes, sizeof(kMagic) + sizeof(uint32_t));
  if (bytes.size() - prefix < header_len) throw CheckpointTruncatedError("checkpoint: truncated header");
  const auto header = nlohmann::json::parse(bytes.substr(prefix, header_len));
  const size_t payload_at = prefix + header_len;
  const auto payload_bytes = header.at("payload_bytes").get<uint64_t>();
  if (bytes.size() - payload_at < payload_bytes) {
    throw CheckpointTruncatedError("checkpoint: payload has " + std::to_string(bytes.size() - payload_at) +
                                   " of " + std::to_string(payload_bytes) + " bytes");
  }
  if (bytes.size() - payload_at > payload_bytes) throw Error("checkpoint: trailing bytes after payload");
  const std::string_view payload(bytes.data() + payload_at, payload_bytes);
  if (hex64(fnv1a64(payload)) != header.at("payload_fnv1a64").get<std::string>()) {
    throw CheckpointHashError("checkpoint: payload hash mismatch");
  }

  Checkpoint ck;
  const auto& m = header.at("metadata");
  ck.meta.config_hash = m.at("config_hash").get<std::string>();
  ck.meta.stage = m.at("stage").get<std::string>();
  ck.meta.step = m.at("step").get<int64_t>();
  uint64_t expect = 0;
  for (const auto& t : header.at("tensors")) {
    const auto name = t.at("name").get<std::string>();
    const auto shape = t.at("shape").get<Shape>();
    const auto offset = t.at("offset").get<uint64_t>();
    const auto length = t.at("length").get<uint64_t>();
    if (offset != expect || length != static_cast<uint64_t>(shape_numel(shape)) * sizeof(float) ||
        offset + length > payload_bytes) {
      throw Error("checkpoint: tensor '" + name + "' has an inconsistent byte range");
    }
    std::vector<float> values(length / sizeof(float));
    std::memcpy(values.data(), payload.data() + offset, length);
    ck.params.add(name, shape, std::move(values), Component::parse(t.at("component").get<std::string>()),
                  t.at("trainable").get<bool>());
    expect = offset + length;
  }
  if (expect != payload_bytes) throw Error("checkpoint: tensors do not cover the payload");
  return ck;
}

void save_checkpoint(const ParamSet<float>& params, const CheckpointMeta& meta,
                     const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::string bytes = encode_checkpoint(params, meta);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

}  // namespace moedt
