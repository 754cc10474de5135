#include "retlab/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>

#include <json.hpp>

#include "retlab/config.hpp"

namespace retlab::cli {

using nlohmann::json;

namespace {

void write_f64_le(std::ofstream& out, const std::vector<double>& values) {
  for (double v : values) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    unsigned char bytes[8];
    for (int i = 0; i < 8; ++i) {
      bytes[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xffU);
    }
    out.write(reinterpret_cast<const char*>(bytes), 8);
  }
}

std::vector<double> read_f64_le(std::ifstream& in, std::size_t count) {
  std::vector<double> values(count);
  for (std::size_t i = 0; i < count; ++i) {
    unsigned char bytes[8];
    in.read(reinterpret_cast<char*>(bytes), 8);
    if (!in) throw DataError("checkpoint: truncated payload");
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) {
      bits |= static_cast<std::uint64_t>(bytes[b]) << (8 * b);
    }
    values[i] = std::bit_cast<double>(bits);
  }
  return values;
}

}  // namespace

void save_checkpoint(const std::string& path, const enc::Encoder& encoder) {
  json header;
  header["format_version"] = kCheckpointFormatVersion;
  header["encoder"] = encoder_config_to_json(encoder.config());
  json manifest = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, tensor] : encoder.parameters()) {
    json entry;
    entry["name"] = name;
    entry["shape"] = tensor.shape();
    entry["offset"] = offset;
    manifest.push_back(entry);
    offset += tensor.size() * sizeof(double);
  }
  header["manifest"] = manifest;

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("checkpoint: cannot open " + path + " for writing");
  out << header.dump() << "\n";
  for (const auto& [name, tensor] : encoder.parameters()) {
    write_f64_le(out, tensor.data());
  }
  if (!out) throw DataError("checkpoint: write failed for " + path);
}

enc::Encoder load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot open " + path);
  std::string header_line;
  if (!std::getline(in, header_line)) {
    throw DataError("checkpoint: missing header line in " + path);
  }
  json header;
  try {
    header = json::parse(header_line);
  } catch (const json::parse_error& err) {
    throw DataError(std::string("checkpoint: invalid header: ") + err.what());
  }
  if (!header.contains("format_version") ||
      header.at("format_version").get<int>() != kCheckpointFormatVersion) {
    throw DataError("checkpoint: unknown format_version in " + path);
  }
  const enc::EncoderConfig config =
      encoder_config_from_json(header.at("encoder"), "checkpoint.encoder.");

  enc::Encoder encoder(config, 0);
  const json& manifest = header.at("manifest");
  if (manifest.size() != encoder.parameters().size()) {
    throw DataError("checkpoint: manifest lists " +
                    std::to_string(manifest.size()) + " tensors, model has " +
                    std::to_string(encoder.parameters().size()));
  }
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    const json& entry = manifest.at(i);
    const std::string name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
    const auto& [expected_name, tensor] = encoder.parameters()[i];
    if (name != expected_name || shape != tensor.shape()) {
      throw DataError("checkpoint: manifest entry \"" + name +
                      "\" does not match model parameter \"" + expected_name +
                      "\"");
    }
    encoder.set_parameter_data(name, read_f64_le(in, tensor.size()));
  }
  return encoder;
}

}  // namespace retlab::cli
