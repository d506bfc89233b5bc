#pragma once

// Checkpoint layout (version 1):
//
//   CSHIFT-CKPT-1\n
//   <decimal byte length of the JSON header>\n
//   <JSON header>            {"architecture", "seed", "epoch", "metrics", "parameter_count", ...}
//   <parameter blob>         parameter_count little-endian IEEE-754 binary64 values,
//                            in Network::flat_parameters() order

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "cshift/diffnet.hpp"

namespace cshift {

inline constexpr const char* kCheckpointMagic = "CSHIFT-CKPT-1";

namespace detail {

inline void write_f64le(std::ostream& os, std::span<const double> values) {
  std::vector<unsigned char> buf(values.size() * 8);
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint64_t bits = std::bit_cast<std::uint64_t>(values[i]);
    for (int b = 0; b < 8; ++b) buf[i * 8 + b] = static_cast<unsigned char>((bits >> (8 * b)) & 0xFF);
  }
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

inline std::vector<double> decode_f64le(const unsigned char* p, std::size_t count) {
  std::vector<double> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(p[i * 8 + b]) << (8 * b);
    out[i] = std::bit_cast<double>(bits);
  }
  return out;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace detail

struct Checkpoint {
  Network network;
  nlohmann::json header;
};

inline void save_checkpoint(const std::filesystem::path& path, const Network& net, nlohmann::json header = {}) {
  if (header.is_null()) header = nlohmann::json::object();
  header["architecture"] = net.descriptor();
  header["parameter_count"] = net.parameter_count();
  header["dtype"] = "f64le";
  const std::string text = header.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out << kCheckpointMagic << '\n' << text.size() << '\n' << text;
  const auto params = net.flat_parameters();
  detail::write_f64le(out, params);
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string raw = detail::read_file(path);
  const std::string magic = std::string(kCheckpointMagic) + "\n";
  if (raw.compare(0, magic.size(), magic) != 0) throw std::runtime_error(path.string() + ": bad magic, not a CSHIFT-CKPT-1 file");
  const auto nl = raw.find('\n', magic.size());
  if (nl == std::string::npos) throw std::runtime_error(path.string() + ": missing header length");
  std::size_t header_len = 0;
  try {
    header_len = std::stoul(raw.substr(magic.size(), nl - magic.size()));
  } catch (const std::exception&) {
    throw std::runtime_error(path.string() + ": malformed header length");
  }
  const std::size_t header_begin = nl + 1;
  if (header_begin + header_len > raw.size()) throw std::runtime_error(path.string() + ": truncated header");
  Checkpoint ck;
  try {
    ck.header = nlohmann::json::parse(raw.substr(header_begin, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path.string() + ": header is not valid JSON: " + e.what());
  }
  if (!ck.header.contains("architecture") || !ck.header["architecture"].is_string()) {
    throw std::runtime_error(path.string() + ": header field 'architecture' missing");
  }
  ck.network = Network::from_descriptor(ck.header["architecture"].get<std::string>());
  const std::size_t count = ck.network.parameter_count();
  if (ck.header.value("parameter_count", count) != count) {
    throw std::runtime_error(path.string() + ": header field 'parameter_count' disagrees with architecture");
  }
  const std::size_t blob = raw.size() - header_begin - header_len;
  if (blob != count * 8) {
    throw std::runtime_error(path.string() + ": parameter blob has " + std::to_string(blob) + " bytes, expected " +
                             std::to_string(count * 8));
  }
  ck.network.set_flat_parameters(
      detail::decode_f64le(reinterpret_cast<const unsigned char*>(raw.data() + header_begin + header_len), count));
  return ck;
}

}  // namespace cshift
