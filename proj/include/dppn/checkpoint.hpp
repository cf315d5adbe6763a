#pragma once
// Binary container for named float32 tensors: 8-byte magic, u32 JSON header
// length, JSON header (names, shapes, offsets, payload crc32), then the raw
// little-endian float32 payload. Round-trips are bit-exact.
//
// The same container backs weight checkpoints, assignment profiles, and
// pattern reservoirs.

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dppn/optim.hpp"
#include "dppn/tensor.hpp"

namespace dppn {

inline constexpr char kWeightMagic[8] = {'D', 'P', 'P', 'N', 'W', '0', '0', '1'};

inline void save_tensors(const std::string& path, const ParamMap& params) {
  nlohmann::json header;
  header["tensors"] = nlohmann::json::array();
  std::vector<float> payload;
  for (const auto& [name, t] : params) {
    nlohmann::json e;
    e["name"] = name;
    e["shape"] = t.shape();
    e["offset"] = payload.size() * sizeof(float);
    e["nbytes"] = t.values().size() * sizeof(float);
    header["tensors"].push_back(e);
    payload.insert(payload.end(), t.values().begin(), t.values().end());
  }
  const auto* pbytes = reinterpret_cast<const unsigned char*>(payload.data());
  const size_t pb = payload.size() * sizeof(float);
  header["crc32"] = static_cast<uint32_t>(crc32(0, pbytes, static_cast<uInt>(pb)));
  const std::string hs = header.dump();

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("save_tensors: cannot open " + path);
  f.write(kWeightMagic, 8);
  uint32_t hl = static_cast<uint32_t>(hs.size());
  f.write(reinterpret_cast<const char*>(&hl), 4);
  f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  f.write(reinterpret_cast<const char*>(pbytes), static_cast<std::streamsize>(pb));
  if (!f) throw std::runtime_error("save_tensors: write failed for " + path);
}

inline ParamMap load_tensors(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_tensors: cannot open " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kWeightMagic, 8) != 0)
    throw std::runtime_error("load_tensors: bad magic in " + path);
  uint32_t hl = 0;
  f.read(reinterpret_cast<char*>(&hl), 4);
  std::string hs(hl, '\0');
  f.read(hs.data(), hl);
  if (!f) throw std::runtime_error("load_tensors: truncated header in " + path);
  nlohmann::json header = nlohmann::json::parse(hs);
  std::vector<char> payload((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  const auto crc =
      static_cast<uint32_t>(crc32(0, reinterpret_cast<const unsigned char*>(payload.data()),
                                  static_cast<uInt>(payload.size())));
  if (crc != header.at("crc32").get<uint32_t>())
    throw std::runtime_error("load_tensors: checksum mismatch in " + path);

  ParamMap out;
  for (const auto& e : header.at("tensors")) {
    Shape shape = e.at("shape").get<Shape>();
    const size_t off = e.at("offset").get<size_t>();
    const size_t nb = e.at("nbytes").get<size_t>();
    if (off + nb > payload.size()) throw std::runtime_error("load_tensors: payload overrun in " + path);
    std::vector<float> vals(nb / sizeof(float));
    std::memcpy(vals.data(), payload.data() + off, nb);
    // Snapshots hold trainable weights; restored tensors go straight back
    // into the optimizer path.
    out.emplace_back(e.at("name").get<std::string>(), Tensor::from(shape, std::move(vals), true));
  }
  return out;
}

}  // namespace dppn
