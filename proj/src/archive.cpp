#include "modelprobe/archive.hpp"

#include <zlib.h>

#include <algorithm>
#include <cstring>
#include <map>
#include <random>

#include "json.hpp"
#include "modelprobe/engine.hpp"
#include "modelprobe/error.hpp"
#include "modelprobe/tflite.hpp"

namespace modelprobe {

namespace fs = std::filesystem;

namespace {

constexpr std::uint32_t kEocdSig = 0x06054b50;
constexpr std::uint32_t kCentralSig = 0x02014b50;
constexpr std::uint32_t kLocalSig = 0x04034b50;

std::uint16_t le16(const std::vector<std::uint8_t>& b, std::size_t at) {
  return static_cast<std::uint16_t>(b[at] | (b[at + 1] << 8));
}
std::uint32_t le32(const std::vector<std::uint8_t>& b, std::size_t at) {
  return static_cast<std::uint32_t>(b[at]) | (static_cast<std::uint32_t>(b[at + 1]) << 8) |
         (static_cast<std::uint32_t>(b[at + 2]) << 16) | (static_cast<std::uint32_t>(b[at + 3]) << 24);
}

[[noreturn]] void not_zip(const fs::path& path, const std::string& why) {
  throw Error(ErrorCode::NotAnArchive, path.string() + ": " + why);
}

std::vector<std::uint8_t> inflate_raw(const std::uint8_t* data, std::size_t size, std::uint64_t expected) {
  std::vector<std::uint8_t> out(expected);
  z_stream zs{};
  if (inflateInit2(&zs, -MAX_WBITS) != Z_OK) throw Error(ErrorCode::IoFailure, "zlib initialisation failed");
  zs.next_in = const_cast<Bytef*>(data);
  zs.avail_in = static_cast<uInt>(size);
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(out.size());
  int rc = inflate(&zs, Z_FINISH);
  auto produced = zs.total_out;
  inflateEnd(&zs);
  if (rc != Z_STREAM_END || produced != expected) throw Error(ErrorCode::Truncated, "deflate stream is damaged");
  return out;
}

}  // namespace

ZipArchive ZipArchive::open(const fs::path& path) {
  std::error_code ec;
  if (!fs::is_regular_file(path, ec)) throw Error(ErrorCode::IoFailure, "cannot open archive: " + path.string());
  return from_bytes(read_file(path), path);
}

ZipArchive ZipArchive::from_bytes(std::vector<std::uint8_t> bytes, fs::path path) {
  ZipArchive z;
  z.path_ = std::move(path);
  z.bytes_ = std::move(bytes);
  const auto& b = z.bytes_;
  if (b.size() < 22) not_zip(z.path_, "too short for a ZIP container");
  // The end record sits within the last 22 + 65535 bytes (trailing comment).
  std::optional<std::size_t> eocd;
  std::size_t floor = b.size() > 22 + 65535 ? b.size() - 22 - 65535 : 0;
  for (std::size_t at = b.size() - 22 + 1; at-- > floor;) {
    if (le32(b, at) == kEocdSig && at + 22 + le16(b, at + 20) == b.size()) {
      eocd = at;
      break;
    }
  }
  if (!eocd) not_zip(z.path_, "no end-of-central-directory record");
  std::uint16_t count = le16(b, *eocd + 10);
  std::uint32_t cd_size = le32(b, *eocd + 12);
  std::uint32_t cd_offset = le32(b, *eocd + 16);
  if (count == 0xFFFF || cd_offset == 0xFFFFFFFF) not_zip(z.path_, "ZIP64 archives are not supported");
  if (static_cast<std::uint64_t>(cd_offset) + cd_size > *eocd) not_zip(z.path_, "central directory out of range");

  std::size_t at = cd_offset;
  for (std::uint16_t i = 0; i < count; ++i) {
    if (at + 46 > *eocd || le32(b, at) != kCentralSig) not_zip(z.path_, "corrupt central directory");
    ZipEntry e;
    e.flags = le16(b, at + 8);
    e.method = le16(b, at + 10);
    e.crc32 = le32(b, at + 16);
    e.compressed_size = le32(b, at + 20);
    e.size = le32(b, at + 24);
    std::uint16_t name_len = le16(b, at + 28);
    std::uint16_t extra_len = le16(b, at + 30);
    std::uint16_t comment_len = le16(b, at + 32);
    e.local_header_offset = le32(b, at + 42);
    if (at + 46 + name_len > *eocd) not_zip(z.path_, "corrupt central directory");
    e.name.assign(reinterpret_cast<const char*>(b.data() + at + 46), name_len);
    z.entries_.push_back(std::move(e));
    at += 46u + name_len + extra_len + comment_len;
  }
  return z;
}

std::vector<std::uint8_t> ZipArchive::read(const ZipEntry& e) const {
  const auto& b = bytes_;
  if (e.flags & 1u) throw Error(ErrorCode::InvalidArgument, e.name + ": encrypted entries are not supported");
  std::size_t at = e.local_header_offset;
  if (at + 30 > b.size() || le32(b, at) != kLocalSig) throw Error(ErrorCode::Truncated, e.name + ": bad local header");
  std::size_t data = at + 30 + le16(b, at + 26) + le16(b, at + 28);
  if (data + e.compressed_size > b.size()) throw Error(ErrorCode::Truncated, e.name + ": entry data out of range");
  std::vector<std::uint8_t> out;
  if (e.method == 0) {
    if (e.compressed_size != e.size) throw Error(ErrorCode::Truncated, e.name + ": stored size mismatch");
    out.assign(b.begin() + static_cast<long>(data), b.begin() + static_cast<long>(data + e.size));
  } else if (e.method == 8) {
    out = inflate_raw(b.data() + data, e.compressed_size, e.size);
  } else {
    throw Error(ErrorCode::InvalidArgument, e.name + ": unsupported compression method " + std::to_string(e.method));
  }
  auto crc = crc32(0L, out.data(), static_cast<uInt>(out.size()));
  if (crc != e.crc32) throw Error(ErrorCode::Truncated, e.name + ": CRC mismatch");
  return out;
}

std::string_view to_string(Detection d) { return d == Detection::ByExtension ? "ByExtension" : "ByMagic"; }

std::string_view to_string(Operability o) {
  switch (o) {
    case Operability::Executable: return "Executable";
    case Operability::ParsedNotExecutable: return "ParsedNotExecutable";
    case Operability::Invalid: return "Invalid";
  }
  return "Invalid";
}

bool has_model_extension(std::string_view name) {
  auto lower = std::string(name);
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  return lower.ends_with(".tflite") || lower.ends_with(".lite");
}

std::vector<ModelCandidate> scan_archive(const fs::path& path) {
  auto zip = ZipArchive::open(path);
  std::vector<ModelCandidate> out;
  for (const auto& e : zip.entries()) {
    if (e.is_directory() || e.name.empty()) continue;
    ModelCandidate c{path, e.name, Detection::ByExtension, e.size};
    if (has_model_extension(e.name)) {
      out.push_back(std::move(c));
      continue;
    }
    try {
      if (has_tflite_identifier(zip.read(e))) {
        c.detection = Detection::ByMagic;
        out.push_back(std::move(c));
      }
    } catch (const Error&) {
      // unreadable entries without a model name are not candidates
    }
  }
  return out;
}

Operability assess_operability(std::span<const std::uint8_t> bytes, std::uint64_t seed, std::string* detail) {
  ModelGraph graph;
  try {
    graph = parse_model(bytes);
  } catch (const Error& e) {
    if (detail) *detail = std::string(to_string(e.code())) + ": " + e.what();
    return Operability::Invalid;
  }
  try {
    auto net = EngineModel::from_graph(graph);
    const auto& info = graph.tensors[static_cast<std::size_t>(graph.inputs.front())];
    TensorF x(net.input_shape());
    std::mt19937_64 rng(seed);
    if ((info.dtype == DType::UInt8 || info.dtype == DType::Int8) && info.quantization) {
      int lo = info.dtype == DType::UInt8 ? 0 : -128;
      std::uniform_int_distribution<int> q(lo, lo + 255);
      double s = info.quantization->scale[0];
      auto zp = static_cast<double>(info.quantization->zero_point[0]);
      for (Eigen::Index i = 0; i < x.size(); ++i) x.data[i] = static_cast<float>(s * (q(rng) - zp));
    } else {
      std::uniform_real_distribution<float> u(0.0f, 1.0f);
      for (Eigen::Index i = 0; i < x.size(); ++i) x.data[i] = u(rng);
    }
    auto logits = net.forward(x, net.quantized() ? Precision::Quantized : Precision::Float);
    if (!logits.data.allFinite()) {
      if (detail) *detail = "forward pass produced non-finite values";
      return Operability::ParsedNotExecutable;
    }
  } catch (const Error& e) {
    if (detail) *detail = std::string(to_string(e.code())) + ": " + e.what();
    return Operability::ParsedNotExecutable;
  }
  return Operability::Executable;
}

std::vector<ExtractedModel> extract_models(const std::vector<ModelCandidate>& candidates, const fs::path& out_dir,
                                           std::uint64_t seed, std::vector<std::string>* log) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw Error(ErrorCode::IoFailure, "cannot create " + out_dir.string() + ": " + ec.message());
  std::map<fs::path, ZipArchive> archives;
  std::map<Digest, std::pair<fs::path, std::pair<Operability, std::string>>> seen;
  std::vector<ExtractedModel> out;
  for (const auto& c : candidates) {
    auto it = archives.find(c.archive_path);
    if (it == archives.end()) it = archives.emplace(c.archive_path, ZipArchive::open(c.archive_path)).first;
    const auto& zip = it->second;
    ExtractedModel m;
    m.candidate = c;
    auto entry = std::find_if(zip.entries().begin(), zip.entries().end(),
                              [&](const ZipEntry& e) { return e.name == c.entry_name; });
    std::vector<std::uint8_t> bytes;
    try {
      if (entry == zip.entries().end()) throw Error(ErrorCode::IoFailure, "entry not found");
      bytes = zip.read(*entry);
    } catch (const Error& e) {
      m.operability = Operability::Invalid;
      m.detail = std::string("unreadable entry: ") + e.what();
      out.push_back(std::move(m));
      continue;
    }
    m.bytes_digest = Digest::of(bytes);
    m.candidate.size_bytes = bytes.size();
    if (auto dup = seen.find(m.bytes_digest); dup != seen.end()) {
      m.output_path = dup->second.first;
      m.operability = dup->second.second.first;
      m.detail = dup->second.second.second;
      if (log) log->push_back("duplicate of " + m.bytes_digest.hex() + ": " + c.entry_name);
    } else {
      m.output_path = out_dir / (m.bytes_digest.hex() + ".tflite");
      write_file(m.output_path, bytes);
      m.operability = assess_operability(bytes, seed, &m.detail);
      seen.emplace(m.bytes_digest, std::pair{m.output_path, std::pair{m.operability, m.detail}});
    }
    out.push_back(std::move(m));
  }
  return out;
}

std::string extraction_manifest_json(const std::vector<ExtractedModel>& models, std::uint64_t seed) {
  nlohmann::json records = nlohmann::json::array();
  for (const auto& m : models) {
    records.push_back({{"archive", m.candidate.archive_path.string()},
                       {"entry", m.candidate.entry_name},
                       {"detection", to_string(m.candidate.detection)},
                       {"digest", m.output_path.empty() ? nlohmann::json(nullptr) : nlohmann::json(m.bytes_digest.hex())},
                       {"operability", to_string(m.operability)},
                       {"size_bytes", m.candidate.size_bytes}});
  }
  return nlohmann::json{{"operability_seed", seed}, {"models", records}}.dump(1);
}

}  // namespace modelprobe
