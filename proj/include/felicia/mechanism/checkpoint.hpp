#pragma once

#include "felicia/core.hpp"
#include "felicia/mechanism/felicia.hpp"
#include "felicia/nn/architecture.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstring>
#include <tuple>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace felicia::mechanism {

namespace fs = std::filesystem;

struct CheckpointInfo {
  std::string id;
  int site = 0;
  long epoch = 0;
  std::uint64_t seed = 0;
  std::string architecture_hash;
  std::string file;
};

namespace detail {

inline constexpr char kCheckpointMagic[8] = {'F', 'E', 'L', 'C', 'K', 'P', 'T', '1'};

// Writes through a sibling temp file so readers never see a partial file.
inline void atomic_write(const fs::path& path, std::string_view bytes) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("rename " + tmp.string() + " -> " + path.string() + ": " + ec.message());
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace detail

// Directory of generator parameter blobs plus manifest.json.
// Blob layout: magic[8] | count u64 | fnv1a(values) u64 | count doubles (native endianness).
class CheckpointStore {
 public:
  explicit CheckpointStore(fs::path dir) : dir_(std::move(dir)) {
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec) throw IoError("cannot create checkpoint directory " + dir_.string() + ": " + ec.message());
    if (fs::exists(manifest_path())) load_manifest();
  }

  [[nodiscard]] const fs::path& directory() const { return dir_; }

  static std::string make_id(int site, long epoch, std::uint64_t seed) {
    return "site" + std::to_string(site) + "_epoch" + std::to_string(epoch) + "_seed" + std::to_string(seed);
  }

  std::string save(const nn::Network& generator, int site, long epoch, std::uint64_t seed) {
    FELICIA_REQUIRE(site >= 0 && epoch >= 0, "checkpoint: site and epoch must be non-negative");
    const auto params = generator.params();
    const std::uint64_t count = params.size();
    const std::uint64_t sum = fnv1a(params);
    std::string blob(sizeof(detail::kCheckpointMagic) + 16 + count * sizeof(double), '\0');
    char* p = blob.data();
    std::memcpy(p, detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic));
    std::memcpy(p + 8, &count, 8);
    std::memcpy(p + 16, &sum, 8);
    if (count) std::memcpy(p + 24, params.data(), count * sizeof(double));

    CheckpointInfo info;
    info.id = make_id(site, epoch, seed);
    info.site = site;
    info.epoch = epoch;
    info.seed = seed;
    info.architecture_hash = nn::architecture_hash(generator.spec());
    info.file = info.id + ".ckpt";
    detail::atomic_write(dir_ / info.file, blob);
    entries_[info.id] = info;
    architectures_[info.architecture_hash] = nlohmann::json(generator.spec());
    write_manifest();
    return info.id;
  }

  // Rebuilds the generator from the stored architecture and parameters.
  [[nodiscard]] nn::Network load(const std::string& id) const {
    const CheckpointInfo& info = at(id);
    const auto arch_it = architectures_.find(info.architecture_hash);
    if (arch_it == architectures_.end()) throw IoError("checkpoint " + id + ": architecture missing from manifest");
    auto spec = arch_it->second.get<nn::ArchitectureSpec>();
    if (nn::architecture_hash(spec) != info.architecture_hash)
      throw IoError("checkpoint " + id + ": architecture hash mismatch");
    nn::Network net(spec);
    load_params(info, net.params());
    return net;
  }

  // Loads parameters into an existing network of matching architecture.
  void load_into(const std::string& id, nn::Network& net) const {
    const CheckpointInfo& info = at(id);
    if (nn::architecture_hash(net.spec()) != info.architecture_hash)
      throw InvalidArgument("checkpoint " + id + ": architecture does not match target network");
    load_params(info, net.params());
  }

  [[nodiscard]] const CheckpointInfo& at(const std::string& id) const {
    const auto it = entries_.find(id);
    if (it == entries_.end()) throw IoError("unknown checkpoint id: " + id);
    return it->second;
  }

  [[nodiscard]] std::vector<CheckpointInfo> list() const {
    std::vector<CheckpointInfo> out;
    for (const auto& [_, v] : entries_) out.push_back(v);
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
      return std::tie(a.seed, a.site, a.epoch) < std::tie(b.seed, b.site, b.epoch);
    });
    return out;
  }

  [[nodiscard]] std::optional<CheckpointInfo> find(int site, long epoch, std::uint64_t seed) const {
    const auto it = entries_.find(make_id(site, epoch, seed));
    if (it == entries_.end()) return std::nullopt;
    return it->second;
  }

 private:
  [[nodiscard]] fs::path manifest_path() const { return dir_ / "manifest.json"; }

  void load_params(const CheckpointInfo& info, std::span<double> out) const {
    const std::string blob = detail::read_file(dir_ / info.file);
    if (blob.size() < 24 || std::memcmp(blob.data(), detail::kCheckpointMagic, 8) != 0)
      throw IoError("checkpoint " + info.id + ": bad header");
    std::uint64_t count = 0;
    std::uint64_t sum = 0;
    std::memcpy(&count, blob.data() + 8, 8);
    std::memcpy(&sum, blob.data() + 16, 8);
    if (blob.size() != 24 + count * sizeof(double)) throw IoError("checkpoint " + info.id + ": truncated blob");
    if (count != out.size())
      throw IoError("checkpoint " + info.id + ": parameter count " + std::to_string(count) + " != " +
                    std::to_string(out.size()));
    std::vector<double> values(count);
    if (count) std::memcpy(values.data(), blob.data() + 24, count * sizeof(double));
    if (fnv1a(values) != sum) throw IoError("checkpoint " + info.id + ": checksum mismatch");
    std::copy(values.begin(), values.end(), out.begin());
  }

  void write_manifest() const {
    nlohmann::json j;
    j["checkpoints"] = nlohmann::json::object();
    for (const auto& [id, e] : entries_)
      j["checkpoints"][id] = {{"site", e.site},
                              {"epoch", e.epoch},
                              {"seed", e.seed},
                              {"architecture_hash", e.architecture_hash},
                              {"file", e.file}};
    j["architectures"] = nlohmann::json::object();
    for (const auto& [h, a] : architectures_) j["architectures"][h] = a;
    detail::atomic_write(manifest_path(), j.dump(2));
  }

  void load_manifest() {
    try {
      const auto j = nlohmann::json::parse(detail::read_file(manifest_path()));
      for (const auto& [id, e] : j.at("checkpoints").items()) {
        CheckpointInfo info;
        info.id = id;
        info.site = e.at("site").get<int>();
        info.epoch = e.at("epoch").get<long>();
        info.seed = e.at("seed").get<std::uint64_t>();
        info.architecture_hash = e.at("architecture_hash").get<std::string>();
        info.file = e.at("file").get<std::string>();
        entries_[id] = info;
      }
      for (const auto& [h, a] : j.at("architectures").items()) architectures_[h] = a;
    } catch (const nlohmann::json::exception& e) {
      throw IoError("corrupt checkpoint manifest " + manifest_path().string() + ": " + e.what());
    }
  }

  fs::path dir_;
  std::map<std::string, CheckpointInfo> entries_;
  std::map<std::string, nlohmann::json> architectures_;
};

// Persists every site's generator; returns ids in site order.
inline std::vector<std::string> checkpoint_generators(const FeliciaState& state, long epoch, CheckpointStore& store,
                                                      std::uint64_t seed) {
  std::vector<std::string> ids;
  for (const auto& s : state.sites) ids.push_back(store.save(s.pair.generator, s.site_id, epoch, seed));
  return ids;
}

}  // namespace felicia::mechanism
