#include "treelm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace treelm {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian");

namespace {

constexpr char kMagic[8] = {'T', 'L', 'M', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint32_t kVersion = 1;

void write_bytes(std::ofstream& out, const void* p, std::size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void read_bytes(std::ifstream& in, void* p, std::size_t n,
                const std::string& path) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n)
    fail(Error::Kind::Io, "checkpoint " + path + " truncated");
}

}  // namespace

void AdamState::init_like(ModelParams<float>& params) {
  m.clear();
  v.clear();
  for (auto& p : params.parameters()) {
    m.emplace_back(static_cast<std::size_t>(p.tensor->size()), 0.0f);
    v.emplace_back(static_cast<std::size_t>(p.tensor->size()), 0.0f);
  }
  t = 0;
}

void save_checkpoint(const std::string& path, ModelParams<float>& params,
                     const AdamState& adam, const TrainCounters& counters,
                     const std::string& rng_state, const std::string& vocab_hash,
                     const json& run_config) {
  auto plist = params.parameters();
  if (adam.m.size() != plist.size() || adam.v.size() != plist.size())
    fail(Error::Kind::Shape, "optimizer state does not match parameter list");

  json manifest = json::array();
  for (auto& p : plist)
    manifest.push_back(json{{"name", p.name}, {"dims", p.tensor->dims()}});
  json header{{"config", params.cfg.to_json()},
              {"run_config", run_config},
              {"counters",
               {{"epoch", counters.epoch}, {"global_step", counters.global_step},
                {"adam_t", adam.t}}},
              {"rng", rng_state},
              {"vocab_hash", vocab_hash},
              {"tensors", manifest}};
  const std::string header_text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(Error::Kind::Io, "cannot write checkpoint " + path);
  write_bytes(out, kMagic, sizeof(kMagic));
  write_bytes(out, &kVersion, sizeof(kVersion));
  const std::uint64_t len = header_text.size();
  write_bytes(out, &len, sizeof(len));
  write_bytes(out, header_text.data(), header_text.size());
  for (auto& p : plist)
    write_bytes(out, p.tensor->data(),
                static_cast<std::size_t>(p.tensor->size()) * sizeof(float));
  for (std::size_t i = 0; i < plist.size(); ++i)
    write_bytes(out, adam.m[i].data(), adam.m[i].size() * sizeof(float));
  for (std::size_t i = 0; i < plist.size(); ++i)
    write_bytes(out, adam.v[i].data(), adam.v[i].size() * sizeof(float));
  out.flush();
  if (!out) fail(Error::Kind::Io, "failed writing checkpoint " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Error::Kind::Io, "cannot open checkpoint " + path);

  char magic[8];
  read_bytes(in, magic, sizeof(magic), path);
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    fail(Error::Kind::Parse, "checkpoint " + path + ": bad magic");
  std::uint32_t version = 0;
  read_bytes(in, &version, sizeof(version), path);
  if (version != kVersion)
    fail(Error::Kind::Parse, "checkpoint " + path + ": unsupported version " +
                                 std::to_string(version));
  std::uint64_t len = 0;
  read_bytes(in, &len, sizeof(len), path);
  std::string header_text(len, '\0');
  read_bytes(in, header_text.data(), len, path);

  Checkpoint ck;
  json header;
  try {
    header = json::parse(header_text);
    ck.config = ModelConfig::from_json(header.at("config"));
    ck.run_config = header.value("run_config", json::object());
    ck.counters.epoch = header.at("counters").at("epoch").get<std::int64_t>();
    ck.counters.global_step =
        header.at("counters").at("global_step").get<std::int64_t>();
    ck.adam.t = header.at("counters").at("adam_t").get<std::int64_t>();
    ck.rng_state = header.at("rng").get<std::string>();
    ck.vocab_hash = header.at("vocab_hash").get<std::string>();
    for (const json& m : header.at("tensors"))
      ck.manifest.emplace_back(m.at("name").get<std::string>(),
                               m.at("dims").get<std::vector<int>>());
  } catch (const json::exception& e) {
    fail(Error::Kind::Parse, "checkpoint " + path + ": bad header: " + e.what());
  }

  auto read_blobs = [&](std::vector<std::vector<float>>& dst) {
    dst.clear();
    for (auto& [name, dims] : ck.manifest) {
      std::size_t n = 1;
      for (int d : dims) n *= static_cast<std::size_t>(d);
      std::vector<float> blob(n);
      read_bytes(in, blob.data(), n * sizeof(float), path);
      dst.push_back(std::move(blob));
    }
  };
  read_blobs(ck.tensors);
  read_blobs(ck.adam.m);
  read_blobs(ck.adam.v);
  char extra;
  if (in.read(&extra, 1); in.gcount() != 0)
    fail(Error::Kind::Parse, "checkpoint " + path + ": trailing bytes");
  return ck;
}

ModelParams<float> Checkpoint::build_params() const {
  ModelParams<float> params = init_model_params<float>(config, /*seed=*/0);
  auto plist = params.parameters();
  if (plist.size() != manifest.size())
    fail(Error::Kind::Shape, "checkpoint manifest does not match model layout");
  for (std::size_t i = 0; i < plist.size(); ++i) {
    const auto& [name, dims] = manifest[i];
    if (plist[i].name != name || plist[i].tensor->dims() != dims)
      fail(Error::Kind::Shape, "checkpoint tensor `" + name +
                                   "` does not match expected `" +
                                   plist[i].name + "`");
    if (static_cast<std::size_t>(plist[i].tensor->size()) != tensors[i].size())
      fail(Error::Kind::Shape, "checkpoint tensor `" + name + "` size mismatch");
    std::memcpy(plist[i].tensor->data(), tensors[i].data(),
                tensors[i].size() * sizeof(float));
  }
  return params;
}

}  // namespace treelm
