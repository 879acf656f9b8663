#include "zeco/checkpoint.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "zeco/error.hpp"

namespace zeco {

static_assert(std::endian::native == std::endian::little,
              "archives are little-endian; big-endian hosts need byte swapping");

namespace {

constexpr char kMagic[8] = {'Z', 'E', 'C', 'O', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new()) { EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr); }
  ~Sha256() { EVP_MD_CTX_free(ctx_); }
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(const void* data, std::size_t n) { EVP_DigestUpdate(ctx_, data, n); }
  void update(std::string_view s) { update(s.data(), s.size()); }

  std::string hex() {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx_, digest, &len);
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i) {
      os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
    }
    return os.str();
  }

 private:
  EVP_MD_CTX* ctx_;
};

torch::Tensor as_f32(const torch::Tensor& t) {
  return t.detach().to(torch::kCPU, torch::kFloat32).contiguous();
}

std::vector<std::pair<std::string, torch::Tensor>> module_tensors(const torch::nn::Module& module) {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (const auto& p : module.named_parameters(true)) out.emplace_back(p.key(), p.value());
  for (const auto& b : module.named_buffers(true)) out.emplace_back(b.key(), b.value());
  return out;
}

void hash_arrays(Sha256& h, const std::vector<std::pair<std::string, torch::Tensor>>& arrays) {
  for (const auto& [name, t] : arrays) {
    const auto f = as_f32(t);
    h.update(name);
    for (auto d : f.sizes()) {
      const std::int64_t dim = d;
      h.update(&dim, sizeof dim);
    }
    h.update(f.data_ptr<float>(), static_cast<std::size_t>(f.numel()) * sizeof(float));
  }
}

}  // namespace

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  Sha256 h;
  h.update(bytes.data(), bytes.size());
  return h.hex();
}

std::string sha256_hex(std::string_view text) {
  Sha256 h;
  h.update(text);
  return h.hex();
}

void ParameterStore::set(const std::string& name, const torch::Tensor& value) {
  auto stored = as_f32(value).clone();
  for (auto& [n, t] : arrays_) {
    if (n == name) {
      t = stored;
      return;
    }
  }
  arrays_.emplace_back(name, stored);
}

const torch::Tensor& ParameterStore::get(const std::string& name) const {
  for (const auto& [n, t] : arrays_) {
    if (n == name) return t;
  }
  throw Error(ErrorCode::InvalidArgument, "no array named '" + name + "' in " + kind + " store");
}

bool ParameterStore::contains(const std::string& name) const {
  for (const auto& entry : arrays_) {
    if (entry.first == name) return true;
  }
  return false;
}

std::string ParameterStore::checksum() const {
  Sha256 h;
  hash_arrays(h, arrays_);
  return h.hex();
}

void ParameterStore::capture(const torch::nn::Module& module, const std::string& prefix) {
  for (const auto& [name, t] : module_tensors(module)) set(prefix + name, t);
}

void ParameterStore::restore(torch::nn::Module& module, const std::string& prefix) const {
  torch::NoGradGuard no_grad;
  for (auto& [name, t] : module_tensors(module)) {
    const auto& src = get(prefix + name);
    if (src.sizes() != t.sizes()) {
      throw Error(ErrorCode::ShapeMismatch, "array '" + prefix + name + "' has shape " +
                                                c10::str(src.sizes()) + ", module expects " +
                                                c10::str(t.sizes()));
    }
    auto target = t;
    target.copy_(src.to(t.dtype()));
  }
}

std::string module_checksum(const torch::nn::Module& module) {
  Sha256 h;
  hash_arrays(h, module_tensors(module));
  return h.hex();
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::IoError, "cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::IoError, "short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void write_text_atomic(const std::filesystem::path& path, std::string_view text) {
  write_file_atomic(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

void save_checkpoint(const ParameterStore& store, const std::filesystem::path& path) {
  std::vector<std::uint8_t> payload;
  nlohmann::json arrays = nlohmann::json::array();
  for (const auto& [name, t] : store.arrays()) {
    const auto f = as_f32(t);
    const auto nbytes = static_cast<std::size_t>(f.numel()) * sizeof(float);
    arrays.push_back({{"name", name},
                      {"shape", f.sizes().vec()},
                      {"offset", payload.size()},
                      {"nbytes", nbytes}});
    const auto* p = reinterpret_cast<const std::uint8_t*>(f.data_ptr<float>());
    payload.insert(payload.end(), p, p + nbytes);
  }

  nlohmann::json manifest = {
      {"kind", store.kind},
      {"config_hash", store.config_hash},
      {"step", store.step},
      {"parent_hash", store.parent_hash},
      {"frozen_backbone_hash", store.frozen_backbone_hash},
      {"meta", store.meta},
      {"dtype", "float32"},
      {"arrays", arrays},
      {"payload_sha256", sha256_hex(payload)},
      {"store_checksum", store.checksum()},
  };
  const std::string text = manifest.dump();

  std::vector<std::uint8_t> file;
  file.reserve(16 + 8 + text.size() + payload.size());
  file.insert(file.end(), kMagic, kMagic + 8);
  auto put = [&file](const auto& v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    file.insert(file.end(), p, p + sizeof v);
  };
  put(kVersion);
  put(std::uint32_t{0});
  put(static_cast<std::uint64_t>(text.size()));
  file.insert(file.end(), text.begin(), text.end());
  file.insert(file.end(), payload.begin(), payload.end());
  write_file_atomic(path, file);
}

ParameterStore load_checkpoint(const std::filesystem::path& path,
                               const std::optional<std::string>& expected_config_hash) {
  if (!std::filesystem::exists(path)) {
    throw Error(ErrorCode::MissingCheckpoint, "checkpoint not found: " + path.string());
  }
  std::ifstream in(path, std::ios::binary);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 24 || std::memcmp(bytes.data(), kMagic, 8) != 0) {
    throw Error(ErrorCode::HeaderError, path.string() + " is not a checkpoint archive");
  }
  std::uint32_t version = 0;
  std::memcpy(&version, bytes.data() + 8, 4);
  if (version != kVersion) {
    throw Error(ErrorCode::HeaderError, "unsupported checkpoint version " + std::to_string(version));
  }
  std::uint64_t manifest_len = 0;
  std::memcpy(&manifest_len, bytes.data() + 16, 8);
  if (24 + manifest_len > bytes.size()) {
    throw Error(ErrorCode::TruncatedPayload, path.string() + ": manifest extends past end of file");
  }
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.begin() + 24, bytes.begin() + 24 + static_cast<std::ptrdiff_t>(manifest_len));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::MetadataError, path.string() + ": " + e.what());
  }
  const std::span<const std::uint8_t> payload(bytes.data() + 24 + manifest_len, bytes.size() - 24 - manifest_len);
  if (sha256_hex(payload) != manifest.at("payload_sha256").get<std::string>()) {
    throw Error(ErrorCode::ChecksumMismatch, path.string() + ": payload checksum does not match manifest");
  }

  ParameterStore store;
  store.kind = manifest.at("kind").get<std::string>();
  store.config_hash = manifest.at("config_hash").get<std::string>();
  store.step = manifest.at("step").get<std::int64_t>();
  store.parent_hash = manifest.at("parent_hash").get<std::string>();
  store.frozen_backbone_hash = manifest.at("frozen_backbone_hash").get<std::string>();
  store.meta = manifest.at("meta");
  for (const auto& a : manifest.at("arrays")) {
    const auto shape = a.at("shape").get<std::vector<std::int64_t>>();
    const auto offset = a.at("offset").get<std::size_t>();
    const auto nbytes = a.at("nbytes").get<std::size_t>();
    if (offset + nbytes > payload.size()) {
      throw Error(ErrorCode::TruncatedPayload, "array " + a.at("name").get<std::string>() + " is truncated");
    }
    auto t = torch::empty(shape, torch::kFloat32);
    if (static_cast<std::size_t>(t.numel()) * sizeof(float) != nbytes) {
      throw Error(ErrorCode::ShapeMismatch, "array " + a.at("name").get<std::string>() + " size disagrees with shape");
    }
    std::memcpy(t.data_ptr<float>(), payload.data() + offset, nbytes);
    store.set(a.at("name").get<std::string>(), t);
  }
  if (store.checksum() != manifest.at("store_checksum").get<std::string>()) {
    throw Error(ErrorCode::ChecksumMismatch, path.string() + ": array checksum does not match manifest");
  }
  if (expected_config_hash && *expected_config_hash != store.config_hash) {
    throw Error(ErrorCode::ConfigHashMismatch, path.string() + " was written for config " + store.config_hash +
                                                   ", expected " + *expected_config_hash);
  }
  return store;
}

}  // namespace zeco
