#include <doctest.h>

#include <fstream>

#include "test_util.hpp"
#include "zeco/checkpoint.hpp"
#include "zeco/seed.hpp"

using namespace zeco;
using zeco::test::error_code_of;
using zeco::test::TempDir;

namespace {

ParameterStore sample_store() {
  auto g = make_generator(1);
  ParameterStore s;
  s.kind = "test";
  s.config_hash = "cfg-1";
  s.step = 17;
  s.parent_hash = "parent";
  s.meta = {{"a", 1}};
  s.set("w", torch::randn({3, 4}, g));
  s.set("b", torch::randn({5}, g));
  s.set("scalar", torch::tensor(2.5f));
  return s;
}

std::string read_all(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("sha256 of known strings") {
  CHECK(sha256_hex(std::string_view("")) == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(sha256_hex(std::string_view("abc")) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("checkpoint round trip preserves arrays, order and manifest fields") {
  TempDir dir("ckpt");
  const auto s = sample_store();
  save_checkpoint(s, dir / "a.ckpt");
  const auto back = load_checkpoint(dir / "a.ckpt", std::string("cfg-1"));
  CHECK(back.kind == "test");
  CHECK(back.step == 17);
  CHECK(back.parent_hash == "parent");
  CHECK(back.meta == s.meta);
  REQUIRE(back.size() == s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    CHECK(back.arrays()[i].first == s.arrays()[i].first);
    CHECK(torch::equal(back.arrays()[i].second, s.arrays()[i].second));
  }
  CHECK(back.checksum() == s.checksum());
  save_checkpoint(back, dir / "b.ckpt");
  CHECK(read_all(dir / "a.ckpt") == read_all(dir / "b.ckpt"));
}

TEST_CASE("checksum changes with any value or name") {
  auto a = sample_store();
  auto b = sample_store();
  CHECK(a.checksum() == b.checksum());
  auto w = b.get("w").clone();
  w[0][0] += 1e-6f;
  b.set("w", w);
  CHECK(a.checksum() != b.checksum());
}

TEST_CASE("tampered payload is detected") {
  TempDir dir("tamper");
  save_checkpoint(sample_store(), dir / "a.ckpt");
  auto bytes = read_all(dir / "a.ckpt");
  bytes[bytes.size() - 3] ^= 0x40;
  std::ofstream(dir / "a.ckpt", std::ios::binary) << bytes;
  CHECK(error_code_of([&] { load_checkpoint(dir / "a.ckpt"); }) == ErrorCode::ChecksumMismatch);
}

TEST_CASE("checkpoint load errors") {
  TempDir dir("ckerr");
  save_checkpoint(sample_store(), dir / "a.ckpt");
  CHECK(error_code_of([&] { load_checkpoint(dir / "a.ckpt", std::string("other")); }) ==
        ErrorCode::ConfigHashMismatch);
  CHECK(error_code_of([&] { load_checkpoint(dir / "none.ckpt"); }) == ErrorCode::MissingCheckpoint);

  const auto bytes = read_all(dir / "a.ckpt");
  std::ofstream(dir / "trunc.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() - 8);
  const auto trunc = error_code_of([&] { load_checkpoint(dir / "trunc.ckpt"); });
  CHECK((trunc == ErrorCode::TruncatedPayload || trunc == ErrorCode::ChecksumMismatch));

  auto bad = bytes;
  bad[0] = 'Q';
  std::ofstream(dir / "magic.ckpt", std::ios::binary) << bad;
  CHECK(error_code_of([&] { load_checkpoint(dir / "magic.ckpt"); }) == ErrorCode::HeaderError);
}

TEST_CASE("capture and restore a module") {
  torch::manual_seed(3);
  torch::nn::Sequential a(torch::nn::Linear(4, 3), torch::nn::BatchNorm1d(3));
  torch::nn::Sequential b(torch::nn::Linear(4, 3), torch::nn::BatchNorm1d(3));
  CHECK(module_checksum(*a) != module_checksum(*b));
  ParameterStore s;
  s.capture(*a, "net.");
  CHECK(s.contains("net.0.weight"));
  s.restore(*b, "net.");
  CHECK(module_checksum(*a) == module_checksum(*b));

  torch::nn::Sequential wrong(torch::nn::Linear(5, 3), torch::nn::BatchNorm1d(3));
  CHECK(error_code_of([&] { s.restore(*wrong, "net."); }) == ErrorCode::ShapeMismatch);
}
