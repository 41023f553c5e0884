#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "metadm/checkpoint.hpp"
#include "metadm/digest.hpp"
#include "metadm/errors.hpp"
#include "metadm/layers.hpp"
#include "metadm/rng.hpp"

using namespace metadm;
using namespace metadm::nn;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("metadm-test-" + std::to_string(::getpid()));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

Params sample_params(std::uint64_t seed) {
  Rng rng(seed);
  Params p;
  Tensor w = Tensor::zeros({4, 3, 3, 3}, true);
  rng.fill_normal(w.data());
  Tensor b = Tensor::zeros({4}, true);
  rng.fill_normal(b.data());
  Tensor stats = Tensor::zeros({4}, false);
  rng.fill_normal(stats.data());
  p.add("conv.w", w);
  p.add("conv.b", b);
  p.add("bn.running_mean", stats);
  return p;
}

}  // namespace

TEST_CASE("save, load, save reproduces the file byte for byte") {
  TempDir tmp;
  Params orig = sample_params(11);
  const std::string a = tmp.file("a.mdmc");
  const std::string b = tmp.file("b.mdmc");
  save_params(a, orig);

  Params loaded = load_params(a);
  REQUIRE(loaded.size() == orig.size());
  for (std::size_t i = 0; i < orig.size(); ++i) {
    const auto& [name, t] = orig.entries()[i];
    const auto& [lname, lt] = loaded.entries()[i];
    CHECK(lname == name);
    CHECK(lt.shape() == t.shape());
    CHECK(lt.data() == t.data());
  }
  save_params(b, loaded);
  CHECK(sha256_file_hex(a) == sha256_file_hex(b));
}

TEST_CASE("load_params_into fills an existing collection in place") {
  TempDir tmp;
  Params orig = sample_params(12);
  const std::string path = tmp.file("p.mdmc");
  save_params(path, orig);

  Params dst = sample_params(99);  // same names and shapes, different values
  load_params_into(path, dst);
  for (std::size_t i = 0; i < orig.size(); ++i) {
    CHECK(dst.entries()[i].second.data() == orig.entries()[i].second.data());
  }
  // destination keeps its own trainability flags
  CHECK(dst.at("conv.w").requires_grad());
  CHECK(!dst.at("bn.running_mean").requires_grad());
}

TEST_CASE("load_params_into rejects name and shape mismatches") {
  TempDir tmp;
  const std::string path = tmp.file("p.mdmc");
  save_params(path, sample_params(13));

  SUBCASE("missing entry") {
    Params dst;
    dst.add("conv.w", Tensor::zeros({4, 3, 3, 3}, true));
    dst.add("conv.b", Tensor::zeros({4}, true));
    dst.add("other", Tensor::zeros({4}, false));
    CHECK_THROWS_WITH_AS(load_params_into(path, dst), doctest::Contains("bn.running_mean"),
                         DataIntegrityError);
  }
  SUBCASE("shape mismatch") {
    Params dst;
    dst.add("conv.w", Tensor::zeros({4, 3, 3, 3}, true));
    dst.add("conv.b", Tensor::zeros({5}, true));
    dst.add("bn.running_mean", Tensor::zeros({4}, false));
    CHECK_THROWS_WITH_AS(load_params_into(path, dst), doctest::Contains("conv.b"),
                         DataIntegrityError);
  }
  SUBCASE("entry count mismatch") {
    Params dst;
    dst.add("conv.w", Tensor::zeros({4, 3, 3, 3}, true));
    CHECK_THROWS_AS(load_params_into(path, dst), DataIntegrityError);
  }
}

TEST_CASE("corrupt checkpoint files are rejected") {
  TempDir tmp;
  const std::string good = tmp.file("good.mdmc");
  save_params(good, sample_params(14));

  SUBCASE("missing file") { CHECK_THROWS_AS(load_params("/nonexistent/x.mdmc"), DataIntegrityError); }
  SUBCASE("bad magic") {
    const std::string bad = tmp.file("bad.mdmc");
    std::ofstream out(bad, std::ios::binary);
    out << "NOPE then some bytes";
    out.close();
    CHECK_THROWS_WITH_AS(load_params(bad), doctest::Contains("magic"), DataIntegrityError);
  }
  SUBCASE("unsupported version") {
    const std::string bad = tmp.file("vers.mdmc");
    std::ofstream out(bad, std::ios::binary);
    write_checkpoint_header(out, 42);
    out.close();
    CHECK_THROWS_WITH_AS(load_params(bad), doctest::Contains("version"), DataIntegrityError);
  }
  SUBCASE("truncated payload") {
    std::ifstream in(good, std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    const std::string bad = tmp.file("trunc.mdmc");
    std::ofstream out(bad, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    out.close();
    CHECK_THROWS_WITH_AS(load_params(bad), doctest::Contains("truncated"), DataIntegrityError);
  }
}

TEST_CASE("empty parameter collections round-trip") {
  TempDir tmp;
  const std::string path = tmp.file("empty.mdmc");
  save_params(path, Params{});
  CHECK(load_params(path).size() == 0);
}
