#include "camlab/dataset.hpp"
#include "camlab/error.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

using namespace camlab;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / "camlab_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Manifest of `patients` with `positives` of them carrying one positive slice; no files.
Manifest fake_manifest(std::size_t patients, std::size_t positives) {
  Manifest m;
  for (std::size_t p = 0; p < patients; ++p) {
    for (int s = 0; s < 2; ++s) {
      SliceRecord r;
      r.patient_id = "p" + std::to_string(p);
      r.slice_id = r.patient_id + "_" + std::to_string(s);
      r.image_path = r.slice_id + ".cami";
      r.label = p < positives && s == 0 ? 1 : 0;
      if (r.label) r.mask_path = r.slice_id + ".pgm";
      m.slices.push_back(r);
    }
  }
  return m;
}

std::size_t count_test(const Manifest& m, bool positive) {
  std::set<std::string> ids;
  for (const auto& s : m.slices)
    if (m.split_of(s) == Split::Test) ids.insert(s.patient_id);
  std::size_t n = 0;
  for (const auto& id : ids) {
    bool pos = false;
    for (const auto& s : m.slices) pos |= s.patient_id == id && s.label == 1;
    n += pos == positive;
  }
  return n;
}

}  // namespace

TEST_SUITE("dataset") {

TEST_CASE("window_hu") {
  Image<double> hu(1, 5);
  hu << -100, 80, 40, 20, 1000;
  Image<double> w = window_hu(hu);
  CHECK(w(0, 0) == 0.0);
  CHECK(w(0, 1) == 1.0);
  CHECK(w(0, 2) == 0.5);
  CHECK(w(0, 3) == 0.25);
  CHECK(w(0, 4) == 1.0);
  Image<double> ramp(1, 200);
  for (Eigen::Index i = 0; i < 200; ++i) ramp(0, i) = -50.0 + i;
  Image<double> wr = window_hu(ramp);
  for (Eigen::Index i = 1; i < 200; ++i) CHECK(wr(0, i) >= wr(0, i - 1));
  CHECK(wr.minCoeff() >= 0.0);
  CHECK(wr.maxCoeff() <= 1.0);
}

TEST_CASE("stratified split: 10 patients") {
  const Manifest m = patient_split(fake_manifest(10, 5), 0.2, 7);
  CHECK(count_test(m, true) == 1);
  CHECK(count_test(m, false) == 1);
  const Manifest again = patient_split(fake_manifest(10, 5), 0.2, 7);
  CHECK(again.split == m.split);
}

TEST_CASE("327 patients at 0.2 hold out 66") {
  const Manifest m = patient_split(fake_manifest(327, 150), 0.2, 0);
  CHECK(count_test(m, true) + count_test(m, false) == 66);
  for (std::uint64_t seed = 1; seed < 5; ++seed) {
    const Manifest other = patient_split(fake_manifest(327, 150), 0.2, seed);
    CHECK(count_test(other, true) + count_test(other, false) == 66);
  }
}

TEST_CASE("every patient lands in exactly one split") {
  const Manifest m = patient_split(fake_manifest(23, 9), 0.3, 3);
  CHECK(m.split.size() == 23);
  for (const auto& [id, split] : m.split) CHECK(split != Split::Unassigned);
  CHECK_THROWS_AS(patient_split(fake_manifest(1, 1), 0.2, 0), DataError);
  CHECK_THROWS_AS(patient_split(fake_manifest(5, 1), 1.0, 0), ValidationError);
}

TEST_CASE("raw image and pgm round trip") {
  const fs::path dir = scratch_dir("io");
  Image<double> hu(3, 4);
  hu << -1000, 0, 25.5, 40, 80, 1, 2, 3, 4, 5, 6, 7;
  write_raw_image(dir / "a.cami", hu);
  CHECK((read_raw_image(dir / "a.cami") == hu).all());
  BinaryMask m(2, 3);
  m << true, false, true, false, false, true;
  write_pgm_mask(dir / "m.pgm", m);
  CHECK((read_pgm_mask(dir / "m.pgm") == m).all());
  std::ofstream(dir / "bad.pgm", std::ios::binary) << "P2\n1 1\n255\n0\n";
  CHECK_THROWS(read_pgm_mask(dir / "bad.pgm"));
  std::ofstream(dir / "bad.cami", std::ios::binary) << "CAMX";
  CHECK_THROWS(read_raw_image(dir / "bad.cami"));
}

TEST_CASE("manifest validation") {
  const fs::path dir = scratch_dir("manifest");
  const std::string header = "patient_id,slice_id,image_path,mask_path,label,split\n";
  std::ofstream(dir / "leak.csv") << header << "p1,a,a.cami,,0,train\np1,b,b.cami,,0,test\n";
  CHECK_THROWS(read_manifest(dir / "leak.csv"));
  std::ofstream(dir / "nomask.csv") << header << "p1,a,a.cami,,1,train\n";
  CHECK_THROWS(read_manifest(dir / "nomask.csv"));
  std::ofstream(dir / "dup.csv") << header << "p1,a,a.cami,,0,train\np2,a,b.cami,,0,test\n";
  CHECK_THROWS(read_manifest(dir / "dup.csv"));
  std::ofstream(dir / "ok.csv") << header << "p1,a,a.cami,,0,train\np2,b,b.cami,b.pgm,1,test\n";
  const Manifest m = read_manifest(dir / "ok.csv");
  CHECK(m.slices.size() == 2);
  CHECK(m.split_of(m.slices[1]) == Split::Test);
  CHECK(m.select(Split::Train).size() == 1);
  write_manifest(dir / "copy.csv", m);
  CHECK(slurp(dir / "copy.csv") == slurp(dir / "ok.csv"));
}

TEST_CASE("label must agree with the mask") {
  const fs::path dir = scratch_dir("label");
  write_raw_image(dir / "a.cami", Image<double>::Zero(4, 4));
  write_pgm_mask(dir / "empty.pgm", BinaryMask::Constant(4, 4, false));
  std::ofstream(dir / "m.csv") << "patient_id,slice_id,image_path,mask_path,label,split\np1,a,a.cami,empty.pgm,1,train\n";
  const Manifest m = read_manifest(dir / "m.csv");
  CHECK_THROWS_AS(load_slice(m, m.slices[0]), DataError);
}

TEST_CASE("synthetic dataset") {
  const fs::path a = scratch_dir("synth_a");
  const fs::path b = scratch_dir("synth_b");
  SynthOptions opt;
  const Manifest m = synth_dataset(a, opt);
  synth_dataset(b, opt);
  CHECK(m.slices.size() == 1200);
  CHECK(slurp(a / "manifest.csv") == slurp(b / "manifest.csv"));
  for (const auto& s : m.slices) {
    CHECK(slurp(a / s.image_path) == slurp(b / s.image_path));
    if (s.mask_path) CHECK(slurp(a / *s.mask_path) == slurp(b / *s.mask_path));
  }

  std::size_t positives = 0;
  for (const auto& s : m.slices) positives += s.label;
  const double frac = static_cast<double>(positives) / static_cast<double>(m.slices.size());
  CHECK(frac >= 0.20);
  CHECK(frac <= 0.30);

  const Manifest back = read_manifest(a / "manifest.csv");
  std::set<std::string> train, test;
  for (const auto& s : back.slices) (back.split_of(s) == Split::Test ? test : train).insert(s.patient_id);
  CHECK(test.size() == 8);
  for (const auto& id : test) CHECK(train.count(id) == 0);

  for (const auto& s : back.slices) {
    if (s.label == 1) {
      REQUIRE(s.mask_path);
      const LoadedSlice ls = load_slice(back, s);
      CHECK(ls.truth.count() > 0);
      // lesion pixels sit at least half an amplitude above the brightest brain tissue floor
      const Image<double> hu = read_raw_image(back.resolve(s.image_path));
      for (Eigen::Index i = 0; i < hu.size(); ++i)
        if (ls.truth.data()[i]) CHECK(hu.data()[i] > 41.0);
    } else {
      CHECK(!s.mask_path);
    }
  }
}

}
