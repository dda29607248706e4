#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "sada/imaging.hpp"
#include "sada/rng.hpp"

using namespace sada;

namespace {

RgbImage solid(int w, int h, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  RgbImage img;
  img.width = w;
  img.height = h;
  img.data.resize(3 * img.pixel_count());
  for (std::size_t p = 0; p < img.pixel_count(); ++p) {
    img.data[3 * p] = r;
    img.data[3 * p + 1] = g;
    img.data[3 * p + 2] = b;
  }
  return img;
}

RgbImage random_image(Rng& rng, int w, int h, int lo = 0, int hi = 255) {
  RgbImage img;
  img.width = w;
  img.height = h;
  img.data.resize(3 * img.pixel_count());
  for (auto& v : img.data)
    v = static_cast<std::uint8_t>(lo + rng.uniform_index(hi - lo + 1));
  return img;
}

}  // namespace

TEST_CASE("optical density of a white pixel is exactly zero") {
  const Matrix od = to_optical_density(solid(1, 1, 255, 255, 255));
  for (int c = 0; c < 3; ++c) CHECK(od(c, 0) == 0.0);
}

TEST_CASE("optical density of a black pixel clamps to ln 255") {
  const Matrix od = to_optical_density(solid(1, 1, 0, 0, 0));
  const double ln255 = 5.541263545158426;  // high-precision log oracle
  for (int c = 0; c < 3; ++c) CHECK_THAT(od(c, 0), Catch::Matchers::WithinAbs(ln255, 1e-12));
}

TEST_CASE("beer-lambert round trip is exact for channels >= 1") {
  RgbImage img;
  img.width = 255;
  img.height = 1;
  img.data.resize(3 * 255);
  for (int v = 1; v <= 255; ++v)
    for (int c = 0; c < 3; ++c) img.data[3 * (v - 1) + c] = static_cast<std::uint8_t>(v);
  const RgbImage back = from_optical_density(to_optical_density(img), img.width, img.height);
  CHECK(back == img);

  Rng rng(42);
  for (int trial = 0; trial < 20; ++trial) {
    const RgbImage rand_img = random_image(rng, 9, 7, 1, 255);
    CHECK(from_optical_density(to_optical_density(rand_img), 9, 7) == rand_img);
  }
}

TEST_CASE("optical density decreases strictly with intensity") {
  RgbImage img;
  img.width = 255;
  img.height = 1;
  img.data.resize(3 * 255);
  for (int v = 1; v <= 255; ++v)
    for (int c = 0; c < 3; ++c) img.data[3 * (v - 1) + c] = static_cast<std::uint8_t>(v);
  const Matrix od = to_optical_density(img);
  for (std::size_t p = 1; p < 255; ++p) CHECK(od(0, p) < od(0, p - 1));
}

TEST_CASE("optical density is finite for every valid input") {
  Rng rng(7);
  const RgbImage img = random_image(rng, 16, 16, 0, 255);
  CHECK(to_optical_density(img).all_finite());
}

TEST_CASE("inverse transform rounds ties away from zero and clamps") {
  Matrix od(3, 1);
  od(0, 0) = 0.0;
  od(1, 0) = 0.6931471805599453;  // ln 2: 255/2 = 127.5 -> 128
  od(2, 0) = 100.0;               // exp term ~ 0 -> 0
  const RgbImage img = from_optical_density(od, 1, 1);
  CHECK(static_cast<int>(img.at(0, 0)) == 255);
  CHECK(static_cast<int>(img.at(0, 1)) == 128);
  CHECK(static_cast<int>(img.at(0, 2)) == 0);
}

TEST_CASE("ppm writer emits the canonical 1x1 white file") {
  std::ostringstream out;
  save_ppm(solid(1, 1, 255, 255, 255), out);
  const std::string expected = std::string("P6\n1 1\n255\n") + "\xff\xff\xff";
  CHECK(out.str() == expected);
}

TEST_CASE("ppm save/load round trip is bit exact") {
  Rng rng(99);
  const RgbImage img = random_image(rng, 13, 5);
  std::ostringstream out;
  save_ppm(img, out);
  std::istringstream in(out.str());
  CHECK(load_ppm(in) == img);
}

TEST_CASE("ppm loader accepts header comments") {
  std::istringstream in(std::string("P6\n# a comment\n2 1\n# another\n255\n") +
                        std::string(6, '\x10'));
  const RgbImage img = load_ppm(in);
  CHECK(img.width == 2);
  CHECK(img.height == 1);
}

TEST_CASE("ppm loader rejects unsupported maxval") {
  std::istringstream in("P6\n1 1\n65535\n filler");
  try {
    load_ppm(in);
    FAIL("expected PpmIoError");
  } catch (const PpmIoError& e) {
    CHECK(e.kind() == PpmError::UnsupportedMaxval);
    CHECK_THAT(e.what(), Catch::Matchers::ContainsSubstring("unsupported maxval"));
  }
}

TEST_CASE("ppm loader rejects truncated payload") {
  std::istringstream in(std::string("P6\n2 2\n255\n") + "abc");
  try {
    load_ppm(in);
    FAIL("expected PpmIoError");
  } catch (const PpmIoError& e) {
    CHECK(e.kind() == PpmError::TruncatedData);
    CHECK_THAT(e.what(), Catch::Matchers::ContainsSubstring("truncated"));
  }
}

TEST_CASE("ppm loader rejects malformed headers") {
  std::istringstream p5(std::string("P5\n1 1\n255\n") + "xyz");
  try {
    load_ppm(p5);
    FAIL("expected PpmIoError");
  } catch (const PpmIoError& e) {
    CHECK(e.kind() == PpmError::BadHeader);
  }
  std::istringstream garbage("P6\nnot-a-number\n");
  try {
    load_ppm(garbage);
    FAIL("expected PpmIoError");
  } catch (const PpmIoError& e) {
    CHECK(e.kind() == PpmError::BadHeader);
  }
}

TEST_CASE("ppm file io reports unreadable paths") {
  CHECK_THROWS_AS(load_ppm(std::filesystem::path("/nonexistent/nope.ppm")), IoError);
}
