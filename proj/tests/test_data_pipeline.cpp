#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "pdse/data.hpp"
#include "pdse/rng.hpp"

using namespace pdse;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("pdse_data_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

BasicTensor<float> blank(std::int64_t h, std::int64_t w) {
  return BasicTensor<float>({1, h, w}, std::vector<float>(static_cast<std::size_t>(h * w), 0.5f));
}

// Crop windows recomputed from the geometric rule, independent of the library.
std::vector<Box> oracle_windows(std::int64_t h, std::int64_t w, double frac) {
  const double ch = std::round(frac * static_cast<double>(h)), cw = std::round(frac * static_cast<double>(w));
  const double ys[5] = {0, 0, h - ch, h - ch, std::floor((h - ch) / 2)};
  const double xs[5] = {0, w - cw, 0, w - cw, std::floor((w - cw) / 2)};
  std::vector<Box> out;
  for (int i = 0; i < 5; ++i) out.push_back({xs[i], ys[i], xs[i] + cw, ys[i] + ch});
  return out;
}

}  // namespace

TEST(SliceIo, RawRoundTripPreservesValues) {
  const auto dir = scratch_dir("raw");
  CTSlice s;
  s.height = 2;
  s.width = 2;
  s.pixels = {32768, 33792, 31744, 0};
  save_slice_raw(dir / "a.raw", s);
  const auto back = load_slice(dir / "a.raw");
  EXPECT_EQ(back.height, 2);
  EXPECT_EQ(back.width, 2);
  EXPECT_EQ(back.pixels, s.pixels);
  fs::remove_all(dir);
}

TEST(SliceIo, Png16RoundTripAndEightBitRejection) {
  const auto dir = scratch_dir("png");
  CTSlice s;
  s.height = 3;
  s.width = 5;
  for (int i = 0; i < 15; ++i) s.pixels.push_back(static_cast<std::uint16_t>(i * 4369));
  save_slice_png16(dir / "a.png", s);
  const auto info = read_png_info(dir / "a.png");
  EXPECT_EQ(info.bit_depth, 16);
  EXPECT_EQ(info.channels, 1);
  EXPECT_EQ(load_slice(dir / "a.png").pixels, s.pixels);

  save_png_rgb8(dir / "rgb.png", 2, 2, std::vector<std::uint8_t>(12, 7));
  try {
    load_slice(dir / "rgb.png");
    FAIL() << "8-bit image accepted";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("bit depth 8"), std::string::npos) << e.what();
  }
  fs::remove_all(dir);
}

TEST(SliceIo, TruncatedAndUnknownFilesRejected) {
  const auto dir = scratch_dir("trunc");
  CTSlice s;
  s.height = 4;
  s.width = 4;
  s.pixels.assign(16, 100);
  save_slice_raw(dir / "a.raw", s);
  const auto bytes = slurp(dir / "a.raw");
  std::ofstream(dir / "b.raw", std::ios::binary) << bytes.substr(0, bytes.size() - 3);
  EXPECT_THROW(load_slice(dir / "b.raw"), DataError);
  std::ofstream(dir / "c.bin", std::ios::binary) << "hello world";
  EXPECT_THROW(load_slice(dir / "c.bin"), DataError);
  save_slice_png16(dir / "d.png", s);
  const auto png = slurp(dir / "d.png");
  std::ofstream(dir / "e.png", std::ios::binary) << png.substr(0, png.size() / 2);
  EXPECT_THROW(load_slice(dir / "e.png"), DataError);
  fs::remove_all(dir);
}

TEST(HuNormalize, KnownValuesExact) {
  EXPECT_EQ(hu_normalize_value(32768 - 1024), 0.0);
  EXPECT_EQ(hu_normalize_value(0), 0.0);
  EXPECT_EQ(hu_normalize_value(32768), 1024.0 / 4095.0);
  EXPECT_EQ(hu_normalize_value(32768 + 3071), 1.0);
  EXPECT_EQ(hu_normalize_value(65535), 1.0);
  CTSlice s;
  s.height = 1;
  s.width = 3;
  s.pixels = {0, 32768, 65535};
  const auto t = hu_normalize<double>(s);
  EXPECT_EQ(t.shape(), (Shape{1, 1, 3}));
  EXPECT_EQ(t.data()[1], 1024.0 / 4095.0);
}

TEST(HuNormalize, MonotoneAndBounded) {
  double prev = -1.0;
  for (std::uint32_t raw = 0; raw <= 65535; ++raw) {
    const double v = hu_normalize_value(static_cast<std::uint16_t>(raw));
    ASSERT_GE(v, prev);
    ASSERT_GE(v, 0.0);
    ASSERT_LE(v, 1.0);
    prev = v;
  }
}

TEST(Resize, SameSizeIsIdentityAndConstantsStay) {
  Rng rng(3);
  std::vector<float> v(2 * 7 * 9);
  for (auto& x : v) x = static_cast<float>(rng.uniform());
  const BasicTensor<float> img({2, 7, 9}, v);
  const auto same = resize_bilinear(img, 7, 9);
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_EQ(same.data()[i], v[i]);
  const auto up = resize_bilinear(blank(77, 77), 128, 128);
  for (const float x : up.data()) EXPECT_FLOAT_EQ(x, 0.5f);
}

TEST(FiveArea, CentredLesionKeepsCentreWindow) {
  const auto out = five_area_augment(blank(128, 128), {{{60, 60, 68, 68}, 3}});
  ASSERT_FALSE(out.empty());
  bool found_centre = false;
  for (const auto& s : out) {
    EXPECT_EQ(s.image.shape(), (Shape{1, 128, 128}));
    if (s.crop == Box{25, 25, 102, 102}) found_centre = true;
  }
  EXPECT_TRUE(found_centre);
}

TEST(FiveArea, WholeImageLesionYieldsFiveCrops) {
  const auto out = five_area_augment(blank(128, 128), {{{0, 0, 128, 128}, 8}});
  ASSERT_EQ(out.size(), 5u);
  for (const auto& s : out) {
    ASSERT_EQ(s.annotations.size(), 1u);
    EXPECT_EQ(s.annotations[0].box, (Box{0, 0, 128, 128}));
    EXPECT_EQ(s.annotations[0].class_id, 8);
  }
}

TEST(FiveArea, NoAnnotationsNoCrops) { EXPECT_TRUE(five_area_augment(blank(128, 128), {}).empty()); }

TEST(FiveArea, WindowKeptIffSomeCentreInside) {
  Rng rng(11);
  for (int t = 0; t < 300; ++t) {
    const std::int64_t h = rng.uniform_int(128, 200), w = rng.uniform_int(128, 200);
    std::vector<GroundTruth> gts;
    const auto n = rng.uniform_int(1, 3);
    for (std::int64_t i = 0; i < n; ++i) {
      const double bw = rng.uniform(2, 60), bh = rng.uniform(2, 60);
      const double x = rng.uniform(0, static_cast<double>(w) - bw), y = rng.uniform(0, static_cast<double>(h) - bh);
      gts.push_back({{x, y, x + bw, y + bh}, static_cast<int>(rng.uniform_int(1, 9))});
    }
    const auto out = five_area_augment(blank(h, w), gts);
    std::vector<Box> expected;
    for (const auto& win : oracle_windows(h, w, 0.6)) {
      bool hit = false;
      for (const auto& g : gts) {
        hit |= g.box.cx() >= win.x1 && g.box.cx() < win.x2 && g.box.cy() >= win.y1 && g.box.cy() < win.y2;
      }
      if (hit) expected.push_back(win);
    }
    ASSERT_EQ(out.size(), expected.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
      EXPECT_EQ(out[i].crop, expected[i]);
      const double kx = 128.0 / expected[i].width(), ky = 128.0 / expected[i].height();
      std::size_t survivors = 0;
      for (const auto& g : gts) {
        const double ix = std::max(0.0, std::min(g.box.x2, expected[i].x2) - std::max(g.box.x1, expected[i].x1));
        const double iy = std::max(0.0, std::min(g.box.y2, expected[i].y2) - std::max(g.box.y1, expected[i].y1));
        if (ix * iy > 0 && ix * iy >= 0.25 * g.box.area()) ++survivors;
      }
      EXPECT_EQ(out[i].annotations.size(), survivors);
      for (const auto& a : out[i].annotations) {
        EXPECT_GE(a.box.x1, 0.0);
        EXPECT_GE(a.box.y1, 0.0);
        EXPECT_LE(a.box.x2, 128.0 + 1e-9);
        EXPECT_LE(a.box.y2, 128.0 + 1e-9);
        EXPECT_GT(a.box.area(), 0.0);
        EXPECT_LE(a.box.width(), w * kx + 1e-9);
        EXPECT_LE(a.box.height(), h * ky + 1e-9);
      }
    }
  }
}

TEST(FiveArea, RejectsSmallImages) { EXPECT_THROW(five_area_augment(blank(64, 128), {}), ShapeError); }

TEST(Split, ProportionsFollowRounding) {
  std::vector<std::string> ids;
  for (int i = 0; i < 500; ++i) ids.push_back("img" + std::to_string(i));
  auto s = split_dataset(ids, 1);
  EXPECT_EQ(s.train.size(), 350u);
  EXPECT_EQ(s.val.size(), 75u);
  EXPECT_EQ(s.test.size(), 75u);
  ids.resize(10);
  s = split_dataset(ids, 1);
  EXPECT_EQ(s.train.size(), 7u);
  EXPECT_EQ(s.val.size(), 2u);
  EXPECT_EQ(s.test.size(), 1u);
  EXPECT_THROW(split_dataset({"a", "b"}, 1), std::invalid_argument);
  ids[3] = ids[4];
  EXPECT_THROW(split_dataset(ids, 1), std::invalid_argument);
}

TEST(Split, DisjointCoverAndSeedDeterministic) {
  Rng rng(21);
  for (int t = 0; t < 1000; ++t) {
    const auto n = rng.uniform_int(10, 300);
    std::vector<std::string> ids;
    for (std::int64_t i = 0; i < n; ++i) ids.push_back("id" + std::to_string(rng.next_u64()));
    const auto seed = rng.next_u64();
    const auto s = split_dataset(ids, seed);
    std::set<std::string> all;
    for (const auto* part : {&s.train, &s.val, &s.test}) all.insert(part->begin(), part->end());
    ASSERT_EQ(all.size(), ids.size());
    ASSERT_EQ(s.train.size() + s.val.size() + s.test.size(), ids.size());
    ASSERT_EQ(all, std::set<std::string>(ids.begin(), ids.end()));
    ASSERT_EQ(s.train.size(), static_cast<std::size_t>(std::llround(0.7 * static_cast<double>(n))));
    const auto again = split_dataset(ids, seed);
    ASSERT_EQ(again.train, s.train);
    ASSERT_EQ(again.test, s.test);
  }
}

TEST(AnnotationsCsv, RoundTripExact) {
  std::map<std::string, std::vector<GroundTruth>> ann;
  Rng rng(4);
  for (int i = 0; i < 20; ++i) {
    const double x = rng.uniform(0, 100), y = rng.uniform(0, 100);
    ann["im" + std::to_string(i % 7)].push_back({{x, y, x + rng.uniform(0.1, 20), y + rng.uniform(0.1, 20)},
                                                 static_cast<int>(rng.uniform_int(1, 9))});
  }
  std::stringstream ss;
  write_annotations_csv(ss, ann);
  const auto back = read_annotations_csv(ss);
  ASSERT_EQ(back.size(), ann.size());
  for (const auto& [id, boxes] : ann) {
    ASSERT_EQ(back.at(id).size(), boxes.size());
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      EXPECT_EQ(back.at(id)[i].box, boxes[i].box);
      EXPECT_EQ(back.at(id)[i].class_id, boxes[i].class_id);
    }
  }
  std::stringstream bad("image_id,x1,y1,x2,y2,class_id\na,0,0,5,5,12\n");
  EXPECT_THROW(read_annotations_csv(bad), DataError);
}

TEST(Phantoms, EllipseBoundingBoxIsTight) {
  Rng rng(8);
  for (int t = 0; t < 200; ++t) {
    const double a = rng.uniform(1, 20), b = rng.uniform(1, 20), th = rng.uniform(0, std::numbers::pi);
    const Box box = ellipse_bounding_box(50, 40, a, b, th);
    double lo_x = 1e9, hi_x = -1e9, lo_y = 1e9, hi_y = -1e9;
    for (int k = 0; k < 20000; ++k) {
      const double s = 2 * std::numbers::pi * k / 20000.0;
      const double x = 40 + a * std::cos(th) * std::cos(s) - b * std::sin(th) * std::sin(s);
      const double y = 50 + a * std::sin(th) * std::cos(s) + b * std::cos(th) * std::sin(s);
      lo_x = std::min(lo_x, x), hi_x = std::max(hi_x, x), lo_y = std::min(lo_y, y), hi_y = std::max(hi_y, y);
    }
    EXPECT_NEAR(box.x1, lo_x, 1e-5);
    EXPECT_NEAR(box.x2, hi_x, 1e-5);
    EXPECT_NEAR(box.y1, lo_y, 1e-5);
    EXPECT_NEAR(box.y2, hi_y, 1e-5);
  }
}

TEST(Phantoms, LesionPixelsLieInsideBoxesAndClassesBalanced) {
  PhantomSpec spec;
  const auto plan = plan_phantom_classes(spec);
  std::array<int, 10> counts{};
  int total = 0;
  for (std::int64_t i = 0; i < spec.count; ++i) {
    const auto img = render_phantom(spec, i, plan[static_cast<std::size_t>(i)]);
    ASSERT_EQ(img.slice.annotations.size(), img.lesions.size());
    for (const auto& l : img.lesions) {
      ++counts[static_cast<std::size_t>(l.class_id)];
      ++total;
      EXPECT_GE(l.box.x1, 0.0);
      EXPECT_GE(l.box.y1, 0.0);
      EXPECT_LE(l.box.x2, 128.0);
      EXPECT_LE(l.box.y2, 128.0);
      const double c = std::cos(l.angle), s = std::sin(l.angle);
      for (int k = 0; k < 64; ++k) {
        const double t = 2 * std::numbers::pi * k / 64.0;
        const double x = l.cx + l.a * c * std::cos(t) - l.b * s * std::sin(t);
        const double y = l.cy + l.a * s * std::cos(t) + l.b * c * std::sin(t);
        ASSERT_GE(x, l.box.x1 - 1e-9);
        ASSERT_LE(x, l.box.x2 + 1e-9);
        ASSERT_GE(y, l.box.y1 - 1e-9);
        ASSERT_LE(y, l.box.y2 + 1e-9);
      }
      // Interior pixels carry the class intensity band.
      const auto px = static_cast<std::int64_t>(l.cx), py = static_cast<std::int64_t>(l.cy);
      const double hu = img.slice.pixels[static_cast<std::size_t>(py * 128 + px)] - kHuOffset;
      EXPECT_NEAR(hu, 300.0 * (l.class_id - 1), 30.0 + 6 * 20.0);
    }
  }
  const double mean = total / 9.0;
  for (int k = 1; k <= 9; ++k) {
    EXPECT_GE(counts[static_cast<std::size_t>(k)], 0.8 * mean) << "class " << k;
    EXPECT_LE(counts[static_cast<std::size_t>(k)], 1.2 * mean) << "class " << k;
  }
}

TEST(Phantoms, GenerationIsByteIdenticalForSameSeed) {
  const auto root = scratch_dir("gen");
  PhantomSpec spec;
  spec.count = 12;
  spec.output_dir = (root / "a").string();
  const auto m1 = generate_phantoms(spec);
  spec.output_dir = (root / "b").string();
  const auto m2 = generate_phantoms(spec);
  EXPECT_EQ(m1.content_hash, m2.content_hash);
  EXPECT_EQ(slurp(root / "a" / "manifest.json"), slurp(root / "b" / "manifest.json"));
  EXPECT_EQ(slurp(root / "a" / "annotations.csv"), slurp(root / "b" / "annotations.csv"));
  for (const auto& f : m1.files) EXPECT_EQ(slurp(root / "a" / f), slurp(root / "b" / f));

  spec.seed = 2;
  spec.output_dir = (root / "c").string();
  EXPECT_NE(generate_phantoms(spec).content_hash, m1.content_hash);

  const auto ds = load_dataset(root / "a" / "manifest.json");
  EXPECT_EQ(ds.manifest.image_ids, m1.image_ids);
  EXPECT_EQ(ds.split("train").size() + ds.split("val").size() + ds.split("test").size(), 12u);
  const auto slice = ds.load(m1.image_ids[3]);
  EXPECT_EQ(slice.height, 128);
  EXPECT_FALSE(slice.annotations.empty());
  EXPECT_THROW(ds.split("holdout"), DataError);
  fs::remove_all(root);
}

TEST(Phantoms, ZeroCountGivesValidEmptyManifest) {
  const auto root = scratch_dir("empty");
  PhantomSpec spec;
  spec.count = 0;
  spec.output_dir = root.string();
  const auto m = generate_phantoms(spec);
  EXPECT_TRUE(m.image_ids.empty());
  const auto ds = load_dataset(root / "manifest.json");
  EXPECT_TRUE(ds.manifest.image_ids.empty());
  EXPECT_TRUE(ds.annotations.empty());
  fs::remove_all(root);
}

TEST(Phantoms, SpecJsonRejectsUnknownKeys) {
  const auto spec = phantom_spec_from_json(R"({"count": 7, "seed": 9})");
  EXPECT_EQ(spec.count, 7);
  EXPECT_EQ(spec.seed, 9u);
  EXPECT_THROW(phantom_spec_from_json(R"({"cuont": 7})"), ConfigError);
  EXPECT_THROW(phantom_spec_from_json(R"({"height": 32})"), ConfigError);
}
