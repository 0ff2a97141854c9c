#include "pdse/data.hpp"

#include <png.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "json.hpp"
#include "pdse/detection_ops.hpp"

namespace pdse {

namespace fs = std::filesystem;

namespace {

constexpr char kRawMagic[8] = {'P', 'D', 'S', 'E', 'R', 'A', 'W', '1'};
constexpr unsigned char kPngSignature[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};

std::vector<char> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return std::vector<char>(std::istreambuf_iterator<char>(in), {});
}

void put_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(const char* p) {
  const auto* b = reinterpret_cast<const unsigned char*>(p);
  return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
         static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
}

std::string shortest(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

double parse_number(const std::string& s, const std::string& where) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) throw DataError(where + ": bad number '" + s + "'");
  return v;
}

struct PngReadState {
  const std::vector<char>* bytes;
  std::size_t pos;
};

void png_read_from_memory(png_structp png, png_bytep out, png_size_t n) {
  auto* st = static_cast<PngReadState*>(png_get_io_ptr(png));
  if (st->pos + n > st->bytes->size()) png_error(png, "truncated file");
  std::memcpy(out, st->bytes->data() + st->pos, n);
  st->pos += n;
}

struct PngHeader {
  png_uint_32 width = 0, height = 0;
  int bit_depth = 0, color_type = 0, channels = 0;
};

// Decodes a PNG held in memory. Returns false with `error` set on failure.
bool decode_png(const std::vector<char>& bytes, PngHeader& header, std::vector<unsigned char>* pixels,
                std::string& error) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) {
    error = "png: cannot allocate reader";
    return false;
  }
  png_infop info = png_create_info_struct(png);
  PngReadState state{&bytes, 0};
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    error = "png: corrupt or truncated data";
    return false;
  }
  png_set_read_fn(png, &state, png_read_from_memory);
  png_read_info(png, info);
  header.width = png_get_image_width(png, info);
  header.height = png_get_image_height(png, info);
  header.bit_depth = png_get_bit_depth(png, info);
  header.color_type = png_get_color_type(png, info);
  header.channels = png_get_channels(png, info);
  if (pixels && header.bit_depth == 16 && header.color_type == PNG_COLOR_TYPE_GRAY) {
    const std::size_t stride = static_cast<std::size_t>(header.width) * 2;
    pixels->assign(stride * header.height, 0);
    rows.resize(header.height);
    for (png_uint_32 y = 0; y < header.height; ++y) rows[y] = pixels->data() + y * stride;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return true;
}

void write_png(const fs::path& path, std::int64_t height, std::int64_t width, int bit_depth, int color_type,
               const std::vector<unsigned char>& data, std::size_t stride) {
  std::FILE* fp = std::fopen(path.string().c_str(), "wb");
  if (!fp) throw DataError("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  std::vector<png_bytep> rows(static_cast<std::size_t>(height));
  for (std::int64_t y = 0; y < height; ++y) {
    rows[static_cast<std::size_t>(y)] = const_cast<unsigned char*>(data.data()) + static_cast<std::size_t>(y) * stride;
  }
  bool ok = png && info;
  if (ok && setjmp(png_jmpbuf(png))) ok = false;
  else if (ok) {
    png_init_io(png, fp);
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), bit_depth, color_type,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
  }
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
  if (!ok) throw DataError("png encode failed for " + path.string());
}

}  // namespace

CTSlice load_slice(const fs::path& path) {
  const auto bytes = read_file(path);
  CTSlice slice;
  slice.image_id = path.stem().string();
  if (bytes.size() >= 8 && std::memcmp(bytes.data(), kRawMagic, 8) == 0) {
    if (bytes.size() < 16) throw DataError(path.string() + ": truncated header");
    slice.height = get_u32(bytes.data() + 8);
    slice.width = get_u32(bytes.data() + 12);
    const auto n = static_cast<std::size_t>(slice.height * slice.width);
    if (slice.height <= 0 || slice.width <= 0) throw DataError(path.string() + ": empty image");
    if (bytes.size() != 16 + 2 * n) {
      throw DataError(path.string() + ": truncated file (expected " + std::to_string(16 + 2 * n) + " bytes, got " +
                      std::to_string(bytes.size()) + ")");
    }
    slice.pixels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto lo = static_cast<unsigned char>(bytes[16 + 2 * i]);
      const auto hi = static_cast<unsigned char>(bytes[17 + 2 * i]);
      slice.pixels[i] = static_cast<std::uint16_t>(lo | hi << 8);
    }
    return slice;
  }
  if (bytes.size() >= 8 && std::memcmp(bytes.data(), kPngSignature, 8) == 0) {
    PngHeader header;
    std::vector<unsigned char> pixels;
    std::string error;
    if (!decode_png(bytes, header, &pixels, error)) throw DataError(path.string() + ": " + error);
    if (header.bit_depth != 16) {
      throw DataError(path.string() + ": unsupported bit depth " + std::to_string(header.bit_depth) +
                      " (16-bit grayscale required)");
    }
    if (header.color_type != PNG_COLOR_TYPE_GRAY) {
      throw DataError(path.string() + ": unsupported colour type (16-bit grayscale required)");
    }
    slice.height = header.height;
    slice.width = header.width;
    slice.pixels.resize(static_cast<std::size_t>(slice.height * slice.width));
    for (std::size_t i = 0; i < slice.pixels.size(); ++i) {
      slice.pixels[i] = static_cast<std::uint16_t>(pixels[2 * i] << 8 | pixels[2 * i + 1]);
    }
    return slice;
  }
  throw DataError(path.string() + ": unknown image format");
}

void save_slice_raw(const fs::path& path, const CTSlice& slice) {
  if (static_cast<std::int64_t>(slice.pixels.size()) != slice.height * slice.width) {
    throw DataError("save_slice_raw: pixel count does not match extents");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(kRawMagic, 8);
  put_u32(out, static_cast<std::uint32_t>(slice.height));
  put_u32(out, static_cast<std::uint32_t>(slice.width));
  std::vector<char> body(slice.pixels.size() * 2);
  for (std::size_t i = 0; i < slice.pixels.size(); ++i) {
    body[2 * i] = static_cast<char>(slice.pixels[i] & 0xff);
    body[2 * i + 1] = static_cast<char>(slice.pixels[i] >> 8);
  }
  out.write(body.data(), static_cast<std::streamsize>(body.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

void save_slice_png16(const fs::path& path, const CTSlice& slice) {
  std::vector<unsigned char> data(slice.pixels.size() * 2);
  for (std::size_t i = 0; i < slice.pixels.size(); ++i) {
    data[2 * i] = static_cast<unsigned char>(slice.pixels[i] >> 8);
    data[2 * i + 1] = static_cast<unsigned char>(slice.pixels[i] & 0xff);
  }
  write_png(path, slice.height, slice.width, 16, PNG_COLOR_TYPE_GRAY, data, static_cast<std::size_t>(slice.width) * 2);
}

void save_png_rgb8(const fs::path& path, std::int64_t height, std::int64_t width, const std::vector<std::uint8_t>& rgb) {
  if (static_cast<std::int64_t>(rgb.size()) != height * width * 3) throw DataError("save_png_rgb8: size mismatch");
  write_png(path, height, width, 8, PNG_COLOR_TYPE_RGB, rgb, static_cast<std::size_t>(width) * 3);
}

PngInfo read_png_info(const fs::path& path) {
  const auto bytes = read_file(path);
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kPngSignature, 8) != 0) throw DataError(path.string() + ": not a PNG");
  PngHeader header;
  std::string error;
  if (!decode_png(bytes, header, nullptr, error)) throw DataError(path.string() + ": " + error);
  return {header.height, header.width, header.bit_depth, header.channels};
}

double hu_normalize_value(std::uint16_t raw) {
  const double hu = std::clamp(static_cast<double>(raw) - kHuOffset, kHuMin, kHuMax);
  return (hu - kHuMin) / (kHuMax - kHuMin);
}

template <typename T>
BasicTensor<T> hu_normalize(const CTSlice& slice) {
  std::vector<T> values(slice.pixels.size());
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = static_cast<T>(hu_normalize_value(slice.pixels[i]));
  return BasicTensor<T>({1, slice.height, slice.width}, std::move(values));
}

template BasicTensor<float> hu_normalize<float>(const CTSlice&);
template BasicTensor<double> hu_normalize<double>(const CTSlice&);

BasicTensor<float> resize_bilinear(const BasicTensor<float>& image, std::int64_t out_h, std::int64_t out_w) {
  if (image.rank() != 3) throw ShapeError("resize_bilinear: expected [C,H,W], got " + shape_str(image.shape()));
  const auto c = image.dim(0), h = image.dim(1), w = image.dim(2);
  std::vector<float> out(static_cast<std::size_t>(c * out_h * out_w));
  const auto src = image.data();
  const double sy = static_cast<double>(h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(w) / static_cast<double>(out_w);
  for (std::int64_t y = 0; y < out_h; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    const auto y0 = static_cast<std::int64_t>(fy);
    const auto y1 = std::min(y0 + 1, h - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::int64_t x = 0; x < out_w; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      const auto x0 = static_cast<std::int64_t>(fx);
      const auto x1 = std::min(x0 + 1, w - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const auto at = [&](std::int64_t yy, std::int64_t xx) {
          return static_cast<double>(src[static_cast<std::size_t>((ch * h + yy) * w + xx)]);
        };
        const double v = (1 - wy) * ((1 - wx) * at(y0, x0) + wx * at(y0, x1)) + wy * ((1 - wx) * at(y1, x0) + wx * at(y1, x1));
        out[static_cast<std::size_t>((ch * out_h + y) * out_w + x)] = static_cast<float>(v);
      }
    }
  }
  return BasicTensor<float>({c, out_h, out_w}, std::move(out));
}

std::vector<AugmentedSample> five_area_augment(const BasicTensor<float>& image,
                                               const std::vector<GroundTruth>& annotations,
                                               const AugmentConfig& config) {
  if (image.rank() != 3) throw ShapeError("five_area_augment: expected [C,H,W], got " + shape_str(image.shape()));
  const auto c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (h < 128 || w < 128) throw ShapeError("five_area_augment: image smaller than 128x128");
  const auto ch = static_cast<std::int64_t>(std::llround(config.crop_fraction * static_cast<double>(h)));
  const auto cw = static_cast<std::int64_t>(std::llround(config.crop_fraction * static_cast<double>(w)));
  const std::int64_t origins[5][2] = {{0, 0}, {0, w - cw}, {h - ch, 0}, {h - ch, w - cw}, {(h - ch) / 2, (w - cw) / 2}};
  const double s = static_cast<double>(config.output_size);
  std::vector<AugmentedSample> out;
  for (const auto& [y0, x0] : origins) {
    const Box crop{static_cast<double>(x0), static_cast<double>(y0), static_cast<double>(x0 + cw),
                   static_cast<double>(y0 + ch)};
    bool any_center = false;
    for (const auto& a : annotations) {
      const double cx = a.box.cx(), cy = a.box.cy();
      any_center |= cx >= crop.x1 && cx < crop.x2 && cy >= crop.y1 && cy < crop.y2;
    }
    if (!any_center) continue;
    AugmentedSample sample;
    sample.crop = crop;
    const double kx = s / static_cast<double>(cw), ky = s / static_cast<double>(ch);
    for (const auto& a : annotations) {
      const Box clipped{std::clamp(a.box.x1, crop.x1, crop.x2), std::clamp(a.box.y1, crop.y1, crop.y2),
                        std::clamp(a.box.x2, crop.x1, crop.x2), std::clamp(a.box.y2, crop.y1, crop.y2)};
      if (!(clipped.area() > 0.0) || clipped.area() < config.min_area_fraction * a.box.area()) continue;
      sample.annotations.push_back({{(clipped.x1 - crop.x1) * kx, (clipped.y1 - crop.y1) * ky,
                                     (clipped.x2 - crop.x1) * kx, (clipped.y2 - crop.y1) * ky},
                                    a.class_id});
    }
    std::vector<float> window(static_cast<std::size_t>(c * ch * cw));
    const auto src = image.data();
    for (std::int64_t k = 0; k < c; ++k)
      for (std::int64_t y = 0; y < ch; ++y)
        std::copy_n(src.begin() + ((k * h + y0 + y) * w + x0), cw, window.begin() + (k * ch + y) * cw);
    sample.image = resize_bilinear(BasicTensor<float>({c, ch, cw}, std::move(window)), config.output_size,
                                   config.output_size);
    out.push_back(std::move(sample));
  }
  return out;
}

DatasetSplit split_dataset(const std::vector<std::string>& image_ids, std::uint64_t seed) {
  if (image_ids.size() < 10) throw std::invalid_argument("split_dataset: need at least 10 ids");
  if (std::set<std::string>(image_ids.begin(), image_ids.end()).size() != image_ids.size()) {
    throw std::invalid_argument("split_dataset: duplicate ids");
  }
  std::vector<std::string> ids = image_ids;
  Rng rng(derive_seed(seed, "split"));
  rng.shuffle(ids);
  const double n = static_cast<double>(ids.size());
  const auto n_train = static_cast<std::size_t>(std::llround(0.70 * n));
  const auto n_val = static_cast<std::size_t>(std::llround(0.15 * n));
  DatasetSplit split;
  split.train.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
  split.val.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train),
                   ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  split.test.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), ids.end());
  return split;
}

void write_annotations_csv(std::ostream& out, const std::map<std::string, std::vector<GroundTruth>>& annotations) {
  out << "image_id,x1,y1,x2,y2,class_id\n";
  for (const auto& [id, boxes] : annotations) {
    for (const auto& g : boxes) {
      out << id << ',' << shortest(g.box.x1) << ',' << shortest(g.box.y1) << ',' << shortest(g.box.x2) << ','
          << shortest(g.box.y2) << ',' << g.class_id << '\n';
    }
  }
}

std::map<std::string, std::vector<GroundTruth>> read_annotations_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "image_id,x1,y1,x2,y2,class_id") {
    throw DataError("annotations csv: missing header");
  }
  std::map<std::string, std::vector<GroundTruth>> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    const std::string where = "annotations csv line " + std::to_string(line_no);
    if (f.size() != 6) throw DataError(where + ": need 6 fields");
    GroundTruth g;
    g.box = {parse_number(f[1], where), parse_number(f[2], where), parse_number(f[3], where), parse_number(f[4], where)};
    g.class_id = static_cast<int>(parse_number(f[5], where));
    if (g.class_id < 1 || g.class_id > 9) throw DataError(where + ": class id outside 1..9");
    if (!(g.box.x2 > g.box.x1 && g.box.y2 > g.box.y1)) throw DataError(where + ": degenerate box");
    out[f[0]].push_back(g);
  }
  return out;
}

std::vector<PhantomClassAppearance> PhantomSpec::default_classes() {
  // Mean HU 0, 300, ..., 2400. Pixel values stay within +-(jitter + 3 sigma)
  // = +-90 of the centre, leaving a 120 HU gap between neighbouring classes.
  std::vector<PhantomClassAppearance> classes;
  for (int k = 0; k < 9; ++k) classes.push_back({300.0 * k, 30.0, 20.0});
  return classes;
}

void PhantomSpec::validate() const {
  if (count < 0) throw ConfigError("phantom spec: negative count");
  if (height < 128 || width < 128) throw ConfigError("phantom spec: images must be at least 128x128");
  if (min_lesions < 1 || max_lesions < min_lesions) throw ConfigError("phantom spec: bad lesion count range");
  if (!(min_semi_axis > 0.0) || max_semi_axis < min_semi_axis) throw ConfigError("phantom spec: bad semi-axis range");
  if (2.0 * max_semi_axis + 4.0 >= static_cast<double>(std::min(height, width))) {
    throw ConfigError("phantom spec: lesions do not fit the image");
  }
  if (classes.size() != 9) throw ConfigError("phantom spec: need 9 class appearances");
  if (background_grid < 1) throw ConfigError("phantom spec: background_grid must be positive");
}

Box ellipse_bounding_box(double cy, double cx, double a, double b, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  const double hw = std::sqrt(a * a * c * c + b * b * s * s);
  const double hh = std::sqrt(a * a * s * s + b * b * c * c);
  return {cx - hw, cy - hh, cx + hw, cy + hh};
}

std::vector<std::vector<int>> plan_phantom_classes(const PhantomSpec& spec) {
  Rng rng(derive_seed(spec.seed, "phantom/plan"));
  std::vector<int> bag;
  std::vector<std::vector<int>> plan(static_cast<std::size_t>(spec.count));
  for (auto& classes : plan) {
    const auto n = rng.uniform_int(spec.min_lesions, spec.max_lesions);
    for (std::int64_t i = 0; i < n; ++i) {
      if (bag.empty()) {
        bag = {1, 2, 3, 4, 5, 6, 7, 8, 9};
        rng.shuffle(bag);
      }
      classes.push_back(bag.back());
      bag.pop_back();
    }
  }
  return plan;
}

PhantomImage render_phantom(const PhantomSpec& spec, std::int64_t index, const std::vector<int>& classes) {
  Rng rng(derive_seed(spec.seed, "phantom/" + std::to_string(index)));
  const auto h = spec.height, w = spec.width;
  const int g = spec.background_grid;
  std::vector<double> grid(static_cast<std::size_t>((g + 1) * (g + 1)));
  for (auto& v : grid) v = rng.uniform(-1.0, 1.0) * spec.background_amplitude;
  std::vector<double> hu(static_cast<std::size_t>(h * w));
  for (std::int64_t y = 0; y < h; ++y) {
    const double gy = (static_cast<double>(y) + 0.5) / static_cast<double>(h) * g;
    const auto iy = std::min<std::int64_t>(static_cast<std::int64_t>(gy), g - 1);
    const double ty = gy - static_cast<double>(iy);
    for (std::int64_t x = 0; x < w; ++x) {
      const double gx = (static_cast<double>(x) + 0.5) / static_cast<double>(w) * g;
      const auto ix = std::min<std::int64_t>(static_cast<std::int64_t>(gx), g - 1);
      const double tx = gx - static_cast<double>(ix);
      const auto node = [&](std::int64_t r, std::int64_t c) { return grid[static_cast<std::size_t>(r * (g + 1) + c)]; };
      const double smooth = (1 - ty) * ((1 - tx) * node(iy, ix) + tx * node(iy, ix + 1)) +
                            ty * ((1 - tx) * node(iy + 1, ix) + tx * node(iy + 1, ix + 1));
      hu[static_cast<std::size_t>(y * w + x)] = spec.background_hu + smooth + rng.normal() * spec.background_noise;
    }
  }

  PhantomImage img;
  for (const int cls : classes) {
    for (int attempt = 0; attempt < 200; ++attempt) {
      PhantomLesion l;
      l.class_id = cls;
      l.a = rng.uniform(spec.min_semi_axis, spec.max_semi_axis);
      l.b = rng.uniform(spec.min_semi_axis, spec.max_semi_axis);
      l.angle = rng.uniform(0.0, std::numbers::pi);
      const Box extent = ellipse_bounding_box(0, 0, l.a, l.b, l.angle);
      l.cx = rng.uniform(extent.x2 + 1.0, static_cast<double>(w) - extent.x2 - 1.0);
      l.cy = rng.uniform(extent.y2 + 1.0, static_cast<double>(h) - extent.y2 - 1.0);
      l.box = ellipse_bounding_box(l.cy, l.cx, l.a, l.b, l.angle);
      bool overlaps = false;
      for (const auto& other : img.lesions) {
        overlaps |= l.box.x1 < other.box.x2 + 3 && other.box.x1 < l.box.x2 + 3 && l.box.y1 < other.box.y2 + 3 &&
                    other.box.y1 < l.box.y2 + 3;
      }
      if (overlaps) continue;
      const auto& look = spec.classes[static_cast<std::size_t>(cls - 1)];
      const double mean = look.hu_center + rng.uniform(-look.hu_jitter, look.hu_jitter);
      const double c = std::cos(l.angle), s = std::sin(l.angle);
      const auto y_lo = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(l.box.y1)));
      const auto y_hi = std::min<std::int64_t>(h - 1, static_cast<std::int64_t>(std::ceil(l.box.y2)));
      const auto x_lo = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(l.box.x1)));
      const auto x_hi = std::min<std::int64_t>(w - 1, static_cast<std::int64_t>(std::ceil(l.box.x2)));
      for (std::int64_t y = y_lo; y <= y_hi; ++y) {
        for (std::int64_t x = x_lo; x <= x_hi; ++x) {
          const double dx = static_cast<double>(x) + 0.5 - l.cx, dy = static_cast<double>(y) + 0.5 - l.cy;
          const double u = c * dx + s * dy, v = -s * dx + c * dy;
          if ((u * u) / (l.a * l.a) + (v * v) / (l.b * l.b) > 1.0) continue;
          hu[static_cast<std::size_t>(y * w + x)] = mean + rng.normal() * look.texture_sigma;
        }
      }
      img.lesions.push_back(l);
      break;
    }
  }

  char id[32];
  std::snprintf(id, sizeof id, "phantom_%06lld", static_cast<long long>(index));
  img.slice.image_id = id;
  img.slice.height = h;
  img.slice.width = w;
  img.slice.pixels.resize(hu.size());
  for (std::size_t i = 0; i < hu.size(); ++i) {
    img.slice.pixels[i] = static_cast<std::uint16_t>(std::clamp(std::lround(hu[i] + kHuOffset), 0L, 65535L));
  }
  for (const auto& l : img.lesions) img.slice.annotations.push_back({l.box, l.class_id});
  return img;
}

PhantomSpec phantom_spec_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  PhantomSpec spec;
  for (const auto& [key, value] : j.items()) {
    if (key == "count") spec.count = value.get<std::int64_t>();
    else if (key == "height") spec.height = value.get<std::int64_t>();
    else if (key == "width") spec.width = value.get<std::int64_t>();
    else if (key == "seed") spec.seed = value.get<std::uint64_t>();
    else if (key == "background_hu") spec.background_hu = value.get<double>();
    else if (key == "background_amplitude") spec.background_amplitude = value.get<double>();
    else if (key == "background_noise") spec.background_noise = value.get<double>();
    else if (key == "background_grid") spec.background_grid = value.get<int>();
    else if (key == "min_semi_axis") spec.min_semi_axis = value.get<double>();
    else if (key == "max_semi_axis") spec.max_semi_axis = value.get<double>();
    else if (key == "min_lesions") spec.min_lesions = value.get<int>();
    else if (key == "max_lesions") spec.max_lesions = value.get<int>();
    else if (key == "output_dir") spec.output_dir = value.get<std::string>();
    else if (key == "classes") {
      spec.classes.clear();
      for (const auto& c : value) {
        spec.classes.push_back({c.at("hu_center").get<double>(), c.value("hu_jitter", 30.0), c.value("texture_sigma", 20.0)});
      }
    } else {
      throw ConfigError("phantom spec: unknown key '" + key + "'");
    }
  }
  spec.validate();
  return spec;
}

DatasetManifest generate_phantoms(const PhantomSpec& spec) {
  spec.validate();
  const fs::path root(spec.output_dir);
  std::error_code ec;
  fs::create_directories(root / "images", ec);
  if (ec) throw DataError("cannot create " + (root / "images").string() + ": " + ec.message());

  DatasetManifest manifest;
  manifest.seed = spec.seed;
  manifest.height = spec.height;
  manifest.width = spec.width;
  std::map<std::string, std::vector<GroundTruth>> annotations;
  std::uint64_t hash = fnv1a64("");
  const auto plan = plan_phantom_classes(spec);
  for (std::int64_t i = 0; i < spec.count; ++i) {
    const auto img = render_phantom(spec, i, plan[static_cast<std::size_t>(i)]);
    const std::string file = "images/" + img.slice.image_id + ".raw";
    save_slice_raw(root / file, img.slice);
    const auto bytes = read_file(root / file);
    hash = fnv1a64(std::string_view(bytes.data(), bytes.size()), hash);
    manifest.image_ids.push_back(img.slice.image_id);
    manifest.files.push_back(file);
    annotations[img.slice.image_id] = img.slice.annotations;
  }
  std::ostringstream csv;
  write_annotations_csv(csv, annotations);
  hash = fnv1a64(csv.str(), hash);
  {
    std::ofstream out(root / manifest.annotations_file, std::ios::binary);
    out << csv.str();
    if (!out) throw DataError("cannot write annotations");
  }
  if (manifest.image_ids.size() >= 10) {
    manifest.split = split_dataset(manifest.image_ids, spec.seed);
  } else {
    manifest.split.train = manifest.image_ids;
  }
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(hash));
  manifest.content_hash = hex;
  std::ofstream out(root / "manifest.json", std::ios::binary);
  out << manifest_to_json(manifest) << '\n';
  if (!out) throw DataError("cannot write manifest");
  return manifest;
}

std::string manifest_to_json(const DatasetManifest& m) {
  nlohmann::ordered_json j;
  j["format_version"] = m.format_version;
  j["seed"] = m.seed;
  j["height"] = m.height;
  j["width"] = m.width;
  j["annotations"] = m.annotations_file;
  j["content_hash"] = m.content_hash;
  nlohmann::ordered_json images = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < m.image_ids.size(); ++i) images.push_back({{"id", m.image_ids[i]}, {"file", m.files[i]}});
  j["images"] = std::move(images);
  j["splits"] = {{"train", m.split.train}, {"val", m.split.val}, {"test", m.split.test}};
  return j.dump(2);
}

DatasetManifest manifest_from_json(const std::string& text) {
  DatasetManifest m;
  try {
    const auto j = nlohmann::json::parse(text);
    m.format_version = j.at("format_version").get<int>();
    if (m.format_version != 1) throw DataError("manifest: unsupported format version " + std::to_string(m.format_version));
    m.seed = j.at("seed").get<std::uint64_t>();
    m.height = j.at("height").get<std::int64_t>();
    m.width = j.at("width").get<std::int64_t>();
    m.annotations_file = j.at("annotations").get<std::string>();
    m.content_hash = j.at("content_hash").get<std::string>();
    for (const auto& img : j.at("images")) {
      m.image_ids.push_back(img.at("id").get<std::string>());
      m.files.push_back(img.at("file").get<std::string>());
    }
    const auto& s = j.at("splits");
    m.split.train = s.at("train").get<std::vector<std::string>>();
    m.split.val = s.at("val").get<std::vector<std::string>>();
    m.split.test = s.at("test").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("manifest: ") + e.what());
  }
  return m;
}

CTSlice Dataset::load(const std::string& image_id) const {
  const auto it = std::find(manifest.image_ids.begin(), manifest.image_ids.end(), image_id);
  if (it == manifest.image_ids.end()) throw DataError("dataset: unknown image id '" + image_id + "'");
  CTSlice slice = load_slice(root / manifest.files[static_cast<std::size_t>(it - manifest.image_ids.begin())]);
  slice.image_id = image_id;
  const auto ann = annotations.find(image_id);
  if (ann != annotations.end()) slice.annotations = ann->second;
  return slice;
}

const std::vector<std::string>& Dataset::split(const std::string& name) const {
  if (name == "train") return manifest.split.train;
  if (name == "val") return manifest.split.val;
  if (name == "test") return manifest.split.test;
  if (name == "all") return manifest.image_ids;
  throw DataError("dataset: unknown split '" + name + "'");
}

Dataset load_dataset(const fs::path& manifest_path) {
  Dataset ds;
  ds.root = manifest_path.parent_path();
  const auto bytes = read_file(manifest_path);
  ds.manifest = manifest_from_json(std::string(bytes.begin(), bytes.end()));
  std::ifstream in(ds.root / ds.manifest.annotations_file);
  if (!in) throw DataError("dataset: missing annotations file");
  ds.annotations = read_annotations_csv(in);
  return ds;
}

}  // namespace pdse
