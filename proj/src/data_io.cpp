#include "mimofan/data_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include "mimofan/pyramid.hpp"

namespace mimofan {

namespace fs = std::filesystem;

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open file: " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("failed while reading: " + path.string());
  return bytes;
}

void write_file(const fs::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write file: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed while writing: " + path.string());
}

// ---------------------------------------------------------------------------
// PGM / PPM

namespace {

bool is_space(std::uint8_t c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; }

// Reads one unsigned decimal header token, skipping whitespace and '#' comments.
std::size_t header_number(std::span<const std::uint8_t> bytes, std::size_t& pos, const char* what,
                          std::size_t* token_at = nullptr) {
  while (pos < bytes.size()) {
    if (is_space(bytes[pos])) {
      ++pos;
    } else if (bytes[pos] == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
    } else {
      break;
    }
  }
  if (pos >= bytes.size()) throw ParseError(std::string("pgm: truncated header, missing ") + what, pos);
  const std::size_t start = pos;
  if (token_at) *token_at = start;
  std::size_t value = 0;
  while (pos < bytes.size() && bytes[pos] >= '0' && bytes[pos] <= '9') {
    value = value * 10 + static_cast<std::size_t>(bytes[pos] - '0');
    if (value > (std::size_t{1} << 30)) throw ParseError(std::string("pgm: ") + what + " too large", start);
    ++pos;
  }
  if (pos == start) throw ParseError(std::string("pgm: expected ") + what, start);
  return value;
}

std::uint8_t to_byte(float v) {
  const float clamped = std::clamp(v, 0.0f, 1.0f);
  return static_cast<std::uint8_t>(std::lround(clamped * 255.0f));
}

void require_single_plane(const char* op, const Shape& s) {
  require_dim(op, "batch", s.n, 1);
  require_dim(op, "channel", s.c, 1);
}

}  // namespace

Tensor<float> parse_pgm(std::span<const std::uint8_t> bytes, PgmContent content) {
  if (bytes.size() < 2) throw ParseError("pgm: truncated magic", bytes.size());
  if (bytes[0] != 'P' || bytes[1] != '5') throw ParseError("pgm: unsupported magic", 0);
  std::size_t pos = 2;
  const std::size_t magic_end = pos;
  if (pos >= bytes.size() || !is_space(bytes[pos])) throw ParseError("pgm: unsupported magic", magic_end);
  const std::size_t width = header_number(bytes, pos, "width");
  const std::size_t height = header_number(bytes, pos, "height");
  std::size_t maxval_at = 0;
  const std::size_t maxval = header_number(bytes, pos, "maxval", &maxval_at);
  if (maxval != 255) throw ParseError("pgm: maxval must be 255, got " + std::to_string(maxval), maxval_at);
  if (width == 0 || height == 0) throw ParseError("pgm: zero image dimension", maxval_at);
  if (pos >= bytes.size() || !is_space(bytes[pos])) throw ParseError("pgm: missing whitespace after header", pos);
  ++pos;
  const std::size_t pixels = width * height;
  if (bytes.size() - pos < pixels) {
    throw ParseError("pgm: truncated payload, expected " + std::to_string(pixels) + " bytes", bytes.size());
  }
  Tensor<float> out(Shape{1, 1, height, width});
  for (std::size_t i = 0; i < pixels; ++i) {
    const std::uint8_t b = bytes[pos + i];
    out[i] = content == PgmContent::mask ? (b >= 128 ? 1.0f : 0.0f) : static_cast<float>(b) / 255.0f;
  }
  return out;
}

Tensor<float> read_pgm(const fs::path& path, PgmContent content) {
  const auto bytes = read_file(path);
  try {
    return parse_pgm(bytes, content);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what(), e.offset());
  }
}

std::vector<std::uint8_t> encode_pgm(const Tensor<float>& image) {
  const Shape& s = image.shape();
  require_single_plane("write_pgm", s);
  const std::string header = "P5\n" + std::to_string(s.w) + " " + std::to_string(s.h) + "\n255\n";
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  bytes.reserve(header.size() + image.size());
  for (std::size_t i = 0; i < image.size(); ++i) bytes.push_back(to_byte(image[i]));
  return bytes;
}

void write_pgm(const Tensor<float>& image, const fs::path& path) { write_file(path, encode_pgm(image)); }

std::vector<Rgb> overlay_pixels(const Tensor<float>& image, const Tensor<float>& pred, const Tensor<float>& truth) {
  require_single_plane("render_overlay", image.shape());
  require_same_shape("render_overlay", image.shape(), pred.shape());
  require_same_shape("render_overlay", image.shape(), truth.shape());
  require_binary("render_overlay", pred);
  require_binary("render_overlay", truth);
  std::vector<Rgb> pixels(image.size());
  for (std::size_t i = 0; i < image.size(); ++i) {
    const bool p = pred[i] != 0.0f;
    const bool t = truth[i] != 0.0f;
    if (p && t) {
      pixels[i] = {255, 0, 0};
    } else if (p) {
      pixels[i] = {0, 0, 255};
    } else if (t) {
      pixels[i] = {0, 255, 0};
    } else {
      const std::uint8_t g = to_byte(image[i]);
      pixels[i] = {g, g, g};
    }
  }
  return pixels;
}

std::vector<std::uint8_t> encode_ppm(std::span<const Rgb> pixels, std::size_t height, std::size_t width) {
  if (pixels.size() != height * width) throw DimensionError("write_ppm: pixel count does not match dimensions");
  const std::string header = "P6\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  bytes.reserve(header.size() + 3 * pixels.size());
  for (const Rgb& p : pixels) {
    bytes.push_back(p.r);
    bytes.push_back(p.g);
    bytes.push_back(p.b);
  }
  return bytes;
}

void render_overlay(const Tensor<float>& image, const Tensor<float>& pred, const Tensor<float>& truth,
                    const fs::path& path) {
  const auto pixels = overlay_pixels(image, pred, truth);
  write_file(path, encode_ppm(pixels, image.shape().h, image.shape().w));
}

// ---------------------------------------------------------------------------
// Manifest

std::vector<std::string> DatasetManifest::case_ids() const {
  std::vector<std::string> ids;
  ids.reserve(rows.size());
  for (const auto& row : rows) ids.push_back(row.case_id);
  return ids;
}

DatasetManifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest: " + path.string());
  DatasetManifest manifest;
  manifest.path = path;
  const fs::path base = path.parent_path();
  std::string line;
  std::size_t offset = 0;
  if (!std::getline(in, line)) throw ParseError(path.string() + ": empty manifest", 0);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "case_id,image,mask") throw ParseError(path.string() + ": header must be 'case_id,image,mask'", 0);
  offset += line.size() + 1;
  std::set<std::string> seen;
  while (std::getline(in, line)) {
    const std::size_t line_start = offset;
    offset += line.size() + 1;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() != 3 || fields[0].empty() || fields[1].empty() || fields[2].empty()) {
      throw ParseError(path.string() + ": expected 3 non-empty fields", line_start);
    }
    if (!seen.insert(fields[0]).second) {
      throw ParseError(path.string() + ": duplicate case_id '" + fields[0] + "'", line_start);
    }
    ManifestRow row{fields[0], fields[1], fields[2]};
    if (row.image.is_relative()) row.image = base / row.image;
    if (row.mask.is_relative()) row.mask = base / row.mask;
    manifest.rows.push_back(std::move(row));
  }
  if (manifest.rows.empty()) throw ParseError(path.string() + ": manifest lists no cases", offset);
  return manifest;
}

void write_manifest(const DatasetManifest& manifest, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write manifest: " + path.string());
  const fs::path base = path.parent_path();
  out << "case_id,image,mask\n";
  for (const auto& row : manifest.rows) {
    out << row.case_id << ',' << row.image.lexically_relative(base).generic_string() << ','
        << row.mask.lexically_relative(base).generic_string() << '\n';
  }
  if (!out) throw IoError("failed while writing manifest: " + path.string());
}

std::vector<Case> load_dataset(const DatasetManifest& manifest, int scales) {
  std::vector<Case> cases;
  cases.reserve(manifest.rows.size());
  for (const auto& row : manifest.rows) {
    if (!fs::exists(row.image)) throw IoError("case " + row.case_id + ": missing image file " + row.image.string());
    if (!fs::exists(row.mask)) throw IoError("case " + row.case_id + ": missing mask file " + row.mask.string());
    Case c{row.case_id, read_pgm(row.image, PgmContent::intensity), read_pgm(row.mask, PgmContent::mask)};
    if (!(c.image.shape() == c.mask.shape())) {
      throw DimensionError("case " + row.case_id + ": image " + c.image.shape().str() + " and mask " +
                           c.mask.shape().str() + " differ");
    }
    if (!cases.empty() && !(cases.front().image.shape() == c.image.shape())) {
      throw DimensionError("case " + row.case_id + ": size " + c.image.shape().str() + " differs from case " +
                           cases.front().id);
    }
    require_pyramid_divisible(("case " + row.case_id).c_str(), c.image.shape(), scales);
    cases.push_back(std::move(c));
  }
  return cases;
}

DatasetManifest synth_dataset(int cases, int size, std::uint64_t seed, const fs::path& out_dir) {
  if (cases < 1) throw UsageError("synth: number of cases must be >= 1");
  if (size < 16 || size % 16 != 0) throw UsageError("synth: size must be a positive multiple of 16");
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  if (!ec) fs::create_directories(out_dir / "masks", ec);
  if (ec) throw IoError("cannot create dataset directory " + out_dir.string() + ": " + ec.message());

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 0.05);
  const double n = size;

  DatasetManifest manifest;
  manifest.path = out_dir / "manifest.csv";
  for (int k = 0; k < cases; ++k) {
    const double ra = n * (0.15 + 0.20 * unit(rng));
    const double rb = n * (0.15 + 0.20 * unit(rng));
    const double angle = std::numbers::pi * unit(rng);
    const double cx = n * (0.35 + 0.30 * unit(rng));
    const double cy = n * (0.35 + 0.30 * unit(rng));
    const double background = 0.20 + 0.25 * unit(rng);
    const double contrast = 0.25 + 0.15 * unit(rng);
    // Edge softness ~1.5 px, expressed in normalised ellipse radius.
    const double softness = 1.5 / std::min(ra, rb);
    const double ca = std::cos(angle);
    const double sa = std::sin(angle);

    const Shape shape{1, 1, static_cast<std::size_t>(size), static_cast<std::size_t>(size)};
    Tensor<float> image(shape);
    Tensor<float> mask(shape);
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const double dx = x + 0.5 - cx;
        const double dy = y + 0.5 - cy;
        const double u = (ca * dx + sa * dy) / ra;
        const double v = (-sa * dx + ca * dy) / rb;
        const double rho = std::sqrt(u * u + v * v);
        const double inside = 1.0 / (1.0 + std::exp((rho - 1.0) / softness));
        const double value = background + contrast * inside + noise(rng);
        const auto at = static_cast<std::size_t>(y * size + x);
        image[at] = static_cast<float>(std::clamp(value, 0.0, 1.0));
        mask[at] = rho <= 1.0 ? 1.0f : 0.0f;
      }
    }
    std::ostringstream id;
    id << "case" << std::setw(3) << std::setfill('0') << k;
    ManifestRow row{id.str(), out_dir / "images" / (id.str() + ".pgm"), out_dir / "masks" / (id.str() + ".pgm")};
    write_pgm(image, row.image);
    write_pgm(mask, row.mask);
    manifest.rows.push_back(std::move(row));
  }
  write_manifest(manifest, manifest.path);
  return manifest;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::size_t pos() const { return pos_; }

  std::span<const std::uint8_t> take(std::size_t count, const char* what) {
    if (bytes_.size() - pos_ < count) {
      throw ParseError(std::string("checkpoint: truncated ") + what, bytes_.size());
    }
    auto out = bytes_.subspan(pos_, count);
    pos_ += count;
    return out;
  }

  std::uint32_t u32(const char* what) {
    const auto b = take(4, what);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

bool is_buffer_name(const std::string& name) {
  auto ends_with = [&](std::string_view suffix) {
    return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  return ends_with(".running_mean") || ends_with(".running_var");
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint) {
  std::vector<std::uint8_t> out{'M', 'F', 'A', 'N'};
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(checkpoint.config.size()));
  out.insert(out.end(), checkpoint.config.begin(), checkpoint.config.end());
  put_u32(out, static_cast<std::uint32_t>(checkpoint.tensors.size()));
  for (const auto& [name, value] : checkpoint.tensors) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    const Shape& s = value.shape();
    for (std::size_t d : {s.n, s.c, s.h, s.w}) put_u32(out, static_cast<std::uint32_t>(d));
    const auto* raw = reinterpret_cast<const std::uint8_t*>(value.ptr());
    out.insert(out.end(), raw, raw + value.size() * sizeof(float));
  }
  return out;
}

Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader in(bytes);
  const auto magic = in.take(4, "magic");
  if (std::memcmp(magic.data(), "MFAN", 4) != 0) throw ParseError("checkpoint: bad magic", 0);
  const std::size_t version_at = in.pos();
  const std::uint32_t version = in.u32("version");
  if (version != kCheckpointVersion) {
    throw ParseError("checkpoint: unsupported format version " + std::to_string(version), version_at);
  }
  Checkpoint checkpoint;
  const std::uint32_t config_len = in.u32("config length");
  const auto config = in.take(config_len, "config");
  checkpoint.config.assign(config.begin(), config.end());
  const std::uint32_t count = in.u32("tensor count");
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::uint32_t name_len = in.u32("tensor name length");
    const auto name = in.take(name_len, "tensor name");
    std::uint32_t dims[4];
    const std::size_t dims_at = in.pos();
    for (auto& d : dims) d = in.u32("tensor dims");
    if (dims[0] == 0 || dims[1] == 0 || dims[2] == 0 || dims[3] == 0) {
      throw ParseError("checkpoint: zero tensor dimension", dims_at);
    }
    const Shape shape{dims[0], dims[1], dims[2], dims[3]};
    const auto payload = in.take(shape.size() * sizeof(float), "tensor payload");
    Tensor<float> value(shape);
    std::memcpy(value.ptr(), payload.data(), payload.size());
    checkpoint.tensors.push_back({std::string(name.begin(), name.end()), std::move(value)});
  }
  if (!in.done()) throw ParseError("checkpoint: trailing bytes after last tensor", in.pos());
  return checkpoint;
}

template <typename Scalar>
Checkpoint to_checkpoint(const ModelParams<Scalar>& params) {
  Checkpoint checkpoint;
  checkpoint.config = params.config.canonical();
  // Parameters then buffers, each in name order.
  for (const auto& [name, t] : params.params) checkpoint.tensors.push_back({name, t.template cast<float>()});
  for (const auto& [name, t] : params.buffers) checkpoint.tensors.push_back({name, t.template cast<float>()});
  return checkpoint;
}

ModelParams<float> from_checkpoint(const Checkpoint& checkpoint) {
  ModelParams<float> model = build<float>(NetworkConfig::parse(checkpoint.config), 0);
  std::set<std::string> loaded;
  for (const auto& [name, value] : checkpoint.tensors) {
    auto& table = is_buffer_name(name) ? model.buffers : model.params;
    auto it = table.find(name);
    if (it == table.end()) throw ConfigError("checkpoint: unexpected tensor '" + name + "' for this configuration");
    if (!(it->second.shape() == value.shape())) {
      throw ConfigError("checkpoint: tensor '" + name + "' has shape " + value.shape().str() + ", expected " +
                        it->second.shape().str());
    }
    it->second.data() = value.data();
    loaded.insert(name);
  }
  for (const auto* table : {&model.params, &model.buffers}) {
    for (const auto& [name, t] : *table) {
      if (!loaded.count(name)) throw ConfigError("checkpoint: missing tensor '" + name + "'");
    }
  }
  return model;
}

template <typename Scalar>
void save_checkpoint(const ModelParams<Scalar>& params, const fs::path& path) {
  write_file(path, encode_checkpoint(to_checkpoint(params)));
}

ModelParams<float> load_checkpoint(const fs::path& path) {
  const auto bytes = read_file(path);
  try {
    return from_checkpoint(parse_checkpoint(bytes));
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what(), e.offset());
  }
}

template Checkpoint to_checkpoint(const ModelParams<float>&);
template Checkpoint to_checkpoint(const ModelParams<double>&);
template void save_checkpoint(const ModelParams<float>&, const fs::path&);
template void save_checkpoint(const ModelParams<double>&, const fs::path&);

}  // namespace mimofan
