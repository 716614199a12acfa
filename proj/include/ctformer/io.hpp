// Copyright 2026 The ctformer Authors
// SPDX-License-Identifier: Apache-2.0

// Binary tensor files, checkpoints, dataset manifests and 8-bit image export.
// All binary fields are little-endian.

#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "ctformer/error.hpp"
#include "ctformer/model.hpp"
#include "ctformer/tensor.hpp"

namespace ctformer {

namespace io_detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v & 0xFF), static_cast<char>((v >> 8) & 0xFF),
                              static_cast<char>((v >> 16) & 0xFF), static_cast<char>((v >> 24) & 0xFF)};
  os.write(b.data(), 4);
}

inline std::uint32_t get_u32(std::istream& is, const char* what) {
  std::array<unsigned char, 4> b{};
  if (!is.read(reinterpret_cast<char*>(b.data()), 4)) throw DataError(std::string("truncated ") + what);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void expect_magic(std::istream& is, std::string_view magic) {
  std::array<char, 4> b{};
  if (!is.read(b.data(), 4) || std::string_view(b.data(), 4) != magic) {
    throw DataError("bad magic: expected '" + std::string(magic) + "'");
  }
}

inline std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open '" + path.string() + "' for writing");
  return os;
}

inline std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open '" + path.string() + "'");
  return is;
}

}  // namespace io_detail

// ---------------------------------------------------------------------------
// TensorFile: "CTF1", rank (u8), dims (u32 each), f32 payload.

inline void write_tensor(std::ostream& os, const Tensor& t) {
  if (t.rank() < 1 || t.rank() > 4) throw ShapeError("tensor files hold rank 1-4, got " + t.shape().str());
  os.write("CTF1", 4);
  os.put(static_cast<char>(t.rank()));
  for (std::size_t i = 0; i < t.rank(); ++i) io_detail::put_u32(os, static_cast<std::uint32_t>(t.dim(i)));
  for (float v : t.data()) io_detail::put_u32(os, std::bit_cast<std::uint32_t>(v));
  if (!os) throw DataError("write failed");
}

inline Tensor read_tensor(std::istream& is) {
  io_detail::expect_magic(is, "CTF1");
  const int rank = is.get();
  if (rank == std::char_traits<char>::eof()) throw DataError("truncated tensor header");
  if (rank < 1 || rank > 4) throw DataError("unsupported tensor rank " + std::to_string(rank));
  std::vector<std::int64_t> dims;
  for (int i = 0; i < rank; ++i) dims.push_back(io_detail::get_u32(is, "tensor dims"));
  Tensor t{Shape(std::span<const std::int64_t>(dims))};
  std::vector<unsigned char> raw(t.size() * 4);
  if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
    throw DataError("tensor payload shorter than " + std::to_string(raw.size()) + " bytes");
  }
  for (std::size_t i = 0; i < t.size(); ++i) {
    const unsigned char* b = raw.data() + 4 * i;
    const std::uint32_t u = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
                            (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    t[i] = std::bit_cast<float>(u);
  }
  return t;
}

inline void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  auto os = io_detail::open_out(path);
  write_tensor(os, t);
}

inline Tensor load_tensor(const std::filesystem::path& path) {
  auto is = io_detail::open_in(path);
  Tensor t = read_tensor(is);
  if (is.peek() != std::char_traits<char>::eof()) throw DataError("trailing bytes in '" + path.string() + "'");
  return t;
}

// ---------------------------------------------------------------------------
// Checkpoint: "CTFK", count (u32), entries of (name length u32, name, tensor
// record), then config text length (u32) and the text.

struct CheckpointEntry {
  std::string name;
  Tensor value;
};

struct Checkpoint {
  std::vector<CheckpointEntry> entries;
  std::string config_text;

  std::int64_t parameter_total() const {
    std::int64_t n = 0;
    for (const auto& e : entries) n += e.value.numel();
    return n;
  }
};

inline void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
  std::set<std::string> seen;
  os.write("CTFK", 4);
  io_detail::put_u32(os, static_cast<std::uint32_t>(ck.entries.size()));
  for (const auto& e : ck.entries) {
    if (!seen.insert(e.name).second) throw ContractError("duplicate checkpoint entry '" + e.name + "'");
    io_detail::put_u32(os, static_cast<std::uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    write_tensor(os, e.value);
  }
  io_detail::put_u32(os, static_cast<std::uint32_t>(ck.config_text.size()));
  os.write(ck.config_text.data(), static_cast<std::streamsize>(ck.config_text.size()));
  if (!os) throw DataError("checkpoint write failed");
}

inline Checkpoint read_checkpoint(std::istream& is) {
  io_detail::expect_magic(is, "CTFK");
  Checkpoint ck;
  const std::uint32_t count = io_detail::get_u32(is, "checkpoint count");
  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = io_detail::get_u32(is, "entry name length");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw DataError("truncated entry name");
    if (!seen.insert(name).second) throw DataError("duplicate checkpoint entry '" + name + "'");
    ck.entries.push_back({std::move(name), read_tensor(is)});
  }
  const std::uint32_t len = io_detail::get_u32(is, "config length");
  ck.config_text.assign(len, '\0');
  if (!is.read(ck.config_text.data(), len)) throw DataError("truncated checkpoint config");
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  auto os = io_detail::open_out(path);
  write_checkpoint(os, ck);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  auto is = io_detail::open_in(path);
  return read_checkpoint(is);
}

inline Checkpoint to_checkpoint(const CTformerModel& model) {
  Checkpoint ck;
  for (const Parameter& p : model.parameters()) ck.entries.push_back({p.name, p.value.clone()});
  ck.config_text = model_config_to_text(model.config());
  return ck;
}

/// Rebuilds a model from the stored configuration and copies every value,
/// checking names and shapes.
inline CTformerModel from_checkpoint(const Checkpoint& ck) {
  CTformerModel model = CTformerModel::build(model_config_from_text(ck.config_text));
  auto& params = model.parameters();
  if (params.size() != ck.entries.size()) {
    throw DataError("checkpoint holds " + std::to_string(ck.entries.size()) + " tensors, model expects " +
                    std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const CheckpointEntry& e = ck.entries[i];
    if (e.name != params[i].name || e.value.shape() != params[i].value.shape()) {
      throw DataError("checkpoint entry '" + e.name + "' " + e.value.shape().str() + " does not match '" +
                      params[i].name + "' " + params[i].value.shape().str());
    }
    std::copy(e.value.data().begin(), e.value.data().end(), params[i].value.data().begin());
  }
  return model;
}

inline void save_model(const std::filesystem::path& path, const CTformerModel& model) {
  save_checkpoint(path, to_checkpoint(model));
}

inline CTformerModel load_model(const std::filesystem::path& path) { return from_checkpoint(load_checkpoint(path)); }

// ---------------------------------------------------------------------------
// Dataset manifest. Line format:
//   hu_range <lo> <hi>
//   units normalized|hu
//   pair <ld path> <nd path> <slice id>
// Paths are relative to the manifest. '#' starts a comment.

struct ManifestPair {
  std::filesystem::path ld;
  std::filesystem::path nd;
  std::string id;
};

struct Manifest {
  double hu_lo = -1024.0;
  double hu_hi = 3072.0;
  bool hu_units = false;  // pairs stored in HU, normalized on load
  std::vector<ManifestPair> pairs;
};

inline Manifest read_manifest(const std::filesystem::path& path) {
  auto is = io_detail::open_in(path);
  const std::filesystem::path base = path.parent_path();
  Manifest m;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::istringstream ls(line);
    std::string kind;
    if (!(ls >> kind)) continue;
    auto bad = [&](const std::string& why) {
      return DataError(path.string() + ":" + std::to_string(line_no) + ": " + why);
    };
    if (kind == "hu_range") {
      if (!(ls >> m.hu_lo >> m.hu_hi) || !(m.hu_lo < m.hu_hi)) throw bad("expected 'hu_range lo hi' with lo < hi");
    } else if (kind == "units") {
      std::string u;
      ls >> u;
      if (u != "normalized" && u != "hu") throw bad("units must be normalized or hu");
      m.hu_units = u == "hu";
    } else if (kind == "pair") {
      std::string ld, nd, id;
      if (!(ls >> ld >> nd >> id)) throw bad("expected 'pair ld nd id'");
      m.pairs.push_back({base / ld, base / nd, id});
    } else {
      throw bad("unknown directive '" + kind + "'");
    }
  }
  return m;
}

inline void write_manifest(const std::filesystem::path& path, const Manifest& m) {
  auto os = io_detail::open_out(path);
  os << "hu_range " << m.hu_lo << ' ' << m.hu_hi << '\n';
  os << "units " << (m.hu_units ? "hu" : "normalized") << '\n';
  const std::filesystem::path base = path.parent_path();
  for (const auto& p : m.pairs) {
    os << "pair " << p.ld.lexically_relative(base).generic_string() << ' '
       << p.nd.lexically_relative(base).generic_string() << ' ' << p.id << '\n';
  }
}

inline float hu_to_unit(float hu, double lo, double hi) { return static_cast<float>((hu - lo) / (hi - lo)); }
inline float unit_to_hu(float u, double lo, double hi) { return static_cast<float>(lo + u * (hi - lo)); }

/// One aligned low-dose / normal-dose slice, rank-2 [h, w] in [0, 1] units.
struct SlicePair {
  std::string id;
  Tensor ld;
  Tensor nd;
};

using Dataset = std::vector<SlicePair>;

namespace io_detail {

inline Tensor as_image(Tensor t, const std::filesystem::path& path) {
  if (t.rank() == 2) return t;
  if (t.rank() == 4 && t.dim(0) == 1 && t.dim(1) == 1) return Tensor(Shape{t.dim(2), t.dim(3)}, t.values());
  throw DataError("'" + path.string() + "' is not a 2-D image: " + t.shape().str());
}

}  // namespace io_detail

inline Dataset load_dataset(const Manifest& m) {
  Dataset ds;
  for (const auto& p : m.pairs) {
    SlicePair s{p.id, io_detail::as_image(load_tensor(p.ld), p.ld), io_detail::as_image(load_tensor(p.nd), p.nd)};
    if (s.ld.shape() != s.nd.shape()) {
      throw DataError("pair '" + p.id + "': ld " + s.ld.shape().str() + " and nd " + s.nd.shape().str() + " differ");
    }
    if (m.hu_units) {
      for (Tensor* t : {&s.ld, &s.nd}) {
        for (float& v : t->data()) v = hu_to_unit(v, m.hu_lo, m.hu_hi);
      }
    }
    ds.push_back(std::move(s));
  }
  return ds;
}

inline Dataset load_dataset(const std::filesystem::path& manifest) { return load_dataset(read_manifest(manifest)); }

// ---------------------------------------------------------------------------
// 8-bit export.

/// Linear window mapping to [0, 255]: round-half-up of t * 255 with t the
/// clamped position in the window, so the window midpoint maps to 128.
inline std::uint8_t window_level(float value, double lo, double hi) {
  const double t = std::clamp((value - lo) / (hi - lo), 0.0, 1.0);
  return static_cast<std::uint8_t>(std::floor(t * 255.0 + 0.5));
}

struct Image8 {
  std::int64_t height = 0;
  std::int64_t width = 0;
  int channels = 1;
  std::vector<std::uint8_t> pixels;
};

inline Image8 window_image(const Tensor& image, double lo, double hi) {
  if (image.rank() != 2) throw ShapeError("window_image expects [h, w], got " + image.shape().str());
  Image8 out{image.dim(0), image.dim(1), 1, {}};
  out.pixels.reserve(image.size());
  for (float v : image.data()) out.pixels.push_back(window_level(v, lo, hi));
  return out;
}

/// Binary PGM (one channel) or PPM (three channels).
inline void write_pnm(const std::filesystem::path& path, const Image8& img) {
  auto os = io_detail::open_out(path);
  os << (img.channels == 1 ? "P5" : "P6") << '\n' << img.width << ' ' << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!os) throw DataError("write failed for '" + path.string() + "'");
}

inline Image8 read_pnm(const std::filesystem::path& path) {
  auto is = io_detail::open_in(path);
  std::string magic;
  Image8 img;
  int maxval = 0;
  is >> magic >> img.width >> img.height >> maxval;
  if ((magic != "P5" && magic != "P6") || maxval != 255) throw DataError("unsupported PNM '" + path.string() + "'");
  is.get();
  img.channels = magic == "P5" ? 1 : 3;
  img.pixels.resize(static_cast<std::size_t>(img.width * img.height * img.channels));
  if (!is.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()))) {
    throw DataError("truncated PNM '" + path.string() + "'");
  }
  return img;
}

/// Window an image and write it as a portable graymap.
inline void export_view(const std::filesystem::path& path, const Tensor& image, double lo, double hi) {
  write_pnm(path, window_image(image, lo, hi));
}

/// Grayscale base blended with a colored heat layer: out = (1 - a) * base + a * heat.
inline Image8 overlay(const Image8& base, const Tensor& heat, double alpha = 0.4) {
  if (base.channels != 1 || heat.rank() != 2 || heat.dim(0) != base.height || heat.dim(1) != base.width) {
    throw ShapeError("overlay expects a grayscale base and a matching [h, w] heat map");
  }
  Image8 out{base.height, base.width, 3, {}};
  out.pixels.reserve(base.pixels.size() * 3);
  for (std::size_t i = 0; i < base.pixels.size(); ++i) {
    const double g = base.pixels[i];
    const double h = std::clamp(static_cast<double>(heat[i]), 0.0, 1.0);
    // Blue to green to red.
    const std::array<double, 3> c{255.0 * std::clamp(2.0 * h - 1.0, 0.0, 1.0),
                                  255.0 * (1.0 - std::abs(2.0 * h - 1.0)),
                                  255.0 * std::clamp(1.0 - 2.0 * h, 0.0, 1.0)};
    for (double ch : c) {
      out.pixels.push_back(static_cast<std::uint8_t>(std::floor((1.0 - alpha) * g + alpha * ch + 0.5)));
    }
  }
  return out;
}

}  // namespace ctformer
