#pragma once

// Volume file formats.
//
// portable-raw (little-endian):
//   char[4] magic "SFDA", u32 version (1), u32 slices, u32 H, u32 W,
//   u8 has_mask, f32 spacing[3], then f32 voxels row-major
//   (slice, row, column), then u8 labels row-major when has_mask == 1.
//
// NIfTI-1 single file (.nii): minimal reader/writer for 3D scalar volumes.
// The mask of "<stem>.nii" lives next to it as "<stem>_mask.nii".

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "sfda/core/error.hpp"
#include "sfda/dataio/volume.hpp"

namespace sfda::dataio {

static_assert(std::endian::native == std::endian::little, "file formats assume a little-endian host");

enum class VolumeFormat { kNifti, kPortableRaw };

inline VolumeFormat format_from_path(const std::filesystem::path& p) {
  const auto name = p.filename().string();
  if (name.size() >= 4 && name.substr(name.size() - 4) == ".nii") return VolumeFormat::kNifti;
  return VolumeFormat::kPortableRaw;
}

namespace detail {

template <typename V>
void put(std::ostream& os, V v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}
template <typename V>
V get(std::istream& is, const std::string& path) {
  V v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!is) throw IoError("truncated file: " + path);
  return v;
}

inline std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return is;
}
inline std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  return os;
}

}  // namespace detail

inline void save_portable_raw(const std::filesystem::path& path, const Volume& v, const std::optional<LabelMask>& mask) {
  if (mask) require(mask->same_shape(v), "mask/volume shape mismatch");
  auto os = detail::open_out(path);
  os.write("SFDA", 4);
  detail::put<std::uint32_t>(os, 1);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(v.slices));
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(v.h));
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(v.w));
  detail::put<std::uint8_t>(os, mask ? 1 : 0);
  for (float s : v.spacing) detail::put<float>(os, s);
  os.write(reinterpret_cast<const char*>(v.voxels.data()), static_cast<std::streamsize>(v.voxels.size() * sizeof(float)));
  if (mask) os.write(reinterpret_cast<const char*>(mask->labels.data()), static_cast<std::streamsize>(mask->labels.size()));
  if (!os) throw IoError("write failed: " + path.string());
}

inline LabeledVolume load_portable_raw(const std::filesystem::path& path) {
  auto is = detail::open_in(path);
  const auto p = path.string();
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "SFDA", 4) != 0) throw IoError("not a portable-raw file: " + p);
  const auto version = detail::get<std::uint32_t>(is, p);
  if (version != 1) throw IoError("unsupported portable-raw version " + std::to_string(version));
  const auto s = detail::get<std::uint32_t>(is, p);
  const auto h = detail::get<std::uint32_t>(is, p);
  const auto w = detail::get<std::uint32_t>(is, p);
  const auto has_mask = detail::get<std::uint8_t>(is, p);
  LabeledVolume out;
  out.volume = Volume(static_cast<int>(s), static_cast<int>(h), static_cast<int>(w));
  for (auto& sp : out.volume.spacing) sp = detail::get<float>(is, p);
  is.read(reinterpret_cast<char*>(out.volume.voxels.data()),
          static_cast<std::streamsize>(out.volume.voxels.size() * sizeof(float)));
  if (!is) throw IoError("truncated voxel data: " + p);
  if (has_mask != 0) {
    out.mask = LabelMask(static_cast<int>(s), static_cast<int>(h), static_cast<int>(w));
    is.read(reinterpret_cast<char*>(out.mask->labels.data()), static_cast<std::streamsize>(out.mask->labels.size()));
    if (!is) throw IoError("truncated label data: " + p);
  }
  return out;
}

// ---------------------------------------------------------------------------
// NIfTI-1

namespace nifti {

inline constexpr std::int16_t kUint8 = 2;
inline constexpr std::int16_t kInt16 = 4;
inline constexpr std::int16_t kInt32 = 8;
inline constexpr std::int16_t kFloat32 = 16;
inline constexpr std::int16_t kFloat64 = 64;

struct Header {
  std::array<std::int16_t, 8> dim{};
  std::int16_t datatype = 0;
  std::array<float, 8> pixdim{};
  float vox_offset = 352.f;
  float scl_slope = 0.f;
  float scl_inter = 0.f;
};

inline void write(const std::filesystem::path& path, const std::array<int, 3>& shape /* s,h,w */,
                  const std::array<float, 3>& spacing, std::int16_t datatype, const void* data, std::size_t bytes) {
  std::array<char, 352> hdr{};
  auto at = [&](std::size_t off, const auto& v) { std::memcpy(hdr.data() + off, &v, sizeof(v)); };
  at(0, std::int32_t{348});
  const std::array<std::int16_t, 8> dim{3, static_cast<std::int16_t>(shape[2]), static_cast<std::int16_t>(shape[1]),
                                        static_cast<std::int16_t>(shape[0]), 1, 1, 1, 1};
  at(40, dim);
  at(70, datatype);
  const std::int16_t bitpix = datatype == kUint8 ? 8 : datatype == kInt16 ? 16 : datatype == kFloat64 ? 64 : 32;
  at(72, bitpix);
  const std::array<float, 8> pixdim{1.f, spacing[2], spacing[1], spacing[0], 0.f, 0.f, 0.f, 0.f};
  at(76, pixdim);
  at(108, 352.f);
  at(112, 1.f);  // scl_slope
  at(116, 0.f);
  std::memcpy(hdr.data() + 344, "n+1\0", 4);
  auto os = detail::open_out(path);
  os.write(hdr.data(), static_cast<std::streamsize>(hdr.size()));
  os.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
  if (!os) throw IoError("write failed: " + path.string());
}

/// Reads a 3D scalar volume as doubles (scaling applied) plus its header.
inline std::pair<Header, std::vector<double>> read(const std::filesystem::path& path) {
  auto is = detail::open_in(path);
  std::array<char, 348> raw{};
  is.read(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (!is) throw IoError("truncated NIfTI header: " + path.string());
  std::int32_t sizeof_hdr = 0;
  std::memcpy(&sizeof_hdr, raw.data(), 4);
  if (sizeof_hdr != 348) throw IoError("not a little-endian NIfTI-1 file: " + path.string());
  Header h;
  std::memcpy(h.dim.data(), raw.data() + 40, sizeof(h.dim));
  std::memcpy(&h.datatype, raw.data() + 70, 2);
  std::memcpy(h.pixdim.data(), raw.data() + 76, sizeof(h.pixdim));
  std::memcpy(&h.vox_offset, raw.data() + 108, 4);
  std::memcpy(&h.scl_slope, raw.data() + 112, 4);
  std::memcpy(&h.scl_inter, raw.data() + 116, 4);
  if (h.dim[0] < 2 || h.dim[0] > 4) throw IoError("unsupported NIfTI dimensionality in " + path.string());
  for (int i = 4; i <= h.dim[0]; ++i)
    if (h.dim[static_cast<std::size_t>(i)] > 1) throw IoError("only scalar 3D NIfTI volumes are supported");
  const std::size_t n = static_cast<std::size_t>(h.dim[1]) * static_cast<std::size_t>(h.dim[2]) *
                        static_cast<std::size_t>(h.dim[0] >= 3 ? std::max<std::int16_t>(h.dim[3], 1) : 1);
  is.seekg(static_cast<std::streamoff>(h.vox_offset));
  std::vector<double> out(n);
  auto read_as = [&](auto tag) {
    using V = decltype(tag);
    std::vector<V> buf(n);
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * sizeof(V)));
    if (!is) throw IoError("truncated NIfTI data: " + path.string());
    for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<double>(buf[i]);
  };
  switch (h.datatype) {
    case kUint8: read_as(std::uint8_t{}); break;
    case kInt16: read_as(std::int16_t{}); break;
    case kInt32: read_as(std::int32_t{}); break;
    case kFloat32: read_as(float{}); break;
    case kFloat64: read_as(double{}); break;
    default: throw IoError("unsupported NIfTI datatype " + std::to_string(h.datatype));
  }
  if (h.scl_slope != 0.f && !(h.scl_slope == 1.f && h.scl_inter == 0.f))
    for (auto& v : out) v = v * h.scl_slope + h.scl_inter;
  return {h, std::move(out)};
}

}  // namespace nifti

inline std::filesystem::path nifti_mask_path(const std::filesystem::path& volume_path) {
  auto stem = volume_path.filename().string();
  stem = stem.substr(0, stem.size() - 4);
  return volume_path.parent_path() / (stem + "_mask.nii");
}

inline void save_nifti(const std::filesystem::path& path, const Volume& v, const std::optional<LabelMask>& mask) {
  if (mask) require(mask->same_shape(v), "mask/volume shape mismatch");
  nifti::write(path, {v.slices, v.h, v.w}, v.spacing, nifti::kFloat32, v.voxels.data(), v.voxels.size() * sizeof(float));
  if (mask)
    nifti::write(nifti_mask_path(path), {v.slices, v.h, v.w}, v.spacing, nifti::kUint8, mask->labels.data(),
                 mask->labels.size());
}

inline LabeledVolume load_nifti(const std::filesystem::path& path) {
  auto [hdr, data] = nifti::read(path);
  const int w = hdr.dim[1], h = hdr.dim[2], s = hdr.dim[0] >= 3 ? std::max<int>(hdr.dim[3], 1) : 1;
  LabeledVolume out;
  out.volume = Volume(s, h, w);
  for (std::size_t i = 0; i < data.size(); ++i) out.volume.voxels[i] = static_cast<float>(data[i]);
  out.volume.spacing = {hdr.pixdim[3] > 0 ? hdr.pixdim[3] : 1.f, hdr.pixdim[2] > 0 ? hdr.pixdim[2] : 1.f,
                        hdr.pixdim[1] > 0 ? hdr.pixdim[1] : 1.f};
  const auto mpath = nifti_mask_path(path);
  if (std::filesystem::exists(mpath)) {
    auto [mh, md] = nifti::read(mpath);
    const int mw = mh.dim[1], mhh = mh.dim[2], ms = mh.dim[0] >= 3 ? std::max<int>(mh.dim[3], 1) : 1;
    if (mw != w || mhh != h || ms != s)
      throw ValidationError("mask shape does not match volume shape for " + path.string());
    out.mask = LabelMask(s, h, w);
    for (std::size_t i = 0; i < md.size(); ++i) {
      require(md[i] >= 0 && md[i] < 256, "mask label out of range in " + mpath.string());
      out.mask->labels[i] = static_cast<std::uint8_t>(md[i]);
    }
  }
  return out;
}

/// Loads a volume and, when present on disk, its label mask.
inline LabeledVolume load_volume(const std::filesystem::path& path, VolumeFormat format) {
  if (!std::filesystem::exists(path)) throw IoError("no such file: " + path.string());
  return format == VolumeFormat::kNifti ? load_nifti(path) : load_portable_raw(path);
}

inline LabeledVolume load_volume(const std::filesystem::path& path) { return load_volume(path, format_from_path(path)); }

inline void save_volume(const std::filesystem::path& path, const Volume& v, const std::optional<LabelMask>& mask) {
  if (format_from_path(path) == VolumeFormat::kNifti)
    save_nifti(path, v, mask);
  else
    save_portable_raw(path, v, mask);
}

}  // namespace sfda::dataio
