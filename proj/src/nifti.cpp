#include "volseq/nifti.hpp"

#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

namespace volseq {

namespace {

constexpr std::size_t kHeaderSize = 348;
constexpr std::size_t kDataOffset = 352;

template <typename T>
T get(const std::vector<unsigned char>& buf, std::size_t off) {
  static_assert(std::endian::native == std::endian::little, "little-endian host required");
  T v;
  std::memcpy(&v, buf.data() + off, sizeof(T));
  return v;
}

template <typename T>
void put(std::vector<unsigned char>& buf, std::size_t off, T v) {
  std::memcpy(buf.data() + off, &v, sizeof(T));
}

std::vector<unsigned char> slurp(const std::filesystem::path& path) {
  std::vector<unsigned char> raw;
  {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::Input, "cannot open '" + path.string() + "'");
    raw.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  if (raw.size() < 2 || raw[0] != 0x1f || raw[1] != 0x8b) return raw;

  z_stream zs{};
  if (inflateInit2(&zs, 15 + 16) != Z_OK) throw Error(ErrorKind::Format, "zlib init failed");
  std::vector<unsigned char> out;
  std::array<unsigned char, 1 << 16> chunk{};
  zs.next_in = raw.data();
  zs.avail_in = static_cast<uInt>(raw.size());
  int rc = Z_OK;
  while (rc != Z_STREAM_END) {
    zs.next_out = chunk.data();
    zs.avail_out = chunk.size();
    rc = inflate(&zs, Z_NO_FLUSH);
    out.insert(out.end(), chunk.data(), chunk.data() + (chunk.size() - zs.avail_out));
    if (rc == Z_STREAM_END) break;
    if (rc == Z_BUF_ERROR && zs.avail_in == 0) break;  // stream cut short
    if (rc != Z_OK) {
      inflateEnd(&zs);
      throw Error(ErrorKind::Format, "corrupt gzip stream in '" + path.string() + "'");
    }
  }
  inflateEnd(&zs);
  return out;
}

std::size_t type_bits(NiftiType t) {
  switch (t) {
    case NiftiType::U8: return 8;
    case NiftiType::I16: return 16;
    case NiftiType::F32: return 32;
    case NiftiType::F64: return 64;
  }
  return 0;
}

bool supported(short code) { return code == 2 || code == 4 || code == 16 || code == 64; }

std::array<double, 16> quaternion_affine(float b, float c, float d, float qx, float qy, float qz,
                                         const std::array<double, 3>& spacing, double qfac) {
  double bb = b, cc = c, dd = d;
  double a = 1.0 - (bb * bb + cc * cc + dd * dd);
  if (a < 1e-7) {
    const double s = 1.0 / std::sqrt(bb * bb + cc * cc + dd * dd);
    bb *= s;
    cc *= s;
    dd *= s;
    a = 0.0;
  } else {
    a = std::sqrt(a);
  }
  const double r[9] = {a * a + bb * bb - cc * cc - dd * dd, 2 * (bb * cc - a * dd), 2 * (bb * dd + a * cc),
                       2 * (bb * cc + a * dd), a * a + cc * cc - bb * bb - dd * dd, 2 * (cc * dd - a * bb),
                       2 * (bb * dd - a * cc), 2 * (cc * dd + a * bb), a * a + dd * dd - cc * cc - bb * bb};
  const double s[3] = {spacing[0], spacing[1], spacing[2] * qfac};
  return {r[0] * s[0], r[1] * s[1], r[2] * s[2], qx, r[3] * s[0], r[4] * s[1], r[5] * s[2], qy,
          r[6] * s[0], r[7] * s[1], r[8] * s[2], qz, 0,  0,  0,  1};
}

double det3(const std::array<double, 16>& m) {
  return m[0] * (m[5] * m[10] - m[6] * m[9]) - m[1] * (m[4] * m[10] - m[6] * m[8]) +
         m[2] * (m[4] * m[9] - m[5] * m[8]);
}

}  // namespace

void Volume::validate() const {
  if (grid.rank() != 3) throw Error(ErrorKind::Shape, "volume grid must be rank 3, got " + shape_string(grid.shape()));
  for (double s : spacing) {
    if (!(s > 0) || !std::isfinite(s)) throw Error(ErrorKind::Input, "voxel spacing must be positive");
  }
  const double det = det3(affine);
  if (!std::isfinite(det) || std::abs(det) < 1e-12) throw Error(ErrorKind::Transform, "volume affine is singular");
}

std::array<double, 16> Volume::centred_affine(const std::array<std::size_t, 3>& extents,
                                              const std::array<double, 3>& spacing) {
  std::array<double, 16> a{};
  for (int i = 0; i < 3; ++i) {
    a[i * 4 + i] = spacing[i];
    a[i * 4 + 3] = -0.5 * static_cast<double>(extents[i] - 1) * spacing[i];
  }
  a[15] = 1;
  return a;
}

NiftiType nifti_type_from_string(const std::string& name) {
  if (name == "u8" || name == "uint8") return NiftiType::U8;
  if (name == "i16" || name == "int16") return NiftiType::I16;
  if (name == "f32" || name == "float32") return NiftiType::F32;
  if (name == "f64" || name == "float64") return NiftiType::F64;
  throw Error(ErrorKind::Unsupported, "unknown NIfTI datatype '" + name + "' (expected u8, i16, f32 or f64)");
}

Volume read_nifti(const std::filesystem::path& path) {
  const auto buf = slurp(path);
  const std::string where = " in '" + path.string() + "'";
  if (buf.size() < kHeaderSize) throw Error(ErrorKind::Length, "header truncated" + where);
  if (std::memcmp(buf.data() + 344, "n+1\0", 4) != 0) {
    throw Error(ErrorKind::Format, "bad NIfTI-1 magic" + where + " (expected single-file \"n+1\")");
  }
  const auto sizeof_hdr = get<std::int32_t>(buf, 0);
  if (sizeof_hdr != static_cast<std::int32_t>(kHeaderSize)) {
    if (__builtin_bswap32(static_cast<std::uint32_t>(sizeof_hdr)) == kHeaderSize) {
      throw Error(ErrorKind::Unsupported, "big-endian NIfTI" + where);
    }
    throw Error(ErrorKind::Format, "sizeof_hdr is " + std::to_string(sizeof_hdr) + where);
  }

  std::array<short, 8> dim{};
  for (int i = 0; i < 8; ++i) dim[i] = get<short>(buf, 40 + 2 * i);
  if (dim[0] < 3 || dim[0] > 7) throw Error(ErrorKind::Unsupported, "dim[0]=" + std::to_string(dim[0]) + where);
  for (int i = 1; i <= 3; ++i) {
    if (dim[i] < 1) throw Error(ErrorKind::Format, "non-positive extent" + where);
  }
  for (int i = 4; i <= dim[0]; ++i) {
    if (dim[i] > 1) throw Error(ErrorKind::Unsupported, "only 3D volumes are supported" + where);
  }

  const short datatype = get<short>(buf, 70);
  if (!supported(datatype)) {
    throw Error(ErrorKind::Unsupported, "datatype " + std::to_string(datatype) + where);
  }
  const auto type = static_cast<NiftiType>(datatype);
  const short bitpix = get<short>(buf, 72);
  if (bitpix != static_cast<short>(type_bits(type))) {
    throw Error(ErrorKind::Format, "bitpix " + std::to_string(bitpix) + " disagrees with datatype" + where);
  }

  std::array<float, 8> pixdim{};
  for (int i = 0; i < 8; ++i) pixdim[i] = get<float>(buf, 76 + 4 * i);
  const float vox_offset = get<float>(buf, 108);
  if (!(vox_offset >= static_cast<float>(kHeaderSize)) || vox_offset != std::floor(vox_offset)) {
    throw Error(ErrorKind::Format, "invalid vox_offset" + where);
  }
  const float slope = get<float>(buf, 112);
  const float inter = get<float>(buf, 116);
  const short qform_code = get<short>(buf, 252);
  const short sform_code = get<short>(buf, 254);

  Volume v;
  const std::array<std::size_t, 3> n{static_cast<std::size_t>(dim[1]), static_cast<std::size_t>(dim[2]),
                                     static_cast<std::size_t>(dim[3])};
  for (int i = 0; i < 3; ++i) {
    const double s = std::abs(static_cast<double>(pixdim[i + 1]));
    v.spacing[i] = (s > 0 && std::isfinite(s)) ? s : 1.0;
  }

  if (sform_code > 0) {
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 4; ++c) v.affine[r * 4 + c] = get<float>(buf, 280 + 16 * r + 4 * c);
    }
    v.affine[12] = v.affine[13] = v.affine[14] = 0;
    v.affine[15] = 1;
  } else if (qform_code > 0) {
    const double qfac = pixdim[0] < 0 ? -1.0 : 1.0;
    v.affine = quaternion_affine(get<float>(buf, 256), get<float>(buf, 260), get<float>(buf, 264),
                                 get<float>(buf, 268), get<float>(buf, 272), get<float>(buf, 276), v.spacing, qfac);
  } else {
    v.affine = {v.spacing[0], 0, 0, 0, 0, v.spacing[1], 0, 0, 0, 0, v.spacing[2], 0, 0, 0, 0, 1};
  }

  const std::size_t count = n[0] * n[1] * n[2];
  const std::size_t bytes = count * type_bits(type) / 8;
  const auto start = static_cast<std::size_t>(vox_offset);
  if (buf.size() < start + bytes) {
    throw Error(ErrorKind::Length, "payload truncated: need " + std::to_string(bytes) + " bytes after offset " +
                                       std::to_string(start) + ", file has " +
                                       std::to_string(buf.size() > start ? buf.size() - start : 0) + where);
  }

  // NIfTI stores x fastest; the grid is row-major [D1 x D2 x D3] with D3 fastest.
  v.grid = Tensor({n[0], n[1], n[2]});
  const bool scaled = slope != 0.0f && std::isfinite(slope);
  const unsigned char* p = buf.data() + start;
  for (std::size_t k = 0; k < n[2]; ++k) {
    for (std::size_t j = 0; j < n[1]; ++j) {
      for (std::size_t i = 0; i < n[0]; ++i) {
        const std::size_t src = i + n[0] * (j + n[1] * k);
        double val = 0;
        switch (type) {
          case NiftiType::U8: val = p[src]; break;
          case NiftiType::I16: { std::int16_t t; std::memcpy(&t, p + 2 * src, 2); val = t; break; }
          case NiftiType::F32: { float t; std::memcpy(&t, p + 4 * src, 4); val = t; break; }
          case NiftiType::F64: { double t; std::memcpy(&t, p + 8 * src, 8); val = t; break; }
        }
        if (scaled) val = static_cast<double>(slope) * val + static_cast<double>(inter);
        v.grid[(i * n[1] + j) * n[2] + k] = val;
      }
    }
  }
  return v;
}

void write_nifti(const Volume& v, const std::filesystem::path& path, NiftiType type) {
  v.validate();
  const auto n = v.extents();
  for (auto e : n) {
    if (e > static_cast<std::size_t>(std::numeric_limits<short>::max())) {
      throw Error(ErrorKind::Size, "extent too large for NIfTI-1");
    }
  }
  const std::size_t count = n[0] * n[1] * n[2];
  const std::size_t width = type_bits(type) / 8;
  std::vector<unsigned char> buf(kDataOffset + count * width, 0);

  put<std::int32_t>(buf, 0, static_cast<std::int32_t>(kHeaderSize));
  buf[38] = 'r';
  const short dims[8] = {3, static_cast<short>(n[0]), static_cast<short>(n[1]), static_cast<short>(n[2]), 1, 1, 1, 1};
  for (int i = 0; i < 8; ++i) put<short>(buf, 40 + 2 * i, dims[i]);
  put<short>(buf, 70, static_cast<short>(type));
  put<short>(buf, 72, static_cast<short>(type_bits(type)));
  const float pixdim[8] = {1.0f, static_cast<float>(v.spacing[0]), static_cast<float>(v.spacing[1]),
                           static_cast<float>(v.spacing[2]), 0, 0, 0, 0};
  for (int i = 0; i < 8; ++i) put<float>(buf, 76 + 4 * i, pixdim[i]);
  put<float>(buf, 108, static_cast<float>(kDataOffset));
  put<float>(buf, 112, 1.0f);
  put<float>(buf, 116, 0.0f);
  buf[123] = 2;  // mm
  put<short>(buf, 252, 0);
  put<short>(buf, 254, 1);
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 4; ++c) put<float>(buf, 280 + 16 * r + 4 * c, static_cast<float>(v.affine[r * 4 + c]));
  }
  std::memcpy(buf.data() + 344, "n+1\0", 4);

  unsigned char* p = buf.data() + kDataOffset;
  for (std::size_t k = 0; k < n[2]; ++k) {
    for (std::size_t j = 0; j < n[1]; ++j) {
      for (std::size_t i = 0; i < n[0]; ++i) {
        const std::size_t dst = i + n[0] * (j + n[1] * k);
        const double val = v.grid[(i * n[1] + j) * n[2] + k];
        switch (type) {
          case NiftiType::U8:
            if (val != std::floor(val) || val < 0 || val > 255) {
              throw Error(ErrorKind::Write, "value " + std::to_string(val) + " not representable as u8");
            }
            p[dst] = static_cast<unsigned char>(val);
            break;
          case NiftiType::I16: {
            if (val != std::floor(val) || val < -32768 || val > 32767) {
              throw Error(ErrorKind::Write, "value " + std::to_string(val) + " not representable as i16");
            }
            const auto t = static_cast<std::int16_t>(val);
            std::memcpy(p + 2 * dst, &t, 2);
            break;
          }
          case NiftiType::F32: {
            const auto t = static_cast<float>(val);
            std::memcpy(p + 4 * dst, &t, 4);
            break;
          }
          case NiftiType::F64: std::memcpy(p + 8 * dst, &val, 8); break;
        }
      }
    }
  }

  const bool gz = path.extension() == ".gz";
  if (gz) {
    gzFile f = gzopen(path.string().c_str(), "wb6");
    if (!f) throw Error(ErrorKind::Write, "cannot open '" + path.string() + "' for writing");
    std::size_t done = 0;
    while (done < buf.size()) {
      const auto chunk = static_cast<unsigned>(std::min<std::size_t>(buf.size() - done, 1u << 30));
      if (gzwrite(f, buf.data() + done, chunk) != static_cast<int>(chunk)) {
        gzclose(f);
        throw Error(ErrorKind::Write, "failed writing '" + path.string() + "'");
      }
      done += chunk;
    }
    if (gzclose(f) != Z_OK) throw Error(ErrorKind::Write, "failed closing '" + path.string() + "'");
  } else {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::Write, "cannot open '" + path.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!out) throw Error(ErrorKind::Write, "failed writing '" + path.string() + "'");
  }
}

}  // namespace volseq
