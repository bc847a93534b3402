#include "wfs/field.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <sstream>

namespace wfs {

const char* to_string(Errc code) {
  switch (code) {
    case Errc::invalid_argument: return "invalid argument";
    case Errc::non_finite: return "non-finite value";
    case Errc::bad_magic: return "bad magic";
    case Errc::truncated: return "truncated payload";
    case Errc::dimension_overflow: return "dimension overflow";
    case Errc::io: return "i/o error";
    case Errc::degenerate_geometry: return "degenerate geometry";
    case Errc::sampling_exhausted: return "sampling exhausted";
    case Errc::blow_up: return "solver blow-up";
    case Errc::not_pd: return "covariance not PD";
    case Errc::config: return "configuration error";
  }
  return "unknown";
}

namespace {

// Largest sample count a tensor file may declare (16 GiB of payload).
constexpr std::uint64_t kMaxSamples = std::uint64_t{1} << 32;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return std::uint32_t{p[0]} | std::uint32_t{p[1]} << 8 |
         std::uint32_t{p[2]} << 16 | std::uint32_t{p[3]} << 24;
}

}  // namespace

std::vector<std::uint8_t> encode_tensor(const Field& field) {
  if (field.empty()) throw Error(Errc::invalid_argument, "encode: empty field");
  const auto limit = std::numeric_limits<std::uint32_t>::max();
  if (std::uint64_t(field.channels()) > limit || std::uint64_t(field.height()) > limit ||
      std::uint64_t(field.width()) > limit)
    throw Error(Errc::dimension_overflow, "encode: dimension exceeds u32");

  std::vector<std::uint8_t> out;
  out.reserve(kTensorHeaderBytes + 4 * std::size_t(field.size()));
  out.insert(out.end(), std::begin(kTensorMagic), std::end(kTensorMagic));
  put_u32(out, std::uint32_t(field.channels()));
  put_u32(out, std::uint32_t(field.height()));
  put_u32(out, std::uint32_t(field.width()));
  for (Index i = 0; i < field.size(); ++i)
    put_u32(out, std::bit_cast<std::uint32_t>(field.data()[i]));
  return out;
}

Field decode_tensor(const std::uint8_t* bytes, std::size_t size, std::size_t* consumed) {
  if (size < 4) throw Error(Errc::truncated, "tensor: truncated header");
  if (std::memcmp(bytes, kTensorMagic, 4) != 0)
    throw Error(Errc::bad_magic, "tensor: bad magic");
  if (size < kTensorHeaderBytes) throw Error(Errc::truncated, "tensor: truncated header");

  const std::uint64_t c = get_u32(bytes + 4);
  const std::uint64_t h = get_u32(bytes + 8);
  const std::uint64_t w = get_u32(bytes + 12);
  if (c == 0 || h == 0 || w == 0)
    throw Error(Errc::invalid_argument, "tensor: zero dimension");
  // Each factor fits in 32 bits, so check pairwise before multiplying out.
  if (c * h > kMaxSamples || c * h * w > kMaxSamples)
    throw Error(Errc::dimension_overflow, "tensor: dimension overflow");

  const std::uint64_t n = c * h * w;
  if (size - kTensorHeaderBytes < 4 * n)
    throw Error(Errc::truncated, "tensor: truncated payload");

  Field::Vector data(static_cast<Index>(n));
  const std::uint8_t* p = bytes + kTensorHeaderBytes;
  for (std::uint64_t i = 0; i < n; ++i, p += 4)
    data[static_cast<Index>(i)] = std::bit_cast<float>(get_u32(p));
  if (consumed) *consumed = kTensorHeaderBytes + 4 * n;
  return Field(Index(c), Index(h), Index(w), std::move(data));
}

void write_tensor(const Field& field, const std::filesystem::path& path) {
  const auto bytes = encode_tensor(field);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error(Errc::io, "cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!os) throw Error(Errc::io, "write failed: " + path.string());
}

Field read_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(Errc::io, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                                  std::istreambuf_iterator<char>());
  return decode_tensor(bytes.data(), bytes.size());
}

std::vector<std::uint8_t> write_ppm(const Field& rgb) {
  if (rgb.channels() != 3) throw Error(Errc::invalid_argument, "ppm: expected C=3");
  const auto& d = rgb.data();
  if (!d.allFinite() || d.minCoeff() < 0.0f || d.maxCoeff() > 1.0f)
    throw Error(Errc::invalid_argument, "ppm: channel value outside [0, 1]");

  std::ostringstream header;
  header << "P6\n" << rgb.width() << ' ' << rgb.height() << "\n255\n";
  const std::string hs = header.str();
  std::vector<std::uint8_t> out(hs.begin(), hs.end());
  out.reserve(hs.size() + std::size_t(d.size()));
  const Index n = rgb.plane_size();
  for (Index i = 0; i < n; ++i)
    for (Index c = 0; c < 3; ++c)
      out.push_back(static_cast<std::uint8_t>(std::lround(double(d[c * n + i]) * 255.0)));
  return out;
}

void write_ppm(const Field& rgb, const std::filesystem::path& path) {
  const auto bytes = write_ppm(rgb);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error(Errc::io, "cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
}

}  // namespace wfs
