#include "wfs/bundle.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace wfs {

namespace {

constexpr char kBundleMagic[4] = {'W', 'F', 'B', '1'};
constexpr char kDoubleMagic[4] = {'W', 'F', 'D', '1'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : b_(b) {}

  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) throw Error(Errc::truncated, "bundle: truncated payload");
  }
  std::uint8_t u8() {
    need(1);
    return b_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{b_[pos_ + i]} << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{b_[pos_ + i]} << (8 * i);
    pos_ += 8;
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  const std::uint8_t* here() const { return b_.data() + pos_; }
  std::size_t remaining() const { return b_.size() - pos_; }
  void skip(std::size_t n) {
    need(n);
    pos_ += n;
  }

 private:
  const std::vector<std::uint8_t>& b_;
  std::size_t pos_ = 0;
};

}  // namespace

void Bundle::put(const std::string& name, Field value) {
  entries_.emplace_back(name, std::move(value));
}

void Bundle::put(const std::string& name, Eigen::MatrixXd value) {
  entries_.emplace_back(name, std::move(value));
}

void Bundle::put_text(const std::string& name, std::string value) {
  entries_.emplace_back(name, std::move(value));
}

bool Bundle::contains(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.first == name) return true;
  return false;
}

const Bundle::Value& Bundle::find(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.first == name) return e.second;
  throw Error(Errc::config, "bundle: missing entry '" + name + "'");
}

const Field& Bundle::field(const std::string& name) const {
  const auto* v = std::get_if<Field>(&find(name));
  if (!v) throw Error(Errc::config, "bundle: entry '" + name + "' is not f32");
  return *v;
}

const Eigen::MatrixXd& Bundle::matrix(const std::string& name) const {
  const auto* v = std::get_if<Eigen::MatrixXd>(&find(name));
  if (!v) throw Error(Errc::config, "bundle: entry '" + name + "' is not f64");
  return *v;
}

const std::string& Bundle::text(const std::string& name) const {
  const auto* v = std::get_if<std::string>(&find(name));
  if (!v) throw Error(Errc::config, "bundle: entry '" + name + "' is not text");
  return *v;
}

std::vector<std::uint8_t> Bundle::encode() const {
  std::vector<std::uint8_t> out(std::begin(kBundleMagic), std::end(kBundleMagic));
  put_u32(out, std::uint32_t(entries_.size()));
  for (const auto& [name, value] : entries_) {
    put_u32(out, std::uint32_t(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    if (const auto* f = std::get_if<Field>(&value)) {
      out.push_back(0);
      const auto rec = encode_tensor(*f);
      out.insert(out.end(), rec.begin(), rec.end());
    } else if (const auto* m = std::get_if<Eigen::MatrixXd>(&value)) {
      out.push_back(1);
      out.insert(out.end(), std::begin(kDoubleMagic), std::end(kDoubleMagic));
      put_u32(out, 1);
      put_u32(out, std::uint32_t(m->rows()));
      put_u32(out, std::uint32_t(m->cols()));
      for (Index r = 0; r < m->rows(); ++r)
        for (Index c = 0; c < m->cols(); ++c)
          put_u64(out, std::bit_cast<std::uint64_t>((*m)(r, c)));
    } else {
      const auto& s = std::get<std::string>(value);
      out.push_back(2);
      put_u32(out, std::uint32_t(s.size()));
      out.insert(out.end(), s.begin(), s.end());
    }
  }
  return out;
}

Bundle Bundle::decode(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  if (r.remaining() < 4 || std::memcmp(r.here(), kBundleMagic, 4) != 0)
    throw Error(Errc::bad_magic, "bundle: bad magic");
  r.skip(4);
  const std::uint32_t count = r.u32();
  Bundle b;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str(r.u32());
    switch (r.u8()) {
      case 0: {
        std::size_t used = 0;
        Field f = decode_tensor(r.here(), r.remaining(), &used);
        r.skip(used);
        b.put(name, std::move(f));
        break;
      }
      case 1: {
        r.need(4);
        if (std::memcmp(r.here(), kDoubleMagic, 4) != 0)
          throw Error(Errc::bad_magic, "bundle: bad f64 record magic");
        r.skip(4);
        r.u32();
        const std::uint64_t rows = r.u32();
        const std::uint64_t cols = r.u32();
        if (rows * cols > (std::uint64_t{1} << 32))
          throw Error(Errc::dimension_overflow, "bundle: matrix too large");
        r.need(8 * rows * cols);
        Eigen::MatrixXd m(static_cast<Index>(rows), static_cast<Index>(cols));
        for (Index rr = 0; rr < m.rows(); ++rr)
          for (Index cc = 0; cc < m.cols(); ++cc)
            m(rr, cc) = std::bit_cast<double>(r.u64());
        b.put(name, std::move(m));
        break;
      }
      case 2:
        b.put_text(name, r.str(r.u32()));
        break;
      default:
        throw Error(Errc::bad_magic, "bundle: unknown entry kind");
    }
  }
  return b;
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(Errc::io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error(Errc::io, "cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!os) throw Error(Errc::io, "write failed: " + path.string());
}

void Bundle::save(const std::filesystem::path& path) const { write_bytes(path, encode()); }

Bundle Bundle::load(const std::filesystem::path& path) { return decode(read_bytes(path)); }

}  // namespace wfs
