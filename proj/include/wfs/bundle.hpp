#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include "wfs/field.hpp"

namespace wfs {

/// Named collection of tensors used for model persistence.
///
/// Layout: "WFB1", u32 entry count, then per entry a u32 name length, the
/// name bytes, a u8 kind and the payload. Kind 0 is a WFT1 record, kind 1 a
/// WFD1 record (the WFT1 layout with binary64 samples, matrices stored as
/// C=1, H=rows, W=cols row-major) and kind 2 is u32 length + UTF-8 text.
class Bundle {
 public:
  using Value = std::variant<Field, Eigen::MatrixXd, std::string>;

  void put(const std::string& name, Field value);
  void put(const std::string& name, Eigen::MatrixXd value);
  void put_text(const std::string& name, std::string value);

  bool contains(const std::string& name) const;
  const Field& field(const std::string& name) const;
  const Eigen::MatrixXd& matrix(const std::string& name) const;
  const std::string& text(const std::string& name) const;

  std::vector<std::uint8_t> encode() const;
  static Bundle decode(const std::vector<std::uint8_t>& bytes);

  void save(const std::filesystem::path& path) const;
  static Bundle load(const std::filesystem::path& path);

  std::size_t size() const { return entries_.size(); }

 private:
  const Value& find(const std::string& name) const;

  std::vector<std::pair<std::string, Value>> entries_;
};

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);
void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

}  // namespace wfs
