#pragma once

#include <Eigen/Core>

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "metasr/errors.hpp"

namespace metasr {

/// Dense row-major matrix of doubles. Rows are frames wherever a matrix
/// holds a sequence.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

inline std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

/// Named collection of parameter matrices with lexicographic iteration
/// order. Arithmetic between two collections requires identical layouts.
class NamedParams {
 public:
  using Map = std::map<std::string, Matrix>;
  using const_iterator = Map::const_iterator;

  NamedParams() = default;
  explicit NamedParams(Map entries) : entries_(std::move(entries)) {}

  const_iterator begin() const { return entries_.begin(); }
  const_iterator end() const { return entries_.end(); }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }

  const Matrix& at(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw LookupError("parameter '" + name + "' not found");
    return it->second;
  }
  Matrix& at(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw LookupError("parameter '" + name + "' not found");
    return it->second;
  }

  /// Inserts or replaces an entry.
  void set(const std::string& name, Matrix value) { entries_[name] = std::move(value); }

  void erase(const std::string& name) { entries_.erase(name); }

  /// Total number of scalar entries.
  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& [_, m] : entries_) n += static_cast<std::size_t>(m.size());
    return n;
  }

  bool same_layout(const NamedParams& other) const {
    if (entries_.size() != other.entries_.size()) return false;
    auto a = entries_.begin();
    auto b = other.entries_.begin();
    for (; a != entries_.end(); ++a, ++b) {
      if (a->first != b->first || a->second.rows() != b->second.rows() ||
          a->second.cols() != b->second.cols())
        return false;
    }
    return true;
  }

  void require_same_layout(const NamedParams& other, std::string_view what) const {
    if (same_layout(other)) return;
    std::ostringstream os;
    os << what << ": parameter layouts differ (" << describe() << " vs " << other.describe() << ")";
    throw DimensionError(os.str());
  }

  /// A copy with every entry set to zero.
  NamedParams zeros_like() const {
    NamedParams out;
    for (const auto& [name, m] : entries_) out.entries_[name] = Matrix::Zero(m.rows(), m.cols());
    return out;
  }

  NamedParams& operator+=(const NamedParams& other) {
    require_same_layout(other, "add");
    auto b = other.entries_.begin();
    for (auto& [_, m] : entries_) (m += (b++)->second);
    return *this;
  }

  NamedParams& operator-=(const NamedParams& other) {
    require_same_layout(other, "subtract");
    auto b = other.entries_.begin();
    for (auto& [_, m] : entries_) (m -= (b++)->second);
    return *this;
  }

  NamedParams& operator*=(double s) {
    for (auto& [_, m] : entries_) m *= s;
    return *this;
  }

  /// this += scale * other
  NamedParams& axpy(double scale, const NamedParams& other) {
    require_same_layout(other, "axpy");
    auto b = other.entries_.begin();
    for (auto& [_, m] : entries_) (m += scale * (b++)->second);
    return *this;
  }

  friend NamedParams operator+(NamedParams a, const NamedParams& b) { return a += b; }
  friend NamedParams operator-(NamedParams a, const NamedParams& b) { return a -= b; }
  friend NamedParams operator*(double s, NamedParams a) { return a *= s; }

  /// Entries whose names start with `prefix`.
  NamedParams with_prefix(std::string_view prefix) const {
    NamedParams out;
    for (const auto& [name, m] : entries_)
      if (std::string_view(name).substr(0, prefix.size()) == prefix) out.entries_[name] = m;
    return out;
  }

  /// Union of two disjoint collections.
  NamedParams merged(const NamedParams& other) const {
    NamedParams out = *this;
    for (const auto& [name, m] : other.entries_) {
      if (out.entries_.count(name))
        throw DimensionError("merge: duplicate parameter name '" + name + "'");
      out.entries_[name] = m;
    }
    return out;
  }

  /// Replaces the values of entries present in `update`; names must exist.
  void assign_from(const NamedParams& update) {
    for (const auto& [name, m] : update.entries_) {
      Matrix& dst = at(name);
      if (dst.rows() != m.rows() || dst.cols() != m.cols())
        throw DimensionError("assign: shape mismatch for '" + name + "' (" + shape_str(dst) +
                             " vs " + shape_str(m) + ")");
      dst = m;
    }
  }

  double squared_norm() const {
    double s = 0.0;
    for (const auto& [_, m] : entries_) s += m.squaredNorm();
    return s;
  }
  double norm() const { return std::sqrt(squared_norm()); }

  double max_abs() const {
    double s = 0.0;
    for (const auto& [_, m] : entries_)
      if (m.size() > 0) s = std::max(s, m.cwiseAbs().maxCoeff());
    return s;
  }

  bool all_finite() const {
    for (const auto& [_, m] : entries_)
      if (!m.allFinite()) return false;
    return true;
  }

  std::string describe() const {
    std::ostringstream os;
    os << "{";
    bool first = true;
    for (const auto& [name, m] : entries_) {
      os << (first ? "" : ", ") << name << ":" << shape_str(m);
      first = false;
    }
    os << "}";
    return os.str();
  }

  friend bool operator==(const NamedParams& a, const NamedParams& b) {
    if (!a.same_layout(b)) return false;
    auto it = b.entries_.begin();
    for (const auto& [_, m] : a.entries_) {
      const Matrix& o = (it++)->second;
      if (m.size() > 0 && std::memcmp(m.data(), o.data(), sizeof(double) * m.size()) != 0)
        return false;
    }
    return true;
  }

 private:
  Map entries_;
};

// Binary format: one line of compact JSON [{"name","rows","cols"},...],
// a newline, then little-endian doubles for each entry in header order.

static_assert(std::endian::native == std::endian::little,
              "parameter files are written in host byte order, which must be little-endian");

inline void write_params(std::ostream& os, const NamedParams& params) {
  nlohmann::json header = nlohmann::json::array();
  for (const auto& [name, m] : params)
    header.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
  os << header.dump() << '\n';
  for (const auto& [_, m] : params)
    os.write(reinterpret_cast<const char*>(m.data()),
             static_cast<std::streamsize>(sizeof(double) * m.size()));
  if (!os) throw Error("failed writing parameter data");
}

inline NamedParams read_params(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw ParseError("parameter file: missing header line");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("parameter file: bad header: ") + e.what());
  }
  if (!header.is_array()) throw ParseError("parameter file: header is not an array");
  NamedParams out;
  for (const auto& entry : header) {
    std::string name;
    long rows = 0;
    long cols = 0;
    try {
      name = entry.at("name").get<std::string>();
      rows = entry.at("rows").get<long>();
      cols = entry.at("cols").get<long>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("parameter file: bad header entry: ") + e.what());
    }
    if (rows < 0 || cols < 0) throw ParseError("parameter file: negative shape for '" + name + "'");
    if (out.contains(name)) throw ParseError("parameter file: duplicate name '" + name + "'");
    Matrix m(rows, cols);
    is.read(reinterpret_cast<char*>(m.data()),
            static_cast<std::streamsize>(sizeof(double) * m.size()));
    if (!is) throw ParseError("parameter file: truncated data for '" + name + "'");
    out.set(name, std::move(m));
  }
  if (is.peek() != std::char_traits<char>::eof())
    throw ParseError("parameter file: trailing bytes after data");
  return out;
}

}  // namespace metasr
