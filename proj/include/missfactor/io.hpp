#pragma once

#include <cctype>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "missfactor/data.hpp"
#include "missfactor/errors.hpp"

namespace missfactor {

namespace detail {

inline char delimiter_for(const std::string& path) {
  const auto dot = path.find_last_of('.');
  if (dot != std::string::npos) {
    std::string ext = path.substr(dot + 1);
    for (auto& c : ext) c = static_cast<char>(std::tolower(c));
    if (ext == "csv") return ',';
  }
  return '\t';
}

inline std::vector<std::string> split_line(const std::string& line, char delim) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == delim) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

inline bool is_missing_token(const std::string& tok) {
  return tok.empty() || tok == "NA" || tok == "NaN";
}

inline double parse_number(const std::string& tok, std::size_t row,
                           std::size_t col) {
  const char* s = tok.c_str();
  char* end = nullptr;
  const double v = std::strtod(s, &end);
  if (end == s || *end != '\0') {
    throw ParseError("unparseable value '" + tok + "' at row " +
                     std::to_string(row) + ", column " + std::to_string(col));
  }
  return v;
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  while (!lines.empty() && lines.back().empty()) lines.pop_back();
  return lines;
}

}  // namespace detail

// Wide table: header row of "<id_label> <sample ids...>", one row per feature.
// Missing cells are "", "NA", or "NaN".  Delimiter is comma for .csv paths and
// tab otherwise.
inline IntensityMatrix load_intensity_matrix(const std::string& path) {
  const char delim = detail::delimiter_for(path);
  const auto lines = detail::read_lines(path);
  if (lines.empty()) throw ParseError(path + " is empty");
  const auto header = detail::split_line(lines[0], delim);
  if (header.size() < 2) throw ParseError(path + ": header has no sample columns");
  const std::size_t n = header.size() - 1;
  const std::size_t p = lines.size() - 1;
  if (p == 0) throw EmptyInputError(path + " has no feature rows");

  IntensityMatrix m;
  m.sample_ids.assign(header.begin() + 1, header.end());
  m.feature_ids.reserve(p);
  m.values = Matrix::Zero(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(n));
  m.mask = Matrix::Zero(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(n));
  for (std::size_t r = 0; r < p; ++r) {
    const auto cells = detail::split_line(lines[r + 1], delim);
    if (cells.size() != n + 1) {
      throw ParseError(path + ": row " + std::to_string(r + 2) + " has " +
                       std::to_string(cells.size()) + " cells, expected " +
                       std::to_string(n + 1));
    }
    m.feature_ids.push_back(cells[0]);
    for (std::size_t i = 0; i < n; ++i) {
      const std::string& tok = cells[i + 1];
      if (detail::is_missing_token(tok)) continue;
      m.values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(i)) =
          detail::parse_number(tok, r + 2, i + 2);
      m.mask(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(i)) = 1.0;
    }
  }
  m.validate();
  return m;
}

// Round-trips bit-exactly through load_intensity_matrix (%.17g values,
// missing cells written as NA).
inline void save_intensity_matrix(const std::string& path,
                                  const IntensityMatrix& m) {
  const char delim = detail::delimiter_for(path);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path);
  out << "feature";
  for (const auto& s : m.sample_ids) out << delim << s;
  out << '\n';
  for (Eigen::Index g = 0; g < m.n_features(); ++g) {
    out << m.feature_ids[static_cast<std::size_t>(g)];
    for (Eigen::Index i = 0; i < m.n_samples(); ++i) {
      out << delim;
      if (m.mask(g, i) == 1.0) {
        out << detail::format_double(m.values(g, i));
      } else {
        out << "NA";
      }
    }
    out << '\n';
  }
}

// Generic numeric table with row ids: used for design matrices and artifact
// tables.  No missing cells allowed.
struct NumericTable {
  std::vector<std::string> col_names;  // excludes the id column
  std::vector<std::string> row_ids;
  Matrix values;  // rows x cols
};

inline NumericTable load_numeric_table(const std::string& path) {
  const char delim = detail::delimiter_for(path);
  const auto lines = detail::read_lines(path);
  if (lines.empty()) throw ParseError(path + " is empty");
  const auto header = detail::split_line(lines[0], delim);
  if (header.size() < 2) throw ParseError(path + ": header has no value columns");
  NumericTable t;
  t.col_names.assign(header.begin() + 1, header.end());
  const std::size_t ncol = t.col_names.size();
  const std::size_t nrow = lines.size() - 1;
  t.values = Matrix::Zero(static_cast<Eigen::Index>(nrow),
                          static_cast<Eigen::Index>(ncol));
  for (std::size_t r = 0; r < nrow; ++r) {
    const auto cells = detail::split_line(lines[r + 1], delim);
    if (cells.size() != ncol + 1) {
      throw ParseError(path + ": row " + std::to_string(r + 2) +
                       " has the wrong number of cells");
    }
    t.row_ids.push_back(cells[0]);
    for (std::size_t j = 0; j < ncol; ++j) {
      t.values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) =
          detail::parse_number(cells[j + 1], r + 2, j + 2);
    }
  }
  return t;
}

inline void save_numeric_table(const std::string& path, const NumericTable& t,
                               const std::string& id_label = "id") {
  const char delim = detail::delimiter_for(path);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path);
  out << id_label;
  for (const auto& c : t.col_names) out << delim << c;
  out << '\n';
  for (Eigen::Index r = 0; r < t.values.rows(); ++r) {
    out << t.row_ids[static_cast<std::size_t>(r)];
    for (Eigen::Index j = 0; j < t.values.cols(); ++j) {
      out << delim << detail::format_double(t.values(r, j));
    }
    out << '\n';
  }
}

// FNV-1a over the raw file bytes; artifacts produced from a matrix are keyed
// by this so stale artifact reuse fails loudly.
inline std::uint64_t hash_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path);
  std::uint64_t h = 14695981039346656037ULL;
  char buf[1 << 16];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    const std::streamsize got = in.gcount();
    for (std::streamsize i = 0; i < got; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ULL;
    }
    if (!in) break;
  }
  return h;
}

inline std::string hash_hex(std::uint64_t h) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace missfactor
