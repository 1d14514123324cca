#pragma once

// In-memory dataset plus its JSONL file format. The first line is a header
// object describing the column space; each following line is one record with
// the sparse list of active columns.

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "qmrtag/model.hpp"

namespace qmrtag {

struct Dataset {
  std::vector<std::size_t> anchor_index;
  std::vector<std::string> condition_names;
  std::vector<std::string> feature_names;
  std::vector<PatientRecord> records;

  std::size_t m() const { return anchor_index.size(); }
  std::size_t n() const { return feature_names.size(); }
  std::size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }

  bool labeled() const {
    if (records.empty()) {
      return false;
    }
    for (const auto& r : records) {
      if (!r.y) {
        return false;
      }
    }
    return true;
  }

  // Same column space, no records.
  Dataset like() const {
    Dataset d;
    d.anchor_index = anchor_index;
    d.condition_names = condition_names;
    d.feature_names = feature_names;
    return d;
  }

  Dataset subset(const std::vector<std::size_t>& rows) const {
    Dataset d = like();
    d.records.reserve(rows.size());
    for (std::size_t r : rows) {
      d.records.push_back(records.at(r));
    }
    return d;
  }
};

inline constexpr int kDatasetVersion = 1;

inline nlohmann::json record_to_json(const PatientRecord& rec) {
  nlohmann::json j;
  j["id"] = rec.id;
  std::vector<std::size_t> on;
  for (std::size_t k = 0; k < rec.x.size(); ++k) {
    if (rec.x[k]) {
      on.push_back(k);
    }
  }
  j["x"] = on;
  if (rec.y) {
    j["y"] = *rec.y;
  }
  return j;
}

inline void write_dataset(std::ostream& out, const Dataset& ds) {
  nlohmann::json header = {{"format", "qmrtag-dataset"},
                           {"version", kDatasetVersion},
                           {"m", ds.m()},
                           {"n", ds.n()},
                           {"anchor_index", ds.anchor_index},
                           {"condition_names", ds.condition_names},
                           {"feature_names", ds.feature_names}};
  out << header.dump() << '\n';
  for (const auto& rec : ds.records) {
    out << record_to_json(rec).dump() << '\n';
  }
}

inline void save_dataset(const std::string& path, const Dataset& ds) {
  std::ofstream out(path);
  if (!out) {
    throw DataError("cannot write dataset " + path);
  }
  write_dataset(out, ds);
}

inline Dataset read_dataset(std::istream& in) {
  Dataset ds;
  std::string line;
  if (!std::getline(in, line)) {
    throw DataError("dataset is empty (missing header line)");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad dataset header: ") + e.what());
  }
  if (header.value("format", "") != "qmrtag-dataset") {
    throw DataError("not a qmrtag dataset");
  }
  if (header.value("version", 0) != kDatasetVersion) {
    throw DataError("unsupported dataset version");
  }
  ds.anchor_index = header.at("anchor_index").get<std::vector<std::size_t>>();
  ds.condition_names =
      header.at("condition_names").get<std::vector<std::string>>();
  ds.feature_names = header.at("feature_names").get<std::vector<std::string>>();
  const std::size_t m = ds.m();
  const std::size_t n = ds.n();
  for (std::size_t col : ds.anchor_index) {
    if (col >= n) {
      throw DataError("dataset anchor column out of range");
    }
  }
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) {
      continue;
    }
    try {
      const auto j = nlohmann::json::parse(line);
      PatientRecord rec;
      rec.id = j.value("id", std::to_string(lineno - 2));
      rec.x.assign(n, 0);
      for (std::size_t k : j.at("x").get<std::vector<std::size_t>>()) {
        if (k >= n) {
          throw DataError("column out of range");
        }
        rec.x[k] = 1;
      }
      rec.a = anchors_of(rec.x, ds.anchor_index);
      if (j.contains("y")) {
        auto y = j.at("y").get<BinaryVector>();
        if (y.size() != m) {
          throw DataError("label vector has wrong length");
        }
        rec.y = std::move(y);
      }
      ds.records.push_back(std::move(rec));
    } catch (const nlohmann::json::exception& e) {
      throw DataError("dataset line " + std::to_string(lineno) + ": " +
                      e.what());
    } catch (const DataError& e) {
      throw DataError("dataset line " + std::to_string(lineno) + ": " +
                      e.what());
    }
  }
  return ds;
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw DataError("cannot open dataset " + path);
  }
  return read_dataset(in);
}

// Observation frequencies used by several estimators.
inline std::vector<double> column_means(const Dataset& ds) {
  std::vector<double> mean(ds.n(), 0.0);
  if (ds.empty()) {
    return mean;
  }
  for (const auto& r : ds.records) {
    for (std::size_t j = 0; j < ds.n(); ++j) {
      mean[j] += r.x[j];
    }
  }
  for (double& v : mean) {
    v /= static_cast<double>(ds.size());
  }
  return mean;
}

}  // namespace qmrtag
