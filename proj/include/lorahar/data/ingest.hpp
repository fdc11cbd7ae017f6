#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lorahar/data/dataset.hpp"

namespace lorahar {

/// Tabular sensor text: a mandatory header, one row per sample, comma separated.
/// The column named "activity" holds the label, an optional "subject" column the
/// subject id, and every other column is a channel in header order. A recording is
/// a maximal run of consecutive rows sharing (activity, subject).
inline std::vector<SensorRecording> parse_sensor_csv(std::istream& in, double sample_rate, const std::string& domain,
                                                     const std::string& source = "<stream>") {
  auto split = [](const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::stringstream ss(line);
    while (std::getline(ss, cell, ',')) {
      while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
      while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
      cells.push_back(cell);
    }
    return cells;
  };
  std::string line;
  if (!std::getline(in, line)) throw DataError(source + ": missing header row");
  const auto header = split(line);
  int activity_col = -1, subject_col = -1;
  std::vector<std::size_t> channel_cols;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == "activity") activity_col = static_cast<int>(i);
    else if (header[i] == "subject") subject_col = static_cast<int>(i);
    else channel_cols.push_back(i);
  }
  if (activity_col < 0) throw DataError(source + ": header has no 'activity' column");
  if (channel_cols.empty()) throw DataError(source + ": header has no channel columns");

  std::vector<SensorRecording> recs;
  std::vector<double> buffer;
  std::string cur_activity, cur_subject;
  auto flush = [&] {
    if (buffer.empty()) return;
    SensorRecording r;
    const std::size_t rows = buffer.size() / channel_cols.size();
    r.samples = Matrix(rows, channel_cols.size(), std::move(buffer));
    r.sample_rate = sample_rate;
    r.activity = cur_activity;
    r.subject = cur_subject;
    r.domain = domain;
    recs.push_back(std::move(r));
    buffer = {};
  };
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto cells = split(line);
    if (cells.size() != header.size()) {
      throw DataError(source + ":" + std::to_string(line_no) + ": expected " + std::to_string(header.size()) + " columns, got " +
                      std::to_string(cells.size()));
    }
    const std::string& act = cells[static_cast<std::size_t>(activity_col)];
    const std::string subj = subject_col >= 0 ? cells[static_cast<std::size_t>(subject_col)] : std::string();
    if (act.empty()) throw DataError(source + ":" + std::to_string(line_no) + ": empty activity name");
    if (act != cur_activity || subj != cur_subject) {
      flush();
      cur_activity = act;
      cur_subject = subj;
    }
    for (std::size_t c : channel_cols) {
      double v = 0.0;
      const std::string& s = cells[c];
      auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) {
        throw DataError(source + ":" + std::to_string(line_no) + ": bad number '" + s + "' in column '" + header[c] + "'");
      }
      buffer.push_back(v);
    }
  }
  flush();
  return recs;
}

inline std::string format_double(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

inline void write_sensor_csv(std::ostream& out, const std::vector<SensorRecording>& recs) {
  if (recs.empty()) throw DataError("no recordings to write");
  const std::size_t c = recs.front().samples.cols();
  static const char* six[] = {"acc_x", "acc_y", "acc_z", "gyr_x", "gyr_y", "gyr_z"};
  for (std::size_t j = 0; j < c; ++j) out << (c == 6 ? six[j] : ("ch" + std::to_string(j)).c_str()) << ',';
  out << "activity,subject\n";
  for (const auto& r : recs) {
    if (r.samples.cols() != c) throw DataError("recordings disagree on channel count");
    for (std::size_t i = 0; i < r.samples.rows(); ++i) {
      for (std::size_t j = 0; j < c; ++j) out << format_double(r.samples(i, j)) << ',';
      out << r.activity << ',' << r.subject << '\n';
    }
  }
}

struct DomainSource {
  std::string name;
  std::string path;
  double sample_rate = kTargetRate;
};

/// Domain manifest: {"domains": [{"name": ..., "path": ..., "sample_rate": ...}, ...]}.
/// Relative paths resolve against the manifest's directory.
inline std::vector<DomainSource> parse_domain_manifest(const std::string& text, const std::filesystem::path& base_dir) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("domain manifest is not valid JSON: ") + e.what());
  }
  if (!j.contains("domains") || !j.at("domains").is_array()) throw DataError("domain manifest needs a 'domains' array");
  std::vector<DomainSource> out;
  for (const auto& d : j.at("domains")) {
    DomainSource s;
    s.name = d.at("name").get<std::string>();
    std::filesystem::path p = d.at("path").get<std::string>();
    s.path = (p.is_absolute() ? p : base_dir / p).string();
    s.sample_rate = d.value("sample_rate", kTargetRate);
    out.push_back(std::move(s));
  }
  return out;
}

inline std::vector<DomainRecordings> load_domains(const std::vector<DomainSource>& sources) {
  std::vector<DomainRecordings> out;
  for (const auto& s : sources) {
    std::ifstream in(s.path);
    if (!in) throw DataError("cannot open domain file '" + s.path + "'");
    out.push_back(DomainRecordings{s.name, parse_sensor_csv(in, s.sample_rate, s.name, s.path)});
  }
  return out;
}

}  // namespace lorahar
