#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "lorahar/eval/experiments.hpp"

namespace lorahar {

struct Table {
  std::string title;
  std::vector<std::string> headers;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> notes;

  bool empty() const noexcept { return rows.empty(); }
};

inline std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

inline std::string to_text(const Table& t) {
  std::vector<std::size_t> width(t.headers.size(), 0);
  for (std::size_t c = 0; c < t.headers.size(); ++c) width[c] = t.headers[c].size();
  for (const auto& r : t.rows)
    for (std::size_t c = 0; c < r.size() && c < width.size(); ++c) width[c] = std::max(width[c], r[c].size());
  std::ostringstream out;
  out << t.title << "\n";
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t c = 0; c < width.size(); ++c) {
      const std::string cell = c < cells.size() ? cells[c] : "";
      out << (c == 0 ? "" : "  ");
      if (c == 0) out << cell << std::string(width[c] - cell.size(), ' ');
      else out << std::string(width[c] - cell.size(), ' ') << cell;
    }
    out << "\n";
  };
  line(t.headers);
  std::size_t total = 0;
  for (auto w : width) total += w;
  out << std::string(total + 2 * (width.empty() ? 0 : width.size() - 1), '-') << "\n";
  for (const auto& r : t.rows) line(r);
  for (const auto& n : t.notes) out << "note: " << n << "\n";
  return out.str();
}

inline std::string to_csv(const Table& t) {
  auto esc = [](const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string o = "\"";
    for (char c : s) o += c == '"' ? std::string("\"\"") : std::string(1, c);
    return o + "\"";
  };
  std::ostringstream out;
  for (std::size_t c = 0; c < t.headers.size(); ++c) out << (c ? "," : "") << esc(t.headers[c]);
  out << "\n";
  for (const auto& r : t.rows) {
    for (std::size_t c = 0; c < r.size(); ++c) out << (c ? "," : "") << esc(r[c]);
    out << "\n";
  }
  return out.str();
}

namespace detail {

inline std::vector<const RunRecord*> of_kind(const std::vector<RunRecord>& recs, const std::string& kind) {
  std::vector<const RunRecord*> out;
  for (const auto& r : recs)
    if (r.kind == kind) out.push_back(&r);
  return out;
}

inline std::vector<Strategy> strategies_in_order(const std::vector<const RunRecord*>& recs) {
  std::vector<Strategy> out;
  for (const auto* r : recs)
    if (std::find(out.begin(), out.end(), r->strategy) == out.end()) out.push_back(r->strategy);
  std::sort(out.begin(), out.end(), [](Strategy a, Strategy b) { return static_cast<int>(a) < static_cast<int>(b); });
  return out;
}

inline std::string strategy_label(Strategy s) {
  switch (s) {
    case Strategy::Full: return "Full FT";
    case Strategy::Lora: return "LoRA";
    case Strategy::Qlora: return "QLoRA";
    case Strategy::FrozenHead: return "Frozen+Head";
  }
  return "?";
}

inline const char* kZeroDivisionNote = "precision, recall and F1 of a class with no predictions or no instances count as 0 in macro means";

}  // namespace detail

/// Per held-out domain and strategy: accuracy, macro F1, precision, recall.
inline Table performance_table(const std::vector<RunRecord>& recs) {
  Table t{"Cross-domain recognition performance (LODO)", {"Target", "Strategy", "Accuracy", "Macro-F1", "Precision", "Recall"}, {}, {}};
  auto runs = detail::of_kind(recs, "lodo");
  std::stable_sort(runs.begin(), runs.end(), [](const RunRecord* a, const RunRecord* b) {
    return std::tie(a->target_domain, a->strategy) < std::tie(b->target_domain, b->strategy);
  });
  for (const auto* r : runs) {
    t.rows.push_back({r->target_domain, detail::strategy_label(r->strategy), fmt(r->metrics.accuracy), fmt(r->metrics.macro_f1),
                      fmt(r->metrics.macro_precision), fmt(r->metrics.macro_recall)});
  }
  t.notes.push_back(detail::kZeroDivisionNote);
  return t;
}

/// Trainable and total parameter counts per strategy (first LODO fold).
inline Table parameter_table(const std::vector<RunRecord>& recs) {
  Table t{"Trainable and total parameters per strategy", {"Strategy", "Trainable", "Total"}, {}, {}};
  const auto runs = detail::of_kind(recs, "lodo");
  for (Strategy s : detail::strategies_in_order(runs)) {
    for (const auto* r : runs) {
      if (r->strategy != s) continue;
      t.rows.push_back({detail::strategy_label(s), std::to_string(r->log.resources.trainable_params), std::to_string(r->log.resources.total_params)});
      break;
    }
  }
  return t;
}

/// Frozen, trainable and transient buffer memory per strategy (first LODO fold).
inline Table memory_table(const std::vector<RunRecord>& recs) {
  Table t{"Memory per strategy (MiB)", {"Strategy", "Frozen (fp32-eq)", "Trainable (fp32-eq)", "Buffer peak"}, {}, {}};
  const auto runs = detail::of_kind(recs, "lodo");
  for (Strategy s : detail::strategies_in_order(runs)) {
    for (const auto* r : runs) {
      if (r->strategy != s) continue;
      const auto& m = r->log.resources;
      t.rows.push_back({detail::strategy_label(s), fmt(to_mib(m.frozen_bytes_fp32)), fmt(to_mib(m.trainable_bytes_fp32)), fmt(to_mib(m.buffer_bytes_peak))});
      break;
    }
  }
  t.notes.push_back("dense values count 4 bytes; NF4 tensors count codes plus scale metadata; buffers are the 8-byte dequantized copies alive in one forward pass");
  return t;
}

/// Training wall-clock seconds per held-out domain and strategy.
inline Table time_table(const std::vector<RunRecord>& recs) {
  const auto runs = detail::of_kind(recs, "lodo");
  const auto strategies = detail::strategies_in_order(runs);
  Table t{"Training time (seconds)", {"Target"}, {}, {}};
  for (Strategy s : strategies) t.headers.push_back(detail::strategy_label(s));
  std::map<std::string, std::map<Strategy, double>> cells;
  for (const auto* r : runs) cells[r->target_domain][r->strategy] = r->log.resources.wall_seconds;
  for (const auto& [domain, by] : cells) {
    std::vector<std::string> row{domain};
    for (Strategy s : strategies) row.push_back(by.count(s) ? fmt(by.at(s), 2) : "-");
    t.rows.push_back(std::move(row));
  }
  return t;
}

/// Macro F1, time and trainable parameters per LoRA rank.
inline Table rank_table(const std::vector<RunRecord>& recs) {
  Table t{"Effect of LoRA rank", {"Rank", "Macro-F1", "Time (s)", "Trainable"}, {}, {}};
  auto runs = detail::of_kind(recs, "rank");
  std::stable_sort(runs.begin(), runs.end(), [](const RunRecord* a, const RunRecord* b) { return a->rank < b->rank; });
  for (const auto* r : runs) {
    t.rows.push_back({std::to_string(r->rank), fmt(r->metrics.macro_f1), fmt(r->log.resources.wall_seconds, 2),
                      std::to_string(r->log.resources.trainable_params)});
  }
  return t;
}

/// Accuracy per train/test split and strategy, with the LoRA / Full ratio when both ran.
inline Table split_table(const std::vector<RunRecord>& recs) {
  const auto runs = detail::of_kind(recs, "split");
  const auto strategies = detail::strategies_in_order(runs);
  Table t{"Accuracy under different train/test splits", {"Split"}, {}, {}};
  for (Strategy s : strategies) t.headers.push_back(detail::strategy_label(s));
  const bool ratio = std::count(strategies.begin(), strategies.end(), Strategy::Full) && std::count(strategies.begin(), strategies.end(), Strategy::Lora);
  if (ratio) t.headers.push_back("LoRA / Full FT");
  std::map<double, std::map<Strategy, double>, std::greater<>> cells;
  for (const auto* r : runs) cells[r->train_fraction][r->strategy] = r->metrics.accuracy;
  for (const auto& [f, by] : cells) {
    const int train_pct = static_cast<int>(std::lround(f * 100.0));
    std::vector<std::string> row{std::to_string(train_pct) + "/" + std::to_string(100 - train_pct)};
    for (Strategy s : strategies) row.push_back(by.count(s) ? fmt(by.at(s)) : "-");
    if (ratio) {
      const bool have = by.count(Strategy::Full) && by.count(Strategy::Lora);
      row.push_back(have && by.at(Strategy::Full) > 0.0 ? fmt(by.at(Strategy::Lora) / by.at(Strategy::Full)) : "-");
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

/// Static SVG: macro F1 (left axis) and training time (right axis) against rank.
inline std::string rank_plot_svg(const std::vector<RunRecord>& recs) {
  auto runs = detail::of_kind(recs, "rank");
  std::stable_sort(runs.begin(), runs.end(), [](const RunRecord* a, const RunRecord* b) { return a->rank < b->rank; });
  const double w = 640, h = 400, left = 70, right = 70, top = 40, bottom = 60;
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << w / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">Macro-F1 and training time vs LoRA rank</text>\n";
  if (runs.empty()) {
    s << "<text x=\"" << w / 2 << "\" y=\"" << h / 2 << "\" text-anchor=\"middle\">no rank-sweep runs</text>\n</svg>\n";
    return s.str();
  }
  double rmin = static_cast<double>(runs.front()->rank), rmax = static_cast<double>(runs.back()->rank);
  if (rmax == rmin) rmax = rmin + 1;
  double fmin = 1.0, fmax = 0.0, tmax = 0.0;
  for (const auto* r : runs) {
    fmin = std::min(fmin, r->metrics.macro_f1);
    fmax = std::max(fmax, r->metrics.macro_f1);
    tmax = std::max(tmax, r->log.resources.wall_seconds);
  }
  fmin = std::max(0.0, fmin - 0.02);
  fmax = std::min(1.0, fmax + 0.02);
  if (fmax <= fmin) fmax = fmin + 0.01;
  if (tmax <= 0.0) tmax = 1.0;
  const double pw = w - left - right, ph = h - top - bottom;
  auto px = [&](double r) { return left + (r - rmin) / (rmax - rmin) * pw; };
  auto py_f = [&](double f) { return top + (1.0 - (f - fmin) / (fmax - fmin)) * ph; };
  auto py_t = [&](double t) { return top + (1.0 - t / (tmax * 1.1)) * ph; };
  s << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph << "\" fill=\"none\" stroke=\"#444\"/>\n";
  for (const auto* r : runs) {
    const double x = px(static_cast<double>(r->rank));
    s << "<text x=\"" << x << "\" y=\"" << top + ph + 18 << "\" text-anchor=\"middle\">" << r->rank << "</text>\n";
  }
  for (int i = 0; i <= 4; ++i) {
    const double f = fmin + (fmax - fmin) * i / 4.0, t = tmax * 1.1 * i / 4.0;
    s << "<text x=\"" << left - 6 << "\" y=\"" << py_f(f) + 4 << "\" text-anchor=\"end\" fill=\"#1f77b4\">" << fmt(f, 3) << "</text>\n";
    s << "<text x=\"" << left + pw + 6 << "\" y=\"" << py_t(t) + 4 << "\" fill=\"#d62728\">" << fmt(t, 1) << "</text>\n";
  }
  s << "<text x=\"" << left + pw / 2 << "\" y=\"" << h - 15 << "\" text-anchor=\"middle\">rank</text>\n";
  s << "<text x=\"18\" y=\"" << top + ph / 2 << "\" transform=\"rotate(-90 18 " << top + ph / 2
    << ")\" text-anchor=\"middle\" fill=\"#1f77b4\">macro-F1</text>\n";
  s << "<text x=\"" << w - 14 << "\" y=\"" << top + ph / 2 << "\" transform=\"rotate(90 " << w - 14 << " " << top + ph / 2
    << ")\" text-anchor=\"middle\" fill=\"#d62728\">time (s)</text>\n";
  auto series = [&](auto&& y, const char* color) {
    s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (const auto* r : runs) s << fmt(px(static_cast<double>(r->rank)), 2) << "," << fmt(y(r), 2) << " ";
    s << "\"/>\n";
    for (const auto* r : runs) s << "<circle cx=\"" << fmt(px(static_cast<double>(r->rank)), 2) << "\" cy=\"" << fmt(y(r), 2) << "\" r=\"4\" fill=\"" << color << "\"/>\n";
  };
  series([&](const RunRecord* r) { return py_f(r->metrics.macro_f1); }, "#1f77b4");
  series([&](const RunRecord* r) { return py_t(r->log.resources.wall_seconds); }, "#d62728");
  s << "</svg>\n";
  return s.str();
}

/// Every non-empty table, in the order performance, parameters, memory, time, rank, split.
inline std::vector<std::pair<std::string, Table>> all_tables(const std::vector<RunRecord>& recs) {
  std::vector<std::pair<std::string, Table>> out{{"performance", performance_table(recs)}, {"parameters", parameter_table(recs)},
                                                 {"memory", memory_table(recs)},           {"time", time_table(recs)},
                                                 {"rank", rank_table(recs)},               {"split", split_table(recs)}};
  out.erase(std::remove_if(out.begin(), out.end(), [](const auto& p) { return p.second.empty(); }), out.end());
  return out;
}

}  // namespace lorahar
