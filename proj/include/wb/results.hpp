#pragma once
#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "wb/errors.hpp"

namespace wb {

// One row of the bundled result tables: structural columns (params, ops,
// step/s) plus the pre-training losses and task scores. Optional fields stay
// empty for tables that lack the column.
struct ResultRow {
  std::string variant;
  double params = 0;
  double ops = 0;
  double steps_per_s = 0;
  double early_loss_mean = 0;
  double early_loss_std = 0;
  double final_loss = 0;
  double sglue = 0;
  double xsum = 0;
  double webq = 0;
  std::optional<double> wmt_ende;
};

struct ResultsTable {
  std::vector<ResultRow> rows;
};

inline const char* kResultsHeader =
    "variant,params,ops,steps_per_s,early_loss_mean,early_loss_std,final_loss,sglue,xsum,webq,"
    "wmt_ende";

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

inline ResultsTable load_results(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open results file '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || split_csv_line(line) != split_csv_line(kResultsHeader))
    throw ParseError(path + ":1: header must be '" + std::string(kResultsHeader) + "'");
  ResultsTable table;
  long lineno = 1;
  std::vector<std::string> seen;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto f = split_csv_line(line);
    if (f.size() != 11)
      throw ParseError(path + ":" + std::to_string(lineno) + ": expected 11 fields, got " +
                       std::to_string(f.size()));
    ResultRow r;
    r.variant = f[0];
    try {
      r.params = std::stod(f[1]);
      r.ops = std::stod(f[2]);
      r.steps_per_s = std::stod(f[3]);
      r.early_loss_mean = std::stod(f[4]);
      r.early_loss_std = std::stod(f[5]);
      r.final_loss = std::stod(f[6]);
      r.sglue = std::stod(f[7]);
      r.xsum = std::stod(f[8]);
      r.webq = std::stod(f[9]);
      if (!f[10].empty()) r.wmt_ende = std::stod(f[10]);
    } catch (...) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": malformed numeric field");
    }
    for (double v : {r.params, r.ops, r.steps_per_s, r.early_loss_mean, r.final_loss, r.sglue,
                     r.xsum, r.webq})
      if (!std::isfinite(v))
        throw ParseError(path + ":" + std::to_string(lineno) + ": non-finite value");
    for (const std::string& s : seen)
      if (s == r.variant)
        throw ParseError(path + ":" + std::to_string(lineno) + ": duplicate variant '" +
                         r.variant + "'");
    seen.push_back(r.variant);
    table.rows.push_back(std::move(r));
  }
  if (table.rows.empty()) throw ParseError(path + ": no data rows");
  return table;
}

inline std::string results_csv(const ResultsTable& table) {
  std::ostringstream os;
  os << kResultsHeader << "\n";
  auto num = [](double v) {
    std::ostringstream s;
    s.precision(15);
    s << v;
    return s.str();
  };
  for (const ResultRow& r : table.rows) {
    os << r.variant << "," << num(r.params) << "," << num(r.ops) << "," << num(r.steps_per_s)
       << "," << num(r.early_loss_mean) << "," << num(r.early_loss_std) << ","
       << num(r.final_loss) << "," << num(r.sglue) << "," << num(r.xsum) << "," << num(r.webq)
       << "," << (r.wmt_ende ? num(*r.wmt_ende) : "") << "\n";
  }
  return os.str();
}

// Average ranks with ties sharing their mean rank.
inline std::vector<double> average_ranks(const std::vector<double>& xs) {
  size_t n = xs.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return xs[a] < xs[b]; });
  std::vector<double> ranks(n);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && xs[order[j + 1]] == xs[order[i]]) ++j;
    double avg = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
    for (size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

// Spearman's rho: Pearson correlation of average-ranked data.
inline double spearman_rho(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() != ys.size()) throw ConfigError("spearman: input lengths differ");
  if (xs.size() < 3) throw ConfigError("spearman: need at least 3 points");
  auto constant = [](const std::vector<double>& v) {
    for (double x : v)
      if (x != v[0]) return false;
    return true;
  };
  if (constant(xs) || constant(ys))
    throw NumericError("spearman: correlation undefined for a constant input");
  std::vector<double> rx = average_ranks(xs), ry = average_ranks(ys);
  double mx = 0, my = 0;
  for (size_t i = 0; i < rx.size(); ++i) {
    mx += rx[i];
    my += ry[i];
  }
  mx /= static_cast<double>(rx.size());
  my /= static_cast<double>(ry.size());
  double sxy = 0, sxx = 0, syy = 0;
  for (size_t i = 0; i < rx.size(); ++i) {
    double dx = rx[i] - mx, dy = ry[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  return sxy / std::sqrt(sxx * syy);
}

struct CorrelationLine {
  std::string task;
  double rho_signed = 0;   // sign convention: lower loss with higher score is negative
  double rho_abs = 0;
  double rho_abs_no_outliers = 0;
  long n_rows = 0;
  long n_rows_no_outliers = 0;
};

struct CorrelationReport {
  std::vector<CorrelationLine> lines;
  std::vector<std::string> notes;
};

// Rank correlation between the final pre-training loss and each task score.
// Row inclusion: every row with complete loss+score data (the bundled tables
// are complete, so this means all rows including the baseline). Sensitivity:
// the same statistic excluding final-loss outliers beyond 3 median absolute
// deviations.
inline CorrelationReport correlation_report(const ResultsTable& table) {
  if (table.rows.empty()) throw DataError("correlation: empty table");
  CorrelationReport rep;
  std::vector<double> losses;
  for (const ResultRow& r : table.rows) losses.push_back(r.final_loss);
  std::vector<double> sorted = losses;
  std::sort(sorted.begin(), sorted.end());
  double median = sorted[sorted.size() / 2];
  std::vector<double> dev;
  for (double v : losses) dev.push_back(std::abs(v - median));
  std::sort(dev.begin(), dev.end());
  double mad = dev[dev.size() / 2];
  double cut = 3.0 * (mad > 0 ? mad : 1e-9);

  auto add_task = [&](const std::string& name, auto getter) {
    std::vector<double> ls, ss, lf, sf;
    for (const ResultRow& r : table.rows) {
      ls.push_back(r.final_loss);
      ss.push_back(getter(r));
      if (std::abs(r.final_loss - median) <= cut) {
        lf.push_back(r.final_loss);
        sf.push_back(getter(r));
      }
    }
    CorrelationLine line;
    line.task = name;
    line.n_rows = static_cast<long>(ls.size());
    line.rho_signed = spearman_rho(ls, ss);
    line.rho_abs = std::abs(line.rho_signed);
    line.n_rows_no_outliers = static_cast<long>(lf.size());
    line.rho_abs_no_outliers = lf.size() >= 3 ? std::abs(spearman_rho(lf, sf)) : std::nan("");
    rep.lines.push_back(line);
  };
  add_task("sglue", [](const ResultRow& r) { return r.sglue; });
  add_task("xsum", [](const ResultRow& r) { return r.xsum; });
  add_task("webq", [](const ResultRow& r) { return r.webq; });
  rep.notes.push_back(
      "row inclusion: all rows with complete final-loss and score data (baseline included)");
  rep.notes.push_back(
      "sign convention: rho computed on (final_loss, score); lower loss pairing with higher "
      "score makes the signed value negative, |rho| is reported for table comparison");
  rep.notes.push_back(
      "sensitivity: |rho| recomputed excluding rows with |final_loss - median| > 3 MAD");
  return rep;
}

}  // namespace wb
