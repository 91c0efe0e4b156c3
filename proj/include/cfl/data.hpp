#pragma once

#include "cfl/common.hpp"
#include "cfl/csvio.hpp"
#include "cfl/panel.hpp"

#include <json.hpp>

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace cfl::data {

/// Wide-format market panel as loaded from CSV:
/// date,stock_id,open,market_cap,f_0..f_{D-1} with optional
/// high,low,close,volume columns.
struct RawPanel {
  std::vector<std::string> days;  // ISO dates, strictly increasing
  int n_features = 0;

  struct Row {
    int day = 0;
    std::string stock;
    double open = 0.0;
    double market_cap = 0.0;
    Vector features;
    std::optional<double> high, low, close, volume;
  };
  std::vector<Row> rows;  // sorted by (day, stock)
};

inline RawPanel load_panel_csv(const std::string& path) {
  const csv::Table t = csv::read_table(path);
  const int c_date = t.column("date");
  const int c_stock = t.column("stock_id");
  const int c_open = t.column("open");
  const int c_cap = t.column("market_cap");
  require(c_date >= 0 && c_stock >= 0 && c_open >= 0 && c_cap >= 0,
          "panel csv: need date,stock_id,open,market_cap columns in " + path);
  const int c_high = t.column("high");
  const int c_low = t.column("low");
  const int c_close = t.column("close");
  const int c_volume = t.column("volume");

  std::vector<int> feature_cols;
  for (std::size_t i = 0; i < t.header.size(); ++i)
    if (t.header[i].rfind("f_", 0) == 0) feature_cols.push_back(static_cast<int>(i));
  require(!feature_cols.empty(), "panel csv: no f_* feature columns in " + path);

  std::set<std::string> dates;
  for (const auto& row : t.rows) dates.insert(row[static_cast<std::size_t>(c_date)]);

  RawPanel p;
  p.days.assign(dates.begin(), dates.end());  // std::set iterates in sorted order
  p.n_features = static_cast<int>(feature_cols.size());
  std::map<std::string, int> day_index;
  for (std::size_t i = 0; i < p.days.size(); ++i) day_index[p.days[i]] = static_cast<int>(i);

  const auto parse_opt = [&](const std::vector<std::string>& row, int col) {
    std::optional<double> v;
    if (col >= 0 && !row[static_cast<std::size_t>(col)].empty())
      v = csv::parse_double(row[static_cast<std::size_t>(col)]);
    return v;
  };

  for (const auto& row : t.rows) {
    RawPanel::Row r;
    r.day = day_index.at(row[static_cast<std::size_t>(c_date)]);
    r.stock = row[static_cast<std::size_t>(c_stock)];
    r.open = csv::parse_double(row[static_cast<std::size_t>(c_open)]);
    r.market_cap = csv::parse_double(row[static_cast<std::size_t>(c_cap)]);
    r.features.resize(p.n_features);
    for (int k = 0; k < p.n_features; ++k) {
      const auto& cell = row[static_cast<std::size_t>(feature_cols[static_cast<std::size_t>(k)])];
      r.features(k) = cell.empty() ? std::numeric_limits<double>::quiet_NaN()
                                   : csv::parse_double(cell);
    }
    r.high = parse_opt(row, c_high);
    r.low = parse_opt(row, c_low);
    r.close = parse_opt(row, c_close);
    r.volume = parse_opt(row, c_volume);
    p.rows.push_back(std::move(r));
  }
  std::sort(p.rows.begin(), p.rows.end(), [](const RawPanel::Row& a, const RawPanel::Row& b) {
    return a.day != b.day ? a.day < b.day : a.stock < b.stock;
  });
  return p;
}

inline void save_panel_csv(const RawPanel& p, const std::string& path) {
  csv::Writer w(path);
  std::vector<std::string> header{"date", "stock_id", "open", "market_cap"};
  for (int k = 0; k < p.n_features; ++k) header.push_back("f_" + std::to_string(k));
  w.row(header);
  for (const auto& r : p.rows) {
    std::vector<std::string> cells{p.days[static_cast<std::size_t>(r.day)], r.stock,
                                   csv::format_double(r.open), csv::format_double(r.market_cap)};
    for (int k = 0; k < p.n_features; ++k) cells.push_back(csv::format_double(r.features(k)));
    w.row(cells);
  }
}

struct RejectedRow {
  std::string date;
  std::string stock;
  std::string reason;
};

/// Panel after label construction: tradable forward returns
/// (open_{d+2} - open_{d+1}) / open_{d+1} per stock, trailing days dropped.
struct LabeledPanel {
  std::vector<std::string> days;
  int n_features = 0;

  struct Row {
    int day = 0;
    std::string stock;
    Vector features;
    double market_cap = 0.0;
    double raw_return = 0.0;
  };
  std::vector<Row> rows;
  std::vector<RejectedRow> rejected;
};

inline LabeledPanel compute_labels(const RawPanel& raw) {
  LabeledPanel out;
  out.days = raw.days;
  out.n_features = raw.n_features;

  std::map<std::pair<int, std::string>, double> open_at;
  for (const auto& r : raw.rows) open_at[{r.day, r.stock}] = r.open;

  const int last_labelable = static_cast<int>(raw.days.size()) - 3;
  for (const auto& r : raw.rows) {
    if (r.day > last_labelable) continue;  // no forward window
    if (!(r.open > 0.0)) {
      out.rejected.push_back({raw.days[static_cast<std::size_t>(r.day)], r.stock, "non_positive_open"});
      continue;
    }
    const auto o1 = open_at.find({r.day + 1, r.stock});
    const auto o2 = open_at.find({r.day + 2, r.stock});
    if (o1 == open_at.end() || o2 == open_at.end()) {
      out.rejected.push_back({raw.days[static_cast<std::size_t>(r.day)], r.stock, "missing_forward_open"});
      continue;
    }
    if (!(o1->second > 0.0)) {
      out.rejected.push_back({raw.days[static_cast<std::size_t>(r.day)], r.stock, "non_positive_open"});
      continue;
    }
    LabeledPanel::Row row;
    row.day = r.day;
    row.stock = r.stock;
    row.features = r.features;
    row.market_cap = r.market_cap;
    row.raw_return = (o2->second - o1->second) / o1->second;
    out.rows.push_back(std::move(row));
  }
  return out;
}

/// Per day, keeps the top_n stocks by market cap among rows with complete
/// features. Days with fewer eligible stocks keep all of them, with a
/// warning.
inline LabeledPanel select_universe(const LabeledPanel& panel, int top_n,
                                    std::vector<std::string>* warnings = nullptr) {
  require(top_n >= 1, "select_universe: top_n must be >= 1");
  LabeledPanel out;
  out.days = panel.days;
  out.n_features = panel.n_features;
  out.rejected = panel.rejected;

  std::map<int, std::vector<const LabeledPanel::Row*>> by_day;
  for (const auto& r : panel.rows) {
    if (!r.features.allFinite()) {
      out.rejected.push_back({panel.days[static_cast<std::size_t>(r.day)], r.stock, "missing_feature"});
      continue;
    }
    by_day[r.day].push_back(&r);
  }
  for (auto& [day, rows] : by_day) {
    if (static_cast<int>(rows.size()) < top_n && warnings)
      warnings->push_back("day " + panel.days[static_cast<std::size_t>(day)] + ": only " +
                          std::to_string(rows.size()) + " eligible stocks for top " +
                          std::to_string(top_n));
    std::sort(rows.begin(), rows.end(), [](const auto* a, const auto* b) {
      return a->market_cap != b->market_cap ? a->market_cap > b->market_cap : a->stock < b->stock;
    });
    const auto keep = std::min<std::size_t>(rows.size(), static_cast<std::size_t>(top_n));
    for (std::size_t i = 0; i < keep; ++i) out.rows.push_back(*rows[i]);
  }
  std::sort(out.rows.begin(), out.rows.end(), [](const auto& a, const auto& b) {
    return a.day != b.day ? a.day < b.day : a.stock < b.stock;
  });
  return out;
}

enum class Role { source, validation, oos };

struct DomainInterval {
  int domain_id = 0;   // t_{-i} indexing: sources negative, OOS zero
  int first_day = 0;   // inclusive day indices
  int last_day = 0;
  Role role = Role::source;
};

struct DomainPartition {
  std::vector<DomainInterval> domains;
  int days_per_domain = 0;
};

/// Tiles [window_begin, window_begin + (n_train+n_val)*days_per_domain)
/// into consecutive domains: oldest blocks are sources, then validation,
/// with the newest block adjacent to what follows (the OOS days).
inline DomainPartition partition(int window_begin, int total_days_available, int days_per_domain,
                                 int n_train, int n_val) {
  require(days_per_domain >= 1 && n_train >= 1 && n_val >= 0, "partition: invalid counts");
  const int need = (n_train + n_val) * days_per_domain;
  require(window_begin >= 0, "partition: negative window start");
  if (window_begin + need > total_days_available)
    throw config_error("partition: window of " + std::to_string(need) + " days exceeds the " +
                       std::to_string(total_days_available - window_begin) + " available");

  DomainPartition part;
  part.days_per_domain = days_per_domain;
  const int n_domains = n_train + n_val;
  for (int i = 0; i < n_domains; ++i) {
    DomainInterval d;
    d.domain_id = i - n_domains;  // most recent block is t_{-1}
    d.first_day = window_begin + i * days_per_domain;
    d.last_day = d.first_day + days_per_domain - 1;
    d.role = i < n_train ? Role::source : Role::validation;
    part.domains.push_back(d);
  }
  return part;
}

/// Feature-wise affine map fitted so the source-set range is [0,1];
/// other rows are transformed with the same map and may leave [0,1].
/// Zero-range features map to constant 0.
struct MinMaxScaler {
  Vector lo;
  Vector range;  // hi - lo; 0 marks a constant feature
  std::vector<int> constant_features;

  Vector apply(const Vector& x) const {
    Vector out(x.size());
    for (Eigen::Index k = 0; k < x.size(); ++k)
      out(k) = range(k) > 0.0 ? (x(k) - lo(k)) / range(k) : 0.0;
    return out;
  }

  Matrix apply(const Matrix& x) const {
    Matrix out(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) out.row(i) = apply(Vector(x.row(i))).transpose();
    return out;
  }

  nlohmann::json to_json() const {
    return {{"lo", std::vector<double>(lo.data(), lo.data() + lo.size())},
            {"range", std::vector<double>(range.data(), range.data() + range.size())}};
  }

  static MinMaxScaler from_json(const nlohmann::json& j) {
    MinMaxScaler s;
    const auto lo = j.at("lo").get<std::vector<double>>();
    const auto range = j.at("range").get<std::vector<double>>();
    s.lo = Eigen::Map<const Vector>(lo.data(), static_cast<Eigen::Index>(lo.size()));
    s.range = Eigen::Map<const Vector>(range.data(), static_cast<Eigen::Index>(range.size()));
    for (Eigen::Index k = 0; k < s.range.size(); ++k)
      if (!(s.range(k) > 0.0)) s.constant_features.push_back(static_cast<int>(k));
    return s;
  }
};

inline MinMaxScaler fit_minmax(const Matrix& source_rows, std::vector<std::string>* warnings = nullptr) {
  require(source_rows.rows() >= 1, "fit_minmax: no source rows");
  MinMaxScaler s;
  s.lo = source_rows.colwise().minCoeff();
  const Vector hi = source_rows.colwise().maxCoeff();
  s.range = hi - s.lo;
  for (Eigen::Index k = 0; k < s.range.size(); ++k)
    if (!(s.range(k) > 0.0)) {
      s.constant_features.push_back(static_cast<int>(k));
      if (warnings)
        warnings->push_back("feature " + std::to_string(k) + " constant on the source set");
    }
  return s;
}

/// Per-domain standardized labels for every domain of a partition; errors
/// name the degenerate domain.
inline std::map<int, Vector> standardize_labels(const LabeledPanel& panel,
                                                const DomainPartition& part) {
  std::map<int, Vector> out;
  for (const auto& dom : part.domains) {
    std::vector<double> values;
    for (const auto& r : panel.rows)
      if (r.day >= dom.first_day && r.day <= dom.last_day) values.push_back(r.raw_return);
    require(values.size() >= 2, "standardize_labels: domain " + std::to_string(dom.domain_id) +
                                    " has fewer than two samples");
    Vector v = Eigen::Map<const Vector>(values.data(), static_cast<Eigen::Index>(values.size()));
    try {
      out[dom.domain_id] = standardize_vector(v);
    } catch (const numeric_error&) {
      throw numeric_error("standardize_labels: constant labels in domain " +
                          std::to_string(dom.domain_id));
    }
  }
  return out;
}

struct BuiltDomains {
  std::vector<DomainPanel> panels;  // partition order (oldest first)
  PanelSplit split;                 // indices into panels
  MinMaxScaler scaler;              // fitted on the source rows
};

/// Assembles per-domain training panels from a labeled day panel: inputs
/// min-max scaled with source-domain statistics, labels standardized per
/// domain.
inline BuiltDomains build_domains(const LabeledPanel& panel, const DomainPartition& part,
                                  std::vector<std::string>* warnings = nullptr) {
  // collect source rows for the scaler
  std::vector<const LabeledPanel::Row*> source_rows;
  for (const auto& dom : part.domains) {
    if (dom.role != Role::source) continue;
    for (const auto& r : panel.rows)
      if (r.day >= dom.first_day && r.day <= dom.last_day) source_rows.push_back(&r);
  }
  require(!source_rows.empty(), "build_domains: no source rows");
  Matrix src(static_cast<Eigen::Index>(source_rows.size()), panel.n_features);
  for (std::size_t i = 0; i < source_rows.size(); ++i)
    src.row(static_cast<Eigen::Index>(i)) = source_rows[i]->features.transpose();

  BuiltDomains out;
  out.scaler = fit_minmax(src, warnings);

  for (const auto& dom : part.domains) {
    std::vector<const LabeledPanel::Row*> rows;
    for (const auto& r : panel.rows)
      if (r.day >= dom.first_day && r.day <= dom.last_day) rows.push_back(&r);
    require(rows.size() >= 2, "build_domains: domain " + std::to_string(dom.domain_id) +
                                  " has fewer than two samples");
    DomainPanel p;
    p.domain_id = dom.domain_id;
    p.inputs.resize(static_cast<Eigen::Index>(rows.size()), panel.n_features);
    Vector raw(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      p.inputs.row(static_cast<Eigen::Index>(i)) = out.scaler.apply(rows[i]->features).transpose();
      raw(static_cast<Eigen::Index>(i)) = rows[i]->raw_return;
    }
    try {
      p.labels = standardize_vector(raw);
    } catch (const numeric_error&) {
      throw numeric_error("build_domains: constant labels in domain " +
                          std::to_string(dom.domain_id));
    }
    const int idx = static_cast<int>(out.panels.size());
    (dom.role == Role::source ? out.split.train : out.split.val).push_back(idx);
    out.panels.push_back(std::move(p));
  }
  return out;
}

/// Synthetic-domain CSV interchange: columns x_0..x_{D-1},r one file per
/// domain, preceded by a schema comment line.
inline void save_domain_csv(const DomainPanel& p, const std::string& path) {
  csv::Writer w(path);
  w.stream() << "# schema: cfl.domain.v1 domain_id=" << p.domain_id
             << " standardized=" << (p.labels_standardized ? 1 : 0) << "\n";
  std::vector<std::string> header;
  for (Eigen::Index k = 0; k < p.dim(); ++k) header.push_back("x_" + std::to_string(k));
  header.push_back("r");
  w.row(header);
  for (Eigen::Index i = 0; i < p.n(); ++i) {
    std::vector<std::string> cells;
    for (Eigen::Index k = 0; k < p.dim(); ++k) cells.push_back(csv::format_double(p.inputs(i, k)));
    cells.push_back(csv::format_double(p.labels(i)));
    w.row(cells);
  }
}

inline DomainPanel load_domain_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot open domain csv: " + path);
  std::string line;
  DomainPanel p;
  // schema comment
  if (!std::getline(in, line)) throw config_error("empty domain csv: " + path);
  if (line.rfind("# schema: cfl.domain.v1", 0) == 0) {
    const auto id_pos = line.find("domain_id=");
    if (id_pos != std::string::npos) p.domain_id = std::stoi(line.substr(id_pos + 10));
    const auto std_pos = line.find("standardized=");
    if (std_pos != std::string::npos) p.labels_standardized = line[std_pos + 13] == '1';
    if (!std::getline(in, line)) throw config_error("domain csv without header: " + path);
  }
  const auto header = csv::split_line(line);
  require(!header.empty() && header.back() == "r", "domain csv: last column must be r in " + path);
  const auto dim = static_cast<Eigen::Index>(header.size()) - 1;

  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = csv::split_line(line);
    require(static_cast<Eigen::Index>(cells.size()) == dim + 1, "domain csv: ragged row in " + path);
    std::vector<double> vals;
    vals.reserve(cells.size());
    for (const auto& c : cells) vals.push_back(csv::parse_double(c));
    rows.push_back(std::move(vals));
  }
  p.inputs.resize(static_cast<Eigen::Index>(rows.size()), dim);
  p.labels.resize(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (Eigen::Index k = 0; k < dim; ++k) p.inputs(static_cast<Eigen::Index>(i), k) = rows[i][static_cast<std::size_t>(k)];
    p.labels(static_cast<Eigen::Index>(i)) = rows[i].back();
  }
  return p;
}

}  // namespace cfl::data
