#pragma once

#include "cfl/common.hpp"
#include "cfl/data.hpp"
#include "cfl/panel.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace cfl::backtest {

struct BacktestConfig {
  int update_frequency_days = 120;
  int window_days = 350;
  int train_days = 300;
  int val_days = 50;
  int days_per_domain = 5;
  bool hedge = true;  // subtract the 1/N pool return
  double cost_bps = 0.0;

  void validate() const {
    require(train_days + val_days == window_days,
            "backtest config: train_days + val_days must equal window_days");
    require(update_frequency_days >= 1 && window_days >= 2 && days_per_domain >= 1 &&
                train_days >= 1 && val_days >= 0 && cost_bps >= 0.0,
            "backtest config: all counts must be positive");
    require(train_days % days_per_domain == 0 && val_days % days_per_domain == 0,
            "backtest config: train/val days must be multiples of days_per_domain");
  }
};

/// rank(g)/sum(rank(g)) with average ranks on ties: strictly positive
/// weights summing to one, invariant under monotone signal transforms.
inline Vector rank_weights(const Vector& signals) {
  const auto n = signals.size();
  require(n >= 1, "rank_weights: empty signal vector");
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<Eigen::Index>(i);
  std::sort(order.begin(), order.end(),
            [&](Eigen::Index a, Eigen::Index b) { return signals(a) < signals(b); });

  Vector ranks(n);
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && signals(order[j + 1]) == signals(order[i])) ++j;
    const double avg = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t k = i; k <= j; ++k) ranks(order[k]) = avg;
    i = j + 1;
  }
  return ranks / ranks.sum();
}

/// Long rank-weighted leg, optionally hedged with the equal-weight pool.
/// The hedged return is accumulated as sum_i (w_i - 1/N) r_i so a uniform
/// weight vector nets exactly zero. Costs: cost_bps * 1e-4 * turnover.
inline double daily_return(const Vector& weights, const Vector& raw_returns, bool hedge,
                           double cost_bps = 0.0, double turnover = 0.0) {
  require(weights.size() == raw_returns.size() && weights.size() > 0,
          "daily_return: weights and returns must align");
  const auto n = static_cast<double>(weights.size());
  double ret = 0.0;
  if (hedge) {
    const double uniform = 1.0 / n;
    for (Eigen::Index i = 0; i < weights.size(); ++i)
      ret += (weights(i) - uniform) * raw_returns(i);
  } else {
    ret = weights.dot(raw_returns);
  }
  return ret - cost_bps * 1e-4 * turnover;
}

inline double cagr(double capital_start, double capital_end, int trading_days) {
  require(capital_start > 0.0 && trading_days >= 1, "cagr: invalid inputs");
  if (!(capital_end > 0.0)) throw numeric_error("cagr: non-positive terminal capital");
  return std::pow(capital_end / capital_start, 252.0 / static_cast<double>(trading_days)) - 1.0;
}

/// sqrt(252) * mean / population std of daily returns.
inline double sharpe(const Vector& daily_returns) {
  require(daily_returns.size() >= 2, "sharpe: need at least two days");
  const double mu = daily_returns.mean();
  const double sd = std::sqrt((daily_returns.array() - mu).square().mean());
  if (!(sd > 0.0)) throw numeric_error("sharpe: zero volatility series");
  return std::sqrt(252.0) * mu / sd;
}

/// One trading day's cross-section: features and the realized forward
/// return of every stock in the pool.
struct DayCrossSection {
  std::string date;
  std::vector<std::string> stocks;
  Matrix features;  // unscaled
  Vector raw_returns;
};

using Market = std::vector<DayCrossSection>;

/// Signal model produced by a trainer for one update window: maps a scaled
/// day cross-section to one signal per stock.
struct SignalModel {
  std::function<Vector(const Matrix&)> signals;
};

/// Trainer contract: panels are already min-max scaled with the window's
/// source-domain scaler, labels standardized per domain.
using Trainer = std::function<SignalModel(const std::vector<DomainPanel>& panels,
                                          const PanelSplit& split)>;

struct PeriodStats {
  int update_index = 0;
  std::string first_date;
  std::string last_date;
  int days = 0;
  double period_cagr = 0.0;
  double period_sharpe = 0.0;
  bool sharpe_defined = false;
};

struct BacktestReport {
  std::vector<std::string> dates;
  std::vector<double> returns;
  std::vector<double> equity;  // equity[k] after k-th day, start 1.0
  double total_cagr = 0.0;
  double total_sharpe = 0.0;
  bool sharpe_defined = false;
  std::vector<PeriodStats> periods;
  int updates = 0;
};

inline Market market_from_labeled(const data::LabeledPanel& panel) {
  Market m;
  std::map<int, std::vector<const data::LabeledPanel::Row*>> by_day;
  for (const auto& r : panel.rows) by_day[r.day].push_back(&r);
  for (const auto& [day, rows] : by_day) {
    DayCrossSection cs;
    cs.date = panel.days[static_cast<std::size_t>(day)];
    cs.features.resize(static_cast<Eigen::Index>(rows.size()), panel.n_features);
    cs.raw_returns.resize(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      cs.stocks.push_back(rows[i]->stock);
      cs.features.row(static_cast<Eigen::Index>(i)) = rows[i]->features.transpose();
      cs.raw_returns(static_cast<Eigen::Index>(i)) = rows[i]->raw_return;
    }
    m.push_back(std::move(cs));
  }
  return m;
}

namespace detail {

inline double turnover_between(const std::vector<std::string>& prev_stocks, const Vector& prev_w,
                               const std::vector<std::string>& stocks, const Vector& w) {
  std::map<std::string, double> book;
  for (std::size_t i = 0; i < prev_stocks.size(); ++i) book[prev_stocks[i]] = -prev_w(static_cast<Eigen::Index>(i));
  for (std::size_t i = 0; i < stocks.size(); ++i) book[stocks[i]] += w(static_cast<Eigen::Index>(i));
  double t = 0.0;
  for (const auto& [stock, delta] : book) t += std::abs(delta);
  return t;
}

}  // namespace detail

/// Walk-forward backtest: every update_frequency_days the trainer is refit
/// on the window of train/val domains preceding the cursor, then the frozen
/// model trades daily until the next update. Day-d signals earn the day-d
/// forward return, mirroring the label construction.
inline BacktestReport rolling_backtest(const Market& market, const BacktestConfig& cfg,
                                       const Trainer& trainer, int start_day, int end_day) {
  cfg.validate();
  require(start_day >= cfg.window_days, "rolling_backtest: not enough history before start");
  require(end_day <= static_cast<int>(market.size()) && start_day < end_day,
          "rolling_backtest: bad trading range");

  BacktestReport report;
  double equity = 1.0;
  std::vector<std::string> prev_stocks;
  Vector prev_weights;

  for (int cursor = start_day; cursor < end_day; cursor += cfg.update_frequency_days) {
    // assemble the window panel: one synthetic LabeledPanel view over
    // [cursor - window_days, cursor)
    data::LabeledPanel window;
    const int w_begin = cursor - cfg.window_days;
    for (int d = w_begin; d < cursor; ++d) {
      const auto& cs = market[static_cast<std::size_t>(d)];
      for (std::size_t i = 0; i < cs.stocks.size(); ++i) {
        data::LabeledPanel::Row row;
        row.day = d - w_begin;
        row.stock = cs.stocks[i];
        row.features = cs.features.row(static_cast<Eigen::Index>(i));
        row.raw_return = cs.raw_returns(static_cast<Eigen::Index>(i));
        window.rows.push_back(std::move(row));
      }
    }
    window.n_features = static_cast<int>(market[static_cast<std::size_t>(w_begin)].features.cols());
    for (int d = w_begin; d < cursor; ++d)
      window.days.push_back(market[static_cast<std::size_t>(d)].date);

    const auto part = data::partition(0, cfg.window_days, cfg.days_per_domain,
                                      cfg.train_days / cfg.days_per_domain,
                                      cfg.val_days / cfg.days_per_domain);
    data::BuiltDomains built;
    SignalModel model;
    try {
      built = data::build_domains(window, part);
      model = trainer(built.panels, built.split);
    } catch (const std::exception& e) {
      throw numeric_error("rolling_backtest: training failed at " +
                          market[static_cast<std::size_t>(cursor)].date + ": " + e.what() +
                          " (partial report: " + std::to_string(report.returns.size()) + " days)");
    }
    ++report.updates;

    const int period_first = static_cast<int>(report.returns.size());
    const int stop = std::min(end_day, cursor + cfg.update_frequency_days);
    for (int d = cursor; d < stop; ++d) {
      const auto& cs = market[static_cast<std::size_t>(d)];
      const Matrix scaled = built.scaler.apply(cs.features);
      const Vector sig = model.signals(scaled);
      require(sig.size() == cs.raw_returns.size(), "rolling_backtest: signal size mismatch");
      const Vector weights = rank_weights(sig);
      const double turnover = prev_stocks.empty()
                                  ? weights.cwiseAbs().sum()
                                  : detail::turnover_between(prev_stocks, prev_weights, cs.stocks, weights);
      const double ret = daily_return(weights, cs.raw_returns, cfg.hedge, cfg.cost_bps, turnover);
      equity *= (1.0 + ret);
      report.dates.push_back(cs.date);
      report.returns.push_back(ret);
      report.equity.push_back(equity);
      prev_stocks = cs.stocks;
      prev_weights = weights;
    }

    PeriodStats ps;
    ps.update_index = report.updates - 1;
    ps.first_date = report.dates[static_cast<std::size_t>(period_first)];
    ps.last_date = report.dates.back();
    ps.days = static_cast<int>(report.returns.size()) - period_first;
    const double start_cap = period_first == 0 ? 1.0 : report.equity[static_cast<std::size_t>(period_first - 1)];
    ps.period_cagr = cagr(start_cap, report.equity.back(), ps.days);
    Vector period_returns(ps.days);
    for (int i = 0; i < ps.days; ++i)
      period_returns(i) = report.returns[static_cast<std::size_t>(period_first + i)];
    try {
      ps.period_sharpe = sharpe(period_returns);
      ps.sharpe_defined = true;
    } catch (const numeric_error&) {
      ps.sharpe_defined = false;
    }
    report.periods.push_back(ps);
  }

  report.total_cagr = cagr(1.0, report.equity.back(), static_cast<int>(report.returns.size()));
  Vector all = Eigen::Map<const Vector>(report.returns.data(), static_cast<Eigen::Index>(report.returns.size()));
  try {
    report.total_sharpe = sharpe(all);
    report.sharpe_defined = true;
  } catch (const numeric_error&) {
    report.sharpe_defined = false;
  }
  return report;
}

}  // namespace cfl::backtest
