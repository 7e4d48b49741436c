#pragma once

// Confusion-matrix IoU evaluation. Rows are ground truth, columns predictions.
// Pixels whose ground truth is the ignore id are not counted.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "segfuse/error.hpp"
#include "segfuse/image.hpp"

namespace segfuse::metrics {

class ConfusionMatrix {
 public:
  ConfusionMatrix() = default;
  explicit ConfusionMatrix(std::size_t n) : n_(n), counts_(n * n, 0) {}

  std::size_t classes() const { return n_; }
  std::uint64_t operator()(std::size_t gt, std::size_t pred) const { return counts_[gt * n_ + pred]; }
  std::uint64_t& operator()(std::size_t gt, std::size_t pred) { return counts_[gt * n_ + pred]; }
  const std::vector<std::uint64_t>& counts() const { return counts_; }

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto c : counts_) t += c;
    return t;
  }
  std::uint64_t row_sum(std::size_t c) const {
    std::uint64_t s = 0;
    for (std::size_t j = 0; j < n_; ++j) s += (*this)(c, j);
    return s;
  }
  std::uint64_t col_sum(std::size_t c) const {
    std::uint64_t s = 0;
    for (std::size_t i = 0; i < n_; ++i) s += (*this)(i, c);
    return s;
  }

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t n_ = 0;
  std::vector<std::uint64_t> counts_;
};

// Validates the whole pair before counting, so a rejected pair leaves conf untouched.
inline void accumulate(ConfusionMatrix& conf, const LabelMap& pred, const LabelMap& gt) {
  if (!pred.same_size(gt) || pred.channels() != 1 || gt.channels() != 1) {
    throw DataError("prediction " + std::to_string(pred.height()) + "x" + std::to_string(pred.width()) +
                    " does not match ground truth " + std::to_string(gt.height()) + "x" + std::to_string(gt.width()));
  }
  const std::size_t n = conf.classes();
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const std::uint8_t g = gt.data()[i], p = pred.data()[i];
    if (g != kIgnoreId && g >= n) throw DataError("ground-truth id " + std::to_string(g) + " >= class count " + std::to_string(n));
    if (g != kIgnoreId && p >= n) throw DataError("predicted id " + std::to_string(p) + " >= class count " + std::to_string(n));
  }
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const std::uint8_t g = gt.data()[i];
    if (g != kIgnoreId) ++conf(g, pred.data()[i]);
  }
}

inline ConfusionMatrix merge_confusion(const ConfusionMatrix& a, const ConfusionMatrix& b) {
  if (a.classes() != b.classes()) {
    throw std::invalid_argument("merge_confusion: " + std::to_string(a.classes()) + " vs " +
                                std::to_string(b.classes()) + " classes");
  }
  ConfusionMatrix out = a;
  for (std::size_t i = 0; i < a.classes(); ++i) {
    for (std::size_t j = 0; j < a.classes(); ++j) out(i, j) += b(i, j);
  }
  return out;
}

enum class ClassStatus { scored, undefined, excluded };

struct EvalReport {
  std::vector<std::optional<double>> iou;  // empty when undefined; set for excluded classes if defined
  std::vector<ClassStatus> status;
  std::optional<double> miou;  // empty when no class is scored
  std::uint64_t pixels = 0;
};

inline EvalReport iou_scores(const ConfusionMatrix& conf, const std::set<std::size_t>& excluded = {}) {
  EvalReport r;
  r.pixels = conf.total();
  double sum = 0.0;
  std::size_t scored = 0;
  for (std::size_t c = 0; c < conf.classes(); ++c) {
    const std::uint64_t tp = conf(c, c);
    const std::uint64_t uni = conf.row_sum(c) + conf.col_sum(c) - tp;
    std::optional<double> iou;
    if (uni != 0) iou = static_cast<double>(tp) / static_cast<double>(uni);
    r.iou.push_back(iou);
    if (excluded.count(c)) {
      r.status.push_back(ClassStatus::excluded);
    } else if (!iou) {
      r.status.push_back(ClassStatus::undefined);
    } else {
      r.status.push_back(ClassStatus::scored);
      sum += *iou;
      ++scored;
    }
  }
  if (scored > 0) r.miou = sum / static_cast<double>(scored);
  return r;
}

// ---------------------------------------------------------------------------
// Rendering. Percentages with two decimals; excluded classes print as
// "excluded" and undefined ones as "n/a".

inline std::string percent(double fraction) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", fraction * 100.0);
  return buf;
}

inline std::string cell(const EvalReport& r, std::size_t c) {
  if (r.status[c] == ClassStatus::excluded) return "excluded";
  if (!r.iou[c]) return "n/a";
  return percent(*r.iou[c]);
}

inline std::string miou_cell(const EvalReport& r) { return r.miou ? percent(*r.miou) : "n/a"; }

namespace detail {

inline void check_names(const EvalReport& r, std::span<const std::string> names) {
  if (names.size() != r.iou.size()) {
    throw std::invalid_argument("report has " + std::to_string(r.iou.size()) + " classes but " +
                                std::to_string(names.size()) + " names were given");
  }
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

}  // namespace detail

inline std::string format_csv(const EvalReport& r, std::span<const std::string> names) {
  detail::check_names(r, names);
  std::string out = "class,iou\n";
  for (std::size_t c = 0; c < names.size(); ++c) out += detail::csv_field(names[c]) + "," + cell(r, c) + "\n";
  out += "mIoU," + miou_cell(r) + "\n";
  return out;
}

inline nlohmann::json to_json(const EvalReport& r, std::span<const std::string> names) {
  detail::check_names(r, names);
  nlohmann::json classes = nlohmann::json::array();
  nlohmann::json excluded = nlohmann::json::array();
  for (std::size_t c = 0; c < names.size(); ++c) {
    const char* status = r.status[c] == ClassStatus::scored ? "scored"
                         : r.status[c] == ClassStatus::excluded ? "excluded"
                                                                : "undefined";
    nlohmann::json iou = r.iou[c] ? nlohmann::json(*r.iou[c]) : nlohmann::json(nullptr);
    classes.push_back({{"id", c}, {"name", names[c]}, {"iou", iou}, {"status", status}});
    if (r.status[c] == ClassStatus::excluded) excluded.push_back(c);
  }
  return {{"classes", classes},
          {"miou", r.miou ? nlohmann::json(*r.miou) : nlohmann::json(nullptr)},
          {"excluded", excluded},
          {"pixels", r.pixels}};
}

inline std::string format_json(const EvalReport& r, std::span<const std::string> names) {
  return to_json(r, names).dump(2) + "\n";
}

struct NamedReport {
  std::string label;
  EvalReport report;
};

// Classes as columns, one row per run, mIoU last.
inline std::string format_markdown(std::span<const NamedReport> rows, std::span<const std::string> names) {
  std::string out = "| run |";
  std::string rule = "|---|";
  for (const auto& n : names) {
    out += " " + n + " |";
    rule += "---:|";
  }
  out += " mIoU |\n" + rule + "---:|\n";
  for (const auto& row : rows) {
    detail::check_names(row.report, names);
    out += "| " + row.label + " |";
    for (std::size_t c = 0; c < names.size(); ++c) out += " " + cell(row.report, c) + " |";
    out += " " + miou_cell(row.report) + " |\n";
  }
  return out;
}

inline std::string format_csv(std::span<const NamedReport> rows, std::span<const std::string> names) {
  std::string out = "run";
  for (const auto& n : names) out += "," + detail::csv_field(n);
  out += ",mIoU\n";
  for (const auto& row : rows) {
    detail::check_names(row.report, names);
    out += detail::csv_field(row.label);
    for (std::size_t c = 0; c < names.size(); ++c) out += "," + cell(row.report, c);
    out += "," + miou_cell(row.report) + "\n";
  }
  return out;
}

inline std::string format_markdown(const EvalReport& r, std::span<const std::string> names,
                                   const std::string& label = "model") {
  const NamedReport row{label, r};
  return format_markdown(std::span<const NamedReport>(&row, 1), names);
}

// Reads back the JSON rendering (used when comparing finished runs).
inline EvalReport report_from_json(const nlohmann::json& j, std::vector<std::string>* names = nullptr) {
  EvalReport r;
  try {
    for (const auto& c : j.at("classes")) {
      const std::string status = c.at("status").get<std::string>();
      r.status.push_back(status == "scored" ? ClassStatus::scored
                         : status == "excluded" ? ClassStatus::excluded
                                                : ClassStatus::undefined);
      r.iou.push_back(c.at("iou").is_null() ? std::nullopt : std::optional<double>(c.at("iou").get<double>()));
      if (names) names->push_back(c.at("name").get<std::string>());
    }
    if (!j.at("miou").is_null()) r.miou = j.at("miou").get<double>();
    r.pixels = j.at("pixels").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("report: ") + e.what());
  }
  return r;
}

}  // namespace segfuse::metrics
