#pragma once

// Evaluation reports and their three renderings (structured JSON, CSV,
// markdown). Every renderer is a pure function of the report, so a fixed
// report always produces byte-identical files. Absent metrics print as U+2014.

#include <algorithm>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "dfvqa/error.hpp"
#include "dfvqa/util.hpp"

namespace dfvqa {

inline constexpr const char* kAbsentCell = "\xE2\x80\x94";  // U+2014
inline constexpr const char* kDegenerateThreshold = "degenerate-threshold";

/// Metric names in column order.
inline const std::vector<std::string>& metric_columns() {
  static const std::vector<std::string> cols{"accuracy", "precision", "recall", "f1",      "auc",
                                             "map",      "bert_p",    "bert_r", "bert_f1", "support"};
  return cols;
}

namespace row_kind {
inline constexpr const char* kSynonym = "synonym";
inline constexpr const char* kTotalMacro = "Total (macro)";
inline constexpr const char* kTotalWeighted = "Total (weighted)";
inline constexpr const char* kMean = "mean";
inline std::string best_k(std::size_t k) { return "best-" + std::to_string(k) + " mean"; }
}  // namespace row_kind

struct MetricBlock {
  std::string model;
  std::string dataset;
  std::string stage;
  std::string synonym;
  std::string matcher;
  std::string row;  // "synonym", a class name, a total row, "mean", "best-k mean"
  std::size_t n_selected = 0;
  std::size_t n_scored = 0;
  std::size_t n_excluded = 0;
  std::map<std::string, std::optional<double>> metrics{};
  std::map<std::string, double> flag_rates{};
  std::vector<std::string> annotations{};

  std::optional<double> metric(const std::string& name) const {
    auto it = metrics.find(name);
    return it == metrics.end() ? std::nullopt : it->second;
  }
  bool annotated(std::string_view a) const {
    return std::find(annotations.begin(), annotations.end(), a) != annotations.end();
  }
};

struct EvaluationReport {
  std::map<std::string, std::string> metadata;
  std::vector<MetricBlock> blocks;
  std::vector<std::string> warnings;

  std::vector<const MetricBlock*> find(const std::string& model, const std::string& dataset, const std::string& stage,
                                       const std::string& synonym, const std::string& matcher,
                                       const std::string& row) const {
    std::vector<const MetricBlock*> out;
    for (const auto& b : blocks)
      if (b.model == model && b.dataset == dataset && b.stage == stage && b.synonym == synonym &&
          b.matcher == matcher && b.row == row)
        out.push_back(&b);
    return out;
  }
};

// --- structured -------------------------------------------------------------

inline nlohmann::json to_json(const MetricBlock& b) {
  nlohmann::json metrics = nlohmann::json::object();
  for (const auto& [k, v] : b.metrics) metrics[k] = v ? nlohmann::json(*v) : nlohmann::json(nullptr);
  return {{"model", b.model},           {"dataset", b.dataset},       {"stage", b.stage},
          {"synonym", b.synonym},       {"matcher", b.matcher},       {"row", b.row},
          {"n_selected", b.n_selected}, {"n_scored", b.n_scored},     {"n_excluded", b.n_excluded},
          {"metrics", metrics},         {"flag_rates", b.flag_rates}, {"annotations", b.annotations}};
}

inline nlohmann::json to_json(const EvaluationReport& r) {
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : r.blocks) blocks.push_back(to_json(b));
  return {{"metadata", r.metadata}, {"blocks", blocks}, {"warnings", r.warnings}};
}

inline EvaluationReport report_from_json(const nlohmann::json& j) {
  EvaluationReport r;
  try {
    r.metadata = j.at("metadata").get<std::map<std::string, std::string>>();
    r.warnings = j.value("warnings", std::vector<std::string>{});
    for (const auto& jb : j.at("blocks")) {
      MetricBlock b;
      b.model = jb.at("model").get<std::string>();
      b.dataset = jb.at("dataset").get<std::string>();
      b.stage = jb.at("stage").get<std::string>();
      b.synonym = jb.at("synonym").get<std::string>();
      b.matcher = jb.at("matcher").get<std::string>();
      b.row = jb.at("row").get<std::string>();
      b.n_selected = jb.at("n_selected").get<std::size_t>();
      b.n_scored = jb.at("n_scored").get<std::size_t>();
      b.n_excluded = jb.at("n_excluded").get<std::size_t>();
      for (const auto& [k, v] : jb.at("metrics").items())
        b.metrics[k] = v.is_null() ? std::nullopt : std::optional<double>(v.get<double>());
      b.flag_rates = jb.at("flag_rates").get<std::map<std::string, double>>();
      b.annotations = jb.at("annotations").get<std::vector<std::string>>();
      r.blocks.push_back(std::move(b));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::data, std::string("malformed report: ") + e.what());
  }
  return r;
}

inline EvaluationReport load_report(const std::filesystem::path& path) {
  try {
    return report_from_json(nlohmann::json::parse(read_file(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorKind::data, path.string() + ": " + e.what());
  }
}

inline std::string render_structured(const EvaluationReport& r) { return to_json(r).dump(2) + "\n"; }

// --- csv --------------------------------------------------------------------

namespace detail {
inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::string cell(const std::optional<double>& v, int precision) {
  return v ? format_double(*v, precision) : kAbsentCell;
}

inline std::string pct_cell(const std::optional<double>& v) { return v ? format_double(*v * 100.0, 1) : kAbsentCell; }
}  // namespace detail

inline std::string render_csv(const EvaluationReport& r) {
  std::string out = "model,dataset,stage,synonym,matcher,row,n_selected,n_scored,n_excluded";
  for (const auto& c : metric_columns()) out += "," + c;
  out += ",flag_rates,annotations\n";
  for (const auto& b : r.blocks) {
    std::vector<std::string> f{b.model, b.dataset, b.stage, b.synonym, b.matcher, b.row,
                               std::to_string(b.n_selected), std::to_string(b.n_scored),
                               std::to_string(b.n_excluded)};
    for (const auto& c : metric_columns()) f.push_back(detail::cell(b.metric(c), 6));
    std::vector<std::string> flags;
    for (const auto& [k, v] : b.flag_rates) flags.push_back(k + "=" + format_double(v, 6));
    f.push_back(join(flags, ";"));
    f.push_back(join(b.annotations, ";"));
    for (std::size_t i = 0; i < f.size(); ++i) {
      if (i) out += ',';
      out += detail::csv_field(f[i]);
    }
    out += '\n';
  }
  return out;
}

// --- markdown ---------------------------------------------------------------

namespace detail {
template <typename T>
std::vector<T> unique_in_order(const std::vector<MetricBlock>& blocks, T MetricBlock::*field,
                               const std::function<bool(const MetricBlock&)>& keep) {
  std::vector<T> out;
  for (const auto& b : blocks)
    if (keep(b) && std::find(out.begin(), out.end(), b.*field) == out.end()) out.push_back(b.*field);
  return out;
}

inline std::string md_row(const std::vector<std::string>& cells) {
  std::string out = "|";
  for (const auto& c : cells) out += " " + c + " |";
  return out + "\n";
}

inline std::string md_rule(std::size_t n) {
  std::string out = "|";
  for (std::size_t i = 0; i < n; ++i) out += " --- |";
  return out + "\n";
}
}  // namespace detail

/// Tables grouped by stage: binary stage as synonym
/// rows by dataset columns, fine-grained stages as class rows, BertScore as
/// model rows. Values are percentages with one decimal.
inline std::string render_markdown(const EvaluationReport& r) {
  using detail::md_row;
  using detail::md_rule;
  using detail::pct_cell;
  std::string out = "# Evaluation report\n\n";
  for (const auto& [k, v] : r.metadata) out += "- " + k + ": `" + v + "`\n";
  out += "\n";

  auto is_stage = [](const std::string& s) { return [s](const MetricBlock& b) { return b.stage == s; }; };

  // Binary.
  const auto bin = is_stage("binary");
  bool degenerate = false;
  for (const auto& model : detail::unique_in_order<std::string>(r.blocks, &MetricBlock::model, bin)) {
    auto of_model = [&](const MetricBlock& b) { return bin(b) && b.model == model; };
    auto datasets = detail::unique_in_order<std::string>(r.blocks, &MetricBlock::dataset, of_model);
    out += "## Binary detection: " + model + "\n\n";
    std::vector<std::string> header{"Synonym"};
    for (const auto& d : datasets)
      for (const char* m : {"Acc.", "AUC", "F1"}) header.push_back(d + " " + m);
    out += md_row(header) + md_rule(header.size());
    std::vector<std::pair<std::string, std::string>> rows;  // (synonym, row)
    for (const auto& b : r.blocks)
      if (of_model(b) && std::find(rows.begin(), rows.end(), std::make_pair(b.synonym, b.row)) == rows.end())
        rows.emplace_back(b.synonym, b.row);
    for (const auto& [syn, row] : rows) {
      std::vector<std::string> cells{row == row_kind::kSynonym ? syn : row + " (" + syn + ")"};
      for (const auto& d : datasets) {
        const MetricBlock* found = nullptr;
        for (const auto& b : r.blocks)
          if (of_model(b) && b.dataset == d && b.synonym == syn && b.row == row) found = &b;
        if (!found) {
          cells.insert(cells.end(), 3, kAbsentCell);
          continue;
        }
        degenerate = degenerate || found->annotated(kDegenerateThreshold);
        cells.push_back(pct_cell(found->metric("accuracy")));
        cells.push_back(pct_cell(found->metric("auc")) + (found->annotated(kDegenerateThreshold) ? "*" : ""));
        cells.push_back(pct_cell(found->metric("f1")));
      }
      out += md_row(cells);
    }
    out += "\n";
  }
  if (degenerate)
    out += "\\* AUC over hard exact-match decisions (" + std::string(kDegenerateThreshold) +
           "): the decisions offer no thresholds to sweep.\n\n";

  // Fine-grained.
  for (const char* stage : {"multiple_choice", "open_ended"}) {
    const auto fg = is_stage(stage);
    std::vector<std::tuple<std::string, std::string, std::string, std::string>> groups;
    for (const auto& b : r.blocks)
      if (fg(b)) {
        auto g = std::make_tuple(b.model, b.dataset, b.synonym, b.matcher);
        if (std::find(groups.begin(), groups.end(), g) == groups.end()) groups.push_back(g);
      }
    for (const auto& [model, dataset, syn, matcher] : groups) {
      out += "## Fine-grained " + std::string(stage) + " (" + matcher + "): " + model + " / " + dataset + " / " + syn +
             "\n\n";
      std::vector<std::string> header{"Class", "mAP", "AUC", "F1", "Recall", "Precision", "Support"};
      out += md_row(header) + md_rule(header.size());
      for (const auto& b : r.blocks) {
        if (!(fg(b) && b.model == model && b.dataset == dataset && b.synonym == syn && b.matcher == matcher)) continue;
        out += md_row({b.row, pct_cell(b.metric("map")), pct_cell(b.metric("auc")), pct_cell(b.metric("f1")),
                       pct_cell(b.metric("recall")), pct_cell(b.metric("precision")),
                       detail::cell(b.metric("support"), 0)});
      }
      out += "\n";
    }
  }

  // Qualitative.
  const auto ql = is_stage("qualitative");
  auto q_models = detail::unique_in_order<std::string>(r.blocks, &MetricBlock::model, ql);
  if (!q_models.empty()) {
    auto q_sets = detail::unique_in_order<std::string>(r.blocks, &MetricBlock::dataset, ql);
    auto q_syns = detail::unique_in_order<std::string>(r.blocks, &MetricBlock::synonym, ql);
    for (const auto& syn : q_syns) {
      out += "## Qualitative (BertScore): " + syn + "\n\n";
      std::vector<std::string> header{"Model"};
      for (const auto& d : q_sets)
        for (const char* m : {"P", "R", "F1"}) header.push_back(d + " " + m);
      out += md_row(header) + md_rule(header.size());
      for (const auto& model : q_models) {
        std::vector<std::string> cells{model};
        for (const auto& d : q_sets) {
          const MetricBlock* found = nullptr;
          for (const auto& b : r.blocks)
            if (ql(b) && b.model == model && b.dataset == d && b.synonym == syn) found = &b;
          for (const char* m : {"bert_p", "bert_r", "bert_f1"})
            cells.push_back(found ? pct_cell(found->metric(m)) : kAbsentCell);
        }
        out += md_row(cells);
      }
      out += "\n";
    }
  }

  if (!r.warnings.empty()) {
    out += "## Warnings\n\n";
    for (const auto& w : r.warnings) out += "- " + w + "\n";
  }
  return out;
}

enum class ReportFormat { csv, markdown, structured };

inline std::optional<ReportFormat> parse_report_format(std::string_view s) {
  if (s == "csv") return ReportFormat::csv;
  if (s == "markdown" || s == "md") return ReportFormat::markdown;
  if (s == "structured" || s == "json") return ReportFormat::structured;
  return std::nullopt;
}

/// Writes report.{csv,md,json} into `dir` and returns the path written.
inline std::filesystem::path emit_report(const EvaluationReport& r, ReportFormat fmt, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir))
    throw Error(ErrorKind::io, "output directory " + dir.string() + " is not writable");
  std::filesystem::path p;
  switch (fmt) {
    case ReportFormat::csv:
      p = dir / "report.csv";
      write_file(p, render_csv(r));
      break;
    case ReportFormat::markdown:
      p = dir / "report.md";
      write_file(p, render_markdown(r));
      break;
    case ReportFormat::structured:
      p = dir / "report.json";
      write_file(p, render_structured(r));
      break;
  }
  return p;
}

}  // namespace dfvqa
