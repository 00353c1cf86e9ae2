#pragma once

// Dataset manifests: newline-delimited JSON records, one per frame, plus a
// class schema describing the fine-grained label set of the dataset.
//
//   {"id": "f0001", "image_uri": "frames/f0001.png", "binary_label": "fake",
//    "fine_labels": ["nose", "lip"], "dataset": "seq-components", "split": "test"}
//
// Schema file: {"classes": ["nose", "eye", ...], "synonyms": {"hair": ["bangs"]}}

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "dfvqa/error.hpp"
#include "dfvqa/util.hpp"

namespace dfvqa {

enum class BinaryLabel { real, fake };
enum class Split { train, val, test };

inline const char* to_string(BinaryLabel l) { return l == BinaryLabel::fake ? "fake" : "real"; }

inline const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "test";
}

inline std::optional<BinaryLabel> parse_binary_label(std::string_view s) {
  if (s == "fake") return BinaryLabel::fake;
  if (s == "real") return BinaryLabel::real;
  return std::nullopt;
}

inline std::optional<Split> parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  return std::nullopt;
}

struct Sample {
  std::string id;
  std::string image_uri;
  BinaryLabel binary_label = BinaryLabel::real;
  /// Deduplicated, in schema order.
  std::vector<std::string> fine_labels;
  std::string dataset;
  Split split = Split::test;

  bool is_fake() const noexcept { return binary_label == BinaryLabel::fake; }
  bool has_label(std::string_view cls) const {
    return std::find(fine_labels.begin(), fine_labels.end(), cls) != fine_labels.end();
  }
  bool operator==(const Sample&) const = default;
};

class ClassSchema {
 public:
  ClassSchema() = default;

  /// Validates names and synonym disjointness; throws Error(data) on violation.
  explicit ClassSchema(std::vector<std::string> classes, std::map<std::string, std::vector<std::string>> synonyms = {})
      : classes_(std::move(classes)), synonyms_(std::move(synonyms)) {
    validate();
  }

  /// Schema with the built-in synonym map ({"hair": {"bangs"}}) applied to
  /// whichever of its classes are present.
  static ClassSchema with_default_synonyms(std::vector<std::string> classes) {
    std::map<std::string, std::vector<std::string>> syn;
    if (std::find(classes.begin(), classes.end(), "hair") != classes.end()) syn["hair"] = {"bangs"};
    return ClassSchema(std::move(classes), std::move(syn));
  }

  const std::vector<std::string>& classes() const noexcept { return classes_; }
  const std::map<std::string, std::vector<std::string>>& synonyms() const noexcept { return synonyms_; }
  std::size_t size() const noexcept { return classes_.size(); }
  bool empty() const noexcept { return classes_.empty(); }

  std::optional<std::size_t> index_of(std::string_view name) const {
    auto it = std::find(classes_.begin(), classes_.end(), name);
    if (it == classes_.end()) return std::nullopt;
    return static_cast<std::size_t>(it - classes_.begin());
  }
  bool contains(std::string_view name) const { return index_of(name).has_value(); }

  /// Canonical name followed by its registered synonyms.
  std::vector<std::string> surface_forms(const std::string& cls) const {
    std::vector<std::string> out{cls};
    if (auto it = synonyms_.find(cls); it != synonyms_.end())
      out.insert(out.end(), it->second.begin(), it->second.end());
    return out;
  }

  bool operator==(const ClassSchema&) const = default;

 private:
  static bool is_canonical(const std::string& s) {
    if (s.empty() || trim(s) != s) return false;
    return std::none_of(s.begin(), s.end(), [](unsigned char c) { return std::isupper(c); });
  }

  void validate() const {
    std::set<std::string> seen;
    for (const auto& c : classes_) {
      if (!is_canonical(c)) throw Error(ErrorKind::data, "class name must be non-empty lowercase: '" + c + "'");
      if (!seen.insert(c).second) throw Error(ErrorKind::data, "duplicate class name '" + c + "'");
    }
    std::map<std::string, std::string> owner;
    for (const auto& [cls, forms] : synonyms_) {
      if (!seen.count(cls)) throw Error(ErrorKind::data, "synonyms given for unknown class '" + cls + "'");
      for (const auto& f : forms) {
        if (!is_canonical(f)) throw Error(ErrorKind::data, "synonym must be non-empty lowercase: '" + f + "'");
        if (f != cls && seen.count(f))
          throw Error(ErrorKind::data, "synonym '" + f + "' of '" + cls + "' is another class name");
        auto [it, inserted] = owner.emplace(f, cls);
        if (!inserted && it->second != cls)
          throw Error(ErrorKind::data, "synonym '" + f + "' shared by '" + it->second + "' and '" + cls + "'");
      }
    }
  }

  std::vector<std::string> classes_;
  std::map<std::string, std::vector<std::string>> synonyms_;
};

/// Deepfake synonyms used in prompts, and genuine-image terms.
struct SynonymRegistry {
  std::vector<std::string> positive{"manipulated", "deepfake", "synthetic", "altered",
                                    "fabricated", "face forgery", "falsified"};
  std::vector<std::string> negative{"real", "original", "unaltered", "authentic",
                                    "legitimate", "genuine", "bona fide"};

  void validate() const {
    for (const auto& p : positive)
      if (std::find(negative.begin(), negative.end(), p) != negative.end())
        throw Error(ErrorKind::config, "term '" + p + "' is both a positive and a negative synonym");
  }
};

struct Dataset {
  std::string name;
  ClassSchema schema;
  std::vector<Sample> samples;
  std::vector<std::string> warnings;

  bool fine_grained() const noexcept { return !schema.empty(); }
  bool operator==(const Dataset& o) const { return name == o.name && schema == o.schema && samples == o.samples; }
};

// --- parsing ----------------------------------------------------------------

inline ClassSchema parse_schema(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::data, std::string("malformed schema: ") + e.what());
  }
  if (!j.is_object() || !j.contains("classes") || !j["classes"].is_array())
    throw Error(ErrorKind::data, "schema must be an object with a 'classes' array");
  std::vector<std::string> classes;
  try {
    classes = j["classes"].get<std::vector<std::string>>();
    if (!j.contains("synonyms")) return ClassSchema::with_default_synonyms(std::move(classes));
    auto syn = j["synonyms"].get<std::map<std::string, std::vector<std::string>>>();
    return ClassSchema(std::move(classes), std::move(syn));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::data, std::string("malformed schema: ") + e.what());
  }
}

inline ClassSchema load_schema(const std::filesystem::path& path) { return parse_schema(read_file(path)); }

/// Parses manifest text against `schema`. An empty schema marks a binary-only
/// dataset, in which case every record must carry empty fine_labels.
inline Dataset parse_manifest(std::string_view text, ClassSchema schema, std::string name = {}) {
  Dataset ds;
  ds.name = std::move(name);
  ds.schema = std::move(schema);
  std::unordered_set<std::string> ids;

  for_each_record_line(text, [&](std::size_t line_no, std::string_view line) {
    const std::string where = "line " + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception&) {
      throw Error(ErrorKind::data, where + ": malformed record");
    }
    auto field = [&](const char* key) -> std::string {
      if (!j.is_object() || !j.contains(key) || !j[key].is_string())
        throw Error(ErrorKind::data, where + ": missing or non-string field '" + key + "'");
      return j[key].get<std::string>();
    };

    Sample s;
    s.id = field("id");
    s.image_uri = field("image_uri");
    auto label = parse_binary_label(field("binary_label"));
    if (!label) throw Error(ErrorKind::data, where + ": binary_label must be \"real\" or \"fake\"");
    s.binary_label = *label;
    s.dataset = field("dataset");
    auto split = parse_split(field("split"));
    if (!split) throw Error(ErrorKind::data, where + ": split must be train, val or test");
    s.split = *split;

    if (s.id.empty()) throw Error(ErrorKind::data, where + ": empty id");
    if (!ids.insert(s.id).second) throw Error(ErrorKind::data, where + ": duplicate id '" + s.id + "'");

    std::vector<std::string> raw;
    if (j.contains("fine_labels")) {
      if (!j["fine_labels"].is_array()) throw Error(ErrorKind::data, where + ": fine_labels must be an array");
      for (const auto& v : j["fine_labels"]) {
        if (!v.is_string()) throw Error(ErrorKind::data, where + ": fine_labels entries must be strings");
        raw.push_back(v.get<std::string>());
      }
    }
    std::vector<bool> present(ds.schema.size(), false);
    for (const auto& l : raw) {
      auto idx = ds.schema.index_of(l);
      if (!idx) throw Error(ErrorKind::data, where + ": unknown class '" + l + "' in fine_labels");
      if (present[*idx]) ds.warnings.push_back(where + ": duplicate fine label '" + l + "' dropped");
      present[*idx] = true;
    }
    for (std::size_t i = 0; i < present.size(); ++i)
      if (present[i]) s.fine_labels.push_back(ds.schema.classes()[i]);

    if (!s.is_fake() && !s.fine_labels.empty())
      throw Error(ErrorKind::data, where + ": real sample '" + s.id + "' carries fine labels");
    if (s.is_fake() && ds.fine_grained() && s.fine_labels.empty())
      throw Error(ErrorKind::data, where + ": fake sample '" + s.id + "' has no fine labels");

    ds.samples.push_back(std::move(s));
  });
  if (ds.name.empty() && !ds.samples.empty()) ds.name = ds.samples.front().dataset;
  return ds;
}

/// Loads a manifest. Without an explicit schema, a sidecar
/// `<manifest>.schema.json` is used when present; otherwise the dataset is binary-only.
inline Dataset load_manifest(const std::filesystem::path& path,
                             const std::optional<std::filesystem::path>& schema_path = std::nullopt,
                             std::string name = {}) {
  ClassSchema schema;
  if (schema_path) {
    schema = load_schema(*schema_path);
  } else {
    auto sidecar = path;
    sidecar += ".schema.json";
    if (std::filesystem::exists(sidecar)) schema = load_schema(sidecar);
  }
  try {
    return parse_manifest(read_file(path), std::move(schema), std::move(name));
  } catch (const Error& e) {
    throw Error(e.kind(), path.string() + ": " + e.what());
  }
}

inline nlohmann::json to_json(const Sample& s) {
  return {{"id", s.id},
          {"image_uri", s.image_uri},
          {"binary_label", to_string(s.binary_label)},
          {"fine_labels", s.fine_labels},
          {"dataset", s.dataset},
          {"split", to_string(s.split)}};
}

inline std::string serialize_manifest(const Dataset& ds) {
  std::string out;
  for (const auto& s : ds.samples) {
    out += to_json(s).dump();
    out += '\n';
  }
  return out;
}

inline std::string serialize_schema(const ClassSchema& schema) {
  nlohmann::json j;
  j["classes"] = schema.classes();
  j["synonyms"] = nlohmann::json::object();
  for (const auto& [cls, forms] : schema.synonyms()) j["synonyms"][cls] = forms;
  return j.dump(2) + "\n";
}

// --- selection --------------------------------------------------------------

using SamplePredicate = std::function<bool(const Sample&)>;

inline SamplePredicate any_sample() {
  return [](const Sample&) { return true; };
}
inline SamplePredicate fake_only() {
  return [](const Sample& s) { return s.is_fake(); };
}
inline SamplePredicate real_only() {
  return [](const Sample& s) { return !s.is_fake(); };
}
inline SamplePredicate in_split(Split split) {
  return [split](const Sample& s) { return s.split == split; };
}

struct SelectOptions {
  std::optional<std::size_t> n;  // unset: take all matches
  std::uint64_t seed = 0;
  SamplePredicate predicate = any_sample();
  bool strict = false;  // n > available is an error instead of a warning
};

struct SampleSet {
  std::vector<Sample> samples;
  std::vector<std::string> warnings;
};

/// Filters by predicate, shuffles with a seeded Fisher-Yates, and keeps the
/// first n. Pure in (dataset, n, seed, predicate).
inline SampleSet select_samples(const Dataset& ds, const SelectOptions& opts) {
  SampleSet out;
  for (const auto& s : ds.samples)
    if (opts.predicate(s)) out.samples.push_back(s);
  stable_shuffle(out.samples, opts.seed);
  if (opts.n) {
    if (*opts.n > out.samples.size()) {
      std::string msg = "requested " + std::to_string(*opts.n) + " samples but only " +
                        std::to_string(out.samples.size()) + " match";
      if (opts.strict) throw Error(ErrorKind::data, msg);
      out.warnings.push_back(msg + "; using all");
    } else {
      out.samples.resize(*opts.n);
    }
  }
  return out;
}

}  // namespace dfvqa
