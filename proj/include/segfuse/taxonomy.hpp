#pragma once

// Label-vocabulary merging. A main dataset keeps its classes verbatim; every
// supplemental class carries a human-authored relation to the unified set:
//
//   subset_of X  -> relabel to X's unified id
//   disjoint     -> append as a new unified class
//   overlaps     -> standard: relabel to the ignore id
//                   thrifty:  append as a new class and mark it as a conflict
//
// Unified ids are dense: main classes in file order, then appended classes in
// merge order.

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "segfuse/error.hpp"
#include "segfuse/image.hpp"

namespace segfuse::taxonomy {

// Case-insensitive, whitespace-trimmed key used for every class-name lookup.
inline std::string normalize_name(std::string_view s) {
  auto is_space = [](char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; };
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

struct ClassEntry {
  std::string name;
  std::uint8_t id = 0;
};

struct ClassSet {
  std::string dataset;
  std::vector<ClassEntry> classes;

  void validate() const {
    std::vector<bool> seen_id(256, false);
    std::vector<std::string> names;
    for (const auto& c : classes) {
      if (c.id == kIgnoreId) throw DataError(dataset + ": class '" + c.name + "' uses the reserved ignore id 255");
      if (seen_id[c.id]) throw DataError(dataset + ": duplicate native id " + std::to_string(c.id));
      seen_id[c.id] = true;
      const std::string key = normalize_name(c.name);
      if (key.empty()) throw DataError(dataset + ": empty class name for id " + std::to_string(c.id));
      if (std::find(names.begin(), names.end(), key) != names.end()) {
        throw DataError(dataset + ": duplicate class name '" + c.name + "'");
      }
      names.push_back(key);
    }
  }

  const ClassEntry* find(std::string_view name) const {
    const std::string key = normalize_name(name);
    for (const auto& c : classes) {
      if (normalize_name(c.name) == key) return &c;
    }
    return nullptr;
  }
};

enum class RelationKind { subset_of, disjoint, overlaps };

struct Relation {
  RelationKind kind = RelationKind::disjoint;
  std::string target;  // subset_of only
};

// Declarations for one supplemental dataset, keyed by normalized class name.
struct RelationDecl {
  std::map<std::string, Relation> by_class;

  void set(std::string_view class_name, Relation r) { by_class[normalize_name(class_name)] = std::move(r); }
  const Relation* find(std::string_view class_name) const {
    auto it = by_class.find(normalize_name(class_name));
    return it == by_class.end() ? nullptr : &it->second;
  }
};

inline Relation subset_of(std::string target) { return Relation{RelationKind::subset_of, std::move(target)}; }
inline Relation disjoint() { return Relation{RelationKind::disjoint, {}}; }
inline Relation overlaps() { return Relation{RelationKind::overlaps, {}}; }

struct Supplement {
  ClassSet classes;
  RelationDecl relations;
};

struct UnifiedClass {
  std::string name;
  std::vector<std::string> sources;  // datasets contributing pixels, merge order
};

struct UnifiedTaxonomy {
  std::vector<UnifiedClass> classes;
  std::vector<std::size_t> conflict_indices;  // sorted

  std::size_t size() const { return classes.size(); }

  std::optional<std::size_t> find(std::string_view name) const {
    const std::string key = normalize_name(name);
    for (std::size_t i = 0; i < classes.size(); ++i) {
      if (normalize_name(classes[i].name) == key) return i;
    }
    return std::nullopt;
  }

  bool is_conflict(std::size_t id) const {
    return std::binary_search(conflict_indices.begin(), conflict_indices.end(), id);
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& c : classes) out.push_back(c.name);
    return out;
  }
};

// Total map from one dataset's native ids to unified ids or the ignore id.
class RelabelMap {
 public:
  RelabelMap() { table_.fill(kUnmapped); }
  explicit RelabelMap(std::string dataset) : dataset_(std::move(dataset)) { table_.fill(kUnmapped); }

  const std::string& dataset() const { return dataset_; }

  void set(std::uint8_t native, std::uint8_t unified) { table_[native] = unified; }
  bool contains(std::uint8_t native) const { return table_[native] != kUnmapped; }
  std::uint8_t operator[](std::uint8_t native) const {
    if (!contains(native)) throw DataError(dataset_ + ": native id " + std::to_string(native) + " is not mapped");
    return static_cast<std::uint8_t>(table_[native]);
  }

  // (native, unified) pairs in native-id order.
  std::vector<std::pair<std::uint8_t, std::uint8_t>> entries() const {
    std::vector<std::pair<std::uint8_t, std::uint8_t>> out;
    for (std::size_t i = 0; i < table_.size(); ++i) {
      if (table_[i] != kUnmapped) out.emplace_back(static_cast<std::uint8_t>(i), static_cast<std::uint8_t>(table_[i]));
    }
    return out;
  }

  static RelabelMap identity(std::string dataset, std::size_t n) {
    RelabelMap m(std::move(dataset));
    for (std::size_t i = 0; i < n; ++i) m.set(static_cast<std::uint8_t>(i), static_cast<std::uint8_t>(i));
    return m;
  }

  bool operator==(const RelabelMap& o) const { return table_ == o.table_; }

 private:
  static constexpr std::int16_t kUnmapped = -1;
  std::string dataset_;
  std::array<std::int16_t, 256> table_{};
};

enum class Method { standard, thrifty };

inline std::string to_string(Method m) { return m == Method::standard ? "standard" : "thrifty"; }

inline Method parse_method(std::string_view s) {
  if (s == "standard") return Method::standard;
  if (s == "thrifty") return Method::thrifty;
  throw UsageError("relabel method must be 'standard' or 'thrifty', got '" + std::string(s) + "'");
}

// One row per dataset in merge order (main first).
struct GrowthRow {
  std::string dataset;
  std::size_t native_classes = 0;
  std::vector<std::string> merged;     // subset_of (or the main set itself)
  std::vector<std::string> added;      // disjoint
  std::vector<std::string> conflicts;  // overlaps: ignored (standard) or added as conflicts (thrifty)
  std::size_t total_after = 0;
};

struct MergeResult {
  Method method = Method::standard;
  UnifiedTaxonomy taxonomy;
  std::vector<RelabelMap> maps;  // main first, then supplements in order
  std::vector<GrowthRow> growth;

  const RelabelMap& map_for(std::string_view dataset) const {
    for (const auto& m : maps) {
      if (m.dataset() == dataset) return m;
    }
    throw DataError("no relabel map for dataset '" + std::string(dataset) + "'");
  }
};

namespace detail {

inline std::uint8_t checked_id(std::size_t id) {
  if (id >= kIgnoreId) throw DataError("unified taxonomy exceeds 255 classes");
  return static_cast<std::uint8_t>(id);
}

inline void append_class(UnifiedTaxonomy& tax, const std::string& name, const std::string& dataset) {
  if (tax.find(name)) {
    throw DataError(dataset + ": new class '" + name + "' duplicates an existing unified class");
  }
  checked_id(tax.size());
  tax.classes.push_back(UnifiedClass{name, {dataset}});
}

}  // namespace detail

inline MergeResult merge(const ClassSet& main, std::span<const Supplement> supplements, Method method) {
  main.validate();
  MergeResult r;
  r.method = method;
  RelabelMap main_map(main.dataset);
  GrowthRow main_row{main.dataset, main.classes.size(), {}, {}, {}, 0};
  for (const auto& c : main.classes) {
    detail::append_class(r.taxonomy, c.name, main.dataset);
    main_map.set(c.id, detail::checked_id(r.taxonomy.size() - 1));
    main_row.merged.push_back(c.name);
  }
  main_row.total_after = r.taxonomy.size();
  r.maps.push_back(std::move(main_map));
  r.growth.push_back(std::move(main_row));

  for (const auto& sup : supplements) {
    const ClassSet& cs = sup.classes;
    cs.validate();
    for (const auto& [key, rel] : sup.relations.by_class) {
      if (!cs.find(key)) throw DataError(cs.dataset + ": relation declared for unknown class '" + key + "'");
    }
    RelabelMap map(cs.dataset);
    GrowthRow row{cs.dataset, cs.classes.size(), {}, {}, {}, 0};
    for (const auto& c : cs.classes) {
      const Relation* rel = sup.relations.find(c.name);
      if (!rel) throw DataError(cs.dataset + ": class '" + c.name + "' has no relation declaration");
      switch (rel->kind) {
        case RelationKind::subset_of: {
          auto target = r.taxonomy.find(rel->target);
          if (!target) {
            throw DataError(cs.dataset + ": class '" + c.name + "' is declared subset_of unknown class '" +
                            rel->target + "'");
          }
          if (r.taxonomy.is_conflict(*target)) {
            throw DataError(cs.dataset + ": class '" + c.name + "' cannot be a subset of conflict class '" +
                            rel->target + "'");
          }
          auto& sources = r.taxonomy.classes[*target].sources;
          if (std::find(sources.begin(), sources.end(), cs.dataset) == sources.end()) sources.push_back(cs.dataset);
          map.set(c.id, static_cast<std::uint8_t>(*target));
          row.merged.push_back(c.name);
          break;
        }
        case RelationKind::disjoint:
          detail::append_class(r.taxonomy, c.name, cs.dataset);
          map.set(c.id, static_cast<std::uint8_t>(r.taxonomy.size() - 1));
          row.added.push_back(c.name);
          break;
        case RelationKind::overlaps:
          if (method == Method::standard) {
            map.set(c.id, kIgnoreId);
          } else {
            detail::append_class(r.taxonomy, c.name, cs.dataset);
            r.taxonomy.conflict_indices.push_back(r.taxonomy.size() - 1);
            map.set(c.id, static_cast<std::uint8_t>(r.taxonomy.size() - 1));
          }
          row.conflicts.push_back(c.name);
          break;
      }
    }
    row.total_after = r.taxonomy.size();
    r.maps.push_back(std::move(map));
    r.growth.push_back(std::move(row));
  }
  return r;
}

inline MergeResult merge_standard(const ClassSet& main, std::span<const Supplement> supplements) {
  return merge(main, supplements, Method::standard);
}

inline MergeResult merge_thrifty(const ClassSet& main, std::span<const Supplement> supplements) {
  return merge(main, supplements, Method::thrifty);
}

inline LabelMap relabel_image(const LabelMap& label, const RelabelMap& map) {
  std::array<std::size_t, 256> unmapped{};
  LabelMap out(label.height(), label.width(), label.channels());
  for (std::size_t i = 0; i < label.size(); ++i) {
    const std::uint8_t v = label.data()[i];
    if (v == kIgnoreId) {
      out.data()[i] = kIgnoreId;
    } else if (map.contains(v)) {
      out.data()[i] = map[v];
    } else {
      ++unmapped[v];
    }
  }
  for (std::size_t v = 0; v < unmapped.size(); ++v) {
    if (unmapped[v] != 0) {
      throw DataError(map.dataset() + ": label value " + std::to_string(v) + " is not in the relabel map (" +
                      std::to_string(unmapped[v]) + " pixels)");
    }
  }
  return out;
}

// Table-style class growth summary, one line per dataset.
inline std::string class_count_report(const MergeResult& r) {
  auto join = [](const std::vector<std::string>& v) {
    if (v.empty()) return std::string("(none)");
    std::string s;
    for (const auto& x : v) s += (s.empty() ? "" : ", ") + x;
    return s;
  };
  std::ostringstream out;
  out << "method: " << to_string(r.method) << "\n";
  out << "dataset\tnative\tadded\tconflict\ttotal\tnew classes\tconflict classes\n";
  for (std::size_t i = 0; i < r.growth.size(); ++i) {
    const auto& g = r.growth[i];
    const std::size_t added = i == 0 ? g.total_after : g.added.size();
    const std::size_t conflict_added = r.method == Method::thrifty ? g.conflicts.size() : 0;
    out << g.dataset << "\t" << g.native_classes << "\t+" << added + conflict_added << "\t" << g.conflicts.size()
        << "\t" << g.total_after << "\t" << (i == 0 ? join(g.merged) : join(g.added)) << "\t" << join(g.conflicts)
        << "\n";
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Files

// `id<TAB>name` per line; blank lines and '#' comments are skipped.
inline ClassSet read_class_set(std::istream& in, std::string dataset) {
  ClassSet cs{std::move(dataset), {}};
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (normalize_name(line).empty() || normalize_name(line)[0] == '#') continue;
    const auto tab = line.find('\t');
    auto fail = [&](const std::string& why) {
      return DataError(cs.dataset + " class set, line " + std::to_string(lineno) + ": " + why);
    };
    if (tab == std::string::npos) throw fail("expected 'id<TAB>name'");
    int id = -1;
    try {
      std::size_t used = 0;
      id = std::stoi(line.substr(0, tab), &used);
      if (used != tab) id = -1;
    } catch (const std::exception&) {
      id = -1;
    }
    if (id < 0 || id > 255) throw fail("bad class id '" + line.substr(0, tab) + "'");
    std::string name = line.substr(tab + 1);
    while (!name.empty() && std::isspace(static_cast<unsigned char>(name.back()))) name.pop_back();
    while (!name.empty() && std::isspace(static_cast<unsigned char>(name.front()))) name.erase(name.begin());
    cs.classes.push_back(ClassEntry{name, static_cast<std::uint8_t>(id)});
  }
  cs.validate();
  return cs;
}

inline ClassSet load_class_set(const std::string& path, std::string dataset) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open class set " + path);
  return read_class_set(in, std::move(dataset));
}

inline void write_class_set(std::ostream& out, const ClassSet& cs) {
  for (const auto& c : cs.classes) out << static_cast<int>(c.id) << "\t" << c.name << "\n";
}

// {"<dataset>": {"<class>": "disjoint" | "overlaps" | {"subset_of": "<class>"}}}
inline std::map<std::string, RelationDecl> relations_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw DataError("relations: expected an object keyed by dataset name");
  std::map<std::string, RelationDecl> out;
  for (const auto& [dataset, classes] : j.items()) {
    if (!classes.is_object()) throw DataError("relations for " + dataset + ": expected an object keyed by class");
    RelationDecl decl;
    for (const auto& [cls, v] : classes.items()) {
      if (decl.find(cls)) throw DataError("relations for " + dataset + ": class '" + cls + "' declared twice");
      if (v.is_string() && v.get<std::string>() == "disjoint") {
        decl.set(cls, disjoint());
      } else if (v.is_string() && v.get<std::string>() == "overlaps") {
        decl.set(cls, overlaps());
      } else if (v.is_object() && v.size() == 1 && v.contains("subset_of") && v["subset_of"].is_string()) {
        decl.set(cls, subset_of(v["subset_of"].get<std::string>()));
      } else {
        throw DataError("relations for " + dataset + ", class '" + cls +
                        "': expected \"disjoint\", \"overlaps\" or {\"subset_of\": <class>}");
      }
    }
    out.emplace(dataset, std::move(decl));
  }
  return out;
}

inline std::map<std::string, RelationDecl> load_relations(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open relations file " + path);
  try {
    return relations_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
}

// `dataset<TAB>native_id<TAB>unified_id|IGNORE`
inline void write_relabel_maps(std::ostream& out, std::span<const RelabelMap> maps) {
  for (const auto& m : maps) {
    for (const auto& [native, unified] : m.entries()) {
      out << m.dataset() << "\t" << static_cast<int>(native) << "\t";
      if (unified == kIgnoreId) {
        out << "IGNORE";
      } else {
        out << static_cast<int>(unified);
      }
      out << "\n";
    }
  }
}

inline std::vector<RelabelMap> read_relabel_maps(std::istream& in) {
  std::vector<RelabelMap> maps;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string dataset, native, unified;
    if (!std::getline(fields, dataset, '\t') || !std::getline(fields, native, '\t') ||
        !std::getline(fields, unified)) {
      throw DataError("relabel map line " + std::to_string(lineno) + ": expected three tab-separated fields");
    }
    if (maps.empty() || maps.back().dataset() != dataset) maps.emplace_back(dataset);
    try {
      const int n = std::stoi(native);
      const int u = unified == "IGNORE" ? kIgnoreId : std::stoi(unified);
      if (n < 0 || n >= kIgnoreId || u < 0 || u > kIgnoreId) throw std::out_of_range("id");
      maps.back().set(static_cast<std::uint8_t>(n), static_cast<std::uint8_t>(u));
    } catch (const std::exception&) {
      throw DataError("relabel map line " + std::to_string(lineno) + ": bad id");
    }
  }
  return maps;
}

// `id<TAB>name<TAB>conflict|-<TAB>source,source...`
inline void write_taxonomy(std::ostream& out, const UnifiedTaxonomy& tax) {
  for (std::size_t i = 0; i < tax.size(); ++i) {
    std::string sources;
    for (const auto& s : tax.classes[i].sources) sources += (sources.empty() ? "" : ",") + s;
    out << i << "\t" << tax.classes[i].name << "\t" << (tax.is_conflict(i) ? "conflict" : "-") << "\t" << sources
        << "\n";
  }
}

inline UnifiedTaxonomy read_taxonomy(std::istream& in) {
  UnifiedTaxonomy tax;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string id, name, flag, sources;
    std::getline(fields, id, '\t');
    std::getline(fields, name, '\t');
    std::getline(fields, flag, '\t');
    std::getline(fields, sources);
    if (id != std::to_string(tax.size()) || name.empty() || (flag != "conflict" && flag != "-")) {
      throw DataError("taxonomy line " + std::to_string(lineno) + ": expected 'id<TAB>name<TAB>conflict|-<TAB>sources'");
    }
    UnifiedClass c{name, {}};
    std::istringstream src(sources);
    for (std::string s; std::getline(src, s, ',');) c.sources.push_back(s);
    if (flag == "conflict") tax.conflict_indices.push_back(tax.size());
    tax.classes.push_back(std::move(c));
  }
  return tax;
}

}  // namespace segfuse::taxonomy
