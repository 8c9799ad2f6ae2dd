#pragma once

// Count-based observational and backdoor-adjusted probability estimates over
// discrete event variables.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace causalvln::stats {

/// Variable name -> category.
using Assignment = std::map<std::string, std::string>;

struct EventRecord {
  std::string id;
  Assignment vars;
};

/// A record that does not conform to the table schema.
class RecordError : public std::invalid_argument {
 public:
  RecordError(const std::string& record_id, const std::string& what)
      : std::invalid_argument("record '" + record_id + "': " + what), record_id_(record_id) {}
  const std::string& record_id() const { return record_id_; }

 private:
  std::string record_id_;
};

/// Conditioning event has zero count.
class NoSupportError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class Schema {
 public:
  void add_variable(const std::string& name, std::vector<std::string> categories) {
    if (index_.count(name)) throw std::invalid_argument("duplicate variable '" + name + "'");
    if (categories.empty()) throw std::invalid_argument("variable '" + name + "' has no categories");
    std::map<std::string, int> cats;
    for (std::size_t i = 0; i < categories.size(); ++i)
      if (!cats.emplace(categories[i], static_cast<int>(i)).second)
        throw std::invalid_argument("duplicate category '" + categories[i] + "' for '" + name + "'");
    index_.emplace(name, names_.size());
    names_.push_back(name);
    categories_.push_back(std::move(categories));
    category_index_.push_back(std::move(cats));
  }

  /// Variables and categories observed in `records`, categories sorted.
  static Schema infer(const std::vector<EventRecord>& records) {
    std::map<std::string, std::vector<std::string>> seen;
    for (const auto& r : records)
      for (const auto& [var, cat] : r.vars) {
        auto& cats = seen[var];
        if (std::find(cats.begin(), cats.end(), cat) == cats.end()) cats.push_back(cat);
      }
    Schema s;
    for (auto& [var, cats] : seen) {
      std::sort(cats.begin(), cats.end());
      s.add_variable(var, cats);
    }
    return s;
  }

  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& variables() const { return names_; }
  const std::vector<std::string>& categories(std::size_t var) const { return categories_[var]; }
  const std::vector<std::string>& categories(const std::string& var) const { return categories_[var_index(var)]; }
  bool has_variable(const std::string& name) const { return index_.count(name) > 0; }

  std::size_t var_index(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("unknown variable '" + name + "'");
    return it->second;
  }

  std::optional<int> category_index(std::size_t var, const std::string& cat) const {
    auto it = category_index_[var].find(cat);
    if (it == category_index_[var].end()) return std::nullopt;
    return it->second;
  }

 private:
  std::vector<std::string> names_;
  std::vector<std::vector<std::string>> categories_;
  std::vector<std::map<std::string, int>> category_index_;
  std::map<std::string, std::size_t> index_;
};

/// Exact joint counts over full assignments of the schema variables.
class CooccurrenceTable {
 public:
  explicit CooccurrenceTable(Schema schema) : schema_(std::move(schema)) {}

  const Schema& schema() const { return schema_; }
  std::uint64_t total() const { return total_; }
  const std::map<std::vector<int>, std::uint64_t>& counts() const { return counts_; }

  /// Adds one record. Every schema variable must be assigned, and only those.
  void ingest(const EventRecord& r) {
    std::vector<int> key(schema_.size(), -1);
    for (const auto& [var, cat] : r.vars) {
      if (!schema_.has_variable(var)) throw RecordError(r.id, "unknown variable '" + var + "'");
      const std::size_t vi = schema_.var_index(var);
      auto ci = schema_.category_index(vi, cat);
      if (!ci) throw RecordError(r.id, "unknown category '" + cat + "' for variable '" + var + "'");
      key[vi] = *ci;
    }
    for (std::size_t i = 0; i < key.size(); ++i)
      if (key[i] < 0) throw RecordError(r.id, "variable '" + schema_.variables()[i] + "' not assigned");
    counts_[key] += 1;
    total_ += 1;
  }

  template <class Records>
  void ingest_all(const Records& records) {
    for (const auto& r : records) ingest(r);
  }

  /// Number of records consistent with a partial assignment. Conflicting
  /// constraints on one variable yield zero.
  std::uint64_t count(const Assignment& a) const {
    std::vector<std::pair<std::size_t, int>> constraints;
    for (const auto& [var, cat] : a) {
      const std::size_t vi = schema_.var_index(var);
      auto ci = schema_.category_index(vi, cat);
      if (!ci) throw std::invalid_argument("unknown category '" + cat + "' for variable '" + var + "'");
      constraints.emplace_back(vi, *ci);
    }
    std::uint64_t n = 0;
    for (const auto& [key, c] : counts_) {
      bool ok = true;
      for (const auto& [vi, ci] : constraints)
        if (key[vi] != ci) {
          ok = false;
          break;
        }
      if (ok) n += c;
    }
    return n;
  }

  /// Table with `var` summed out.
  CooccurrenceTable drop(const std::string& var) const {
    const std::size_t vi = schema_.var_index(var);
    Schema s;
    for (std::size_t i = 0; i < schema_.size(); ++i)
      if (i != vi) s.add_variable(schema_.variables()[i], schema_.categories(i));
    CooccurrenceTable out(std::move(s));
    for (const auto& [key, c] : counts_) {
      std::vector<int> k;
      for (std::size_t i = 0; i < key.size(); ++i)
        if (i != vi) k.push_back(key[i]);
      out.counts_[k] += c;
    }
    out.total_ = total_;
    return out;
  }

 private:
  Schema schema_;
  std::map<std::vector<int>, std::uint64_t> counts_;
  std::uint64_t total_ = 0;
};

inline CooccurrenceTable ingest(const Schema& schema, const std::vector<EventRecord>& records) {
  CooccurrenceTable t(schema);
  t.ingest_all(records);
  return t;
}

inline Assignment merge(const Assignment& a, const Assignment& b, bool* conflict = nullptr) {
  Assignment out = a;
  if (conflict) *conflict = false;
  for (const auto& [var, cat] : b) {
    auto [it, inserted] = out.emplace(var, cat);
    if (!inserted && it->second != cat && conflict) *conflict = true;
  }
  return out;
}

inline std::string to_string(const Assignment& a) {
  std::string s;
  for (const auto& [var, cat] : a) {
    if (!s.empty()) s += ';';
    s += var + "=" + cat;
  }
  return s;
}

/// P(Y=y | X=x) = N(x, y) / N(x).
inline double observational(const CooccurrenceTable& t, const Assignment& y, const Assignment& x) {
  const std::uint64_t nx = t.count(x);
  if (nx == 0) throw NoSupportError("no support for conditioning event " + to_string(x));
  bool conflict = false;
  Assignment xy = merge(x, y, &conflict);
  if (conflict) return 0.0;
  return static_cast<double>(t.count(xy)) / static_cast<double>(nx);
}

enum class Support { ok, deficient, none };

inline const char* to_string(Support s) {
  switch (s) {
    case Support::ok: return "ok";
    case Support::deficient: return "deficient";
    case Support::none: return "none";
  }
  return "?";
}

struct InterventionalEstimate {
  double probability = 0.0;
  Support support = Support::ok;  // deficient: some stratum had N(x, z) = 0
};

/// P(Y=y | do(X=x)) = sum_z P(Y=y | X=x, Z=z) P(Z=z), stratified on `z_var`.
/// Strata with N(x, z) = 0 contribute nothing and mark the estimate deficient.
inline InterventionalEstimate interventional(const CooccurrenceTable& t, const Assignment& y, const Assignment& x,
                                             const std::string& z_var) {
  if (x.count(z_var) || y.count(z_var))
    throw std::invalid_argument("stratification variable '" + z_var + "' appears in the query");
  const std::size_t zi = t.schema().var_index(z_var);
  if (t.count(x) == 0) throw NoSupportError("no support for conditioning event " + to_string(x));
  bool conflict = false;
  const Assignment xy = merge(x, y, &conflict);
  InterventionalEstimate est;
  const double total = static_cast<double>(t.total());
  for (const auto& zc : t.schema().categories(zi)) {
    Assignment xz = x;
    xz[z_var] = zc;
    const std::uint64_t nxz = t.count(xz);
    if (nxz == 0) {
      if (t.count({{z_var, zc}}) > 0) est.support = Support::deficient;
      continue;
    }
    if (conflict) continue;
    Assignment xyz = xy;
    xyz[z_var] = zc;
    const double pz = static_cast<double>(t.count({{z_var, zc}})) / total;
    est.probability += static_cast<double>(t.count(xyz)) / static_cast<double>(nxz) * pz;
  }
  return est;
}

/// p(z_k) = N_k / sum_j N_j over the categories of `z_var`.
inline std::vector<double> prior(const CooccurrenceTable& t, const std::string& z_var) {
  if (t.total() == 0) throw NoSupportError("prior of an empty table");
  const std::size_t zi = t.schema().var_index(z_var);
  std::vector<double> p;
  for (const auto& zc : t.schema().categories(zi))
    p.push_back(static_cast<double>(t.count({{z_var, zc}})) / static_cast<double>(t.total()));
  return p;
}

struct ShiftRow {
  Assignment x;
  Assignment y;
  std::optional<double> p_obs;
  std::optional<double> p_do;
  double delta = 0.0;  // p_do - p_obs
  Support support = Support::ok;
};

/// Both estimators per (x, y) pair, sorted by |delta| descending. Pairs
/// without support become rows flagged `none`.
inline std::vector<ShiftRow> shift_report(const CooccurrenceTable& t,
                                          const std::vector<std::pair<Assignment, Assignment>>& pairs,
                                          const std::string& z_var) {
  std::vector<ShiftRow> rows;
  for (const auto& [x, y] : pairs) {
    ShiftRow r{x, y, std::nullopt, std::nullopt, 0.0, Support::none};
    try {
      r.p_obs = observational(t, y, x);
      const auto est = interventional(t, y, x, z_var);
      r.p_do = est.probability;
      r.support = est.support;
      r.delta = *r.p_do - *r.p_obs;
    } catch (const NoSupportError&) {
      r.p_obs.reset();
      r.p_do.reset();
      r.support = Support::none;
    }
    rows.push_back(std::move(r));
  }
  std::stable_sort(rows.begin(), rows.end(),
                   [](const ShiftRow& a, const ShiftRow& b) { return std::abs(a.delta) > std::abs(b.delta); });
  return rows;
}

inline void write_shift_csv(std::ostream& os, const std::vector<ShiftRow>& rows) {
  os << "x,y,p_obs,p_do,delta,support\n";
  auto num = [](const std::optional<double>& v) {
    if (!v) return std::string("nan");
    std::ostringstream s;
    s << std::setprecision(17) << *v;
    return s.str();
  };
  for (const auto& r : rows)
    os << to_string(r.x) << ',' << to_string(r.y) << ',' << num(r.p_obs) << ',' << num(r.p_do) << ','
       << (r.p_obs ? num(r.delta) : std::string("nan")) << ',' << to_string(r.support) << '\n';
}

// ---------------------------------------------------------------------------
// JSONL: {"id": string, "vars": {name: category}}

inline nlohmann::json to_json(const EventRecord& r) {
  nlohmann::json vars = nlohmann::json::object();
  for (const auto& [k, v] : r.vars) vars[k] = v;
  return {{"id", r.id}, {"vars", vars}};
}

inline EventRecord event_record_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("id") || !j.contains("vars") || !j["vars"].is_object())
    throw std::invalid_argument("event record must be an object with 'id' and 'vars'");
  EventRecord r;
  r.id = j["id"].is_string() ? j["id"].get<std::string>() : j["id"].dump();
  for (const auto& [k, v] : j["vars"].items()) r.vars[k] = v.is_string() ? v.get<std::string>() : v.dump();
  return r;
}

inline std::vector<EventRecord> read_jsonl(std::istream& is) {
  std::vector<EventRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(event_record_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw std::invalid_argument("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline void write_jsonl(std::ostream& os, const std::vector<EventRecord>& records) {
  for (const auto& r : records) os << to_json(r).dump() << '\n';
}

/// Parses "X=1" or "X=1;W=0" into an assignment.
inline Assignment parse_assignment(const std::string& text) {
  Assignment a;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ';')) {
    if (part.empty()) continue;
    const auto eq = part.find('=');
    if (eq == std::string::npos || eq == 0) throw std::invalid_argument("malformed assignment '" + part + "'");
    a[part.substr(0, eq)] = part.substr(eq + 1);
  }
  if (a.empty()) throw std::invalid_argument("empty assignment '" + text + "'");
  return a;
}

}  // namespace causalvln::stats
