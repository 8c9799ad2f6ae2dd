#pragma once

// Per-class mean feature dictionaries with priors, and the policies deciding
// when they are re-estimated from the current encoder.

#include <cstdint>
#include <cstdlib>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "causalvln/diffcore/rng.hpp"
#include "causalvln/diffcore/tensor.hpp"

namespace causalvln::dict {

enum class Family { object, room, direction, landmark };

inline const char* to_string(Family f) {
  switch (f) {
    case Family::object: return "object";
    case Family::room: return "room";
    case Family::direction: return "direction";
    case Family::landmark: return "landmark";
  }
  return "?";
}

inline Family family_from_string(const std::string& s) {
  for (Family f : {Family::object, Family::room, Family::direction, Family::landmark})
    if (s == to_string(f)) return f;
  throw std::invalid_argument("unknown dictionary family '" + s + "'");
}

struct Entry {
  int class_id = 0;
  std::vector<double> mean;
  std::uint64_t count = 0;
  double prior = 0.0;

  bool operator==(const Entry&) const = default;
};

struct Sample {
  int class_id;
  std::vector<double> feature;
};

class ConfounderDictionary {
 public:
  ConfounderDictionary() = default;
  ConfounderDictionary(Family family, std::size_t dim, std::vector<Entry> entries)
      : family_(family), dim_(dim), entries_(std::move(entries)) {}

  Family family() const { return family_; }
  std::size_t dim() const { return dim_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }

  /// K x dim stacked means.
  Tensor means() const {
    if (entries_.empty()) throw std::invalid_argument(std::string(to_string(family_)) + " dictionary is empty");
    Tensor z(entries_.size(), dim_);
    for (std::size_t k = 0; k < entries_.size(); ++k)
      for (std::size_t j = 0; j < dim_; ++j) z(k, j) = entries_[k].mean[j];
    return z;
  }

  /// 1 x K priors.
  Tensor priors() const {
    if (entries_.empty()) throw std::invalid_argument(std::string(to_string(family_)) + " dictionary is empty");
    Tensor p(1, entries_.size());
    for (std::size_t k = 0; k < entries_.size(); ++k) p[k] = entries_[k].prior;
    return p;
  }

  const Entry* find(int class_id) const {
    for (const auto& e : entries_)
      if (e.class_id == class_id) return &e;
    return nullptr;
  }

  bool operator==(const ConfounderDictionary&) const = default;

 private:
  Family family_ = Family::object;
  std::size_t dim_ = 0;
  std::vector<Entry> entries_;
};

class DictionaryDimensionError : public std::invalid_argument {
 public:
  DictionaryDimensionError(int class_id, std::size_t got, std::size_t want)
      : std::invalid_argument("class " + std::to_string(class_id) + ": feature dimension " + std::to_string(got) +
                              ", expected " + std::to_string(want)),
        class_id_(class_id) {}
  int class_id() const { return class_id_; }

 private:
  int class_id_;
};

namespace detail {

struct Accum {
  std::vector<double> sum;
  std::uint64_t count = 0;
};

inline void accumulate(std::map<int, Accum>& acc, std::size_t& dim, int class_id, const std::vector<double>& f) {
  if (dim == 0) {
    if (f.empty()) throw DictionaryDimensionError(class_id, 0, 1);
    dim = f.size();
  }
  if (f.size() != dim) throw DictionaryDimensionError(class_id, f.size(), dim);
  auto& a = acc[class_id];
  if (a.sum.empty()) a.sum.assign(dim, 0.0);
  for (std::size_t j = 0; j < dim; ++j) a.sum[j] += f[j];
  a.count += 1;
}

}  // namespace detail

/// One entry per observed class: the mean feature, the count and N_k / sum N_j.
/// Entries are ordered by class id.
inline ConfounderDictionary build(const std::vector<Sample>& samples, Family family) {
  if (samples.empty()) throw std::invalid_argument("cannot build a dictionary from zero samples");
  std::map<int, detail::Accum> acc;
  std::size_t dim = 0;
  for (const auto& s : samples) detail::accumulate(acc, dim, s.class_id, s.feature);
  std::vector<Entry> entries;
  const double total = static_cast<double>(samples.size());
  for (auto& [cls, a] : acc) {
    Entry e{cls, std::move(a.sum), a.count, static_cast<double>(a.count) / total};
    for (double& v : e.mean) v /= static_cast<double>(a.count);
    entries.push_back(std::move(e));
  }
  return ConfounderDictionary(family, dim, std::move(entries));
}

struct RefreshResult {
  ConfounderDictionary dictionary;
  std::vector<std::string> warnings;
};

/// Replaces every mean with the average encoder output over that class's
/// dataset items. Counts and priors are kept. Classes missing from the dataset
/// keep their stale mean and produce a warning.
template <class Item, class Encoder>
RefreshResult refresh(const ConfounderDictionary& d, const std::vector<std::pair<int, Item>>& dataset,
                      Encoder&& encoder) {
  std::map<int, detail::Accum> acc;
  std::size_t dim = d.dim();
  for (const auto& [cls, item] : dataset) {
    if (!d.find(cls)) continue;
    const std::vector<double> f = encoder(item);
    detail::accumulate(acc, dim, cls, f);
  }
  RefreshResult r{d, {}};
  for (auto& e : r.dictionary.entries()) {
    auto it = acc.find(e.class_id);
    if (it == acc.end()) {
      r.warnings.push_back(std::string(to_string(d.family())) + " class " + std::to_string(e.class_id) +
                           " absent from refresh data; keeping stale entry");
      continue;
    }
    e.mean = it->second.sum;
    for (double& v : e.mean) v /= static_cast<double>(it->second.count);
  }
  return r;
}

/// Same classes, counts and priors with N(0, stddev^2) means.
inline ConfounderDictionary randomized(const ConfounderDictionary& d, Rng& rng, double stddev = 1.0) {
  ConfounderDictionary out = d;
  for (auto& e : out.entries())
    for (double& v : e.mean) v = rng.normal() * stddev;
  return out;
}

// ---------------------------------------------------------------------------
// Update policy

enum class UpdateMode { random, precomputed, schedule, best, best_schedule };

inline const char* to_string(UpdateMode m) {
  switch (m) {
    case UpdateMode::random: return "random";
    case UpdateMode::precomputed: return "precomputed";
    case UpdateMode::schedule: return "schedule";
    case UpdateMode::best: return "best";
    case UpdateMode::best_schedule: return "best+schedule";
  }
  return "?";
}

inline UpdateMode update_mode_from_string(const std::string& s) {
  for (UpdateMode m : {UpdateMode::random, UpdateMode::precomputed, UpdateMode::schedule, UpdateMode::best,
                       UpdateMode::best_schedule})
    if (s == to_string(m)) return m;
  throw std::invalid_argument("unknown update policy '" + s + "'");
}

struct UpdatePolicy {
  UpdateMode mode = UpdateMode::best_schedule;
  std::uint64_t period = 3000;
  std::string metric = "val_unseen_spl";

  void validate() const {
    if ((mode == UpdateMode::schedule || mode == UpdateMode::best_schedule) && period == 0)
      throw std::invalid_argument("schedule period must be positive");
  }
};

struct MetricPoint {
  std::uint64_t iteration;
  double value;
};

/// True when the newest entry was recorded at `iteration` and strictly beats
/// every earlier entry. The first entry counts as an improvement.
inline bool improved_at(std::uint64_t iteration, const std::vector<MetricPoint>& history) {
  if (history.empty() || history.back().iteration != iteration) return false;
  for (std::size_t i = 0; i + 1 < history.size(); ++i)
    if (!(history.back().value > history[i].value)) return false;
  return true;
}

inline bool should_refresh(const UpdatePolicy& policy, std::uint64_t iteration,
                           const std::vector<MetricPoint>& history) {
  const bool on_schedule = policy.period > 0 && iteration > 0 && iteration % policy.period == 0;
  switch (policy.mode) {
    case UpdateMode::random:
    case UpdateMode::precomputed: return false;
    case UpdateMode::schedule: return on_schedule;
    case UpdateMode::best: return improved_at(iteration, history);
    case UpdateMode::best_schedule: return on_schedule || improved_at(iteration, history);
  }
  return false;
}

// ---------------------------------------------------------------------------
// Serialization. Reals are stored as hex-float strings so round trips are exact.

inline std::string hex_double(double v) {
  std::ostringstream os;
  os << std::hexfloat << v;
  return os.str();
}

inline double parse_hex_double(const nlohmann::json& j) {
  if (j.is_number()) return j.get<double>();
  const std::string s = j.get<std::string>();
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0') throw std::invalid_argument("malformed real '" + s + "'");
  return v;
}

inline nlohmann::json to_json(const ConfounderDictionary& d) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : d.entries()) {
    nlohmann::json mean = nlohmann::json::array();
    for (double v : e.mean) mean.push_back(hex_double(v));
    entries.push_back({{"class", e.class_id}, {"count", e.count}, {"prior", hex_double(e.prior)}, {"mean", mean}});
  }
  return {{"family", to_string(d.family())}, {"dim", d.dim()}, {"entries", entries}};
}

inline ConfounderDictionary dictionary_from_json(const nlohmann::json& j) {
  const Family family = family_from_string(j.at("family").get<std::string>());
  const std::size_t dim = j.at("dim").get<std::size_t>();
  std::vector<Entry> entries;
  for (const auto& je : j.at("entries")) {
    Entry e;
    e.class_id = je.at("class").get<int>();
    e.count = je.at("count").get<std::uint64_t>();
    e.prior = parse_hex_double(je.at("prior"));
    for (const auto& v : je.at("mean")) e.mean.push_back(parse_hex_double(v));
    if (e.mean.size() != dim) throw DictionaryDimensionError(e.class_id, e.mean.size(), dim);
    entries.push_back(std::move(e));
  }
  return ConfounderDictionary(family, dim, std::move(entries));
}

}  // namespace causalvln::dict
