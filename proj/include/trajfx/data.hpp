#pragma once

// Synthetic Gaussian-mixture datasets with a controllable external shift.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "trajfx/common.hpp"
#include "trajfx/error.hpp"
#include "trajfx/feature_cache.hpp"
#include "trajfx/rng.hpp"

namespace trajfx {

struct MixtureComponent {
  double weight = 1.0;
  Vec mean;
  double sigma = 1.0;

  friend bool operator==(const MixtureComponent&, const MixtureComponent&) = default;
};

/// External samples draw from the same mixture with every mean coordinate
/// offset by `shift` and every sigma multiplied by `scale`.
struct MixtureSpec {
  int dim = 2;
  std::vector<MixtureComponent> components;
  double shift = 0.0;
  double scale = 1.0;

  void validate() const {
    if (dim < 1) throw ParameterError("mixture dim must be >= 1");
    if (components.empty()) throw ParameterError("mixture has no components");
    double total = 0.0;
    for (const auto& c : components) {
      if (!(c.weight > 0.0)) throw ParameterError("mixture weights must be positive");
      if (!(c.sigma > 0.0)) throw ParameterError("mixture sigma must be positive");
      if (c.mean.size() != static_cast<std::size_t>(dim)) throw ParameterError("component mean has wrong dimension");
      total += c.weight;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ParameterError("mixture weights must sum to 1");
    if (!(scale > 0.0)) throw ParameterError("external scale must be positive");
  }

  friend bool operator==(const MixtureSpec&, const MixtureSpec&) = default;
};

/// Top bits of a sample id name the split it was generated for.
enum class Split : std::uint64_t {
  kMember = 1,
  kHoldout = 2,
  kExternal = 3,
  kBelonging = 4,
  kForeignDdim = 5,
  kForeignNet = 6,
};

inline std::uint64_t make_sample_id(Split s, std::uint64_t index) {
  return (static_cast<std::uint64_t>(s) << 40) | index;
}

inline Split split_of(std::uint64_t id) { return static_cast<Split>(id >> 40); }

struct LabeledSet {
  std::string name;
  std::vector<std::uint64_t> ids;
  std::vector<Vec> xs;
  std::vector<int> components;  // -1 when unknown (generated samples)

  std::size_t size() const noexcept { return xs.size(); }

  void push(std::uint64_t id, Vec x, int component) {
    ids.push_back(id);
    xs.push_back(std::move(x));
    components.push_back(component);
  }

  /// Elements [lo, hi) as a new set.
  LabeledSet slice(std::size_t lo, std::size_t hi, std::string new_name) const {
    LabeledSet s;
    s.name = std::move(new_name);
    for (std::size_t i = lo; i < hi && i < size(); ++i) s.push(ids[i], xs[i], components[i]);
    return s;
  }
};

inline LabeledSet concat(const LabeledSet& a, const LabeledSet& b, std::string name) {
  LabeledSet s = a;
  s.name = std::move(name);
  for (std::size_t i = 0; i < b.size(); ++i) s.push(b.ids[i], b.xs[i], b.components[i]);
  return s;
}

/// Draws `n` points; point i uses the stream keyed by its sample id.
inline LabeledSet draw_mixture(const MixtureSpec& spec, std::size_t n, std::uint64_t seed, Split split,
                               bool external, std::string name, std::uint64_t first_index = 0) {
  spec.validate();
  LabeledSet out;
  out.name = std::move(name);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t id = make_sample_id(split, first_index + i);
    CounterRng rng(seed, StreamDomain::kData, id);
    const double u = rng.uniform();
    std::size_t c = 0;
    double acc = spec.components[0].weight;
    while (u >= acc && c + 1 < spec.components.size()) acc += spec.components[++c].weight;
    const MixtureComponent& comp = spec.components[c];
    const double sigma = comp.sigma * (external ? spec.scale : 1.0);
    const double offset = external ? spec.shift : 0.0;
    Vec x(spec.dim);
    for (int d = 0; d < spec.dim; ++d) x[d] = comp.mean[d] + offset + sigma * rng.normal();
    out.push(id, std::move(x), static_cast<int>(c));
  }
  return out;
}

struct DatasetCounts {
  std::size_t members = 256;      // DDPM training set
  std::size_t member_eval = 128;  // members held back from classifier training
  std::size_t holdout = 256;
  std::size_t external_train = 128;
  std::size_t external_eval = 128;
  std::size_t belonging_train = 128;
  std::size_t belonging_eval = 128;
  std::size_t foreign = 128;  // per foreign source

  void validate() const {
    if (members < 2 || member_eval < 1 || member_eval >= members)
      throw ParameterError("need members >= 2 and 1 <= member_eval < members");
    for (std::size_t c : {holdout, external_train, external_eval, belonging_train, belonging_eval, foreign})
      if (c < 1) throw ParameterError("every split needs at least one sample");
  }

  friend bool operator==(const DatasetCounts&, const DatasetCounts&) = default;
};

/// Real-data splits. Generated sets (belonging, foreign) are added later by
/// sampling from trained checkpoints.
struct DatasetBundle {
  LabeledSet member_train;
  LabeledSet member_eval;
  LabeledSet holdout;
  LabeledSet external_train;
  LabeledSet external_eval;
  LabeledSet belonging_train;
  LabeledSet belonging_eval;
  LabeledSet foreign_ddim;
  LabeledSet foreign_net;

  /// The full DDPM training set.
  LabeledSet members() const { return concat(member_train, member_eval, "members"); }

  std::vector<const LabeledSet*> all() const {
    return {&member_train, &member_eval,     &holdout,       &external_train, &external_eval,
            &belonging_train, &belonging_eval, &foreign_ddim, &foreign_net};
  }

  /// Every sample id appears in exactly one split.
  void assert_disjoint() const {
    std::set<std::uint64_t> seen;
    for (const LabeledSet* s : all())
      for (std::uint64_t id : s->ids)
        if (!seen.insert(id).second)
          throw ContractError("sample id " + std::to_string(id) + " appears in more than one split");
  }
};

inline DatasetBundle gen_data(const MixtureSpec& spec, const DatasetCounts& counts, std::uint64_t seed) {
  spec.validate();
  counts.validate();
  DatasetBundle b;
  const LabeledSet members = draw_mixture(spec, counts.members, seed, Split::kMember, false, "members");
  const std::size_t n_train = counts.members - counts.member_eval;
  b.member_train = members.slice(0, n_train, "member_train");
  b.member_eval = members.slice(n_train, counts.members, "member_eval");
  b.holdout = draw_mixture(spec, counts.holdout, seed, Split::kHoldout, false, "holdout");
  b.external_train = draw_mixture(spec, counts.external_train, seed, Split::kExternal, true, "external_train");
  b.external_eval = draw_mixture(spec, counts.external_eval, seed, Split::kExternal, true, "external_eval",
                                 counts.external_train);
  return b;
}

/// Wraps generated vectors as a set with ids from `split`.
inline LabeledSet make_generated_set(std::vector<Vec> xs, Split split, std::string name,
                                     std::uint64_t first_index = 0) {
  LabeledSet s;
  s.name = std::move(name);
  for (std::size_t i = 0; i < xs.size(); ++i) s.push(make_sample_id(split, first_index + i), std::move(xs[i]), -1);
  return s;
}

inline void write_set_csv(const std::filesystem::path& path, const LabeledSet& s) {
  std::string out = "sample_id,component";
  const std::size_t dim = s.xs.empty() ? 0 : s.xs.front().size();
  for (std::size_t d = 0; d < dim; ++d) out += ",x" + std::to_string(d);
  out += '\n';
  for (std::size_t i = 0; i < s.size(); ++i) {
    out += std::to_string(s.ids[i]) + ',' + std::to_string(s.components[i]);
    for (double v : s.xs[i]) out += ',' + format_double(v);
    out += '\n';
  }
  detail::write_atomically(path, out);
}

inline LabeledSet read_set_csv(const std::filesystem::path& path, std::string name) {
  std::ifstream is(path);
  if (!is) throw PipelineError("missing dataset file " + path.string());
  std::string line;
  if (!std::getline(is, line)) throw FormatError("empty dataset file " + path.string());
  const auto header = detail::split_csv_line(line);
  if (header.size() < 2 || header[0] != "sample_id" || header[1] != "component")
    throw FormatError("unexpected dataset header in " + path.string());
  const std::size_t dim = header.size() - 2;
  LabeledSet s;
  s.name = std::move(name);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != dim + 2) throw FormatError("ragged dataset row in " + path.string());
    Vec x(dim);
    for (std::size_t d = 0; d < dim; ++d) x[d] = detail::parse_double(cells[2 + d]);
    char* end = nullptr;
    const long comp = std::strtol(cells[1].c_str(), &end, 10);
    if (cells[1].empty() || *end != '\0') throw FormatError("bad component in " + path.string());
    s.push(detail::parse_u64(cells[0], 10, "sample_id"), std::move(x), static_cast<int>(comp));
  }
  return s;
}

/// Euclidean distance from x to its nearest neighbour in `ref`.
inline double nearest_distance(std::span<const double> x, std::span<const Vec> ref) {
  if (ref.empty()) throw ContractError("empty reference set");
  double best = INFINITY;
  for (const Vec& r : ref) {
    double d = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) d += (x[k] - r[k]) * (x[k] - r[k]);
    best = std::min(best, d);
  }
  return std::sqrt(best);
}

}  // namespace trajfx
