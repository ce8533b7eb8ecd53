// Copyright 2026 The omni-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include "omni/analytics.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "omni/ctc.hpp"
#include "omni/error.hpp"
#include "omni/training.hpp"

namespace omni {

RouteDump dump_routes(const Model<float>& model, const Corpus& corpus, const Tokenizer& tokenizer,
                      std::size_t batch_max_frames) {
  const ModelConfig& cfg = model.config();
  if (!cfg.is_moe()) throw ContractError("dump_routes: dense model has no routing");
  RouteDump dump;
  dump.layers = cfg.layers;
  dump.experts = cfg.experts;
  if (corpus.empty()) return dump;

  NoGradScope<float> no_grad;
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  for (const auto& idx : pack_batches(corpus, order, batch_max_frames)) {
    Batch batch = make_batch(corpus, idx, tokenizer, cfg.frame_stack);
    ForwardResult<float> fwd = model.forward(batch);
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const Segment& seg = fwd.segments[b];
      for (const auto& d : fwd.dispatches) {
        const std::size_t n = d.experts();
        auto probs = d.probs.data();
        auto gates = d.gates.data();
        for (std::size_t t = 0; t < seg.length; ++t) {
          const std::size_t row = seg.offset + t;
          RoutingRecord r;
          r.utterance_id = batch.ids[b];
          r.layer = d.layer_index;
          r.frame = t;
          r.expert = d.assignment[row];
          r.gate = gates[row];
          r.probs.assign(probs.begin() + static_cast<std::ptrdiff_t>(row * n),
                         probs.begin() + static_cast<std::ptrdiff_t>((row + 1) * n));
          dump.records.push_back(std::move(r));
        }
      }
      const auto labels = frame_argmax(fwd.logits, seg);
      for (std::size_t t = 0; t < seg.length; ++t)
        dump.frames.push_back({batch.ids[b], t, labels[t]});
    }
  }
  return dump;
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream is(line);
  while (std::getline(is, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::size_t to_size(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(s, &used);
    if (used != s.size()) throw std::invalid_argument("trailing");
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw FormatError("route dump: bad " + what + " '" + s + "'");
  }
}

double to_double(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw FormatError("route dump: bad " + what + " '" + s + "'");
  }
}

}  // namespace

void write_route_dump(const std::filesystem::path& dir, const RouteDump& dump, bool with_probs) {
  std::filesystem::create_directories(dir);
  std::ofstream routes(dir / "routes.csv", std::ios::trunc);
  std::ofstream frames(dir / "frames.csv", std::ios::trunc);
  if (!routes || !frames) throw FormatError("route dump: cannot write into " + dir.string());
  routes << std::setprecision(17);
  routes << "# layers=" << dump.layers << " experts=" << dump.experts << '\n';
  routes << "utterance_id,layer,frame,expert,gate\n";
  for (const auto& r : dump.records)
    routes << r.utterance_id << ',' << r.layer << ',' << r.frame << ',' << r.expert << ',' << r.gate
           << '\n';
  frames << "utterance_id,frame,symbol\n";
  for (const auto& f : dump.frames) frames << f.utterance_id << ',' << f.frame << ',' << f.symbol << '\n';
  if (with_probs) {
    std::ofstream probs(dir / "probs.csv", std::ios::trunc);
    probs << std::setprecision(17);
    probs << "utterance_id,layer,frame";
    for (std::size_t j = 0; j < dump.experts; ++j) probs << ",p" << j;
    probs << '\n';
    for (const auto& r : dump.records) {
      probs << r.utterance_id << ',' << r.layer << ',' << r.frame;
      for (double p : r.probs) probs << ',' << p;
      probs << '\n';
    }
  } else {
    std::filesystem::remove(dir / "probs.csv");
  }
}

RouteDump read_route_dump(const std::filesystem::path& dir) {
  std::ifstream routes(dir / "routes.csv");
  std::ifstream frames(dir / "frames.csv");
  if (!routes || !frames) throw FormatError("route dump: missing routes.csv/frames.csv in " + dir.string());
  RouteDump dump;
  std::string line;
  if (!std::getline(routes, line) ||
      std::sscanf(line.c_str(), "# layers=%zu experts=%zu", &dump.layers, &dump.experts) != 2) {
    throw FormatError("route dump: missing header comment in routes.csv");
  }
  std::getline(routes, line);  // column header
  while (std::getline(routes, line)) {
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != 5) throw FormatError("route dump: malformed routes.csv line '" + line + "'");
    RoutingRecord r;
    r.utterance_id = f[0];
    r.layer = to_size(f[1], "layer");
    r.frame = to_size(f[2], "frame");
    r.expert = to_size(f[3], "expert");
    r.gate = to_double(f[4], "gate");
    dump.records.push_back(std::move(r));
  }
  std::getline(frames, line);
  while (std::getline(frames, line)) {
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != 3) throw FormatError("route dump: malformed frames.csv line '" + line + "'");
    dump.frames.push_back({f[0], to_size(f[1], "frame"), static_cast<int>(to_size(f[2], "symbol"))});
  }
  std::ifstream probs(dir / "probs.csv");
  if (probs) {
    std::getline(probs, line);
    std::size_t i = 0;
    while (std::getline(probs, line)) {
      if (line.empty()) continue;
      const auto f = split_csv(line);
      if (f.size() != 3 + dump.experts || i >= dump.records.size())
        throw FormatError("route dump: probs.csv does not match routes.csv");
      auto& r = dump.records[i++];
      if (r.utterance_id != f[0] || r.layer != to_size(f[1], "layer") || r.frame != to_size(f[2], "frame"))
        throw FormatError("route dump: probs.csv row order differs from routes.csv");
      for (std::size_t j = 0; j < dump.experts; ++j) r.probs.push_back(to_double(f[3 + j], "probability"));
    }
    if (i != dump.records.size()) throw FormatError("route dump: probs.csv is incomplete");
  }
  return dump;
}

ContingencyTable contingency_from_assignments(std::span<const std::size_t> first,
                                              std::span<const std::size_t> second,
                                              std::size_t experts, std::size_t layer) {
  if (first.size() != second.size()) throw ContractError("contingency: assignment lengths differ");
  ContingencyTable t;
  t.layer = layer;
  t.counts.assign(experts, std::vector<std::size_t>(experts, 0));
  for (std::size_t i = 0; i < first.size(); ++i) {
    if (first[i] >= experts || second[i] >= experts) throw IndexError("contingency: expert out of range");
    ++t.counts[first[i]][second[i]];
  }
  t.total = first.size();
  return t;
}

ContingencyTable contingency(std::span<const RoutingRecord> records, std::size_t layer,
                             std::size_t experts) {
  std::map<std::pair<std::string, std::size_t>, std::size_t> next;
  bool has_first = false;
  for (const auto& r : records) {
    if (r.layer == layer + 1) next[{r.utterance_id, r.frame}] = r.expert;
    if (r.layer == layer) has_first = true;
  }
  if (!has_first || next.empty()) {
    throw ContractError("contingency: records lack layer " + std::to_string(has_first ? layer + 1 : layer));
  }
  std::vector<std::size_t> a, b;
  for (const auto& r : records) {
    if (r.layer != layer) continue;
    auto it = next.find({r.utterance_id, r.frame});
    if (it == next.end()) {
      throw ContractError("contingency: frame " + std::to_string(r.frame) + " of " + r.utterance_id +
                          " missing at layer " + std::to_string(layer + 1));
    }
    a.push_back(r.expert);
    b.push_back(it->second);
  }
  return contingency_from_assignments(a, b, experts, layer);
}

double chi_square(const ContingencyTable& table) {
  if (table.total == 0) throw ContractError("chi_square: empty table");
  const std::size_t r = table.counts.size();
  const std::size_t c = r ? table.counts[0].size() : 0;
  std::vector<double> row(r, 0), col(c, 0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      row[i] += static_cast<double>(table.counts[i][j]);
      col[j] += static_cast<double>(table.counts[i][j]);
    }
  const double n = static_cast<double>(table.total);
  double chi2 = 0;
  for (std::size_t i = 0; i < r; ++i) {
    if (row[i] == 0) continue;
    for (std::size_t j = 0; j < c; ++j) {
      if (col[j] == 0) continue;
      const double expected = row[i] * col[j] / n;
      const double diff = static_cast<double>(table.counts[i][j]) - expected;
      chi2 += diff * diff / expected;
    }
  }
  return chi2;
}

double cramers_v(const ContingencyTable& table) {
  if (table.total == 0) throw ContractError("cramers_v: empty table");
  std::size_t rows = 0, cols = 0;
  const std::size_t c = table.counts.empty() ? 0 : table.counts[0].size();
  for (const auto& row : table.counts)
    if (std::any_of(row.begin(), row.end(), [](std::size_t v) { return v > 0; })) ++rows;
  for (std::size_t j = 0; j < c; ++j) {
    for (const auto& row : table.counts) {
      if (row[j] > 0) {
        ++cols;
        break;
      }
    }
  }
  const std::size_t k = std::min(rows, cols);
  if (k <= 1) return 0.0;
  const double v = std::sqrt(chi_square(table) / (static_cast<double>(table.total) * static_cast<double>(k - 1)));
  return std::min(v, 1.0);
}

std::vector<std::size_t> max_trace_permutation(const std::vector<std::vector<std::size_t>>& counts) {
  const std::size_t n = counts.size();
  for (const auto& row : counts)
    if (row.size() != n) throw DimensionError("align_labels: contingency table is not square");
  if (n == 0) return {};
  // Kuhn-Munkres with potentials on cost = -counts, 1-indexed.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0), v(n + 1, 0), minv(n + 1);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = -static_cast<double>(counts[i0 - 1][j - 1]) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> sigma(n);
  for (std::size_t j = 1; j <= n; ++j) sigma[p[j] - 1] = j - 1;
  return sigma;
}

std::vector<std::vector<std::size_t>> align_labels(std::span<const ContingencyTable> tables) {
  if (tables.empty()) return {};
  const std::size_t n = tables.front().counts.size();
  std::vector<std::vector<std::size_t>> display;
  std::vector<std::size_t> identity(n);
  std::iota(identity.begin(), identity.end(), 0);
  display.push_back(identity);
  for (const auto& t : tables) {
    if (t.counts.size() != n) throw DimensionError("align_labels: inconsistent expert counts");
    const auto sigma = max_trace_permutation(t.counts);
    // Raw label b at the next layer pairs with raw label a = sigma^-1(b).
    std::vector<std::size_t> next(n);
    for (std::size_t a = 0; a < n; ++a) next[sigma[a]] = display.back()[a];
    display.push_back(std::move(next));
  }
  return display;
}

double entropy_bits(std::span<const double> distribution) {
  double h = 0;
  for (double q : distribution)
    if (q > 0) h -= q * std::log2(q);
  return std::max(h, 0.0);
}

EntropyTable routing_entropy(const RouteDump& dump, std::size_t top_k, bool use_probs) {
  std::map<std::pair<std::string, std::size_t>, int> symbol_of;
  std::map<int, std::size_t> frequency;
  for (const auto& f : dump.frames) {
    symbol_of[{f.utterance_id, f.frame}] = f.symbol;
    ++frequency[f.symbol];
  }
  std::vector<std::pair<int, std::size_t>> ranked(frequency.begin(), frequency.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });

  EntropyTable table;
  if (top_k > ranked.size()) table.skipped = top_k - ranked.size();
  ranked.resize(std::min(top_k, ranked.size()));
  std::map<int, std::size_t> slot;
  for (std::size_t i = 0; i < ranked.size(); ++i) slot[ranked[i].first] = i;

  // mass[group][layer][expert]
  std::vector<std::vector<std::vector<double>>> mass(
      ranked.size(), std::vector<std::vector<double>>(dump.layers, std::vector<double>(dump.experts, 0)));
  std::vector<std::vector<std::size_t>> seen(ranked.size(), std::vector<std::size_t>(dump.layers, 0));
  for (const auto& r : dump.records) {
    auto s = symbol_of.find({r.utterance_id, r.frame});
    if (s == symbol_of.end()) throw ContractError("routing_entropy: record without frame label");
    auto g = slot.find(s->second);
    if (g == slot.end()) continue;
    if (r.layer >= dump.layers || r.expert >= dump.experts) throw IndexError("routing_entropy: record out of range");
    auto& m = mass[g->second][r.layer];
    if (use_probs) {
      if (r.probs.size() != dump.experts) throw ContractError("routing_entropy: records carry no probabilities");
      for (std::size_t j = 0; j < dump.experts; ++j) m[j] += r.probs[j];
    } else {
      m[r.expert] += 1.0;
    }
    ++seen[g->second][r.layer];
  }
  for (std::size_t g = 0; g < ranked.size(); ++g) {
    EntropyRow row;
    row.symbol = ranked[g].first;
    row.frames = ranked[g].second;
    for (std::size_t l = 0; l < dump.layers; ++l) {
      auto q = mass[g][l];
      const double total = std::accumulate(q.begin(), q.end(), 0.0);
      if (total > 0)
        for (auto& v : q) v /= total;
      row.per_layer.push_back(seen[g][l] ? entropy_bits(q) : 0.0);
    }
    table.groups.push_back(std::move(row));
  }
  return table;
}

PermutationReport permutation_experiment(const Model<float>& model, const Corpus& corpus,
                                         const Tokenizer& tokenizer,
                                         std::span<const double> p_values, std::size_t trials,
                                         std::uint64_t seed, std::size_t batch_max_frames,
                                         bool exclude_original) {
  if (!model.config().is_moe()) throw ContractError("permutation_experiment: dense model");
  if (trials == 0) throw ContractError("permutation_experiment: trials must be positive");
  if (corpus.empty()) throw ContractError("permutation_experiment: empty corpus");
  for (double p : p_values)
    if (!(p >= 0 && p <= 1)) throw ContractError("permutation_experiment: p outside [0, 1]");

  PermutationReport report;
  report.baseline_wer = evaluate(model, corpus, tokenizer, batch_max_frames).wer();
  report.absolute = report.baseline_wer == 0.0;
  for (double p : p_values) {
    PermutationRow row;
    row.p = p;
    double change = 0;
    for (std::size_t t = 0; t < trials; ++t) {
      Rng rng = make_stream(seed, "permute", t);
      RoutePerturbation perturb{p, &rng, exclude_original};
      ForwardOptions options;
      options.perturb = &perturb;
      const double w = evaluate(model, corpus, tokenizer, batch_max_frames, options).wer();
      row.trial_wers.push_back(w);
      row.mean_wer += w;
      change += report.absolute ? 100.0 * w
                                : 100.0 * (w - report.baseline_wer) / report.baseline_wer;
    }
    row.mean_wer /= static_cast<double>(trials);
    row.mean_change = change / static_cast<double>(trials);
    report.rows.push_back(std::move(row));
  }
  return report;
}

std::string usage_map_json(const RouteDump& dump,
                           const std::vector<std::vector<std::size_t>>& alignment) {
  nlohmann::ordered_json j;
  j["layers"] = dump.layers;
  j["experts"] = dump.experts;
  j["aligned"] = !alignment.empty();
  auto& utts = j["utterances"] = nlohmann::ordered_json::array();
  std::map<std::string, std::size_t> index;
  std::vector<std::vector<std::vector<std::size_t>>> grids;
  std::vector<std::string> ids;
  for (const auto& r : dump.records) {
    auto [it, inserted] = index.emplace(r.utterance_id, grids.size());
    if (inserted) {
      grids.emplace_back(dump.layers);
      ids.push_back(r.utterance_id);
    }
    auto& row = grids[it->second][r.layer];
    if (row.size() <= r.frame) row.resize(r.frame + 1, 0);
    row[r.frame] = alignment.empty() ? r.expert : alignment.at(r.layer).at(r.expert);
  }
  for (std::size_t u = 0; u < grids.size(); ++u) {
    nlohmann::ordered_json e;
    e["id"] = ids[u];
    e["grid"] = grids[u];
    utts.push_back(std::move(e));
  }
  return j.dump();
}

}  // namespace omni
