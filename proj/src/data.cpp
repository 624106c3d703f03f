#include "diger/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "diger/rng.hpp"

namespace diger {

std::size_t InteractionLog::num_interactions() const {
  std::size_t n = 0;
  for (const auto& s : seq) n += s.size();
  return n;
}

namespace {

bool parse_i64(const std::string& s, int64_t& out) {
  if (s.empty()) return false;
  std::size_t pos = 0;
  try {
    out = std::stoll(s, &pos);
  } catch (...) {
    return false;
  }
  return pos == s.size();
}

struct RawRow {
  std::string user, item;
  int64_t ts;
};

InteractionLog build_log(const std::vector<RawRow>& rows) {
  InteractionLog log;
  std::map<std::string, int> user_ids, item_ids;
  for (const auto& r : rows) {
    if (user_ids.emplace(r.user, static_cast<int>(log.user_names.size())).second) log.user_names.push_back(r.user);
    if (item_ids.emplace(r.item, static_cast<int>(log.item_names.size())).second) log.item_names.push_back(r.item);
  }
  log.seq.resize(log.user_names.size());
  for (const auto& r : rows) log.seq[static_cast<std::size_t>(user_ids[r.user])].push_back({item_ids[r.item], r.ts});
  for (auto& s : log.seq)
    std::stable_sort(s.begin(), s.end(), [](const Interaction& a, const Interaction& b) { return a.ts < b.ts; });
  return log;
}

}  // namespace

InteractionLog load_interactions(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_interactions: cannot open " + path);
  std::vector<RawRow> rows;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string user, item, ts_str;
    if (!std::getline(ls, user, '\t') || !std::getline(ls, item, '\t') || !std::getline(ls, ts_str, '\t')) {
      throw std::runtime_error("load_interactions: malformed row at line " + std::to_string(lineno) + " of " + path);
    }
    int64_t ts = 0;
    if (!parse_i64(ts_str, ts)) {
      if (lineno == 1) continue;  // optional header
      throw std::runtime_error("load_interactions: bad timestamp at line " + std::to_string(lineno) + " of " + path);
    }
    rows.push_back({std::move(user), std::move(item), ts});
  }
  return build_log(rows);
}

InteractionLog filter_min_interactions(const InteractionLog& log, int threshold) {
  if (threshold < 1) throw std::invalid_argument("filter_min_interactions: threshold must be >= 1");
  std::vector<uint8_t> user_alive(static_cast<std::size_t>(log.num_users()), 1);
  std::vector<uint8_t> item_alive(static_cast<std::size_t>(log.num_items()), 1);
  bool changed = true;
  while (changed) {
    changed = false;
    std::vector<int> item_count(static_cast<std::size_t>(log.num_items()), 0);
    for (int u = 0; u < log.num_users(); ++u) {
      if (!user_alive[static_cast<std::size_t>(u)]) continue;
      int len = 0;
      for (const auto& it : log.seq[static_cast<std::size_t>(u)])
        if (item_alive[static_cast<std::size_t>(it.item)]) ++len;
      if (len < threshold) {
        user_alive[static_cast<std::size_t>(u)] = 0;
        changed = true;
      }
    }
    for (int u = 0; u < log.num_users(); ++u) {
      if (!user_alive[static_cast<std::size_t>(u)]) continue;
      for (const auto& it : log.seq[static_cast<std::size_t>(u)])
        if (item_alive[static_cast<std::size_t>(it.item)]) ++item_count[static_cast<std::size_t>(it.item)];
    }
    for (int v = 0; v < log.num_items(); ++v) {
      if (item_alive[static_cast<std::size_t>(v)] && item_count[static_cast<std::size_t>(v)] < threshold) {
        item_alive[static_cast<std::size_t>(v)] = 0;
        changed = true;
      }
    }
  }

  InteractionLog out;
  std::vector<int> item_remap(static_cast<std::size_t>(log.num_items()), -1);
  for (int v = 0; v < log.num_items(); ++v) {
    if (item_alive[static_cast<std::size_t>(v)]) {
      item_remap[static_cast<std::size_t>(v)] = static_cast<int>(out.item_names.size());
      out.item_names.push_back(log.item_names[static_cast<std::size_t>(v)]);
    }
  }
  for (int u = 0; u < log.num_users(); ++u) {
    if (!user_alive[static_cast<std::size_t>(u)]) continue;
    std::vector<Interaction> s;
    for (const auto& it : log.seq[static_cast<std::size_t>(u)])
      if (item_alive[static_cast<std::size_t>(it.item)]) s.push_back({item_remap[static_cast<std::size_t>(it.item)], it.ts});
    out.user_names.push_back(log.user_names[static_cast<std::size_t>(u)]);
    out.seq.push_back(std::move(s));
  }
  return out;
}

ContentTable load_content_csv(const std::string& path, const InteractionLog& log) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_content_csv: cannot open " + path);
  std::map<std::string, std::vector<double>> by_name;
  std::string line;
  int lineno = 0;
  int dim = -1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string field;
    if (!std::getline(ls, field, ',')) continue;
    std::vector<double> v;
    std::string cell;
    bool numeric = true;
    while (std::getline(ls, cell, ',')) {
      try {
        std::size_t pos = 0;
        v.push_back(std::stod(cell, &pos));
        if (pos != cell.size()) numeric = false;
      } catch (...) {
        numeric = false;
      }
      if (!numeric) break;
    }
    if (!numeric) {
      if (lineno == 1) continue;  // optional header
      throw std::runtime_error("load_content_csv: bad value at line " + std::to_string(lineno) + " of " + path);
    }
    if (dim < 0) dim = static_cast<int>(v.size());
    if (static_cast<int>(v.size()) != dim)
      throw std::runtime_error("load_content_csv: inconsistent width at line " + std::to_string(lineno));
    by_name[field] = std::move(v);
  }
  ContentTable table;
  table.dim = std::max(dim, 0);
  for (const auto& name : log.item_names) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw std::runtime_error("load_content_csv: no content vector for item '" + name + "'");
    for (double x : it->second)
      if (!std::isfinite(x)) throw std::runtime_error("load_content_csv: non-finite value for item '" + name + "'");
    table.rows.push_back(it->second);
  }
  return table;
}

ContentTable load_content_binary(const std::string& path, const InteractionLog& log) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_content_binary: cannot open " + path);
  uint32_t count = 0, dim = 0;
  in.read(reinterpret_cast<char*>(&count), 4);
  in.read(reinterpret_cast<char*>(&dim), 4);
  if (!in) throw std::runtime_error("load_content_binary: truncated header in " + path);
  if (static_cast<int>(count) != log.num_items())
    throw std::runtime_error("load_content_binary: " + std::to_string(count) + " rows for " +
                             std::to_string(log.num_items()) + " items");
  ContentTable table;
  table.dim = static_cast<int>(dim);
  std::vector<float> buf(dim);
  for (uint32_t i = 0; i < count; ++i) {
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(sizeof(float) * dim));
    if (!in) throw std::runtime_error("load_content_binary: truncated row " + std::to_string(i));
    std::vector<double> v(buf.begin(), buf.end());
    table.rows.push_back(std::move(v));
  }
  return table;
}

void save_content_binary(const std::string& path, const ContentTable& table) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_content_binary: cannot open " + path);
  const uint32_t count = static_cast<uint32_t>(table.rows.size());
  const uint32_t dim = static_cast<uint32_t>(table.dim);
  out.write(reinterpret_cast<const char*>(&count), 4);
  out.write(reinterpret_cast<const char*>(&dim), 4);
  for (const auto& row : table.rows) {
    for (double x : row) {
      const float f = static_cast<float>(x);
      out.write(reinterpret_cast<const char*>(&f), 4);
    }
  }
}

std::pair<InteractionLog, ContentTable> synth_generate(const SynthParams& p, uint64_t seed) {
  if (p.clusters < 1 || p.items < p.clusters || p.users < 1 || p.len_lo < 1 || p.len_hi < p.len_lo || p.d_in < 1)
    throw std::invalid_argument("synth_generate: infeasible sizes");

  const int c_n = p.clusters;
  RngStream centroid_rng(seed, {0x63656e74ull});
  std::vector<std::vector<double>> centroids(static_cast<std::size_t>(c_n), std::vector<double>(static_cast<std::size_t>(p.d_in)));
  uint64_t ctr = 0;
  for (auto& c : centroids)
    for (auto& x : c) x = centroid_rng.normal(ctr++);

  ContentTable content;
  content.dim = p.d_in;
  std::vector<std::vector<int>> cluster_items(static_cast<std::size_t>(c_n));
  RngStream content_rng(seed, {0x636f6e74ull});
  ctr = 0;
  for (int v = 0; v < p.items; ++v) {
    const int c = v % c_n;
    cluster_items[static_cast<std::size_t>(c)].push_back(v);
    std::vector<double> row = centroids[static_cast<std::size_t>(c)];
    for (auto& x : row) {
      x += p.content_noise * content_rng.normal(ctr++);
      x *= p.content_scale;
    }
    content.rows.push_back(std::move(row));
  }

  // Row-stochastic cluster-affinity matrix: most of the mass on one preferred
  // successor per cluster, the rest spread uniformly. Preferred successors
  // form a derangement, so the matrix is doubly stochastic and the walk's
  // cluster marginals stay uniform for every seed.
  RngStream affinity_rng(seed, {0x616666ull});
  std::vector<int> peak(static_cast<std::size_t>(c_n));
  std::iota(peak.begin(), peak.end(), 0);
  shuffle_stream(peak, affinity_rng);
  for (int c = 0; c < c_n; ++c)
    if (c_n > 1 && peak[static_cast<std::size_t>(c)] == c)
      std::swap(peak[static_cast<std::size_t>(c)], peak[static_cast<std::size_t>((c + 1) % c_n)]);
  std::vector<std::vector<double>> affinity(static_cast<std::size_t>(c_n), std::vector<double>(static_cast<std::size_t>(c_n)));
  for (int c = 0; c < c_n; ++c) {
    const double rest = c_n == 1 ? 0.0 : (1.0 - p.transition_peak) / static_cast<double>(c_n - 1);
    for (int c2 = 0; c2 < c_n; ++c2)
      affinity[static_cast<std::size_t>(c)][static_cast<std::size_t>(c2)] =
          (c2 == peak[static_cast<std::size_t>(c)]) ? p.transition_peak : rest;
    if (c_n == 1) affinity[static_cast<std::size_t>(c)][0] = 1.0;
  }

  // Zipf weights give every cluster a stable popularity order over its items.
  std::vector<std::vector<double>> item_cum(static_cast<std::size_t>(c_n));
  for (int c = 0; c < c_n; ++c) {
    double acc = 0.0;
    for (std::size_t r = 0; r < cluster_items[static_cast<std::size_t>(c)].size(); ++r) {
      acc += 1.0 / std::pow(static_cast<double>(r + 1), p.zipf_exponent);
      item_cum[static_cast<std::size_t>(c)].push_back(acc);
    }
  }
  const auto pick_item = [&](int c, double u) {
    const auto& cum = item_cum[static_cast<std::size_t>(c)];
    const double x = u * cum.back();
    const auto it = std::upper_bound(cum.begin(), cum.end(), x);
    const std::size_t r = std::min(static_cast<std::size_t>(it - cum.begin()), cum.size() - 1);
    return cluster_items[static_cast<std::size_t>(c)][r];
  };
  const auto pick_cluster = [&](int c, double u) {
    const auto& row = affinity[static_cast<std::size_t>(c)];
    double cumv = 0.0;
    for (int c2 = 0; c2 < c_n; ++c2) {
      cumv += row[static_cast<std::size_t>(c2)];
      if (u < cumv) return c2;
    }
    return c_n - 1;
  };

  InteractionLog log;
  log.item_names.reserve(static_cast<std::size_t>(p.items));
  for (int v = 0; v < p.items; ++v) log.item_names.push_back(std::to_string(v));
  for (int u = 0; u < p.users; ++u) {
    RngStream user_rng(seed, {0x75736572ull, static_cast<uint64_t>(u)});
    const int len = p.len_lo + static_cast<int>(user_rng.below(0, static_cast<uint64_t>(p.len_hi - p.len_lo + 1)));
    int c = static_cast<int>(user_rng.below(1, static_cast<uint64_t>(c_n)));
    std::vector<Interaction> s;
    for (int t = 0; t < len; ++t) {
      s.push_back({pick_item(c, user_rng.uniform(2 + 2 * static_cast<uint64_t>(t))), t});
      c = pick_cluster(c, user_rng.uniform(3 + 2 * static_cast<uint64_t>(t)));
    }
    log.user_names.push_back(std::to_string(u));
    log.seq.push_back(std::move(s));
  }
  return {std::move(log), std::move(content)};
}

SplitDataset leave_one_out_split(const InteractionLog& log) {
  SplitDataset split;
  for (int u = 0; u < log.num_users(); ++u) {
    const auto& s = log.seq[static_cast<std::size_t>(u)];
    if (s.size() < 3)
      throw std::invalid_argument("leave_one_out_split: user " + std::to_string(u) + " has " +
                                  std::to_string(s.size()) + " interactions (< 3); run the interaction filter first");
    std::vector<int> train;
    for (std::size_t i = 0; i + 2 < s.size(); ++i) train.push_back(s[i].item);
    split.train_items.push_back(std::move(train));
    split.val_target.push_back(s[s.size() - 2].item);
    split.test_target.push_back(s[s.size() - 1].item);
  }
  return split;
}

}  // namespace diger
