#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include "diger/data.hpp"
#include "doctest.h"

using namespace diger;

namespace {

struct TempFile {
  std::string path;
  explicit TempFile(const std::string& contents, const char* name) {
    path = std::string("/tmp/diger_test_") + name;
    std::ofstream out(path, std::ios::binary);
    out << contents;
  }
  ~TempFile() { std::remove(path.c_str()); }
};

// Naive filtering oracle: one full removal pass at a time until nothing moves.
InteractionLog naive_filter(InteractionLog log, int thr) {
  for (;;) {
    std::vector<int> item_count(static_cast<std::size_t>(log.num_items()), 0);
    for (const auto& s : log.seq)
      for (const auto& it : s) ++item_count[static_cast<std::size_t>(it.item)];
    std::set<int> drop_items;
    for (int v = 0; v < log.num_items(); ++v)
      if (item_count[static_cast<std::size_t>(v)] < thr) drop_items.insert(v);
    bool any = !drop_items.empty();
    InteractionLog next;
    std::vector<int> remap(static_cast<std::size_t>(log.num_items()), -1);
    for (int v = 0; v < log.num_items(); ++v)
      if (!drop_items.count(v)) {
        remap[static_cast<std::size_t>(v)] = static_cast<int>(next.item_names.size());
        next.item_names.push_back(log.item_names[static_cast<std::size_t>(v)]);
      }
    for (int u = 0; u < log.num_users(); ++u) {
      std::vector<Interaction> s;
      for (const auto& it : log.seq[static_cast<std::size_t>(u)])
        if (!drop_items.count(it.item)) s.push_back({remap[static_cast<std::size_t>(it.item)], it.ts});
      if (static_cast<int>(s.size()) >= thr) {
        next.user_names.push_back(log.user_names[static_cast<std::size_t>(u)]);
        next.seq.push_back(std::move(s));
      } else if (!s.empty() || !log.seq[static_cast<std::size_t>(u)].empty()) {
        any = true;
      }
    }
    log = std::move(next);
    if (!any) return log;
  }
}

std::string flatten(const InteractionLog& log) {
  std::string out;
  for (int u = 0; u < log.num_users(); ++u) {
    out += log.user_names[static_cast<std::size_t>(u)] + ":";
    for (const auto& it : log.seq[static_cast<std::size_t>(u)])
      out += log.item_names[static_cast<std::size_t>(it.item)] + "@" + std::to_string(it.ts) + ",";
    out += ";";
  }
  return out;
}

}  // namespace

TEST_CASE("load_interactions parses, sorts, and remaps") {
  TempFile f("u1\ti_b\t30\nu1\ti_a\t10\nu1\ti_c\t20\n", "basic.tsv");
  InteractionLog log = load_interactions(f.path);
  CHECK(log.num_users() == 1);
  CHECK(log.num_items() == 3);
  CHECK(log.seq[0].size() == 3);
  // sorted by timestamp regardless of file order
  CHECK(log.item_names[static_cast<std::size_t>(log.seq[0][0].item)] == "i_a");
  CHECK(log.item_names[static_cast<std::size_t>(log.seq[0][1].item)] == "i_c");
  CHECK(log.item_names[static_cast<std::size_t>(log.seq[0][2].item)] == "i_b");
}

TEST_CASE("load_interactions tolerates a header and keeps duplicates") {
  TempFile f("user\titem\ttimestamp\nu1\tx\t1\nu1\tx\t1\nu2\ty\t5\n", "header.tsv");
  InteractionLog log = load_interactions(f.path);
  CHECK(log.num_users() == 2);
  CHECK(log.seq[0].size() == 2);  // duplicate (user,item,timestamp) kept
}

TEST_CASE("load_interactions errors carry line numbers; empty file is fine") {
  TempFile bad("u1\tx\t1\nu2\tonly-two-fields\n", "bad.tsv");
  CHECK_THROWS_WITH_AS(load_interactions(bad.path), doctest::Contains("line 2"), std::runtime_error);
  TempFile bad2("u1\tx\t1\nu2\ty\tnot_numeric\n", "bad2.tsv");
  CHECK_THROWS_WITH_AS(load_interactions(bad2.path), doctest::Contains("line 2"), std::runtime_error);
  TempFile empty("", "empty.tsv");
  InteractionLog log = load_interactions(empty.path);
  CHECK(log.num_users() == 0);
  CHECK(log.num_interactions() == 0);
}

TEST_CASE("filter removes thin users and keeps boundary cases") {
  // u1 has 4 interactions -> removed; u2..u6 each hit item set 5 times
  std::string text;
  for (int i = 0; i < 4; ++i) text += "u1\ta\t" + std::to_string(i) + "\n";
  for (int u = 2; u <= 6; ++u)
    for (int i = 0; i < 5; ++i) text += "u" + std::to_string(u) + "\tb\t" + std::to_string(i) + "\n";
  TempFile f(text, "filter.tsv");
  InteractionLog log = load_interactions(f.path);
  InteractionLog filtered = filter_min_interactions(log, 5);
  CHECK(filtered.num_users() == 5);
  CHECK(filtered.num_items() == 1);
  CHECK(flatten(filtered) == flatten(naive_filter(log, 5)));
}

TEST_CASE("filter cascade matches the naive repeated-pass oracle") {
  // Dropping item `z` (4 uses) pushes u1 under the threshold, which in turn
  // drops item `w` under the threshold.
  std::string text;
  for (int i = 0; i < 4; ++i) text += "u1\tz\t" + std::to_string(i) + "\n";
  text += "u1\tw\t4\n";
  for (int u = 2; u <= 5; ++u) {
    text += "u" + std::to_string(u) + "\tw\t0\n";
    for (int i = 1; i < 5; ++i) text += "u" + std::to_string(u) + "\tk\t" + std::to_string(i) + "\n";
  }
  // item w: u1 + u2..u5 = 5 uses before cascade, 4 after u1 leaves
  TempFile f(text, "cascade.tsv");
  InteractionLog log = load_interactions(f.path);
  InteractionLog a = filter_min_interactions(log, 5);
  InteractionLog b = naive_filter(log, 5);
  CHECK(flatten(a) == flatten(b));
  for (const auto& s : a.seq) CHECK(s.size() >= 5);
}

TEST_CASE("dense remap round-trips through the retained tables") {
  TempFile f("u9\tq\t1\nu9\tr\t2\nu3\tq\t1\n", "remap.tsv");
  InteractionLog log = load_interactions(f.path);
  std::set<std::string> names(log.item_names.begin(), log.item_names.end());
  CHECK(names == std::set<std::string>{"q", "r"});
  CHECK(log.item_names.size() == 2);  // bijection: dense ids 0..1
  for (const auto& s : log.seq)
    for (const auto& it : s) CHECK(it.item < log.num_items());
}

TEST_CASE("synth_generate honors the size contract and determinism") {
  SynthParams p;
  p.clusters = 8;
  p.items = 200;
  p.users = 500;
  p.len_lo = 5;
  p.len_hi = 10;
  auto [log, content] = synth_generate(p, 17);
  CHECK(log.num_items() == 200);
  CHECK(log.num_users() == 500);
  CHECK(content.rows.size() == 200);
  for (const auto& s : log.seq) {
    CHECK(s.size() >= 5);
    CHECK(s.size() <= 10);
  }
  auto [log2, content2] = synth_generate(p, 17);
  CHECK(flatten(log) == flatten(log2));
  CHECK(content.rows == content2.rows);

  SynthParams bad = p;
  bad.items = 4;  // fewer items than clusters
  CHECK_THROWS_AS(synth_generate(bad, 1), std::invalid_argument);
}

TEST_CASE("synth content: within-cluster distance below cross-cluster distance") {
  SynthParams p;
  p.clusters = 6;
  p.items = 60;
  p.users = 10;
  auto [log, content] = synth_generate(p, 3);
  double within = 0.0, cross = 0.0;
  int nw = 0, nc = 0;
  for (int a = 0; a < p.items; ++a)
    for (int b = a + 1; b < p.items; ++b) {
      double d2 = 0.0;
      for (int j = 0; j < p.d_in; ++j) {
        const double diff = content.rows[static_cast<std::size_t>(a)][static_cast<std::size_t>(j)] -
                            content.rows[static_cast<std::size_t>(b)][static_cast<std::size_t>(j)];
        d2 += diff * diff;
      }
      if (a % p.clusters == b % p.clusters) {
        within += d2;
        ++nw;
      } else {
        cross += d2;
        ++nc;
      }
    }
  CHECK(within / nw < cross / nc);
}

TEST_CASE("synth statistics are stable across seeds") {
  SynthParams p;
  std::vector<double> mean_len, balance;
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    auto [log, content] = synth_generate(p, seed);
    double len = 0.0;
    for (const auto& s : log.seq) len += static_cast<double>(s.size());
    mean_len.push_back(len / log.num_users());
    std::vector<int> count(static_cast<std::size_t>(p.clusters), 0);
    for (const auto& s : log.seq)
      for (const auto& it : s) ++count[static_cast<std::size_t>(it.item % p.clusters)];
    int mx = 0;
    for (int c : count) mx = std::max(mx, c);
    balance.push_back(static_cast<double>(mx) * p.clusters / static_cast<double>(log.num_interactions()));
  }
  const auto spread_ok = [](const std::vector<double>& v) {
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    for (double x : v)
      if (std::abs(x - mean) > 0.10 * mean) return false;
    return true;
  };
  CHECK(spread_ok(mean_len));
  CHECK(spread_ok(balance));
}

TEST_CASE("leave_one_out_split follows the protocol") {
  InteractionLog log;
  log.user_names = {"u"};
  log.item_names = {"a", "b", "c", "d", "e"};
  log.seq = {{{0, 0}, {1, 1}, {2, 2}, {3, 3}, {4, 4}}};
  SplitDataset split = leave_one_out_split(log);
  CHECK(split.train_items[0] == std::vector<int>{0, 1, 2});
  CHECK(split.val_target[0] == 3);
  CHECK(split.test_target[0] == 4);

  // union of split targets and train data reconstructs the sequence
  std::vector<int> rebuilt = split.train_items[0];
  rebuilt.push_back(split.val_target[0]);
  rebuilt.push_back(split.test_target[0]);
  std::vector<int> original;
  for (const auto& it : log.seq[0]) original.push_back(it.item);
  CHECK(rebuilt == original);
}

TEST_CASE("leave_one_out_split boundary and rejection") {
  InteractionLog log;
  log.user_names = {"u"};
  log.item_names = {"a", "b", "c"};
  log.seq = {{{0, 0}, {1, 1}, {2, 2}}};
  SplitDataset split = leave_one_out_split(log);
  CHECK(split.train_items[0].size() == 1);

  log.seq = {{{0, 0}, {1, 1}}};
  CHECK_THROWS_AS(leave_one_out_split(log), std::invalid_argument);
}

TEST_CASE("content tables load from csv and binary") {
  InteractionLog log;
  log.user_names = {"u"};
  log.item_names = {"a", "b"};
  log.seq = {{{0, 0}, {1, 1}}};

  TempFile csv("item,v1,v2\na,1.5,2.5\nb,-1.0,0.25\n", "content.csv");
  ContentTable t = load_content_csv(csv.path, log);
  CHECK(t.dim == 2);
  CHECK(t.rows[0] == std::vector<double>{1.5, 2.5});
  CHECK(t.rows[1] == std::vector<double>{-1.0, 0.25});

  TempFile missing("a,1.0,2.0\n", "missing.csv");
  CHECK_THROWS_WITH_AS(load_content_csv(missing.path, log), doctest::Contains("'b'"), std::runtime_error);

  const std::string bin_path = "/tmp/diger_test_content.bin";
  save_content_binary(bin_path, t);
  ContentTable rt = load_content_binary(bin_path, log);
  CHECK(rt.dim == 2);
  CHECK(rt.rows[0][0] == doctest::Approx(1.5));
  CHECK(rt.rows[1][1] == doctest::Approx(0.25));
  std::remove(bin_path.c_str());
}
