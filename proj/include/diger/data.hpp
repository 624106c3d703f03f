#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace diger {

struct Interaction {
  int item = 0;  // dense 0-based id
  int64_t ts = 0;
};

// Per-user chronologically ordered interactions over densely remapped ids.
// The remap tables (dense id -> original id) are retained for round-trips.
struct InteractionLog {
  std::vector<std::vector<Interaction>> seq;  // indexed by dense user id
  std::vector<std::string> user_names;
  std::vector<std::string> item_names;

  int num_users() const { return static_cast<int>(seq.size()); }
  int num_items() const { return static_cast<int>(item_names.size()); }
  std::size_t num_interactions() const;
};

// item dense id -> content feature vector, all rows the same width.
struct ContentTable {
  int dim = 0;
  std::vector<std::vector<double>> rows;
};

// Leave-one-out views: per user, the last interaction is the test target and
// the second-to-last the validation target; training sees the rest.
struct SplitDataset {
  std::vector<std::vector<int>> train_items;  // v_1 .. v_{n-2} per user
  std::vector<int> val_target;                // v_{n-1}
  std::vector<int> test_target;               // v_n
};

// TSV `user<TAB>item<TAB>timestamp`, optional header, UTF-8. Rows keep file
// order for equal timestamps; duplicates are legal re-interactions.
InteractionLog load_interactions(const std::string& path);

// Iteratively drops users and items with fewer than `threshold` interactions
// until a fixed point, then re-densifies ids.
InteractionLog filter_min_interactions(const InteractionLog& log, int threshold = 5);

// CSV `item_id,v1,...,vd` keyed by original item id; every item in the log
// must be present.
ContentTable load_content_csv(const std::string& path, const InteractionLog& log);

// Raw little-endian float32 matrix with an 8-byte header (uint32 item count,
// uint32 dimension); row i belongs to dense item id i of the processed log.
ContentTable load_content_binary(const std::string& path, const InteractionLog& log);
void save_content_binary(const std::string& path, const ContentTable& table);

struct SynthParams {
  int clusters = 8;
  int items = 200;
  int users = 500;
  int len_lo = 5;
  int len_hi = 10;
  int d_in = 16;
  double content_scale = 6.0;  // global scale of the content space
  double content_noise = 0.1;  // within-cluster spread relative to centroids
  double transition_peak = 0.75;  // probability mass on the preferred next cluster
  double zipf_exponent = 1.2;     // within-cluster item popularity tilt
};

// Clustered synthetic benchmark: item content = cluster centroid plus
// isotropic noise; user behavior = Markov walk over a random cluster-affinity
// matrix with Zipf-tilted item choice inside the current cluster. Fully
// deterministic given the seed.
std::pair<InteractionLog, ContentTable> synth_generate(const SynthParams& params, uint64_t seed);

// Requires every user to hold at least 3 interactions.
SplitDataset leave_one_out_split(const InteractionLog& log);

}  // namespace diger
