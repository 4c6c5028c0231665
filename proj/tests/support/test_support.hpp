#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "gfe/config.hpp"
#include "gfe/ingest.hpp"

namespace gfe::testing {

// Unique scratch directory, removed on destruction unless GFE_KEEP_TMP is set.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "gfe");
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& child) const { return path_ / child; }

 private:
  std::filesystem::path path_;
};

// Planted-cluster knowledge graph. Entity e belongs to cluster e % clusters;
// relation r sends cluster c to cluster (c * (r + 1) + r) % clusters. Each
// edge picks a uniform source and a uniform destination inside the target
// cluster, so structure is learnable by every operator.
struct SyntheticGraph {
  std::int64_t entities = 1000;
  int relations = 4;
  int clusters = 10;
  std::int64_t edges = 10000;
  std::uint64_t seed = 1;

  std::string entity_name(std::int64_t e) const { return "e" + std::to_string(e); }
  std::string relation_name(int r) const { return "r" + std::to_string(r); }
  EdgeSource source() const;
  // Edges drawn with a different seed (held-out evaluation edges).
  SyntheticGraph held_out(std::int64_t count, std::uint64_t salt = 99) const;
  std::string tsv() const;
};

// Config text with one entity type named "node" and one relation per
// synthetic relation using `op`. `extra_train_keys` must at least set "dimension".
std::string synthetic_config_json(const SyntheticGraph& graph, int partitions, const std::string& op,
                                  const std::string& extra_train_keys);

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

// Runs a shell command, returning its exit status.
int run_command(const std::string& command);

}  // namespace gfe::testing
