#include "cluster_support.hpp"

namespace gfe::testing {

LocalCluster::LocalCluster(const Config& config, const std::filesystem::path& dataset_dir,
                           const std::filesystem::path& checkpoint_dir, int num_trainers, int partition_shards,
                           int param_shards) {
  const Endpoint any{"127.0.0.1", 0};
  manifest_.lock_server = any;
  manifest_.partition_servers.assign(static_cast<std::size_t>(partition_shards), any);
  manifest_.param_servers.assign(static_cast<std::size_t>(param_shards), any);
  manifest_.num_trainers = num_trainers;
  manifest_.dataset_dir = dataset_dir;
  manifest_.checkpoint_dir = checkpoint_dir;
  manifest_.sync_period_ms = 20;
  manifest_.connect_timeout_ms = 5000;

  auto host = [&](Service& s) {
    hosts_.push_back(std::make_unique<ServiceHost>(s, any));
    hosts_.back()->start();
    return Endpoint{"127.0.0.1", hosts_.back()->port()};
  };
  lock_ = make_lock_service(config);
  for (int s = 0; s < partition_shards; ++s) partitions_.push_back(make_partition_service(config, manifest_, s));
  for (int s = 0; s < param_shards; ++s) params_.push_back(make_param_service(config, manifest_, s));
  manifest_.lock_server = host(*lock_);
  for (int s = 0; s < partition_shards; ++s) {
    manifest_.partition_servers[static_cast<std::size_t>(s)] = host(*partitions_[static_cast<std::size_t>(s)]);
  }
  for (int s = 0; s < param_shards; ++s) {
    manifest_.param_servers[static_cast<std::size_t>(s)] = host(*params_[static_cast<std::size_t>(s)]);
  }
}

LocalCluster::~LocalCluster() { stop(); }

void LocalCluster::stop() {
  for (auto& h : hosts_) h->stop();
}

std::vector<std::string> LocalCluster::all_overlaps() const {
  std::vector<std::string> out;
  for (const auto& p : partitions_) {
    for (auto& o : p->overlaps()) out.push_back(o);
  }
  return out;
}

}  // namespace gfe::testing
