#include "gfe/cli.hpp"

#include <atomic>
#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "gfe/distributed.hpp"
#include "gfe/evaluator.hpp"
#include "gfe/ingest.hpp"
#include "gfe/trainer.hpp"

namespace gfe {

namespace fs = std::filesystem;

namespace {

std::atomic<bool> g_stop{false};

extern "C" void handle_stop_signal(int) { g_stop = true; }

void install_stop_handlers() {
  std::signal(SIGINT, handle_stop_signal);
  std::signal(SIGTERM, handle_stop_signal);
}

void log_line(const std::string& line) {
  std::fprintf(stderr, "%s\n", line.c_str());
  std::fflush(stderr);
}

std::string quoted(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c == '\n' ? ' ' : c;
  }
  return out + "\"";
}

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
};

Config load_config_with_seed(const Common& c) {
  auto config = load_config(c.config);
  if (c.seed) config.train.seed = *c.seed;
  validate(config);
  return config;
}

std::vector<int> parse_hits(const std::string& text) {
  std::vector<int> hits;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    int k = 0;
    try {
      k = std::stoi(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size() || item.empty() || k < 1) throw ValidationError("--hits expects positive integers, got '" + text + "'");
    hits.push_back(k);
  }
  if (hits.empty()) throw ValidationError("--hits must list at least one k");
  return hits;
}

SplitFractions parse_split(const std::string& text) {
  std::vector<double> parts;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      parts.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw ValidationError("--split expects three numbers, got '" + text + "'");
    }
  }
  if (parts.size() != 3) throw ValidationError("--split expects train,valid,test fractions");
  return {parts[0], parts[1], parts[2]};
}

// ---- ingest ----

struct IngestArgs {
  Common common;
  std::vector<std::string> edges;
  std::vector<std::string> dictionary_edges;
  std::string output;
  int min_count = 1;
  std::string split;
};

EdgeSource concat(std::vector<std::string> files) {
  std::vector<EdgeSource> sources;
  for (const auto& f : files) sources.push_back(tsv_file_source(f));
  return [sources](const EdgeVisitor& v) {
    for (const auto& s : sources) s(v);
  };
}

int run_ingest(const IngestArgs& a) {
  const auto config = load_config_with_seed(a.common);
  const fs::path out(a.output);
  DictionaryOptions options;
  options.min_count = a.min_count;
  std::vector<std::string> train_files = a.edges;
  std::vector<std::string> dict_files = a.edges;
  dict_files.insert(dict_files.end(), a.dictionary_edges.begin(), a.dictionary_edges.end());
  if (!a.split.empty()) {
    const auto fractions = parse_split(a.split);
    fs::create_directories(out / "splits");
    std::ofstream train(out / "splits" / "train.tsv"), valid(out / "splits" / "valid.tsv"),
        test(out / "splits" / "test.tsv");
    auto writer = [](std::ofstream& f) {
      return [&f](std::string_view s, std::string_view r, std::string_view d) { f << s << '\t' << r << '\t' << d << '\n'; };
    };
    train_valid_test_split(concat(a.edges), fractions, config.train.seed, writer(train), writer(valid), writer(test));
    if (!train || !valid || !test) throw std::runtime_error("cannot write split files under " + out.string());
    train.close();
    train_files = {(out / "splits" / "train.tsv").string()};
    log_line("event=split train=" + (out / "splits" / "train.tsv").string() +
             " valid=" + (out / "splits" / "valid.tsv").string() + " test=" + (out / "splits" / "test.tsv").string());
  }
  const auto meta = ingest(concat(dict_files), concat(train_files), config.schema, out, options);
  std::int64_t entities = 0;
  for (const auto& t : meta.entity_counts) {
    for (auto c : t) entities += c;
  }
  log_line("event=ingest output=" + out.string() + " entities=" + std::to_string(entities) +
           " edges=" + std::to_string(meta.buckets.total()) + " dropped=" + std::to_string(meta.buckets.dropped) +
           " buckets=" + std::to_string(meta.buckets.counts.size()));
  return 0;
}

// ---- train ----

struct TrainArgs {
  Common common;
  std::string dataset;
  std::string checkpoint_dir;
  std::optional<int> epochs;
  std::optional<int> workers;
  std::optional<int> rank;
  std::string cluster;
};

int run_train(const TrainArgs& a) {
  auto config = load_config_with_seed(a.common);
  if (a.workers) {
    config.train.num_workers = *a.workers;
    validate(config);
  }
  auto on_bucket = [](const BucketLog& log) { log_line(log.line()); };
  if (a.rank || !a.cluster.empty()) {
    if (!a.rank || a.cluster.empty()) throw ValidationError("distributed training needs both --rank and --cluster");
    DistributedOptions options;
    options.rank = *a.rank;
    options.cluster = ClusterManifest::load(a.cluster);
    options.num_epochs = a.epochs;
    options.on_bucket = on_bucket;
    const auto result = distributed_train(config, options);
    for (std::size_t e = 0; e < result.epoch_seconds.size(); ++e) {
      log_line("event=epoch rank=" + std::to_string(*a.rank) + " index=" + std::to_string(e) +
               " seconds=" + std::to_string(result.epoch_seconds[e]));
    }
    log_line("event=train_done rank=" + std::to_string(*a.rank) + " buckets=" + std::to_string(result.buckets.size()) +
             " partition_gets=" + std::to_string(result.partition_gets) +
             " partition_puts=" + std::to_string(result.partition_puts) +
             " sync_rounds=" + std::to_string(result.sync.rounds) + " sync_failures=" +
             std::to_string(result.sync.failures) + " peak_resident_bytes=" +
             std::to_string(result.peak_resident_bytes));
    return 0;
  }
  if (a.dataset.empty() || a.checkpoint_dir.empty()) {
    throw ValidationError("single-machine training needs --dataset and --checkpoint-dir");
  }
  RunOptions options;
  options.dataset_dir = a.dataset;
  options.checkpoint_dir = a.checkpoint_dir;
  options.num_epochs = a.epochs;
  options.on_bucket = on_bucket;
  options.on_epoch = [](int epoch, const ResidencyCounter& counter) {
    log_line("event=epoch index=" + std::to_string(epoch) + " resident_bytes=" +
             std::to_string(counter.resident_bytes()) + " peak_bytes=" + std::to_string(counter.peak_bytes()) +
             " loads=" + std::to_string(counter.loads()));
  };
  const auto result = run_epochs(config, options);
  log_line("event=train_done epochs=" + std::to_string(result.manifest.epoch) + " checkpoint=" + a.checkpoint_dir +
           " peak_resident_bytes=" + std::to_string(result.peak_resident_bytes));
  return 0;
}

// ---- eval ----

struct EvalArgs {
  Common common;
  std::string dataset;
  std::string checkpoint;
  std::string edges;
  std::string mode = "raw";
  std::string candidates = "all";
  std::string hits = "1,10,50";
  std::vector<std::string> filter_edges;
  int workers = 1;
  std::string ranks_out;
  std::string json_out;
};

int run_eval(const EvalArgs& a) {
  const auto config = load_config_with_seed(a.common);
  EvalOptions options;
  options.mode = parse_mode(a.mode);
  options.candidates = parse_candidates(a.candidates);
  options.hits = parse_hits(a.hits);
  options.seed = config.train.seed;
  options.num_workers = a.workers;
  const auto meta = DatasetMeta::load(a.dataset);
  const auto dict = EntityDictionary::load(a.dataset, config.schema);
  const auto model = EvalModel::load(a.checkpoint, config, meta);
  const auto resolved = resolve_edges(tsv_file_source(a.edges), config, dict);
  KnownEdges known;
  if (options.mode == EvalMode::filtered) {
    add_known(known, resolved.edges);
    for (const auto& f : a.filter_edges) add_known(known, resolve_edges(tsv_file_source(f), config, dict).edges);
  }
  std::optional<PrevalenceTable> prevalence;
  if (options.candidates.scheme == CandidateScheme::prevalence) {
    prevalence = PrevalenceTable::from_buckets(a.dataset, config, meta);
  }
  auto report = evaluate(model, resolved.edges, options, options.mode == EvalMode::filtered ? &known : nullptr,
                         prevalence ? &*prevalence : nullptr);
  report.skipped = resolved.skipped;
  std::cout << report.summary_line() << "\n";
  if (!a.json_out.empty()) {
    std::ofstream out(a.json_out);
    out << report.json() << "\n";
    if (!out) throw std::runtime_error("cannot write " + a.json_out);
  }
  if (!a.ranks_out.empty()) {
    std::ofstream out(a.ranks_out);
    out << "source\trelation\tdest\tsource_rank\tdest_rank\n";
    for (std::size_t i = 0; i < resolved.edges.size(); ++i) {
      const auto& n = resolved.names[i];
      out << n[0] << '\t' << n[1] << '\t' << n[2] << '\t' << report.source_ranks[i] << '\t' << report.dest_ranks[i]
          << '\n';
    }
    if (!out) throw std::runtime_error("cannot write " + a.ranks_out);
  }
  return 0;
}

// ---- export ----

struct ExportArgs {
  Common common;
  std::string dataset;
  std::string checkpoint;
  std::string entity_type;
  std::string output = "-";
};

int run_export(const ExportArgs& a) {
  const auto config = load_config_with_seed(a.common);
  const int type = config.schema.entity_index(a.entity_type);
  const auto meta = DatasetMeta::load(a.dataset);
  const auto dict = EntityDictionary::load(a.dataset, config.schema);
  const auto model = EvalModel::load(a.checkpoint, config, meta);
  if (a.output == "-") {
    export_embeddings(model, dict, type, std::cout);
  } else {
    std::ofstream out(a.output);
    export_embeddings(model, dict, type, out);
    if (!out) throw std::runtime_error("cannot write " + a.output);
  }
  log_line("event=export entity_type=" + a.entity_type + " rows=" + std::to_string(dict.total(type)) +
           " output=" + a.output);
  return 0;
}

// ---- servers ----

struct ServerArgs {
  Common common;
  std::string cluster;
  int shard = 0;
  std::string trace;
  std::string spill_dir;
};

int serve(Service& service, const Endpoint& configured, const std::string& role) {
  install_stop_handlers();
  ServiceHost host(service, bind_address(configured));
  host.start();
  log_line("event=listening role=" + role + " port=" + std::to_string(host.port()));
  host.run_until([] { return g_stop.load(); });
  log_line("event=stopped role=" + role);
  return 0;
}

int run_lock_server(const ServerArgs& a) {
  const auto config = load_config_with_seed(a.common);
  const auto cluster = ClusterManifest::load(a.cluster);
  auto service = make_lock_service(config);
  std::ofstream trace;
  if (!a.trace.empty()) {
    trace.open(a.trace, std::ios::trunc);
    if (!trace) throw std::runtime_error("cannot write " + a.trace);
    service->set_trace_sink([&trace](const std::string& line) { trace << line << '\n' << std::flush; });
  }
  return serve(*service, cluster.lock_server, "lock-server");
}

int run_partition_server(const ServerArgs& a) {
  const auto config = load_config_with_seed(a.common);
  const auto cluster = ClusterManifest::load(a.cluster);
  std::optional<fs::path> spill;
  if (!a.spill_dir.empty()) spill = a.spill_dir;
  auto service = make_partition_service(config, cluster, a.shard, spill);
  const int code = serve(*service, cluster.partition_servers[static_cast<std::size_t>(a.shard)],
                         "partition-server shard=" + std::to_string(a.shard));
  const auto overlaps = service->overlaps();
  for (const auto& o : overlaps) log_line("event=partition_overlap detail=" + quoted(o));
  log_line("event=partition_server_done shard=" + std::to_string(a.shard) +
           " overlaps=" + std::to_string(overlaps.size()));
  return code;
}

int run_param_server(const ServerArgs& a) {
  const auto config = load_config_with_seed(a.common);
  const auto cluster = ClusterManifest::load(a.cluster);
  auto service = make_param_service(config, cluster, a.shard);
  return serve(*service, cluster.param_servers[static_cast<std::size_t>(a.shard)],
               "param-server shard=" + std::to_string(a.shard));
}

void add_common(CLI::App* cmd, Common& c, bool with_seed) {
  cmd->add_option("--config", c.config, "Model config file (JSON)")->required()->check(CLI::ExistingFile);
  if (with_seed) cmd->add_option("--seed", c.seed, "Override the config's random seed");
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"Partitioned graph embedding trainer and link-prediction evaluator", "gfe"};
  app.require_subcommand(1);
  app.fallthrough(false);

  IngestArgs ingest_args;
  auto* ingest_cmd = app.add_subcommand("ingest", "Build entity dictionaries and bucketed edge files");
  add_common(ingest_cmd, ingest_args.common, true);
  ingest_cmd->add_option("--edges", ingest_args.edges, "Training edge TSV files (source, relation, dest)")
      ->required()
      ->check(CLI::ExistingFile);
  ingest_cmd->add_option("--dictionary-edges", ingest_args.dictionary_edges,
                         "Extra TSV files whose entities enter the dictionary (e.g. valid/test splits)")
      ->check(CLI::ExistingFile);
  ingest_cmd->add_option("--output", ingest_args.output, "Dataset directory to write")->required();
  ingest_cmd->add_option("--min-count", ingest_args.min_count, "Drop entities seen fewer times than this")
      ->check(CLI::PositiveNumber);
  ingest_cmd->add_option("--split", ingest_args.split,
                         "Split --edges into train,valid,test fractions under <output>/splits first");

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Train embeddings, single-machine or as one rank of a cluster");
  add_common(train_cmd, train_args.common, true);
  train_cmd->add_option("--dataset", train_args.dataset, "Dataset directory written by ingest");
  train_cmd->add_option("--checkpoint-dir", train_args.checkpoint_dir, "Checkpoint directory (resumed if present)");
  train_cmd->add_option("--epochs", train_args.epochs, "Override num_epochs")->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--workers", train_args.workers, "Override num_workers")->check(CLI::PositiveNumber);
  train_cmd->add_option("--rank", train_args.rank, "Trainer rank in the cluster")->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--cluster", train_args.cluster, "Cluster manifest; enables distributed training")
      ->check(CLI::ExistingFile);

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "Rank held-out edges against corrupted candidates");
  add_common(eval_cmd, eval_args.common, true);
  eval_cmd->add_option("--dataset", eval_args.dataset, "Dataset directory written by ingest")->required();
  eval_cmd->add_option("--checkpoint", eval_args.checkpoint, "Checkpoint directory")->required();
  eval_cmd->add_option("--edges", eval_args.edges, "Edges to evaluate (TSV)")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--mode", eval_args.mode, "raw or filtered")->check(CLI::IsMember({"raw", "filtered"}));
  eval_cmd->add_option("--candidates", eval_args.candidates,
                       "all, sampled:N:prevalence or sampled:N:uniform");
  eval_cmd->add_option("--hits", eval_args.hits, "Comma-separated k values for Hits@k");
  eval_cmd->add_option("--filter-edges", eval_args.filter_edges,
                       "Known-edge TSV files removed from candidates in filtered mode")
      ->check(CLI::ExistingFile);
  eval_cmd->add_option("--workers", eval_args.workers, "Evaluation threads")->check(CLI::PositiveNumber);
  eval_cmd->add_option("--ranks-out", eval_args.ranks_out, "Write per-edge ranks as TSV");
  eval_cmd->add_option("--json", eval_args.json_out, "Write the report as JSON");

  ExportArgs export_args;
  auto* export_cmd = app.add_subcommand("export", "Write one entity type's embeddings as TSV");
  add_common(export_cmd, export_args.common, false);
  export_cmd->add_option("--dataset", export_args.dataset, "Dataset directory written by ingest")->required();
  export_cmd->add_option("--checkpoint", export_args.checkpoint, "Checkpoint directory")->required();
  export_cmd->add_option("--entity-type", export_args.entity_type, "Entity type to export")->required();
  export_cmd->add_option("--output", export_args.output, "Output file, - for stdout");

  ServerArgs lock_args, part_args, param_args;
  auto* lock_cmd = app.add_subcommand("lock-server", "Serve bucket locks for distributed training");
  add_common(lock_cmd, lock_args.common, false);
  lock_cmd->add_option("--cluster", lock_args.cluster, "Cluster manifest")->required()->check(CLI::ExistingFile);
  lock_cmd->add_option("--trace", lock_args.trace, "Append lock events to this file");

  auto* part_cmd = app.add_subcommand("partition-server", "Hold embedding partitions for distributed training");
  add_common(part_cmd, part_args.common, false);
  part_cmd->add_option("--cluster", part_args.cluster, "Cluster manifest")->required()->check(CLI::ExistingFile);
  part_cmd->add_option("--shard", part_args.shard, "Shard index in partition_servers")->check(CLI::NonNegativeNumber);
  part_cmd->add_option("--spill-dir", part_args.spill_dir, "Keep partitions in files here instead of memory");

  auto* param_cmd = app.add_subcommand("param-server", "Hold shared parameters for distributed training");
  add_common(param_cmd, param_args.common, false);
  param_cmd->add_option("--cluster", param_args.cluster, "Cluster manifest")->required()->check(CLI::ExistingFile);
  param_cmd->add_option("--shard", param_args.shard, "Shard index in param_servers")->check(CLI::NonNegativeNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*ingest_cmd) return run_ingest(ingest_args);
    if (*train_cmd) return run_train(train_args);
    if (*eval_cmd) return run_eval(eval_args);
    if (*export_cmd) return run_export(export_args);
    if (*lock_cmd) return run_lock_server(lock_args);
    if (*part_cmd) return run_partition_server(part_args);
    if (*param_cmd) return run_param_server(param_args);
  } catch (const ValidationError& e) {
    log_line("event=error kind=validation message=" + quoted(e.what()));
    return 1;
  } catch (const ParseError& e) {
    log_line("event=error kind=validation message=" + quoted(e.what()));
    return 1;
  } catch (const std::invalid_argument& e) {
    log_line("event=error kind=validation message=" + quoted(e.what()));
    return 1;
  } catch (const std::exception& e) {
    log_line("event=error kind=runtime message=" + quoted(e.what()));
    return 2;
  }
  return 1;
}

}  // namespace gfe
