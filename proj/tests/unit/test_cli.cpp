#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <json.hpp>

#include "test_support.hpp"

using namespace gfe;
using gfe::testing::read_text;
using gfe::testing::run_command;
using gfe::testing::TempDir;
using gfe::testing::write_text;

namespace fs = std::filesystem;

namespace {

std::string binary() {
  const char* b = std::getenv("GFE_BINARY");
  REQUIRE_MESSAGE(b != nullptr, "GFE_BINARY must point at the gfe executable");
  return b;
}

fs::path golden_dir() {
  const char* d = std::getenv("GFE_GOLDEN_DIR");
  REQUIRE_MESSAGE(d != nullptr, "GFE_GOLDEN_DIR must point at tests/golden");
  return d;
}

struct Run {
  int code = 0;
  std::string out, err;
};

Run gfe_run(const TempDir& tmp, const std::string& args) {
  static int counter = 0;
  const auto out = tmp / ("out" + std::to_string(counter));
  const auto err = tmp / ("err" + std::to_string(counter));
  ++counter;
  Run r;
  r.code = run_command(binary() + " " + args + " > " + out.string() + " 2> " + err.string());
  r.out = read_text(out);
  r.err = read_text(err);
  return r;
}

const std::vector<std::string> kCommands = {"",      "ingest",      "train",           "eval",
                                            "export", "lock-server", "partition-server", "param-server"};

}  // namespace

TEST_CASE("help text matches golden files") {
  TempDir tmp("cli_help");
  const bool update = std::getenv("GFE_UPDATE_GOLDEN") != nullptr;
  for (const auto& cmd : kCommands) {
    CAPTURE(cmd);
    const auto r = gfe_run(tmp, cmd + " --help");
    CHECK(r.code == 0);
    const auto golden = golden_dir() / ((cmd.empty() ? "gfe" : cmd) + ".help.txt");
    if (update) write_text(golden, r.out);
    REQUIRE(fs::exists(golden));
    CHECK(r.out == read_text(golden));
  }
}

TEST_CASE("every subcommand requires --config") {
  TempDir tmp("cli_config");
  for (std::size_t i = 1; i < kCommands.size(); ++i) {
    CAPTURE(kCommands[i]);
    const auto help = gfe_run(tmp, kCommands[i] + " --help");
    CHECK(help.out.find("--config") != std::string::npos);
    CHECK(help.out.find("REQUIRED") != std::string::npos);
    const auto r = gfe_run(tmp, kCommands[i]);
    CHECK(r.code == 1);
    CHECK(r.err.find("--config") != std::string::npos);
  }
}

TEST_CASE("usage errors exit 1") {
  TempDir tmp("cli_usage");
  gfe::testing::SyntheticGraph g;
  write_text(tmp / "c.json", gfe::testing::synthetic_config_json(g, 1, "translation", "\"dimension\": 8"));
  write_text(tmp / "e.tsv", "e1\tr0\te2\n");
  const auto cfg = (tmp / "c.json").string();

  SUBCASE("eval without --checkpoint") {
    const auto r = gfe_run(tmp, "eval --config " + cfg + " --dataset " + tmp.path().string() + " --edges " +
                                    (tmp / "e.tsv").string());
    CHECK(r.code == 1);
    CHECK(r.err.find("--checkpoint") != std::string::npos);
  }
  SUBCASE("no subcommand") { CHECK(gfe_run(tmp, "").code == 1); }
  SUBCASE("unknown subcommand") { CHECK(gfe_run(tmp, "frobnicate --config " + cfg).code == 1); }
  SUBCASE("unknown flag") { CHECK(gfe_run(tmp, "train --config " + cfg + " --bogus 3").code == 1); }
  SUBCASE("missing config file") {
    CHECK(gfe_run(tmp, "train --config " + (tmp / "nope.json").string()).code == 1);
  }
  SUBCASE("invalid config") {
    write_text(tmp / "bad.json", "{\"entities\": []}");
    const auto r = gfe_run(tmp, "train --config " + (tmp / "bad.json").string() + " --dataset x --checkpoint-dir y");
    CHECK(r.code == 1);
    CHECK(r.err.find("event=error kind=validation") != std::string::npos);
  }
  SUBCASE("rank without cluster") {
    const auto r = gfe_run(tmp, "train --config " + cfg + " --rank 1");
    CHECK(r.code == 1);
    CHECK(r.err.find("--cluster") != std::string::npos);
  }
  SUBCASE("bad candidates spec") {
    const auto r = gfe_run(tmp, "eval --config " + cfg + " --dataset d --checkpoint c --edges " +
                                    (tmp / "e.tsv").string() + " --candidates sampled:x:uniform");
    CHECK(r.code == 1);
  }
  SUBCASE("runtime failure exits 2") {
    const auto r = gfe_run(tmp, "train --config " + cfg + " --dataset " + (tmp / "missing").string() +
                                    " --checkpoint-dir " + (tmp / "ck").string());
    CHECK(r.code == 2);
    CHECK(r.err.find("event=error kind=runtime") != std::string::npos);
  }
}

TEST_CASE("ingest, train, eval and export end to end") {
  TempDir tmp("cli_e2e");
  gfe::testing::SyntheticGraph g;
  g.entities = 200;
  g.edges = 3000;
  write_text(tmp / "all.tsv", g.tsv());
  write_text(tmp / "c.json", gfe::testing::synthetic_config_json(
                                 g, 2, "translation", "\"dimension\": 16, \"num_epochs\": 3, \"learning_rate\": 0.1"));
  const auto cfg = " --config " + (tmp / "c.json").string();
  const auto data = (tmp / "data").string();

  const auto ing = gfe_run(tmp, "ingest" + cfg + " --edges " + (tmp / "all.tsv").string() + " --output " + data +
                                    " --split 0.8,0.1,0.1 --seed 5");
  REQUIRE_MESSAGE(ing.code == 0, ing.err);
  CHECK(ing.err.find("event=ingest") != std::string::npos);
  for (const char* split : {"train", "valid", "test"}) CHECK(fs::exists(tmp / "data" / "splits" / (std::string(split) + ".tsv")));
  const auto test_edges = (tmp / "data" / "splits" / "test.tsv").string();

  const auto train_a = gfe_run(tmp, "train" + cfg + " --dataset " + data + " --checkpoint-dir " +
                                        (tmp / "ck_a").string() + " --seed 3 --workers 1");
  REQUIRE_MESSAGE(train_a.code == 0, train_a.err);
  CHECK(train_a.err.find("event=train_done") != std::string::npos);
  const auto train_b = gfe_run(tmp, "train" + cfg + " --dataset " + data + " --checkpoint-dir " +
                                        (tmp / "ck_b").string() + " --seed 3 --workers 1");
  REQUIRE(train_b.code == 0);

  const auto ev = gfe_run(tmp, "eval" + cfg + " --dataset " + data + " --checkpoint " + (tmp / "ck_a").string() +
                                   " --edges " + test_edges + " --mode filtered --filter-edges " +
                                   (tmp / "data" / "splits" / "train.tsv").string() + " --hits 1,10 --json " +
                                   (tmp / "report.json").string() + " --ranks-out " + (tmp / "ranks.tsv").string());
  REQUIRE_MESSAGE(ev.code == 0, ev.err);
  CHECK(!ev.out.empty());
  const auto report = nlohmann::json::parse(read_text(tmp / "report.json"));
  CHECK(report.is_object());
  const auto ranks = read_text(tmp / "ranks.tsv");
  CHECK(ranks.rfind("source\trelation\tdest\tsource_rank\tdest_rank\n", 0) == 0);

  const auto ex_a = gfe_run(tmp, "export" + cfg + " --dataset " + data + " --checkpoint " + (tmp / "ck_a").string() +
                                     " --entity-type node --output -");
  const auto ex_b = gfe_run(tmp, "export" + cfg + " --dataset " + data + " --checkpoint " + (tmp / "ck_b").string() +
                                     " --entity-type node --output " + (tmp / "b.tsv").string());
  REQUIRE(ex_a.code == 0);
  REQUIRE(ex_b.code == 0);
  // Same seed, one worker: identical embeddings.
  CHECK(ex_a.out == read_text(tmp / "b.tsv"));
  std::int64_t lines = 0;
  for (char c : ex_a.out) lines += c == '\n';
  CHECK(lines > 0);
  CHECK(lines <= g.entities);

  CHECK(gfe_run(tmp, "export" + cfg + " --dataset " + data + " --checkpoint " + (tmp / "ck_a").string() +
                         " --entity-type nosuch")
            .code == 1);
}
