#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "bpq/metrics.hpp"
#include "bpq/training.hpp"
#include "doctest.h"
#include "json.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path& workdir() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / "bpq_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string at(const std::string& name) { return (workdir() / name).string(); }

int run(const std::string& args) {
  const std::string cmd = "BPQ_THREADS=1 " + std::string(BPQ_CLI_PATH) + " " + args + " > " + at("last.log") + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

nlohmann::json manifest(const std::string& artifact) { return nlohmann::json::parse(slurp(artifact + ".manifest.json")); }

// Shared fixtures, produced once in order.
void ensure_pipeline() {
  static bool done = false;
  if (done) return;
  done = true;
  REQUIRE(run("gen-data --n 40 --seed 3 --out " + at("d.bpseg")) == 0);
  REQUIRE(run("gen-data --n 40 --seed 4 --out " + at("other.bpseg")) == 0);
  REQUIRE(run("pretrain --epochs 1 --signals 8 --batch 8 --seed 2 --out " + at("pre.bpm")) == 0);
  REQUIRE(run("train --data " + at("d.bpseg") + " --epochs 2 --batch 8 --seed 1 --out " + at("m.bpm")) == 0);
  REQUIRE(run("train --data " + at("d.bpseg") + " --init pretrained:" + at("pre.bpm") +
              " --backbone frozen --epochs 1 --batch 8 --seed 1 --out " + at("mf.bpm")) == 0);
  REQUIRE(run("quantize --model " + at("m.bpm") + " --mode dynamic --out " + at("qd.bpq")) == 0);
  REQUIRE(run("quantize --model " + at("m.bpm") + " --mode static --observer histogram --calib " + at("d.bpseg") +
              " --calib-count 8 --out " + at("qs.bpq")) == 0);
}

}  // namespace

TEST_CASE("gen-data writes a container and a manifest") {
  ensure_pipeline();
  const auto ds = bpq::read_container(at("d.bpseg"));
  CHECK(ds.size() == 40);
  const auto m = manifest(at("d.bpseg"));
  CHECK(m["command"] == "gen-data");
  CHECK(m["seeds"]["seed"] == 3);
  CHECK(m["threads"] == 1);
  CHECK(m["outputs"][0]["fnv1a64"].get<std::string>().size() == 16);
  CHECK(m.contains("tool_version"));
  CHECK(m.contains("duration_s"));
}

TEST_CASE("pretrain and train write history with one line per epoch") {
  ensure_pipeline();
  const auto h = bpq::read_history_jsonl(at("m.bpm.history.jsonl"));
  CHECK(h.epochs.size() == 2);
  const std::string pre = slurp(at("pre.bpm.history.jsonl"));
  CHECK(std::count(pre.begin(), pre.end(), '\n') == 1);
  const auto m = manifest(at("mf.bpm"));
  CHECK(m["lineage"]["method"] == "pretrained");
  CHECK(m["lineage"]["backbone"] == "frozen");
  CHECK(m["lineage"]["data_hash"] == manifest(at("m.bpm"))["lineage"]["data_hash"]);
}

TEST_CASE("eval writes JSON and markdown reports") {
  ensure_pipeline();
  REQUIRE(run("eval --model " + at("qs.bpq") + " --data " + at("d.bpseg") + " --split test --out " + at("r.json")) == 0);
  const auto report = bpq::report_from_json(slurp(at("r.json")));
  CHECK(report.segment_count == 4);
  CHECK(report.context.model_tag == "int8-static");
  CHECK(fs::exists(at("r.md")));
  REQUIRE(run("eval --model " + at("m.bpm") + " --data " + at("other.bpseg") + " --split all --out " + at("x.json")) == 0);
  const auto ext = bpq::report_from_json(slurp(at("x.json")));
  CHECK(ext.segment_count == 40);
}

TEST_CASE("quantize records the reduction factor") {
  ensure_pipeline();
  const auto m = manifest(at("qd.bpq"));
  CHECK(m["reduction_factor"].get<double>() >= 3.5);
  CHECK(fs::file_size(at("qd.bpq")) < fs::file_size(at("m.bpm")));
}

TEST_CASE("compare builds a delta table and checks data lineage") {
  ensure_pipeline();
  REQUIRE(run("compare --models " + at("m.bpm") + "," + at("qd.bpq") + "," + at("qs.bpq") + " --data " +
              at("d.bpseg") + " --out " + at("t.md")) == 0);
  const std::string md = slurp(at("t.md"));
  CHECK(md.find("ΔSBP R²") != std::string::npos);
  CHECK(std::count(md.begin(), md.end(), '\n') == 5);
  CHECK(run("compare --models " + at("m.bpm") + "," + at("qd.bpq") + " --data " + at("other.bpseg") + " --out " +
            at("t2.md")) == 3);
  CHECK(slurp(at("last.log")).find("DatasetMismatchError") != std::string::npos);
}

TEST_CASE("exit codes by error class") {
  ensure_pipeline();
  CHECK(run("gen-data --n 0 --seed 1 --out " + at("z.bpseg")) == 2);
  CHECK(run("frobnicate") == 2);
  CHECK(run("train --data " + at("missing.bpseg") + " --out " + at("n.bpm")) == 3);
  CHECK(run("quantize --model " + at("m.bpm") + " --mode static --out " + at("n.bpq")) == 2);
  CHECK(run("quantize --model " + at("m.bpm") + " --mode dynamic --bits 16 --out " + at("n.bpq")) == 2);
  CHECK(run("train --data " + at("d.bpseg") + " --epochs 1 --lr -1 --out " + at("n.bpm")) == 2);
  std::ofstream(at("junk.bpseg")) << "not a container";
  CHECK(run("eval --model " + at("m.bpm") + " --data " + at("junk.bpseg") + " --out " + at("n.json")) == 3);
  CHECK(std::system(("BPQ_THREADS=0 " + std::string(BPQ_CLI_PATH) + " gen-data --n 1 --seed 1 --out " + at("t.bpseg") +
                     " > /dev/null 2>&1").c_str()) != 0);
}
