#include <doctest.h>

#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "msattn/cli.hpp"
#include "msattn/report.hpp"
#include "msattn/synth_data.hpp"

using namespace msattn;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("msattn_cli_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::vector<std::string> gen_args(const fs::path& out, const std::string& seed = "3") {
  return {"gen-data", "--out", out.string(), "--classes", "3", "--max-per-class", "15", "--imbalance", "2",
          "--seed", seed};
}

const std::vector<std::string> kSmall{"--kernels", "4", "--features", "8", "--batch", "10",
                                      "--max-epochs", "1", "--quiet"};

std::vector<std::string> operator+(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

TEST_CASE("usage errors and help") {
  CHECK(cli({}).code == kExitUsage);
  CHECK(cli({"frobnicate"}).code == kExitUsage);
  CHECK(cli({"--help"}).code == kExitOk);
  CHECK(cli({"train", "--help"}).code == kExitOk);
  CHECK(cli({"gen-data"}).code == kExitUsage);  // --out is required
  CHECK(cli({"gen-data", "--out", "x", "--classes", "many"}).code == kExitUsage);
}

TEST_CASE("gen-data writes byte-identical files and guards non-empty directories") {
  const fs::path root = temp_dir("gen");
  REQUIRE(cli(gen_args(root / "a")).code == kExitOk);
  REQUIRE(cli(gen_args(root / "b")).code == kExitOk);
  for (const char* f : {"train.msws", "val.msws", "test.msws", "manifest.txt"}) {
    CHECK(fs::exists(root / "a" / f));
    CHECK(slurp(root / "a" / f) == slurp(root / "b" / f));
  }
  const Run again = cli(gen_args(root / "a"));
  CHECK(again.code == kExitData);
  CHECK(again.err.find("--force") != std::string::npos);
  CHECK(cli(gen_args(root / "a") + std::vector<std::string>{"--force"}).code == kExitOk);

  const RunRecord rec = RunRecord::from_text(slurp(root / "a" / kRunRecordName));
  CHECK(rec.seed == 3);
  CHECK(rec.command_line.find("gen-data") != std::string::npos);
  CHECK(!rec.dataset_hash.empty());

  std::ofstream(root / "spec.txt") << "r 1 9 9 9 reference 0\nq 2 10 3 4 additional 5\n";
  REQUIRE(cli({"gen-data", "--out", (root / "c").string(), "--sources", (root / "spec.txt").string(), "--classes",
               "2", "--max-per-class", "10"})
              .code == kExitOk);
  CHECK(load_dataset(root / "c").manifest.sources.size() == 2);
  std::ofstream(root / "bad.txt") << "r 1 9\n";
  CHECK(cli({"gen-data", "--out", (root / "d").string(), "--sources", (root / "bad.txt").string()}).code == kExitData);
  fs::remove_all(root);
}

TEST_CASE("run records round-trip") {
  RunRecord r;
  r.command_line = "msattn train --data d";
  r.config = {{"model", "ext3"}, {"pipeline", "lr=0.001;k=8"}};
  r.seed = 12;
  r.dataset_hash = "00ff";
  r.outputs = {"model.msck", "history.csv"};
  r.duration_s = 1.5;
  const RunRecord back = RunRecord::from_text(r.to_text());
  CHECK(back.command_line == r.command_line);
  CHECK(back.config == r.config);
  CHECK(back.seed == 12);
  CHECK(back.dataset_hash == "00ff");
  CHECK(back.outputs == r.outputs);
  CHECK(back.duration_s == 1.5);
}

TEST_CASE("train, cache reuse and eval") {
  const fs::path root = temp_dir("train");
  REQUIRE(cli(gen_args(root / "data")).code == kExitOk);
  const std::vector<std::string> common{"--data", (root / "data").string(), "--cache", (root / "cache").string()};

  const Run t = cli(std::vector<std::string>{"train", "--model", "ext3", "--source", "ref,a,b", "--out",
                                             (root / "m1").string()} + common + kSmall);
  REQUIRE_MESSAGE(t.code == kExitOk, t.err);
  for (const char* f : {"model.msck", "model.json", "history.csv", "fits.csv", "init_plan.csv", "run.txt"})
    CHECK(fs::exists(root / "m1" / f));
  const std::string fits = slurp(root / "m1" / "fits.csv");
  CHECK(fits.find("ext3(ref+a)") != std::string::npos);
  CHECK(fits.find("ext3(ref+b)") != std::string::npos);

  // identical flags: every prerequisite and the pairs come from the cache
  const Run t2 = cli(std::vector<std::string>{"train", "--model", "ext3", "--source", "ref,a,b", "--out",
                                              (root / "m2").string()} + common + kSmall);
  REQUIRE(t2.code == kExitOk);
  std::istringstream rows(slurp(root / "m2" / "fits.csv"));
  std::string line;
  std::getline(rows, line);
  while (std::getline(rows, line)) CHECK(line.find(",1,") != std::string::npos);
  CHECK(slurp(root / "m1" / "model.msck") == slurp(root / "m2" / "model.msck"));

  const Run e = cli({"eval", "--checkpoint", (root / "m1").string(), "--data", (root / "data").string(), "--out",
                     (root / "e1").string(), "--dump-regions", "2"});
  REQUIRE_MESSAGE(e.code == kExitOk, e.err);
  const std::string metrics = slurp(root / "e1" / "metrics.csv");
  for (const char* k : {"normalized_accuracy", "kappa", "overall_accuracy", "localization_hit_rate"})
    CHECK(metrics.find(k) != std::string::npos);
  CHECK(fs::exists(root / "e1" / "confusion.csv"));
  CHECK(fs::exists(root / "e1" / "per_class.csv"));
  // one grid row per region: 2 samples x (64 + 289) regions + header
  std::istringstream grid(slurp(root / "e1" / "region_grid.csv"));
  std::size_t n = 0;
  while (std::getline(grid, line)) ++n;
  CHECK(n == 1 + 2 * (64 + 289));

  REQUIRE(cli(gen_args(root / "other", "4")).code == kExitOk);
  const Run mismatch = cli({"eval", "--checkpoint", (root / "m1").string(), "--data", (root / "other").string(),
                            "--out", (root / "e2").string()});
  CHECK(mismatch.code == kExitData);

  CHECK(cli(std::vector<std::string>{"train", "--model", "ext3", "--source", "a", "--out", (root / "m3").string()} +
            common + kSmall)
            .code == kExitUsage);
  CHECK(cli(std::vector<std::string>{"train", "--model", "attention", "--source", "zzz", "--out",
                                     (root / "m4").string()} + common + kSmall)
            .code == kExitUsage);
  CHECK(cli({"train", "--model", "baseline", "--source", "a", "--out", (root / "m5").string(), "--data",
             (root / "missing").string()})
            .code == kExitData);
  fs::remove_all(root);
}

TEST_CASE("gradcheck exit codes") {
  const Run ok = cli({"gradcheck"});
  CHECK(ok.code == kExitOk);
  CHECK(ok.out.find("checks passed") != std::string::npos);
  const Run bad = cli({"gradcheck", "--include-corrupted"});
  CHECK(bad.code == kExitNumerical);
  CHECK(bad.out.find("corrupted_relu") != std::string::npos);
}

TEST_CASE("window sweep skips incompatible windows and reports R") {
  const fs::path root = temp_dir("sweep");
  REQUIRE(cli(gen_args(root / "data")).code == kExitOk);
  const Run s = cli(std::vector<std::string>{"sweep", "--kind", "window", "--values", "4,8", "--source", "b", "--data",
                                             (root / "data").string(), "--out", (root / "s").string(), "--cache",
                                             (root / "cache").string()} + kSmall);
  REQUIRE_MESSAGE(s.code == kExitOk, s.err);
  CHECK(s.err.find("skipping W=4") != std::string::npos);
  std::ifstream is(root / "s" / "sweep.csv");
  const Table t = read_csv(is);
  REQUIRE(t.rows.size() == 2);
  CHECK(t.rows[0][t.column("status")].rfind("skipped", 0) == 0);
  CHECK(t.rows[1][t.column("R")] == "289");

  const Run c = cli(std::vector<std::string>{"sweep", "--kind", "capacity", "--values", "1,2,3", "--model", "attention",
                                             "--source", "a", "--data", (root / "data").string(), "--out",
                                             (root / "c").string(), "--cache", (root / "cache").string()} + kSmall);
  REQUIRE_MESSAGE(c.code == kExitOk, c.err);
  std::ifstream cs(root / "c" / "sweep.csv");
  const Table ct = read_csv(cs);
  REQUIRE(ct.rows.size() == 3);
  const auto col = ct.column("params");
  CHECK(std::stoul(ct.rows[0][col]) < std::stoul(ct.rows[1][col]));
  CHECK(std::stoul(ct.rows[1][col]) < std::stoul(ct.rows[2][col]));
  CHECK(cli({"sweep", "--kind", "depth", "--values", "1", "--source", "a", "--data", (root / "data").string(), "--out",
             (root / "x").string()})
            .code == kExitUsage);
  fs::remove_all(root);
}

TEST_CASE("report renders deterministic SVG and rejects malformed CSV") {
  const fs::path root = temp_dir("report");
  std::ofstream(root / "a.csv") << "scale,params,test_accuracy\n1,100,0.41\n2,380,0.45\n";
  std::ofstream(root / "b.csv") << "scale,params,test_accuracy\n1,90,0.38\n2,300,0.44\n";
  const std::vector<std::string> args{"report", "--in", (root / "a.csv").string(), (root / "b.csv").string(),
                                      "--out", (root / "r1.svg").string(), "--x", "scale"};
  REQUIRE(cli(args).code == kExitOk);
  auto args2 = args;
  args2[5] = (root / "r2.svg").string();
  REQUIRE(cli(args2).code == kExitOk);
  const std::string svg = slurp(root / "r1.svg");
  CHECK(svg == slurp(root / "r2.svg"));
  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(svg.find("</svg>") != std::string::npos);

  std::ofstream(root / "bad.csv") << "x,y\n1,2,3\n";
  CHECK(cli({"report", "--in", (root / "bad.csv").string(), "--out", (root / "r3.svg").string()}).code == kExitData);
  std::ofstream(root / "quoted.csv") << "x,y\n\"1\",2\n";
  CHECK(cli({"report", "--in", (root / "quoted.csv").string(), "--out", (root / "r4.svg").string()}).code == kExitData);
  CHECK(cli({"report", "--in", (root / "nope.csv").string(), "--out", (root / "r5.svg").string()}).code == kExitData);
  fs::remove_all(root);
}

TEST_CASE("cache directory resolution") {
  ::setenv("MSATTN_CACHE_DIR", "/tmp/somewhere", 1);
  CHECK(default_cache_dir() == fs::path("/tmp/somewhere"));
  ::unsetenv("MSATTN_CACHE_DIR");
  CHECK(default_cache_dir().string().find("msattn") != std::string::npos);
}
