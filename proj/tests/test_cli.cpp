#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "missfactor/io.hpp"

using namespace missfactor;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() /
           ("missfactor_cli_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
};

// ctest runs the suite from the build directory, next to the binary.
int run_cli(const std::string& args) {
  const std::string cmd = "./missfactor " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  REQUIRE(status != -1);
  REQUIRE(WIFEXITED(status));
  return WEXITSTATUS(status);
}

void write_file(const fs::path& p, const std::string& body) {
  std::ofstream f(p);
  f << body;
}

int data_rows(const fs::path& p) {
  std::ifstream f(p);
  REQUIRE(f.good());
  int rows = -1;  // header
  std::string line;
  while (std::getline(f, line)) {
    if (!line.empty()) ++rows;
  }
  return rows;
}

struct CliBench {
  TempDir dir;
  fs::path sim_dir, mech_dir, cfg_path;
  CliBench() {
    sim_dir = dir.path / "sim";
    mech_dir = dir.path / "mech";
    cfg_path = dir.path / "pipeline.json";
    write_file(dir.path / "sim.json",
               R"({"n": 120, "p": 100, "K": 3})");
    write_file(cfg_path,
               R"({"bootstrap_B": 99,
                   "mcmc": {"iters": 400, "burn": 100, "thin": 1},
                   "n_permutations": 19, "n_threads": 1})");
    REQUIRE(run_cli("simulate --config " + (dir.path / "sim.json").string() +
                    " --seed 11 --out " + sim_dir.string()) == 0);
    REQUIRE(run_cli("estimate-mechanism --matrix " +
                    (sim_dir / "matrix.tsv").string() + " --config " +
                    cfg_path.string() + " --seed 7 --out " +
                    mech_dir.string()) == 0);
  }
};

const CliBench& cli_bench() {
  static CliBench* b = new CliBench;
  return *b;
}

}  // namespace

TEST_CASE("binary exists next to the test runner", "[cli]") {
  REQUIRE(fs::exists("./missfactor"));
}

TEST_CASE("argument errors exit with code 2", "[cli]") {
  TempDir dir;
  REQUIRE(run_cli("simulate --out " + dir.str()) == 2);  // no --seed
  REQUIRE(run_cli("simulate --seed 1") == 2);            // no --out
  REQUIRE(run_cli("--not-a-flag") == 2);
  REQUIRE(run_cli("estimate-mechanism --matrix " + dir.str() +
                  "/nope.tsv --out " + dir.str()) == 2);
}

TEST_CASE("simulate writes a loadable dataset", "[cli]") {
  const auto& b = cli_bench();
  REQUIRE(fs::exists(b.sim_dir / "matrix.tsv"));
  REQUIRE(fs::exists(b.sim_dir / "mask.tsv"));
  REQUIRE(fs::exists(b.sim_dir / "design.tsv"));
  REQUIRE(fs::exists(b.sim_dir / "truth.json"));

  const auto m = load_intensity_matrix((b.sim_dir / "matrix.tsv").string());
  REQUIRE(m.n_features() == 100);
  REQUIRE(m.n_samples() == 120);

  const auto design = load_numeric_table((b.sim_dir / "design.tsv").string());
  REQUIRE(design.col_names == std::vector<std::string>{"group"});
  REQUIRE(design.values.rows() == 120);

  std::ifstream tf(b.sim_dir / "truth.json");
  nlohmann::json truth;
  tf >> truth;
  REQUIRE(truth.at("n").get<int>() == 120);
  REQUIRE(truth.at("alpha").size() == 100);
  REQUIRE(truth.at("seed").get<std::uint64_t>() == 11);
}

TEST_CASE("simulate is reproducible across invocations", "[cli]") {
  const auto& b = cli_bench();
  TempDir dir;
  REQUIRE(run_cli("simulate --config " +
                  (b.dir.path / "sim.json").string() + " --seed 11 --out " +
                  dir.str()) == 0);
  const auto h1 = hash_file((b.sim_dir / "matrix.tsv").string());
  const auto h2 = hash_file((dir.path / "matrix.tsv").string());
  REQUIRE(h1 == h2);
}

TEST_CASE("estimate-mechanism writes the artifact set", "[cli]") {
  const auto& b = cli_bench();
  for (const char* name :
       {"meta.json", "factors.tsv", "partition.tsv", "mechanisms.tsv",
        "weights_w.tsv", "weights_v.tsv", "weights_gamma.tsv"}) {
    INFO(name);
    REQUIRE(fs::exists(b.mech_dir / name));
  }
  REQUIRE(data_rows(b.mech_dir / "partition.tsv") == 100);
  const int n_missing = data_rows(b.mech_dir / "mechanisms.tsv");
  REQUIRE(n_missing > 0);
  REQUIRE(data_rows(b.mech_dir / "weights_w.tsv") == n_missing);
}

TEST_CASE("associate consumes the artifacts end to end", "[cli]") {
  const auto& b = cli_bench();
  TempDir out;
  REQUIRE(run_cli("associate --matrix " + (b.sim_dir / "matrix.tsv").string() +
                  " --design " + (b.sim_dir / "design.tsv").string() +
                  " --mechanism " + b.mech_dir.string() + " --config " +
                  b.cfg_path.string() + " --seed 7 --out " + out.str()) == 0);
  REQUIRE(fs::exists(out.path / "associations.tsv"));
  REQUIRE(fs::exists(out.path / "qq.tsv"));
  REQUIRE(fs::exists(out.path / "assoc_meta.json"));

  const int rows = data_rows(out.path / "associations.tsv");
  const int n_missing = data_rows(b.mech_dir / "mechanisms.tsv");
  REQUIRE(rows >= n_missing);
  REQUIRE(rows <= 100);

  std::ifstream mf(out.path / "assoc_meta.json");
  nlohmann::json meta;
  mf >> meta;
  REQUIRE(meta.at("K").get<int>() >= 1);
}

TEST_CASE("associate refuses artifacts from a different matrix", "[cli]") {
  const auto& b = cli_bench();
  TempDir other;
  REQUIRE(run_cli("simulate --config " + (b.dir.path / "sim.json").string() +
                  " --seed 12 --out " + other.str()) == 0);
  TempDir out;
  REQUIRE(run_cli("associate --matrix " + (other.path / "matrix.tsv").string() +
                  " --design " + (other.path / "design.tsv").string() +
                  " --mechanism " + b.mech_dir.string() + " --config " +
                  b.cfg_path.string() + " --out " + out.str()) == 2);
}
