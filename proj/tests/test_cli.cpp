#include "doctest.h"

#include <sys/wait.h>

#include <cstdlib>
#include <string>

#include "bingo/eval.hpp"
#include "test_util.hpp"

using bingo_test::TempDir;
using bingo_test::slurp;
using bingo_test::spit;

namespace {

struct RunResult {
  int exit_code;
  std::string out;
};

// Runs the CLI through /bin/sh with stdout+stderr captured.
RunResult run_cli(const TempDir& tmp, const std::string& args) {
  std::string out_path = tmp.file("cli-out.txt");
  std::string cmd = "cd " + tmp.path.string() + " && BINGO_RUN_DIR=" + tmp.path.string() +
                    " " BINGO_CLI_PATH " " + args + " > " + out_path + " 2>&1";
  int status = std::system(cmd.c_str());
  RunResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out_path);
  return r;
}

const char* kTinyTrainFlags =
    " --epochs 2 --batch-size 16 --bank-capacity 64 --hidden-dims 12"
    " --proj-hidden-dim 12 --embed-dim 8";

void make_dataset(const TempDir& tmp) {
  RunResult r = run_cli(tmp,
                        "gen-data --out d.bin --labels-out l.bin --n 200 --dim 6 "
                        "--classes 4 --class-sep 3 --noise 0.4 --seed 3");
  REQUIRE(r.exit_code == 0);
}

}  // namespace

TEST_CASE("unknown flags exit with code 2 and print usage") {
  TempDir tmp("cli-usage");
  RunResult r = run_cli(tmp, "bag --definitely-not-a-flag");
  CHECK(r.exit_code == 2);
  CHECK(r.out.find("Usage") != std::string::npos);
  RunResult r2 = run_cli(tmp, "not-a-subcommand");
  CHECK(r2.exit_code == 2);
}

TEST_CASE("input violations exit with code 3") {
  TempDir tmp("cli-inv");
  RunResult r = run_cli(tmp, "embed --ckpt missing.ckpt --data missing.bin --out e.bin");
  CHECK(r.exit_code == 3);
  CHECK(r.out.find("error") != std::string::npos);
}

TEST_CASE("numeric failures exit with code 4") {
  TempDir tmp("cli-num");
  make_dataset(tmp);
  RunResult r = run_cli(tmp, std::string("pretrain --data d.bin --out t.ckpt --base-lr 1e9") +
                                 kTinyTrainFlags);
  CHECK(r.exit_code == 4);
}

TEST_CASE("every subcommand documents its keys with defaults in --help") {
  TempDir tmp("cli-help");
  for (const char* sub : {"gen-data", "pretrain", "embed", "bag", "distill", "eval", "sweep"}) {
    RunResult r = run_cli(tmp, std::string(sub) + " --help");
    CHECK(r.exit_code == 0);
    CHECK(r.out.find("Options") != std::string::npos);
    CHECK(r.out.find('[') != std::string::npos);  // captured defaults
  }
}

TEST_CASE("bag subcommand writes the documented header") {
  TempDir tmp("cli-bag");
  make_dataset(tmp);
  REQUIRE(run_cli(tmp, std::string("pretrain --data d.bin --out t.ckpt") + kTinyTrainFlags)
              .exit_code == 0);
  REQUIRE(run_cli(tmp, "embed --ckpt t.ckpt --data d.bin --out e.bin --split train")
              .exit_code == 0);
  RunResult r = run_cli(tmp, "bag --emb e.bin --strategy knn --k 5 --out bags.tsv");
  REQUIRE(r.exit_code == 0);
  std::string bags = slurp(tmp.file("bags.tsv"));
  CHECK(bags.rfind("#bingo-bags v1 strategy=knn param=5 n=160", 0) == 0);
}

TEST_CASE("a manifest is written for failing invocations too") {
  TempDir tmp("cli-manifest");
  RunResult r = run_cli(tmp, "embed --ckpt nope.ckpt --data nope.bin --out e.bin");
  CHECK(r.exit_code == 3);
  std::string manifest = slurp(tmp.file("manifest-embed.txt"));
  CHECK(manifest.find("subcommand = embed") != std::string::npos);
  CHECK(manifest.find("exit_status = 3") != std::string::npos);
  CHECK(manifest.find("start_time = ") != std::string::npos);
}

TEST_CASE("config files feed defaults and flags override them") {
  TempDir tmp("cli-config");
  make_dataset(tmp);
  spit(tmp.file("run.cfg"),
       "epochs = 1\nbatch-size = 16\nbank-capacity = 64\nhidden-dims = 12\n"
       "proj-hidden-dim = 12\nembed-dim = 8\n");
  RunResult r = run_cli(tmp, "pretrain --config run.cfg --data d.bin --out t.ckpt");
  REQUIRE(r.exit_code == 0);
  std::string manifest = slurp(tmp.file("manifest-pretrain.txt"));
  CHECK(manifest.find("config.epochs = 1") != std::string::npos);
  CHECK(manifest.find("config.embed_dim = 8") != std::string::npos);

  RunResult r2 =
      run_cli(tmp, "pretrain --config run.cfg --data d.bin --out t2.ckpt --epochs 0");
  REQUIRE(r2.exit_code == 0);
  std::string manifest2 = slurp(tmp.file("manifest-pretrain.txt"));
  CHECK(manifest2.find("config.epochs = 0") != std::string::npos);
}

TEST_CASE("identical invocations reproduce artifacts byte for byte") {
  TempDir a("cli-det-a");
  TempDir b("cli-det-b");
  for (const TempDir* tmp : {&a, &b}) {
    make_dataset(*tmp);
    REQUIRE(run_cli(*tmp, std::string("pretrain --data d.bin --out t.ckpt --metrics tm.txt") +
                              kTinyTrainFlags)
                .exit_code == 0);
    REQUIRE(run_cli(*tmp, "embed --ckpt t.ckpt --data d.bin --out e.bin --split train")
                .exit_code == 0);
    REQUIRE(run_cli(*tmp, "bag --emb e.bin --strategy knn --k 5 --out bags.tsv").exit_code ==
            0);
    REQUIRE(run_cli(*tmp, std::string("distill --data d.bin --teacher t.ckpt --bags bags.tsv"
                                      " --out s.ckpt --metrics sm.txt") +
                              kTinyTrainFlags)
                .exit_code == 0);
    REQUIRE(
        run_cli(*tmp, "eval --mode knn --ckpt s.ckpt --data d.bin --labels l.bin --k 5"
                      " --out rep.txt")
            .exit_code == 0);
  }
  for (const char* f : {"d.bin", "l.bin", "t.ckpt", "tm.txt", "e.bin", "bags.tsv", "s.ckpt",
                        "sm.txt", "rep.txt"}) {
    CHECK(slurp(a.file(f)) == slurp(b.file(f)));
  }
}

TEST_CASE("sweep produces one report per value plus a summary") {
  TempDir tmp("cli-sweep");
  make_dataset(tmp);
  REQUIRE(run_cli(tmp, std::string("pretrain --data d.bin --out t.ckpt") + kTinyTrainFlags)
              .exit_code == 0);
  RunResult r = run_cli(
      tmp, std::string("sweep --param k --values 1,2 --data d.bin --labels l.bin "
                       "--teacher t.ckpt --outdir sw --eval-k 5") +
               kTinyTrainFlags);
  REQUIRE(r.exit_code == 0);
  bingo::EvalReport r1 = bingo::EvalReport::from_line(slurp(tmp.file("sw/k=1/report.txt")));
  bingo::EvalReport r2 = bingo::EvalReport::from_line(slurp(tmp.file("sw/k=2/report.txt")));
  CHECK(r1.metric == "knn");
  CHECK(r2.metric == "knn");
  std::string summary = slurp(tmp.file("sw/summary.tsv"));
  CHECK(summary.find("k\t1\t") != std::string::npos);
  CHECK(summary.find("k\t2\t") != std::string::npos);

  // parallel jobs produce the same artifacts
  RunResult rp = run_cli(
      tmp, std::string("sweep --param k --values 1,2 --data d.bin --labels l.bin "
                       "--teacher t.ckpt --outdir swp --jobs 2 --eval-k 5") +
               kTinyTrainFlags);
  REQUIRE(rp.exit_code == 0);
  CHECK(slurp(tmp.file("swp/summary.tsv")) == summary);
  CHECK(slurp(tmp.file("swp/k=1/student.ckpt")) == slurp(tmp.file("sw/k=1/student.ckpt")));
}
