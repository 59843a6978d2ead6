#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <set>
#include <sstream>

#include "cli.hpp"
#include "dotfan/augment.hpp"
#include "dotfan/io.hpp"
#include "dotfan/synth_data.hpp"

using namespace dotfan;
namespace fs = std::filesystem;

namespace {

const fs::path& root() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "dotfan_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string p(const std::string& name) { return (root() / name).string(); }

int run_cli(std::vector<std::string> args, std::string* err_text = nullptr) {
  args.insert(args.begin(), "dotfan");
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  if (err_text) *err_text = err.str();
  return code;
}

std::string text(const std::string& path) { return io::read_text(path); }

std::size_t rows(const std::string& csv) {
  const auto t = text(csv);
  return static_cast<std::size_t>(std::count(t.begin(), t.end(), '\n')) - 1;  // minus header
}

// Files below `dir` other than manifests, relative to it.
std::set<std::string> outputs_on_disk(const fs::path& dir) {
  std::set<std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), dir).generic_string();
    if (rel.rfind("manifest.csv", 0) != 0) out.insert(rel);
  }
  return out;
}

// A trained toy pipeline shared by the synthesis tests.
struct Pipeline {
  std::string config = p("tiny.cfg");
  std::string data = p("data/manifest.csv");
  std::string test_data = p("test_data/manifest.csv");
  std::string ckpt = p("ckpt");

  Pipeline() {
    io::write_text(config,
                   "image_size = 16\nbase_channels = 4\nnum_downsamples = 2\nnum_residual_blocks = 1\n"
                   "d_l = 8\nd_id = 16\nbatch_size = 4\ntotal_iterations = 6\nepochs = 3\n"
                   "lr_decay_start_epoch = 1\ncritic_steps_per_gen_step = 1\npretrain_epochs = 2\n");
    REQUIRE(run_cli({"make-data", "--config", config, "--out", p("data"), "--identities", "4", "--per-identity",
                 "3", "--seed", "5"}) == 0);
    REQUIRE(run_cli({"make-data", "--config", config, "--out", p("test_data"), "--identities", "3",
                 "--per-identity", "3", "--identity-offset", "100", "--seed", "6"}) == 0);
    REQUIRE(run_cli({"pretrain-fem", "--config", config, "--data", data, "--checkpoint-dir", ckpt}) == 0);
    REQUIRE(run_cli({"pretrain-fsr", "--config", config, "--data", data, "--checkpoint-dir", ckpt}) == 0);
    REQUIRE(run_cli({"train", "--config", config, "--data", data, "--checkpoint-dir", ckpt}) == 0);
  }
};

const Pipeline& pipeline() {
  static const Pipeline pl;
  return pl;
}

}  // namespace

TEST_CASE("make-data is deterministic and guards existing output") {
  const auto& pl = pipeline();
  CHECK(rows(pl.data) == 12);
  REQUIRE(run_cli({"make-data", "--config", pl.config, "--out", p("data_again"), "--identities", "4",
               "--per-identity", "3", "--seed", "5"}) == 0);
  CHECK(text(p("data_again/manifest.csv")) == text(pl.data));
  CHECK(run_cli({"make-data", "--config", pl.config, "--out", p("data_again"), "--identities", "4"}) == cli::kUsageError);
  CHECK(run_cli({"make-data", "--config", pl.config, "--out", p("data_again"), "--identities", "2", "--overwrite"}) ==
        0);
  CHECK(rows(p("data_again/manifest.csv")) == 40);
  CHECK(outputs_on_disk(p("data_again")).size() == 40);
  CHECK(run_cli({"make-data", "--out", p("x"), "--identities", "0"}) == cli::kUsageError);
}

TEST_CASE("pretraining and training write checkpoints and logs") {
  const auto& pl = pipeline();
  for (const char* f : {"fem.ckpt", "fsr.ckpt", "encoder.ckpt", "generator.ckpt", "discriminator.ckpt",
                        "train_state.ckpt", "train_log.jsonl", "fem_log.jsonl", "fsr_log.jsonl"}) {
    CHECK(fs::exists(fs::path(pl.ckpt) / f));
  }
  CHECK(rows(pl.ckpt + "/train_log.jsonl") + 1 == 6);
  CHECK(run_cli({"pretrain-fem", "--config", pl.config, "--data", pl.data, "--checkpoint-dir", pl.ckpt}) ==
        cli::kUsageError);
  CHECK(run_cli({"train", "--config", pl.config, "--data", pl.data, "--checkpoint-dir", pl.ckpt}) == cli::kUsageError);
}

TEST_CASE("a resumed CLI training run matches the uninterrupted one") {
  const auto& pl = pipeline();
  const auto dir = p("ckpt_resume");
  fs::create_directories(dir);
  fs::copy_file(pl.ckpt + "/fem.ckpt", dir + "/fem.ckpt");
  fs::copy_file(pl.ckpt + "/fsr.ckpt", dir + "/fsr.ckpt");
  REQUIRE(run_cli({"train", "--config", pl.config, "--data", pl.data, "--checkpoint-dir", dir, "--stop-at", "4"}) == 0);
  CHECK(rows(dir + "/train_log.jsonl") + 1 == 4);
  REQUIRE(run_cli({"train", "--config", pl.config, "--data", pl.data, "--checkpoint-dir", dir, "--resume"}) == 0);
  CHECK(text(dir + "/train_log.jsonl") == text(pl.ckpt + "/train_log.jsonl"));
  for (const char* f : {"encoder.ckpt", "generator.ckpt", "discriminator.ckpt", "train_state.ckpt"}) {
    CHECK(text(dir + "/" + f) == text(pl.ckpt + "/" + f));
  }
  CHECK(run_cli({"train", "--config", pl.config, "--data", pl.data, "--checkpoint-dir", dir, "--resume", "--seed",
             "9"}) == cli::kIncompatible);
}

TEST_CASE("frontalize writes one output per readable input") {
  const auto& pl = pipeline();
  REQUIRE(run_cli({"frontalize", pl.data, "--checkpoint-dir", pl.ckpt, "--out", p("front")}) == 0);
  CHECK(rows(p("front/manifest.csv")) == 12);
  const auto records = augment::read_output_manifest(p("front/manifest.csv"), 10, 4);
  std::set<std::string> listed;
  for (const auto& r : records) {
    listed.insert(r.output);
    CHECK(r.pose == "frontal");
    CHECK(r.illumination == 13);
    CHECK(r.identity >= 0);
  }
  CHECK(listed == outputs_on_disk(p("front")));

  io::write_text(p("broken.png"), "not a png");
  std::string err;
  REQUIRE(run_cli({"frontalize", p("data/0/0.png"), p("broken.png"), "--checkpoint-dir", pl.ckpt, "--out",
               p("front2")},
              &err) == 0);
  CHECK(err.find("warning") != std::string::npos);
  CHECK(rows(p("front2/manifest.csv")) == 1);
  CHECK(run_cli({"frontalize", p("broken.png"), "--checkpoint-dir", pl.ckpt, "--out", p("front3")}) ==
        cli::kDataError);
  CHECK(run_cli({"frontalize", pl.data, "--checkpoint-dir", p("nowhere"), "--out", p("front4")}) == cli::kIncompatible);
}

TEST_CASE("rotate and relight produce full grids") {
  const auto& pl = pipeline();
  const auto a = p("data/0/0.png"), b = p("data/1/0.png");
  REQUIRE(run_cli({"rotate", a, b, "--poses", "yaw-45,frontal,yaw+45", "--checkpoint-dir", pl.ckpt, "--out",
               p("rot")}) == 0);
  CHECK(rows(p("rot/manifest.csv")) == 6);
  REQUIRE(run_cli({"relight", a, "--labels", "0,4,8,12", "--poses", "sweep", "--checkpoint-dir", pl.ckpt, "--out",
               p("relight")}) == 0);
  CHECK(rows(p("relight/manifest.csv")) == 28);
  CHECK(outputs_on_disk(p("relight")).size() == 28);
  CHECK(run_cli({"relight", a, "--labels", "14", "--checkpoint-dir", pl.ckpt, "--out", p("r2")}) == cli::kUsageError);
  CHECK(run_cli({"rotate", a, "--poses", "yaw60", "--checkpoint-dir", pl.ckpt, "--out", p("r3")}) == cli::kUsageError);

  REQUIRE(run_cli({"relight", a, "--labels", "0,4,8,12", "--poses", "sweep", "--checkpoint-dir", pl.ckpt, "--out",
               p("relight"), "--overwrite"}) == 0);
  const auto first = text(p("relight/manifest.csv"));
  REQUIRE(run_cli({"relight", a, "--labels", "0,4,8,12", "--poses", "sweep", "--checkpoint-dir", pl.ckpt, "--out",
               p("relight_b")}) == 0);
  CHECK(text(p("relight_b/manifest.csv")) == first);
}

TEST_CASE("augment doubles and quadruples the manifest") {
  const auto& pl = pipeline();
  REQUIRE(run_cli({"augment", "--data", pl.data, "--multiplier", "1", "--checkpoint-dir", pl.ckpt, "--seed", "3"}) == 0);
  REQUIRE(run_cli({"augment", "--data", pl.data, "--multiplier", "3", "--checkpoint-dir", pl.ckpt, "--seed", "3"}) == 0);
  const auto one = p("data_aug1/manifest.csv"), three = p("data_aug3/manifest.csv");
  CHECK(rows(one) == 24);
  CHECK(rows(three) == 48);
  const auto source = synth::read_manifest(pl.data);
  std::set<int> ids;
  for (const auto& r : source.rows) ids.insert(r.identity);
  const auto combined = synth::read_manifest(three);
  std::size_t synthesized = 0;
  for (const auto& r : combined.rows) {
    CHECK(ids.count(r.identity) == 1);
    synthesized += r.origin == "synth";
  }
  CHECK(synthesized == 36);
  CHECK(synth::load_images(three, combined).size() == 48);

  CHECK(run_cli({"augment", "--data", pl.data, "--checkpoint-dir", pl.ckpt}) == cli::kUsageError);
  REQUIRE(run_cli({"augment", "--data", pl.data, "--checkpoint-dir", pl.ckpt, "--seed", "3", "--out", p("aug_b")}) == 0);
  CHECK(text(p("aug_b/manifest.csv")) == text(one));  // siblings share relative source paths
  REQUIRE(run_cli({"augment", "--data", pl.data, "--checkpoint-dir", pl.ckpt, "--seed", "3", "--overwrite"}) == 0);
  CHECK(text(one) == text(p("aug_b/manifest.csv")));
  CHECK(run_cli({"augment", "--data", pl.data, "--multiplier", "2", "--checkpoint-dir", pl.ckpt}) == cli::kUsageError);
}

TEST_CASE("interpolate writes evenly spaced frames") {
  const auto& pl = pipeline();
  REQUIRE(run_cli({"interpolate", "--left", p("data/0/0.png"), "--right", p("data/2/1.png"), "--steps", "5",
               "--checkpoint-dir", pl.ckpt, "--out", p("morph")}) == 0);
  CHECK(rows(p("morph/manifest.csv")) == 5);
  CHECK(text(p("morph/manifest.csv")).find("\n4,1,frame_004.png\n") != std::string::npos);
  CHECK(run_cli({"interpolate", "--left", p("data/0/0.png"), "--right", p("data/2/1.png"), "--steps", "1",
             "--checkpoint-dir", pl.ckpt, "--out", p("morph2")}) == cli::kUsageError);
}

TEST_CASE("evaluate writes a report and rejects overlapping identities") {
  const auto& pl = pipeline();
  REQUIRE(run_cli({"evaluate", "--config", pl.config, "--train", pl.data, "--test", pl.test_data, "--out", p("eval"),
               "--roc"}) == 0);
  CHECK(fs::exists(p("eval/report.json")));
  CHECK(text(p("eval/roc.csv")).rfind("threshold,far,tar\n", 0) == 0);
  CHECK(run_cli({"evaluate", "--config", pl.config, "--train", pl.data, "--test", pl.data, "--out", p("eval2")}) ==
        cli::kUsageError);
  CHECK(run_cli({"evaluate", "--config", pl.config, "--train", p("missing.csv"), "--test", pl.data, "--out",
             p("eval3")}) == cli::kDataError);
}

TEST_CASE("plot renders deterministic SVG and rejects bad logs") {
  const auto& pl = pipeline();
  REQUIRE(run_cli({"plot", "--log", pl.ckpt + "/train_log.jsonl", "--out", p("plot1")}) == 0);
  REQUIRE(run_cli({"plot", "--log", pl.ckpt + "/train_log.jsonl", "--out", p("plot2")}) == 0);
  CHECK(text(p("plot1/losses.svg")) == text(p("plot2/losses.svg")));
  CHECK(text(p("plot1/losses.svg")).rfind("<svg", 0) == 0);
  REQUIRE(run_cli({"evaluate", "--config", pl.config, "--train", pl.data, "--test", pl.test_data, "--out",
               p("eval_b")}) == 0);
  CHECK(run_cli({"plot", "--report", p("eval_b/report.json"), "--out", p("plot3")}) == 0);

  io::write_text(p("empty.jsonl"), "");
  CHECK(run_cli({"plot", "--log", p("empty.jsonl"), "--out", p("plot4")}) == cli::kDataError);
  CHECK_FALSE(fs::exists(p("plot4/losses.svg")));
  io::write_text(p("bad.jsonl"), "{\"step\": 0, \"x\": 1}\n{oops\n");
  std::string err;
  CHECK(run_cli({"plot", "--log", p("bad.jsonl"), "--out", p("plot5")}, &err) == cli::kDataError);
  CHECK(err.find("bad.jsonl:2") != std::string::npos);
}

TEST_CASE("exit codes follow the documented contract") {
  const auto& pl = pipeline();
  CHECK(run_cli({}) == cli::kUsageError);
  CHECK(run_cli({"frobnicate"}) == cli::kUsageError);
  CHECK(run_cli({"make-data", "--bogus"}) == cli::kUsageError);
  CHECK(run_cli({"--help"}) == cli::kSuccess);
  CHECK(run_cli({"pretrain-fem", "--data", p("missing.csv"), "--checkpoint-dir", p("c1")}) == cli::kDataError);
  io::write_text(p("bad.cfg"), "learning_rate = 1\n");
  CHECK(run_cli({"pretrain-fem", "--config", p("bad.cfg"), "--data", pl.data, "--checkpoint-dir", p("c2")}) ==
        cli::kIncompatible);
  CHECK(run_cli({"make-data", "--config", p("no.cfg"), "--out", p("c3")}) == cli::kIncompatible);
  auto wide = text(pl.config);
  wide.replace(wide.find("d_id = 16"), 9, "d_id = 32");
  io::write_text(p("wide.cfg"), wide);
  CHECK(run_cli({"train", "--config", p("wide.cfg"), "--data", pl.data, "--checkpoint-dir", pl.ckpt, "--resume"}) ==
        cli::kIncompatible);
  io::write_text(p("big.cfg"), "base_channels = 4\n");  // 32 px networks against 16 px images
  CHECK(run_cli({"pretrain-fsr", "--config", p("big.cfg"), "--data", pl.data, "--checkpoint-dir", p("c4")}) ==
        cli::kDataError);
}
