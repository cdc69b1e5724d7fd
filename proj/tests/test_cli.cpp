/*
 * Copyright 2026 The KernelDNA Engine Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "support.hpp"

namespace fs = std::filesystem;
using kdna::testing::scratch_dir;

namespace {

struct CliRun {
  int code = -1;
  std::string out;  // stdout and stderr together
};

CliRun kdna_cli(const std::string& args) {
  const std::string cmd = std::string(KDNA_CLI_PATH) + " " + args + " 2>&1";
  CliRun r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string value_after(const std::string& text, const std::string& key) {
  const auto at = text.find(key);
  if (at == std::string::npos) return "";
  const auto start = at + key.size();
  return text.substr(start, text.find_first_of(" \n", start) - start);
}

// One small trained run shared by the tests below.
class TrainedRun : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = scratch_dir("cli");
    const CliRun d = kdna_cli("make-data --out " + root_ + "/data --train 200 --val 100 --seed 3");
    ASSERT_EQ(d.code, 0) << d.out;
    const CliRun t = kdna_cli("train --preset tiny-toy --data " + root_ + "/data --out " + root_ +
                              "/run --epochs 2 --batch 25");
    ASSERT_EQ(t.code, 0) << t.out;
    train_out_ = t.out;
  }
  static std::string root_, train_out_;
};
std::string TrainedRun::root_, TrainedRun::train_out_;

}  // namespace

TEST(Cli, NoArgumentsIsUsageError) {
  const CliRun r = kdna_cli("");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("count"), std::string::npos);
}

TEST(Cli, UnknownFlagIsUsageError) {
  EXPECT_EQ(kdna_cli("count --preset tiny-toy --bogus 3").code, 2);
  EXPECT_EQ(kdna_cli("frobnicate").code, 2);
}

TEST(Cli, MissingConfigIsUsageError) {
  EXPECT_EQ(kdna_cli("count --config /nonexistent/model.ini").code, 2);
  EXPECT_EQ(kdna_cli("count").code, 2);
  EXPECT_EQ(kdna_cli("count --preset tiny-toy --config x.ini").code, 2);
}

TEST(Cli, ModuleErrorsExitOneWithPrefix) {
  const CliRun r = kdna_cli("count --preset bogus");
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(r.out.rfind("error: config: ", 0), 0u) << r.out;
  const std::string dir = scratch_dir("cli_bad");
  std::ofstream(dir + "/bad.ini") << "[model]\n[stage]\nlayout = FX\nchannels = 4\n";
  const CliRun p = kdna_cli("validate --config " + dir + "/bad.ini");
  EXPECT_EQ(p.code, 1);
  EXPECT_EQ(p.out.rfind("error: parse: ", 0), 0u) << p.out;
}

TEST(Cli, CountResNetKdna) {
  const std::string dir = scratch_dir("cli_count");
  const CliRun r = kdna_cli("count --preset resnet18-kdna --out " + dir);
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("total,9238494,"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("(9.24 M)"), std::string::npos) << r.out;
  EXPECT_EQ(slurp(dir + "/cost.csv").rfind("name,params,flops\n", 0), 0u);
  const std::string manifest = slurp(dir + "/manifest.txt");
  for (const char* key : {"tool", "version", "command", "config_hash", "seed"})
    EXPECT_NE(manifest.find(std::string(key) + " = "), std::string::npos) << key;
}

TEST(Cli, ConfigFileMatchesPreset) {
  const std::string dir = scratch_dir("cli_cfg");
  std::ofstream(dir + "/m.ini") << "[model]\nname = mine\nstem = cifar\ninput_channels = 1\ninput_size = 16\n"
                                   "num_classes = 10\nstem_channels = 8\n"
                                   "[stage]\nlayout = FS-SF-SF\nchannels = 8\n"
                                   "[stage]\nlayout = FS-SF-SF\nchannels = 16\nstride = 2\n"
                                   "[stage]\nlayout = FS-SF-SF\nchannels = 32\nstride = 2\n";
  const CliRun a = kdna_cli("count --config " + dir + "/m.ini");
  const CliRun b = kdna_cli("count --preset tiny-toy");
  ASSERT_EQ(a.code, 0) << a.out;
  EXPECT_EQ(value_after(a.out, "total,"), value_after(b.out, "total,"));
}

TEST_F(TrainedRun, TrainWritesRunDirectory) {
  for (const char* f : {"best.ckpt", "last.ckpt", "train_log.csv", "config.ini", "manifest.txt"})
    EXPECT_TRUE(fs::exists(root_ + "/run/" + f)) << f;
  EXPECT_NE(train_out_.find("best_val_acc="), std::string::npos);
  const std::string log = slurp(root_ + "/run/train_log.csv");
  EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 3);
}

TEST_F(TrainedRun, FuseThenEvalGivesIdenticalAccuracy) {
  const CliRun f = kdna_cli("fuse --ckpt " + root_ + "/run/best.ckpt --out " + root_ + "/fused.ckpt");
  ASSERT_EQ(f.code, 0) << f.out;
  const CliRun a = kdna_cli("eval --ckpt " + root_ + "/run/best.ckpt --data " + root_ + "/data");
  const CliRun b = kdna_cli("eval --ckpt " + root_ + "/fused.ckpt --data " + root_ + "/data");
  ASSERT_EQ(a.code, 0) << a.out;
  ASSERT_EQ(b.code, 0) << b.out;
  EXPECT_EQ(value_after(a.out, "fused="), "0");
  EXPECT_EQ(value_after(b.out, "fused="), "1");
  EXPECT_FALSE(value_after(a.out, "accuracy=").empty());
  EXPECT_EQ(value_after(a.out, "accuracy="), value_after(b.out, "accuracy="));
}

TEST_F(TrainedRun, RetrainIsBitIdenticalAndOverwrites) {
  const CliRun t = kdna_cli("train --preset tiny-toy --data " + root_ + "/data --out " + root_ +
                            "/run2 --epochs 2 --batch 25");
  ASSERT_EQ(t.code, 0) << t.out;
  EXPECT_EQ(slurp(root_ + "/run2/last.ckpt"), slurp(root_ + "/run/last.ckpt"));
  const CliRun again = kdna_cli("train --preset tiny-toy --data " + root_ + "/data --out " + root_ +
                                "/run2 --epochs 2 --batch 25");
  ASSERT_EQ(again.code, 0) << again.out;
  EXPECT_EQ(slurp(root_ + "/run2/last.ckpt"), slurp(root_ + "/run/last.ckpt"));
  EXPECT_EQ(slurp(root_ + "/run2/train_log.csv"), slurp(root_ + "/run/train_log.csv"));
}

TEST_F(TrainedRun, CkaAndAttentionExports) {
  const CliRun c = kdna_cli("cka --ckpt " + root_ + "/run/best.ckpt --data " + root_ + "/data --samples 64 --out " +
                            root_ + "/cka");
  ASSERT_EQ(c.code, 0) << c.out;
  EXPECT_NE(c.out.find("within_parent"), std::string::npos);
  EXPECT_EQ(slurp(root_ + "/cka/cka.csv").rfind("layer,stage1.conv1,", 0), 0u);
  EXPECT_EQ(slurp(root_ + "/cka/cka.pgm").rfind("P5\n", 0), 0u);
  const CliRun e = kdna_cli("export-attn --ckpt " + root_ + "/run/best.ckpt --out " + root_ + "/attn");
  ASSERT_EQ(e.code, 0) << e.out;
  EXPECT_TRUE(fs::exists(root_ + "/attn/attn_stage1.conv2.pgm"));
  EXPECT_TRUE(fs::exists(root_ + "/attn/attn_stage1.conv2.csv"));
}

TEST_F(TrainedRun, MissingCheckpointExitsOne) {
  const CliRun r = kdna_cli("eval --ckpt " + root_ + "/nope.ckpt --data " + root_ + "/data");
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(r.out.rfind("error: input: ", 0), 0u) << r.out;
}

TEST(Cli, BenchWritesReports) {
  const std::string dir = scratch_dir("cli_bench");
  const CliRun r = kdna_cli("bench --preset tiny-toy --batch 2 --variants standard,kdna-fused --out " + dir +
                         "/report.csv");
  ASSERT_EQ(r.code, 0) << r.out;
  const std::string csv = slurp(dir + "/report.csv");
  EXPECT_EQ(csv.rfind("variant,batch,throughput,latency_ms,peak_kernel_bytes,params,flops", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  EXPECT_TRUE(fs::exists(dir + "/report.md"));
  EXPECT_TRUE(fs::exists(dir + "/report.csv.manifest.txt"));
  EXPECT_EQ(kdna_cli("bench --preset tiny-toy --iters 10").code, 1);
}
