#include <gtest/gtest.h>

#include "mosquitonet/bench.hpp"

using namespace mqnet;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.height = c.width = 32;
  c.conv_channels = {4, 8};
  c.fc_sizes = {16};
  return c;
}

}  // namespace

TEST(Bench, NoopForwardMeasuresHarnessOverhead) {
  const BenchReport r = run_bench("noop", 0, [](const Tensor& x) { return x; }, Shape{1, 3, 120, 120});
  EXPECT_EQ(r.latencies_ms.size(), 100u);
  EXPECT_LT(r.mean_ms, 0.01);
}

TEST(Bench, WarmupCallsAreNotRecorded) {
  std::size_t calls = 0;
  const BenchReport r = run_bench(
      "count", 0,
      [&](const Tensor& x) {
        ++calls;
        return x;
      },
      Shape{2}, 7, 13);
  EXPECT_EQ(calls, 20u);
  EXPECT_EQ(r.latencies_ms.size(), 13u);
  EXPECT_EQ(r.warmup, 7u);
  EXPECT_EQ(r.runs, 13u);
}

TEST(Bench, RealForwardStatistics) {
  const MosquitoNet m = MosquitoNet::build(small_config(), RngSeed{1});
  const BenchReport r = run_bench(m);
  ASSERT_EQ(r.latencies_ms.size(), 100u);
  EXPECT_GE(r.mean_ms, r.min_ms);
  EXPECT_LE(r.mean_ms, r.max_ms);
  EXPECT_GE(r.median_ms, r.min_ms);
  EXPECT_LE(r.median_ms, r.max_ms);
  EXPECT_GT(r.min_ms, 0.0);
  EXPECT_EQ(r.params, count_parameters(m));
  EXPECT_EQ(r.input_shape, (Shape{1, 3, 32, 32}));
  EXPECT_FALSE(r.machine.empty());
}

TEST(Bench, RepeatedMeansAreStable) {
  const MosquitoNet m = MosquitoNet::build(small_config(), RngSeed{1});
  const BenchReport a = run_bench(m);
  const BenchReport b = run_bench(m);
  EXPECT_LT(std::max(a.mean_ms, b.mean_ms) / std::min(a.mean_ms, b.mean_ms), 3.0);
}

TEST(Bench, SummaryHandValues) {
  BenchReport r;
  r.latencies_ms = {4, 1, 3, 2};
  summarize_latencies(r);
  EXPECT_DOUBLE_EQ(r.mean_ms, 2.5);
  EXPECT_DOUBLE_EQ(r.median_ms, 2.5);
  EXPECT_DOUBLE_EQ(r.min_ms, 1);
  EXPECT_DOUBLE_EQ(r.max_ms, 4);
  EXPECT_DOUBLE_EQ(r.std_ms, std::sqrt(1.25));
  r.latencies_ms = {5, 1, 3};
  summarize_latencies(r);
  EXPECT_DOUBLE_EQ(r.median_ms, 3);
}

TEST(BenchTable, SingleReport) {
  BenchReport r;
  r.name = "only";
  r.input_shape = {1, 3, 120, 120};
  r.params = 1234567;
  r.mean_ms = 1.5;
  const std::string t = render_table({r});
  EXPECT_EQ(std::count(t.begin(), t.end(), '\n'), 2);
  EXPECT_NE(t.find("Input Size (Ch,H,W)"), std::string::npos);
  EXPECT_NE(t.find("3*120*120"), std::string::npos);
  EXPECT_NE(t.find("1,234,567"), std::string::npos);
  EXPECT_NE(t.find("1.500"), std::string::npos);
}

TEST(BenchTable, SortedByParamsAscending) {
  BenchReport big, small;
  big.name = "big";
  big.params = 900;
  small.name = "small";
  small.params = 5;
  const std::string t = render_table({big, small});
  EXPECT_LT(t.find("small"), t.find("big"));
}

TEST(BenchTable, ReferenceRowsVerbatimFromFile) {
  const auto rows = load_baselines(MOSQUITONET_DATA_DIR "/reference_baselines.tsv");
  ASSERT_FALSE(rows.empty());
  EXPECT_EQ(rows.front().params, "7,472,002");
  EXPECT_EQ(rows.front().cpu_ms, "0.016");
  BenchReport r;
  r.name = "measured";
  r.params = 7504770;
  const std::string t = render_table({r}, rows);
  EXPECT_NE(t.find("7,472,002"), std::string::npos);
  EXPECT_NE(t.find("0.016"), std::string::npos);
  EXPECT_NE(t.find("-- reference --"), std::string::npos);
}

TEST(BenchTable, BaselinesExportRoundTrips) {
  BenchReport r;
  r.name = "x";
  r.input_shape = {1, 3, 8, 8};
  r.params = 1000;
  r.mean_ms = 0.25;
  const auto rows = parse_baselines(render_baselines({r}));
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].name, "x");
  EXPECT_EQ(rows[0].input, "3*8*8");
  EXPECT_EQ(rows[0].params, "1,000");
  EXPECT_EQ(rows[0].cpu_ms, "0.250");
  EXPECT_THROW(parse_baselines("a\tb\tc\n"), text::ParseError);
  EXPECT_THROW(parse_baselines("a\tb\tnot-a-number\t1\n"), text::ParseError);
}

TEST(BenchTable, GroupThousands) {
  EXPECT_EQ(group_thousands(0), "0");
  EXPECT_EQ(group_thousands(999), "999");
  EXPECT_EQ(group_thousands(1000), "1,000");
  EXPECT_EQ(group_thousands(7472002), "7,472,002");
}
