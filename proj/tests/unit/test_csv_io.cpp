#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include <functional>
#include <random>

#include "apsope/csv_io.hpp"
#include "apsope/rng.hpp"

using namespace apsope;

namespace {

std::string tmp_file(const std::string& name, const std::string& content) {
  std::filesystem::create_directories(APSOPE_TEST_TMP);
  const std::string path = std::string(APSOPE_TEST_TMP) + "/" + name;
  std::ofstream(path) << content;
  return path;
}

CsvSchema basic_schema() {
  CsvSchema s;
  s.reward = "y";
  s.action = "a";
  s.features = {"x1", "x2"};
  return s;
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorCode::kConfig;
}

}  // namespace

TEST(LoadCsv, RelabelsBinaryActions) {
  const auto path = tmp_file("three.csv", "y,a,x1,x2\n1.5,0,0.1,2\n2.5,1,0.2,3\n3.5,0,0.3,4\n");
  const LogDataset ds = load_csv(path, basic_schema());
  EXPECT_EQ(ds.m, 2);
  EXPECT_EQ(ds.actions, (std::vector<Action>{1, 2, 1}));
  EXPECT_EQ(ds.action_labels, (std::vector<std::string>{"0", "1"}));
  EXPECT_EQ(ds.size(), 3u);
  EXPECT_DOUBLE_EQ(ds.contexts.values(1, 1), 3.0);
}

TEST(LoadCsv, DeclaredOrderAndNumericSort) {
  const auto path = tmp_file("labels.csv", "y,a,x1,x2\n1,10,0,0\n2,9,1,1\n3,control,2,2\n");
  CsvSchema s = basic_schema();
  s.action_labels = {"control", "9", "10"};
  const LogDataset ds = load_csv(path, s);
  EXPECT_EQ(ds.actions, (std::vector<Action>{3, 2, 1}));

  const auto numeric = tmp_file("numeric.csv", "y,a,x1,x2\n1,10,0,0\n2,9,1,1\n3,2,2,2\n");
  const LogDataset dn = load_csv(numeric, basic_schema());
  EXPECT_EQ(dn.action_labels, (std::vector<std::string>{"2", "9", "10"}));
  EXPECT_EQ(dn.actions, (std::vector<Action>{3, 2, 1}));
}

TEST(LoadCsv, UnknownAction) {
  const auto path = tmp_file("unknown.csv", "y,a,x1,x2\n1,0,0,0\n2,7,1,1\n");
  CsvSchema s = basic_schema();
  s.action_labels = {"0", "1"};
  EXPECT_EQ(code_of([&] { load_csv(path, s); }), ErrorCode::kUnknownAction);
}

TEST(LoadCsv, ParseErrorNamesRowAndColumn) {
  const auto path = tmp_file("bad.csv", "y,a,x1,x2\n1,0,0,0\n2,1,abc,1\n");
  try {
    load_csv(path, basic_schema());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kParseError);
    const std::string what = e.what();
    EXPECT_NE(what.find("row 3"), std::string::npos) << what;
    EXPECT_NE(what.find("x1"), std::string::npos) << what;
  }
  EXPECT_EQ(code_of([&] { load_csv(tmp_file("nocol.csv", "y,a,x1\n1,0,0\n"), basic_schema()); }),
            ErrorCode::kParseError);
}

TEST(LoadCsv, MissingValuePolicies) {
  const auto path = tmp_file("nan.csv", "y,a,x1,x2\n1,0,0,0\nNaN,1,1,1\n3,1,2,2\n");
  EXPECT_EQ(code_of([&] { load_csv(path, basic_schema()); }), ErrorCode::kMissingValue);
  CsvSchema s = basic_schema();
  s.missing = MissingPolicy::kDropRow;
  LoadReport report;
  const LogDataset ds = load_csv(path, s, &report);
  EXPECT_EQ(ds.size(), 2u);
  EXPECT_EQ(report.dropped_rows, 1u);
  EXPECT_FALSE(report.warnings.empty());
}

TEST(LoadCsv, EmptyFile) {
  EXPECT_EQ(code_of([&] { load_csv(tmp_file("empty.csv", ""), basic_schema()); }), ErrorCode::kEmptyDataset);
  EXPECT_EQ(code_of([&] { load_csv(tmp_file("header.csv", "y,a,x1,x2\n"), basic_schema()); }),
            ErrorCode::kEmptyDataset);
}

TEST(LoadCsv, QuotedFieldsAndDiscrete) {
  const auto path = tmp_file("quoted.csv", "y,a,x1,x2,seg,cost\n1,\"B, promo\",0.5,1,3,0.25\n2,A,1.5,2,4,0.5\n");
  CsvSchema s = basic_schema();
  s.discrete = {"seg"};
  s.extra_rewards = {"cost"};
  const LogDataset ds = load_csv(path, s);
  EXPECT_EQ(ds.action_labels, (std::vector<std::string>{"A", "B, promo"}));
  EXPECT_EQ(ds.actions, (std::vector<Action>{2, 1}));
  EXPECT_EQ(ds.contexts.discrete(1, 0), 4);
  ASSERT_EQ(ds.extra_rewards.size(), 1u);
  EXPECT_EQ(ds.extra_rewards[0].second, (std::vector<double>{0.25, 0.5}));
}

TEST(WriteCsv, RoundTrip) {
  Engine e(3);
  std::normal_distribution<double> nd(0, 1);
  LogDataset ds;
  RowMatrix x(50, 2);
  IntRowMatrix d(50, 1);
  for (Eigen::Index i = 0; i < 50; ++i) {
    x(i, 0) = nd(e) * 1e-7;
    x(i, 1) = nd(e) * 1e9;
    d(i, 0) = static_cast<int>(i % 3);
    ds.actions.push_back(static_cast<Action>(i % 3) + 1);
    ds.rewards.push_back(nd(e) / 3.0);
  }
  ds.contexts = ContextMatrix(x, d);
  ds.m = 3;
  ds.action_labels = {"ctl", "t1", "t2"};
  std::vector<double> extra(ds.rewards.size());
  for (auto& v : extra) v = nd(e);
  ds.extra_rewards.push_back({"y2", extra});

  CsvSchema s = basic_schema();
  s.discrete = {"seg"};
  s.extra_rewards = {"y2"};
  const std::string path = std::string(APSOPE_TEST_TMP) + "/roundtrip.csv";
  std::filesystem::create_directories(APSOPE_TEST_TMP);
  write_csv(ds, path, s);
  s.action_labels = ds.action_labels;
  const LogDataset back = load_csv(path, s);
  EXPECT_EQ(back.actions, ds.actions);
  EXPECT_EQ(back.rewards, ds.rewards);
  EXPECT_EQ(back.contexts.values, ds.contexts.values);
  EXPECT_EQ(back.contexts.discrete, ds.contexts.discrete);
  EXPECT_EQ(back.action_labels, ds.action_labels);
  EXPECT_EQ(back.extra_rewards, ds.extra_rewards);
}
