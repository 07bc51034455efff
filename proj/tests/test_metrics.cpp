#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "lmprobe/gateway.hpp"
#include "lmprobe/metrics.hpp"
#include "testutil.hpp"

using lmprobe::ConfidenceRecord;
using lmprobe::consistency;
using lmprobe::coverage_rates;
using lmprobe::expected_accuracy_oracle;
using lmprobe::Gateway;
using lmprobe::json;
using lmprobe::overconfidence;
using lmprobe::PredictionEquality;
using lmprobe::PredictionRecord;
using lmprobe::PredictionTable;
using lmprobe::resample_accuracy;
using lmprobe::sharing_rate;
using lmprobe::SubjectRelationPair;
using lmprobe::UndefinedBiasError;
using lmprobe::UndefinedMetricError;

namespace {

PredictionRecord rec(const std::string& id, bool correct,
                     const std::string& key = "k",
                     const std::string& template_id = "t0",
                     int surface = 0) {
  PredictionRecord r;
  r.prompt_id = id;
  r.prediction_key = key;
  r.correct = correct;
  r.template_id = template_id;
  r.surface_index = surface;
  return r;
}

/// Table from a correctness matrix: row = pair, column = template.
PredictionTable table_from_matrix(
    const std::vector<std::vector<int>>& matrix) {
  PredictionTable t;
  for (std::size_t p = 0; p < matrix.size(); ++p) {
    const SubjectRelationPair pair{"s" + std::to_string(p), "R"};
    for (std::size_t c = 0; c < matrix[p].size(); ++c) {
      t.add(pair, rec("p" + std::to_string(p) + "t" + std::to_string(c),
                      matrix[p][c] == 1, "k" + std::to_string(p) +
                          std::to_string(c),
                      "t" + std::to_string(c)));
    }
  }
  return t;
}

}  // namespace

// ===========================================================================
// Accuracy resampling
// ===========================================================================

TEST_CASE("resampled accuracy") {
  SECTION("all records correct collapses to 1") {
    const auto t = table_from_matrix({{1, 1}, {1, 1, 1}});
    const auto r = resample_accuracy(t, 500, 3);
    CHECK(r.mean == 1.0);
    CHECK(r.range == 0.0);
    CHECK(r.sd == 0.0);
  }

  SECTION("two-pair draw distribution") {
    // Pair 1 flips between correct and incorrect, pair 2 always correct:
    // draw values are 0.5 and 1.0 with equal probability.
    const auto t = table_from_matrix({{1, 0}, {1, 1}});
    const int n = 20000;
    const auto r = resample_accuracy(t, n, 17);
    CHECK(r.range == 0.5);
    CHECK(std::abs(r.mean - 0.75) <= 3.0 * r.sd / std::sqrt(double(n)));
    CHECK(std::abs(r.sd - 0.25) < 0.01);
    CHECK(expected_accuracy_oracle(t) == 0.75);
  }

  SECTION("same seed gives the identical sample vector") {
    const auto t = table_from_matrix({{1, 0, 1}, {0, 0}, {1}});
    const auto a = resample_accuracy(t, 200, 99);
    const auto b = resample_accuracy(t, 200, 99);
    const auto c = resample_accuracy(t, 200, 100);
    CHECK(a.samples.values == b.samples.values);
    CHECK_FALSE(a.samples.values == c.samples.values);
  }

  SECTION("sampler agrees with the closed-form oracle, seed swept") {
    lmprobe::Rng rng(2024);
    for (int round = 0; round < 20; ++round) {
      const auto t = testutil::make_random_table(rng, 12, 5, false);
      const int n = 4000;
      const auto r = resample_accuracy(t, n, rng.next());
      const double expected = expected_accuracy_oracle(t);
      const double slack =
          3.0 * std::max(r.sd, 1e-9) / std::sqrt(double(n)) + 1e-12;
      CHECK(std::abs(r.mean - expected) <= slack);
      CHECK(testutil::oracle_expected_accuracy(t) ==
            Catch::Approx(expected).margin(1e-12));
    }
  }

  SECTION("empty table is an error") {
    CHECK_THROWS_AS(resample_accuracy(PredictionTable{}, 10, 0),
                    UndefinedMetricError);
  }

  SECTION("oracle examples") {
    CHECK(expected_accuracy_oracle(table_from_matrix({{0, 0}, {0}})) == 0.0);
    CHECK(expected_accuracy_oracle(table_from_matrix({{1, 0, 0, 0}})) == 0.25);
  }
}

// ===========================================================================
// Consistency
// ===========================================================================

TEST_CASE("consistency follows the pairwise match rate") {
  SECTION("identical predictions per pair give 1") {
    PredictionTable t;
    t.add({"s0", "R"}, rec("a", true, "x"));
    t.add({"s0", "R"}, rec("b", true, "x"));
    t.add({"s1", "R"}, rec("c", false, "y"));
    t.add({"s1", "R"}, rec("d", false, "y"));
    t.add({"s1", "R"}, rec("e", false, "y"));
    CHECK(consistency(t, PredictionEquality::kToken).value == 1.0);
  }

  SECTION("[a, a, b] gives exactly one third") {
    PredictionTable t;
    t.add({"s0", "R"}, rec("p1", true, "a"));
    t.add({"s0", "R"}, rec("p2", true, "a"));
    t.add({"s0", "R"}, rec("p3", true, "b"));
    CHECK(consistency(t, PredictionEquality::kToken).value ==
          Catch::Approx(1.0 / 3.0).margin(1e-15));
  }

  SECTION("macro-average over pairs") {
    PredictionTable t;
    t.add({"s0", "R"}, rec("p1", true, "a"));
    t.add({"s0", "R"}, rec("p2", true, "a"));
    t.add({"s0", "R"}, rec("p3", true, "b"));
    t.add({"s1", "R"}, rec("q1", true, "z"));
    t.add({"s1", "R"}, rec("q2", true, "z"));
    CHECK(consistency(t, PredictionEquality::kToken).value ==
          Catch::Approx(2.0 / 3.0).margin(1e-15));
  }

  SECTION("single-record pairs are excluded and counted") {
    PredictionTable t;
    t.add({"s0", "R"}, rec("p1", true, "a"));
    t.add({"s1", "R"}, rec("q1", true, "z"));
    t.add({"s1", "R"}, rec("q2", true, "z"));
    const auto r = consistency(t, PredictionEquality::kToken);
    CHECK(r.value == 1.0);
    CHECK(r.excluded_pairs == 1);
    CHECK(r.counted_pairs == 1);
  }

  SECTION("no pair with two records is undefined") {
    PredictionTable t;
    t.add({"s0", "R"}, rec("p1", true, "a"));
    CHECK_THROWS_AS(consistency(t, PredictionEquality::kToken),
                    UndefinedMetricError);
  }

  SECTION("mutual-match equality for generations") {
    PredictionTable t;
    t.add({"s0", "R"}, rec("p1", true, "a guitar"));
    t.add({"s0", "R"}, rec("p2", true, "guitars"));
    CHECK(consistency(t, PredictionEquality::kToken).value == 0.0);
    CHECK(consistency(t, PredictionEquality::kMutualMatch).value == 1.0);
  }

  SECTION("random fixtures agree with the enumeration oracle") {
    lmprobe::Rng rng(31337);
    for (int round = 0; round < 100; ++round) {
      auto t = testutil::make_random_table(rng, 2 + rng.bounded(10), 6, false);
      double expected = 0.0;
      bool defined = false;
      try {
        expected = testutil::oracle_consistency_token(t);
        defined = true;
      } catch (...) {
      }
      if (!defined) {
        continue;
      }
      const auto r = consistency(t, PredictionEquality::kToken);
      CHECK(r.value == Catch::Approx(expected).margin(1e-12));
      CHECK(r.value >= 0.0);
      CHECK(r.value <= 1.0);
    }
  }
}

// ===========================================================================
// Generation confidence
// ===========================================================================

TEST_CASE("generation confidence is the sample matching rate") {
  CHECK(lmprobe::generation_confidence(
            "Tokyo", std::vector<std::string>(40, "Tokyo")) == 1.0);

  std::vector<std::string> samples(80, "guitar");
  samples.insert(samples.end(), 20, "piano");
  CHECK(lmprobe::generation_confidence("a guitar", samples) ==
        Catch::Approx(0.8).margin(1e-15));

  CHECK(lmprobe::generation_confidence(
            "Tokyo", std::vector<std::string>(10, "Kyoto")) == 0.0);

  CHECK_THROWS_AS(lmprobe::generation_confidence("Tokyo", {}),
                  UndefinedMetricError);
}

// ===========================================================================
// Overconfidence
// ===========================================================================

namespace {

std::vector<ConfidenceRecord> hand_ovconf_records() {
  // Bin 1: ten records at confidence .9, seven correct -> gap +0.2.
  // Bin 2: ten records at confidence .4, five correct -> gap -0.1.
  std::vector<ConfidenceRecord> records;
  for (int i = 0; i < 10; ++i) {
    records.push_back({"hi" + std::to_string(i), 0.9, i < 7});
  }
  for (int i = 0; i < 10; ++i) {
    records.push_back({"lo" + std::to_string(i), 0.4, i < 5});
  }
  return records;
}

}  // namespace

TEST_CASE("overconfidence binning and weighting") {
  SECTION("perfectly calibrated records give zero") {
    std::vector<ConfidenceRecord> records;
    for (int i = 0; i < 30; ++i) {
      // Confidence 0.5 everywhere, exactly half correct in every bin slice.
      records.push_back({"p" + std::to_string(i), 0.5, i % 2 == 0});
    }
    const auto r = overconfidence(records, 10);
    CHECK(std::abs(r.value) <= 1e-9);
  }

  SECTION("hand-computed 20-record example with two bins") {
    const auto r = overconfidence(hand_ovconf_records(), 2);
    CHECK(r.value == Catch::Approx(0.05).margin(1e-12));
    REQUIRE(r.bins.bins.size() == 2);
    CHECK(r.bins.bins[0].mean_confidence == Catch::Approx(0.9));
    CHECK(r.bins.bins[0].mean_accuracy == Catch::Approx(0.7));
    CHECK(r.bins.bins[1].mean_confidence == Catch::Approx(0.4));
    CHECK(r.bins.bins[1].mean_accuracy == Catch::Approx(0.5));
  }

  SECTION("literal bin weights scale by M instead of the record count") {
    const auto r = overconfidence(hand_ovconf_records(), 2, true);
    CHECK(r.value == Catch::Approx(0.5).margin(1e-12));
  }

  SECTION("maximal overconfidence attains the bound") {
    std::vector<ConfidenceRecord> records;
    for (int i = 0; i < 20; ++i) {
      records.push_back({"p" + std::to_string(i), 1.0, false});
    }
    CHECK(overconfidence(records, 10).value ==
          Catch::Approx(1.0).margin(1e-12));
  }

  SECTION("all-correct records never look overconfident") {
    lmprobe::Rng rng(8);
    std::vector<ConfidenceRecord> records;
    for (int i = 0; i < 57; ++i) {
      records.push_back({"p" + std::to_string(i), rng.uniform01(), true});
    }
    CHECK(overconfidence(records, 10).value <= 0.0);
  }

  SECTION("bin sizes differ by at most one and rebuild the sorted list") {
    lmprobe::Rng rng(77);
    for (const std::size_t n : {10u, 11u, 19u, 100u, 101u, 997u}) {
      std::vector<ConfidenceRecord> records;
      for (std::size_t i = 0; i < n; ++i) {
        records.push_back({"p" + std::to_string(i), rng.uniform01(),
                           rng.bounded(2) == 1});
      }
      const auto r = overconfidence(records, 10);
      std::size_t lo = n;
      std::size_t hi = 0;
      std::vector<std::string> concatenated;
      for (const auto& bin : r.bins.bins) {
        lo = std::min(lo, bin.prompt_ids.size());
        hi = std::max(hi, bin.prompt_ids.size());
        concatenated.insert(concatenated.end(), bin.prompt_ids.begin(),
                            bin.prompt_ids.end());
      }
      CHECK(hi - lo <= 1);
      auto sorted = records;
      std::stable_sort(sorted.begin(), sorted.end(),
                       [](const auto& a, const auto& b) {
                         return a.confidence > b.confidence;
                       });
      REQUIRE(concatenated.size() == sorted.size());
      for (std::size_t i = 0; i < sorted.size(); ++i) {
        CHECK(concatenated[i] == sorted[i].prompt_id);
      }
      CHECK(r.value >= -1.0);
      CHECK(r.value <= 1.0);
      CHECK(r.value ==
            Catch::Approx(testutil::oracle_ovconf(
                              [&] {
                                std::vector<std::pair<double, bool>> v;
                                for (const auto& x : records) {
                                  v.push_back({x.confidence, x.correct});
                                }
                                return v;
                              }(),
                              10))
                .margin(1e-12));
    }
  }

  SECTION("fewer records than bins is undefined") {
    std::vector<ConfidenceRecord> records(5, {"p", 0.5, true});
    CHECK_THROWS_AS(overconfidence(records, 10), UndefinedMetricError);
  }
}

TEST_CASE("overconfidence by token count buckets") {
  PredictionTable t;
  lmprobe::Rng rng(4);
  for (int i = 0; i < 120; ++i) {
    auto r = rec("p" + std::to_string(i), rng.bounded(2) == 1);
    r.confidence = rng.uniform01();
    r.token_count = 1 + static_cast<int>(rng.bounded(7));
    t.add({"s" + std::to_string(i), "R"}, std::move(r));
  }
  const auto buckets = lmprobe::overconfidence_by_token_count(t, 10);
  for (const auto& [bucket, result] : buckets) {
    CHECK((bucket == "1" || bucket == "2" || bucket == "3" || bucket == "4" ||
           bucket == "5+"));
    CHECK(result.value >= -1.0);
    CHECK(result.value <= 1.0);
  }
}

// ===========================================================================
// Bias level
// ===========================================================================

namespace {

/// Gateway whose fixture answers every realized content-free prompt of
/// pattern "[X] likes [Y]." with the given candidate distribution.
struct BiasHarness {
  BiasHarness(const testutil::TempDir& tmp, const std::string& tag,
              const json& entries_by_prompt)
      : fixture_path(tmp / (tag + ".json")) {
    json rules = json::array();
    for (const auto& [text, entries] : entries_by_prompt.items()) {
      rules.push_back({{"text", text}, {"entries", entries}});
    }
    lmprobe::write_file(fixture_path,
                        json{{"fixture_id", tag}, {"fillmask", rules}}.dump());
    gateway.emplace(Gateway::open(
        {tag, "mock:" + fixture_path.string(), {"fill-mask"}}));
  }
  std::filesystem::path fixture_path;
  std::optional<Gateway> gateway;
};

const lmprobe::RelationalTemplate kBiasTemplate{
    "R", "t0", "[X] likes [Y].", lmprobe::TemplateStyle::kStatement,
    lmprobe::TemplateOrigin::kOriginal, std::nullopt};

json uniform_entries() {
  return json::parse(
      R"([["c1", 0.25], ["c2", 0.25], ["c3", 0.25], ["c4", 0.25]])");
}

}  // namespace

TEST_CASE("bias level from content-free prompts") {
  testutil::TempDir tmp("bias");
  const std::vector<std::string> candidates = {"c1", "c2", "c3", "c4"};

  SECTION("uniform distribution has zero bias") {
    const json per_prompt = {{"N/A likes [MASK].", uniform_entries()},
                             {" likes [MASK].", uniform_entries()},
                             {"? likes [MASK].", uniform_entries()}};
    BiasHarness h(tmp, "uniform", per_prompt);
    CHECK(lmprobe::bias_level(*h.gateway, kBiasTemplate, candidates) ==
          Catch::Approx(0.0).margin(1e-12));
  }

  SECTION("one-hot distribution has bias one") {
    const json one_hot = json::parse(R"([["c2", 1.0]])");
    const json per_prompt = {{"N/A likes [MASK].", one_hot},
                             {" likes [MASK].", one_hot},
                             {"? likes [MASK].", one_hot}};
    BiasHarness h(tmp, "onehot", per_prompt);
    CHECK(lmprobe::bias_level(*h.gateway, kBiasTemplate, candidates) ==
          Catch::Approx(1.0).margin(1e-12));
  }

  SECTION("half-half over four candidates is one half") {
    const json half = json::parse(R"([["c1", 0.5], ["c2", 0.5]])");
    const json per_prompt = {{"N/A likes [MASK].", half},
                             {" likes [MASK].", half},
                             {"? likes [MASK].", half}};
    BiasHarness h(tmp, "half", per_prompt);
    CHECK(lmprobe::bias_level(*h.gateway, kBiasTemplate, candidates) ==
          Catch::Approx(0.5).margin(1e-12));
  }

  SECTION("ensembling queries exactly the three content-free subjects") {
    const json per_prompt = {{"N/A likes [MASK].", uniform_entries()},
                             {" likes [MASK].", uniform_entries()},
                             {"? likes [MASK].", uniform_entries()}};
    BiasHarness h(tmp, "inspect", per_prompt);
    std::vector<std::string> texts;
    h.gateway->on_request = [&](const json& req) {
      texts.push_back(req.at("text").get<std::string>());
    };
    lmprobe::bias_level(*h.gateway, kBiasTemplate, candidates);
    CHECK(texts == std::vector<std::string>{"N/A likes [MASK].",
                                            " likes [MASK].",
                                            "? likes [MASK]."});
  }

  SECTION("bias is invariant under candidate relabeling") {
    const json skew = json::parse(R"([["c1", 0.6], ["c3", 0.3], ["c4", 0.1]])");
    const json per_prompt = {{"N/A likes [MASK].", skew},
                             {" likes [MASK].", skew},
                             {"? likes [MASK].", skew}};
    BiasHarness h(tmp, "relabel", per_prompt);
    const double a =
        lmprobe::bias_level(*h.gateway, kBiasTemplate, candidates);
    std::vector<std::string> shuffled = {"c4", "c2", "c1", "c3"};
    const double b =
        lmprobe::bias_level(*h.gateway, kBiasTemplate, shuffled);
    CHECK(a == Catch::Approx(b).margin(1e-12));
  }

  SECTION("no candidate mass anywhere is undefined") {
    const json off = json::parse(R"([["other", 1.0]])");
    const json per_prompt = {{"N/A likes [MASK].", off},
                             {" likes [MASK].", off},
                             {"? likes [MASK].", off}};
    BiasHarness h(tmp, "undefined", per_prompt);
    CHECK_THROWS_AS(
        lmprobe::bias_level(*h.gateway, kBiasTemplate, candidates),
        UndefinedBiasError);
  }
}

TEST_CASE("multi-template relation bias") {
  testutil::TempDir tmp("biasmulti");
  const std::vector<std::string> candidates = {"c1", "c2", "c3", "c4"};
  const lmprobe::RelationalTemplate t2{
      "R", "t1", "[X] loves [Y].", lmprobe::TemplateStyle::kStatement,
      lmprobe::TemplateOrigin::kOriginal, std::nullopt};

  SECTION("single template degenerates to plain bias") {
    const json skew = json::parse(R"([["c1", 0.7], ["c2", 0.3]])");
    const json per_prompt = {{"N/A likes [MASK].", skew},
                             {" likes [MASK].", skew},
                             {"? likes [MASK].", skew}};
    BiasHarness h(tmp, "single", per_prompt);
    const double single =
        lmprobe::relation_bias_multi(*h.gateway, {kBiasTemplate}, candidates);
    const double plain =
        lmprobe::bias_level(*h.gateway, kBiasTemplate, candidates);
    CHECK(single == Catch::Approx(plain).margin(1e-15));
  }

  SECTION("two one-hot templates on different candidates mix to one half") {
    const json hot1 = json::parse(R"([["c1", 1.0]])");
    const json hot2 = json::parse(R"([["c2", 1.0]])");
    const json per_prompt = {{"N/A likes [MASK].", hot1},
                             {" likes [MASK].", hot1},
                             {"? likes [MASK].", hot1},
                             {"N/A loves [MASK].", hot2},
                             {" loves [MASK].", hot2},
                             {"? loves [MASK].", hot2}};
    BiasHarness h(tmp, "mix", per_prompt);
    CHECK(lmprobe::relation_bias_multi(*h.gateway, {kBiasTemplate, t2},
                                       candidates) ==
          Catch::Approx(0.5).margin(1e-12));
  }

  SECTION("all templates uniform stays zero") {
    const json per_prompt = {{"N/A likes [MASK].", uniform_entries()},
                             {" likes [MASK].", uniform_entries()},
                             {"? likes [MASK].", uniform_entries()},
                             {"N/A loves [MASK].", uniform_entries()},
                             {" loves [MASK].", uniform_entries()},
                             {"? loves [MASK].", uniform_entries()}};
    BiasHarness h(tmp, "alluniform", per_prompt);
    CHECK(lmprobe::relation_bias_multi(*h.gateway, {kBiasTemplate, t2},
                                       candidates) ==
          Catch::Approx(0.0).margin(1e-12));
  }
}

// ===========================================================================
// Coverage and sharing
// ===========================================================================

TEST_CASE("coverage rates") {
  SECTION("all correct collapses the triple to one") {
    const auto t = table_from_matrix({{1, 1}, {1, 1}});
    const auto c = coverage_rates(t);
    CHECK(c.average == 1.0);
    CHECK(c.maximum == 1.0);
    CHECK(c.oracle == 1.0);
  }

  SECTION("hand-enumerated 2x2 matrix") {
    const auto t = table_from_matrix({{1, 0}, {0, 0}});
    const auto c = coverage_rates(t);
    CHECK(c.average == 0.25);
    CHECK(c.maximum == 0.5);
    CHECK(c.oracle == 0.5);
  }

  SECTION("oracle-consistent on arbitrary random tables") {
    lmprobe::Rng rng(555);
    for (int round = 0; round < 200; ++round) {
      const auto t =
          testutil::make_random_table(rng, 2 + rng.bounded(12), 5, false);
      const auto c = coverage_rates(t);
      CHECK(c.maximum <= c.oracle + 1e-12);
      const auto oracle = testutil::oracle_coverage(t);
      CHECK(c.average == Catch::Approx(oracle.average).margin(1e-12));
      CHECK(c.maximum == Catch::Approx(oracle.maximum).margin(1e-12));
      CHECK(c.oracle == Catch::Approx(oracle.oracle).margin(1e-12));
    }
  }

  SECTION("monotone on balanced factorial tables") {
    lmprobe::Rng rng(556);
    for (int round = 0; round < 200; ++round) {
      const auto t = testutil::make_balanced_table(
          rng, 2 + rng.bounded(12), 1 + rng.bounded(5), 1 + rng.bounded(3));
      const auto c = coverage_rates(t);
      CHECK(c.average <= c.maximum + 1e-12);
      CHECK(c.maximum <= c.oracle + 1e-12);
    }
  }
}

TEST_CASE("knowledge sharing rate") {
  const std::set<SubjectRelationPair> a = {{"1", "R"}, {"2", "R"}, {"3", "R"}};
  const std::set<SubjectRelationPair> b = {
      {"2", "R"}, {"3", "R"}, {"4", "R"}, {"5", "R"}};

  CHECK(sharing_rate(a, a) == 1.0);
  CHECK(sharing_rate(a, b) == Catch::Approx(2.0 / 3.0).margin(1e-15));
  CHECK(sharing_rate(b, a) == Catch::Approx(0.5).margin(1e-15));
  CHECK(sharing_rate(a, {{"9", "R"}}) == 0.0);
  CHECK_THROWS_AS(sharing_rate({}, a), UndefinedMetricError);

  SECTION("identity |A| share(A->B) == |B| share(B->A) on random sets") {
    lmprobe::Rng rng(606);
    for (int round = 0; round < 300; ++round) {
      std::set<SubjectRelationPair> x;
      std::set<SubjectRelationPair> y;
      for (int i = 0; i < 20; ++i) {
        if (rng.bounded(2)) x.insert({std::to_string(i), "R"});
        if (rng.bounded(2)) y.insert({std::to_string(i), "R"});
      }
      if (x.empty() || y.empty()) {
        continue;
      }
      CHECK(double(x.size()) * sharing_rate(x, y) ==
            Catch::Approx(double(y.size()) * sharing_rate(y, x))
                .margin(1e-9));
    }
  }
}

TEST_CASE("one-word ratio") {
  CHECK(lmprobe::one_word_ratio({"Nanjing.", "Havana."}) == 1.0);
  CHECK(lmprobe::one_word_ratio({"Nanjing.", "the city of Havana"}) == 0.5);
  CHECK(lmprobe::one_word_ratio({""}) == 0.0);
  CHECK_THROWS_AS(lmprobe::one_word_ratio({}), UndefinedMetricError);
}

// ===========================================================================
// Per-template breakdown
// ===========================================================================

TEST_CASE("per-template breakdown") {
  SECTION("one relation with accuracies 0.2 and 0.8") {
    PredictionTable t;
    for (int i = 0; i < 5; ++i) {
      t.add({"s" + std::to_string(i), "R"},
            rec("a" + std::to_string(i), i < 1, "k", "t0"));
      t.add({"s" + std::to_string(i), "R"},
            rec("b" + std::to_string(i), i < 4, "k", "t1"));
    }
    const auto b = lmprobe::per_template_breakdown(t);
    CHECK(b.relations.at("R").min_accuracy == Catch::Approx(0.2));
    CHECK(b.relations.at("R").max_accuracy == Catch::Approx(0.8));
    CHECK(b.dataset_min == Catch::Approx(0.2));
    CHECK(b.dataset_max == Catch::Approx(0.8));
    CHECK(b.dataset_mean == Catch::Approx(0.5));
  }

  SECTION("uniform accuracy collapses min, max and mean") {
    const auto t = table_from_matrix({{1, 1}, {1, 1}});
    const auto b = lmprobe::per_template_breakdown(t);
    CHECK(b.dataset_min == 1.0);
    CHECK(b.dataset_max == 1.0);
    CHECK(b.dataset_mean == 1.0);
  }

  SECTION("two relations micro-average their extreme templates") {
    PredictionTable t;
    // Relation A: t0 accuracy 0/2, t1 accuracy 2/2.
    t.add({"s0", "A"}, rec("a0", false, "k", "t0"));
    t.add({"s1", "A"}, rec("a1", false, "k", "t0"));
    t.add({"s0", "A"}, rec("a2", true, "k", "t1"));
    t.add({"s1", "A"}, rec("a3", true, "k", "t1"));
    // Relation B: t0 accuracy 1/3, t1 accuracy 2/3.
    t.add({"u0", "B"}, rec("b0", true, "k", "t0"));
    t.add({"u1", "B"}, rec("b1", false, "k", "t0"));
    t.add({"u2", "B"}, rec("b2", false, "k", "t0"));
    t.add({"u0", "B"}, rec("b3", true, "k", "t1"));
    t.add({"u1", "B"}, rec("b4", true, "k", "t1"));
    t.add({"u2", "B"}, rec("b5", false, "k", "t1"));
    const auto b = lmprobe::per_template_breakdown(t);
    CHECK(b.dataset_min == Catch::Approx((0.0 + 1.0) / (2 + 3)));
    CHECK(b.dataset_max == Catch::Approx((2.0 + 2.0) / (2 + 3)));
  }
}

// ===========================================================================
// Robustness partitions
// ===========================================================================

TEST_CASE("robustness partitions") {
  const lmprobe::Dataset ds = testutil::make_capital_dataset();

  SECTION("subject axis with single surfaces is degenerate") {
    const auto t = table_from_matrix({{1, 0}, {0, 1}});
    const auto r = lmprobe::robustness_partitions(
        ds, t, lmprobe::PartitionAxis::kSubject, 1);
    CHECK(r.degenerate);
    CHECK(r.consist == 1.0);
    CHECK(r.acc_min == r.acc_max);
    CHECK(r.acc_min == Catch::Approx(0.5));
  }

  SECTION("two surfaces with disagreeing predictions have zero consistency") {
    PredictionTable t;
    auto r0 = rec("p0", true, "tokyo", "t0", 0);
    auto r1 = rec("p1", false, "kyoto", "t0", 1);
    t.add({"s0", "R"}, r0);
    t.add({"s0", "R"}, r1);
    const auto r = lmprobe::robustness_partitions(
        ds, t, lmprobe::PartitionAxis::kSubject, 1);
    CHECK_FALSE(r.degenerate);
    CHECK(r.consist == 0.0);
    CHECK(r.acc_min == 0.0);
    CHECK(r.acc_max == 1.0);
  }

  SECTION("template axis reproduces the per-template extremes") {
    const auto t = table_from_matrix({{1, 0}, {0, 0}});
    const auto r = lmprobe::robustness_partitions(
        ds, t, lmprobe::PartitionAxis::kTemplate, 1);
    CHECK(r.acc_min == 0.0);
    CHECK(r.acc_max == 0.5);
  }
}

// ===========================================================================
// Group consistency
// ===========================================================================

namespace {

std::vector<lmprobe::RelationalTemplate> grouped_templates() {
  using lmprobe::TemplateOrigin;
  using lmprobe::TemplateStyle;
  std::vector<lmprobe::RelationalTemplate> out;
  for (int g = 1; g <= 2; ++g) {
    for (int i = 0; i < 2; ++i) {
      out.push_back({"R", "g" + std::to_string(g) + "_" + std::to_string(i),
                     "[X] v [Y].", TemplateStyle::kStatement,
                     TemplateOrigin::kManual, g});
    }
  }
  return out;
}

}  // namespace

TEST_CASE("group consistency splits inner and inter pairs") {
  const auto templates = grouped_templates();

  SECTION("identical predictions everywhere give 1/1") {
    PredictionTable t;
    int i = 0;
    for (const auto& tmpl : templates) {
      t.add({"s0", "R"},
            rec("p" + std::to_string(i++), true, "same", tmpl.template_id));
    }
    const auto g = lmprobe::group_consistency(t, templates);
    CHECK(g.inner == 1.0);
    CHECK(g.inter == 1.0);
  }

  SECTION("group-constant predictions give inner 1, inter 0") {
    PredictionTable t;
    int i = 0;
    for (const auto& tmpl : templates) {
      const std::string key = tmpl.template_id.substr(0, 2);  // g1 or g2
      t.add({"s0", "R"},
            rec("p" + std::to_string(i++), true, key, tmpl.template_id));
    }
    const auto g = lmprobe::group_consistency(t, templates);
    CHECK(g.inner == 1.0);
    CHECK(g.inter == 0.0);
  }

  SECTION("fewer than two usable groups is undefined") {
    PredictionTable t;
    t.add({"s0", "R"}, rec("p0", true, "x", "g1_0"));
    auto only_one = grouped_templates();
    only_one.resize(2);  // both templates share group 1
    CHECK_THROWS_AS(lmprobe::group_consistency(t, only_one),
                    UndefinedMetricError);
  }
}

// ===========================================================================
// Alias rank gain
// ===========================================================================

TEST_CASE("alias rank gain") {
  testutil::TempDir tmp("rankgain");
  const json fixture = json::parse(R"({
    "fixture_id": "ranks",
    "fillmask": [
      {"text": "orig1 [MASK]", "entries": [["a", 0.6], ["target", 0.4]]},
      {"text": "ext1 [MASK]",  "entries": [["target", 0.9], ["a", 0.1]]},
      {"text": "orig2 [MASK]", "entries": [["target", 0.9], ["a", 0.1]]},
      {"text": "ext2 [MASK]",  "entries": [["a", 0.6], ["target", 0.4]]},
      {"text": "missing [MASK]", "entries": [["a", 1.0]]}
    ]
  })");
  const auto path = tmp / "ranks.json";
  lmprobe::write_file(path, fixture.dump());
  auto gw = Gateway::open({"ranks", "mock:" + path.string(), {"fill-mask"}});

  using lmprobe::RankGainItem;
  const RankGainItem gains{{"orig1 [MASK]", "target"},
                           {{"ext1 [MASK]", "target"}}};
  const RankGainItem loses{{"orig2 [MASK]", "target"},
                           {{"ext2 [MASK]", "target"}}};

  SECTION("extended always better gives one") {
    const auto r = lmprobe::alias_rank_gain(gw, {gains});
    CHECK(r.rate == 1.0);
    CHECK(r.evaluated == 1);
    CHECK(r.gaps == 0);
  }

  SECTION("half the items gain") {
    const auto r = lmprobe::alias_rank_gain(gw, {gains, loses});
    CHECK(r.rate == 0.5);
  }

  SECTION("rank-unavailable items are counted as gaps") {
    const RankGainItem unavailable{{"missing [MASK]", "target"},
                                   {{"ext1 [MASK]", "target"}}};
    const auto r = lmprobe::alias_rank_gain(gw, {gains, unavailable});
    CHECK(r.rate == 1.0);
    CHECK(r.evaluated == 1);
    CHECK(r.gaps == 1);
  }

  SECTION("no extended expressions anywhere is a precondition error") {
    CHECK_THROWS_AS(
        lmprobe::alias_rank_gain(gw, {{{"orig1 [MASK]", "target"}, {}}}),
        lmprobe::Error);
  }
}

// ===========================================================================
// Prediction table persistence
// ===========================================================================

TEST_CASE("prediction tables round-trip through JSONL") {
  lmprobe::Rng rng(12);
  const auto t = testutil::make_random_table(rng, 8, 4, true);
  testutil::TempDir tmp("predio");
  const auto path = tmp / "predictions.jsonl";
  lmprobe::save_predictions(t, path);
  const auto loaded = lmprobe::load_predictions(path);
  CHECK(loaded.pair_count() == t.pair_count());
  CHECK(loaded.record_count() == t.record_count());
  // Byte determinism: saving the loaded table reproduces the file.
  const auto path2 = tmp / "predictions2.jsonl";
  lmprobe::save_predictions(loaded, path2);
  CHECK(lmprobe::read_file(path) == lmprobe::read_file(path2));
}
