#include <catch2/catch_amalgamated.hpp>

#include <string>
#include <vector>

#include "lmprobe/matching.hpp"
#include "lmprobe/rng.hpp"

using lmprobe::is_one_word;
using lmprobe::Lemmatizer;
using lmprobe::match_answer;
using lmprobe::match_mutual;
using lmprobe::MatchInclusion;
using lmprobe::normalize;

TEST_CASE("normalize lowercases, splits and lemmatizes") {
  CHECK(normalize("a guitar").tokens == std::vector<std::string>{"a", "guitar"});
  CHECK(normalize("guitars").tokens == std::vector<std::string>{"guitar"});
  CHECK(normalize("Nanjing.").tokens == std::vector<std::string>{"nanjing"});
  CHECK(normalize("cities").tokens == std::vector<std::string>{"city"});
  CHECK(normalize("").tokens.empty());
  CHECK(normalize("  ,.;  ").tokens.empty());
  CHECK(normalize("New York City").tokens ==
        std::vector<std::string>{"new", "york", "city"});
  CHECK(normalize("men").tokens == std::vector<std::string>{"man"});
  CHECK(normalize("the boxes, churches & heroes!").tokens ==
        std::vector<std::string>{"the", "box", "church", "hero"});
  CHECK(normalize("Paris").tokens == std::vector<std::string>{"paris"});
  CHECK(normalize("tea-tray").tokens == std::vector<std::string>{"tea", "tray"});
  CHECK(normalize("1945").tokens == std::vector<std::string>{"1945"});
}

TEST_CASE("normalize is idempotent on its own output") {
  const std::vector<std::string> inputs = {
      "a guitar",  "Guitars!",     "New York cities", "the CHILDREN's shoes",
      "buses",     "viruses",      "James Watt",      "classes of wolves",
      "U.S.A.",    "  空  ",       "heroes & villains", "analysis",
      "Mar del Plata", "ladies and gentlemen",
  };
  for (const auto& input : inputs) {
    const auto once = normalize(input).tokens;
    std::string joined;
    for (const auto& t : once) {
      if (!joined.empty()) {
        joined += ' ';
      }
      joined += t;
    }
    CAPTURE(input);
    CHECK(normalize(joined).tokens == once);
  }
}

TEST_CASE("one-directional matching follows inclusion of the answer") {
  CHECK(match_answer("guitars", "a guitar"));
  // Not symmetric: "a guitar" is not contained in "guitars".
  CHECK_FALSE(match_answer("a guitar", "guitars"));
  CHECK_FALSE(match_answer("new york", "york"));
  CHECK(match_answer("york", "new york"));
  CHECK(match_answer("identical", "identical"));
  CHECK_FALSE(match_answer("", "anything"));
  CHECK_FALSE(match_answer("paris", "london"));

  SECTION("contiguity matters in the default mode") {
    CHECK_FALSE(match_answer("new city", "new york city"));
    CHECK(match_answer("new city", "new york city", MatchInclusion::kSubset));
  }
}

TEST_CASE("case and trailing punctuation do not affect matching") {
  lmprobe::Rng rng(11);
  const std::vector<std::string> words = {"guitar", "piano",  "Tokyo",
                                          "berlin", "quartz", "maps"};
  for (int i = 0; i < 200; ++i) {
    std::string answer = words[rng.bounded(words.size())];
    std::string generated = words[rng.bounded(words.size())];
    if (rng.bounded(2)) {
      generated = "the " + generated;
    }
    std::string upper = answer;
    for (auto& c : upper) {
      c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    }
    CHECK(match_answer(answer, generated) ==
          match_answer(upper, generated + "."));
  }
}

TEST_CASE("mutual matching is symmetric") {
  CHECK(match_mutual("a guitar", "guitars"));
  CHECK(match_mutual("guitars", "a guitar"));
  CHECK_FALSE(match_mutual("paris", "london"));

  lmprobe::Rng rng(7);
  const std::vector<std::string> pool = {
      "a guitar", "guitars", "the red guitar", "piano", "grand piano",
      "New York", "york", "Tokyo", "", "cities of Japan"};
  for (int i = 0; i < 300; ++i) {
    const auto& a = pool[rng.bounded(pool.size())];
    const auto& b = pool[rng.bounded(pool.size())];
    CHECK(match_mutual(a, b) == match_mutual(b, a));
  }
}

TEST_CASE("one-word judgment trims one sentence-final mark") {
  CHECK(is_one_word("Nanjing."));
  CHECK(is_one_word("Havana"));
  CHECK(is_one_word(" Wehrmacht. "));
  CHECK(is_one_word("biology?"));
  CHECK_FALSE(is_one_word("the city of Havana"));
  CHECK_FALSE(is_one_word(""));
  CHECK_FALSE(is_one_word("   "));
  CHECK_FALSE(is_one_word("National Guard."));
  CHECK_FALSE(is_one_word("one two"));
}

TEST_CASE("lemmatizer table round-trips through the shipped data file") {
  const auto loaded = Lemmatizer::load(std::filesystem::path(LMPROBE_DATA_DIR) /
                                       "lemma_rules.json");
  CHECK(loaded == Lemmatizer::builtin());
}
