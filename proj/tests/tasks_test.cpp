#include "metasr/tasks.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <set>
#include <sstream>

namespace metasr {
namespace {

SyntheticFamilyConfig small_family() {
  SyntheticFamilyConfig c;
  c.n_languages = 3;
  c.n_source = 2;
  c.alphabet_sizes = {4, 5, 6};
  c.utterances_per_language = 40;
  c.test_utterances = 10;
  c.seed = 17;
  return c;
}

std::string serialize(const LanguageTask& t) {
  std::ostringstream os;
  write_corpus(os, t);
  return os.str();
}

TEST(Generate, DeterministicByteIdentical) {
  auto a = generate_family(small_family());
  auto b = generate_family(small_family());
  ASSERT_EQ(a.size(), 3u);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(serialize(a[i]), serialize(b[i]));
  SyntheticFamilyConfig other = small_family();
  other.seed = 18;
  EXPECT_NE(serialize(a[0]), serialize(generate_family(other)[0]));
}

TEST(Generate, IdsSizesAndSplits) {
  auto fam = generate_family(small_family());
  EXPECT_EQ(fam[0].id, "src0");
  EXPECT_EQ(fam[1].id, "src1");
  EXPECT_EQ(fam[2].id, "tgt0");
  for (const auto& t : fam) {
    EXPECT_EQ(t.full.size(), 40u);
    EXPECT_EQ(t.test.size(), 10u);
    EXPECT_EQ(t.limited.size(), 4u);
    std::set<std::string> full;
    for (const auto& u : t.full) full.insert(u.uid);
    for (const auto& u : t.limited) EXPECT_TRUE(full.count(u.uid));
    for (const auto& u : t.test) EXPECT_FALSE(full.count(u.uid));
  }
}

TEST(Generate, FrameCountWithinDurationBounds) {
  SyntheticFamilyConfig c = small_family();
  c.n_languages = 1;
  c.n_source = 1;
  c.alphabet_sizes = {5};
  c.length_min = c.length_max = 4;
  c.duration_min = 2;
  c.duration_max = 3;
  c.noise_sigma = 0.0;
  for (const auto& u : generate_family(c)[0].full) {
    EXPECT_EQ(u.transcript.size(), 4u);
    EXPECT_GE(u.features.rows(), 8);
    EXPECT_LE(u.features.rows(), 12);
    for (std::size_t i = 1; i < u.transcript.size(); ++i) EXPECT_NE(u.transcript[i], u.transcript[i - 1]);
  }
}

// Nearest-prototype labelling of each frame, collapsed, recovers the
// transcript when there is no noise.
TEST(Generate, NoiselessFramesDecodeByNearestPrototype) {
  SyntheticFamilyConfig c = small_family();
  c.noise_sigma = 0.0;
  auto fam = generate_family(c);
  for (int li = 0; li < c.n_languages; ++li) {
    const Matrix protos = language_prototypes(c, li);
    std::vector<LabelSequence> refs, hyps;
    for (const auto& u : fam[static_cast<std::size_t>(li)].full) {
      LabelSequence frames;
      for (Eigen::Index t = 0; t < u.features.rows(); ++t) {
        Eigen::Index best = 0;
        (protos.rowwise() - u.features.row(t)).rowwise().squaredNorm().minCoeff(&best);
        frames.push_back(static_cast<int>(best));
      }
      LabelSequence collapsed;
      for (int f : frames)
        if (collapsed.empty() || collapsed.back() != f) collapsed.push_back(f);
      refs.push_back(u.transcript);
      hyps.push_back(collapsed);
    }
    EXPECT_EQ(cer(refs, hyps), 0.0);
  }
}

TEST(Generate, RelatedLanguagesShareThePool) {
  SyntheticFamilyConfig c = small_family();
  c.mixing_sigma = 0.0;
  const Matrix a = language_prototypes(c, 0);
  const Matrix b = language_prototypes(c, 1);
  // Without mixing noise every prototype is a pool vector.
  int shared = 0;
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < b.rows(); ++j) shared += (a.row(i) - b.row(j)).norm() == 0.0;
  EXPECT_GT(shared, 0);
}

TEST(SplitLimited, FractionsAndSeeding) {
  SyntheticFamilyConfig c = small_family();
  c.n_languages = 1;
  c.n_source = 1;
  c.alphabet_sizes = {4};
  c.utterances_per_language = 200;
  LanguageTask t = generate_family(c)[0];
  EXPECT_EQ(split_limited(t, 1.0, 3).limited, t.full);
  LanguageTask a = split_limited(t, 0.10, 3);
  LanguageTask b = split_limited(t, 0.10, 3);
  EXPECT_EQ(a.limited.size(), 20u);
  EXPECT_EQ(a.limited, b.limited);
  EXPECT_NE(split_limited(t, 0.10, 4).limited, a.limited);
  EXPECT_THROW(split_limited(t, 0.0, 3), ValidationError);
  EXPECT_THROW(split_limited(t, 0.001, 3), ValidationError);
}

TEST(Corpus, RoundTripIsExact) {
  auto fam = generate_family(small_family());
  const auto path = std::filesystem::temp_directory_path() / "metasr_tasks_test.jsonl";
  save_corpus(path.string(), fam[1]);
  LanguageTask back = load_corpus(path.string());
  EXPECT_EQ(back, fam[1]);
  EXPECT_EQ(serialize(back), serialize(fam[1]));
  std::filesystem::remove(path);
  CorpusSummary s = summarize(back);
  EXPECT_EQ(s.full, 40u);
  EXPECT_EQ(s.limited, 4u);
  EXPECT_EQ(s.test, 10u);
}

const char* kHeader =
    R"({"language_id":"x","symbols":["a","b"],"feature_dim":2,"splits":{"full":["u1"],"limited":["u1"],"test":[]}})";

TEST(Corpus, EmptyFileRejected) {
  std::istringstream empty("");
  EXPECT_THROW(read_corpus(empty), ValidationError);
  std::istringstream header_only(std::string(kHeader) + "\n");
  EXPECT_THROW(read_corpus(header_only), ValidationError);
}

TEST(Corpus, WrongRowWidthNamesUtterance) {
  std::istringstream is(std::string(kHeader) + "\n" +
                        R"({"uid":"u1","transcript":"ab","features":[[1,2],[3]]})" + "\n");
  try {
    read_corpus(is, "c.jsonl");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("u1"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("c.jsonl:2"), std::string::npos);
  }
}

TEST(Corpus, SymbolOutsideAlphabetRejected) {
  std::istringstream is(std::string(kHeader) + "\n" +
                        R"({"uid":"u1","transcript":"az","features":[[1,2],[3,4]]})" + "\n");
  EXPECT_THROW(read_corpus(is), ValidationError);
}

TEST(Corpus, MalformedJsonAndBadSplits) {
  std::istringstream bad_json(std::string(kHeader) + "\n{not json\n");
  EXPECT_THROW(read_corpus(bad_json), ParseError);
  std::istringstream unknown(std::string(kHeader) + "\n" +
                             R"({"uid":"u2","transcript":"ab","features":[[1,2],[3,4]]})" + "\n");
  EXPECT_THROW(read_corpus(unknown), ValidationError);
  std::istringstream dup(std::string(kHeader) + "\n" +
                         R"({"uid":"u1","transcript":"ab","features":[[1,2],[3,4]]})" + "\n" +
                         R"({"uid":"u1","transcript":"ab","features":[[1,2],[3,4]]})" + "\n");
  EXPECT_THROW(read_corpus(dup), ValidationError);
}

TEST(Config, InvalidFieldsNamed) {
  auto expect_field = [](SyntheticFamilyConfig c, const std::string& field) {
    try {
      validate(c);
      ADD_FAILURE() << "expected ConfigError for " << field;
    } catch (const ConfigError& e) {
      EXPECT_EQ(std::string(e.what()).rfind(field, 0), 0u) << e.what();
    }
  };
  SyntheticFamilyConfig c;
  c.duration_min = 0;
  expect_field(c, "duration_range");
  c = {};
  c.duration_min = 5;
  c.duration_max = 3;
  expect_field(c, "duration_range");
  c = {};
  c.duration_min = 1;  // 1 frame per char halves below L after stride 2
  expect_field(c, "duration_range");
  c = {};
  c.alphabet_sizes.pop_back();
  expect_field(c, "alphabet_sizes");
  c = {};
  c.noise_sigma = -1.0;
  expect_field(c, "noise_sigma");
  c = {};
  c.shared_pool_size = 3;
  expect_field(c, "shared_pool_size");
  EXPECT_NO_THROW(validate(SyntheticFamilyConfig{}));
}

TEST(Config, JsonRoundTrip) {
  SyntheticFamilyConfig c = small_family();
  c.noise_sigma = 0.125;
  SyntheticFamilyConfig back = family_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_THROW(family_config_from_json(nlohmann::json::parse(R"({"duration_range":[3]})")), ConfigError);
}

}  // namespace
}  // namespace metasr
