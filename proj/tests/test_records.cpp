#include <gtest/gtest.h>

#include <sstream>

#include "v3fusion/records.hpp"

using namespace v3fusion;

namespace {

PoolManifest mcq_manifest() {
  std::istringstream in("# pool\nmodel_ids = m0, m1, m2\ntask_kind = MCQ\nm_max = 3\n");
  return parse_manifest(in);
}

std::string episode(const std::string& id, const std::string& models_json, int label = 1, int choices = 2) {
  return R"({"episode_id":")" + id + R"(","task_kind":"MCQ","num_choices":)" + std::to_string(choices) +
         R"(,"label":)" + std::to_string(label) + R"(,"models":)" + models_json + "}";
}

const char* kThreeModels =
    R"({"m0":{"choice_probs":[0.2,0.8],"embedding":[1,2]},"m1":{"choice_probs":[0.5,0.5],"embedding":[0,1]},"m2":{"choice_probs":[1,0],"embedding":[3,3]}})";

}  // namespace

TEST(Manifest, ParsesKeyValueLines) {
  const auto m = mcq_manifest();
  ASSERT_EQ(m.size(), 3u);
  EXPECT_EQ(m.model_ids[2], "m2");
  EXPECT_EQ(m.task_kind, TaskKind::MCQ);
  EXPECT_EQ(m.num_choices_max, 3u);
  EXPECT_EQ(m.index_of("m1"), 1u);
  EXPECT_THROW(m.index_of("zz"), ValidationError);
}

TEST(Manifest, RoundTripsThroughWriter) {
  const auto m = mcq_manifest();
  std::ostringstream out;
  write_manifest(out, m);
  std::istringstream in(out.str());
  const auto back = parse_manifest(in);
  EXPECT_EQ(back.model_ids, m.model_ids);
  EXPECT_EQ(back.num_choices_max, m.num_choices_max);
}

TEST(Manifest, RejectsDuplicatesAndUnknownKeys) {
  std::istringstream dup("model_ids = a, a\ntask_kind = MCQ\nm_max = 2\n");
  EXPECT_THROW(parse_manifest(dup), ValidationError);
  std::istringstream unknown("model_ids = a, b\ncolour = red\n");
  EXPECT_THROW(parse_manifest(unknown), ParseError);
}

TEST(Ingest, WellFormedThreeEpisodes) {
  const auto m = mcq_manifest();
  std::stringstream log;
  for (int k = 0; k < 3; ++k) log << episode("e" + std::to_string(k), kThreeModels) << "\n";
  const auto records = ingest(log, m);
  ASSERT_EQ(records.size(), 3u);
  EXPECT_EQ(records[1].episode_id, "e1");
  EXPECT_EQ(records[0].outputs[0].choice_probs, (std::vector<double>{0.2, 0.8}));
  EXPECT_EQ(records[0].outputs[2].embedding, (std::vector<double>{3, 3}));
}

TEST(Ingest, MissingModelNamesEpisodeAndModel) {
  const auto m = mcq_manifest();
  std::stringstream log(episode("e7", R"({"m0":{"choice_probs":[0.2,0.8]},"m1":{"choice_probs":[0.5,0.5]}})") + "\n");
  try {
    ingest(log, m);
    FAIL() << "expected a validation error";
  } catch (const ValidationError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("e7"), std::string::npos);
    EXPECT_NE(what.find("m2"), std::string::npos);
  }
}

TEST(Ingest, ProbabilitiesSummingToOnePointTwoAreRejected) {
  const auto m = mcq_manifest();
  std::stringstream log(episode(
      "e0", R"({"m0":{"choice_probs":[0.6,0.6]},"m1":{"choice_probs":[0.5,0.5]},"m2":{"choice_probs":[1,0]}})"));
  EXPECT_THROW(ingest(log, m), ValidationError);
}

TEST(Ingest, MalformedLineReportsLineNumber) {
  const auto m = mcq_manifest();
  std::stringstream log;
  for (int k = 0; k < 4; ++k) log << episode("e" + std::to_string(k), kThreeModels) << "\n";
  log << "{not json\n";
  try {
    ingest(log, m);
    FAIL() << "expected a parse error";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 5u);
  }
  std::stringstream again(log.str());
  const auto collected = ingest_collect(again, m);
  ASSERT_EQ(collected.violations.size(), 1u);
  EXPECT_EQ(collected.violations[0].line, 5u);
  EXPECT_EQ(collected.records.size(), 4u);
}

TEST(Ingest, DuplicateIdsAndRaggedEmbeddings) {
  const auto m = mcq_manifest();
  std::stringstream log;
  log << episode("e0", kThreeModels) << "\n" << episode("e0", kThreeModels) << "\n";
  EXPECT_THROW(ingest(log, m), ParseError);
  std::stringstream ragged;
  ragged << episode("e0", kThreeModels) << "\n"
         << episode("e1",
                    R"({"m0":{"choice_probs":[0.2,0.8],"embedding":[1,2,3]},"m1":{"choice_probs":[0.5,0.5],"embedding":[0,1]},"m2":{"choice_probs":[1,0],"embedding":[3,3]}})")
         << "\n";
  const auto collected = ingest_collect(ragged, m);
  ASSERT_EQ(collected.violations.size(), 1u);
  EXPECT_EQ(collected.violations[0].line, 2u);
}

TEST(Ingest, LabelAndChoiceCountChecks) {
  const auto m = mcq_manifest();
  std::stringstream out_of_range(episode("e0", kThreeModels, 2, 2));
  EXPECT_THROW(ingest(out_of_range, m), ValidationError);
  std::stringstream too_many(episode("e0", kThreeModels, 0, 4));
  EXPECT_THROW(ingest(too_many, m), ValidationError);
}

TEST(Ingest, OpenEndedRecords) {
  std::istringstream man("model_ids = a, b\ntask_kind = OEQ\n");
  const auto m = parse_manifest(man);
  std::stringstream log(
      R"({"episode_id":"q1","task_kind":"OEQ","num_choices":null,"label":"red balloon","models":{"a":{"answer_text":"a red balloon"},"b":{"answer_text":"blue"}}})");
  const auto records = ingest(log, m);
  ASSERT_EQ(records.size(), 1u);
  EXPECT_EQ(records[0].label_text, "red balloon");
  EXPECT_EQ(*records[0].outputs[1].answer_text, "blue");
  std::stringstream empty_label(
      R"({"episode_id":"q1","task_kind":"OEQ","label":"","models":{"a":{"answer_text":"x"},"b":{"answer_text":"y"}}})");
  EXPECT_THROW(ingest(empty_label, m), ValidationError);
}

TEST(Ingest, SerializeIngestRoundTrip) {
  const auto m = mcq_manifest();
  std::stringstream log;
  for (int k = 0; k < 5; ++k) log << episode("e" + std::to_string(k), kThreeModels, k % 2) << "\n";
  const auto first = ingest(log, m);
  std::stringstream again;
  serialize(again, first, m);
  const auto second = ingest(again, m);
  EXPECT_EQ(first, second);
}

TEST(Renormalize, Examples) {
  EXPECT_EQ(renormalize_probs({0.5005, 0.4995}), (std::vector<double>{0.5005, 0.4995}));
  const auto r = renormalize_probs({0.5, 0.5005});
  EXPECT_DOUBLE_EQ(r[0], 0.5 / 1.0005);
  EXPECT_DOUBLE_EQ(r[1], 0.5005 / 1.0005);
  EXPECT_THROW(renormalize_probs({0.9, 0.3}), ValidationError);
}

TEST(Split, SizesDeterminismAndDegenerateRatios) {
  std::vector<EpisodeRecord> records(10);
  for (int k = 0; k < 10; ++k) records[k].episode_id = "e" + std::to_string(k);
  const auto a = split(records, {0.8, 0.1, 0.1}, 1);
  EXPECT_EQ(a.train.size(), 8u);
  EXPECT_EQ(a.validation.size(), 1u);
  EXPECT_EQ(a.test.size(), 1u);
  EXPECT_EQ(a, split(records, {0.8, 0.1, 0.1}, 1));
  EXPECT_EQ(to_json(a).dump(), to_json(split(records, {0.8, 0.1, 0.1}, 1)).dump());

  const auto all = split(records, {1, 0, 0}, 3);
  EXPECT_EQ(all.train.size(), 10u);
  EXPECT_TRUE(all.validation.empty() && all.test.empty());

  std::vector<EpisodeRecord> three(records.begin(), records.begin() + 3);
  EXPECT_THROW(split(three, {0.9, 0.05, 0.05}, 0), ValidationError);
  EXPECT_THROW(split(records, {0.5, 0.5, 0.5}, 0), ValidationError);
}

TEST(Split, DisjointAndJsonRoundTrip) {
  std::vector<EpisodeRecord> records(37);
  for (int k = 0; k < 37; ++k) records[k].episode_id = "e" + std::to_string(k);
  const auto s = split(records, {}, 42);
  EXPECT_EQ(s.train.size() + s.validation.size() + s.test.size(), 37u);
  EXPECT_EQ(split_from_json(to_json(s)), s);
  auto overlapping = to_json(s);
  overlapping["test"].push_back(s.train.front());
  EXPECT_THROW(split_from_json(overlapping), ValidationError);
  const auto picked = select(records, s.test);
  ASSERT_EQ(picked.size(), s.test.size());
  EXPECT_EQ(picked.front().episode_id, s.test.front());
}

TEST(EmbeddingSidecar, RoundTrip) {
  const auto m = mcq_manifest();
  std::stringstream log;
  for (int k = 0; k < 4; ++k) log << episode("e" + std::to_string(k), kThreeModels) << "\n";
  auto records = ingest(log, m);
  std::stringstream bin;
  write_embedding_sidecar(bin, records, m);
  auto stripped = records;
  for (auto& r : stripped)
    for (auto& o : r.outputs) o.embedding.clear();
  attach_embedding_sidecar(bin, stripped, m);
  EXPECT_EQ(stripped, records);
  std::stringstream bad("nope");
  EXPECT_THROW(attach_embedding_sidecar(bad, stripped, m), ValidationError);
}
