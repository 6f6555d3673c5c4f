/*
 * Copyright 2026 The pestnet Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <gtest/gtest.h>

#include <numeric>

#include "pestnet/eval.hpp"
#include "pestnet/rng.hpp"

namespace pestnet::eval {
namespace {

std::vector<double> random_row(Rng& rng, std::size_t k) {
  std::vector<double> row(k);
  double s = 0;
  for (auto& v : row) s += (v = rng.uniform(0.01, 1.0));
  for (auto& v : row) v /= s;
  return row;
}

std::vector<Rows> random_models(std::uint64_t seed, std::size_t m, std::size_t n, std::size_t k) {
  Rng rng(seed);
  std::vector<Rows> out(m);
  for (auto& rows : out) {
    for (std::size_t i = 0; i < n; ++i) rows.push_back(random_row(rng, k));
  }
  return out;
}

std::vector<std::size_t> random_labels(Rng& rng, std::size_t n, std::size_t k) {
  std::vector<std::size_t> v(n);
  for (auto& l : v) l = rng.below(k);
  return v;
}

TEST(SoftVote, WorkedExample) {
  Vote v = soft_vote({{{0.6, 0.4}}, {{0.2, 0.8}}});
  EXPECT_EQ(v.probs[0][0], (0.6 + 0.2) / 2);
  EXPECT_EQ(v.probs[0][1], (0.4 + 0.8) / 2);
  EXPECT_DOUBLE_EQ(v.probs[0][0], 0.4);
  EXPECT_DOUBLE_EQ(v.probs[0][1], 0.6);
  EXPECT_EQ(v.labels[0], 1u);
}

TEST(SoftVote, IdenticalModelsAreExact) {
  auto one = random_models(1, 1, 50, 7)[0];
  for (std::size_t m : {2u, 3u, 5u, 7u}) {
    Vote v = soft_vote(std::vector<Rows>(m, one));
    EXPECT_EQ(v.probs, one);
  }
}

TEST(SoftVote, MatchesSumDivideOracleAndIsOrderFree) {
  for (std::size_t k : {3u, 4u, 102u}) {
    auto models = random_models(k, 5, 1000, k);
    Vote v = soft_vote(models);
    for (std::size_t s = 0; s < 1000; ++s) {
      double total = 0;
      for (std::size_t j = 0; j < k; ++j) {
        double sum = 0;
        for (const auto& m : models) sum += m[s][j];
        EXPECT_NEAR(v.probs[s][j], sum / 5.0, 1e-12);
        total += v.probs[s][j];
      }
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
    std::vector<Rows> rev(models.rbegin(), models.rend());
    std::swap(rev[0], rev[2]);
    Vote w = soft_vote(rev);
    EXPECT_EQ(w.probs, v.probs);
    EXPECT_EQ(w.labels, v.labels);
  }
}

TEST(SoftVote, TiesAndErrors) {
  EXPECT_EQ(soft_vote({{{0.5, 0.5}}}).labels[0], 0u);
  EXPECT_THROW(soft_vote({}), ConfigError);
  EXPECT_THROW(soft_vote({{{0.5, 0.5}}, {{0.5, 0.5}, {1.0, 0.0}}}), ShapeError);
  EXPECT_THROW(soft_vote({{{0.5, 0.5}}, {{0.2, 0.3, 0.5}}}), ShapeError);
  EXPECT_THROW(soft_vote({{{0.7, 0.7}}}), DomainError);
}

TEST(HardVote, ExamplesAndErrors) {
  EXPECT_EQ(hard_vote({{2}, {2}, {5}}, 6), (std::vector<std::size_t>{2}));
  EXPECT_EQ(hard_vote({{1}, {3}}, 4), (std::vector<std::size_t>{1}));
  EXPECT_THROW(hard_vote({}, 3), ConfigError);
  EXPECT_THROW(hard_vote({{3}}, 3), DomainError);
  EXPECT_THROW(hard_vote({{1, 2}, {1}}, 3), ShapeError);
}

TEST(HardVote, MatchesCountingOracle) {
  for (std::size_t k : {3u, 102u}) {
    Rng rng(k + 100);
    std::vector<std::vector<std::size_t>> votes;
    for (int m = 0; m < 5; ++m) votes.push_back(random_labels(rng, 1000, k));
    auto got = hard_vote(votes, k);
    for (std::size_t s = 0; s < 1000; ++s) {
      std::size_t best = 0, best_count = 0;
      for (std::size_t c = 0; c < k; ++c) {
        std::size_t count = 0;
        for (const auto& v : votes) count += v[s] == c;
        if (count > best_count) best = c, best_count = count;
      }
      ASSERT_EQ(got[s], best) << s;
    }
    // An extra copy of a model that voted with the winner never changes the winner.
    for (std::size_t s = 0; s < 1000; ++s) {
      for (std::size_t m = 0; m < 5; ++m) {
        if (votes[m][s] != got[s]) continue;
        auto more = votes;
        more.push_back(votes[m]);
        EXPECT_EQ(hard_vote(more, k)[s], got[s]);
        break;
      }
    }
  }
}

TEST(Confusion, UnitCases) {
  auto diag = confusion({0, 1, 2, 1}, {0, 1, 2, 1}, 3);
  EXPECT_EQ(diag.counts, (std::vector<std::size_t>{1, 0, 0, 0, 2, 0, 0, 0, 1}));
  auto one = confusion({0}, {1}, 2);
  EXPECT_EQ(one.counts, (std::vector<std::size_t>{0, 1, 0, 0}));
  EXPECT_THROW(confusion({0}, {2}, 2), DomainError);
  EXPECT_THROW(confusion({0, 1}, {0}, 2), ShapeError);
  Rng rng(3);
  auto t = random_labels(rng, 1000, 5), p = random_labels(rng, 1000, 5);
  auto cm = confusion(t, p, 5);
  EXPECT_EQ(cm.total(), 1000u);
  for (std::size_t c = 0; c < 5; ++c) {
    std::size_t row = 0;
    for (std::size_t j = 0; j < 5; ++j) row += cm.at(c, j);
    EXPECT_EQ(row, static_cast<std::size_t>(std::count(t.begin(), t.end(), c)));
  }
}

TEST(Metrics, Arithmetic) {
  std::vector<std::size_t> t(100, 0), p(100, 0);
  for (int i = 0; i < 15; ++i) p[i] = 1;
  EXPECT_DOUBLE_EQ(metrics(confusion(t, p, 2)).accuracy * 100.0, 85.0);
  auto r = metrics(confusion({0, 0, 0, 0, 1}, {0, 0, 0, 1, 1}, 2));
  EXPECT_EQ(r.per_class[0].recall, 0.75);
  EXPECT_EQ(r.per_class[0].precision, 1.0);
  EXPECT_EQ(r.per_class[1].precision, 0.5);
  // Class 2 absent from truths and predictions: all statistics 0.
  auto absent = metrics(confusion({0, 1}, {0, 1}, 3));
  EXPECT_EQ(absent.per_class[2].f1, 0.0);
  EXPECT_DOUBLE_EQ(absent.macro_recall, 2.0 / 3.0);
  EXPECT_THROW(metrics(ConfusionMatrix{2, {0, 0, 0, 0}}), DomainError);
}

struct OneVsAll {
  double precision, recall, f1;
};

OneVsAll brute(const std::vector<std::size_t>& t, const std::vector<std::size_t>& p, std::size_t c) {
  double tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const bool is = t[i] == c, said = p[i] == c;
    tp += is && said;
    fp += !is && said;
    fn += is && !said;
  }
  OneVsAll o{};
  o.precision = tp + fp > 0 ? tp / (tp + fp) : 0;
  o.recall = tp + fn > 0 ? tp / (tp + fn) : 0;
  o.f1 = o.precision + o.recall > 0 ? 2 * o.precision * o.recall / (o.precision + o.recall) : 0;
  return o;
}

TEST(Metrics, MatchOneVsAllOracle) {
  for (std::size_t k : {3u, 5u, 102u}) {
    Rng rng(k);
    auto t = random_labels(rng, 1000, k), p = t;
    for (auto& v : p) {
      if (rng.coin(0.4)) v = rng.below(k);
    }
    auto r = metrics(confusion(t, p, k));
    double correct = 0, mp = 0, mr = 0, mf = 0;
    for (std::size_t i = 0; i < t.size(); ++i) correct += t[i] == p[i];
    EXPECT_NEAR(r.accuracy, correct / 1000.0, 1e-12);
    for (std::size_t c = 0; c < k; ++c) {
      auto o = brute(t, p, c);
      EXPECT_NEAR(r.per_class[c].precision, o.precision, 1e-12);
      EXPECT_NEAR(r.per_class[c].recall, o.recall, 1e-12);
      EXPECT_NEAR(r.per_class[c].f1, o.f1, 1e-12);
      mp += o.precision;
      mr += o.recall;
      mf += o.f1;
    }
    EXPECT_NEAR(r.macro_precision, mp / k, 1e-12);
    EXPECT_NEAR(r.macro_recall, mr / k, 1e-12);
    EXPECT_NEAR(r.macro_f1, mf / k, 1e-12);
  }
}

TEST(Metrics, RelabelingPermutesPerClassStats) {
  Rng rng(9);
  auto t = random_labels(rng, 500, 4), p = random_labels(rng, 500, 4);
  std::vector<std::size_t> perm = {2, 0, 3, 1};
  auto tp = t, pp = p;
  for (auto& v : tp) v = perm[v];
  for (auto& v : pp) v = perm[v];
  auto a = metrics(confusion(t, p, 4)), b = metrics(confusion(tp, pp, 4));
  EXPECT_NEAR(a.accuracy, b.accuracy, 1e-12);
  EXPECT_NEAR(a.macro_f1, b.macro_f1, 1e-12);
  EXPECT_NEAR(a.macro_precision, b.macro_precision, 1e-12);
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_EQ(a.per_class[c].recall, b.per_class[perm[c]].recall);
    EXPECT_EQ(a.per_class[c].support, b.per_class[perm[c]].support);
  }
}

TEST(Report, JsonKeysInOrder) {
  auto cm = confusion({0, 1, 1}, {0, 1, 1}, 2);
  auto j = report_json(metrics(cm), cm);
  std::vector<std::string> keys;
  for (auto it = j.begin(); it != j.end(); ++it) keys.push_back(it.key());
  EXPECT_EQ(keys, (std::vector<std::string>{"accuracy", "accuracy_percent", "macro_precision", "macro_recall",
                                            "macro_f1", "per_class", "confusion_matrix"}));
  EXPECT_EQ(j["accuracy_percent"].get<double>(), 100.0);
  EXPECT_EQ(j["confusion_matrix"], nlohmann::json({1, 0, 0, 2}));
  EXPECT_EQ(j["per_class"][1]["support"], 2);
  EXPECT_EQ(j.dump(), report_json(metrics(cm), cm).dump());
}

TEST(Files, PredictionAndTruthRoundTrip) {
  Predictions p{{"a", "b"}, {{0.1, 0.9}, {1.0 / 3.0, 2.0 / 3.0}}};
  const std::string text = format_predictions(p);
  EXPECT_EQ(text.substr(0, 15), "sample_id,p_0,p");
  Predictions q = parse_predictions(text, "p.csv");
  EXPECT_EQ(q.ids, p.ids);
  EXPECT_EQ(q.probs, p.probs);
  Truth t{{"a", "b"}, {1, 0}};
  Truth u = parse_truth(format_truth(t), "t.csv");
  EXPECT_EQ(u.labels, t.labels);
  auto line = [](auto fn) {
    try {
      fn();
    } catch (const ParseError& e) {
      return e.offset;
    }
    return std::size_t{99};
  };
  EXPECT_EQ(line([] { parse_predictions("sample_id,p_1\n", "p"); }), 1u);
  EXPECT_EQ(line([] { parse_predictions("sample_id,p_0,p_1\na,0.5\n", "p"); }), 2u);
  EXPECT_EQ(line([] { parse_predictions("sample_id,p_0,p_1\na,0.5,0.6\n", "p"); }), 0u);
  EXPECT_EQ(line([] { parse_truth("sample_id,label\na,x\n", "t"); }), 2u);
  EXPECT_THROW(check_aligned({"a", "b"}, {"a"}, "p2.csv"), ShapeError);
  EXPECT_THROW(check_aligned({"a", "b"}, {"a", "c"}, "p2.csv"), ShapeError);
}

}  // namespace
}  // namespace pestnet::eval
