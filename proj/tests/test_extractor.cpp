#include <atomic>
#include <thread>

#include "test_util.hpp"
#include "tsrec/extractor.hpp"

using namespace tsrec;
using namespace tsrec::test_support;

namespace {

ItemCatalog toy_catalog() {
  ItemCatalog c;
  c.items["A"] = {"A", "Ceramic capacitor pack", "Small capacitor", "Volt", {"Electronics"}};
  c.items["B"] = {"B", "Film capacitor kit", "Capacitor set", "", {}};
  c.items["C"] = {"C", "Copper wire spool", "Bare copper wire", "", {}};
  c.items["D"] = {"D", "Solder wire roll", "Lead free solder", "", {}};
  return c;
}

TokenCluster cluster_of(std::string token, std::vector<std::string> members) {
  TokenCluster c;
  c.token = std::move(token);
  c.members = std::move(members);
  return c;
}

// Serves canned bodies on a local port and counts requests.
class FakeEndpoint {
 public:
  explicit FakeEndpoint(std::string body) : body_(std::move(body)) {
    srv_.Post("/v1/extract", [this](const httplib::Request& req, httplib::Response& res) {
      ++calls;
      last_request = req.body;
      res.set_content(body_, "application/json");
    });
    port_ = srv_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { srv_.listen_after_bind(); });
    srv_.wait_until_ready();
  }
  ~FakeEndpoint() {
    srv_.stop();
    thread_.join();
  }
  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1/extract"; }

  std::atomic<int> calls{0};
  std::string last_request;

 private:
  std::string body_;
  httplib::Server srv_;
  int port_ = 0;
  std::thread thread_;
};

ExtractorConfig remote_cfg(const std::string& url) {
  ExtractorConfig cfg;
  cfg.backend = ExtractorBackend::remote;
  cfg.endpoint = url;
  cfg.max_retries = 2;
  cfg.backoff_ms = 0;
  cfg.timeout_s = 5;
  cfg.fallback_local = false;
  return cfg;
}

}  // namespace

TEST(Clusters, MembershipCountsAndEmpty) {
  SidMap sids{{"A", SidTuple{{1, 2, 3}}}, {"B", SidTuple{{1, 5, 6}}}};
  auto vocab = Vocabulary::build({}, {10, 10, 10});
  auto clusters = build_token_clusters(sids, vocab);
  ASSERT_EQ(clusters.size(), 30u);
  std::size_t total = 0;
  for (const auto& c : clusters) {
    total += c.members.size();
    if (c.token == "<a_1>") { EXPECT_EQ(c.members, (std::vector<std::string>{"A", "B"})); }
    if (c.token == "<c_9>") { EXPECT_TRUE(c.members.empty()); }
  }
  EXPECT_EQ(total, 3u * sids.size());
}

TEST(Clusters, IndependentOfInsertionOrder) {
  auto vocab = Vocabulary::build({}, {4, 4});
  SidMap a, b;
  std::vector<std::pair<std::string, SidTuple>> rows;
  for (std::uint32_t i = 0; i < 12; ++i) rows.push_back({"i" + std::to_string(i), SidTuple{{i % 4, i / 4}}});
  for (const auto& r : rows) a.insert(r);
  for (auto it = rows.rbegin(); it != rows.rend(); ++it) b.insert(*it);
  auto ca = build_token_clusters(a, vocab), cb = build_token_clusters(b, vocab);
  ASSERT_EQ(ca.size(), cb.size());
  for (std::size_t i = 0; i < ca.size(); ++i) EXPECT_EQ(ca[i].members, cb[i].members);
}

TEST(Sampling, CapAboveSizeAndDeterminism) {
  auto c = cluster_of("<a_0>", {"x", "y", "z"});
  auto s = sample_cluster(c, 10, 4);
  std::sort(s.begin(), s.end());
  EXPECT_EQ(s, c.members);
  auto big = cluster_of("<a_1>", {"a", "b", "c", "d", "e", "f", "g", "h"});
  EXPECT_EQ(sample_cluster(big, 3, 99), sample_cluster(big, 3, 99));
  EXPECT_EQ(sample_cluster(big, 3, 99).size(), 3u);
}

TEST(Sampling, UniformOverReseededDraws) {
  std::vector<std::string> members;
  for (int i = 0; i < 10; ++i) members.push_back("m" + std::to_string(i));
  auto c = cluster_of("<b_4>", members);
  std::map<std::string, int> count;
  const int draws = 10000;
  const std::size_t cap = 3;
  for (int s = 0; s < draws; ++s)
    for (const auto& m : sample_cluster(c, cap, static_cast<std::uint64_t>(s))) ++count[m];
  const double p = static_cast<double>(cap) / 10.0, expected = draws * p;
  const double sigma = std::sqrt(draws * p * (1 - p));
  double chi2 = 0;
  for (const auto& m : members) {
    EXPECT_LT(std::abs(count[m] - expected), 3 * sigma) << m;
    chi2 += (count[m] - expected) * (count[m] - expected) / expected;
  }
  EXPECT_LT(chi2, 27.88);  // 9 dof, p = 0.001
}

TEST(Prompt, RendersTemplateSlots) {
  auto cat = toy_catalog();
  auto p = render_extraction_prompt({"A", "B"}, cat);
  EXPECT_NE(p.find("Senior Product Content Analyst"), std::string::npos);
  EXPECT_NE(p.find("Ceramic capacitor pack"), std::string::npos);
  EXPECT_NE(p.find("Volt"), std::string::npos);
  EXPECT_EQ(p.find("{items}"), std::string::npos);
  EXPECT_EQ(p.find("{category}"), std::string::npos);
}

TEST(LocalBackend, HandComputedTfIdf) {
  auto cat = toy_catalog();
  TfIdfIndex idx(cat);
  // "capacitor" occurs in 2 of 4 documents; idf = ln(4/2). In {A, B} it has
  // tf 4, score 4 ln 2 = 2.77, above every single-document term (ln 4 = 1.39).
  EXPECT_DOUBLE_EQ(idx.idf("capacitor"), std::log(2.0));
  EXPECT_DOUBLE_EQ(idx.idf("ceramic"), std::log(4.0));
  EXPECT_DOUBLE_EQ(idx.idf("absent"), 0.0);
  auto top = idx.top_terms({"A", "B"}, cat, 3);
  ASSERT_EQ(top.size(), 3u);
  EXPECT_EQ(top[0], "capacitor");
  // Remaining ties at ln 4 break alphabetically.
  EXPECT_EQ(top[1], "ceramic");
  EXPECT_EQ(top[2], "film");

  LocalExtractor ex(cat, 15);
  auto s = ex.extract(cluster_of("<a_1>", {"A", "B"}), cat);
  EXPECT_EQ(s.keywords.front(), "capacitor");
  EXPECT_EQ(s.description.rfind("Items in this group share: capacitor", 0), 0u);
  std::set<std::string> uniq(s.keywords.begin(), s.keywords.end());
  EXPECT_EQ(uniq.size(), s.keywords.size());
  EXPECT_FALSE(uniq.count(""));
}

TEST(Keywords, NormalizedDedupedLowercase) {
  EXPECT_EQ(normalize_keywords({"Guitar", " guitar ", "", "Steel"}), (std::vector<std::string>{"guitar", "steel"}));
}

TEST(Cache, HitIsIdenticalWithZeroCalls) {
  TempDir dir("extract_cache");
  FakeEndpoint ep(R"({"description":"Acoustic instruments.","keywords":["Guitar","strings"]})");
  auto cat = toy_catalog();
  auto cfg = remote_cfg(ep.url());
  RemoteExtractor remote(cfg);
  auto c = cluster_of("<a_1>", {"A", "B"});
  auto first = extract_semantics(c, cat, remote, dir.path());
  EXPECT_EQ(ep.calls.load(), 1);
  EXPECT_EQ(first.keywords, (std::vector<std::string>{"guitar", "strings"}));
  auto second = extract_semantics(c, cat, remote, dir.path());
  EXPECT_EQ(ep.calls.load(), 1);
  EXPECT_EQ(semantics_to_json(second), semantics_to_json(first));
  auto req = nlohmann::json::parse(ep.last_request);
  EXPECT_EQ(req.at("model"), "deepseek-chat");
  EXPECT_NE(req.at("prompt").get<std::string>().find("Film capacitor kit"), std::string::npos);
}

TEST(RemoteBackend, MalformedJsonExhaustsRetries) {
  FakeEndpoint ep("this is not json");
  auto cat = toy_catalog();
  RemoteExtractor remote(remote_cfg(ep.url()));
  EXPECT_THROW(remote.extract(cluster_of("<a_1>", {"A"}), cat), ExtractionError);
  EXPECT_EQ(ep.calls.load(), 3);
  EXPECT_EQ(remote.calls(), 3u);
}

TEST(RemoteBackend, ChatEnvelopeAccepted) {
  auto s = parse_extraction_response(
      R"({"choices":[{"message":{"content":"```json\n{\"description\":\"D.\",\"keywords\":[\"k\"]}\n```"}}]})", "<a_0>");
  EXPECT_EQ(s.description, "D.");
  EXPECT_EQ(s.keywords, (std::vector<std::string>{"k"}));
}

TEST(RemoteBackend, FallsBackToLocalWhenConfigured) {
  FakeEndpoint ep("{}");
  auto cat = toy_catalog();
  auto cfg = remote_cfg(ep.url());
  cfg.fallback_local = true;
  auto out = extract_all({cluster_of("<a_1>", {"A", "B"}), cluster_of("<a_2>", {})}, cat, cfg);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].keywords.front(), "capacitor");
  cfg.fallback_local = false;
  EXPECT_THROW(extract_all({cluster_of("<a_1>", {"A", "B"})}, cat, cfg), ExtractionError);
}

TEST(SemanticsFile, RoundTripAndParseError) {
  std::vector<TokenSemantics> sems{{"<a_0>", "One.", {"x", "y"}}, {"<b_3>", "Two.", {}}};
  EXPECT_EQ(parse_semantics_file(format_semantics_file(sems)), sems);
  EXPECT_THROW(parse_semantics_file("{\"token\":1}\n"), ParseError);
}
