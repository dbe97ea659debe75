#include <set>

#include "test_util.hpp"
#include "tsrec/catalog.hpp"

using namespace tsrec;

namespace {

ItemCatalog catalog_of(const std::string& jsonl) {
  std::istringstream in(jsonl);
  return parse_catalog(in);
}

InteractionLog log_of(const std::vector<std::tuple<std::string, std::string, std::int64_t>>& ev) {
  InteractionLog log;
  for (const auto& [u, i, t] : ev) log.events.push_back({u, i, t});
  return log;
}

}  // namespace

TEST(Catalog, ReadsTwoItems) {
  auto c = catalog_of(R"({"item_id":"A","title":"Alpha","description":"first"}
{"item_id":"B","title":"Beta","description":"second","brand":"X","categories":["Tools","Drills"]}
)");
  ASSERT_EQ(c.items.size(), 2u);
  EXPECT_EQ(c.item("A").title, "Alpha");
  EXPECT_EQ(c.item("B").brand, "X");
  EXPECT_EQ(c.item("B").categories, (std::vector<std::string>{"Tools", "Drills"}));
}

TEST(Catalog, DuplicateIdIsConflict) {
  EXPECT_THROW(catalog_of(R"({"item_id":"A","title":"x","description":""}
{"item_id":"A","title":"y","description":""}
)"),
               ConflictError);
}

TEST(Catalog, EmptyFileGivesEmptyCatalog) {
  auto c = catalog_of("");
  EXPECT_TRUE(c.items.empty());
}

TEST(Catalog, MalformedLineReportsLine) {
  try {
    catalog_of("{\"item_id\":\"A\",\"title\":\"x\",\"description\":\"\"}\nnot json\n");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line, 2u);
  }
}

TEST(Embeddings, ReadsMatrix) {
  auto c = catalog_of(R"({"item_id":"A","title":"a","description":""}
{"item_id":"B","title":"b","description":""}
{"item_id":"C","title":"c","description":""}
)");
  std::istringstream in("3 4\nC 9 10 11 12\nA 1 2 3 4\nB 5 6 7 8\n");
  auto m = parse_embeddings_text(in, c);
  ASSERT_EQ(m.n_items(), 3u);
  ASSERT_EQ(m.dim(), 4u);
  EXPECT_EQ(m.item_order, (std::vector<std::string>{"A", "B", "C"}));
  EXPECT_EQ(m.rows(0, 0), 1.0);
  EXPECT_EQ(m.rows(2, 3), 12.0);
}

TEST(Embeddings, MissingItemNamed) {
  auto c = catalog_of(R"({"item_id":"A","title":"a","description":""}
{"item_id":"D","title":"d","description":""}
)");
  std::istringstream in("1 2\nA 1 2\n");
  try {
    parse_embeddings_text(in, c);
    FAIL() << "expected CoverageError";
  } catch (const CoverageError& e) {
    EXPECT_NE(std::string(e.what()).find("D"), std::string::npos);
  }
}

TEST(Embeddings, NanRowIsDataErrorWithIndex) {
  auto c = catalog_of(R"({"item_id":"A","title":"a","description":""}
{"item_id":"B","title":"b","description":""}
)");
  std::istringstream in("2 2\nA 1 2\nB nan 3\n");
  try {
    parse_embeddings_text(in, c);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("row 1"), std::string::npos);
  }
}

TEST(Embeddings, BinaryRoundTrip) {
  auto c = catalog_of(R"({"item_id":"A","title":"a","description":""}
{"item_id":"B","title":"b","description":""}
)");
  EmbeddingMatrix m;
  m.item_order = {"A", "B"};
  m.rows.resize(2, 3);
  m.rows << 0.5, -1.25, 2, 3, 4.75, -8;
  auto back = parse_embeddings_binary(format_embeddings_binary(m), c);
  EXPECT_EQ(back.rows, m.rows);
  std::istringstream in(format_embeddings_text(m));
  EXPECT_EQ(parse_embeddings_text(in, c).rows, m.rows);
}

TEST(Filter, ShortUserRemoved) {
  ItemCatalog cat;
  for (auto id : {"a", "b", "c", "d", "e"}) cat.items[id] = Item{id, id, "", "", {}};
  std::vector<std::tuple<std::string, std::string, std::int64_t>> ev;
  for (int u = 0; u < 5; ++u)
    for (int i = 0; i < 5; ++i) ev.emplace_back("u" + std::to_string(u), std::string(1, static_cast<char>('a' + i)), i);
  for (int i = 0; i < 4; ++i) ev.emplace_back("short", std::string(1, static_cast<char>('a' + i)), i);
  auto out = filter_and_sequence(log_of(ev), cat, 5);
  EXPECT_EQ(out.sequences.size(), 5u);
  EXPECT_FALSE(out.sequences.count("short"));
}

TEST(Filter, AllQualifyUnchanged) {
  ItemCatalog cat;
  for (auto id : {"a", "b", "c", "d", "e"}) cat.items[id] = Item{id, id, "", "", {}};
  std::vector<std::tuple<std::string, std::string, std::int64_t>> ev;
  for (int u = 0; u < 5; ++u)
    for (int i = 0; i < 5; ++i) ev.emplace_back("u" + std::to_string(u), std::string(1, static_cast<char>('a' + i)), 10 - i);
  auto out = filter_and_sequence(log_of(ev), cat, 5);
  EXPECT_EQ(out.items.size(), 5u);
  EXPECT_EQ(out.sequences.size(), 5u);
  EXPECT_EQ(out.sequences.at("u0"), (std::vector<std::string>{"e", "d", "c", "b", "a"}));
}

// Reference k-core: repeatedly recount from scratch over the surviving events.
std::set<std::pair<std::string, std::string>> brute_kcore(const InteractionLog& log, std::size_t k) {
  std::set<std::pair<std::string, std::string>> live;
  for (const auto& e : log.events) live.insert({e.user_id, e.item_id});
  while (true) {
    std::map<std::string, std::size_t> uc, ic;
    for (const auto& [u, i] : live) ++uc[u], ++ic[i];
    std::set<std::pair<std::string, std::string>> next;
    for (const auto& [u, i] : live)
      if (uc[u] >= k && ic[i] >= k) next.insert({u, i});
    if (next == live) return live;
    live = next;
  }
}

TEST(Filter, ChainIteratesToFixpoint) {
  // u1 and u2 have 2 events each over items x,y; u3 has 2 events over x,z.
  // min_count=2: z has one event -> dropped -> u3 falls to 1 -> dropped ->
  // x now has 2 events (u1,u2), y has 2: stable.
  ItemCatalog cat;
  for (auto id : {"x", "y", "z"}) cat.items[id] = Item{id, id, "", "", {}};
  auto log = log_of({{"u1", "x", 1}, {"u1", "y", 2}, {"u2", "x", 1}, {"u2", "y", 2}, {"u3", "x", 1}, {"u3", "z", 2}});
  auto out = filter_and_sequence(log, cat, 2);
  auto oracle = brute_kcore(log, 2);
  std::set<std::pair<std::string, std::string>> got;
  for (const auto& [u, s] : out.sequences)
    for (const auto& i : s) got.insert({u, i});
  EXPECT_EQ(got, oracle);
  EXPECT_FALSE(out.sequences.count("u3"));
  EXPECT_FALSE(out.items.count("z"));
}

TEST(Filter, RandomLogsMatchBruteForce) {
  Rng rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    ItemCatalog cat;
    for (int i = 0; i < 12; ++i) cat.items["i" + std::to_string(i)] = Item{"i" + std::to_string(i), "t", "", "", {}};
    InteractionLog log;
    std::set<std::pair<std::string, std::string>> seen;
    for (int e = 0; e < 120; ++e) {
      std::string u = "u" + std::to_string(rng.below(15)), i = "i" + std::to_string(rng.below(12));
      if (seen.insert({u, i}).second) log.events.push_back({u, i, static_cast<std::int64_t>(e)});
    }
    auto out = filter_and_sequence(log, cat, 4);
    std::set<std::pair<std::string, std::string>> got;
    for (const auto& [u, s] : out.sequences)
      for (const auto& i : s) got.insert({u, i});
    EXPECT_EQ(got, brute_kcore(log, 4)) << "trial " << trial;
  }
}

TEST(Filter, UnknownItemIsCoverageError) {
  ItemCatalog cat;
  cat.items["a"] = Item{"a", "a", "", "", {}};
  EXPECT_THROW(filter_and_sequence(log_of({{"u", "zzz", 1}}), cat, 1), CoverageError);
}
