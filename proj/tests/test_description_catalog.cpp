#include <gtest/gtest.h>

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <thread>

#include "sap/chat_client.hpp"
#include "sap/description_catalog.hpp"

namespace fs = std::filesystem;
using sap::ClassEntry;
using sap::DescriptionCatalog;

namespace {

fs::path scratch_dir(const std::string &name) {
  auto dir = fs::temp_directory_path() / ("sap_catalog_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_file(const fs::path &p, const std::string &text) {
  std::ofstream(p, std::ios::binary) << text;
}

std::string read_file(const fs::path &p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

class CountingProvider : public sap::DescriptionProvider {
 public:
  explicit CountingProvider(std::string answer) : answer_(std::move(answer)) {}
  std::string complete(const std::string &query) override {
    ++calls;
    last_query = query;
    return answer_;
  }
  int calls = 0;
  std::string last_query;

 private:
  std::string answer_;
};

class FailingProvider : public sap::DescriptionProvider {
 public:
  std::string complete(const std::string &) override { throw std::runtime_error("connection refused"); }
};

const char *kBreastStroke =
    "1. Arms moving in a circular motion\n"
    "2. Kicking legs in a frog-like motion\n"
    "3. Head above water during stroke\n"
    "4. Positioned horizontally in the water\n"
    "5. Pushing water forward and outwards\n";

// Minimal chat-completions endpoint on localhost.
class LocalChatServer {
 public:
  explicit LocalChatServer(std::string content) {
    server_.Post("/v1/chat/completions", [this, content](const httplib::Request &req, httplib::Response &res) {
      ++requests;
      auth = req.get_header_value("Authorization");
      body = nlohmann::json::parse(req.body);
      const nlohmann::json reply = {{"choices", {{{"message", {{"role", "assistant"}, {"content", content}}}}}}};
      res.set_content(reply.dump(), "application/json");
    });
    port = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~LocalChatServer() {
    server_.stop();
    thread_.join();
  }
  std::string endpoint() const { return "http://127.0.0.1:" + std::to_string(port) + "/v1/chat/completions"; }

  int port = 0;
  std::atomic<int> requests{0};
  std::string auth;
  nlohmann::json body;

 private:
  httplib::Server server_;
  std::thread thread_;
};

}  // namespace

TEST(Templates, ClassTemplatesExact) {
  EXPECT_EQ(sap::compose_class_templates("cat", {"has whiskers", "has a large tail"}),
            (std::vector<std::string>{"a photo of a cat, which has whiskers", "a photo of a cat, which has a large tail"}));
  EXPECT_EQ(sap::compose_class_templates("cat", {}), (std::vector<std::string>{"a photo of a cat"}));
  EXPECT_EQ(sap::compose_class_templates("dog", {"barks"}), (std::vector<std::string>{"a photo of a dog, which barks"}));
  EXPECT_EQ(sap::compose_class_templates("owl", {}), (std::vector<std::string>{"a photo of an owl"}));
}

TEST(Templates, OutOfVocabularyTemplatesExact) {
  EXPECT_EQ(sap::compose_ovc_templates({"has a yellow body"}),
            (std::vector<std::string>{"a photo of an object, which has a yellow body"}));
  EXPECT_EQ(sap::compose_ovc_templates({}), (std::vector<std::string>{"a photo of an object"}));
  EXPECT_EQ(sap::compose_ovc_templates({"has round red cheeks"}),
            (std::vector<std::string>{"a photo of an object, which has round red cheeks"}));
}

TEST(Templates, JoinerIsConfigurable) {
  sap::PromptTemplate t;
  t.description_joiner = " which {description}";
  EXPECT_EQ(sap::compose_class_templates("cat", {"has whiskers"}, t)[0], "a photo of a cat which has whiskers");
  t.description_joiner = "no slot";
  EXPECT_THROW(sap::compose_class_templates("cat", {"x"}, t), std::invalid_argument);
  sap::PromptTemplate two;
  two.base_pattern = "{class} {class}";
  EXPECT_THROW(two.validate(), std::invalid_argument);
}

TEST(Templates, CountIsMaxOfDescriptionsAndOne) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::string> d(rng() % 6);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = "feature " + std::to_string(i);
    EXPECT_EQ(sap::compose_class_templates("zebra", d).size(), std::max<std::size_t>(d.size(), 1));
  }
}

TEST(Catalog, LoadSingleEntry) {
  const auto dir = scratch_dir("single");
  write_file(dir / "c.json", R"({"classes": {"cat": ["has whiskers"]}})");
  const auto c = sap::load_catalog(dir / "c.json");
  EXPECT_EQ(c.size(), 1u);
  EXPECT_EQ(c.indices("cat"), (std::vector<std::size_t>{0}));
}

TEST(Catalog, SharedDescriptionIsStoredOnce) {
  const auto dir = scratch_dir("shared");
  write_file(dir / "c.json",
             R"({"dataset": "pets", "classes": {"cat": ["has whiskers", "has a large tail"], "lynx": ["has whiskers"]}})");
  const auto c = sap::load_catalog(dir / "c.json");
  EXPECT_EQ(c.size(), 2u);
  EXPECT_EQ(c.indices("lynx"), (std::vector<std::size_t>{0}));
  EXPECT_EQ(c.indices("cat"), (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(c.dataset_id(), "pets");
}

TEST(Catalog, EmptyClassesMap) {
  const auto c = DescriptionCatalog::from_json_string(R"({"classes": {}})");
  EXPECT_EQ(c.size(), 0u);
  EXPECT_TRUE(c.class_names().empty());
}

TEST(Catalog, Errors) {
  EXPECT_THROW(sap::load_catalog("/nonexistent/catalog.json"), sap::CatalogError);
  EXPECT_THROW(DescriptionCatalog::from_json_string("{not json"), sap::CatalogError);
  EXPECT_THROW(DescriptionCatalog::from_json_string(R"({"classes": []})"), sap::CatalogError);
  try {
    DescriptionCatalog::from_json_string(R"({"classes": {"cat": ["a"], "dog": [], "cat": ["b"]}})");
    FAIL() << "duplicate accepted";
  } catch (const sap::CatalogError &e) {
    EXPECT_NE(std::string(e.what()).find("'cat'"), std::string::npos);
  }
  EXPECT_THROW(DescriptionCatalog("x", {{"a", {}}, {"a", {}}}), sap::CatalogError);
}

TEST(Catalog, NormalizationAndIntraClassDedup) {
  DescriptionCatalog c("d", {{"cat", {"  has   whiskers ", "has whiskers", "   ", "Has whiskers"}}});
  EXPECT_EQ(c.descriptions("cat"), (std::vector<std::string>{"has whiskers", "Has whiskers"}));
  EXPECT_EQ(c.size(), 2u);
}

TEST(Catalog, UnionPropertiesOnRandomCatalogs) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<ClassEntry> entries;
    const std::size_t classes = rng() % 6;
    std::set<std::string> raw_union;
    for (std::size_t k = 0; k < classes; ++k) {
      ClassEntry e{"class" + std::to_string(k), {}};
      const std::size_t n = rng() % 5;
      for (std::size_t i = 0; i < n; ++i) {
        std::string d = "feature " + std::to_string(rng() % 8);
        if (rng() % 3 == 0) d = "  " + d + " ";
        e.descriptions.push_back(d);
        raw_union.insert(sap::normalize_description(d));
      }
      entries.push_back(e);
    }
    DescriptionCatalog c("r", entries);
    const auto &u = c.union_descriptions();
    EXPECT_EQ(std::set<std::string>(u.begin(), u.end()).size(), u.size());
    EXPECT_EQ(std::set<std::string>(u.begin(), u.end()), raw_union);
    for (const auto &e : c.entries()) {
      const auto &idx = c.indices(e.class_name);
      ASSERT_EQ(idx.size(), e.descriptions.size());
      for (std::size_t i = 0; i < idx.size(); ++i) {
        ASSERT_LT(idx[i], c.size());
        EXPECT_EQ(u[idx[i]], e.descriptions[i]);
      }
    }
  }
}

TEST(Catalog, RoundTripIsByteIdentical) {
  const auto dir = scratch_dir("roundtrip");
  write_file(dir / "in.json", R"({"classes":{"zebra":["has stripes"],"cat":["has whiskers","has  a tail"]},"dataset":"d"})");
  const auto c = sap::load_catalog(dir / "in.json");
  sap::save_catalog(c, dir / "a.json");
  sap::save_catalog(sap::load_catalog(dir / "a.json"), dir / "b.json");
  const auto a = read_file(dir / "a.json");
  EXPECT_EQ(a, read_file(dir / "b.json"));
  EXPECT_EQ(a.back(), '\n');
  EXPECT_EQ(sap::load_catalog(dir / "b.json").content_hash(), c.content_hash());
  // File order of classes is kept, so the union order survives the trip.
  EXPECT_EQ(sap::load_catalog(dir / "b.json").union_descriptions(), c.union_descriptions());
}

TEST(Parsing, NumberedAndBulletedLists) {
  EXPECT_EQ(sap::parse_description_list("1. A\n2. B"), (std::vector<std::string>{"A", "B"}));
  EXPECT_EQ(sap::parse_description_list("- x\n* y\n\n3) z\r\n"), (std::vector<std::string>{"x", "y", "z"}));
  EXPECT_TRUE(sap::parse_description_list("").empty());
}

TEST(Fetch, QueryStringAndCacheHit) {
  const auto dir = scratch_dir("cache");
  CountingProvider provider(kBreastStroke);
  const auto first = sap::fetch_descriptions("ucf101", "breast stroke", &provider, dir);
  EXPECT_EQ(provider.last_query,
            "What are useful visual features for distinguishing a breast stroke in a photo? Answer concisely.");
  EXPECT_EQ(first, (std::vector<std::string>{"Arms moving in a circular motion", "Kicking legs in a frog-like motion",
                                             "Head above water during stroke", "Positioned horizontally in the water",
                                             "Pushing water forward and outwards"}));
  EXPECT_TRUE(fs::exists(sap::description_cache_path(dir, "ucf101", "breast stroke")));

  CountingProvider second_provider("1. something else");
  EXPECT_EQ(sap::fetch_descriptions("ucf101", "breast stroke", &second_provider, dir), first);
  EXPECT_EQ(second_provider.calls, 0);
  EXPECT_EQ(sap::fetch_descriptions("ucf101", "breast stroke", nullptr, dir), first);
}

TEST(Fetch, EmptyResponseIsAnEmptyList) {
  const auto dir = scratch_dir("empty");
  CountingProvider provider("");
  EXPECT_TRUE(sap::fetch_descriptions("d", "cat", &provider, dir).empty());
}

TEST(Fetch, FailureWithoutCacheNamesTheClass) {
  const auto dir = scratch_dir("fail");
  FailingProvider provider;
  try {
    sap::fetch_descriptions("d", "tree frog", &provider, dir);
    FAIL() << "no error";
  } catch (const sap::ProviderError &e) {
    EXPECT_EQ(e.class_name(), "tree frog");
    EXPECT_NE(std::string(e.what()).find("tree frog"), std::string::npos);
  }
  EXPECT_THROW(sap::fetch_descriptions("d", "owl", nullptr, dir), sap::ProviderError);
}

TEST(ChatClient, TalksToChatCompletionsEndpoint) {
  LocalChatServer server(kBreastStroke);
  sap::ChatClientConfig cfg;
  cfg.endpoint = server.endpoint();
  cfg.model = "test-model";
  sap::ChatCompletionClient client(cfg, "secret");
  const auto dir = scratch_dir("http");
  const auto out = sap::fetch_descriptions("ucf101", "breast stroke", &client, dir);
  EXPECT_EQ(out.size(), 5u);
  EXPECT_EQ(out.front(), "Arms moving in a circular motion");
  EXPECT_EQ(server.requests.load(), 1);
  EXPECT_EQ(server.auth, "Bearer secret");
  EXPECT_EQ(server.body["model"], "test-model");
  EXPECT_EQ(server.body["messages"][0]["content"],
            "What are useful visual features for distinguishing a breast stroke in a photo? Answer concisely.");
}

TEST(ChatClient, UnreachableEndpointBecomesProviderError) {
  sap::ChatClientConfig cfg;
  cfg.endpoint = "http://127.0.0.1:1/v1/chat/completions";
  cfg.timeout_seconds = 2;
  sap::ChatCompletionClient client(cfg, "k");
  EXPECT_THROW(sap::fetch_descriptions("d", "cat", &client, scratch_dir("down")), sap::ProviderError);
}

TEST(ChatClient, MissingCredentialNamesTheVariable) {
  ::unsetenv("SAP_LLM_API_KEY");
  try {
    sap::ChatCompletionClient::from_environment({});
    FAIL() << "no error";
  } catch (const std::runtime_error &e) {
    EXPECT_NE(std::string(e.what()).find("SAP_LLM_API_KEY"), std::string::npos);
  }
}
