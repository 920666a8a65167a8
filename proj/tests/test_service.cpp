#include <gtest/gtest.h>

#include <filesystem>
#include <thread>

#include "protot/service.hpp"
// after Eigen: httplib leaks macros
#include "httplib.h"

using namespace protot;
using nlohmann::json;

namespace {

const BpeVocab& vocab() {
  static const BpeVocab v = BpeVocab::train(
      std::vector<std::string>{"the cat sat on the mat", "the dog sat on the log", "a cat and a dog"}, 290);
  return v;
}

LanguageModel<double> model(std::uint64_t seed = 1) {
  ModelConfig c;
  c.hidden = 8;
  c.layers = 2;
  c.prototypes = 4;
  c.ctx = 16;
  c.vocab_size = vocab().size();
  c.dropout = 0;
  Rng rng(seed);
  auto m = LanguageModel<double>::init(c, rng);
  fill_normal(m.embedding, 0.5, rng);
  return m;
}

std::vector<ActivationTrace> traces(const LanguageModel<double>& m) {
  return capture(m, {vocab().encode("the cat sat on the mat"), vocab().encode("a dog"),
                     vocab().encode("the dog sat on the log")});
}

ExplorerService<double> make_service() {
  auto m = model();
  auto t = traces(m);
  return ExplorerService<double>(std::move(m), vocab(), std::move(t), "abc");
}

json get(const ExplorerService<double>& s, const std::string& path, const QueryParams& q = {}, int status = 200) {
  const auto r = s.handle("GET", path, q, "");
  EXPECT_EQ(r.status, status) << path << ": " << r.body;
  return json::parse(r.body);
}

json post(const ExplorerService<double>& s, const std::string& path, const json& body, int status = 200) {
  const auto r = s.handle("POST", path, {}, body.dump());
  EXPECT_EQ(r.status, status) << path << ": " << r.body;
  return json::parse(r.body);
}

}  // namespace

TEST(Service, ConfigEcho) {
  const auto s = make_service();
  const auto j = get(s, "/api/config");
  EXPECT_EQ(j["h"], 8);
  EXPECT_EQ(j["L"], 2);
  EXPECT_EQ(j["R"], 4);
  EXPECT_EQ(j["grid"]["layers"], 2);
  EXPECT_EQ(j["grid"]["prototypes"], 4);
  EXPECT_EQ(j["checkpoint"], "abc");
  EXPECT_EQ(j["traces"], 3);
}

TEST(Service, LayerMetricsMatchLibrary) {
  const auto s = make_service();
  const auto t = traces(s.model());
  const auto j = get(s, "/api/prototypes/1");
  ASSERT_EQ(j["prototypes"].size(), 4u);
  for (int k = 0; k < 4; ++k) {
    const auto& p = j["prototypes"][k];
    EXPECT_EQ(p["k"], k);
    EXPECT_EQ(p["half_life"].get<double>(), half_life(s.model().blocks[1].mixer.gamma(k)));
    const auto cols = prototype_columns(t, 1, k);
    EXPECT_EQ(p["gini"].get<double>(), gini(cols).value);
    EXPECT_EQ(p["entropy"].get<double>(), entropy(cols).value);
    EXPECT_EQ(p["l1_sparsity"].get<double>(), l1_sparsity(cols).value);
  }
  get(s, "/api/prototypes/2", {}, 400);
  get(s, "/api/prototypes/x", {}, 400);
}

TEST(Service, TopSequencesReport) {
  const auto s = make_service();
  const auto j = get(s, "/api/prototypes/0/2/top", {{"n", "2"}});
  const auto ref = top_sequences(traces(s.model()), 0, 2, 2);
  ASSERT_EQ(j["top_sequences"].size(), 2u);
  EXPECT_EQ(j["top_sequences"][0]["seq_id"], ref.top_sequences[0].seq_id);
  EXPECT_EQ(j["top_sequences"][0]["write"].get<std::vector<double>>(), ref.top_sequences[0].write);
  EXPECT_EQ(j["top_sequences"][1]["read"].get<std::vector<double>>(), ref.top_sequences[1].read);
  EXPECT_FALSE(j["short"].get<bool>());
  EXPECT_TRUE(get(s, "/api/prototypes/0/2/top", {{"n", "10"}})["short"].get<bool>());
  EXPECT_EQ(get(s, "/api/prototypes/0/2/top")["n"], 10);
  get(s, "/api/prototypes/0/4/top", {}, 400);
  get(s, "/api/prototypes/0/1/top", {{"n", "zero"}}, 400);
  get(s, "/api/prototypes/0/1/top", {{"n", "0"}}, 400);
}

TEST(Service, IdempotentBodies) {
  const auto s = make_service();
  for (const char* path : {"/api/config", "/api/prototypes/0", "/api/prototypes/1/3/top"})
    EXPECT_EQ(s.handle("GET", path, {}, "").body, s.handle("GET", path, {}, "").body);
  const json req = {{"layer", 1}, {"k", 0}, {"mode", "reinit"}, {"seed", 4}, {"context", "the cat sat on "},
                    {"target", "the "}};
  EXPECT_EQ(s.handle("POST", "/api/intervene", {}, req.dump()).body,
            s.handle("POST", "/api/intervene", {}, req.dump()).body);
}

TEST(Service, InterveneModes) {
  const auto s = make_service();
  json req = {{"layer", 1}, {"k", 2}, {"mode", "none"}, {"context", "the cat sat on "}, {"target", "the "}};
  auto j = post(s, "/api/intervene", req);
  EXPECT_EQ(j["delta_pp"], 0.0);
  EXPECT_EQ(j["delta_rel"], 0.0);

  const auto before = forward(s.model(), std::span<const TokenId>(vocab().encode("the cat"))).logits;
  for (const char* mode : {"reinit", "mask-write", "mask_read"}) {
    req["mode"] = mode;
    j = post(s, "/api/intervene", req);
    EXPECT_NEAR(j["delta_pp"].get<double>(), (j["p_mod"].get<double>() - j["p_base"].get<double>()) * 100, 1e-12);
  }
  const auto after = forward(s.model(), std::span<const TokenId>(vocab().encode("the cat"))).logits;
  EXPECT_EQ((before - after).cwiseAbs().maxCoeff(), 0.0);

  req["mode"] = "mask_write";
  req["target"] = "zebra crossing";
  EXPECT_EQ(post(s, "/api/intervene", req, 400)["error"], "domain_error");
  req["target"] = "the ";
  req["layer"] = 5;
  post(s, "/api/intervene", req, 400);
  req["layer"] = 1;
  req["mode"] = "explode";
  post(s, "/api/intervene", req, 400);
  req.erase("context");
  req["mode"] = "none";
  const auto missing = post(s, "/api/intervene", req, 400);
  EXPECT_EQ(missing["error"], "bad_request");
  EXPECT_NE(missing["message"].get<std::string>().find("context"), std::string::npos);
}

TEST(Service, GenerateDeterministicAndCapture) {
  const auto s = make_service();
  const json req = {{"prompt", "the cat"}, {"max_new", 5}, {"strategy", "greedy"}, {"capture", true}};
  const auto a = s.handle("POST", "/api/generate", {}, req.dump());
  const auto b = s.handle("POST", "/api/generate", {}, req.dump());
  ASSERT_EQ(a.status, 200) << a.body;
  EXPECT_EQ(a.body, b.body);
  const auto j = json::parse(a.body);
  const auto prompt_len = j["prompt_tokens"].get<std::size_t>();
  const auto generated = j["tokens"].size() - prompt_len;
  ASSERT_EQ(j["gates"].size(), generated);
  if (generated > 0) {
    EXPECT_EQ(j["gates"][0]["write"].size(), 2u);
    EXPECT_EQ(j["gates"][0]["read"][1].size(), 4u);
  }
  // random weights emit stray bytes; they come back as U+FFFD rather than a 500
  const json decoded = vocab().decode(j["tokens"].get<std::vector<TokenId>>());
  EXPECT_EQ(j["text"].dump(), decoded.dump(-1, ' ', false, json::error_handler_t::replace));

  json sampled = {{"prompt", "the"}, {"max_new", 6}, {"strategy", "top-k"}, {"top_k", 5}, {"seed", 9}};
  EXPECT_EQ(s.handle("POST", "/api/generate", {}, sampled.dump()).body,
            s.handle("POST", "/api/generate", {}, sampled.dump()).body);
  EXPECT_FALSE(json::parse(s.handle("POST", "/api/generate", {}, sampled.dump()).body).contains("gates"));
  sampled["strategy"] = "beam";
  post(s, "/api/generate", sampled, 400);
}

TEST(Service, ErrorsAreJson) {
  const auto s = make_service();
  auto r = s.handle("POST", "/api/generate", {}, "{not json");
  EXPECT_EQ(r.status, 400);
  auto j = json::parse(r.body);
  EXPECT_EQ(j["error"], "bad_request");
  EXPECT_TRUE(j.contains("message"));
  r = s.handle("POST", "/api/generate", {}, "[1, 2]");
  EXPECT_EQ(r.status, 400);
  r = s.handle("GET", "/api/nothing", {}, "");
  EXPECT_EQ(r.status, 404);
  EXPECT_EQ(json::parse(r.body)["error"], "not_found");
  EXPECT_EQ(s.handle("DELETE", "/api/config", {}, "").status, 404);
}

TEST(Service, WithoutTraces) {
  auto m = model();
  const ExplorerService<double> s(std::move(m), vocab(), {});
  const auto j = get(s, "/api/prototypes/0");
  EXPECT_TRUE(j["prototypes"][0]["gini"].is_null());
  const auto top = get(s, "/api/prototypes/0/1/top");
  EXPECT_TRUE(top["short"].get<bool>());
  EXPECT_TRUE(top["top_sequences"].empty());
}

TEST(Service, LiveServerRoundTrip) {
  const auto s = make_service();
  HttpServer server(s);
  const int port = server.bind("127.0.0.1", 0);
  ASSERT_GT(port, 0);
  std::thread t([&] { server.listen(); });
  server.wait_until_ready();

  httplib::Client cli("127.0.0.1", port);
  auto res = cli.Get("/api/config");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  EXPECT_EQ(res->body, s.handle("GET", "/api/config", {}, "").body);
  EXPECT_NE(res->get_header_value("Content-Type").find("application/json"), std::string::npos);

  res = cli.Get("/api/prototypes/1/0/top?n=1");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->body, s.handle("GET", "/api/prototypes/1/0/top", {{"n", "1"}}, "").body);

  const json req = {{"layer", 0}, {"k", 1}, {"mode", "none"}, {"context", "the dog sat on "}, {"target", "the "}};
  res = cli.Post("/api/intervene", req.dump(), "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  EXPECT_EQ(json::parse(res->body)["delta_pp"], 0.0);

  res = cli.Post("/api/intervene", "oops", "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 400);
  EXPECT_EQ(json::parse(res->body)["error"], "bad_request");

  res = cli.Get("/elsewhere");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 404);
  EXPECT_EQ(json::parse(res->body)["error"], "not_found");

  server.stop();
  t.join();
}

TEST(Service, TraceCacheKeyedByHashes) {
  const auto dir = std::filesystem::temp_directory_path() / "protot_trace_cache";
  std::filesystem::remove_all(dir);
  const auto m = model();
  const std::vector<std::vector<TokenId>> seqs{vocab().encode("the cat"), vocab().encode("a dog sat")};
  const auto first = cached_traces(m, 0x11, seqs, 0x22, dir);
  const auto path = dir / ("traces_" + hex64(0x11) + "_" + hex64(0x22) + ".jsonl");
  ASSERT_TRUE(std::filesystem::exists(path));
  // A cache hit never recomputes: a different model still gets the stored traces.
  const auto second = cached_traces(model(2), 0x11, seqs, 0x22, dir);
  EXPECT_EQ((second[1].layers[0].write - first[1].layers[0].write).cwiseAbs().maxCoeff(), 0.0);
  const auto other = cached_traces(model(2), 0x12, seqs, 0x22, dir);
  EXPECT_GT((other[1].layers[0].write - first[1].layers[0].write).cwiseAbs().maxCoeff(), 0.0);
  std::filesystem::remove_all(dir);
}
