#include <atomic>
#include <thread>

#include "doctest.h"
#include "httplib.h"
#include "hitl/error.hpp"
#include "hitl/remote_generator.hpp"

using namespace hitl;
using namespace hitl::remote;
using nlohmann::json;

namespace {

// Minimal model server: logits favour (last id + 1), the end token after id 4.
// The first `fail_first` requests get a 503.
struct StubServer {
    httplib::Server svr;
    std::thread thread;
    int port = 0;
    std::atomic<int> calls{0};
    int fail_first = 0;

    StubServer() {
        svr.Post("/v1/logits", [this](const httplib::Request &req, httplib::Response &res) {
            if (calls++ < fail_first) {
                res.status = 503;
                return;
            }
            auto ctx = json::parse(req.body).at("context").get<std::vector<int>>();
            int last = ctx.empty() ? 1 : ctx.back();
            json logits = json::array();
            for (int i = 0; i < 6; ++i)
                logits.push_back(i == (last >= 4 ? 1 : last + 1) ? 5.0 : 0.0);
            logits[0] = nullptr; // masked: pad never generated
            res.set_content(json{{"logits", logits}}.dump(), "application/json");
        });
        svr.Post("/v1/generate", [this](const httplib::Request &req, httplib::Response &res) {
            ++calls;
            auto j = json::parse(req.body);
            if (j.at("prompt") == "short") {
                res.set_content(json{{"texts", {"only one"}}}.dump(), "application/json");
                return;
            }
            json texts = json::array();
            for (int i = 0; i < j.at("n").get<int>(); ++i)
                texts.push_back("t" + std::to_string(i) + " s" + std::to_string(j.at("seed").get<std::uint64_t>() % 7));
            res.set_content(json{{"texts", texts}}.dump(), "application/json");
        });
        svr.Post("/v1/bad", [](const httplib::Request &, httplib::Response &res) { res.status = 400; });
        port = svr.bind_to_any_port("127.0.0.1");
        thread = std::thread([this] { svr.listen_after_bind(); });
        svr.wait_until_ready();
    }
    ~StubServer() {
        svr.stop();
        thread.join();
    }
    ClientConfig config() const {
        ClientConfig c;
        c.base_url = "http://127.0.0.1:" + std::to_string(port);
        c.timeout = std::chrono::milliseconds(2000);
        c.backoff = std::chrono::milliseconds(10);
        return c;
    }
};

toygen::Vocabulary vocab() { return toygen::Vocabulary::from_tokens({"<pad>", "<eos>", "a", "b", "c", "d"}); }

} // namespace

TEST_CASE("logits client drives the sampler") {
    StubServer stub;
    HttpLogitsGenerator g(stub.config(), vocab(), 10);
    auto l = g.next_logits(std::vector<sampler::TokenId>{2});
    REQUIRE(l.size() == 6);
    CHECK(l[0] == sampler::kNegInf);
    CHECK(l[3] == 5.0);
    auto out = sampler::greedy(g, g.encode("a"), 10);
    CHECK(g.decode(out) == "b c");
}

TEST_CASE("retries on 5xx, then gives up") {
    StubServer stub;
    stub.fail_first = 2;
    HttpLogitsGenerator g(stub.config(), vocab());
    CHECK(g.next_logits(std::vector<sampler::TokenId>{2}).size() == 6);
    CHECK(stub.calls == 3);

    StubServer worse;
    worse.fail_first = 10;
    HttpLogitsGenerator g2(worse.config(), vocab());
    CHECK_THROWS_AS(g2.next_logits(std::vector<sampler::TokenId>{2}), RuntimeFailure);
    CHECK(worse.calls == 3);

    CHECK_THROWS_AS(post_json(stub.config(), "/v1/bad", json::object()), RuntimeFailure);
    ClientConfig down;
    down.base_url = "http://127.0.0.1:1";
    down.retries = 1;
    down.backoff = std::chrono::milliseconds(1);
    CHECK_THROWS_AS(post_json(down, "/v1/logits", json::object()), RuntimeFailure);
}

TEST_CASE("vocabulary size mismatch is an error") {
    StubServer stub;
    HttpLogitsGenerator g(stub.config(), toygen::Vocabulary::from_tokens({"<pad>", "<eos>", "a"}));
    CHECK_THROWS_AS(g.next_logits(std::vector<sampler::TokenId>{2}), Error);
}

TEST_CASE("text client and text-generator sampling") {
    StubServer stub;
    HttpTextGenerator g(stub.config());
    auto texts = g.generate("p", 3, 0.5, 8, 4, 11);
    CHECK(texts.size() == 4);
    CHECK_THROWS_AS(g.generate("short", 3, 0.5, 8, 4, 1), Error);

    corpus::Sample s{"s1", "ctx", "q", "a", {"t0 s1"}};
    sampler::SamplerConfig cfg;
    cfg.k = 3;
    auto pool = sampler::sample_pool(g, std::span<const corpus::Sample>(&s, 1), cfg, 1);
    REQUIRE(pool.size() == 1);
    CHECK(pool[0].size() <= 25);
    CHECK_FALSE(pool[0].empty());
}
