#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <thread>

#include "json.hpp"
#include "hitl/loop.hpp"

namespace hitl::service {

struct ServiceConfig {
    std::string host = "127.0.0.1";
    int port = 8080; // 0 picks a free port
    std::filesystem::path assets_dir; // served read-only under /assets/
    std::filesystem::path ui_dir;     // optional static UI mounted at /
    std::string cors_origin = "*";
    bool shuffle = false; // queue order; grouped by sample otherwise
    std::uint64_t shuffle_seed = 0;
    std::size_t default_limit = 50;
};

// Response of one API call, independent of the transport.
struct Reply {
    int status = 200;
    nlohmann::json body;
};

// The /api/ handlers. The session must outlive the api object.
class AnnotationApi {
  public:
    AnnotationApi(loop::Session &session, ServiceConfig cfg);

    Reply queue(std::optional<std::string> limit);
    Reply post_rating(const std::string &body);
    Reply progress();
    Reply sample(const std::string &id);

  private:
    loop::Session &s_;
    ServiceConfig cfg_;
};

class AnnotationServer {
  public:
    AnnotationServer(loop::Session &session, ServiceConfig cfg);
    ~AnnotationServer();
    AnnotationServer(const AnnotationServer &) = delete;
    AnnotationServer &operator=(const AnnotationServer &) = delete;

    // Binds the socket; returns the bound port. Throws RuntimeFailure.
    int bind();
    // Serves until stop(); bind() first.
    void listen();
    // bind() plus listen() on a background thread.
    int start();
    void stop();
    int port() const { return port_; }

  private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
    int port_ = 0;
    std::thread thread_;
};

// Human-mode gate over HTTP. Polls /api/progress until the iteration's
// queue is empty. Construction checks the service is reachable.
class HttpGate : public loop::FeedbackGate {
  public:
    HttpGate(std::string base_url, std::chrono::milliseconds timeout,
             std::chrono::milliseconds poll = std::chrono::milliseconds(500));
    bool wait_drained(loop::Session &s, int iteration) override;
    nlohmann::json fetch_progress() const;

  private:
    std::string base_url_;
    std::chrono::milliseconds timeout_, poll_;
};

} // namespace hitl::service
