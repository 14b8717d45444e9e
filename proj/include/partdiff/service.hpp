#pragma once

#include <json.hpp>

#include "partdiff/pipeline.hpp"

#include <cstdint>
#include <functional>
#include <list>
#include <memory>
#include <mutex>
#include <string>
#include <unordered_map>
#include <unordered_set>

namespace partdiff {

/// WireCloud: {"points": [x0, y0, z0, x1, ...], "labels": [...], "m": m}.
nlohmann::json cloud_to_wire(const SegmentedCloud& cloud);
SegmentedCloud cloud_from_wire(const nlohmann::json& j, const std::string& class_id = {});

/// Error with an HTTP status.
struct ServiceError : std::runtime_error {
    ServiceError(int status, const std::string& message) : std::runtime_error(message), status(status) {}
    int status;
};

/// Sessions by id with least-recently-used eviction. Each session carries its
/// own mutex; callers hold it for the duration of an edit.
class SessionStore {
public:
    struct Entry {
        std::mutex mutex;
        EditSession session;
    };

    explicit SessionStore(std::size_t capacity);

    std::string insert(EditSession session);
    /// Throws ServiceError 404 for unknown ids and 410 for evicted ones.
    std::shared_ptr<Entry> get(const std::string& id);
    std::size_t size() const;
    std::size_t capacity() const { return capacity_; }

private:
    void touch(const std::string& id);

    std::size_t capacity_;
    mutable std::mutex mutex_;
    std::uint64_t next_id_ = 1;
    std::list<std::string> order_;  // most recent first
    std::unordered_map<std::string, std::pair<std::shared_ptr<Entry>, std::list<std::string>::iterator>> entries_;
    std::unordered_set<std::string> evicted_;
};

struct Response {
    int status = 200;
    nlohmann::json body;
};

struct ServiceOptions {
    std::size_t max_sessions = 64;
    /// Largest number of points in one response.
    int point_cap = 4096;
};

/// The JSON API over one checkpoint. Requests before set_model() get 503.
///
///   GET  /meta
///   POST /generate                      {n, seed}
///   POST /sessions                      {cloud}
///   POST /sessions/{id}/resample        {parts, seed}
///   POST /sessions/{id}/mix             {donor_session_ids, assignment, seed}
///   POST /sessions/{id}/interpolate     {part, target_session, steps, seed}
///   POST /sessions/{id}/transform       {constraints, seed, max_iters}
class Service {
public:
    explicit Service(ServiceOptions options = {});

    void set_model(std::shared_ptr<PartModel> model);
    bool ready() const { return static_cast<bool>(model()); }

    /// Never throws; failures become {"error": message} with a 4xx/5xx status.
    Response route_request(const std::string& method, const std::string& path, const nlohmann::json& body);

    SessionStore& sessions() { return store_; }

private:
    Response dispatch(PartModel& model, const std::string& method, const std::string& path, const nlohmann::json& body);
    Response meta(const PartModel& model) const;
    Response generate(PartModel& model, const nlohmann::json& body);
    Response create_session(PartModel& model, const nlohmann::json& body);
    Response resample(PartModel& model, const std::string& id, const nlohmann::json& body);
    Response mix(PartModel& model, const std::string& id, const nlohmann::json& body);
    Response interpolate(PartModel& model, const std::string& id, const nlohmann::json& body);
    Response transform(PartModel& model, const std::string& id, const nlohmann::json& body);
    void check_points(long long count) const;
    std::shared_ptr<PartModel> model() const;

    ServiceOptions options_;
    mutable std::mutex model_mutex_;
    std::shared_ptr<PartModel> model_;
    SessionStore store_;
};

/// HTTP front end: every route of Service plus OPTIONS preflight, with
/// permissive cross-origin headers.
class HttpServer {
public:
    explicit HttpServer(Service& service);
    ~HttpServer();

    /// Binds; port 0 picks a free port. Returns the bound port, or -1.
    int bind(const std::string& host, int port);
    /// Blocks until stop().
    void listen();
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace partdiff
