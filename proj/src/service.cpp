#include "partdiff/service.hpp"

#include <httplib.h>

#include <algorithm>
#include <cmath>
#include <regex>

namespace partdiff {

namespace {

constexpr int kMaxClouds = 32;

ServiceError bad_request(const std::string& message) { return ServiceError(400, message); }

template <typename T>
T field(const nlohmann::json& body, const char* key) {
    if (!body.is_object() || !body.contains(key)) throw bad_request(std::string("missing field '") + key + "'");
    try {
        return body.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw bad_request(std::string("field '") + key + "' has the wrong type");
    }
}

template <typename T>
T field_or(const nlohmann::json& body, const char* key, T fallback) {
    if (!body.is_object() || !body.contains(key) || body.at(key).is_null()) return fallback;
    return field<T>(body, key);
}

nlohmann::json transforms_json(const TransformSet& set, const std::vector<std::string>& names) {
    auto out = nlohmann::json::array();
    for (int j = 0; j < set.size(); ++j) {
        const auto ju = static_cast<std::size_t>(j);
        out.push_back({{"part", j},
                       {"name", ju < names.size() ? names[ju] : "part" + std::to_string(j)},
                       {"present", static_cast<bool>(set.present[ju])},
                       {"shift", set.transforms[ju].shift},
                       {"scale", set.transforms[ju].scale}});
    }
    return out;
}

nlohmann::json edit_json(const EditResult& r, const std::vector<std::string>& names) {
    auto j = cloud_to_wire(r.cloud);
    j["transforms"] = transforms_json(r.transforms, names);
    return j;
}

int part_index(const nlohmann::json& value, int m) {
    int part = 0;
    if (value.is_number_integer()) {
        part = value.get<int>();
    } else if (value.is_string()) {
        const auto& s = value.get_ref<const std::string&>();
        std::size_t used = 0;
        try {
            part = std::stoi(s, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != s.size() || s.empty()) throw bad_request("invalid part index '" + s + "'");
    } else {
        throw bad_request("part index must be an integer");
    }
    if (part < 0 || part >= m) throw bad_request("invalid part index " + std::to_string(part));
    return part;
}

/// Locks distinct entries in address order so concurrent multi-session edits cannot deadlock.
std::vector<std::unique_lock<std::mutex>> lock_all(std::vector<std::shared_ptr<SessionStore::Entry>> entries) {
    std::sort(entries.begin(), entries.end());
    entries.erase(std::unique(entries.begin(), entries.end()), entries.end());
    std::vector<std::unique_lock<std::mutex>> locks;
    for (auto& e : entries) locks.emplace_back(e->mutex);
    return locks;
}

}  // namespace

nlohmann::json cloud_to_wire(const SegmentedCloud& cloud) {
    std::vector<double> flat;
    flat.reserve(cloud.size() * 3);
    for (const auto& p : cloud.points()) flat.insert(flat.end(), p.begin(), p.end());
    return {{"points", flat}, {"labels", cloud.labels()}, {"m", cloud.part_count()}};
}

SegmentedCloud cloud_from_wire(const nlohmann::json& j, const std::string& class_id) {
    const auto flat = field<std::vector<double>>(j, "points");
    const auto labels = field<std::vector<int>>(j, "labels");
    const auto m = field<int>(j, "m");
    if (flat.size() != 3 * labels.size()) throw bad_request("points and labels disagree in length");
    if (m < 1) throw bad_request("m must be positive");
    PointSet points(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) points[i] = {flat[3 * i], flat[3 * i + 1], flat[3 * i + 2]};
    try {
        return SegmentedCloud(std::move(points), labels, m, class_id);
    } catch (const std::invalid_argument& e) {
        throw bad_request(e.what());
    }
}

SessionStore::SessionStore(std::size_t capacity) : capacity_(std::max<std::size_t>(capacity, 1)) {}

std::string SessionStore::insert(EditSession session) {
    std::lock_guard lock(mutex_);
    const auto id = "s" + std::to_string(next_id_++);
    auto entry = std::make_shared<Entry>();
    entry->session = std::move(session);
    order_.push_front(id);
    entries_[id] = {entry, order_.begin()};
    while (entries_.size() > capacity_) {
        const auto victim = order_.back();
        order_.pop_back();
        entries_.erase(victim);
        evicted_.insert(victim);
    }
    return id;
}

std::shared_ptr<SessionStore::Entry> SessionStore::get(const std::string& id) {
    std::lock_guard lock(mutex_);
    auto it = entries_.find(id);
    if (it == entries_.end()) {
        if (evicted_.count(id)) throw ServiceError(410, "session " + id + " was evicted");
        throw ServiceError(404, "unknown session " + id);
    }
    order_.splice(order_.begin(), order_, it->second.second);
    return it->second.first;
}

std::size_t SessionStore::size() const {
    std::lock_guard lock(mutex_);
    return entries_.size();
}

Service::Service(ServiceOptions options) : options_(options), store_(options.max_sessions) {}

void Service::set_model(std::shared_ptr<PartModel> model) {
    model->train(false);
    std::lock_guard lock(model_mutex_);
    model_ = std::move(model);
}

std::shared_ptr<PartModel> Service::model() const {
    std::lock_guard lock(model_mutex_);
    return model_;
}

Response Service::route_request(const std::string& method, const std::string& path, const nlohmann::json& body) {
    try {
        auto model = this->model();
        if (!model) throw ServiceError(503, "checkpoint is loading");
        return dispatch(*model, method, path, body);
    } catch (const ServiceError& e) {
        return {e.status, {{"error", e.what()}}};
    } catch (const nlohmann::json::exception& e) {
        return {400, {{"error", std::string("malformed request: ") + e.what()}}};
    } catch (const std::invalid_argument& e) {
        return {400, {{"error", e.what()}}};
    } catch (const std::out_of_range& e) {
        return {400, {{"error", e.what()}}};
    } catch (const std::exception& e) {
        return {500, {{"error", e.what()}}};
    }
}

Response Service::dispatch(PartModel& model, const std::string& method, const std::string& path,
                           const nlohmann::json& body) {
    static const std::regex session_op("^/sessions/([A-Za-z0-9_-]+)/(resample|mix|interpolate|transform)$");
    if (path == "/meta") {
        if (method != "GET") throw ServiceError(405, "use GET for /meta");
        return meta(model);
    }
    std::smatch match;
    const bool session_route = std::regex_match(path, match, session_op);
    if (path != "/generate" && path != "/sessions" && !session_route) {
        throw ServiceError(404, "no route " + method + " " + path);
    }
    if (method != "POST") throw ServiceError(405, "use POST for " + path);
    if (!body.is_object()) throw bad_request("request body must be a JSON object");
    if (path == "/generate") return generate(model, body);
    if (path == "/sessions") return create_session(model, body);
    {
        const auto id = match[1].str();
        const auto op = match[2].str();
        if (op == "resample") return resample(model, id, body);
        if (op == "mix") return mix(model, id, body);
        if (op == "interpolate") return interpolate(model, id, body);
        return transform(model, id, body);
    }
}

void Service::check_points(long long count) const {
    if (count > options_.point_cap) {
        throw bad_request("cloud of " + std::to_string(count) + " points exceeds the cap of " +
                          std::to_string(options_.point_cap));
    }
}

Response Service::meta(const PartModel& model) const {
    const auto& c = model.config;
    return {200,
            {{"class_id", c.class_id},
             {"m", c.m},
             {"part_names", c.part_names},
             {"point_budget", c.point_budget},
             {"profile", c.profile},
             {"steps", c.steps},
             {"latent_dim", c.stylizer.latent_dim},
             {"noise_dim", c.sampler.noise_dim},
             {"point_cap", options_.point_cap},
             {"max_sessions", store_.capacity()}}};
}

Response Service::generate(PartModel& model, const nlohmann::json& body) {
    GenerateOptions o;
    o.n = field_or<int>(body, "n", 1);
    if (o.n < 1 || o.n > kMaxClouds) throw bad_request("n must be in [1, " + std::to_string(kMaxClouds) + "]");
    o.part_counts = field_or<std::vector<int>>(body, "part_counts", {});
    if (!o.part_counts.empty()) {
        if (static_cast<int>(o.part_counts.size()) != model.config.m) throw bad_request("part_counts needs m entries");
        for (int c : o.part_counts) {
            if (c < 0) throw bad_request("part counts must be non-negative");
            o.present.push_back(c > 0);
        }
    }
    long long total = 0;
    for (int c : o.part_counts) total += c;
    check_points(o.part_counts.empty() ? model.config.point_budget : total);
    auto gen = make_generator(field_or<std::uint64_t>(body, "seed", 0));
    auto result = partdiff::generate(model, o, gen);
    auto clouds = nlohmann::json::array();
    for (std::size_t i = 0; i < result.clouds.size(); ++i) {
        auto j = cloud_to_wire(result.clouds[i]);
        j["transforms"] = transforms_json(transform_set(result.tau[static_cast<int64_t>(i)], result.clouds[i].presence()),
                                          model.config.part_names);
        clouds.push_back(std::move(j));
    }
    return {200, clouds};
}

Response Service::create_session(PartModel& model, const nlohmann::json& body) {
    if (!body.contains("cloud")) throw bad_request("missing field 'cloud'");
    auto cloud = cloud_from_wire(body.at("cloud"), model.config.class_id);
    if (cloud.part_count() != model.config.m) {
        throw bad_request("cloud has m = " + std::to_string(cloud.part_count()) + ", the model expects " +
                          std::to_string(model.config.m));
    }
    if (cloud.size() == 0) throw bad_request("cloud has no points");
    check_points(static_cast<long long>(cloud.size()));
    auto session = encode_shape(model, cloud);
    auto parts = nlohmann::json::array();
    for (int j = 0; j < model.config.m; ++j) {
        const auto ju = static_cast<std::size_t>(j);
        parts.push_back({{"part", j},
                         {"name", model.config.part_names[ju]},
                         {"present", static_cast<bool>(session.present[ju])},
                         {"points", session.part_counts[ju]}});
    }
    auto transforms = transforms_json(session.transforms, model.config.part_names);
    const auto id = store_.insert(std::move(session));
    return {200, {{"session_id", id}, {"parts", parts}, {"transforms", transforms}}};
}

Response Service::resample(PartModel& model, const std::string& id, const nlohmann::json& body) {
    auto entry = store_.get(id);
    std::vector<int> parts;
    if (body.contains("parts")) {
        if (!body.at("parts").is_array()) throw bad_request("field 'parts' must be an array");
        for (const auto& p : body.at("parts")) parts.push_back(part_index(p, model.config.m));
    }
    auto gen = make_generator(field_or<std::uint64_t>(body, "seed", 0));
    std::lock_guard lock(entry->mutex);
    return {200, edit_json(resample_parts(model, entry->session, parts, gen), model.config.part_names)};
}

Response Service::mix(PartModel& model, const std::string& id, const nlohmann::json& body) {
    const auto donor_ids = field<std::vector<std::string>>(body, "donor_session_ids");
    std::vector<std::shared_ptr<SessionStore::Entry>> entries{store_.get(id)};
    for (const auto& d : donor_ids) entries.push_back(store_.get(d));

    // assignment: part -> index into donor_session_ids; unlisted parts stay
    const auto& raw = body.contains("assignment") ? body.at("assignment") : nlohmann::json::object();
    if (!raw.is_object()) throw bad_request("field 'assignment' must be an object");
    std::map<int, int> assignment;
    for (const auto& [key, value] : raw.items()) {
        const int part = part_index(nlohmann::json(key), model.config.m);
        if (!value.is_number_integer()) throw bad_request("assignment values must be donor indices");
        const int donor = value.get<int>();
        if (donor < 0 || donor >= static_cast<int>(donor_ids.size())) {
            throw bad_request("assignment refers to donor " + std::to_string(donor));
        }
        assignment[part] = donor + 1;
    }
    auto gen = make_generator(field_or<std::uint64_t>(body, "seed", 0));
    auto locks = lock_all(entries);
    std::vector<const EditSession*> sessions;
    for (const auto& e : entries) sessions.push_back(&e->session);
    long long total = 0;
    for (int j = 0; j < model.config.m; ++j) {
        auto it = assignment.find(j);
        total += sessions[it == assignment.end() ? 0 : static_cast<std::size_t>(it->second)]->part_counts[static_cast<std::size_t>(j)];
    }
    check_points(total);
    return {200, edit_json(mix_parts(model, sessions, assignment, gen), model.config.part_names)};
}

Response Service::interpolate(PartModel& model, const std::string& id, const nlohmann::json& body) {
    const int part = part_index(body.contains("part") ? body.at("part") : nlohmann::json(), model.config.m);
    const auto target_id = field<std::string>(body, "target_session");
    const int steps = field_or<int>(body, "steps", 10);
    if (steps < 1 || steps + 1 > kMaxClouds) throw bad_request("steps must be in [1, " + std::to_string(kMaxClouds - 1) + "]");
    const auto seed = field_or<std::uint64_t>(body, "seed", 0);
    auto entry = store_.get(id);
    auto target = store_.get(target_id);
    auto locks = lock_all({entry, target});
    if (!target->session.present[static_cast<std::size_t>(part)]) {
        throw bad_request("part " + std::to_string(part) + " is absent in the target session");
    }
    auto frames = interpolate_part(model, entry->session, part, target->session.latents[part], steps, seed);
    auto out = nlohmann::json::array();
    for (const auto& f : frames) out.push_back(edit_json(f, model.config.part_names));
    return {200, out};
}

Response Service::transform(PartModel& model, const std::string& id, const nlohmann::json& body) {
    // constraints: {"<part>": {"shift": [x|null, y|null, z|null], "scale": [...]}}
    if (!body.contains("constraints") || !body.at("constraints").is_object()) {
        throw bad_request("field 'constraints' must be an object keyed by part");
    }
    std::vector<TransformConstraint> constraints;
    for (const auto& [key, spec] : body.at("constraints").items()) {
        const int part = part_index(nlohmann::json(key), model.config.m);
        if (!spec.is_object()) throw bad_request("constraint for part " + key + " must be an object");
        for (const auto& [name, offset] : {std::pair<const char*, int>{"shift", 0}, {"scale", 3}}) {
            if (!spec.contains(name)) continue;
            const auto& values = spec.at(name);
            if (!values.is_array() || values.size() != 3) throw bad_request(std::string(name) + " must have 3 entries");
            for (int a = 0; a < 3; ++a) {
                const auto& v = values[static_cast<std::size_t>(a)];
                if (v.is_null()) continue;
                if (!v.is_number()) throw bad_request(std::string(name) + " entries must be numbers or null");
                constraints.push_back({part, offset + a, v.get<double>()});
            }
        }
    }
    TransformEditOptions opt;
    opt.seed = field_or<std::uint64_t>(body, "seed", 0);
    opt.max_iters = field_or<int>(body, "max_iters", opt.max_iters);
    if (opt.max_iters < 0 || opt.max_iters > 10000) throw bad_request("max_iters must be in [0, 10000]");
    auto entry = store_.get(id);
    std::lock_guard lock(entry->mutex);
    auto r = edit_transform(model, entry->session, constraints, opt);
    auto out = edit_json(r.result, model.config.part_names);
    out["residual"] = r.residual;
    out["converged"] = r.converged;
    out["iterations"] = r.objective.size() - 1;
    return {200, out};
}

struct HttpServer::Impl {
    explicit Impl(Service& s) : service(s) {}
    Service& service;
    httplib::Server server;
};

HttpServer::HttpServer(Service& service) : impl_(std::make_unique<Impl>(service)) {
    auto& srv = impl_->server;
    srv.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                             {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                             {"Access-Control-Allow-Headers", "Content-Type"}});
    auto handle = [this](const httplib::Request& req, httplib::Response& res) {
        nlohmann::json body = nlohmann::json::object();
        Response r;
        if (!req.body.empty()) {
            body = nlohmann::json::parse(req.body, nullptr, false);
        }
        if (body.is_discarded()) {
            r = {400, {{"error", "request body is not valid JSON"}}};
        } else {
            r = impl_->service.route_request(req.method, req.path, body);
        }
        res.status = r.status;
        res.set_content(r.body.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace), "application/json");
    };
    srv.Get(".*", handle);
    srv.Post(".*", handle);
    srv.Options(".*", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
    if (port == 0) return impl_->server.bind_to_any_port(host);
    return impl_->server.bind_to_port(host, port) ? port : -1;
}

void HttpServer::listen() { impl_->server.listen_after_bind(); }

void HttpServer::stop() {
    if (impl_) impl_->server.stop();
}

}  // namespace partdiff
