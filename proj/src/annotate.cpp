#include "smokegen/annotate.hpp"

#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <sstream>

#include <httplib.h>
#include <json.hpp>

#include "smokegen/error.hpp"
#include "smokegen/util.hpp"

namespace smokegen::annotate {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

AnnotationStore::AnnotationStore(std::filesystem::path path) : path_(std::move(path)) {
    if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
    for (const auto& line : read_lines(path_)) {
        try {
            auto r = curation::ScoreRecord::from_json_line(line);
            records_.insert_or_assign(r.sample_id, r);
        } catch (const InvalidInput&) {
            log_warn("annotation store: skipping unreadable line in " + path_.string());
        }
    }
}

std::filesystem::path AnnotationStore::conflict_log() const {
    return path_.parent_path() / (path_.stem().string() + ".conflicts.jsonl");
}

AnnotationStore::PutResult AnnotationStore::put(const curation::ScoreRecord& record) {
    std::lock_guard lock(mu_);
    PutResult res;
    auto it = records_.find(record.sample_id);
    if (it != records_.end()) {
        res.conflict = true;
        ordered_json j;
        j["id"] = record.sample_id;
        j["previous"] = json::parse(it->second.to_json_line());
        j["replacement"] = json::parse(record.to_json_line());
        append_line_durable(conflict_log(), j.dump());
    }
    append_line_durable(path_, record.to_json_line());
    records_.insert_or_assign(record.sample_id, record);
    return res;
}

std::optional<curation::ScoreRecord> AnnotationStore::get(const std::string& id) const {
    std::lock_guard lock(mu_);
    auto it = records_.find(id);
    if (it == records_.end()) return std::nullopt;
    return it->second;
}

std::size_t AnnotationStore::size() const {
    std::lock_guard lock(mu_);
    return records_.size();
}

std::vector<FieldError> validate_score_body(const std::string& body) {
    std::vector<FieldError> errors;
    json j;
    try {
        j = json::parse(body);
    } catch (const json::exception&) {
        return {{"body", "not valid JSON"}};
    }
    if (!j.is_object()) return {{"body", "expected a JSON object"}};
    if (!j.contains("id") || !j["id"].is_string() || j["id"].get<std::string>().empty())
        errors.push_back({"id", "required string"});
    for (const char* f : {"color", "visibility", "translucency"}) {
        if (!j.contains(f) || !j[f].is_number()) {
            errors.push_back({f, "required number"});
            continue;
        }
        const double v = j[f].get<double>();
        if (!std::isfinite(v) || v < 0.0 || v > 10.0) errors.push_back({f, "must be within [0, 10]"});
    }
    return errors;
}

namespace {

std::string content_type(const std::filesystem::path& p) {
    const std::string ext = to_lower(p.extension().string());
    if (ext == ".png") return "image/png";
    if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
    return "application/octet-stream";
}

std::string read_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw InvalidInput("cannot read " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void send_json(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

}  // namespace

struct AnnotationServer::Impl {
    httplib::Server server;
    std::map<std::string, std::size_t> index;
};

AnnotationServer::AnnotationServer(corpus::Manifest manifest, std::filesystem::path store_path,
                                   std::filesystem::path static_dir)
    : manifest_(std::move(manifest)), store_(std::move(store_path)), impl_(std::make_unique<Impl>()) {
    for (std::size_t i = 0; i < manifest_.size(); ++i) impl_->index.emplace(manifest_.records[i].id, i);
    auto& srv = impl_->server;

    srv.Get("/api/queue", [this](const httplib::Request& req, httplib::Response& res) {
        long n = 10;
        if (req.has_param("n")) {
            try {
                n = std::stol(req.get_param_value("n"));
            } catch (const std::exception&) {
                n = -1;
            }
            if (n < 0) {
                send_json(res, 422, {{"errors", {{{"field", "n"}, {"message", "must be a non-negative integer"}}}}});
                return;
            }
        }
        json items = json::array();
        for (const auto& r : manifest_.records) {
            if (static_cast<long>(items.size()) >= n) break;
            if (store_.get(r.id)) continue;
            json d{{"id", r.id}, {"image_url", "/images/" + r.id}};
            d["mask_url"] = r.mask_path ? json("/images/" + r.id + "?mask=1") : json(nullptr);
            items.push_back(d);
        }
        send_json(res, 200, items);
    });

    srv.Get(R"(/images/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
        const std::string id = req.matches[1];
        auto it = impl_->index.find(id);
        if (it == impl_->index.end()) {
            send_json(res, 404, {{"error", "unknown id"}});
            return;
        }
        const auto& rec = manifest_.records[it->second];
        const bool want_mask = req.has_param("mask") && req.get_param_value("mask") == "1";
        if (want_mask && !rec.mask_path) {
            send_json(res, 404, {{"error", "sample has no mask"}});
            return;
        }
        const auto path = manifest_.resolve(want_mask ? *rec.mask_path : rec.image_path);
        try {
            res.set_content(read_bytes(path), content_type(path));
        } catch (const Error&) {
            send_json(res, 404, {{"error", "image file missing"}});
        }
    });

    srv.Post("/api/score", [this](const httplib::Request& req, httplib::Response& res) {
        auto errors = validate_score_body(req.body);
        if (!errors.empty()) {
            json list = json::array();
            for (const auto& e : errors) list.push_back({{"field", e.field}, {"message", e.message}});
            send_json(res, 422, {{"errors", list}});
            return;
        }
        const json j = json::parse(req.body);
        const std::string id = j["id"];
        if (!impl_->index.count(id)) {
            send_json(res, 404, {{"error", "unknown id"}});
            return;
        }
        auto rec = curation::ScoreRecord::make(id, j["color"].get<double>(), j["visibility"].get<double>(),
                                               j["translucency"].get<double>(), curation::ScorerKind::human);
        const auto put = store_.put(rec);
        send_json(res, 201, {{"id", id}, {"weighted", rec.weighted}, {"overwritten", put.conflict}});
    });

    srv.Get("/api/progress", [this](const httplib::Request&, httplib::Response& res) {
        send_json(res, 200, {{"scored", scored()}, {"total", total()}});
    });

    if (!static_dir.empty()) srv.set_mount_point("/", static_dir.string());
}

AnnotationServer::~AnnotationServer() { stop(); }

int AnnotationServer::bind(const std::string& host, int port) {
    int bound = port == 0 ? impl_->server.bind_to_any_port(host) : (impl_->server.bind_to_port(host, port) ? port : -1);
    if (bound < 0) throw InvalidConfig("cannot bind " + host + ":" + std::to_string(port));
    return bound;
}

void AnnotationServer::listen() { impl_->server.listen_after_bind(); }

void AnnotationServer::stop() {
    if (impl_) impl_->server.stop();
}

std::size_t AnnotationServer::scored() const {
    std::size_t n = 0;
    for (const auto& r : manifest_.records)
        if (store_.get(r.id)) ++n;
    return n;
}

}  // namespace smokegen::annotate
