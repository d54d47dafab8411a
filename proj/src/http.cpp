#include "smokegen/http.hpp"

#include <httplib.h>

#include "smokegen/error.hpp"

namespace smokegen {

namespace {

struct Endpoint {
    std::string origin;
    std::string path;
};

Endpoint split_endpoint(const std::string& url) {
    const auto scheme = url.find("://");
    const auto slash = url.find('/', scheme == std::string::npos ? 0 : scheme + 3);
    if (slash == std::string::npos) return {url, "/"};
    return {url.substr(0, slash), url.substr(slash)};
}

}  // namespace

nlohmann::json post_json(const std::string& endpoint, const nlohmann::json& body, int timeout_s) {
    const auto ep = split_endpoint(endpoint);
    httplib::Client cli(ep.origin);
    if (!cli.is_valid()) throw TransportError(endpoint + ": unsupported endpoint");
    cli.set_connection_timeout(timeout_s);
    cli.set_read_timeout(timeout_s);
    auto res = cli.Post(ep.path, body.dump(), "application/json");
    if (!res) throw TransportError(endpoint + ": " + httplib::to_string(res.error()));
    if (res->status != 200) throw TransportError(endpoint + ": HTTP " + std::to_string(res->status));
    try {
        return nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::exception& e) {
        throw TransportError(endpoint + ": malformed response: " + e.what());
    }
}

}  // namespace smokegen
