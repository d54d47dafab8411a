#pragma once

#include <string>

#include <json.hpp>

namespace smokegen {

/// POST a JSON body to "http://host:port/path" and parse the JSON reply.
/// Connection failures, non-200 replies and malformed bodies throw
/// TransportError.
nlohmann::json post_json(const std::string& endpoint, const nlohmann::json& body, int timeout_s = 60);

}  // namespace smokegen
