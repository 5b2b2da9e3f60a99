#pragma once

#include <string>

#include <json.hpp>

#include "resgcn/common.hpp"

namespace resgcn {

// Structural validation against the subset of JSON Schema the shipped schema
// files use: type, required, properties, items, enum.
inline bool validate_json(const nlohmann::json& schema, const nlohmann::json& doc,
                          std::string* error = nullptr, const std::string& where = "$") {
    auto fail = [&](const std::string& why) {
        if (error) *error = where + ": " + why;
        return false;
    };
    if (schema.contains("type")) {
        const std::string type = schema.at("type").get<std::string>();
        const bool ok = (type == "object" && doc.is_object()) || (type == "array" && doc.is_array()) ||
                        (type == "string" && doc.is_string()) ||
                        (type == "integer" && doc.is_number_integer()) ||
                        (type == "number" && doc.is_number()) ||
                        (type == "boolean" && doc.is_boolean());
        if (!ok) return fail("expected " + type + ", got " + std::string(doc.type_name()));
    }
    if (schema.contains("enum")) {
        bool found = false;
        for (const auto& v : schema.at("enum"))
            if (v == doc) {
                found = true;
                break;
            }
        if (!found) return fail("value not in enum");
    }
    if (doc.is_object()) {
        if (schema.contains("required"))
            for (const auto& key : schema.at("required"))
                if (!doc.contains(key.get<std::string>()))
                    return fail("missing required key '" + key.get<std::string>() + "'");
        if (schema.contains("properties"))
            for (const auto& [key, sub] : schema.at("properties").items())
                if (doc.contains(key))
                    if (!validate_json(sub, doc.at(key), error, where + "." + key)) return false;
    }
    if (doc.is_array() && schema.contains("items")) {
        const auto& sub = schema.at("items");
        for (std::size_t i = 0; i < doc.size(); ++i)
            if (!validate_json(sub, doc[i], error, where + "[" + std::to_string(i) + "]")) return false;
    }
    return true;
}

inline nlohmann::json load_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("json: cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw parse_error("json " + path + ": " + e.what());
    }
    return j;
}

}  // namespace resgcn
