#pragma once

// Local HTTP service backing the human scoring UI.

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "smokegen/corpus.hpp"
#include "smokegen/curation.hpp"

namespace smokegen::annotate {

/// Append-only JSONL of human scores. Every accepted write is fsynced
/// before `put` returns; reopening replays the file, last line per id wins.
class AnnotationStore {
public:
    explicit AnnotationStore(std::filesystem::path path);

    struct PutResult {
        bool conflict = false;  // the id had been scored before
    };
    PutResult put(const curation::ScoreRecord& record);

    std::optional<curation::ScoreRecord> get(const std::string& id) const;
    std::size_t size() const;
    const std::filesystem::path& path() const { return path_; }
    /// Overwrites are logged here, one JSON line per conflict.
    std::filesystem::path conflict_log() const;

private:
    std::filesystem::path path_;
    mutable std::mutex mu_;
    std::map<std::string, curation::ScoreRecord> records_;
};

struct FieldError {
    std::string field;
    std::string message;
};

/// Checks a POST /api/score body. Scores must be numbers in [0, 10].
std::vector<FieldError> validate_score_body(const std::string& body);

class AnnotationServer {
public:
    AnnotationServer(corpus::Manifest manifest, std::filesystem::path store_path,
                     std::filesystem::path static_dir = {});
    ~AnnotationServer();
    AnnotationServer(const AnnotationServer&) = delete;
    AnnotationServer& operator=(const AnnotationServer&) = delete;

    /// Binds and returns the port; port 0 picks a free one.
    int bind(const std::string& host = "127.0.0.1", int port = 0);
    /// Serves until stop(); blocks.
    void listen();
    void stop();

    std::size_t scored() const;
    std::size_t total() const { return manifest_.size(); }

private:
    struct Impl;
    corpus::Manifest manifest_;
    AnnotationStore store_;
    std::unique_ptr<Impl> impl_;
};

}  // namespace smokegen::annotate
