#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "smokegen/corpus.hpp"

namespace smokegen::curation {

enum class ScorerKind { human, mllm, mock };

std::string to_string(ScorerKind k);
ScorerKind parse_scorer(const std::string& s);

inline constexpr double kColorWeight = 0.5;
inline constexpr double kVisibilityWeight = 0.3;
inline constexpr double kTranslucencyWeight = 0.2;

/// 0.5 color + 0.3 visibility + 0.2 translucency; inputs must lie in [0, 10].
double weighted_score(double color, double visibility, double translucency);

struct ScoreRecord {
    std::string sample_id;
    double color = 0, visibility = 0, translucency = 0;
    double weighted = 0;
    ScorerKind scorer = ScorerKind::mock;
    bool clamped = false;
    bool quarantined = false;

    static ScoreRecord make(std::string id, double c, double v, double t, ScorerKind k);
    std::string to_json_line() const;
    static ScoreRecord from_json_line(const std::string& line);
};

void write_scores(const std::vector<ScoreRecord>& records, const std::filesystem::path& path);
std::vector<ScoreRecord> read_scores(const std::filesystem::path& path);

struct ScoreTriple {
    double color = 0, visibility = 0, translucency = 0;
};

struct ScoreInput {
    const RgbImage& image;
    const BinaryMask* mask;  // may be null
    const std::string& prompt;
};

class ScorerClient {
public:
    virtual ~ScorerClient() = default;
    /// May throw TransportError; values outside [0, 10] are clamped by the caller.
    virtual ScoreTriple score(const ScoreInput& input) = 0;
    virtual ScorerKind kind() const { return ScorerKind::mllm; }
};

/// Deterministic heuristic over the masked region:
///   color        = 10 (1 - |mean gray inside - 200| / 200)
///   visibility   = 10 clamp(|mean inside - mean outside| / 255)
///   translucency = 10 var(edge band) / (var(edge band) + var(interior))
class MockScorer final : public ScorerClient {
public:
    ScoreTriple score(const ScoreInput& input) override;
    ScorerKind kind() const override { return ScorerKind::mock; }
};

/// Multimodal scorer behind HTTP: POST {"image_png", "mask_png", "prompt"}
/// with base64 PNGs, reply {"color", "visibility", "translucency"}.
class HttpScorer final : public ScorerClient {
public:
    explicit HttpScorer(std::string endpoint, int timeout_s = 120)
        : endpoint_(std::move(endpoint)), timeout_s_(timeout_s) {}
    ScoreTriple score(const ScoreInput& input) override;

private:
    std::string endpoint_;
    int timeout_s_;
};

std::string default_scoring_prompt();

using ScorerFactory = std::function<std::unique_ptr<ScorerClient>()>;

struct ScoreOptions {
    int workers = 1;
    int retries = 2;
    int outage_after = 5;  // consecutive failed samples that count as an outage
    std::string prompt = default_scoring_prompt();
    std::filesystem::path partial_path;  // crash-safe append log; empty disables
};

/// One record per manifest entry in manifest order. Records already present
/// in the partial file are reused unless quarantined. Persistent failure throws TransportError
/// with the partial file left intact.
std::vector<ScoreRecord> score_candidates(const corpus::Manifest& manifest, const ScorerFactory& factory,
                                          const ScoreOptions& opts = {});

/// Highest weighted first, ties by sample id; keeps ceil(fraction * N).
std::vector<ScoreRecord> select_top(std::vector<ScoreRecord> records, double fraction = 0.5);

/// The selected records' manifest entries, in rank order.
corpus::Manifest select_manifest(const std::vector<ScoreRecord>& records, const corpus::Manifest& manifest,
                                 double fraction = 0.5);

struct FinetuneSummary {
    std::size_t written = 0;
    std::vector<std::string> dangling;   // ids absent from the manifest
    std::vector<std::string> invalid;    // ids with out-of-range scores
    std::vector<std::string> conflicts;  // ids annotated more than once
};

/// One {image_path, prompt, response} line per annotated sample. Duplicate
/// ids keep their first position and their last scores.
FinetuneSummary assemble_finetune_set(const std::vector<ScoreRecord>& annotations, const corpus::Manifest& manifest,
                                      const std::filesystem::path& out_path,
                                      const std::string& prompt = default_scoring_prompt());

}  // namespace smokegen::curation
